use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tlode::config::{ExperimentConfig, ExperimentKind};
use tlode::experiments::{
    convergence, enclosure_audit, integrate_sweep, learn_stiff_data, learn_stiff_jobs, summarize, train_known_midpoint,
    train_known_residual, write_audit_csv, write_convergence_csv, write_integrate_csv, write_summary_csv,
    KnownStiffModels,
};
use tlode::model_io::{
    load_model, load_model_for, save_model, ModelError, ModelFile, ModelKind, ModelMetadata, EXTENSION,
};
use tlode::parallel::{init_from_env, Parallelism};
use tlode::training::{train, Models, TrainingLog};
use tlode::{MidpointModel, Mlp, Scheme, VectorField};

#[derive(Parser)]
#[command(name = "tlode", version, about = "Taylor-Lagrange ODE integration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted keys take the experiment's preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Run a built-in preset instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate sampled initial states with every configured scheme.
    Integrate {
        #[command(flatten)]
        common: Common,
        /// Directory with trained midpoint/residual files (default: output dir).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Train midpoint or NODE models and write their logs.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// One-step error sweep over the configured step sizes.
    Convergence {
        #[command(flatten)]
        common: Common,
    },
    /// Check reference solutions against the a priori enclosure.
    EnclosureAudit {
        #[command(flatten)]
        common: Common,
    },
    /// Model file utilities.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Print metadata and topology of a model file.
    Inspect {
        path: PathBuf,
        /// Also check the networks against this state dimension.
        #[arg(long)]
        dim: Option<usize>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl fmt::Display) -> Self {
        Failure {
            code: 4,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<tlode::Error> for Failure {
    fn from(e: tlode::Error) -> Self {
        use tlode::Error as E;
        let code = match &e {
            E::Config(_) | E::Shape(_) | E::Domain(_) | E::NotSmooth { .. } | E::OracleOrder(_) => 2,
            E::Io(_) | E::Csv(_) | E::Model(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(common: &Common, default: ExperimentKind) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
            ExperimentConfig::from_json(&text)?
        }
        (None, Some(name)) => {
            let kind: ExperimentKind =
                serde_json::from_value(json!(name)).map_err(|_| Failure::config(format!("unknown preset `{name}`")))?;
            ExperimentConfig::preset(kind)
        }
        (None, None) => ExperimentConfig::preset(default),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.output.dir).map_err(|e| Failure::io(&cfg.output.dir, e))?;
    Ok(cfg)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::io(path, e))
}

fn model_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.{EXTENSION}"))
}

fn save(path: &Path, model: &ModelFile) -> CliResult<()> {
    save_model(path, model).map_err(|e| Failure::io(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn save_log(path: &Path, log: &TrainingLog) -> CliResult<()> {
    log.write_csv(create(path)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_for(path: &Path, n: usize) -> CliResult<ModelFile> {
    if !path.exists() {
        return Err(Failure::io(
            path,
            "missing model file; run `tlode train` with the same config first",
        ));
    }
    load_model_for(path, n).map_err(|e| Failure::io(path, e))
}

fn metadata(cfg: &ExperimentConfig, kind: ModelKind, dt: f64, midpoint: Option<&MidpointModel>) -> ModelMetadata {
    let (output_shape, encoding) = match midpoint {
        Some(MidpointModel::Learned(m)) => (Some(m.shape), m.encoding),
        _ => (None, cfg.training.encoding),
    };
    ModelMetadata {
        kind,
        n: cfg.system.dim(),
        p: cfg.integrator.p,
        dt,
        output_shape,
        encoding,
        seed: cfg.seed,
    }
}

fn midpoint_file(cfg: &ExperimentConfig, h: f64, m: &MidpointModel) -> CliResult<ModelFile> {
    let MidpointModel::Learned(l) = m else {
        return Err(Failure::config("only learned midpoints are saved"));
    };
    Ok(ModelFile {
        metadata: metadata(cfg, ModelKind::Midpoint, h, Some(m)),
        networks: vec![("midpoint".into(), l.net.clone())],
    })
}

fn node_file(cfg: &ExperimentConfig, p: usize, models: &Models) -> ModelFile {
    let mut meta = metadata(cfg, ModelKind::Node, cfg.training.dt, models.midpoint.as_ref());
    meta.p = p;
    let mut networks = Vec::new();
    if let VectorField::Mlp(net) = &models.field {
        networks.push(("dynamics".to_string(), net.clone()));
    }
    if let Some(MidpointModel::Learned(m)) = &models.midpoint {
        networks.push(("midpoint".to_string(), m.net.clone()));
    }
    ModelFile {
        metadata: meta,
        networks,
    }
}

fn tl_horizons(cfg: &ExperimentConfig) -> Vec<f64> {
    cfg.training
        .tl_horizons
        .clone()
        .unwrap_or_else(|| cfg.integrator.horizons.clone())
}

fn cmd_train(common: &Common) -> CliResult<()> {
    let cfg = load_config(common, ExperimentKind::LearnStiff)?;
    let dir = cfg.output.dir.clone();
    match cfg.experiment {
        ExperimentKind::KnownStiff => {
            let schemes = &cfg.integrator.schemes;
            if schemes.contains(&Scheme::TaylorLagrange) {
                for h in tl_horizons(&cfg) {
                    let (m, log) = train_known_midpoint(&cfg, h, Parallelism::Auto)?;
                    save(
                        &model_path(&dir, &format!("midpoint-h{h}")),
                        &midpoint_file(&cfg, h, &m)?,
                    )?;
                    save_log(&dir.join(format!("log-midpoint-h{h}.csv")), &log)?;
                }
            }
            if schemes.contains(&Scheme::HyperEuler) {
                for &h in &cfg.integrator.horizons {
                    let (net, log) = train_known_residual(&cfg, h, Parallelism::Auto)?;
                    let file = ModelFile {
                        metadata: metadata(&cfg, ModelKind::Residual, h, None),
                        networks: vec![("residual".into(), net)],
                    };
                    save(&model_path(&dir, &format!("residual-h{h}")), &file)?;
                    save_log(&dir.join(format!("log-residual-h{h}.csv")), &log)?;
                }
            }
            Ok(())
        }
        ExperimentKind::LearnStiff => {
            let (train_set, test_set) = learn_stiff_data(&cfg)?;
            for job in learn_stiff_jobs(&cfg)? {
                let name = job.scheme.name();
                let p = job.schedule.p;
                match train(&job.schedule, &train_set, &test_set, job.init, Parallelism::Auto) {
                    Ok(out) => {
                        save(
                            &model_path(&dir, &format!("node-{name}")),
                            &node_file(&cfg, p, &out.models),
                        )?;
                        save_log(&dir.join(format!("log-{name}.csv")), &out.log)?;
                        match out.log.final_heldout_mse() {
                            Some(mse) => println!("{name}: final held-out mse {mse:e}"),
                            None => println!("{name}: no training steps run"),
                        }
                    }
                    Err(aborted) => {
                        save(
                            &model_path(&dir, &format!("node-{name}.checkpoint")),
                            &node_file(&cfg, p, &aborted.checkpoint),
                        )?;
                        save_log(&dir.join(format!("log-{name}.csv")), &aborted.log)?;
                        return Err(aborted.error.into());
                    }
                }
            }
            Ok(())
        }
        other => Err(Failure::config(format!(
            "`train` runs known-stiff or learn-stiff configs, got {}",
            other.name()
        ))),
    }
}

fn cmd_integrate(common: &Common, models_dir: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(common, ExperimentKind::KnownStiff)?;
    let dir = models_dir.unwrap_or(&cfg.output.dir).to_path_buf();
    let n = cfg.system.dim();
    let mut models = KnownStiffModels::default();
    if cfg.integrator.schemes.contains(&Scheme::TaylorLagrange) {
        for h in tl_horizons(&cfg) {
            let path = model_path(&dir, &format!("midpoint-h{h}"));
            let file = load_for(&path, n)?;
            let mp = file.midpoint().map_err(|e| Failure::io(&path, e))?;
            models.midpoints.push((h, MidpointModel::Learned(mp)));
        }
    }
    if cfg.integrator.schemes.contains(&Scheme::HyperEuler) {
        for &h in &cfg.integrator.horizons {
            let path = model_path(&dir, &format!("residual-h{h}"));
            let file = load_for(&path, n)?;
            let net: Mlp = file
                .network("residual")
                .cloned()
                .ok_or_else(|| Failure::io(&path, ModelError::Format("no residual network".into())))?;
            models.residuals.push((h, net));
        }
    }
    let rows = integrate_sweep(&cfg, &models)?;
    let summary = summarize(&rows);
    let path = cfg.output.dir.join("integrate.csv");
    write_integrate_csv(&rows, create(&path)?)?;
    println!("wrote {}", path.display());
    let path = cfg.output.dir.join("integrate-summary.csv");
    write_summary_csv(&summary, create(&path)?)?;
    println!("wrote {}", path.display());
    for s in &summary {
        println!(
            "{:>16} T-t0={:<6} mean error {:.3e}  mean nfe {:.1}",
            s.scheme.name(),
            s.horizon,
            s.mean_error,
            s.mean_nfe
        );
    }
    Ok(())
}

fn cmd_convergence(common: &Common) -> CliResult<()> {
    let cfg = load_config(common, ExperimentKind::Convergence)?;
    let rows = convergence(&cfg)?;
    let path = cfg.output.dir.join("convergence.csv");
    write_convergence_csv(&rows, create(&path)?)?;
    println!("wrote {}", path.display());
    let mut last = None;
    for r in &rows {
        if last != Some(r.scheme) {
            let slope = r.slope.map(|s| format!("{s:.3}")).unwrap_or_else(|| "exact".into());
            println!("{:>16} p={} slope {slope}", r.scheme.name(), r.p);
            last = Some(r.scheme);
        }
    }
    Ok(())
}

fn cmd_enclosure_audit(common: &Common) -> CliResult<()> {
    let cfg = load_config(common, ExperimentKind::EnclosureAudit)?;
    let report = enclosure_audit(&cfg, Parallelism::Auto)?;
    let path = cfg.output.dir.join("enclosure-audit.csv");
    write_audit_csv(&report, create(&path)?)?;
    println!("wrote {}", path.display());
    println!(
        "{} samples, ‖L‖₂ = {:.4e}, enclosure violations {}, bound violations {}",
        report.rows.len(),
        report.lipschitz_norm,
        report.enclosure_violations(),
        report.bound_violations()
    );
    if report.enclosure_violations() + report.bound_violations() > 0 {
        return Err(Failure {
            code: 3,
            message: "enclosure audit found violations".into(),
        });
    }
    Ok(())
}

fn cmd_inspect(path: &Path, dim: Option<usize>) -> CliResult<()> {
    let model = match dim {
        Some(n) => load_model_for(path, n),
        None => load_model(path),
    }
    .map_err(|e| Failure::io(path, e))?;
    let m = &model.metadata;
    let networks: Vec<_> = model
        .networks
        .iter()
        .map(|(role, net)| {
            let mut sizes = vec![net.input_dim()];
            sizes.extend(net.layers().iter().map(|l| l.outputs()));
            json!({
                "role": role,
                "sizes": sizes,
                "parameters": net.param_count(),
            })
        })
        .collect();
    let out = json!({
        "kind": m.kind,
        "n": m.n,
        "p": m.p,
        "dt": m.dt,
        "output_shape": m.output_shape,
        "encoding": m.encoding,
        "seed": m.seed,
        "networks": networks,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json value serializes"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_from_env();
    let result = match &cli.command {
        Command::Integrate { common, models } => cmd_integrate(common, models.as_deref()),
        Command::Train { common } => cmd_train(common),
        Command::Convergence { common } => cmd_convergence(common),
        Command::EnclosureAudit { common } => cmd_enclosure_audit(common),
        Command::Model {
            command: ModelCommand::Inspect { path, dim },
        } => cmd_inspect(path, *dim),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
