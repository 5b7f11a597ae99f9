//! Drivers for the stiff-system experiments, the convergence sweep and the
//! enclosure audit, plus their CSV tables.

use std::io::Write;
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::dynamics::{Activation, Mlp, VectorField};
use crate::enclosure::{apriori_enclosure, gronwall_variation_bound, max_enclosure_step};
use crate::error::{Error, Result};
use crate::integrators::{dopri5_adaptive, integrate, normalized_error, IntegratorConfig, Scheme, StepModel};
use crate::midpoint::{GammaShape, LearnedMidpoint, MidpointModel};
use crate::parallel::{map_indexed, Parallelism};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{train, Dataset, Models, Record, TrainingConfig, TrainingLog};

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

/// Uniform samples from `[−half, half]ⁿ`.
pub fn sample_states(n: usize, count: usize, half: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let lo = vec![-half; n];
    let hi = vec![half; n];
    (0..count).map(|_| rng.uniform_vec(&lo, &hi)).collect()
}

/// One-interval records `(x₀, 0, h, expm(A h) x₀)` for uniformly sampled
/// states.
pub fn linear_one_step_dataset(a: &Tensor, horizon: f64, count: usize, half: f64, rng: &mut Rng) -> Result<Dataset> {
    let phi = a.scale(horizon).expm()?;
    let records = sample_states(a.rows(), count, half, rng)
        .into_iter()
        .map(|x0| {
            let y = phi.matvec(&x0)?;
            Ok(Record {
                x0,
                t0: 0.0,
                t1: horizon,
                y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records)
}

fn horizon_key(h: f64) -> String {
    format!("{h}")
}

/// Companion-only schedule: `epochs` passes over `records` records.
fn companion_schedule(cfg: &ExperimentConfig, scheme: Scheme, epochs: usize, records: usize) -> TrainingConfig {
    let s = &cfg.training.schedule;
    TrainingConfig {
        n_train: 1,
        n_theta: 0,
        n_phi: epochs * records.div_ceil(s.batch_size),
        distill: false,
        scheme,
        p: cfg.integrator.p,
        steps: cfg.integrator.steps,
        seed: cfg.seed,
        eval_every: s.eval_every.max(1000),
        ..s.clone()
    }
}

/// Trains a midpoint network for the known linear field at `horizon`.
pub fn train_known_midpoint(
    cfg: &ExperimentConfig,
    horizon: f64,
    mode: Parallelism,
) -> Result<(MidpointModel, TrainingLog)> {
    let a = cfg
        .system
        .matrix()?
        .ok_or_else(|| Error::config("known-stiff needs a linear system"))?;
    let n = a.rows();
    let mut rng = Rng::new(cfg.seed).fork(horizon.to_bits());
    let data = linear_one_step_dataset(
        &a,
        horizon,
        cfg.training.train_states,
        cfg.integrator.state_box,
        &mut rng,
    )?;
    let heldout = linear_one_step_dataset(
        &a,
        horizon,
        cfg.integrator.test_states,
        cfg.integrator.state_box,
        &mut rng,
    )?;
    let t = &cfg.training;
    let shape = t.output_shape.unwrap_or_else(|| GammaShape::default_for(n));
    let mut mp = LearnedMidpoint::random(n, t.midpoint_hidden, t.midpoint_activation, shape, &mut rng)?;
    mp.encoding = t.encoding;
    let schedule = companion_schedule(cfg, Scheme::TaylorLagrange, t.epochs, data.len());
    let init = Models {
        field: VectorField::linear(a)?,
        midpoint: Some(MidpointModel::Learned(mp)),
        residual: None,
    };
    let out = train(&schedule, &data, &heldout, init, mode).map_err(|a| a.error)?;
    Ok((out.models.midpoint.expect("midpoint kept"), out.log))
}

/// Trains a HyperEuler residual network for the known linear field.
pub fn train_known_residual(cfg: &ExperimentConfig, horizon: f64, mode: Parallelism) -> Result<(Mlp, TrainingLog)> {
    let a = cfg
        .system
        .matrix()?
        .ok_or_else(|| Error::config("known-stiff needs a linear system"))?;
    let n = a.rows();
    let mut rng = Rng::new(cfg.seed ^ 0x4859_5045_5221).fork(horizon.to_bits());
    let data = linear_one_step_dataset(
        &a,
        horizon,
        cfg.training.train_states,
        cfg.integrator.state_box,
        &mut rng,
    )?;
    let heldout = linear_one_step_dataset(
        &a,
        horizon,
        cfg.integrator.test_states,
        cfg.integrator.state_box,
        &mut rng,
    )?;
    let t = &cfg.training;
    let net = Mlp::random(
        &[n + 1, t.hypereuler_hidden, n],
        &[Activation::Relu, Activation::Identity],
        true,
        &mut rng,
    )?;
    let schedule = companion_schedule(cfg, Scheme::HyperEuler, t.hypereuler_epochs, data.len());
    let init = Models {
        field: VectorField::linear(a)?,
        midpoint: None,
        residual: Some(net),
    };
    let out = train(&schedule, &data, &heldout, init, mode).map_err(|a| a.error)?;
    Ok((out.models.residual.expect("residual kept"), out.log))
}

/// Learned companions of the known-stiff experiment, keyed by horizon.
#[derive(Clone, Debug, Default)]
pub struct KnownStiffModels {
    pub midpoints: Vec<(f64, MidpointModel)>,
    pub residuals: Vec<(f64, Mlp)>,
    pub logs: Vec<(Scheme, f64, TrainingLog)>,
}

impl KnownStiffModels {
    pub fn midpoint(&self, h: f64) -> Option<&MidpointModel> {
        self.midpoints
            .iter()
            .find(|(k, _)| horizon_key(*k) == horizon_key(h))
            .map(|(_, m)| m)
    }

    pub fn residual(&self, h: f64) -> Option<&Mlp> {
        self.residuals
            .iter()
            .find(|(k, _)| horizon_key(*k) == horizon_key(h))
            .map(|(_, m)| m)
    }
}

/// Trains every companion the configured schemes need.
pub fn train_known_stiff(cfg: &ExperimentConfig, mode: Parallelism) -> Result<KnownStiffModels> {
    let mut models = KnownStiffModels::default();
    let schemes = &cfg.integrator.schemes;
    let tl_horizons = cfg
        .training
        .tl_horizons
        .clone()
        .unwrap_or_else(|| cfg.integrator.horizons.clone());
    if schemes.contains(&Scheme::TaylorLagrange) {
        for &h in &tl_horizons {
            let (m, log) = train_known_midpoint(cfg, h, mode)?;
            models.midpoints.push((h, m));
            models.logs.push((Scheme::TaylorLagrange, h, log));
        }
    }
    if schemes.contains(&Scheme::HyperEuler) {
        for &h in &cfg.integrator.horizons {
            let (m, log) = train_known_residual(cfg, h, mode)?;
            models.residuals.push((h, m));
            models.logs.push((Scheme::HyperEuler, h, log));
        }
    }
    Ok(models)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrateRow {
    pub scheme: Scheme,
    pub horizon: f64,
    pub normalized_error: f64,
    pub nfe: usize,
    pub wall_ns: u64,
}

/// Median wall time of `repeats` runs after one warm-up.
fn median_wall<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<u64> {
    f()?;
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

/// One row per (scheme, horizon, test state). Schemes that need a learned
/// companion are skipped at horizons without one.
pub fn integrate_sweep(cfg: &ExperimentConfig, models: &KnownStiffModels) -> Result<Vec<IntegrateRow>> {
    let a = cfg
        .system
        .matrix()?
        .ok_or_else(|| Error::config("integrate needs a linear system for the reference"))?;
    let field = VectorField::linear(a.clone())?;
    let i = &cfg.integrator;
    let mut rng = Rng::new(cfg.seed).fork(0x7465_7374);
    let states = sample_states(a.rows(), i.test_states, i.state_box, &mut rng);
    let mut rows = Vec::new();
    for &scheme in &i.schemes {
        for &h in &i.horizons {
            let model = match scheme {
                Scheme::TaylorLagrange => match models.midpoint(h) {
                    Some(m) => Some(StepModel::Midpoint(m)),
                    None => continue,
                },
                Scheme::HyperEuler => match models.residual(h) {
                    Some(m) => Some(StepModel::Residual(m)),
                    None => continue,
                },
                _ => None,
            };
            let p = if scheme == Scheme::TruncatedTaylor {
                i.truncated_p
            } else {
                i.p
            };
            let icfg = IntegratorConfig::new(scheme)
                .with_order(p)
                .with_steps(i.steps)
                .with_tolerances(i.rtol, i.atol);
            let phi = a.scale(h).expm()?;
            for x0 in &states {
                let exact = phi.matvec(x0)?;
                let traj = integrate(&field, model, x0, 0.0, h, &icfg)?;
                let wall_ns = median_wall(i.timing_repeats, || {
                    integrate(&field, model, x0, 0.0, h, &icfg).map(|_| ())
                })?;
                rows.push(IntegrateRow {
                    scheme,
                    horizon: h,
                    normalized_error: normalized_error(traj.final_state(), &exact),
                    nfe: traj.field_eval_count,
                    wall_ns,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub scheme: Scheme,
    pub horizon: f64,
    pub mean_error: f64,
    pub mean_nfe: f64,
    pub median_wall_ns: u64,
}

/// Per (scheme, horizon) means, in first-appearance order.
pub fn summarize(rows: &[IntegrateRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(Scheme, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(s, h)| *s == r.scheme && *h == r.horizon) {
            keys.push((r.scheme, r.horizon));
        }
    }
    keys.into_iter()
        .map(|(scheme, horizon)| {
            let sel: Vec<&IntegrateRow> = rows
                .iter()
                .filter(|r| r.scheme == scheme && r.horizon == horizon)
                .collect();
            let k = sel.len() as f64;
            let mut walls: Vec<u64> = sel.iter().map(|r| r.wall_ns).collect();
            walls.sort_unstable();
            SweepSummary {
                scheme,
                horizon,
                mean_error: sel.iter().map(|r| r.normalized_error).sum::<f64>() / k,
                mean_nfe: sel.iter().map(|r| r.nfe as f64).sum::<f64>() / k,
                median_wall_ns: walls[walls.len() / 2],
            }
        })
        .collect()
}

pub fn write_integrate_csv<W: Write>(rows: &[IntegrateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scheme", "horizon", "normalized_error", "nfe", "wall_ns"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.scheme.name().to_string(),
            r.horizon.to_string(),
            format!("{:e}", r.normalized_error),
            r.nfe.to_string(),
            r.wall_ns.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SweepSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scheme", "horizon", "mean_error", "mean_nfe", "median_wall_ns"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.scheme.name().to_string(),
            r.horizon.to_string(),
            format!("{:e}", r.mean_error),
            r.mean_nfe.to_string(),
            r.median_wall_ns.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct KnownStiffReport {
    pub models: KnownStiffModels,
    pub rows: Vec<IntegrateRow>,
    pub summary: Vec<SweepSummary>,
}

pub fn known_stiff(cfg: &ExperimentConfig, mode: Parallelism) -> Result<KnownStiffReport> {
    let models = train_known_stiff(cfg, mode)?;
    let rows = integrate_sweep(cfg, &models)?;
    let summary = summarize(&rows);
    Ok(KnownStiffReport { models, rows, summary })
}

/// Trajectories sampled every `dt` over `span` from uniform initial states,
/// split into one-interval records; returns (train, test).
pub fn learn_stiff_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let a = cfg
        .system
        .matrix()?
        .ok_or_else(|| Error::config("learn-stiff generates data from a linear system"))?;
    let t = &cfg.training;
    let steps = (t.span / t.dt).round() as usize;
    let phi = a.scale(t.dt).expm()?;
    let mut rng = Rng::new(cfg.seed).fork(0x6461_7461);
    let make = |count: usize, rng: &mut Rng| -> Result<Dataset> {
        let mut times = Vec::with_capacity(count);
        let mut states = Vec::with_capacity(count);
        for x0 in sample_states(a.rows(), count, cfg.integrator.state_box, rng) {
            let mut xs = vec![x0];
            for _ in 0..steps {
                let next = phi.matvec(xs.last().expect("non-empty"))?;
                xs.push(next);
            }
            times.push((0..=steps).map(|k| k as f64 * t.dt).collect());
            states.push(xs);
        }
        Dataset::from_trajectories(&times, &states)
    };
    let train = make(t.trajectories, &mut rng)?;
    let test = make(t.test_trajectories, &mut rng)?;
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct LearnStiffJob {
    pub scheme: Scheme,
    pub schedule: TrainingConfig,
    pub init: Models,
}

/// A Taylor-Lagrange NODE and the configured baseline NODEs, all starting
/// from the same dynamics initialization.
pub fn learn_stiff_jobs(cfg: &ExperimentConfig) -> Result<Vec<LearnStiffJob>> {
    let n = cfg.system.dim();
    let t = &cfg.training;
    let mut rng = Rng::new(cfg.seed).fork(0x6e6f_6465);
    let dynamics = Mlp::random(
        &[n, t.dynamics_hidden, n],
        &[t.dynamics_activation, Activation::Identity],
        t.schedule.bias,
        &mut rng,
    )?;
    let shape = t.output_shape.unwrap_or_else(|| GammaShape::default_for(n));
    let mut mp = LearnedMidpoint::random(n, t.midpoint_hidden, t.midpoint_activation, shape, &mut rng)?;
    mp.encoding = t.encoding;
    let schemes = std::iter::once(Scheme::TaylorLagrange).chain(t.baselines.iter().copied());
    schemes
        .map(|scheme| {
            let mut schedule = TrainingConfig {
                scheme,
                seed: cfg.seed,
                ..t.schedule.clone()
            };
            let midpoint = if scheme == Scheme::TaylorLagrange {
                Some(MidpointModel::Learned(mp.clone()))
            } else {
                schedule.n_phi = 0;
                if scheme == Scheme::TruncatedTaylor {
                    schedule.p = cfg.integrator.truncated_p;
                }
                None
            };
            Ok(LearnStiffJob {
                scheme,
                schedule,
                init: Models {
                    field: VectorField::mlp(dynamics.clone())?,
                    midpoint,
                    residual: None,
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LearnStiffRun {
    pub scheme: Scheme,
    pub models: Models,
    pub log: TrainingLog,
    pub final_mse: f64,
    pub wall_ns: u128,
}

/// Trains every learn-stiff job on the same data.
pub fn learn_stiff(cfg: &ExperimentConfig, mode: Parallelism) -> Result<Vec<LearnStiffRun>> {
    let (train_set, test_set) = learn_stiff_data(cfg)?;
    let mut runs = Vec::new();
    for job in learn_stiff_jobs(cfg)? {
        let start = Instant::now();
        let out = train(&job.schedule, &train_set, &test_set, job.init, mode).map_err(|a| a.error)?;
        let wall_ns = start.elapsed().as_nanos();
        let final_mse = out
            .log
            .final_heldout_mse()
            .ok_or_else(|| Error::config("no held-out evaluation was logged"))?;
        runs.push(LearnStiffRun {
            scheme: job.scheme,
            models: out.models,
            log: out.log,
            final_mse,
            wall_ns,
        });
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub scheme: Scheme,
    pub p: usize,
    pub dt: f64,
    pub error: f64,
    /// Least-squares slope of `log error` against `log Δt` over the
    /// scheme's points; `None` when the errors sit at the rounding floor.
    pub slope: Option<f64>,
}

/// Errors below this multiple of `‖x₀‖` count as rounding noise.
pub const EXACT_FLOOR: f64 = 1e-13;

pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / k, sy / k);
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in points {
        let dx = x.ln() - mx;
        num += dx * (y.ln() - my);
        den += dx * dx;
    }
    (den > 0.0).then(|| num / den)
}

/// One-step errors against `expm(AΔt)x₀` over the configured step grid.
pub fn convergence(cfg: &ExperimentConfig) -> Result<Vec<ConvergenceRow>> {
    let a = cfg
        .system
        .matrix()?
        .ok_or_else(|| Error::config("convergence needs an analytic (linear) system"))?;
    let field = VectorField::linear(a.clone())?;
    let n = a.rows();
    let x0: Vec<f64> = (0..n).map(|k| if k % 2 == 0 { 0.3 } else { -0.2 }).collect();
    let x_norm = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let i = &cfg.integrator;
    let mut rows = Vec::new();
    for &scheme in &i.schemes {
        let p = match scheme {
            Scheme::TruncatedTaylor => i.truncated_p,
            _ => i.p,
        };
        let midpoint = MidpointModel::AnalyticLinear { a: a.clone(), order: p };
        let model = match scheme {
            Scheme::TaylorLagrange => Some(StepModel::Midpoint(&midpoint)),
            Scheme::HyperEuler => continue,
            _ => None,
        };
        let icfg = IntegratorConfig::new(scheme)
            .with_order(p)
            .with_tolerances(i.rtol, i.atol);
        let mut pts = Vec::new();
        for &dt in &i.dts {
            let exact = a.scale(dt).expm()?.matvec(&x0)?;
            let traj = integrate(&field, model, &x0, 0.0, dt, &icfg)?;
            let err = traj
                .final_state()
                .iter()
                .zip(&exact)
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt();
            pts.push((dt, err));
        }
        let above: Vec<(f64, f64)> = pts.iter().copied().filter(|(_, e)| *e > EXACT_FLOOR * x_norm).collect();
        let slope = if above.len() < 2 { None } else { fit_slope(&above) };
        for (dt, error) in pts {
            rows.push(ConvergenceRow {
                scheme,
                p,
                dt,
                error,
                slope,
            });
        }
    }
    Ok(rows)
}

pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scheme", "p", "dt", "error", "slope"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.scheme.name().to_string(),
            r.p.to_string(),
            r.dt.to_string(),
            format!("{:e}", r.error),
            r.slope.map(|s| format!("{s:.4}")).unwrap_or_else(|| "exact".into()),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub x0: Vec<f64>,
    pub dt: f64,
    pub max_dt: f64,
    pub radius: f64,
    /// `max_k |y_k − x₀_k|` for the reference state `y`.
    pub deviation: f64,
    pub variation: f64,
    pub gronwall_bound: f64,
    pub inside: bool,
    pub within_bound: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub lipschitz_norm: f64,
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn enclosure_violations(&self) -> usize {
        self.rows.iter().filter(|r| !r.inside).count()
    }

    pub fn bound_violations(&self) -> usize {
        self.rows.iter().filter(|r| !r.within_bound).count()
    }
}

/// Checks the reference solution against the a priori enclosure and the
/// trajectory-variation bound on sampled `(x₀, Δt)` pairs.
pub fn enclosure_audit(cfg: &ExperimentConfig, mode: Parallelism) -> Result<AuditReport> {
    let field = cfg.system.field()?;
    let n = field.dim();
    let i = &cfg.integrator;
    let mut rng = Rng::new(cfg.seed).fork(0x656e_636c);
    let lo = vec![-i.state_box; n];
    let hi = vec![i.state_box; n];
    let l = field.lipschitz_estimate(&lo, &hi, 256, &mut rng)?;
    let max_dt = max_enclosure_step(l.norm2, n);
    let samples: Vec<(Vec<f64>, f64)> = (0..i.samples)
        .map(|_| {
            let x0 = rng.uniform_vec(&lo, &hi);
            let dt = rng.uniform(0.0, i.dt_fraction * max_dt).max(f64::MIN_POSITIVE);
            (x0, dt)
        })
        .collect();
    let rows = map_indexed(samples.len(), mode, |k| -> Result<AuditRow> {
        let (x0, dt) = &samples[k];
        let enc = apriori_enclosure(&field, l.norm2, x0, *dt)?;
        let bound = gronwall_variation_bound(&field, l.norm2, x0, *dt)?;
        let y = dopri5_adaptive(&field, x0, 0.0, *dt, i.rtol, i.atol)?;
        let y = y.final_state();
        let deviation = y.iter().zip(x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let variation = y.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        Ok(AuditRow {
            x0: x0.clone(),
            dt: *dt,
            max_dt,
            radius: enc.radius_vector[0],
            deviation,
            variation,
            gronwall_bound: bound,
            inside: enc.contains(y)?,
            within_bound: variation <= bound,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(AuditReport {
        lipschitz_norm: l.norm2,
        rows,
    })
}

pub fn write_audit_csv<W: Write>(report: &AuditReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "sample",
        "dt",
        "max_dt",
        "radius",
        "deviation",
        "variation",
        "gronwall_bound",
        "inside",
        "within_bound",
    ])
    .map_err(csv_err)?;
    for (k, r) in report.rows.iter().enumerate() {
        w.write_record([
            k.to_string(),
            format!("{:e}", r.dt),
            format!("{:e}", r.max_dt),
            format!("{:e}", r.radius),
            format!("{:e}", r.deviation),
            format!("{:e}", r.variation),
            format!("{:e}", r.gronwall_bound),
            r.inside.to_string(),
            r.within_bound.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentKind, SystemConfig};

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [0.1, 0.2, 0.4].iter().map(|&h: &f64| (h, 3.0 * h.powi(3))).collect();
        assert!((fit_slope(&pts).unwrap() - 3.0).abs() < 1e-12);
        assert!(fit_slope(&pts[..1]).is_none());
    }

    #[test]
    fn convergence_slopes() {
        let cfg = ExperimentConfig::preset(ExperimentKind::Convergence);
        let rows = convergence(&cfg).unwrap();
        let slope = |s: Scheme| rows.iter().find(|r| r.scheme == s).unwrap().slope;
        assert!((slope(Scheme::TruncatedTaylor).unwrap() - 2.0).abs() < 0.15);
        assert!((slope(Scheme::Rk4).unwrap() - 5.0).abs() < 0.3);
        assert_eq!(slope(Scheme::TaylorLagrange), None);
    }

    #[test]
    fn learn_stiff_data_shapes() {
        let mut cfg = ExperimentConfig::preset(ExperimentKind::LearnStiff);
        cfg.training.trajectories = 3;
        cfg.training.test_trajectories = 1;
        cfg.training.span = 0.1;
        let (train, test) = learn_stiff_data(&cfg).unwrap();
        assert_eq!((train.len(), test.len()), (30, 10));
        let r = &train.records()[4];
        assert!((r.t1 - r.t0 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn small_audit_has_no_violations() {
        let mut cfg = ExperimentConfig::preset(ExperimentKind::EnclosureAudit);
        cfg.integrator.samples = 50;
        let r = enclosure_audit(&cfg, Parallelism::Sequential).unwrap();
        assert_eq!(r.enclosure_violations() + r.bound_violations(), 0);
        cfg.system = SystemConfig::Pendulum { g_over_l: 9.81 };
        let r = enclosure_audit(&cfg, Parallelism::Auto).unwrap();
        assert_eq!(r.enclosure_violations() + r.bound_violations(), 0);
    }
}
