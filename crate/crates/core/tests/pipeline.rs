use tlode::config::{ExperimentConfig, ExperimentKind};
use tlode::experiments::{learn_stiff_data, learn_stiff_jobs, linear_one_step_dataset};
use tlode::integrators::StepModel;
use tlode::midpoint::TimeEncoding;
use tlode::model_io::{load_model_for, save_model, ModelFile, ModelKind, ModelMetadata};
use tlode::parallel::Parallelism;
use tlode::rng::Rng;
use tlode::training::{evaluate_loss, train, LossSpec, Trainable, TrainingConfig};
use tlode::{integrate, IntegratorConfig, MidpointModel, Scheme};

fn tiny_learn_stiff() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::LearnStiff);
    cfg.training.trajectories = 3;
    cfg.training.test_trajectories = 1;
    cfg.training.span = 0.2;
    cfg.training.dynamics_hidden = 8;
    cfg.training.schedule = TrainingConfig {
        n_train: 3,
        n_theta: 4,
        n_phi: 3,
        n_distill: 16,
        batch_size: 16,
        eval_every: 2,
        ..cfg.training.schedule.clone()
    };
    cfg
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_learn_stiff();
    let (train_set, test_set) = learn_stiff_data(&cfg).unwrap();
    let run = || {
        let job = learn_stiff_jobs(&cfg).unwrap().remove(0);
        train(&job.schedule, &train_set, &test_set, job.init, Parallelism::Auto).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.models, b.models);
    assert_eq!(a.log.entries.len(), b.log.entries.len());
    for (x, y) in a.log.entries.iter().zip(&b.log.entries) {
        assert_eq!(
            (x.step, x.phase, x.loss, x.penalty, x.heldout_mse, x.nfe),
            (y.step, y.phase, y.loss, y.penalty, y.heldout_mse, y.nfe)
        );
    }
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    a.log.write_csv(&mut csv_a).unwrap();
    b.log.write_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn chunked_parallel_loss_matches_sequential() {
    let cfg = tiny_learn_stiff();
    let (train_set, _) = learn_stiff_data(&cfg).unwrap();
    let job = learn_stiff_jobs(&cfg).unwrap().remove(0);
    let mp = job.init.midpoint.as_ref().unwrap();
    let spec = LossSpec::tl(&job.init.field, mp, 1).with_lambda(0.5);
    let seq = evaluate_loss(&spec, train_set.records(), Trainable::Field, Parallelism::Sequential, 7).unwrap();
    let par = evaluate_loss(&spec, train_set.records(), Trainable::Field, Parallelism::Auto, 7).unwrap();
    assert_eq!(seq, par);
    let whole = evaluate_loss(&spec, train_set.records(), Trainable::Field, Parallelism::Sequential, 0).unwrap();
    assert!((whole.loss - seq.loss).abs() <= 1e-12 * whole.loss.abs());
}

#[test]
fn saved_midpoint_integrates_identically() {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::KnownStiff);
    cfg.training.train_states = 256;
    cfg.training.epochs = 2;
    cfg.integrator.test_states = 16;
    let (mp, log) = tlode::experiments::train_known_midpoint(&cfg, 0.1, Parallelism::Auto).unwrap();
    assert!(log.final_heldout_mse().is_some());
    let MidpointModel::Learned(learned) = &mp else {
        panic!("learned midpoint")
    };
    let file = ModelFile {
        metadata: ModelMetadata {
            kind: ModelKind::Midpoint,
            n: 2,
            p: 1,
            dt: 0.1,
            output_shape: Some(learned.shape),
            encoding: TimeEncoding::Raw,
            seed: cfg.seed,
        },
        networks: vec![("midpoint".into(), learned.net.clone())],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tlmodel.json");
    save_model(&path, &file).unwrap();
    let loaded = MidpointModel::Learned(load_model_for(&path, 2).unwrap().midpoint().unwrap());
    assert_eq!(loaded, mp);

    let a = cfg.system.matrix().unwrap().unwrap();
    let field = cfg.system.field().unwrap();
    let data = linear_one_step_dataset(&a, 0.1, 8, 0.5, &mut Rng::new(3)).unwrap();
    let icfg = IntegratorConfig::new(Scheme::TaylorLagrange);
    for r in data.records() {
        let x = integrate(&field, Some(StepModel::Midpoint(&mp)), &r.x0, 0.0, 0.1, &icfg).unwrap();
        let y = integrate(&field, Some(StepModel::Midpoint(&loaded)), &r.x0, 0.0, 0.1, &icfg).unwrap();
        assert_eq!(x.states, y.states);
    }
}
