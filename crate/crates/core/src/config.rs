//! Experiment configuration: one JSON document with the top-level keys
//! `experiment`, `system`, `integrator`, `training`, `output` and `seed`.
//!
//! Omitted keys take the preset of the chosen experiment; unknown keys are
//! rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::{Activation, LinearStiffSystem, VectorField};
use crate::error::{Error, Result};
use crate::integrators::Scheme;
use crate::midpoint::{GammaShape, TimeEncoding};
use crate::tensor::Tensor;
use crate::training::TrainingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    KnownStiff,
    LearnStiff,
    Convergence,
    EnclosureAudit,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::KnownStiff => "known-stiff",
            ExperimentKind::LearnStiff => "learn-stiff",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::EnclosureAudit => "enclosure-audit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemConfig {
    /// 2×2 system with real eigenvalues `l1`, `l2`, rotated by `angle`.
    Stiff {
        l1: f64,
        l2: f64,
        angle: Option<f64>,
    },
    Linear {
        a: Vec<Vec<f64>>,
    },
    Pendulum {
        g_over_l: f64,
    },
}

impl SystemConfig {
    pub fn stiff() -> Self {
        SystemConfig::Stiff {
            l1: -1.0,
            l2: -1000.0,
            angle: None,
        }
    }

    /// The system matrix when the field is linear.
    pub fn matrix(&self) -> Result<Option<Tensor>> {
        Ok(match self {
            SystemConfig::Stiff { l1, l2, angle } => Some(LinearStiffSystem::new(*l1, *l2, *angle)?.a),
            SystemConfig::Linear { a } => Some(Tensor::from_rows(a)?),
            SystemConfig::Pendulum { .. } => None,
        })
    }

    pub fn field(&self) -> Result<VectorField> {
        match self {
            SystemConfig::Pendulum { g_over_l } => Ok(VectorField::Pendulum { g_over_l: *g_over_l }),
            _ => VectorField::linear(self.matrix()?.expect("linear system")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemConfig::Stiff { .. } => "stiff",
            SystemConfig::Linear { .. } => "linear",
            SystemConfig::Pendulum { .. } => "pendulum",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SystemConfig::Stiff { .. } | SystemConfig::Pendulum { .. } => 2,
            SystemConfig::Linear { a } => a.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    /// Schemes compared by `integrate` and `convergence`.
    pub schemes: Vec<Scheme>,
    /// Taylor-Lagrange order.
    pub p: usize,
    /// Order of the truncated Taylor baseline.
    pub truncated_p: usize,
    /// Fixed steps per interval.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Prediction intervals `T − t₀`.
    pub horizons: Vec<f64>,
    pub test_states: usize,
    /// Initial states are drawn from `[−state_box, state_box]ⁿ`.
    pub state_box: f64,
    pub timing_repeats: usize,
    /// Step grid for the convergence sweep.
    pub dts: Vec<f64>,
    /// Samples for the enclosure audit.
    pub samples: usize,
    /// Audit steps are drawn below this fraction of the admissible maximum.
    pub dt_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Alternating-loop settings.
    pub schedule: TrainingConfig,
    /// Known-dynamics training states per horizon.
    pub train_states: usize,
    pub epochs: usize,
    pub hypereuler_epochs: usize,
    /// Horizons that get a trained midpoint; `None` trains every horizon.
    pub tl_horizons: Option<Vec<f64>>,
    pub midpoint_hidden: usize,
    pub midpoint_activation: Activation,
    /// `None` picks the dimension-based default.
    pub output_shape: Option<GammaShape>,
    pub encoding: TimeEncoding,
    pub hypereuler_hidden: usize,
    pub dynamics_hidden: usize,
    pub dynamics_activation: Activation,
    pub trajectories: usize,
    pub test_trajectories: usize,
    /// Trajectory length in time units.
    pub span: f64,
    /// Sampling interval of the trajectories.
    pub dt: f64,
    /// Schemes trained alongside Taylor-Lagrange in `learn-stiff`.
    pub baselines: Vec<Scheme>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub system: SystemConfig,
    pub integrator: IntegratorSection,
    pub training: TrainingSection,
    pub output: OutputSection,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Paper settings for `kind`.
    pub fn preset(kind: ExperimentKind) -> Self {
        let mut schedule = TrainingConfig {
            batch_size: 512,
            lr_theta: 1e-3,
            lr_phi: 1e-3,
            decay: 1e-4,
            ..TrainingConfig::default()
        };
        let mut integrator = IntegratorSection {
            schemes: vec![
                Scheme::TaylorLagrange,
                Scheme::TruncatedTaylor,
                Scheme::Rk4,
                Scheme::HyperEuler,
                Scheme::Dopri5,
            ],
            p: 1,
            truncated_p: 2,
            steps: 1,
            rtol: 1.4e-12,
            atol: 1.4e-12,
            horizons: vec![0.01, 0.05, 0.1, 0.2, 0.3],
            test_states: 250,
            state_box: 0.5,
            timing_repeats: 5,
            dts: vec![1e-4, 2e-4, 5e-4, 1e-3],
            samples: 1000,
            dt_fraction: 0.99,
        };
        let mut system = SystemConfig::stiff();
        match kind {
            ExperimentKind::KnownStiff | ExperimentKind::EnclosureAudit => {}
            ExperimentKind::LearnStiff => {
                schedule = TrainingConfig {
                    n_train: 100,
                    n_theta: 200,
                    n_phi: 200,
                    n_distill: 1024,
                    lambda: 0.0,
                    batch_size: 512,
                    lr_theta: 1e-2,
                    lr_phi: 1e-4,
                    decay: 1e-4,
                    p: 1,
                    eval_every: 1000,
                    ..TrainingConfig::default()
                };
            }
            ExperimentKind::Convergence => {
                integrator.schemes = vec![Scheme::TruncatedTaylor, Scheme::Rk4, Scheme::TaylorLagrange];
                integrator.truncated_p = 1;
                system = SystemConfig::Linear {
                    a: vec![vec![-1.0, 0.5], vec![0.0, -2.0]],
                };
                integrator.dts = vec![0.01, 0.02, 0.05, 0.1];
            }
        }
        if kind == ExperimentKind::EnclosureAudit {
            integrator.state_box = 1.0;
        }
        ExperimentConfig {
            experiment: kind,
            system,
            integrator,
            training: TrainingSection {
                schedule,
                train_states: 76_800,
                epochs: 1000,
                hypereuler_epochs: 1000,
                tl_horizons: None,
                midpoint_hidden: 16,
                midpoint_activation: Activation::Relu,
                // The preset system is diagonal.
                output_shape: (kind == ExperimentKind::KnownStiff).then_some(GammaShape::Diag),
                encoding: TimeEncoding::Raw,
                hypereuler_hidden: 32,
                dynamics_hidden: 64,
                dynamics_activation: Activation::Identity,
                trajectories: 100,
                test_trajectories: 10,
                span: 10.0,
                dt: 0.01,
                baselines: vec![Scheme::Rk4, Scheme::TruncatedTaylor],
            },
            output: OutputSection { dir: "out".into() },
            seed: 0,
        }
    }

    /// Parses a config, filling omitted keys from the experiment's preset.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let kind = user
            .get("experiment")
            .ok_or_else(|| Error::config("missing key `experiment`"))?;
        let kind: ExperimentKind =
            serde_json::from_value(kind.clone()).map_err(|e| Error::config(format!("experiment: {e}")))?;
        let mut base = serde_json::to_value(ExperimentConfig::preset(kind)).expect("preset serializes");
        // A user-chosen system replaces the preset one wholesale, since
        // variants carry different fields.
        if let (Some(obj), Some(sys)) = (base.as_object_mut(), user.get("system")) {
            obj.insert("system".into(), sys.clone());
        }
        merge(&mut base, &user);
        let cfg: ExperimentConfig = serde_json::from_value(base).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.training.schedule.validate()?;
        let i = &self.integrator;
        if i.p == 0 || i.truncated_p == 0 || i.steps == 0 {
            return Err(Error::config("orders and step counts must be at least 1"));
        }
        if !(i.rtol > 0.0 && i.atol > 0.0) {
            return Err(Error::config("rtol and atol must be positive"));
        }
        if i.horizons.iter().chain(&i.dts).any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::config("horizons and step sizes must be positive"));
        }
        if !(i.state_box > 0.0) || !(i.dt_fraction > 0.0 && i.dt_fraction < 1.0) {
            return Err(Error::config("state_box must be positive and dt_fraction in (0, 1)"));
        }
        let t = &self.training;
        if !(t.span > 0.0 && t.dt > 0.0 && t.dt <= t.span) {
            return Err(Error::config("need 0 < dt ≤ span"));
        }
        if t.baselines.contains(&Scheme::Dopri5) {
            return Err(Error::config("the adaptive solver cannot be a trained baseline"));
        }
        if let SystemConfig::Linear { a } = &self.system {
            if a.is_empty() || a.iter().any(|r| r.len() != a.len()) {
                return Err(Error::config("system matrix must be square and non-empty"));
            }
        }
        self.system.field()?;
        Ok(())
    }
}

/// Recursively overlays `over` onto `base`; objects merge key by key,
/// everything else is replaced.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for kind in [
            ExperimentKind::KnownStiff,
            ExperimentKind::LearnStiff,
            ExperimentKind::Convergence,
            ExperimentKind::EnclosureAudit,
        ] {
            let cfg = ExperimentConfig::preset(kind);
            let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn partial_config_fills_from_preset() {
        let cfg = ExperimentConfig::from_json(
            r#"{"experiment": "learn-stiff", "seed": 7, "training": {"schedule": {"n_train": 3}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.training.schedule.n_train, 3);
        assert_eq!(cfg.training.schedule.n_theta, 200);
        assert_eq!(cfg.training.schedule.lr_theta, 1e-2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"experiment": "known-stiff", "bogus": 1}"#,
            r#"{"experiment": "known-stiff", "integrator": {"stepz": 2}}"#,
            r#"{"experiment": "known-stiff", "training": {"schedule": {"lr": 1}}}"#,
            r#"{"experiment": "known-stiff", "system": {"kind": "pendulum", "g_over_l": 1, "x": 0}}"#,
            r#"{"experiment": "nope"}"#,
            r#"{"seed": 1}"#,
        ] {
            assert!(
                matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn system_replaced_wholesale() {
        let cfg = ExperimentConfig::from_json(
            r#"{"experiment": "enclosure-audit", "system": {"kind": "pendulum", "g_over_l": 9.81}}"#,
        )
        .unwrap();
        assert_eq!(cfg.system, SystemConfig::Pendulum { g_over_l: 9.81 });
        assert!(ExperimentConfig::from_json(
            r#"{"experiment": "convergence", "system": {"kind": "linear", "a": [[1, 2]]}}"#
        )
        .is_err());
    }
}
