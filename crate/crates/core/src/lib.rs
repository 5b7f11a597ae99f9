//! Taylor-Lagrange integration of ordinary differential equations.
//!
//! A Taylor-Lagrange step advances `ẋ = f(x)` by the truncated Taylor
//! expansion of order `p − 1` plus a Lagrange-form remainder
//! `Δt^p f^[p](Γ)`, where the midpoint `Γ = x + Γ̄(x, Δt) ⊙ f(x)` is predicted
//! by a small network. The crate provides the Taylor-mode coefficient
//! machinery, the integrators and baselines, the training loop that fits the
//! dynamics and midpoint networks alternately, and the experiment drivers
//! used by the command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod config;
pub mod dual;
pub mod dynamics;
pub mod enclosure;
pub mod error;
pub mod experiments;
pub mod integrators;
pub mod jets;
pub mod midpoint;
pub mod model_io;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use dynamics::{Activation, LinearStiffSystem, Mlp, VectorField};
pub use error::{Error, Result};
pub use integrators::{integrate, IntegratorConfig, Scheme, Trajectory};
pub use midpoint::{GammaShape, LearnedMidpoint, MidpointModel};
pub use tensor::Tensor;
