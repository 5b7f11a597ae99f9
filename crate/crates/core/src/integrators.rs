//! Fixed-step schemes (Taylor-Lagrange, truncated Taylor, Euler, RK4,
//! HyperEuler) and adaptive Dormand–Prince 5(4).
//!
//! The fixed-step schemes are written against [`BatchOps`] so training can
//! record them onto a tape; the single-state entry points run them eagerly.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Mlp, VectorField};
use crate::error::{Error, Result};
use crate::jets::{apply_field, solution_series};
use crate::midpoint::{BoundMidpoint, MidpointModel, TimeEncoding};
use crate::ops::{BatchOps, Eager};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[serde(rename = "tl")]
    TaylorLagrange,
    TruncatedTaylor,
    Euler,
    Rk4,
    HyperEuler,
    Dopri5,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::TaylorLagrange => "tl",
            Scheme::TruncatedTaylor => "truncated-taylor",
            Scheme::Euler => "euler",
            Scheme::Rk4 => "rk4",
            Scheme::HyperEuler => "hyper-euler",
            Scheme::Dopri5 => "dopri5",
        }
    }
}

fn default_p() -> usize {
    1
}

fn default_steps() -> usize {
    1
}

fn default_tol() -> f64 {
    1.4e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Expansion order for the Taylor schemes.
    #[serde(default = "default_p")]
    pub p: usize,
    /// Number of fixed steps `H`; `Δt = (T − t₀)/H`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_tol")]
    pub rtol: f64,
    #[serde(default = "default_tol")]
    pub atol: f64,
}

impl IntegratorConfig {
    pub fn new(scheme: Scheme) -> Self {
        IntegratorConfig {
            scheme,
            p: default_p(),
            steps: default_steps(),
            rtol: default_tol(),
            atol: default_tol(),
        }
    }

    pub fn with_order(mut self, p: usize) -> Self {
        self.p = p;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::config("expansion order p must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("step count H must be at least 1"));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::config("rtol and atol must be positive"));
        }
        Ok(())
    }

    /// Field evaluations per fixed step.
    pub fn evals_per_step(&self) -> usize {
        match self.scheme {
            Scheme::TaylorLagrange => self.p.saturating_sub(1).max(1) + self.p,
            Scheme::TruncatedTaylor => self.p,
            Scheme::Euler | Scheme::HyperEuler => 1,
            Scheme::Rk4 => 4,
            Scheme::Dopri5 => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Number of vector-field evaluations (jet pushes for Taylor schemes).
    pub field_eval_count: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// The learned companion of a fixed-step scheme.
#[derive(Clone, Copy, Debug)]
pub enum StepModel<'a> {
    Midpoint(&'a MidpointModel),
    Residual(&'a Mlp),
}

/// Per-row step sizes of a batch: the encoded `Δt` feature column fed to
/// networks and the columns `Δt^l` for `l = 0..`.
pub struct BatchStep<V> {
    pub feature: V,
    pub powers: Vec<V>,
}

impl<V: Clone> BatchStep<V> {
    /// Step data as backend constants.
    pub fn constants<B: BatchOps<V = V>>(ops: &mut B, dts: &[f64], encoding: TimeEncoding, max_power: usize) -> Self {
        let (feature, powers) = step_tensors(dts, encoding, max_power);
        BatchStep {
            feature: ops.constant(feature),
            powers: powers.into_iter().map(|t| ops.constant(t)).collect(),
        }
    }

    fn scale<B: BatchOps<V = V>>(&self, ops: &mut B, v: &V, l: usize) -> Result<V> {
        let col = self
            .powers
            .get(l)
            .ok_or_else(|| Error::Shape(format!("step power {l} not prepared")))?;
        ops.mul_col(v, col)
    }
}

/// Feature column and `Δt^l` columns (`l = 0..=max_power`) for `dts`.
pub fn step_tensors(dts: &[f64], encoding: TimeEncoding, max_power: usize) -> (Tensor, Vec<Tensor>) {
    let b = dts.len();
    let col = |f: &dyn Fn(f64) -> f64| Tensor::new(vec![b, 1], dts.iter().map(|&d| f(d)).collect()).expect("column");
    let feature = col(&|d| encoding.encode(d));
    let powers = (0..=max_power).map(|l| col(&|d| d.powi(l as i32))).collect();
    (feature, powers)
}

/// One Taylor-Lagrange step on a batch: returns the next states and the
/// remainder estimates `Δt^p f^[p](Γ)`.
pub fn tl_step_batch<B: BatchOps>(
    ops: &mut B,
    field: &VectorField,
    field_params: &[B::V],
    midpoint: &BoundMidpoint<B::V>,
    x: &B::V,
    step: &BatchStep<B::V>,
    p: usize,
) -> Result<(B::V, B::V)> {
    let series = solution_series(ops, field, field_params, x, p.saturating_sub(1).max(1))?;
    let gamma = midpoint.apply(ops, x, &series[1], &step.feature)?;
    let at_gamma = solution_series(ops, field, field_params, &gamma, p)?;
    let remainder = step.scale(ops, &at_gamma[p], p)?;
    let mut out = x.clone();
    for (l, coeff) in series.iter().enumerate().take(p).skip(1) {
        let term = step.scale(ops, coeff, l)?;
        out = ops.add(&out, &term)?;
    }
    out = ops.add(&out, &remainder)?;
    Ok((out, remainder))
}

/// `x + Σ_{l=1..p} Δt^l f^[l](x)` on a batch.
pub fn truncated_taylor_step_batch<B: BatchOps>(
    ops: &mut B,
    field: &VectorField,
    field_params: &[B::V],
    x: &B::V,
    step: &BatchStep<B::V>,
    p: usize,
) -> Result<B::V> {
    let series = solution_series(ops, field, field_params, x, p)?;
    let mut out = x.clone();
    for (l, coeff) in series.iter().enumerate().skip(1) {
        let term = step.scale(ops, coeff, l)?;
        out = ops.add(&out, &term)?;
    }
    Ok(out)
}

pub fn rk4_step_batch<B: BatchOps>(
    ops: &mut B,
    field: &VectorField,
    field_params: &[B::V],
    x: &B::V,
    step: &BatchStep<B::V>,
) -> Result<B::V> {
    let f = |ops: &mut B, v: &B::V| apply_field(ops, field, field_params, v);
    let k1 = f(ops, x)?;
    let h1 = step.scale(ops, &k1, 1)?;
    let half = ops.scale(&h1, 0.5);
    let x2 = ops.add(x, &half)?;
    let k2 = f(ops, &x2)?;
    let h2 = step.scale(ops, &k2, 1)?;
    let half = ops.scale(&h2, 0.5);
    let x3 = ops.add(x, &half)?;
    let k3 = f(ops, &x3)?;
    let h3 = step.scale(ops, &k3, 1)?;
    let x4 = ops.add(x, &h3)?;
    let k4 = f(ops, &x4)?;
    let h4 = step.scale(ops, &k4, 1)?;
    let mid = ops.add(&h2, &h3)?;
    let mid = ops.scale(&mid, 2.0);
    let ends = ops.add(&h1, &h4)?;
    let sum = ops.add(&ends, &mid)?;
    let inc = ops.scale(&sum, 1.0 / 6.0);
    ops.add(x, &inc)
}

/// `x + Δt f(x) + Δt² g(x, Δt)`.
pub fn hypereuler_step_batch<B: BatchOps>(
    ops: &mut B,
    field: &VectorField,
    field_params: &[B::V],
    net: &Mlp,
    net_params: &[B::V],
    x: &B::V,
    step: &BatchStep<B::V>,
) -> Result<B::V> {
    let fx = apply_field(ops, field, field_params, x)?;
    let euler = step.scale(ops, &fx, 1)?;
    let input = ops.concat_cols(&[x.clone(), step.feature.clone()])?;
    let g = net.forward(ops, &input, net_params)?;
    let corr = step.scale(ops, &g, 2)?;
    let out = ops.add(x, &euler)?;
    ops.add(&out, &corr)
}

fn check_state(field: &VectorField, x: &[f64]) -> Result<()> {
    if x.len() != field.dim() {
        return Err(Error::Shape(format!(
            "state has dimension {}, field expects {}",
            x.len(),
            field.dim()
        )));
    }
    Ok(())
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("step must be positive, got {dt}")));
    }
    Ok(())
}

fn bind_field(field: &VectorField) -> Vec<Tensor> {
    field.params()
}

/// One Taylor-Lagrange step of order `p` from a single state.
pub fn tl_step(field: &VectorField, midpoint: &MidpointModel, x: &[f64], dt: f64, p: usize) -> Result<Vec<f64>> {
    check_state(field, x)?;
    check_dt(dt)?;
    let mut ops = Eager;
    let fp = bind_field(field);
    let mid = midpoint.bind(&mut ops, None, &[dt])?;
    let step = BatchStep::constants(&mut ops, &[dt], midpoint.encoding(), p);
    let (next, _) = tl_step_batch(&mut ops, field, &fp, &mid, &Tensor::row(x), &step, p)?;
    Ok(next.into_data())
}

pub fn truncated_taylor_step(field: &VectorField, x: &[f64], dt: f64, p: usize) -> Result<Vec<f64>> {
    check_state(field, x)?;
    check_dt(dt)?;
    let mut ops = Eager;
    let step = BatchStep::constants(&mut ops, &[dt], TimeEncoding::Raw, p);
    Ok(truncated_taylor_step_batch(&mut ops, field, &bind_field(field), &Tensor::row(x), &step, p)?.into_data())
}

pub fn euler_step(field: &VectorField, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_state(field, x)?;
    let fx = field.eval_unchecked(x);
    Ok(x.iter().zip(fx).map(|(a, b)| a + dt * b).collect())
}

/// Classical four-stage Runge–Kutta step.
pub fn rk4_step(field: &VectorField, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_state(field, x)?;
    let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u + s * v).collect() };
    let k1 = field.eval_unchecked(x);
    let k2 = field.eval_unchecked(&axpy(x, 0.5 * dt, &k1));
    let k3 = field.eval_unchecked(&axpy(x, 0.5 * dt, &k2));
    let k4 = field.eval_unchecked(&axpy(x, dt, &k3));
    Ok((0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

pub fn hypereuler_step(field: &VectorField, net: &Mlp, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_state(field, x)?;
    if net.input_dim() != x.len() + 1 || net.output_dim() != x.len() {
        return Err(Error::Shape(format!(
            "residual network maps {} to {}, expected {} to {}",
            net.input_dim(),
            net.output_dim(),
            x.len() + 1,
            x.len()
        )));
    }
    let fx = field.eval_unchecked(x);
    let mut input = x.to_vec();
    input.push(dt);
    let g = net.eval(&input);
    Ok((0..x.len()).map(|i| x[i] + dt * fx[i] + dt * dt * g[i]).collect())
}

/// Integrates from `t0` to `t1` with the configured scheme.
pub fn integrate(
    field: &VectorField,
    model: Option<StepModel>,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_state(field, x0)?;
    if !(t1 > t0) {
        return Err(Error::Domain(format!("need T > t0, got t0 = {t0}, T = {t1}")));
    }
    let needs_model = matches!(cfg.scheme, Scheme::TaylorLagrange | Scheme::HyperEuler);
    match (needs_model, model) {
        (true, None) => {
            return Err(Error::config(format!(
                "scheme {} needs a learned model",
                cfg.scheme.name()
            )))
        }
        (false, Some(_)) => {
            return Err(Error::config(format!(
                "scheme {} takes no learned model",
                cfg.scheme.name()
            )))
        }
        _ => {}
    }
    if cfg.scheme == Scheme::Dopri5 {
        return dopri5_adaptive(field, x0, t0, t1, cfg.rtol, cfg.atol);
    }
    let h = cfg.steps;
    let dt = (t1 - t0) / h as f64;
    let mut times = Vec::with_capacity(h + 1);
    let mut states = Vec::with_capacity(h + 1);
    times.push(t0);
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    for i in 0..h {
        x = match (cfg.scheme, model) {
            (Scheme::TaylorLagrange, Some(StepModel::Midpoint(m))) => tl_step(field, m, &x, dt, cfg.p)?,
            (Scheme::HyperEuler, Some(StepModel::Residual(net))) => hypereuler_step(field, net, &x, dt)?,
            (Scheme::TruncatedTaylor, None) => truncated_taylor_step(field, &x, dt, cfg.p)?,
            (Scheme::Euler, None) => euler_step(field, &x, dt)?,
            (Scheme::Rk4, None) => rk4_step(field, &x, dt)?,
            (scheme, _) => {
                return Err(Error::config(format!(
                    "model kind does not match scheme {}",
                    scheme.name()
                )))
            }
        };
        times.push(if i + 1 == h { t1 } else { t0 + (i + 1) as f64 * dt });
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        field_eval_count: h * cfg.evals_per_step(),
    })
}

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const ALPHA: f64 = 0.7 / 5.0;
const BETA: f64 = 0.4 / 5.0;

/// Adaptive Dormand–Prince 5(4) with PI step-size control. A step is
/// accepted when `|err_k| ≤ atol + rtol·max(|x_k|, |x̂_k|)` for every `k`.
pub fn dopri5_adaptive(field: &VectorField, x0: &[f64], t0: f64, t1: f64, rtol: f64, atol: f64) -> Result<Trajectory> {
    check_state(field, x0)?;
    if !(rtol > 0.0 && atol > 0.0) {
        return Err(Error::config("rtol and atol must be positive"));
    }
    if !(t1 > t0) {
        return Err(Error::Domain(format!("need T > t0, got t0 = {t0}, T = {t1}")));
    }
    let n = x0.len();
    let span = t1 - t0;
    let min_step = 1e-14 * span;
    let mut nfe = 0usize;
    let mut eval = |x: &[f64]| {
        nfe += 1;
        field.eval_unchecked(x)
    };

    let mut x = x0.to_vec();
    let mut t = t0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    k[0] = eval(&x);
    let mut h = initial_step(&mut eval, &x, &k[0], rtol, atol).min(span);
    let mut err_prev = 1e-4f64;
    let mut rejected = false;
    let mut times = vec![t0];
    let mut states = vec![x.clone()];
    let mut stage = vec![0.0; n];
    let mut x_new = vec![0.0; n];

    while t < t1 {
        if h < min_step {
            return Err(Error::StiffnessFailure {
                step: h,
                min: min_step,
                t,
            });
        }
        let last = t + h >= t1 || (t1 - (t + h)) < min_step;
        if last {
            h = t1 - t;
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                stage[i] = x[i] + h * acc;
            }
            if s == 6 {
                x_new.copy_from_slice(&stage);
            }
            k[s] = eval(&stage);
        }
        let mut err = if x_new.iter().all(|v| v.is_finite()) {
            0.0f64
        } else {
            f64::NAN
        };
        for i in 0..n {
            let e: f64 = h * (0..7).map(|s| E[s] * k[s][i]).sum::<f64>();
            let sc = atol + rtol * x[i].abs().max(x_new[i].abs());
            err = err.max(e.abs() / sc);
        }
        if !err.is_finite() {
            h *= MIN_FACTOR;
            rejected = true;
            continue;
        }
        if err <= 1.0 {
            let err = err.max(1e-10);
            let mut fac = err.powf(-ALPHA) * err_prev.powf(BETA) * SAFETY;
            fac = fac.clamp(MIN_FACTOR, MAX_FACTOR);
            if rejected {
                fac = fac.min(1.0);
            }
            err_prev = err;
            rejected = false;
            t = if last { t1 } else { t + h };
            std::mem::swap(&mut x, &mut x_new);
            k.swap(0, 6);
            times.push(t);
            states.push(x.clone());
            h *= fac;
        } else {
            let fac = (SAFETY * err.powf(-ALPHA)).clamp(MIN_FACTOR, 1.0);
            h *= fac;
            rejected = true;
        }
    }
    Ok(Trajectory {
        times,
        states,
        field_eval_count: nfe,
    })
}

/// Two-evaluation starting-step heuristic (the first evaluation, `f0`, is
/// supplied by the caller).
fn initial_step(eval: &mut impl FnMut(&[f64]) -> Vec<f64>, x0: &[f64], f0: &[f64], rtol: f64, atol: f64) -> f64 {
    let sc: Vec<f64> = x0.iter().map(|v| atol + rtol * v.abs()).collect();
    let norm = |v: &[f64]| v.iter().zip(&sc).map(|(a, s)| (a / s).abs()).fold(0.0, f64::max);
    let d0 = norm(x0);
    let d1 = norm(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let x1: Vec<f64> = x0.iter().zip(f0).map(|(x, f)| x + h0 * f).collect();
    let f1 = eval(&x1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1)
}

/// `min(1, ‖x̂ − x*‖₂ / ‖x*‖₂)`.
pub fn normalized_error(predicted: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = predicted
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if diff == 0.0 {
        return 0.0;
    }
    if !diff.is_finite() {
        return 1.0;
    }
    (diff / norm).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Activation, LinearStiffSystem};
    use crate::midpoint::{linear_gammabar, GammaShape, LearnedMidpoint};
    use crate::rng::Rng;
    use approx::assert_abs_diff_eq;

    fn decay() -> VectorField {
        VectorField::linear(Tensor::from_rows(&[vec![-1.0]]).unwrap()).unwrap()
    }

    #[test]
    fn scalar_tl_step_with_analytic_midpoint_is_exact() {
        let f = decay();
        let m = MidpointModel::AnalyticLinear {
            a: Tensor::from_rows(&[vec![-1.0]]).unwrap(),
            order: 1,
        };
        let y = tl_step(&f, &m, &[1.0], 0.1, 1).unwrap();
        assert_abs_diff_eq!(y[0], (-0.1f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn zero_field_leaves_state() {
        let f = VectorField::linear(Tensor::zeros(&[2, 2])).unwrap();
        let mut rng = Rng::new(2);
        let m = MidpointModel::Learned(
            LearnedMidpoint::random(2, 8, Activation::Relu, GammaShape::Full, &mut rng).unwrap(),
        );
        for p in 1..=3 {
            assert_eq!(tl_step(&f, &m, &[0.3, -0.1], 0.2, p).unwrap(), vec![0.3, -0.1]);
        }
    }

    #[test]
    fn degenerate_midpoint_is_truncated_taylor() {
        let f = VectorField::Pendulum { g_over_l: 3.0 };
        for p in 1..=4 {
            let a = tl_step(&f, &MidpointModel::Degenerate, &[0.5, 0.2], 0.1, p).unwrap();
            let b = truncated_taylor_step(&f, &[0.5, 0.2], 0.1, p).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn euler_product() {
        let cfg = IntegratorConfig::new(Scheme::Euler).with_steps(10);
        let tr = integrate(&decay(), None, &[1.0], 0.0, 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(tr.final_state()[0], 0.9f64.powi(10), epsilon = 1e-14);
        assert_eq!(tr.field_eval_count, 10);
        assert_eq!(tr.times.len(), 11);
        assert_eq!(*tr.times.last().unwrap(), 1.0);
    }

    #[test]
    fn rk4_examples() {
        let y = rk4_step(&decay(), &[1.0], 0.1).unwrap()[0];
        assert_abs_diff_eq!(y, 0.9048375, epsilon = 1e-7);
        assert!((y - (-0.1f64).exp()).abs() < 1e-7);
        let zero = VectorField::linear(Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(rk4_step(&zero, &[1.0, 2.0], 0.3).unwrap(), vec![1.0, 2.0]);

        let a = Tensor::from_rows(&[vec![-2.0, 1.0], vec![0.5, -3.0]]).unwrap();
        let f = VectorField::linear(a.clone()).unwrap();
        let dt = 0.2;
        let ad = a.scale(dt);
        let mut poly = Tensor::identity(2);
        let mut term = Tensor::identity(2);
        for k in 1..=4 {
            term = term.matmul(&ad).unwrap().scale(1.0 / k as f64);
            poly.add_assign(&term).unwrap();
        }
        let want = poly.matvec(&[0.4, -0.3]).unwrap();
        let got = rk4_step(&f, &[0.4, -0.3], dt).unwrap();
        for (u, v) in got.iter().zip(&want) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-15);
        }
        let batch = IntegratorConfig::new(Scheme::Rk4);
        let tr = integrate(&f, None, &[0.4, -0.3], 0.0, dt, &batch).unwrap();
        assert_eq!(tr.field_eval_count, 4);
        for (u, v) in tr.final_state().iter().zip(&want) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-15);
        }
    }

    #[test]
    fn hypereuler_zero_net_is_euler() {
        let net = Mlp::zeros(&[2, 4, 1], &[Activation::Relu, Activation::Identity], true).unwrap();
        let y = hypereuler_step(&decay(), &net, &[1.0], 0.1).unwrap();
        assert_eq!(y, euler_step(&decay(), &[1.0], 0.1).unwrap());
        let zero = VectorField::linear(Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(hypereuler_step(&zero, &net, &[1.0], 0.1).unwrap(), vec![1.0]);
        let bad = Mlp::zeros(&[3, 1], &[Activation::Identity], true).unwrap();
        assert!(hypereuler_step(&decay(), &bad, &[1.0], 0.1).is_err());
    }

    #[test]
    fn dopri5_decay_and_stiff() {
        let tr = dopri5_adaptive(&decay(), &[1.0], 0.0, 1.0, 1e-8, 1e-8).unwrap();
        assert!((tr.final_state()[0] - (-1.0f64).exp()).abs() <= 1e-7);

        let sys = LinearStiffSystem::stiff();
        let f = sys.field();
        let tr = dopri5_adaptive(&f, &[0.3, 0.3], 0.0, 0.01, 1.4e-12, 1.4e-12).unwrap();
        let want = sys.solution(&[0.3, 0.3], 0.01).unwrap();
        for (u, v) in tr.final_state().iter().zip(&want) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-10);
        }
        let tl = IntegratorConfig::new(Scheme::TaylorLagrange).with_order(2);
        assert!(tr.field_eval_count >= 10 * tl.evals_per_step());
    }

    #[test]
    fn dopri5_tolerance_monotone() {
        let sys = LinearStiffSystem::new(-1.0, -1000.0, Some(0.3)).unwrap();
        let f = sys.field();
        let x0 = [0.4, -0.2];
        let want = sys.solution(&x0, 0.5).unwrap();
        let mut prev = f64::INFINITY;
        for tol in [1e-6, 1e-9, 1e-12] {
            let tr = dopri5_adaptive(&f, &x0, 0.0, 0.5, tol, tol).unwrap();
            let err = normalized_error(tr.final_state(), &want);
            assert!(err <= prev, "tol {tol}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn dopri5_stiffness_failure() {
        // ẋ = x² from x = 1 blows up at t = 1.
        let f = VectorField::Polynomial(
            crate::dynamics::Polynomial::new(
                1,
                vec![crate::dynamics::Monomial {
                    output: 0,
                    coeff: 1.0,
                    powers: vec![2],
                }],
            )
            .unwrap(),
        );
        let err = dopri5_adaptive(&f, &[1.0], 0.0, 2.0, 1e-10, 1e-10).unwrap_err();
        match err {
            Error::StiffnessFailure { t, .. } => assert!((t - 1.0).abs() < 1e-3, "t = {t}"),
            other => panic!("expected stiffness failure, got {other}"),
        }
    }

    #[test]
    fn tl_with_analytic_midpoint_exact_up_to_large_steps() {
        let sys = LinearStiffSystem::stiff();
        let f = sys.field();
        let m = MidpointModel::AnalyticLinear {
            a: sys.a.clone(),
            order: 1,
        };
        let cfg = IntegratorConfig::new(Scheme::TaylorLagrange);
        for h in [1e-3, 0.05, 0.3] {
            let tr = integrate(&f, Some(StepModel::Midpoint(&m)), &[0.3, -0.4], 0.0, h, &cfg).unwrap();
            let want = sys.solution(&[0.3, -0.4], h).unwrap();
            for (u, v) in tr.final_state().iter().zip(&want) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
            assert_eq!(tr.field_eval_count, 2);
        }
    }

    #[test]
    fn higher_order_analytic_midpoint_exact() {
        let a = Tensor::from_rows(&[vec![-2.0, 1.0], vec![0.5, -3.0]]).unwrap();
        let f = VectorField::linear(a.clone()).unwrap();
        for p in 1..=4 {
            let m = MidpointModel::AnalyticLinear { a: a.clone(), order: p };
            let y = tl_step(&f, &m, &[0.3, 0.1], 0.25, p).unwrap();
            let want = crate::dynamics::exact_linear_solution(&a, &[0.3, 0.1], 0.25).unwrap();
            for (u, v) in y.iter().zip(&want) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-13);
            }
        }
        assert!(linear_gammabar(&a, 0.25, 2).is_ok());
    }

    #[test]
    fn model_presence_is_checked() {
        let cfg = IntegratorConfig::new(Scheme::TaylorLagrange);
        assert!(integrate(&decay(), None, &[1.0], 0.0, 1.0, &cfg).is_err());
        let m = MidpointModel::Degenerate;
        let cfg = IntegratorConfig::new(Scheme::Euler);
        assert!(integrate(&decay(), Some(StepModel::Midpoint(&m)), &[1.0], 0.0, 1.0, &cfg).is_err());
        assert!(integrate(&decay(), None, &[1.0], 1.0, 1.0, &cfg).is_err());
    }

    #[test]
    fn normalized_error_saturates() {
        assert_eq!(normalized_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(normalized_error(&[100.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(normalized_error(&[f64::NAN], &[1.0]), 1.0);
        assert_abs_diff_eq!(normalized_error(&[1.1, 0.0], &[1.0, 0.0]), 0.1, epsilon = 1e-15);
    }
}
