//! Alternating training of the dynamics network and the step companion
//! (midpoint network for Taylor-Lagrange, residual network for HyperEuler).
//!
//! Losses are recorded onto a fresh [`Tape`] per chunk of records; chunk
//! gradients are summed in chunk order so results do not depend on how
//! chunks were scheduled.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Mlp, VectorField};
use crate::error::{Error, Result};
use crate::integrators::{
    dopri5_adaptive, hypereuler_step_batch, rk4_step_batch, tl_step_batch, truncated_taylor_step_batch, BatchStep,
    IntegratorConfig, Scheme,
};
use crate::midpoint::{MidpointModel, TimeEncoding};
use crate::ops::{BatchOps, Eager};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::{map_indexed, Parallelism};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Highest expansion order accepted for training.
pub const MAX_TRAIN_ORDER: usize = 3;

/// Tolerance of the labelling solver used for distillation.
pub const DISTILL_TOL: f64 = 1.4e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x0: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
    pub y: Vec<f64>,
}

impl AsRef<Record> for Record {
    fn as_ref(&self) -> &Record {
        self
    }
}

impl Record {
    pub fn span(&self) -> f64 {
        self.t1 - self.t0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if let Some(first) = records.first() {
            let n = first.x0.len();
            for (i, r) in records.iter().enumerate() {
                if r.x0.len() != n || r.y.len() != n {
                    return Err(Error::Shape(format!(
                        "record {i}: states have dimensions {} and {}, expected {n}",
                        r.x0.len(),
                        r.y.len()
                    )));
                }
                if !(r.t1 > r.t0) {
                    return Err(Error::Domain(format!(
                        "record {i}: need T > t0, got t0 = {}, T = {}",
                        r.t0, r.t1
                    )));
                }
            }
        }
        Ok(Dataset { records })
    }

    /// Consecutive sample pairs of each trajectory as one-interval records.
    pub fn from_trajectories(times: &[Vec<f64>], states: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mut records = Vec::new();
        for (ts, xs) in times.iter().zip(states) {
            for i in 1..ts.len().min(xs.len()) {
                records.push(Record {
                    x0: xs[i - 1].clone(),
                    t0: ts[i - 1],
                    t1: ts[i],
                    y: xs[i].clone(),
                });
            }
        }
        Dataset::new(records)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.x0.len())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Seeded shuffle, then the last `fraction` of records (at least one
    /// when the set has two or more) is held out.
    pub fn split_holdout(&self, fraction: f64, rng: &mut Rng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let mut held = (self.len() as f64 * fraction).round() as usize;
        if fraction > 0.0 && held == 0 && self.len() >= 2 {
            held = 1;
        }
        let cut = self.len() - held.min(self.len());
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }
}

/// Which side of a loss receives gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Field,
    Companion,
}

/// Everything needed to roll a batch of records forward with a fixed-step
/// scheme.
#[derive(Clone, Copy, Debug)]
pub struct LossSpec<'a> {
    pub field: &'a VectorField,
    pub scheme: Scheme,
    pub p: usize,
    /// Fixed steps per record, `Δt = (T − t₀)/H`.
    pub steps: usize,
    pub midpoint: Option<&'a MidpointModel>,
    pub residual: Option<&'a Mlp>,
    /// Remainder-penalty weight (Taylor-Lagrange only).
    pub lambda: f64,
}

impl<'a> LossSpec<'a> {
    pub fn tl(field: &'a VectorField, midpoint: &'a MidpointModel, p: usize) -> Self {
        LossSpec {
            field,
            scheme: Scheme::TaylorLagrange,
            p,
            steps: 1,
            midpoint: Some(midpoint),
            residual: None,
            lambda: 0.0,
        }
    }

    pub fn plain(field: &'a VectorField, scheme: Scheme, p: usize) -> Self {
        LossSpec {
            field,
            scheme,
            p,
            steps: 1,
            midpoint: None,
            residual: None,
            lambda: 0.0,
        }
    }

    pub fn hypereuler(field: &'a VectorField, net: &'a Mlp) -> Self {
        LossSpec {
            field,
            scheme: Scheme::HyperEuler,
            p: 1,
            steps: 1,
            midpoint: None,
            residual: Some(net),
            lambda: 0.0,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("step count H must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!(
                "λ must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        match self.scheme {
            Scheme::TaylorLagrange | Scheme::TruncatedTaylor if !(1..=MAX_TRAIN_ORDER).contains(&self.p) => {
                Err(Error::config(format!(
                    "training supports orders 1..={MAX_TRAIN_ORDER}, got {}",
                    self.p
                )))
            }
            Scheme::TaylorLagrange if self.midpoint.is_none() => Err(Error::config("tl loss needs a midpoint model")),
            Scheme::HyperEuler if self.residual.is_none() => {
                Err(Error::config("hyper-euler loss needs a residual network"))
            }
            Scheme::Dopri5 => Err(Error::config("the adaptive solver cannot be trained through")),
            _ => Ok(()),
        }
    }

    fn companion_params(&self) -> Vec<Tensor> {
        match self.scheme {
            Scheme::TaylorLagrange => self.midpoint.map(|m| m.params()).unwrap_or_default(),
            Scheme::HyperEuler => self.residual.map(|n| n.params()).unwrap_or_default(),
            _ => vec![],
        }
    }

    fn companion_names(&self) -> Vec<String> {
        match self.scheme {
            Scheme::TaylorLagrange => self.midpoint.map(|m| m.param_names()).unwrap_or_default(),
            Scheme::HyperEuler => self.residual.map(|n| n.param_names()).unwrap_or_default(),
            _ => vec![],
        }
    }

    fn encoding(&self) -> TimeEncoding {
        match (self.scheme, self.midpoint) {
            (Scheme::TaylorLagrange, Some(m)) => m.encoding(),
            _ => TimeEncoding::Raw,
        }
    }

    fn max_power(&self) -> usize {
        match self.scheme {
            Scheme::TaylorLagrange | Scheme::TruncatedTaylor => self.p,
            Scheme::HyperEuler => 2,
            _ => 1,
        }
    }

    /// Field evaluations needed to roll `records` forward.
    pub fn nfe(&self, records: usize) -> usize {
        let cfg = IntegratorConfig::new(self.scheme).with_order(self.p);
        records * self.steps * cfg.evals_per_step()
    }
}

struct Rollout<V> {
    prediction: V,
    remainders: Vec<V>,
}

fn rollout<B: BatchOps>(
    ops: &mut B,
    spec: &LossSpec,
    field_params: &[B::V],
    companion_params: Vec<B::V>,
    x0: B::V,
    dts: &[f64],
) -> Result<Rollout<B::V>> {
    let step = BatchStep::constants(ops, dts, spec.encoding(), spec.max_power());
    let mut x = x0;
    let mut remainders = Vec::new();
    match spec.scheme {
        Scheme::TaylorLagrange => {
            let model = spec.midpoint.expect("validated");
            let learned = matches!(model, MidpointModel::Learned(_));
            let bound = model.bind(ops, learned.then_some(companion_params), dts)?;
            for _ in 0..spec.steps {
                let (next, r) = tl_step_batch(ops, spec.field, field_params, &bound, &x, &step, spec.p)?;
                x = next;
                remainders.push(r);
            }
        }
        Scheme::TruncatedTaylor | Scheme::Euler => {
            let p = if spec.scheme == Scheme::Euler { 1 } else { spec.p };
            for _ in 0..spec.steps {
                x = truncated_taylor_step_batch(ops, spec.field, field_params, &x, &step, p)?;
            }
        }
        Scheme::Rk4 => {
            for _ in 0..spec.steps {
                x = rk4_step_batch(ops, spec.field, field_params, &x, &step)?;
            }
        }
        Scheme::HyperEuler => {
            let net = spec.residual.expect("validated");
            for _ in 0..spec.steps {
                x = hypereuler_step_batch(ops, spec.field, field_params, net, &companion_params, &x, &step)?;
            }
        }
        Scheme::Dopri5 => unreachable!("rejected by validation"),
    }
    Ok(Rollout {
        prediction: x,
        remainders,
    })
}

fn batch_tensors<R: AsRef<Record>>(records: &[R]) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let records: Vec<&Record> = records.iter().map(|r| r.as_ref()).collect();
    let n = records.first().map(|r| r.x0.len()).unwrap_or(0);
    let b = records.len();
    let x0 = Tensor::new(vec![b, n], records.iter().flat_map(|r| r.x0.iter().copied()).collect())?;
    let y = Tensor::new(vec![b, n], records.iter().flat_map(|r| r.y.iter().copied()).collect())?;
    let spans = records.iter().map(|r| r.span()).collect();
    Ok((x0, y, spans))
}

/// Value and gradients of a loss on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    /// `data + λ·penalty`.
    pub loss: f64,
    /// Mean squared error over records and components.
    pub data: f64,
    /// `Σ_j Σ_i ‖Δt^p f^[p](Γ_ij)‖²`.
    pub penalty: f64,
    /// Gradients for the field parameters (zeros when frozen).
    pub field_grads: Vec<Tensor>,
    /// Gradients for the companion parameters (zeros when frozen).
    pub companion_grads: Vec<Tensor>,
}

fn first_bad_row(values: &[&Tensor]) -> Option<usize> {
    let mut bad: Option<usize> = None;
    for t in values {
        let cols = t.shape().get(1).copied().unwrap_or(1).max(1);
        if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
            let row = pos / cols;
            bad = Some(bad.map_or(row, |b| b.min(row)));
        }
    }
    bad
}

fn chunk_loss(
    spec: &LossSpec,
    records: &[&Record],
    offset: usize,
    data_scale: f64,
    trainable: Trainable,
) -> Result<LossEval> {
    let (x0, y, spans) = batch_tensors(records)?;
    let dts: Vec<f64> = spans.iter().map(|s| s / spec.steps as f64).collect();
    let field_values = spec.field.params();
    let companion_values = spec.companion_params();

    let mut tape = Tape::new();
    let leaf = |tape: &mut Tape, name: String, train: bool| {
        if train {
            tape.param(name)
        } else {
            tape.input(name)
        }
    };
    let field_vars: Vec<_> = spec
        .field
        .param_names()
        .into_iter()
        .map(|name| leaf(&mut tape, format!("field.{name}"), trainable == Trainable::Field))
        .collect();
    let companion_vars: Vec<_> = spec
        .companion_names()
        .into_iter()
        .map(|name| {
            leaf(
                &mut tape,
                format!("companion.{name}"),
                trainable == Trainable::Companion,
            )
        })
        .collect();
    let x0v = tape.constant(x0);
    let yv = tape.constant(y);
    let out = rollout(&mut tape, spec, &field_vars, companion_vars, x0v, &dts)?;
    let diff = tape.sub(out.prediction, yv);
    let sq = tape.sum_squares(diff);
    let data = tape.scale(sq, data_scale);
    let mut penalty = tape.constant(Tensor::scalar(0.0));
    for r in &out.remainders {
        let s = tape.sum_squares(*r);
        penalty = tape.add(penalty, s);
    }
    let weighted = tape.scale(penalty, spec.lambda);
    let total = tape.add(data, weighted);
    tape.output(total);
    tape.output(data);
    tape.output(penalty);
    tape.output(out.prediction);
    for r in &out.remainders {
        tape.output(*r);
    }

    let leaves: Vec<Tensor> = field_values.into_iter().chain(companion_values).collect();
    let values = tape.forward(&leaves)?;
    let loss = values[0].data()[0];
    if !loss.is_finite() {
        let rows: Vec<&Tensor> = values[3..].iter().collect();
        let row = first_bad_row(&rows).unwrap_or(0);
        return Err(Error::NonFiniteLoss { record: offset + row });
    }
    let mut grads = tape.backward_all(None)?;
    let companion_grads = grads.split_off(field_vars.len());
    Ok(LossEval {
        loss,
        data: values[1].data()[0],
        penalty: values[2].data()[0],
        field_grads: grads,
        companion_grads,
    })
}

/// Loss and gradients over `records`, split into chunks of `chunk` records
/// (0 = one chunk) evaluated under `mode` and reduced in chunk order.
pub fn evaluate_loss(
    spec: &LossSpec,
    records: &[Record],
    trainable: Trainable,
    mode: Parallelism,
    chunk: usize,
) -> Result<LossEval> {
    let refs: Vec<&Record> = records.iter().collect();
    evaluate_refs(spec, &refs, trainable, mode, chunk)
}

fn evaluate_refs(
    spec: &LossSpec,
    records: &[&Record],
    trainable: Trainable,
    mode: Parallelism,
    chunk: usize,
) -> Result<LossEval> {
    spec.validate()?;
    if records.is_empty() {
        return Err(Error::Domain("loss needs a non-empty batch".into()));
    }
    let chunk = if chunk == 0 { records.len() } else { chunk };
    let n = records[0].x0.len().max(1);
    let data_scale = 1.0 / (records.len() * n) as f64;
    let count = records.len().div_ceil(chunk);
    let parts = map_indexed(count, mode, |c| {
        let lo = c * chunk;
        let hi = (lo + chunk).min(records.len());
        chunk_loss(spec, &records[lo..hi], lo, data_scale, trainable)
    });
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("at least one chunk")?;
    for part in iter {
        let part = part?;
        acc.loss += part.loss;
        acc.data += part.data;
        acc.penalty += part.penalty;
        for (a, g) in acc.field_grads.iter_mut().zip(&part.field_grads) {
            *a = a.add(g)?;
        }
        for (a, g) in acc.companion_grads.iter_mut().zip(&part.companion_grads) {
            *a = a.add(g)?;
        }
    }
    Ok(acc)
}

/// Taylor-Lagrange dynamics loss: gradients into the field, the midpoint
/// model frozen.
pub fn dynamics_loss(
    field: &VectorField,
    midpoint: &MidpointModel,
    records: &[Record],
    p: usize,
    steps: usize,
    lambda: f64,
) -> Result<LossEval> {
    let spec = LossSpec::tl(field, midpoint, p).with_steps(steps).with_lambda(lambda);
    evaluate_loss(&spec, records, Trainable::Field, Parallelism::Sequential, 0)
}

/// Midpoint loss against distilled labels: gradients into the midpoint
/// model, the field frozen.
pub fn midpoint_loss(
    field: &VectorField,
    midpoint: &MidpointModel,
    records: &[Record],
    p: usize,
    steps: usize,
) -> Result<LossEval> {
    let spec = LossSpec::tl(field, midpoint, p).with_steps(steps);
    evaluate_loss(&spec, records, Trainable::Companion, Parallelism::Sequential, 0)
}

/// Forward predictions without gradients.
pub fn predict(spec: &LossSpec, records: &[Record]) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if records.is_empty() {
        return Ok(vec![]);
    }
    let (x0, _, spans) = batch_tensors(records)?;
    let dts: Vec<f64> = spans.iter().map(|s| s / spec.steps as f64).collect();
    let mut ops = Eager;
    let field_params = spec.field.params();
    let out = rollout(&mut ops, spec, &field_params, spec.companion_params(), x0, &dts)?;
    let n = out.prediction.shape()[1];
    Ok(out.prediction.data().chunks(n).map(|c| c.to_vec()).collect())
}

/// Mean over records of `‖x̂ − y‖² / n`.
pub fn prediction_mse(spec: &LossSpec, records: &[Record]) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(spec, records)?;
    let total: f64 = pred
        .iter()
        .zip(records)
        .map(|(p, r)| p.iter().zip(&r.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
        .sum();
    Ok(total / records.len() as f64)
}

/// Mean over records of `Σ_i ‖Δt^p f^[p](Γ_i)‖²` for a Taylor-Lagrange spec.
pub fn remainder_magnitude(spec: &LossSpec, records: &[Record]) -> Result<f64> {
    spec.validate()?;
    if spec.scheme != Scheme::TaylorLagrange {
        return Err(Error::config("remainder magnitude is defined for tl only"));
    }
    if records.is_empty() {
        return Ok(0.0);
    }
    let (x0, _, spans) = batch_tensors(records)?;
    let dts: Vec<f64> = spans.iter().map(|s| s / spec.steps as f64).collect();
    let mut ops = Eager;
    let field_params = spec.field.params();
    let out = rollout(&mut ops, spec, &field_params, spec.companion_params(), x0, &dts)?;
    let total: f64 = out
        .remainders
        .iter()
        .map(|r| r.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok(total / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distilled {
    pub dataset: Dataset,
    /// Samples dropped because the labelling solver failed.
    pub skipped: usize,
}

/// Samples `count` records from `source` with replacement and relabels each
/// with the adaptive solver run on the frozen `field`.
pub fn distill_dataset(
    field: &VectorField,
    source: &Dataset,
    count: usize,
    rng: &mut Rng,
    mode: Parallelism,
) -> Result<Distilled> {
    if source.is_empty() {
        return Err(Error::Domain("cannot distill from an empty dataset".into()));
    }
    let picks: Vec<usize> = (0..count).map(|_| rng.index(source.len())).collect();
    let labelled = map_indexed(count, mode, |i| {
        let r = &source.records()[picks[i]];
        dopri5_adaptive(field, &r.x0, r.t0, r.t1, DISTILL_TOL, DISTILL_TOL).map(|traj| Record {
            x0: r.x0.clone(),
            t0: r.t0,
            t1: r.t1,
            y: traj.final_state().to_vec(),
        })
    });
    let mut records = Vec::with_capacity(count);
    let mut skipped = 0;
    for item in labelled {
        match item {
            Ok(r) => records.push(r),
            Err(Error::StiffnessFailure { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        eprintln!("warning: distillation skipped {skipped} of {count} samples after solver failure");
    }
    Ok(Distilled {
        dataset: Dataset { records },
        skipped,
    })
}

fn default_one() -> usize {
    1
}
fn default_distill() -> usize {
    1024
}
fn default_batch() -> usize {
    512
}
fn default_lr() -> f64 {
    1e-3
}
fn default_eval_every() -> usize {
    100
}
fn default_holdout() -> f64 {
    0.1
}
fn default_scheme() -> Scheme {
    Scheme::TaylorLagrange
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Outer rounds.
    #[serde(default = "default_one")]
    pub n_train: usize,
    /// Dynamics steps per round.
    #[serde(default)]
    pub n_theta: usize,
    /// Companion steps per round.
    #[serde(default)]
    pub n_phi: usize,
    /// Distilled samples per round.
    #[serde(default = "default_distill")]
    pub n_distill: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_theta: f64,
    #[serde(default = "default_lr")]
    pub lr_phi: f64,
    #[serde(default)]
    pub decay: f64,
    #[serde(default = "default_one")]
    pub p: usize,
    /// Fixed steps `H` per record.
    #[serde(default = "default_one")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Held-out MSE is logged every this many steps (and at phase ends).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Records per tape; 0 puts the whole minibatch on one tape.
    #[serde(default)]
    pub chunk_size: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Relabel companion data with the adaptive solver each round. When
    /// off, the companion trains on the dataset labels directly.
    #[serde(default = "default_true")]
    pub distill: bool,
    /// Whether the dynamics networks carry bias vectors.
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::config("n_train must be at least 1"));
        }
        if self.batch_size == 0 || self.n_distill == 0 {
            return Err(Error::config("batch_size and n_distill must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!(
                "λ must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.lr_theta > 0.0 && self.lr_phi > 0.0) || !(self.decay >= 0.0) {
            return Err(Error::config("learning rates must be positive and decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("holdout_fraction must lie in [0, 1)"));
        }
        if self.steps == 0 {
            return Err(Error::config("step count H must be at least 1"));
        }
        match self.scheme {
            Scheme::Dopri5 => Err(Error::config("training through the adaptive solver is not supported")),
            Scheme::TaylorLagrange | Scheme::TruncatedTaylor if !(1..=MAX_TRAIN_ORDER).contains(&self.p) => {
                Err(Error::config(format!(
                    "training supports orders 1..={MAX_TRAIN_ORDER}, got {}",
                    self.p
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Parameters being trained: the dynamics field and the scheme's companion.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub field: VectorField,
    pub midpoint: Option<MidpointModel>,
    pub residual: Option<Mlp>,
}

impl Models {
    pub fn spec(&self, cfg: &TrainingConfig) -> LossSpec<'_> {
        LossSpec {
            field: &self.field,
            scheme: cfg.scheme,
            p: cfg.p,
            steps: cfg.steps,
            midpoint: self.midpoint.as_ref(),
            residual: self.residual.as_ref(),
            lambda: cfg.lambda,
        }
    }

    fn set_companion(&mut self, params: &[Tensor]) -> Result<()> {
        if let Some(m) = self.midpoint.as_mut() {
            return m.set_params(params);
        }
        if let Some(n) = self.residual.as_mut() {
            return n.set_params(params);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dynamics,
    Companion,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Dynamics => "dynamics",
            Phase::Companion => "companion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub round: usize,
    pub phase: Phase,
    pub loss: f64,
    pub penalty: f64,
    pub heldout_mse: Option<f64>,
    pub nfe: usize,
    pub wall_ns: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    /// Distilled samples dropped after solver failures, summed over rounds.
    pub skipped: usize,
}

impl TrainingLog {
    pub const HEADER: [&'static str; 7] = ["step", "round", "phase", "loss", "penalty", "heldout_mse", "nfe"];

    /// Last logged held-out MSE.
    pub fn final_heldout_mse(&self) -> Option<f64> {
        self.entries.iter().rev().find_map(|e| e.heldout_mse)
    }

    /// CSV without the wall-clock column, so equal seeds give equal bytes.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Csv(e.to_string());
        w.write_record(Self::HEADER).map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([
                e.step.to_string(),
                e.round.to_string(),
                e.phase.name().to_string(),
                format!("{:e}", e.loss),
                format!("{:e}", e.penalty),
                e.heldout_mse.map(|v| format!("{v:e}")).unwrap_or_default(),
                e.nfe.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A training run stopped by a numerical failure; `checkpoint` holds the
/// parameters before the failing step.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub checkpoint: Models,
    pub log: TrainingLog,
}

impl fmt::Display for Aborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training aborted after {} steps: {}",
            self.log.entries.len(),
            self.error
        )
    }
}

impl std::error::Error for Aborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub models: Models,
    pub log: TrainingLog,
}

/// Epoch-shuffled minibatch indices.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batcher {
    fn new(len: usize, size: usize) -> Self {
        Batcher {
            order: (0..len).collect(),
            pos: len,
            size,
        }
    }

    fn next(&mut self, rng: &mut Rng) -> &[usize] {
        if self.pos >= self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let lo = self.pos;
        let hi = (lo + self.size).min(self.order.len());
        self.pos = hi;
        &self.order[lo..hi]
    }
}

/// Runs the alternating loop: each round takes `n_theta` Adam steps on the
/// field with the companion frozen, then (when the scheme has a learned
/// companion) relabels `n_distill` samples with the adaptive solver and takes
/// `n_phi` Adam steps on the companion with the field frozen.
pub fn train(
    cfg: &TrainingConfig,
    train_set: &Dataset,
    heldout: &Dataset,
    init: Models,
    mode: Parallelism,
) -> std::result::Result<TrainOutcome, Box<Aborted>> {
    let mut trainer = Trainer::new(cfg, init);
    match trainer.run(train_set, heldout, mode) {
        Ok(()) => Ok(TrainOutcome {
            models: trainer.models,
            log: trainer.log,
        }),
        Err(error) => Err(Box::new(Aborted {
            error,
            checkpoint: trainer.models,
            log: trainer.log,
        })),
    }
}

struct Trainer<'a> {
    cfg: &'a TrainingConfig,
    models: Models,
    log: TrainingLog,
    rng: Rng,
    step: usize,
    start: Instant,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainingConfig, models: Models) -> Self {
        Trainer {
            cfg,
            models,
            log: TrainingLog::default(),
            rng: Rng::new(cfg.seed),
            step: 0,
            start: Instant::now(),
        }
    }

    fn has_companion(&self) -> bool {
        match self.cfg.scheme {
            Scheme::TaylorLagrange => matches!(self.models.midpoint, Some(MidpointModel::Learned(_))),
            Scheme::HyperEuler => self.models.residual.is_some(),
            _ => false,
        }
    }

    fn run(&mut self, train_set: &Dataset, heldout: &Dataset, mode: Parallelism) -> Result<()> {
        self.cfg.validate()?;
        self.models.spec(self.cfg).validate()?;
        if train_set.is_empty() && (self.cfg.n_theta > 0 || self.cfg.n_phi > 0) {
            return Err(Error::Domain("training set is empty".into()));
        }
        let mut field_opt = Adam::new(
            AdamConfig::new(self.cfg.lr_theta, self.cfg.decay),
            &self.models.field.params(),
        );
        let companion_params = self.models.spec(self.cfg).companion_params();
        let mut companion_opt = Adam::new(AdamConfig::new(self.cfg.lr_phi, self.cfg.decay), &companion_params);
        let mut field_batches = Batcher::new(train_set.len(), self.cfg.batch_size);
        let mut data_rng = self.rng.fork(1);
        let mut distill_rng = self.rng.fork(2);
        for round in 0..self.cfg.n_train {
            for i in 0..self.cfg.n_theta {
                let idx = field_batches.next(&mut data_rng).to_vec();
                let batch: Vec<&Record> = idx.iter().map(|&i| &train_set.records()[i]).collect();
                let last = i + 1 == self.cfg.n_theta;
                self.step_once(Phase::Dynamics, round, &batch, heldout, &mut field_opt, last, mode)?;
            }
            if self.cfg.n_phi == 0 || !self.has_companion() {
                continue;
            }
            let companion_set = if self.cfg.distill {
                let d = distill_dataset(
                    &self.models.field,
                    train_set,
                    self.cfg.n_distill,
                    &mut distill_rng,
                    mode,
                )?;
                self.log.skipped += d.skipped;
                d.dataset
            } else {
                train_set.clone()
            };
            if companion_set.is_empty() {
                return Err(Error::Domain("every distilled sample was skipped".into()));
            }
            let mut batches = Batcher::new(companion_set.len(), self.cfg.batch_size);
            for i in 0..self.cfg.n_phi {
                let idx = batches.next(&mut data_rng).to_vec();
                let batch: Vec<&Record> = idx.iter().map(|&i| &companion_set.records()[i]).collect();
                let last = i + 1 == self.cfg.n_phi;
                self.step_once(Phase::Companion, round, &batch, heldout, &mut companion_opt, last, mode)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn step_once(
        &mut self,
        phase: Phase,
        round: usize,
        batch: &[&Record],
        heldout: &Dataset,
        opt: &mut Adam,
        last: bool,
        mode: Parallelism,
    ) -> Result<()> {
        let spec = self.models.spec(self.cfg);
        let trainable = match phase {
            Phase::Dynamics => Trainable::Field,
            Phase::Companion => Trainable::Companion,
        };
        // The companion phase fits the solver labels only.
        let spec = if phase == Phase::Companion {
            spec.with_lambda(0.0)
        } else {
            spec
        };
        let eval = evaluate_refs(&spec, batch, trainable, mode, self.cfg.chunk_size)?;
        let nfe = spec.nfe(batch.len());
        match phase {
            Phase::Dynamics => {
                let mut params = self.models.field.params();
                let names = self.models.field.param_names();
                opt.step(&mut params, &eval.field_grads, &names)?;
                self.models.field.set_params(&params)?;
            }
            Phase::Companion => {
                let mut params = spec.companion_params();
                let names = spec.companion_names();
                opt.step(&mut params, &eval.companion_grads, &names)?;
                self.models.set_companion(&params)?;
            }
        }
        self.step += 1;
        let every = self.cfg.eval_every.max(1);
        let heldout_mse = if !heldout.is_empty() && (last || self.step.is_multiple_of(every)) {
            Some(prediction_mse(&self.models.spec(self.cfg), heldout.records())?)
        } else {
            None
        };
        self.log.entries.push(LogEntry {
            step: self.step,
            round,
            phase,
            loss: eval.loss,
            penalty: eval.penalty,
            heldout_mse,
            nfe,
            wall_ns: self.start.elapsed().as_nanos(),
        });
        Ok(())
    }
}
