//! Vector fields `ẋ = f(x)`: analytic test systems and perceptron dynamics.

use serde::{Deserialize, Serialize};

use crate::dual::Scalar;
use crate::error::{Error, Result};
use crate::ops::{BatchOps, Eager};
use crate::rng::Rng;
use crate::tape::Unary;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Relu,
}

impl Activation {
    pub fn unary(self) -> Option<Unary> {
        match self {
            Activation::Identity => None,
            Activation::Tanh => Some(Unary::Tanh),
            Activation::Sigmoid => Some(Unary::Sigmoid),
            Activation::Softplus => Some(Unary::Softplus),
            Activation::Exp => Some(Unary::Exp),
            Activation::Relu => Some(Unary::Relu),
        }
    }

    pub fn name(self) -> &'static str {
        match self.unary() {
            None => "identity",
            Some(u) => u.name(),
        }
    }

    /// Whether Taylor coefficients of every order exist.
    pub fn is_smooth(self) -> bool {
        self != Activation::Relu
    }

    fn apply_scalar<S: Scalar>(self, x: &S) -> S {
        match self {
            Activation::Identity => x.clone(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Softplus => x.softplus(),
            Activation::Exp => x.exp(),
            Activation::Relu => x.relu(),
        }
    }
}

/// Fully connected layer `y = act(x W + b)` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub activation: Activation,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

/// Multilayer perceptron acting on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("perceptron needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.rank() != 2 {
                return Err(Error::Shape(format!("layer {i}: weight must be a matrix")));
            }
            layer.weight.ensure_finite(&format!("layer{i}.weight"))?;
            if let Some(b) = &layer.bias {
                if b.len() != layer.outputs() {
                    return Err(Error::Shape(format!(
                        "layer {i}: bias has {} entries, expected {}",
                        b.len(),
                        layer.outputs()
                    )));
                }
                b.ensure_finite(&format!("layer{i}.bias"))?;
            }
            if i > 0 && layers[i - 1].outputs() != layer.inputs() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    layer.inputs(),
                    i - 1,
                    layers[i - 1].outputs()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// Uniform `±1/√fan_in` initialization for weights and biases.
    /// `sizes` lists layer widths including input and output;
    /// `activations` has one entry per layer.
    pub fn random(sizes: &[usize], activations: &[Activation], bias: bool, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::Shape(format!(
                "{} sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Tensor::new(
                    vec![w[0], w[1]],
                    (0..w[0] * w[1]).map(|_| rng.uniform(-bound, bound)).collect(),
                )
                .expect("sizes agree");
                let bias = bias.then(|| Tensor::vector((0..w[1]).map(|_| rng.uniform(-bound, bound)).collect()));
                Dense {
                    weight,
                    bias,
                    activation,
                }
            })
            .collect();
        Mlp::new(layers)
    }

    /// All weights and biases set to zero.
    pub fn zeros(sizes: &[usize], activations: &[Activation], bias: bool) -> Result<Self> {
        let mut rng = Rng::new(0);
        let mut m = Mlp::random(sizes, activations, bias, &mut rng)?;
        for t in m.params_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Multiplies the last layer's weights and bias by `s`.
    pub fn scale_output(&mut self, s: f64) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight = last.weight.scale(s);
        if let Some(b) = &mut last.bias {
            *b = b.scale(s);
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.clone());
            if let Some(b) = &l.bias {
                out.push(b.clone());
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("layer{i}.weight"));
            if l.bias.is_some() {
                out.push(format!("layer{i}.bias"));
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let names = self.param_names();
        let slots = self.params_mut();
        if params.len() != slots.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for ((slot, new), name) in slots.into_iter().zip(params).zip(&names) {
            if slot.shape() != new.shape() {
                return Err(Error::Shape(format!(
                    "{name}: shape {:?} does not match {:?}",
                    new.shape(),
                    slot.shape()
                )));
            }
            new.ensure_finite(name)?;
            *slot = new.clone();
        }
        Ok(())
    }

    /// First activation that is not smooth, if any.
    pub fn non_smooth(&self) -> Option<Activation> {
        self.layers.iter().map(|l| l.activation).find(|a| !a.is_smooth())
    }

    /// Batched forward pass; `params` are backend values in
    /// [`Mlp::params`] order.
    pub fn forward<B: BatchOps>(&self, ops: &mut B, x: &B::V, params: &[B::V]) -> Result<B::V> {
        let mut h = x.clone();
        let mut it = params.iter();
        for layer in &self.layers {
            let w = it.next().ok_or_else(|| Error::Shape("missing weight".into()))?;
            h = ops.matmul(&h, w)?;
            if layer.bias.is_some() {
                let b = it.next().ok_or_else(|| Error::Shape("missing bias".into()))?;
                h = ops.add_row(&h, b)?;
            }
            if let Some(u) = layer.activation.unary() {
                h = ops.unary(&h, u);
            }
        }
        Ok(h)
    }

    /// Forward pass on a batch with the network's own parameters.
    pub fn eval_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(&mut Eager, x, &self.params())
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            let (n_in, n_out) = (layer.inputs(), layer.outputs());
            let w = layer.weight.data();
            let mut z = match &layer.bias {
                Some(b) => b.data().to_vec(),
                None => vec![0.0; n_out],
            };
            for i in 0..n_in {
                let hi = h[i];
                let row = &w[i * n_out..(i + 1) * n_out];
                for (zj, wij) in z.iter_mut().zip(row) {
                    *zj += hi * wij;
                }
            }
            if let Some(u) = layer.activation.unary() {
                for zj in &mut z {
                    *zj = u.apply(*zj);
                }
            }
            h = z;
        }
        h
    }

    pub fn eval_scalar<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            let n_out = layer.outputs();
            let w = layer.weight.data();
            h = (0..n_out)
                .map(|j| {
                    let mut acc = match &layer.bias {
                        Some(b) => S::from_f64(b.data()[j]),
                        None => S::from_f64(0.0),
                    };
                    for (i, hi) in h.iter().enumerate() {
                        acc = acc + hi.scale(w[i * n_out + j]);
                    }
                    layer.activation.apply_scalar(&acc)
                })
                .collect();
        }
        h
    }

    /// Product of per-layer Frobenius norms times activation Lipschitz
    /// constants; an upper bound on the network's 2-norm Lipschitz constant
    /// wherever the activations are globally Lipschitz.
    pub fn lipschitz_upper_bound(&self) -> Option<f64> {
        let mut bound = 1.0;
        for l in &self.layers {
            let act = match l.activation {
                Activation::Identity | Activation::Tanh | Activation::Softplus | Activation::Relu => 1.0,
                Activation::Sigmoid => 0.25,
                Activation::Exp => return None,
            };
            bound *= l.weight.norm2() * act;
        }
        Some(bound)
    }
}

/// One term `coeff · Π_i x_i^{powers_i}` of output component `output`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub output: usize,
    pub coeff: f64,
    pub powers: Vec<u32>,
}

/// Polynomial vector field given as a sum of monomials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub dim: usize,
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(dim: usize, terms: Vec<Monomial>) -> Result<Self> {
        for t in &terms {
            if t.output >= dim || t.powers.len() != dim {
                return Err(Error::Shape(format!("monomial {t:?} does not fit dimension {dim}")));
            }
            if !t.coeff.is_finite() {
                return Err(Error::NonFinite("polynomial coefficient".into()));
            }
        }
        Ok(Polynomial { dim, terms })
    }

    /// Random polynomial with `terms` monomials of total degree ≤ `degree`.
    pub fn random(dim: usize, terms: usize, degree: u32, rng: &mut Rng) -> Self {
        let terms = (0..terms)
            .map(|_| {
                let mut powers = vec![0u32; dim];
                let deg = rng.index(degree as usize + 1);
                for _ in 0..deg {
                    powers[rng.index(dim)] += 1;
                }
                Monomial {
                    output: rng.index(dim),
                    coeff: rng.uniform(-1.0, 1.0),
                    powers,
                }
            })
            .collect();
        Polynomial { dim, terms }
    }

    pub fn eval_scalar<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut out = vec![S::from_f64(0.0); self.dim];
        for t in &self.terms {
            let mut m: Option<S> = None;
            for (xi, &k) in x.iter().zip(&t.powers) {
                for _ in 0..k {
                    m = Some(match m {
                        None => xi.clone(),
                        Some(v) => v * xi.clone(),
                    });
                }
            }
            let term = match m {
                None => S::from_f64(t.coeff),
                Some(v) => v.scale(t.coeff),
            };
            out[t.output] = out[t.output].clone() + term;
        }
        out
    }

    /// Column indices of the factors of each monomial, with repetition.
    pub(crate) fn factors(&self, term: &Monomial) -> Vec<usize> {
        let mut f = Vec::new();
        for (i, &k) in term.powers.iter().enumerate() {
            f.extend(std::iter::repeat_n(i, k as usize));
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VectorField {
    /// `f(x) = A x`.
    Linear(Tensor),
    /// Frictionless pendulum `(θ, ω)' = (ω, −(g/l) sin θ)`.
    Pendulum {
        g_over_l: f64,
    },
    Mlp(Mlp),
    Polynomial(Polynomial),
}

impl VectorField {
    pub fn linear(a: Tensor) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape(format!(
                "linear field needs a square matrix, got {:?}",
                a.shape()
            )));
        }
        a.ensure_finite("A")?;
        Ok(VectorField::Linear(a))
    }

    pub fn mlp(net: Mlp) -> Result<Self> {
        if net.input_dim() != net.output_dim() {
            return Err(Error::Shape(format!(
                "dynamics network maps {} to {} dimensions",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(VectorField::Mlp(net))
    }

    pub fn dim(&self) -> usize {
        match self {
            VectorField::Linear(a) => a.rows(),
            VectorField::Pendulum { .. } => 2,
            VectorField::Mlp(m) => m.input_dim(),
            VectorField::Polynomial(p) => p.dim,
        }
    }

    /// Primitive that prevents expansions beyond first order, if any.
    pub fn non_smooth_primitive(&self) -> Option<&'static str> {
        match self {
            VectorField::Mlp(m) => m.non_smooth().map(Activation::name),
            _ => None,
        }
    }

    /// Parameter tensors the batched evaluation reads; trainable for `Mlp`.
    pub fn params(&self) -> Vec<Tensor> {
        match self {
            VectorField::Linear(a) => vec![a.transpose()],
            VectorField::Mlp(m) => m.params(),
            VectorField::Pendulum { .. } | VectorField::Polynomial(_) => vec![],
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            VectorField::Linear(_) => vec!["A^T".into()],
            VectorField::Mlp(m) => m.param_names(),
            _ => vec![],
        }
    }

    /// Replaces the parameters returned by [`VectorField::params`].
    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        match self {
            VectorField::Linear(a) => {
                let [t] = params else {
                    return Err(Error::Shape("linear field takes one matrix".into()));
                };
                if t.shape() != a.shape() {
                    return Err(Error::Shape("matrix shape changed".into()));
                }
                t.ensure_finite("A")?;
                *a = t.transpose();
                Ok(())
            }
            VectorField::Mlp(m) => m.set_params(params),
            _ if params.is_empty() => Ok(()),
            _ => Err(Error::Shape("field has no parameters".into())),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "state has dimension {}, field expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match self {
            VectorField::Linear(a) => a.matvec(x).expect("dimension checked"),
            VectorField::Pendulum { g_over_l } => vec![x[1], -g_over_l * x[0].sin()],
            VectorField::Mlp(m) => m.eval(x),
            VectorField::Polynomial(p) => p.eval_scalar(x),
        }
    }

    pub fn eval_scalar<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        match self {
            VectorField::Linear(a) => (0..a.rows())
                .map(|i| {
                    let mut acc = S::from_f64(0.0);
                    for (j, xj) in x.iter().enumerate() {
                        acc = acc + xj.scale(a.at(i, j));
                    }
                    acc
                })
                .collect(),
            VectorField::Pendulum { g_over_l } => {
                vec![x[1].clone(), x[0].sin().scale(-g_over_l)]
            }
            VectorField::Mlp(m) => m.eval_scalar(x),
            VectorField::Polynomial(p) => p.eval_scalar(x),
        }
    }

    /// Evaluates on a batch of states (one per row).
    pub fn eval_batch(&self, x: &Tensor) -> Result<Tensor> {
        let params: Vec<Tensor> = self.params();
        crate::jets::apply_field(&mut Eager, self, &params, x)
    }

    /// Componentwise Lipschitz bound over an axis-aligned box.
    ///
    /// Linear fields get the exact row-wise bound `‖a_k‖₂` and the pendulum
    /// its analytic global bound. Other fields get the largest ratio
    /// `|f_k(x) − f_k(y)| / ‖x − y‖₂` over `samples` random pairs, which is a
    /// lower estimate of the true constant.
    pub fn lipschitz_estimate(&self, lo: &[f64], hi: &[f64], samples: usize, rng: &mut Rng) -> Result<LipschitzBound> {
        let n = self.dim();
        if lo.len() != n || hi.len() != n {
            return Err(Error::Shape("box dimension does not match the field".into()));
        }
        if lo.iter().zip(hi).any(|(l, h)| !(h > l)) {
            return Err(Error::Domain("box has zero volume".into()));
        }
        if samples < 2 {
            return Err(Error::Domain("need at least two samples".into()));
        }
        let components = match self {
            VectorField::Linear(a) => (0..n)
                .map(|i| a.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
            VectorField::Pendulum { g_over_l } => vec![1.0, g_over_l.abs()],
            _ => {
                let mut best = vec![0.0f64; n];
                for _ in 0..samples {
                    let x = rng.uniform_vec(lo, hi);
                    let y = rng.uniform_vec(lo, hi);
                    let d = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    if d == 0.0 {
                        continue;
                    }
                    let (fx, fy) = (self.eval_unchecked(&x), self.eval_unchecked(&y));
                    for k in 0..n {
                        best[k] = best[k].max((fx[k] - fy[k]).abs() / d);
                    }
                }
                best
            }
        };
        Ok(LipschitzBound::new(components))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzBound {
    pub components: Vec<f64>,
    /// Euclidean norm of `components`.
    pub norm2: f64,
}

impl LipschitzBound {
    pub fn new(components: Vec<f64>) -> Self {
        let norm2 = components.iter().map(|v| v * v).sum::<f64>().sqrt();
        LipschitzBound { components, norm2 }
    }

    /// Inflates every component by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        LipschitzBound::new(self.components.iter().map(|v| v * factor).collect())
    }
}

/// The 2×2 linear test system with prescribed real eigenvalues.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearStiffSystem {
    pub a: Tensor,
    pub eigenvalues: (f64, f64),
}

impl LinearStiffSystem {
    /// `A = V diag(λ₁, λ₂) Vᵀ` with `V` a rotation by `angle` radians
    /// (`None` keeps `A` diagonal).
    pub fn new(l1: f64, l2: f64, angle: Option<f64>) -> Result<Self> {
        let d = Tensor::diag(&[l1, l2]);
        let a = match angle {
            None => d,
            Some(th) => {
                let (s, c) = th.sin_cos();
                let v = Tensor::from_rows(&[vec![c, -s], vec![s, c]])?;
                v.matmul(&d)?.matmul(&v.transpose())?
            }
        };
        let sys = LinearStiffSystem {
            a,
            eigenvalues: (l1, l2),
        };
        let (e1, e2) = sys.spectrum();
        let scale = l1.abs().max(l2.abs()).max(1.0);
        let mut want = [l1, l2];
        want.sort_by(f64::total_cmp);
        if (e1 - want[0]).abs() > 1e-10 * scale || (e2 - want[1]).abs() > 1e-10 * scale {
            return Err(Error::NonFinite(format!(
                "spectrum ({e1}, {e2}) differs from requested ({l1}, {l2})"
            )));
        }
        Ok(sys)
    }

    /// The default stiff system with eigenvalues −1 and −1000.
    pub fn stiff() -> Self {
        LinearStiffSystem::new(-1.0, -1000.0, None).expect("diagonal system is valid")
    }

    /// Eigenvalues of `A` in ascending order, assuming they are real.
    pub fn spectrum(&self) -> (f64, f64) {
        let a = &self.a;
        let tr = a.at(0, 0) + a.at(1, 1);
        let det = a.at(0, 0) * a.at(1, 1) - a.at(0, 1) * a.at(1, 0);
        let half = 0.5 * tr;
        let disc = (half * half - det).max(0.0).sqrt();
        (half - disc, half + disc)
    }

    pub fn field(&self) -> VectorField {
        VectorField::Linear(self.a.clone())
    }

    pub fn solution(&self, x0: &[f64], t: f64) -> Result<Vec<f64>> {
        exact_linear_solution(&self.a, x0, t)
    }
}

/// `expm(A t) x₀`.
pub fn exact_linear_solution(a: &Tensor, x0: &[f64], t: f64) -> Result<Vec<f64>> {
    if t < 0.0 {
        return Err(Error::Domain(format!("time must be non-negative, got {t}")));
    }
    a.scale(t).expm()?.matvec(x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn stiff_linear_eval() {
        let f = LinearStiffSystem::stiff().field();
        assert_eq!(f.eval(&[1.0, 1.0]).unwrap(), vec![-1.0, -1000.0]);
        assert!(f.eval(&[1.0]).is_err());
    }

    #[test]
    fn zero_weight_mlp_returns_bias() {
        let mut rng = Rng::new(3);
        let mut m = Mlp::random(&[2, 4, 2], &[Activation::Tanh, Activation::Identity], true, &mut rng).unwrap();
        let mut params = m.params();
        params[0].data_mut().fill(0.0);
        params[2].data_mut().fill(0.0);
        let bias = params[3].clone();
        m.set_params(&params).unwrap();
        assert_eq!(m.eval(&[0.7, -3.0]), bias.data());
        let batch = m
            .eval_batch(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        assert_eq!(batch.row_slice(1), bias.data());
    }

    #[test]
    fn pendulum_fixed_point() {
        let f = VectorField::Pendulum { g_over_l: 1.0 };
        let v = f.eval(&[std::f64::consts::PI, 0.0]).unwrap();
        assert_eq!(v[0], 0.0);
        assert!(v[1].abs() < 2e-16);
    }

    #[test]
    fn exact_solution_examples() {
        let sys = LinearStiffSystem::stiff();
        assert_eq!(sys.solution(&[0.3, -0.2], 0.0).unwrap(), vec![0.3, -0.2]);
        let y = sys.solution(&[1.0, 1.0], 0.01).unwrap();
        assert_abs_diff_eq!(y[0], (-0.01f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(y[1], (-10.0f64).exp(), epsilon = 1e-14);
        let nil = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let y = exact_linear_solution(&nil, &[0.0, 1.0], 2.0).unwrap();
        assert_abs_diff_eq!(y[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(y[1], 1.0, epsilon = 1e-14);
        assert!(exact_linear_solution(&nil, &[0.0, 1.0], -1.0).is_err());
    }

    #[test]
    fn rotated_system_keeps_spectrum() {
        let sys = LinearStiffSystem::new(-1.0, -1000.0, Some(0.3)).unwrap();
        let (a, b) = sys.spectrum();
        assert_abs_diff_eq!(a, -1000.0, epsilon = 1e-9);
        assert_abs_diff_eq!(b, -1.0, epsilon = 1e-9);
        assert!(sys.a.at(0, 1).abs() > 1.0);
    }

    #[test]
    fn lipschitz_examples() {
        let mut rng = Rng::new(0);
        let f = LinearStiffSystem::stiff().field();
        let l = f.lipschitz_estimate(&[-1.0, -1.0], &[1.0, 1.0], 10, &mut rng).unwrap();
        assert_eq!(l.components, vec![1.0, 1000.0]);

        let constant = VectorField::Polynomial(
            Polynomial::new(
                1,
                vec![Monomial {
                    output: 0,
                    coeff: 3.0,
                    powers: vec![0],
                }],
            )
            .unwrap(),
        );
        let l = constant.lipschitz_estimate(&[-1.0], &[1.0], 50, &mut rng).unwrap();
        assert_eq!(l.components, vec![0.0]);

        let two_x = VectorField::Polynomial(
            Polynomial::new(
                1,
                vec![Monomial {
                    output: 0,
                    coeff: 2.0,
                    powers: vec![1],
                }],
            )
            .unwrap(),
        );
        let l = two_x.lipschitz_estimate(&[-1.0], &[1.0], 2, &mut rng).unwrap();
        assert_abs_diff_eq!(l.components[0], 2.0, epsilon = 1e-12);

        assert!(matches!(
            two_x.lipschitz_estimate(&[1.0], &[1.0], 5, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mlp_estimate_below_layer_norm_product() {
        let mut rng = Rng::new(11);
        let m = Mlp::random(&[2, 8, 2], &[Activation::Tanh, Activation::Identity], true, &mut rng).unwrap();
        let bound = m.lipschitz_upper_bound().unwrap();
        let f = VectorField::mlp(m).unwrap();
        let l = f.lipschitz_estimate(&[-2.0, -2.0], &[2.0, 2.0], 500, &mut rng).unwrap();
        assert!(l.norm2 <= bound * 2f64.sqrt());
        assert!(l.components.iter().all(|&c| c <= bound));
    }
}
