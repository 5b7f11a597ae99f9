//! Midpoint models `Γ = x + Γ̄(x, Δt) ⊙ f(x)` for the Lagrange remainder.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Activation, Mlp, VectorField};
use crate::error::{Error, Result};
use crate::jets::solution_series;
use crate::ops::{BatchOps, Eager};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How the network output multiplies `f(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaShape {
    /// `n` outputs, elementwise product.
    Diag,
    /// `n²` outputs read as a row-major matrix, matrix-vector product.
    Full,
}

impl GammaShape {
    /// Full up to eight dimensions, diagonal beyond.
    pub fn default_for(n: usize) -> Self {
        if n <= 8 {
            GammaShape::Full
        } else {
            GammaShape::Diag
        }
    }

    pub fn outputs(self, n: usize) -> usize {
        match self {
            GammaShape::Diag => n,
            GammaShape::Full => n * n,
        }
    }
}

/// Encoding of the step size as the network's extra input feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeEncoding {
    #[default]
    Raw,
    Log,
}

impl TimeEncoding {
    pub fn encode(self, dt: f64) -> f64 {
        match self {
            TimeEncoding::Raw => dt,
            TimeEncoding::Log => dt.ln(),
        }
    }
}

/// Network `Γ̄_φ(x, Δt)` taking `n + 1` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedMidpoint {
    pub net: Mlp,
    pub shape: GammaShape,
    pub encoding: TimeEncoding,
}

impl LearnedMidpoint {
    pub fn new(net: Mlp, shape: GammaShape, encoding: TimeEncoding) -> Result<Self> {
        if net.input_dim() < 2 {
            return Err(Error::Shape("midpoint network needs n + 1 ≥ 2 inputs".into()));
        }
        let n = net.input_dim() - 1;
        if net.output_dim() != shape.outputs(n) {
            return Err(Error::Shape(format!(
                "{shape:?} midpoint for n = {n} needs {} outputs, network has {}",
                shape.outputs(n),
                net.output_dim()
            )));
        }
        Ok(LearnedMidpoint { net, shape, encoding })
    }

    /// One hidden layer of `hidden` units; the output layer starts scaled
    /// down so the initial model is close to `Γ = x`.
    pub fn random(n: usize, hidden: usize, activation: Activation, shape: GammaShape, rng: &mut Rng) -> Result<Self> {
        let mut net = Mlp::random(
            &[n + 1, hidden, shape.outputs(n)],
            &[activation, Activation::Identity],
            true,
            rng,
        )?;
        net.scale_output(0.01);
        LearnedMidpoint::new(net, shape, TimeEncoding::Raw)
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MidpointModel {
    Learned(LearnedMidpoint),
    /// State-independent midpoint that makes an order-`order` step exact
    /// for `f(x) = A x`.
    AnalyticLinear {
        a: Tensor,
        order: usize,
    },
    /// `Γ = x`.
    Degenerate,
}

/// A midpoint model with its parameters as backend values.
pub enum BoundMidpoint<'a, V> {
    Learned {
        model: &'a LearnedMidpoint,
        params: Vec<V>,
    },
    /// `[B, n²]` rows of per-record Γ̄ matrices.
    Matrix(V),
    Degenerate,
}

impl<V: Clone> BoundMidpoint<'_, V> {
    /// `Γ` for a batch of states `x` with field values `fx`. `dt` is the
    /// `[B, 1]` column of encoded step sizes.
    pub fn apply<B: BatchOps<V = V>>(&self, ops: &mut B, x: &V, fx: &V, dt: &V) -> Result<V> {
        match self {
            BoundMidpoint::Degenerate => Ok(x.clone()),
            BoundMidpoint::Matrix(g) => {
                let corr = ops.batch_matvec(g, fx)?;
                ops.add(x, &corr)
            }
            BoundMidpoint::Learned { model, params } => {
                let input = ops.concat_cols(&[x.clone(), dt.clone()])?;
                let out = model.net.forward(ops, &input, params)?;
                let corr = match model.shape {
                    GammaShape::Full => ops.batch_matvec(&out, fx)?,
                    GammaShape::Diag => ops.mul(&out, fx)?,
                };
                ops.add(x, &corr)
            }
        }
    }
}

impl MidpointModel {
    /// Trainable parameters (empty unless learned).
    pub fn params(&self) -> Vec<Tensor> {
        match self {
            MidpointModel::Learned(m) => m.net.params(),
            _ => vec![],
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            MidpointModel::Learned(m) => m.net.param_names(),
            _ => vec![],
        }
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        match self {
            MidpointModel::Learned(m) => m.net.set_params(params),
            _ if params.is_empty() => Ok(()),
            _ => Err(Error::Shape("midpoint model has no parameters".into())),
        }
    }

    pub fn encoding(&self) -> TimeEncoding {
        match self {
            MidpointModel::Learned(m) => m.encoding,
            _ => TimeEncoding::Raw,
        }
    }

    /// Binds the model for a batch whose rows use step sizes `dts`.
    /// `params` replaces the learned parameters (e.g. tape leaves); `None`
    /// uses the model's own values as constants.
    pub fn bind<'a, B: BatchOps>(
        &'a self,
        ops: &mut B,
        params: Option<Vec<B::V>>,
        dts: &[f64],
    ) -> Result<BoundMidpoint<'a, B::V>> {
        Ok(match self {
            MidpointModel::Degenerate => BoundMidpoint::Degenerate,
            MidpointModel::Learned(m) => BoundMidpoint::Learned {
                model: m,
                params: params.unwrap_or_else(|| m.net.params().into_iter().map(|t| ops.constant(t)).collect()),
            },
            MidpointModel::AnalyticLinear { .. } => {
                BoundMidpoint::Matrix(ops.constant(self.analytic_rows(dts)?.expect("analytic")))
            }
        })
    }

    /// `[B, n²]` analytic Γ̄ rows for the given step sizes.
    pub fn analytic_rows(&self, dts: &[f64]) -> Result<Option<Tensor>> {
        let MidpointModel::AnalyticLinear { a, order } = self else {
            return Ok(None);
        };
        let n = a.rows();
        let mut data = Vec::with_capacity(dts.len() * n * n);
        let mut cache: Option<(f64, Tensor)> = None;
        for &dt in dts {
            let g = match &cache {
                Some((d, g)) if *d == dt => g.clone(),
                _ => {
                    let g = linear_gammabar(a, dt, *order)?;
                    cache = Some((dt, g.clone()));
                    g
                }
            };
            data.extend_from_slice(g.data());
        }
        Ok(Some(Tensor::new(vec![dts.len(), n * n], data)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MidpointPrediction {
    pub gamma: Vec<f64>,
    /// The Γ̄ actually applied: `n×n` for matrix models, length `n` for
    /// diagonal ones, empty for the degenerate model.
    pub gamma_bar: Tensor,
}

/// `Γ = x + Γ̄(x, Δt) ⊙ f(x)` for a single state.
pub fn predict_midpoint(model: &MidpointModel, field: &VectorField, x: &[f64], dt: f64) -> Result<MidpointPrediction> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {dt}")));
    }
    let fx = field.eval(x)?;
    let n = x.len();
    let gamma_bar = match model {
        MidpointModel::Degenerate => {
            return Ok(MidpointPrediction {
                gamma: x.to_vec(),
                gamma_bar: Tensor::vector(vec![]),
            })
        }
        MidpointModel::AnalyticLinear { a, order } => {
            if a.rows() != n {
                return Err(Error::Shape(format!(
                    "Γ̄ is {}×{}, state has dimension {n}",
                    a.rows(),
                    a.rows()
                )));
            }
            linear_gammabar(a, dt, *order)?
        }
        MidpointModel::Learned(m) => {
            if m.dim() != n {
                return Err(Error::Shape(format!(
                    "midpoint network expects dimension {}, state has {n}",
                    m.dim()
                )));
            }
            let mut input = x.to_vec();
            input.push(m.encoding.encode(dt));
            let out = m.net.eval(&input);
            match m.shape {
                GammaShape::Full => Tensor::matrix(n, n, out)?,
                GammaShape::Diag => Tensor::vector(out),
            }
        }
    };
    let corr = if gamma_bar.rank() == 2 {
        gamma_bar.matvec(&fx)?
    } else {
        gamma_bar.data().iter().zip(&fx).map(|(g, f)| g * f).collect()
    };
    let gamma: Vec<f64> = x.iter().zip(&corr).map(|(a, b)| a + b).collect();
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("midpoint".into()));
    }
    Ok(MidpointPrediction { gamma, gamma_bar })
}

/// Truncation of the analytic Γ̄ series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaBarTerms {
    /// `A⁻²(expm(AΔt) − I − AΔt)/Δt`; needs invertible `A`.
    Closed,
    /// First `K` terms of `Σ_{i≥1} Δt^i A^{i−1}/(i+1)!`.
    Series(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaBar {
    pub matrix: Tensor,
    /// Bound on the Frobenius norm of the omitted series tail; `None` for
    /// the closed form.
    pub tail_bound: Option<f64>,
}

/// The state-independent midpoint factor of a linear system for first-order
/// steps.
pub fn analytic_linear_gammabar(a: &Tensor, dt: f64, terms: GammaBarTerms) -> Result<GammaBar> {
    if !a.is_square() {
        return Err(Error::Shape(format!("Γ̄ needs a square matrix, got {:?}", a.shape())));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {dt}")));
    }
    let n = a.rows();
    match terms {
        GammaBarTerms::Closed => {
            let inv = a.inverse()?;
            let ad = a.scale(dt);
            let num = ad.expm()?.sub(&Tensor::identity(n))?.sub(&ad)?;
            let matrix = inv.matmul(&inv)?.matmul(&num)?.scale(1.0 / dt);
            Ok(GammaBar {
                matrix,
                tail_bound: None,
            })
        }
        GammaBarTerms::Series(k) => {
            if k == 0 {
                return Err(Error::Domain("series needs at least one term".into()));
            }
            let mut sum = Tensor::zeros(&[n, n]);
            // term_i = Δt^i A^{i−1} / (i+1)!
            let mut term = Tensor::identity(n).scale(dt / 2.0);
            for i in 1..=k {
                sum.add_assign(&term)?;
                term = term.matmul(a)?.scale(dt / (i + 2) as f64);
            }
            // Remaining terms are bounded by a geometric series in
            // r = Δt‖A‖/(K+3) starting from the first omitted one.
            let first = term
                .norm2()
                .max(dt.powi(k as i32 + 1) * a.norm2().powi(k as i32) / factorial(k + 2));
            let r = dt * a.norm2() / (k + 3) as f64;
            let tail_bound = if r < 1.0 { first / (1.0 - r) } else { f64::INFINITY };
            Ok(GammaBar {
                matrix: sum,
                tail_bound: Some(tail_bound),
            })
        }
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Γ̄ making an order-`p` step exact for `f(x) = A x`:
/// `p! Σ_{i≥1} Δt^i A^{i−1}/(p+i)! = p!·Δt·φ_{p+1}(AΔt)`, evaluated through
/// the exponential of an augmented block matrix, so singular `A` is fine.
pub fn linear_gammabar(a: &Tensor, dt: f64, p: usize) -> Result<Tensor> {
    if !a.is_square() {
        return Err(Error::Shape(format!("Γ̄ needs a square matrix, got {:?}", a.shape())));
    }
    if !(dt > 0.0) || p == 0 {
        return Err(Error::Domain(format!("need Δt > 0 and p ≥ 1, got Δt = {dt}, p = {p}")));
    }
    let n = a.rows();
    let blocks = p + 2;
    let size = n * blocks;
    let mut m = Tensor::zeros(&[size, size]);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, a.at(i, j) * dt);
        }
    }
    for b in 0..blocks - 1 {
        for i in 0..n {
            m.set(b * n + i, (b + 1) * n + i, 1.0);
        }
    }
    let e = m.expm()?;
    let off = (p + 1) * n;
    let mut phi = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            phi.set(i, j, e.at(i, off + j));
        }
    }
    Ok(phi.scale(factorial(p) * dt))
}

/// `Δt^p f^[p](Γ)`, the remainder estimate of one order-`p` step.
pub fn remainder_estimate(
    field: &VectorField,
    model: &MidpointModel,
    x: &[f64],
    dt: f64,
    p: usize,
) -> Result<Vec<f64>> {
    let mid = predict_midpoint(model, field, x, dt)?;
    let params = field.params();
    let series = solution_series(&mut Eager, field, &params, &Tensor::row(&mid.gamma), p)?;
    Ok(series[p].scale(dt.powi(p as i32)).into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearStiffSystem;
    use approx::assert_abs_diff_eq;

    fn scalar(a: f64) -> Tensor {
        Tensor::from_rows(&[vec![a]]).unwrap()
    }

    #[test]
    fn degenerate_and_zero_field() {
        let f = LinearStiffSystem::stiff().field();
        let p = predict_midpoint(&MidpointModel::Degenerate, &f, &[0.2, 0.1], 0.1).unwrap();
        assert_eq!(p.gamma, vec![0.2, 0.1]);

        let zero = VectorField::linear(Tensor::zeros(&[2, 2])).unwrap();
        let mut rng = Rng::new(0);
        let learned = LearnedMidpoint::random(2, 8, Activation::Relu, GammaShape::Full, &mut rng).unwrap();
        for model in [
            MidpointModel::Learned(learned),
            MidpointModel::AnalyticLinear {
                a: Tensor::diag(&[-1.0, -3.0]),
                order: 1,
            },
        ] {
            let p = predict_midpoint(&model, &zero, &[0.2, 0.1], 0.1).unwrap();
            assert_eq!(p.gamma, vec![0.2, 0.1]);
        }
    }

    #[test]
    fn scalar_analytic_midpoint() {
        let a = scalar(-1.0);
        let expected = ((-0.1f64).exp_m1() + 0.1) / 0.1;
        assert_abs_diff_eq!(expected, 0.0483742, epsilon = 1e-7);
        // The closed form subtracts nearly equal numbers.
        let closed = analytic_linear_gammabar(&a, 0.1, GammaBarTerms::Closed).unwrap();
        assert_abs_diff_eq!(closed.matrix.data()[0], expected, epsilon = 1e-14);
        let series = analytic_linear_gammabar(&a, 0.1, GammaBarTerms::Series(30)).unwrap();
        assert_abs_diff_eq!(series.matrix.data()[0], expected, epsilon = 1e-16);
        assert_abs_diff_eq!(
            linear_gammabar(&a, 0.1, 1).unwrap().data()[0],
            expected,
            epsilon = 1e-15
        );

        let f = VectorField::linear(a.clone()).unwrap();
        let model = MidpointModel::AnalyticLinear { a, order: 1 };
        let p = predict_midpoint(&model, &f, &[1.0], 0.1).unwrap();
        assert_abs_diff_eq!(p.gamma[0], 1.0 - expected, epsilon = 1e-15);
        assert_abs_diff_eq!(p.gamma[0], 0.9516258, epsilon = 1e-7);
    }

    #[test]
    fn zero_matrix_series_and_closed_error() {
        let z = Tensor::zeros(&[2, 2]);
        let g = analytic_linear_gammabar(&z, 0.4, GammaBarTerms::Series(5)).unwrap();
        assert_eq!(g.matrix, Tensor::identity(2).scale(0.2));
        assert_eq!(g.tail_bound, Some(0.0));
        assert!(matches!(
            analytic_linear_gammabar(&z, 0.4, GammaBarTerms::Closed),
            Err(Error::Singular)
        ));
        assert_eq!(linear_gammabar(&z, 0.4, 1).unwrap(), Tensor::identity(2).scale(0.2));
    }

    #[test]
    fn stiff_diagonal_entries() {
        let a = Tensor::diag(&[-1.0, -1000.0]);
        let dt = 1e-3;
        let closed = analytic_linear_gammabar(&a, dt, GammaBarTerms::Closed).unwrap().matrix;
        let series = linear_gammabar(&a, dt, 1).unwrap();
        for (i, lam) in [-1.0f64, -1000.0].into_iter().enumerate() {
            let z = lam * dt;
            let want = (z.exp_m1() - z) / (lam * lam * dt);
            // Cancellation in expm(AΔt) − I − AΔt costs digits for small |λΔt|.
            assert_abs_diff_eq!(closed.at(i, i), want, epsilon = 1e-9 * want.abs());
            assert_abs_diff_eq!(series.at(i, i), want, epsilon = 1e-12 * want.abs());
        }
        assert_eq!(closed.at(0, 1), 0.0);
    }

    #[test]
    fn series_tail_bound_covers_error() {
        let a = Tensor::from_rows(&[vec![-2.0, 1.0], vec![0.5, -3.0]]).unwrap();
        let exact = analytic_linear_gammabar(&a, 0.5, GammaBarTerms::Closed).unwrap().matrix;
        for k in 1..8 {
            let s = analytic_linear_gammabar(&a, 0.5, GammaBarTerms::Series(k)).unwrap();
            let err = s.matrix.sub(&exact).unwrap().norm2();
            assert!(err <= s.tail_bound.unwrap() * (1.0 + 1e-9) + 1e-15, "k = {k}");
        }
    }

    #[test]
    fn higher_order_gammabar_series() {
        let a = Tensor::from_rows(&[vec![-2.0, 1.0], vec![0.5, -3.0]]).unwrap();
        let dt = 0.3;
        for p in 1..=3 {
            let g = linear_gammabar(&a, dt, p).unwrap();
            let mut want = Tensor::zeros(&[2, 2]);
            let mut ap = Tensor::identity(2);
            for i in 1..25 {
                let c = factorial(p) * dt.powi(i as i32) / factorial(p + i);
                want.axpy(c, &ap).unwrap();
                ap = ap.matmul(&a).unwrap();
            }
            for (u, v) in g.data().iter().zip(want.data()) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn remainder_examples() {
        let sys = LinearStiffSystem::stiff();
        let f = sys.field();
        let x = [0.3, -0.2];
        let dt = 2e-4;
        let r = remainder_estimate(&f, &MidpointModel::Degenerate, &x, dt, 1).unwrap();
        assert_eq!(r, vec![dt * -0.3, dt * 200.0]);

        let model = MidpointModel::AnalyticLinear {
            a: sys.a.clone(),
            order: 1,
        };
        let r = remainder_estimate(&f, &model, &x, dt, 1).unwrap();
        let exact = sys.solution(&x, dt).unwrap();
        let fx = f.eval(&x).unwrap();
        for k in 0..2 {
            // With p = 1 the remainder term carries the whole increment, so
            // beyond the Euler part it is the exact higher-order tail.
            assert_abs_diff_eq!(r[k], exact[k] - x[k], epsilon = 1e-12);
            assert_abs_diff_eq!(r[k] - dt * fx[k], exact[k] - x[k] - dt * fx[k], epsilon = 1e-12);
        }

        let zero = VectorField::linear(Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(remainder_estimate(&zero, &model, &x, dt, 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn analytic_midpoint_lies_between_state_and_solution() {
        let sys = LinearStiffSystem::stiff();
        let f = sys.field();
        let model = MidpointModel::AnalyticLinear {
            a: sys.a.clone(),
            order: 1,
        };
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let x = rng.uniform_vec(&[-0.5, -0.5], &[0.5, 0.5]);
            let dt = rng.uniform(1e-6, 1e-3);
            let g = predict_midpoint(&model, &f, &x, dt).unwrap().gamma;
            let y = sys.solution(&x, dt).unwrap();
            for k in 0..2 {
                let (lo, hi) = if x[k] < y[k] { (x[k], y[k]) } else { (y[k], x[k]) };
                assert!(g[k] >= lo - 1e-15 && g[k] <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn full_diag_duality() {
        let v = [0.3, -0.7];
        let diag_net = Mlp::new(vec![crate::dynamics::Dense {
            weight: Tensor::zeros(&[3, 2]),
            bias: Some(Tensor::vector(v.to_vec())),
            activation: Activation::Identity,
        }])
        .unwrap();
        let full_net = Mlp::new(vec![crate::dynamics::Dense {
            weight: Tensor::zeros(&[3, 4]),
            bias: Some(Tensor::vector(Tensor::diag(&v).into_data())),
            activation: Activation::Identity,
        }])
        .unwrap();
        let d = MidpointModel::Learned(LearnedMidpoint::new(diag_net, GammaShape::Diag, TimeEncoding::Raw).unwrap());
        let fm = MidpointModel::Learned(LearnedMidpoint::new(full_net, GammaShape::Full, TimeEncoding::Raw).unwrap());
        let f = VectorField::Pendulum { g_over_l: 2.0 };
        let a = predict_midpoint(&d, &f, &[0.4, 0.1], 0.05).unwrap().gamma;
        let b = predict_midpoint(&fm, &f, &[0.4, 0.1], 0.05).unwrap().gamma;
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = Rng::new(0);
        let net = Mlp::random(&[3, 4, 3], &[Activation::Relu, Activation::Identity], true, &mut rng).unwrap();
        assert!(LearnedMidpoint::new(net, GammaShape::Full, TimeEncoding::Raw).is_err());
        let m = MidpointModel::Learned(
            LearnedMidpoint::random(3, 4, Activation::Relu, GammaShape::Diag, &mut rng).unwrap(),
        );
        let f = LinearStiffSystem::stiff().field();
        assert!(predict_midpoint(&m, &f, &[0.1, 0.2], 0.1).is_err());
    }
}
