//! Taylor-mode coefficients of ODE solutions.
//!
//! The solution series `x(t+s) = Σ_k x_k s^k` of `ẋ = f(x)` satisfies
//! `x_{k+1} = (f∘x)_k / (k+1)`, so coefficient `k+1` follows from pushing
//! coefficient `k` through the field. Each primitive keeps the truncated
//! series of its inputs and outputs, which makes the push of coefficient `k`
//! cost `O(k)` primitive passes and the full order-`p` expansion `O(p²)`.
//! The coefficient `x_l` is the normalized time derivative `f^[l](x)`.
//!
//! Everything here is generic over [`BatchOps`], so the same recurrences
//! evaluate eagerly or record onto a tape for training.

use crate::dual::{Counted, Dual, Scalar};
use crate::dynamics::{Mlp, VectorField};
use crate::error::{Error, Result};
use crate::ops::{BatchOps, Eager};
use crate::tape::Unary;
use crate::tensor::Tensor;

/// Truncated series of `y = u(x)` for an elementwise primitive, driven by
/// the series of its argument. `g` holds the series of `u'(x)` (or the
/// auxiliary that plays its role), `h` the auxiliary of `g` for softplus.
struct UnaryJet<V> {
    kind: Unary,
    u: Vec<V>,
    y: Vec<V>,
    g: Vec<V>,
    h: Vec<V>,
}

impl<V: Clone> UnaryJet<V> {
    fn new(kind: Unary) -> Self {
        UnaryJet {
            kind,
            u: Vec::new(),
            y: Vec::new(),
            g: Vec::new(),
            h: Vec::new(),
        }
    }

    fn push<B: BatchOps<V = V>>(&mut self, ops: &mut B, u_k: V) -> Result<V> {
        let k = self.u.len();
        self.u.push(u_k);
        if k == 0 {
            return self.push_zeroth(ops);
        }
        if self.kind == Unary::Relu {
            return Err(Error::NotSmooth {
                primitive: "relu",
                order: k + 1,
            });
        }
        // y_k = (1/k) Σ_{j=1..k} j u_j g_{k−j}
        let y_k = {
            let terms: Vec<(f64, &V, &V)> = (1..=k)
                .map(|j| (j as f64 / k as f64, &self.u[j], &self.g[k - j]))
                .collect();
            ops.weighted_products(&terms)?
        };
        self.y.push(y_k.clone());
        match self.kind {
            Unary::Tanh => {
                // g = 1 − y²
                let sq = self.square_coeff(ops, k, Which::Y)?;
                let g_k = ops.scale(&sq, -1.0);
                self.g.push(g_k);
            }
            Unary::Sigmoid => {
                // g = y − y²
                let sq = self.square_coeff(ops, k, Which::Y)?;
                let g_k = ops.sub(&y_k, &sq)?;
                self.g.push(g_k);
            }
            Unary::Exp => self.g.push(y_k.clone()),
            Unary::Sin | Unary::Cos => {
                // g' = −y u' for both (g = cos u resp. −sin u)
                let terms: Vec<(f64, &V, &V)> = (1..=k)
                    .map(|j| (-(j as f64) / k as f64, &self.u[j], &self.y[k - j]))
                    .collect();
                let g_k = ops.weighted_products(&terms)?;
                self.g.push(g_k);
            }
            Unary::Softplus => {
                // g = σ(u), g' = h u', h = g − g²
                let terms: Vec<(f64, &V, &V)> = (1..=k)
                    .map(|j| (j as f64 / k as f64, &self.u[j], &self.h[k - j]))
                    .collect();
                let g_k = ops.weighted_products(&terms)?;
                self.g.push(g_k.clone());
                let sq = self.square_coeff(ops, k, Which::G)?;
                let h_k = ops.sub(&g_k, &sq)?;
                self.h.push(h_k);
            }
            Unary::Relu => unreachable!(),
        }
        Ok(y_k)
    }

    fn push_zeroth<B: BatchOps<V = V>>(&mut self, ops: &mut B) -> Result<V> {
        let u0 = self.u[0].clone();
        let y0 = ops.unary(&u0, self.kind);
        self.y.push(y0.clone());
        let g0 = match self.kind {
            Unary::Tanh => {
                let sq = ops.mul(&y0, &y0)?;
                let neg = ops.scale(&sq, -1.0);
                ops.add_scalar(&neg, 1.0)
            }
            Unary::Sigmoid => {
                let sq = ops.mul(&y0, &y0)?;
                ops.sub(&y0, &sq)?
            }
            Unary::Exp => y0.clone(),
            Unary::Sin => ops.unary(&u0, Unary::Cos),
            Unary::Cos => {
                let s = ops.unary(&u0, Unary::Sin);
                ops.scale(&s, -1.0)
            }
            Unary::Softplus => {
                let s = ops.unary(&u0, Unary::Sigmoid);
                let sq = ops.mul(&s, &s)?;
                let h0 = ops.sub(&s, &sq)?;
                self.h.push(h0);
                s
            }
            // Only the value is needed at order zero.
            Unary::Relu => y0.clone(),
        };
        self.g.push(g0);
        Ok(y0)
    }

    /// Coefficient `k` of the square of the `y` or `g` series.
    fn square_coeff<B: BatchOps<V = V>>(&self, ops: &mut B, k: usize, which: Which) -> Result<V> {
        let s = match which {
            Which::Y => &self.y,
            Which::G => &self.g,
        };
        let terms: Vec<(f64, &V, &V)> = (0..=k).map(|i| (1.0, &s[i], &s[k - i])).collect();
        ops.weighted_products(&terms)
    }
}

#[derive(Clone, Copy)]
enum Which {
    Y,
    G,
}

/// Product chain `x_{a} x_{b} …` of a monomial, one series per prefix.
struct MonomialJet<V> {
    factors: Vec<usize>,
    coeff: f64,
    output: usize,
    /// `prefix[m][k]`: coefficient `k` of the product of the first `m+2` factors.
    prefix: Vec<Vec<V>>,
}

enum Stage<V> {
    Linear(V),
    Pendulum {
        g_over_l: f64,
        sin: UnaryJet<V>,
    },
    Mlp {
        layers: Vec<LayerJet<V>>,
    },
    Polynomial {
        dim: usize,
        terms: Vec<MonomialJet<V>>,
        cols: Vec<Vec<V>>,
    },
}

struct LayerJet<V> {
    weight: V,
    bias: Option<V>,
    act: Option<UnaryJet<V>>,
}

/// Incremental series of `f(x(t))` for a field with bound parameters.
pub struct FieldJet<V> {
    stage: Stage<V>,
    pushed: usize,
}

impl<V: Clone> FieldJet<V> {
    /// `params` are backend values in [`VectorField::params`] order.
    pub fn new(field: &VectorField, params: &[V]) -> Result<Self> {
        let expected = field.params().len();
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "field takes {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        let stage = match field {
            VectorField::Linear(_) => Stage::Linear(params[0].clone()),
            VectorField::Pendulum { g_over_l } => Stage::Pendulum {
                g_over_l: *g_over_l,
                sin: UnaryJet::new(Unary::Sin),
            },
            VectorField::Mlp(m) => Stage::Mlp {
                layers: mlp_layers(m, params),
            },
            VectorField::Polynomial(p) => Stage::Polynomial {
                dim: p.dim,
                terms: p
                    .terms
                    .iter()
                    .map(|t| MonomialJet {
                        factors: p.factors(t),
                        coeff: t.coeff,
                        output: t.output,
                        prefix: Vec::new(),
                    })
                    .collect(),
                cols: vec![Vec::new(); p.dim],
            },
        };
        Ok(FieldJet { stage, pushed: 0 })
    }

    /// Feeds coefficient `k` of the state series (calls must be in order
    /// `k = 0, 1, …`) and returns coefficient `k` of `f(x(t))`.
    pub fn push<B: BatchOps<V = V>>(&mut self, ops: &mut B, x_k: &V) -> Result<V> {
        let k = self.pushed;
        self.pushed += 1;
        match &mut self.stage {
            Stage::Linear(at) => ops.matmul(x_k, at),
            Stage::Pendulum { g_over_l, sin } => {
                let theta = ops.slice_cols(x_k, 0, 1)?;
                let omega = ops.slice_cols(x_k, 1, 2)?;
                let s = sin.push(ops, theta)?;
                let acc = ops.scale(&s, -*g_over_l);
                ops.concat_cols(&[omega, acc])
            }
            Stage::Mlp { layers } => {
                let mut h = x_k.clone();
                for layer in layers.iter_mut() {
                    h = ops.matmul(&h, &layer.weight)?;
                    if k == 0 {
                        if let Some(b) = &layer.bias {
                            h = ops.add_row(&h, b)?;
                        }
                    }
                    if let Some(act) = &mut layer.act {
                        h = act.push(ops, h)?;
                    }
                }
                Ok(h)
            }
            Stage::Polynomial { dim, terms, cols } => {
                for (i, c) in cols.iter_mut().enumerate() {
                    c.push(ops.slice_cols(x_k, i, i + 1)?);
                }
                let zero = ops.scale(&cols[0][k], 0.0);
                let mut out: Vec<Option<V>> = vec![None; *dim];
                for t in terms.iter_mut() {
                    let value = match t.factors.len() {
                        0 if k == 0 => ops.add_scalar(&zero, t.coeff),
                        0 => continue,
                        1 => ops.scale(&cols[t.factors[0]][k], t.coeff),
                        n_f => {
                            for m in 1..n_f {
                                let c = {
                                    let prev = if m == 1 { &cols[t.factors[0]] } else { &t.prefix[m - 2] };
                                    let rhs = &cols[t.factors[m]];
                                    let terms: Vec<(f64, &V, &V)> =
                                        (0..=k).map(|i| (1.0, &prev[i], &rhs[k - i])).collect();
                                    ops.weighted_products(&terms)?
                                };
                                if t.prefix.len() < m {
                                    t.prefix.push(Vec::new());
                                }
                                t.prefix[m - 1].push(c);
                            }
                            ops.scale(&t.prefix[n_f - 2][k], t.coeff)
                        }
                    };
                    out[t.output] = Some(match out[t.output].take() {
                        None => value,
                        Some(acc) => ops.add(&acc, &value)?,
                    });
                }
                let parts: Vec<V> = out.into_iter().map(|o| o.unwrap_or_else(|| zero.clone())).collect();
                ops.concat_cols(&parts)
            }
        }
    }
}

fn mlp_layers<V: Clone>(m: &Mlp, params: &[V]) -> Vec<LayerJet<V>> {
    let mut it = params.iter();
    m.layers()
        .iter()
        .map(|l| LayerJet {
            weight: it.next().expect("checked count").clone(),
            bias: l.bias.as_ref().map(|_| it.next().expect("checked count").clone()),
            act: l.activation.unary().map(UnaryJet::new),
        })
        .collect()
}

/// Plain evaluation of `f` on a batch.
pub fn apply_field<B: BatchOps>(ops: &mut B, field: &VectorField, params: &[B::V], x: &B::V) -> Result<B::V> {
    FieldJet::new(field, params)?.push(ops, x)
}

fn check_smooth(field: &VectorField, p: usize) -> Result<()> {
    if p >= 2 {
        if let Some(primitive) = field.non_smooth_primitive() {
            return Err(Error::NotSmooth { primitive, order: p });
        }
    }
    Ok(())
}

/// Solution series `[x, f^[1](x), …, f^[p](x)]` for a batch of states.
pub fn solution_series<B: BatchOps>(
    ops: &mut B,
    field: &VectorField,
    params: &[B::V],
    x: &B::V,
    p: usize,
) -> Result<Vec<B::V>> {
    check_smooth(field, p)?;
    let mut jet = FieldJet::new(field, params)?;
    let mut coeffs = vec![x.clone()];
    for k in 0..p {
        let fk = jet.push(ops, &coeffs[k])?;
        coeffs.push(ops.scale(&fk, 1.0 / (k + 1) as f64));
    }
    Ok(coeffs)
}

/// Taylor coefficients `f^[1..p](x)` by jet propagation.
pub fn ode_taylor_coefficients(field: &VectorField, x: &[f64], p: usize) -> Result<Vec<Vec<f64>>> {
    if p == 0 {
        return Err(Error::Domain("expansion order must be at least 1".into()));
    }
    check_dim(field, x)?;
    let xt = Tensor::row(x);
    let series = solution_series(&mut Eager, field, &field.params(), &xt, p)?;
    Ok(series.into_iter().skip(1).map(Tensor::into_data).collect())
}

fn check_dim(field: &VectorField, x: &[f64]) -> Result<()> {
    if x.len() != field.dim() {
        return Err(Error::Shape(format!(
            "state has dimension {}, field expects {}",
            x.len(),
            field.dim()
        )));
    }
    Ok(())
}

fn lift<S: Scalar>(x: &[S], v: Vec<S>) -> Vec<Dual<S>> {
    x.iter().cloned().zip(v).map(|(a, b)| Dual::new(a, b)).collect()
}

fn tangent<S: Scalar>(y: Vec<Dual<S>>, l: usize) -> Vec<S> {
    y.into_iter().map(|d| d.eps.scale(1.0 / l as f64)).collect()
}

fn level1<S: Scalar>(f: &VectorField, x: &[S]) -> Vec<S> {
    f.eval_scalar(x)
}

fn level2<S: Scalar>(f: &VectorField, x: &[S]) -> Vec<S> {
    let xd = lift(x, level1(f, x));
    tangent(level1::<Dual<S>>(f, &xd), 2)
}

fn level3<S: Scalar>(f: &VectorField, x: &[S]) -> Vec<S> {
    let xd = lift(x, level1(f, x));
    tangent(level2::<Dual<S>>(f, &xd), 3)
}

fn level4<S: Scalar>(f: &VectorField, x: &[S]) -> Vec<S> {
    let xd = lift(x, level1(f, x));
    tangent(level3::<Dual<S>>(f, &xd), 4)
}

/// Reference coefficients `f^[1..p](x)` from the literal recursion
/// `f^[l+1] = (1/(l+1)) (∂f^[l]/∂x) f`, each level one more layer of dual
/// numbers. Cost grows exponentially with `p`; limited to `p ≤ 4`.
pub fn nested_jvp_oracle(field: &VectorField, x: &[f64], p: usize) -> Result<Vec<Vec<f64>>> {
    if p == 0 || p > 4 {
        return Err(Error::OracleOrder(p));
    }
    check_dim(field, x)?;
    check_smooth(field, p)?;
    let xc: Vec<Counted> = x.iter().map(|&v| Counted(v)).collect();
    type Level = fn(&VectorField, &[Counted]) -> Vec<Counted>;
    let levels: [Level; 4] = [level1, level2, level3, level4];
    Ok(levels[..p]
        .iter()
        .map(|lvl| lvl(field, &xc).into_iter().map(|c| c.0).collect())
        .collect())
}

/// `x + Σ_l Δt^l coeffs[l−1]`.
pub fn truncated_taylor_predict(x: &[f64], coeffs: &[Vec<f64>], dt: f64) -> Result<Vec<f64>> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("step must be non-negative, got {dt}")));
    }
    let mut out = x.to_vec();
    let mut scale = 1.0;
    for c in coeffs {
        if c.len() != x.len() {
            return Err(Error::Shape(format!(
                "coefficient of length {} for state of length {}",
                c.len(),
                x.len()
            )));
        }
        scale *= dt;
        for (o, v) in out.iter_mut().zip(c) {
            *o += scale * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Activation, LinearStiffSystem, Monomial, Polynomial};
    use crate::rng::Rng;
    use approx::assert_relative_eq;

    fn scalar_linear(a: f64) -> VectorField {
        VectorField::linear(Tensor::from_rows(&[vec![a]]).unwrap()).unwrap()
    }

    #[test]
    fn stiff_second_coefficient() {
        let f = LinearStiffSystem::stiff().field();
        let c = ode_taylor_coefficients(&f, &[1.0, 1.0], 2).unwrap();
        assert_eq!(c[0], vec![-1.0, -1000.0]);
        assert_relative_eq!(c[1][0], 0.5, max_relative = 1e-15);
        assert_relative_eq!(c[1][1], 500000.0, max_relative = 1e-15);
    }

    #[test]
    fn exponential_growth_coefficients() {
        let c = ode_taylor_coefficients(&scalar_linear(1.0), &[1.0], 3).unwrap();
        assert_relative_eq!(c[0][0], 1.0);
        assert_relative_eq!(c[1][0], 0.5);
        assert_relative_eq!(c[2][0], 1.0 / 6.0, max_relative = 1e-15);
    }

    #[test]
    fn zero_field_gives_zero_coefficients() {
        let f = VectorField::linear(Tensor::zeros(&[3, 3])).unwrap();
        for c in ode_taylor_coefficients(&f, &[1.0, -2.0, 0.5], 5).unwrap() {
            assert!(c.iter().all(|&v| v == 0.0));
        }
        for c in nested_jvp_oracle(&f, &[1.0, -2.0, 0.5], 4).unwrap() {
            assert!(c.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn relu_rejected_beyond_first_order() {
        let mut rng = Rng::new(1);
        let m = Mlp::random(&[2, 4, 2], &[Activation::Relu, Activation::Identity], true, &mut rng).unwrap();
        let f = VectorField::mlp(m).unwrap();
        assert!(ode_taylor_coefficients(&f, &[0.1, 0.2], 1).is_ok());
        match ode_taylor_coefficients(&f, &[0.1, 0.2], 2) {
            Err(Error::NotSmooth { primitive, .. }) => assert_eq!(primitive, "relu"),
            other => panic!("expected NotSmooth, got {other:?}"),
        }
    }

    #[test]
    fn oracle_order_limit() {
        let f = scalar_linear(1.0);
        assert!(matches!(nested_jvp_oracle(&f, &[1.0], 5), Err(Error::OracleOrder(5))));
        assert!(matches!(nested_jvp_oracle(&f, &[1.0], 0), Err(Error::OracleOrder(0))));
    }

    #[test]
    fn oracle_matches_on_stiff_linear() {
        let f = LinearStiffSystem::stiff().field();
        let jet = ode_taylor_coefficients(&f, &[0.3, -0.2], 4).unwrap();
        let ora = nested_jvp_oracle(&f, &[0.3, -0.2], 4).unwrap();
        for (a, b) in jet.iter().zip(&ora) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn every_primitive_matches_oracle() {
        let acts = [
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Softplus,
            Activation::Exp,
        ];
        for (s, act) in acts.into_iter().enumerate() {
            let mut rng = Rng::new(s as u64);
            let m = Mlp::random(&[2, 5, 2], &[act, Activation::Identity], true, &mut rng).unwrap();
            let f = VectorField::mlp(m).unwrap();
            let x = [0.4, -0.3];
            let jet = ode_taylor_coefficients(&f, &x, 4).unwrap();
            let ora = nested_jvp_oracle(&f, &x, 4).unwrap();
            for (a, b) in jet.iter().zip(&ora) {
                for (u, v) in a.iter().zip(b) {
                    assert_relative_eq!(u, v, max_relative = 1e-9, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn pendulum_and_polynomial_match_oracle() {
        let pend = VectorField::Pendulum { g_over_l: 9.81 };
        let poly = VectorField::Polynomial(
            Polynomial::new(
                2,
                vec![
                    Monomial {
                        output: 0,
                        coeff: 1.5,
                        powers: vec![2, 1],
                    },
                    Monomial {
                        output: 0,
                        coeff: -0.5,
                        powers: vec![0, 0],
                    },
                    Monomial {
                        output: 1,
                        coeff: 2.0,
                        powers: vec![1, 0],
                    },
                    Monomial {
                        output: 1,
                        coeff: -1.0,
                        powers: vec![0, 3],
                    },
                ],
            )
            .unwrap(),
        );
        for f in [pend, poly] {
            let x = [0.7, -0.4];
            let jet = ode_taylor_coefficients(&f, &x, 4).unwrap();
            let ora = nested_jvp_oracle(&f, &x, 4).unwrap();
            for (a, b) in jet.iter().zip(&ora) {
                for (u, v) in a.iter().zip(b) {
                    assert_relative_eq!(u, v, max_relative = 1e-10, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn truncated_predictions() {
        let f = scalar_linear(-1.0);
        let c = ode_taylor_coefficients(&f, &[1.0], 1).unwrap();
        assert_relative_eq!(truncated_taylor_predict(&[1.0], &c, 0.1).unwrap()[0], 0.9);
        assert_eq!(truncated_taylor_predict(&[1.0], &c, 0.0).unwrap(), vec![1.0]);

        let f = LinearStiffSystem::stiff().field();
        let dt = 1e-4;
        let c = ode_taylor_coefficients(&f, &[1.0, 1.0], 2).unwrap();
        let y = truncated_taylor_predict(&[1.0, 1.0], &c, dt).unwrap();
        for (yi, lam) in y.iter().zip([-1.0, -1000.0]) {
            let z: f64 = lam * dt;
            assert_relative_eq!(*yi, 1.0 + z + z * z / 2.0, max_relative = 1e-15);
        }
        assert!(truncated_taylor_predict(&[1.0], &c, 0.1).is_err());
        assert!(truncated_taylor_predict(&[1.0], &[], -0.1).is_err());
    }
}
