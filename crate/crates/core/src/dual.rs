//! First-order forward-mode dual numbers that nest: `Dual<Dual<f64>>`
//! carries mixed second derivatives, and so on. Used by the nested-JVP
//! reference computation of Taylor coefficients and by scalar field
//! evaluation.

use std::ops::{Add, Mul, Neg, Sub};

use crate::tensor::flops;

pub trait Scalar: Clone + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn from_f64(v: f64) -> Self;
    /// The underlying real value.
    fn re(&self) -> f64;
    fn scale(&self, s: f64) -> Self;
    fn tanh(&self) -> Self;
    fn sigmoid(&self) -> Self;
    fn softplus(&self) -> Self;
    fn exp(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn relu(&self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn re(&self) -> f64 {
        *self
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn sigmoid(&self) -> Self {
        crate::tape::sigmoid(*self)
    }
    fn softplus(&self) -> Self {
        crate::tape::softplus(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn relu(&self) -> Self {
        self.max(0.0)
    }
}

/// A float64 whose multiplications (and transcendental evaluations) are
/// recorded by [`flops`], for comparing evaluation strategies by cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Counted(pub f64);

impl Add for Counted {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Counted(self.0 + o.0)
    }
}

impl Sub for Counted {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Counted(self.0 - o.0)
    }
}

impl Neg for Counted {
    type Output = Self;
    fn neg(self) -> Self {
        Counted(-self.0)
    }
}

impl Mul for Counted {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        flops::record(1);
        Counted(self.0 * o.0)
    }
}

impl Scalar for Counted {
    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn re(&self) -> f64 {
        self.0
    }
    fn scale(&self, s: f64) -> Self {
        flops::record(1);
        Counted(self.0 * s)
    }
    fn tanh(&self) -> Self {
        flops::record(1);
        Counted(self.0.tanh())
    }
    fn sigmoid(&self) -> Self {
        flops::record(1);
        Counted(crate::tape::sigmoid(self.0))
    }
    fn softplus(&self) -> Self {
        flops::record(1);
        Counted(crate::tape::softplus(self.0))
    }
    fn exp(&self) -> Self {
        flops::record(1);
        Counted(self.0.exp())
    }
    fn sin(&self) -> Self {
        flops::record(1);
        Counted(self.0.sin())
    }
    fn cos(&self) -> Self {
        flops::record(1);
        Counted(self.0.cos())
    }
    fn relu(&self) -> Self {
        Counted(self.0.max(0.0))
    }
}

/// `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual<S> {
    pub re: S,
    pub eps: S,
}

impl<S: Scalar> Dual<S> {
    pub fn new(re: S, eps: S) -> Self {
        Dual { re, eps }
    }

    pub fn constant(re: S) -> Self {
        Dual {
            re,
            eps: S::from_f64(0.0),
        }
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let eps = self.re.clone() * o.eps + self.eps * o.re.clone();
        Dual::new(self.re * o.re, eps)
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    fn from_f64(v: f64) -> Self {
        Dual::constant(S::from_f64(v))
    }
    fn re(&self) -> f64 {
        self.re.re()
    }
    fn scale(&self, s: f64) -> Self {
        Dual::new(self.re.scale(s), self.eps.scale(s))
    }
    fn tanh(&self) -> Self {
        let t = self.re.tanh();
        let d = S::from_f64(1.0) - t.clone() * t.clone();
        Dual::new(t, self.eps.clone() * d)
    }
    fn sigmoid(&self) -> Self {
        let s = self.re.sigmoid();
        let d = s.clone() * (S::from_f64(1.0) - s.clone());
        Dual::new(s, self.eps.clone() * d)
    }
    fn softplus(&self) -> Self {
        Dual::new(self.re.softplus(), self.eps.clone() * self.re.sigmoid())
    }
    fn exp(&self) -> Self {
        let e = self.re.exp();
        Dual::new(e.clone(), self.eps.clone() * e)
    }
    fn sin(&self) -> Self {
        Dual::new(self.re.sin(), self.eps.clone() * self.re.cos())
    }
    fn cos(&self) -> Self {
        Dual::new(self.re.cos(), -(self.eps.clone() * self.re.sin()))
    }
    fn relu(&self) -> Self {
        if self.re() > 0.0 {
            self.clone()
        } else {
            Dual::from_f64(0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn nested_duals_give_second_derivative() {
        // d²/dx² tanh(x) = -2 tanh(x) (1 - tanh²(x))
        let x = 0.4;
        let inner = Dual::new(x, 1.0);
        let outer: Dual<Dual<f64>> = Dual::new(inner, Dual::new(1.0, 0.0));
        let y = outer.tanh();
        let t = x.tanh();
        assert_abs_diff_eq!(y.eps.eps, -2.0 * t * (1.0 - t * t), epsilon = 1e-14);
    }
}
