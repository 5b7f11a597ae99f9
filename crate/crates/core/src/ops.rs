//! Arithmetic backends for batched computations.
//!
//! Jets, networks and integrator steps are written once against
//! [`BatchOps`] and run either eagerly on tensors ([`Eager`]) or recorded
//! onto a [`Tape`] for differentiation. Values are batches with one state per
//! row.

use crate::error::Result;
use crate::tape::{Tape, Unary, Var};
use crate::tensor::Tensor;

pub trait BatchOps {
    type V: Clone;

    fn constant(&mut self, t: Tensor) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Result<Self::V>;
    fn mul_col(&mut self, a: &Self::V, col: &Self::V) -> Result<Self::V>;
    fn unary(&mut self, a: &Self::V, u: Unary) -> Self::V;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn slice_cols(&mut self, a: &Self::V, start: usize, end: usize) -> Result<Self::V>;
    fn batch_matvec(&mut self, g: &Self::V, v: &Self::V) -> Result<Self::V>;
    fn sum_squares(&mut self, a: &Self::V) -> Self::V;

    /// `Σ_i scale_i * a_i * b_i` over equal-shaped pairs; the workhorse of
    /// the truncated power-series recurrences.
    fn weighted_products(&mut self, terms: &[(f64, &Self::V, &Self::V)]) -> Result<Self::V> {
        let mut acc: Option<Self::V> = None;
        for &(w, a, b) in terms {
            let p = self.mul(a, b)?;
            let p = if w == 1.0 { p } else { self.scale(&p, w) };
            acc = Some(match acc {
                None => p,
                Some(s) => self.add(&s, &p)?,
            });
        }
        Ok(acc.expect("weighted_products needs at least one term"))
    }
}

/// Immediate evaluation on tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl BatchOps for Eager {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.mul(b)
    }

    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        a.scale(s)
    }

    fn add_scalar(&mut self, a: &Tensor, s: f64) -> Tensor {
        a.map(|x| x + s)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }

    fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        a.add_row(row)
    }

    fn mul_col(&mut self, a: &Tensor, col: &Tensor) -> Result<Tensor> {
        a.mul_col(col)
    }

    fn unary(&mut self, a: &Tensor, u: Unary) -> Tensor {
        crate::tensor::flops::record(a.len());
        a.map(|x| u.apply(x))
    }

    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat_cols(&refs)
    }

    fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        a.slice_cols(start, end)
    }

    fn batch_matvec(&mut self, g: &Tensor, v: &Tensor) -> Result<Tensor> {
        g.batch_matvec(v)
    }

    fn sum_squares(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.data().iter().map(|v| v * v).sum())
    }
}

impl BatchOps for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        Tape::constant(self, t)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Ok(Tape::add(self, *a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Ok(Tape::sub(self, *a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Ok(Tape::mul(self, *a, *b))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        Tape::scale(self, *a, s)
    }

    fn add_scalar(&mut self, a: &Var, s: f64) -> Var {
        Tape::add_scalar(self, *a, s)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Ok(Tape::matmul(self, *a, *b))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        Ok(Tape::add_row(self, *a, *row))
    }

    fn mul_col(&mut self, a: &Var, col: &Var) -> Result<Var> {
        Ok(Tape::mul_col(self, *a, *col))
    }

    fn unary(&mut self, a: &Var, u: Unary) -> Var {
        Tape::unary(self, *a, u)
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        Ok(Tape::concat_cols(self, parts))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        Ok(Tape::slice_cols(self, *a, start, end))
    }

    fn batch_matvec(&mut self, g: &Var, v: &Var) -> Result<Var> {
        Ok(Tape::batch_matvec(self, *g, *v))
    }

    fn sum_squares(&mut self, a: &Var) -> Var {
        Tape::sum_squares(self, *a)
    }
}
