//! Sinusoidal positional embeddings with orthogonal columns.

use ndarray::{concatenate, Array1, Array2, Axis};

use crate::error::{Error, Result};

/// `M x N` matrix `P` with `P[j, i] = sin((j+1)(i+1) pi / (M+1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalMatrix {
    m: usize,
    p: Array2<f64>,
}

/// `sin(j i pi / (M+1))` with the angle reduced modulo `2(M+1)` first.
pub fn sine_entry(j: usize, i: usize, m: usize) -> f64 {
    let period = 2 * (m as u128 + 1);
    let reduced = (j as u128 * i as u128) % period;
    (reduced as f64 * std::f64::consts::PI / (m as f64 + 1.0)).sin()
}

impl PositionalMatrix {
    pub fn build(m: usize, n: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidConfig("positional matrix needs M, N >= 1".into()));
        }
        if n > m {
            return Err(Error::InvalidConfig(format!(
                "N={} exceeds M={}; the positional columns would not be orthogonal",
                n, m
            )));
        }
        let p = Array2::from_shape_fn((m, n), |(j, i)| sine_entry(j + 1, i + 1, m));
        Ok(PositionalMatrix { m, p })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.p.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    /// Column `i` (0-based), i.e. `p_{i+1}`.
    pub fn column(&self, i: usize) -> Array1<f64> {
        self.p.column(i).to_owned()
    }

    /// `P^T P`, equal to `(M+1)/2 * I` up to rounding.
    pub fn gram(&self) -> Array2<f64> {
        self.p.t().dot(&self.p)
    }

    /// Largest entry of `|P^T P - (M+1)/2 I|`.
    pub fn gram_residual(&self) -> f64 {
        let c = (self.m as f64 + 1.0) / 2.0;
        self.gram()
            .indexed_iter()
            .map(|((a, b), v)| (v - if a == b { c } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    /// `[X; P]` for a `K x N` token matrix.
    pub fn augment(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n() {
            return Err(Error::Shape(format!(
                "token matrix has {} columns, positions have {}",
                x.ncols(),
                self.n()
            )));
        }
        Ok(concatenate(Axis(0), &[x.view(), self.p.view()]).expect("row counts differ only"))
    }

    /// Column norms of the augmented input: `sqrt(1 + |p_j|^2)` for token
    /// columns and `|p_N|` for the query column.
    pub fn augmented_norms(&self) -> Array1<f64> {
        let n = self.n();
        Array1::from_shape_fn(n, |j| {
            let sq: f64 = self.p.column(j).iter().map(|v| v * v).sum();
            if j + 1 < n {
                (1.0 + sq).sqrt()
            } else {
                sq.sqrt()
            }
        })
    }
}

/// Divide every column of `a` by its Euclidean norm; zero columns stay zero.
pub fn normalize_columns(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut col in out.columns_mut() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
    out
}
