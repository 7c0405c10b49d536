//! Transition-matrix algebra for the circular walk.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::Serialize;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Row-stochastic `K x K` matrix of the circular walk.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    p: f64,
    pi: Array2<f64>,
}

impl TransitionMatrix {
    /// `pi[i][i+1] = p`, `pi[i][i-1] = 1-p` (indices mod K). For `K = 2` the
    /// two bands coincide and the off-diagonal entry is 1.
    pub fn new(k: usize, p: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!("K must be >= 2, got {k}")));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("p must lie in [0, 1], got {p}")));
        }
        let mut pi = Array2::zeros((k, k));
        for i in 0..k {
            pi[[i, (i + 1) % k]] += p;
            pi[[i, (i + k - 1) % k]] += 1.0 - p;
        }
        Ok(TransitionMatrix { k, p, pi })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.pi
    }

    /// `Pi^r`. Deterministic chains use the exact shift-matrix path.
    pub fn power(&self, r: usize) -> Array2<f64> {
        if self.p == 1.0 || self.p == 0.0 {
            let shift = shift_matrix(self.k);
            let base = if self.p == 1.0 { shift.t().to_owned() } else { shift };
            return int_matrix_power(&base, r).mapv(|v| v as f64);
        }
        matrix_power(&self.pi, r)
    }

    /// `sum_{i=lo}^{hi} Pi^i` (empty sums give zero).
    pub fn power_sum(&self, lo: usize, hi: usize) -> Array2<f64> {
        let mut acc = Array2::zeros((self.k, self.k));
        if lo > hi {
            return acc;
        }
        let mut cur = self.power(lo);
        for i in lo..=hi {
            acc += &cur;
            if i < hi {
                cur = cur.dot(&self.pi);
            }
        }
        acc
    }
}

/// `a^r` by repeated squaring.
pub fn matrix_power(a: &Array2<f64>, r: usize) -> Array2<f64> {
    let n = a.nrows();
    let mut result = Array2::eye(n);
    let mut base = a.clone();
    let mut e = r;
    while e > 0 {
        if e & 1 == 1 {
            result = result.dot(&base);
        }
        e >>= 1;
        if e > 0 {
            base = base.dot(&base);
        }
    }
    result
}

/// Integer `a^r` by repeated squaring.
pub fn int_matrix_power(a: &Array2<i64>, r: usize) -> Array2<i64> {
    let n = a.nrows();
    let mut result = Array2::from_shape_fn((n, n), |(i, j)| i64::from(i == j));
    let mut base = a.clone();
    let mut e = r;
    while e > 0 {
        if e & 1 == 1 {
            result = result.dot(&base);
        }
        e >>= 1;
        if e > 0 {
            base = base.dot(&base);
        }
    }
    result
}

/// Counter-clockwise shift `Pi_0` with `[Pi_0]_{i+1,i} = 1`, so that
/// `Pi = p Pi_0^T + (1-p) Pi_0`.
pub fn shift_matrix(k: usize) -> Array2<i64> {
    let mut s = Array2::zeros((k, k));
    for i in 0..k {
        s[[(i + 1) % k, i]] = 1;
    }
    s
}

/// Conditional law of the next state given the last token column of `x`
/// (column `N-1`, 0-based index `N-2`), i.e. `Pi^T x_{N-1}`.
pub fn optimal_predictor(pi: &TransitionMatrix, x: &Array2<f64>) -> Result<Array1<f64>> {
    if x.nrows() != pi.k() || x.ncols() < 2 {
        return Err(Error::Shape(format!(
            "token matrix is {}x{}, expected {} rows and at least 2 columns",
            x.nrows(),
            x.ncols(),
            pi.k()
        )));
    }
    let col = x.column(x.ncols() - 2);
    let ones = col.iter().filter(|&&v| v == 1.0).count();
    let zeros = col.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != col.len() {
        return Err(Error::Precondition("column N-1 is not one-hot".into()));
    }
    Ok(pi.matrix().t().dot(&col))
}

/// Bayes-optimal accuracy `max(p, 1-p)` (1 when K = 2).
pub fn opt_accuracy(k: usize, p: f64) -> f64 {
    if k == 2 {
        1.0
    } else {
        p.max(1.0 - p)
    }
}

/// `lambda_k = cos(2 pi k/K) + i (1-2p) sin(2 pi k/K)` for `k = 0..K`.
pub fn circulant_eigenvalues(k: usize, p: f64) -> Vec<Complex64> {
    (0..k)
        .map(|idx| {
            let theta = 2.0 * PI * idx as f64 / k as f64;
            Complex64::new(theta.cos(), (1.0 - 2.0 * p) * theta.sin())
        })
        .collect()
}

/// Fourier vector with components `exp(-2 pi i j k / K) / sqrt(K)`, `j = 0..K`.
///
/// The negative exponent pairs each vector with `lambda_k` as returned by
/// [`circulant_eigenvalues`]; the positive one pairs it with `conj(lambda_k)`.
pub fn fourier_vector(kdim: usize, k: usize) -> Vec<Complex64> {
    let scale = 1.0 / (kdim as f64).sqrt();
    (0..kdim)
        .map(|j| {
            let phase = ((j * k) % kdim) as f64 * 2.0 * PI / kdim as f64;
            Complex64::from_polar(scale, -phase)
        })
        .collect()
}

/// `|Pi v_k - lambda_k v_k|`.
pub fn eigen_action_check(pi: &TransitionMatrix, k: usize) -> Result<f64> {
    let kdim = pi.k();
    if k >= kdim {
        return Err(Error::Precondition(format!("eigen index {k} out of range for K={kdim}")));
    }
    let v = fourier_vector(kdim, k);
    let lambda = circulant_eigenvalues(kdim, pi.p())[k];
    let m = pi.matrix();
    let mut sq = 0.0;
    for i in 0..kdim {
        let pv: Complex64 = (0..kdim).map(|j| v[j] * m[[i, j]]).sum();
        sq += (pv - lambda * v[i]).norm_sqr();
    }
    Ok(sq.sqrt())
}

/// Rounding floor of repeated `f64` products of stochastic matrices.
pub const DECAY_NOISE_FLOOR: f64 = 1e-14;

/// Slack for margins that equal their bound in exact arithmetic.
pub const MARGIN_SLACK: f64 = 1e-12;

/// `exp(-8 p (1-p) R / K^2)`.
pub fn decay_bound(k: usize, p: f64, r: usize) -> f64 {
    (-8.0 * p * (1.0 - p) * r as f64 / (k * k) as f64).exp()
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub k: usize,
    pub p: f64,
    pub r_max: usize,
    /// Entries checked against the exponential bound.
    pub checked: usize,
    /// Entries exceeding the bound.
    pub violations: usize,
    /// Largest `deviation / (bound + DECAY_NOISE_FLOOR)` seen.
    pub worst_ratio: f64,
    /// Even K only: entries with odd `j - i + R` that are not exactly zero.
    pub parity_nonzero: usize,
    pub passed: bool,
}

/// Checks `|[Pi^R]_{ij} - 1/K|` (odd K) or the parity-split `2/K` version
/// (even K) against [`decay_bound`] plus [`DECAY_NOISE_FLOOR`] for `R = 0..=r_max`.
pub fn decay_bound_report(k: usize, p: f64, r_max: usize) -> Result<DecayReport> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidConfig(format!("decay bounds need 0 < p < 1, got {p}")));
    }
    let pi = TransitionMatrix::new(k, p)?;
    let even = k.is_multiple_of(2);
    let target = if even { 2.0 / k as f64 } else { 1.0 / k as f64 };
    let mut report = DecayReport {
        k,
        p,
        r_max,
        checked: 0,
        violations: 0,
        worst_ratio: 0.0,
        parity_nonzero: 0,
        passed: true,
    };
    let mut cur: Array2<f64> = Array2::eye(k);
    for r in 0..=r_max {
        let bound = decay_bound(k, p, r);
        for ((i, j), &v) in cur.indexed_iter() {
            if even && (j + k - i + r) % 2 == 1 {
                if v != 0.0 {
                    report.parity_nonzero += 1;
                }
                continue;
            }
            report.checked += 1;
            let ratio = (v - target).abs() / (bound + DECAY_NOISE_FLOOR);
            report.worst_ratio = report.worst_ratio.max(ratio);
            if ratio > 1.0 {
                report.violations += 1;
            }
        }
        cur = cur.dot(pi.matrix());
    }
    report.passed = report.violations == 0 && report.parity_nonzero == 0;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaReport {
    pub k: usize,
    pub p: f64,
    pub n: usize,
    pub gamma_11: f64,
    pub max_off_diagonal: f64,
    /// `Gamma_11 - max_{i != j} Gamma_ij`.
    pub margin: f64,
    /// `(1-p)^(N-2)`.
    pub bound: f64,
    pub bound_holds: bool,
    /// `min(p, 1-p)^(N-2)`, the bound with the chain's orientation factored out.
    pub symmetric_bound: f64,
    pub symmetric_bound_holds: bool,
    /// `min_{k=2..N-1} ([S Pi^T]_11 - [S (Pi^T)^k]_11)` with `S = sum_{i=1}^{N-1} Pi^i`;
    /// `None` when `N < 3`.
    pub realized_gap: Option<f64>,
}

/// Diagonal dominance of `Gamma(N) = sum_{i=0}^{N-2} Pi^i`.
pub fn gamma_dominance_report(k: usize, p: f64, n: usize) -> Result<GammaReport> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("N must be >= 2, got {n}")));
    }
    let pi = TransitionMatrix::new(k, p)?;
    let gamma = pi.power_sum(0, n - 2);
    let gamma_11 = gamma[[0, 0]];
    let max_off_diagonal = gamma
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = gamma_11 - max_off_diagonal;
    let exponent = (n - 2) as i32;
    let bound = (1.0 - p).powi(exponent);
    let symmetric_bound = p.min(1.0 - p).powi(exponent);

    let realized_gap = (n >= 3).then(|| {
        let s = pi.power_sum(1, n - 1);
        let row = s.row(0);
        let mut pk = pi.matrix().clone();
        let base: f64 = row.iter().zip(pk.row(0)).map(|(a, b)| a * b).sum();
        let mut best = f64::INFINITY;
        for _ in 2..n {
            pk = pk.dot(pi.matrix());
            let other: f64 = row.iter().zip(pk.row(0)).map(|(a, b)| a * b).sum();
            best = best.min(base - other);
        }
        best
    });

    Ok(GammaReport {
        k,
        p,
        n,
        gamma_11,
        max_off_diagonal,
        margin,
        bound,
        bound_holds: margin >= bound - MARGIN_SLACK,
        symmetric_bound,
        symmetric_bound_holds: margin >= symmetric_bound - MARGIN_SLACK,
        realized_gap,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FrobeniusReport {
    pub formula: f64,
    pub actual: f64,
    /// Set when the two disagree, which happens for `K = 2`.
    pub warning: Option<String>,
}

/// `sqrt(K (p^2 + (1-p)^2))`.
pub fn pi_frobenius(k: usize, p: f64) -> f64 {
    (k as f64 * (p * p + (1.0 - p) * (1.0 - p))).sqrt()
}

pub fn pi_frobenius_report(k: usize, p: f64) -> Result<FrobeniusReport> {
    let formula = pi_frobenius(k, p);
    let actual = TransitionMatrix::new(k, p)?.matrix().iter().map(|v| v * v).sum::<f64>().sqrt();
    let warning = ((formula - actual).abs() > 1e-12 * actual.max(1.0)).then(|| {
        format!("formula {formula} differs from the direct norm {actual} (the two bands merge for K=2)")
    });
    Ok(FrobeniusReport { formula, actual, warning })
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftIdentities {
    pub k: usize,
    /// `Pi_0^K = I`.
    pub period: bool,
    /// `Pi_0 Pi_0^T = I`.
    pub orthogonal: bool,
    /// `sum_{k=1}^{K} Pi_0^k = 1 1^T`.
    pub sum_is_ones: bool,
}

impl ShiftIdentities {
    pub fn all(&self) -> bool {
        self.period && self.orthogonal && self.sum_is_ones
    }
}

/// Shift-matrix identities in exact integer arithmetic.
pub fn shift_identities_check(k: usize) -> Result<ShiftIdentities> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("K must be >= 2, got {k}")));
    }
    let s = shift_matrix(k);
    let eye = Array2::from_shape_fn((k, k), |(i, j)| i64::from(i == j));
    let mut sum = Array2::<i64>::zeros((k, k));
    let mut cur = eye.clone();
    for _ in 0..k {
        cur = cur.dot(&s);
        sum += &cur;
    }
    Ok(ShiftIdentities {
        k,
        period: cur == eye,
        orthogonal: s.dot(&s.t()) == eye,
        sum_is_ones: sum.iter().all(|&v| v == 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn transition_matrix_rows() {
        let pi = TransitionMatrix::new(3, 0.7).unwrap();
        let want = ndarray::array![[0.0, 0.7, 0.3], [0.3, 0.0, 0.7], [0.7, 0.3, 0.0]];
        assert!(close(pi.matrix(), &want, 1e-15));

        let pi = TransitionMatrix::new(3, 1.0).unwrap();
        assert_eq!(*pi.matrix(), shift_matrix(3).t().mapv(|v| v as f64));

        let pi = TransitionMatrix::new(6, 0.5).unwrap();
        assert_eq!(*pi.matrix(), pi.matrix().t());
        assert_eq!(pi.matrix()[[0, 1]], 0.5);
        assert_eq!(pi.matrix()[[0, 5]], 0.5);

        let pi = TransitionMatrix::new(2, 0.3).unwrap();
        assert_eq!(*pi.matrix(), ndarray::array![[0.0, 1.0], [1.0, 0.0]]);

        assert!(TransitionMatrix::new(1, 0.5).is_err());
    }

    #[test]
    fn powers() {
        let pi = TransitionMatrix::new(5, 0.37).unwrap();
        assert_eq!(pi.power(0), Array2::<f64>::eye(5));
        assert_eq!(TransitionMatrix::new(3, 1.0).unwrap().power(3), Array2::<f64>::eye(3));
        let mut naive = Array2::<f64>::eye(5);
        for _ in 0..13 {
            naive = naive.dot(pi.matrix());
        }
        assert!(close(&pi.power(13), &naive, 1e-14));
        for r in [1, 7, 64, 200] {
            for row in pi.power(r).rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
        }
        let p60 = TransitionMatrix::new(5, 0.5).unwrap().power(60);
        let dev = p60.iter().map(|v| (v - 0.2).abs()).fold(0.0, f64::max);
        assert!(dev <= decay_bound(5, 0.5, 60));
        assert!((decay_bound(5, 0.5, 60) - (-4.8f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn optimal_predictor_examples() {
        let pi = TransitionMatrix::new(3, 0.7).unwrap();
        let x = crate::walkgen::one_hot_matrix(&[2, 0], 3);
        let f = optimal_predictor(&pi, &x).unwrap();
        assert!(close(&f.insert_axis(ndarray::Axis(0)), &ndarray::array![[0.0, 0.7, 0.3]], 1e-15));

        let pi = TransitionMatrix::new(4, 1.0).unwrap();
        let x = crate::walkgen::one_hot_matrix(&[3], 4);
        assert_eq!(optimal_predictor(&pi, &x).unwrap().to_vec(), vec![1.0, 0.0, 0.0, 0.0]);

        let bad = Array2::zeros((3, 3));
        assert!(optimal_predictor(&TransitionMatrix::new(3, 0.5).unwrap(), &bad).is_err());
        assert_eq!(opt_accuracy(6, 0.5), 0.5);
        assert_eq!(opt_accuracy(6, 0.2), 0.8);
    }

    #[test]
    fn eigenvalues() {
        let l = circulant_eigenvalues(4, 0.5);
        let want = [1.0, 0.0, -1.0, 0.0];
        for (a, b) in l.iter().zip(want) {
            assert!((a - Complex64::new(b, 0.0)).norm() < 1e-15);
        }
        for k in 1..5 {
            assert!(circulant_eigenvalues(5, 0.5)[k].norm() <= 1.0 - 0.08);
        }
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(circulant_eigenvalues(7, p)[0], Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn eigen_actions() {
        for (k, p) in [(4, 0.5), (7, 0.3), (6, 0.9), (12, 0.1)] {
            let pi = TransitionMatrix::new(k, p).unwrap();
            for idx in 0..k {
                assert!(eigen_action_check(&pi, idx).unwrap() <= 1e-12);
            }
        }
        let pi = TransitionMatrix::new(7, 0.3).unwrap();
        assert_eq!(eigen_action_check(&pi, 0).unwrap(), 0.0);
        assert!(eigen_action_check(&pi, 7).is_err());
    }

    #[test]
    fn decay_examples() {
        let p3 = TransitionMatrix::new(4, 0.5).unwrap().power(3);
        for i in 0..4 {
            for j in 0..4 {
                if (j + 4 - i) % 2 == 0 {
                    assert_eq!(p3[[i, j]], 0.0);
                }
            }
        }
        assert!(0.3 <= decay_bound(5, 0.5, 1));
        assert!((decay_bound(5, 0.5, 1) - 0.923116).abs() < 1e-6);
        assert!(decay_bound_report(3, 0.9, 100).unwrap().passed);
        assert!((decay_bound(3, 0.9, 100) - (-8.0f64).exp()).abs() < 1e-15);
        assert!(decay_bound_report(5, 1.0, 10).is_err());
        for k in [4, 6, 10] {
            let r = decay_bound_report(k, 0.3, 50).unwrap();
            assert_eq!(r.parity_nonzero, 0);
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn gamma_examples() {
        let r = gamma_dominance_report(3, 0.6, 4).unwrap();
        assert!((r.gamma_11 - 1.48).abs() < 1e-14);
        assert!((r.max_off_diagonal - 0.76).abs() < 1e-14);
        assert!((r.margin - 0.72).abs() < 1e-14);
        assert!(r.bound_holds);
        assert!((r.bound - 0.16).abs() < 1e-15);

        let r = gamma_dominance_report(5, 0.3, 2).unwrap();
        assert_eq!(r.margin, 1.0);
        assert_eq!(r.realized_gap, None);

        let r = gamma_dominance_report(6, 0.5, 97).unwrap();
        assert!(r.realized_gap.unwrap() > 0.0);
    }

    #[test]
    fn frobenius() {
        assert!((pi_frobenius(6, 0.5) - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(pi_frobenius(7, 1.0), 7f64.sqrt());
        let r = pi_frobenius_report(2, 0.5).unwrap();
        assert_eq!(r.formula, 1.0);
        assert_eq!(r.actual, 2f64.sqrt());
        assert!(r.warning.is_some());
        assert!(pi_frobenius_report(6, 0.3).unwrap().warning.is_none());
    }

    #[test]
    fn shift_identities() {
        for k in [2, 3, 12] {
            assert!(shift_identities_check(k).unwrap().all());
        }
        let s = shift_matrix(2);
        assert_eq!(s.dot(&s), Array2::from_shape_fn((2, 2), |(i, j)| i64::from(i == j)));
    }
}
