//! Closed-form gradients of the per-example log-loss and a central
//! finite-difference oracle.
//!
//! With `l' = -1/(e_y^T f + eps)`, `u = V^T e_y`, `c_j = x_j^T u` (`c_N = 0`),
//! `d = sum_j S_j c_j` and `g_j = S_j (c_j - d)`:
//!
//! - `grad V   = l' e_y (sum_{j<N} S_j x_j)^T`
//! - `grad W12 = l' (sum_{j<N} g_j x_j / n_j) q^T`
//! - `grad W22 = l' (sum_{j<=N} g_j p_j / n_j) q^T`
//!
//! and the left `K` columns of `grad W` vanish. Both `W` blocks share the
//! right factor `q`, so [`GradPair`] keeps only the left factors.

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    forward, loss_argument, softmax, AttentionGeometry, AttentionState, Params, Sample,
};

/// Gradient with respect to `V`, `W12` and `W22`; `grad W11 = grad W21 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub v: Array2<f64>,
    /// Left factor of `grad W12 = w12_left q^T` (length K).
    pub w12_left: Array1<f64>,
    /// Left factor of `grad W22 = w22_left q^T` (length M).
    pub w22_left: Array1<f64>,
    /// Shared right factor, the effective query `q`.
    pub query: Array1<f64>,
}

impl GradPair {
    pub fn zeros(k: usize, geom: &AttentionGeometry) -> Self {
        GradPair {
            v: Array2::zeros((k, k)),
            w12_left: Array1::zeros(k),
            w22_left: Array1::zeros(geom.m()),
            query: geom.query.clone(),
        }
    }

    pub fn w12(&self) -> Array2<f64> {
        outer(&self.w12_left, &self.query)
    }

    pub fn w22(&self) -> Array2<f64> {
        outer(&self.w22_left, &self.query)
    }

    /// Full `(K+M) x (K+M)` gradient of `W`, left `K` columns zero.
    pub fn w_dense(&self) -> Array2<f64> {
        let k = self.w12_left.len();
        let m = self.query.len();
        let mut w = Array2::zeros((k + m, k + m));
        w.slice_mut(s![..k, k..]).assign(&self.w12());
        w.slice_mut(s![k.., k..]).assign(&self.w22());
        w
    }

    /// `||grad W||_F`, computed from the rank-one factors.
    pub fn w_norm(&self) -> f64 {
        let q = self.query.dot(&self.query).sqrt();
        let l = (self.w12_left.dot(&self.w12_left) + self.w22_left.dot(&self.w22_left)).sqrt();
        l * q
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(&self.w12_left).chain(&self.w22_left).all(|v| v.is_finite())
    }

    fn add_scaled(&mut self, other: &GradPair, w: f64) {
        self.v.scaled_add(w, &other.v);
        self.w12_left.scaled_add(w, &other.w12_left);
        self.w22_left.scaled_add(w, &other.w22_left);
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
}

/// Per-example quantities shared by the gradient and the metrics.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    /// `l' = -1/(e_y^T f + eps)`.
    pub lprime: f64,
    pub label: usize,
    pub predicted: usize,
    pub f: Array1<f64>,
    pub weights: Array1<f64>,
    /// `sum_{j<N} S_j x_j`.
    pub token_mix: Array1<f64>,
    /// `l' sum_{j<N} g_j x_j / n_j`.
    pub w12_left: Array1<f64>,
    /// `l' g_j / n_j` per position; `grad W22 = P (this) q^T`.
    pub pos_coeff: Array1<f64>,
}

/// Gradient terms of one sample against cached state.
pub fn sample_grad(
    params: &Params,
    state: &AttentionState,
    geom: &AttentionGeometry,
    sample: &Sample,
    eps: f64,
) -> Result<SampleGrad> {
    let out = forward(params, state, geom, &sample.tokens)?;
    let y = sample.label;
    let arg = loss_argument(&out.f, y, eps)?;
    let lprime = -1.0 / arg;
    let u = params.v.row(y);
    let n = geom.n();
    let c: Vec<f64> = (0..n).map(|j| if j + 1 < n { u[sample.tokens[j]] } else { 0.0 }).collect();
    let d: f64 = out.weights.iter().zip(&c).map(|(s, c)| s * c).sum();
    let k = params.k();
    let mut w12_left = Array1::zeros(k);
    let mut pos_coeff = Array1::zeros(n);
    for j in 0..n {
        let g = out.weights[j] * (c[j] - d) / geom.scales[j];
        pos_coeff[j] = lprime * g;
        if j + 1 < n {
            w12_left[sample.tokens[j]] += lprime * g;
        }
    }
    Ok(SampleGrad {
        loss: -arg.ln(),
        lprime,
        label: y,
        predicted: out.predicted,
        f: out.f,
        weights: out.weights,
        token_mix: out.token_mix,
        w12_left,
        pos_coeff,
    })
}

/// Closed-form gradient of one example.
pub fn grad_example(params: &Params, geom: &AttentionGeometry, sample: &Sample, eps: f64) -> Result<GradPair> {
    geom.check_sample(sample, params.k())?;
    let state = AttentionState::new(params, geom)?;
    let sg = sample_grad(params, &state, geom, sample, eps)?;
    let mut v = Array2::zeros((params.k(), params.k()));
    v.row_mut(sg.label).scaled_add(sg.lprime, &sg.token_mix);
    Ok(GradPair {
        v,
        w12_left: sg.w12_left,
        w22_left: geom.pos.matrix().dot(&sg.pos_coeff),
        query: geom.query.clone(),
    })
}

/// Weighted batch gradient and loss statistics.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub grad: GradPair,
    /// Positional coefficients with `grad W22 = P pos_coeff q^T`.
    pub pos_coeff: Array1<f64>,
    pub loss: f64,
    pub lprime: f64,
}

#[derive(Clone)]
struct Partial {
    v: Array2<f64>,
    w12_left: Array1<f64>,
    pos_coeff: Array1<f64>,
    loss: f64,
    lprime: f64,
}

impl Partial {
    fn zeros(k: usize, n: usize) -> Self {
        Partial {
            v: Array2::zeros((k, k)),
            w12_left: Array1::zeros(k),
            pos_coeff: Array1::zeros(n),
            loss: 0.0,
            lprime: 0.0,
        }
    }

    fn add(&mut self, other: &Partial) {
        self.v += &other.v;
        self.w12_left += &other.w12_left;
        self.pos_coeff += &other.pos_coeff;
        self.loss += other.loss;
        self.lprime += other.lprime;
    }
}

/// Samples per parallel chunk. Chunks are summed sequentially in index
/// order, so results do not depend on the thread count.
const CHUNK: usize = 64;

/// `sum_i w_i grad(sample_i)` with a fixed reduction order.
pub fn batch_grad(
    params: &Params,
    geom: &AttentionGeometry,
    samples: &[Sample],
    weights: &[f64],
    eps: f64,
) -> Result<BatchGrad> {
    let state = AttentionState::new(params, geom)?;
    batch_grad_with_state(params, &state, geom, samples, weights, eps)
}

/// [`batch_grad`] against a precomputed attention state.
pub fn batch_grad_with_state(
    params: &Params,
    state: &AttentionState,
    geom: &AttentionGeometry,
    samples: &[Sample],
    weights: &[f64],
    eps: f64,
) -> Result<BatchGrad> {
    check_weights(samples.len(), weights)?;
    let k = params.k();
    for (i, s) in samples.iter().enumerate() {
        geom.check_sample(s, k).map_err(|e| e.at_example(i))?;
    }
    let n = geom.n();
    let partials: Vec<Partial> = samples
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = Partial::zeros(k, n);
            for (offset, sample) in chunk.iter().enumerate() {
                let i = c * CHUNK + offset;
                let w = weights[i];
                let sg = sample_grad(params, state, geom, sample, eps).map_err(|e| e.at_example(i))?;
                acc.v.row_mut(sg.label).scaled_add(w * sg.lprime, &sg.token_mix);
                acc.w12_left.scaled_add(w, &sg.w12_left);
                acc.pos_coeff.scaled_add(w, &sg.pos_coeff);
                acc.loss += w * sg.loss;
                acc.lprime += w * sg.lprime;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Partial::zeros(k, n);
    for p in &partials {
        total.add(p);
    }
    Ok(BatchGrad {
        grad: GradPair {
            v: total.v,
            w12_left: total.w12_left,
            w22_left: geom.pos.matrix().dot(&total.pos_coeff),
            query: geom.query.clone(),
        },
        pos_coeff: total.pos_coeff,
        loss: total.loss,
        lprime: total.lprime,
    })
}

fn check_weights(len: usize, weights: &[f64]) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if weights.len() != len {
        return Err(Error::Shape(format!("{} weights for {} items", weights.len(), len)));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Precondition("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// `sum_i w_i g_i`, accumulated in index order.
pub fn accumulate(grads: &[GradPair], weights: &[f64]) -> Result<GradPair> {
    check_weights(grads.len(), weights)?;
    let first = &grads[0];
    let mut out = GradPair {
        v: Array2::zeros(first.v.raw_dim()),
        w12_left: Array1::zeros(first.w12_left.len()),
        w22_left: Array1::zeros(first.w22_left.len()),
        query: first.query.clone(),
    };
    for (g, &w) in grads.iter().zip(weights) {
        if g.query != first.query || g.v.raw_dim() != first.v.raw_dim() {
            return Err(Error::Shape("gradients come from different geometries".into()));
        }
        out.add_scaled(g, w);
    }
    Ok(out)
}

/// Dense gradient from the block formulas with `A` and `B` materialized.
#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub v: Array2<f64>,
    /// `(K+M) x (K+M)`.
    pub w: Array2<f64>,
}

/// Evaluates the gradient with every intermediate matrix formed explicitly:
/// `A = (sum S_i x^_i x_i^T - sum S_i x^_i sum S_i x_i^T) V^T e_y q^T` over
/// token rows, `B` likewise over positional rows with the query included.
pub fn grad_example_dense(
    params: &Params,
    x: &Array2<f64>,
    x_tilde: &Array2<f64>,
    y: usize,
    eps: f64,
    normalize: bool,
) -> Result<DenseGrad> {
    let k = params.k();
    let m = params.m();
    let n = x.ncols();
    let out = crate::model::forward_dense(params, x, x_tilde, normalize)?;
    let arg = loss_argument(&out.f, y, eps)?;
    let lprime = -1.0 / arg;
    let xh = if normalize { crate::posembed::normalize_columns(x_tilde) } else { x_tilde.clone() };
    let s = softmax(&out.logits)?;
    let mut sx = Array1::<f64>::zeros(k);
    let mut sxx = Array2::<f64>::zeros((k + m, k));
    let mut sxh = Array1::<f64>::zeros(k + m);
    for i in 0..n {
        let xi = x.column(i);
        let xhi = xh.column(i);
        sx.scaled_add(s[i], &xi);
        sxh.scaled_add(s[i], &xhi);
        sxx += &(outer(&xhi.to_owned(), &xi.to_owned()) * s[i]);
    }
    let u = params.v.row(y).to_owned();
    let q = xh.column(n - 1).to_owned();
    let core = (&sxx - &outer(&sxh, &sx)).dot(&u);
    let mut w = outer(&core, &q) * lprime;
    w.slice_mut(s![.., ..k]).fill(0.0);
    let mut v = Array2::zeros((k, k));
    v.row_mut(y).assign(&(&sx * lprime));
    Ok(DenseGrad { v, w })
}

/// Central-difference estimates for every parameter entry.
#[derive(Debug, Clone)]
pub struct FdGrad {
    pub v: Array2<f64>,
    pub w11: Array2<f64>,
    pub w12: Array2<f64>,
    pub w21: Array2<f64>,
    pub w22: Array2<f64>,
}

/// Per-example loss straight from the cached forward pass.
pub fn example_loss(params: &Params, geom: &AttentionGeometry, sample: &Sample, eps: f64) -> Result<f64> {
    let state = AttentionState::new(params, geom)?;
    let out = forward(params, &state, geom, &sample.tokens)?;
    crate::model::loss_value(&out.f, sample.label, eps)
}

/// `(loss(theta + h e_i) - loss(theta - h e_i)) / 2h` for every entry.
pub fn fd_grad(params: &Params, geom: &AttentionGeometry, sample: &Sample, eps: f64, h: f64) -> Result<FdGrad> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be positive, got {h}")));
    }
    geom.check_sample(sample, params.k())?;
    let mut work = params.clone();
    let mut block = |select: fn(&mut Params) -> &mut Array2<f64>| -> Result<Array2<f64>> {
        let dim = select(&mut work).raw_dim();
        let mut out = Array2::zeros(dim);
        for idx in ndarray::indices(dim) {
            let orig = select(&mut work)[idx];
            select(&mut work)[idx] = orig + h;
            let plus = example_loss(&work, geom, sample, eps)?;
            select(&mut work)[idx] = orig - h;
            let minus = example_loss(&work, geom, sample, eps)?;
            select(&mut work)[idx] = orig;
            out[idx] = (plus - minus) / (2.0 * h);
        }
        Ok(out)
    };
    Ok(FdGrad {
        v: block(|p| &mut p.v)?,
        w11: block(|p| &mut p.w11)?,
        w12: block(|p| &mut p.w12)?,
        w21: block(|p| &mut p.w21)?,
        w22: block(|p| &mut p.w22)?,
    })
}

/// Agreement between analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy)]
pub struct FdComparison {
    /// Largest `|a - b| / max(max_block |a|, floor)`: errors relative to the
    /// magnitude of the block (`V`, `W12`, `W22`) they belong to.
    pub max_rel_error: f64,
    /// Largest per-entry `|a - b| / max(|a|, |b|)` over entries with magnitude
    /// at least the floor (absolute below it). Central differences carry about
    /// `1e-10` of rounding noise, so tiny entries inflate this figure.
    pub max_entry_rel_error: f64,
    /// Largest finite-difference magnitude over the left `K` columns of `W`.
    pub max_left_block: f64,
}

pub fn compare_fd(analytic: &GradPair, fd: &FdGrad, floor: f64) -> FdComparison {
    let mut block_worst = 0.0f64;
    let mut entry_worst = 0.0f64;
    let mut check = |a: &Array2<f64>, b: &Array2<f64>| {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
        for (x, y) in a.iter().zip(b) {
            block_worst = block_worst.max((x - y).abs() / scale);
            let mag = x.abs().max(y.abs());
            let err = if mag >= floor { (x - y).abs() / mag } else { (x - y).abs() };
            entry_worst = entry_worst.max(err);
        }
    };
    check(&analytic.v, &fd.v);
    check(&analytic.w12(), &fd.w12);
    check(&analytic.w22(), &fd.w22);
    let max_left_block = fd.w11.iter().chain(&fd.w21).fold(0.0f64, |a, v| a.max(v.abs()));
    FdComparison { max_rel_error: block_worst, max_entry_rel_error: entry_worst, max_left_block }
}
