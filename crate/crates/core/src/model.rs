//! One-layer softmax attention `f(X) = V X S(X~^T W x~_N)`, its prediction
//! rule and log-loss.
//!
//! `X~ = [X; P]` stacks one-hot tokens over positional columns, and the query
//! column `x~_N = [0; p_N]` carries no token. Only `W12` and `W22` therefore
//! reach the logits:
//!
//! `z_j = x_j^T W12 q + p_j^T W22 q`, with `q = p_N`.
//!
//! [`AttentionState`] caches `W12 q` and `P^T W22 q` once per parameter
//! value, so a batch costs `O(M^2)` once plus `O(N + K^2)` per sample.

use std::io::{Read, Write};

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posembed::PositionalMatrix;

/// A token sequence `x_1..x_{N-1}` (0-based token ids) and its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitMode {
    Zero,
    Gaussian { sigma: f64 },
}

/// `V` (`K x K`) and the four blocks of `W` (`(K+M) x (K+M)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub init: InitMode,
    pub v: Array2<f64>,
    pub w11: Array2<f64>,
    pub w12: Array2<f64>,
    pub w21: Array2<f64>,
    pub w22: Array2<f64>,
}

impl Params {
    pub fn zeros(k: usize, m: usize) -> Self {
        Params {
            init: InitMode::Zero,
            v: Array2::zeros((k, k)),
            w11: Array2::zeros((k, k)),
            w12: Array2::zeros((k, m)),
            w21: Array2::zeros((m, k)),
            w22: Array2::zeros((m, m)),
        }
    }

    /// I.i.d. `N(0, sigma^2)` entries, drawn for `V, W11, W12, W21, W22` in
    /// that order, each row-major.
    pub fn gaussian<R: Rng + ?Sized>(k: usize, m: usize, sigma: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::InvalidConfig(format!("sigma={sigma}: {e}")))?;
        let mut draw = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || normal.sample(rng));
        Ok(Params {
            init: InitMode::Gaussian { sigma },
            v: draw(k, k),
            w11: draw(k, k),
            w12: draw(k, m),
            w21: draw(m, k),
            w22: draw(m, m),
        })
    }

    pub fn init<R: Rng + ?Sized>(mode: InitMode, k: usize, m: usize, rng: &mut R) -> Result<Self> {
        match mode {
            InitMode::Zero => Ok(Params::zeros(k, m)),
            InitMode::Gaussian { sigma } => Params::gaussian(k, m, sigma, rng),
        }
    }

    pub fn k(&self) -> usize {
        self.v.nrows()
    }

    pub fn m(&self) -> usize {
        self.w22.nrows()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (k, m) = (self.k(), self.m());
        let ok = self.v.dim() == (k, k)
            && self.w11.dim() == (k, k)
            && self.w12.dim() == (k, m)
            && self.w21.dim() == (m, k)
            && self.w22.dim() == (m, m);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "inconsistent blocks: V {:?}, W11 {:?}, W12 {:?}, W21 {:?}, W22 {:?}",
                self.v.dim(),
                self.w11.dim(),
                self.w12.dim(),
                self.w21.dim(),
                self.w22.dim()
            )))
        }
    }

    /// The full `(K+M) x (K+M)` matrix `W`.
    pub fn w_dense(&self) -> Array2<f64> {
        let top = concatenate(Axis(1), &[self.w11.view(), self.w12.view()]).expect("row counts match");
        let bottom = concatenate(Axis(1), &[self.w21.view(), self.w22.view()]).expect("row counts match");
        concatenate(Axis(0), &[top.view(), bottom.view()]).expect("column counts match")
    }

    pub fn is_finite(&self) -> bool {
        [&self.v, &self.w11, &self.w12, &self.w21, &self.w22]
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Binary layout (little endian): magic `CWPARAMS`, `u32` version,
    /// `u64` K, `u64` M, `u8` init tag (0 zero, 1 gaussian), `f64` sigma,
    /// `u64` iteration, then `V, W11, W12, W21, W22` row-major as `f64`.
    pub fn write_to<W: Write>(&self, mut w: W, iteration: u64) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&PARAMS_VERSION.to_le_bytes())?;
        w.write_all(&(self.k() as u64).to_le_bytes())?;
        w.write_all(&(self.m() as u64).to_le_bytes())?;
        let (tag, sigma) = match self.init {
            InitMode::Zero => (0u8, 0.0),
            InitMode::Gaussian { sigma } => (1u8, sigma),
        };
        w.write_all(&[tag])?;
        w.write_all(&sigma.to_le_bytes())?;
        w.write_all(&iteration.to_le_bytes())?;
        for block in [&self.v, &self.w11, &self.w12, &self.w21, &self.w22] {
            for v in block.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`Params::write_to`]; returns the stored iteration too.
    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, u64)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::InvalidConfig("not a parameter file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != PARAMS_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported parameter file version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let k = read_u64(&mut r)? as usize;
        let m = read_u64(&mut r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let sigma = f64::from_bits(read_u64(&mut r)?);
        let iteration = read_u64(&mut r)?;
        let init = match tag[0] {
            0 => InitMode::Zero,
            1 => InitMode::Gaussian { sigma },
            t => return Err(Error::InvalidConfig(format!("unknown init tag {t}"))),
        };
        let mut block = |rows: usize, cols: usize| -> Result<Array2<f64>> {
            let mut data = vec![0.0; rows * cols];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches shape"))
        };
        let params = Params {
            init,
            v: block(k, k)?,
            w11: block(k, k)?,
            w12: block(k, m)?,
            w21: block(m, k)?,
            w22: block(m, m)?,
        };
        Ok((params, iteration))
    }
}

const PARAMS_MAGIC: &[u8; 8] = b"CWPARAMS";
const PARAMS_VERSION: u32 = 1;

/// Positional geometry of one sequence length, with optional unit
/// normalization of the augmented columns.
#[derive(Debug, Clone)]
pub struct AttentionGeometry {
    pub pos: PositionalMatrix,
    pub normalize: bool,
    /// Column scales `n_j`: norms of `x~_j` when normalizing, else 1.
    pub scales: Array1<f64>,
    /// Effective query `x~_N` restricted to its positional part.
    pub query: Array1<f64>,
    /// Use `P^T P = (M+1)/2 I` analytically instead of the rounded product.
    pub exact_gram: bool,
}

impl AttentionGeometry {
    pub fn new(m: usize, n: usize, normalize: bool) -> Result<Self> {
        let pos = PositionalMatrix::build(m, n)?;
        let scales = if normalize { pos.augmented_norms() } else { Array1::ones(n) };
        let query = pos.column(n - 1) / scales[n - 1];
        Ok(AttentionGeometry { pos, normalize, scales, query, exact_gram: false })
    }

    /// Geometry whose column norms and query norm come from the exact Gram
    /// identity. Logits built through [`AttentionState::from_span`] then
    /// treat positional columns as exactly orthogonal.
    pub fn with_exact_gram(mut self) -> Self {
        let n = self.n();
        let c = self.half_m1();
        if self.normalize {
            self.scales = Array1::from_shape_fn(n, |j| if j + 1 < n { (1.0 + c).sqrt() } else { c.sqrt() });
        }
        self.query = self.pos.column(n - 1) / self.scales[n - 1];
        self.exact_gram = true;
        self
    }

    /// `(M+1)/2`, the squared norm of every positional column.
    pub fn half_m1(&self) -> f64 {
        (self.m() as f64 + 1.0) / 2.0
    }

    /// `|q|^2`, analytic under the exact Gram identity.
    pub fn query_norm_sq(&self) -> f64 {
        if self.exact_gram {
            let c = self.half_m1();
            c / (self.scales[self.n() - 1] * self.scales[self.n() - 1])
        } else {
            self.query.dot(&self.query)
        }
    }

    pub fn n(&self) -> usize {
        self.pos.n()
    }

    pub fn m(&self) -> usize {
        self.pos.m()
    }

    pub fn check_sample(&self, sample: &Sample, k: usize) -> Result<()> {
        if sample.tokens.len() + 1 != self.n() {
            return Err(Error::Shape(format!(
                "sample has {} tokens, geometry expects N-1 = {}",
                sample.tokens.len(),
                self.n() - 1
            )));
        }
        if let Some(&t) = sample.tokens.iter().chain(std::iter::once(&sample.label)).find(|&&t| t >= k) {
            return Err(Error::Shape(format!("token {t} out of range for K={k}")));
        }
        Ok(())
    }
}

/// Sample-independent parts of the logits for fixed parameters.
#[derive(Debug, Clone)]
pub struct AttentionState {
    /// `W12 q`, one entry per token id.
    pub token_logit: Array1<f64>,
    /// `P^T W22 q`, one entry per position.
    pub pos_logit: Array1<f64>,
}

impl AttentionState {
    pub fn new(params: &Params, geom: &AttentionGeometry) -> Result<Self> {
        params.check_shapes()?;
        if params.m() != geom.m() {
            return Err(Error::Shape(format!("params have M={}, geometry M={}", params.m(), geom.m())));
        }
        let token_logit = params.w12.dot(&geom.query);
        let pos_logit = geom.pos.matrix().t().dot(&params.w22.dot(&geom.query));
        Ok(AttentionState { token_logit, pos_logit })
    }

    /// State for `W22 = W22_0 + P coeff q^T`, with `base = P^T W22_0 q`
    /// precomputed and `P^T P` replaced by `(M+1)/2 I`.
    pub fn from_span(params: &Params, geom: &AttentionGeometry, base: &Array1<f64>, coeff: &Array1<f64>) -> Result<Self> {
        params.check_shapes()?;
        if base.len() != geom.n() || coeff.len() != geom.n() {
            return Err(Error::Shape("span coefficients must have one entry per position".into()));
        }
        let token_logit = params.w12.dot(&geom.query);
        let scale = geom.half_m1() * geom.query_norm_sq();
        let pos_logit = base + &(coeff * scale);
        Ok(AttentionState { token_logit, pos_logit })
    }

    /// `z_j = (token_logit[t_j] + pos_logit[j]) / n_j`; the query column has no token term.
    pub fn logits(&self, geom: &AttentionGeometry, tokens: &[usize]) -> Array1<f64> {
        let n = geom.n();
        Array1::from_shape_fn(n, |j| {
            let tok = if j + 1 < n { self.token_logit[tokens[j]] } else { 0.0 };
            (tok + self.pos_logit[j]) / geom.scales[j]
        })
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub logits: Array1<f64>,
    pub weights: Array1<f64>,
    /// `sum_{i<N} S_i x_i`.
    pub token_mix: Array1<f64>,
    pub f: Array1<f64>,
    pub predicted: usize,
}

/// Max-subtracted softmax; rejects non-finite input.
pub fn softmax(z: &Array1<f64>) -> Result<Array1<f64>> {
    if z.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input contains {bad}")));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.mapv(|v| (v - max).exp());
    let total = e.sum();
    Ok(e / total)
}

/// Forward pass through the cached state.
pub fn forward(
    params: &Params,
    state: &AttentionState,
    geom: &AttentionGeometry,
    tokens: &[usize],
) -> Result<AttentionOutput> {
    let logits = state.logits(geom, tokens);
    let weights = softmax(&logits)?;
    let mut token_mix = Array1::zeros(params.k());
    for (j, &t) in tokens.iter().enumerate() {
        token_mix[t] += weights[j];
    }
    let f = params.v.dot(&token_mix);
    let predicted = predict(&f);
    Ok(AttentionOutput { logits, weights, token_mix, f, predicted })
}

/// Convenience wrapper building the state for one sample.
pub fn forward_sample(params: &Params, geom: &AttentionGeometry, sample: &Sample) -> Result<AttentionOutput> {
    geom.check_sample(sample, params.k())?;
    let state = AttentionState::new(params, geom)?;
    forward(params, &state, geom, &sample.tokens)
}

/// `z = X~^T W x~_N` evaluated with the dense `W`; columns of `X~` are
/// unit-normalized first when `normalize` is set.
pub fn attention_logits(params: &Params, x_tilde: &Array2<f64>, normalize: bool) -> Result<Array1<f64>> {
    let (k, m) = (params.k(), params.m());
    if x_tilde.nrows() != k + m || x_tilde.ncols() < 1 {
        return Err(Error::Shape(format!(
            "augmented input is {:?}, expected {} rows",
            x_tilde.dim(),
            k + m
        )));
    }
    let xt = if normalize { crate::posembed::normalize_columns(x_tilde) } else { x_tilde.clone() };
    let query = xt.column(xt.ncols() - 1).to_owned();
    Ok(xt.t().dot(&params.w_dense().dot(&query)))
}

/// Dense evaluation of `V X S(X~^T W x~_N)` straight from the definition.
pub fn forward_dense(
    params: &Params,
    x: &Array2<f64>,
    x_tilde: &Array2<f64>,
    normalize: bool,
) -> Result<AttentionOutput> {
    let k = params.k();
    if x.nrows() != k || x.ncols() != x_tilde.ncols() {
        return Err(Error::Shape(format!("X is {:?}, X~ is {:?}", x.dim(), x_tilde.dim())));
    }
    if x_tilde.slice(s![..k, ..]) != *x {
        return Err(Error::Shape("X is not the top K rows of X~".into()));
    }
    let logits = attention_logits(params, x_tilde, normalize)?;
    let weights = softmax(&logits)?;
    let token_mix = x.dot(&weights);
    let f = params.v.dot(&token_mix);
    let predicted = predict(&f);
    Ok(AttentionOutput { logits, weights, token_mix, f, predicted })
}

/// Smallest index attaining the maximum of `f`.
pub fn predict(f: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in f.iter().enumerate() {
        if v > f[best] {
            best = i;
        }
    }
    best
}

/// Smallest index within `rtol * max|f|` of the maximum.
///
/// Entries that are equal in exact arithmetic can differ by rounding noise;
/// this treats them as tied.
pub fn predict_with_tolerance(f: &Array1<f64>, rtol: f64) -> usize {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cut = max - rtol * scale;
    f.iter().position(|&v| v >= cut).unwrap_or(0)
}

/// `-log(e_y^T f + eps)`.
pub fn loss_value(f: &Array1<f64>, y: usize, eps: f64) -> Result<f64> {
    let arg = loss_argument(f, y, eps)?;
    Ok(-arg.ln())
}

/// `e_y^T f + eps`, checked to be positive and finite.
pub fn loss_argument(f: &Array1<f64>, y: usize, eps: f64) -> Result<f64> {
    let fy = *f.get(y).ok_or_else(|| Error::Shape(format!("label {y} out of range for K={}", f.len())))?;
    let arg = fy + eps;
    if !arg.is_finite() {
        return Err(Error::NonFinite(format!("e_y^T f + eps = {arg}")));
    }
    if arg <= 0.0 {
        return Err(Error::LossDomain { value: arg, label: y });
    }
    Ok(arg)
}
