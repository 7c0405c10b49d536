//! Full-batch gradient descent with per-iteration metrics, parameter
//! snapshots and the closed-form first- and second-step oracles.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{batch_grad, batch_grad_with_state, GradPair};
use crate::markov::TransitionMatrix;
use crate::model::{forward, predict_with_tolerance, AttentionGeometry, AttentionState, InitMode, Params, Sample};
use crate::walkgen::{
    enumerate_all, enumerate_deterministic, make_qa_dataset, sample_walks, stream_rng, QaTask, WalkConfig, WalkRng,
    QA_WORDS,
};

/// RNG stream indices derived from the run seed.
pub const TRAIN_STREAM: u64 = 0;
pub const TEST_STREAM: u64 = 1;
pub const INIT_STREAM: u64 = 2;

/// Guard against runaway iteration counts.
pub const MAX_ITERATIONS: usize = 1_000_000;

/// Default cap on exhaustively enumerated walks.
pub const DEFAULT_MAX_PATHS: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Walk(WalkConfig),
    Qa { task: QaTask, m: usize },
}

impl TaskConfig {
    pub fn k(&self) -> usize {
        match self {
            TaskConfig::Walk(w) => w.k,
            TaskConfig::Qa { .. } => QA_WORDS.len(),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            TaskConfig::Walk(w) => w.n,
            TaskConfig::Qa { task, .. } => task.seq_len(),
        }
    }

    pub fn m(&self) -> usize {
        match self {
            TaskConfig::Walk(w) => w.m,
            TaskConfig::Qa { m, .. } => *m,
        }
    }

    pub fn walk(&self) -> Option<&WalkConfig> {
        match self {
            TaskConfig::Walk(w) => Some(w),
            TaskConfig::Qa { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradMode {
    /// Full batch over `train_size` sampled sequences, fixed unless `resample`.
    Empirical { train_size: usize, resample: bool },
    /// Exact expectation over the `K` walks of a deterministic chain.
    PopulationDeterministic,
    /// Exact expectation over every walk (small `N` only).
    PopulationExhaustive { max_paths: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskConfig,
    pub eta: f64,
    pub eps: f64,
    pub iterations: usize,
    pub init: InitMode,
    pub seed: u64,
    pub grad_mode: GradMode,
    pub test_size: usize,
    pub normalize_attention: bool,
    /// Iterations to snapshot; `None` means `{0, 1, 2, 4, 8, ..., T}`.
    pub snapshots: Option<Vec<usize>>,
    /// Retained for configuration compatibility: reductions always run in a
    /// fixed order, so runs are bit-reproducible either way.
    pub deterministic: bool,
    /// Relative tie tolerance of the prediction rule.
    pub tie_rtol: f64,
    /// Track `W22` in the span of `P` and apply `P^T P = (M+1)/2 I`
    /// analytically, so symmetric states stay bitwise symmetric.
    #[serde(default)]
    pub exact_gram: bool,
}

impl TrainConfig {
    /// Zero-init full-batch walk run with 1000 train / 1000 test sequences.
    pub fn walk(walk: WalkConfig) -> Self {
        TrainConfig {
            task: TaskConfig::Walk(walk),
            eta: 1.0,
            eps: 0.1,
            iterations: 50,
            init: InitMode::Zero,
            seed: 0,
            grad_mode: GradMode::Empirical { train_size: 1000, resample: false },
            test_size: 1000,
            normalize_attention: false,
            snapshots: None,
            deterministic: true,
            tie_rtol: 1e-12,
            exact_gram: false,
        }
    }

    /// Question-answering run with Gaussian init and normalized attention.
    pub fn qa(task: QaTask, m: usize) -> Self {
        TrainConfig {
            task: TaskConfig::Qa { task, m },
            eta: 0.1,
            eps: 0.1,
            iterations: 100,
            init: InitMode::Gaussian { sigma: 0.01 },
            normalize_attention: true,
            ..TrainConfig::walk(WalkConfig { k: 2, p: 0.5, n: 2, m: 2 })
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        if self.iterations > MAX_ITERATIONS {
            return Err(Error::InvalidConfig(format!(
                "iterations {} exceed the cap {}",
                self.iterations, MAX_ITERATIONS
            )));
        }
        if self.test_size == 0 {
            return Err(Error::InvalidConfig("test_size must be >= 1".into()));
        }
        if let InitMode::Gaussian { sigma } = self.init {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
            }
        }
        if !(self.tie_rtol >= 0.0) {
            return Err(Error::InvalidConfig(format!("tie_rtol must be >= 0, got {}", self.tie_rtol)));
        }
        match (&self.task, self.grad_mode) {
            (TaskConfig::Walk(w), GradMode::PopulationDeterministic) => {
                w.validate_deterministic_theory()?;
            }
            (TaskConfig::Walk(w), GradMode::PopulationExhaustive { .. }) => w.validate()?,
            (TaskConfig::Walk(w), GradMode::Empirical { train_size, .. }) => {
                w.validate()?;
                if train_size == 0 {
                    return Err(Error::InvalidConfig("train_size must be >= 1".into()));
                }
            }
            (TaskConfig::Qa { task, m }, GradMode::Empirical { train_size, .. }) => {
                if *m < task.seq_len() {
                    return Err(Error::InvalidConfig(format!("M={} is below N={}", m, task.seq_len())));
                }
                if train_size == 0 {
                    return Err(Error::InvalidConfig("train_size must be >= 1".into()));
                }
            }
            (TaskConfig::Qa { .. }, _) => {
                return Err(Error::InvalidConfig("QA tasks train on empirical batches only".into()));
            }
        }
        Ok(())
    }

    /// Iterations at which parameters are snapshotted.
    pub fn snapshot_iterations(&self) -> Vec<usize> {
        let t = self.iterations;
        let mut its: Vec<usize> = match &self.snapshots {
            Some(list) => list.iter().copied().filter(|&i| i <= t).collect(),
            None => {
                let mut v = vec![0, 1, 2];
                let mut pow = 4;
                while pow < t {
                    v.push(pow);
                    pow *= 2;
                }
                v.push(t);
                v.into_iter().filter(|&i| i <= t).collect()
            }
        };
        its.sort_unstable();
        its.dedup();
        its
    }

    pub fn geometry(&self) -> Result<AttentionGeometry> {
        let geom = AttentionGeometry::new(self.task.m(), self.task.n(), self.normalize_attention)?;
        Ok(if self.exact_gram { geom.with_exact_gram() } else { geom })
    }
}

/// Samples with probability weights summing to one.
#[derive(Debug, Clone)]
pub struct WeightedSet {
    pub samples: Vec<Sample>,
    pub weights: Vec<f64>,
}

impl WeightedSet {
    pub fn uniform(samples: Vec<Sample>) -> Self {
        let w = 1.0 / samples.len() as f64;
        let weights = vec![w; samples.len()];
        WeightedSet { samples, weights }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn sample_walk_set<R: rand::Rng + ?Sized>(w: &WalkConfig, count: usize, rng: &mut R) -> Result<WeightedSet> {
    Ok(WeightedSet::uniform(sample_walks(w, count, rng)?.iter().map(|e| e.sample()).collect()))
}

fn sample_qa_set<R: rand::Rng + ?Sized>(task: QaTask, count: usize, rng: &mut R) -> Result<WeightedSet> {
    Ok(WeightedSet::uniform(make_qa_dataset(task, count, rng)?.iter().map(|e| e.sample()).collect()))
}

fn sample_task_set<R: rand::Rng + ?Sized>(task: &TaskConfig, count: usize, rng: &mut R) -> Result<WeightedSet> {
    match task {
        TaskConfig::Walk(w) => sample_walk_set(w, count, rng),
        TaskConfig::Qa { task, .. } => sample_qa_set(*task, count, rng),
    }
}

fn enumerated_set(list: Vec<(crate::walkgen::Episode, f64)>) -> WeightedSet {
    let (samples, weights) = list.into_iter().map(|(e, w)| (e.sample(), w)).unzip();
    WeightedSet { samples, weights }
}

/// The `K` equiprobable walks of a deterministic chain.
pub fn deterministic_population(w: &WalkConfig) -> Result<WeightedSet> {
    Ok(enumerated_set(enumerate_deterministic(w)?))
}

/// Every walk with its probability.
pub fn exhaustive_population(w: &WalkConfig, max_paths: usize) -> Result<WeightedSet> {
    Ok(enumerated_set(enumerate_all(w, max_paths)?))
}

/// Parameters at `t = 0` drawn from stream [`INIT_STREAM`] of the seed.
pub fn init_params(cfg: &TrainConfig) -> Result<Params> {
    let mut rng = stream_rng(cfg.seed, INIT_STREAM);
    Params::init(cfg.init, cfg.task.k(), cfg.task.m(), &mut rng)
}

/// `theta - eta * grad`; `W11` and `W21` are untouched.
pub fn step(params: &Params, grad: &GradPair, eta: f64) -> Result<Params> {
    let mut next = params.clone();
    step_in_place(&mut next, grad, eta)?;
    Ok(next)
}

pub fn step_in_place(params: &mut Params, grad: &GradPair, eta: f64) -> Result<()> {
    let (k, m) = (params.k(), params.m());
    if grad.v.dim() != (k, k) || grad.w12_left.len() != k || grad.w22_left.len() != m || grad.query.len() != m {
        return Err(Error::Shape("gradient does not match parameter shapes".into()));
    }
    params.v.scaled_add(-eta, &grad.v);
    for (i, mut row) in params.w12.rows_mut().into_iter().enumerate() {
        let a = grad.w12_left[i];
        if a != 0.0 {
            row.scaled_add(-eta * a, &grad.query);
        }
    }
    for (i, mut row) in params.w22.rows_mut().into_iter().enumerate() {
        let b = grad.w22_left[i];
        if b != 0.0 {
            row.scaled_add(-eta * b, &grad.query);
        }
    }
    Ok(())
}

/// `eta/(eps N K) * sum_{R=1}^{N-1} (Pi^T)^R`, the first `V` under zero init.
pub fn first_step_oracle_v(w: &WalkConfig, eta: f64, eps: f64) -> Result<Array2<f64>> {
    w.validate()?;
    let pi = TransitionMatrix::new(w.k, w.p)?;
    let sum = pi.power_sum(1, w.n - 1).t().to_owned();
    Ok(sum * (eta / (eps * (w.n * w.k) as f64)))
}

/// `eta r/(eps N K) * 1` for deterministic chains with `N = rK + 1`.
pub fn first_step_oracle_v_deterministic(w: &WalkConfig, eta: f64, eps: f64) -> Result<Array2<f64>> {
    let r = w.validate_deterministic_theory()?;
    let value = eta * r as f64 / (eps * (w.n * w.k) as f64);
    Ok(Array2::from_elem((w.k, w.k), value))
}

/// Second-step `W12`, `W22` for a zero-init deterministic run without
/// attention normalization, given the recorded `l'` at `t = 0` and `t = 1`.
///
/// `W12 = l'_1 l'_0 eta^2 r^2/(N^3 K) 1 p_N^T`,
/// `W22 = l'_1 l'_0 (eta^2 r/(N^3 K) sum_{i<N} p_i - eta^2 r^2/N^3 p_N) p_N^T`.
pub fn second_step_oracle_w_deterministic(
    w: &WalkConfig,
    eta: f64,
    lprime0: f64,
    lprime1: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let r = w.validate_deterministic_theory()? as f64;
    let (n, k) = (w.n as f64, w.k as f64);
    let pos = crate::posembed::PositionalMatrix::build(w.m, w.n)?;
    let pn = pos.column(w.n - 1);
    let sum_p: Array1<f64> = (0..w.n - 1).map(|i| pos.column(i)).fold(Array1::zeros(w.m), |a, c| a + c);
    let ll = lprime0 * lprime1;
    let left12 = Array1::from_elem(w.k, ll * eta * eta * r * r / (n * n * n * k));
    let left22 = (sum_p * (eta * eta * r / (n * n * n * k)) - &pn * (eta * eta * r * r / (n * n * n))) * ll;
    let outer = |a: &Array1<f64>| {
        a.view().insert_axis(ndarray::Axis(1)).dot(&pn.view().insert_axis(ndarray::Axis(0)))
    };
    Ok((outer(&left12), outer(&left22)))
}

/// Exact gradient over the `K` deterministic walks.
pub fn population_grad_deterministic(params: &Params, cfg: &TrainConfig) -> Result<GradPair> {
    let w = cfg.task.walk().ok_or_else(|| Error::Precondition("population gradients need a walk task".into()))?;
    w.validate_deterministic_theory()?;
    let set = deterministic_population(w)?;
    Ok(batch_grad(params, &cfg.geometry()?, &set.samples, &set.weights, cfg.eps)?.grad)
}

/// Uniform average of per-example gradients.
pub fn empirical_grad(params: &Params, geom: &AttentionGeometry, dataset: &[Sample], eps: f64) -> Result<GradPair> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let weights = vec![1.0 / dataset.len() as f64; dataset.len()];
    Ok(batch_grad(params, geom, dataset, &weights, eps)?.grad)
}

/// Evaluation statistics over a weighted set.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    /// `KL(true || model)`; `NaN` without a transition matrix.
    pub kl: f64,
    /// `|f/|f|_2 - Pi^T x_{N-1}|_2`, averaged.
    pub f_dist: f64,
    /// `|f/|f|_2 - Pi^T x_{N-1} / |Pi^T x_{N-1}|_2|_2`, averaged.
    pub f_dir_dist: f64,
    /// Mean weight on the parent position `N-1`.
    pub attn_parent: f64,
    /// Mean of `max_{j != N-1} S_j`.
    pub attn_other_max: f64,
    /// Smallest parent weight over the set.
    pub attn_parent_min: f64,
    /// Largest non-parent weight over the set.
    pub attn_other_sup: f64,
}

/// Floor added to the clamped output before normalizing it to a distribution.
pub const KL_FLOOR: f64 = 1e-12;

/// `KL(q || clamp(f, 0) + floor, renormalized)`.
pub fn kl_true_model(truth: &Array1<f64>, f: &Array1<f64>) -> f64 {
    let model: Array1<f64> = f.mapv(|v| v.max(0.0) + KL_FLOOR);
    let total = model.sum();
    truth
        .iter()
        .zip(&model)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, m)| t * (t.ln() - (m / total).ln()))
        .sum()
}

#[derive(Default, Clone, Copy)]
struct EvalAcc {
    loss: f64,
    correct: f64,
    kl: f64,
    f_dist: f64,
    f_dir: f64,
    parent: f64,
    other: f64,
    parent_min: f64,
    other_sup: f64,
}

/// Metrics of `params` on `set`. `pi` enables the walk-specific fields.
pub fn evaluate(
    params: &Params,
    geom: &AttentionGeometry,
    set: &WeightedSet,
    pi: Option<&TransitionMatrix>,
    eps: f64,
    tie_rtol: f64,
) -> Result<EvalStats> {
    let state = AttentionState::new(params, geom)?;
    evaluate_with_state(params, &state, geom, set, pi, eps, tie_rtol)
}

/// [`evaluate`] against a precomputed attention state.
pub fn evaluate_with_state(
    params: &Params,
    state: &AttentionState,
    geom: &AttentionGeometry,
    set: &WeightedSet,
    pi: Option<&TransitionMatrix>,
    eps: f64,
    tie_rtol: f64,
) -> Result<EvalStats> {
    if set.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let n = geom.n();
    let parent = n - 2;
    const CHUNK: usize = 64;
    let partials: Vec<EvalAcc> = set
        .samples
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = EvalAcc { parent_min: f64::INFINITY, other_sup: f64::NEG_INFINITY, ..Default::default() };
            for (offset, sample) in chunk.iter().enumerate() {
                let i = c * CHUNK + offset;
                let w = set.weights[i];
                geom.check_sample(sample, params.k()).map_err(|e| e.at_example(i))?;
                let out = forward(params, state, geom, &sample.tokens).map_err(|e| e.at_example(i))?;
                let arg = out.f[sample.label] + eps;
                acc.loss += w * if arg > 0.0 { -arg.ln() } else { f64::INFINITY };
                if predict_with_tolerance(&out.f, tie_rtol) == sample.label {
                    acc.correct += w;
                }
                let s_parent = out.weights[parent];
                let s_other = out
                    .weights
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != parent)
                    .map(|(_, &s)| s)
                    .fold(0.0, f64::max);
                acc.parent += w * s_parent;
                acc.other += w * s_other;
                acc.parent_min = acc.parent_min.min(s_parent);
                acc.other_sup = acc.other_sup.max(s_other);
                if let Some(pi) = pi {
                    let truth = pi.matrix().row(sample.tokens[parent]).to_owned();
                    acc.kl += w * kl_true_model(&truth, &out.f);
                    let norm = out.f.dot(&out.f).sqrt();
                    let tnorm = truth.dot(&truth).sqrt();
                    let (fd, fdir) = if norm > 0.0 {
                        let unit = &out.f / norm;
                        let d = &unit - &truth;
                        let e = &unit - &(&truth / tnorm);
                        (d.dot(&d).sqrt(), e.dot(&e).sqrt())
                    } else {
                        (f64::NAN, f64::NAN)
                    };
                    acc.f_dist += w * fd;
                    acc.f_dir += w * fdir;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut t = EvalAcc { parent_min: f64::INFINITY, other_sup: f64::NEG_INFINITY, ..Default::default() };
    for p in &partials {
        t.loss += p.loss;
        t.correct += p.correct;
        t.kl += p.kl;
        t.f_dist += p.f_dist;
        t.f_dir += p.f_dir;
        t.parent += p.parent;
        t.other += p.other;
        t.parent_min = t.parent_min.min(p.parent_min);
        t.other_sup = t.other_sup.max(p.other_sup);
    }
    let walk_only = |v: f64| if pi.is_some() { v } else { f64::NAN };
    Ok(EvalStats {
        loss: t.loss,
        accuracy: t.correct,
        kl: walk_only(t.kl),
        f_dist: walk_only(t.f_dist),
        f_dir_dist: walk_only(t.f_dir),
        attn_parent: t.parent,
        attn_other_max: t.other,
        attn_parent_min: t.parent_min,
        attn_other_sup: t.other_sup,
    })
}

/// `beta = <V, Pi^T>_F / |Pi^T|_F^2`, `gamma = |V - beta Pi^T|_max`.
pub fn decompose_v(v: &Array2<f64>, pi: &TransitionMatrix) -> Result<(f64, f64)> {
    let pt = pi.matrix().t();
    if v.dim() != pt.dim() {
        return Err(Error::Shape(format!("V is {:?}, Pi is {:?}", v.dim(), pt.dim())));
    }
    let inner: f64 = v.iter().zip(pt.iter()).map(|(a, b)| a * b).sum();
    let norm2: f64 = pt.iter().map(|b| b * b).sum();
    let beta = inner / norm2;
    let gamma = v.iter().zip(pt.iter()).map(|(a, b)| (a - beta * b).abs()).fold(0.0, f64::max);
    Ok((beta, gamma))
}

/// `|V/|V|_F - Pi^T/|Pi^T|_F|_F`; `NaN` for `V = 0`.
pub fn v_dist(v: &Array2<f64>, pi: &TransitionMatrix) -> f64 {
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vn == 0.0 {
        return f64::NAN;
    }
    let pt = pi.matrix().t();
    let pn = pt.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().zip(pt.iter()).map(|(a, b)| (a / vn - b / pn).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsRow {
    pub iter: usize,
    /// Mean training loss at this iteration's parameters.
    pub loss: f64,
    pub accuracy: f64,
    pub kl: f64,
    pub v_dist: f64,
    pub f_dist: f64,
    pub attn_parent: f64,
    pub attn_other_max: f64,
    pub beta: f64,
    pub gamma: f64,
    pub f_dir_dist: f64,
    pub attn_parent_min: f64,
    pub attn_other_sup: f64,
    /// Weighted mean of `l'` over the training batch.
    pub lprime: f64,
}

/// Structure residuals tracked in population-deterministic runs.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SymmetryRow {
    pub iter: usize,
    /// `(max V - min V) / max |V|` (0 for `V = 0`).
    pub v_uniformity: f64,
    /// Largest spread of `S_1..S_{N-1}` over the enumerated walks.
    pub attention_uniformity: f64,
    /// Largest spread of the logits `z_1..z_{N-1}` over the enumerated walks.
    pub logit_uniformity: f64,
    /// Largest entrywise difference between rows of `W12`.
    pub w12_row_spread: f64,
}

pub fn symmetry_row(iter: usize, params: &Params, geom: &AttentionGeometry, set: &WeightedSet) -> Result<SymmetryRow> {
    let state = AttentionState::new(params, geom)?;
    symmetry_row_with_state(iter, params, &state, geom, set)
}

pub fn symmetry_row_with_state(
    iter: usize,
    params: &Params,
    state: &AttentionState,
    geom: &AttentionGeometry,
    set: &WeightedSet,
) -> Result<SymmetryRow> {
    let vmax = params.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vmin = params.v.iter().copied().fold(f64::INFINITY, f64::min);
    let vabs = params.v.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let v_uniformity = if vabs > 0.0 { (vmax - vmin) / vabs } else { 0.0 };
    let n = geom.n();
    let spread = |x: &[f64]| {
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    };
    let mut attention_uniformity = 0.0f64;
    let mut logit_uniformity = 0.0f64;
    for s in &set.samples {
        let out = forward(params, state, geom, &s.tokens)?;
        attention_uniformity = attention_uniformity.max(spread(&out.weights.as_slice().unwrap()[..n - 1]));
        logit_uniformity = logit_uniformity.max(spread(&out.logits.as_slice().unwrap()[..n - 1]));
    }
    let mut w12_row_spread = 0.0f64;
    for col in params.w12.columns() {
        w12_row_spread = w12_row_spread.max(spread(&col.to_vec()));
    }
    Ok(SymmetryRow { iter, v_uniformity, attention_uniformity, logit_uniformity, w12_row_spread })
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iteration: usize,
    pub params: Params,
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub seed: u64,
    pub train_stream: u64,
    pub test_stream: u64,
    pub init_stream: u64,
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub config: TrainConfig,
    pub rows: Vec<MetricsRow>,
    pub snapshots: Vec<Snapshot>,
    pub seeds: Seeds,
    /// Filled in population-deterministic runs.
    pub symmetry: Vec<SymmetryRow>,
    pub warnings: Vec<String>,
    pub final_params: Params,
}

impl TrainTrace {
    pub fn snapshot(&self, iteration: usize) -> Option<&Params> {
        self.snapshots.iter().find(|s| s.iteration == iteration).map(|s| &s.params)
    }

    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("a trace always holds the t = 0 row")
    }
}

/// Training and evaluation sets implied by the configuration.
pub struct RunData {
    pub train: WeightedSet,
    pub test: WeightedSet,
    train_rng: WalkRng,
}

pub fn build_data(cfg: &TrainConfig) -> Result<RunData> {
    let mut train_rng = stream_rng(cfg.seed, TRAIN_STREAM);
    let mut test_rng = stream_rng(cfg.seed, TEST_STREAM);
    let (train, test) = match (&cfg.task, cfg.grad_mode) {
        (TaskConfig::Walk(w), GradMode::PopulationDeterministic) => {
            let pop = deterministic_population(w)?;
            (pop.clone(), pop)
        }
        (TaskConfig::Walk(w), GradMode::PopulationExhaustive { max_paths }) => {
            let pop = exhaustive_population(w, max_paths)?;
            (pop.clone(), pop)
        }
        (task, GradMode::Empirical { train_size, .. }) => {
            let train = sample_task_set(task, train_size, &mut train_rng)?;
            let test = sample_task_set(task, cfg.test_size, &mut test_rng)?;
            (train, test)
        }
        (TaskConfig::Qa { .. }, _) => {
            return Err(Error::InvalidConfig("QA tasks train on empirical batches only".into()));
        }
    };
    Ok(RunData { train, test, train_rng })
}

/// Runs `T` gradient steps, recording metrics for `t = 0..=T`.
pub fn train(cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let data = build_data(cfg)?;
    let params = init_params(cfg)?;
    train_from(cfg, params, data)
}

/// Runs training from given parameters and data.
pub fn train_from(cfg: &TrainConfig, mut params: Params, mut data: RunData) -> Result<TrainTrace> {
    cfg.validate()?;
    let geom = cfg.geometry()?;
    let pi = match cfg.task.walk() {
        Some(w) => Some(TransitionMatrix::new(w.k, w.p)?),
        None => None,
    };
    let mut warnings = cfg.task.walk().map(|w| w.warnings()).unwrap_or_default();
    if cfg.task.m() < crate::walkgen::min_positional_dim(cfg.task.n()) && cfg.task.walk().is_none() {
        warnings.push(format!(
            "M={} is below ceil(N^1.5)={}",
            cfg.task.m(),
            crate::walkgen::min_positional_dim(cfg.task.n())
        ));
    }
    let snapshot_its = cfg.snapshot_iterations();
    let track_symmetry = matches!(cfg.grad_mode, GradMode::PopulationDeterministic);
    let resample = matches!(cfg.grad_mode, GradMode::Empirical { resample: true, .. });

    let mut rows = Vec::with_capacity(cfg.iterations + 1);
    let mut snapshots = Vec::new();
    let mut symmetry = Vec::new();
    // Exact-Gram mode: W22 = W22_0 + P span q^T, logits P^T W22_0 q + (M+1)/2 |q|^2 span.
    let mut span = geom.exact_gram.then(|| {
        let base = geom.pos.matrix().t().dot(&params.w22.dot(&geom.query));
        (base, Array1::<f64>::zeros(geom.n()))
    });
    for t in 0..=cfg.iterations {
        if resample && t > 0 {
            data.train = sample_task_set(&cfg.task, data.train.len(), &mut data.train_rng)?;
        }
        let state = match &span {
            Some((base, coeff)) => AttentionState::from_span(&params, &geom, base, coeff)?,
            None => AttentionState::new(&params, &geom)?,
        };
        let batch = batch_grad_with_state(&params, &state, &geom, &data.train.samples, &data.train.weights, cfg.eps)
            .map_err(|e| e.at_iteration(t))?;
        let stats = evaluate_with_state(&params, &state, &geom, &data.test, pi.as_ref(), cfg.eps, cfg.tie_rtol)
            .map_err(|e| e.at_iteration(t))?;
        let (vd, beta, gamma) = match &pi {
            Some(pi) => {
                let (b, g) = decompose_v(&params.v, pi)?;
                (v_dist(&params.v, pi), b, g)
            }
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        rows.push(MetricsRow {
            iter: t,
            loss: batch.loss,
            accuracy: stats.accuracy,
            kl: stats.kl,
            v_dist: vd,
            f_dist: stats.f_dist,
            attn_parent: stats.attn_parent,
            attn_other_max: stats.attn_other_max,
            beta,
            gamma,
            f_dir_dist: stats.f_dir_dist,
            attn_parent_min: stats.attn_parent_min,
            attn_other_sup: stats.attn_other_sup,
            lprime: batch.lprime,
        });
        if track_symmetry {
            symmetry.push(symmetry_row_with_state(t, &params, &state, &geom, &data.train)?);
        }
        if snapshot_its.binary_search(&t).is_ok() {
            snapshots.push(Snapshot { iteration: t, params: params.clone() });
        }
        if t == cfg.iterations {
            break;
        }
        step_in_place(&mut params, &batch.grad, cfg.eta)?;
        if let Some((_, coeff)) = span.as_mut() {
            coeff.scaled_add(-cfg.eta, &batch.pos_coeff);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after the update".into()).at_iteration(t + 1));
        }
    }
    Ok(TrainTrace {
        config: cfg.clone(),
        rows,
        snapshots,
        seeds: Seeds {
            seed: cfg.seed,
            train_stream: TRAIN_STREAM,
            test_stream: TEST_STREAM,
            init_stream: INIT_STREAM,
        },
        symmetry,
        warnings,
        final_params: params,
    })
}
