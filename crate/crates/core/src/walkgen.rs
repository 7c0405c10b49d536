//! Episode generation: circular random walks, the exhaustive enumerations
//! used for exact population gradients, and the two fruit question-answering
//! tasks.
//!
//! Node IDs and vocabulary tokens are stored 0-based. Anything written for
//! humans (dataset files, reports) converts to the 1-based convention.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;

/// Seeded generator used for every dataset and initialization.
pub type WalkRng = ChaCha8Rng;

/// Independent ChaCha stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> WalkRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `<s>_K` for a 0-based node: wraps any signed offset onto `0..k`.
pub fn wrap(s: i64, k: usize) -> usize {
    s.rem_euclid(k as i64) as usize
}

/// Task and embedding geometry: `k` nodes, clockwise probability `p`,
/// sequence length `n` (query slot included) and positional dimension `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub k: usize,
    pub p: f64,
    pub n: usize,
    pub m: usize,
}

impl WalkConfig {
    pub fn new(k: usize, p: f64, n: usize, m: usize) -> Result<Self> {
        let cfg = WalkConfig { k, p, n, m };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("K must be >= 2, got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if self.n < 2 {
            return Err(Error::InvalidConfig(format!("N must be >= 2, got {}", self.n)));
        }
        if self.m < self.n {
            return Err(Error::InvalidConfig(format!(
                "M must be >= N for orthogonal positions, got M={} N={}",
                self.m, self.n
            )));
        }
        Ok(())
    }

    /// Soft warnings: the analysis wants `M` on the order of `N^{3/2}`.
    pub fn warnings(&self) -> Vec<String> {
        let want = min_positional_dim(self.n);
        if self.m < want {
            vec![format!("M={} is below ceil(N^1.5)={} for N={}", self.m, want, self.n)]
        } else {
            Vec::new()
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.p == 0.0 || self.p == 1.0
    }

    /// `r` such that `N = rK + 1`, when it exists.
    pub fn period_multiple(&self) -> Option<usize> {
        let steps = self.n - 1;
        (steps.is_multiple_of(self.k) && steps >= self.k).then_some(steps / self.k)
    }

    /// Requirements of the deterministic-walk theory: `p` in {0, 1} and `N = rK + 1`.
    pub fn validate_deterministic_theory(&self) -> Result<usize> {
        self.validate()?;
        if !self.is_deterministic() {
            return Err(Error::InvalidConfig(format!(
                "deterministic mode needs p in {{0, 1}}, got {}",
                self.p
            )));
        }
        self.period_multiple().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "deterministic mode needs N = rK + 1 with r >= 1, got N={} K={}",
                self.n, self.k
            ))
        })
    }
}

/// `ceil(n^{3/2})`, computed without floating point.
pub fn min_positional_dim(n: usize) -> usize {
    let cube = (n as u128).pow(3);
    let mut r = (cube as f64).sqrt() as u128;
    while r * r < cube {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= cube {
        r -= 1;
    }
    r as usize
}

/// One walk `s_1..s_N`; the first `N-1` states are the tokens, `s_N` the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<usize>,
}

impl Episode {
    pub fn n(&self) -> usize {
        self.states.len()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.states[..self.states.len() - 1]
    }

    pub fn label(&self) -> usize {
        self.states[self.states.len() - 1]
    }

    pub fn states_one_based(&self) -> Vec<usize> {
        self.states.iter().map(|s| s + 1).collect()
    }

    /// The `K x N` matrix `X` with one-hot columns and a zero query column.
    pub fn token_matrix(&self, k: usize) -> Array2<f64> {
        one_hot_matrix(self.tokens(), k)
    }

    pub fn sample(&self) -> Sample {
        Sample { tokens: self.tokens().to_vec(), label: self.label() }
    }
}

/// One-hot columns for `tokens` followed by one zero column.
pub fn one_hot_matrix(tokens: &[usize], k: usize) -> Array2<f64> {
    let mut x = Array2::zeros((k, tokens.len() + 1));
    for (i, &t) in tokens.iter().enumerate() {
        x[[t, i]] = 1.0;
    }
    x
}

/// Walk from a uniformly drawn start.
pub fn sample_walk<R: Rng + ?Sized>(cfg: &WalkConfig, rng: &mut R) -> Result<Episode> {
    cfg.validate()?;
    let start = rng.random_range(0..cfg.k as u32) as usize;
    Ok(walk_from(cfg, start, rng))
}

/// Walk with a fixed start node (0-based).
pub fn walk_from<R: Rng + ?Sized>(cfg: &WalkConfig, start: usize, rng: &mut R) -> Episode {
    let mut states = Vec::with_capacity(cfg.n);
    states.push(start % cfg.k);
    for i in 1..cfg.n {
        let step = if rng.random::<f64>() < cfg.p { 1 } else { -1 };
        states.push(wrap(states[i - 1] as i64 + step, cfg.k));
    }
    Episode { states }
}

/// `count` independent walks from stream 0 of `seed`.
pub fn make_dataset(cfg: &WalkConfig, count: usize, seed: u64) -> Result<Vec<Episode>> {
    if count == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, 0);
    sample_walks(cfg, count, &mut rng)
}

pub fn sample_walks<R: Rng + ?Sized>(cfg: &WalkConfig, count: usize, rng: &mut R) -> Result<Vec<Episode>> {
    (0..count).map(|_| sample_walk(cfg, rng)).collect()
}

/// The `K` equiprobable walks of a deterministic chain, indexed by start node.
pub fn enumerate_deterministic(cfg: &WalkConfig) -> Result<Vec<(Episode, f64)>> {
    cfg.validate()?;
    if !cfg.is_deterministic() {
        return Err(Error::InvalidConfig(format!(
            "enumeration of deterministic walks needs p in {{0, 1}}, got {}",
            cfg.p
        )));
    }
    let step: i64 = if cfg.p == 1.0 { 1 } else { -1 };
    let weight = 1.0 / cfg.k as f64;
    Ok((0..cfg.k)
        .map(|start| {
            let states = (0..cfg.n).map(|i| wrap(start as i64 + step * i as i64, cfg.k)).collect();
            (Episode { states }, weight)
        })
        .collect())
}

/// Every walk with nonzero probability together with that probability.
///
/// There are `K * 2^(N-1)` paths for `0 < p < 1`, so `max_paths` guards the
/// enumeration.
pub fn enumerate_all(cfg: &WalkConfig, max_paths: usize) -> Result<Vec<(Episode, f64)>> {
    cfg.validate()?;
    if cfg.is_deterministic() {
        return enumerate_deterministic(cfg);
    }
    let steps = cfg.n - 1;
    let total = (cfg.k as u128) << steps.min(120);
    if steps >= 64 || total > max_paths as u128 {
        return Err(Error::Precondition(format!(
            "exhaustive enumeration would produce {} paths (cap {})",
            total, max_paths
        )));
    }
    let mut out = Vec::with_capacity(total as usize);
    for start in 0..cfg.k {
        for bits in 0u64..(1u64 << steps) {
            let mut states = Vec::with_capacity(cfg.n);
            states.push(start);
            let mut weight = 1.0 / cfg.k as f64;
            for i in 0..steps {
                let clockwise = (bits >> i) & 1 == 1;
                let (delta, prob) = if clockwise { (1, cfg.p) } else { (-1, 1.0 - cfg.p) };
                weight *= prob;
                states.push(wrap(states[i] as i64 + delta, cfg.k));
            }
            out.push((Episode { states }, weight));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Question answering
// ---------------------------------------------------------------------------

/// The 19-word vocabulary shared by both fruit tasks.
pub const QA_WORDS: [&str; 19] = [
    "apple", "orange", "Based", "on", "the", "which", "type", "of", "fruit", "list", "appears",
    "most", "frequently", "sentence", "I", "prefer", "an", "to", "do",
];

/// Ordered vocabulary with 1-based indices, as printed in reports.
#[derive(Debug, Clone, Copy, Default)]
pub struct QaVocabulary;

impl QaVocabulary {
    pub fn len(&self) -> usize {
        QA_WORDS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// 1-based index of `word`.
    pub fn index(&self, word: &str) -> Option<usize> {
        QA_WORDS.iter().position(|w| *w == word).map(|i| i + 1)
    }

    /// Word at 1-based `index`.
    pub fn word(&self, index: usize) -> Option<&'static str> {
        index.checked_sub(1).and_then(|i| QA_WORDS.get(i).copied())
    }

    /// 0-based embedding row of `word`.
    pub fn token(&self, word: &str) -> Option<usize> {
        self.index(word).map(|i| i - 1)
    }
}

fn tok(word: &str) -> usize {
    QaVocabulary.token(word).expect("word is in the fixed vocabulary")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QaTask {
    /// Majority fruit in a five-item list.
    Task1,
    /// Preferred fruit in "I prefer an X to an Y".
    Task2,
}

impl QaTask {
    /// Sequence length including the zero query column.
    pub fn seq_len(self) -> usize {
        match self {
            QaTask::Task1 => 17,
            QaTask::Task2 => 19,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaEpisode {
    pub task: QaTask,
    /// 0-based vocabulary tokens of the question.
    pub words: Vec<usize>,
    /// 0-based vocabulary token of the answer.
    pub label: usize,
}

impl QaEpisode {
    pub fn token_matrix(&self) -> Array2<f64> {
        one_hot_matrix(&self.words, QA_WORDS.len())
    }

    pub fn sample(&self) -> Sample {
        Sample { tokens: self.words.clone(), label: self.label }
    }

    pub fn text(&self) -> String {
        self.words.iter().map(|&w| QA_WORDS[w]).collect::<Vec<_>>().join(" ")
    }
}

/// Task 1 question for a given five-fruit list.
pub fn task1_question(list: &[&str; 5]) -> QaEpisode {
    let mut words: Vec<usize> = ["Based", "on", "the", "list"].iter().map(|w| tok(w)).collect();
    words.extend(list.iter().map(|w| tok(w)));
    words.extend(
        ["which", "type", "of", "fruit", "appears", "most", "frequently"].iter().map(|w| tok(w)),
    );
    let apples = list.iter().filter(|w| **w == "apple").count();
    let label = if apples * 2 > list.len() { tok("apple") } else { tok("orange") };
    QaEpisode { task: QaTask::Task1, words, label }
}

/// Task 2 question "I prefer an `preferred` to an `other`".
pub fn task2_question(preferred: &str, other: &str) -> QaEpisode {
    let words = [
        "Based", "on", "the", "sentence", "I", "prefer", "an", preferred, "to", "an", other,
        "which", "type", "of", "fruit", "do", "I", "prefer",
    ]
    .iter()
    .map(|w| tok(w))
    .collect();
    QaEpisode { task: QaTask::Task2, words, label: tok(preferred) }
}

/// All distinct questions of a task: 32 for Task 1, 2 for Task 2.
pub fn qa_questions(task: QaTask) -> Vec<QaEpisode> {
    match task {
        QaTask::Task1 => (0u32..32)
            .map(|bits| {
                let mut list = ["apple"; 5];
                for (i, slot) in list.iter_mut().enumerate() {
                    if (bits >> (4 - i)) & 1 == 1 {
                        *slot = "orange";
                    }
                }
                task1_question(&list)
            })
            .collect(),
        QaTask::Task2 => vec![task2_question("apple", "orange"), task2_question("orange", "apple")],
    }
}

/// One question drawn uniformly from the task's question set.
pub fn qa_sample<R: Rng + ?Sized>(task: QaTask, rng: &mut R) -> QaEpisode {
    let questions = qa_questions(task);
    let i = rng.random_range(0..questions.len() as u32) as usize;
    questions[i].clone()
}

pub fn make_qa_dataset<R: Rng + ?Sized>(task: QaTask, count: usize, rng: &mut R) -> Result<Vec<QaEpisode>> {
    if count == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    Ok((0..count).map(|_| qa_sample(task, rng)).collect())
}

/// Largest distance between label-conditional mean token averages.
///
/// Each question contributes its token average `(1/(N-1)) * sum_i x_i`; the
/// questions of one label class are averaged with equal weight. Zero means
/// the uniform-attention token average carries no label information.
pub fn qa_symmetry_statistic(task: QaTask) -> f64 {
    let vocab = QA_WORDS.len();
    let questions = qa_questions(task);
    let mut labels: Vec<usize> = questions.iter().map(|q| q.label).collect();
    labels.sort_unstable();
    labels.dedup();

    let class_means: Vec<Vec<f64>> = labels
        .iter()
        .map(|&label| {
            let members: Vec<&QaEpisode> = questions.iter().filter(|q| q.label == label).collect();
            let mut counts = vec![0.0; vocab];
            for q in &members {
                for &w in &q.words {
                    counts[w] += 1.0;
                }
            }
            let denom = (members.len() * members[0].words.len()) as f64;
            counts.iter().map(|c| c / denom).collect()
        })
        .collect();

    let mut best = 0.0f64;
    for a in 0..class_means.len() {
        for b in a + 1..class_means.len() {
            let d: f64 = class_means[a]
                .iter()
                .zip(&class_means[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            best = best.max(d);
        }
    }
    best
}
