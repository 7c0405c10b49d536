//! Executable pass/fail reports for the training-dynamics claims.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::markov::{opt_accuracy, TransitionMatrix};
use crate::model::{AttentionGeometry, AttentionState, Params};
use crate::trainer::{
    first_step_oracle_v, second_step_oracle_w_deterministic, GradMode, TrainTrace, WeightedSet,
};
use crate::walkgen::WalkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    InsufficientData,
}

impl Status {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub status: Status,
    pub value: f64,
    pub threshold: String,
}

impl CheckItem {
    fn new(name: &str, ok: bool, value: f64, threshold: String) -> Self {
        CheckItem { name: name.into(), status: Status::from_bool(ok), value, threshold }
    }

    fn insufficient(name: &str, threshold: String) -> Self {
        CheckItem { name: name.into(), status: Status::InsufficientData, value: f64::NAN, threshold }
    }
}

fn passed(items: &[CheckItem]) -> bool {
    items.iter().all(|i| i.status != Status::Fail)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Thresholds {
    pub tol_acc: f64,
    /// Bound on the final direction error of `f`.
    pub tol_f: f64,
    pub slope_lo: f64,
    pub slope_hi: f64,
    /// First iteration of the `v_dist` rate-fit window.
    pub fit_start: usize,
    pub attn_parent: f64,
    pub attn_other: f64,
    /// Attention and trend checks start after this iteration.
    pub burn_in: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tol_acc: 0.03,
            tol_f: 0.2,
            slope_lo: -0.65,
            slope_hi: -0.35,
            fit_start: 8,
            attn_parent: 0.99,
            attn_other: 0.01,
            burn_in: 2,
        }
    }
}

/// Largest `(class max - class min)` over the classes `i - j mod K`.
pub fn toeplitz_check(v: &Array2<f64>) -> Result<f64> {
    let k = v.nrows();
    if v.ncols() != k {
        return Err(Error::Shape(format!("V must be square, got {:?}", v.dim())));
    }
    let mut hi = vec![f64::NEG_INFINITY; k];
    let mut lo = vec![f64::INFINITY; k];
    for ((i, j), &x) in v.indexed_iter() {
        let c = (i + k - j) % k;
        hi[c] = hi[c].max(x);
        lo[c] = lo[c].min(x);
    }
    Ok(hi.iter().zip(&lo).map(|(h, l)| h - l).fold(0.0, f64::max))
}

/// Whether every entry attaining `max V` lies on the band expected for `p`:
/// `i = j + 1` for `p > 1/2`, `i = j - 1` for `p < 1/2`, either for `p = 1/2`.
pub fn band_argmax_check(v: &Array2<f64>, p: f64) -> bool {
    let k = v.nrows();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * max.abs();
    v.indexed_iter().filter(|(_, &x)| x >= max - tol).all(|((i, j), _)| on_band(i, j, k, p))
}

fn on_band(i: usize, j: usize, k: usize, p: f64) -> bool {
    let up = i == (j + 1) % k;
    let down = i == (j + k - 1) % k;
    if p > 0.5 {
        up
    } else if p < 0.5 {
        down
    } else {
        up || down
    }
}

/// Whether each column's largest entries sit on the circulant bands: the
/// top entry on the band expected for `p`, and for `p = 1/2` the two
/// largest entries on the two bands.
pub fn column_band_check(v: &Array2<f64>, p: f64) -> bool {
    let k = v.nrows();
    v.columns().into_iter().enumerate().all(|(j, col)| {
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        if p == 0.5 && k > 2 {
            let top: std::collections::BTreeSet<usize> = order[..2].iter().copied().collect();
            let bands: std::collections::BTreeSet<usize> = [(j + 1) % k, (j + k - 1) % k].into_iter().collect();
            top == bands
        } else {
            on_band(order[0], j, k, p)
        }
    })
}

/// Least-squares slope of `log value` against `log t` for points with
/// `lo <= t <= hi`.
pub fn rate_fit(series: &[(f64, f64)], lo: f64, hi: f64) -> Result<f64> {
    let pts: Vec<(f64, f64)> = series.iter().copied().filter(|(t, _)| *t >= lo && *t <= hi).collect();
    if pts.len() < 4 {
        return Err(Error::Precondition(format!("rate fit needs >= 4 points, got {}", pts.len())));
    }
    if let Some((t, v)) = pts.iter().find(|(t, v)| !(*v > 0.0) || !(*t > 0.0)) {
        return Err(Error::Precondition(format!("nonpositive point ({t}, {v}) in the fit window")));
    }
    let xs: Vec<f64> = pts.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|(_, v)| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparationReport {
    /// `min over episodes of (z_{N-1} - max_{j != N-1} z_j)`.
    pub margin: f64,
    pub min_parent_weight: f64,
    pub mean_parent_weight: f64,
    pub pass: bool,
}

/// Parent-position separation of the attention logits over `set`.
pub fn attention_separation_check(
    params: &Params,
    geom: &AttentionGeometry,
    set: &WeightedSet,
    min_weight: f64,
) -> Result<SeparationReport> {
    if set.is_empty() {
        return Err(Error::InvalidConfig("empty episode set".into()));
    }
    let state = AttentionState::new(params, geom)?;
    let parent = geom.n() - 2;
    let mut margin = f64::INFINITY;
    let mut min_w = f64::INFINITY;
    let mut mean_w = 0.0;
    for (s, w) in set.samples.iter().zip(&set.weights) {
        let out = crate::model::forward(params, &state, geom, &s.tokens)?;
        let other = out
            .logits
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != parent)
            .map(|(_, &z)| z)
            .fold(f64::NEG_INFINITY, f64::max);
        margin = margin.min(out.logits[parent] - other);
        min_w = min_w.min(out.weights[parent]);
        mean_w += w * out.weights[parent];
    }
    Ok(SeparationReport {
        margin,
        min_parent_weight: min_w,
        mean_parent_weight: mean_w,
        pass: margin > 0.0 && min_w >= min_weight,
    })
}

/// Logit of the query position, `p_N^T W22 q / n_N`.
pub fn query_logit(params: &Params, geom: &AttentionGeometry) -> Result<f64> {
    let state = AttentionState::new(params, geom)?;
    let n = geom.n();
    Ok(state.pos_logit[n - 1] / geom.scales[n - 1])
}

#[derive(Debug, Clone, Serialize)]
pub struct RandomWalkReport {
    pub accuracy_gap: f64,
    pub v_dist: Vec<f64>,
    pub f_dist: Vec<f64>,
    pub v_dist_slope: Option<f64>,
    /// Smallest parent weight over the test set after burn-in.
    pub attention_floor: f64,
    /// Largest non-parent weight over the test set after burn-in.
    pub attention_ceiling: f64,
    pub toeplitz_residual_v1: Option<f64>,
    pub band_argmax_final: bool,
    pub column_bands_final: bool,
    /// Diagnostics only: `beta(4t)/beta(t)` for recorded `t >= fit_start`.
    pub beta_ratios: Vec<(usize, f64)>,
    pub beta_increasing: bool,
    pub gamma_max: f64,
    /// Diagnostic: `|V^(2)|_max` against `eta/(eps K) + 2 eps K^2`.
    pub v2_max: Option<f64>,
    pub v2_bound: f64,
    pub thresholds: Thresholds,
    pub items: Vec<CheckItem>,
    pub pass: bool,
}

fn walk_of(trace: &TrainTrace) -> Result<WalkConfig> {
    trace
        .config
        .task
        .walk()
        .copied()
        .ok_or_else(|| Error::Precondition("theory checks need a walk task".into()))
}

/// Accuracy, predictor convergence, `V` rate and parent attention.
pub fn check_random_theorem(trace: &TrainTrace, th: &Thresholds) -> Result<RandomWalkReport> {
    let w = walk_of(trace)?;
    if w.is_deterministic() {
        return Err(Error::Precondition("random-walk checks need 0 < p < 1".into()));
    }
    let rows = &trace.rows;
    let last = trace.final_row();
    let t_final = last.iter;
    let opt = opt_accuracy(w.k, w.p);
    let mut items = Vec::new();

    let accuracy_gap = (last.accuracy - opt).abs();
    items.push(CheckItem::new("accuracy", accuracy_gap <= th.tol_acc, last.accuracy, format!("{opt} +/- {}", th.tol_acc)));

    let after: Vec<_> = rows.iter().filter(|r| r.iter >= th.burn_in).collect();
    if after.len() >= 2 {
        let first = after[0];
        let series: Vec<(f64, f64)> = after.iter().map(|r| (r.iter.max(1) as f64, r.f_dist)).collect();
        let slope = rate_fit(&series, 0.0, f64::INFINITY).unwrap_or(f64::NAN);
        let trend = last.f_dist < first.f_dist && (slope < 0.0 || after.len() < 4);
        items.push(CheckItem::new(
            "f_dist_decreasing",
            trend,
            last.f_dist - first.f_dist,
            format!("final < value at t={} and negative log-log trend", th.burn_in),
        ));
        items.push(CheckItem::new(
            "f_direction_final",
            last.f_dir_dist <= th.tol_f,
            last.f_dir_dist,
            format!("<= {}", th.tol_f),
        ));
    } else {
        items.push(CheckItem::insufficient("f_dist_decreasing", format!("needs rows after t={}", th.burn_in)));
        items.push(CheckItem::insufficient("f_direction_final", format!("<= {}", th.tol_f)));
    }

    let vseries: Vec<(f64, f64)> = rows.iter().filter(|r| r.iter > 0).map(|r| (r.iter as f64, r.v_dist)).collect();
    let v_dist_slope = rate_fit(&vseries, th.fit_start as f64, t_final as f64).ok();
    match v_dist_slope {
        Some(s) => items.push(CheckItem::new(
            "v_dist_rate",
            s >= th.slope_lo && s <= th.slope_hi,
            s,
            format!("[{}, {}] over t in [{}, {}]", th.slope_lo, th.slope_hi, th.fit_start, t_final),
        )),
        None => items.push(CheckItem::insufficient(
            "v_dist_rate",
            format!("[{}, {}] with >= 4 points from t={}", th.slope_lo, th.slope_hi, th.fit_start),
        )),
    }

    let post: Vec<_> = rows.iter().filter(|r| r.iter >= th.burn_in).collect();
    let (attention_floor, attention_ceiling) = post.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(f, c), r| {
        (f.min(r.attn_parent_min), c.max(r.attn_other_sup))
    });
    if post.is_empty() {
        items.push(CheckItem::insufficient("parent_attention", format!(">= {}", th.attn_parent)));
        items.push(CheckItem::insufficient("other_attention", format!("<= {}", th.attn_other)));
    } else {
        let min_mean = post.iter().map(|r| r.attn_parent).fold(f64::INFINITY, f64::min);
        let max_other = post.iter().map(|r| r.attn_other_max).fold(f64::NEG_INFINITY, f64::max);
        items.push(CheckItem::new(
            "parent_attention",
            min_mean >= th.attn_parent,
            min_mean,
            format!("mean S_(N-1) >= {} for t >= {}", th.attn_parent, th.burn_in),
        ));
        items.push(CheckItem::new(
            "other_attention",
            max_other <= th.attn_other,
            max_other,
            format!("mean max_(j != N-1) S_j <= {} for t >= {}", th.attn_other, th.burn_in),
        ));
    }

    let toeplitz_residual_v1 = match trace.snapshot(1) {
        Some(p) => Some(toeplitz_check(&p.v)?),
        None => None,
    };
    let v_final = &trace.final_params.v;
    let band_argmax_final = band_argmax_check(v_final, w.p);
    let column_bands_final = column_band_check(v_final, w.p);

    let beta_at = |t: usize| rows.iter().find(|r| r.iter == t).map(|r| r.beta);
    let mut beta_ratios = Vec::new();
    let mut t = th.fit_start;
    while 4 * t <= t_final {
        if let (Some(a), Some(b)) = (beta_at(t), beta_at(4 * t)) {
            beta_ratios.push((t, b / a));
        }
        t *= 2;
    }
    let beta_increasing = rows.windows(2).filter(|p| p[0].iter >= 1).all(|p| p[1].beta >= p[0].beta);
    let gamma_max = rows.iter().map(|r| r.gamma).fold(0.0, f64::max);
    let v2_max = trace.snapshot(2).map(|p| p.v.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    let cfg = &trace.config;
    let v2_bound = cfg.eta / (cfg.eps * w.k as f64) + 2.0 * cfg.eps * (w.k * w.k) as f64;

    let pass = passed(&items);
    Ok(RandomWalkReport {
        accuracy_gap,
        v_dist: rows.iter().map(|r| r.v_dist).collect(),
        f_dist: rows.iter().map(|r| r.f_dist).collect(),
        v_dist_slope,
        attention_floor,
        attention_ceiling,
        toeplitz_residual_v1,
        band_argmax_final,
        column_bands_final,
        beta_ratios,
        beta_increasing,
        gamma_max,
        v2_max,
        v2_bound,
        thresholds: *th,
        items,
        pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DeterministicReport {
    /// Accuracy at every iteration under enumerated evaluation.
    pub accuracies: Vec<f64>,
    pub accuracy_exact: bool,
    pub v_uniformity: f64,
    pub attention_uniformity: f64,
    pub logit_uniformity: f64,
    /// `W12` row spread relative to `max(1, |W12|_max)`.
    pub w12_row_spread: f64,
    /// Largest entrywise gap to the second-step closed forms.
    pub second_step_residual: Option<f64>,
    pub tolerance: f64,
    pub items: Vec<CheckItem>,
    pub pass: bool,
}

/// Symmetry structure of a population-deterministic run.
pub fn check_deterministic_theorem(trace: &TrainTrace) -> Result<DeterministicReport> {
    let w = walk_of(trace)?;
    if trace.config.grad_mode != GradMode::PopulationDeterministic {
        return Err(Error::Precondition("deterministic checks need a population-deterministic trace".into()));
    }
    w.validate_deterministic_theory()?;
    const TOL: f64 = 1e-12;
    let target = 1.0 / w.k as f64;
    let accuracies: Vec<f64> = trace.rows.iter().map(|r| r.accuracy).collect();
    let accuracy_exact = accuracies.iter().all(|&a| (a - target).abs() <= 1e-15);
    let max_of = |f: fn(&crate::trainer::SymmetryRow) -> f64| trace.symmetry.iter().map(f).fold(0.0, f64::max);
    let v_uniformity = max_of(|s| s.v_uniformity);
    let attention_uniformity = max_of(|s| s.attention_uniformity);
    let logit_uniformity = max_of(|s| s.logit_uniformity);
    let w12_scale = trace
        .snapshots
        .iter()
        .map(|s| s.params.w12.iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .fold(1.0, f64::max);
    let w12_row_spread = max_of(|s| s.w12_row_spread) / w12_scale;

    let second_step_residual = match (trace.snapshot(2), trace.rows.get(1)) {
        (Some(p2), Some(row1)) if !trace.config.normalize_attention && trace.config.init == crate::model::InitMode::Zero => {
            let (w12, w22) = second_step_oracle_w_deterministic(&w, trace.config.eta, trace.rows[0].lprime, row1.lprime)?;
            let r12 = p2.w12.iter().zip(&w12).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let r22 = p2.w22.iter().zip(&w22).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Some(r12.max(r22))
        }
        _ => None,
    };

    let mut items = vec![
        CheckItem::new("accuracy_one_over_k", accuracy_exact, *accuracies.last().unwrap_or(&f64::NAN), format!("= {target} at every iteration")),
        CheckItem::new("v_uniformity", v_uniformity <= TOL, v_uniformity, format!("<= {TOL}")),
        CheckItem::new("attention_uniformity", attention_uniformity <= TOL, attention_uniformity, format!("<= {TOL}")),
        CheckItem::new("w12_rows_equal", w12_row_spread <= TOL, w12_row_spread, format!("<= {TOL}")),
    ];
    match second_step_residual {
        Some(r) => items.push(CheckItem::new("second_step_closed_form", r <= 1e-10, r, "<= 1e-10".into())),
        None => items.push(CheckItem::insufficient("second_step_closed_form", "needs a zero-init t=2 snapshot".into())),
    }
    let pass = passed(&items);
    Ok(DeterministicReport {
        accuracies,
        accuracy_exact,
        v_uniformity,
        attention_uniformity,
        logit_uniformity,
        w12_row_spread,
        second_step_residual,
        tolerance: TOL,
        items,
        pass,
    })
}

/// Toeplitz residual of the first-step `V` oracle.
pub fn first_step_toeplitz(w: &WalkConfig, eta: f64, eps: f64) -> Result<f64> {
    toeplitz_check(&first_step_oracle_v(w, eta, eps)?)
}

/// `Pi^T` convenience for band checks.
pub fn pi_transpose(k: usize, p: f64) -> Result<Array2<f64>> {
    Ok(TransitionMatrix::new(k, p)?.matrix().t().to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toeplitz_examples() {
        let w = WalkConfig::new(5, 0.6, 21, 21).unwrap();
        assert!(first_step_toeplitz(&w, 1.0, 0.1).unwrap() <= 1e-14);
        assert_eq!(toeplitz_check(&Array2::eye(4)).unwrap(), 0.0);
        let mut v = Array2::eye(4);
        v[[2, 0]] += 0.25;
        assert_eq!(toeplitz_check(&v).unwrap(), 0.25);
    }

    #[test]
    fn band_examples() {
        let w = WalkConfig::new(6, 0.7, 97, 97).unwrap();
        assert!(band_argmax_check(&first_step_oracle_v(&w, 1.0, 0.1).unwrap(), 0.7));
        assert!(band_argmax_check(&pi_transpose(6, 0.7).unwrap(), 0.7));
        assert!(!band_argmax_check(&pi_transpose(6, 0.7).unwrap(), 0.3));
        assert!(band_argmax_check(&pi_transpose(6, 0.5).unwrap(), 0.5));
        assert!(column_band_check(&pi_transpose(6, 0.5).unwrap(), 0.5));
        assert!(column_band_check(&pi_transpose(6, 0.3).unwrap(), 0.3));
        assert!(!column_band_check(&Array2::eye(6), 0.5));
    }

    #[test]
    fn rate_examples() {
        let s: Vec<(f64, f64)> = (1..=50).map(|t| (t as f64, (t as f64).powf(-0.5))).collect();
        assert!((rate_fit(&s, 8.0, 50.0).unwrap() + 0.5).abs() < 1e-9);
        let c: Vec<(f64, f64)> = (1..=50).map(|t| (t as f64, 3.0)).collect();
        assert!(rate_fit(&c, 1.0, 50.0).unwrap().abs() < 1e-12);
        assert!(rate_fit(&s, 8.0, 10.0).is_err());
        let bad: Vec<(f64, f64)> = (1..=10).map(|t| (t as f64, 0.0)).collect();
        assert!(rate_fit(&bad, 1.0, 10.0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_margin() {
        let geom = AttentionGeometry::new(20, 7, false).unwrap();
        let set = crate::trainer::deterministic_population(&WalkConfig::new(3, 1.0, 7, 20).unwrap()).unwrap();
        let r = attention_separation_check(&Params::zeros(3, 20), &geom, &set, 0.99).unwrap();
        assert_eq!(r.margin, 0.0);
        assert!(!r.pass);
    }
}
