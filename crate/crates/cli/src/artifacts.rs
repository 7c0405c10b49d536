//! Artifact files and the staging directory they are written into.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use circwalk::trainer::{MetricsRow, SymmetryRow, TrainTrace, WeightedSet};
use circwalk::walkgen::QaVocabulary;
use ndarray::Array2;
use serde::Serialize;

pub const METRICS_HEADER: &str = "iter,loss,accuracy,kl,v_dist,f_dist,attn_parent,attn_other_max,beta,gamma";
pub const MANIFEST: &str = "manifest.json";

/// Output directory staged under a temporary sibling and renamed into place
/// on [`ArtifactDir::commit`]. Dropping it uncommitted removes the staging
/// directory, so failed runs leave nothing behind.
pub struct ArtifactDir {
    target: PathBuf,
    staging: PathBuf,
    files: Vec<String>,
    committed: bool,
}

impl ArtifactDir {
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() && !target.join(MANIFEST).is_file() {
            bail!("{} exists and is not an artifact directory; refusing to replace it", target.display());
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = target.file_name().context("output path has no final component")?.to_string_lossy();
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(ArtifactDir { target: target.to_path_buf(), staging, files: Vec::new(), committed: false })
    }

    /// Registers `name` and returns its staged path for writers that take one.
    pub fn path_for(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.staging.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        self.files.push(name.to_string());
        Ok(path)
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.staging.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {name}"))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target).with_context(|| format!("moving results to {}", self.target.display()))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for ArtifactDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Header plus one row per iteration `t = 1..=T`.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows.iter().filter(|r| r.iter > 0) {
        let fields = [r.loss, r.accuracy, r.kl, r.v_dist, r.f_dist, r.attn_parent, r.attn_other_max, r.beta, r.gamma];
        let _ = write!(out, "{}", r.iter);
        for v in fields {
            let _ = write!(out, ",{}", num(v));
        }
        out.push('\n');
    }
    out
}

pub fn emit_metrics_csv(trace: &TrainTrace, path: &Path) -> Result<()> {
    if trace.rows.is_empty() {
        bail!("empty trace");
    }
    fs::write(path, metrics_csv(&trace.rows)).with_context(|| format!("writing {}", path.display()))
}

/// Diagnostics kept out of the main metrics file.
pub fn extra_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iter,f_dir_dist,attn_parent_min,attn_other_sup,lprime\n");
    for r in rows.iter().filter(|r| r.iter > 0) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iter,
            num(r.f_dir_dist),
            num(r.attn_parent_min),
            num(r.attn_other_sup),
            num(r.lprime)
        );
    }
    out
}

pub fn symmetry_csv(rows: &[SymmetryRow]) -> String {
    let mut out = String::from("iter,v_uniformity,attention_uniformity,logit_uniformity,w12_row_spread\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iter,
            num(r.v_uniformity),
            num(r.attention_uniformity),
            num(r.logit_uniformity),
            num(r.w12_row_spread)
        );
    }
    out
}

/// Row-major CSV, shortest round-trip formatting.
pub fn matrix_csv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn emit_matrix_csv(m: &Array2<f64>, path: &Path) -> Result<()> {
    fs::write(path, matrix_csv(m)).with_context(|| format!("writing {}", path.display()))
}

/// One walk per line as `states: s_1 ... s_N` (1-based), with the set weight
/// appended when it is not uniform.
pub fn walk_dataset(set: &WeightedSet) -> String {
    let uniform = 1.0 / set.len() as f64;
    let mut out = String::new();
    for (s, &w) in set.samples.iter().zip(&set.weights) {
        let states: Vec<String> = s.tokens.iter().chain([&s.label]).map(|t| (t + 1).to_string()).collect();
        let _ = write!(out, "states: {}", states.join(" "));
        if (w - uniform).abs() > 1e-15 {
            let _ = write!(out, " weight: {w}");
        }
        out.push('\n');
    }
    out
}

pub fn qa_dataset(set: &WeightedSet) -> String {
    let vocab = QaVocabulary;
    let word = |t: usize| vocab.word(t + 1).unwrap_or("?");
    let mut out = String::new();
    for s in &set.samples {
        let words: Vec<&str> = s.tokens.iter().map(|&t| word(t)).collect();
        let _ = writeln!(out, "words: {} answer: {}", words.join(" "), word(s.label));
    }
    out
}

/// Two stacked panels: loss and accuracy against iteration.
pub fn line_chart_svg(rows: &[MetricsRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 220.0;
    const PAD: f64 = 40.0;
    let series: [(&str, Vec<(f64, f64)>); 2] = [
        ("loss", rows.iter().map(|r| (r.iter as f64, r.loss)).collect()),
        ("accuracy", rows.iter().map(|r| (r.iter as f64, r.accuracy)).collect()),
    ];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        2.0 * H
    );
    for (panel, (label, pts)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = pts.iter().copied().filter(|(_, y)| y.is_finite()).collect();
        let top = panel as f64 * H;
        let (x0, x1) = bounds(pts.iter().map(|p| p.0));
        let (y0, y1) = bounds(pts.iter().map(|p| p.1));
        let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
        let sy = |y: f64| top + H - PAD + (y0 - y) / (y1 - y0) * (H - 2.0 * PAD);
        let _ = writeln!(
            svg,
            "<rect x=\"{PAD}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
            top + PAD,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        let _ = writeln!(svg, "<text x=\"{PAD}\" y=\"{}\">{label}</text>", top + PAD - 6.0);
        let _ = writeln!(svg, "<text x=\"4\" y=\"{}\">{}</text>", top + PAD + 4.0, short(y1));
        let _ = writeln!(svg, "<text x=\"4\" y=\"{}\">{}</text>", top + H - PAD, short(y0));
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">{}</text>", W - PAD - 20.0, top + H - PAD + 14.0, short(x1));
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn short(v: f64) -> String {
    format!("{v:.3}")
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub recipe: Option<String>,
    pub config_source: Option<String>,
    /// The effective configuration, identical to `config.toml`.
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub started_unix: f64,
    pub wall_clock_seconds: f64,
    pub checks_passed: Option<bool>,
    pub warnings: Vec<String>,
    pub files: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iter: usize) -> MetricsRow {
        MetricsRow {
            iter,
            loss: 1.0 / 3.0,
            accuracy: 0.5,
            kl: f64::NAN,
            v_dist: 0.1,
            f_dist: 0.2,
            attn_parent: 0.9,
            attn_other_max: 0.01,
            beta: 1.0,
            gamma: 0.0,
            f_dir_dist: 0.0,
            attn_parent_min: 0.9,
            attn_other_sup: 0.01,
            lprime: -1.0,
        }
    }

    #[test]
    fn three_iterations_give_four_lines() {
        let rows: Vec<MetricsRow> = (0..=3).map(row).collect();
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], METRICS_HEADER);
        assert!(lines[1].starts_with("1,3.3333333333333331e-1,5.0000000000000000e-1,NaN,"));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn floats_round_trip() {
        let csv = metrics_csv(&[row(0), row(1)]);
        let loss: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(loss.to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn zero_matrix_csv() {
        assert_eq!(matrix_csv(&Array2::zeros((2, 3))), "0,0,0\n0,0,0\n");
    }

    #[test]
    fn chart_is_well_formed() {
        let rows: Vec<MetricsRow> = (0..5).map(row).collect();
        let svg = line_chart_svg(&rows);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
