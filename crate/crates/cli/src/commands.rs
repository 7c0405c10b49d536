use std::fs::File;
use std::io::BufReader;

use anyhow::{bail, Context, Result};
use circwalk::markov::{
    circulant_eigenvalues, decay_bound_report, eigen_action_check, gamma_dominance_report, pi_frobenius_report,
    shift_identities_check, TransitionMatrix,
};
use circwalk::model::Params;
use circwalk::posembed::PositionalMatrix;
use circwalk::theorycheck::{check_deterministic_theorem, check_random_theorem, Thresholds};
use circwalk::trainer::{build_data, evaluate, train, GradMode, TaskConfig, TrainTrace};
use circwalk::walkgen::{qa_questions, qa_symmetry_statistic, WalkConfig};
use serde_json::json;

use crate::artifacts::{
    emit_matrix_csv, emit_metrics_csv, extra_metrics_csv, line_chart_svg, matrix_csv, qa_dataset, symmetry_csv, walk_dataset, ArtifactDir,
};
use crate::config::{Command, RunConfig};

/// What a command reports back to the driver.
pub struct Outcome {
    /// `None` when the command asserts nothing.
    pub checks_passed: Option<bool>,
    pub warnings: Vec<String>,
    pub seeds: serde_json::Value,
}

pub fn execute(cfg: &RunConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    match cfg.command {
        Command::Gen => gen(cfg, dir),
        Command::Train => run_training(cfg, dir).map(|t| outcome(None, &t)),
        Command::Check => check(cfg, dir),
        Command::Qa => qa(cfg, dir),
        Command::Eval => eval(cfg, dir),
        Command::Spectra => spectra(cfg, dir),
    }
}

fn outcome(checks_passed: Option<bool>, trace: &TrainTrace) -> Outcome {
    Outcome {
        checks_passed,
        warnings: trace.warnings.clone(),
        seeds: serde_json::to_value(&trace.seeds).unwrap_or_default(),
    }
}

fn seeds_only(cfg: &RunConfig) -> serde_json::Value {
    json!({ "seed": cfg.train.seed })
}

fn walk_of(cfg: &RunConfig) -> Result<WalkConfig> {
    match cfg.train.task {
        TaskConfig::Walk(w) => Ok(w),
        TaskConfig::Qa { .. } => bail!("command {} needs a walk task", cfg.command),
    }
}

fn gen(cfg: &RunConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let data = build_data(&cfg.train)?;
    let render = match cfg.train.task {
        TaskConfig::Walk(_) => walk_dataset,
        TaskConfig::Qa { .. } => qa_dataset,
    };
    dir.write("train.txt", render(&data.train))?;
    dir.write("test.txt", render(&data.test))?;
    Ok(Outcome { checks_passed: None, warnings: Vec::new(), seeds: seeds_only(cfg) })
}

fn run_training(cfg: &RunConfig, dir: &mut ArtifactDir) -> Result<TrainTrace> {
    let trace = train(&cfg.train)?;
    emit_metrics_csv(&trace, &dir.path_for("metrics.csv")?)?;
    dir.write("metrics_extra.csv", extra_metrics_csv(&trace.rows))?;
    if !trace.symmetry.is_empty() {
        dir.write("symmetry.csv", symmetry_csv(&trace.symmetry))?;
    }
    if cfg.formats.params {
        for snap in &trace.snapshots {
            let mut buf = Vec::new();
            snap.params.write_to(&mut buf, snap.iteration as u64)?;
            dir.write(&format!("params/t{:05}.bin", snap.iteration), buf)?;
        }
    }
    if cfg.formats.matrices {
        for snap in &trace.snapshots {
            emit_matrix_csv(&snap.params.v, &dir.path_for(&format!("matrices/v_t{:05}.csv", snap.iteration))?)?;
        }
        if let TaskConfig::Walk(w) = cfg.train.task {
            dir.write("matrices/pi.csv", matrix_csv(TransitionMatrix::new(w.k, w.p)?.matrix()))?;
        }
    }
    if cfg.formats.svg {
        dir.write("chart.svg", line_chart_svg(&trace.rows[1..]))?;
    }
    Ok(trace)
}

fn check(cfg: &RunConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let w = walk_of(cfg)?;
    let population = cfg.train.grad_mode == GradMode::PopulationDeterministic;
    if w.is_deterministic() && !population {
        bail!("checks for p in {{0, 1}} need grad_mode population_deterministic");
    }
    let trace = run_training(cfg, dir)?;
    let pass = if population {
        let rep = check_deterministic_theorem(&trace)?;
        dir.write_json("check_report.json", &rep)?;
        print_items(&rep.items);
        rep.pass
    } else {
        let rep = check_random_theorem(&trace, &Thresholds::default())?;
        dir.write_json("check_report.json", &rep)?;
        print_items(&rep.items);
        rep.pass
    };
    Ok(outcome(Some(pass), &trace))
}

fn print_items(items: &[circwalk::theorycheck::CheckItem]) {
    for it in items {
        eprintln!("  {:<28} {:?} value {:.6e} ({})", it.name, it.status, it.value, it.threshold);
    }
}

fn qa(cfg: &RunConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let task = match cfg.train.task {
        TaskConfig::Qa { task, .. } => task,
        TaskConfig::Walk(_) => bail!("command qa needs a qa task"),
    };
    let trace = run_training(cfg, dir)?;
    let accuracies: Vec<f64> = trace.rows.iter().skip(1).map(|r| r.accuracy).collect();
    let report = json!({
        "task": task,
        "questions": qa_questions(task).len(),
        "symmetry_statistic": qa_symmetry_statistic(task),
        "final_accuracy": trace.final_row().accuracy,
        "best_accuracy": accuracies.iter().copied().fold(0.0, f64::max),
        "worst_accuracy": accuracies.iter().copied().fold(1.0, f64::min),
    });
    dir.write_json("qa_report.json", &report)?;
    Ok(outcome(None, &trace))
}

fn eval(cfg: &RunConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let section = cfg.eval.as_ref().context("command eval needs an [eval] section")?;
    let file = File::open(&section.params).with_context(|| format!("opening {}", section.params.display()))?;
    let (params, iteration) = Params::read_from(BufReader::new(file))?;
    let (k, m) = (cfg.train.task.k(), cfg.train.task.m());
    if params.k() != k || params.m() != m {
        bail!("parameter file has K={}, M={}; the task needs K={k}, M={m}", params.k(), params.m());
    }
    let data = build_data(&cfg.train)?;
    let pi = match cfg.train.task {
        TaskConfig::Walk(w) => Some(TransitionMatrix::new(w.k, w.p)?),
        TaskConfig::Qa { .. } => None,
    };
    let stats = evaluate(&params, &cfg.train.geometry()?, &data.test, pi.as_ref(), cfg.train.eps, cfg.train.tie_rtol)?;
    dir.write_json("eval.json", &json!({ "iteration": iteration, "stats": stats }))?;
    Ok(Outcome { checks_passed: None, warnings: Vec::new(), seeds: seeds_only(cfg) })
}

const EIGEN_TOL: f64 = 1e-12;

fn spectra(cfg: &RunConfig, dir: &mut ArtifactDir) -> Result<Outcome> {
    let w = walk_of(cfg)?;
    let opts = cfg.spectra.clone().unwrap_or_default();
    let pi = TransitionMatrix::new(w.k, w.p)?;
    dir.write("pi.csv", matrix_csv(pi.matrix()))?;

    let mut eig = String::from("k,re,im,modulus,action_residual\n");
    let mut eigen_worst = 0.0f64;
    for (k, lambda) in circulant_eigenvalues(w.k, w.p).iter().enumerate() {
        let residual = eigen_action_check(&pi, k)?;
        eigen_worst = eigen_worst.max(residual);
        eig.push_str(&format!("{k},{},{},{},{residual}\n", lambda.re, lambda.im, lambda.norm()));
    }
    dir.write("eigenvalues.csv", eig)?;

    let decay = (w.p > 0.0 && w.p < 1.0).then(|| decay_bound_report(w.k, w.p, opts.r_max)).transpose()?;
    let gammas = (2..=opts.gamma_n_max.max(2))
        .map(|n| gamma_dominance_report(w.k, w.p, n))
        .collect::<circwalk::Result<Vec<_>>>()?;
    let shifts = shift_identities_check(w.k)?;
    let frobenius = pi_frobenius_report(w.k, w.p)?;
    let gram = PositionalMatrix::build(w.m, w.n)?.gram_residual();

    let mirrored_ok = gammas.iter().all(|g| g.symmetric_bound_holds);
    let literal_failures = gammas.iter().filter(|g| !g.bound_holds).count();
    let mut warnings: Vec<String> = frobenius.warning.iter().cloned().collect();
    if literal_failures > 0 {
        warnings.push(format!(
            "Gamma margin below (1-p)^(N-2) for {literal_failures} of {} sequence lengths; min(p,1-p)^(N-2) is the asserted bound",
            gammas.len()
        ));
    }
    let checks = json!({
        "eigen_action": eigen_worst <= EIGEN_TOL,
        "decay": decay.as_ref().map(|d| d.passed),
        "shift_identities": shifts.all(),
        "gamma_min_bound": mirrored_ok,
    });
    let pass = eigen_worst <= EIGEN_TOL && decay.as_ref().is_none_or(|d| d.passed) && shifts.all() && mirrored_ok;
    dir.write_json(
        "spectra.json",
        &json!({
            "k": w.k,
            "p": w.p,
            "checks": checks,
            "eigen_action_worst": eigen_worst,
            "decay": decay,
            "gamma": gammas,
            "shift_identities": shifts,
            "frobenius": frobenius,
            "positional_gram_residual": gram,
        }),
    )?;
    Ok(Outcome { checks_passed: Some(pass), warnings, seeds: seeds_only(cfg) })
}
