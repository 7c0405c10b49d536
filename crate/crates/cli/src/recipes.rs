//! Named experiment presets.

use circwalk::model::InitMode;
use circwalk::trainer::{GradMode, TrainConfig};
use circwalk::walkgen::{QaTask, WalkConfig};

use crate::config::{Command, RunConfig};

pub const NAMES: &[&str] = &[
    "fig4-zero-init-p05",
    "fig4-zero-init-p07",
    "fig5-zero-init-p1",
    "fig5-zero-init-p0",
    "fig6-random-init-p05",
    "fig6-random-init-p1",
    "fig7-qa-task1",
    "fig7-qa-task2",
    "rate-t200",
];

fn walk(p: f64) -> TrainConfig {
    TrainConfig::walk(WalkConfig { k: 6, p, n: 97, m: 1000 })
}

fn zero_init(p: f64, iterations: usize) -> RunConfig {
    let mut train = walk(p);
    train.iterations = iterations;
    RunConfig::new(Command::Check, train)
}

fn deterministic(p: f64) -> RunConfig {
    let mut train = walk(p);
    train.grad_mode = GradMode::PopulationDeterministic;
    train.exact_gram = true;
    RunConfig::new(Command::Check, train)
}

fn random_init(p: f64) -> RunConfig {
    let mut train = walk(p);
    train.iterations = 1000;
    train.eta = 0.01;
    train.init = InitMode::Gaussian { sigma: 0.01 };
    train.normalize_attention = true;
    RunConfig::new(Command::Train, train)
}

fn qa(task: QaTask) -> RunConfig {
    RunConfig::new(Command::Qa, TrainConfig::qa(task, 1000))
}

pub fn recipe(name: &str) -> Option<RunConfig> {
    let mut cfg = match name {
        "fig4-zero-init-p05" => zero_init(0.5, 50),
        "fig4-zero-init-p07" => zero_init(0.7, 50),
        "fig5-zero-init-p1" => deterministic(1.0),
        "fig5-zero-init-p0" => deterministic(0.0),
        "fig6-random-init-p05" => random_init(0.5),
        "fig6-random-init-p1" => random_init(1.0),
        "fig7-qa-task1" => qa(QaTask::Task1),
        "fig7-qa-task2" => qa(QaTask::Task2),
        "rate-t200" => zero_init(0.5, 200),
        _ => return None,
    };
    cfg.out = Some(name.into());
    Some(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_recipe_validates() {
        for name in NAMES {
            let cfg = recipe(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e:#}"));
        }
        assert!(recipe("nope").is_none());
    }
}
