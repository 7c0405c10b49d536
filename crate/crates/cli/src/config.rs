//! Run configuration: one TOML file per experiment.
//!
//! ```toml
//! command = "check"          # gen | train | eval | check | qa | spectra
//! out = "fig4"               # optional, relative to the output root
//!
//! [train]
//! eta = 1.0
//! eps = 0.1
//! iterations = 50
//! seed = 0
//! test_size = 1000
//! normalize_attention = false
//! deterministic = true
//! tie_rtol = 1e-12
//! task = { kind = "walk", k = 6, p = 0.5, n = 97, m = 1000 }
//! init = { kind = "zero" }
//! grad_mode = { kind = "empirical", train_size = 1000, resample = false }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use circwalk::trainer::{TaskConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Gen,
    Train,
    Eval,
    Check,
    Qa,
    Spectra,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Check => "check",
            Command::Qa => "qa",
            Command::Spectra => "spectra",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Parameter file written by `train` (`params/tNNNNN.bin`).
    pub params: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectraSection {
    #[serde(default = "default_r_max")]
    pub r_max: usize,
    #[serde(default = "default_gamma_n_max")]
    pub gamma_n_max: usize,
}

impl Default for SpectraSection {
    fn default() -> Self {
        SpectraSection { r_max: default_r_max(), gamma_n_max: default_gamma_n_max() }
    }
}

fn default_r_max() -> usize {
    200
}

fn default_gamma_n_max() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Formats {
    /// Loss/accuracy line chart.
    #[serde(default = "yes")]
    pub svg: bool,
    /// Binary parameter snapshots.
    #[serde(default = "yes")]
    pub params: bool,
    /// `V` snapshots and `Pi` as CSV.
    #[serde(default = "yes")]
    pub matrices: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Formats { svg: true, params: true, matrices: true }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectra: Option<SpectraSection>,
    #[serde(default)]
    pub formats: Formats,
}

impl RunConfig {
    pub fn new(command: Command, train: TrainConfig) -> Self {
        RunConfig { command, out: None, train, eval: None, spectra: None, formats: Formats::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the configuration")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let walk = matches!(self.train.task, TaskConfig::Walk(_));
        match self.command {
            Command::Qa if walk => bail!("command qa needs a qa task"),
            Command::Check | Command::Spectra if !walk => {
                bail!("command {} needs a walk task", self.command)
            }
            Command::Eval if self.eval.is_none() => bail!("command eval needs an [eval] section with `params`"),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use circwalk::walkgen::WalkConfig;

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::new(Command::Train, TrainConfig::walk(WalkConfig::new(6, 0.5, 97, 1000).unwrap()));
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = RunConfig::new(Command::Train, TrainConfig::walk(WalkConfig::new(3, 0.5, 5, 5).unwrap()));
        let text = cfg.to_toml().unwrap().replace("eta =", "etta =");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn command_task_mismatch() {
        let cfg = RunConfig::new(Command::Qa, TrainConfig::walk(WalkConfig::new(3, 0.5, 5, 5).unwrap()));
        assert!(cfg.validate().is_err());
    }
}
