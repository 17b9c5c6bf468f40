//! Run configuration, read from TOML. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use delib_core::decode::GenerateMode;
use delib_core::seq2seq::ModelConfig;
use delib_core::tasks::{Split, TaskSpec};
use delib_core::trainer::{OptimConfig, RegularizerConfig, TrainConfig};
use delib_core::training::{IntermediateMode, Scheme, Strategy};
use delib_core::verify::VerifyConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub extras: bool,
    #[serde(default)]
    pub context_in_state: bool,
}

fn default_hidden() -> usize {
    32
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: default_hidden(), extras: false, context_in_state: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Splits evaluated after every training epoch.
    #[serde(default = "default_splits")]
    pub splits: Vec<Split>,
    #[serde(default = "default_mode")]
    pub mode: GenerateMode,
    #[serde(default)]
    pub info_gain: bool,
    /// Half-width of the diagonal band used for the attention-mass metric.
    #[serde(default = "default_band")]
    pub band: f64,
}

fn default_splits() -> Vec<Split> {
    vec![Split::Train, Split::Dev]
}
fn default_mode() -> GenerateMode {
    GenerateMode::Greedy
}
fn default_band() -> f64 {
    0.2
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { splits: default_splits(), mode: default_mode(), info_gain: false, band: default_band() }
    }
}

fn default_scheme() -> Scheme {
    Scheme::Separate { m: 1 }
}
fn default_strategy() -> Strategy {
    Strategy::Ancestral
}
fn default_optim() -> OptimConfig {
    OptimConfig { lr: 0.05, clip: 5.0, epochs: 10, pretrain_epochs: 10, batch_size: 16 }
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_optim")]
    pub optim: OptimConfig,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    #[serde(default)]
    pub intermediate_mode: IntermediateMode,
    /// Longest generated sequence, EOS included; defaults to the task's
    /// longest target.
    #[serde(default)]
    pub t_max: Option<usize>,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Failure> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Failure::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|f| f.context(format!("{}", path.display())))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.task.vocab,
            hidden: self.model.hidden,
            context_in_state: self.model.context_in_state,
            extras: self.model.extras,
        }
    }

    pub fn t_max(&self) -> usize {
        self.t_max.unwrap_or_else(|| self.task.max_target_len())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            scheme: self.scheme,
            strategy: self.strategy,
            optim: self.optim,
            regularizer: self.regularizer,
            intermediate_mode: self.intermediate_mode,
            t_max: self.t_max(),
            seed: self.seed,
        }
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<(), Failure> {
        self.task.validate().map_err(|e| Failure::usage(format!("task: {e}")))?;
        self.train_config().validate().map_err(|e| Failure::usage(format!("training: {e}")))?;
        if self.t_max() == 0 {
            return Err(Failure::usage("t_max must be at least 1"));
        }
        self.eval.mode.validate().map_err(|e| Failure::usage(format!("eval.mode: {e}")))?;
        if !(self.eval.band > 0.0 && self.eval.band <= 1.0) {
            return Err(Failure::usage(format!("eval.band must lie in (0, 1], got {}", self.eval.band)));
        }
        Ok(())
    }
}

/// Verification settings: the top level of the file is the check-suite
/// configuration; every key is optional.
pub fn load_verify_config(path: Option<&Path>) -> Result<VerifyConfig, Failure> {
    let cfg = match path {
        None => VerifyConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::usage(format!("invalid verify config {}: {e}", p.display())))?
        }
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 4
[task]
kind = "copy"
vocab = 8
len_min = 1
len_max = 4
train = 10
dev = 2
test = 2
seed = 1
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.t_max(), 5);
        assert_eq!(cfg.scheme, Scheme::Separate { m: 1 });
        assert_eq!(cfg.model_config().vocab, 8);
    }

    #[test]
    fn full_schema_parses() {
        let top = "out_dir = \"x\"\nintermediate_mode = \"teacher_forced\"\nt_max = 6\n";
        let tables = r#"
[model]
hidden = 8
extras = true
[scheme]
kind = "joint_loss"
m = 2
tau = 0.5
relaxation = "relaxed"
[strategy]
kind = "ancestral"
[optim]
lr = 0.1
epochs = 2
pretrain_epochs = 1
[regularizer]
enabled = true
gamma = 0.5
[eval]
splits = ["dev"]
info_gain = true
[eval.mode]
kind = "beam"
width = 3
"#;
        let cfg = RunConfig::from_toml(&format!("{top}{MINIMAL}{tables}")).unwrap();
        assert_eq!(cfg.t_max(), 6);
        assert_eq!(cfg.intermediate_mode, IntermediateMode::TeacherForced);
        assert_eq!(cfg.eval.mode, GenerateMode::Beam { width: 3 });
        assert!(cfg.model.extras && cfg.regularizer.enabled);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml(&format!("{MINIMAL}\n[optim]\nepochs = 1\npretrain_epochs = 1\nlearning_rate = 0.1\n")).unwrap_err();
        assert_eq!(err.code, crate::EXIT_USAGE);
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::from_toml(&MINIMAL.replace("seed = 4", "sede = 4")).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml(&MINIMAL.replace("len_min = 1", "len_min = 9")).is_err());
        assert!(RunConfig::from_toml(&format!("{MINIMAL}\n[scheme]\nkind = \"separate\"\nm = 0\n")).is_err());
    }
}
