//! Flat JSON experiment schema. Every field except `command` and `seed` has
//! a default; unknown fields are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use mgk_core::attention::{default_sigma2, AttentionConfig, EStep, Kernel, KeyMode, Variant};
use mgk_core::training::{ModelSpec, OptimizerSpec, TaskKind, TaskSpec, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    SweepComplexity,
    Diagnose,
    Gradcheck,
    Equivalence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerPreset {
    /// lr 1e-3, no warm-up.
    Desk,
    /// lr 2.5e-4 with a 2000-step warm-up.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,

    // attention and model
    #[serde(default = "defaults::variant")]
    pub variant: Variant,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    /// Defaults to 2 for mixture variants and 1 otherwise.
    #[serde(default)]
    pub components: Option<usize>,
    #[serde(default = "defaults::head_dim")]
    pub head_dim: usize,
    #[serde(default = "defaults::kernel")]
    pub kernel: Kernel,
    #[serde(default = "defaults::estep")]
    pub estep: EStep,
    #[serde(default = "defaults::key_mode")]
    pub key_mode: KeyMode,
    #[serde(default)]
    pub causal: bool,
    /// Defaults to `(2r+1)·√D` for component `r`.
    #[serde(default)]
    pub sigma2: Option<Vec<f64>>,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::model_dim")]
    pub model_dim: usize,
    #[serde(default = "defaults::ff_hidden")]
    pub ff_hidden: usize,

    // task
    #[serde(default = "defaults::task")]
    pub task: TaskKind,
    #[serde(default = "defaults::vocab")]
    pub vocab: usize,
    #[serde(default = "defaults::seq_len")]
    pub seq_len: usize,
    #[serde(default = "defaults::train_size")]
    pub train_size: usize,
    #[serde(default = "defaults::test_size")]
    pub test_size: usize,
    /// Dataset seed; defaults to `seed`.
    #[serde(default)]
    pub task_seed: Option<u64>,

    // training
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::preset")]
    pub optimizer_preset: OptimizerPreset,
    /// Overrides the preset's learning rate.
    #[serde(default)]
    pub lr: Option<f64>,
    /// Overrides the preset's warm-up.
    #[serde(default)]
    pub warmup_steps: Option<usize>,

    // diagnose
    #[serde(default = "defaults::rank_samples")]
    pub rank_samples: usize,
    #[serde(default = "defaults::rank_threshold")]
    pub rank_threshold: f64,
    #[serde(default = "defaults::yes")]
    pub dump_attention: bool,

    // sweep-complexity
    #[serde(default = "defaults::sweep_n")]
    pub sweep_n: Vec<u64>,
    #[serde(default = "defaults::sweep_d")]
    pub sweep_d: Vec<u64>,
    #[serde(default = "defaults::sweep_heads")]
    pub sweep_heads: u64,
    #[serde(default = "defaults::sweep_input_dim")]
    pub sweep_input_dim: u64,
    #[serde(default = "defaults::sweep_components")]
    pub sweep_components: u64,
    /// Also run the tape counter on every grid cell.
    #[serde(default)]
    pub instrument: bool,

    // equivalence
    /// Multiplies σ² in the reduction identity; a negative control when ≠ 1.
    #[serde(default)]
    pub sigma2_perturbation: Option<f64>,
}

mod defaults {
    use super::*;

    pub fn variant() -> Variant {
        Variant::Mgk
    }
    pub fn heads() -> usize {
        1
    }
    pub fn head_dim() -> usize {
        32
    }
    pub fn kernel() -> Kernel {
        Kernel::GaussianDistance
    }
    pub fn estep() -> EStep {
        EStep::SoftLearnedPrior
    }
    pub fn key_mode() -> KeyMode {
        KeyMode::IndependentProjections
    }
    pub fn layers() -> usize {
        2
    }
    pub fn model_dim() -> usize {
        64
    }
    pub fn ff_hidden() -> usize {
        128
    }
    pub fn task() -> TaskKind {
        TaskKind::AssociativeRecall
    }
    pub fn vocab() -> usize {
        16
    }
    pub fn seq_len() -> usize {
        64
    }
    pub fn train_size() -> usize {
        2000
    }
    pub fn test_size() -> usize {
        500
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn preset() -> OptimizerPreset {
        OptimizerPreset::Desk
    }
    pub fn rank_samples() -> usize {
        mgk_core::diagnostics::DEFAULT_SAMPLE_COUNT
    }
    pub fn rank_threshold() -> f64 {
        mgk_core::diagnostics::DEFAULT_RANK_THRESHOLD
    }
    pub fn yes() -> bool {
        true
    }
    pub fn sweep_n() -> Vec<u64> {
        vec![256, 512, 1024, 2048, 4096]
    }
    pub fn sweep_d() -> Vec<u64> {
        vec![16, 32, 64, 128, 256]
    }
    pub fn sweep_heads() -> u64 {
        8
    }
    pub fn sweep_input_dim() -> u64 {
        256
    }
    pub fn sweep_components() -> u64 {
        2
    }
}

impl ExperimentConfig {
    /// Parses `text`; serde's message names the offending field and line.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn attention(&self) -> AttentionConfig {
        let mut cfg = AttentionConfig::new(self.variant, self.heads, self.head_dim, self.model_dim)
            .with_kernel(self.kernel)
            .with_estep(self.estep)
            .with_key_mode(self.key_mode)
            .with_causal(self.causal);
        if let Some(m) = self.components {
            cfg = cfg.with_components(m);
        }
        cfg.sigma2 = self
            .sigma2
            .clone()
            .unwrap_or_else(|| default_sigma2(cfg.components, self.head_dim));
        cfg
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            vocab: self.vocab,
            seq_len: self.seq_len,
            train_size: self.train_size,
            test_size: self.test_size,
            seed: self.task_seed.unwrap_or(self.seed),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let task = self.task_spec();
        let mut spec = ModelSpec::new(
            self.attention(),
            self.model_dim,
            task.token_count(),
            self.seq_len,
            task.classes(),
        );
        spec.layers = self.layers;
        spec.ff_hidden = self.ff_hidden;
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut optimizer = match self.optimizer_preset {
            OptimizerPreset::Desk => OptimizerSpec::default(),
            OptimizerPreset::Paper => OptimizerSpec::paper_preset(),
        };
        if let Some(lr) = self.lr {
            optimizer.lr = lr;
        }
        if let Some(w) = self.warmup_steps {
            optimizer.warmup_steps = w;
        }
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer,
            seed: self.seed,
        }
    }

    /// Checks everything the selected command uses before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: mgk_core::MgkError| CliError::Validation(e.to_string());
        match self.command {
            Command::Train | Command::Diagnose => {
                let task = self.task_spec();
                task.validate().map_err(invalid)?;
                self.model_spec().validate().map_err(invalid)?;
                self.train_config().optimizer.validate().map_err(invalid)?;
                if self.batch_size == 0 {
                    return Err(CliError::Validation("batch_size must be positive".into()));
                }
                if task.train_size == 0 || task.test_size == 0 {
                    return Err(CliError::Validation("train_size and test_size must be positive".into()));
                }
                if self.command == Command::Diagnose && (self.rank_samples == 0 || !(self.rank_threshold > 0.0)) {
                    return Err(CliError::Validation(
                        "rank_samples must be positive and rank_threshold > 0".into(),
                    ));
                }
            }
            Command::SweepComplexity => {
                if self.sweep_n.is_empty() || self.sweep_d.is_empty() {
                    return Err(CliError::Validation("sweep_n and sweep_d must be non-empty".into()));
                }
                let all = self.sweep_n.iter().chain(&self.sweep_d);
                if all.chain([&self.sweep_heads, &self.sweep_input_dim, &self.sweep_components]).any(|&v| v == 0) {
                    return Err(CliError::Validation("sweep sizes must be positive".into()));
                }
                if self.sweep_heads % self.sweep_components != 0 {
                    return Err(CliError::Validation(format!(
                        "sweep_heads {} must be a multiple of sweep_components {}",
                        self.sweep_heads, self.sweep_components
                    )));
                }
            }
            Command::Gradcheck => {}
            Command::Equivalence => {
                if let Some(p) = self.sigma2_perturbation {
                    if !(p > 0.0) || !p.is_finite() {
                        return Err(CliError::Validation("sigma2_perturbation must be positive".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::parse(r#"{"command": "train", "seed": 7}"#).unwrap();
        assert_eq!(c.command, Command::Train);
        let spec = c.model_spec();
        assert_eq!((spec.layers, spec.model_dim, spec.ff_hidden), (2, 64, 128));
        assert_eq!(spec.attention.components, 2);
        assert_eq!(c.task_spec().seed, 7);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn missing_seed_is_named() {
        let err = ExperimentConfig::parse(r#"{"command": "train"}"#).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let err = ExperimentConfig::parse("{\"command\": \"train\",\n \"seed\": 1,\n \"sede\": 2}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sede") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::parse(
            r#"{"command": "train", "seed": 1, "optimizer_preset": "paper", "lr": 0.01,
                "variant": "softmax", "heads": 2, "sigma2": [3.0]}"#,
        )
        .unwrap();
        let t = c.train_config();
        assert_eq!((t.optimizer.lr, t.optimizer.warmup_steps), (0.01, 2000));
        assert_eq!(c.attention().components, 1);
        assert_eq!(c.attention().sigma2, vec![3.0]);
    }

    #[test]
    fn inconsistent_sweep_rejected() {
        let c = ExperimentConfig::parse(
            r#"{"command": "sweep-complexity", "seed": 1, "sweep_heads": 3, "sweep_components": 2}"#,
        )
        .unwrap();
        assert!(matches!(c.validate(), Err(CliError::Validation(_))));
    }
}
