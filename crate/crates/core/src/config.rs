//! Run configuration: one TOML file drives every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::util::fnv1a64;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Raw interaction log; CSV or TSV by extension.
    pub raw_path: Option<String>,
    pub user_core: usize,
    pub item_core: usize,
    pub max_len: usize,
    pub num_negatives: usize,
    /// Keep only the most recent training windows per user (0 = all).
    pub max_windows_per_user: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            raw_path: None,
            user_core: 10,
            item_core: 15,
            max_len: 50,
            num_negatives: 999,
            max_windows_per_user: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            layers: 2,
            heads: 2,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelocityMode {
    /// v = (mu - x) / t; exact on straight-line paths.
    Derived,
    /// v = mu, the literal one-step update form.
    Literal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Number of mixture components K.
    pub components: usize,
    pub lambda: f64,
    /// ODE solver step count T.
    pub solver_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Size of the sinusoidal timestep encoding fed to the head (even).
    pub time_enc_dim: usize,
    pub velocity: VelocityMode,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            components: 4,
            lambda: 0.5,
            solver_steps: 8,
            sigma_min: 1e-3,
            sigma_max: 1e2,
            time_enc_dim: 8,
            velocity: VelocityMode::Derived,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stop patience in validation evaluations (one per epoch).
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 256,
            max_epochs: 100,
            patience: 10,
        }
    }
}

/// Hyperparameter grids used by the tuning protocol.
pub const ALPHA_GRID: [f64; 4] = [0.0, 0.1, 0.5, 1.0];
pub const BETA_GRID: [f64; 6] = [0.0, 1e-5, 1e-4, 1e-2, 0.1, 1.0];
pub const COMPONENT_GRID: [usize; 6] = [2, 4, 6, 8, 16, 32];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Transition-rate bucket cutoffs: low < `transition_low` <= mid <
    /// `transition_high` <= high.
    pub transition_low: f64,
    pub transition_high: f64,
    /// Few-shot bucket: fewer than this many in-domain prefix interactions.
    pub few_shot_threshold: usize,
    /// Repetitions for wall-clock medians in the timing report.
    pub timing_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            transition_low: 1.0 / 3.0,
            transition_high: 2.0 / 3.0,
            few_shot_threshold: 5,
            timing_runs: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: DataConfig,
    pub synth: Option<SynthConfig>,
    pub encoder: EncoderConfig,
    pub flow: FlowConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    /// Validate every field against its module's preconditions before any
    /// work starts.
    pub fn validate(&self) -> Result<()> {
        if self.encoder.dim == 0 || self.encoder.layers == 0 || self.encoder.heads == 0 {
            return Err(Error::Config("encoder: dim/layers/heads must be positive".into()));
        }
        if self.encoder.dim % self.encoder.heads != 0 {
            return Err(Error::Config(format!(
                "encoder: heads {} must divide dim {}",
                self.encoder.heads, self.encoder.dim
            )));
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            return Err(Error::Config(format!(
                "encoder: dropout {} outside [0, 1)",
                self.encoder.dropout
            )));
        }
        if self.data.max_len < 3 {
            return Err(Error::Config("data: max_len must be >= 3".into()));
        }
        if self.data.num_negatives == 0 {
            return Err(Error::Config("data: num_negatives must be positive".into()));
        }
        if self.flow.components == 0 {
            return Err(Error::Config("flow: components must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flow.lambda) {
            return Err(Error::Config(format!(
                "flow: lambda {} outside [0, 1]",
                self.flow.lambda
            )));
        }
        if self.flow.solver_steps == 0 {
            return Err(Error::Config("flow: solver_steps must be >= 1".into()));
        }
        if !(self.flow.sigma_min > 0.0 && self.flow.sigma_min < self.flow.sigma_max) {
            return Err(Error::Config("flow: need 0 < sigma_min < sigma_max".into()));
        }
        if self.flow.time_enc_dim == 0 || self.flow.time_enc_dim % 2 != 0 {
            return Err(Error::Config("flow: time_enc_dim must be a positive even number".into()));
        }
        if !(self.loss.alpha >= 0.0 && self.loss.alpha.is_finite())
            || !(self.loss.beta >= 0.0 && self.loss.beta.is_finite())
        {
            return Err(Error::Config("loss: alpha/beta must be finite and non-negative".into()));
        }
        if self.train.learning_rate <= 0.0 {
            return Err(Error::Config("train: learning_rate must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be >= 1".into()));
        }
        if self.train.patience == 0 {
            return Err(Error::Config("train: patience must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.transition_low)
            || !(0.0..=1.0).contains(&self.eval.transition_high)
            || self.eval.transition_low > self.eval.transition_high
        {
            return Err(Error::Config("eval: bad transition-rate cutoffs".into()));
        }
        if let Some(synth) = &self.synth {
            synth.validate()?;
        }
        Ok(())
    }

    /// Stable hash of the canonical JSON form; embedded in every artifact.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_hash_is_stable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn toml_round_trip_with_overrides() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seed = 9
            [encoder]
            dim = 32
            heads = 4
            [flow]
            components = 2
            velocity = "literal"
            [loss]
            alpha = 0.5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.encoder.dim, 32);
        assert_eq!(cfg.flow.velocity, VelocityMode::Literal);
        assert_eq!(cfg.loss.alpha, 0.5);
        // untouched fields keep defaults
        assert_eq!(cfg.train.batch_size, 256);
    }

    #[test]
    fn invalid_fields_are_rejected_before_work_starts() {
        assert!(RunConfig::from_toml_str("[encoder]\ndim = 30\nheads = 4").is_err());
        assert!(RunConfig::from_toml_str("[flow]\nlambda = 1.5").is_err());
        assert!(RunConfig::from_toml_str("[train]\nlearning_rate = 0.0").is_err());
    }

    #[test]
    fn different_configs_hash_differently() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
