//! The run configuration document and the named ablation variants.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::BehaviorPolicy;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::Precision;
use crate::planner::GuidanceConfig;
use crate::training::TrainConfig;
use crate::world::WorldModelConfig;

fn default_env() -> EnvSpec {
    EnvSpec::linear_point_default()
}
fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_policy")]
    pub policy: BehaviorPolicy,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Standard deviation of Gaussian noise added to expert actions.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
}

fn default_policy() -> BehaviorPolicy {
    BehaviorPolicy::Mixed
}
fn default_episodes() -> usize {
    100
}
fn default_noise() -> f64 {
    0.3
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            policy: default_policy(),
            episodes: default_episodes(),
            noise_scale: default_noise(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_episodes")]
    pub episodes: usize,
    /// Seed of the first evaluation episode; episode `i` uses `seed + i`.
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
    /// Training seeds used by sweeps.
    #[serde(default = "default_sweep_seeds")]
    pub seeds: Vec<u64>,
}

fn default_eval_episodes() -> usize {
    20
}
fn default_eval_seed() -> u64 {
    1_000_000
}
fn default_sweep_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: default_eval_episodes(),
            seed: default_eval_seed(),
            seeds: default_sweep_seeds(),
        }
    }
}

/// Named variants that switch off one part of the method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "full")]
    Full,
    /// Plain noise regression instead of the return-weighted one.
    #[serde(rename = "w/o-weighting")]
    WithoutWeighting,
    #[serde(rename = "w/o-tr")]
    WithoutTransitionLoss,
    #[serde(rename = "w/o-rd")]
    WithoutRewardLoss,
    /// Reward-only guidance at sampling time.
    #[serde(rename = "w/o-tr-guide")]
    WithoutTransitionGuide,
    /// Unweighted, unmodulated training and unguided sampling.
    #[serde(rename = "baseline")]
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::WithoutWeighting,
        Ablation::WithoutTransitionLoss,
        Ablation::WithoutRewardLoss,
        Ablation::WithoutTransitionGuide,
        Ablation::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutWeighting => "w/o-weighting",
            Ablation::WithoutTransitionLoss => "w/o-tr",
            Ablation::WithoutRewardLoss => "w/o-rd",
            Ablation::WithoutTransitionGuide => "w/o-tr-guide",
            Ablation::Baseline => "baseline",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase().replace(['λ', '_'], "").replace("lambda", "");
        let found = match key.as_str() {
            "full" | "dmemm" => Ablation::Full,
            "w/o-weighting" | "wo-weighting" => Ablation::WithoutWeighting,
            "w/o-tr" | "wo-tr" => Ablation::WithoutTransitionLoss,
            "w/o-rd" | "wo-rd" => Ablation::WithoutRewardLoss,
            "w/o-tr-guide" | "wo-tr-guide" => Ablation::WithoutTransitionGuide,
            "baseline" => Ablation::Baseline,
            _ => {
                return Err(Error::config(format!(
                    "unknown ablation {name:?}; expected one of full, w/o-weighting, w/o-tr, w/o-rd, w/o-tr-guide, baseline"
                )))
            }
        };
        Ok(found)
    }

    /// Switches the corresponding terms off in `cfg`.
    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Ablation::Full => {}
            Ablation::WithoutWeighting => cfg.train.use_weighting = false,
            Ablation::WithoutTransitionLoss => cfg.train.use_transition_loss = false,
            Ablation::WithoutRewardLoss => cfg.train.use_reward_loss = false,
            Ablation::WithoutTransitionGuide => cfg.guidance.guide_transition = false,
            Ablation::Baseline => {
                cfg.train.use_weighting = false;
                cfg.train.use_transition_loss = false;
                cfg.train.use_reward_loss = false;
                cfg.guidance.alpha = 0.0;
            }
        }
        cfg.ablation = Some(self);
    }
}

/// Everything one experiment needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for data collection, model initialization and training.
    #[serde(default)]
    pub seed: u64,
    /// Parameter storage precision for every trained network.
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_env")]
    pub env: EnvSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub world_model: WorldModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: default_precision(),
            env: default_env(),
            data: DataConfig::default(),
            world_model: WorldModelConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
            ablation: None,
        }
    }
}

impl RunConfig {
    /// Parses a TOML document; errors name the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| Error::config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path.is_empty() || path == "." {
                Error::config(msg)
            } else {
                Error::config(format!("at `{path}`: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.world_model.validate()?;
        self.train.validate()?;
        self.guidance.validate()?;
        if self.data.episodes == 0 {
            return Err(Error::config("data.episodes must be >= 1"));
        }
        if !(self.data.noise_scale >= 0.0) {
            return Err(Error::config("data.noise_scale must be >= 0"));
        }
        if self.train.horizon > self.env.horizon() {
            return Err(Error::config(format!(
                "train.horizon {} exceeds the environment horizon {}",
                self.train.horizon,
                self.env.horizon()
            )));
        }
        Ok(())
    }

    /// World-model settings with the master seed and precision filled in.
    pub fn world_config(&self) -> WorldModelConfig {
        WorldModelConfig {
            seed: self.seed,
            precision: self.precision,
            ..self.world_model.clone()
        }
    }

    /// Training settings with the master seed and precision filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            precision: self.precision,
            ..self.train.clone()
        }
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let mut cfg = self.clone();
        ablation.apply(&mut cfg);
        cfg
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lambda_tr, 0.1);
        assert_eq!(cfg.guidance.alpha, 0.001);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("[train]\nlamda_tr = 0.2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lamda_tr"), "{msg}");
        assert!(msg.contains("train"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn env_section_parses() {
        let text = r#"
seed = 3
[env]
kind = "linear_point"
horizon = 2
a = [[1.0]]
b = [[1.0]]
goal = [0.0]
q = [[1.0]]
rw = [[1.0]]
start_low = [1.0]
start_high = [1.0]
expert_gain = [[0.5]]
[train]
horizon = 2
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.env.state_dim(), 1);
        assert_eq!(cfg.train_config().seed, 3);
        let bad = text.replace("expert_gain", "expert_gian");
        assert!(RunConfig::from_toml_str(&bad).unwrap_err().to_string().contains("expert_gian"));
    }

    #[test]
    fn ablations_toggle_terms_and_round_trip_through_the_echo() {
        let base = RunConfig::default();
        let cfg = base.with_ablation(Ablation::WithoutRewardLoss);
        assert!(!cfg.train.use_reward_loss);
        assert_eq!(cfg.train_config().effective_lambda_rd(), 0.0);
        let echo = cfg.echo();
        assert_eq!(echo["ablation"], "w/o-rd");
        assert_eq!(echo["train"]["use_reward_loss"], false);
        let back: RunConfig = serde_json::from_value(echo).unwrap();
        assert_eq!(back, cfg);
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert_eq!(Ablation::parse("w/o-λ_tr").unwrap(), Ablation::WithoutTransitionLoss);
        assert!(Ablation::parse("nope").is_err());
        let b = base.with_ablation(Ablation::Baseline);
        assert_eq!(b.guidance.alpha, 0.0);
    }
}
