use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use condvid::attention::{AttentionMode, DEFAULT_GAP};
use condvid::lab::{SceneConfig, ToyRecipe, TrainConfig};
use condvid::metrics::AblationConfig;
use condvid::network::ModelConfig;
use condvid::sampler::{BackgroundMode, ControlMode};
use condvid::schedule::ScheduleConfig;

/// Everything a command needs, as one JSON document. Missing keys take
/// their defaults; unknown keys are rejected. Defaults follow the toy recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub train_image: TrainConfig,
    pub train_control: TrainConfig,
    pub generation: GenerationConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
    /// Checkpoint directory read by generate, invert and ablate.
    pub checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let recipe = ToyRecipe::default();
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            train_image: recipe.image,
            train_control: recipe.control,
            generation: GenerationConfig::default(),
            ablation: AblationConfig {
                guidance_scale: TOY_GUIDANCE,
                ..AblationConfig::default()
            },
            eval: EvalConfig::default(),
            checkpoint: PathBuf::new(),
        }
    }
}

/// Guidance weight that suits the toy models; larger weights wash out the
/// foreground.
pub const TOY_GUIDANCE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let recipe = ToyRecipe::default();
        Self {
            scenes: recipe.scenes,
            seed: recipe.data_seed,
            scene: recipe.scene,
        }
    }
}

/// Held-out clips for `ablate`, and the fallback condition for `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scenes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { scenes: 8, seed: 999 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Prompt; empty means the caption of the fallback scene.
    pub text: String,
    pub seed_b: u64,
    pub seed_c: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub mode: AttentionMode,
    pub gap: usize,
    pub control: ControlMode,
    pub background: BackgroundMode,
    pub cond_noise_scale: f64,
    pub conditional_inversion: bool,
    /// Run the sampler in 64-bit floats.
    pub f64: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            text: String::new(),
            seed_b: 0,
            seed_c: 0,
            steps: 50,
            guidance_scale: TOY_GUIDANCE,
            mode: AttentionMode::Sbist,
            gap: DEFAULT_GAP,
            control: ControlMode::ThreeD,
            background: BackgroundMode::Noise,
            cond_noise_scale: 1.0,
            conditional_inversion: false,
            f64: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(condvid::network::config_hash(self)?)
    }
}
