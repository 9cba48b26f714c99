//! The fixed toy training run: small scenes, image denoiser, then control
//! branch. Numbers were chosen by calibration on a single CPU core.

use serde::{Deserialize, Serialize};

use super::data::{gen_moving_shapes, SceneConfig, StoredScene, SyntheticScene};
use super::train::{train_control_branch, train_image_denoiser, TrainConfig, TrainReport};
use crate::error::Result;
use crate::network::{Checkpoint, ModelConfig};
use crate::numerics::SeededRng;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRecipe {
    pub scenes: usize,
    pub data_seed: u64,
    pub scene: SceneConfig,
    pub image: TrainConfig,
    pub control: TrainConfig,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        Self {
            scenes: 96,
            data_seed: 1,
            scene: SceneConfig::toy(),
            image: TrainConfig {
                steps: 4000,
                batch_size: 16,
                lr: 5e-3,
                ema_decay: 0.995,
                ..TrainConfig::default()
            },
            control: TrainConfig {
                steps: 2000,
                batch_size: 16,
                lr: 2e-3,
                ema_decay: 0.995,
                ..TrainConfig::default()
            },
        }
    }
}

/// Reports of both training stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub image: TrainReport,
    pub control: TrainReport,
}

impl ToyRecipe {
    pub fn dataset(&self, patch: usize) -> Result<Vec<SyntheticScene>> {
        gen_moving_shapes(self.scenes, &self.scene, patch, &mut SeededRng::new(self.data_seed))
    }

    /// `n` scenes from a different seed, for evaluation.
    pub fn held_out(&self, n: usize, seed: u64, patch: usize) -> Result<Vec<SyntheticScene>> {
        gen_moving_shapes(n, &self.scene, patch, &mut SeededRng::new(seed))
    }

    pub fn train(&self, model: &ModelConfig, sched: &NoiseSchedule) -> Result<(Checkpoint, RecipeReport)> {
        let scenes: Vec<StoredScene> = self.dataset(model.patch)?.iter().map(Into::into).collect();
        self.train_on(&scenes, model, sched)
    }

    pub fn train_on(
        &self,
        scenes: &[StoredScene],
        model: &ModelConfig,
        sched: &NoiseSchedule,
    ) -> Result<(Checkpoint, RecipeReport)> {
        let (unet, image) = train_image_denoiser(scenes, model, sched, &self.image)?;
        let (control, control_report) = train_control_branch(scenes, &unet, model, sched, &self.control)?;
        Ok((
            Checkpoint {
                config: model.clone(),
                unet,
                control: Some(control),
            },
            RecipeReport {
                image,
                control: control_report,
            },
        ))
    }
}
