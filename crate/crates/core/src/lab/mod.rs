//! Synthetic data and the toy training runs that stand in for pretrained
//! weights.

mod data;
mod recipe;
mod train;

pub use data::{
    gen_moving_shapes, read_dataset, render_scene, write_dataset, SceneConfig, ShapeKind,
    ShapeTrack, StoredScene, SyntheticScene,
};
pub use recipe::{RecipeReport, ToyRecipe};
pub use train::{
    control_loss, control_loss_and_grads, image_loss, image_loss_and_grads, prepare_scenes,
    sample_batch, train_control_branch, train_image_denoiser, Adam, DenoiseBatch, PreparedScene,
    TrainConfig, TrainReport,
};
