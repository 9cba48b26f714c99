//! Toy latent codec, text stub, UNet denoiser, control branch and the
//! 2D→3D inflation that reuses image weights for video.
//!
//! Internally feature maps are channel-last (`F × H × W × C`); every public
//! entry point takes and returns `[F, C, H, W]` tensors.

mod blocks;
mod checkpoint;
mod codec;
pub(crate) mod control;
pub(crate) mod layers;
mod text;
pub(crate) mod unet;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use blocks::{
    BasicBlock, CrossAttention, FeedForward, ResBlock, SelfAttention, TimeEmbed, TransformerBlock,
};
pub use checkpoint::{config_hash, Checkpoint, TensorEntry};
pub use codec::{LatentCodec, LATENT_CHANNELS};
pub use control::{ConditionStem, ControlBranch};
pub use layers::{Conv2d, GroupNorm, LayerNorm, Linear, Params};
pub use text::{TextEmbedding, TextEncoder};
pub use unet::{Encoder, UNet};

use crate::attention::FrameSamplingPlan;
use crate::error::{Error, Result};
use crate::numerics::{Real, SeededRng, Tensor};
use crate::video::ConditionMap;
use layers::Map;
use unet::Features;

/// Architecture knobs of the toy denoiser and control branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_channels: usize,
    /// Channels of the two resolution levels.
    pub channels: [usize; 2],
    pub heads: usize,
    /// Width of the sinusoidal timestep features.
    pub time_embed_dim: usize,
    /// Width of the projected timestep embedding.
    pub temb_dim: usize,
    pub groups: usize,
    pub text_dim: usize,
    pub text_vocab: usize,
    pub text_max_len: usize,
    pub cond_channels: usize,
    pub stem_hidden: usize,
    /// Codec patch size; also the stride of the condition stem.
    pub patch: usize,
    /// Multiplier applied to codec latents.
    pub latent_scale: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: LATENT_CHANNELS,
            channels: [16, 32],
            heads: 1,
            time_embed_dim: 32,
            temb_dim: 64,
            groups: 4,
            text_dim: 16,
            text_vocab: 512,
            text_max_len: 8,
            cond_channels: 1,
            stem_hidden: 8,
            patch: 4,
            latent_scale: 2.5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [c0, c1] = self.channels;
        if self.latent_channels != LATENT_CHANNELS {
            return Err(Error::invalid(format!(
                "the codec produces {LATENT_CHANNELS} latent channels"
            )));
        }
        if self.patch < 2 || !self.patch.is_power_of_two() {
            return Err(Error::invalid("patch must be a power of two ≥ 2"));
        }
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite()) {
            return Err(Error::invalid("latent_scale must be positive and finite"));
        }
        for c in [c0, c1] {
            if c == 0 || self.groups == 0 || c % self.groups != 0 {
                return Err(Error::invalid(format!(
                    "{c} channels are not divisible into {} groups",
                    self.groups
                )));
            }
            if self.heads == 0 || c % self.heads != 0 {
                return Err(Error::invalid(format!("{} heads do not divide {c}", self.heads)));
            }
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_embed_dim must be even"));
        }
        if [self.temb_dim, self.text_dim, self.text_vocab, self.text_max_len]
            .contains(&0)
            || self.cond_channels == 0
            || self.stem_hidden == 0
        {
            return Err(Error::invalid("model widths must be positive"));
        }
        Ok(())
    }

    pub fn text_encoder(&self) -> TextEncoder {
        TextEncoder::new(self.text_vocab, self.text_dim, self.text_max_len)
    }

    pub fn codec(&self) -> LatentCodec {
        LatentCodec::with_scale(self.patch, self.latent_scale).expect("validated codec")
    }

    pub fn init_unet<T: Real>(&self) -> Result<UNet<T>> {
        self.validate()?;
        Ok(UNet::new(self, &mut SeededRng::stream(self.init_seed, "unet")))
    }

    pub fn init_control<T: Real>(&self, unet: &UNet<T>) -> Result<ControlBranch<T>> {
        self.validate()?;
        let mut rng = SeededRng::stream(self.init_seed, "control");
        Ok(ControlBranch::from_unet(unet, self, &mut rng))
    }
}

/// The 2D denoiser as trained on single frames.
pub type ImageModel<T> = UNet<T>;

/// An image model wired for video: per-frame convolutions and cross-frame
/// attention following `plan`. Holds no parameters of its own.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoModel<T> {
    pub unet: UNet<T>,
    pub plan: FrameSamplingPlan,
}

/// Wraps `m` for video. The plan's frame count is only a default; every call
/// adapts it to the input length.
pub fn inflate_2d_to_3d<T: Real>(m: &ImageModel<T>, plan: &FrameSamplingPlan) -> VideoModel<T> {
    VideoModel {
        unet: m.clone(),
        plan: plan.clone(),
    }
}

/// Residual features added at the two skip connections and the middle
/// block.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlResiduals<T> {
    pub(crate) feats: Features<T>,
}

impl<T: Real> ControlResiduals<T> {
    /// `[skip1, skip2, mid]` as `[F, C, H, W]` tensors.
    pub fn to_tensors(&self) -> [Tensor<T>; 3] {
        self.feats.maps().map(|m| m.to_fchw())
    }

    pub fn from_tensors(skip1: &Tensor<T>, skip2: &Tensor<T>, mid: &Tensor<T>) -> Result<Self> {
        for t in [skip1, skip2, mid] {
            if t.rank() != 4 {
                return Err(Error::shape("residuals must be [F, C, H, W]"));
            }
        }
        Ok(Self {
            feats: Features {
                skip1: Map::from_fchw(skip1),
                skip2: Map::from_fchw(skip2),
                mid: Map::from_fchw(mid),
            },
        })
    }

    pub fn shapes(&self) -> [Vec<usize>; 3] {
        self.feats.maps().map(|m| vec![m.f, m.c, m.h, m.w])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            feats: self.feats.zeros_like(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.feats
            .maps()
            .iter()
            .flat_map(|m| m.data.iter())
            .fold(0.0, |a, &v| a.max(v.f64().abs()))
    }
}

/// Shapes of the injection points for a `[F, C, H, W]` latent.
pub fn injection_shapes<T: Real>(unet: &UNet<T>, f: usize, h: usize, w: usize) -> [Vec<usize>; 3] {
    let c0 = unet.encoder.conv_in.c_out();
    let c1 = unet.encoder.mid.res.conv2.c_out();
    [
        vec![f, c0, h, w],
        vec![f, c1, h / 2, w / 2],
        vec![f, c1, h / 2, w / 2],
    ]
}

fn check_latent<T: Real>(unet: &UNet<T>, z: &Tensor<T>) -> Result<()> {
    let c = unet.encoder.conv_in.c_in();
    let d = z.dims();
    if z.rank() != 4 || d[1] != c {
        return Err(Error::shape(format!("latent must be [F, {c}, H, W], got {d:?}")));
    }
    if !d[2].is_multiple_of(2) || !d[3].is_multiple_of(2) {
        return Err(Error::shape(format!("latent sides must be even, got {d:?}")));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("latent".into()));
    }
    Ok(())
}

/// ε prediction for every frame of `z_t` at timestep `t`.
pub fn unet_denoise<T: Real>(
    model: &VideoModel<T>,
    z_t: &Tensor<T>,
    t: usize,
    text: &TextEmbedding<T>,
    residuals: Option<&ControlResiduals<T>>,
) -> Result<Tensor<T>> {
    check_latent(&model.unet, z_t)?;
    let d = z_t.dims();
    let f = d[0];
    if let Some(r) = residuals {
        let want = injection_shapes(&model.unet, f, d[2], d[3]);
        if r.shapes() != want {
            return Err(Error::shape(format!(
                "residual shapes {:?} do not match injection points {want:?}",
                r.shapes()
            )));
        }
    }
    let plan = model.plan.with_frames(f)?;
    let texts = vec![text.tensor(); f];
    let x = Map::from_fchw(z_t);
    let (out, _) = model.unet.forward(
        &x,
        &vec![t; f],
        &texts,
        &plan,
        residuals.map(|r| &r.feats),
        false,
    );
    Ok(out.to_fchw())
}

/// Control residuals for `c_cond` at timestep `t`. `plan` selects frame-wise
/// (self) or cross-frame attention inside the branch.
pub fn control_forward<T: Real>(
    branch: &ControlBranch<T>,
    c_cond: &Tensor<T>,
    t: usize,
    text: &TextEmbedding<T>,
    plan: &FrameSamplingPlan,
) -> Result<ControlResiduals<T>> {
    let c = branch.encoder.conv_in.c_in();
    let d = c_cond.dims();
    if c_cond.rank() != 4 || d[1] != c || !d[2].is_multiple_of(2) || !d[3].is_multiple_of(2) {
        return Err(Error::shape(format!(
            "condition input must be [F, {c}, H, W] with even sides, got {d:?}"
        )));
    }
    let f = d[0];
    let plan = plan.with_frames(f)?;
    let texts = vec![text.tensor(); f];
    let (feats, _) = branch.forward(&Map::from_fchw(c_cond), &vec![t; f], &texts, &plan, false);
    Ok(ControlResiduals { feats })
}

/// Condition stem applied to every frame: pixel raster to latent grid.
pub fn encode_condition<T: Real>(branch: &ControlBranch<T>, cond: &ConditionMap) -> Result<Tensor<T>> {
    if cond.channels() != branch.stem.c_in() {
        return Err(Error::shape(format!(
            "condition has {} channels, stem expects {}",
            cond.channels(),
            branch.stem.c_in()
        )));
    }
    let stride = 1usize << branch.stem.convs.len();
    if !cond.height().is_multiple_of(stride) || !cond.width().is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "condition size {}×{} is not a multiple of {stride}",
            cond.height(),
            cond.width()
        )));
    }
    let (out, _) = branch.stem.forward(&Map::from_fchw(&cond.tensor().cast::<T>()));
    Ok(out.to_fchw())
}

/// Caption embedding using the configured text stub.
pub fn encode_text<T: Real>(cfg: &ModelConfig, s: &str) -> TextEmbedding<T> {
    cfg.text_encoder().encode(s)
}

/// Every tensor of `p` by dotted name.
pub fn named_params<T: Real>(p: &impl Params<T>) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    p.visit("", &mut |name, t| {
        out.insert(name.to_string(), t.clone());
    });
    out
}

/// Copies tensors by name from `src` into `dst`, converting precision.
pub fn load_named<T: Real, U: Real>(
    dst: &mut impl Params<U>,
    src: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    let mut err = None;
    dst.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match src.get(name) {
            Some(s) if s.dims() == t.dims() => *t = s.cast(),
            Some(s) => {
                err = Some(Error::shape(format!(
                    "{name}: stored {:?}, model expects {:?}",
                    s.dims(),
                    t.dims()
                )))
            }
            None => err = Some(Error::invalid(format!("missing tensor {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

impl<T: Real> UNet<T> {
    pub fn cast<U: Real>(&self, cfg: &ModelConfig) -> Result<UNet<U>> {
        let mut out = UNet::new(cfg, &mut SeededRng::new(0));
        load_named(&mut out, &named_params(self))?;
        Ok(out)
    }
}

impl<T: Real> ControlBranch<T> {
    pub fn cast<U: Real>(&self, cfg: &ModelConfig) -> Result<ControlBranch<U>> {
        let mut rng = SeededRng::new(0);
        let unet = UNet::<U>::new(cfg, &mut rng);
        let mut out = ControlBranch::from_unet(&unet, cfg, &mut rng);
        load_named(&mut out, &named_params(self))?;
        Ok(out)
    }
}

impl<T: Real> VideoModel<T> {
    pub fn cast<U: Real>(&self, cfg: &ModelConfig) -> Result<VideoModel<U>> {
        Ok(VideoModel {
            unet: self.unet.cast(cfg)?,
            plan: self.plan.clone(),
        })
    }
}
