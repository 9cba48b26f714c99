//! Shared-noise construction and the conditional video sampling loop.

use serde::{Deserialize, Serialize};

use crate::attention::FrameSamplingPlan;
use crate::error::{Error, Result};
use crate::network::{
    control_forward, encode_condition, inflate_2d_to_3d, unet_denoise, ControlBranch, ModelConfig,
    TextEmbedding, UNet, VideoModel,
};
use crate::numerics::{gaussian_noise, Real, SeededRng, Tensor};
use crate::schedule::{ddim_invert, ddim_step, NoiseSchedule, StepPlan};
use crate::video::{ConditionMap, RgbVideo};

/// Stream labels; distinct labels keep ε_b and ε_c independent even when
/// the two seeds coincide.
const BACKGROUND_STREAM: &str = "epsilon_b";
const CONDITION_STREAM: &str = "epsilon_c";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    Noise,
    Inverted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    EpsilonB,
    Inverted,
}

/// Initial latent `z_T` and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundLatent<T> {
    pub z_t: Tensor<T>,
    pub provenance: Provenance,
}

/// Draws one `[C, H, W]` frame from the ε_b stream of `seed_b` and repeats
/// it `frames` times. Returns the latent and the stream's final counter.
pub fn make_background_noise<T: Real>(
    seed_b: u64,
    frames: usize,
    latent: [usize; 3],
) -> Result<(BackgroundLatent<T>, u64)> {
    let mut rng = SeededRng::stream(seed_b, BACKGROUND_STREAM);
    let z_t = replicated_noise(&mut rng, frames, latent)?;
    Ok((
        BackgroundLatent {
            z_t,
            provenance: Provenance::EpsilonB,
        },
        rng.counter(),
    ))
}

fn replicated_noise<T: Real>(rng: &mut SeededRng, frames: usize, [c, h, w]: [usize; 3]) -> Result<Tensor<T>> {
    if frames == 0 {
        return Err(Error::invalid("frame count must be positive"));
    }
    let one: Tensor<T> = gaussian_noise(&[c, h, w], rng)?;
    Tensor::new(&[frames, c, h, w], one.data().repeat(frames))
}

/// `C_cond = ε_c + E_c(cond)` with one ε_c frame shared by all frames.
/// Returns the input and the ε_c stream's final counter.
pub fn make_condition_input<T: Real>(
    branch: &ControlBranch<T>,
    cond: &ConditionMap,
    seed_c: u64,
    noise_scale: f64,
) -> Result<(Tensor<T>, u64)> {
    let enc = encode_condition(branch, cond)?;
    let d = enc.dims();
    let mut rng = SeededRng::stream(seed_c, CONDITION_STREAM);
    let eps = replicated_noise::<T>(&mut rng, d[0], [d[1], d[2], d[3]])?;
    Ok((enc.lincomb(T::one(), &eps, T::lit(noise_scale))?, rng.counter()))
}

/// Where the control branch's attention reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Frame-wise branch: every frame attends only to itself.
    #[serde(rename = "2d")]
    TwoD,
    /// Branch inflated with the same plan as the denoiser.
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub condition: ConditionMap,
    pub text: String,
    pub reference_video: Option<RgbVideo>,
    pub seed_b: u64,
    pub seed_c: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub plan: FrameSamplingPlan,
    pub control: ControlMode,
    pub background: BackgroundMode,
    /// Multiplier on ε_c.
    pub cond_noise_scale: f64,
    /// Invert with the prompt embedding instead of the empty one.
    pub conditional_inversion: bool,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.background == BackgroundMode::Inverted && self.reference_video.is_none() {
            return Err(Error::invalid(
                "background mode 'inverted' requires a reference video",
            ));
        }
        if let Some(v) = &self.reference_video {
            if v.frame_count() != self.condition.frame_count() {
                return Err(Error::shape(format!(
                    "reference video has {} frames, condition has {}",
                    v.frame_count(),
                    self.condition.frame_count()
                )));
            }
        }
        if !self.guidance_scale.is_finite() || !self.cond_noise_scale.is_finite() {
            return Err(Error::invalid("scales must be finite"));
        }
        Ok(())
    }
}

/// Trained weights plus their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Models<T> {
    pub config: ModelConfig,
    pub unet: UNet<T>,
    pub control: ControlBranch<T>,
}

impl<T: Real> Models<T> {
    pub fn cast<U: Real>(&self) -> Result<Models<U>> {
        Ok(Models {
            config: self.config.clone(),
            unet: self.unet.cast(&self.config)?,
            control: self.control.cast(&self.config)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation<T> {
    pub video: RgbVideo,
    pub latents: Tensor<T>,
    pub provenance: Provenance,
    /// Final counters of the ε_b and ε_c streams (ε_b is zero when the
    /// background came from inversion).
    pub counter_b: u64,
    pub counter_c: u64,
}

/// Background latent by DDIM inversion of `video` through the denoiser
/// alone.
pub fn invert_video<T: Real>(
    model: &VideoModel<T>,
    codec_video: &Tensor<T>,
    text: &TextEmbedding<T>,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<BackgroundLatent<T>> {
    let plan = StepPlan::uniform(sched.steps(), steps)?;
    let z_t = ddim_invert(
        codec_video,
        |z, t, c: &TextEmbedding<T>| unet_denoise(model, z, t, c, None),
        sched,
        &plan,
        text,
    )?;
    Ok(BackgroundLatent {
        z_t,
        provenance: Provenance::Inverted,
    })
}

/// Conditional video sampling: background latent, condition input and
/// caption embedding once, then one control pass and one guided denoiser
/// step per timestep.
pub fn generate<T: Real>(
    req: &GenerationRequest,
    models: &Models<T>,
    sched: &NoiseSchedule,
) -> Result<Generation<T>> {
    req.validate()?;
    run(req, models, sched, None)
}

/// As [`generate`] but starts from a precomputed inverted latent, e.g. one
/// written by an earlier inversion. `req.reference_video` is ignored.
pub fn generate_from_latent<T: Real>(
    req: &GenerationRequest,
    models: &Models<T>,
    sched: &NoiseSchedule,
    background: BackgroundLatent<T>,
) -> Result<Generation<T>> {
    let mut check = req.clone();
    check.reference_video = None;
    check.background = BackgroundMode::Noise;
    check.validate()?;
    run(req, models, sched, Some(background))
}

fn run<T: Real>(
    req: &GenerationRequest,
    models: &Models<T>,
    sched: &NoiseSchedule,
    given: Option<BackgroundLatent<T>>,
) -> Result<Generation<T>> {
    let cfg = &models.config;
    let codec = cfg.codec();
    let f = req.condition.frame_count();
    let plan = req.plan.with_frames(f)?;
    let video_model = inflate_2d_to_3d(&models.unet, &plan);
    let control_plan = match req.control {
        ControlMode::TwoD => FrameSamplingPlan::per_frame(f),
        ControlMode::ThreeD => plan.clone(),
    };
    let text_enc = cfg.text_encoder();
    let c_text: TextEmbedding<T> = text_enc.encode(&req.text);
    let empty: TextEmbedding<T> = text_enc.encode("");

    let (c_cond, counter_c) =
        make_condition_input(&models.control, &req.condition, req.seed_c, req.cond_noise_scale)?;
    let latent = [c_cond.dims()[1], c_cond.dims()[2], c_cond.dims()[3]];

    let (background, counter_b) = match (given, &req.background, &req.reference_video) {
        (Some(b), _, _) => {
            if b.z_t.dims() != c_cond.dims() {
                return Err(Error::shape(format!(
                    "background latent {:?} does not match the condition grid {:?}",
                    b.z_t.dims(),
                    c_cond.dims()
                )));
            }
            (b, 0)
        }
        (None, BackgroundMode::Inverted, Some(video)) => {
            let z0: Tensor<T> = codec.encode(video)?;
            if z0.dims()[1..] != latent[..] {
                return Err(Error::shape(format!(
                    "reference latents {:?} do not match the condition grid {latent:?}",
                    &z0.dims()[1..]
                )));
            }
            let inv_text = if req.conditional_inversion { &c_text } else { &empty };
            (invert_video(&video_model, &z0, inv_text, sched, req.steps)?, 0)
        }
        _ => make_background_noise(req.seed_b, f, latent)?,
    };

    let steps = StepPlan::uniform(sched.steps(), req.steps)?;
    let w = T::lit(req.guidance_scale);
    let mut z = background.z_t.clone();
    for &(t, t_prev) in steps.pairs() {
        let residuals = control_forward(&models.control, &c_cond, t, &c_text, &control_plan)?;
        let eps_c = unet_denoise(&video_model, &z, t, &c_text, Some(&residuals))?;
        let eps = if req.guidance_scale > 1.0 {
            let eps_u = unet_denoise(&video_model, &z, t, &empty, None)?;
            eps_u.zip_map(&eps_c, |u, c| u + w * (c - u))?
        } else {
            eps_c
        };
        z = ddim_step(&z, &eps, t, t_prev, sched)?;
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("sampled latents".into()));
    }
    Ok(Generation {
        video: codec.decode(&z)?,
        latents: z,
        provenance: background.provenance,
        counter_b,
        counter_c,
    })
}
