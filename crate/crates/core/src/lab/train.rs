//! ε-prediction training of the image denoiser and of the control branch,
//! both frame-wise.

use serde::{Deserialize, Serialize};

use super::data::StoredScene;
use crate::attention::FrameSamplingPlan;
use crate::error::{Error, Result};
use crate::network::layers::Map;
use crate::network::{ControlBranch, ModelConfig, Params, TextEmbedding, UNet};
use crate::numerics::{Real, SeededRng, Tensor};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Frames per step.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing a caption with the empty string.
    pub text_dropout: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    /// Decay of the weight moving average that is returned; 0 returns the
    /// raw weights.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            text_dropout: 0.1,
            grad_clip: 1.0,
            cosine_decay: true,
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    /// Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid("steps, batch_size and lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.text_dropout) {
            return Err(Error::invalid("text_dropout must be in [0, 1]"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("grad_clip must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay must be in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate used at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cosine_decay {
            let p = step as f64 / self.steps as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * p).cos())
        } else {
            self.lr
        }
    }
}

/// One batch of independent frames for the ε-prediction objective.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseBatch<T> {
    /// Clean latents `[B, C, h, w]`.
    pub z0: Tensor<T>,
    pub noise: Tensor<T>,
    pub ts: Vec<usize>,
    pub texts: Vec<TextEmbedding<T>>,
    /// Pixel-resolution conditions `[B, 1, H, W]` and the latent-resolution
    /// noise added to their encoding; control training only.
    pub cond: Option<Tensor<T>>,
    pub cond_noise: Option<Tensor<T>>,
}

impl<T: Real> DenoiseBatch<T> {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    fn noised(&self, sched: &NoiseSchedule) -> Result<Map<T>> {
        let b = self.len();
        let slab = self.z0.slab_len();
        let mut data = Vec::with_capacity(self.z0.len());
        for i in 0..b {
            let ab = sched.alpha_bar(self.ts[i])?;
            let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
            data.extend(
                self.z0.slab(i)[..slab]
                    .iter()
                    .zip(self.noise.slab(i))
                    .map(|(&z, &n)| a * z + s * n),
            );
        }
        Ok(Map::from_fchw(&Tensor::new(self.z0.dims(), data)?))
    }

    fn text_refs(&self) -> Vec<&Tensor<T>> {
        self.texts.iter().map(|t| t.tensor()).collect()
    }

    fn check(&self) -> Result<()> {
        let b = self.len();
        if b == 0 || self.z0.rank() != 4 || self.z0.dims()[0] != b || self.texts.len() != b {
            return Err(Error::shape("batch fields disagree on the frame count"));
        }
        self.noise.expect_same_dims(&self.z0)?;
        Ok(())
    }
}

/// Mean squared error and its gradient with respect to the prediction.
fn mse<T: Real>(pred: &Map<T>, target: &Map<T>) -> (f64, Map<T>) {
    let n = pred.data.len() as f64;
    let mut loss = 0.0;
    let scale = T::lit(2.0 / n);
    let grad = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d.f64() * d.f64();
            d * scale
        })
        .collect();
    (loss / n, pred.like(grad))
}

fn check_loss(step: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged { step, loss })
    }
}

/// Denoiser loss without gradients.
pub fn image_loss<T: Real>(unet: &UNet<T>, batch: &DenoiseBatch<T>, sched: &NoiseSchedule) -> Result<f64> {
    batch.check()?;
    let plan = FrameSamplingPlan::per_frame(batch.len());
    let texts = batch.text_refs();
    let (pred, _) = unet.forward(&batch.noised(sched)?, &batch.ts, &texts, &plan, None, false);
    Ok(mse(&pred, &Map::from_fchw(&batch.noise)).0)
}

/// Denoiser loss and its gradient with respect to every parameter.
pub fn image_loss_and_grads<T: Real>(
    unet: &UNet<T>,
    batch: &DenoiseBatch<T>,
    sched: &NoiseSchedule,
) -> Result<(f64, UNet<T>)> {
    batch.check()?;
    let plan = FrameSamplingPlan::per_frame(batch.len());
    let texts = batch.text_refs();
    let (pred, cache) = unet.forward(&batch.noised(sched)?, &batch.ts, &texts, &plan, None, true);
    let (loss, dpred) = mse(&pred, &Map::from_fchw(&batch.noise));
    let mut g = unet.zeroed();
    unet.backward(&cache, &dpred, &texts, &plan, &mut g);
    Ok((loss, g))
}

/// Control-branch loss with the denoiser frozen; returns the gradient of
/// every branch parameter when `with_grads` is set.
fn control_pass<T: Real>(
    unet: &UNet<T>,
    branch: &ControlBranch<T>,
    batch: &DenoiseBatch<T>,
    sched: &NoiseSchedule,
    with_grads: bool,
) -> Result<(f64, Option<ControlBranch<T>>)> {
    batch.check()?;
    let (cond, cond_noise) = match (&batch.cond, &batch.cond_noise) {
        (Some(c), Some(n)) => (c, n),
        _ => return Err(Error::invalid("control training needs conditions and their noise")),
    };
    let plan = FrameSamplingPlan::per_frame(batch.len());
    let texts = batch.text_refs();
    let (enc, stem_cache) = branch.stem.forward(&Map::from_fchw(cond));
    let noise_map = Map::from_fchw(cond_noise);
    if enc.data.len() != noise_map.data.len() {
        return Err(Error::shape("condition noise does not match the stem output"));
    }
    let c_cond = enc.add(&noise_map);
    let (res, ccache) = branch.forward(&c_cond, &batch.ts, &texts, &plan, with_grads);
    let (pred, ucache) = unet.forward(
        &batch.noised(sched)?,
        &batch.ts,
        &texts,
        &plan,
        Some(&res),
        with_grads,
    );
    let (loss, dpred) = mse(&pred, &Map::from_fchw(&batch.noise));
    if !with_grads {
        return Ok((loss, None));
    }
    let mut unet_scratch = unet.zeroed();
    let dres = unet.backward(&ucache, &dpred, &texts, &plan, &mut unet_scratch);
    let mut g = branch.zeroed();
    let dc = branch.backward(&ccache, &dres, &texts, &plan, &mut g);
    branch.stem.backward(&stem_cache, &dc, &mut g.stem);
    Ok((loss, Some(g)))
}

pub fn control_loss<T: Real>(
    unet: &UNet<T>,
    branch: &ControlBranch<T>,
    batch: &DenoiseBatch<T>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    Ok(control_pass(unet, branch, batch, sched, false)?.0)
}

pub fn control_loss_and_grads<T: Real>(
    unet: &UNet<T>,
    branch: &ControlBranch<T>,
    batch: &DenoiseBatch<T>,
    sched: &NoiseSchedule,
) -> Result<(f64, ControlBranch<T>)> {
    let (loss, g) = control_pass(unet, branch, batch, sched, true)?;
    Ok((loss, g.expect("gradients were requested")))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of `params` from `grads` (same structure), after scaling
    /// the gradients by `grad_scale`.
    pub fn update<P: Params<T>>(&mut self, params: &mut P, grads: &P, grad_scale: f64) {
        let mut gs: Vec<Vec<T>> = Vec::new();
        grads.visit("", &mut |_, t| gs.push(t.data().to_vec()));
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (tb1, tb2, teps) = (T::lit(b1), T::lit(b2), T::lit(self.eps));
        let (one, gsc) = (T::one(), T::lit(grad_scale));
        let lr_t = T::lit(self.lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let mut idx = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, t| {
            let (mi, vi, gi) = (&mut m[idx], &mut v[idx], &gs[idx]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = gi[j] * gsc;
                mi[j] = tb1 * mi[j] + (one - tb1) * g;
                vi[j] = tb2 * vi[j] + (one - tb2) * g * g;
                *p = *p - lr_t * mi[j] / ((vi[j] * inv_c2).sqrt() + teps);
            }
            idx += 1;
        });
    }
}

fn global_norm<T: Real, P: Params<T>>(g: &P) -> f64 {
    let mut s = 0.0;
    g.visit("", &mut |_, t| s += t.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>());
    s.sqrt()
}

/// Exponential moving average of a parameter set. The decay ramps up as
/// `(1 + n) / (10 + n)` so early weights do not linger.
struct Ema<P> {
    decay: f64,
    updates: usize,
    avg: P,
}

impl<P: Params<f32> + Clone> Ema<P> {
    fn new(decay: f64, p: &P) -> Option<Self> {
        (decay > 0.0).then(|| Self { decay, updates: 0, avg: p.clone() })
    }

    fn update(&mut self, p: &P) {
        let mut cur: Vec<Vec<f32>> = Vec::new();
        p.visit("", &mut |_, t| cur.push(t.data().to_vec()));
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n)) as f32;
        self.updates += 1;
        let mut idx = 0;
        self.avg.visit_mut("", &mut |_, t| {
            for (a, &c) in t.data_mut().iter_mut().zip(&cur[idx]) {
                *a = d * *a + (1.0 - d) * c;
            }
            idx += 1;
        });
    }
}

fn clip_scale(norm: f64, clip: f64) -> f64 {
    if clip > 0.0 && norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// Latents, masks and caption embedding of one scene.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub latents: Tensor<f32>,
    pub cond: Tensor<f32>,
    pub text: TextEmbedding<f32>,
}

pub fn prepare_scenes(scenes: &[StoredScene], cfg: &ModelConfig) -> Result<Vec<PreparedScene>> {
    if scenes.is_empty() {
        return Err(Error::invalid("the training set is empty"));
    }
    let codec = cfg.codec();
    let text = cfg.text_encoder();
    scenes
        .iter()
        .map(|s| {
            Ok(PreparedScene {
                latents: codec.encode(&s.video)?,
                cond: s.cond.tensor().clone(),
                text: text.encode(&s.caption),
            })
        })
        .collect()
}

/// Draws a batch of random (scene, frame, timestep) triples.
pub fn sample_batch(
    data: &[PreparedScene],
    batch_size: usize,
    text_dropout: f64,
    empty_text: &TextEmbedding<f32>,
    sched: &NoiseSchedule,
    with_cond: bool,
    rng: &mut SeededRng,
) -> Result<DenoiseBatch<f32>> {
    let ld = data[0].latents.dims().to_vec();
    let cd = data[0].cond.dims().to_vec();
    let mut z0 = Vec::with_capacity(batch_size * data[0].latents.slab_len());
    let mut cond = Vec::new();
    let mut ts = Vec::with_capacity(batch_size);
    let mut texts = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let s = &data[rng.below(data.len())];
        let f = rng.below(s.latents.dims()[0]);
        z0.extend_from_slice(s.latents.slab(f));
        if with_cond {
            cond.extend_from_slice(s.cond.slab(f));
        }
        ts.push(1 + rng.below(sched.steps()));
        let drop = rng.next_open01() < text_dropout;
        texts.push(if drop { empty_text.clone() } else { s.text.clone() });
    }
    let shape = [batch_size, ld[1], ld[2], ld[3]];
    let noise = crate::numerics::gaussian_noise(&shape, rng)?;
    let (cond, cond_noise) = if with_cond {
        (
            Some(Tensor::new(&[batch_size, cd[1], cd[2], cd[3]], cond)?),
            Some(crate::numerics::gaussian_noise(&shape, rng)?),
        )
    } else {
        (None, None)
    };
    Ok(DenoiseBatch {
        z0: Tensor::new(&shape, z0)?,
        noise,
        ts,
        texts,
        cond,
        cond_noise,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first and last `k` steps.
    pub fn head_tail(&self, k: usize) -> (f64, f64) {
        let k = k.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (
            mean(&self.losses[..k]),
            mean(&self.losses[self.losses.len() - k..]),
        )
    }
}

/// Trains the 2D denoiser on single frames; no temporal signal is used.
pub fn train_image_denoiser(
    scenes: &[StoredScene],
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(UNet<f32>, TrainReport)> {
    cfg.validate()?;
    let data = prepare_scenes(scenes, model_cfg)?;
    let mut unet = model_cfg.init_unet::<f32>()?;
    let empty = model_cfg.text_encoder().encode("");
    let mut rng = SeededRng::stream(cfg.seed, "train-image");
    let mut opt = Adam::new(cfg.lr);
    let mut ema = Ema::new(cfg.ema_decay, &unet);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let batch = sample_batch(&data, cfg.batch_size, cfg.text_dropout, &empty, sched, false, &mut rng)?;
        let (loss, g) = image_loss_and_grads(&unet, &batch, sched)?;
        report.losses.push(check_loss(step, loss)?);
        let scale = clip_scale(global_norm(&g), cfg.grad_clip);
        opt.lr = cfg.lr_at(step);
        opt.update(&mut unet, &g, scale);
        if let Some(e) = &mut ema {
            e.update(&unet);
        }
    }
    Ok((ema.map_or(unet, |e| e.avg), report))
}

/// Trains a control branch cloned from `unet`; the denoiser stays frozen.
/// Clone, condition stem and zero projections all receive updates.
pub fn train_control_branch(
    scenes: &[StoredScene],
    unet: &UNet<f32>,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(ControlBranch<f32>, TrainReport)> {
    cfg.validate()?;
    let data = prepare_scenes(scenes, model_cfg)?;
    let mut branch = model_cfg.init_control(unet)?;
    let empty = model_cfg.text_encoder().encode("");
    let mut rng = SeededRng::stream(cfg.seed, "train-control");
    let mut opt = Adam::new(cfg.lr);
    let mut ema = Ema::new(cfg.ema_decay, &branch);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let batch = sample_batch(&data, cfg.batch_size, cfg.text_dropout, &empty, sched, true, &mut rng)?;
        let (loss, g) = control_loss_and_grads(unet, &branch, &batch, sched)?;
        report.losses.push(check_loss(step, loss)?);
        let scale = clip_scale(global_norm(&g), cfg.grad_clip);
        opt.lr = cfg.lr_at(step);
        opt.update(&mut branch, &g, scale);
        if let Some(e) = &mut ema {
            e.update(&branch);
        }
    }
    Ok((ema.map_or(branch, |e| e.avg), report))
}

