//! Condition stem and the control branch that turns an encoded condition
//! into residuals for the denoiser.

use super::layers::{join, silu, silu_backward, Conv2d, Map, Params};
use super::unet::{EncCache, Encoder, Features, UNet};
use super::ModelConfig;
use crate::attention::FrameSamplingPlan;
use crate::numerics::{Real, SeededRng, Tensor};

/// Bias-free strided convolutions from pixel resolution down to the latent
/// grid. With no biases a zero condition encodes to exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionStem<T> {
    pub convs: Vec<Conv2d<T>>,
}

pub(crate) struct StemCache<T> {
    inputs: Vec<Map<T>>,
    pre: Vec<Map<T>>,
}

impl<T: Real> ConditionStem<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let n = cfg.patch.trailing_zeros() as usize;
        let convs = (0..n)
            .map(|i| {
                let c_in = if i == 0 { cfg.cond_channels } else { cfg.stem_hidden };
                let c_out = if i + 1 == n {
                    cfg.latent_channels
                } else {
                    cfg.stem_hidden
                };
                Conv2d::new(c_in, c_out, 3, 2, false, rng)
            })
            .collect();
        Self { convs }
    }

    pub fn c_in(&self) -> usize {
        self.convs[0].c_in()
    }

    pub(crate) fn forward(&self, x: &Map<T>) -> (Map<T>, StemCache<T>) {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let y = conv.forward(&h);
            inputs.push(h);
            if i + 1 < self.convs.len() {
                h = y.like(silu(&y.data));
                pre.push(y);
            } else {
                h = y;
            }
        }
        (h, StemCache { inputs, pre })
    }

    pub(crate) fn backward(&self, cache: &StemCache<T>, dy: &Map<T>, g: &mut Self) {
        let mut d = dy.clone();
        for i in (0..self.convs.len()).rev() {
            if i + 1 < self.convs.len() {
                d = d.like(silu_backward(&cache.pre[i].data, &d.data));
            }
            d = self.convs[i].backward(&cache.inputs[i], &d, &mut g.convs[i]);
        }
    }
}

impl<T: Real> Params<T> for ConditionStem<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

/// Encoder clone plus zero-initialized 1×1 output projections, one per
/// injection point.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBranch<T> {
    pub stem: ConditionStem<T>,
    pub encoder: Encoder<T>,
    pub zero_skip1: Conv2d<T>,
    pub zero_skip2: Conv2d<T>,
    pub zero_mid: Conv2d<T>,
}

pub(crate) struct ControlCache<T> {
    enc: EncCache<T>,
    feats: Features<T>,
}

impl<T: Real> ControlBranch<T> {
    /// Clones the encoder and middle block of `unet`.
    pub fn from_unet(unet: &UNet<T>, cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let [c0, c1] = cfg.channels;
        Self {
            stem: ConditionStem::new(cfg, rng),
            encoder: unet.encoder.clone(),
            zero_skip1: Conv2d::zero_1x1(c0),
            zero_skip2: Conv2d::zero_1x1(c1),
            zero_mid: Conv2d::zero_1x1(c1),
        }
    }

    pub(crate) fn forward(
        &self,
        c_cond: &Map<T>,
        ts: &[usize],
        texts: &[&Tensor<T>],
        plan: &FrameSamplingPlan,
        train: bool,
    ) -> (Features<T>, ControlCache<T>) {
        let (feats, enc) = self.encoder.forward(c_cond, ts, texts, plan, train);
        let out = Features {
            skip1: self.zero_skip1.forward(&feats.skip1),
            skip2: self.zero_skip2.forward(&feats.skip2),
            mid: self.zero_mid.forward(&feats.mid),
        };
        (out, ControlCache { enc, feats })
    }

    /// Returns the gradient with respect to the branch input.
    pub(crate) fn backward(
        &self,
        cache: &ControlCache<T>,
        dres: &Features<T>,
        texts: &[&Tensor<T>],
        plan: &FrameSamplingPlan,
        g: &mut Self,
    ) -> Map<T> {
        let f = &cache.feats;
        let grads = Features {
            skip1: self
                .zero_skip1
                .backward(&f.skip1, &dres.skip1, &mut g.zero_skip1),
            skip2: self
                .zero_skip2
                .backward(&f.skip2, &dres.skip2, &mut g.zero_skip2),
            mid: self.zero_mid.backward(&f.mid, &dres.mid, &mut g.zero_mid),
        };
        let dtemb = vec![T::zero(); cache.enc.temb().len()];
        self.encoder
            .backward(&cache.enc, grads, texts, plan, &mut g.encoder, dtemb)
    }
}

impl<T: Real> Params<T> for ControlBranch<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.zero_skip1.visit(&join(prefix, "zero_skip1"), f);
        self.zero_skip2.visit(&join(prefix, "zero_skip2"), f);
        self.zero_mid.visit(&join(prefix, "zero_mid"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.zero_skip1.visit_mut(&join(prefix, "zero_skip1"), f);
        self.zero_skip2.visit_mut(&join(prefix, "zero_skip2"), f);
        self.zero_mid.visit_mut(&join(prefix, "zero_mid"), f);
    }
}
