//! Two-level UNet denoiser and the encoder half it shares with the control
//! branch.

use super::blocks::{BasicBlock, BasicCache, Ctx, TimeCache, TimeEmbed};
use super::layers::{
    add_into, concat_channels, join, silu, silu_backward, split_channels, upsample2,
    upsample2_backward, Conv2d, GroupNorm, Map, NormCache, Params,
};
use super::ModelConfig;
use crate::attention::FrameSamplingPlan;
use crate::numerics::{Real, SeededRng, Tensor};

/// Time embedding, input convolution, both encoder levels and the middle
/// block.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub time: TimeEmbed<T>,
    pub conv_in: Conv2d<T>,
    pub enc1: BasicBlock<T>,
    pub down: Conv2d<T>,
    pub enc2: BasicBlock<T>,
    pub mid: BasicBlock<T>,
}

/// Features at the three injection points.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Features<T> {
    pub skip1: Map<T>,
    pub skip2: Map<T>,
    pub mid: Map<T>,
}

impl<T: Real> Features<T> {
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Map<T>| m.like(vec![T::zero(); m.data.len()]);
        Self {
            skip1: z(&self.skip1),
            skip2: z(&self.skip2),
            mid: z(&self.mid),
        }
    }

    pub fn maps(&self) -> [&Map<T>; 3] {
        [&self.skip1, &self.skip2, &self.mid]
    }
}

pub(crate) struct EncCache<T> {
    time: TimeCache<T>,
    temb: Vec<T>,
    c1: BasicCache<T>,
    skip1: Map<T>,
    c2: BasicCache<T>,
    cm: BasicCache<T>,
    x: Map<T>,
}

impl<T: Real> EncCache<T> {
    pub fn temb(&self) -> &[T] {
        &self.temb
    }
}

impl<T: Real> Encoder<T> {
    pub fn new(cfg: &ModelConfig, c_in: usize, rng: &mut SeededRng) -> Self {
        let [c0, c1] = cfg.channels;
        let (te, g, dt, h) = (cfg.temb_dim, cfg.groups, cfg.text_dim, cfg.heads);
        Self {
            time: TimeEmbed::new(cfg.time_embed_dim, te, rng),
            conv_in: Conv2d::new(c_in, c0, 3, 1, true, rng),
            enc1: BasicBlock::new(c0, c0, te, g, dt, h, rng),
            down: Conv2d::new(c0, c0, 3, 2, true, rng),
            enc2: BasicBlock::new(c0, c1, te, g, dt, h, rng),
            mid: BasicBlock::new(c1, c1, te, g, dt, h, rng),
        }
    }

    pub(crate) fn forward(
        &self,
        x: &Map<T>,
        ts: &[usize],
        texts: &[&Tensor<T>],
        plan: &FrameSamplingPlan,
        train: bool,
    ) -> (Features<T>, EncCache<T>) {
        let (temb, time) = self.time.forward(ts);
        let ctx = Ctx {
            temb: &temb,
            texts,
            plan,
            train,
        };
        let h0 = self.conv_in.forward(x);
        let (skip1, c1) = self.enc1.forward(&h0, &ctx);
        let d = self.down.forward(&skip1);
        let (skip2, c2) = self.enc2.forward(&d, &ctx);
        let (mid, cm) = self.mid.forward(&skip2, &ctx);
        let cache = EncCache {
            time,
            temb,
            c1,
            skip1: skip1.clone(),
            c2,
            cm,
            x: x.clone(),
        };
        (Features { skip1, skip2, mid }, cache)
    }

    /// Backpropagates feature gradients to the input. `dtemb` carries
    /// timestep-embedding gradients gathered downstream.
    pub(crate) fn backward(
        &self,
        cache: &EncCache<T>,
        grads: Features<T>,
        texts: &[&Tensor<T>],
        plan: &FrameSamplingPlan,
        g: &mut Self,
        mut dtemb: Vec<T>,
    ) -> Map<T> {
        let ctx = Ctx {
            temb: &cache.temb,
            texts,
            plan,
            train: true,
        };
        let Features {
            skip1: mut dskip1,
            skip2: mut dskip2,
            mid: dmid,
        } = grads;
        let d = self.mid.backward(&cache.cm, &dmid, &mut g.mid, &ctx, &mut dtemb);
        add_into(&mut dskip2.data, &d.data);
        let dd = self.enc2.backward(&cache.c2, &dskip2, &mut g.enc2, &ctx, &mut dtemb);
        let d = self.down.backward(&cache.skip1, &dd, &mut g.down);
        add_into(&mut dskip1.data, &d.data);
        let dh0 = self.enc1.backward(&cache.c1, &dskip1, &mut g.enc1, &ctx, &mut dtemb);
        let dx = self.conv_in.backward(&cache.x, &dh0, &mut g.conv_in);
        self.time.backward(&cache.time, &dtemb, &mut g.time);
        dx
    }
}

impl<T: Real> Params<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.time.visit(&join(prefix, "time"), f);
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        self.enc1.visit(&join(prefix, "enc1"), f);
        self.down.visit(&join(prefix, "down"), f);
        self.enc2.visit(&join(prefix, "enc2"), f);
        self.mid.visit(&join(prefix, "mid"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.time.visit_mut(&join(prefix, "time"), f);
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        self.enc1.visit_mut(&join(prefix, "enc1"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
        self.enc2.visit_mut(&join(prefix, "enc2"), f);
        self.mid.visit_mut(&join(prefix, "mid"), f);
    }
}

/// ε-prediction network.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    pub encoder: Encoder<T>,
    pub dec2: BasicBlock<T>,
    pub up_conv: Conv2d<T>,
    pub dec1: BasicBlock<T>,
    pub norm_out: GroupNorm<T>,
    pub conv_out: Conv2d<T>,
}

pub(crate) struct UNetCache<T> {
    enc: EncCache<T>,
    cd2: BasicCache<T>,
    up: Map<T>,
    cd1: BasicCache<T>,
    o1: Map<T>,
    nc: NormCache<T>,
    n: Map<T>,
    sa: Map<T>,
}

impl<T: Real> UNet<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let [c0, c1] = cfg.channels;
        let (te, g, dt, h) = (cfg.temb_dim, cfg.groups, cfg.text_dim, cfg.heads);
        Self {
            encoder: Encoder::new(cfg, cfg.latent_channels, rng),
            dec2: BasicBlock::new(2 * c1, c1, te, g, dt, h, rng),
            up_conv: Conv2d::new(c1, c0, 3, 1, true, rng),
            dec1: BasicBlock::new(2 * c0, c0, te, g, dt, h, rng),
            norm_out: GroupNorm::new(c0, g),
            conv_out: Conv2d::new(c0, cfg.latent_channels, 3, 1, true, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        &self,
        x: &Map<T>,
        ts: &[usize],
        texts: &[&Tensor<T>],
        plan: &FrameSamplingPlan,
        residuals: Option<&Features<T>>,
        train: bool,
    ) -> (Map<T>, UNetCache<T>) {
        let (mut feats, enc) = self.encoder.forward(x, ts, texts, plan, train);
        if let Some(r) = residuals {
            add_into(&mut feats.skip1.data, &r.skip1.data);
            add_into(&mut feats.skip2.data, &r.skip2.data);
            add_into(&mut feats.mid.data, &r.mid.data);
        }
        let ctx = Ctx {
            temb: enc.temb(),
            texts,
            plan,
            train,
        };
        let a = concat_channels(&feats.mid, &feats.skip2);
        let (o2, cd2) = self.dec2.forward(&a, &ctx);
        let up = upsample2(&o2);
        let uc = self.up_conv.forward(&up);
        let b = concat_channels(&uc, &feats.skip1);
        let (o1, cd1) = self.dec1.forward(&b, &ctx);
        let (n, nc) = self.norm_out.forward(&o1);
        let sa = n.like(silu(&n.data));
        let out = self.conv_out.forward(&sa);
        let cache = UNetCache {
            enc,
            cd2,
            up,
            cd1,
            o1,
            nc,
            n,
            sa,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `g` and returns the gradient
    /// with respect to the injected residuals.
    pub(crate) fn backward(
        &self,
        cache: &UNetCache<T>,
        dout: &Map<T>,
        texts: &[&Tensor<T>],
        plan: &FrameSamplingPlan,
        g: &mut Self,
    ) -> Features<T> {
        let ctx = Ctx {
            temb: cache.enc.temb(),
            texts,
            plan,
            train: true,
        };
        let mut dtemb = vec![T::zero(); cache.enc.temb().len()];
        let dsa = self.conv_out.backward(&cache.sa, dout, &mut g.conv_out);
        let dn = dsa.like(silu_backward(&cache.n.data, &dsa.data));
        let do1 = self
            .norm_out
            .backward(&cache.o1, &cache.nc, &dn, &mut g.norm_out);
        let db = self.dec1.backward(&cache.cd1, &do1, &mut g.dec1, &ctx, &mut dtemb);
        let (duc, dskip1) = split_channels(&db, self.up_conv.c_out());
        let dup = self.up_conv.backward(&cache.up, &duc, &mut g.up_conv);
        let do2 = upsample2_backward(&dup);
        let da = self.dec2.backward(&cache.cd2, &do2, &mut g.dec2, &ctx, &mut dtemb);
        let (dmid, dskip2) = split_channels(&da, da.c / 2);
        let grads = Features {
            skip1: dskip1,
            skip2: dskip2,
            mid: dmid,
        };
        self.encoder.backward(
            &cache.enc,
            grads.clone(),
            texts,
            plan,
            &mut g.encoder,
            dtemb,
        );
        grads
    }
}

impl<T: Real> Params<T> for UNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.dec2.visit(&join(prefix, "dec2"), f);
        self.up_conv.visit(&join(prefix, "up_conv"), f);
        self.dec1.visit(&join(prefix, "dec1"), f);
        self.norm_out.visit(&join(prefix, "norm_out"), f);
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.dec2.visit_mut(&join(prefix, "dec2"), f);
        self.up_conv.visit_mut(&join(prefix, "up_conv"), f);
        self.dec1.visit_mut(&join(prefix, "dec1"), f);
        self.norm_out.visit_mut(&join(prefix, "norm_out"), f);
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}
