//! Residual, attention and feed-forward blocks of the denoiser.

use super::layers::{
    add_into, join, silu, silu_backward, Conv2d, GroupNorm, LayerNorm, Linear, Map, NormCache,
    Params,
};
use crate::attention::{
    attend_frames, attend_frames_backward, attend_rows, attend_rows_backward, AttentionWeights,
    FrameProbs, FrameSamplingPlan,
};
use crate::numerics::{Real, SeededRng, Tensor};

/// Per-call inputs shared by every block.
pub(crate) struct Ctx<'a, T> {
    /// Timestep embedding, `F × temb_dim`.
    pub temb: &'a [T],
    /// Text embedding per frame (`L_i × d_text`).
    pub texts: &'a [&'a Tensor<T>],
    pub plan: &'a FrameSamplingPlan,
    /// Keep attention probabilities for a backward pass.
    pub train: bool,
}

pub(crate) fn sinusoidal<T: Real>(ts: &[usize], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t * f).collect();
        out.extend(args.iter().map(|a| T::lit(a.cos())));
        out.extend(args.iter().map(|a| T::lit(a.sin())));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbed<T> {
    pub lin1: Linear<T>,
    pub lin2: Linear<T>,
    pub sin_dim: usize,
}

pub(crate) struct TimeCache<T> {
    sin: Vec<T>,
    h1: Vec<T>,
    a1: Vec<T>,
}

impl<T: Real> TimeEmbed<T> {
    pub fn new(sin_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            lin1: Linear::new(sin_dim, out_dim, true, rng),
            lin2: Linear::new(out_dim, out_dim, true, rng),
            sin_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.lin2.d_out()
    }

    pub(crate) fn forward(&self, ts: &[usize]) -> (Vec<T>, TimeCache<T>) {
        let f = ts.len();
        let sin = sinusoidal(ts, self.sin_dim);
        let h1 = self.lin1.forward(&sin, f);
        let a1 = silu(&h1);
        let out = self.lin2.forward(&a1, f);
        (out, TimeCache { sin, h1, a1 })
    }

    pub(crate) fn backward(&self, cache: &TimeCache<T>, dtemb: &[T], g: &mut Self) {
        let f = cache.sin.len() / self.sin_dim;
        let da1 = self.lin2.backward(&cache.a1, dtemb, f, &mut g.lin2);
        let dh1 = silu_backward(&cache.h1, &da1);
        self.lin1.backward(&cache.sin, &dh1, f, &mut g.lin1);
    }
}

impl<T: Real> Params<T> for TimeEmbed<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.lin1.visit(&join(prefix, "lin1"), f);
        self.lin2.visit(&join(prefix, "lin2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.lin1.visit_mut(&join(prefix, "lin1"), f);
        self.lin2.visit_mut(&join(prefix, "lin2"), f);
    }
}

/// GroupNorm → SiLU → 3×3 conv, timestep injection, twice, plus a skip.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub norm1: GroupNorm<T>,
    pub conv1: Conv2d<T>,
    pub time_proj: Linear<T>,
    pub norm2: GroupNorm<T>,
    pub conv2: Conv2d<T>,
    pub skip: Option<Conv2d<T>>,
}

pub(crate) struct ResCache<T> {
    x: Map<T>,
    n1: NormCache<T>,
    a1: Map<T>,
    s1: Map<T>,
    temb_act: Vec<T>,
    h1: Map<T>,
    n2: NormCache<T>,
    a2: Map<T>,
    s2: Map<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new(c_in: usize, c_out: usize, temb: usize, groups: usize, rng: &mut SeededRng) -> Self {
        Self {
            norm1: GroupNorm::new(c_in, groups),
            conv1: Conv2d::new(c_in, c_out, 3, 1, true, rng),
            time_proj: Linear::new(temb, c_out, true, rng),
            norm2: GroupNorm::new(c_out, groups),
            conv2: Conv2d::new(c_out, c_out, 3, 1, true, rng),
            skip: (c_in != c_out).then(|| Conv2d::new(c_in, c_out, 1, 1, true, rng)),
        }
    }

    pub(crate) fn forward(&self, x: &Map<T>, ctx: &Ctx<'_, T>) -> (Map<T>, ResCache<T>) {
        let (a1, n1) = self.norm1.forward(x);
        let s1 = a1.like(silu(&a1.data));
        let mut h1 = self.conv1.forward(&s1);
        let temb_act = silu(ctx.temb);
        let tp = self.time_proj.forward(&temb_act, x.f);
        let c = h1.c;
        let s = h1.s();
        for fi in 0..x.f {
            let add = &tp[fi * c..(fi + 1) * c];
            for p in 0..s {
                add_into(&mut h1.data[(fi * s + p) * c..(fi * s + p + 1) * c], add);
            }
        }
        let (a2, n2) = self.norm2.forward(&h1);
        let s2 = a2.like(silu(&a2.data));
        let h2 = self.conv2.forward(&s2);
        let out = match &self.skip {
            Some(conv) => conv.forward(x).add(&h2),
            None => x.add(&h2),
        };
        let cache = ResCache {
            x: x.clone(),
            n1,
            a1,
            s1,
            temb_act,
            h1,
            n2,
            a2,
            s2,
        };
        (out, cache)
    }

    /// Returns the input gradient and accumulates into `dtemb`.
    pub(crate) fn backward(
        &self,
        cache: &ResCache<T>,
        dout: &Map<T>,
        g: &mut Self,
        temb: &[T],
        dtemb: &mut [T],
    ) -> Map<T> {
        let ds2 = self.conv2.backward(&cache.s2, dout, &mut g.conv2);
        let da2 = ds2.like(silu_backward(&cache.a2.data, &ds2.data));
        let dh1 = self.norm2.backward(&cache.h1, &cache.n2, &da2, &mut g.norm2);

        let (f, c, s) = (dh1.f, dh1.c, dh1.s());
        let mut dtp = vec![T::zero(); f * c];
        for fi in 0..f {
            for p in 0..s {
                add_into(
                    &mut dtp[fi * c..(fi + 1) * c],
                    &dh1.data[(fi * s + p) * c..(fi * s + p + 1) * c],
                );
            }
        }
        let dact = self
            .time_proj
            .backward(&cache.temb_act, &dtp, f, &mut g.time_proj);
        add_into(dtemb, &silu_backward(temb, &dact));

        let ds1 = self.conv1.backward(&cache.s1, &dh1, &mut g.conv1);
        let da1 = ds1.like(silu_backward(&cache.a1.data, &ds1.data));
        let mut dx = self.norm1.backward(&cache.x, &cache.n1, &da1, &mut g.norm1);
        match (&self.skip, &mut g.skip) {
            (Some(conv), Some(gconv)) => {
                let dskip = conv.backward(&cache.x, dout, gconv);
                add_into(&mut dx.data, &dskip.data);
            }
            _ => add_into(&mut dx.data, &dout.data),
        }
        dx
    }
}

impl<T: Real> Params<T> for ResBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.time_proj.visit(&join(prefix, "time_proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.time_proj.visit_mut(&join(prefix, "time_proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}

/// Single-image self-attention of the image model. After inflation the same
/// projections drive cross-frame attention through the sampling plan.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention<T> {
    pub to_q: Linear<T>,
    pub to_k: Linear<T>,
    pub to_v: Linear<T>,
    pub to_out: Linear<T>,
    pub heads: usize,
}

pub(crate) struct SelfAttnCache<T> {
    x: Map<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Option<FrameProbs<T>>,
    att: Vec<T>,
}

impl<T: Real> SelfAttention<T> {
    pub fn new(c: usize, heads: usize, rng: &mut SeededRng) -> Self {
        Self {
            to_q: Linear::new(c, c, false, rng),
            to_k: Linear::new(c, c, false, rng),
            to_v: Linear::new(c, c, false, rng),
            to_out: Linear::new(c, c, true, rng),
            heads,
        }
    }

    /// The query/key/value projections as standalone attention weights.
    pub fn weights(&self) -> AttentionWeights<T> {
        AttentionWeights {
            w_q: self.to_q.weight.clone(),
            w_k: self.to_k.weight.clone(),
            w_v: self.to_v.weight.clone(),
            heads: self.heads,
        }
    }

    pub(crate) fn forward(&self, x: &Map<T>, ctx: &Ctx<'_, T>) -> (Map<T>, SelfAttnCache<T>) {
        let rows = x.rows();
        let q = self.to_q.forward(&x.data, rows);
        let k = self.to_k.forward(&x.data, rows);
        let v = self.to_v.forward(&x.data, rows);
        let (att, probs) = attend_frames(&q, &k, &v, x.s(), x.c, self.heads, ctx.plan, ctx.train);
        let out = self.to_out.forward(&att, rows);
        let cache = SelfAttnCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            att,
        };
        (x.like(out), cache)
    }

    pub(crate) fn backward(
        &self,
        cache: &SelfAttnCache<T>,
        dout: &Map<T>,
        g: &mut Self,
        plan: &FrameSamplingPlan,
    ) -> Map<T> {
        let x = &cache.x;
        let rows = x.rows();
        let datt = self.to_out.backward(&cache.att, &dout.data, rows, &mut g.to_out);
        let probs = cache
            .probs
            .as_ref()
            .expect("forward was run without keeping attention probabilities");
        let (dq, dk, dv) = attend_frames_backward(
            &cache.q, &cache.k, &cache.v, probs, &datt, x.s(), x.c, self.heads, plan,
        );
        let mut dx = self.to_q.backward(&x.data, &dq, rows, &mut g.to_q);
        add_into(&mut dx, &self.to_k.backward(&x.data, &dk, rows, &mut g.to_k));
        add_into(&mut dx, &self.to_v.backward(&x.data, &dv, rows, &mut g.to_v));
        x.like(dx)
    }
}

impl<T: Real> Params<T> for SelfAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.to_q.visit(&join(prefix, "to_q"), f);
        self.to_k.visit(&join(prefix, "to_k"), f);
        self.to_v.visit(&join(prefix, "to_v"), f);
        self.to_out.visit(&join(prefix, "to_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.to_q.visit_mut(&join(prefix, "to_q"), f);
        self.to_k.visit_mut(&join(prefix, "to_k"), f);
        self.to_v.visit_mut(&join(prefix, "to_v"), f);
        self.to_out.visit_mut(&join(prefix, "to_out"), f);
    }
}

/// Attention from image tokens to the text embedding of the same frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention<T> {
    pub to_q: Linear<T>,
    pub to_k: Linear<T>,
    pub to_v: Linear<T>,
    pub to_out: Linear<T>,
    pub heads: usize,
}

pub(crate) struct CrossAttnCache<T> {
    x: Map<T>,
    q: Vec<T>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    probs: Vec<Vec<T>>,
    att: Vec<T>,
}

impl<T: Real> CrossAttention<T> {
    pub fn new(c: usize, d_text: usize, heads: usize, rng: &mut SeededRng) -> Self {
        Self {
            to_q: Linear::new(c, c, false, rng),
            to_k: Linear::new(d_text, c, false, rng),
            to_v: Linear::new(d_text, c, false, rng),
            to_out: Linear::new(c, c, true, rng),
            heads,
        }
    }

    pub(crate) fn forward(&self, x: &Map<T>, ctx: &Ctx<'_, T>) -> (Map<T>, CrossAttnCache<T>) {
        let (rows, s, c) = (x.rows(), x.s(), x.c);
        let q = self.to_q.forward(&x.data, rows);
        let mut att = Vec::with_capacity(rows * c);
        let mut ks = Vec::with_capacity(x.f);
        let mut vs = Vec::with_capacity(x.f);
        let mut probs = Vec::with_capacity(x.f);
        for fi in 0..x.f {
            let text = ctx.texts[fi];
            let l = text.dims()[0];
            let k = self.to_k.forward(text.data(), l);
            let v = self.to_v.forward(text.data(), l);
            let (o, p) = attend_rows(
                &q[fi * s * c..(fi + 1) * s * c],
                &k,
                &v,
                s,
                l,
                c,
                self.heads,
                ctx.train,
            );
            att.extend_from_slice(&o);
            ks.push(k);
            vs.push(v);
            probs.push(p);
        }
        let out = self.to_out.forward(&att, rows);
        let cache = CrossAttnCache {
            x: x.clone(),
            q,
            k: ks,
            v: vs,
            probs,
            att,
        };
        (x.like(out), cache)
    }

    pub(crate) fn backward(
        &self,
        cache: &CrossAttnCache<T>,
        dout: &Map<T>,
        g: &mut Self,
        texts: &[&Tensor<T>],
    ) -> Map<T> {
        let x = &cache.x;
        let (rows, s, c) = (x.rows(), x.s(), x.c);
        let datt = self.to_out.backward(&cache.att, &dout.data, rows, &mut g.to_out);
        let mut dq = vec![T::zero(); rows * c];
        for fi in 0..x.f {
            let text = texts[fi];
            let l = text.dims()[0];
            let mut dk = vec![T::zero(); l * c];
            let mut dv = vec![T::zero(); l * c];
            attend_rows_backward(
                &cache.q[fi * s * c..(fi + 1) * s * c],
                &cache.k[fi],
                &cache.v[fi],
                &cache.probs[fi],
                &datt[fi * s * c..(fi + 1) * s * c],
                s,
                l,
                c,
                self.heads,
                &mut dq[fi * s * c..(fi + 1) * s * c],
                &mut dk,
                &mut dv,
            );
            self.to_k.backward(text.data(), &dk, l, &mut g.to_k);
            self.to_v.backward(text.data(), &dv, l, &mut g.to_v);
        }
        x.like(self.to_q.backward(&x.data, &dq, rows, &mut g.to_q))
    }
}

impl<T: Real> Params<T> for CrossAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.to_q.visit(&join(prefix, "to_q"), f);
        self.to_k.visit(&join(prefix, "to_k"), f);
        self.to_v.visit(&join(prefix, "to_v"), f);
        self.to_out.visit(&join(prefix, "to_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.to_q.visit_mut(&join(prefix, "to_q"), f);
        self.to_k.visit_mut(&join(prefix, "to_k"), f);
        self.to_v.visit_mut(&join(prefix, "to_v"), f);
        self.to_out.visit_mut(&join(prefix, "to_out"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub lin1: Linear<T>,
    pub lin2: Linear<T>,
}

pub(crate) struct FfCache<T> {
    x: Vec<T>,
    h: Vec<T>,
    a: Vec<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn new(c: usize, rng: &mut SeededRng) -> Self {
        Self {
            lin1: Linear::new(c, 2 * c, true, rng),
            lin2: Linear::new(2 * c, c, true, rng),
        }
    }

    pub(crate) fn forward(&self, x: &Map<T>) -> (Map<T>, FfCache<T>) {
        let rows = x.rows();
        let h = self.lin1.forward(&x.data, rows);
        let a = silu(&h);
        let y = self.lin2.forward(&a, rows);
        (
            x.like(y),
            FfCache {
                x: x.data.clone(),
                h,
                a,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &FfCache<T>, dy: &Map<T>, g: &mut Self) -> Map<T> {
        let rows = dy.rows();
        let da = self.lin2.backward(&cache.a, &dy.data, rows, &mut g.lin2);
        let dh = silu_backward(&cache.h, &da);
        dy.like(self.lin1.backward(&cache.x, &dh, rows, &mut g.lin1))
    }
}

impl<T: Real> Params<T> for FeedForward<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.lin1.visit(&join(prefix, "lin1"), f);
        self.lin2.visit(&join(prefix, "lin2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.lin1.visit_mut(&join(prefix, "lin1"), f);
        self.lin2.visit_mut(&join(prefix, "lin2"), f);
    }
}

/// Pre-norm residual stack: frame attention, then text cross-attention,
/// then feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub norm2: LayerNorm<T>,
    pub cross: CrossAttention<T>,
    pub norm3: LayerNorm<T>,
    pub ff: FeedForward<T>,
}

pub(crate) struct TransformerCache<T> {
    x: Map<T>,
    n1: NormCache<T>,
    c1: SelfAttnCache<T>,
    x1: Map<T>,
    n2: NormCache<T>,
    c2: CrossAttnCache<T>,
    x2: Map<T>,
    n3: NormCache<T>,
    c3: FfCache<T>,
}

impl<T: Real> TransformerBlock<T> {
    pub fn new(c: usize, d_text: usize, heads: usize, rng: &mut SeededRng) -> Self {
        Self {
            norm1: LayerNorm::new(c),
            attn: SelfAttention::new(c, heads, rng),
            norm2: LayerNorm::new(c),
            cross: CrossAttention::new(c, d_text, heads, rng),
            norm3: LayerNorm::new(c),
            ff: FeedForward::new(c, rng),
        }
    }

    pub(crate) fn forward(&self, x: &Map<T>, ctx: &Ctx<'_, T>) -> (Map<T>, TransformerCache<T>) {
        let (a, n1) = self.norm1.forward(x);
        let (o1, c1) = self.attn.forward(&a, ctx);
        let x1 = x.add(&o1);
        let (b, n2) = self.norm2.forward(&x1);
        let (o2, c2) = self.cross.forward(&b, ctx);
        let x2 = x1.add(&o2);
        let (cc, n3) = self.norm3.forward(&x2);
        let (o3, c3) = self.ff.forward(&cc);
        let out = x2.add(&o3);
        let cache = TransformerCache {
            x: x.clone(),
            n1,
            c1,
            x1,
            n2,
            c2,
            x2,
            n3,
            c3,
        };
        (out, cache)
    }

    pub(crate) fn backward(
        &self,
        cache: &TransformerCache<T>,
        dout: &Map<T>,
        g: &mut Self,
        ctx: &Ctx<'_, T>,
    ) -> Map<T> {
        let dcc = self.ff.backward(&cache.c3, dout, &mut g.ff);
        let mut dx2 = self.norm3.backward(&cache.x2, &cache.n3, &dcc, &mut g.norm3);
        add_into(&mut dx2.data, &dout.data);

        let db = self.cross.backward(&cache.c2, &dx2, &mut g.cross, ctx.texts);
        let mut dx1 = self.norm2.backward(&cache.x1, &cache.n2, &db, &mut g.norm2);
        add_into(&mut dx1.data, &dx2.data);

        let da = self.attn.backward(&cache.c1, &dx1, &mut g.attn, ctx.plan);
        let mut dx = self.norm1.backward(&cache.x, &cache.n1, &da, &mut g.norm1);
        add_into(&mut dx.data, &dx1.data);
        dx
    }
}

impl<T: Real> Params<T> for TransformerBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.cross.visit(&join(prefix, "cross"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
        self.ff.visit(&join(prefix, "ff"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.cross.visit_mut(&join(prefix, "cross"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
    }
}

/// Convolution block followed by the attention stack.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock<T> {
    pub res: ResBlock<T>,
    pub transformer: TransformerBlock<T>,
}

pub(crate) struct BasicCache<T> {
    res: ResCache<T>,
    tf: TransformerCache<T>,
}

impl<T: Real> BasicBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        temb: usize,
        groups: usize,
        d_text: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            res: ResBlock::new(c_in, c_out, temb, groups, rng),
            transformer: TransformerBlock::new(c_out, d_text, heads, rng),
        }
    }

    pub(crate) fn forward(&self, x: &Map<T>, ctx: &Ctx<'_, T>) -> (Map<T>, BasicCache<T>) {
        let (h, res) = self.res.forward(x, ctx);
        let (out, tf) = self.transformer.forward(&h, ctx);
        (out, BasicCache { res, tf })
    }

    pub(crate) fn backward(
        &self,
        cache: &BasicCache<T>,
        dout: &Map<T>,
        g: &mut Self,
        ctx: &Ctx<'_, T>,
        dtemb: &mut [T],
    ) -> Map<T> {
        let dh = self
            .transformer
            .backward(&cache.tf, dout, &mut g.transformer, ctx);
        self.res.backward(&cache.res, &dh, &mut g.res, ctx.temb, dtemb)
    }
}

impl<T: Real> Params<T> for BasicBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.res.visit(&join(prefix, "res"), f);
        self.transformer.visit(&join(prefix, "transformer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.res.visit_mut(&join(prefix, "res"), f);
        self.transformer.visit_mut(&join(prefix, "transformer"), f);
    }
}
