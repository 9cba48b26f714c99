//! Primitive layers over channel-last feature maps, each with a forward
//! pass that returns what its backward pass needs.

use crate::numerics::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::{Real, SeededRng, Tensor};

/// Visits every trainable tensor under a dotted name.
pub trait Params<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Same structure with every tensor set to zero (gradient buffer).
    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        out.visit_mut("", &mut |_, t| t.fill(T::zero()));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Feature maps `F × H × W × C`, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Map<T> {
    pub f: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> Map<T> {
    pub fn zeros(f: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            f,
            h,
            w,
            c,
            data: vec![T::zero(); f * h * w * c],
        }
    }

    pub fn like(&self, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            f: self.f,
            h: self.h,
            w: self.w,
            c: self.c,
            data,
        }
    }

    pub fn with_channels(&self, c: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), self.f * self.h * self.w * c);
        Self {
            f: self.f,
            h: self.h,
            w: self.w,
            c,
            data,
        }
    }

    /// Tokens per frame.
    pub fn s(&self) -> usize {
        self.h * self.w
    }

    pub fn rows(&self) -> usize {
        self.f * self.h * self.w
    }

    /// `[F, C, H, W]` tensor to channel-last map.
    pub fn from_fchw(t: &Tensor<T>) -> Self {
        let d = t.dims();
        let (f, c, h, w) = (d[0], d[1], d[2], d[3]);
        let src = t.data();
        let mut data = vec![T::zero(); src.len()];
        for fi in 0..f {
            for ci in 0..c {
                for p in 0..h * w {
                    data[(fi * h * w + p) * c + ci] = src[(fi * c + ci) * h * w + p];
                }
            }
        }
        Self { f, h, w, c, data }
    }

    pub fn to_fchw(&self) -> Tensor<T> {
        let (f, h, w, c) = (self.f, self.h, self.w, self.c);
        let mut data = vec![T::zero(); self.data.len()];
        for fi in 0..f {
            for ci in 0..c {
                for p in 0..h * w {
                    data[(fi * c + ci) * h * w + p] = self.data[(fi * h * w + p) * c + ci];
                }
            }
        }
        Tensor::new(&[f, c, h, w], data).expect("map extents are positive")
    }

    pub fn add(&self, other: &Self) -> Self {
        self.like(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        )
    }
}

pub(crate) fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn normal_tensor<T: Real>(dims: &[usize], std: f64, rng: &mut SeededRng) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::lit(rng.normal() * std))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input `x`.
pub(crate) fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// Dense layer on row vectors; weight is `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut SeededRng) -> Self {
        Self {
            weight: normal_tensor(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (din, dout) = (self.d_in(), self.d_out());
        let mut y = match &self.bias {
            Some(b) => b.data().repeat(rows),
            None => vec![T::zero(); rows * dout],
        };
        gemm_nn(rows, din, dout, x, self.weight.data(), &mut y);
        y
    }

    pub fn backward(&self, x: &[T], dy: &[T], rows: usize, g: &mut Self) -> Vec<T> {
        let (din, dout) = (self.d_in(), self.d_out());
        gemm_tn(rows, din, dout, x, dy, g.weight.data_mut());
        if let Some(gb) = &mut g.bias {
            let gb = gb.data_mut();
            for r in 0..rows {
                add_into(gb, &dy[r * dout..(r + 1) * dout]);
            }
        }
        let mut dx = vec![T::zero(); rows * din];
        gemm_nt(rows, dout, din, dy, self.weight.data(), &mut dx);
        dx
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Square-kernel 2D convolution with `k / 2` zero padding, applied to each
/// frame independently. Weight layout is `(ky, kx, c_in) × c_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        Self {
            weight: normal_tensor(&[fan_in, c_out], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: bias.then(|| Tensor::zeros(&[c_out])),
            kernel,
            stride,
        }
    }

    /// 1×1 convolution with all-zero weight and bias.
    pub fn zero_1x1(c: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c, c]),
            bias: Some(Tensor::zeros(&[c])),
            kernel: 1,
            stride: 1,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims()[0] / (self.kernel * self.kernel)
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims()[1]
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.kernel / 2;
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
        let (k, st, p) = (self.kernel, self.stride, self.kernel / 2);
        let (ho, wo) = self.out_hw(h, w);
        let kk = k * k * c;
        let mut cols = vec![T::zero(); ho * wo * kk];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
                for ky in 0..k {
                    let iy = (oy * st + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * st + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let dst = (ky * k + kx) * c;
                        row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, c: usize, dx: &mut [T]) {
        let (k, st, p) = (self.kernel, self.stride, self.kernel / 2);
        let (ho, wo) = self.out_hw(h, w);
        let kk = k * k * c;
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
                for ky in 0..k {
                    let iy = (oy * st + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * st + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * c;
                        let src = (ky * k + kx) * c;
                        add_into(&mut dx[dst..dst + c], &row[src..src + c]);
                    }
                }
            }
        }
    }

    pub(crate) fn forward(&self, x: &Map<T>) -> Map<T> {
        debug_assert_eq!(x.c, self.c_in());
        let (ho, wo) = self.out_hw(x.h, x.w);
        let (cin, cout) = (x.c, self.c_out());
        let kk = self.kernel * self.kernel * cin;
        let mut out = Map::zeros(x.f, ho, wo, cout);
        let frame_in = x.h * x.w * cin;
        let frame_out = ho * wo * cout;
        for fi in 0..x.f {
            let xf = &x.data[fi * frame_in..(fi + 1) * frame_in];
            let yf = &mut out.data[fi * frame_out..(fi + 1) * frame_out];
            if let Some(b) = &self.bias {
                for px in yf.chunks_mut(cout) {
                    px.copy_from_slice(b.data());
                }
            }
            if self.kernel == 1 && self.stride == 1 {
                gemm_nn(ho * wo, kk, cout, xf, self.weight.data(), yf);
            } else {
                let cols = self.im2col(xf, x.h, x.w, cin);
                gemm_nn(ho * wo, kk, cout, &cols, self.weight.data(), yf);
            }
        }
        out
    }

    pub(crate) fn backward(&self, x: &Map<T>, dy: &Map<T>, g: &mut Self) -> Map<T> {
        let (cin, cout) = (x.c, self.c_out());
        let kk = self.kernel * self.kernel * cin;
        let npx = dy.h * dy.w;
        let frame_in = x.h * x.w * cin;
        let frame_out = npx * cout;
        let mut dx = x.like(vec![T::zero(); x.data.len()]);
        let pointwise = self.kernel == 1 && self.stride == 1;
        for fi in 0..x.f {
            let xf = &x.data[fi * frame_in..(fi + 1) * frame_in];
            let dyf = &dy.data[fi * frame_out..(fi + 1) * frame_out];
            if let Some(gb) = &mut g.bias {
                for px in dyf.chunks(cout) {
                    add_into(gb.data_mut(), px);
                }
            }
            let dxf = &mut dx.data[fi * frame_in..(fi + 1) * frame_in];
            if pointwise {
                gemm_tn(npx, kk, cout, xf, dyf, g.weight.data_mut());
                gemm_nt(npx, cout, kk, dyf, self.weight.data(), dxf);
            } else {
                let cols = self.im2col(xf, x.h, x.w, cin);
                gemm_tn(npx, kk, cout, &cols, dyf, g.weight.data_mut());
                let mut dcols = vec![T::zero(); npx * kk];
                gemm_nt(npx, cout, kk, dyf, self.weight.data(), &mut dcols);
                self.col2im(&dcols, x.h, x.w, cin, dxf);
            }
        }
        dx
    }
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

/// Normalizes `len` contiguous-or-strided groups; shared by group and layer
/// norm. `members(g)` yields the flat indices in group `g`.
fn normalize<T: Real>(
    x: &[T],
    groups: usize,
    eps: f64,
    members: impl Fn(usize) -> Vec<usize>,
) -> NormCache<T> {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let idx = members(g);
        let n = T::lit(idx.len() as f64);
        let mean = idx.iter().map(|&i| x[i]).sum::<T>() / n;
        let var = idx
            .iter()
            .map(|&i| {
                let d = x[i] - mean;
                d * d
            })
            .sum::<T>()
            / n;
        let r = T::one() / (var + T::lit(eps)).sqrt();
        for &i in &idx {
            xhat[i] = (x[i] - mean) * r;
        }
        rstd.push(r);
    }
    NormCache { xhat, rstd }
}

fn normalize_backward<T: Real>(
    cache: &NormCache<T>,
    dxhat: &[T],
    members: impl Fn(usize) -> Vec<usize>,
) -> Vec<T> {
    let mut dx = vec![T::zero(); dxhat.len()];
    for (g, &r) in cache.rstd.iter().enumerate() {
        let idx = members(g);
        let n = T::lit(idx.len() as f64);
        let m1 = idx.iter().map(|&i| dxhat[i]).sum::<T>() / n;
        let m2 = idx.iter().map(|&i| dxhat[i] * cache.xhat[i]).sum::<T>() / n;
        for &i in &idx {
            dx[i] = r * (dxhat[i] - m1 - cache.xhat[i] * m2);
        }
    }
    dx
}

/// Group normalization over `(H, W, C/groups)` for each frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub groups: usize,
    pub eps: f64,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(c: usize, groups: usize) -> Self {
        assert!(c.is_multiple_of(groups), "{c} channels not divisible into {groups} groups");
        Self {
            gamma: Tensor::full(&[c], T::one()),
            beta: Tensor::zeros(&[c]),
            groups,
            eps: 1e-5,
        }
    }

    fn members(&self, x: &Map<T>) -> impl Fn(usize) -> Vec<usize> {
        let (s, c, g) = (x.s(), x.c, self.groups);
        let cg = c / g;
        move |idx| {
            let (fi, gi) = (idx / g, idx % g);
            let mut out = Vec::with_capacity(s * cg);
            for p in 0..s {
                let base = (fi * s + p) * c + gi * cg;
                out.extend(base..base + cg);
            }
            out
        }
    }

    pub(crate) fn forward(&self, x: &Map<T>) -> (Map<T>, NormCache<T>) {
        let cache = normalize(&x.data, x.f * self.groups, self.eps, self.members(x));
        let (gm, bt) = (self.gamma.data(), self.beta.data());
        let y = cache
            .xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gm[i % x.c] + bt[i % x.c])
            .collect();
        (x.like(y), cache)
    }

    pub(crate) fn backward(&self, x: &Map<T>, cache: &NormCache<T>, dy: &Map<T>, g: &mut Self) -> Map<T> {
        let c = x.c;
        let gm = self.gamma.data();
        let mut dxhat = vec![T::zero(); dy.data.len()];
        {
            let (gg, gb) = (g.gamma.data_mut(), g.beta.data_mut());
            for (i, &d) in dy.data.iter().enumerate() {
                gg[i % c] = gg[i % c] + d * cache.xhat[i];
                gb[i % c] = gb[i % c] + d;
                dxhat[i] = d * gm[i % c];
            }
        }
        x.like(normalize_backward(cache, &dxhat, self.members(x)))
    }
}

impl<T: Real> Params<T> for GroupNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Layer normalization over the channel axis of each token.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::full(&[c], T::one()),
            beta: Tensor::zeros(&[c]),
            eps: 1e-5,
        }
    }

    fn members(c: usize) -> impl Fn(usize) -> Vec<usize> {
        move |r| (r * c..(r + 1) * c).collect()
    }

    pub(crate) fn forward(&self, x: &Map<T>) -> (Map<T>, NormCache<T>) {
        let c = x.c;
        let cache = normalize(&x.data, x.rows(), self.eps, Self::members(c));
        let (gm, bt) = (self.gamma.data(), self.beta.data());
        let y = cache
            .xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gm[i % c] + bt[i % c])
            .collect();
        (x.like(y), cache)
    }

    pub(crate) fn backward(&self, x: &Map<T>, cache: &NormCache<T>, dy: &Map<T>, g: &mut Self) -> Map<T> {
        let c = x.c;
        let gm = self.gamma.data();
        let mut dxhat = vec![T::zero(); dy.data.len()];
        {
            let (gg, gb) = (g.gamma.data_mut(), g.beta.data_mut());
            for (i, &d) in dy.data.iter().enumerate() {
                gg[i % c] = gg[i % c] + d * cache.xhat[i];
                gb[i % c] = gb[i % c] + d;
                dxhat[i] = d * gm[i % c];
            }
        }
        x.like(normalize_backward(cache, &dxhat, Self::members(c)))
    }
}

impl<T: Real> Params<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample2<T: Real>(x: &Map<T>) -> Map<T> {
    let (h2, w2, c) = (x.h * 2, x.w * 2, x.c);
    let mut out = Map::zeros(x.f, h2, w2, c);
    for fi in 0..x.f {
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((fi * x.h + y / 2) * x.w + xx / 2) * c;
                let dst = ((fi * h2 + y) * w2 + xx) * c;
                out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(dy: &Map<T>) -> Map<T> {
    let (h, w, c) = (dy.h / 2, dy.w / 2, dy.c);
    let mut dx = Map::zeros(dy.f, h, w, c);
    for fi in 0..dy.f {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let dst = ((fi * h + y / 2) * w + xx / 2) * c;
                let src = ((fi * dy.h + y) * dy.w + xx) * c;
                add_into(&mut dx.data[dst..dst + c], &dy.data[src..src + c]);
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub(crate) fn concat_channels<T: Real>(a: &Map<T>, b: &Map<T>) -> Map<T> {
    let c = a.c + b.c;
    let mut data = Vec::with_capacity(a.rows() * c);
    for r in 0..a.rows() {
        data.extend_from_slice(&a.data[r * a.c..(r + 1) * a.c]);
        data.extend_from_slice(&b.data[r * b.c..(r + 1) * b.c]);
    }
    a.with_channels(c, data)
}

pub(crate) fn split_channels<T: Real>(d: &Map<T>, ca: usize) -> (Map<T>, Map<T>) {
    let cb = d.c - ca;
    let mut da = Vec::with_capacity(d.rows() * ca);
    let mut db = Vec::with_capacity(d.rows() * cb);
    for r in 0..d.rows() {
        let row = &d.data[r * d.c..(r + 1) * d.c];
        da.extend_from_slice(&row[..ca]);
        db.extend_from_slice(&row[ca..]);
    }
    (d.with_channels(ca, da), d.with_channels(cb, db))
}
