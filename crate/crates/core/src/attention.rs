//! Cross-frame attention variants.
//!
//! Every variant computes `Softmax(Q Kᵀ / √d) · V` with queries from the
//! current frame and keys/values gathered from a per-frame list of source
//! frames. The variants differ only in that list.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::{gemm_nn, softmax_in_place, transpose};
use crate::numerics::{gaussian_noise, Real, SeededRng, Tensor};

pub const DEFAULT_GAP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Each frame attends to itself only (no temporal mixing).
    #[serde(rename = "self", alias = "none")]
    SelfOnly,
    /// First frame plus the previous frame.
    SparseCausal,
    /// Frames `0, gap, 2·gap, …` for every query frame.
    Sbist,
    /// All frames.
    Dense,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::SelfOnly,
        AttentionMode::SparseCausal,
        AttentionMode::Sbist,
        AttentionMode::Dense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::SelfOnly => "self",
            AttentionMode::SparseCausal => "sparse_causal",
            AttentionMode::Sbist => "sbist",
            AttentionMode::Dense => "dense",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" | "none" => Ok(AttentionMode::SelfOnly),
            "sparse_causal" | "sc" => Ok(AttentionMode::SparseCausal),
            "sbist" => Ok(AttentionMode::Sbist),
            "dense" | "full" => Ok(AttentionMode::Dense),
            other => Err(Error::invalid(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// 0-based key/value frames for sBiST: `{ j·gap : j = 0 … ⌊(F−1)/gap⌋ }`.
pub fn sbist_frame_indices(frames: usize, gap: usize) -> Result<Vec<usize>> {
    if frames == 0 || gap == 0 {
        return Err(Error::invalid(format!(
            "sbist needs F >= 1 and gap >= 1, got F = {frames}, gap = {gap}"
        )));
    }
    Ok((0..=(frames - 1) / gap).map(|j| j * gap).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSamplingPlan {
    mode: AttentionMode,
    gap: usize,
    frames: usize,
}

impl FrameSamplingPlan {
    pub fn new(mode: AttentionMode, frames: usize, gap: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("frame count must be positive"));
        }
        if gap == 0 {
            return Err(Error::invalid("sbist gap must be positive"));
        }
        Ok(Self { mode, gap, frames })
    }

    /// Per-frame attention, used for image-model training and inference.
    pub fn per_frame(frames: usize) -> Self {
        Self {
            mode: AttentionMode::SelfOnly,
            gap: DEFAULT_GAP,
            frames: frames.max(1),
        }
    }

    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    pub fn gap(&self) -> usize {
        self.gap
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Same plan for a different clip length.
    pub fn with_frames(&self, frames: usize) -> Result<Self> {
        Self::new(self.mode, frames, self.gap)
    }

    /// Ordered key/value source frames for query frame `i`.
    pub fn kv_indices(&self, i: usize) -> Vec<usize> {
        debug_assert!(i < self.frames);
        match self.mode {
            AttentionMode::SelfOnly => vec![i],
            AttentionMode::SparseCausal => vec![0, i.saturating_sub(1)],
            AttentionMode::Sbist => (0..=(self.frames - 1) / self.gap)
                .map(|j| j * self.gap)
                .collect(),
            AttentionMode::Dense => (0..self.frames).collect(),
        }
    }

    /// Number of key/value frames each query frame reads.
    pub fn kv_frames(&self) -> usize {
        match self.mode {
            AttentionMode::SelfOnly => 1,
            AttentionMode::SparseCausal => 2,
            AttentionMode::Sbist => (self.frames - 1) / self.gap + 1,
            AttentionMode::Dense => self.frames,
        }
    }
}

/// Query/key/value projections (`d_in × d` each), shared with the image
/// model's self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub heads: usize,
}

impl<T: Real> AttentionWeights<T> {
    pub fn random(d_in: usize, d: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        let scale = T::lit(1.0 / (d_in as f64).sqrt());
        let mut draw = || -> Result<Tensor<T>> { Ok(gaussian_noise::<T>(&[d_in, d], rng)?.scale(scale)) };
        let w = Self {
            w_q: draw()?,
            w_k: draw()?,
            w_v: draw()?,
            heads,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn d_in(&self) -> usize {
        self.w_q.dims()[0]
    }

    pub fn d(&self) -> usize {
        self.w_q.dims()[1]
    }

    fn validate(&self) -> Result<()> {
        if self.w_q.rank() != 2 {
            return Err(Error::shape("attention projections must be rank 2"));
        }
        self.w_k.expect_dims(self.w_q.dims(), "W_K")?;
        self.w_v.expect_dims(self.w_q.dims(), "W_V")?;
        if self.heads == 0 || !self.d().is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "head count {} does not divide d = {}",
                self.heads,
                self.d()
            )));
        }
        if !(self.w_q.is_finite() && self.w_k.is_finite() && self.w_v.is_finite()) {
            return Err(Error::NonFinite("attention weights".into()));
        }
        Ok(())
    }
}

/// Frame attention over an `(F, S, d_in)` token tensor.
pub fn temporal_attention<T: Real>(
    z: &Tensor<T>,
    w: &AttentionWeights<T>,
    plan: &FrameSamplingPlan,
) -> Result<Tensor<T>> {
    w.validate()?;
    if z.rank() != 3 || z.dims()[2] != w.d_in() {
        return Err(Error::shape(format!(
            "tokens {:?} do not match projections of input width {}",
            z.dims(),
            w.d_in()
        )));
    }
    let (f, s, d_in) = (z.dims()[0], z.dims()[1], z.dims()[2]);
    if plan.frames() != f {
        return Err(Error::shape(format!(
            "plan is for {} frames, tokens have {f}",
            plan.frames()
        )));
    }
    let d = w.d();
    let project = |m: &Tensor<T>| {
        let mut out = vec![T::zero(); f * s * d];
        gemm_nn(f * s, d_in, d, z.data(), m.data(), &mut out);
        out
    };
    let (q, k, v) = (project(&w.w_q), project(&w.w_k), project(&w.w_v));
    let (out, _) = attend_frames(&q, &k, &v, s, d, w.heads, plan, false);
    Tensor::new(&[f, s, d], out)
}

/// Attention probabilities per query frame, laid out `[head][row][key]`.
pub(crate) type FrameProbs<T> = Vec<Vec<T>>;

/// Multi-head attention of `rows` queries against `n` keys/values, all with
/// row width `d`. Returns the `rows × d` output and, if requested, the
/// probabilities laid out `[head][row][key]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_rows<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    rows: usize,
    n: usize,
    d: usize,
    heads: usize,
    keep_probs: bool,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); rows * d];
    let mut probs = if keep_probs {
        vec![T::zero(); heads * rows * n]
    } else {
        Vec::new()
    };
    let mut row = vec![T::zero(); n];
    for h in 0..heads {
        let kt = head_transposed(k, n, d, h * dh, dh);
        for r in 0..rows {
            row.iter_mut().for_each(|x| *x = T::zero());
            for p in 0..dh {
                let qv = q[r * d + h * dh + p] * scale;
                for (x, &kv) in row.iter_mut().zip(&kt[p * n..(p + 1) * n]) {
                    *x = *x + qv * kv;
                }
            }
            softmax_in_place(&mut row);
            let o = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
            for (j, &pj) in row.iter().enumerate() {
                let vrow = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for (ov, &vv) in o.iter_mut().zip(vrow) {
                    *ov = *ov + pj * vv;
                }
            }
            if keep_probs {
                probs[(h * rows + r) * n..(h * rows + r + 1) * n].copy_from_slice(&row);
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attend_rows`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_rows_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    rows: usize,
    n: usize,
    d: usize,
    heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        for r in 0..rows {
            let p = &probs[(h * rows + r) * n..(h * rows + r + 1) * n];
            let g = &dout[r * d + c0..r * d + c1];
            for j in 0..n {
                let vrow = &v[j * d + c0..j * d + c1];
                let mut acc = T::zero();
                for (&gv, &vv) in g.iter().zip(vrow) {
                    acc = acc + gv * vv;
                }
                dp[j] = acc;
                let dvrow = &mut dv[j * d + c0..j * d + c1];
                for (x, &gv) in dvrow.iter_mut().zip(g) {
                    *x = *x + p[j] * gv;
                }
            }
            let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            let qrow = &q[r * d + c0..r * d + c1];
            let dqrow = &mut dq[r * d + c0..r * d + c1];
            for j in 0..n {
                let ds = p[j] * (dp[j] - dot) * scale;
                let krow = &k[j * d + c0..j * d + c1];
                for (x, &kv) in dqrow.iter_mut().zip(krow) {
                    *x = *x + ds * kv;
                }
                let dkrow = &mut dk[j * d + c0..j * d + c1];
                for (x, &qv) in dkrow.iter_mut().zip(qrow) {
                    *x = *x + ds * qv;
                }
            }
        }
    }
}

/// Cross-frame kernel on already projected `q`, `k`, `v` (each `F·S × d`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_frames<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: usize,
    d: usize,
    heads: usize,
    plan: &FrameSamplingPlan,
    keep_probs: bool,
) -> (Vec<T>, Option<FrameProbs<T>>) {
    let f = plan.frames();
    let per_frame: Vec<(Vec<T>, Vec<T>)> = (0..f)
        .into_par_iter()
        .map(|i| {
            let kv = plan.kv_indices(i);
            let k_cat = gather(k, &kv, s * d);
            let v_cat = gather(v, &kv, s * d);
            let q_i = &q[i * s * d..(i + 1) * s * d];
            attend_rows(q_i, &k_cat, &v_cat, s, kv.len() * s, d, heads, keep_probs)
        })
        .collect();
    let mut out = Vec::with_capacity(f * s * d);
    let mut probs = Vec::with_capacity(if keep_probs { f } else { 0 });
    for (o, p) in per_frame {
        out.extend_from_slice(&o);
        if keep_probs {
            probs.push(p);
        }
    }
    (out, keep_probs.then_some(probs))
}

/// Gradients of [`attend_frames`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_frames_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &FrameProbs<T>,
    dout: &[T],
    s: usize,
    d: usize,
    heads: usize,
    plan: &FrameSamplingPlan,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let fl = s * d;
    for i in 0..plan.frames() {
        let kv = plan.kv_indices(i);
        let n = kv.len() * s;
        let k_cat = gather(k, &kv, fl);
        let v_cat = gather(v, &kv, fl);
        let mut dk_cat = vec![T::zero(); n * d];
        let mut dv_cat = vec![T::zero(); n * d];
        attend_rows_backward(
            &q[i * fl..(i + 1) * fl],
            &k_cat,
            &v_cat,
            &probs[i],
            &dout[i * fl..(i + 1) * fl],
            s,
            n,
            d,
            heads,
            &mut dq[i * fl..(i + 1) * fl],
            &mut dk_cat,
            &mut dv_cat,
        );
        for (m, &src) in kv.iter().enumerate() {
            let dst = src * fl..(src + 1) * fl;
            let part = m * fl..(m + 1) * fl;
            for (x, &y) in dk[dst.clone()].iter_mut().zip(&dk_cat[part.clone()]) {
                *x = *x + y;
            }
            for (x, &y) in dv[dst].iter_mut().zip(&dv_cat[part]) {
                *x = *x + y;
            }
        }
    }
    (dq, dk, dv)
}

fn gather<T: Real>(src: &[T], frames: &[usize], frame_len: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(frames.len() * frame_len);
    for &j in frames {
        out.extend_from_slice(&src[j * frame_len..(j + 1) * frame_len]);
    }
    out
}

/// Columns `offset..offset+width` of an `n × d` matrix, transposed.
fn head_transposed<T: Real>(m: &[T], n: usize, d: usize, offset: usize, width: usize) -> Vec<T> {
    if offset == 0 && width == d {
        return transpose(n, d, m);
    }
    let mut out = vec![T::zero(); width * n];
    for j in 0..n {
        for p in 0..width {
            out[p * n + j] = m[j * d + offset + p];
        }
    }
    out
}

/// Analytic cost of one attention call plus the measured time, if any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostAccount {
    pub mode: AttentionMode,
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub kv_frames: usize,
    pub score_flops: u64,
    pub wall_time_s: Option<f64>,
}

pub fn cost_account(plan: &FrameSamplingPlan, tokens: usize, dim: usize) -> CostAccount {
    let kv = plan.kv_frames();
    let f = plan.frames() as u64;
    let s = tokens as u64;
    CostAccount {
        mode: plan.mode(),
        frames: plan.frames(),
        tokens,
        dim,
        kv_frames: kv,
        score_flops: f * s * (kv as u64 * s) * dim as u64 * 2,
        wall_time_s: None,
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub frames: usize,
    /// Latent side length; tokens per frame is its square.
    pub latent_side: usize,
    pub dim: usize,
    pub gap: usize,
    pub modes: Vec<AttentionMode>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frames: 24,
            latent_side: 64,
            dim: 4,
            gap: DEFAULT_GAP,
            modes: AttentionMode::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// Times `temporal_attention` once per mode on the same random input and
/// returns rows sorted by `kv_frames`.
pub fn run_attention_benchmark(cfg: &BenchConfig) -> Result<Vec<CostAccount>> {
    let tokens = cfg.latent_side * cfg.latent_side;
    let mut rng = SeededRng::stream(cfg.seed, "bench");
    let z = gaussian_noise::<f32>(&[cfg.frames, tokens, cfg.dim], &mut rng)?;
    let w = AttentionWeights::random(cfg.dim, cfg.dim, 1, &mut rng)?;
    let mut rows = Vec::with_capacity(cfg.modes.len());
    for &mode in &cfg.modes {
        let plan = FrameSamplingPlan::new(mode, cfg.frames, cfg.gap)?;
        let start = Instant::now();
        let out = temporal_attention(&z, &w, &plan)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(&out);
        let mut row = cost_account(&plan, tokens, cfg.dim);
        row.wall_time_s = Some(elapsed);
        rows.push(row);
    }
    rows.sort_by_key(|r| r.kv_frames);
    Ok(rows)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    mode: &'a str,
    #[serde(rename = "F")]
    frames: usize,
    #[serde(rename = "S")]
    tokens: usize,
    d: usize,
    kv_frames: usize,
    score_flops: u64,
    wall_time_s: String,
}

/// CSV with header `mode,F,S,d,kv_frames,score_flops,wall_time_s`.
pub fn write_cost_csv<W: Write>(w: W, rows: &[CostAccount]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(CsvRow {
            mode: r.mode.name(),
            frames: r.frames,
            tokens: r.tokens,
            d: r.dim,
            kv_frames: r.kv_frames,
            score_flops: r.score_flops,
            wall_time_s: r.wall_time_s.map(|t| format!("{t:.6}")).unwrap_or_default(),
        })?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sbist_indices_examples() {
        assert_eq!(
            sbist_frame_indices(24, 3).unwrap(),
            vec![0, 3, 6, 9, 12, 15, 18, 21]
        );
        assert_eq!(sbist_frame_indices(1, 3).unwrap(), vec![0]);
        assert_eq!(sbist_frame_indices(5, 3).unwrap(), vec![0, 3]);
        assert!(sbist_frame_indices(0, 3).is_err());
        assert!(sbist_frame_indices(4, 0).is_err());
    }

    #[test]
    fn plan_kv_sets() {
        let sc = FrameSamplingPlan::new(AttentionMode::SparseCausal, 5, 3).unwrap();
        assert_eq!(sc.kv_indices(0), vec![0, 0]);
        assert_eq!(sc.kv_indices(4), vec![0, 3]);
        let sb = FrameSamplingPlan::new(AttentionMode::Sbist, 7, 3).unwrap();
        assert!((0..7).all(|i| sb.kv_indices(i) == vec![0, 3, 6]));
        let dense = FrameSamplingPlan::new(AttentionMode::Dense, 3, 3).unwrap();
        assert_eq!(dense.kv_indices(1), vec![0, 1, 2]);
        assert_eq!(FrameSamplingPlan::per_frame(4).kv_indices(2), vec![2]);
    }

    #[test]
    fn cost_examples() {
        let acc = |mode| cost_account(&FrameSamplingPlan::new(mode, 24, 3).unwrap(), 16, 4);
        assert_eq!(acc(AttentionMode::Dense).kv_frames, 24);
        assert_eq!(acc(AttentionMode::Sbist).kv_frames, 8);
        assert_eq!(acc(AttentionMode::SparseCausal).kv_frames, 2);
        assert_eq!(acc(AttentionMode::SelfOnly).kv_frames, 1);
        assert_eq!(acc(AttentionMode::Sbist).score_flops, 24 * 16 * (8 * 16) * 4 * 2);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AttentionMode::ALL {
            assert_eq!(m.name().parse::<AttentionMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<AttentionMode>(&json).unwrap(), m);
        }
        assert!("bogus".parse::<AttentionMode>().is_err());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let mut rng = SeededRng::new(1);
        let w = AttentionWeights::<f64>::random(3, 4, 1, &mut rng).unwrap();
        let z = Tensor::<f64>::zeros(&[2, 2, 5]);
        let plan = FrameSamplingPlan::new(AttentionMode::Dense, 2, 3).unwrap();
        assert!(temporal_attention(&z, &w, &plan).is_err());
        let z = Tensor::<f64>::zeros(&[3, 2, 3]);
        assert!(temporal_attention(&z, &w, &plan).is_err());
    }

    #[test]
    fn csv_schema() {
        let plan = FrameSamplingPlan::new(AttentionMode::Sbist, 24, 3).unwrap();
        let mut row = cost_account(&plan, 4096, 4);
        row.wall_time_s = Some(1.5);
        let mut buf = Vec::new();
        write_cost_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "mode,F,S,d,kv_frames,score_flops,wall_time_s"
        );
        assert_eq!(
            lines.next().unwrap(),
            format!("sbist,24,4096,4,8,{},1.500000", 24u64 * 4096 * 8 * 4096 * 4 * 2)
        );
    }
}
