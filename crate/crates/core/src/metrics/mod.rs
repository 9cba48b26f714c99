//! Frame consistency, the mask-IoU condition proxy and the ablation grid.

mod ablation;

pub use ablation::{run_ablation, AblationCell, AblationConfig, AblationRow, EvalScene, MetricReport};

use crate::error::{Error, Result};
use crate::video::{ConditionMap, RgbVideo};

/// Maps one planar RGB frame (`[3, H, W]`) to a unit-norm vector.
pub trait FrameEmbedder {
    fn embed(&self, frame: &[f32], h: usize, w: usize) -> Result<Vec<f64>>;
}

/// Box-downsampled grayscale thumbnail, flattened and normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyEmbedder {
    pub side: usize,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self { side: 8 }
    }
}

impl FrameEmbedder for ToyEmbedder {
    fn embed(&self, frame: &[f32], h: usize, w: usize) -> Result<Vec<f64>> {
        let n = self.side;
        if h < n || w < n {
            return Err(Error::shape(format!("frame {h}×{w} is smaller than the {n}×{n} thumbnail")));
        }
        let hw = h * w;
        let mut sums = vec![0.0; n * n];
        let mut counts = vec![0usize; n * n];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let g = 0.299 * frame[p] as f64 + 0.587 * frame[hw + p] as f64 + 0.114 * frame[2 * hw + p] as f64;
                let cell = (y * n / h) * n + x * n / w;
                sums[cell] += g;
                counts[cell] += 1;
            }
        }
        let v: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
        normalize(v)
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::NonFinite("frame embedding has zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Mean cosine similarity of consecutive frame embeddings.
pub fn frame_consistency(video: &RgbVideo, e: &dyn FrameEmbedder) -> Result<f64> {
    let f = video.frame_count();
    if f < 2 {
        return Err(Error::invalid("frame consistency needs at least two frames"));
    }
    let (h, w) = (video.height(), video.width());
    let embs = (0..f)
        .map(|i| e.embed(video.frame(i), h, w))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = embs
        .windows(2)
        .map(|p| {
            let dot: f64 = p[0].iter().zip(&p[1]).map(|(a, b)| a * b).sum();
            dot.clamp(-1.0, 1.0)
        })
        .sum();
    Ok(total / (f - 1) as f64)
}

/// Foreground of one frame: pixels whose RGB distance from the per-channel
/// median colour exceeds `threshold`.
pub fn foreground_mask(frame: &[f32], h: usize, w: usize, threshold: f64) -> Vec<bool> {
    let hw = h * w;
    let median: Vec<f64> = (0..3)
        .map(|c| {
            let mut ch: Vec<f32> = frame[c * hw..(c + 1) * hw].to_vec();
            ch.sort_by(f32::total_cmp);
            let mid = hw / 2;
            if hw % 2 == 1 {
                ch[mid] as f64
            } else {
                (ch[mid - 1] as f64 + ch[mid] as f64) / 2.0
            }
        })
        .collect();
    (0..hw)
        .map(|p| {
            let d2: f64 = (0..3)
                .map(|c| {
                    let d = frame[c * hw + p] as f64 - median[c];
                    d * d
                })
                .sum();
            d2.sqrt() > threshold
        })
        .collect()
}

pub fn iou(a: &[bool], b: &[bool]) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Mean IoU between detected foreground and the condition masks. Frames
/// whose mask is empty are skipped.
pub fn condition_accuracy_iou(video: &RgbVideo, cond: &ConditionMap, threshold: f64) -> Result<f64> {
    if cond.frame_count() != video.frame_count()
        || cond.height() != video.height()
        || cond.width() != video.width()
    {
        return Err(Error::shape("condition masks and video frames disagree"));
    }
    let (h, w) = (video.height(), video.width());
    let mut scores = Vec::new();
    for i in 0..video.frame_count() {
        let mask = cond.mask(i);
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let fg = foreground_mask(video.frame(i), h, w, threshold);
        scores.push(iou(&fg, &mask).expect("mask is non-empty"));
    }
    if scores.is_empty() {
        return Err(Error::invalid("every condition mask is empty"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
