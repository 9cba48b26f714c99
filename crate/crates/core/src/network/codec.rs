use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::video::RgbVideo;

/// Fixed orthonormal patch projection between RGB pixels and latents.
///
/// Each `patch × patch × 3` block maps to four coefficients: the mean of each
/// colour channel and a vertical luminance ramp. Pixels are shifted to
/// `[-1, 1]` first and coefficients are divided by `patch` so a flat colour
/// block of value `v` encodes to `v` in its channel, then multiplied by
/// `scale` to bring the latents near unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    patch: usize,
    scale: f64,
    /// `4 × (3·patch·patch)`, rows orthonormal, layout `(c, y, x)`.
    basis: Vec<Vec<f64>>,
}

pub const LATENT_CHANNELS: usize = 4;

impl LatentCodec {
    pub fn new(patch: usize) -> Result<Self> {
        Self::with_scale(patch, 1.0)
    }

    pub fn with_scale(patch: usize, scale: f64) -> Result<Self> {
        if patch < 2 {
            return Err(Error::invalid("codec patch must be at least 2"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("latent scale must be positive, got {scale}")));
        }
        let n = patch * patch;
        let mut basis = Vec::with_capacity(LATENT_CHANNELS);
        for c in 0..3 {
            let mut v = vec![0.0; 3 * n];
            v[c * n..(c + 1) * n].fill(1.0 / patch as f64);
            basis.push(v);
        }
        let centre = (patch as f64 - 1.0) / 2.0;
        let mut ramp = vec![0.0; 3 * n];
        for c in 0..3 {
            for y in 0..patch {
                for x in 0..patch {
                    ramp[c * n + y * patch + x] = y as f64 - centre;
                }
            }
        }
        let norm = ramp.iter().map(|v| v * v).sum::<f64>().sqrt();
        ramp.iter_mut().for_each(|v| *v /= norm);
        basis.push(ramp);
        Ok(Self { patch, scale, basis })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `[F, 3, H, W]` pixels to `[F, 4, H/p, W/p]` latents.
    pub fn encode<T: Real>(&self, video: &RgbVideo) -> Result<Tensor<T>> {
        let p = self.patch;
        let (f, h, w) = (video.frame_count(), video.height(), video.width());
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "frame size {h}×{w} is not a multiple of the patch {p}"
            )));
        }
        let (lh, lw) = (h / p, w / p);
        let scale = self.scale / p as f64;
        let mut out = vec![T::zero(); f * LATENT_CHANNELS * lh * lw];
        for fi in 0..f {
            let px = video.frame(fi);
            for by in 0..lh {
                for bx in 0..lw {
                    for (k, b) in self.basis.iter().enumerate() {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for y in 0..p {
                                for x in 0..p {
                                    let v = px[(c * h + by * p + y) * w + bx * p + x] as f64;
                                    acc += b[(c * p + y) * p + x] * (2.0 * v - 1.0);
                                }
                            }
                        }
                        out[((fi * LATENT_CHANNELS + k) * lh + by) * lw + bx] = T::lit(acc * scale);
                    }
                }
            }
        }
        Tensor::new(&[f, LATENT_CHANNELS, lh, lw], out)
    }

    /// Latents back to pixels, clamped into `[0, 1]`.
    pub fn decode<T: Real>(&self, z: &Tensor<T>) -> Result<RgbVideo> {
        RgbVideo::new(self.decode_raw(z)?.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Latents back to pixels without clamping.
    pub fn decode_raw<T: Real>(&self, z: &Tensor<T>) -> Result<Tensor<f32>> {
        let p = self.patch;
        if z.rank() != 4 || z.dims()[1] != LATENT_CHANNELS {
            return Err(Error::shape(format!(
                "latent must be [F, {LATENT_CHANNELS}, H, W], got {:?}",
                z.dims()
            )));
        }
        let (f, lh, lw) = (z.dims()[0], z.dims()[2], z.dims()[3]);
        let (h, w) = (lh * p, lw * p);
        let mut out = vec![0f32; f * 3 * h * w];
        let zd = z.data();
        for fi in 0..f {
            for by in 0..lh {
                for bx in 0..lw {
                    let coef: Vec<f64> = (0..LATENT_CHANNELS)
                        .map(|k| zd[((fi * LATENT_CHANNELS + k) * lh + by) * lw + bx].f64() * p as f64 / self.scale)
                        .collect();
                    for c in 0..3 {
                        for y in 0..p {
                            for x in 0..p {
                                let i = (c * p + y) * p + x;
                                let v: f64 = self.basis.iter().zip(&coef).map(|(b, a)| b[i] * a).sum();
                                out[((fi * 3 + c) * h + by * p + y) * w + bx * p + x] =
                                    ((v + 1.0) / 2.0) as f32;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[f, 3, h, w], out)
    }
}
