//! RGB frame sequences, condition rasters and their PPM/PGM storage.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frames `[F, 3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbVideo {
    frames: Tensor<f32>,
}

impl RgbVideo {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 4 || frames.dims()[1] != 3 {
            return Err(Error::shape(format!(
                "video must be [F, 3, H, W], got {:?}",
                frames.dims()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("video frames".into()));
        }
        Ok(Self { frames })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.dims()[3]
    }

    /// One frame, `[3, H, W]` flattened.
    pub fn frame(&self, i: usize) -> &[f32] {
        self.frames.slab(i)
    }

    /// Repeats `frame` (`[3, H, W]` flattened) `count` times.
    pub fn repeat_frame(frame: &[f32], h: usize, w: usize, count: usize) -> Result<Self> {
        if frame.len() != 3 * h * w {
            return Err(Error::shape("frame length does not match 3·H·W"));
        }
        Self::new(Tensor::new(&[count, 3, h, w], frame.repeat(count))?)
    }

    /// 8-bit quantization used by the on-disk format.
    pub fn quantized(&self) -> Vec<u8> {
        self.frames.data().iter().map(|&v| quantize(v)).collect()
    }

    pub fn write_ppm_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (h, w) = (self.height(), self.width());
        let mut paths = Vec::with_capacity(self.frame_count());
        for i in 0..self.frame_count() {
            let planar = self.frame(i);
            let mut rgb = Vec::with_capacity(3 * h * w);
            for p in 0..h * w {
                for c in 0..3 {
                    rgb.push(quantize(planar[c * h * w + p]));
                }
            }
            let path = dir.join(format!("frame_{i:04}.ppm"));
            write_netpbm(&path, b"P6", w, h, &rgb)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Reads every `frame_*.ppm` in `dir`, in name order.
    pub fn read_ppm_dir(dir: &Path) -> Result<Self> {
        let files = numbered_files(dir, "frame_", ".ppm")?;
        let mut data = Vec::new();
        let mut size = None;
        for path in &files {
            let img = read_netpbm(path, b"P6")?;
            if *size.get_or_insert((img.width, img.height)) != (img.width, img.height) {
                return Err(Error::Format {
                    what: "video directory",
                    detail: format!("{} has a different size", path.display()),
                });
            }
            let hw = img.width * img.height;
            for c in 0..3 {
                data.extend((0..hw).map(|p| img.pixels[p * 3 + c] as f32 / 255.0));
            }
        }
        let (w, h) = size.expect("numbered_files never returns an empty list");
        Self::new(Tensor::new(&[files.len(), 3, h, w], data)?)
    }
}

/// Per-frame condition raster `[F, C, H, W]`; the synthetic data uses a
/// single binary mask channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMap {
    data: Tensor<f32>,
}

impl ConditionMap {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::shape(format!(
                "condition must be [F, C, H, W], got {:?}",
                data.dims()
            )));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn frame_count(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }

    /// Channel 0 of frame `i` thresholded at 0.5.
    pub fn mask(&self, i: usize) -> Vec<bool> {
        let hw = self.height() * self.width();
        self.data.slab(i)[..hw].iter().map(|&v| v > 0.5).collect()
    }

    pub fn from_masks(masks: &[Vec<bool>], h: usize, w: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.len() != h * w {
                return Err(Error::shape("mask length does not match H·W"));
            }
            data.extend(m.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        Self::new(Tensor::new(&[masks.len(), 1, h, w], data)?)
    }

    /// Repeats frame 0 of `self` `count` times.
    pub fn repeat_first(&self, count: usize) -> Result<Self> {
        let d = self.data.dims();
        Self::new(Tensor::new(&[count, d[1], d[2], d[3]], self.data.slab(0).repeat(count))?)
    }

    pub fn write_pgm_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hw = self.height() * self.width();
        for i in 0..self.frame_count() {
            let px: Vec<u8> = self.data.slab(i)[..hw].iter().map(|&v| quantize(v)).collect();
            write_netpbm(
                &dir.join(format!("mask_{i:04}.pgm")),
                b"P5",
                self.width(),
                self.height(),
                &px,
            )?;
        }
        Ok(())
    }

    pub fn read_pgm_dir(dir: &Path) -> Result<Self> {
        let files = numbered_files(dir, "mask_", ".pgm")?;
        let mut masks = Vec::with_capacity(files.len());
        let mut size = None;
        for path in &files {
            let img = read_netpbm(path, b"P5")?;
            if *size.get_or_insert((img.width, img.height)) != (img.width, img.height) {
                return Err(Error::Format {
                    what: "mask directory",
                    detail: format!("{} has a different size", path.display()),
                });
            }
            masks.push(img.pixels.iter().map(|&v| v >= 128).collect());
        }
        let (w, h) = size.expect("numbered_files never returns an empty list");
        Self::from_masks(&masks, h, w)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn numbered_files(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(suffix))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format {
            what: "frame directory",
            detail: format!("no {prefix}*{suffix} files in {}", dir.display()),
        });
    }
    Ok(files)
}

struct Netpbm {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

fn write_netpbm(path: &Path, magic: &[u8], w: usize, h: usize, px: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(px.len() + 32);
    buf.extend_from_slice(magic);
    write!(buf, "\n{w} {h}\n255\n").expect("writing to a Vec cannot fail");
    buf.extend_from_slice(px);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_netpbm(path: &Path, magic: &[u8]) -> Result<Netpbm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        what: "netpbm image",
        detail: format!("{}: {detail}", path.display()),
    };
    if !bytes.starts_with(magic) {
        return Err(bad("unexpected magic".into()));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let channels = if magic == b"P6" { 3 } else { 1 };
    let n = width * height * channels;
    let pixels = bytes
        .get(pos..pos + n)
        .ok_or_else(|| bad("truncated payload".into()))?
        .to_vec();
    Ok(Netpbm {
        width,
        height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..2 * 3 * 4 * 5).map(|i| (i % 256) as f32 / 255.0).collect();
        let v = RgbVideo::new(Tensor::new(&[2, 3, 4, 5], data).unwrap()).unwrap();
        v.write_ppm_dir(dir.path()).unwrap();
        assert!(dir.path().join("frame_0001.ppm").exists());
        let back = RgbVideo::read_ppm_dir(dir.path()).unwrap();
        assert_eq!(back.quantized(), v.quantized());
    }

    #[test]
    fn pgm_masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let masks = vec![vec![true, false, false, true], vec![false; 4]];
        let c = ConditionMap::from_masks(&masks, 2, 2).unwrap();
        c.write_pgm_dir(dir.path()).unwrap();
        let back = ConditionMap::read_pgm_dir(dir.path()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.mask(0), masks[0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        fs::write(&path, b"P5\n# note\n2 1\n255\n\x00\xff").unwrap();
        let img = read_netpbm(&path, b"P5").unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![0, 255]);
        assert!(read_netpbm(&path, b"P6").is_err());
    }
}
