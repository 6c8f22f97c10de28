//! Image datasets in the `QDS1` layout and a procedural 10-class generator.
//!
//! A dataset directory holds `images.bin` (magic `QDS1`, then `N, C, H, W`
//! as little-endian `u32`, then `N·C·H·W` raw `u8` pixels) and `labels.bin`
//! (one little-endian `u32` per sample). Pixels are scaled to `[0, 1]` and
//! standardized per channel when loaded.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::TensorF;

pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";
const MAGIC: &[u8; 4] = b"QDS1";

/// Undecoded pixels and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub shape: [usize; 3],
    pub pixels: Vec<u8>,
    pub labels: Vec<u32>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut img = BufWriter::new(fs::File::create(dir.join(IMAGES_FILE))?);
        img.write_all(MAGIC)?;
        for v in [self.len(), self.shape[0], self.shape[1], self.shape[2]] {
            img.write_all(&(v as u32).to_le_bytes())?;
        }
        img.write_all(&self.pixels)?;
        img.flush()?;
        let mut lab = BufWriter::new(fs::File::create(dir.join(LABELS_FILE))?);
        for &l in &self.labels {
            lab.write_all(&l.to_le_bytes())?;
        }
        lab.flush()?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let img = fs::read(dir.join(IMAGES_FILE))?;
        if img.len() < 20 || &img[..4] != MAGIC {
            return Err(Error::Format(format!(
                "{} is not a QDS1 file",
                dir.join(IMAGES_FILE).display()
            )));
        }
        let word = |i: usize| u32::from_le_bytes(img[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (n, c, h, w) = (word(0), word(1), word(2), word(3));
        let expected = n * c * h * w;
        if img.len() - 20 != expected {
            return Err(Error::Format(format!(
                "images.bin holds {} pixel bytes, header says {expected}",
                img.len() - 20
            )));
        }
        let lab = fs::read(dir.join(LABELS_FILE))?;
        if lab.len() != 4 * n {
            return Err(Error::Format(format!(
                "labels.bin has {} bytes for {n} samples",
                lab.len()
            )));
        }
        let labels = lab
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            shape: [c, h, w],
            pixels: img[20..].to_vec(),
            labels,
        })
    }
}

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn uniform(channels: usize, mean: f32, std: f32) -> Self {
        Self {
            mean: vec![mean; channels],
            std: vec![std; channels],
        }
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::uniform(3, 0.5, 0.25)
    }
}

/// Decoded samples ready for the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_shape: [usize; 3],
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

/// A batch of inputs `N×C×H×W` with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: TensorF,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn from_raw(raw: &RawImages, norm: &Normalization) -> Result<Self> {
        let [c, h, w] = raw.shape;
        if norm.mean.len() != c || norm.std.len() != c {
            return Err(Error::Config(format!(
                "normalization has {} channel(s), images have {c}",
                norm.mean.len()
            )));
        }
        let hw = h * w;
        let inputs = raw
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ch = (i / hw) % c;
                (p as f32 / 255.0 - norm.mean[ch]) / norm.std[ch]
            })
            .collect();
        Ok(Self {
            sample_shape: raw.shape,
            inputs,
            labels: raw.labels.iter().map(|&l| l as usize).collect(),
        })
    }

    pub fn load_dir(dir: &Path, norm: &Normalization) -> Result<Self> {
        Self::from_raw(&RawImages::read_dir(dir)?, norm)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape,
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `count` samples of a seeded permutation.
    pub fn sample_subset(&self, count: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(count.min(self.len()));
        self.subset(&idx)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let sub = self.subset(indices);
        let [c, h, w] = self.sample_shape;
        Batch {
            inputs: TensorF::new(vec![indices.len(), c, h, w], sub.inputs).expect("finite inputs"),
            labels: sub.labels,
        }
    }

    pub fn all(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Training and validation sets stored as `train/` and `val/` subdirectories.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub val: Dataset,
}

impl DataSplit {
    pub fn load_dir(dir: &Path, norm: &Normalization) -> Result<Self> {
        Ok(Self {
            train: Dataset::load_dir(&dir.join("train"), norm)?,
            val: Dataset::load_dir(&dir.join("val"), norm)?,
        })
    }
}

/// Number of classes produced by [`synth_images`].
pub const SYNTH_CLASSES: usize = 10;

/// Procedural 10-class, 3×32×32 image set: stripe textures in four
/// orientations, a disc, a ring, a square outline, a plus, a checkerboard and
/// a diagonal cross. Position, scale, period, colours and pixel noise vary
/// per sample. Classes are balanced.
pub fn synth_images(n: usize, seed: u64) -> RawImages {
    const S: usize = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.08).expect("valid sigma");
    let mut labels: Vec<u32> = (0..n).map(|i| (i % SYNTH_CLASSES) as u32).collect();
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(n * 3 * S * S);
    for &label in &labels {
        let fg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..1.0));
        let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.35));
        let period = rng.gen_range(4.0f32..8.0);
        let phase = rng.gen_range(0.0f32..period);
        let cx = rng.gen_range(10.0f32..22.0);
        let cy = rng.gen_range(10.0f32..22.0);
        let radius = rng.gen_range(5.0f32..10.0);
        let thick = rng.gen_range(1.5f32..3.0);
        let mut mask = [0.0f32; S * S];
        for y in 0..S {
            for x in 0..S {
                let (xf, yf) = (x as f32, y as f32);
                let (dx, dy) = (xf - cx, yf - cy);
                let stripe = |t: f32| ((t + phase).rem_euclid(period) < period / 2.0) as u8 as f32;
                let inside_box = dx.abs() <= radius && dy.abs() <= radius;
                let on = match label {
                    0 => stripe(yf),
                    1 => stripe(xf),
                    2 => stripe((xf + yf) / std::f32::consts::SQRT_2),
                    3 => stripe((xf - yf + S as f32) / std::f32::consts::SQRT_2),
                    4 => (dx * dx + dy * dy <= radius * radius) as u8 as f32,
                    5 => ((dx * dx + dy * dy).sqrt() - radius).abs().le(&(thick * 0.75)) as u8 as f32,
                    6 => (inside_box && (dx.abs() > radius - thick || dy.abs() > radius - thick)) as u8 as f32,
                    7 => (inside_box && (dx.abs() <= thick * 0.75 || dy.abs() <= thick * 0.75)) as u8 as f32,
                    8 => {
                        let cell = period.round().max(3.0) as usize;
                        (((x + phase as usize) / cell + (y + phase as usize) / cell) % 2) as f32
                    }
                    _ => (inside_box && ((dx - dy).abs() <= thick || (dx + dy).abs() <= thick)) as u8 as f32,
                };
                mask[y * S + x] = on;
            }
        }
        for ch in 0..3 {
            for &m in &mask {
                let v = bg[ch] + (fg[ch] - bg[ch]) * m + noise.sample(&mut rng);
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RawImages {
        shape: [3, S, S],
        pixels,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qds_round_trip() {
        let raw = synth_images(20, 3);
        let dir = tempfile::tempdir().unwrap();
        raw.write_dir(dir.path()).unwrap();
        assert_eq!(RawImages::read_dir(dir.path()).unwrap(), raw);
    }

    #[test]
    fn header_layout() {
        let raw = RawImages {
            shape: [1, 2, 2],
            pixels: vec![0, 255, 10, 20],
            labels: vec![7],
        };
        let dir = tempfile::tempdir().unwrap();
        raw.write_dir(dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(IMAGES_FILE)).unwrap();
        assert_eq!(&bytes[..4], b"QDS1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..], &[0, 255, 10, 20]);
        assert_eq!(fs::read(dir.path().join(LABELS_FILE)).unwrap(), 7u32.to_le_bytes());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        synth_images(4, 0).write_dir(dir.path()).unwrap();
        let p = dir.path().join(IMAGES_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(RawImages::read_dir(dir.path()).is_err());
    }

    #[test]
    fn normalization_per_channel() {
        let raw = RawImages {
            shape: [2, 1, 1],
            pixels: vec![255, 0],
            labels: vec![0],
        };
        let norm = Normalization {
            mean: vec![0.5, 0.0],
            std: vec![0.5, 2.0],
        };
        let d = Dataset::from_raw(&raw, &norm).unwrap();
        assert_eq!(d.inputs, vec![1.0, 0.0]);
    }

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let a = synth_images(100, 11);
        assert_eq!(a, synth_images(100, 11));
        for c in 0..10u32 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert_ne!(a, synth_images(100, 12));
    }
}
