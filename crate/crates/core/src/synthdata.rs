//! Synthetic scenes with a single spatial-redundancy dial.
//!
//! Each channel is white Gaussian noise convolved with a separable Gaussian
//! kernel of standard deviation `(λ − 1) / 2` pixels and rescaled to unit
//! variance, so `λ = 1` is uncorrelated noise and correlation between two
//! pixels decays to `1/e` at a distance of about `λ − 1` pixels. Channels
//! after the first mix in the first channel's field with weight
//! [`CHANNEL_MIX`].
//!
//! Segmentation labels bucket the first channel by the scene thresholds,
//! pixel by pixel or, with a label block `b > 1`, by the mean of each
//! `b × b` block scaled to unit variance;
//! presence labels mark which buckets cover more than a per-class share of
//! the image (any pixel at all when no shares are given).
//!
//! On disk a dataset is a directory with `meta.json`, `images.bin`
//! (`f32` little-endian, `H × W × C` per sample, samples concatenated) and
//! `labels.bin` (per sample: one presence byte per class, then `H × W`
//! class bytes).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::patching::{ImageSample, Labels};
use crate::{Error, Result};

/// Weight of the first channel's field in every later channel.
pub const CHANNEL_MIX: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Correlation length in pixels, at least 1.
    pub lambda: f64,
    pub classes: usize,
    /// Strictly increasing bucket edges; `classes = thresholds.len() + 1`.
    pub thresholds: Vec<f64>,
    /// Side of the square blocks whose standardized mean is bucketed; 1
    /// labels every pixel by its own value.
    #[serde(default = "one")]
    pub label_block: usize,
    /// Per-class pixel share a bucket must exceed to count as present;
    /// empty means a single pixel suffices.
    #[serde(default)]
    pub presence_fractions: Vec<f64>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("scene extents must be positive".into()));
        }
        if !(self.lambda >= 1.0) {
            return Err(Error::Config(format!("correlation length {} below 1", self.lambda)));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("class thresholds must be strictly increasing".into()));
        }
        if self.classes != self.thresholds.len() + 1 || self.classes > 255 {
            return Err(Error::Config(format!(
                "{} thresholds define {} classes, spec says {}",
                self.thresholds.len(),
                self.thresholds.len() + 1,
                self.classes
            )));
        }
        if self.label_block == 0 || self.height % self.label_block != 0 || self.width % self.label_block != 0 {
            return Err(Error::Config(format!(
                "label block {} does not tile {}x{}",
                self.label_block, self.height, self.width
            )));
        }
        if !self.presence_fractions.is_empty() && self.presence_fractions.len() != self.classes {
            return Err(Error::Config(format!(
                "{} presence shares for {} classes",
                self.presence_fractions.len(),
                self.classes
            )));
        }
        if self.presence_fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(Error::Config("presence shares must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn kernel_sigma(&self) -> f64 {
        (self.lambda - 1.0) / 2.0
    }
}

fn one() -> usize {
    1
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut w: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// One unit-variance correlated field, `h × w` row-major.
fn field(rng: &mut ChaCha8Rng, kernel: &[f64], h: usize, w: usize) -> Vec<f64> {
    let r = kernel.len() / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let noise: Vec<f64> = (0..ph * pw).map(|_| StandardNormal.sample(rng)).collect();
    // Horizontal pass: ph × w.
    let mut tmp = vec![0.0; ph * w];
    for y in 0..ph {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * noise[y * pw + x + k])
                .sum();
        }
    }
    // Vertical pass: h × w.
    let scale: f64 = kernel.iter().map(|v| v * v).sum();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[(y + k) * w + x])
                .sum();
            out[y * w + x] = v / scale;
        }
    }
    out
}

/// Standard deviation of a `b × b` block mean of a unit-variance field
/// built with `kernel`.
fn block_mean_std(kernel: &[f64], b: usize) -> f64 {
    // The block mean is white noise filtered by kernel ∗ box(b) / b on
    // each axis, over the field's own normalization Σ kernel².
    let mut h = vec![0.0; kernel.len() + b - 1];
    for (i, k) in kernel.iter().enumerate() {
        for j in 0..b {
            h[i + j] += k / b as f64;
        }
    }
    let num: f64 = h.iter().map(|v| v * v).sum();
    let den: f64 = kernel.iter().map(|v| v * v).sum();
    num / den
}

/// Values the thresholds apply to, one per pixel.
fn label_field(base: &[f64], spec: &SceneSpec, kernel: &[f64]) -> Vec<f64> {
    let b = spec.label_block;
    if b == 1 {
        return base.to_vec();
    }
    let (h, w) = (spec.height, spec.width);
    let scale = 1.0 / (block_mean_std(kernel, b) * (b * b) as f64);
    let mut out = vec![0.0; h * w];
    for by in 0..h / b {
        for bx in 0..w / b {
            let mut total = 0.0;
            for y in by * b..(by + 1) * b {
                total += base[y * w + bx * b..y * w + (bx + 1) * b].iter().sum::<f64>();
            }
            let z = total * scale;
            for y in by * b..(by + 1) * b {
                out[y * w + bx * b..y * w + (bx + 1) * b].fill(z);
            }
        }
    }
    out
}

fn bucket(v: f64, thresholds: &[f64]) -> u8 {
    thresholds.iter().filter(|&&t| v >= t).count() as u8
}

/// Sample `index` of the scene family; index 0 is [`generate`].
pub fn generate_sample(spec: &SceneSpec, index: u64) -> Result<ImageSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let kernel = gaussian_kernel(spec.kernel_sigma());
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let base = field(&mut rng, &kernel, h, w);
    let own = (1.0 - CHANNEL_MIX * CHANNEL_MIX).sqrt();
    let extra: Vec<Vec<f64>> = (1..c).map(|_| field(&mut rng, &kernel, h, w)).collect();
    let mut pixels = Vec::with_capacity(h * w * c);
    for i in 0..h * w {
        pixels.push(base[i] as f32);
        for e in &extra {
            pixels.push((CHANNEL_MIX * base[i] + own * e[i]) as f32);
        }
    }
    // Labels use the stored (f32) first channel so they can be recomputed
    // from a written dataset.
    let stored: Vec<f64> = (0..h * w).map(|i| pixels[i * c] as f64).collect();
    let segmentation: Vec<u8> = label_field(&stored, spec, &kernel)
        .into_iter()
        .map(|v| bucket(v, &spec.thresholds))
        .collect();
    let presence = class_shares(&segmentation, spec.classes)
        .iter()
        .enumerate()
        .map(|(c, &share)| {
            let floor = spec.presence_fractions.get(c).copied().unwrap_or(0.0);
            u8::from(share > floor)
        })
        .collect();
    ImageSample::new(
        format!("s{}-{index}", spec.seed),
        h,
        w,
        c,
        pixels,
        Labels {
            presence,
            segmentation,
        },
    )
}

/// Share of pixels in each class.
pub fn class_shares(segmentation: &[u8], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &s in segmentation {
        counts[s as usize] += 1;
    }
    counts
        .iter()
        .map(|&n| n as f64 / segmentation.len() as f64)
        .collect()
}

pub fn generate(spec: &SceneSpec) -> Result<ImageSample> {
    generate_sample(spec, 0)
}

/// `count` samples with indices `offset..offset + count`.
pub fn generate_dataset(spec: &SceneSpec, offset: u64, count: usize) -> Result<Vec<ImageSample>> {
    (offset..offset + count as u64)
        .into_par_iter()
        .map(|i| generate_sample(spec, i))
        .collect()
}

/// Mean lag-1 autocorrelation over channels, horizontal and vertical.
pub fn lag1_autocorrelation(sample: &ImageSample) -> f64 {
    let (h, w, c) = (sample.height, sample.width, sample.channels);
    let mut total = 0.0;
    for ch in 0..c {
        let v = |y: usize, x: usize| sample.pixel(y, x, ch) as f64;
        let mean = (0..h * w).map(|i| v(i / w, i % w)).sum::<f64>() / (h * w) as f64;
        let var = (0..h * w).map(|i| (v(i / w, i % w) - mean).powi(2)).sum::<f64>() / (h * w) as f64;
        let mut horiz = 0.0;
        let mut vert = 0.0;
        for y in 0..h {
            for x in 0..w {
                let a = v(y, x) - mean;
                if x + 1 < w {
                    horiz += a * (v(y, x + 1) - mean);
                }
                if y + 1 < h {
                    vert += a * (v(y + 1, x) - mean);
                }
            }
        }
        horiz /= (h * (w - 1)) as f64 * var;
        vert /= ((h - 1) * w) as f64 * var;
        total += 0.5 * (horiz + vert);
    }
    total / c as f64
}

/// Relabels samples by merging classes: `groups[c]` is the coarse class of
/// fine class `c`.
pub fn coarsen_labels(samples: &[ImageSample], groups: &[usize]) -> Result<Vec<ImageSample>> {
    let coarse = groups.iter().copied().max().map_or(0, |m| m + 1);
    samples
        .iter()
        .map(|s| {
            if s.labels.presence.len() != groups.len() {
                return Err(Error::Invalid(format!(
                    "{} class groups for {} classes",
                    groups.len(),
                    s.labels.presence.len()
                )));
            }
            let mut presence = vec![0u8; coarse];
            for (c, &p) in s.labels.presence.iter().enumerate() {
                presence[groups[c]] |= p;
            }
            let segmentation = s
                .labels
                .segmentation
                .iter()
                .map(|&l| groups[l as usize] as u8)
                .collect();
            let mut out = s.clone();
            out.labels = Labels {
                presence,
                segmentation,
            };
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub classes: usize,
    pub presence: bool,
    pub segmentation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: String,
    pub count: usize,
    pub labels: LabelSchema,
    pub keys: Vec<String>,
}

pub fn write_dataset(samples: &[ImageSample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyDataset("nothing to write".into()))?;
    let classes = first.labels.presence.len();
    let seg = !first.labels.segmentation.is_empty();
    for s in samples {
        if (s.height, s.width, s.channels) != (first.height, first.width, first.channels)
            || s.labels.presence.len() != classes
            || s.labels.segmentation.is_empty() == seg
        {
            return Err(Error::Invalid(format!("sample {} does not match the dataset layout", s.key)));
        }
    }
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        height: first.height,
        width: first.width,
        channels: first.channels,
        dtype: "f32".into(),
        count: samples.len(),
        labels: LabelSchema {
            classes,
            presence: true,
            segmentation: seg,
        },
        keys: samples.iter().map(|s| s.key.clone()).collect(),
    };
    let mut images = Vec::with_capacity(samples.len() * first.pixels.len() * 4);
    let mut labels = Vec::new();
    for s in samples {
        for v in &s.pixels {
            images.extend_from_slice(&v.to_le_bytes());
        }
        labels.extend_from_slice(&s.labels.presence);
        labels.extend_from_slice(&s.labels.segmentation);
    }
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    std::fs::write(dir.join("images.bin"), images)?;
    std::fs::write(dir.join("labels.bin"), labels)?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<ImageSample>> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        let empty = std::fs::read_dir(dir).map(|mut d| d.next().is_none()).unwrap_or(true);
        return Err(if empty {
            Error::EmptyDataset(format!("{} holds no dataset", dir.display()))
        } else {
            Error::Format {
                file: meta_path.display().to_string(),
                offset: 0,
                reason: "missing meta.json".into(),
            }
        });
    }
    let meta_bytes = std::fs::read(&meta_path)?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Format {
        file: meta_path.display().to_string(),
        offset: e.column() as u64,
        reason: e.to_string(),
    })?;
    if meta.count == 0 {
        return Err(Error::EmptyDataset(format!("{} has zero samples", dir.display())));
    }
    if meta.dtype != "f32" || meta.keys.len() != meta.count {
        return Err(Error::Format {
            file: meta_path.display().to_string(),
            offset: 0,
            reason: format!("unsupported dtype {:?} or key count mismatch", meta.dtype),
        });
    }
    let pixels_per = meta.height * meta.width * meta.channels;
    let labels_per = meta.labels.classes
        + if meta.labels.segmentation {
            meta.height * meta.width
        } else {
            0
        };
    let images = std::fs::read(dir.join("images.bin"))?;
    let labels = std::fs::read(dir.join("labels.bin"))?;
    let check = |buf: &[u8], per: usize, name: &str| -> Result<()> {
        let want = per * meta.count;
        if buf.len() != want {
            let sample = buf.len() / per.max(1);
            return Err(Error::Format {
                file: dir.join(name).display().to_string(),
                offset: buf.len().min(want) as u64,
                reason: format!(
                    "expected {want} bytes for {} samples, found {} (sample {sample} incomplete)",
                    meta.count,
                    buf.len()
                ),
            });
        }
        Ok(())
    };
    check(&images, pixels_per * 4, "images.bin")?;
    check(&labels, labels_per, "labels.bin")?;
    let mut out = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let raw = &images[i * pixels_per * 4..(i + 1) * pixels_per * 4];
        let pixels = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let lab = &labels[i * labels_per..(i + 1) * labels_per];
        let (presence, segmentation) = lab.split_at(meta.labels.classes);
        if let Some(&bad) = segmentation.iter().find(|&&l| l as usize >= meta.labels.classes) {
            let pos = segmentation.iter().position(|&l| l == bad).unwrap();
            return Err(Error::Format {
                file: dir.join("labels.bin").display().to_string(),
                offset: (i * labels_per + meta.labels.classes + pos) as u64,
                reason: format!("class index {bad} out of range"),
            });
        }
        out.push(ImageSample::new(
            meta.keys[i].clone(),
            meta.height,
            meta.width,
            meta.channels,
            pixels,
            Labels {
                presence: presence.to_vec(),
                segmentation: segmentation.to_vec(),
            },
        )?);
    }
    Ok(out)
}
