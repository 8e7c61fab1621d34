//! Patch partitioning, patch embedding and block-mean downscaling.
//!
//! Patch `i` of an image with a `gh × gw` patch grid sits at grid cell
//! `(i / gw, i % gw)`. Inside a patch, values are laid out row by row,
//! pixel by pixel, channel innermost. Indices are 0-based throughout.

use serde::{Deserialize, Serialize};

use crate::numkernel::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Task labels carried by a sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Labels {
    /// Multi-hot class presence.
    pub presence: Vec<u8>,
    /// Per-pixel class index, `H × W` row-major. Empty when absent.
    pub segmentation: Vec<u8>,
}

/// One `H × W × C` image, row-major with channel innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub key: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub labels: Labels,
}

impl ImageSample {
    pub fn new(
        key: impl Into<String>,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
        labels: Labels,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Invalid("image needs at least one channel".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "{height}x{width}x{channels} image given {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            key: key.into(),
            height,
            width,
            channels,
            pixels,
            labels,
        })
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// An image cut into `N = H·W / P²` patch vectors of length `P²·C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn patch_vector(&self, i: usize) -> &[f64] {
        let l = self.patch_len();
        &self.data[i * l..(i + 1) * l]
    }

    /// Grid cell `(row, col)` of patch `i`.
    pub fn cell(&self, i: usize) -> (usize, usize) {
        (i / self.grid_w, i % self.grid_w)
    }

    /// Rebuilds the `H × W × C` pixel buffer.
    pub fn reassemble(&self) -> Vec<f32> {
        let p = self.patch;
        let (h, w, c) = (self.grid_h * p, self.grid_w * p, self.channels);
        let mut out = vec![0.0f32; h * w * c];
        for i in 0..self.len() {
            let (gy, gx) = self.cell(i);
            let v = self.patch_vector(i);
            for py in 0..p {
                let row = (gy * p + py) * w + gx * p;
                let dst = row * c;
                for (o, s) in out[dst..dst + p * c].iter_mut().zip(&v[py * p * c..(py + 1) * p * c]) {
                    *o = *s as f32;
                }
            }
        }
        out
    }
}

pub fn partition(image: &ImageSample, patch: usize) -> Result<PatchGrid> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::NotDivisible {
            height: image.height,
            width: image.width,
            divisor: patch,
        });
    }
    let (gh, gw, c) = (image.height / patch, image.width / patch, image.channels);
    let mut data = Vec::with_capacity(image.pixels.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let start = ((gy * patch + py) * image.width + gx * patch) * c;
                data.extend(image.pixels[start..start + patch * c].iter().map(|&v| v as f64));
            }
        }
    }
    Ok(PatchGrid {
        patch,
        grid_h: gh,
        grid_w: gw,
        channels: c,
        data,
    })
}

/// Fixed 2D sine-cosine positional table with `N + 1` rows.
///
/// Row 0 belongs to the class token and is all zeros. Row `1 + i` encodes
/// the grid cell of patch `i`: the first half of the columns encodes the
/// grid row, the second half the grid column.
pub fn sincos_positional(dim: usize, grid_h: usize, grid_w: usize) -> Result<Tensor> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!(
            "positional table needs a width divisible by 4, got {dim}"
        )));
    }
    let quarter = dim / 4;
    let n = grid_h * grid_w;
    let mut data = vec![0.0; (n + 1) * dim];
    for i in 0..n {
        let (gy, gx) = (i / grid_w, i % grid_w);
        let row = &mut data[(i + 1) * dim..(i + 2) * dim];
        for (half, coord) in [(0, gy), (1, gx)] {
            let base = half * 2 * quarter;
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                let angle = coord as f64 * omega;
                row[base + k] = angle.sin();
                row[base + quarter + k] = angle.cos();
            }
        }
    }
    Ok(Tensor::new(vec![n + 1, dim], data)?)
}

/// Patch embedding parameters: `P²·C → D` projection plus class token and
/// positional table.
#[derive(Clone, Debug)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub projection: Tensor,
    pub projection_bias: Tensor,
    pub class_token: Tensor,
    pub positional: Tensor,
}

/// Retained patch vectors of several samples, zero padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `[B, L, P²·C]`; rows at or beyond `counts[b]` are zero.
    pub pixels: Tensor,
    /// Original grid index of every retained row, per sample.
    pub positions: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
    /// Total patches per image.
    pub n: usize,
}

impl PatchBatch {
    pub fn batch_size(&self) -> usize {
        self.counts.len()
    }

    /// Padded retained-patch length `L`.
    pub fn seq_len(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// `[B, L]` flags, true for real rows.
    pub fn row_mask(&self) -> Vec<bool> {
        let l = self.seq_len();
        self.counts
            .iter()
            .flat_map(|&k| (0..l).map(move |j| j < k))
            .collect()
    }

    pub fn is_padded(&self) -> bool {
        let l = self.seq_len();
        self.counts.iter().any(|&k| k < l)
    }
}

/// Gathers the listed patches of each grid, padding to `min(max_b k_b, N)`.
pub fn gather_patches(grids: &[&PatchGrid], index_sets: &[Vec<usize>]) -> Result<PatchBatch> {
    let Some(first) = grids.first() else {
        return Err(Error::Invalid("cannot gather an empty batch".into()));
    };
    if grids.len() != index_sets.len() {
        return Err(Error::Invalid(format!(
            "{} grids but {} index sets",
            grids.len(),
            index_sets.len()
        )));
    }
    let (n, plen) = (first.len(), first.patch_len());
    for g in grids {
        if g.len() != n || g.patch_len() != plen {
            return Err(Error::Invalid("grids in one batch must share a layout".into()));
        }
    }
    let longest = index_sets.iter().map(Vec::len).max().unwrap_or(0);
    let seq = longest.min(n);
    if seq == 0 {
        return Err(Error::Invalid("every sample in the batch retains no patch".into()));
    }
    let mut data = vec![0.0; grids.len() * seq * plen];
    for (b, (g, idx)) in grids.iter().zip(index_sets).enumerate() {
        if idx.is_empty() {
            return Err(Error::Invalid(format!("sample {b} retains no patch")));
        }
        for (j, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, extent: n });
            }
            let dst = (b * seq + j) * plen;
            data[dst..dst + plen].copy_from_slice(g.patch_vector(i));
        }
    }
    Ok(PatchBatch {
        pixels: Tensor::new(vec![grids.len(), seq, plen], data)?,
        positions: index_sets.to_vec(),
        counts: index_sets.iter().map(Vec::len).collect(),
        n,
    })
}

/// Positional rows gathered by original grid index, zero on padded rows.
pub fn gathered_positional(positional: &Tensor, batch: &PatchBatch) -> Result<Tensor> {
    let d = positional.last_dim();
    let (b, l) = (batch.batch_size(), batch.seq_len());
    if positional.rows() != batch.n + 1 {
        return Err(Error::Config(format!(
            "positional table has {} rows for {} patches",
            positional.rows(),
            batch.n
        )));
    }
    let mut data = vec![0.0; b * l * d];
    for (bi, pos) in batch.positions.iter().enumerate() {
        for (j, &i) in pos.iter().enumerate() {
            let dst = (bi * l + j) * d;
            data[dst..dst + d].copy_from_slice(positional.row(i + 1));
        }
    }
    Ok(Tensor::new(vec![b, l, d], data)?)
}

/// Tape handles of the embedding parameters.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub projection: Var,
    pub projection_bias: Var,
    pub class_token: Var,
}

/// Embeds a patch batch into `[B, L + 1, D]` tokens with the class token at 0.
///
/// Each retained row is projected and receives the positional entry of its
/// original grid cell; padded rows stay exactly zero.
pub fn embed_on_tape(
    tape: &mut Tape,
    vars: EmbeddingVars,
    positional: &Tensor,
    batch: &PatchBatch,
) -> Result<Var> {
    let x = tape.constant(batch.pixels.clone());
    let mut tokens = tape.matmul(x, vars.projection)?;
    tokens = tape.add_bias(tokens, vars.projection_bias)?;
    if batch.is_padded() {
        let d = tape.shape(tokens)[2];
        let mask: Vec<f64> = batch
            .row_mask()
            .into_iter()
            .flat_map(|m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(d))
            .collect();
        let shape = tape.shape(tokens).to_vec();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tokens = tape.mul(tokens, mask)?;
    }
    let pos = tape.constant(gathered_positional(positional, batch)?);
    tokens = tape.add(tokens, pos)?;
    let pos0 = tape.constant(Tensor::new(vec![positional.last_dim()], positional.row(0).to_vec())?);
    let cls = tape.add(vars.class_token, pos0)?;
    Ok(tape.prepend_token(cls, tokens)?)
}

/// Embeds the listed patches of one image: `(k + 1) × D`, class token first.
pub fn embed(grid: &PatchGrid, indices: &[usize], cfg: &EmbeddingConfig) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::Invalid("embedding needs at least one patch".into()));
    }
    let batch = gather_patches(&[grid], &[indices.to_vec()])?;
    let mut tape = Tape::new();
    let vars = EmbeddingVars {
        projection: tape.constant(cfg.projection.clone()),
        projection_bias: tape.constant(cfg.projection_bias.clone()),
        class_token: tape.constant(cfg.class_token.clone()),
    };
    let out = embed_on_tape(&mut tape, vars, &cfg.positional, &batch)?;
    let k = indices.len();
    Ok(tape.value(out).clone().reshape(vec![k + 1, cfg.dim])?)
}

/// Block-mean downscaling by an integer factor.
///
/// Segmentation maps are reduced by majority vote inside each block, lowest
/// class index winning ties; presence labels are kept as they are.
pub fn downscale(image: &ImageSample, factor: usize) -> Result<ImageSample> {
    if factor == 0 || image.height % factor != 0 || image.width % factor != 0 {
        return Err(Error::NotDivisible {
            height: image.height,
            width: image.width,
            divisor: factor,
        });
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (h, w, c) = (image.height / factor, image.width / factor, image.channels);
    let area = (factor * factor) as f64;
    let mut pixels = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut total = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        total += image.pixel(y * factor + dy, x * factor + dx, ch) as f64;
                    }
                }
                pixels.push((total / area) as f32);
            }
        }
    }
    let segmentation = if image.labels.segmentation.is_empty() {
        Vec::new()
    } else {
        let classes = *image.labels.segmentation.iter().max().unwrap() as usize + 1;
        let mut out = Vec::with_capacity(h * w);
        let mut votes = vec![0usize; classes];
        for y in 0..h {
            for x in 0..w {
                votes.iter_mut().for_each(|v| *v = 0);
                for dy in 0..factor {
                    for dx in 0..factor {
                        let l = image.labels.segmentation[(y * factor + dy) * image.width + x * factor + dx];
                        votes[l as usize] += 1;
                    }
                }
                let best = votes
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > votes[best] { i } else { best });
                out.push(best as u8);
            }
        }
        out
    };
    ImageSample::new(
        image.key.clone(),
        h,
        w,
        c,
        pixels,
        Labels {
            presence: image.labels.presence.clone(),
            segmentation,
        },
    )
}
