//! Analytic compute and memory accounting as a function of retention.
//!
//! FLOPs count matrix products only, two per multiply-accumulate, which is
//! exactly what the kernel's instrumented counter records. With `n = k + 1`
//! tokens, width `D`, MLP width `M` and `h` heads, one block costs
//!
//! - QKV projections `3 · 2nD²`, attention logits `2n²D`, attention-weighted
//!   values `2n²D`, output projection `2nD²`, MLP `2 · 2nDM`,
//!
//! the patch embedding `2k·P²C·D` and the classifier `2D·labels`.
//!
//! Memory follows a training step in `f32`: a fixed state of four copies of
//! the parameters (weights, gradients and two Adam moments) plus, for a
//! batch of [`TRAINING_BATCH`] samples, the activations every layer stores
//! for the backward pass. Stored activations accumulate through the forward
//! pass, so the peak is reached after the last layer.

use serde::{Deserialize, Serialize};

use crate::masking::retained_count;
use crate::model::{HeadConfig, ModelConfig};
use crate::Result;

/// Batch size assumed by the memory account.
pub const TRAINING_BATCH: usize = 128;
/// Label count assumed when no head is given.
pub const DEFAULT_LABELS: usize = 60;
const F32_BYTES: usize = 4;
/// Parameter-sized buffers kept during training.
const STATE_COPIES: usize = 4;

/// Per-block matmul FLOPs for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlops {
    pub qkv: u64,
    pub logits: u64,
    pub values: u64,
    pub proj: u64,
    pub mlp: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.qkv + self.logits + self.values + self.proj + self.mlp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub ratio: f64,
    pub retained: usize,
    pub seq_len: usize,
    pub block: BlockFlops,
    pub embed_flops: u64,
    pub head_flops: u64,
    /// Per-sample forward FLOPs.
    pub total_flops: u64,
    pub gflops: f64,
    pub parameters: usize,
    /// Parameters stored as `f32`.
    pub model_bytes: u64,
    /// Optimizer-state bytes (parameters × 4 copies, `f32`).
    pub state_bytes: u64,
    /// Stored activations for one training batch.
    pub activation_bytes: u64,
    /// Largest live total during the step.
    pub peak_mem_bytes: u64,
    pub peak_mem_mb: f64,
}

/// One CSV/JSON line of a cost table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub config: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "P")]
    pub patch: usize,
    pub r: f64,
    pub seq_len: usize,
    pub gflops: f64,
    pub peak_mem_mb: f64,
}

impl CostReport {
    pub fn row(&self, config: &str) -> CostRow {
        CostRow {
            config: config.to_string(),
            height: self.height,
            width: self.width,
            patch: self.patch,
            r: self.ratio,
            seq_len: self.seq_len,
            gflops: self.gflops,
            peak_mem_mb: self.peak_mem_mb,
        }
    }
}

pub const COST_CSV_HEADER: &str = "config,H,W,P,r,seq_len,gflops,peak_mem_mb";

impl CostRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.config, self.height, self.width, self.patch, self.r, self.seq_len, self.gflops, self.peak_mem_mb
        )
    }
}

/// Full-input versus masked cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub full: CostReport,
    pub masked: CostReport,
    pub flops_ratio: f64,
    pub memory_ratio: f64,
}

/// Cost of the encoder plus a classifier with [`DEFAULT_LABELS`] outputs.
pub fn flops(cfg: &ModelConfig, extents: (usize, usize), r: f64) -> Result<CostReport> {
    flops_with_head(cfg, extents, r, &HeadConfig::Classification { labels: DEFAULT_LABELS })
}

pub fn flops_with_head(
    cfg: &ModelConfig,
    extents: (usize, usize),
    r: f64,
    head: &HeadConfig,
) -> Result<CostReport> {
    let big_n = (extents.0 / cfg.patch.max(1)) * (extents.1 / cfg.patch.max(1));
    let k = retained_count(r, big_n)?;
    let mut report = flops_for_retained(cfg, extents, k, head)?;
    report.ratio = r;
    Ok(report)
}

/// Cost with exactly `k` retained patches; `ratio` is reported as `k / N`.
pub fn flops_for_retained(
    cfg: &ModelConfig,
    extents: (usize, usize),
    k: usize,
    head: &HeadConfig,
) -> Result<CostReport> {
    let mut cfg = cfg.clone();
    cfg.image_height = extents.0;
    cfg.image_width = extents.1;
    cfg.validate()?;
    let big_n = cfg.num_patches();
    if k == 0 || k > big_n {
        return Err(crate::Error::Invalid(format!("{k} retained patches out of {big_n}")));
    }
    let n = (k + 1) as u64;
    let d = cfg.dim as u64;
    let m = (cfg.dim * cfg.mlp_ratio) as u64;
    let heads = cfg.heads as u64;
    let patch_len = (cfg.patch * cfg.patch * cfg.channels) as u64;

    let block = BlockFlops {
        qkv: 3 * 2 * n * d * d,
        logits: 2 * n * n * d,
        values: 2 * n * n * d,
        proj: 2 * n * d * d,
        mlp: 2 * 2 * n * d * m,
    };
    let embed_flops = 2 * k as u64 * patch_len * d;
    let cells = big_n as u64;
    let head_flops = match *head {
        HeadConfig::Classification { labels } => 2 * d * labels as u64,
        HeadConfig::Segmentation { classes, width } => {
            let w = width as u64;
            4 * 2 * cells * d * w + 2 * cells * w * classes as u64
        }
    };
    let total_flops = embed_flops + cfg.depth as u64 * block.total() + head_flops;

    let parameters = parameter_count(&cfg, head);
    let model_bytes = (parameters * F32_BYTES) as u64;
    let state_bytes = model_bytes * STATE_COPIES as u64;

    // Floats each layer keeps for the backward pass, per sample.
    let embed_floats = k as u64 * patch_len + n * d;
    // LN input/output, q, k, v, context, output projection, second LN;
    // MLP pre- and post-activation; attention probabilities.
    let block_floats = 8 * n * d + 2 * n * m + heads * n * n;
    let head_floats = match *head {
        HeadConfig::Classification { labels } => 2 * d + labels as u64,
        HeadConfig::Segmentation { classes, width } => {
            let pixels = (cfg.image_height * cfg.image_width) as u64;
            cells * (4 * d + 6 * width as u64 + classes as u64) + pixels * classes as u64
        }
    };
    let mut live = state_bytes;
    let mut peak = live;
    let per_batch = (TRAINING_BATCH * F32_BYTES) as u64;
    for floats in std::iter::once(embed_floats)
        .chain(std::iter::repeat(block_floats).take(cfg.depth))
        .chain(std::iter::once(head_floats))
    {
        live += floats * per_batch;
        peak = peak.max(live);
    }
    Ok(CostReport {
        height: cfg.image_height,
        width: cfg.image_width,
        patch: cfg.patch,
        ratio: k as f64 / big_n as f64,
        retained: k,
        seq_len: n as usize,
        block,
        embed_flops,
        head_flops,
        total_flops,
        gflops: total_flops as f64 / 1e9,
        parameters,
        model_bytes,
        state_bytes,
        activation_bytes: live - state_bytes,
        peak_mem_bytes: peak,
        peak_mem_mb: peak as f64 / (1024.0 * 1024.0),
    })
}

pub fn compare(cfg: &ModelConfig, extents: (usize, usize), r: f64) -> Result<CostComparison> {
    let full = flops(cfg, extents, 1.0)?;
    let masked = flops(cfg, extents, r)?;
    Ok(CostComparison {
        flops_ratio: full.total_flops as f64 / masked.total_flops as f64,
        memory_ratio: full.peak_mem_bytes as f64 / masked.peak_mem_bytes as f64,
        full,
        masked,
    })
}

/// Trainable parameter count of the encoder and head.
pub fn parameter_count(cfg: &ModelConfig, head: &HeadConfig) -> usize {
    let d = cfg.dim;
    let m = cfg.dim * cfg.mlp_ratio;
    let embed = cfg.patch * cfg.patch * cfg.channels * d + 2 * d;
    let block = 4 * (d * d + d) + (d * m + m) + (m * d + d) + 4 * d;
    let head = match *head {
        HeadConfig::Classification { labels } => d * labels + labels,
        HeadConfig::Segmentation { classes, width } => 4 * (d * width + width) + width * classes + classes,
    };
    embed + cfg.depth * block + 2 * d + head
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vitb() -> ModelConfig {
        ModelConfig::vit_base16()
    }

    #[test]
    fn identity_ratio() {
        let c = compare(&vitb(), (224, 224), 1.0).unwrap();
        assert_eq!(c.flops_ratio, 1.0);
        assert_eq!(c.memory_ratio, 1.0);
    }

    #[test]
    fn vit_base_parameter_count() {
        // 85.8M encoder parameters plus a 60-way classifier.
        let p = parameter_count(&vitb(), &HeadConfig::Classification { labels: 60 });
        assert!((85_000_000..87_000_000).contains(&p), "{p}");
    }

    #[test]
    fn strictly_monotone_in_ratio() {
        let mut prev: Option<CostReport> = None;
        for i in 1..=20 {
            let r = i as f64 / 20.0;
            let c = flops(&vitb(), (224, 224), r).unwrap();
            if let Some(p) = prev {
                assert!(c.total_flops > p.total_flops);
                assert!(c.peak_mem_bytes > p.peak_mem_bytes);
            }
            prev = Some(c);
        }
    }

    #[test]
    fn attention_logits_ratio_approaches_inverse_square() {
        let cfg = ModelConfig::new(64, 4, 4, 4, 1, 1, 256, 256);
        let full = flops(&cfg, (256, 256), 1.0).unwrap();
        let quarter = flops(&cfg, (256, 256), 0.25).unwrap();
        let ratio = full.block.logits as f64 / quarter.block.logits as f64;
        assert!((ratio - 16.0).abs() / 16.0 < 1e-3, "{ratio}");
        let linear = full.block.mlp as f64 / quarter.block.mlp as f64;
        assert!((linear - 4.0).abs() / 4.0 < 1e-3, "{linear}");
    }

    #[test]
    fn csv_row_shape() {
        let r = flops(&vitb(), (224, 224), 0.25).unwrap().row("vitb16");
        assert_eq!(r.seq_len, 50);
        assert_eq!(r.to_csv().split(',').count(), COST_CSV_HEADER.split(',').count());
    }
}
