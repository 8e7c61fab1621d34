//! Redundancy-aware ViT encoder.
//!
//! Only retained patches are embedded; the class token is prepended and
//! attends alongside them in every block. Padded rows (batches whose
//! samples retain different counts) are excluded as attention keys. Four
//! tapped block outputs feed dense prediction after being scattered back
//! onto the full patch grid, with zero vectors at dropped positions.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use params::{BlockParams, EncoderParams, HeadParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::masking::{RetentionPlan, TokenBatch};
use crate::numkernel::{Tape, Tensor, Var};
use crate::patching::{embed_on_tape, sincos_positional, EmbeddingVars, PatchBatch};
use crate::{Error, Result};

/// Encoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// 1-based block numbers whose outputs feed dense prediction.
    pub taps: [usize; 4],
}

impl ModelConfig {
    /// Config with evenly spaced taps `depth/4 · {1, 2, 3, 4}`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        patch: usize,
        channels: usize,
        image_height: usize,
        image_width: usize,
    ) -> Self {
        Self {
            dim,
            depth,
            heads,
            mlp_ratio,
            patch,
            channels,
            image_height,
            image_width,
            taps: default_taps(depth),
        }
    }

    /// ViT-Base/16 at 224×224 with 3 channels.
    pub fn vit_base16() -> Self {
        Self::new(768, 12, 12, 4, 16, 3, 224, 224)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("dim, depth, heads and mlp_ratio must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return fail(format!("dim {} must be divisible by 4", self.dim));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.patch == 0
            || self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
            || self.image_height == 0
            || self.image_width == 0
        {
            return fail(format!(
                "{}x{} image not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch
            ));
        }
        if self.taps[0] == 0 || self.taps.windows(2).any(|w| w[0] >= w[1]) || self.taps[3] > self.depth {
            return fail(format!(
                "taps {:?} must be strictly increasing within 1..={}",
                self.taps, self.depth
            ));
        }
        Ok(())
    }
}

pub fn default_taps(depth: usize) -> [usize; 4] {
    let step = (depth / 4).max(1);
    [step, 2 * step, 3 * step, 4 * step]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadConfig {
    Classification { labels: usize },
    Segmentation { classes: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder: ModelConfig,
    pub head: HeadConfig,
}

/// Encoder plus task head with owned weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub encoder: EncoderParams<Tensor>,
    pub head: HeadParams<Tensor>,
    positional: Tensor,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct NetworkVars {
    pub encoder: EncoderParams<Var>,
    pub head: HeadParams<Var>,
}

/// Graph outputs of the encoder.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// Normalized class token, `[B, D]`.
    pub class_embedding: Var,
    /// Tapped block outputs, `[B, 1 + L, D]` each.
    pub taps: Vec<Var>,
}

/// Per-sample features of one tapped stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    /// Retained-token features, `k × D`, in retention order.
    pub retained: Tensor,
    /// Scattered map, `D × H_ℓ × W_ℓ`; zero at dropped positions.
    pub dense: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// `[B, D]`.
    pub class_embedding: Tensor,
    /// `stages[b][ℓ]`.
    pub stages: Vec<Vec<StageFeatures>>,
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        match config.head {
            HeadConfig::Classification { labels } if labels == 0 => {
                return Err(Error::Config("classifier needs at least one label".into()))
            }
            HeadConfig::Segmentation { classes, width } if classes == 0 || width == 0 => {
                return Err(Error::Config("decoder needs positive classes and width".into()))
            }
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = params::init_encoder(&config.encoder, &mut rng);
        let head = params::init_head(&config.encoder, &config.head, &mut rng);
        Self::from_parts(config, encoder, head)
    }

    pub fn from_parts(
        config: NetworkConfig,
        encoder: EncoderParams<Tensor>,
        head: HeadParams<Tensor>,
    ) -> Result<Self> {
        config.encoder.validate()?;
        let (gh, gw) = config.encoder.grid();
        let positional = sincos_positional(config.encoder.dim, gh, gw)?;
        Ok(Self {
            config,
            encoder,
            head,
            positional,
        })
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.encoder.visit(&mut |_, t| n += t.numel());
        self.head.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Puts the weights on the tape; trainable ones become leaves.
    pub fn bind(&self, tape: &mut Tape, train_encoder: bool, train_head: bool) -> NetworkVars {
        let encoder = self.encoder.map(|_, t| {
            if train_encoder {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        let head = self.head.map(|_, t| {
            if train_head {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        NetworkVars { encoder, head }
    }

    /// Embeds a patch batch and runs the encoder.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &EncoderParams<Var>,
        batch: &PatchBatch,
    ) -> Result<EncoderTrace> {
        let tokens = embed_on_tape(
            tape,
            EmbeddingVars {
                projection: vars.projection,
                projection_bias: vars.projection_bias,
                class_token: vars.class_token,
            },
            &self.positional,
            batch,
        )?;
        let mut live = Vec::with_capacity(batch.batch_size() * (batch.seq_len() + 1));
        let row_mask = batch.row_mask();
        for chunk in row_mask.chunks(batch.seq_len()) {
            live.push(true);
            live.extend_from_slice(chunk);
        }
        self.run_blocks(tape, vars, tokens, &live)
    }

    /// Runs the blocks over already embedded `[B, T, D]` tokens with key flags
    /// `live` (`B × T`).
    pub fn run_blocks(
        &self,
        tape: &mut Tape,
        vars: &EncoderParams<Var>,
        mut x: Var,
        live: &[bool],
    ) -> Result<EncoderTrace> {
        let cfg = &self.config.encoder;
        let heads = cfg.heads;
        let scale = 1.0 / ((cfg.dim / heads) as f64).sqrt();
        let mut taps = Vec::with_capacity(4);
        for (i, b) in vars.blocks.iter().enumerate() {
            let h = tape.layernorm(x, b.ln1_gain, b.ln1_bias)?;
            let q = linear(tape, h, b.wq, b.bq)?;
            let k = linear(tape, h, b.wk, b.bk)?;
            let v = linear(tape, h, b.wv, b.bv)?;
            let q = tape.split_heads(q, heads)?;
            let k = tape.split_heads(k, heads)?;
            let v = tape.split_heads(v, heads)?;
            let logits = tape.bmm(q, k, true)?;
            let logits = tape.scale(logits, scale);
            let probs = tape.masked_softmax(logits, live)?;
            let ctx = tape.bmm(probs, v, false)?;
            let ctx = tape.merge_heads(ctx, heads)?;
            let o = linear(tape, ctx, b.wo, b.bo)?;
            x = tape.add(x, o)?;
            let h = tape.layernorm(x, b.ln2_gain, b.ln2_bias)?;
            let m = linear(tape, h, b.w1, b.b1)?;
            let m = tape.gelu(m);
            let m = linear(tape, m, b.w2, b.b2)?;
            x = tape.add(x, m)?;
            if cfg.taps.contains(&(i + 1)) {
                taps.push(x);
            }
        }
        let normed = tape.layernorm(x, vars.norm_gain, vars.norm_bias)?;
        let class_embedding = tape.select_token(normed, 0)?;
        Ok(EncoderTrace {
            class_embedding,
            taps,
        })
    }

    /// Task logits: `[B, labels]` for classification, `[B, H, W, classes]`
    /// for segmentation.
    pub fn logits_on_tape(&self, tape: &mut Tape, vars: &NetworkVars, batch: &PatchBatch) -> Result<Var> {
        let trace = self.encode_on_tape(tape, &vars.encoder, batch)?;
        match &vars.head {
            HeadParams::Classifier { weight, bias } => linear(tape, trace.class_embedding, *weight, *bias),
            head @ HeadParams::Decoder { .. } => {
                let maps = self.stage_maps_on_tape(tape, &trace.taps, batch)?;
                crate::seghead::decode_on_tape(tape, head, &maps, self.config.encoder.patch)
            }
        }
    }

    /// Inference-only task logits.
    pub fn logits(&self, batch: &PatchBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false, false);
        let out = self.logits_on_tape(&mut tape, &vars, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Inference-only encoding of a patch batch.
    pub fn encode(&self, batch: &PatchBatch) -> Result<Encoded> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false, false);
        let trace = self.encode_on_tape(&mut tape, &vars.encoder, batch)?;
        self.collect(&tape, &trace, &batch.positions)
    }

    /// Encodes a collated batch of embedded patch tokens (positional entries
    /// already added); the class token is prepended here.
    pub fn encode_tokens(&self, tokens: &TokenBatch) -> Result<Encoded> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false, false);
        let x = tape.constant(tokens.tokens.clone());
        let pos0 = tape.constant(Tensor::new(
            vec![self.config.encoder.dim],
            self.positional.row(0).to_vec(),
        )?);
        let cls = tape.add(vars.encoder.class_token, pos0)?;
        let x = tape.prepend_token(cls, x)?;
        let seq = tokens.seq_len();
        let mut live = Vec::new();
        for b in 0..tokens.counts.len() {
            live.push(true);
            live.extend(tokens.attention_row(b).iter().map(|&a| a == 1));
        }
        if seq == 0 {
            return Err(Error::Invalid("token batch has no patch tokens".into()));
        }
        let trace = self.run_blocks(&mut tape, &vars.encoder, x, &live)?;
        self.collect(&tape, &trace, &tokens.retained)
    }

    fn collect(&self, tape: &Tape, trace: &EncoderTrace, positions: &[Vec<usize>]) -> Result<Encoded> {
        let d = self.config.encoder.dim;
        let (gh, gw) = self.config.encoder.grid();
        let mut stages = vec![Vec::with_capacity(4); positions.len()];
        for &tap in &trace.taps {
            let t = tape.value(tap);
            let seq = t.shape()[1];
            for (b, pos) in positions.iter().enumerate() {
                let k = pos.len();
                let start = (b * seq + 1) * d;
                let retained = Tensor::new(vec![k, d], t.data()[start..start + k * d].to_vec())?;
                let dense = scatter_back(&retained, pos, self.config.encoder.num_patches(), (gh, gw))?;
                stages[b].push(StageFeatures { retained, dense });
            }
        }
        Ok(Encoded {
            class_embedding: tape.value(trace.class_embedding).clone(),
            stages,
        })
    }
}

pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_bias(y, b)?)
}

/// Affine classification head: `embedding · weight + bias`.
pub fn classify(class_embedding: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(class_embedding.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let y = linear(&mut tape, x, w, b)?;
    Ok(tape.value(y).clone())
}

/// Places retained-token rows at their grid positions of an `N`-cell grid and
/// returns the `D × h × w` map; dropped positions are zero.
pub fn scatter_back(
    features: &Tensor,
    positions: &[usize],
    n: usize,
    grid: (usize, usize),
) -> Result<Tensor> {
    if features.shape().len() != 2 || features.shape()[0] != positions.len() {
        return Err(Error::Invalid(format!(
            "{} retained positions for features {:?}",
            positions.len(),
            features.shape()
        )));
    }
    if grid.0 * grid.1 != n {
        return Err(Error::Invalid(format!("grid {grid:?} does not hold {n} cells")));
    }
    let d = features.shape()[1];
    let mut out = vec![0.0; d * n];
    for (j, &p) in positions.iter().enumerate() {
        if p >= n {
            return Err(Error::IndexOutOfRange { index: p, extent: n });
        }
        for (c, &v) in features.row(j).iter().enumerate() {
            out[c * n + p] = v;
        }
    }
    Ok(Tensor::new(vec![d, grid.0, grid.1], out)?)
}

/// [`scatter_back`] driven by a retention plan.
pub fn scatter_plan(features: &Tensor, plan: &RetentionPlan, grid: (usize, usize)) -> Result<Tensor> {
    scatter_back(features, &plan.indices, plan.n, grid)
}
