//! Parameter containers, generic over the stored value so the same layout
//! serves for owned tensors, tape handles and gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numkernel::Tensor;

use super::{HeadConfig, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> BlockParams<T> {
    fn fields(&self) -> [(&'static str, &T); 16] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ]
    }

    pub(crate) fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> BlockParams<U> {
        let mut g = |name: &str, v: &T| f(&format!("{prefix}.{name}"), v);
        BlockParams {
            ln1_gain: g("ln1.gain", &self.ln1_gain),
            ln1_bias: g("ln1.bias", &self.ln1_bias),
            wq: g("attn.wq", &self.wq),
            bq: g("attn.bq", &self.bq),
            wk: g("attn.wk", &self.wk),
            bk: g("attn.bk", &self.bk),
            wv: g("attn.wv", &self.wv),
            bv: g("attn.bv", &self.bv),
            wo: g("attn.wo", &self.wo),
            bo: g("attn.bo", &self.bo),
            ln2_gain: g("ln2.gain", &self.ln2_gain),
            ln2_bias: g("ln2.bias", &self.ln2_bias),
            w1: g("mlp.w1", &self.w1),
            b1: g("mlp.b1", &self.b1),
            w2: g("mlp.w2", &self.w2),
            b2: g("mlp.b2", &self.b2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub projection: T,
    pub projection_bias: T,
    pub class_token: T,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_gain: T,
    pub norm_bias: T,
}

impl<T> EncoderParams<T> {
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("embed.projection".into(), &self.projection);
        f("embed.bias".into(), &self.projection_bias);
        f("embed.class_token".into(), &self.class_token);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, v) in b.fields() {
                f(format!("block{i}.{name}"), v);
            }
        }
        f("norm.gain".into(), &self.norm_gain);
        f("norm.bias".into(), &self.norm_bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.projection);
        f(&mut self.projection_bias);
        f(&mut self.class_token);
        for b in &mut self.blocks {
            for v in b.fields_mut() {
                f(v);
            }
        }
        f(&mut self.norm_gain);
        f(&mut self.norm_bias);
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        EncoderParams {
            projection: f("embed.projection", &self.projection),
            projection_bias: f("embed.bias", &self.projection_bias),
            class_token: f("embed.class_token", &self.class_token),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("block{i}"), &mut f))
                .collect(),
            norm_gain: f("norm.gain", &self.norm_gain),
            norm_bias: f("norm.bias", &self.norm_bias),
        }
    }
}

/// Task head parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams<T> {
    /// Linear map from the class token to label logits.
    Classifier { weight: T, bias: T },
    /// Per-stage projections to a shared width, then a class projection.
    Decoder {
        stage_weights: Vec<T>,
        stage_biases: Vec<T>,
        out_weight: T,
        out_bias: T,
    },
}

impl<T> HeadParams<T> {
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        match self {
            HeadParams::Classifier { weight, bias } => {
                f("head.weight".into(), weight);
                f("head.bias".into(), bias);
            }
            HeadParams::Decoder {
                stage_weights,
                stage_biases,
                out_weight,
                out_bias,
            } => {
                for (i, (w, b)) in stage_weights.iter().zip(stage_biases).enumerate() {
                    f(format!("decoder.stage{i}.weight"), w);
                    f(format!("decoder.stage{i}.bias"), b);
                }
                f("decoder.out.weight".into(), out_weight);
                f("decoder.out.bias".into(), out_bias);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        match self {
            HeadParams::Classifier { weight, bias } => {
                f(weight);
                f(bias);
            }
            HeadParams::Decoder {
                stage_weights,
                stage_biases,
                out_weight,
                out_bias,
            } => {
                for (w, b) in stage_weights.iter_mut().zip(stage_biases.iter_mut()) {
                    f(w);
                    f(b);
                }
                f(out_weight);
                f(out_bias);
            }
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> HeadParams<U> {
        match self {
            HeadParams::Classifier { weight, bias } => HeadParams::Classifier {
                weight: f("head.weight", weight),
                bias: f("head.bias", bias),
            },
            HeadParams::Decoder {
                stage_weights,
                stage_biases,
                out_weight,
                out_bias,
            } => {
                let mut sw = Vec::new();
                let mut sb = Vec::new();
                for (i, (w, b)) in stage_weights.iter().zip(stage_biases).enumerate() {
                    sw.push(f(&format!("decoder.stage{i}.weight"), w));
                    sb.push(f(&format!("decoder.stage{i}.bias"), b));
                }
                HeadParams::Decoder {
                    stage_weights: sw,
                    stage_biases: sb,
                    out_weight: f("decoder.out.weight", out_weight),
                    out_bias: f("decoder.out.bias", out_bias),
                }
            }
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(vec![fan_in, fan_out], |_| rng.gen_range(-a..a))
}

pub(crate) fn init_encoder(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> EncoderParams<Tensor> {
    let d = cfg.dim;
    let hidden = d * cfg.mlp_ratio;
    let plen = cfg.patch * cfg.patch * cfg.channels;
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let zeros = |n: usize| Tensor::zeros(vec![n]);
    let ones = |n: usize| Tensor::filled(vec![n], 1.0);
    let projection = xavier(rng, plen, d);
    let class_token = Tensor::from_fn(vec![d], |_| normal.sample(rng));
    let blocks = (0..cfg.depth)
        .map(|_| BlockParams {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            wq: xavier(rng, d, d),
            bq: zeros(d),
            wk: xavier(rng, d, d),
            bk: zeros(d),
            wv: xavier(rng, d, d),
            bv: zeros(d),
            wo: xavier(rng, d, d),
            bo: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w1: xavier(rng, d, hidden),
            b1: zeros(hidden),
            w2: xavier(rng, hidden, d),
            b2: zeros(d),
        })
        .collect();
    EncoderParams {
        projection,
        projection_bias: zeros(d),
        class_token,
        blocks,
        norm_gain: ones(d),
        norm_bias: zeros(d),
    }
}

pub(crate) fn init_head(cfg: &ModelConfig, head: &HeadConfig, rng: &mut ChaCha8Rng) -> HeadParams<Tensor> {
    match *head {
        HeadConfig::Classification { labels } => HeadParams::Classifier {
            weight: xavier(rng, cfg.dim, labels),
            bias: Tensor::zeros(vec![labels]),
        },
        HeadConfig::Segmentation { classes, width } => HeadParams::Decoder {
            stage_weights: (0..4).map(|_| xavier(rng, cfg.dim, width)).collect(),
            stage_biases: (0..4).map(|_| Tensor::zeros(vec![width])).collect(),
            out_weight: xavier(rng, width, classes),
            out_bias: Tensor::zeros(vec![classes]),
        },
    }
}
