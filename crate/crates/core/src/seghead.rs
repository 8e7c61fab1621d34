//! Light dense decoder over the four scattered encoder stages.
//!
//! Each stage map goes through its own 1×1 projection to a shared width;
//! the projections are summed, passed through GELU, projected to class
//! logits with another 1×1 map and upsampled ×P by nearest neighbour, so the
//! logits at pixel `(y, x)` depend only on grid cell `(y / P, x / P)`.
//! Dropped patch positions enter as zero vectors.
//!
//! This stands in for a UPerNet head: no pyramid pooling and no cross-scale
//! fusion.

use crate::model::{HeadParams, Network};
use crate::numkernel::{Tape, Tensor, Var};
use crate::patching::PatchBatch;
use crate::{Error, Result};

/// Decoder graph over channel-last stage maps `[B, h, w, D]`.
///
/// Returns logits `[B, h·P, w·P, classes]`.
pub fn decode_on_tape(
    tape: &mut Tape,
    head: &HeadParams<Var>,
    stages: &[Var],
    patch: usize,
) -> Result<Var> {
    let HeadParams::Decoder {
        stage_weights,
        stage_biases,
        out_weight,
        out_bias,
    } = head
    else {
        return Err(Error::Config("network has no dense decoder".into()));
    };
    if stages.len() != 4 || stage_weights.len() != 4 {
        return Err(Error::Invalid(format!("decoder needs 4 stages, got {}", stages.len())));
    }
    let extents = tape.shape(stages[0]).to_vec();
    if extents.len() != 4 {
        return Err(Error::Invalid(format!("stage map must be [B, h, w, D], got {extents:?}")));
    }
    let mut fused: Option<Var> = None;
    for ((&s, &w), &b) in stages.iter().zip(stage_weights).zip(stage_biases) {
        if tape.shape(s) != extents.as_slice() {
            return Err(Error::Invalid(format!(
                "stage extents differ: {:?} vs {extents:?}",
                tape.shape(s)
            )));
        }
        let y = tape.matmul(s, w)?;
        let y = tape.add_bias(y, b)?;
        fused = Some(match fused {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    let h = tape.gelu(fused.expect("four stages"));
    let logits = tape.matmul(h, *out_weight)?;
    let logits = tape.add_bias(logits, *out_bias)?;
    Ok(tape.upsample_nearest(logits, patch)?)
}

/// Decodes one sample's four `D × h × w` maps into `classes × H × W` logits.
pub fn decode(stages: &[Tensor], head: &HeadParams<Tensor>, patch: usize) -> Result<Tensor> {
    if stages.len() != 4 {
        return Err(Error::Invalid(format!("decoder needs 4 stages, got {}", stages.len())));
    }
    let shape = stages[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Invalid(format!("stage map must be D × h × w, got {shape:?}")));
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(4);
    for s in stages {
        if s.shape() != shape.as_slice() {
            return Err(Error::Invalid(format!(
                "stage extents differ: {:?} vs {shape:?}",
                s.shape()
            )));
        }
        // D × h × w → 1 × h × w × D.
        let cl = Tensor::from_fn(vec![1, h, w, d], |i| {
            let (cell, c) = (i / d, i % d);
            s.data()[c * h * w + cell]
        });
        vars.push(tape.constant(cl));
    }
    let head = head.map(|_, t| tape.constant(t.clone()));
    let out = decode_on_tape(&mut tape, &head, &vars, patch)?;
    let t = tape.value(out);
    let (oh, ow, k) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    Ok(Tensor::from_fn(vec![k, oh, ow], |i| {
        let (c, pix) = (i / (oh * ow), i % (oh * ow));
        t.data()[pix * k + c]
    }))
}

impl Network {
    /// Scattered channel-last stage maps `[B, h, w, D]` for a patch batch.
    pub fn stage_maps_on_tape(&self, tape: &mut Tape, taps: &[Var], batch: &PatchBatch) -> Result<Vec<Var>> {
        let cfg = &self.config.encoder;
        let (gh, gw) = cfg.grid();
        let n = cfg.num_patches();
        taps.iter()
            .map(|&t| {
                let dense = tape.scatter_rows(t, 1, &batch.positions, n)?;
                Ok(tape.reshape(dense, vec![batch.batch_size(), gh, gw, cfg.dim])?)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadConfig, ModelConfig, NetworkConfig};

    fn net() -> Network {
        Network::new(
            NetworkConfig {
                encoder: ModelConfig::new(4, 4, 1, 1, 2, 1, 4, 4),
                head: HeadConfig::Segmentation { classes: 3, width: 5 },
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_stages_with_zero_bias_give_zero_logits() {
        let n = net();
        let mut head = n.head.clone();
        head.visit_mut(&mut |t| {
            if t.shape().len() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let stages = vec![Tensor::zeros(vec![4, 2, 2]); 4];
        let out = decode(&stages, &head, 2).unwrap();
        assert_eq!(out.shape(), &[3, 4, 4]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_cell_influence_stays_in_its_block() {
        let n = net();
        let mut head = n.head.clone();
        head.visit_mut(&mut |t| {
            if t.shape().len() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let mut stages = vec![Tensor::zeros(vec![4, 2, 2]); 4];
        // Grid cell (1, 0) -> pixels y in 2..4, x in 0..2.
        for s in &mut stages {
            for c in 0..4 {
                s.data_mut()[c * 4 + 2] = 1.0 + c as f64;
            }
        }
        let out = decode(&stages, &head, 2).unwrap();
        for k in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let v = out.data()[(k * 4 + y) * 4 + x];
                    if !(y >= 2 && x < 2) {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        assert!(out.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let n = net();
        let mut stages = vec![Tensor::zeros(vec![4, 2, 2]); 4];
        stages[3] = Tensor::zeros(vec![4, 1, 4]);
        assert!(decode(&stages, &n.head, 2).is_err());
    }
}
