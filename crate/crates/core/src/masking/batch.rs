use crate::numkernel::Tensor;
use crate::{Error, Result};

use super::{ms3_plan, SimilarityMatrix};

/// Retained tokens of a batch, zero padded to a shared length.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    /// `[B, seq_len, D]`.
    pub tokens: Tensor,
    /// `[B, seq_len]` row-major; 1 marks a real token.
    pub attention: Vec<u8>,
    pub counts: Vec<usize>,
    /// Retained grid indices per sample.
    pub retained: Vec<Vec<usize>>,
}

impl TokenBatch {
    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn attention_row(&self, b: usize) -> &[u8] {
        let l = self.seq_len();
        &self.attention[b * l..(b + 1) * l]
    }
}

/// Shared sequence length `min(max_b k_b, N)`.
pub fn collate_len(counts: &[usize], n: usize) -> usize {
    counts.iter().copied().max().unwrap_or(0).min(n)
}

/// Thresholded retention over a batch of already embedded tokens.
///
/// `tokens` is `[B, N, D]`; sample `b` keeps the rows selected by
/// [`ms3_plan`] on `sims[b]`, and every sequence is padded with zero rows to
/// the batch's longest retained count.
pub fn ms3_thresholded(sims: &[SimilarityMatrix], tau: f64, tokens: &Tensor) -> Result<TokenBatch> {
    let s = tokens.shape();
    if s.len() != 3 || s[0] != sims.len() || sims.is_empty() {
        return Err(Error::Invalid(format!(
            "{} similarity matrices for token tensor {s:?}",
            sims.len()
        )));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if sims.iter().any(|m| m.len() != n) {
        return Err(Error::Invalid(format!("similarity matrices must cover {n} tokens")));
    }
    let retained: Vec<Vec<usize>> = sims
        .iter()
        .map(|m| ms3_plan(m, tau).map(|p| p.indices))
        .collect::<Result<_>>()?;
    let counts: Vec<usize> = retained.iter().map(Vec::len).collect();
    let seq = collate_len(&counts, n);
    let mut data = vec![0.0; b * seq * d];
    let mut attention = vec![0u8; b * seq];
    for (bi, idx) in retained.iter().enumerate() {
        for (j, &i) in idx.iter().enumerate() {
            let src = (bi * n + i) * d;
            let dst = (bi * seq + j) * d;
            data[dst..dst + d].copy_from_slice(&tokens.data()[src..src + d]);
            attention[bi * seq + j] = 1;
        }
    }
    Ok(TokenBatch {
        tokens: Tensor::new(vec![b, seq, d], data)?,
        attention,
        counts,
        retained,
    })
}
