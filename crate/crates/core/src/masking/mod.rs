//! Patch retention strategies.
//!
//! - MS1 keeps the first `⌊r·N⌋` entries of a per-sample seeded permutation.
//! - MS2 runs a greedy farthest-first traversal over pixel-space cosine
//!   similarity, starting from the token with the lowest mean similarity.
//! - MS3 keeps every token whose largest similarity to any other token is
//!   below a threshold `τ`, so the retained count adapts to the scene.
//!
//! Ties are broken towards the lowest index everywhere.

mod batch;
mod calibrate;
mod seed;
mod similarity;

pub use batch::{collate_len, ms3_thresholded, TokenBatch};
pub use calibrate::{calibrate_threshold, write_calibration_csv, CalibrationRow};
pub use seed::{fnv1a64, permutation, SampleSeed, SplitMix64};
pub use similarity::{similarity_matrix, SimilarityMatrix};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};
use similarity::argmin;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ms1,
    Ms2,
    Ms3,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ms1 => "ms1",
            Strategy::Ms2 => "ms2",
            Strategy::Ms3 => "ms3",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ms1" => Ok(Strategy::Ms1),
            "ms2" => Ok(Strategy::Ms2),
            "ms3" => Ok(Strategy::Ms3),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Output of a retention strategy for one sample.
///
/// `indices` are 0-based grid indices in selection order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionPlan {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(rename = "N")]
    pub n: usize,
    pub indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl RetentionPlan {
    /// Keeps every patch in grid order.
    pub fn full(n: usize) -> Self {
        Self {
            strategy: Strategy::Ms1,
            r: Some(1.0),
            tau: None,
            n,
            indices: (0..n).collect(),
            seed: None,
        }
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn retention(&self) -> f64 {
        self.k() as f64 / self.n as f64
    }

    /// Binary mask over all `N` grid positions.
    pub fn mask(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.n];
        for &i in &self.indices {
            m[i] = 1;
        }
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

/// `k = ⌊r·N⌋`, rejecting ratios outside `(0, 1]` and ratios that keep nothing.
pub fn retained_count(r: f64, n: usize) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Invalid(format!("retention ratio {r} outside (0, 1]")));
    }
    let k = (r * n as f64).floor() as usize;
    if k == 0 {
        return Err(Error::DegenerateRatio { ratio: r, n });
    }
    Ok(k.min(n))
}

/// Uniform random retention from a seeded permutation.
pub fn ms1_uniform(seed: &SampleSeed, r: f64, n: usize) -> Result<RetentionPlan> {
    let k = retained_count(r, n)?;
    let mut indices = permutation(seed.seed, n);
    indices.truncate(k);
    Ok(RetentionPlan {
        strategy: Strategy::Ms1,
        r: Some(r),
        tau: None,
        n,
        indices,
        seed: Some(seed.seed),
    })
}

/// Greedy farthest-first retention.
///
/// Starts from the token with the smallest mean similarity, then repeatedly
/// adds the candidate whose largest similarity to the retained set is
/// smallest.
pub fn ms2_diversity(sim: &SimilarityMatrix, r: f64) -> Result<RetentionPlan> {
    let n = sim.len();
    let k = retained_count(r, n)?;
    let first = sim.least_similar();
    let mut selected = vec![false; n];
    let mut indices = Vec::with_capacity(k);
    // Largest similarity of each token to the retained set.
    let mut closest: Vec<f64> = sim.row(first).to_vec();
    selected[first] = true;
    indices.push(first);
    while indices.len() < k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            if best.map_or(true, |b| closest[i] < closest[b]) {
                best = Some(i);
            }
        }
        let next = best.expect("k <= n leaves a candidate");
        selected[next] = true;
        indices.push(next);
        for (c, &s) in closest.iter_mut().zip(sim.row(next)) {
            if s > *c {
                *c = s;
            }
        }
    }
    Ok(RetentionPlan {
        strategy: Strategy::Ms2,
        r: Some(r),
        tau: None,
        n,
        indices,
        seed: None,
    })
}

/// Thresholded retention for one sample, in ascending index order.
///
/// Keeps `{i : max_{j≠i} S_ij < τ}`; when nothing qualifies the token with
/// the smallest mean similarity is kept alone.
pub fn ms3_plan(sim: &SimilarityMatrix, tau: f64) -> Result<RetentionPlan> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Invalid(format!("similarity threshold {tau} outside (0, 1]")));
    }
    let n = sim.len();
    let mut indices: Vec<usize> = (0..n).filter(|&i| sim.max_off_diagonal(i) < tau).collect();
    if indices.is_empty() {
        let means: Vec<f64> = (0..n).map(|i| sim.mean_similarity(i)).collect();
        indices.push(argmin(&means));
    }
    Ok(RetentionPlan {
        strategy: Strategy::Ms3,
        r: None,
        tau: Some(tau),
        n,
        indices,
        seed: None,
    })
}
