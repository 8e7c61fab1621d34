//! Independent oracles shared by the focused integration tests and the
//! acceptance report.

#![allow(dead_code)]

pub mod grad;
pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rvit::costmodel::flops_for_retained;
use rvit::masking::{ms1_uniform, ms2_diversity, ms3_plan, SampleSeed, SimilarityMatrix};
use rvit::model::{HeadConfig, ModelConfig, Network, NetworkConfig};
use rvit::numkernel::flops;
use rvit::patching::{gather_patches, partition, ImageSample, Labels};

/// Uniform retention trace for key "s0", r = 0.5, N = 8, recorded with
/// `tests/oracles/ms1_trace.py` before the implementation existed.
pub const GOLDEN_KEY: &str = "s0";
pub const GOLDEN_SEED: u64 = 637538656335744918;
pub const GOLDEN_RETAINED: [usize; 4] = [4, 6, 1, 3];
pub const GOLDEN_JSON_INDICES: &str = "\"indices\":[4,6,1,3]";

/// Random similarity matrix built from cosines of random vectors. With
/// `coarse` the vectors take values in {-1, 0, 1}, which produces exact
/// ties and duplicate patches.
pub fn random_similarity(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> Vec<Vec<f64>> {
    let dim = rng.gen_range(2..6);
    let vecs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if coarse {
                        rng.gen_range(-1i32..=1) as f64
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
                .collect()
        })
        .collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
            let na: f64 = vecs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb: f64 = vecs[j].iter().map(|b| b * b).sum::<f64>().sqrt();
            s[i][j] = if i == j {
                1.0
            } else if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            };
        }
    }
    s
}

pub fn to_matrix(s: &[Vec<f64>]) -> SimilarityMatrix {
    SimilarityMatrix::from_values(s.len(), s.iter().flatten().copied().collect()).unwrap()
}

/// Farthest-first traversal recomputing every distance from scratch at each
/// step; lowest index wins ties.
pub fn brute_force_farthest_first(s: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = s.len();
    let mean = |i: usize| s[i].iter().sum::<f64>() / n as f64;
    let mut first = 0;
    for i in 1..n {
        if mean(i) < mean(first) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let d = chosen.iter().map(|&j| s[i][j]).fold(f64::NEG_INFINITY, f64::max);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// Runs MS2 against the brute-force reference; returns mismatching trials.
pub fn ms2_oracle_mismatches(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for t in 0..trials {
        let n = rng.gen_range(1..=10);
        let s = random_similarity(&mut rng, n, t % 3 == 0);
        let k = rng.gen_range(1..=n);
        let r = k as f64 / n as f64;
        let got = ms2_diversity(&to_matrix(&s), r).unwrap().indices;
        if got != brute_force_farthest_first(&s, k) {
            bad += 1;
        }
    }
    bad
}

/// Checks MS3 membership against `max_{j≠i} S_ij < τ` on random matrices,
/// including the single-token guard; returns mismatching trials.
pub fn ms3_predicate_mismatches(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for t in 0..trials {
        let n = rng.gen_range(2..=12);
        let s = random_similarity(&mut rng, n, t % 3 == 0);
        let tau: f64 = rng.gen_range(0.01..=1.0);
        let got = ms3_plan(&to_matrix(&s), tau).unwrap().indices;
        let mut want: Vec<usize> = (0..n)
            .filter(|&i| (0..n).filter(|&j| j != i).all(|j| s[i][j] < tau))
            .collect();
        if want.is_empty() {
            let mean = |i: usize| s[i].iter().sum::<f64>() / n as f64;
            let lowest = (1..n).fold(0, |b, i| if mean(i) < mean(b) { i } else { b });
            want.push(lowest);
        }
        if got != want {
            bad += 1;
        }
    }
    bad
}

/// Inclusion counts of every index over `keys` distinct keys, plus whether
/// every plan had exactly `⌊r·N⌋` members.
pub fn ms1_inclusion(keys: usize, r: f64, n: usize) -> (Vec<usize>, bool) {
    let k = (r * n as f64).floor() as usize;
    let mut counts = vec![0; n];
    let mut exact = true;
    for i in 0..keys {
        let plan = ms1_uniform(&SampleSeed::from_key(format!("key-{i}")), r, n).unwrap();
        exact &= plan.indices.len() == k;
        for &j in &plan.indices {
            counts[j] += 1;
        }
    }
    (counts, exact)
}

/// Largest |z| of the per-index inclusion frequencies against the binomial.
pub fn max_inclusion_z(counts: &[usize], keys: usize, p: f64) -> f64 {
    let sigma = (keys as f64 * p * (1.0 - p)).sqrt();
    counts
        .iter()
        .map(|&c| (c as f64 - keys as f64 * p).abs() / sigma)
        .fold(0.0, f64::max)
}

/// One cost-model configuration: encoder, head and retained count.
pub struct CostCase {
    pub encoder: ModelConfig,
    pub head: HeadConfig,
    pub k: usize,
}

/// Twelve configurations mixing depth, width, patch size, retention and
/// both head types.
pub fn cost_cases() -> Vec<CostCase> {
    let mut cases = Vec::new();
    let shapes = [
        (16, 4, 2, 2, 4, 3, 16, 16),
        (32, 4, 4, 4, 8, 3, 32, 32),
        (24, 4, 3, 2, 4, 1, 16, 24),
        (64, 4, 4, 4, 8, 3, 64, 64),
        (8, 8, 2, 3, 2, 2, 8, 8),
        (48, 4, 6, 4, 16, 3, 32, 48),
    ];
    for (i, &(d, depth, heads, mlp, p, c, h, w)) in shapes.iter().enumerate() {
        let encoder = ModelConfig::new(d, depth, heads, mlp, p, c, h, w);
        let n = encoder.num_patches();
        let head = if i % 2 == 0 {
            HeadConfig::Classification { labels: 5 }
        } else {
            HeadConfig::Segmentation { classes: 4, width: 8 }
        };
        for k in [n, (n / 4).max(1)] {
            cases.push(CostCase {
                encoder: encoder.clone(),
                head,
                k,
            });
        }
    }
    cases
}

/// Analytic and instrumented forward FLOPs of one case.
pub fn analytic_and_measured(case: &CostCase) -> (u64, u64) {
    let enc = &case.encoder;
    let analytic = flops_for_retained(enc, (enc.image_height, enc.image_width), case.k, &case.head)
        .unwrap()
        .total_flops;
    let net = Network::new(
        NetworkConfig {
            encoder: enc.clone(),
            head: case.head,
        },
        1,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (h, w, c) = (enc.image_height, enc.image_width, enc.channels);
    let pixels = (0..h * w * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let image = ImageSample::new("cost", h, w, c, pixels, Labels::default()).unwrap();
    let grid = partition(&image, enc.patch).unwrap();
    let batch = gather_patches(&[&grid], &[(0..case.k).collect()]).unwrap();
    let (out, measured) = flops::measure(|| net.logits(&batch));
    out.unwrap();
    (analytic, measured)
}
