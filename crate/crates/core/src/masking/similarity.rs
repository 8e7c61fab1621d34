use crate::patching::PatchGrid;

/// Pairwise cosine similarities between the raw pixel vectors of all patches.
///
/// A zero-norm patch has similarity 0 to every other patch and 1 to itself.
/// Bit-identical nonzero patches have similarity exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
    mean: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds from an explicit row-major `n × n` matrix.
    pub fn from_values(n: usize, values: Vec<f64>) -> crate::Result<Self> {
        if values.len() != n * n || n == 0 {
            return Err(crate::Error::Invalid(format!(
                "similarity matrix for {n} tokens needs {} entries, got {}",
                n * n,
                values.len()
            )));
        }
        let mean = (0..n)
            .map(|i| values[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        Ok(Self { n, values, mean })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Mean similarity of token `i` to all tokens, itself included.
    pub fn mean_similarity(&self, i: usize) -> f64 {
        self.mean[i]
    }

    /// Largest similarity of token `i` to any other token (`-inf` when alone).
    pub fn max_off_diagonal(&self, i: usize) -> f64 {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lowest-index token with the smallest mean similarity.
    pub fn least_similar(&self) -> usize {
        argmin(&self.mean)
    }
}

pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn cosine(a: &[f64], b: &[f64], sq_a: f64, sq_b: f64) -> f64 {
    if sq_a == 0.0 || sq_b == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (sq_a * sq_b).sqrt()).clamp(-1.0, 1.0)
}

pub fn similarity_matrix(grid: &PatchGrid) -> SimilarityMatrix {
    let n = grid.len();
    let sq: Vec<f64> = (0..n)
        .map(|i| grid.patch_vector(i).iter().map(|v| v * v).sum())
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = cosine(grid.patch_vector(i), grid.patch_vector(j), sq[i], sq[j]);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    SimilarityMatrix::from_values(n, values).expect("square by construction")
}
