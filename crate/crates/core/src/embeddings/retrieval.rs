//! Nearest-neighbour and CSLS retrieval. Rankings are by descending score
//! with ties broken by ascending row id.

use super::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg;

pub fn cosine_scores(x: &[f64], z: &EmbeddingMatrix) -> Vec<f64> {
    (0..z.len()).map(|j| EmbeddingMatrix::cosine(x, z.row(j))).collect()
}

/// Ids of the `n` highest scores.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(n);
    ids
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Mean of the `k` largest values.
pub fn mean_top_k(values: &[f64], k: usize) -> f64 {
    let k = k.min(values.len());
    if k == 0 {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}

pub fn nn_retrieve(x: &[f64], z: &EmbeddingMatrix, n: usize) -> Vec<usize> {
    top_n(&cosine_scores(x, z), n.max(1))
}

/// Precomputed target-side CSLS penalties `r_S(z)`: the mean cosine of each
/// target row to its `k` nearest mapped source rows.
#[derive(Debug, Clone)]
pub struct CslsIndex {
    pub k: usize,
    pub target_penalty: Vec<f64>,
}

impl CslsIndex {
    pub fn new(z: &EmbeddingMatrix, x_mapped: &EmbeddingMatrix, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("CSLS k must be at least 1"));
        }
        if k > z.len() || k > x_mapped.len() {
            return Err(Error::invalid(format!(
                "CSLS k={k} exceeds neighbourhood size ({} targets, {} sources)",
                z.len(),
                x_mapped.len()
            )));
        }
        let sims = similarity_matrix(z, x_mapped);
        let m = x_mapped.len();
        let target_penalty = sims.chunks(m).map(|row| mean_top_k(row, k)).collect();
        Ok(Self { k, target_penalty })
    }

    /// CSLS scores of query `x` against every row of `z`.
    pub fn scores(&self, x: &[f64], z: &EmbeddingMatrix) -> Vec<f64> {
        let cos = cosine_scores(x, z);
        let r_t = mean_top_k(&cos, self.k);
        cos.iter()
            .zip(&self.target_penalty)
            .map(|(c, r_s)| 2.0 * c - r_t - r_s)
            .collect()
    }
}

pub fn csls_retrieve(
    x: &[f64],
    z: &EmbeddingMatrix,
    x_mapped: &EmbeddingMatrix,
    k: usize,
    n: usize,
) -> Result<Vec<usize>> {
    let index = CslsIndex::new(z, x_mapped, k)?;
    Ok(top_n(&index.scores(x, z), n.max(1)))
}

/// Cosine similarity of every row of `a` against every row of `b`,
/// row-major `|a| x |b|`.
pub fn similarity_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Vec<f64> {
    let an = unit_rows(a);
    let bn = unit_rows(b);
    let mut out = vec![0.0; a.len() * b.len()];
    linalg::gemm(a.len(), a.dim(), b.len(), 1.0, &an, false, &bn, true, 0.0, &mut out);
    out
}

fn unit_rows(e: &EmbeddingMatrix) -> Vec<f64> {
    let d = e.dim();
    let mut v = e.data().to_vec();
    for row in v.chunks_mut(d) {
        let n = linalg::norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    v
}

/// Top-1 target for every query row, by plain cosine.
pub fn nn_best_batch(queries: &EmbeddingMatrix, z: &EmbeddingMatrix) -> Vec<usize> {
    let sims = similarity_matrix(queries, z);
    sims.chunks(z.len().max(1)).map(argmax).collect()
}

/// Top-1 target for every query row by CSLS, with `r_S` computed against
/// `sources` (the full mapped source side).
pub fn csls_best_batch(
    queries: &EmbeddingMatrix,
    z: &EmbeddingMatrix,
    sources: &EmbeddingMatrix,
    k: usize,
) -> Result<Vec<usize>> {
    let index = CslsIndex::new(z, sources, k)?;
    let sims = similarity_matrix(queries, z);
    Ok(sims
        .chunks(z.len())
        .map(|row| {
            let r_t = mean_top_k(row, k);
            let scores: Vec<f64> = row
                .iter()
                .zip(&index.target_penalty)
                .map(|(c, r_s)| 2.0 * c - r_t - r_s)
                .collect();
            argmax(&scores)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingMatrix::new((0..n).map(|i| format!("t{i}")).collect(), d, data).unwrap()
    }

    #[test]
    fn query_equal_to_row_is_top1() {
        let z = random_matrix(30, 8, 1);
        for j in [0, 7, 29] {
            assert_eq!(nn_retrieve(z.row(j), &z, 1), vec![j]);
        }
    }

    #[test]
    fn orthogonal_query_scores_zero() {
        let z = EmbeddingMatrix::new(vec!["a".into(), "b".into()], 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let scores = cosine_scores(&[0.0, 0.0, 2.0], &z);
        assert!(scores.iter().all(|s| s.abs() < 1e-9));
        // ties resolved by id
        assert_eq!(nn_retrieve(&[0.0, 0.0, 2.0], &z, 2), vec![0, 1]);
    }

    #[test]
    fn k_larger_than_targets_is_error() {
        let z = random_matrix(5, 4, 2);
        let x = random_matrix(10, 4, 3);
        assert!(csls_retrieve(x.row(0), &z, &x, 6, 1).is_err());
        assert!(csls_retrieve(x.row(0), &z, &x, 5, 1).is_ok());
    }

    #[test]
    fn mean_top_k_picks_largest() {
        assert_eq!(mean_top_k(&[0.1, 0.9, 0.5, 0.7], 2), 0.8);
        assert_eq!(mean_top_k(&[0.3], 4), 0.3);
    }

    #[test]
    fn batch_paths_agree_with_single_queries() {
        let z = random_matrix(40, 6, 4);
        let x = random_matrix(25, 6, 5);
        let nn = nn_best_batch(&x, &z);
        let cs = csls_best_batch(&x, &z, &x, 4).unwrap();
        for i in 0..x.len() {
            assert_eq!(nn[i], nn_retrieve(x.row(i), &z, 1)[0]);
            assert_eq!(cs[i], csls_retrieve(x.row(i), &z, &x, 4, 1).unwrap()[0]);
        }
    }
}
