//! Orthogonal cross-lingual mapping: preprocessing, Procrustes and
//! self-learning refinement with mutual-CSLS dictionary induction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::retrieval::csls_best_batch;
use super::{BilingualDictionary, DictProvenance, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::linalg;

/// Orthogonal `d x d` matrix applied to row vectors: `x ↦ x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosslingualMap {
    dim: usize,
    w: Vec<f64>,
}

impl CrosslingualMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            w: linalg::identity(dim),
        }
    }

    pub fn from_matrix(dim: usize, w: Vec<f64>) -> Self {
        assert_eq!(w.len(), dim * dim);
        Self { dim, w }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.w
    }

    pub fn orthogonality_defect(&self) -> f64 {
        linalg::orthogonality_defect(self.dim, &self.w)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        linalg::matmul(1, self.dim, self.dim, x, &self.w)
    }

    pub fn map_matrix(&self, e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if e.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: e.dim(),
            });
        }
        e.with_data(linalg::matmul(e.len(), self.dim, self.dim, e.data(), &self.w))
    }

    /// The inverse map `Wᵀ`.
    pub fn transpose(&self) -> Self {
        Self::from_matrix(self.dim, linalg::transpose(self.dim, self.dim, &self.w))
    }
}

/// Unit-normalize rows, mean-center columns, unit-normalize again.
pub fn preprocess_embeddings(e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let unit = e.normalized()?;
    let mean = unit.column_means();
    let mut data = unit.data().to_vec();
    for row in data.chunks_mut(e.dim()) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    unit.with_data(data)?.normalized()
}

/// Resolves string pairs to row-index pairs, dropping unresolvable ones.
pub fn resolve_pairs(x: &EmbeddingMatrix, z: &EmbeddingMatrix, dict: &BilingualDictionary) -> Vec<(usize, usize)> {
    dict.pairs
        .iter()
        .filter_map(|(s, t)| Some((x.id(s)?, z.id(t)?)))
        .collect()
}

/// Orthogonal `W` minimizing `‖X_d W − Z_d‖_F` over the given row pairs:
/// `W = U Vᵀ` with `U Σ Vᵀ = X_dᵀ Z_d`.
pub fn procrustes_pairs(x: &EmbeddingMatrix, z: &EmbeddingMatrix, pairs: &[(usize, usize)]) -> Result<CrosslingualMap> {
    if pairs.is_empty() {
        return Err(Error::invalid("procrustes needs a non-empty dictionary"));
    }
    if x.dim() != z.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            actual: z.dim(),
        });
    }
    let d = x.dim();
    let mut cov = vec![0.0; d * d];
    for &(i, j) in pairs {
        let xr = x.row(i);
        let zr = z.row(j);
        for a in 0..d {
            let xa = xr[a];
            let row = &mut cov[a * d..(a + 1) * d];
            for (c, zb) in row.iter_mut().zip(zr) {
                *c += xa * zb;
            }
        }
    }
    let svd = linalg::jacobi_svd(d, &cov);
    let mut w = vec![0.0; d * d];
    linalg::gemm(d, d, d, 1.0, &svd.u, false, &svd.v, true, 0.0, &mut w);
    Ok(CrosslingualMap::from_matrix(d, w))
}

pub fn procrustes(x: &EmbeddingMatrix, z: &EmbeddingMatrix, dict: &BilingualDictionary) -> Result<CrosslingualMap> {
    let pairs = resolve_pairs(x, z, dict);
    if pairs.is_empty() {
        return Err(Error::invalid("dictionary empty or no pair found in both vocabularies"));
    }
    procrustes_pairs(x, z, &pairs)
}

/// Seed dictionary from identical surface strings (numerals included).
pub fn identical_seed(x: &EmbeddingMatrix, z: &EmbeddingMatrix) -> BilingualDictionary {
    let pairs = x
        .tokens()
        .iter()
        .filter(|t| z.id(t).is_some())
        .map(|t| (t.clone(), t.clone()))
        .collect();
    BilingualDictionary::new(pairs, DictProvenance::Seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfLearningConfig {
    pub max_iters: usize,
    pub k_csls: usize,
    /// Only the `freq_cutoff` most frequent rows of each side take part in
    /// dictionary induction.
    pub freq_cutoff: usize,
}

impl Default for SelfLearningConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            k_csls: 10,
            freq_cutoff: 4000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub map: CrosslingualMap,
    pub dictionary: BilingualDictionary,
    /// Dictionary size used for each Procrustes solve, starting with the seed.
    pub dictionary_sizes: Vec<usize>,
    pub iterations: usize,
}

/// Alternates Procrustes on the current dictionary with mutual-CSLS
/// induction until the dictionary stops changing or `max_iters` is hit.
/// The seed pairs are always kept. An empty `seed` falls back to identical
/// strings shared by the two vocabularies.
pub fn self_learning_align(
    x: &EmbeddingMatrix,
    z: &EmbeddingMatrix,
    seed: &BilingualDictionary,
    config: &SelfLearningConfig,
) -> Result<Alignment> {
    let seed = if seed.pairs.is_empty() {
        identical_seed(x, z)
    } else {
        seed.clone()
    };
    let seed_pairs: BTreeSet<(usize, usize)> = resolve_pairs(x, z, &seed).into_iter().collect();
    if seed_pairs.is_empty() {
        return Err(Error::NoSeedSignal);
    }
    let mut dict = seed_pairs.clone();
    let mut sizes = vec![dict.len()];
    let mut iterations = 0;
    let fx = config.freq_cutoff.min(x.len());
    let fz = config.freq_cutoff.min(z.len());
    let k = config.k_csls.min(fx).min(fz).max(1);
    let x_head = x.head(fx);
    let z_head = z.head(fz);

    for _ in 0..config.max_iters {
        iterations += 1;
        let pairs: Vec<_> = dict.iter().copied().collect();
        let map = procrustes_pairs(x, z, &pairs)?;
        let xm = map.map_matrix(&x_head)?;
        let fwd = csls_best_batch(&xm, &z_head, &xm, k)?;
        let bwd = csls_best_batch(&z_head, &xm, &z_head, k)?;
        let mut induced = seed_pairs.clone();
        for (i, &j) in fwd.iter().enumerate() {
            if bwd[j] == i {
                induced.insert((i, j));
            }
        }
        if induced == dict {
            break;
        }
        dict = induced;
        sizes.push(dict.len());
    }

    let pairs: Vec<_> = dict.iter().copied().collect();
    let map = procrustes_pairs(x, z, &pairs)?;
    let provenance = if iterations == 0 {
        DictProvenance::Seed
    } else {
        DictProvenance::Induced
    };
    let dictionary = BilingualDictionary::new(
        pairs
            .iter()
            .map(|&(i, j)| (x.tokens()[i].clone(), z.tokens()[j].clone()))
            .collect(),
        provenance,
    );
    Ok(Alignment {
        map,
        dictionary,
        dictionary_sizes: sizes,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(tokens: &[&str], d: usize, data: Vec<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix::new(tokens.iter().map(|s| s.to_string()).collect(), d, data).unwrap()
    }

    #[test]
    fn preprocessing_example_and_norms() {
        let e = matrix(&["a", "b", "c"], 2, vec![3.0, 4.0, -1.0, 2.0, 0.5, -7.0]);
        let unit = e.normalized().unwrap();
        assert!((unit.row(0)[0] - 0.6).abs() < 1e-15 && (unit.row(0)[1] - 0.8).abs() < 1e-15);
        let p = preprocess_embeddings(&e).unwrap();
        for i in 0..3 {
            assert!((linalg::norm(p.row(i)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_row_is_named() {
        let e = matrix(&["ok", "zero"], 2, vec![1.0, 0.0, 0.0, 0.0]);
        match preprocess_embeddings(&e) {
            Err(Error::ZeroVector(t)) => assert_eq!(t, "zero"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = 5;
        let toks: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = toks.iter().map(|s| s.as_str()).collect();
        let x = matrix(&refs, d, (0..20 * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let dict = BilingualDictionary::new(toks.iter().map(|t| (t.clone(), t.clone())).collect(), DictProvenance::Seed);
        let w = procrustes(&x, &x, &dict).unwrap();
        let err: f64 = w
            .matrix()
            .iter()
            .zip(linalg::identity(d))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-6);
    }

    #[test]
    fn empty_dictionary_is_error() {
        let x = matrix(&["a"], 1, vec![1.0]);
        let empty = BilingualDictionary::new(vec![], DictProvenance::Seed);
        assert!(procrustes(&x, &x, &empty).is_err());
    }

    #[test]
    fn no_seed_signal() {
        let x = matrix(&["a"], 1, vec![1.0]);
        let z = matrix(&["b"], 1, vec![1.0]);
        let empty = BilingualDictionary::new(vec![], DictProvenance::Seed);
        let err = self_learning_align(&x, &z, &empty, &SelfLearningConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NoSeedSignal));
    }

    #[test]
    fn identical_strings_seed_when_none_given() {
        let x = matrix(&["1", "a", "b"], 2, vec![1.0, 0.0, 0.0, 1.0, 0.7, 0.7]);
        let z = matrix(&["c", "1", "d"], 2, vec![0.0, 1.0, 1.0, 0.0, 0.7, -0.7]);
        let seed = identical_seed(&x, &z);
        assert_eq!(seed.pairs, vec![("1".to_string(), "1".to_string())]);
    }

    #[test]
    fn zero_iterations_equals_plain_procrustes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let toks: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = toks.iter().map(|s| s.as_str()).collect();
        let x = matrix(&refs, d, (0..12 * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let z = matrix(&refs, d, (0..12 * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let seed = BilingualDictionary::new(toks[..6].iter().map(|t| (t.clone(), t.clone())).collect(), DictProvenance::Seed);
        let cfg = SelfLearningConfig {
            max_iters: 0,
            ..Default::default()
        };
        let a = self_learning_align(&x, &z, &seed, &cfg).unwrap();
        assert_eq!(a.map, procrustes(&x, &z, &seed).unwrap());
        assert_eq!(a.dictionary.pairs.len(), 6);
    }
}
