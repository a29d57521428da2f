//! Monolingual skip-gram embeddings, orthogonal cross-lingual mapping and
//! word-translation retrieval.

pub mod align;
pub mod io;
pub mod matrix;
pub mod retrieval;
pub mod skipgram;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

pub use align::{
    identical_seed, preprocess_embeddings, procrustes, procrustes_pairs, self_learning_align, Alignment,
    CrosslingualMap, SelfLearningConfig,
};
pub use io::{load_dictionary, load_embeddings, load_map, save_dictionary, save_embeddings, save_map};
pub use matrix::EmbeddingMatrix;
pub use retrieval::{csls_retrieve, nn_retrieve, CslsIndex};
pub use skipgram::{train_skipgram, train_skipgram_with_tokens, SkipGramConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DictProvenance {
    Seed,
    Induced,
    Gold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilingualDictionary {
    pub pairs: Vec<(String, String)>,
    pub provenance: DictProvenance,
}

impl BilingualDictionary {
    /// Drops repeated pairs, keeping first occurrences in order.
    pub fn new(pairs: Vec<(String, String)>, provenance: DictProvenance) -> Self {
        let mut seen = HashSet::new();
        let pairs = pairs.into_iter().filter(|p| seen.insert(p.clone())).collect();
        Self { pairs, provenance }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn inverted(&self) -> Self {
        Self::new(
            self.pairs.iter().map(|(s, t)| (t.clone(), s.clone())).collect(),
            self.provenance,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalMode {
    #[serde(rename = "nn")]
    Nn,
    #[serde(rename = "csls")]
    Csls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "src->tgt")]
    SrcToTgt,
    #[serde(rename = "tgt->src")]
    TgtToSrc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub p_at_1_nn: f64,
    pub p_at_1_csls: f64,
    /// Distinct query tokens evaluated.
    pub dictionary_size: usize,
    /// Gold pairs skipped because a token is missing from its vocabulary.
    pub skipped: usize,
}

/// P@1 of one retrieval mode. Returns `(p_at_1, queries, skipped_pairs)`.
///
/// Queries are the distinct gold source tokens (in `direction`) with at
/// least one resolvable target; a hit is a top-1 retrieval among any of
/// that source's gold targets.
pub fn eval_word_translation(
    map: &CrosslingualMap,
    x: &EmbeddingMatrix,
    z: &EmbeddingMatrix,
    gold: &BilingualDictionary,
    mode: RetrievalMode,
    direction: Direction,
    k_csls: usize,
) -> Result<(f64, usize, usize)> {
    if gold.is_empty() {
        return Err(Error::invalid("gold dictionary is empty"));
    }
    let xm = map.map_matrix(x)?;
    // everything is compared in the target space; for tgt->src the roles swap
    let (queries_side, targets_side, dict) = match direction {
        Direction::SrcToTgt => (&xm, z, gold.clone()),
        Direction::TgtToSrc => (z, &xm, gold.inverted()),
    };
    let mut wanted: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut skipped = 0;
    for (s, t) in &dict.pairs {
        match (queries_side.id(s), targets_side.id(t)) {
            (Some(i), Some(j)) => {
                wanted.entry(i).or_default().insert(j);
            }
            _ => skipped += 1,
        }
    }
    if wanted.is_empty() {
        return Ok((0.0, 0, skipped));
    }
    let qids: Vec<usize> = wanted.keys().copied().collect();
    let q = EmbeddingMatrix::new(
        qids.iter().map(|&i| queries_side.tokens()[i].clone()).collect(),
        queries_side.dim(),
        qids.iter().flat_map(|&i| queries_side.row(i).to_vec()).collect(),
    )?;
    let best = match mode {
        RetrievalMode::Nn => retrieval::nn_best_batch(&q, targets_side),
        RetrievalMode::Csls => {
            let k = k_csls.min(targets_side.len()).min(queries_side.len()).max(1);
            retrieval::csls_best_batch(&q, targets_side, queries_side, k)?
        }
    };
    let hits = qids
        .iter()
        .zip(&best)
        .filter(|(i, b)| wanted[i].contains(b))
        .count();
    Ok((hits as f64 / qids.len() as f64, qids.len(), skipped))
}

/// NN and CSLS P@1 for one direction.
pub fn word_translation_report(
    map: &CrosslingualMap,
    x: &EmbeddingMatrix,
    z: &EmbeddingMatrix,
    gold: &BilingualDictionary,
    direction: Direction,
    k_csls: usize,
) -> Result<RetrievalReport> {
    let (nn, n, skipped) = eval_word_translation(map, x, z, gold, RetrievalMode::Nn, direction, k_csls)?;
    let (csls, _, _) = eval_word_translation(map, x, z, gold, RetrievalMode::Csls, direction, k_csls)?;
    Ok(RetrievalReport {
        direction,
        p_at_1_nn: nn,
        p_at_1_csls: csls,
        dictionary_size: n,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gold_under_identity_map_is_perfect() {
        let toks: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let mut data = vec![0.0; 100];
        for i in 0..10 {
            data[i * 10 + i] = 1.0;
        }
        let e = EmbeddingMatrix::new(toks.clone(), 10, data).unwrap();
        let mut pairs: Vec<_> = toks.iter().map(|t| (t.clone(), t.clone())).collect();
        pairs.push(("missing".into(), "w1".into()));
        let gold = BilingualDictionary::new(pairs, DictProvenance::Gold);
        let map = CrosslingualMap::identity(10);
        for dir in [Direction::SrcToTgt, Direction::TgtToSrc] {
            let r = word_translation_report(&map, &e, &e, &gold, dir, 3).unwrap();
            assert_eq!(r.p_at_1_nn, 1.0);
            assert_eq!(r.p_at_1_csls, 1.0);
            assert_eq!(r.dictionary_size, 10);
            assert_eq!(r.skipped, 1);
        }
    }
}
