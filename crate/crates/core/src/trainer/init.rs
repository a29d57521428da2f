//! Embedding-layer initialization from cross-lingual word vectors.

use serde::{Deserialize, Serialize};

use crate::embeddings::{preprocess_embeddings, CrosslingualMap, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::model::{EmbeddingMode, Parameters};
use crate::text::Vocabulary;

/// Which vectors are fed to the embedding layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitSource {
    /// Unit-normalized raw vectors, source side mapped and renormalized.
    /// Each language keeps its own mean direction.
    #[default]
    Mapped,
    /// The centered vectors the map was learned on.
    Preprocessed,
}

/// Both languages' vectors in the shared (target) space.
#[derive(Debug, Clone)]
pub struct CrosslingualInit {
    pub src: EmbeddingMatrix,
    pub tgt: EmbeddingMatrix,
}

impl CrosslingualInit {
    pub fn build(x: &EmbeddingMatrix, z: &EmbeddingMatrix, map: &CrosslingualMap, source: InitSource) -> Result<Self> {
        let (x, z) = match source {
            InitSource::Mapped => (x.normalized()?, z.normalized()?),
            InitSource::Preprocessed => (preprocess_embeddings(x)?, preprocess_embeddings(z)?),
        };
        Ok(Self {
            src: map.map_matrix(&x)?.normalized()?,
            tgt: z,
        })
    }

    pub fn dim(&self) -> usize {
        self.tgt.dim()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub copied: usize,
    /// Vocabulary entries without a vector; they keep the Gaussian init.
    pub missing: Vec<String>,
}

/// Copies cross-lingual vectors into the embedding rows (and an untied
/// output projection) unless `mode` is `Random`, which leaves the seeded
/// Gaussian initialization untouched. A token present on both sides gets
/// the mean of its two vectors.
pub fn apply_embedding_mode(
    params: &mut Parameters,
    vocab: &Vocabulary,
    mode: EmbeddingMode,
    init: Option<&CrosslingualInit>,
) -> Result<InitReport> {
    if mode == EmbeddingMode::Random {
        return Ok(InitReport::default());
    }
    let init = init.ok_or_else(|| Error::invalid(format!("{mode} embeddings need cross-lingual vectors")))?;
    let d = params.dim();
    if init.dim() != d || init.src.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: init.dim(),
        });
    }
    if vocab.len() != params.vocab_size() {
        return Err(Error::DimensionMismatch {
            expected: params.vocab_size(),
            actual: vocab.len(),
        });
    }
    let mut report = InitReport::default();
    for (id, tok) in vocab.tokens().iter().enumerate() {
        let row: Vec<f64> = match (init.src.vector(tok), init.tgt.vector(tok)) {
            (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect(),
            (Some(a), None) => a.to_vec(),
            (None, Some(b)) => b.to_vec(),
            (None, None) => {
                report.missing.push(tok.clone());
                continue;
            }
        };
        params.embedding.data[id * d..(id + 1) * d].copy_from_slice(&row);
        if let Some(out) = params.output.as_mut() {
            out.data[id * d..(id + 1) * d].copy_from_slice(&row);
        }
        report.copied += 1;
    }
    Ok(report)
}
