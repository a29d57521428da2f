//! Corpus normalization, joint BPE and the shared vocabulary.

pub mod bpe;
pub mod normalize;
pub mod vocab;

use serde::{Deserialize, Serialize};

pub use bpe::{detokenize, learn_bpe, BpeModel, END_OF_WORD};
pub use normalize::{normalize_corpus, normalize_line, read_corpus};
pub use vocab::Vocabulary;

/// The two sides of a language pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Src,
    Tgt,
}

impl Lang {
    pub fn other(self) -> Lang {
        match self {
            Lang::Src => Lang::Tgt,
            Lang::Tgt => Lang::Src,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Lang::Src => 0,
            Lang::Tgt => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Lang::Src => "src",
            Lang::Tgt => "tgt",
        }
    }
}

impl std::fmt::Display for Lang {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Lang {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "src" => Ok(Lang::Src),
            "tgt" => Ok(Lang::Tgt),
            _ => Err(crate::error::Error::invalid(format!("unknown language tag {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCorpus {
    pub language: Lang,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub language: Lang,
}

/// Normalized, segmented and encoded corpora of one language pair.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
    pub mono: [Vec<Vec<usize>>; 2],
}

/// Segments lines with `bpe` and encodes them, dropping empty results.
pub fn encode_lines<S: AsRef<str>>(bpe: &BpeModel, vocab: &Vocabulary, lines: &[S]) -> Vec<Vec<usize>> {
    lines
        .iter()
        .map(|l| vocab.encode(&bpe.apply(l.as_ref()), Lang::Src).ids)
        .filter(|ids| !ids.is_empty())
        .collect()
}

/// Learns one joint BPE model and vocabulary over already-normalized
/// corpora of both languages and encodes them.
pub fn prepare_pair(src: &RawCorpus, tgt: &RawCorpus, merge_count: usize) -> crate::Result<PreparedPair> {
    let bpe = learn_bpe(&[&src.lines[..], &tgt.lines[..]], merge_count)?;
    let segmented: Vec<Vec<Vec<String>>> = [src, tgt]
        .iter()
        .map(|c| c.lines.iter().map(|l| bpe.apply(l)).collect())
        .collect();
    let vocab = Vocabulary::build(segmented.iter().flatten())?;
    let mono = [0, 1].map(|i| {
        segmented[i]
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| vocab.encode(s, Lang::Src).ids)
            .collect()
    });
    Ok(PreparedPair { bpe, vocab, mono })
}
