//! Training-example constructors: MASS span masking, denoising noise and
//! online back-translation.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::Direction;
use crate::error::{Error, Result};
use crate::model::{Example, Model, Strategy};
use crate::text::vocab::{BOS, MASK};
use crate::text::{Lang, TokenSequence, Vocabulary};

pub const WORD_MASS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MassSample {
    pub encoder_ids: Vec<usize>,
    /// The span shifted right behind a BOS.
    pub decoder_in_ids: Vec<usize>,
    pub decoder_out_ids: Vec<usize>,
    pub span_start: usize,
    pub span_len: usize,
}

impl MassSample {
    /// Reconstruction example for `lang`. Decoder positions continue from
    /// the span start so the decoder knows where the span sat.
    pub fn into_example(self, lang: Lang, bos: usize) -> Example {
        let mut tgt_in = self.decoder_in_ids;
        tgt_in[0] = bos;
        Example {
            src: self.encoder_ids,
            src_lang: lang,
            tgt_in,
            tgt_out: self.decoder_out_ids,
            tgt_lang: lang,
            tgt_offset: self.span_start,
        }
    }
}

pub fn mass_span_len(len: usize, word_mass: f64) -> usize {
    ((word_mass * len as f64).round() as usize).clamp(1, len)
}

/// Masks one contiguous span of `max(1, round(word_mass * len))` tokens
/// at a uniformly random start.
pub fn mass_mask<R: Rng + ?Sized>(seq: &[usize], word_mass: f64, rng: &mut R) -> MassSample {
    assert!(!seq.is_empty(), "mass_mask needs a non-empty sequence");
    assert!(word_mass > 0.0 && word_mass <= 1.0, "word_mass must be in (0,1]");
    let span_len = mass_span_len(seq.len(), word_mass);
    let span_start = rng.random_range(0..=seq.len() - span_len);
    let span = &seq[span_start..span_start + span_len];
    let mut encoder_ids = seq.to_vec();
    encoder_ids[span_start..span_start + span_len].fill(MASK);
    let mut decoder_in_ids = Vec::with_capacity(span_len);
    decoder_in_ids.push(BOS);
    decoder_in_ids.extend_from_slice(&span[..span_len - 1]);
    MassSample {
        encoder_ids,
        decoder_in_ids,
        decoder_out_ids: span.to_vec(),
        span_start,
        span_len,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub shuffle_window: usize,
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            shuffle_window: 3,
            drop_prob: 0.1,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::invalid(format!("drop_prob {} outside [0,1)", self.drop_prob)));
        }
        Ok(())
    }
}

/// Word dropout followed by a local shuffle. Survivor `i` is sorted by
/// `i + u`, `u ~ U[0, k+1)`, so nothing moves more than `k` places. At
/// least one token always survives.
pub fn dae_noise<R: Rng + ?Sized>(seq: &[usize], config: &NoiseConfig, rng: &mut R) -> Vec<usize> {
    assert!(!seq.is_empty(), "dae_noise needs a non-empty sequence");
    let mut kept: Vec<usize> = Vec::with_capacity(seq.len());
    for &t in seq {
        if config.drop_prob == 0.0 || rng.random::<f64>() >= config.drop_prob {
            kept.push(t);
        }
    }
    if kept.is_empty() {
        kept.push(seq[rng.random_range(0..seq.len())]);
    }
    if config.shuffle_window == 0 {
        return kept;
    }
    let width = (config.shuffle_window + 1) as f64;
    let mut keyed: Vec<(f64, usize)> = kept
        .into_iter()
        .enumerate()
        .map(|(i, t)| (i as f64 + rng.random::<f64>() * width, t))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, t)| t).collect()
}

/// Denoising example: reconstruct `seq` from its corruption.
pub fn dae_example<R: Rng + ?Sized>(seq: &[usize], lang: Lang, bos: usize, config: &NoiseConfig, rng: &mut R) -> Example {
    Example::seq2seq(dae_noise(seq, config, rng), lang, seq, lang, bos)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtPair {
    pub synthetic_src: TokenSequence,
    pub gold_tgt: TokenSequence,
    pub direction: Direction,
}

impl BtPair {
    pub fn into_example(self, bos: usize) -> Example {
        Example::seq2seq(
            self.synthetic_src.ids,
            self.synthetic_src.language,
            &self.gold_tgt.ids,
            self.gold_tgt.language,
            bos,
        )
    }
}

pub fn direction_into(target: Lang) -> Direction {
    match target {
        Lang::Tgt => Direction::SrcToTgt,
        Lang::Src => Direction::TgtToSrc,
    }
}

/// Translates gold sentences of `gold_lang` into the other language with
/// the current model and pairs them as (synthetic source -> gold).
/// Returns the pairs and the number dropped for empty model output.
pub fn make_bt_batch(
    model: &Model,
    gold: &[&[usize]],
    gold_lang: Lang,
    strategy: Strategy,
    max_len: usize,
) -> Result<(Vec<BtPair>, usize)> {
    let src_lang = gold_lang.other();
    let langs = vec![src_lang; gold.len()];
    let synthetic = model.translate_batch(gold, &langs, strategy, max_len)?;
    let mut pairs = Vec::with_capacity(gold.len());
    let mut dropped = 0;
    for (syn, g) in synthetic.into_iter().zip(gold) {
        if syn.is_empty() {
            dropped += 1;
            continue;
        }
        pairs.push(BtPair {
            synthetic_src: TokenSequence {
                ids: syn,
                language: src_lang,
            },
            gold_tgt: TokenSequence {
                ids: g.to_vec(),
                language: gold_lang,
            },
            direction: direction_into(gold_lang),
        });
    }
    Ok((pairs, dropped))
}

/// Appends pairs as `synthetic<TAB>gold` lines.
pub fn dump_bt_pairs(pairs: &[BtPair], vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for p in pairs {
        let s = vocab.decode(&p.synthetic_src.ids)?;
        let g = vocab.decode(&p.gold_tgt.ids)?;
        writeln!(f, "{s}\t{g}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
