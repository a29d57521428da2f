//! End-to-end wiring: corpora, cross-lingual embeddings, model
//! initialization and one training run per approach.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{
    preprocess_embeddings, self_learning_align, train_skipgram, word_translation_report, Alignment,
    BilingualDictionary, DictProvenance, Direction, EmbeddingMatrix, RetrievalReport, SelfLearningConfig,
    SkipGramConfig,
};
use crate::error::{Error, Result};
use crate::model::{EmbeddingMode, Model, ModelConfig, Strategy};
use crate::text::{normalize_corpus, normalize_line, prepare_pair, BpeModel, Lang, RawCorpus, Vocabulary};
use crate::toylang::{generate_toy_pair, ToyLangSpec, ToyPair};
use crate::trainer::{
    apply_embedding_mode, translate_and_score, Checkpoint, Corpora, CrosslingualInit, InitReport, InitSource,
    Outcome, ParallelSet, Regime, RunDir, RunOptions, TrainConfig,
};

/// Enough merges that every toy word becomes a single unit.
pub const TOY_MERGES: usize = 2000;
pub const TOY_SEED_PAIRS: usize = 20;

/// One row of the results grid: a training regime with an embedding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approach {
    pub regime: Regime,
    pub mode: EmbeddingMode,
}

impl Approach {
    pub const ALL: [Approach; 8] = [
        Approach::new(Regime::MassPretrain, EmbeddingMode::Random),
        Approach::new(Regime::DaePretrain, EmbeddingMode::Random),
        Approach::new(Regime::DaeIterative, EmbeddingMode::NonStatic),
        Approach::new(Regime::MassPretrain, EmbeddingMode::NonStatic),
        Approach::new(Regime::DaePretrain, EmbeddingMode::NonStatic),
        Approach::new(Regime::DaeIterative, EmbeddingMode::Static),
        Approach::new(Regime::MassPretrain, EmbeddingMode::Static),
        Approach::new(Regime::DaePretrain, EmbeddingMode::Static),
    ];

    pub const fn new(regime: Regime, mode: EmbeddingMode) -> Self {
        Self { regime, mode }
    }

    /// Table label, e.g. `DAE Static` or `MASS` for random init.
    pub fn label(&self) -> String {
        let base = match self.regime {
            Regime::MassPretrain => "MASS",
            Regime::DaePretrain => "DAE",
            Regime::DaeIterative => "DAE-iterative",
            Regime::BtFinetune => "BT",
        };
        match self.mode {
            EmbeddingMode::Random => base.to_string(),
            EmbeddingMode::NonStatic => format!("{base} Non-Static"),
            EmbeddingMode::Static => format!("{base} Static"),
        }
    }

    /// File-system friendly name, e.g. `dae_pretrain-static`.
    pub fn slug(&self) -> String {
        format!("{}-{}", self.regime.name().to_ascii_lowercase(), self.mode)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (r, m) = s
            .rsplit_once(['-', ':', '/'])
            .ok_or_else(|| Error::invalid(format!("approach `{s}` is not <regime>-<mode>")))?;
        Ok(Self::new(r.parse()?, m.parse()?))
    }
}

/// Segmented corpora plus the tokens each language's embeddings train on.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub bpe: BpeModel,
    pub corpora: Corpora,
}

impl PreparedData {
    pub fn vocab(&self) -> &Vocabulary {
        &self.corpora.vocab
    }

    /// Monolingual sentences of `lang` as subword strings.
    pub fn token_sentences(&self, lang: Lang) -> Vec<Vec<String>> {
        let v = &self.corpora.vocab;
        self.corpora.mono[lang.index()]
            .iter()
            .map(|s| s.iter().filter_map(|&i| v.token(i)).map(str::to_string).collect())
            .collect()
    }
}

fn split_pairs(pairs: &[(String, String)]) -> (Vec<String>, Vec<String>) {
    pairs.iter().cloned().unzip()
}

/// Normalizes and segments both sides, learning one joint BPE model.
pub fn prepare_data(
    src: &RawCorpus,
    tgt: &RawCorpus,
    valid: &[(String, String)],
    test: &[(String, String)],
    merges: usize,
    lowercase: bool,
) -> Result<PreparedData> {
    let prep = prepare_pair(&normalize_corpus(src, lowercase), &normalize_corpus(tgt, lowercase), merges)?;
    let norm = |v: Vec<String>| -> Vec<String> {
        v.iter()
            .map(|l| crate::text::normalize_line(l, lowercase))
            .collect()
    };
    let set = |pairs: &[(String, String)]| -> Result<ParallelSet> {
        let (s, t) = split_pairs(pairs);
        ParallelSet::from_text(&prep.bpe, &prep.vocab, &norm(s), &norm(t))
    };
    let corpora = Corpora {
        valid: set(valid)?,
        test: set(test)?,
        vocab: prep.vocab,
        mono: prep.mono,
    };
    Ok(PreparedData { bpe: prep.bpe, corpora })
}

pub fn prepare_toy(pair: &ToyPair) -> Result<PreparedData> {
    prepare_data(&pair.mono_a, &pair.mono_b, &pair.valid, &pair.test, TOY_MERGES, false)
}

/// Word-final subword form of a lexicon word, as it appears in the vocabulary.
pub fn word_unit(word: &str) -> String {
    format!("{word}</w>")
}

/// Lexicon pairs as word units.
pub fn toy_gold_dictionary(pair: &ToyPair) -> BilingualDictionary {
    BilingualDictionary::new(
        pair.lexicon
            .entries
            .iter()
            .map(|e| (word_unit(&e.a), word_unit(&e.b)))
            .collect(),
        DictProvenance::Gold,
    )
}

/// Rewrites word pairs as the subword units they segment into. Pairs with
/// a word that splits into several units are dropped.
pub fn dictionary_units(dict: &BilingualDictionary, bpe: &BpeModel) -> BilingualDictionary {
    let unit = |w: &str| {
        let mut s = bpe.segment_word(w);
        (s.len() == 1).then(|| s.remove(0))
    };
    BilingualDictionary::new(
        dict.pairs
            .iter()
            .filter_map(|(a, b)| Some((unit(a)?, unit(b)?)))
            .collect(),
        dict.provenance,
    )
}

/// Every `len / n`-th pair, `n` in all.
pub fn spaced_subset(dict: &BilingualDictionary, n: usize) -> BilingualDictionary {
    let step = (dict.len() / n.max(1)).max(1);
    BilingualDictionary::new(
        dict.pairs.iter().step_by(step).take(n).cloned().collect(),
        DictProvenance::Seed,
    )
}

/// `n` evenly spaced lexicon pairs used as the alignment seed.
pub fn toy_seed_dictionary(pair: &ToyPair, n: usize) -> BilingualDictionary {
    spaced_subset(&toy_gold_dictionary(pair), n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub skipgram: SkipGramConfig,
    pub align: SelfLearningConfig,
    pub init_source: InitSource,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            skipgram: SkipGramConfig::default(),
            align: SelfLearningConfig::default(),
            init_source: InitSource::Mapped,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrosslingualSetup {
    pub x: EmbeddingMatrix,
    pub z: EmbeddingMatrix,
    pub alignment: Alignment,
    pub init: CrosslingualInit,
    /// Gold-dictionary retrieval in both directions, when a gold set is given.
    pub reports: Vec<RetrievalReport>,
}

/// Skip-gram per language, then seeded self-learning alignment.
pub fn build_crosslingual(
    data: &PreparedData,
    seed: &BilingualDictionary,
    gold: Option<&BilingualDictionary>,
    config: &EmbeddingConfig,
) -> Result<CrosslingualSetup> {
    let x = train_skipgram(&data.token_sentences(Lang::Src), &config.skipgram)?;
    let z = train_skipgram(&data.token_sentences(Lang::Tgt), &config.skipgram)?;
    let xp = preprocess_embeddings(&x)?;
    let zp = preprocess_embeddings(&z)?;
    let alignment = self_learning_align(&xp, &zp, seed, &config.align)?;
    let mut reports = Vec::new();
    if let Some(gold) = gold {
        for dir in [Direction::SrcToTgt, Direction::TgtToSrc] {
            reports.push(word_translation_report(
                &alignment.map,
                &xp,
                &zp,
                gold,
                dir,
                config.align.k_csls,
            )?);
        }
    }
    let init = CrosslingualInit::build(&x, &z, &alignment.map, config.init_source)?;
    Ok(CrosslingualSetup {
        x,
        z,
        alignment,
        init,
        reports,
    })
}

/// A generated toy pair with its corpora and aligned embeddings.
#[derive(Debug, Clone)]
pub struct ToySetup {
    pub pair: ToyPair,
    pub data: PreparedData,
    pub crosslingual: CrosslingualSetup,
}

/// Generates the pair, segments it, and aligns `dim`-dimensional skip-gram
/// vectors from a seed of `seed_pairs` lexicon entries.
pub fn toy_setup(spec: &ToyLangSpec, dim: usize, seed_pairs: usize) -> Result<ToySetup> {
    let pair = generate_toy_pair(spec)?;
    let data = prepare_toy(&pair)?;
    let mut config = EmbeddingConfig::default();
    config.skipgram.dim = dim;
    config.skipgram.seed = spec.seed;
    let crosslingual = build_crosslingual(
        &data,
        &toy_seed_dictionary(&pair, seed_pairs),
        Some(&toy_gold_dictionary(&pair)),
        &config,
    )?;
    Ok(ToySetup {
        pair,
        data,
        crosslingual,
    })
}

/// Model and training configs specialised to `approach`.
pub fn configs_for(approach: Approach, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
    let m = ModelConfig {
        use_decoder_lang_code: approach.regime != Regime::DaeIterative,
        embedding_mode: approach.mode,
        ..model.clone()
    };
    let t = TrainConfig {
        regime: approach.regime,
        embedding_mode: approach.mode,
        ..train.clone()
    };
    (m, t)
}

/// Seeded model with the embedding layer set up for `config.embedding_mode`.
pub fn init_model(
    config: &ModelConfig,
    vocab: &Vocabulary,
    init: Option<&CrosslingualInit>,
    seed: u64,
) -> Result<(Model, InitReport)> {
    let mut model = Model::new(config.clone(), vocab.len(), seed)?;
    let report = apply_embedding_mode(&mut model.params, vocab, config.embedding_mode, init)?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub approach: Approach,
    pub label: String,
    pub seed: u64,
    /// Full test-set BLEU of the best checkpoint: src->tgt, tgt->src.
    pub test_bleu: [f64; 2],
    pub epochs: usize,
    pub init_missing: usize,
}

/// Trains one approach from scratch (or resumes it from `out`'s latest
/// checkpoint) and scores the best parameters on the full test set.
pub fn run_approach(
    approach: Approach,
    model: &ModelConfig,
    train: &TrainConfig,
    data: &PreparedData,
    init: Option<&CrosslingualInit>,
    out: Option<&RunDir>,
) -> Result<(RunSummary, Checkpoint)> {
    let (mc, tc) = configs_for(approach, model, train);
    let resume = out.map(|d| d.latest_checkpoint()).filter(|p| p.exists());
    let (mut ck, missing) = match resume {
        Some(p) => (Checkpoint::load(&p, Some(&data.vocab().hash()))?, 0),
        None => {
            let (m, report) = init_model(&mc, data.vocab(), init, tc.seed)?;
            (Checkpoint::new(m, tc.clone(), data.vocab())?, report.missing.len())
        }
    };
    if let Some(dir) = out {
        write_json(&dir.config(), &RunConfig { model: mc, train: tc })?;
        data.vocab().save(&dir.vocab())?;
    }
    let outcome = ck.run(
        &data.corpora,
        RunOptions {
            out,
            ..Default::default()
        },
    )?;
    debug_assert_eq!(outcome, Outcome::Finished);
    let scored = translate_and_score(&ck.best_model(), &data.corpora.test, data.vocab(), 0)?;
    let summary = RunSummary {
        approach,
        label: approach.label(),
        seed: ck.config.seed,
        test_bleu: scored.bleu,
        epochs: ck.global_epoch,
        init_missing: missing,
    };
    if let Some(dir) = out {
        write_json(&dir.summary(), &summary)?;
    }
    Ok((summary, ck))
}

/// Translates raw lines into `target`; empty lines stay empty.
pub fn translate_lines<S: AsRef<str>>(
    model: &Model,
    bpe: &BpeModel,
    vocab: &Vocabulary,
    lines: &[S],
    target: Lang,
    strategy: Strategy,
    max_len: usize,
    lowercase: bool,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(lines.len());
    for chunk in lines.chunks(64) {
        let ids: Vec<Vec<usize>> = chunk
            .iter()
            .map(|l| vocab.encode(&bpe.apply(&normalize_line(l.as_ref(), lowercase)), target.other()).ids)
            .collect();
        let nonempty: Vec<&[usize]> = ids.iter().filter(|s| !s.is_empty()).map(Vec::as_slice).collect();
        let langs = vec![target; nonempty.len()];
        let mut hyps = model.translate_batch(&nonempty, &langs, strategy, max_len)?.into_iter();
        for s in &ids {
            match s.is_empty() {
                true => out.push(String::new()),
                false => out.push(vocab.decode(&hyps.next().unwrap_or_default())?),
            }
        }
    }
    Ok(out)
}

/// The config document of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn approach_labels_and_slugs() {
        let labels: Vec<String> = Approach::ALL.iter().map(|a| a.label()).collect();
        assert_eq!(labels[0], "MASS");
        assert_eq!(labels[5], "DAE-iterative Static");
        assert_eq!(labels[7], "DAE Static");
        for a in Approach::ALL {
            assert_eq!(Approach::parse(&a.slug()).unwrap(), a);
        }
    }
}
