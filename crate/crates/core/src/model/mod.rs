//! Transformer encoder-decoder with a shared embedding table.

pub mod decode;
pub mod ops;
pub mod params;
pub mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decode::Strategy;
pub use params::{Parameters, ParamTree, Tensor};
pub use transformer::{cross_entropy, log_softmax, DecoderInput, ForwardOutput, Side, Transformer};

use crate::error::{Error, Result};
use crate::text::vocab::{lang_bos, BOS, EOS, PAD};
use crate::text::{Lang, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    #[default]
    Random,
    NonStatic,
    Static,
}

impl std::fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::NonStatic => "nonstatic",
            Self::Static => "static",
        })
    }
}

impl std::str::FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "random" => Ok(Self::Random),
            "nonstatic" => Ok(Self::NonStatic),
            "static" => Ok(Self::Static),
            _ => Err(Error::invalid(format!("unknown embedding mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub use_decoder_lang_code: bool,
    pub embedding_mode: EmbeddingMode,
    /// Output projection shares the embedding matrix.
    #[serde(default = "default_true")]
    pub tie_output: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            ffn_dim: 256,
            dropout: 0.1,
            max_len: 64,
            use_decoder_lang_code: true,
            embedding_mode: EmbeddingMode::Random,
            tie_output: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            layers: 6,
            heads: 8,
            dim: 1024,
            ffn_dim: 4096,
            dropout: 0.1,
            max_len: 256,
            ..Self::desk()
        }
    }

    /// The smallest useful configuration, for tests.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            heads: 2,
            dim: 16,
            ffn_dim: 32,
            dropout: 0.0,
            max_len: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("layers must be at least 1"));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.max_len < 2 {
            return Err(Error::invalid("ffn_dim must be positive and max_len at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// First decoder input token for generating `lang`. Without language
    /// codes the language-specific BOS carries the target language.
    pub fn decoder_bos(&self, lang: Lang) -> usize {
        if self.use_decoder_lang_code {
            BOS
        } else {
            lang_bos(lang)
        }
    }
}

/// One unpadded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    pub src_lang: Lang,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_lang: Lang,
    /// Position of the first decoder token (non-zero for span targets).
    pub tgt_offset: usize,
}

impl Example {
    /// Sequence-to-sequence example: the decoder reads `bos, tgt` and
    /// predicts `tgt, EOS`.
    pub fn seq2seq(src: Vec<usize>, src_lang: Lang, tgt: &[usize], tgt_lang: Lang, bos: usize) -> Self {
        let mut tgt_in = Vec::with_capacity(tgt.len() + 1);
        tgt_in.push(bos);
        tgt_in.extend_from_slice(tgt);
        let mut tgt_out = tgt.to_vec();
        tgt_out.push(EOS);
        Self {
            src,
            src_lang,
            tgt_in,
            tgt_out,
            tgt_lang,
            tgt_offset: 0,
        }
    }
}

/// Right-padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src_ids: Vec<Vec<usize>>,
    pub src_lengths: Vec<usize>,
    pub tgt_in_ids: Vec<Vec<usize>>,
    pub tgt_out_ids: Vec<Vec<usize>>,
    pub tgt_lengths: Vec<usize>,
    pub src_langs: Vec<Lang>,
    pub tgt_langs: Vec<Lang>,
    pub tgt_offsets: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let s_max = examples.iter().map(|e| e.src.len()).max().unwrap_or(0);
        let t_max = examples.iter().map(|e| e.tgt_in.len()).max().unwrap_or(0);
        let pad = |v: &[usize], n: usize| {
            let mut p = v.to_vec();
            p.resize(n, PAD);
            p
        };
        let mut b = Batch {
            src_ids: Vec::new(),
            src_lengths: Vec::new(),
            tgt_in_ids: Vec::new(),
            tgt_out_ids: Vec::new(),
            tgt_lengths: Vec::new(),
            src_langs: Vec::new(),
            tgt_langs: Vec::new(),
            tgt_offsets: Vec::new(),
        };
        for e in examples {
            if e.src.is_empty() || e.tgt_in.is_empty() {
                return Err(Error::invalid("example with an empty side"));
            }
            if e.tgt_in.len() != e.tgt_out.len() || e.tgt_in[1..] != e.tgt_out[..e.tgt_out.len() - 1] {
                return Err(Error::invalid("tgt_out must be tgt_in shifted left by one"));
            }
            b.src_ids.push(pad(&e.src, s_max));
            b.src_lengths.push(e.src.len());
            b.tgt_in_ids.push(pad(&e.tgt_in, t_max));
            b.tgt_out_ids.push(pad(&e.tgt_out, t_max));
            b.tgt_lengths.push(e.tgt_in.len());
            b.src_langs.push(e.src_lang);
            b.tgt_langs.push(e.tgt_lang);
            b.tgt_offsets.push(e.tgt_offset);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.src_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_ids.is_empty()
    }

    pub fn src(&self, b: usize) -> &[usize] {
        &self.src_ids[b][..self.src_lengths[b]]
    }

    pub fn tgt_in(&self, b: usize) -> &[usize] {
        &self.tgt_in_ids[b][..self.tgt_lengths[b]]
    }

    pub fn tgt_out(&self, b: usize) -> &[usize] {
        &self.tgt_out_ids[b][..self.tgt_lengths[b]]
    }

    pub fn packed_targets(&self) -> Vec<usize> {
        (0..self.len()).flat_map(|b| self.tgt_out(b).to_vec()).collect()
    }

    pub fn num_target_tokens(&self) -> usize {
        self.tgt_lengths.iter().sum()
    }
}

/// Mean cross-entropy of teacher-forced logits against `tgt_out`, counting
/// only the first `lengths[b]` positions of each row.
pub fn loss(out: &ForwardOutput, tgt_out: &[Vec<usize>], lengths: &[usize]) -> Result<f64> {
    if tgt_out.len() != out.lengths.len() || lengths.len() != out.lengths.len() {
        return Err(Error::DimensionMismatch {
            expected: out.lengths.len(),
            actual: tgt_out.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, row) in tgt_out.iter().enumerate() {
        if lengths[b] > out.lengths[b] || lengths[b] > row.len() {
            return Err(Error::invalid("target length exceeds logits"));
        }
        for (t, &target) in row.iter().enumerate().take(lengths[b]) {
            if target >= out.vocab {
                return Err(Error::TokenOutOfRange {
                    index: target,
                    size: out.vocab,
                });
            }
            total -= log_softmax(out.at(b, t))[target];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("loss over zero target tokens"));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::init(&config, vocab_size, &mut rng);
        Ok(Self { config, params })
    }

    pub fn transformer(&self) -> Transformer<'_> {
        Transformer::new(&self.config, &self.params)
    }

    pub fn embed_input(&self, ids: &[usize], side: Side, lang: Lang) -> Result<Vec<f64>> {
        self.transformer().embed(ids, side, lang, 0)
    }

    /// Teacher-forced logits. Dropout is applied only when `rng` is given.
    pub fn forward(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardOutput> {
        self.transformer().forward(batch, rng)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let out = self.forward(batch, None)?;
        loss(&out, &batch.tgt_out_ids, &batch.tgt_lengths)
    }

    pub fn backward(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Parameters)> {
        self.transformer().backward(batch, rng)
    }

    pub fn translate(
        &self,
        src: &TokenSequence,
        target: Lang,
        strategy: Strategy,
        max_len: usize,
    ) -> Result<TokenSequence> {
        let out = self.translate_batch(&[&src.ids], &[target], strategy, max_len)?;
        Ok(TokenSequence {
            ids: out.into_iter().next().unwrap_or_default(),
            language: target,
        })
    }

    /// Decodes every source (truncated to the model's maximum length) and
    /// returns the generated ids without the terminating EOS.
    pub fn translate_batch(
        &self,
        sources: &[&[usize]],
        targets: &[Lang],
        strategy: Strategy,
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        decode::generate(self, sources, targets, strategy, max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::paper().validate().is_ok());
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn batch_pads_and_checks_shift() {
        let a = Example::seq2seq(vec![7, 8, 9], Lang::Src, &[10, 11], Lang::Tgt, BOS);
        let b = Example::seq2seq(vec![7], Lang::Tgt, &[12], Lang::Src, BOS);
        let batch = Batch::from_examples(&[a.clone(), b]).unwrap();
        assert_eq!(batch.src_ids[1], vec![7, PAD, PAD]);
        assert_eq!(batch.tgt_out_ids[0], vec![10, 11, EOS]);
        assert_eq!(batch.tgt_out_ids[1], vec![12, EOS, PAD]);
        let mut bad = a;
        bad.tgt_out[0] = 99;
        assert!(Batch::from_examples(&[bad]).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [EmbeddingMode::Random, EmbeddingMode::NonStatic, EmbeddingMode::Static] {
            assert_eq!(m.to_string().parse::<EmbeddingMode>().unwrap(), m);
        }
    }
}
