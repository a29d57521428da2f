use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::bpe::detokenize;
use super::{Lang, TokenSequence};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const MASK: usize = 4;
pub const LANG_SRC: usize = 5;
pub const LANG_TGT: usize = 6;
pub const NUM_SPECIALS: usize = 7;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = [
    "<pad>",
    "<unk>",
    "<s>",
    "</s>",
    "<mask>",
    "<lang:src>",
    "<lang:tgt>",
];

/// Language-specific start token used when language codes are disabled.
pub fn lang_bos(lang: Lang) -> usize {
    match lang {
        Lang::Src => LANG_SRC,
        Lang::Tgt => LANG_TGT,
    }
}

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}

/// Token/id bijection shared by both languages. The first seven ids are the
/// reserved specials.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from segmented sentences: descending frequency,
    /// then lexicographic.
    pub fn build<I, S>(sentences: I) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for sent in sentences {
            for tok in sent {
                let tok = tok.as_ref();
                match counts.get_mut(tok) {
                    Some(c) => *c += 1,
                    None => {
                        counts.insert(tok.to_string(), 1);
                    }
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::NoTrainingText);
        }
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; NUM_SPECIALS];
        for (t, f) in entries {
            tokens.push(t);
            freqs.push(f);
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            freqs,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.freqs.get(id).copied().unwrap_or(0)
    }

    pub fn encode<S: AsRef<str>>(&self, subwords: &[S], language: Lang) -> TokenSequence {
        let ids = subwords
            .iter()
            .map(|s| self.id(s.as_ref()).unwrap_or(UNK))
            .collect();
        TokenSequence { ids, language }
    }

    /// Drops specials and reverses BPE segmentation.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut pieces = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                index: id,
                size: self.len(),
            })?;
            if !is_special(id) {
                pieces.push(tok);
            }
        }
        Ok(detokenize(&pieces))
    }

    /// Stable content hash, stored in checkpoints to catch vocabulary drift.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (t, f) in self.tokens.iter().zip(&self.freqs) {
            out.push_str(t);
            out.push('\t');
            out.push_str(&f.to_string());
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, freq) = line.rsplit_once('\t').ok_or_else(|| {
                Error::format("vocabulary", format!("line {}: expected token<TAB>frequency", i + 1))
            })?;
            let freq: u64 = freq
                .parse()
                .map_err(|_| Error::format("vocabulary", format!("line {}: bad frequency", i + 1)))?;
            if i < NUM_SPECIALS {
                if tok != SPECIAL_TOKENS[i] {
                    return Err(Error::format(
                        "vocabulary",
                        format!("line {}: expected special {:?}", i + 1, SPECIAL_TOKENS[i]),
                    ));
                }
                continue;
            }
            entries.push((tok.to_string(), freq));
        }
        if entries.len() + NUM_SPECIALS != text.lines().count() {
            return Err(Error::format("vocabulary", "missing specials"));
        }
        let vocab = Self::from_entries(entries);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::format("vocabulary", "duplicate token"));
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn specials_then_frequency_order() {
        let v = Vocabulary::build([split("a a b")]).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIALS..], &["a".to_string(), "b".to_string()]);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.token(EOS), Some("</s>"));
    }

    #[test]
    fn ties_match_brute_force_sort() {
        let sents = [split("d c b a c d e e f"), split("f g g a")];
        let v = Vocabulary::build(sents.clone()).unwrap();
        let mut counts: Vec<(String, u64)> = Vec::new();
        for s in &sents {
            for t in s {
                match counts.iter_mut().find(|(k, _)| k == t) {
                    Some(e) => e.1 += 1,
                    None => counts.push((t.to_string(), 1)),
                }
            }
        }
        // selection sort by (-freq, token)
        let mut expected = Vec::new();
        while !counts.is_empty() {
            let mut best = 0;
            for i in 1..counts.len() {
                let (bt, bf) = &counts[best];
                let (t, f) = &counts[i];
                if f > bf || (f == bf && t < bt) {
                    best = i;
                }
            }
            expected.push(counts.remove(best).0);
        }
        assert_eq!(&v.tokens()[NUM_SPECIALS..], &expected[..]);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build([split("he</w> llo</w> wor ld</w>")]).unwrap();
        let seq = v.encode(&split("he</w> wor ld</w> zzz"), Lang::Src);
        assert_eq!(*seq.ids.last().unwrap(), UNK);
        let seq = v.encode(&split("he</w> wor ld</w>"), Lang::Src);
        assert_eq!(v.decode(&seq.ids).unwrap(), "he world");
        let mut with_eos = seq.ids.clone();
        with_eos.push(EOS);
        assert_eq!(v.decode(&with_eos).unwrap(), "he world");
        assert!(matches!(
            v.decode(&[999]),
            Err(Error::TokenOutOfRange { index: 999, .. })
        ));
    }

    #[test]
    fn decode_strips_trailing_eos() {
        let v = Vocabulary::build([split("a</w> b</w>")]).unwrap();
        assert_eq!(v.decode(&[NUM_SPECIALS + 1, EOS]).unwrap(), "b");
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::build([split("x y y z z z")]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<pad>\t0\n"));
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert_eq!(Vocabulary::load(&p).unwrap().hash(), v.hash());
    }
}
