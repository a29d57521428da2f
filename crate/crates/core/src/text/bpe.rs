//! Joint byte-pair encoding.
//!
//! Word-final symbols carry the suffix sentinel [`END_OF_WORD`]; the word
//! `ab` starts as `["a", "b</w>"]`. Merges are learned greedily by pair
//! frequency with lexicographic tie-breaking, and applied by rank (earliest
//! learned rule first), which reproduces the training-time segmentation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";

/// Desk-scale merge budget.
pub const DESK_MERGES: usize = 500;
/// Merge budget used for the full-size corpora.
pub const PAPER_MERGES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    merge_count: usize,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>, merge_count: usize) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), i).is_some() {
                return Err(Error::format(
                    "bpe model",
                    format!("duplicate merge {:?} {:?}", pair.0, pair.1),
                ));
            }
        }
        Ok(Self {
            merges,
            merge_count,
            ranks,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// The requested budget; `merges().len()` may be smaller when the
    /// corpus ran out of pairs.
    pub fn merge_count(&self) -> usize {
        self.merge_count
    }

    /// Segments one word (no whitespace) into subwords.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = initial_symbols(word);
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            symbols = merge_pair(&symbols, left, right);
        }
        symbols
    }

    /// Segments a whitespace-tokenized line.
    pub fn apply(&self, line: &str) -> Vec<String> {
        line.split_whitespace()
            .flat_map(|w| self.segment_word(w))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("bpe-v1 {}\n", self.merge_count);
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push('\t');
            out.push_str(r);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("bpe model", "empty file"))?;
        let merge_count = header
            .strip_prefix("bpe-v1 ")
            .and_then(|n| n.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::format("bpe model", format!("bad header {header:?}")))?;
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let (l, r) = line.split_once('\t').ok_or_else(|| {
                Error::format("bpe model", format!("line {}: expected left<TAB>right", i + 2))
            })?;
            merges.push((l.to_string(), r.to_string()));
        }
        Self::new(merges, merge_count)
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Reverses segmentation: concatenates subwords and turns each end-of-word
/// marker into a word boundary.
pub fn detokenize<S: AsRef<str>>(subwords: &[S]) -> String {
    let mut out = String::new();
    for sw in subwords {
        let sw = sw.as_ref();
        match sw.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                out.push_str(stem);
                out.push(' ');
            }
            None => out.push_str(sw),
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}

type Pair = (u32, u32);

/// Learns `merge_count` merges (or fewer, if pairs run out) jointly over
/// all lines of all corpora.
pub fn learn_bpe<S: AsRef<str>>(corpora: &[&[S]], merge_count: usize) -> Result<BpeModel> {
    if merge_count == 0 {
        return Err(Error::invalid("merge_count must be at least 1"));
    }
    let mut word_freq: BTreeMap<&str, u64> = BTreeMap::new();
    for corpus in corpora {
        for line in corpus.iter() {
            for w in line.as_ref().split_whitespace() {
                *word_freq.entry(w).or_default() += 1;
            }
        }
    }
    if word_freq.is_empty() {
        return Err(Error::NoTrainingText);
    }

    // Symbols are interned so pair bookkeeping works on integers.
    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
        if let Some(&id) = symbol_ids.get(&s) {
            return id;
        }
        let id = symbols.len() as u32;
        symbol_ids.insert(s.clone(), id);
        symbols.push(s);
        id
    };

    let mut words: Vec<Vec<u32>> = Vec::with_capacity(word_freq.len());
    let mut freqs: Vec<u64> = Vec::with_capacity(word_freq.len());
    for (w, &f) in &word_freq {
        let ids = initial_symbols(w)
            .into_iter()
            .map(|s| intern(s, &mut symbols))
            .collect();
        words.push(ids);
        freqs.push(f);
    }

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut pair_words: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            let pair = (p[0], p[1]);
            *pair_counts.entry(pair).or_default() += freqs[wi] as i64;
            pair_words.entry(pair).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while merges.len() < merge_count {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // smaller (left, right) wins a tie
                    let ka = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                    let kb = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some(pair) = best else { break };

        let left = symbols[pair.0 as usize].clone();
        let right = symbols[pair.1 as usize].clone();
        let merged = intern(format!("{left}{right}"), &mut symbols);
        merges.push((left, right));

        let mut affected: Vec<usize> = pair_words
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        pair_counts.remove(&pair);

        for wi in affected {
            let f = freqs[wi] as i64;
            let old = std::mem::take(&mut words[wi]);
            for p in old.windows(2) {
                let q = (p[0], p[1]);
                if q != pair {
                    if let Some(c) = pair_counts.get_mut(&q) {
                        *c -= f;
                    }
                }
            }
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == pair.0 && old[i + 1] == pair.1 {
                    new.push(merged);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            for p in new.windows(2) {
                let q = (p[0], p[1]);
                *pair_counts.entry(q).or_default() += f;
                pair_words.entry(q).or_default().insert(wi);
            }
            words[wi] = new;
        }
        pair_counts.retain(|_, c| *c > 0);
    }

    BpeModel::new(merges, merge_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_merge_on_aaab() {
        let corpus = lines(&["aaab"; 10]);
        let model = learn_bpe(&[&corpus[..]], 1).unwrap();
        assert_eq!(model.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn zero_merges_is_error() {
        let corpus = lines(&["abc"]);
        assert!(matches!(learn_bpe(&[&corpus[..]], 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_corpus_is_error() {
        let corpus: Vec<String> = lines(&["", "   "]);
        let err = learn_bpe(&[&corpus[..]], 5).unwrap_err();
        assert_eq!(err.to_string(), "no training text");
    }

    #[test]
    fn single_character_words_yield_no_merges() {
        let corpus = lines(&["a b c", "d e"]);
        let model = learn_bpe(&[&corpus[..]], 10).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(model.apply("a b"), vec!["a</w>", "b</w>"]);
    }

    #[test]
    fn apply_trace_aaab() {
        let model = BpeModel::new(vec![("a".into(), "a".into())], 1).unwrap();
        assert_eq!(model.apply("aaab"), vec!["aa", "a", "b</w>"]);
        assert!(model.apply("").is_empty());
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur 5 times: ("a","b</w>") < ("c","d</w>")
        let corpus = lines(&["ab cd"; 5]);
        let model = learn_bpe(&[&corpus[..]], 1).unwrap();
        assert_eq!(model.merges()[0], ("a".to_string(), "b</w>".to_string()));
    }

    #[test]
    fn returns_available_merges_only() {
        let corpus = lines(&["ab"]);
        let model = learn_bpe(&[&corpus[..]], 100).unwrap();
        assert_eq!(model.merges().len(), 1);
        assert_eq!(model.merge_count(), 100);
    }

    #[test]
    fn file_round_trip() {
        let corpus = lines(&["hello world", "hello there"]);
        let model = learn_bpe(&[&corpus[..]], 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bpe.txt");
        model.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("bpe-v1 20\n"));
        assert_eq!(BpeModel::load(&path).unwrap(), model);
    }

    #[test]
    fn duplicate_merge_rejected() {
        assert!(BpeModel::parse("bpe-v1 2\na\tb\na\tb\n").is_err());
        assert!(BpeModel::parse("bpe-v2 2\n").is_err());
    }

    /// Reference learner: recount every pair from scratch after each merge.
    fn learn_naive(corpus: &[String], merge_count: usize) -> Vec<(String, String)> {
        let mut words: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for l in corpus {
            for w in l.split_whitespace() {
                *words.entry(initial_symbols(w)).or_default() += 1;
            }
        }
        let mut merges = Vec::new();
        while merges.len() < merge_count {
            let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (w, f) in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0].clone(), p[1].clone())).or_default() += f;
                }
            }
            // BTreeMap iterates in lexicographic order; keep the first max.
            let mut best: Option<(&(String, String), u64)> = None;
            for (k, &c) in &counts {
                if best.map_or(true, |(_, bc)| c > bc) {
                    best = Some((k, c));
                }
            }
            let Some((pair, _)) = best else { break };
            let pair = pair.clone();
            words = words
                .into_iter()
                .fold(BTreeMap::new(), |mut acc, (w, f)| {
                    *acc.entry(merge_pair(&w, &pair.0, &pair.1)).or_default() += f;
                    acc
                });
            merges.push(pair);
        }
        merges
    }

    #[test]
    fn incremental_learner_matches_naive_recount() {
        let corpus = lines(&[
            "the cat sat on the mat",
            "the rat ate the cat food",
            "a banana and an ananas",
            "mississippi missing misses",
        ]);
        let fast = learn_bpe(&[&corpus[..]], 60).unwrap();
        assert_eq!(fast.merges(), &learn_naive(&corpus, 60)[..]);
    }
}
