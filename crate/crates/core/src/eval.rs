//! BLEU, teacher-forced perplexity/accuracy, word-translation tables and
//! metric curves.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embeddings::{Direction, RetrievalReport};
use crate::error::{Error, Result};
use crate::model::{log_softmax, Batch, Example, Model};

pub const MAX_ORDER: usize = 4;

/// Matched and total n-gram counts per order plus the two lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub cand_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn of(candidate: &str, reference: &str) -> Self {
        let c: Vec<&str> = candidate.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let mut s = Self {
            cand_len: c.len() as u64,
            ref_len: r.len() as u64,
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(&r, n);
            for (g, k) in ngram_counts(&c, n) {
                s.matches[n - 1] += k.min(rc.get(&g).copied().unwrap_or(0));
                s.totals[n - 1] += k;
            }
        }
        s
    }

    pub fn add(&mut self, o: &Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        (1.0 - self.ref_len as f64 / self.cand_len as f64).min(0.0).exp()
    }

    /// Unsmoothed BLEU-4 in [0, 100]; any zero precision gives 0.
    pub fn score(&self) -> f64 {
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
    }
}

fn ngram_counts<'b>(toks: &'b [&str], n: usize) -> HashMap<&'b [&'b str], u64> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level whitespace BLEU-4 with brevity penalty
/// `exp(min(0, 1 - ref_len / cand_len))`.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(candidates: &[S], references: &[T]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::DimensionMismatch {
            expected: references.len(),
            actual: candidates.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::invalid("BLEU over an empty corpus"));
    }
    let mut total = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        total.add(&BleuStats::of(c.as_ref(), r.as_ref()));
    }
    Ok(total.score())
}

/// Unigram precision used when nothing matches, as a fraction of one
/// count (display-only smoothing).
pub const SENTENCE_UNIGRAM_EPSILON: f64 = 0.1;

/// Display-only sentence BLEU: add-one smoothing on orders 2-4 and an
/// epsilon count for a zero unigram match.
pub fn sentence_bleu(candidate: &str, reference: &str) -> f64 {
    let s = BleuStats::of(candidate, reference);
    if s.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let (m, t) = (s.matches[n] as f64, s.totals[n] as f64);
        let p = if n == 0 {
            if m == 0.0 {
                SENTENCE_UNIGRAM_EPSILON / t
            } else {
                m / t
            }
        } else {
            (m + 1.0) / (t + 1.0)
        };
        log_sum += p.ln();
    }
    100.0 * s.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
}

/// Teacher-forced totals over a set of examples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TeacherForced {
    pub cross_entropy: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl TeacherForced {
    pub fn perplexity(&self) -> f64 {
        (self.cross_entropy / self.tokens as f64).exp()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.cross_entropy / self.tokens as f64
    }
}

pub fn teacher_forced(model: &Model, examples: &[Example], batch_size: usize) -> Result<TeacherForced> {
    if examples.is_empty() {
        return Err(Error::invalid("evaluation over an empty set"));
    }
    let mut acc = TeacherForced::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(chunk)?;
        let out = model.forward(&batch, None)?;
        for b in 0..batch.len() {
            for (t, &target) in batch.tgt_out(b).iter().enumerate() {
                let row = out.at(b, t);
                acc.cross_entropy -= log_softmax(row)[target];
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                acc.correct += usize::from(best == target);
                acc.tokens += 1;
            }
        }
    }
    Ok(acc)
}

/// `exp(total cross-entropy / token count)` under teacher forcing.
pub fn perplexity(model: &Model, examples: &[Example], batch_size: usize) -> Result<f64> {
    Ok(teacher_forced(model, examples, batch_size)?.perplexity())
}

pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// First 1-based epoch whose value reaches `fraction` of the last value.
pub fn epochs_to_fraction(values: &[f64], fraction: f64) -> Option<usize> {
    let last = *values.last()?;
    values.iter().position(|&v| v >= fraction * last).map(|i| i + 1)
}

/// Fixed-width NN/CSLS table with one column pair per direction.
pub fn word_translation_table(reports: &[RetrievalReport]) -> String {
    let label = |d: Direction| match d {
        Direction::SrcToTgt => "src->tgt",
        Direction::TgtToSrc => "tgt->src",
    };
    let mut head = format!("{:<10}", "");
    let mut sub = format!("{:<10}", "method");
    let mut nn = format!("{:<10}", "P@1");
    for r in reports {
        head.push_str(&format!("{:^20}", label(r.direction)));
        sub.push_str(&format!("{:>10}{:>10}", "NN", "CSLS"));
        nn.push_str(&format!("{:>10.2}{:>10.2}", 100.0 * r.p_at_1_nn, 100.0 * r.p_at_1_csls));
    }
    let mut out = format!("{}\n{}\n{}\n", head.trim_end(), sub, nn);
    for r in reports {
        out.push_str(&format!(
            "{}: {} queries, {} gold pairs skipped\n",
            label(r.direction),
            r.dictionary_size,
            r.skipped
        ));
    }
    out
}

pub fn word_translation_json(reports: &[RetrievalReport]) -> Result<String> {
    let rounded: Vec<RetrievalReport> = reports
        .iter()
        .map(|r| RetrievalReport {
            p_at_1_nn: round6(r.p_at_1_nn),
            p_at_1_csls: round6(r.p_at_1_csls),
            ..r.clone()
        })
        .collect();
    Ok(serde_json::to_string_pretty(&rounded)?)
}

/// Per-run metric series keyed by `(epoch, name)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub run_id: String,
    pub series: Vec<(usize, String, f64)>,
}

impl MetricLog {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            series: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {name} at epoch {epoch}")));
        }
        if self.series.iter().any(|(e, n, _)| *e == epoch && n == name) {
            return Err(Error::invalid(format!("metric {name} already logged for epoch {epoch}")));
        }
        self.series.push((epoch, name.to_string(), value));
        Ok(())
    }

    pub fn values(&self, name: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .series
            .iter()
            .filter(|(_, n, _)| n == name)
            .map(|(e, _, x)| (*e, *x))
            .collect();
        v.sort_by_key(|p| p.0);
        v
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.values(name).last().map(|p| p.1)
    }

    pub fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = self.series.iter().map(|s| s.1.clone()).collect();
        n.sort();
        n.dedup();
        n
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

/// Writes `<name>.csv` (`epoch,value`, ascending epochs) per metric into
/// `dir` and returns the written paths.
pub fn emit_curves(log: &MetricLog, dir: &Path) -> Result<Vec<PathBuf>> {
    if log.is_empty() {
        return Err(Error::invalid("no metrics to emit"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_name: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for name in log.names() {
        by_name.insert(name.clone(), log.values(&name));
    }
    let mut paths = Vec::new();
    for (name, rows) in by_name {
        let file: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let path = dir.join(format!("{file}.csv"));
        let mut text = String::from("epoch,value\n");
        for (e, v) in rows {
            text.push_str(&format!("{e},{v:.6}\n"));
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_100() {
        let c = ["a b c d e", "the cat sat on the mat"];
        assert_eq!(corpus_bleu(&c, &c).unwrap(), 100.0);
        assert_eq!(sentence_bleu(c[1], c[1]), 100.0);
    }

    #[test]
    fn clipping_case() {
        let s = BleuStats::of("the the the the", "the cat");
        assert_eq!((s.matches[0], s.totals[0]), (1, 4));
        assert_eq!(s.matches[1], 0);
        assert_eq!(corpus_bleu(&["the the the the"], &["the cat"]).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
        assert!(corpus_bleu::<&str, &str>(&[], &[]).is_err());
    }

    #[test]
    fn duplicate_metric_rejected() {
        let mut log = MetricLog::new("r");
        log.push(1, "bleu", 3.0).unwrap();
        assert!(log.push(1, "bleu", 4.0).is_err());
        assert!(log.push(2, "bleu", f64::NAN).is_err());
    }
}
