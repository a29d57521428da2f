//! Skip-gram with negative sampling over BPE tokens.
//!
//! Character n-gram features are not used; BPE units already split words.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial rate, decayed linearly to `1e-4` of itself.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 1,
        }
    }
}

impl SkipGramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("skip-gram dim must be positive"));
        }
        if self.window < 1 || self.negatives < 1 {
            return Err(Error::invalid("skip-gram window and negatives must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("skip-gram learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Token list by descending frequency, then lexicographic.
pub fn frequency_ordered_tokens<S: AsRef<str>>(sentences: &[Vec<S>]) -> Vec<String> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut v: Vec<(&str, u64)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(t, _)| t.to_string()).collect()
}

/// Trains vectors for the distinct tokens of `sentences`.
pub fn train_skipgram<S: AsRef<str>>(sentences: &[Vec<S>], config: &SkipGramConfig) -> Result<EmbeddingMatrix> {
    let tokens = frequency_ordered_tokens(sentences);
    train_skipgram_with_tokens(sentences, tokens, config)
}

/// Trains vectors for `tokens`. Tokens that never occur keep their seeded
/// random initialization; corpus tokens missing from `tokens` are skipped.
pub fn train_skipgram_with_tokens<S: AsRef<str>>(
    sentences: &[Vec<S>],
    tokens: Vec<String>,
    config: &SkipGramConfig,
) -> Result<EmbeddingMatrix> {
    config.validate()?;
    if sentences.iter().all(|s| s.is_empty()) || tokens.is_empty() {
        return Err(Error::NoTrainingText);
    }
    let dim = config.dim;
    let index: HashMap<&str, usize> = tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let corpus: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.iter().filter_map(|t| index.get(t.as_ref()).copied()).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 0.5 / dim as f64;
    let mut input: Vec<f64> = (0..tokens.len() * dim)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let mut output = vec![0.0; tokens.len() * dim];

    let mut counts = vec![0u64; tokens.len()];
    for s in &corpus {
        for &t in s {
            counts[t] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 || config.epochs == 0 {
        return EmbeddingMatrix::new(tokens, dim, input);
    }
    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let noise = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;

    let planned = (total * config.epochs as u64) as f64;
    let mut processed = 0u64;
    let mut grad = vec![0.0; dim];
    for _epoch in 0..config.epochs {
        for sent in &corpus {
            for (i, &center) in sent.iter().enumerate() {
                let lr = config.learning_rate * (1.0 - processed as f64 / planned).max(1e-4);
                processed += 1;
                let b = rng.random_range(1..=config.window);
                let lo = i.saturating_sub(b);
                let hi = (i + b).min(sent.len() - 1);
                for (j, &ctx) in sent.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let inp = &input[center * dim..(center + 1) * dim];
                    sgns_update(inp, &mut output, ctx, 1.0, lr, dim, &mut grad);
                    for _ in 0..config.negatives {
                        let neg = noise.sample(&mut rng);
                        if neg == ctx {
                            continue;
                        }
                        sgns_update(inp, &mut output, neg, 0.0, lr, dim, &mut grad);
                    }
                    for (x, g) in input[center * dim..(center + 1) * dim].iter_mut().zip(&grad) {
                        *x += g;
                    }
                }
            }
        }
    }
    EmbeddingMatrix::new(tokens, dim, input)
}

fn sgns_update(inp: &[f64], output: &mut [f64], target: usize, label: f64, lr: f64, dim: usize, grad: &mut [f64]) {
    let out = &mut output[target * dim..(target + 1) * dim];
    let score: f64 = inp.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
    let g = lr * (label - sigmoid(score));
    for k in 0..dim {
        grad[k] += g * out[k];
        out[k] += g * inp[k];
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize) -> SkipGramConfig {
        SkipGramConfig {
            dim: 16,
            window: 2,
            negatives: 5,
            epochs,
            learning_rate: 0.05,
            seed: 7,
        }
    }

    fn distributional_corpus() -> Vec<Vec<String>> {
        // x and y share contexts a/b; z lives with c/d
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..2000)
            .map(|_| {
                let k = rng.random_range(0..3);
                let s: &[&str] = match k {
                    0 => &["a", "x", "y", "b"],
                    1 => &["b", "y", "x", "a"],
                    _ => &["c", "z", "d", "c"],
                };
                s.iter().map(|t| t.to_string()).collect()
            })
            .collect()
    }

    #[test]
    fn co_occurring_tokens_end_up_closer() {
        let e = train_skipgram(&distributional_corpus(), &cfg(5)).unwrap();
        let cos = |a: &str, b: &str| EmbeddingMatrix::cosine(e.vector(a).unwrap(), e.vector(b).unwrap());
        assert!(cos("x", "y") > cos("x", "z"), "{} vs {}", cos("x", "y"), cos("x", "z"));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = distributional_corpus();
        let e0 = train_skipgram(&corpus, &cfg(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bound = 0.5 / 16.0;
        let expected: Vec<f64> = (0..e0.len() * 16).map(|_| rng.random_range(-bound..bound)).collect();
        assert_eq!(e0.data(), &expected[..]);
    }

    #[test]
    fn deterministic_given_seed() {
        let corpus = distributional_corpus();
        let a = train_skipgram(&corpus, &cfg(2)).unwrap();
        let b = train_skipgram(&corpus, &cfg(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn absent_token_keeps_initialization() {
        let corpus = distributional_corpus();
        let mut tokens = frequency_ordered_tokens(&corpus);
        tokens.push("never".into());
        let init = train_skipgram_with_tokens(&corpus, tokens.clone(), &cfg(0)).unwrap();
        let trained = train_skipgram_with_tokens(&corpus, tokens, &cfg(3)).unwrap();
        assert_eq!(init.vector("never"), trained.vector("never"));
        assert_ne!(init.vector("x"), trained.vector("x"));
    }

    #[test]
    fn rejects_bad_config() {
        let corpus = distributional_corpus();
        let mut c = cfg(1);
        c.window = 0;
        assert!(train_skipgram(&corpus, &c).is_err());
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(train_skipgram(&empty, &cfg(1)).is_err());
    }
}
