use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg;

/// Token vectors, one row per token. Rows are kept in the order given at
/// construction; for trained embeddings that is descending corpus
/// frequency, which the frequency cutoff in dictionary induction relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(tokens: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != tokens.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: tokens.len() * dim,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {:?}", tokens[pos / dim.max(1)])));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate embedding token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            dim,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.id(token).map(|i| self.row(i))
    }

    /// Same tokens, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.tokens.clone(), self.dim, data)
    }

    /// Rows scaled to unit length. Zero rows are reported by token.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = self.data.clone();
        for (i, row) in data.chunks_mut(self.dim).enumerate() {
            let n = linalg::norm(row);
            if n == 0.0 {
                return Err(Error::ZeroVector(self.tokens[i].clone()));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.with_data(data)
    }

    /// Leading `n` rows (the most frequent tokens).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self::new(self.tokens[..n].to_vec(), self.dim, self.data[..n * self.dim].to_vec())
            .expect("prefix of a valid matrix")
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for row in self.data.chunks(self.dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let na = linalg::norm(a);
        let nb = linalg::norm(b);
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            linalg::dot(a, b) / (na * nb)
        }
    }
}
