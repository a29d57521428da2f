//! Parameter tree of the encoder-decoder. Gradients reuse the same type.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Visits every tensor with its dotted path, in a fixed order.
pub trait ParamTree {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! param_tree {
    ($ty:ty { $($field:ident),* }) => {
        impl ParamTree for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
                $( self.$field.visit(&join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
                $( self.$field.visit_mut(&join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

impl ParamTree for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(prefix.to_string(), self)
    }
}

impl<T: ParamTree> ParamTree for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, t) in self.iter().enumerate() {
            t.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            t.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: ParamTree> ParamTree for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(t) = self {
            t.visit(prefix, f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(t) = self {
            t.visit_mut(prefix, f);
        }
    }
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / (input + output) as f64).sqrt();
        Self {
            w: Tensor::normal(&[input, output], std, rng),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    fn init(dim: usize) -> Self {
        Self {
            gain: Tensor::filled(&[dim], 1.0),
            bias: Tensor::zeros(&[dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::init(dim, dim, rng),
            k: Linear::init(dim, dim, rng),
            v: Linear::init(dim, dim, rng),
            o: Linear::init(dim, dim, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub self_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// `V x d`, shared by encoder input, decoder input and (when tied) the
    /// output projection.
    pub embedding: Tensor,
    /// `2 x d` decoder-side language codes, indexed by `Lang::index`.
    pub lang_codes: Tensor,
    /// Separate `V x d` output projection when untied.
    pub output: Option<Tensor>,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
}

param_tree!(Linear { w, b });
param_tree!(LayerNorm { gain, bias });
param_tree!(Attention { q, k, v, o });
param_tree!(FeedForward { up, down });
param_tree!(EncoderLayer { ln_attn, self_attn, ln_ffn, ffn });
param_tree!(DecoderLayer { ln_self, self_attn, ln_cross, cross_attn, ln_ffn, ffn });
param_tree!(Parameters { embedding, lang_codes, output, encoder, enc_norm, decoder, dec_norm });

impl Parameters {
    /// Random initialization; the embedding uses `N(0, dim^-1/2)`.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, vocab_size: usize, rng: &mut R) -> Self {
        let d = config.dim;
        let emb_std = (d as f64).powf(-0.5);
        let embedding = Tensor::normal(&[vocab_size, d], emb_std, rng);
        let lang_codes = Tensor::normal(&[2, d], emb_std, rng);
        let output = (!config.tie_output).then(|| embedding.clone());
        let ffn = |rng: &mut R| FeedForward {
            up: Linear::init(d, config.ffn_dim, rng),
            down: Linear::init(config.ffn_dim, d, rng),
        };
        let encoder = (0..config.layers)
            .map(|_| EncoderLayer {
                ln_attn: LayerNorm::init(d),
                self_attn: Attention::init(d, rng),
                ln_ffn: LayerNorm::init(d),
                ffn: ffn(rng),
            })
            .collect();
        let decoder = (0..config.layers)
            .map(|_| DecoderLayer {
                ln_self: LayerNorm::init(d),
                self_attn: Attention::init(d, rng),
                ln_cross: LayerNorm::init(d),
                cross_attn: Attention::init(d, rng),
                ln_ffn: LayerNorm::init(d),
                ffn: ffn(rng),
            })
            .collect();
        Self {
            embedding,
            lang_codes,
            output,
            encoder,
            enc_norm: LayerNorm::init(d),
            decoder,
            dec_norm: LayerNorm::init(d),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.embedding.shape[1]
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sq_norm()).sum()
    }

    /// Paths and shapes, for compatibility checks.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.named().into_iter().map(|(n, t)| (n, t.shape.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_stable_and_unique() {
        let cfg = ModelConfig::tiny();
        let p = Parameters::init(&cfg, 20, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embedding");
        assert_eq!(names[1], "lang_codes");
        assert!(names.contains(&"encoder.1.self_attn.q.w".to_string()));
        assert!(names.contains(&"decoder.0.cross_attn.o.b".to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let z = p.zeros_like();
        assert_eq!(z.layout(), p.layout());
        assert_eq!(z.sq_norm(), 0.0);
    }
}
