#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unmt::model::{Batch, Example, Model, ModelConfig};
use unmt::text::Lang;

pub const FD_STEP: f64 = 1e-5;

/// Small mixed-language batch over a vocabulary of `vocab` ids.
pub fn random_batch(vocab: usize, bos: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::new();
    for (i, &(sl, tl)) in [(5, 4), (3, 6), (7, 2)].iter().enumerate() {
        let src: Vec<usize> = (0..sl).map(|_| rng.random_range(7..vocab)).collect();
        let tgt: Vec<usize> = (0..tl).map(|_| rng.random_range(7..vocab)).collect();
        let (a, b) = if i % 2 == 0 { (Lang::Src, Lang::Tgt) } else { (Lang::Tgt, Lang::Src) };
        examples.push(Example::seq2seq(src, a, &tgt, b, bos));
    }
    Batch::from_examples(&examples).unwrap()
}

pub struct GradCheck {
    pub tensors: usize,
    pub probes: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Central-difference check of `backward` on `per_tensor` random
/// coordinates of every tensor.
pub fn finite_difference_check(model: &Model, batch: &Batch, per_tensor: usize, seed: u64) -> GradCheck {
    let (_, grads) = model.backward(batch, None).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.data.clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut out = GradCheck {
        tensors: analytic.len(),
        probes: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for _ in 0..per_tensor {
            let idx = rng.random_range(0..g.len());
            let orig = probe.params.named()[ti].1.data[idx];
            set(&mut probe, ti, idx, orig + FD_STEP);
            let up = probe.loss(batch).unwrap();
            set(&mut probe, ti, idx, orig - FD_STEP);
            let down = probe.loss(batch).unwrap();
            set(&mut probe, ti, idx, orig);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(g[idx], numeric);
            out.probes += 1;
            if err > out.worst {
                out.worst = err;
                out.worst_at = format!("{name}[{idx}] analytic {} numeric {numeric}", g[idx]);
            }
        }
    }
    out
}

fn set(model: &mut Model, tensor: usize, idx: usize, v: f64) {
    let mut named = model.params.named_mut();
    named[tensor].1.data[idx] = v;
}

/// `|a - n| / max(|a| + |n|, 1e-7)`; the floor keeps coordinates whose true
/// gradient is numerically zero from dividing difference noise by zero.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-7)
}

pub fn tiny_model(vocab: usize, seed: u64) -> Model {
    Model::new(ModelConfig::tiny(), vocab, seed).unwrap()
}
