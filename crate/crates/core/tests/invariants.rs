use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unmt::embeddings::align::procrustes_pairs;
use unmt::embeddings::{CslsIndex, EmbeddingMatrix};
use unmt::eval::{corpus_bleu, epochs_to_fraction, sentence_bleu};
use unmt::model::{EmbeddingMode, Model, ModelConfig};
use unmt::objectives::{dae_noise, mass_mask, mass_span_len, NoiseConfig};
use unmt::text::vocab::{BOS, MASK};
use unmt::text::{detokenize, learn_bpe};
use unmt::toylang::{generate_toy_pair, oracle_translate, GrammarMap, ToyLangSpec};
use unmt::trainer::{adam_step, clip_global_norm, early_stop, AdamConfig, AdamState};

/// Corpus BLEU computed from scratch: clipped n-gram counts over whole
/// strings, geometric mean of four precisions, brevity penalty.
fn reference_bleu(cands: &[String], refs: &[String]) -> f64 {
    let grams = |words: &[&str], n: usize| -> HashMap<Vec<String>, usize> {
        let mut m = HashMap::new();
        if words.len() >= n {
            for w in words.windows(n) {
                *m.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
            }
        }
        m
    };
    let (mut matched, mut total) = ([0usize; 4], [0usize; 4]);
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in cands.iter().zip(refs) {
        let cw: Vec<&str> = c.split_whitespace().collect();
        let rw: Vec<&str> = r.split_whitespace().collect();
        c_len += cw.len();
        r_len += rw.len();
        for n in 1..=4 {
            let rc = grams(&rw, n);
            for (g, k) in grams(&cw, n) {
                matched[n - 1] += k.min(*rc.get(&g).unwrap_or(&0));
                total[n - 1] += k;
            }
        }
    }
    if matched.iter().any(|&m| m == 0) {
        return 0.0;
    }
    let logp: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    100.0 * bp * logp.exp()
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..12).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bleu_matches_reference_implementation(
        pairs in prop::collection::vec((sentence(), sentence()), 1..6)
    ) {
        let (c, r): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
        let got = corpus_bleu(&c, &r).unwrap();
        let want = reference_bleu(&c, &r);
        prop_assert!((got - want).abs() < 1e-9, "got {got} want {want}");
        prop_assert!((0.0..=100.0).contains(&got));
    }

    #[test]
    fn sentence_bleu_is_bounded(c in sentence(), r in sentence()) {
        let s = sentence_bleu(&c, &r);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
    }

    #[test]
    fn mass_masks_one_contiguous_span(
        seq in prop::collection::vec(7usize..100, 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = mass_mask(&seq, 0.5, &mut rng);
        let len = mass_span_len(seq.len(), 0.5);
        prop_assert_eq!(s.span_len, len);
        let masked: Vec<usize> = (0..seq.len()).filter(|&i| s.encoder_ids[i] == MASK).collect();
        prop_assert_eq!(masked, (s.span_start..s.span_start + len).collect::<Vec<_>>());
        prop_assert_eq!(&s.decoder_out_ids[..], &seq[s.span_start..s.span_start + len]);
        prop_assert_eq!(s.decoder_in_ids[0], BOS);
        prop_assert_eq!(&s.decoder_in_ids[1..], &seq[s.span_start..s.span_start + len - 1]);
        for i in (0..seq.len()).filter(|i| !(s.span_start..s.span_start + len).contains(i)) {
            prop_assert_eq!(s.encoder_ids[i], seq[i]);
        }
    }

    #[test]
    fn dae_noise_keeps_order_within_window(
        len in 1usize..40,
        k in 0usize..5,
        p in 0.0f64..0.9,
        seed in any::<u64>(),
    ) {
        // distinct tokens so every output token can be traced to its origin
        let seq: Vec<usize> = (100..100 + len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NoiseConfig { shuffle_window: k, drop_prob: p, seed: 0 };
        let out = dae_noise(&seq, &cfg, &mut rng);
        prop_assert!(!out.is_empty() && out.len() <= len);
        let mut kept: Vec<usize> = out.clone();
        kept.sort_unstable();
        kept.dedup();
        prop_assert_eq!(kept.len(), out.len());
        for (pos, t) in out.iter().enumerate() {
            // rank among survivors
            let rank = kept.iter().position(|x| x == t).unwrap();
            prop_assert!(pos.abs_diff(rank) <= k, "moved {} places, k={}", pos.abs_diff(rank), k);
        }
    }

    #[test]
    fn bpe_segmentation_round_trips(
        lines in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,5}", 1..8),
        probe in "[a-z]{1,10}( [a-z]{1,10}){0,3}",
        merges in 1usize..60,
    ) {
        let bpe = learn_bpe(&[&lines[..]], merges).unwrap();
        for l in lines.iter().chain(std::iter::once(&probe)) {
            prop_assert_eq!(&detokenize(&bpe.apply(l)), l);
        }
    }

    #[test]
    fn early_stop_fires_after_patience_bad_epochs(
        history in prop::collection::vec(0.0f64..10.0, 1..30),
        patience in 1usize..6,
    ) {
        // oracle: stop at the first epoch that is `patience` epochs past the
        // running best (strict improvement resets)
        let mut best = f64::NEG_INFINITY;
        let mut since = 0;
        let mut want = None;
        for (i, &v) in history.iter().enumerate() {
            if v > best { best = v; since = 0; } else { since += 1; }
            if since >= patience { want = Some(i + 1); break; }
        }
        prop_assert_eq!(early_stop(&history, patience, true), want);
        let neg: Vec<f64> = history.iter().map(|v| -v).collect();
        prop_assert_eq!(early_stop(&neg, patience, false), want);
    }

    #[test]
    fn procrustes_is_orthogonal_and_exact_on_rotations(
        dim in 2usize..6,
        n in 8usize..20,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        // random orthogonal matrix from Gram-Schmidt
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-3 {
                q.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        // z_i = Q x_i
        let z: Vec<f64> = (0..n)
            .flat_map(|i| {
                let xi = &x[i * dim..(i + 1) * dim];
                q.iter().map(|row| row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()).collect::<Vec<_>>()
            })
            .collect();
        let toks = |p: &str| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let xm = EmbeddingMatrix::new(toks("x"), dim, x.clone()).unwrap();
        let zm = EmbeddingMatrix::new(toks("z"), dim, z.clone()).unwrap();
        let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let w = procrustes_pairs(&xm, &zm, &pairs).unwrap();
        prop_assert!(w.orthogonality_defect() < 1e-9);
        for i in 0..n {
            let mapped = w.apply(&x[i * dim..(i + 1) * dim]);
            for (a, b) in mapped.iter().zip(&z[i * dim..(i + 1) * dim]) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn csls_scores_match_brute_force(
        n in 3usize..15,
        m in 3usize..15,
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let dim = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, p: &str| {
            let data: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            EmbeddingMatrix::new((0..rows).map(|i| format!("{p}{i}")).collect(), dim, data).unwrap()
        };
        let (x, z) = (mat(m, "x"), mat(n, "z"));
        let k = k.min(n).min(m);
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            d / (a.iter().map(|v| v * v).sum::<f64>().sqrt() * b.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        let knn_mean = |mut v: Vec<f64>| {
            v.sort_by(|a, b| b.total_cmp(a));
            v[..k].iter().sum::<f64>() / k as f64
        };
        let index = CslsIndex::new(&z, &x, k).unwrap();
        for i in 0..m {
            let q = x.row(i);
            let r_q = knn_mean((0..n).map(|j| cos(q, z.row(j))).collect());
            let got = index.scores(q, &z);
            for j in 0..n {
                let r_z = knn_mean((0..m).map(|l| cos(z.row(j), x.row(l))).collect());
                let want = 2.0 * cos(q, z.row(j)) - r_q - r_z;
                prop_assert!((got[j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn adam_with_constant_gradient_moves_by_lr_per_step() {
    // with g constant, both bias-corrected moments equal g and g^2, so every
    // coordinate moves by lr * g / (|g| + eps) per step
    let model = Model::new(ModelConfig::tiny(), 30, 1).unwrap();
    let mut params = model.params.clone();
    let mut grads = params.zeros_like();
    for (i, (_, t)) in grads.named_mut().into_iter().enumerate() {
        for (j, g) in t.data.iter_mut().enumerate() {
            *g = if (i + j) % 3 == 0 { -0.5 } else { 2.0 };
        }
    }
    let cfg = AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.98, epsilon: 1e-9 };
    let mut state = AdamState::new(&params);
    let steps = 7;
    for _ in 0..steps {
        adam_step(&mut params, &grads, &mut state, &cfg, EmbeddingMode::NonStatic).unwrap();
    }
    for (((_, p), (_, p0)), (_, g)) in params.named().into_iter().zip(model.params.named()).zip(grads.named()) {
        for i in 0..p.data.len() {
            let g = g.data[i];
            let want = p0.data[i] - steps as f64 * cfg.lr * g / (g.abs() + cfg.epsilon);
            assert!((p.data[i] - want).abs() < 1e-12, "{} vs {}", p.data[i], want);
        }
    }
}

#[test]
fn static_mode_freezes_embedding_only() {
    let model = Model::new(ModelConfig::tiny(), 30, 2).unwrap();
    let mut params = model.params.clone();
    let mut grads = params.zeros_like();
    for (_, t) in grads.named_mut() {
        t.data.iter_mut().for_each(|g| *g = 1.0);
    }
    let norm_all = clip_global_norm(&mut grads.clone(), f64::INFINITY, EmbeddingMode::NonStatic);
    let norm_static = clip_global_norm(&mut grads.clone(), f64::INFINITY, EmbeddingMode::Static);
    let emb = grads.named().into_iter().find(|(n, _)| n == "embedding").unwrap().1.data.len();
    assert!((norm_all.powi(2) - norm_static.powi(2) - emb as f64).abs() < 1e-6);

    let cfg = AdamConfig { lr: 1e-2, beta1: 0.9, beta2: 0.98, epsilon: 1e-9 };
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &grads, &mut state, &cfg, EmbeddingMode::Static).unwrap();
    for ((n, p), (_, p0)) in params.named().into_iter().zip(model.params.named()) {
        if n == "embedding" {
            assert_eq!(p.data, p0.data);
        } else {
            assert_ne!(p.data, p0.data, "{n}");
        }
    }
}

#[test]
fn clipping_scales_to_max_norm() {
    let model = Model::new(ModelConfig::tiny(), 30, 3).unwrap();
    let mut grads = model.params.zeros_like();
    for (_, t) in grads.named_mut() {
        t.data.iter_mut().for_each(|g| *g = 3.0);
    }
    let before = clip_global_norm(&mut grads, 5.0, EmbeddingMode::NonStatic);
    assert!(before > 5.0);
    assert!((grads.sq_norm().sqrt() - 5.0).abs() < 1e-9);
}

#[test]
fn epochs_to_fraction_finds_first_crossing() {
    assert_eq!(epochs_to_fraction(&[1.0, 5.0, 9.0, 10.0], 0.8), Some(3));
    assert_eq!(epochs_to_fraction(&[10.0], 0.8), Some(1));
    assert_eq!(epochs_to_fraction(&[], 0.8), None);
}

#[test]
fn oracle_translation_scores_100_on_toy_test_sets() {
    let spec = ToyLangSpec { mono_sentences: 200, test_pairs: 100, valid_pairs: 20, ..ToyLangSpec::default() };
    let pair = generate_toy_pair(&spec).unwrap();
    let (src, tgt): (Vec<String>, Vec<String>) = pair.test.iter().cloned().unzip();
    let fwd: Vec<String> = src.iter().map(|s| oracle_translate(&pair.lexicon, GrammarMap::AToB, s).unwrap()).collect();
    let back: Vec<String> = tgt.iter().map(|s| oracle_translate(&pair.lexicon, GrammarMap::BToA, s).unwrap()).collect();
    assert_eq!(corpus_bleu(&fwd, &tgt).unwrap(), 100.0);
    assert_eq!(corpus_bleu(&back, &src).unwrap(), 100.0);
    // word-for-word substitution without reordering is measurably worse
    let monotone: Vec<String> = src
        .iter()
        .map(|s| {
            s.split_whitespace()
                .map(|w| pair.lexicon.lookup(w, unmt::text::Lang::Src).unwrap().b.clone())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    assert!(corpus_bleu(&monotone, &tgt).unwrap() < 90.0);
}
