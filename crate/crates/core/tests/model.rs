mod common;

use common::{finite_difference_check, random_batch, tiny_model};
use proptest::prelude::*;
use unmt::model::{loss, Batch, Example, ForwardOutput, Model, ModelConfig, Side, Strategy};
use unmt::text::vocab::{is_special, BOS, EOS, MASK, PAD};
use unmt::text::{Lang, TokenSequence};

#[test]
fn gradients_match_finite_differences() {
    let model = tiny_model(50, 11);
    let batch = random_batch(50, BOS, 3);
    let r = finite_difference_check(&model, &batch, 20, 7);
    assert!(r.worst <= 1e-3, "worst relative error {} at {}", r.worst, r.worst_at);
}

#[test]
fn gradients_match_untied_without_lang_codes() {
    let cfg = ModelConfig {
        tie_output: false,
        use_decoder_lang_code: false,
        layers: 1,
        heads: 1,
        ..ModelConfig::tiny()
    };
    let model = Model::new(cfg, 40, 2).unwrap();
    let batch = random_batch(40, 5, 9);
    let r = finite_difference_check(&model, &batch, 10, 1);
    assert!(r.worst <= 1e-3, "worst relative error {} at {}", r.worst, r.worst_at);
}

#[test]
fn gradient_shapes_mirror_parameters() {
    let model = tiny_model(50, 1);
    let (_, g) = model.backward(&random_batch(50, BOS, 1), None).unwrap();
    assert_eq!(g.layout(), model.params.layout());
    assert!(g.all_finite());
}

#[test]
fn unused_language_code_gets_zero_gradient() {
    let cfg = ModelConfig {
        use_decoder_lang_code: false,
        ..ModelConfig::tiny()
    };
    let model = Model::new(cfg, 50, 4).unwrap();
    let (_, g) = model.backward(&random_batch(50, 5, 2), None).unwrap();
    assert!(g.lang_codes.data.iter().all(|&v| v == 0.0));
    assert!(g.embedding.sq_norm() > 0.0);
}

#[test]
fn encoder_input_ignores_language() {
    let model = tiny_model(30, 1);
    let ids = [7, 8, 9];
    let a = model.embed_input(&ids, Side::Encoder, Lang::Src).unwrap();
    let b = model.embed_input(&ids, Side::Encoder, Lang::Tgt).unwrap();
    assert_eq!(a, b);
    let c = model.embed_input(&ids, Side::Decoder, Lang::Src).unwrap();
    let d = model.embed_input(&ids, Side::Decoder, Lang::Tgt).unwrap();
    assert_ne!(c, d);
}

#[test]
fn zero_embedding_row_yields_positional_encoding() {
    let mut model = tiny_model(30, 1);
    let d = model.config.dim;
    model.params.embedding.data[PAD * d..(PAD + 1) * d].fill(0.0);
    let x = model.embed_input(&[PAD], Side::Encoder, Lang::Src).unwrap();
    let expect: Vec<f64> = (0..d).map(|c| if c % 2 == 0 { 0.0 } else { 1.0 }).collect();
    assert_eq!(x, expect);
}

#[test]
fn overlong_input_is_rejected() {
    let model = tiny_model(30, 1);
    let ids = vec![7; model.config.max_len + 1];
    assert!(model.embed_input(&ids, Side::Encoder, Lang::Src).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let model = tiny_model(50, 3);
    let out = model.forward(&random_batch(50, BOS, 5), None).unwrap();
    for row in out.logits.chunks(out.vocab) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let cfg = ModelConfig {
        tie_output: false,
        ..ModelConfig::tiny()
    };
    let mut model = Model::new(cfg, 37, 1).unwrap();
    model.params.output.as_mut().unwrap().data.fill(0.0);
    let l = model.loss(&random_batch(37, BOS, 1)).unwrap();
    assert!((l - (37f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_logits_drive_loss_to_zero() {
    let targets = vec![vec![3usize, 1]];
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let mut logits = vec![0.0; 8];
        logits[3] = margin;
        logits[4 + 1] = margin;
        let out = ForwardOutput {
            logits,
            vocab: 4,
            offsets: vec![0],
            lengths: vec![2],
        };
        let l = loss(&out, &targets, &[2]).unwrap();
        assert!(l < last);
        last = l;
    }
    assert!(last < 1e-20);
}

#[test]
fn loss_of_zero_tokens_is_an_error() {
    let out = ForwardOutput {
        logits: vec![0.0; 4],
        vocab: 4,
        offsets: vec![0],
        lengths: vec![1],
    };
    assert!(loss(&out, &[vec![PAD]], &[0]).is_err());
}

#[test]
fn duplicated_sentence_has_same_loss() {
    let model = tiny_model(40, 8);
    let ex = Example::seq2seq(vec![9, 10, 11], Lang::Src, &[12, 13], Lang::Tgt, BOS);
    let one = model.loss(&Batch::from_examples(&[ex.clone()]).unwrap()).unwrap();
    let two = model.loss(&Batch::from_examples(&[ex.clone(), ex]).unwrap()).unwrap();
    assert!((one - two).abs() < 1e-12);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let a = tiny_model(50, 21).forward(&random_batch(50, BOS, 2), None).unwrap();
    let b = tiny_model(50, 21).forward(&random_batch(50, BOS, 2), None).unwrap();
    assert_eq!(
        a.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn tied_embedding_row_feeds_input_and_output() {
    let model = tiny_model(30, 3);
    let ex = Example::seq2seq(vec![9, 10], Lang::Src, &[11], Lang::Tgt, BOS);
    let batch = Batch::from_examples(&[ex]).unwrap();
    let base = model.forward(&batch, None).unwrap();
    let mut bumped = model.clone();
    let d = model.config.dim;
    let r = 20;
    bumped.params.embedding.data[r * d] += 0.5;
    let out = bumped.forward(&batch, None).unwrap();
    // token 20 never appears in the input, so only its logit column moves
    for t in 0..2 {
        for (v, (a, b)) in base.at(0, t).iter().zip(out.at(0, t)).enumerate() {
            if v == r {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }
    let mut bumped = model.clone();
    bumped.params.embedding.data[9 * d] += 0.5;
    let a = model.embed_input(&[9], Side::Encoder, Lang::Src).unwrap();
    let b = bumped.embed_input(&[9], Side::Encoder, Lang::Src).unwrap();
    assert_ne!(a, b);
}

fn config_with(layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        ..ModelConfig::tiny()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn source_padding_never_leaks(
        layers in 1usize..=2,
        heads in 1usize..=2,
        short in prop::collection::vec(7usize..30, 1..5),
        long in prop::collection::vec(7usize..30, 5..9),
        junk in 7usize..30,
        seed in 0u64..1000,
    ) {
        let model = Model::new(config_with(layers, heads), 30, seed).unwrap();
        let exs = [
            Example::seq2seq(short.clone(), Lang::Src, &[8, 9], Lang::Tgt, BOS),
            Example::seq2seq(long, Lang::Tgt, &[10], Lang::Src, BOS),
        ];
        let batch = Batch::from_examples(&exs).unwrap();
        let base = model.forward(&batch, None).unwrap();
        let mut dirty = batch.clone();
        for slot in dirty.src_ids[0].iter_mut().skip(short.len()) {
            *slot = junk;
        }
        let out = model.forward(&dirty, None).unwrap();
        for (a, b) in base.logits.iter().zip(&out.logits) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn decoder_is_causal(
        layers in 1usize..=2,
        heads in 1usize..=2,
        tgt in prop::collection::vec(7usize..30, 3..8),
        cut in 0usize..3,
        replacement in 7usize..30,
        seed in 0u64..1000,
    ) {
        let model = Model::new(config_with(layers, heads), 30, seed).unwrap();
        let ex = Example::seq2seq(vec![7, 8, 9], Lang::Src, &tgt, Lang::Tgt, BOS);
        let base = model.forward(&Batch::from_examples(&[ex.clone()]).unwrap(), None).unwrap();
        let mut changed = ex;
        for t in cut + 1..changed.tgt_in.len() {
            changed.tgt_in[t] = replacement;
            changed.tgt_out[t - 1] = replacement;
        }
        let out = model.forward(&Batch::from_examples(&[changed]).unwrap(), None).unwrap();
        for t in 0..=cut {
            prop_assert_eq!(base.at(0, t), out.at(0, t));
        }
    }

    #[test]
    fn beam_of_one_is_greedy(seed in 0u64..500, src in prop::collection::vec(7usize..40, 1..8)) {
        let model = Model::new(ModelConfig::tiny(), 40, seed).unwrap();
        let seq = TokenSequence { ids: src, language: Lang::Src };
        let g = model.translate(&seq, Lang::Tgt, Strategy::Greedy, 12).unwrap();
        let b = model.translate(&seq, Lang::Tgt, Strategy::Beam(1), 12).unwrap();
        prop_assert_eq!(&g.ids, &b.ids);
        prop_assert!(g.ids.len() <= 12);
        let wide = model.translate(&seq, Lang::Tgt, Strategy::Beam(3), 12).unwrap();
        for id in g.ids.iter().chain(&wide.ids) {
            prop_assert!(*id != PAD && *id != MASK && *id != EOS && !is_special(*id));
        }
    }
}

#[test]
fn batched_greedy_matches_single_decoding() {
    let model = tiny_model(40, 17);
    let sources: Vec<Vec<usize>> = vec![vec![7, 8, 9], vec![20, 21], vec![30, 31, 32, 33, 34]];
    let refs: Vec<&[usize]> = sources.iter().map(|s| s.as_slice()).collect();
    let langs = [Lang::Tgt, Lang::Src, Lang::Tgt];
    let batched = model.translate_batch(&refs, &langs, Strategy::Greedy, 10).unwrap();
    for (i, s) in sources.iter().enumerate() {
        let one = model.translate_batch(&[s], &[langs[i]], Strategy::Greedy, 10).unwrap();
        assert_eq!(one[0], batched[i]);
    }
}
