use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use unmt::model::{Model, ModelConfig, Strategy};
use unmt::pipeline::{prepare_toy, translate_lines};
use unmt::text::Lang;
use unmt::toylang::{generate_toy_pair, ToyLangSpec};
use unmt::trainer::{Checkpoint, TrainConfig};
use unmt_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn cpath(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    unmt_string_free(s);
    out
}

fn last_error() -> String {
    let p = unmt_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn error_codes_match_library() {
    use unmt::Error;
    assert_eq!(UNMT_ERR_INVALID_ARGUMENT, Error::invalid("x").code());
    assert_eq!(UNMT_ERR_MISSING_STAGE, Error::MissingStage("x".into()).code());
    assert_eq!(UNMT_ERR_CHECKPOINT, Error::Checkpoint("x".into()).code());
}

#[test]
fn bleu_and_null_handling() {
    let a = [c("the cat sat on the mat"), c("a b c d")];
    let ptrs: Vec<*const c_char> = a.iter().map(|s| s.as_ptr()).collect();
    let mut bleu = -1.0;
    let rc = unsafe { unmt_corpus_bleu(ptrs.as_ptr(), ptrs.as_ptr(), 2, &mut bleu) };
    assert_eq!(rc, UNMT_OK);
    assert!((bleu - 100.0).abs() < 1e-9);
    assert!(unmt_last_error_message().is_null());

    let rc = unsafe { unmt_corpus_bleu(ptr::null(), ptrs.as_ptr(), 2, &mut bleu) };
    assert_eq!(rc, UNMT_ERR_NULL);
    assert!(last_error().contains("null"));

    let mut h = ptr::null_mut();
    let rc = unsafe { unmt_bpe_load(c("/nonexistent/bpe.codes").as_ptr(), &mut h) };
    assert_eq!(rc, UNMT_ERR_IO);
    assert!(h.is_null());
    assert!(last_error().contains("nonexistent"));
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(unmt_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn handles_round_trip_against_library() {
    let spec = ToyLangSpec {
        mono_sentences: 200,
        test_pairs: 5,
        valid_pairs: 5,
        ..ToyLangSpec::default()
    };
    let pair = generate_toy_pair(&spec).unwrap();
    let data = prepare_toy(&pair).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (bpe_p, vocab_p, ck_p) = (dir.path().join("bpe.codes"), dir.path().join("vocab.txt"), dir.path().join("m.ckpt"));
    data.bpe.save(&bpe_p).unwrap();
    data.vocab().save(&vocab_p).unwrap();
    let model = Model::new(ModelConfig::tiny(), data.vocab().len(), 3).unwrap();
    Checkpoint::new(model.clone(), TrainConfig::desk(), data.vocab())
        .unwrap()
        .save(&ck_p)
        .unwrap();

    let line = &pair.test[0].0;
    unsafe {
        let mut bpe = ptr::null_mut();
        assert_eq!(unmt_bpe_load(cpath(&bpe_p).as_ptr(), &mut bpe), UNMT_OK);
        let mut seg = ptr::null_mut();
        assert_eq!(unmt_bpe_apply(bpe, c(line).as_ptr(), &mut seg), UNMT_OK);
        assert_eq!(take(seg), data.bpe.apply(line).join(" "));
        unmt_bpe_free(bpe);

        let mut vocab = ptr::null_mut();
        assert_eq!(unmt_vocab_load(cpath(&vocab_p).as_ptr(), &mut vocab), UNMT_OK);
        let mut n = 0usize;
        assert_eq!(unmt_vocab_size(vocab, &mut n), UNMT_OK);
        assert_eq!(n, data.vocab().len());
        let mut id = 0usize;
        assert_eq!(unmt_vocab_id(vocab, c("no-such-token").as_ptr(), &mut id), UNMT_OK);
        assert_eq!(id, 1);
        unmt_vocab_free(vocab);

        let mut t = ptr::null_mut();
        let rc = unmt_translator_open(cpath(&bpe_p).as_ptr(), cpath(&vocab_p).as_ptr(), cpath(&ck_p).as_ptr(), &mut t);
        assert_eq!(rc, UNMT_OK, "{}", last_error());
        for (dir, target, beam, strategy) in [
            (UNMT_DIRECTION_SRC_TGT, Lang::Tgt, 0, Strategy::Greedy),
            (UNMT_DIRECTION_TGT_SRC, Lang::Src, 3, Strategy::Beam(3)),
        ] {
            let mut out = ptr::null_mut();
            assert_eq!(unmt_translate(t, c(line).as_ptr(), dir, beam, &mut out), UNMT_OK);
            let want = translate_lines(&model, &data.bpe, data.vocab(), &[line], target, strategy, model.config.max_len, false)
                .unwrap();
            assert_eq!(take(out), want[0]);
        }
        let mut out = ptr::null_mut();
        assert_eq!(unmt_translate(t, c(line).as_ptr(), 7, 0, &mut out), UNMT_ERR_INVALID_ARGUMENT);
        unmt_translator_free(t);
    }
}

#[test]
fn header_declares_exports() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/unmt.h")).unwrap();
    for name in [
        "unmt_translate",
        "unmt_translator_open",
        "unmt_corpus_bleu",
        "unmt_last_error_message",
        "UNMT_ERR_MISSING_STAGE",
        "typedef struct UnmtTranslator UnmtTranslator",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
