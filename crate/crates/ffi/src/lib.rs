//! C interface to `unmt`: subword segmentation, vocabulary lookup,
//! translation with a trained checkpoint and corpus BLEU.
//!
//! Every function returns a status code (`UNMT_OK` or an error code) and
//! writes results through out-pointers. After a failure,
//! `unmt_last_error_message` describes it. Strings returned to the caller
//! must be released with `unmt_string_free`, handles with their `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use unmt::model::{Model, Strategy};
use unmt::pipeline::translate_lines;
use unmt::text::vocab::UNK;
use unmt::text::{BpeModel, Lang, Vocabulary};
use unmt::trainer::Checkpoint;
use unmt::Error;

pub const UNMT_OK: c_int = 0;
pub const UNMT_ERR_IO: c_int = 1;
pub const UNMT_ERR_INVALID_UTF8: c_int = 2;
pub const UNMT_ERR_NO_TRAINING_TEXT: c_int = 3;
pub const UNMT_ERR_NO_SEED_SIGNAL: c_int = 4;
pub const UNMT_ERR_INVALID_ARGUMENT: c_int = 5;
pub const UNMT_ERR_FORMAT: c_int = 6;
pub const UNMT_ERR_TOKEN_OUT_OF_RANGE: c_int = 7;
pub const UNMT_ERR_ZERO_VECTOR: c_int = 8;
pub const UNMT_ERR_DIMENSION_MISMATCH: c_int = 9;
pub const UNMT_ERR_SEQUENCE_TOO_LONG: c_int = 10;
pub const UNMT_ERR_NON_FINITE: c_int = 11;
pub const UNMT_ERR_CHECKPOINT: c_int = 12;
pub const UNMT_ERR_MISSING_STAGE: c_int = 13;
pub const UNMT_ERR_JSON: c_int = 14;
/// A required pointer argument was null.
pub const UNMT_ERR_NULL: c_int = 100;
/// A Rust panic was caught at the boundary.
pub const UNMT_ERR_PANIC: c_int = 101;

pub const UNMT_DIRECTION_SRC_TGT: c_int = 0;
pub const UNMT_DIRECTION_TGT_SRC: c_int = 1;

/// Joint BPE model.
pub struct UnmtBpe(BpeModel);

/// Token vocabulary.
pub struct UnmtVocab(Vocabulary);

/// Model, vocabulary and segmentation loaded together.
pub struct UnmtTranslator {
    model: Model,
    bpe: BpeModel,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> c_int {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UNMT_OK,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            UNMT_ERR_NULL
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            e.code()
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            UNMT_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::invalid(format!("{what} is not valid UTF-8"))))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    let c = CString::new(s).map_err(|_| Fail::Lib(Error::invalid("result contains a nul byte")))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn out_handle<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn unmt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn unmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn unmt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unmt_bpe_load(path: *const c_char, out: *mut *mut UnmtBpe) -> c_int {
    guard(|| {
        let m = BpeModel::load(&path_arg(path, "path")?)?;
        out_handle(out, UnmtBpe(m))
    })
}

/// Segments one line into space-separated subwords.
///
/// # Safety
/// `bpe` must come from `unmt_bpe_load`; `line` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn unmt_bpe_apply(bpe: *const UnmtBpe, line: *const c_char, out: *mut *mut c_char) -> c_int {
    guard(|| {
        let b = handle(bpe, "bpe")?;
        let units = b.0.apply(str_arg(line, "line")?);
        out_string(out, units.join(" "))
    })
}

/// # Safety
/// `bpe` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unmt_bpe_free(bpe: *mut UnmtBpe) {
    if !bpe.is_null() {
        drop(Box::from_raw(bpe));
    }
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unmt_vocab_load(path: *const c_char, out: *mut *mut UnmtVocab) -> c_int {
    guard(|| {
        let v = Vocabulary::load(&path_arg(path, "path")?)?;
        out_handle(out, UnmtVocab(v))
    })
}

/// # Safety
/// `vocab` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unmt_vocab_size(vocab: *const UnmtVocab, out: *mut usize) -> c_int {
    guard(|| {
        let v = handle(vocab, "vocab")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = v.0.len();
        Ok(())
    })
}

/// Id of a subword, or the unknown-token id.
///
/// # Safety
/// `vocab` must be a live handle; `token` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unmt_vocab_id(vocab: *const UnmtVocab, token: *const c_char, out: *mut usize) -> c_int {
    guard(|| {
        let v = handle(vocab, "vocab")?;
        let t = str_arg(token, "token")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = v.0.id(t).unwrap_or(UNK);
        Ok(())
    })
}

/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unmt_vocab_free(vocab: *mut UnmtVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Loads the best parameters of a checkpoint with the BPE codes and
/// vocabulary it was trained with. A checkpoint from another vocabulary is
/// rejected.
///
/// # Safety
/// Paths must be nul-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unmt_translator_open(
    bpe_path: *const c_char,
    vocab_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut UnmtTranslator,
) -> c_int {
    guard(|| {
        let bpe = BpeModel::load(&path_arg(bpe_path, "bpe_path")?)?;
        let vocab = Vocabulary::load(&path_arg(vocab_path, "vocab_path")?)?;
        let ck = Checkpoint::load(&path_arg(checkpoint_path, "checkpoint_path")?, Some(&vocab.hash()))?;
        out_handle(
            out,
            UnmtTranslator {
                model: ck.best_model(),
                bpe,
                vocab,
            },
        )
    })
}

/// Translates one line. `direction` is `UNMT_DIRECTION_*`; `beam` 0 or 1
/// decodes greedily, larger values use beam search of that width.
///
/// # Safety
/// `t` must be a live handle; `line` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unmt_translate(
    t: *const UnmtTranslator,
    line: *const c_char,
    direction: c_int,
    beam: usize,
    out: *mut *mut c_char,
) -> c_int {
    guard(|| {
        let t = handle(t, "translator")?;
        let line = str_arg(line, "line")?;
        let target = match direction {
            UNMT_DIRECTION_SRC_TGT => Lang::Tgt,
            UNMT_DIRECTION_TGT_SRC => Lang::Src,
            d => return Err(Error::invalid(format!("direction {d} is not 0 or 1")).into()),
        };
        let strategy = if beam <= 1 { Strategy::Greedy } else { Strategy::Beam(beam) };
        let mut hyp = translate_lines(
            &t.model,
            &t.bpe,
            &t.vocab,
            &[line],
            target,
            strategy,
            t.model.config.max_len,
            false,
        )?;
        out_string(out, hyp.pop().unwrap_or_default())
    })
}

/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unmt_translator_free(t: *mut UnmtTranslator) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Corpus BLEU (0 to 100) of `n` candidate lines against `n` references.
///
/// # Safety
/// `candidates` and `references` must each point to `n` nul-terminated
/// strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unmt_corpus_bleu(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if n > 0 && (candidates.is_null() || references.is_null()) {
            return Err(Fail::Null("candidates or references"));
        }
        let mut c = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        for i in 0..n {
            c.push(str_arg(*candidates.add(i), "candidate")?);
            r.push(str_arg(*references.add(i), "reference")?);
        }
        *out = unmt::eval::corpus_bleu(&c, &r)?;
        Ok(())
    })
}
