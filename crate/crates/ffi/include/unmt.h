#ifndef UNMT_H
#define UNMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define UNMT_OK 0

#define UNMT_ERR_IO 1

#define UNMT_ERR_INVALID_UTF8 2

#define UNMT_ERR_NO_TRAINING_TEXT 3

#define UNMT_ERR_NO_SEED_SIGNAL 4

#define UNMT_ERR_INVALID_ARGUMENT 5

#define UNMT_ERR_FORMAT 6

#define UNMT_ERR_TOKEN_OUT_OF_RANGE 7

#define UNMT_ERR_ZERO_VECTOR 8

#define UNMT_ERR_DIMENSION_MISMATCH 9

#define UNMT_ERR_SEQUENCE_TOO_LONG 10

#define UNMT_ERR_NON_FINITE 11

#define UNMT_ERR_CHECKPOINT 12

#define UNMT_ERR_MISSING_STAGE 13

#define UNMT_ERR_JSON 14

/**
 * A required pointer argument was null.
 */
#define UNMT_ERR_NULL 100

/**
 * A Rust panic was caught at the boundary.
 */
#define UNMT_ERR_PANIC 101

#define UNMT_DIRECTION_SRC_TGT 0

#define UNMT_DIRECTION_TGT_SRC 1

/**
 * Joint BPE model.
 */
typedef struct UnmtBpe UnmtBpe;

/**
 * Model, vocabulary and segmentation loaded together.
 */
typedef struct UnmtTranslator UnmtTranslator;

/**
 * Token vocabulary.
 */
typedef struct UnmtVocab UnmtVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. Valid until
 * the next call into this library on the same thread.
 */
const char *unmt_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *unmt_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void unmt_string_free(char *s);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
int unmt_bpe_load(const char *path, struct UnmtBpe **out);

/**
 * Segments one line into space-separated subwords.
 *
 * # Safety
 * `bpe` must come from `unmt_bpe_load`; `line` must be nul-terminated.
 */
int unmt_bpe_apply(const struct UnmtBpe *bpe, const char *line, char **out);

/**
 * # Safety
 * `bpe` must be null or a live handle.
 */
void unmt_bpe_free(struct UnmtBpe *bpe);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
int unmt_vocab_load(const char *path, struct UnmtVocab **out);

/**
 * # Safety
 * `vocab` must be a live handle; `out` must be writable.
 */
int unmt_vocab_size(const struct UnmtVocab *vocab, size_t *out);

/**
 * Id of a subword, or the unknown-token id.
 *
 * # Safety
 * `vocab` must be a live handle; `token` nul-terminated; `out` writable.
 */
int unmt_vocab_id(const struct UnmtVocab *vocab, const char *token, size_t *out);

/**
 * # Safety
 * `vocab` must be null or a live handle.
 */
void unmt_vocab_free(struct UnmtVocab *vocab);

/**
 * Loads the best parameters of a checkpoint with the BPE codes and
 * vocabulary it was trained with. A checkpoint from another vocabulary is
 * rejected.
 *
 * # Safety
 * Paths must be nul-terminated strings; `out` must be writable.
 */
int unmt_translator_open(const char *bpe_path,
                         const char *vocab_path,
                         const char *checkpoint_path,
                         struct UnmtTranslator **out);

/**
 * Translates one line. `direction` is `UNMT_DIRECTION_*`; `beam` 0 or 1
 * decodes greedily, larger values use beam search of that width.
 *
 * # Safety
 * `t` must be a live handle; `line` nul-terminated; `out` writable.
 */
int unmt_translate(const struct UnmtTranslator *t,
                   const char *line,
                   int direction,
                   size_t beam,
                   char **out);

/**
 * # Safety
 * `t` must be null or a live handle.
 */
void unmt_translator_free(struct UnmtTranslator *t);

/**
 * Corpus BLEU (0 to 100) of `n` candidate lines against `n` references.
 *
 * # Safety
 * `candidates` and `references` must each point to `n` nul-terminated
 * strings; `out` must be writable.
 */
int unmt_corpus_bleu(const char *const *candidates,
                     const char *const *references,
                     size_t n,
                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNMT_H */
