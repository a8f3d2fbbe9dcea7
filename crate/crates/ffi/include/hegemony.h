#ifndef HEGEMONY_H
#define HEGEMONY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Which homomorphic backend a session evaluates with.
typedef enum HgBackend {
  // Plaintext simulator with exact arithmetic and level accounting.
  HG_BACKEND_SIM = 0,
  // RLWE approximate-arithmetic scheme.
  HG_BACKEND_CKKS = 1,
} HgBackend;

// Result of every fallible call.
typedef enum HgStatus {
  HG_STATUS_OK = 0,
  HG_STATUS_NULL_POINTER = 1,
  HG_STATUS_INVALID_ARGUMENT = 2,
  HG_STATUS_CRYPTO_FAILURE = 3,
  HG_STATUS_BUDGET_EXHAUSTED = 4,
  HG_STATUS_IO = 5,
  HG_STATUS_BUFFER_TOO_SMALL = 6,
  HG_STATUS_PANIC = 7,
} HgStatus;

typedef struct HgModel HgModel;

typedef struct HgPaillierCiphertext HgPaillierCiphertext;

typedef struct HgPaillierPublicKey HgPaillierPublicKey;

typedef struct HgPaillierSecretKey HgPaillierSecretKey;

// Keys for encrypted inference. Holds the secret key, so it belongs to the
// data owner.
typedef struct HgSession HgSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Description of the last failure on this thread, or null. Valid until
// the next call into the library from the same thread.
const char *hg_last_error(void);

// Release a string returned by this library.
//
// # Safety
// `s` must come from this library and not have been freed.
void hg_string_free(char *s);

// Generate a keypair with a `key_bits`-bit modulus. With `seeded`, the
// key is reproducible from `seed` and therefore not secret.
//
// # Safety
// `pk_out` and `sk_out` must be valid for writes.
enum HgStatus hg_paillier_keygen(uint32_t key_bits,
                                 uint64_t seed,
                                 bool seeded,
                                 struct HgPaillierPublicKey **pk_out,
                                 struct HgPaillierSecretKey **sk_out);

// # Safety
// `pk` must be null or a live handle from this library.
void hg_paillier_public_key_free(struct HgPaillierPublicKey *pk);

// # Safety
// `sk` must be null or a live handle from this library.
void hg_paillier_secret_key_free(struct HgPaillierSecretKey *sk);

// # Safety
// `c` must be null or a live handle from this library.
void hg_paillier_ciphertext_free(struct HgPaillierCiphertext *c);

// Public key as JSON; free with `hg_string_free`.
//
// # Safety
// `pk` must be a live handle; `json_out` must be valid for writes.
enum HgStatus hg_paillier_public_key_to_json(const struct HgPaillierPublicKey *pk, char **json_out);

// # Safety
// `json` must be a NUL-terminated string; `pk_out` must be valid for writes.
enum HgStatus hg_paillier_public_key_from_json(const char *json,
                                               struct HgPaillierPublicKey **pk_out);

// Encrypt `m` with fresh randomness from the OS.
//
// # Safety
// `pk` must be a live handle; `out` must be valid for writes.
enum HgStatus hg_paillier_encrypt(const struct HgPaillierPublicKey *pk,
                                  uint64_t m,
                                  struct HgPaillierCiphertext **out);

// Ciphertext of the sum of the two plaintexts.
//
// # Safety
// All handles must be live; `out` must be valid for writes.
enum HgStatus hg_paillier_add(const struct HgPaillierPublicKey *pk,
                              const struct HgPaillierCiphertext *a,
                              const struct HgPaillierCiphertext *b,
                              struct HgPaillierCiphertext **out);

// Ciphertext of `k` times the plaintext.
//
// # Safety
// All handles must be live; `out` must be valid for writes.
enum HgStatus hg_paillier_scalar_mul(const struct HgPaillierPublicKey *pk,
                                     const struct HgPaillierCiphertext *c,
                                     uint64_t k,
                                     struct HgPaillierCiphertext **out);

// Decrypt into a u64; fails with `INVALID_ARGUMENT` if the plaintext is wider.
//
// # Safety
// All handles must be live; `m_out` must be valid for writes.
enum HgStatus hg_paillier_decrypt(const struct HgPaillierPublicKey *pk,
                                  const struct HgPaillierSecretKey *sk,
                                  const struct HgPaillierCiphertext *c,
                                  uint64_t *m_out);

// Load a model from a weights file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
enum HgStatus hg_model_load(const char *path, struct HgModel **out);

// Seeded random-weight model with `conv_layers` convolution blocks on
// `size`x`size` grayscale input.
//
// # Safety
// `out` must be valid for writes.
enum HgStatus hg_model_random(size_t conv_layers, size_t size, uint64_t seed, struct HgModel **out);

// # Safety
// `m` must be null or a live handle from this library.
void hg_model_free(struct HgModel *m);

// Number of input values (height x width x channels), or 0 for null.
//
// # Safety
// `m` must be null or a live handle.
size_t hg_model_input_len(const struct HgModel *m);

// Number of logits, or 0 for null.
//
// # Safety
// `m` must be null or a live handle.
size_t hg_model_classes(const struct HgModel *m);

// Multiplicative levels one inference consumes, or 0 for null.
//
// # Safety
// `m` must be null or a live handle.
size_t hg_model_depth(const struct HgModel *m);

// Plaintext reference inference. Pixels are row-major, channels last.
// `written` receives the logit count even when the buffer is too small.
//
// # Safety
// `pixels` must hold `len` values; `logits_out` must hold `cap`.
enum HgStatus hg_model_infer_plain(const struct HgModel *m,
                                   const double *pixels,
                                   size_t len,
                                   double *logits_out,
                                   size_t cap,
                                   size_t *written);

// Keys sized for `m`: its depth as the level budget and its rotations.
// `ring_degree` is ignored by the simulator except to set the slot count.
//
// # Safety
// `m` must be a live handle; `out` must be valid for writes.
enum HgStatus hg_session_new(const struct HgModel *m,
                             enum HgBackend backend,
                             size_t ring_degree,
                             uint64_t seed,
                             bool seeded,
                             struct HgSession **out);

// # Safety
// `s` must be null or a live handle from this library.
void hg_session_free(struct HgSession *s);

// Encrypt the input, evaluate the model homomorphically and decrypt the
// logits. `written` receives the logit count even when the buffer is too
// small.
//
// # Safety
// Handles must be live; `pixels` must hold `len` values; `logits_out` must hold `cap`.
enum HgStatus hg_session_infer(const struct HgSession *s,
                               const struct HgModel *m,
                               const double *pixels,
                               size_t len,
                               double *logits_out,
                               size_t cap,
                               size_t *written);

// Run an in-process federated-averaging simulation with synthetic client
// updates. `config_json` holds the simulation settings (any omitted field
// keeps its default). On success `transcript_out` receives one JSON line
// per phase per round; free it with `hg_string_free`.
//
// # Safety
// `config_json` must be a NUL-terminated string; `transcript_out` must be valid for writes.
enum HgStatus hg_fedsim_run(const char *config_json, char **transcript_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEGEMONY_H */
