#ifndef GCNFACE_H
#define GCNFACE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum GcnfaceStatus {
  GCNFACE_STATUS_OK = 0,
  GCNFACE_STATUS_CONTRACT = 1,
  GCNFACE_STATUS_UNSUPPORTED_OP = 2,
  GCNFACE_STATUS_NON_CONVERGENCE = 3,
  GCNFACE_STATUS_PARSE = 4,
  GCNFACE_STATUS_CONFIG = 5,
  GCNFACE_STATUS_DEGENERATE_MASK = 6,
  GCNFACE_STATUS_NON_FINITE = 7,
  GCNFACE_STATUS_IO = 8,
  // A required pointer was null or a string was not UTF-8.
  GCNFACE_STATUS_INVALID_ARGUMENT = 9,
  // An output buffer was too small; the required length was still written.
  GCNFACE_STATUS_BUFFER_TOO_SMALL = 10,
  GCNFACE_STATUS_PANIC = 11,
} GcnfaceStatus;

// Configuration, model, mesh hierarchy and dataset. Trainers keep their own
// reference, so a session may be freed before its trainers.
typedef struct GcnfaceSession GcnfaceSession;

// Trainable parameters and optimizer state bound to a session.
typedef struct GcnfaceTrainer GcnfaceTrainer;

// Loss terms of one training step. Rendering and critic terms are NaN while
// inactive.
typedef struct GcnfaceStepLog {
  uint64_t step;
  double sigma[4];
  double pixel;
  double identity;
  double adversarial;
  double vertex_texture;
  double vertex_projected;
  double total;
  double critic_loss;
  double penalty;
} GcnfaceStepLog;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *gcnface_last_error(void);

// Creates a session. `config_toml` may be null for defaults. `dataset_path`
// may be null to synthesize `data.count` samples from the configuration.
//
// # Safety
// String arguments must be null or valid NUL-terminated strings; `out` must
// be writable.
enum GcnfaceStatus gcnface_session_new(const char *config_toml,
                                       const char *dataset_path,
                                       struct GcnfaceSession **out);

// # Safety
// `session` must be null or a pointer from [`gcnface_session_new`] not yet
// freed.
void gcnface_session_free(struct GcnfaceSession *session);

// # Safety
// `session` must be a live session handle; `count` must be writable.
enum GcnfaceStatus gcnface_session_sample_count(const struct GcnfaceSession *session,
                                                size_t *count);

// Side length in pixels of every image.
//
// # Safety
// `session` must be a live session handle; `size` must be writable.
enum GcnfaceStatus gcnface_session_image_size(const struct GcnfaceSession *session, size_t *size);

// # Safety
// `session` must be a live session handle; `path` a valid string.
enum GcnfaceStatus gcnface_session_save_dataset(const struct GcnfaceSession *session,
                                                const char *path);

// Writes the session's effective configuration as TOML.
//
// # Safety
// `session` must be a live session handle; `buf` must hold `len` bytes or be
// null; `needed` may be null.
enum GcnfaceStatus gcnface_session_config(const struct GcnfaceSession *session,
                                          char *buf,
                                          size_t len,
                                          size_t *needed);

// Creates a trainer with freshly initialized parameters, or resumes from
// `checkpoint_path` when it is not null.
//
// # Safety
// `session` must be a live session handle; `checkpoint_path` null or a valid
// string; `out` writable.
enum GcnfaceStatus gcnface_trainer_new(const struct GcnfaceSession *session,
                                       const char *checkpoint_path,
                                       struct GcnfaceTrainer **out);

// # Safety
// `trainer` must be null or a pointer from [`gcnface_trainer_new`] not yet
// freed.
void gcnface_trainer_free(struct GcnfaceTrainer *trainer);

// Runs one training step. `log` may be null. When `dump_dir` is not null a
// non-finite loss writes a diagnostic checkpoint there.
//
// # Safety
// `trainer` must be a live trainer handle; `dump_dir` null or a valid
// string; `log` null or writable.
enum GcnfaceStatus gcnface_trainer_step(struct GcnfaceTrainer *trainer,
                                        const char *dump_dir,
                                        struct GcnfaceStepLog *log);

// # Safety
// `trainer` must be a live trainer handle; `step` writable.
enum GcnfaceStatus gcnface_trainer_current_step(const struct GcnfaceTrainer *trainer,
                                                uint64_t *step);

// # Safety
// `trainer` must be a live trainer handle; `path` a valid string.
enum GcnfaceStatus gcnface_trainer_save(const struct GcnfaceTrainer *trainer, const char *path);

// Refined per-vertex albedo of one sample, `3 * vertex_count` values in
// vertex-major RGB order. `needed` receives the value count.
//
// # Safety
// `trainer` must be a live trainer handle; `values` must hold `len` doubles
// or be null; `needed` may be null.
enum GcnfaceStatus gcnface_trainer_refined_albedo(const struct GcnfaceTrainer *trainer,
                                                  size_t sample,
                                                  double *values,
                                                  size_t len,
                                                  size_t *needed);

// Writes OBJ meshes, renders and the projection mask of one sample into
// `dir`.
//
// # Safety
// `trainer` must be a live trainer handle; `dir` a valid string.
enum GcnfaceStatus gcnface_trainer_infer(const struct GcnfaceTrainer *trainer,
                                         size_t sample,
                                         const char *dir);

// Evaluation report over the session's dataset as text.
//
// # Safety
// `trainer` must be a live trainer handle; `buf` must hold `len` bytes or be
// null; `needed` may be null.
enum GcnfaceStatus gcnface_trainer_eval(const struct GcnfaceTrainer *trainer,
                                        char *buf,
                                        size_t len,
                                        size_t *needed);

// Runs the finite-difference suite. `all_passed` receives 1 or 0; the
// report text goes to `buf` as with [`gcnface_trainer_eval`].
//
// # Safety
// `all_passed` must be writable; `buf` must hold `len` bytes or be null;
// `needed` may be null.
enum GcnfaceStatus gcnface_gradcheck(uint64_t seed,
                                     int32_t *all_passed,
                                     char *buf,
                                     size_t len,
                                     size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GCNFACE_H */
