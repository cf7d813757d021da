#ifndef TMR_H
#define TMR_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TmrStatus {
  TMR_OK = 0,
  TMR_NULL = 1,
  TMR_INVALID_ARGUMENT = 2,
  TMR_INDEX = 3,
  TMR_STALE_ENTRY = 4,
  TMR_NOT_READY = 5,
  TMR_CONFIG = 6,
  TMR_IO = 7,
  TMR_NUMERICAL = 8,
  TMR_PANIC = 9,
} TmrStatus;

/**
 * Opaque replay buffer with its own sampling stream.
 */
typedef struct TmrReplayBuffer TmrReplayBuffer;

/**
 * Opaque pretraining loop over the bundled corpus.
 */
typedef struct TmrTrainer TmrTrainer;

typedef struct TmrStepMetrics {
  uint64_t step;
  double loss_g;
  double loss_d;
  double loss_combined;
  /**
   * Most recent drift evaluation; NaN before the first one.
   */
  double drift_exact_recovery;
  size_t buffer_live;
  double buffer_mean_weight;
  uint64_t backward_calls;
  /**
   * 1 while the buffer is too small to fill a batch.
   */
  uint8_t cold;
} TmrStepMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *tmr_last_error(void);

void tmr_clear_error(void);

/**
 * # Safety
 * `out_buffer` must be valid for a write. Free the result with
 * [`tmr_buffer_free`].
 */
enum TmrStatus tmr_buffer_new(size_t capacity,
                              double alpha,
                              uint64_t seed,
                              struct TmrReplayBuffer **out_buffer);

/**
 * # Safety
 * `buffer` must come from [`tmr_buffer_new`] and not be used afterwards.
 * Null is ignored.
 */
void tmr_buffer_free(struct TmrReplayBuffer *buffer);

/**
 * Add one corrupted example. `tokens` and `original` both hold `len` ids and
 * `original` must start with CLS. Evicts the lowest-weight entry when full.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum TmrStatus tmr_buffer_add(struct TmrReplayBuffer *buffer,
                              const uint32_t *tokens,
                              const uint32_t *original,
                              size_t len,
                              size_t vocab_size,
                              const size_t *mask_positions,
                              size_t n_masked,
                              double weight,
                              uint64_t step,
                              uint64_t *out_id);

/**
 * # Safety
 * `buffer` must be a live handle.
 */
enum TmrStatus tmr_buffer_update(struct TmrReplayBuffer *buffer, uint64_t id, double weight);

/**
 * # Safety
 * `buffer` must be a live handle.
 */
enum TmrStatus tmr_buffer_record_loss(struct TmrReplayBuffer *buffer, uint64_t id, double loss);

/**
 * Draw `k` entries with replacement. Writes ids and their sampling
 * probabilities; `out_probabilities` may be null.
 *
 * # Safety
 * `out_ids` (and `out_probabilities` if not null) must hold `k` elements.
 */
enum TmrStatus tmr_buffer_sample(struct TmrReplayBuffer *buffer,
                                 size_t k,
                                 uint64_t *out_ids,
                                 double *out_probabilities);

/**
 * # Safety
 * `buffer` must be a live handle and `out_weight` valid for a write.
 */
enum TmrStatus tmr_buffer_weight(struct TmrReplayBuffer *buffer, uint64_t id, double *out_weight);

/**
 * # Safety
 * `buffer` must be a live handle and `out_len` valid for a write.
 */
enum TmrStatus tmr_buffer_len(struct TmrReplayBuffer *buffer, size_t *out_len);

/**
 * Sum of w^alpha over live entries.
 *
 * # Safety
 * `buffer` must be a live handle and `out_total` valid for a write.
 */
enum TmrStatus tmr_buffer_total_priority(struct TmrReplayBuffer *buffer, double *out_total);

/**
 * Build a trainer from `key = value` lines. Null or empty text means the
 * defaults. Configuration errors return `TMR_CONFIG` listing every bad key.
 *
 * # Safety
 * `config_text` must be null or a NUL-terminated string; `out_trainer` must be
 * valid for a write. Free the result with [`tmr_trainer_free`].
 */
enum TmrStatus tmr_trainer_new(const char *config_text, struct TmrTrainer **out_trainer);

/**
 * # Safety
 * `trainer` must come from [`tmr_trainer_new`] and not be used afterwards.
 * Null is ignored.
 */
void tmr_trainer_free(struct TmrTrainer *trainer);

/**
 * Run one iteration. `out_metrics` may be null.
 *
 * # Safety
 * `trainer` must be a live handle.
 */
enum TmrStatus tmr_trainer_step(struct TmrTrainer *trainer, struct TmrStepMetrics *out_metrics);

/**
 * # Safety
 * `trainer` must be a live handle and `out_steps` valid for a write.
 */
enum TmrStatus tmr_trainer_step_count(struct TmrTrainer *trainer, uint64_t *out_steps);

/**
 * Save a checkpoint as `<dir>/checkpoints/step_NNNNNN.manifest`.
 *
 * # Safety
 * `trainer` must be a live handle and `dir` a NUL-terminated string.
 */
enum TmrStatus tmr_trainer_save_checkpoint(struct TmrTrainer *trainer, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TMR_H */
