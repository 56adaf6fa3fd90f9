/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef CTCKIT_H
#define CTCKIT_H

#include <stddef.h>
#include <stdint.h>

/**
 * Result codes shared by all entry points.
 */
typedef enum CtcStatus {
  CTC_STATUS_OK = 0,
  CTC_STATUS_NULL_POINTER = 1,
  CTC_STATUS_DOMAIN = 2,
  CTC_STATUS_INFEASIBLE_ALIGNMENT = 3,
  CTC_STATUS_NUMERIC = 4,
  CTC_STATUS_SHAPE = 5,
  CTC_STATUS_LOAD = 6,
  CTC_STATUS_IO = 7,
  CTC_STATUS_PARSE = 8,
  CTC_STATUS_BUFFER_TOO_SMALL = 9,
  CTC_STATUS_PANIC = 10,
} CtcStatus;

/**
 * Opaque handle to a trained or loaded model.
 */
typedef struct CtcModelHandle CtcModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ctc_last_error_message(void);

/**
 * Negative log-likelihood of `labels` given posteriors over the first
 * `input_len` frames.
 *
 * # Safety
 * `probs` must point to `frames * classes` doubles and `labels` to
 * `label_len` integers; `out_loss` must be writable.
 */
enum CtcStatus ctc_loss(const double *probs,
                        size_t frames,
                        size_t classes,
                        const int64_t *labels,
                        size_t label_len,
                        size_t input_len,
                        double *out_loss);

/**
 * Loss and its gradient with respect to pre-softmax activations.
 *
 * # Safety
 * `logits` and `out_grad` must each hold `frames * classes` doubles;
 * `labels` must hold `label_len` integers.
 */
enum CtcStatus ctc_gradient(const double *logits,
                            size_t frames,
                            size_t classes,
                            const int64_t *labels,
                            size_t label_len,
                            size_t input_len,
                            double *out_loss,
                            double *out_grad);

/**
 * Levenshtein distance between two label sequences.
 *
 * # Safety
 * `a` and `b` must hold `a_len` and `b_len` integers.
 */
enum CtcStatus ctc_edit_distance(const int64_t *a,
                                 size_t a_len,
                                 const int64_t *b,
                                 size_t b_len,
                                 size_t *out_distance);

/**
 * Greedy decoding. `out_len` receives the decoded length even when the
 * buffer is too small; `out_score` may be null.
 *
 * # Safety
 * `probs` must hold `frames * classes` doubles and `out_labels` `capacity`
 * integers.
 */
enum CtcStatus ctc_best_path_decode(const double *probs,
                                    size_t frames,
                                    size_t classes,
                                    size_t input_len,
                                    int64_t *out_labels,
                                    size_t capacity,
                                    size_t *out_len,
                                    double *out_score);

/**
 * Top-1 prefix beam search.
 *
 * # Safety
 * As for [`ctc_best_path_decode`].
 */
enum CtcStatus ctc_beam_search_decode(const double *probs,
                                      size_t frames,
                                      size_t classes,
                                      size_t input_len,
                                      size_t beam_width,
                                      int64_t *out_labels,
                                      size_t capacity,
                                      size_t *out_len,
                                      double *out_score);

/**
 * Segmented best-first search. `out_approximate` (may be null) is set to 1
 * when a segment exhausted `node_budget` and fell back to beam search.
 *
 * # Safety
 * As for [`ctc_best_path_decode`].
 */
enum CtcStatus ctc_prefix_search_decode(const double *probs,
                                        size_t frames,
                                        size_t classes,
                                        size_t input_len,
                                        double blank_threshold,
                                        size_t node_budget,
                                        int64_t *out_labels,
                                        size_t capacity,
                                        size_t *out_len,
                                        double *out_score,
                                        uint8_t *out_approximate);

/**
 * Loads a model directory written by `save_model`. Free the handle with
 * [`ctc_model_free`].
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out_model` must be writable.
 */
enum CtcStatus ctc_model_load(const char *dir, struct CtcModelHandle **out_model);

/**
 * # Safety
 * `model` must come from [`ctc_model_load`] and not be used afterwards.
 * Null is accepted.
 */
void ctc_model_free(struct CtcModelHandle *model);

/**
 * # Safety
 * `model` must be a live handle and `dir` a NUL-terminated string.
 */
enum CtcStatus ctc_model_save(const struct CtcModelHandle *model, const char *dir);

/**
 * Feature dimension and class count (labels plus blank) of a model.
 *
 * # Safety
 * `model` must be a live handle; outputs must be writable.
 */
enum CtcStatus ctc_model_dims(const struct CtcModelHandle *model,
                              size_t *out_feature_dim,
                              size_t *out_num_classes);

/**
 * Posteriors for one sequence, written as `input_len x num_classes`.
 *
 * # Safety
 * `features` must hold `frames * feature_dim` doubles and `out_probs`
 * `input_len * num_classes` doubles.
 */
enum CtcStatus ctc_model_probas(const struct CtcModelHandle *model,
                                const double *features,
                                size_t frames,
                                size_t feature_dim,
                                size_t input_len,
                                double *out_probs);

/**
 * Decodes one sequence with the model's stored decode settings (top-1).
 *
 * # Safety
 * `features` must hold `frames * feature_dim` doubles and `out_labels`
 * `capacity` integers.
 */
enum CtcStatus ctc_model_predict(const struct CtcModelHandle *model,
                                 const double *features,
                                 size_t frames,
                                 size_t feature_dim,
                                 size_t input_len,
                                 int64_t *out_labels,
                                 size_t capacity,
                                 size_t *out_len,
                                 double *out_score);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CTCKIT_H */
