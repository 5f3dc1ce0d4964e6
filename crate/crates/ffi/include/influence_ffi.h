#ifndef INFLUENCE_FFI_H
#define INFLUENCE_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define INFL_ACTIVATION_TANH 0

#define INFL_ACTIVATION_RELU 1

#define INFL_SOLVER_EXACT 0

#define INFL_SOLVER_CG 1

#define INFL_SOLVER_LISSA 2

typedef enum {
  INFL_STATUS_OK = 0,
  INFL_STATUS_NULL_POINTER = 1,
  INFL_STATUS_INVALID_INPUT = 2,
  INFL_STATUS_INVALID_CONFIG = 3,
  INFL_STATUS_NUMERICAL = 4,
  INFL_STATUS_IO = 5,
  INFL_STATUS_CACHE_CORRUPTION = 6,
  INFL_STATUS_OUT_OF_RANGE = 7,
  INFL_STATUS_PANIC = 8,
} InflStatus;

/**
 * A labelled dataset.
 */
typedef struct InflDataset InflDataset;

/**
 * A trained model together with the fingerprint of its training set.
 */
typedef struct InflModel InflModel;

/**
 * Influence scores of every training point for one test point.
 */
typedef struct InflReport InflReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *infl_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *infl_version(void);

/**
 * The embedded 150-example Iris table.
 */
InflStatus infl_dataset_load_iris(InflDataset **out_dataset);

/**
 * Builds a dataset from a row-major `n x dim` feature matrix and `n` labels.
 */
InflStatus infl_dataset_from_arrays(const double *features,
                                    const uint32_t *labels,
                                    size_t n,
                                    size_t dim,
                                    size_t num_classes,
                                    InflDataset **out_dataset);

/**
 * Seeded train/test split. With `normalize` set, both halves are
 * standardized with the training half's statistics.
 */
InflStatus infl_dataset_split(const InflDataset *dataset,
                              double test_fraction,
                              uint64_t seed,
                              bool stratified,
                              bool normalize,
                              InflDataset **out_train,
                              InflDataset **out_test);

InflStatus infl_dataset_len(const InflDataset *dataset, size_t *out_len);

void infl_dataset_free(InflDataset *dataset);

/**
 * Full-batch gradient descent on `train`. `depth` hidden layers of `width`
 * units; depth 0 is multinomial logistic regression.
 */
InflStatus infl_model_train(const InflDataset *train,
                            size_t depth,
                            size_t width,
                            uint32_t activation_code,
                            double learning_rate,
                            size_t steps,
                            double weight_decay,
                            uint64_t seed,
                            InflModel **out_model);

InflStatus infl_model_num_params(const InflModel *model, size_t *out_count);

/**
 * Copies the trained parameters into `buf`, which must hold `len` values.
 */
InflStatus infl_model_params(const InflModel *model, double *buf, size_t len);

InflStatus infl_model_final_grad_norm(const InflModel *model, double *out_norm);

/**
 * Per-example loss of example `index` of `dataset` under `model`.
 */
InflStatus infl_model_example_loss(const InflModel *model,
                                   const InflDataset *dataset,
                                   size_t index,
                                   double *out_loss);

void infl_model_free(InflModel *model);

/**
 * Scores every training point of `train` against example `test_index` of
 * `test`. `damping` is added to the Hessian before solving.
 */
InflStatus infl_rank(const InflModel *model,
                     const InflDataset *train,
                     const InflDataset *test,
                     size_t test_index,
                     uint32_t solver_code,
                     double damping,
                     InflReport **out_report);

InflStatus infl_report_len(const InflReport *report, size_t *out_len);

/**
 * Training index at 0-based ranking position `position` (most positive
 * influence first) and its pair influence.
 */
InflStatus infl_report_ranked(const InflReport *report,
                              size_t position,
                              size_t *out_train_index,
                              double *out_influence);

/**
 * Pair influence and predicted loss change on removal for training point
 * `train_index`.
 */
InflStatus infl_report_score(const InflReport *report,
                             size_t train_index,
                             double *out_influence,
                             double *out_predicted_delta_loss);

/**
 * Serializes the report as JSON. Release the string with [`infl_string_free`].
 */
InflStatus infl_report_to_json(const InflReport *report, char **out_json);

void infl_report_free(InflReport *report);

void infl_string_free(char *s);

/**
 * Runs an experiment config end to end and writes its reports.
 * `cache_dir` may be NULL (no caching); `out_failed_points` may be NULL.
 */
InflStatus infl_run_experiment(const char *config_path,
                               const char *cache_dir,
                               size_t workers,
                               size_t *out_failed_points);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFLUENCE_FFI_H */
