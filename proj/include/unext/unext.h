/*
 * C API for the unext segmentation library: model building, training,
 * inference, checkpoint I/O, cost accounting and CPU latency benchmarking
 * behind opaque handles and status codes.
 *
 * Every function returning unx_status leaves a human-readable message for
 * the calling thread in unx_last_error() when it fails.  Strings returned
 * through char** out-parameters are heap-allocated; release them with
 * unx_string_free().
 */

#ifndef UNEXT_UNEXT_H
#define UNEXT_UNEXT_H

#include <stdint.h>

#if defined(_WIN32)
#define UNX_API __declspec(dllexport)
#else
#define UNX_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum unx_status {
  UNX_OK = 0,
  UNX_ERR_INVALID_ARG = 1, /* bad shapes, bad config, contract violations */
  UNX_ERR_IO = 2,          /* filesystem failures */
  UNX_ERR_FORMAT = 3,      /* malformed checkpoint or image contents */
  UNX_ERR_RUNTIME = 4      /* training errors, numeric failures */
} unx_status;

typedef struct unx_model unx_model;
typedef struct unx_dataset unx_dataset;

UNX_API const char* unx_version(void);

/* Message for the most recent failure on the calling thread. */
UNX_API const char* unx_last_error(void);

UNX_API void unx_string_free(char* s);

/* ------------------------------------------------------------------ */
/* Models                                                               */

/* config: a preset name (unext, unext-s, unext-l) or a key=value file. */
UNX_API unx_status unx_model_create(const char* config, uint64_t seed, unx_model** out);
UNX_API unx_status unx_model_load(const char* checkpoint_path, unx_model** out);
UNX_API unx_status unx_model_save(const unx_model* model, const char* checkpoint_path);
UNX_API void unx_model_free(unx_model* model);
UNX_API unx_status unx_model_param_count(const unx_model* model, uint64_t* out);

/* ------------------------------------------------------------------ */
/* Datasets                                                             */

/* root must contain images/ and masks/ with matching base filenames.   */
UNX_API unx_status unx_dataset_open(const char* root, int32_t img_size, unx_dataset** out);
UNX_API unx_status unx_dataset_synth(int32_t n, int32_t img_size, uint64_t seed,
                                     unx_dataset** out);
UNX_API unx_status unx_dataset_size(const unx_dataset* ds, int32_t* out);
/* writes the dataset to disk as PNGs under root/images + root/masks    */
UNX_API unx_status unx_dataset_export(const unx_dataset* ds, const char* root);
UNX_API void unx_dataset_free(unx_dataset* ds);

/* ------------------------------------------------------------------ */
/* Training                                                             */

typedef struct unx_train_options {
  int32_t epochs;      /* default 400 */
  int32_t batch_size;  /* default 8 */
  double lr_max;       /* default 1e-4, cosine-annealed ... */
  double lr_min;       /* ... down to 1e-5 */
  uint64_t seed;       /* default 42 */
  int32_t folds;       /* default 3 random 80/20 splits */
  double split_ratio;  /* default 0.8 */
  int32_t eval_each_epoch; /* log val F1/IoU every epoch (slower) */
} unx_train_options;

UNX_API void unx_train_options_init(unx_train_options* opts);

/* Trains fold by fold, writing <out_stem>_foldK.unxt checkpoints and
 * <out_stem>_foldK.csv epoch logs.  report_json (optional) receives the
 * per-fold F1/IoU plus mean and variance. */
UNX_API unx_status unx_train(unx_model* model, const unx_dataset* ds,
                             const unx_train_options* opts, const char* out_stem,
                             char** report_json);

/* ------------------------------------------------------------------ */
/* Inference                                                            */

/* Segments one image file (PNG/PGM/PPM) and writes the 0/255 mask PNG. */
UNX_API unx_status unx_infer_file(unx_model* model, const char* image_path,
                                  const char* mask_png_path);

/* ------------------------------------------------------------------ */
/* Analysis                                                             */

/* Per-layer parameter/MAC table; image_size 0 counts parameters only.  */
UNX_API unx_status unx_count_report(const char* config, int32_t image_size, int32_t markdown,
                                    char** out_text);

/* Measured row next to the published baseline figures; pass a negative
 * latency when no benchmark ran. */
UNX_API unx_status unx_comparison_report(const char* config, int32_t image_size,
                                         double latency_ms, int32_t markdown, char** out_text);

/* Architecture-variant ladder with published figures side by side.     */
UNX_API unx_status unx_ablate_table(int32_t image_size, int32_t markdown, char** out_text);

/* n_images single-image forwards after warmup untimed ones; JSON holds
 * per-run times (ms), their mean and the thread count. */
UNX_API unx_status unx_bench(unx_model* model, int32_t image_size, int32_t n_images,
                             int32_t warmup, int32_t threads, char** json_out);

/* ------------------------------------------------------------------ */
/* Verification                                                         */

/* Finite-difference gradient checks in 64-bit.  op NULL or "" runs the
 * whole suite.  Reports max relative error and the failure count.      */
UNX_API unx_status unx_gradcheck(const char* op, int32_t seeds, char** report_text,
                                 double* max_rel_err, int32_t* n_failed);

#ifdef __cplusplus
}
#endif

#endif /* UNEXT_UNEXT_H */
