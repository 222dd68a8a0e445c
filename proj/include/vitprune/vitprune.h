/* C interface to the vitprune library.
 *
 * Every object is an opaque handle released with its *_free function.
 * Functions return a vp_status; on failure vp_last_error() describes the
 * problem for the calling thread. Strings returned through char** outputs are
 * heap-allocated and must be released with vp_string_free. Structured inputs
 * and outputs are JSON documents. */
#ifndef VITPRUNE_H
#define VITPRUNE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define VP_API __declspec(dllexport)
#else
#define VP_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vp_status {
  VP_OK = 0,
  VP_ERR_INVALID_ARGUMENT = 1, /* bad config, shape or argument */
  VP_ERR_OUT_OF_RANGE = 2,
  VP_ERR_IO = 3,      /* unreadable or unwritable file */
  VP_ERR_NUMERIC = 4, /* NaN/Inf or divergence */
  VP_ERR_RUNTIME = 5, /* e.g. unreachable prune ratio */
  VP_ERR_INTERNAL = 6
} vp_status;

typedef struct vp_model vp_model;
typedef struct vp_dataset vp_dataset;
typedef struct vp_splits vp_splits;

VP_API const char* vp_version(void);
/* Message for the last failing call on this thread; "" if none. */
VP_API const char* vp_last_error(void);
VP_API const char* vp_status_name(vp_status status);
VP_API void vp_string_free(char* s);

/* ---- experiment configs ---- */

/* Default experiment config. */
VP_API vp_status vp_config_default(char** out_json);
/* Parses, validates and re-serializes an experiment config (defaults filled). */
VP_API vp_status vp_config_normalize(const char* json, char** out_json);
/* Applies one "dotted.key=value" override to a config document. */
VP_API vp_status vp_config_set(const char* json, const char* assignment, char** out_json);
/* Stage input derived from a config with seeds applied. section: "model" |
 * "split" | "dg_finetune" | "postprune_finetune". */
VP_API vp_status vp_config_section(const char* config_json, const char* section, char** out_json);
/* Prune job (see vp_prune) for one grid cell of a config. */
VP_API vp_status vp_config_prune_job(const char* config_json, const char* criterion, double ratio, char** out_json);
/* Parameter and MAC counts for a model config document. */
VP_API vp_status vp_model_config_counts(const char* model_json, int64_t* params, int64_t* macs);

/* ---- datasets and splits ---- */

/* Synthetic or folder dataset described by an experiment config. */
VP_API vp_status vp_dataset_from_config(const char* config_json, vp_dataset** out);
VP_API vp_status vp_dataset_ingest(const char* root, int64_t image_size, int64_t channels, vp_dataset** out);
VP_API vp_status vp_dataset_export(const vp_dataset* data, const char* root);
VP_API vp_status vp_dataset_summary(const vp_dataset* data, char** out_json);
VP_API size_t vp_dataset_size(const vp_dataset* data);
/* Normalized pixels of one sample, channels*size*size doubles. */
VP_API vp_status vp_dataset_image(const vp_dataset* data, size_t index, double* out, size_t capacity, int* label);
VP_API void vp_dataset_free(vp_dataset* data);

/* protocol_json: {"protocol", "train_fraction", "valid_fraction", "holdout", "seed"}. */
VP_API vp_status vp_splits_make(const vp_dataset* data, const char* protocol_json, vp_splits** out);
/* {"train": [...], "valid": [...], "test": [...]} */
VP_API vp_status vp_splits_to_json(const vp_splits* splits, char** out_json);
VP_API void vp_splits_free(vp_splits* splits);

/* ---- models ---- */

VP_API vp_status vp_model_init(const char* model_json, uint64_t seed, vp_model** out);
VP_API vp_status vp_model_load(const char* path, vp_model** out);
VP_API vp_status vp_model_save(const vp_model* model, const char* path);
VP_API vp_status vp_model_config(const vp_model* model, char** out_json);
VP_API vp_status vp_model_counts(const vp_model* model, int64_t* params, int64_t* macs);
/* images: batch*channels*size*size doubles; logits: batch*num_classes doubles. */
VP_API vp_status vp_model_forward(const vp_model* model, const double* images, int64_t batch, double* logits,
                                  size_t logits_capacity);
VP_API void vp_model_free(vp_model* model);

/* ---- pipeline ---- */

/* Fine-tunes a copy of `model`. phase: "dg_finetune" | "postprune_finetune".
 * out_result_json: {"epochs_run", "best_epoch", "best_valid_loss",
 * "early_stopped", "timing": {...}}; out_curves_csv: per-epoch curves. Either
 * string output may be NULL. */
VP_API vp_status vp_train(const vp_model* model, const vp_dataset* data, const vp_splits* splits, const char* phase,
                          const char* train_json, vp_model** out_best, char** out_result_json, char** out_curves_csv);

/* Scores, plans and applies one prune. job_json: {"ratio", "criterion",
 * "sites", "min_heads", "min_mlp", "min_embed", "seed", "aggregation",
 * "calibration_batches", "calibration_batch_size", "speedup_trials"}. */
VP_API vp_status vp_prune(const vp_model* model, const vp_dataset* data, const vp_splits* splits, const char* job_json,
                          vp_model** out_pruned, char** out_report_json, char** out_scores_csv);

/* EvalReport JSON. baseline_test_top1 < 0 and finetune_seconds < 0 mean absent. */
VP_API vp_status vp_evaluate(const vp_model* model, const vp_dataset* data, const vp_splits* splits,
                             double baseline_test_top1, double finetune_seconds, char** out_report_json);

/* Mean attention distance over the first max_images test-split samples.
 * Outputs the CSV table and its JSON form (either may be NULL). */
VP_API vp_status vp_attention_distance(const vp_model* model, const vp_dataset* data, const vp_splits* splits,
                                       int64_t max_images, char** out_csv, char** out_json);

/* Attention map of sample `index`; writes the heatmap as a binary PGM.
 * mode: "cls_query" | "token_mask"; layer -1 selects the last layer. */
VP_API vp_status vp_attention_map(const vp_model* model, const vp_dataset* data, size_t index, int64_t layer,
                                  const char* mode, const char* pgm_path, char** out_json);

#ifdef __cplusplus
}
#endif

#endif
