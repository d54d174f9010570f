#ifndef KDREG_H
#define KDREG_H

/* C interface to the kdreg distillation library.
 *
 * Objects are opaque handles created by the constructor-style calls and released
 * with the matching *_free. Every fallible call returns a kdreg_status; on
 * failure kdreg_last_error() describes the problem (per thread, valid until
 * the next call on that thread). Strings returned through char** are owned by
 * the caller and released with kdreg_string_free. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define KDREG_API __declspec(dllexport)
#else
#define KDREG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum kdreg_status {
    KDREG_OK = 0,
    KDREG_ERROR = 1,
    KDREG_CONFIG_ERROR = 2,
    KDREG_DATA_ERROR = 3,
    KDREG_DIVERGENCE = 4
} kdreg_status;

typedef enum kdreg_split { KDREG_SPLIT_TRAIN = 0, KDREG_SPLIT_VAL = 1, KDREG_SPLIT_TEST = 2 } kdreg_split;

typedef struct kdreg_config kdreg_config;
typedef struct kdreg_dataset kdreg_dataset;
typedef struct kdreg_model kdreg_model;
typedef struct kdreg_cache kdreg_cache;

typedef struct kdreg_metrics {
    double rpe_t;
    double rpe_r;
    double ate;
    size_t frames;
} kdreg_metrics;

KDREG_API const char* kdreg_version(void);
KDREG_API const char* kdreg_last_error(void);
KDREG_API void kdreg_string_free(char* s);

/* ---- configuration */

KDREG_API kdreg_status kdreg_config_default(kdreg_config** out);
/* Accepts a config file or a run manifest. */
KDREG_API kdreg_status kdreg_config_load(const char* path, kdreg_config** out);
KDREG_API kdreg_status kdreg_config_from_json(const char* json, kdreg_config** out);
/* value is JSON text; bare words are taken as strings. */
KDREG_API kdreg_status kdreg_config_set(kdreg_config* cfg, const char* key, const char* value);
KDREG_API kdreg_status kdreg_config_get(const kdreg_config* cfg, const char* key, char** out_json);
KDREG_API kdreg_status kdreg_config_to_json(const kdreg_config* cfg, char** out);
KDREG_API kdreg_status kdreg_config_write_manifest(const kdreg_config* cfg, const char* command, const char* out_dir);
KDREG_API void kdreg_config_free(kdreg_config* cfg);

/* ---- datasets */

/* Loads cfg's dataset_path, or generates the synthetic benchmark. */
KDREG_API kdreg_status kdreg_dataset_from_config(const kdreg_config* cfg, kdreg_dataset** out);
KDREG_API kdreg_status kdreg_dataset_load(const char* path, kdreg_dataset** out);
KDREG_API kdreg_status kdreg_dataset_save(const kdreg_dataset* ds, const char* path);
KDREG_API size_t kdreg_dataset_num_samples(const kdreg_dataset* ds, kdreg_split split);
KDREG_API size_t kdreg_dataset_feature_dim(const kdreg_dataset* ds);
KDREG_API void kdreg_dataset_free(kdreg_dataset* ds);

/* ---- models */

/* log_path may be NULL; otherwise receives the per-epoch training log as CSV. */
KDREG_API kdreg_status kdreg_train_teacher(const kdreg_config* cfg, const kdreg_dataset* ds, uint64_t seed,
                                           const char* log_path, kdreg_model** out);
KDREG_API kdreg_status kdreg_model_load(const char* path, kdreg_model** out);
KDREG_API kdreg_status kdreg_model_save(const kdreg_model* model, const char* path);
KDREG_API size_t kdreg_model_parameter_count(const kdreg_model* model);
/* Percentage of teacher parameters removed in the student. */
KDREG_API double kdreg_distillation_rate(const kdreg_model* teacher, const kdreg_model* student);
/* features: n x dim row-major; poses_out: n x 6 row-major [t | r]. */
KDREG_API kdreg_status kdreg_model_predict(const kdreg_model* model, const double* features, size_t n, size_t dim,
                                           double* poses_out);
KDREG_API void kdreg_model_free(kdreg_model* model);

/* ---- teacher cache */

KDREG_API kdreg_status kdreg_cache_build(const kdreg_model* teacher, const kdreg_dataset* ds, kdreg_cache** out);
KDREG_API kdreg_status kdreg_cache_load(const char* path, kdreg_cache** out);
KDREG_API kdreg_status kdreg_cache_save(const kdreg_cache* cache, const char* path);
KDREG_API size_t kdreg_cache_size(const kdreg_cache* cache);
KDREG_API kdreg_status kdreg_cache_eta(const kdreg_cache* cache, double* eta_t, double* eta_r);
KDREG_API kdreg_status kdreg_cache_phi(const kdreg_cache* cache, uint64_t sample_id, double* phi_t, double* phi_r);
KDREG_API kdreg_status kdreg_cache_export_histogram(const kdreg_cache* cache, const char* path, size_t bins);
KDREG_API void kdreg_cache_free(kdreg_cache* cache);

/* ---- evaluation and runs */

/* out_dir may be NULL; otherwise KITTI trajectories and metrics.csv are written there. */
KDREG_API kdreg_status kdreg_evaluate_model(const kdreg_model* model, const kdreg_dataset* ds, kdreg_split split,
                                            int align, const char* out_dir, kdreg_metrics* out);
KDREG_API kdreg_status kdreg_evaluate_pose_files(const char* predicted_path, const char* truth_path, int align,
                                                 kdreg_metrics* out);
/* out_dir NULL means the config's out_dir. */
KDREG_API kdreg_status kdreg_run_distill(const kdreg_config* cfg, const char* out_dir);
/* Expands cfg's ablation_rows. */
KDREG_API kdreg_status kdreg_run_ablation(const kdreg_config* cfg, const char* out_dir);
/* One config per row; rows must share dataset, seeds and teacher settings. */
KDREG_API kdreg_status kdreg_run_ablation_configs(const kdreg_config* const* configs, size_t count,
                                                  const char* out_dir);
KDREG_API kdreg_status kdreg_run_capacity(const kdreg_config* cfg, int train, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif
