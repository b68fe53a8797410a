#ifndef FEA_FEA_H
#define FEA_FEA_H

/* C interface to the continual relation-extraction lab.
 *
 * Every call returns a fea_status. On failure the message is available from
 * fea_last_error() on the same thread until the next failing call. Strings
 * returned through char** are owned by the caller and released with
 * fea_string_free(); strings returned as const char* belong to the handle. */

#include <stddef.h>

#if defined(_WIN32)
#define FEA_API __declspec(dllexport)
#else
#define FEA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fea_status {
  FEA_OK = 0,
  FEA_ERR_VALIDATION = 1,    /* bad config or arguments */
  FEA_ERR_IO = 2,            /* unreadable or unwritable file */
  FEA_ERR_VERSION = 3,       /* report or checkpoint schema mismatch */
  FEA_ERR_COMPATIBILITY = 4, /* checkpoint does not match the data */
  FEA_ERR_RUNTIME = 5,       /* anything else raised while running */
  FEA_ERR_NULL_ARGUMENT = 6
} fea_status;

typedef struct fea_experiment fea_experiment;
typedef struct fea_aggregate fea_aggregate;

FEA_API const char* fea_version(void);
FEA_API const char* fea_last_error(void);
FEA_API const char* fea_status_name(fea_status status);
FEA_API void fea_string_free(char* s);

/* Experiment configs: load, adjust, inspect. */
FEA_API fea_status fea_experiment_load(const char* path, fea_experiment** out);
FEA_API fea_status fea_experiment_parse(const char* json_text, fea_experiment** out);
FEA_API void fea_experiment_free(fea_experiment* exp);
FEA_API fea_status fea_experiment_set_output_dir(fea_experiment* exp, const char* dir);
/* Comma-separated variant names, e.g. "FEA,A1". */
FEA_API fea_status fea_experiment_set_variants(fea_experiment* exp, const char* names);
FEA_API fea_status fea_experiment_set_seeds(fea_experiment* exp, const unsigned long long* seeds,
                                            size_t n);
FEA_API fea_status fea_experiment_set_memory_sizes(fea_experiment* exp, const int* sizes,
                                                   size_t n);
FEA_API fea_status fea_experiment_resolved_json(const fea_experiment* exp, char** out);
FEA_API fea_status fea_experiment_cell_count(const fea_experiment* exp, size_t* out);

/* Runs the grid with up to `jobs` workers, writes reports and the
 * aggregate tables under the output directory. Cells that fail are listed
 * in the aggregate and make the call return FEA_ERR_RUNTIME; the aggregate
 * is still produced from the cells that finished. */
FEA_API fea_status fea_experiment_run(const fea_experiment* exp, int jobs, fea_aggregate** out);

/* Aggregates existing report files matching `pattern` into `out_dir`. */
FEA_API fea_status fea_compare(const char* pattern, const char* out_dir, fea_aggregate** out);

FEA_API void fea_aggregate_free(fea_aggregate* agg);
FEA_API size_t fea_aggregate_report_count(const fea_aggregate* agg);
FEA_API size_t fea_aggregate_failure_count(const fea_aggregate* agg);
FEA_API const char* fea_aggregate_failure(const fea_aggregate* agg, size_t i);
FEA_API size_t fea_aggregate_check_count(const fea_aggregate* agg);
FEA_API fea_status fea_aggregate_check(const fea_aggregate* agg, size_t i, const char** name,
                                       int* pass, const char** detail);
FEA_API const char* fea_aggregate_summary(const fea_aggregate* agg);
/* 1 when every direction check passed (and at least one applied). */
FEA_API int fea_aggregate_all_pass(const fea_aggregate* agg);

/* kind: "ubc", "frozen" or "boundary". config_path may be NULL to use the
 * config stored in the checkpoint. The report JSON is written to out_dir
 * and also returned. */
FEA_API fea_status fea_probe(const char* checkpoint_path, const char* kind,
                             const char* config_path, const char* out_dir, char** report_json);

#ifdef __cplusplus
}
#endif

#endif /* FEA_FEA_H */
