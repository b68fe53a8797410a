/* Exercises the shared library through its C header only. */

#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "fea/fea.h"

static int failures = 0;

#define EXPECT(cond)                                              \
  do {                                                            \
    if (!(cond)) {                                                \
      fprintf(stderr, "%s:%d: expected %s\n", __FILE__, __LINE__, #cond); \
      ++failures;                                                 \
    }                                                             \
  } while (0)

static const char* kTiny =
    "{\"schema_version\": 1,"
    " \"data\": {\"source\": \"synthetic\", \"synthetic\": {\"relations\": 6, \"tasks\": 3,"
    "   \"train_per_relation\": 12, \"val_per_relation\": 2, \"test_per_relation\": 5,"
    "   \"vocab_size\": 60, \"sequence_length\": 10, \"similar_pairs\": 1}},"
    " \"encoder\": {\"d_model\": 8, \"ff_width\": 16},"
    " \"train\": {\"epochs_fa\": 2, \"epochs_bt\": 2, \"batch_size\": 4},"
    " \"probes\": {\"epochs\": 2},"
    " \"variants\": [\"FEA\", \"A1\"], \"seeds\": [0], \"memory_sizes\": [3]}";

int main(int argc, char** argv) {
  const char* out = argc > 1 ? argv[1] : "capi_out";
  fea_experiment* exp = NULL;
  fea_aggregate* agg = NULL;
  size_t cells = 0;
  char* resolved = NULL;
  char pattern[1024];

  EXPECT(strlen(fea_version()) > 0);
  EXPECT(strcmp(fea_status_name(FEA_ERR_VERSION), "version") == 0);

  EXPECT(fea_experiment_parse("{\"train\": {\"batch_size\": 0, \"bogus\": 1}}", &exp) ==
         FEA_ERR_VALIDATION);
  EXPECT(exp == NULL);
  EXPECT(strstr(fea_last_error(), "train.batch_size") != NULL);
  EXPECT(strstr(fea_last_error(), "train.bogus") != NULL);
  EXPECT(fea_experiment_parse("not json", &exp) == FEA_ERR_VALIDATION);
  EXPECT(fea_experiment_load("/nonexistent/config.json", &exp) == FEA_ERR_IO);
  EXPECT(fea_experiment_parse(NULL, &exp) == FEA_ERR_NULL_ARGUMENT);

  EXPECT(fea_experiment_parse(kTiny, &exp) == FEA_OK);
  if (!exp) return 1;
  EXPECT(fea_experiment_set_output_dir(exp, out) == FEA_OK);
  EXPECT(fea_experiment_set_variants(exp, "FEA,nope") == FEA_ERR_VALIDATION);
  EXPECT(fea_experiment_cell_count(exp, &cells) == FEA_OK && cells == 2);
  {
    const unsigned long long seeds[] = {0, 1};
    EXPECT(fea_experiment_set_seeds(exp, seeds, 2) == FEA_OK);
  }
  {
    const int bad[] = {0};
    EXPECT(fea_experiment_set_memory_sizes(exp, bad, 1) == FEA_ERR_VALIDATION);
  }
  EXPECT(fea_experiment_cell_count(exp, &cells) == FEA_OK && cells == 4);
  EXPECT(fea_experiment_resolved_json(exp, &resolved) == FEA_OK);
  EXPECT(resolved && strstr(resolved, "\"memory_sizes\"") != NULL);
  fea_string_free(resolved);

  EXPECT(fea_experiment_run(exp, 2, &agg) == FEA_OK);
  fea_experiment_free(exp);
  if (!agg) return 1;
  EXPECT(fea_aggregate_report_count(agg) == 4);
  EXPECT(fea_aggregate_failure_count(agg) == 0);
  EXPECT(fea_aggregate_check_count(agg) > 0);
  {
    const char* name = NULL;
    const char* detail = NULL;
    int pass = -1;
    EXPECT(fea_aggregate_check(agg, 0, &name, &pass, &detail) == FEA_OK);
    EXPECT(name != NULL && (pass == 0 || pass == 1));
    EXPECT(fea_aggregate_check(agg, 999, &name, &pass, &detail) == FEA_ERR_VALIDATION);
  }
  EXPECT(strstr(fea_aggregate_summary(agg), "Direction checks") != NULL);
  fea_aggregate_free(agg);

  snprintf(pattern, sizeof pattern, "%s/reports/*.json", out);
  agg = NULL;
  EXPECT(fea_compare(pattern, out, &agg) == FEA_OK);
  EXPECT(fea_aggregate_report_count(agg) == 4);
  fea_aggregate_free(agg);
  snprintf(pattern, sizeof pattern, "%s/reports/*.nothing", out);
  EXPECT(fea_compare(pattern, out, &agg) == FEA_ERR_VALIDATION);

  EXPECT(fea_probe("/nonexistent.ckpt", "ubc", NULL, out, NULL) == FEA_ERR_IO);

  if (failures) fprintf(stderr, "%d expectation(s) failed\n", failures);
  else printf("C API: all expectations met\n");
  return failures ? 1 : 0;
}
