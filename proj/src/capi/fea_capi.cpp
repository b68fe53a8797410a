#include "fea/fea.h"

#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "fea/error.hpp"
#include "fea/experiment.hpp"

struct fea_experiment {
  fea::ExperimentConfig cfg;
};

struct fea_aggregate {
  fea::Aggregate agg;
  std::vector<std::string> failures;
  std::string summary;
};

namespace {

thread_local std::string g_last_error;

fea_status fail(fea_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

fea_status status_of(fea::ErrorKind k) {
  switch (k) {
    case fea::ErrorKind::kValidation:
    case fea::ErrorKind::kConfig:
      return FEA_ERR_VALIDATION;
    case fea::ErrorKind::kIo:
      return FEA_ERR_IO;
    case fea::ErrorKind::kVersion:
      return FEA_ERR_VERSION;
    case fea::ErrorKind::kCompatibility:
      return FEA_ERR_COMPATIBILITY;
    default:
      return FEA_ERR_RUNTIME;
  }
}

template <typename F>
fea_status guard(F&& f) {
  try {
    f();
    return FEA_OK;
  } catch (const fea::Error& e) {
    return fail(status_of(e.kind()), e.what());
  } catch (const std::exception& e) {
    return fail(FEA_ERR_RUNTIME, e.what());
  } catch (...) {
    return fail(FEA_ERR_RUNTIME, "unknown error");
  }
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// Re-validates after an edit; the config is left unchanged on failure.
void apply(fea_experiment* exp, fea::ExperimentConfig next) {
  const auto errs = fea::experiment_config_errors(next);
  if (!errs.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw fea::Error(fea::ErrorKind::kValidation, msg);
  }
  exp->cfg = std::move(next);
}

fea_aggregate* finish(fea::Aggregate agg, std::vector<std::string> failures) {
  auto* out = new fea_aggregate{std::move(agg), std::move(failures), {}};
  out->summary = fea::summary_markdown(out->agg);
  return out;
}

}  // namespace

extern "C" {

const char* fea_version(void) { return "1.0.0"; }

const char* fea_last_error(void) { return g_last_error.c_str(); }

const char* fea_status_name(fea_status status) {
  switch (status) {
    case FEA_OK: return "ok";
    case FEA_ERR_VALIDATION: return "validation";
    case FEA_ERR_IO: return "io";
    case FEA_ERR_VERSION: return "version";
    case FEA_ERR_COMPATIBILITY: return "compatibility";
    case FEA_ERR_RUNTIME: return "runtime";
    case FEA_ERR_NULL_ARGUMENT: return "null argument";
  }
  return "unknown";
}

void fea_string_free(char* s) { std::free(s); }

fea_status fea_experiment_load(const char* path, fea_experiment** out) {
  if (!path || !out) return fail(FEA_ERR_NULL_ARGUMENT, "path and out are required");
  *out = nullptr;
  return guard([&] { *out = new fea_experiment{fea::load_experiment_config(path)}; });
}

fea_status fea_experiment_parse(const char* json_text, fea_experiment** out) {
  if (!json_text || !out) return fail(FEA_ERR_NULL_ARGUMENT, "json_text and out are required");
  *out = nullptr;
  return guard([&] {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
      throw fea::Error(fea::ErrorKind::kValidation, std::string("config is not valid JSON: ") +
                                                        e.what());
    }
    *out = new fea_experiment{fea::experiment_config_from_json(j)};
  });
}

void fea_experiment_free(fea_experiment* exp) { delete exp; }

fea_status fea_experiment_set_output_dir(fea_experiment* exp, const char* dir) {
  if (!exp || !dir) return fail(FEA_ERR_NULL_ARGUMENT, "exp and dir are required");
  return guard([&] {
    fea::ExperimentConfig next = exp->cfg;
    next.output_dir = dir;
    apply(exp, std::move(next));
  });
}

fea_status fea_experiment_set_variants(fea_experiment* exp, const char* names) {
  if (!exp || !names) return fail(FEA_ERR_NULL_ARGUMENT, "exp and names are required");
  return guard([&] {
    fea::ExperimentConfig next = exp->cfg;
    next.variants.clear();
    std::stringstream ss(names);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto v = fea::parse_variant(item);
      if (!v) throw fea::Error(fea::ErrorKind::kValidation, "unknown variant '" + item + "'");
      next.variants.push_back(*v);
    }
    apply(exp, std::move(next));
  });
}

fea_status fea_experiment_set_seeds(fea_experiment* exp, const unsigned long long* seeds,
                                    size_t n) {
  if (!exp || (!seeds && n > 0)) return fail(FEA_ERR_NULL_ARGUMENT, "exp and seeds are required");
  return guard([&] {
    fea::ExperimentConfig next = exp->cfg;
    next.seeds.assign(seeds, seeds + n);
    apply(exp, std::move(next));
  });
}

fea_status fea_experiment_set_memory_sizes(fea_experiment* exp, const int* sizes, size_t n) {
  if (!exp || (!sizes && n > 0)) return fail(FEA_ERR_NULL_ARGUMENT, "exp and sizes are required");
  return guard([&] {
    fea::ExperimentConfig next = exp->cfg;
    next.memory_sizes.assign(sizes, sizes + n);
    apply(exp, std::move(next));
  });
}

fea_status fea_experiment_resolved_json(const fea_experiment* exp, char** out) {
  if (!exp || !out) return fail(FEA_ERR_NULL_ARGUMENT, "exp and out are required");
  return guard([&] { *out = dup(fea::to_json(exp->cfg).dump(2)); });
}

fea_status fea_experiment_cell_count(const fea_experiment* exp, size_t* out) {
  if (!exp || !out) return fail(FEA_ERR_NULL_ARGUMENT, "exp and out are required");
  *out = fea::grid_cells(exp->cfg).size();
  return FEA_OK;
}

fea_status fea_experiment_run(const fea_experiment* exp, int jobs, fea_aggregate** out) {
  if (!exp || !out) return fail(FEA_ERR_NULL_ARGUMENT, "exp and out are required");
  *out = nullptr;
  fea::GridOutcome outcome;
  const fea_status s = guard([&] {
    outcome = fea::run_grid(exp->cfg, jobs);
    fea::Aggregate agg = fea::load_reports(outcome.reports);
    fea::write_aggregate(agg, exp->cfg.output_dir);
    *out = finish(std::move(agg), outcome.failures);
  });
  if (s != FEA_OK) return s;
  if (!outcome.failures.empty()) {
    return fail(FEA_ERR_RUNTIME, std::to_string(outcome.failures.size()) +
                                     " cell(s) failed; first: " + outcome.failures.front());
  }
  return FEA_OK;
}

fea_status fea_compare(const char* pattern, const char* out_dir, fea_aggregate** out) {
  if (!pattern || !out_dir || !out) {
    return fail(FEA_ERR_NULL_ARGUMENT, "pattern, out_dir and out are required");
  }
  *out = nullptr;
  return guard([&] {
    const auto paths = fea::glob_paths(pattern);
    if (paths.empty()) {
      throw fea::Error(fea::ErrorKind::kValidation,
                       std::string("no report matches '") + pattern + "'");
    }
    fea::Aggregate agg = fea::load_reports(paths);
    fea::write_aggregate(agg, out_dir);
    *out = finish(std::move(agg), {});
  });
}

void fea_aggregate_free(fea_aggregate* agg) { delete agg; }

size_t fea_aggregate_report_count(const fea_aggregate* agg) {
  return agg ? agg->agg.reports.size() : 0;
}

size_t fea_aggregate_failure_count(const fea_aggregate* agg) {
  return agg ? agg->failures.size() : 0;
}

const char* fea_aggregate_failure(const fea_aggregate* agg, size_t i) {
  if (!agg || i >= agg->failures.size()) return nullptr;
  return agg->failures[i].c_str();
}

size_t fea_aggregate_check_count(const fea_aggregate* agg) {
  return agg ? agg->agg.checks.size() : 0;
}

fea_status fea_aggregate_check(const fea_aggregate* agg, size_t i, const char** name, int* pass,
                               const char** detail) {
  if (!agg) return fail(FEA_ERR_NULL_ARGUMENT, "agg is required");
  if (i >= agg->agg.checks.size()) return fail(FEA_ERR_VALIDATION, "check index out of range");
  const auto& c = agg->agg.checks[i];
  if (name) *name = c.name.c_str();
  if (pass) *pass = c.pass ? 1 : 0;
  if (detail) *detail = c.detail.c_str();
  return FEA_OK;
}

const char* fea_aggregate_summary(const fea_aggregate* agg) {
  return agg ? agg->summary.c_str() : "";
}

int fea_aggregate_all_pass(const fea_aggregate* agg) {
  if (!agg || agg->agg.checks.empty()) return 0;
  for (const auto& c : agg->agg.checks)
    if (!c.pass) return 0;
  return 1;
}

fea_status fea_probe(const char* checkpoint_path, const char* kind, const char* config_path,
                     const char* out_dir, char** report_json) {
  if (!checkpoint_path || !kind || !out_dir) {
    return fail(FEA_ERR_NULL_ARGUMENT, "checkpoint_path, kind and out_dir are required");
  }
  return guard([&] {
    std::optional<fea::ExperimentConfig> cfg;
    if (config_path) {
      cfg = fea::load_experiment_config(config_path);
      cfg->output_dir = out_dir;
    }
    const nlohmann::json report = fea::probe_checkpoint(checkpoint_path, kind, cfg, out_dir);
    if (report_json) *report_json = dup(report.dump(2));
  });
}

}  // extern "C"
