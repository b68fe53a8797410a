// fea: run experiment grids, probe checkpoints, aggregate reports.
//
// Exit codes: 0 success, 1 validation, 2 runtime failure, 3 a direction
// check failed under --check.

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fea/fea.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheck = 3;

int report_error(fea_status s) {
  std::fprintf(stderr, "error (%s): %s\n", fea_status_name(s), fea_last_error());
  return s == FEA_ERR_VALIDATION || s == FEA_ERR_NULL_ARGUMENT ? kExitValidation : kExitRuntime;
}

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (const auto& x : xs) out += (out.empty() ? "" : ",") + x;
  return out;
}

int print_aggregate(const fea_aggregate* agg, bool check) {
  std::printf("%s", fea_aggregate_summary(agg));
  for (size_t i = 0; i < fea_aggregate_failure_count(agg); ++i)
    std::fprintf(stderr, "cell failed: %s\n", fea_aggregate_failure(agg, i));
  if (check && !fea_aggregate_all_pass(agg)) {
    std::fprintf(stderr, "direction checks failed\n");
    return kExitCheck;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual relation-extraction lab: two-stage training, ablations, diagnostics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fea_version()));

  std::string config_path, out_dir;
  int jobs = 1;
  bool check = false;
  std::vector<std::string> variants;
  std::vector<unsigned long long> seeds;
  std::vector<int> sizes;
  auto* run = app.add_subcommand("run", "Run the (variant x seed x memory size) grid");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  run->add_option("--out", out_dir, "Override output_dir");
  run->add_option("--variants", variants, "Override variants")->delimiter(',');
  run->add_option("--seeds", seeds, "Override seeds")->delimiter(',');
  run->add_option("--memory-sizes", sizes, "Override memory sizes")->delimiter(',');
  run->add_flag("--check", check, "Exit 3 when a direction check fails");

  std::string checkpoint, kind, probe_config, probe_out = ".";
  auto* probe = app.add_subcommand("probe", "Probe a saved checkpoint");
  probe->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  probe->add_option("--kind", kind, "ubc | frozen | boundary")
      ->required()
      ->check(CLI::IsMember({"ubc", "frozen", "boundary"}));
  probe->add_option("--config", probe_config, "Config to rebuild the data (default: stored)");
  probe->add_option("--out", probe_out, "Output directory");

  std::string pattern, compare_out = ".";
  bool compare_check = false;
  auto* compare = app.add_subcommand("compare", "Aggregate report files");
  compare->add_option("pattern", pattern, "Glob of report JSON files")->required();
  compare->add_option("--out", compare_out, "Output directory");
  compare->add_flag("--check", compare_check, "Exit 3 when a direction check fails");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  if (*run) {
    fea_experiment* exp = nullptr;
    fea_status s = fea_experiment_load(config_path.c_str(), &exp);
    if (s != FEA_OK) return report_error(s);
    if (s == FEA_OK && !out_dir.empty()) s = fea_experiment_set_output_dir(exp, out_dir.c_str());
    if (s == FEA_OK && !variants.empty())
      s = fea_experiment_set_variants(exp, join(variants).c_str());
    if (s == FEA_OK && !seeds.empty()) s = fea_experiment_set_seeds(exp, seeds.data(), seeds.size());
    if (s == FEA_OK && !sizes.empty())
      s = fea_experiment_set_memory_sizes(exp, sizes.data(), sizes.size());
    if (s != FEA_OK) {
      fea_experiment_free(exp);
      return report_error(s);
    }
    fea_aggregate* agg = nullptr;
    s = fea_experiment_run(exp, jobs, &agg);
    fea_experiment_free(exp);
    int code = kExitOk;
    if (agg) code = print_aggregate(agg, check);
    fea_aggregate_free(agg);
    if (s != FEA_OK) return report_error(s);
    return code;
  }

  if (*probe) {
    char* json = nullptr;
    const fea_status s = fea_probe(checkpoint.c_str(), kind.c_str(),
                                   probe_config.empty() ? nullptr : probe_config.c_str(),
                                   probe_out.c_str(), &json);
    if (s != FEA_OK) return report_error(s);
    std::printf("%s\n", json);
    fea_string_free(json);
    return kExitOk;
  }

  fea_aggregate* agg = nullptr;
  const fea_status s = fea_compare(pattern.c_str(), compare_out.c_str(), &agg);
  if (s != FEA_OK) return report_error(s);
  const int code = print_aggregate(agg, compare_check);
  fea_aggregate_free(agg);
  return code;
}
