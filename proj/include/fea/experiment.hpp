#pragma once

// Config-driven grids over (variant, seed, memory size): one report file
// per cell, then an aggregation pass over report files.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fea/datastream.hpp"
#include "fea/model.hpp"
#include "fea/trainer.hpp"
#include "json.hpp"

namespace fea {

inline constexpr int kReportSchemaVersion = 1;

struct CorpusSource {
  std::string path;
  StreamOptions stream;
};

struct ProbeToggles {
  bool ubc = true;
  bool frozen = false;
  bool boundary = true;
  ProbeConfig probe;
};

struct ExperimentConfig {
  std::string source = "synthetic";  // "synthetic" | "corpus"
  SyntheticConfig synthetic;
  CorpusSource corpus;
  EncoderConfig encoder;  // vocab_size is filled in from the data
  TrainConfig train;      // seed, variant and memory_size come from the grid
  std::vector<Variant> variants = {Variant::kFEA, Variant::kA1RemoveBT, Variant::kA2RemoveFA,
                                   Variant::kA3RemoveFAAndBT};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<int> memory_sizes = {10};
  ProbeToggles probes;
  bool save_checkpoints = false;
  std::string output_dir = "runs";
};

// Every violated field, prefixed with its key path; empty when usable.
std::vector<std::string> experiment_config_errors(const ExperimentConfig& cfg);

// Unknown keys and type mismatches are reported alongside range errors;
// throws a validation error listing all of them.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

// Stream for one run seed; data seeds are offset by the run seed.
TaskStream build_stream(const ExperimentConfig& cfg, std::uint64_t run_seed);

struct Cell {
  Variant variant = Variant::kFEA;
  std::uint64_t seed = 0;
  int memory_size = 10;
};

std::vector<Cell> grid_cells(const ExperimentConfig& cfg);
std::string cell_name(const Cell& cell);

// Runs one cell and returns its report. Timings are kept out of the report
// so identical configs give identical bytes; they go to `timings` instead.
nlohmann::json run_cell(const ExperimentConfig& cfg, const Cell& cell,
                        nlohmann::json* timings = nullptr,
                        const std::string& checkpoint_path = "");

struct GridOutcome {
  std::vector<std::string> reports;
  std::vector<std::string> failures;  // "cell: message"
};

// Writes <output_dir>/reports/<cell>.json (+ timing and checkpoint files)
// using up to `jobs` worker threads, then aggregates.
GridOutcome run_grid(const ExperimentConfig& cfg, int jobs);

struct DirectionCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct Aggregate {
  std::vector<nlohmann::json> reports;
  std::vector<DirectionCheck> checks;
};

// Loads reports (schema version checked) in a stable order.
Aggregate load_reports(const std::vector<std::string>& paths);
std::vector<std::string> glob_paths(const std::string& pattern);

// accuracy.csv, accuracy_grid.csv, taxonomy.csv, taxonomy_grid.csv,
// confusion.csv and summary.md under `out_dir`.
void write_aggregate(Aggregate& agg, const std::string& out_dir);
// Mean +- std final accuracy per (variant, memory size), then the checks.
std::string summary_markdown(const Aggregate& agg);

std::vector<DirectionCheck> direction_checks(const std::vector<nlohmann::json>& reports);

// Probe a saved checkpoint against the stream described by its metadata.
nlohmann::json probe_checkpoint(const std::string& checkpoint_path, const std::string& kind,
                                const std::optional<ExperimentConfig>& override_cfg,
                                const std::string& out_dir);

}  // namespace fea
