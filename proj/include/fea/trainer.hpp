#pragma once

// Two-stage continual training (fast adaption, memory selection, balanced
// tuning), the ablation variants and the joint-training upper bound.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fea/datastream.hpp"
#include "fea/diagnostics.hpp"
#include "fea/memory.hpp"
#include "fea/model.hpp"

namespace fea {

enum class Variant {
  kFEA,
  kA1RemoveBT,
  kA2RemoveFA,
  kA3RemoveFAAndBT,
  kA4UpsampleOnly,
  kA5FAThenUpsample,
  kSupervised,
};

std::string variant_name(Variant v);
// Accepts the canonical names ("FEA", "A1", ..., "SUP") case-insensitively.
std::optional<Variant> parse_variant(const std::string& s);

struct TrainConfig {
  int epochs_fa = 10;
  int epochs_bt = 10;
  int epochs_supervised = 10;
  int batch_size = 16;
  double lr_encoder = 1e-3;
  double lr_head = 1e-3;
  int memory_size = 10;
  std::uint64_t seed = 0;
  Variant variant = Variant::kFEA;

  std::vector<std::string> errors() const;
};

struct ModelState {
  Encoder encoder;
  ClassifierHead head;
};

ModelState init_state(const EncoderConfig& cfg, std::uint64_t seed);

// What a stage trained on, for auditing the per-variant data contract.
struct StageData {
  int task = 0;
  int stage = 0;  // 1 or 2
  std::vector<const Instance*> items;
};

struct TrainHooks {
  std::function<void(const StageData&)> on_stage_data;
  // Called after stage 1 of task k, before memory selection.
  std::function<void(int task, const ModelState&)> after_stage1;
  std::function<void(int task, const ModelState&, const MemoryStore&)> after_task;
};

// Shuffled mini-batch cross-entropy training of encoder and head.
// Optimizer moments are reset on entry. When `grad_norms` is given, the
// gradient norm of every step is appended before the update.
void train_epochs(ModelState& state, const std::vector<const Instance*>& data, int epochs,
                  const TrainConfig& cfg, std::uint64_t shuffle_key,
                  std::vector<double>* grad_norms = nullptr);

// Stage 1 of the two-stage scheme: new-task data only.
void fast_adaption(ModelState& state, const std::vector<Instance>& train, int task,
                   const TrainConfig& cfg);

// Stage 2: memory only; every seen relation must be present.
void balanced_tuning(ModelState& state, const MemoryStore& memory, int task,
                     const TrainConfig& cfg, std::vector<double>* grad_norms = nullptr);

// Old-relation exemplars replicated ceil(n_r / |m_r|) times, n_r being the
// relation's original training count.
std::vector<const Instance*> upsample_memory(const MemoryStore& memory,
                                             const std::vector<int>& train_counts);

struct TaskRecord {
  int task = 0;
  int seen_relations = 0;
  double accuracy = 0.0;
  Taxonomy taxonomy;
  std::vector<double> bt_grad_norms;
  double seconds = 0.0;
};

struct RunReport {
  Variant variant = Variant::kFEA;
  std::uint64_t seed = 0;
  int memory_size = 0;
  std::vector<TaskRecord> tasks;
  std::vector<PredictionRecord> final_records;
};

// Runs task k of the stream and updates the state and memory in place.
void run_task(ModelState& state, MemoryStore& memory, const TaskStream& stream, int task,
              const TrainConfig& cfg, std::vector<double>* bt_grad_norms = nullptr,
              const TrainHooks& hooks = {});

// Full stream for cfg.variant; evaluates on all seen test data after every
// task. The final state is returned through `final_state` when given.
RunReport run_stream(const TaskStream& stream, const EncoderConfig& enc_cfg,
                     const TrainConfig& cfg, const TrainHooks& hooks = {},
                     ModelState* final_state = nullptr);

}  // namespace fea
