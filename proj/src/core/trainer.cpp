#include "fea/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <numeric>

#include "fea/error.hpp"
#include "fea/rng.hpp"

namespace fea {

namespace {

struct VariantName {
  Variant variant;
  const char* name;
};

constexpr VariantName kVariantNames[] = {
    {Variant::kFEA, "FEA"},        {Variant::kA1RemoveBT, "A1"},
    {Variant::kA2RemoveFA, "A2"},  {Variant::kA3RemoveFAAndBT, "A3"},
    {Variant::kA4UpsampleOnly, "A4"}, {Variant::kA5FAThenUpsample, "A5"},
    {Variant::kSupervised, "SUP"},
};

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::vector<const Instance*> pointers(const std::vector<Instance>& items) {
  std::vector<const Instance*> out;
  out.reserve(items.size());
  for (const Instance& inst : items) out.push_back(&inst);
  return out;
}

std::vector<const Instance*> concat(std::vector<const Instance*> a,
                                    const std::vector<const Instance*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::uint64_t stage_key(const TrainConfig& cfg, int task, int stage) {
  return derive_seed({salt::kShuffle, cfg.seed, static_cast<std::uint64_t>(task),
                      static_cast<std::uint64_t>(stage)});
}

}  // namespace

std::string variant_name(Variant v) {
  for (const auto& vn : kVariantNames)
    if (vn.variant == v) return vn.name;
  return "?";
}

std::optional<Variant> parse_variant(const std::string& s) {
  const std::string u = upper(s);
  for (const auto& vn : kVariantNames)
    if (u == vn.name) return vn.variant;
  if (u == "SUPERVISED") return Variant::kSupervised;
  return std::nullopt;
}

std::vector<std::string> TrainConfig::errors() const {
  std::vector<std::string> out;
  if (epochs_fa < 0) out.push_back("train.epochs_fa must be >= 0");
  if (epochs_bt < 0) out.push_back("train.epochs_bt must be >= 0");
  if (epochs_supervised < 0) out.push_back("train.epochs_supervised must be >= 0");
  if (batch_size < 1) out.push_back("train.batch_size must be >= 1");
  if (memory_size < 1) out.push_back("train.memory_size must be >= 1");
  if (!(lr_encoder >= 0.0)) out.push_back("train.lr_encoder must be >= 0");
  if (!(lr_head >= 0.0)) out.push_back("train.lr_head must be >= 0");
  return out;
}

ModelState init_state(const EncoderConfig& cfg, std::uint64_t seed) {
  ModelState s;
  s.encoder = Encoder(cfg, derive_seed({salt::kInit, seed}));
  s.head = make_head(cfg.hidden_width());
  return s;
}

void train_epochs(ModelState& state, const std::vector<const Instance*>& data, int epochs,
                  const TrainConfig& cfg, std::uint64_t shuffle_key,
                  std::vector<double>* grad_norms) {
  if (epochs <= 0 || data.empty()) return;
  const int vocab = state.encoder.config().vocab_size;
  std::vector<MarkedSequence> seqs;
  std::vector<int> labels;
  seqs.reserve(data.size());
  for (const Instance* inst : data) {
    const int c = state.head.class_of(inst->relation);
    if (c < 0) {
      throw Error(ErrorKind::kCoverage,
                  "relation " + std::to_string(inst->relation) + " has no head class");
    }
    seqs.push_back(insert_entity_markers(*inst, vocab));
    labels.push_back(c);
  }
  ParamStore& enc = state.encoder.params();
  ParamStore& head = state.head.params;
  enc.reset_moments();
  head.reset_moments();
  enc.zero_grad();
  head.zero_grad();
  const AdamConfig enc_adam{cfg.lr_encoder};
  const AdamConfig head_adam{cfg.lr_head};
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

  std::vector<std::size_t> order(data.size());
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng({shuffle_key, static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      Tape tape;
      std::vector<const MarkedSequence*> batch;
      std::vector<int> y;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&seqs[order[i]]);
        y.push_back(labels[order[i]]);
      }
      Var h = state.encoder.forward_batch(tape, batch);
      Var logits = tape.matmul_nt(h, tape.param(state.head.weight()));
      tape.backward(tape.softmax_cross_entropy(logits, std::move(y)));
      if (grad_norms) grad_norms->push_back(grad_norm({&enc, &head}));
      adam_step(enc, enc_adam);
      adam_step(head, head_adam);
    }
  }
}

void fast_adaption(ModelState& state, const std::vector<Instance>& train, int task,
                   const TrainConfig& cfg) {
  if (train.empty()) {
    throw Error(ErrorKind::kEmptyData, "task " + std::to_string(task) + " has no training data");
  }
  train_epochs(state, pointers(train), cfg.epochs_fa, cfg, stage_key(cfg, task, 1));
}

void balanced_tuning(ModelState& state, const MemoryStore& memory, int task,
                     const TrainConfig& cfg, std::vector<double>* grad_norms) {
  for (int r : state.head.class_relation) {
    if (!memory.contains(r)) {
      throw Error(ErrorKind::kCoverage,
                  "memory has no exemplars for relation " + std::to_string(r));
    }
  }
  train_epochs(state, memory.all(), cfg.epochs_bt, cfg, stage_key(cfg, task, 2), grad_norms);
}

std::vector<const Instance*> upsample_memory(const MemoryStore& memory,
                                             const std::vector<int>& train_counts) {
  std::vector<const Instance*> out;
  for (const auto& [r, list] : memory.exemplars) {
    if (list.empty()) continue;
    const int n = train_counts.at(r);
    const int m = static_cast<int>(list.size());
    const int reps = std::max(1, (n + m - 1) / m);
    for (int rep = 0; rep < reps; ++rep)
      for (const Instance& inst : list) out.push_back(&inst);
  }
  return out;
}

void run_task(ModelState& state, MemoryStore& memory, const TaskStream& stream, int task,
              const TrainConfig& cfg, std::vector<double>* bt_grad_norms,
              const TrainHooks& hooks) {
  const Task& t = stream.tasks.at(task);
  if (t.train.empty()) {
    throw Error(ErrorKind::kEmptyData, "task " + std::to_string(task) + " has no training data");
  }
  for (int r : t.relations) {
    if (state.head.class_of(r) >= 0) {
      throw Error(ErrorKind::kPrecondition,
                  "relation " + std::to_string(r) + " was already seen");
    }
  }
  state.head = extend_head(state.head, t.relations, task);

  const std::vector<const Instance*> fresh = pointers(t.train);
  const std::vector<const Instance*> old_memory = memory.all();
  const Variant v = cfg.variant;

  std::vector<const Instance*> stage1;
  int epochs1 = cfg.epochs_fa;
  switch (v) {
    case Variant::kFEA:
    case Variant::kA1RemoveBT:
    case Variant::kA5FAThenUpsample:
      stage1 = fresh;
      break;
    case Variant::kA2RemoveFA:
      stage1 = concat(old_memory, fresh);
      break;
    case Variant::kA3RemoveFAAndBT:
    case Variant::kA4UpsampleOnly:
      epochs1 = 0;
      break;
    case Variant::kSupervised:
      throw Error(ErrorKind::kPrecondition, "the supervised variant has no per-task stages");
  }
  if (hooks.on_stage_data) hooks.on_stage_data(StageData{task, 1, stage1});
  train_epochs(state, stage1, epochs1, cfg, stage_key(cfg, task, 1));
  if (hooks.after_stage1) hooks.after_stage1(task, state);

  // Exemplars come from the encoder as it stands after stage 1.
  std::map<int, std::vector<Instance>> picked;
  for (int r : t.relations) {
    std::vector<Instance> of_r;
    for (const Instance& inst : t.train)
      if (inst.relation == r) of_r.push_back(inst);
    picked[r] = select_memory(state.encoder, r, of_r, cfg.memory_size,
                              derive_seed({salt::kMemory, cfg.seed,
                                           static_cast<std::uint64_t>(task),
                                           static_cast<std::uint64_t>(r)}));
  }
  MemoryStore next = merge_memory(memory, picked, task);

  std::vector<const Instance*> stage2;
  bool balanced = false;
  switch (v) {
    case Variant::kFEA:
    case Variant::kA2RemoveFA:
      balanced = true;
      break;
    case Variant::kA1RemoveBT:
    case Variant::kA3RemoveFAAndBT:
      stage2 = concat(old_memory, fresh);
      break;
    case Variant::kA4UpsampleOnly:
    case Variant::kA5FAThenUpsample:
      stage2 = concat(upsample_memory(memory, stream.train_counts), fresh);
      break;
    case Variant::kSupervised:
      break;
  }
  if (balanced) {
    if (hooks.on_stage_data) hooks.on_stage_data(StageData{task, 2, next.all()});
    balanced_tuning(state, next, task, cfg, bt_grad_norms);
  } else {
    if (hooks.on_stage_data) hooks.on_stage_data(StageData{task, 2, stage2});
    train_epochs(state, stage2, cfg.epochs_bt, cfg, stage_key(cfg, task, 2));
  }
  memory = std::move(next);
  if (hooks.after_task) hooks.after_task(task, state, memory);
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

TaskRecord evaluate_stage(const ModelState& state, const TaskStream& stream, int k,
                          std::vector<PredictionRecord>* keep) {
  EvalResult ev = evaluate(state.encoder, state.head, seen_test(stream, k), stream.relation_task);
  TaskRecord rec;
  rec.task = k;
  rec.seen_relations = static_cast<int>(stream.seen_relations(k).size());
  rec.accuracy = ev.accuracy;
  rec.taxonomy = error_taxonomy(ev.records);
  if (keep) *keep = std::move(ev.records);
  return rec;
}

}  // namespace

RunReport run_stream(const TaskStream& stream, const EncoderConfig& enc_cfg,
                     const TrainConfig& cfg, const TrainHooks& hooks, ModelState* final_state) {
  stream.validate();
  const auto errs = cfg.errors();
  if (!errs.empty()) throw Error(ErrorKind::kConfig, errs.front());
  RunReport report;
  report.variant = cfg.variant;
  report.seed = cfg.seed;
  report.memory_size = cfg.memory_size;
  ModelState state = init_state(enc_cfg, cfg.seed);
  const int K = static_cast<int>(stream.tasks.size());

  if (cfg.variant == Variant::kSupervised) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<const Instance*> all;
    for (const Task& t : stream.tasks) {
      state.head = extend_head(state.head, t.relations, t.index);
      const auto p = pointers(t.train);
      all.insert(all.end(), p.begin(), p.end());
    }
    if (hooks.on_stage_data) hooks.on_stage_data(StageData{0, 1, all});
    train_epochs(state, all, cfg.epochs_supervised, cfg, stage_key(cfg, 0, 1));
    const double per_task = seconds_since(t0) / std::max(1, K);
    for (int k = 0; k < K; ++k) {
      TaskRecord rec = evaluate_stage(state, stream, k, k == K - 1 ? &report.final_records : nullptr);
      rec.seconds = per_task;
      report.tasks.push_back(std::move(rec));
    }
  } else {
    MemoryStore memory;
    memory.capacity = cfg.memory_size;
    for (int k = 0; k < K; ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<double> norms;
      run_task(state, memory, stream, k, cfg, &norms, hooks);
      const double secs = seconds_since(t0);
      TaskRecord rec = evaluate_stage(state, stream, k, k == K - 1 ? &report.final_records : nullptr);
      rec.bt_grad_norms = std::move(norms);
      rec.seconds = secs;
      report.tasks.push_back(std::move(rec));
    }
  }
  if (final_state) *final_state = std::move(state);
  return report;
}

}  // namespace fea
