#include "fea/experiment.hpp"

#include <glob.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "fea/diagnostics.hpp"
#include "fea/error.hpp"
#include "fea/rng.hpp"

namespace fea {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Reads known keys of one object and remembers the rest as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path, std::vector<std::string>& errs)
      : j_(j), path_(std::move(path)), errs_(errs) {
    if (!j_.is_object()) errs_.push_back(where() + " must be an object");
  }
  ~Fields() {
    if (!j_.is_object()) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) errs_.push_back(key(k) + ": unknown key");
  }

  template <typename T>
  void get(const std::string& k, T& out) {
    seen_.insert(k);
    if (!j_.is_object() || !j_.contains(k)) return;
    const json& v = j_.at(k);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return type_error(k, "a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) return type_error(k, "an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
          return type_error(k, "a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return type_error(k, "a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return type_error(k, "a string");
    }
    try {
      out = v.get<T>();
    } catch (const json::exception&) {
      type_error(k, "of the expected type");
    }
  }

  const json* sub(const std::string& k) {
    seen_.insert(k);
    if (!j_.is_object() || !j_.contains(k)) return nullptr;
    return &j_.at(k);
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  void type_error(const std::string& k, const char* what) {
    errs_.push_back(key(k) + " must be " + what);
  }

  const json& j_;
  std::string path_;
  std::vector<std::string>& errs_;
  std::set<std::string> seen_;
};

json synthetic_json(const SyntheticConfig& s) {
  json pairs = json::array();
  for (const auto& [a, b] : s.pair_tasks) pairs.push_back({a, b});
  return json{{"relations", s.relations},
              {"tasks", s.tasks},
              {"train_per_relation", s.train_per_relation},
              {"val_per_relation", s.val_per_relation},
              {"test_per_relation", s.test_per_relation},
              {"vocab_size", s.vocab_size},
              {"sequence_length", s.sequence_length},
              {"signature_length", s.signature_length},
              {"similar_pairs", s.similar_pairs},
              {"distinct_tokens", s.distinct_tokens},
              {"pair_tasks", pairs},
              {"late_pairs", s.late_pairs},
              {"noise_rate", s.noise_rate},
              {"distinct_rate", s.distinct_rate},
              {"older_distinct_rate", s.older_distinct_rate},
              {"leak_rate", s.leak_rate},
              {"seed", s.seed}};
}

void read_synthetic(const json& j, SyntheticConfig& s, std::vector<std::string>& errs) {
  Fields f(j, "data.synthetic", errs);
  f.get("relations", s.relations);
  f.get("tasks", s.tasks);
  f.get("train_per_relation", s.train_per_relation);
  f.get("val_per_relation", s.val_per_relation);
  f.get("test_per_relation", s.test_per_relation);
  f.get("vocab_size", s.vocab_size);
  f.get("sequence_length", s.sequence_length);
  f.get("signature_length", s.signature_length);
  f.get("similar_pairs", s.similar_pairs);
  f.get("distinct_tokens", s.distinct_tokens);
  f.get("late_pairs", s.late_pairs);
  f.get("noise_rate", s.noise_rate);
  f.get("distinct_rate", s.distinct_rate);
  f.get("older_distinct_rate", s.older_distinct_rate);
  f.get("leak_rate", s.leak_rate);
  f.get("seed", s.seed);
  if (const json* p = f.sub("pair_tasks")) {
    s.pair_tasks.clear();
    bool ok = p->is_array();
    if (ok) {
      for (const json& e : *p) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() ||
            !e[1].is_number_integer()) {
          ok = false;
          break;
        }
        s.pair_tasks.emplace_back(e[0].get<int>(), e[1].get<int>());
      }
    }
    if (!ok) errs.push_back("data.synthetic.pair_tasks must be a list of [old, new] task pairs");
  }
}

json stream_options_json(const StreamOptions& o) {
  return json{{"tasks", o.tasks},
              {"split", {o.split.train, o.split.val, o.split.test}},
              {"seed", o.seed},
              {"train_cap", o.train_cap},
              {"test_cap", o.test_cap}};
}

void read_corpus(const json& j, CorpusSource& c, std::vector<std::string>& errs) {
  Fields f(j, "data.corpus", errs);
  f.get("path", c.path);
  f.get("tasks", c.stream.tasks);
  f.get("seed", c.stream.seed);
  f.get("train_cap", c.stream.train_cap);
  f.get("test_cap", c.stream.test_cap);
  if (const json* s = f.sub("split")) {
    if (s->is_array() && s->size() == 3 && (*s)[0].is_number() && (*s)[1].is_number() &&
        (*s)[2].is_number()) {
      c.stream.split = SplitRatio{(*s)[0].get<double>(), (*s)[1].get<double>(),
                                  (*s)[2].get<double>()};
    } else {
      errs.push_back("data.corpus.split must be [train, val, test]");
    }
  }
}

std::string num(double x) { return json(x).dump(); }

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

void write_atomic(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIo, "cannot write '" + tmp.string() + "'");
    out << text;
    if (!out) throw Error(ErrorKind::kIo, "failed writing '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

std::vector<const Instance*> pair_test(const TaskStream& stream, const SimilarPair& p) {
  std::vector<const Instance*> out;
  for (int r : {p.old_relation, p.new_relation})
    for (const Instance& inst : stream.tasks.at(stream.relation_task.at(r)).test)
      if (inst.relation == r) out.push_back(&inst);
  return out;
}

std::uint64_t probe_seed(std::uint64_t seed) { return derive_seed({salt::kProbe, seed}); }

}  // namespace

std::vector<std::string> experiment_config_errors(const ExperimentConfig& cfg) {
  std::vector<std::string> errs;
  if (cfg.source == "synthetic") {
    for (const auto& e : synthetic_config_errors(cfg.synthetic))
      errs.push_back("data.synthetic: " + e);
  } else if (cfg.source == "corpus") {
    if (cfg.corpus.path.empty()) errs.push_back("data.corpus.path must be set");
    if (cfg.corpus.stream.tasks < 1) errs.push_back("data.corpus.tasks must be >= 1");
    const SplitRatio& s = cfg.corpus.stream.split;
    if (!(s.train > 0) || !(s.val >= 0) || !(s.test > 0))
      errs.push_back("data.corpus.split needs positive train and test parts");
  } else {
    errs.push_back("data.source must be \"synthetic\" or \"corpus\"");
  }
  EncoderConfig enc = cfg.encoder;
  enc.vocab_size = std::max(1, enc.vocab_size);
  for (const auto& e : enc.errors()) errs.push_back("encoder: " + e);
  if (cfg.source == "synthetic" && cfg.encoder.max_length < cfg.synthetic.sequence_length + kMarkerCount)
    errs.push_back("encoder.max_length must cover sequence_length + 4 markers");
  for (const auto& e : cfg.train.errors()) errs.push_back(e);
  if (cfg.variants.empty()) errs.push_back("variants must list at least one variant");
  if (cfg.seeds.empty()) errs.push_back("seeds must list at least one seed");
  if (cfg.memory_sizes.empty()) errs.push_back("memory_sizes must list at least one size");
  for (int b : cfg.memory_sizes)
    if (b < 1) errs.push_back("memory_sizes entries must be >= 1");
  if (cfg.probes.probe.epochs < 0) errs.push_back("probes.epochs must be >= 0");
  if (cfg.probes.probe.batch_size < 1) errs.push_back("probes.batch_size must be >= 1");
  if (!(cfg.probes.probe.lr >= 0)) errs.push_back("probes.lr must be >= 0");
  if (cfg.output_dir.empty()) {
    errs.push_back("output_dir must be set");
  } else {
    std::error_code ec;
    fs::create_directories(cfg.output_dir, ec);
    const fs::path probe = fs::path(cfg.output_dir) / ".write_test";
    std::ofstream out(probe);
    if (ec || !out) {
      errs.push_back("output_dir '" + cfg.output_dir + "' is not writable");
    } else {
      out.close();
      fs::remove(probe, ec);
    }
  }
  return errs;
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig cfg;
  std::vector<std::string> errs;
  {
    Fields top(j, "", errs);
    int version = kReportSchemaVersion;
    top.get("schema_version", version);
    if (version != kReportSchemaVersion)
      errs.push_back("schema_version " + std::to_string(version) + " is not supported");
    if (const json* d = top.sub("data")) {
      Fields f(*d, "data", errs);
      f.get("source", cfg.source);
      if (const json* s = f.sub("synthetic")) read_synthetic(*s, cfg.synthetic, errs);
      if (const json* c = f.sub("corpus")) read_corpus(*c, cfg.corpus, errs);
    }
    if (const json* e = top.sub("encoder")) {
      Fields f(*e, "encoder", errs);
      f.get("d_model", cfg.encoder.d_model);
      f.get("blocks", cfg.encoder.blocks);
      f.get("heads", cfg.encoder.heads);
      f.get("ff_width", cfg.encoder.ff_width);
      f.get("max_length", cfg.encoder.max_length);
      f.get("ln_eps", cfg.encoder.ln_eps);
    }
    if (const json* t = top.sub("train")) {
      Fields f(*t, "train", errs);
      f.get("epochs_fa", cfg.train.epochs_fa);
      f.get("epochs_bt", cfg.train.epochs_bt);
      f.get("epochs_supervised", cfg.train.epochs_supervised);
      f.get("batch_size", cfg.train.batch_size);
      f.get("lr_encoder", cfg.train.lr_encoder);
      f.get("lr_head", cfg.train.lr_head);
    }
    if (const json* v = top.sub("variants")) {
      cfg.variants.clear();
      if (!v->is_array()) {
        errs.push_back("variants must be a list of names");
      } else {
        for (const json& e : *v) {
          const auto parsed = e.is_string() ? parse_variant(e.get<std::string>()) : std::nullopt;
          if (!parsed) {
            errs.push_back("variants: unknown variant " + e.dump());
          } else {
            cfg.variants.push_back(*parsed);
          }
        }
      }
    }
    if (const json* s = top.sub("seeds")) {
      cfg.seeds.clear();
      if (!s->is_array()) errs.push_back("seeds must be a list of non-negative integers");
      else
        for (const json& e : *s) {
          if (!e.is_number_unsigned()) {
            errs.push_back("seeds: " + e.dump() + " is not a non-negative integer");
          } else {
            cfg.seeds.push_back(e.get<std::uint64_t>());
          }
        }
    }
    if (const json* m = top.sub("memory_sizes")) {
      cfg.memory_sizes.clear();
      if (!m->is_array()) errs.push_back("memory_sizes must be a list of integers");
      else
        for (const json& e : *m) {
          if (!e.is_number_integer()) {
            errs.push_back("memory_sizes: " + e.dump() + " is not an integer");
          } else {
            cfg.memory_sizes.push_back(e.get<int>());
          }
        }
    }
    if (const json* p = top.sub("probes")) {
      Fields f(*p, "probes", errs);
      f.get("ubc", cfg.probes.ubc);
      f.get("frozen", cfg.probes.frozen);
      f.get("boundary", cfg.probes.boundary);
      f.get("epochs", cfg.probes.probe.epochs);
      f.get("lr", cfg.probes.probe.lr);
      f.get("batch_size", cfg.probes.probe.batch_size);
    }
    top.get("save_checkpoints", cfg.save_checkpoints);
    top.get("output_dir", cfg.output_dir);
  }
  for (auto& e : experiment_config_errors(cfg)) errs.push_back(std::move(e));
  if (!errs.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw Error(ErrorKind::kValidation, msg);
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kValidation, "config '" + path + "' is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

json to_json(const ExperimentConfig& cfg) {
  json variants = json::array();
  for (Variant v : cfg.variants) variants.push_back(variant_name(v));
  json enc = to_json(cfg.encoder);
  enc.erase("vocab_size");
  json corpus = stream_options_json(cfg.corpus.stream);
  corpus["path"] = cfg.corpus.path;
  return json{
      {"schema_version", kReportSchemaVersion},
      {"data", {{"source", cfg.source}, {"synthetic", synthetic_json(cfg.synthetic)},
                {"corpus", corpus}}},
      {"encoder", enc},
      {"train",
       {{"epochs_fa", cfg.train.epochs_fa},
        {"epochs_bt", cfg.train.epochs_bt},
        {"epochs_supervised", cfg.train.epochs_supervised},
        {"batch_size", cfg.train.batch_size},
        {"lr_encoder", cfg.train.lr_encoder},
        {"lr_head", cfg.train.lr_head}}},
      {"variants", variants},
      {"seeds", cfg.seeds},
      {"memory_sizes", cfg.memory_sizes},
      {"probes",
       {{"ubc", cfg.probes.ubc},
        {"frozen", cfg.probes.frozen},
        {"boundary", cfg.probes.boundary},
        {"epochs", cfg.probes.probe.epochs},
        {"lr", cfg.probes.probe.lr},
        {"batch_size", cfg.probes.probe.batch_size}}},
      {"save_checkpoints", cfg.save_checkpoints},
      {"output_dir", cfg.output_dir}};
}

TaskStream build_stream(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  if (cfg.source == "synthetic") {
    SyntheticConfig s = cfg.synthetic;
    s.seed += run_seed;
    return generate_synthetic_stream(s);
  }
  StreamOptions o = cfg.corpus.stream;
  o.seed += run_seed;
  return build_task_stream(load_corpus(cfg.corpus.path), o);
}

std::vector<Cell> grid_cells(const ExperimentConfig& cfg) {
  std::vector<Cell> cells;
  for (int b : cfg.memory_sizes)
    for (Variant v : cfg.variants)
      for (std::uint64_t s : cfg.seeds) cells.push_back(Cell{v, s, b});
  return cells;
}

std::string cell_name(const Cell& cell) {
  return variant_name(cell.variant) + "_s" + std::to_string(cell.seed) + "_b" +
         std::to_string(cell.memory_size);
}

json run_cell(const ExperimentConfig& cfg, const Cell& cell, json* timings,
              const std::string& checkpoint_path) {
  const TaskStream stream = build_stream(cfg, cell.seed);
  EncoderConfig enc = cfg.encoder;
  enc.vocab_size = stream.vocab_size;
  TrainConfig tc = cfg.train;
  tc.seed = cell.seed;
  tc.variant = cell.variant;
  tc.memory_size = cell.memory_size;

  ModelState state;
  const RunReport rr = run_stream(stream, enc, tc, {}, &state);
  const int K = static_cast<int>(stream.tasks.size());

  json tasks = json::array();
  std::vector<double> bt_means;
  for (const TaskRecord& t : rr.tasks) {
    json row{{"task", t.task},
             {"seen_relations", t.seen_relations},
             {"accuracy", t.accuracy},
             {"taxonomy", to_json(t.taxonomy)},
             {"bt_grad_norm_steps", t.bt_grad_norms.size()}};
    if (t.bt_grad_norms.empty()) {
      row["bt_grad_norm_mean"] = nullptr;
    } else {
      const double m = mean_gradient_norm(t.bt_grad_norms);
      row["bt_grad_norm_mean"] = m;
      if (t.task > 0) bt_means.push_back(m);
    }
    tasks.push_back(std::move(row));
  }
  json confusion = json::array();
  for (const auto& c : confusion_pairs(rr.final_records, 10)) {
    confusion.push_back(
        {{"gold", c.gold}, {"predicted", c.predicted}, {"count", c.count}, {"rate", c.rate}});
  }
  json pairs = json::array();
  for (const auto& p : stream.similar_pairs) pairs.push_back({p.old_relation, p.new_relation});

  json report{
      {"schema_version", kReportSchemaVersion},
      {"config", to_json(cfg)},
      {"cell",
       {{"variant", variant_name(cell.variant)},
        {"seed", cell.seed},
        {"memory_size", cell.memory_size}}},
      {"stream",
       {{"relations", stream.relation_count()}, {"tasks", K}, {"similar_pairs", pairs}}},
      {"tasks", tasks},
      {"final",
       {{"accuracy", rr.tasks.back().accuracy},
        {"taxonomy", to_json(rr.tasks.back().taxonomy)},
        {"confusion_pairs", confusion}}},
      {"bt_grad_norm_mean", bt_means.empty() ? json(nullptr) : json(mean_of(bt_means))},
  };

  json probes = json::object();
  ProbeConfig pc = cfg.probes.probe;
  pc.seed = probe_seed(cell.seed);
  if (cfg.probes.ubc && cell.variant != Variant::kSupervised) {
    const ProbeResult ubc = ubc_probe(state.encoder, stream, {K - 1}, pc);
    probes["ubc"] = {{"stage", K - 1},
                     {"accuracy", ubc.accuracy.front()},
                     {"original", rr.tasks.back().accuracy}};
  }
  if (cfg.probes.frozen) {
    const ProbeResult fr =
        frozen_encoder_supervised(enc, derive_seed({salt::kInit, cell.seed}), stream, pc);
    probes["frozen"] = {{"stage", K - 1}, {"accuracy", fr.accuracy.front()}};
  }
  if (cfg.probes.boundary && !stream.similar_pairs.empty()) {
    json rows = json::array();
    std::vector<double> skews;
    for (const auto& p : stream.similar_pairs) {
      const BoundaryExport b =
          boundary_export(state.encoder, state.head, p.old_relation, p.new_relation,
                          pair_test(stream, p));
      skews.push_back(b.skew);
      rows.push_back({{"old_relation", p.old_relation},
                      {"new_relation", p.new_relation},
                      {"skew", b.skew},
                      {"gold_train_accuracy", b.gold_train_accuracy}});
    }
    probes["boundary"] = {{"pairs", rows}, {"mean_skew", mean_of(skews)}};
  }
  report["probes"] = probes;

  if (timings) {
    json secs = json::array();
    for (const TaskRecord& t : rr.tasks) secs.push_back(t.seconds);
    *timings = {{"cell", report["cell"]}, {"seconds_per_task", secs}};
  }
  if (!checkpoint_path.empty()) {
    Checkpoint ck{state.encoder, state.head, stream.relation_names,
                  {{"config", to_json(cfg)}, {"cell", report["cell"]}, {"stage", K - 1}}};
    fs::create_directories(fs::path(checkpoint_path).parent_path());
    save_checkpoint(checkpoint_path, ck);
  }
  return report;
}

GridOutcome run_grid(const ExperimentConfig& cfg, int jobs) {
  const std::vector<Cell> cells = grid_cells(cfg);
  const fs::path root(cfg.output_dir);
  fs::create_directories(root / "reports");
  std::vector<std::string> paths(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const std::string name = cell_name(cells[i]);
      try {
        json timings;
        const std::string ckpt =
            cfg.save_checkpoints ? (root / "checkpoints" / (name + ".ckpt")).string() : "";
        const json report = run_cell(cfg, cells[i], &timings, ckpt);
        const fs::path out = root / "reports" / (name + ".json");
        write_atomic(out, report.dump(2) + "\n");
        write_atomic(root / "timings" / (name + ".json"), timings.dump(2) + "\n");
        paths[i] = out.string();
      } catch (const std::exception& e) {
        errors[i] = name + ": " + e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  GridOutcome outcome;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!paths[i].empty()) outcome.reports.push_back(paths[i]);
    if (!errors[i].empty()) outcome.failures.push_back(errors[i]);
  }
  return outcome;
}

std::vector<std::string> glob_paths(const std::string& pattern) {
  glob_t g{};
  std::vector<std::string> out;
  if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

struct Key {
  std::string variant;
  int memory_size;
  std::uint64_t seed;
  bool operator<(const Key& o) const {
    return std::tie(memory_size, variant, seed) < std::tie(o.memory_size, o.variant, o.seed);
  }
};

Key key_of(const json& r) {
  const json& c = r.at("cell");
  return Key{c.at("variant").get<std::string>(), c.at("memory_size").get<int>(),
             c.at("seed").get<std::uint64_t>()};
}

int variant_rank(const std::string& v) {
  const auto p = parse_variant(v);
  return p ? static_cast<int>(*p) : 100;
}

// reports grouped by (memory size, variant) with seeds in order
using Groups = std::map<std::pair<int, int>, std::vector<const json*>>;

Groups group(const std::vector<json>& reports) {
  Groups g;
  for (const json& r : reports) {
    const Key k = key_of(r);
    g[{k.memory_size, variant_rank(k.variant)}].push_back(&r);
  }
  return g;
}

// Per-seed final values for a variant at one memory size.
std::map<std::uint64_t, const json*> by_seed(const std::vector<json>& reports,
                                             const std::string& variant, int b) {
  std::map<std::uint64_t, const json*> out;
  for (const json& r : reports) {
    const Key k = key_of(r);
    if (k.variant == variant && k.memory_size == b) out[k.seed] = &r;
  }
  return out;
}

double final_acc(const json& r) { return r.at("final").at("accuracy").get<double>(); }

std::string pct(double x) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(2);
  o << 100.0 * x;
  return o.str();
}

}  // namespace

Aggregate load_reports(const std::vector<std::string>& paths) {
  Aggregate agg;
  for (const auto& p : paths) {
    std::ifstream in(p);
    if (!in) throw Error(ErrorKind::kIo, "cannot open report '" + p + "'");
    json r;
    try {
      r = json::parse(in);
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::kParse, "report '" + p + "': " + e.what());
    }
    if (!r.is_object() || !r.contains("schema_version") ||
        r.at("schema_version") != kReportSchemaVersion) {
      throw Error(ErrorKind::kVersion,
                  "report '" + p + "' has schema version " +
                      (r.is_object() && r.contains("schema_version")
                           ? r.at("schema_version").dump()
                           : std::string("(none)")) +
                      ", expected " + std::to_string(kReportSchemaVersion));
    }
    agg.reports.push_back(std::move(r));
  }
  std::stable_sort(agg.reports.begin(), agg.reports.end(),
                   [](const json& a, const json& b) { return key_of(a) < key_of(b); });
  agg.checks = direction_checks(agg.reports);
  return agg;
}

std::vector<DirectionCheck> direction_checks(const std::vector<json>& reports) {
  std::vector<DirectionCheck> checks;
  std::set<int> sizes;
  for (const json& r : reports) sizes.insert(key_of(r).memory_size);

  for (int b : sizes) {
    const std::string at = " (B=" + std::to_string(b) + ")";
    std::map<std::string, std::vector<double>> finals;
    for (const json& r : reports) {
      const Key k = key_of(r);
      if (k.memory_size == b) finals[k.variant].push_back(final_acc(r));
    }
    auto mean = [&](const std::string& v) { return mean_of(finals[v]); };
    const bool fea = finals.count("FEA") > 0;
    if (fea && finals.size() > 1) {
      bool best = true;
      std::string others;
      for (const auto& [v, xs] : finals) {
        if (v == "FEA" || v == "SUP") continue;
        best = best && mean("FEA") > mean_of(xs);
        others += " " + v + "=" + pct(mean_of(xs));
      }
      checks.push_back({"FEA highest mean final accuracy" + at, best,
                        "FEA=" + pct(mean("FEA")) + others});
    }
    const bool a1 = finals.count("A1") > 0, a2 = finals.count("A2") > 0,
               a3 = finals.count("A3") > 0;
    if (fea && a1 && a2) {
      const double f = mean("FEA"), x1 = mean("A1"), x2 = mean("A2");
      checks.push_back({"FEA > A2 > A1" + at, f > x2 && x2 > x1,
                        "FEA=" + pct(f) + " A2=" + pct(x2) + " A1=" + pct(x1)});
      checks.push_back({"FEA - A1 >= 5 points" + at, 100.0 * (f - x1) >= 5.0,
                        "gap " + pct(f - x1)});
      checks.push_back({"FEA - A2 >= 1 point" + at, 100.0 * (f - x2) >= 1.0,
                        "gap " + pct(f - x2)});
    }
    if (a1 && a3) {
      const double d = std::fabs(mean("A1") - mean("A3"));
      checks.push_back({"A1 ~ A3 within 2 points" + at, 100.0 * d <= 2.0, "diff " + pct(d)});
    }

    const auto fea_s = by_seed(reports, "FEA", b);
    const auto a1_s = by_seed(reports, "A1", b);
    const auto a2_s = by_seed(reports, "A2", b);
    auto count_seeds = [&](const std::map<std::uint64_t, const json*>& x,
                           const std::map<std::uint64_t, const json*>& y, auto pred,
                           std::size_t& n) {
      std::size_t hits = 0;
      n = 0;
      for (const auto& [s, rx] : x) {
        const auto it = y.find(s);
        if (it == y.end()) continue;
        ++n;
        if (pred(*rx, *it->second)) ++hits;
      }
      return hits;
    };
    auto majority = [](std::size_t hits, std::size_t n) { return n > 0 && 5 * hits >= 4 * n; };

    if (!fea_s.empty() && !a1_s.empty()) {
      std::size_t n = 0;
      const std::size_t hits = count_seeds(
          a1_s, fea_s,
          [](const json& x, const json& y) {
            return x["final"]["taxonomy"]["latter_share"].get<double>() >
                   y["final"]["taxonomy"]["latter_share"].get<double>();
          },
          n);
      checks.push_back({"A1 latter share > FEA latter share in >= 80% of seeds" + at,
                        majority(hits, n),
                        std::to_string(hits) + "/" + std::to_string(n) + " seeds"});
    }
    if (!a1_s.empty()) {
      std::size_t plural = 0;
      for (const auto& [s, r] : a1_s) {
        const json& t = (*r)["final"]["taxonomy"];
        const double l = t["latter_share"], f = t["former_share"], i = t["inner_share"];
        if (l > f && l > i) ++plural;
      }
      checks.push_back({"latter is A1's plurality error class in every seed" + at,
                        plural == a1_s.size(),
                        std::to_string(plural) + "/" + std::to_string(a1_s.size()) + " seeds"});
    }
    if (!fea_s.empty() && !a2_s.empty()) {
      std::size_t n = 0;
      const std::size_t hits = count_seeds(
          fea_s, a2_s,
          [](const json& x, const json& y) {
            return !x["bt_grad_norm_mean"].is_null() && !y["bt_grad_norm_mean"].is_null() &&
                   x["bt_grad_norm_mean"].get<double>() >=
                       2.0 * y["bt_grad_norm_mean"].get<double>();
          },
          n);
      checks.push_back({"FEA BT gradient norm >= 2x A2 in >= 80% of seeds" + at,
                        majority(hits, n),
                        std::to_string(hits) + "/" + std::to_string(n) + " seeds"});
    }
    auto has_probe = [](const std::map<std::uint64_t, const json*>& m, const char* p) {
      if (m.empty()) return false;
      for (const auto& [s, r] : m)
        if (!(*r)["probes"].contains(p)) return false;
      return true;
    };
    if (has_probe(fea_s, "ubc") && has_probe(a1_s, "ubc")) {
      bool up = true;
      std::vector<double> uf, ua;
      for (const auto* m : {&fea_s, &a1_s})
        for (const auto& [s, r] : *m) {
          const json& u = (*r)["probes"]["ubc"];
          up = up && u["accuracy"].get<double>() >= u["original"].get<double>();
          (m == &fea_s ? uf : ua).push_back(u["accuracy"].get<double>());
        }
      checks.push_back({"UBC >= original for FEA and A1 in every seed" + at, up, ""});
      std::size_t n = 0;
      const std::size_t hits = count_seeds(
          a1_s, fea_s,
          [](const json& x, const json& y) {
            const json& ux = x["probes"]["ubc"];
            const json& uy = y["probes"]["ubc"];
            return ux["accuracy"].get<double>() - ux["original"].get<double>() >
                   uy["accuracy"].get<double>() - uy["original"].get<double>();
          },
          n);
      checks.push_back({"A1 UBC gain > FEA UBC gain in >= 80% of seeds" + at,
                        majority(hits, n),
                        std::to_string(hits) + "/" + std::to_string(n) + " seeds"});
      const double d = std::fabs(mean_of(uf) - mean_of(ua));
      checks.push_back({"UBC FEA and UBC A1 within 3 points" + at, 100.0 * d <= 3.0,
                        "FEA=" + pct(mean_of(uf)) + " A1=" + pct(mean_of(ua))});
    }
    if (has_probe(fea_s, "boundary") && has_probe(a1_s, "boundary")) {
      std::size_t n = 0;
      const std::size_t hits = count_seeds(
          a1_s, fea_s,
          [](const json& x, const json& y) {
            return x["probes"]["boundary"]["mean_skew"].get<double>() >
                   y["probes"]["boundary"]["mean_skew"].get<double>();
          },
          n);
      checks.push_back({"A1 boundary skew > FEA skew in >= 80% of seeds" + at,
                        majority(hits, n),
                        std::to_string(hits) + "/" + std::to_string(n) + " seeds"});
    }
  }

  if (sizes.size() > 1) {
    std::map<int, std::map<std::uint64_t, double>> fea;
    for (const json& r : reports) {
      const Key k = key_of(r);
      if (k.variant == "FEA") fea[k.memory_size][k.seed] = final_acc(r);
    }
    if (fea.size() > 1) {
      bool ok = true;
      std::size_t compared = 0;
      for (auto it = std::next(fea.begin()); it != fea.end(); ++it) {
        const auto& lo = std::prev(it)->second;
        for (const auto& [s, acc] : it->second) {
          const auto f = lo.find(s);
          if (f == lo.end()) continue;
          ++compared;
          ok = ok && acc >= f->second;
        }
      }
      std::string detail;
      bool mean_ok = true;
      double prev = -1.0;
      for (const auto& [b, m] : fea) {
        std::vector<double> xs;
        for (const auto& [s, a] : m) xs.push_back(a);
        detail += "B=" + std::to_string(b) + ":" + pct(mean_of(xs)) + " ";
        mean_ok = mean_ok && mean_of(xs) >= prev;
        prev = mean_of(xs);
      }
      checks.push_back({"FEA mean final accuracy non-decreasing in memory size", mean_ok, detail});
      checks.push_back({"FEA final accuracy non-decreasing in memory size, per seed",
                        ok && compared > 0, detail});
    }
  }
  return checks;
}

std::string summary_markdown(const Aggregate& agg) {
  std::ostringstream md;
  md << "# Run summary\n\n"
     << "| variant | B | seeds | final accuracy (mean ± std) |\n|---|---|---|---|\n";
  for (const auto& [gk, rs] : group(agg.reports)) {
    std::vector<double> fin;
    for (const json* r : rs) fin.push_back(final_acc(*r));
    md << "| " << key_of(*rs.front()).variant << " | " << gk.first << " | " << rs.size()
       << " | " << pct(mean_of(fin)) << " ± " << pct(std_of(fin)) << " |\n";
  }
  md << "\n## Direction checks\n\n";
  if (agg.checks.empty()) md << "No checks apply to this set of reports.\n";
  for (const auto& c : agg.checks) {
    md << "- [" << (c.pass ? "PASS" : "FAIL") << "] " << c.name;
    if (!c.detail.empty()) md << ": " << c.detail;
    md << "\n";
  }
  return md.str();
}

void write_aggregate(Aggregate& agg, const std::string& out_dir) {
  const fs::path root(out_dir);
  fs::create_directories(root);
  std::ostringstream acc, tax, conf, grid, tgrid;
  acc << "variant,seed,memory_size,task,accuracy\n";
  tax << "variant,seed,memory_size,task,error_rate,latter,former,inner\n";
  conf << "variant,seed,memory_size,gold,predicted,count,rate\n";
  int K = 0;
  for (const json& r : agg.reports) K = std::max<int>(K, static_cast<int>(r["tasks"].size()));
  for (const json& r : agg.reports) {
    const Key k = key_of(r);
    const std::string pre = k.variant + "," + std::to_string(k.seed) + "," +
                            std::to_string(k.memory_size) + ",";
    for (const json& t : r["tasks"]) {
      acc << pre << t["task"].get<int>() + 1 << "," << t["accuracy"].dump() << "\n";
      const json& x = t["taxonomy"];
      tax << pre << t["task"].get<int>() + 1 << "," << x["error_rate"].dump() << ","
          << x["latter_share"].dump() << "," << x["former_share"].dump() << ","
          << x["inner_share"].dump() << "\n";
    }
    for (const json& c : r["final"]["confusion_pairs"]) {
      conf << pre << c["gold"].dump() << "," << c["predicted"].dump() << "," << c["count"].dump()
           << "," << c["rate"].dump() << "\n";
    }
  }

  grid << "variant,memory_size,seeds";
  for (int t = 1; t <= K; ++t) grid << ",T" << t;
  grid << "\n";
  tgrid << "variant,memory_size,seeds,latter,former,inner\n";
  for (const auto& [gk, rs] : group(agg.reports)) {
    const std::string v = key_of(*rs.front()).variant;
    const std::string pre = v + "," + std::to_string(gk.first) + "," + std::to_string(rs.size());
    grid << pre;
    for (int t = 0; t < K; ++t) {
      std::vector<double> xs;
      for (const json* r : rs)
        if (t < static_cast<int>((*r)["tasks"].size()))
          xs.push_back((*r)["tasks"][t]["accuracy"].get<double>());
      grid << "," << (xs.empty() ? std::string() : num(mean_of(xs)));
    }
    grid << "\n";
    std::vector<double> l, f, i;
    for (const json* r : rs) {
      const json& x = (*r)["final"]["taxonomy"];
      l.push_back(x["latter_share"]);
      f.push_back(x["former_share"]);
      i.push_back(x["inner_share"]);
    }
    tgrid << pre << "," << num(mean_of(l)) << "," << num(mean_of(f)) << "," << num(mean_of(i))
          << "\n";
  }
  write_atomic(root / "accuracy.csv", acc.str());
  write_atomic(root / "accuracy_grid.csv", grid.str());
  write_atomic(root / "taxonomy.csv", tax.str());
  write_atomic(root / "taxonomy_grid.csv", tgrid.str());
  write_atomic(root / "confusion.csv", conf.str());
  write_atomic(root / "summary.md", summary_markdown(agg));
}

json probe_checkpoint(const std::string& checkpoint_path, const std::string& kind,
                      const std::optional<ExperimentConfig>& override_cfg,
                      const std::string& out_dir) {
  if (kind != "ubc" && kind != "frozen" && kind != "boundary") {
    throw Error(ErrorKind::kValidation, "probe kind must be ubc, frozen or boundary");
  }
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  if (!ck.meta.contains("config") || !ck.meta.contains("cell")) {
    if (!override_cfg) {
      throw Error(ErrorKind::kCompatibility,
                  "checkpoint carries no run config; pass one explicitly");
    }
  }
  ExperimentConfig cfg;
  if (override_cfg) {
    cfg = *override_cfg;
  } else {
    json stored = ck.meta.at("config");
    stored["output_dir"] = out_dir;
    cfg = experiment_config_from_json(stored);
  }
  const std::uint64_t seed =
      ck.meta.contains("cell") ? ck.meta["cell"]["seed"].get<std::uint64_t>() : 0;
  const TaskStream stream = build_stream(cfg, seed);
  if (stream.relation_names != ck.relation_names) {
    throw Error(ErrorKind::kCompatibility, "checkpoint relations do not match the data");
  }
  if (ck.encoder.config().vocab_size != stream.vocab_size) {
    throw Error(ErrorKind::kCompatibility, "checkpoint vocabulary does not match the data");
  }
  int stage = -1;
  for (int c = 0; c < ck.head.classes(); ++c) {
    const int r = ck.head.class_relation[c];
    if (r < 0 || r >= stream.relation_count() || stream.relation_task[r] != ck.head.class_task[c]) {
      throw Error(ErrorKind::kCompatibility, "checkpoint class map does not match the data");
    }
    stage = std::max(stage, ck.head.class_task[c]);
  }
  if (stage < 0) throw Error(ErrorKind::kCompatibility, "checkpoint head has no classes");
  if (static_cast<int>(stream.seen_relations(stage).size()) != ck.head.classes()) {
    throw Error(ErrorKind::kCompatibility, "checkpoint head does not cover its seen relations");
  }

  ProbeConfig pc = cfg.probes.probe;
  pc.seed = probe_seed(seed);
  json report{{"schema_version", kReportSchemaVersion},
              {"kind", kind},
              {"checkpoint", fs::path(checkpoint_path).filename().string()},
              {"stage", stage}};
  const double original =
      evaluate(ck.encoder, ck.head, seen_test(stream, stage), stream.relation_task).accuracy;
  report["original"] = original;
  if (kind == "ubc") {
    report["accuracy"] = ubc_probe(ck.encoder, stream, {stage}, pc).accuracy.front();
  } else if (kind == "frozen") {
    report["accuracy"] =
        frozen_encoder_supervised(ck.encoder.config(), derive_seed({salt::kInit, seed}), stream,
                                  pc)
            .accuracy.front();
  } else {
    json rows = json::array();
    for (const auto& p : stream.similar_pairs) {
      if (stream.relation_task[p.new_relation] > stage) continue;
      const BoundaryExport b = boundary_export(ck.encoder, ck.head, p.old_relation,
                                               p.new_relation, pair_test(stream, p));
      const std::string stem =
          "boundary_" + std::to_string(p.old_relation) + "_" + std::to_string(p.new_relation);
      std::ostringstream csv;
      write_boundary_csv(csv, b, stream.relation_names);
      write_atomic(fs::path(out_dir) / (stem + ".csv"), csv.str());
      write_atomic(fs::path(out_dir) / (stem + ".json"),
                   boundary_json(b, stream.relation_names).dump(2) + "\n");
      rows.push_back({{"old_relation", p.old_relation},
                      {"new_relation", p.new_relation},
                      {"skew", b.skew},
                      {"csv", stem + ".csv"}});
    }
    report["pairs"] = rows;
  }
  write_atomic(fs::path(out_dir) / ("probe_" + kind + ".json"), report.dump(2) + "\n");
  return report;
}

}  // namespace fea
