#include "fea/datastream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>
#include <cstdio>

#include "json.hpp"

#include "fea/error.hpp"
#include "fea/rng.hpp"

namespace fea {

using nlohmann::json;

void validate_spans(const Instance& inst) {
  const int n = static_cast<int>(inst.tokens.size());
  auto check = [n](const Span& s, const char* role) {
    if (s.start > s.end) {
      throw Error(ErrorKind::kSpan, std::string(role) + " span [" + std::to_string(s.start) +
                                        "," + std::to_string(s.end) + "] is empty");
    }
    if (s.start < 0 || s.end >= n) {
      throw Error(ErrorKind::kSpan, std::string(role) + " span [" + std::to_string(s.start) +
                                        "," + std::to_string(s.end) +
                                        "] out of bounds for length " + std::to_string(n));
    }
  };
  check(inst.head, "head");
  check(inst.tail, "tail");
  if (inst.head.start <= inst.tail.end && inst.tail.start <= inst.head.end) {
    throw Error(ErrorKind::kSpan, "head and tail spans overlap");
  }
}

// ------------------------------------------------------------------ corpus

namespace {

Span parse_span(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_array() || j[key].size() != 2 ||
      !j[key][0].is_number_integer() || !j[key][1].is_number_integer()) {
    throw std::invalid_argument(std::string("field '") + key +
                                "' must be a [start, end] integer pair");
  }
  return Span{j[key][0].get<int>(), j[key][1].get<int>()};
}

}  // namespace

Corpus parse_corpus(std::istream& in) {
  Corpus corpus;
  std::map<std::string, int> relation_ids;
  std::map<std::string, int> token_ids;
  enum class TokenKind { kUnknown, kString, kNumeric } kind = TokenKind::kUnknown;
  int max_id = -1;

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_no);
    Instance inst;
    std::string relation;
    try {
      const json j = json::parse(line);
      if (!j.is_object()) throw std::invalid_argument("expected a JSON object");
      if (!j.contains("tokens") || !j["tokens"].is_array() || j["tokens"].empty()) {
        throw std::invalid_argument("field 'tokens' must be a non-empty array");
      }
      for (const auto& tok : j["tokens"]) {
        if (tok.is_string()) {
          if (kind == TokenKind::kNumeric) {
            throw std::invalid_argument("mixed string and numeric tokens");
          }
          kind = TokenKind::kString;
          const auto s = tok.get<std::string>();
          auto [it, fresh] = token_ids.emplace(s, static_cast<int>(corpus.vocab.size()));
          if (fresh) corpus.vocab.push_back(s);
          inst.tokens.push_back(it->second);
        } else if (tok.is_number_integer() && tok.get<long long>() >= 0) {
          if (kind == TokenKind::kString) {
            throw std::invalid_argument("mixed string and numeric tokens");
          }
          kind = TokenKind::kNumeric;
          inst.tokens.push_back(tok.get<int>());
          max_id = std::max(max_id, inst.tokens.back());
        } else {
          throw std::invalid_argument("tokens must be strings or non-negative integers");
        }
      }
      inst.head = parse_span(j, "h");
      inst.tail = parse_span(j, "t");
      if (!j.contains("relation") || !j["relation"].is_string() ||
          j["relation"].get<std::string>().empty()) {
        throw std::invalid_argument("field 'relation' must be a non-empty string");
      }
      relation = j["relation"].get<std::string>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kParse, where + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw Error(ErrorKind::kParse, where + ": " + e.what());
    }
    try {
      validate_spans(inst);
    } catch (const Error& e) {
      throw Error(ErrorKind::kSpan, where + ": " + e.what());
    }
    auto [it, fresh] =
        relation_ids.emplace(relation, static_cast<int>(corpus.relations.size()));
    if (fresh) corpus.relations.push_back(relation);
    inst.relation = it->second;
    corpus.instances.push_back(std::move(inst));
  }
  corpus.vocab_size =
      kind == TokenKind::kString ? static_cast<int>(corpus.vocab.size()) : max_id + 1;
  return corpus;
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open corpus file '" + path + "'");
  return parse_corpus(in);
}

// ------------------------------------------------------------------ stream

std::vector<int> TaskStream::seen_relations(int k) const {
  std::vector<int> out;
  for (int t = 0; t <= k && t < static_cast<int>(tasks.size()); ++t) {
    out.insert(out.end(), tasks[t].relations.begin(), tasks[t].relations.end());
  }
  return out;
}

void TaskStream::validate() const {
  const int R = relation_count();
  if (static_cast<int>(relation_task.size()) != R) {
    throw Error(ErrorKind::kInvalidInput, "relation->task map has wrong size");
  }
  std::vector<int> owner(R, -1);
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const Task& t = tasks[k];
    if (t.index != static_cast<int>(k)) {
      throw Error(ErrorKind::kInvalidInput, "task index out of order");
    }
    std::set<int> rels(t.relations.begin(), t.relations.end());
    for (int r : t.relations) {
      if (r < 0 || r >= R) throw Error(ErrorKind::kInvalidInput, "relation id out of range");
      if (owner[r] != -1) {
        throw Error(ErrorKind::kInvalidInput,
                    "relation " + relation_names[r] + " appears in two tasks");
      }
      owner[r] = static_cast<int>(k);
      if (relation_task[r] != static_cast<int>(k)) {
        throw Error(ErrorKind::kInvalidInput, "relation->task map disagrees with tasks");
      }
    }
    for (const auto* split : {&t.train, &t.val, &t.test}) {
      for (const Instance& inst : *split) {
        if (!rels.count(inst.relation)) {
          throw Error(ErrorKind::kInvalidInput, "instance relation outside its task");
        }
        validate_spans(inst);
      }
    }
  }
  for (int r = 0; r < R; ++r) {
    if (owner[r] == -1) {
      throw Error(ErrorKind::kInvalidInput, "relation " + relation_names[r] + " has no task");
    }
  }
}

namespace {

// Earlier tasks absorb the remainder.
std::vector<std::vector<int>> partition(const std::vector<int>& order, int tasks) {
  const int n = static_cast<int>(order.size());
  const int base = n / tasks, extra = n % tasks;
  std::vector<std::vector<int>> out(tasks);
  int pos = 0;
  for (int k = 0; k < tasks; ++k) {
    const int len = base + (k < extra ? 1 : 0);
    out[k].assign(order.begin() + pos, order.begin() + pos + len);
    pos += len;
  }
  return out;
}

}  // namespace

TaskStream build_task_stream(const Corpus& corpus, const StreamOptions& opts) {
  const int R = static_cast<int>(corpus.relations.size());
  if (opts.tasks < 1 || opts.tasks > R) {
    throw Error(ErrorKind::kConfig, "cannot split " + std::to_string(R) +
                                        " relations into " + std::to_string(opts.tasks) +
                                        " tasks");
  }
  const double total = opts.split.train + opts.split.val + opts.split.test;
  if (opts.split.train <= 0 || opts.split.val < 0 || opts.split.test <= 0) {
    throw Error(ErrorKind::kConfig, "split ratio needs positive train and test parts");
  }

  std::vector<int> order(R);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng({salt::kStream, opts.seed});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<const Instance*>> by_relation(R);
  for (const Instance& inst : corpus.instances) by_relation[inst.relation].push_back(&inst);

  TaskStream stream;
  stream.relation_names = corpus.relations;
  stream.relation_task.assign(R, -1);
  stream.train_counts.assign(R, 0);
  stream.vocab_size = corpus.vocab_size;
  const auto groups = partition(order, opts.tasks);
  for (int k = 0; k < opts.tasks; ++k) {
    Task task;
    task.index = k;
    task.relations = groups[k];
    for (int r : task.relations) {
      stream.relation_task[r] = k;
      auto items = by_relation[r];
      Rng split_rng = make_rng({salt::kStream, opts.seed, static_cast<std::uint64_t>(r)});
      std::shuffle(items.begin(), items.end(), split_rng);
      const std::size_t n = items.size();
      std::size_t n_train =
          static_cast<std::size_t>(std::floor(static_cast<double>(n) * opts.split.train / total));
      std::size_t n_val =
          static_cast<std::size_t>(std::floor(static_cast<double>(n) * opts.split.val / total));
      std::size_t n_test = n - n_train - n_val;
      const std::size_t keep_train =
          opts.train_cap > 0 ? std::min<std::size_t>(n_train, opts.train_cap) : n_train;
      const std::size_t keep_test =
          opts.test_cap > 0 ? std::min<std::size_t>(n_test, opts.test_cap) : n_test;
      for (std::size_t i = 0; i < keep_train; ++i) task.train.push_back(*items[i]);
      for (std::size_t i = 0; i < n_val; ++i) task.val.push_back(*items[n_train + i]);
      for (std::size_t i = 0; i < keep_test; ++i)
        task.test.push_back(*items[n_train + n_val + i]);
      stream.train_counts[r] = static_cast<int>(keep_train);
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

// --------------------------------------------------------------- synthetic

std::vector<std::string> synthetic_config_errors(const SyntheticConfig& cfg) {
  std::vector<std::string> errs;
  if (cfg.relations < 1) errs.push_back("relations must be >= 1");
  if (cfg.tasks < 1) errs.push_back("tasks must be >= 1");
  if (cfg.relations >= 1 && cfg.tasks >= 1 && cfg.relations % cfg.tasks != 0) {
    errs.push_back("relations must be divisible by tasks");
  }
  if (cfg.train_per_relation < 1) errs.push_back("train_per_relation must be >= 1");
  if (cfg.val_per_relation < 0) errs.push_back("val_per_relation must be >= 0");
  if (cfg.test_per_relation < 1) errs.push_back("test_per_relation must be >= 1");
  if (cfg.signature_length < 2) errs.push_back("signature_length must be >= 2");
  if (cfg.similar_pairs < 0) errs.push_back("similar_pairs must be >= 0");
  if (cfg.similar_pairs > 0 && cfg.tasks < 2) {
    errs.push_back("similar pairs need at least 2 tasks");
  }
  if (2 * cfg.similar_pairs > cfg.relations) {
    errs.push_back("too many similar pairs for the relation count");
  }
  if (!cfg.pair_tasks.empty()) {
    if (static_cast<int>(cfg.pair_tasks.size()) != cfg.similar_pairs) {
      errs.push_back("pair_tasks must list one placement per similar pair");
    }
    for (const auto& [a, b] : cfg.pair_tasks) {
      if (a < 0 || b < 0 || a >= cfg.tasks || b >= cfg.tasks || a >= b) {
        errs.push_back("pair placement (" + std::to_string(a) + "," + std::to_string(b) +
                       ") must satisfy 0 <= old < new < tasks");
      }
    }
  }
  if (cfg.pair_tasks.empty() && cfg.late_pairs && cfg.similar_pairs > 0 && cfg.tasks > 0 &&
      cfg.relations >= cfg.tasks) {
    const int per_task = cfg.relations / cfg.tasks;
    std::vector<int> used(cfg.tasks, 0);
    bool ok = true;
    for (int p = 0; p < cfg.similar_pairs && ok; ++p) {
      const int a = p % cfg.tasks, b = cfg.tasks - 1 - p / per_task;
      ok = b > a && b >= 0 && ++used[a] <= per_task && ++used[b] <= per_task;
    }
    if (!ok) errs.push_back("similar_pairs too many for late placement");
  }
  if (cfg.noise_rate < 0.0 || cfg.noise_rate >= 1.0) errs.push_back("noise_rate must be in [0,1)");
  if (cfg.distinct_rate <= 0.0 || cfg.distinct_rate > 1.0) {
    errs.push_back("distinct_rate must be in (0,1]");
  }
  if (cfg.leak_rate < 0.0 || cfg.leak_rate > 1.0) errs.push_back("leak_rate must be in [0,1]");
  if (cfg.older_distinct_rate < 0.0 || cfg.older_distinct_rate > 1.0)
    errs.push_back("older_distinct_rate must be in [0,1]");
  if (cfg.distinct_tokens < 1 || cfg.distinct_tokens >= cfg.signature_length) {
    errs.push_back("distinct_tokens must be in [1, signature_length)");
  }
  // Both entities take at most two tokens each, plus the signature and any
  // leaked partner tokens.
  const int leaked = cfg.similar_pairs > 0 ? cfg.distinct_tokens : 0;
  if (cfg.sequence_length < 4 + cfg.signature_length + leaked + 1) {
    errs.push_back("sequence_length too short for entities and signature");
  }
  const long sig_tokens =
      static_cast<long>(cfg.relations) * cfg.signature_length -
      static_cast<long>(cfg.similar_pairs) * (cfg.signature_length - cfg.distinct_tokens);
  if (cfg.vocab_size - sig_tokens < 8) {
    errs.push_back("vocab_size " + std::to_string(cfg.vocab_size) +
                   " too small for distinct signatures (needs at least " +
                   std::to_string(sig_tokens + 8) + ")");
  }
  return errs;
}

namespace {

struct SyntheticPlan {
  std::vector<int> relation_task;
  std::vector<SimilarPair> pairs;
  std::vector<std::vector<int>> signatures;
  std::vector<bool> in_pair;
  std::vector<int> partner;
  std::vector<bool> is_older;
  int background_begin = 0;
};

SyntheticPlan plan_synthetic(const SyntheticConfig& cfg, Rng& rng) {
  const auto errs = synthetic_config_errors(cfg);
  if (!errs.empty()) {
    std::string msg;
    for (const auto& e : errs) msg += (msg.empty() ? "" : "; ") + e;
    throw Error(ErrorKind::kConfig, msg);
  }
  const int R = cfg.relations, K = cfg.tasks, S = cfg.signature_length;
  SyntheticPlan plan;

  std::vector<int> order(R);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto groups = partition(order, K);
  plan.relation_task.assign(R, -1);
  for (int k = 0; k < K; ++k)
    for (int r : groups[k]) plan.relation_task[r] = k;

  // Pool of still-unpaired relations per task, in stream order.
  std::vector<std::vector<int>> free_rel = groups;
  plan.in_pair.assign(R, false);
  auto take = [&](int task) {
    const int r = free_rel[task].back();
    free_rel[task].pop_back();
    plan.in_pair[r] = true;
    return r;
  };
  for (int p = 0; p < cfg.similar_pairs; ++p) {
    int a, b;
    if (!cfg.pair_tasks.empty()) {
      std::tie(a, b) = cfg.pair_tasks[p];
      if (free_rel[a].empty() || free_rel[b].empty()) {
        throw Error(ErrorKind::kConfig, "pair placement exhausts a task's relations");
      }
    } else if (cfg.late_pairs) {
      const int per_task = R / K;
      a = p % K;
      b = K - 1 - p / per_task;
      if (a >= b) throw Error(ErrorKind::kConfig, "cannot place similar pairs");
    } else {
      std::vector<std::pair<int, int>> options;
      for (int x = 0; x < K; ++x)
        for (int y = x + 1; y < K; ++y)
          if (!free_rel[x].empty() && !free_rel[y].empty()) options.emplace_back(x, y);
      if (options.empty()) throw Error(ErrorKind::kConfig, "cannot place similar pairs");
      std::uniform_int_distribution<std::size_t> pick(0, options.size() - 1);
      std::tie(a, b) = options[pick(rng)];
    }
    plan.pairs.push_back(SimilarPair{take(a), take(b)});
  }

  // Signature tokens take the low ids; the rest of the vocabulary is
  // background.
  plan.signatures.assign(R, {});
  int next = 0;
  plan.partner.assign(R, -1);
  for (const auto& p : plan.pairs) {
    plan.partner[p.new_relation] = p.old_relation;
    plan.partner[p.old_relation] = p.new_relation;
  }
  plan.is_older.assign(R, false);
  for (const auto& p : plan.pairs) plan.is_older[p.old_relation] = true;
  std::vector<bool> is_new(R, false);
  for (const auto& p : plan.pairs) is_new[p.new_relation] = true;
  for (int r = 0; r < R; ++r) {
    if (is_new[r]) continue;
    for (int s = 0; s < S; ++s) plan.signatures[r].push_back(next++);
  }
  for (const auto& p : plan.pairs) {
    auto sig = plan.signatures[p.old_relation];
    for (int s = S - cfg.distinct_tokens; s < S; ++s) sig[s] = next++;
    plan.signatures[p.new_relation] = sig;
  }
  plan.background_begin = next;
  return plan;
}

Instance sample_instance(const SyntheticConfig& cfg, const SyntheticPlan& plan, int relation,
                         Rng& rng) {
  const int L = cfg.sequence_length;
  std::uniform_int_distribution<int> background(plan.background_begin, cfg.vocab_size - 1);
  std::uniform_int_distribution<int> span_len(1, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Instance inst;
  inst.relation = relation;
  inst.tokens.resize(L);
  for (int& t : inst.tokens) t = background(rng);

  const int hl = span_len(rng), tl = span_len(rng);
  while (true) {
    std::uniform_int_distribution<int> hs(0, L - hl), ts(0, L - tl);
    inst.head = Span{hs(rng), 0};
    inst.head.end = inst.head.start + hl - 1;
    inst.tail = Span{ts(rng), 0};
    inst.tail.end = inst.tail.start + tl - 1;
    if (inst.head.end < inst.tail.start || inst.tail.end < inst.head.start) break;
  }

  std::vector<int> free_pos;
  for (int i = 0; i < L; ++i) {
    const bool in_head = i >= inst.head.start && i <= inst.head.end;
    const bool in_tail = i >= inst.tail.start && i <= inst.tail.end;
    if (!in_head && !in_tail) free_pos.push_back(i);
  }
  std::shuffle(free_pos.begin(), free_pos.end(), rng);
  const auto& sig = plan.signatures[relation];
  const int S = static_cast<int>(sig.size());
  const int first_distinct = S - cfg.distinct_tokens;
  std::size_t slot = 0;
  for (int s = 0; s < S; ++s) {
    const bool distinguishing = plan.in_pair[relation] && s >= first_distinct;
    double keep = distinguishing ? cfg.distinct_rate : 1.0 - cfg.noise_rate;
    if (distinguishing && plan.is_older[relation])
      keep = cfg.older_distinct_rate;
    const int pos = free_pos[slot++];
    if (unit(rng) < keep) inst.tokens[pos] = sig[s];
  }
  if (plan.in_pair[relation]) {
    const auto& other = plan.signatures[plan.partner[relation]];
    for (int s = first_distinct; s < S; ++s) {
      const int pos = free_pos[slot++];
      if (unit(rng) < cfg.leak_rate) inst.tokens[pos] = other[s];
    }
  }
  return inst;
}

}  // namespace

std::vector<std::vector<int>> synthetic_signatures(const SyntheticConfig& cfg) {
  Rng rng = make_rng({salt::kSynthetic, cfg.seed});
  return plan_synthetic(cfg, rng).signatures;
}

TaskStream generate_synthetic_stream(const SyntheticConfig& cfg) {
  Rng rng = make_rng({salt::kSynthetic, cfg.seed});
  const SyntheticPlan plan = plan_synthetic(cfg, rng);
  const int R = cfg.relations;

  TaskStream stream;
  stream.vocab_size = cfg.vocab_size;
  stream.relation_task = plan.relation_task;
  stream.similar_pairs = plan.pairs;
  stream.train_counts.assign(R, cfg.train_per_relation);
  for (int r = 0; r < R; ++r) {
    char name[16];
    std::snprintf(name, sizeof(name), "R%02d", r);
    stream.relation_names.emplace_back(name);
  }
  stream.tasks.resize(cfg.tasks);
  for (int k = 0; k < cfg.tasks; ++k) stream.tasks[k].index = k;
  for (int r = 0; r < R; ++r) stream.tasks[plan.relation_task[r]].relations.push_back(r);

  for (int k = 0; k < cfg.tasks; ++k) {
    Task& task = stream.tasks[k];
    for (int r : task.relations) {
      Rng inst_rng =
          make_rng({salt::kSynthetic, cfg.seed, static_cast<std::uint64_t>(r) + 1});
      for (int i = 0; i < cfg.train_per_relation; ++i)
        task.train.push_back(sample_instance(cfg, plan, r, inst_rng));
      for (int i = 0; i < cfg.val_per_relation; ++i)
        task.val.push_back(sample_instance(cfg, plan, r, inst_rng));
      for (int i = 0; i < cfg.test_per_relation; ++i)
        task.test.push_back(sample_instance(cfg, plan, r, inst_rng));
    }
  }
  return stream;
}

}  // namespace fea
