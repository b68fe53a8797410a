#pragma once

// Instances, corpora, and class-incremental task streams.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace fea {

// Inclusive token range.
struct Span {
  int start = 0;
  int end = 0;

  bool operator==(const Span&) const = default;
};

struct Instance {
  std::vector<int> tokens;
  Span head;
  Span tail;
  int relation = -1;

  bool operator==(const Instance&) const = default;
};

// Throws a span error for empty, out-of-bounds or overlapping spans.
void validate_spans(const Instance& inst);

struct Corpus {
  std::vector<Instance> instances;
  std::vector<std::string> relations;  // relation id -> name, first-seen order
  std::vector<std::string> vocab;      // token id -> string; empty for numeric files
  int vocab_size = 0;
};

// One JSON object per line: {"tokens": [...], "h": [s, e], "t": [s, e],
// "relation": "name"}. Tokens are either all strings or all non-negative
// integers within a file. Blank lines are skipped.
Corpus parse_corpus(std::istream& in);
Corpus load_corpus(const std::string& path);

struct Task {
  int index = 0;
  std::vector<int> relations;
  std::vector<Instance> train;
  std::vector<Instance> val;
  std::vector<Instance> test;
};

// A pair of relations that share most of their surface pattern, with the
// older member introduced in an earlier task.
struct SimilarPair {
  int old_relation = -1;
  int new_relation = -1;
};

struct TaskStream {
  std::vector<Task> tasks;
  std::vector<std::string> relation_names;
  std::vector<int> relation_task;  // relation id -> index of its task
  std::vector<int> train_counts;   // relation id -> training instances
  int vocab_size = 0;
  std::vector<SimilarPair> similar_pairs;

  int relation_count() const { return static_cast<int>(relation_names.size()); }
  // Relations of tasks 0..k in stream order.
  std::vector<int> seen_relations(int k) const;
  // Throws if the stream breaks any structural invariant.
  void validate() const;
};

struct SplitRatio {
  double train = 3.0;
  double val = 1.0;
  double test = 1.0;
};

struct StreamOptions {
  int tasks = 10;
  SplitRatio split;
  std::uint64_t seed = 0;
  int train_cap = 0;  // 0 = uncapped
  int test_cap = 0;
};

TaskStream build_task_stream(const Corpus& corpus, const StreamOptions& opts);

struct SyntheticConfig {
  int relations = 40;
  int tasks = 10;
  int train_per_relation = 100;
  int val_per_relation = 20;
  int test_per_relation = 20;
  int vocab_size = 200;
  int sequence_length = 16;
  int signature_length = 3;
  int similar_pairs = 6;
  // Trailing signature tokens that differ between the members of a pair.
  int distinct_tokens = 1;
  // Optional explicit (old task, new task) placement per similar pair,
  // 0-based; when empty, placements are drawn from the seed.
  std::vector<std::pair<int, int>> pair_tasks;
  double noise_rate = 0.1;
    // Probability that a similar-pair member shows each distinguishing token.
  double distinct_rate = 0.8;
  // Probability that each of the partner's distinguishing tokens shows up.
  double leak_rate = 0.0;
  // Probability that the earlier member of a pair shows its own
  // distinguishing tokens; 0 makes it the plain shared pattern.
  double older_distinct_rate = 0.0;
  // Without explicit pair_tasks: newer members fill the last tasks and
  // older members the first ones, instead of a seeded random draw.
  bool late_pairs = true;
  std::uint64_t seed = 0;
};

// Returns every violated constraint; empty when the config is usable.
std::vector<std::string> synthetic_config_errors(const SyntheticConfig& cfg);

// Per-relation signature tokens of a synthetic stream.
std::vector<std::vector<int>> synthetic_signatures(const SyntheticConfig& cfg);

TaskStream generate_synthetic_stream(const SyntheticConfig& cfg);

}  // namespace fea
