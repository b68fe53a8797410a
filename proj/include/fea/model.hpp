#pragma once

// Relation-extraction model: token embedding, a small pre-norm transformer
// encoder, entity-marker aggregation and a growable linear softmax head.

#include <cstdint>
#include <string>
#include <vector>

#include "fea/datastream.hpp"
#include "fea/tensor.hpp"
#include "json.hpp"

namespace fea {

inline constexpr int kMarkerCount = 4;

struct EncoderConfig {
  int vocab_size = 0;  // corpus tokens; markers are appended after these
  int d_model = 32;
  int blocks = 1;
  int heads = 2;
  int ff_width = 64;
  int max_length = 64;
  double ln_eps = 1e-5;

  int marker_id(int k) const { return vocab_size + k; }
  int table_rows() const { return vocab_size + kMarkerCount; }
  int hidden_width() const { return 2 * d_model; }
  std::vector<std::string> errors() const;
  void validate() const;
};

nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// Token ids with [E11] [E12] [E21] [E22] inserted. head_pos / tail_pos point
// at [E11] / [E21].
struct MarkedSequence {
  std::vector<int> tokens;
  int head_pos = -1;
  int tail_pos = -1;
};

MarkedSequence insert_entity_markers(const Instance& inst, int vocab_size);

class Encoder {
 public:
  Encoder() = default;
  // Random initialisation from the seed.
  Encoder(const EncoderConfig& cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Records the forward pass for one sequence; returns a 1 x 2d row.
  Var forward(Tape& tape, const MarkedSequence& seq);
  // Several sequences at once; returns an n x 2d block, one row per input.
  Var forward_batch(Tape& tape, const std::vector<const MarkedSequence*>& batch);
  // Gradient-free encoding.
  Tensor encode(const MarkedSequence& seq) const;
  std::vector<Tensor> encode_batch(const std::vector<const MarkedSequence*>& batch,
                                   std::size_t chunk = 64) const;

 private:
  void check_length(const MarkedSequence& seq) const;

  EncoderConfig cfg_;
  ParamStore params_;
  Tensor positions_;
};

// Weight W (classes x width), no bias, plus the class <-> relation maps.
struct ClassifierHead {
  ParamStore params;
  int width = 0;
  std::vector<int> class_relation;
  std::vector<int> class_task;

  int classes() const { return static_cast<int>(class_relation.size()); }
  // -1 when the relation has no class.
  int class_of(int relation) const;
  Parameter& weight() { return params.get("W"); }
  const Parameter& weight() const { return params.get("W"); }
};

ClassifierHead make_head(int width);

// Appends one zero row per relation; existing rows are left untouched.
ClassifierHead extend_head(const ClassifierHead& head, const std::vector<int>& relations,
                           int task);

Tensor head_logits(const Tensor& h, const ClassifierHead& head);
std::vector<double> predict_proba(const Tensor& h, const ClassifierHead& head);
// Index of the largest entry; ties go to the lowest index.
int argmax(const double* values, std::size_t n);
int predict(const MarkedSequence& seq, const Encoder& encoder, const ClassifierHead& head);

// Binary checkpoint: magic, length-prefixed JSON header, then
// length-prefixed named tensors as little-endian doubles.
struct Checkpoint {
  Encoder encoder;
  ClassifierHead head;
  std::vector<std::string> relation_names;  // relation id -> name
  nlohmann::json meta;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fea
