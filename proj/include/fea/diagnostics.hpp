#pragma once

// Evaluation and analysis: accuracy over seen relations, the
// latter/former/inner error taxonomy, confusion pairs, retrained-head
// probes, and 2-D decision-boundary exports.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fea/datastream.hpp"
#include "fea/model.hpp"
#include "json.hpp"

namespace fea {

struct PredictionRecord {
  int instance = 0;
  int gold = -1;
  int gold_task = -1;
  int predicted = -1;
  int predicted_task = -1;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<PredictionRecord> records;
};

// Gradient-free encodings of the instances, in order.
std::vector<Tensor> encode_all(const Encoder& encoder, const std::vector<const Instance*>& items);

std::vector<const Instance*> seen_test(const TaskStream& stream, int k);
std::vector<const Instance*> seen_train(const TaskStream& stream, int k);

// Throws a coverage error if a test relation has no class in the head.
EvalResult evaluate(const Encoder& encoder, const ClassifierHead& head,
                    const std::vector<const Instance*>& test,
                    const std::vector<int>& relation_task);

struct Taxonomy {
  std::size_t total = 0;
  std::size_t errors = 0;
  std::size_t latter = 0;  // predicted relation introduced after the gold one
  std::size_t former = 0;  // ... before it
  std::size_t inner = 0;   // ... in the same task
  double error_rate = 0.0;
  // Shares of errors; all zero when there are no errors.
  double latter_share = 0.0;
  double former_share = 0.0;
  double inner_share = 0.0;
};

Taxonomy error_taxonomy(const std::vector<PredictionRecord>& records);
nlohmann::json to_json(const Taxonomy& t);

struct ConfusionPair {
  int gold = -1;
  int predicted = -1;
  std::size_t count = 0;
  double rate = 0.0;  // count / test instances of the gold relation
};

// Wrong (gold, predicted) pairs by descending count, ties by (gold, predicted).
std::vector<ConfusionPair> confusion_pairs(const std::vector<PredictionRecord>& records,
                                           std::size_t top_n);

struct ProbeConfig {
  int epochs = 30;
  double lr = 1e-3;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  std::string kind;  // "ubc" | "frozen"
  std::vector<int> stages;
  std::vector<double> accuracy;
};

// Trains a fresh zero-initialised softmax head on fixed features and
// returns its accuracy on the test features.
double fit_probe_head(const std::vector<Tensor>& train_x, const std::vector<int>& train_y,
                      const std::vector<Tensor>& test_x, const std::vector<int>& test_y,
                      int classes, const ProbeConfig& cfg);

// Upper-bound classifier: discards the trained head, fits a new one on the
// frozen encoder's features of all training data seen by stage k, and
// evaluates on all seen test data. The encoder is never modified.
ProbeResult ubc_probe(const Encoder& snapshot, const TaskStream& stream,
                      const std::vector<int>& stages, const ProbeConfig& cfg);

// Same protocol over a freshly initialised, never trained encoder and the
// whole stream.
ProbeResult frozen_encoder_supervised(const EncoderConfig& cfg, std::uint64_t init_seed,
                                      const TaskStream& stream, const ProbeConfig& probe);

double mean_gradient_norm(const std::vector<double>& series);

// Two-class linear decision rule in the projected plane: score > 0 means
// the newer relation.
struct LinearBoundary {
  double w0 = 0.0;
  double w1 = 0.0;
  double bias = 0.0;

  double score(const std::array<double, 2>& p) const { return w0 * p[0] + w1 * p[1] + bias; }
};

// Projects rows onto their top two principal axes after centering.
std::vector<std::array<double, 2>> pca_2d(const std::vector<Point>& rows);

// Binary logistic regression fit with the tape + Adam (label 1 = positive).
LinearBoundary fit_logistic_2d(const std::vector<std::array<double, 2>>& x,
                               const std::vector<int>& y, int steps = 2000,
                               double lr = 0.05);

struct BoundaryExport {
  int old_relation = -1;
  int new_relation = -1;
  std::vector<std::array<double, 2>> coords;
  std::vector<int> gold;       // relation ids
  std::vector<int> predicted;  // relation ids (may be outside the pair)
  LinearBoundary gold_boundary;
  LinearBoundary prediction_boundary;
  double gold_train_accuracy = 0.0;
  // Share of old-relation points on the new side of the prediction boundary.
  double skew = 0.0;
};

BoundaryExport boundary_export(const Encoder& encoder, const ClassifierHead& head,
                               int old_relation, int new_relation,
                               const std::vector<const Instance*>& instances);

// (x, y, gold, predicted) rows with relation names.
void write_boundary_csv(std::ostream& out, const BoundaryExport& b,
                        const std::vector<std::string>& relation_names);
nlohmann::json boundary_json(const BoundaryExport& b,
                             const std::vector<std::string>& relation_names);

}  // namespace fea
