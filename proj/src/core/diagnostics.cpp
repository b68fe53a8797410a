#include "fea/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

#include <Eigen/Dense>

#include "fea/error.hpp"
#include "fea/rng.hpp"

namespace fea {

using nlohmann::json;

std::vector<Tensor> encode_all(const Encoder& encoder,
                               const std::vector<const Instance*>& items) {
  const int vocab = encoder.config().vocab_size;
  std::vector<MarkedSequence> seqs;
  seqs.reserve(items.size());
  for (const Instance* inst : items) seqs.push_back(insert_entity_markers(*inst, vocab));
  std::vector<const MarkedSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  return encoder.encode_batch(ptrs);
}

std::vector<const Instance*> seen_test(const TaskStream& stream, int k) {
  std::vector<const Instance*> out;
  for (int t = 0; t <= k; ++t)
    for (const Instance& inst : stream.tasks.at(t).test) out.push_back(&inst);
  return out;
}

std::vector<const Instance*> seen_train(const TaskStream& stream, int k) {
  std::vector<const Instance*> out;
  for (int t = 0; t <= k; ++t)
    for (const Instance& inst : stream.tasks.at(t).train) out.push_back(&inst);
  return out;
}

EvalResult evaluate(const Encoder& encoder, const ClassifierHead& head,
                    const std::vector<const Instance*>& test,
                    const std::vector<int>& relation_task) {
  EvalResult res;
  if (test.empty()) return res;
  for (const Instance* inst : test) {
    if (head.class_of(inst->relation) < 0) {
      throw Error(ErrorKind::kCoverage,
                  "test relation " + std::to_string(inst->relation) + " has no class");
    }
  }
  const std::vector<Tensor> hs = encode_all(encoder, test);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Instance& inst = *test[i];
    PredictionRecord rec;
    rec.instance = static_cast<int>(i);
    rec.gold = inst.relation;
    rec.gold_task = relation_task.at(inst.relation);
    const Tensor logits = head_logits(hs[i], head);
    rec.predicted = head.class_relation[argmax(logits.values.data(), logits.size())];
    rec.predicted_task = relation_task.at(rec.predicted);
    if (rec.predicted == rec.gold) ++correct;
    res.records.push_back(rec);
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  return res;
}

Taxonomy error_taxonomy(const std::vector<PredictionRecord>& records) {
  Taxonomy t;
  t.total = records.size();
  for (const auto& r : records) {
    if (r.gold == r.predicted) continue;
    ++t.errors;
    if (r.gold_task < r.predicted_task) {
      ++t.latter;
    } else if (r.gold_task > r.predicted_task) {
      ++t.former;
    } else {
      ++t.inner;
    }
  }
  if (t.total > 0) t.error_rate = static_cast<double>(t.errors) / static_cast<double>(t.total);
  if (t.errors > 0) {
    const double e = static_cast<double>(t.errors);
    t.latter_share = static_cast<double>(t.latter) / e;
    t.former_share = static_cast<double>(t.former) / e;
    t.inner_share = static_cast<double>(t.inner) / e;
  }
  return t;
}

json to_json(const Taxonomy& t) {
  return json{{"total", t.total},
              {"errors", t.errors},
              {"latter", t.latter},
              {"former", t.former},
              {"inner", t.inner},
              {"error_rate", t.error_rate},
              {"latter_share", t.latter_share},
              {"former_share", t.former_share},
              {"inner_share", t.inner_share}};
}

std::vector<ConfusionPair> confusion_pairs(const std::vector<PredictionRecord>& records,
                                           std::size_t top_n) {
  std::map<int, std::size_t> gold_sizes;
  std::map<std::pair<int, int>, std::size_t> counts;
  for (const auto& r : records) {
    ++gold_sizes[r.gold];
    if (r.gold != r.predicted) ++counts[{r.gold, r.predicted}];
  }
  std::vector<ConfusionPair> out;
  for (const auto& [key, n] : counts) {
    out.push_back(ConfusionPair{key.first, key.second, n,
                                static_cast<double>(n) /
                                    static_cast<double>(gold_sizes[key.first])});
  }
  std::stable_sort(out.begin(), out.end(), [](const ConfusionPair& a, const ConfusionPair& b) {
    if (a.count != b.count) return a.count > b.count;
    return std::pair(a.gold, a.predicted) < std::pair(b.gold, b.predicted);
  });
  if (out.size() > top_n) out.resize(top_n);
  return out;
}

// -------------------------------------------------------------------- probes

double fit_probe_head(const std::vector<Tensor>& train_x, const std::vector<int>& train_y,
                      const std::vector<Tensor>& test_x, const std::vector<int>& test_y,
                      int classes, const ProbeConfig& cfg) {
  if (train_x.empty()) throw Error(ErrorKind::kEmptyData, "probe has no training features");
  const std::size_t w = train_x[0].cols();
  ParamStore head;
  Parameter& W = head.add("W", Tensor({static_cast<std::size_t>(classes), w}));
  const AdamConfig adam{cfg.lr};
  std::vector<std::size_t> order(train_x.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng({salt::kProbe, cfg.seed, static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      Tensor x({end - start, w});
      std::vector<int> y;
      for (std::size_t i = start; i < end; ++i) {
        std::copy(train_x[order[i]].values.begin(), train_x[order[i]].values.end(),
                  x.values.begin() + (i - start) * w);
        y.push_back(train_y[order[i]]);
      }
      Tape tape;
      Var logits = tape.matmul_nt(tape.constant(std::move(x)), tape.param(W));
      tape.backward(tape.softmax_cross_entropy(logits, std::move(y)));
      adam_step(head, adam);
    }
  }
  if (test_x.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_x.size(); ++i) {
    const Tensor logits = matmul_nt(test_x[i], W.value);
    if (argmax(logits.values.data(), logits.size()) == test_y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_x.size());
}

namespace {

double probe_stage(const Encoder& encoder, const TaskStream& stream, int k,
                   const ProbeConfig& cfg) {
  const std::vector<int> rels = stream.seen_relations(k);
  std::map<int, int> cls;
  for (std::size_t i = 0; i < rels.size(); ++i) cls[rels[i]] = static_cast<int>(i);
  auto featurize = [&](const std::vector<const Instance*>& items, std::vector<Tensor>& xs,
                       std::vector<int>& ys) {
    xs = encode_all(encoder, items);
    for (const Instance* inst : items) ys.push_back(cls.at(inst->relation));
  };
  std::vector<Tensor> trx, tex;
  std::vector<int> try_, tey;
  featurize(seen_train(stream, k), trx, try_);
  featurize(seen_test(stream, k), tex, tey);
  return fit_probe_head(trx, try_, tex, tey, static_cast<int>(rels.size()), cfg);
}

}  // namespace

ProbeResult ubc_probe(const Encoder& snapshot, const TaskStream& stream,
                      const std::vector<int>& stages, const ProbeConfig& cfg) {
  ProbeResult res;
  res.kind = "ubc";
  for (int k : stages) {
    res.stages.push_back(k);
    res.accuracy.push_back(probe_stage(snapshot, stream, k, cfg));
  }
  return res;
}

ProbeResult frozen_encoder_supervised(const EncoderConfig& cfg, std::uint64_t init_seed,
                                      const TaskStream& stream, const ProbeConfig& probe) {
  const Encoder fresh(cfg, init_seed);
  ProbeResult res;
  res.kind = "frozen";
  const int last = static_cast<int>(stream.tasks.size()) - 1;
  res.stages.push_back(last);
  res.accuracy.push_back(probe_stage(fresh, stream, last, probe));
  return res;
}

double mean_gradient_norm(const std::vector<double>& series) {
  if (series.empty()) return 0.0;
  double s = 0.0;
  for (double v : series) s += v;
  return s / static_cast<double>(series.size());
}

// ------------------------------------------------------------------ boundary

std::vector<std::array<double, 2>> pca_2d(const std::vector<Point>& rows) {
  if (rows.empty()) return {};
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index d = static_cast<Eigen::Index>(rows[0].size());
  Eigen::MatrixXd X(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) X(i, j) = rows[i][j];
  const Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(std::max<Eigen::Index>(1, n));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues ascend; take the last two columns.
  Eigen::MatrixXd axes(d, 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
    if (d > c) v = eig.eigenvectors().col(d - 1 - c);
    // Fix the sign so the largest-magnitude loading is positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(c) = v;
  }
  const Eigen::MatrixXd Y = X * axes;
  std::vector<std::array<double, 2>> out(rows.size());
  for (Eigen::Index i = 0; i < n; ++i) out[i] = {Y(i, 0), Y(i, 1)};
  return out;
}

LinearBoundary fit_logistic_2d(const std::vector<std::array<double, 2>>& x,
                               const std::vector<int>& y, int steps, double lr) {
  LinearBoundary out;
  if (x.empty()) return out;
  ParamStore params;
  Parameter& W = params.add("W", Tensor({2, 2}));
  Parameter& b = params.add("b", Tensor({2}));
  Tensor X({x.size(), 2});
  for (std::size_t i = 0; i < x.size(); ++i) {
    X(i, 0) = x[i][0];
    X(i, 1) = x[i][1];
  }
  const AdamConfig adam{lr};
  for (int s = 0; s < steps; ++s) {
    Tape tape;
    Var logits = tape.add_row(tape.matmul(tape.view(X), tape.param(W)), tape.param(b));
    tape.backward(tape.softmax_cross_entropy(logits, y));
    adam_step(params, adam);
  }
  out.w0 = W.value(0, 1) - W.value(0, 0);
  out.w1 = W.value(1, 1) - W.value(1, 0);
  out.bias = b.value.values[1] - b.value.values[0];
  return out;
}

BoundaryExport boundary_export(const Encoder& encoder, const ClassifierHead& head,
                               int old_relation, int new_relation,
                               const std::vector<const Instance*>& instances) {
  std::vector<const Instance*> pair;
  int n_old = 0, n_new = 0;
  for (const Instance* inst : instances) {
    if (inst->relation == old_relation) {
      ++n_old;
    } else if (inst->relation == new_relation) {
      ++n_new;
    } else {
      continue;
    }
    pair.push_back(inst);
  }
  if (n_old < 2 || n_new < 2) {
    throw Error(ErrorKind::kSize, "boundary export needs at least 2 instances per relation");
  }
  if (head.class_of(old_relation) < 0 || head.class_of(new_relation) < 0) {
    throw Error(ErrorKind::kCoverage, "boundary export relations must both be seen");
  }

  BoundaryExport out;
  out.old_relation = old_relation;
  out.new_relation = new_relation;
  const std::vector<Tensor> hs = encode_all(encoder, pair);
  std::vector<Point> enc;
  for (std::size_t i = 0; i < pair.size(); ++i) {
    const Instance* inst = pair[i];
    const Tensor& h = hs[i];
    const Tensor logits = head_logits(h, head);
    enc.push_back(h.values);
    out.gold.push_back(inst->relation);
    out.predicted.push_back(head.class_relation[argmax(logits.values.data(), logits.size())]);
  }
  out.coords = pca_2d(enc);

  std::vector<int> gold_y;
  for (int g : out.gold) gold_y.push_back(g == new_relation ? 1 : 0);
  out.gold_boundary = fit_logistic_2d(out.coords, gold_y);
  std::size_t right = 0;
  for (std::size_t i = 0; i < out.coords.size(); ++i) {
    if ((out.gold_boundary.score(out.coords[i]) > 0) == (gold_y[i] == 1)) ++right;
  }
  out.gold_train_accuracy = static_cast<double>(right) / static_cast<double>(out.coords.size());

  std::vector<std::array<double, 2>> px;
  std::vector<int> py;
  for (std::size_t i = 0; i < out.coords.size(); ++i) {
    if (out.predicted[i] == new_relation || out.predicted[i] == old_relation) {
      px.push_back(out.coords[i]);
      py.push_back(out.predicted[i] == new_relation ? 1 : 0);
    }
  }
  out.prediction_boundary = fit_logistic_2d(px, py);
  std::size_t skewed = 0;
  for (std::size_t i = 0; i < out.coords.size(); ++i) {
    if (out.gold[i] == old_relation && out.prediction_boundary.score(out.coords[i]) > 0) {
      ++skewed;
    }
  }
  out.skew = static_cast<double>(skewed) / static_cast<double>(n_old);
  return out;
}

void write_boundary_csv(std::ostream& out, const BoundaryExport& b,
                        const std::vector<std::string>& relation_names) {
  out << "x,y,gold,predicted\n";
  for (std::size_t i = 0; i < b.coords.size(); ++i) {
    out << json(b.coords[i][0]).dump() << ',' << json(b.coords[i][1]).dump() << ','
        << relation_names.at(b.gold[i]) << ',' << relation_names.at(b.predicted[i]) << '\n';
  }
}

json boundary_json(const BoundaryExport& b, const std::vector<std::string>& relation_names) {
  auto lb = [](const LinearBoundary& l) {
    return json{{"w", {l.w0, l.w1}}, {"bias", l.bias}};
  };
  return json{{"old_relation", relation_names.at(b.old_relation)},
              {"new_relation", relation_names.at(b.new_relation)},
              {"gold_boundary", lb(b.gold_boundary)},
              {"prediction_boundary", lb(b.prediction_boundary)},
              {"gold_train_accuracy", b.gold_train_accuracy},
              {"skew", b.skew},
              {"points", b.coords.size()}};
}

}  // namespace fea
