#include "fea/memory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "fea/error.hpp"
#include "fea/rng.hpp"
#include "json.hpp"

namespace fea {

double squared_distance(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

namespace {

int nearest(const Point& p, const std::vector<Point>& centroids) {
  int best = 0;
  double best_d = squared_distance(p, centroids[0]);
  for (std::size_t j = 1; j < centroids.size(); ++j) {
    const double d = squared_distance(p, centroids[j]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(j);
    }
  }
  return best;
}

std::vector<Point> plus_plus_init(const std::vector<Point>& points, int k, Rng& rng) {
  const std::size_t n = points.size();
  std::vector<Point> centroids;
  std::vector<bool> chosen(n, false);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::size_t idx = first(rng);
  centroids.push_back(points[idx]);
  chosen[idx] = true;
  std::vector<double> d2(n);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, squared_distance(points[i], c));
      d2[i] = chosen[i] ? 0.0 : best;
      total += d2[i];
    }
    if (total <= 0.0) {
      // Remaining points coincide with centroids; take the first unused one.
      idx = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) -
                                     chosen.begin());
    } else {
      const double target = unit(rng) * total;
      double acc = 0.0;
      idx = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        acc += d2[i];
        idx = i;
        if (acc > target) break;
      }
    }
    centroids.push_back(points[idx]);
    chosen[idx] = true;
  }
  return centroids;
}

// Means of the assigned points. An empty cluster steals the point farthest
// from its own centroid out of a cluster that has more than one member.
std::vector<Point> update_centroids(const std::vector<Point>& points,
                                    std::vector<int>& assignment,
                                    const std::vector<Point>& centroids) {
  const std::size_t k = centroids.size(), dim = points[0].size();
  while (true) {
    std::vector<int> counts(k, 0);
    for (int a : assignment) ++counts[a];
    auto empty = std::find(counts.begin(), counts.end(), 0);
    if (empty == counts.end()) break;
    int far = -1;
    double far_d = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (counts[assignment[i]] < 2) continue;
      const double d = squared_distance(points[i], centroids[assignment[i]]);
      if (d > far_d) {
        far_d = d;
        far = static_cast<int>(i);
      }
    }
    assignment[far] = static_cast<int>(empty - counts.begin());
  }
  std::vector<Point> out(k, Point(dim, 0.0));
  std::vector<int> counts(k, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const int a = assignment[i];
    ++counts[a];
    for (std::size_t e = 0; e < dim; ++e) out[a][e] += points[i][e];
  }
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t e = 0; e < dim; ++e) out[j][e] /= counts[j];
  return out;
}

ClusterResult lloyd(const std::vector<Point>& points, std::vector<Point> centroids,
                    const KMeansOptions& opts) {
  ClusterResult res;
  res.assignment.assign(points.size(), 0);
  auto assign = [&]() {
    bool changed = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const int a = nearest(points[i], centroids);
      changed = changed || a != res.assignment[i];
      res.assignment[i] = a;
    }
    return changed;
  };
  assign();
  for (int it = 1; it <= opts.max_iter; ++it) {
    res.iterations = it;
    std::vector<Point> next = update_centroids(points, res.assignment, centroids);
    double shift = 0.0;
    for (std::size_t j = 0; j < next.size(); ++j)
      shift = std::max(shift, std::sqrt(squared_distance(next[j], centroids[j])));
    centroids = std::move(next);
    const bool changed = assign();
    if (!changed && shift < opts.tol) {
      res.converged = true;
      break;
    }
  }
  res.centroids = std::move(centroids);
  return res;
}

}  // namespace

ClusterResult kmeans(const std::vector<Point>& points, int k, std::uint64_t seed,
                     const KMeansOptions& opts) {
  if (points.empty()) throw Error(ErrorKind::kSize, "kmeans needs at least one point");
  if (k < 1) throw Error(ErrorKind::kSize, "kmeans needs k >= 1");
  if (static_cast<std::size_t>(k) > points.size()) {
    throw Error(ErrorKind::kSize, "k = " + std::to_string(k) + " exceeds point count " +
                                      std::to_string(points.size()));
  }
  const std::size_t dim = points[0].size();
  for (const auto& p : points) {
    if (p.size() != dim) throw Error(ErrorKind::kDimension, "kmeans points differ in width");
  }
  ClusterResult best;
  double best_sse = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, opts.restarts); ++r) {
    Rng rng = make_rng({salt::kMemory, seed, static_cast<std::uint64_t>(r)});
    ClusterResult res = lloyd(points, plus_plus_init(points, k, rng), opts);
    const double sse = cluster_sse(points, res);
    if (sse < best_sse) {
      best_sse = sse;
      best = std::move(res);
    }
  }
  return best;
}

double cluster_sse(const std::vector<Point>& points, const ClusterResult& result) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i)
    s += squared_distance(points[i], result.centroids[result.assignment[i]]);
  return s;
}

std::vector<int> select_exemplars(const std::vector<Point>& embeddings, int capacity,
                                  std::uint64_t seed, const KMeansOptions& opts) {
  if (embeddings.empty()) {
    throw Error(ErrorKind::kEmptyRelation, "no instances to select exemplars from");
  }
  if (capacity < 1) throw Error(ErrorKind::kSize, "memory capacity must be >= 1");
  const int k = std::min<int>(capacity, static_cast<int>(embeddings.size()));
  const ClusterResult res = kmeans(embeddings, k, seed, opts);
  std::vector<int> picks(k, -1);
  std::vector<double> best(k, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const int c = res.assignment[i];
    const double d = squared_distance(embeddings[i], res.centroids[c]);
    if (d < best[c]) {
      best[c] = d;
      picks[c] = static_cast<int>(i);
    }
  }
  return picks;
}

std::vector<Instance> select_memory(const Encoder& encoder, int relation,
                                    const std::vector<Instance>& instances, int capacity,
                                    std::uint64_t seed, const KMeansOptions& opts) {
  if (instances.empty()) {
    throw Error(ErrorKind::kEmptyRelation,
                "relation " + std::to_string(relation) + " has no instances");
  }
  std::vector<MarkedSequence> seqs;
  seqs.reserve(instances.size());
  for (const Instance& inst : instances) {
    if (inst.relation != relation) {
      throw Error(ErrorKind::kInvalidInput, "instance labelled " +
                                                std::to_string(inst.relation) +
                                                " passed for relation " +
                                                std::to_string(relation));
    }
    seqs.push_back(insert_entity_markers(inst, encoder.config().vocab_size));
  }
  std::vector<const MarkedSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  std::vector<Point> emb;
  emb.reserve(instances.size());
  for (Tensor& h : encoder.encode_batch(ptrs)) emb.push_back(std::move(h.values));
  std::vector<Instance> out;
  for (int idx : select_exemplars(emb, capacity, seed, opts)) out.push_back(instances[idx]);
  return out;
}

std::size_t MemoryStore::total() const {
  std::size_t n = 0;
  for (const auto& [r, list] : exemplars) n += list.size();
  return n;
}

std::vector<const Instance*> MemoryStore::all() const {
  std::vector<const Instance*> out;
  for (const auto& [r, list] : exemplars)
    for (const Instance& inst : list) out.push_back(&inst);
  return out;
}

MemoryStore merge_memory(const MemoryStore& prev,
                         const std::map<int, std::vector<Instance>>& fresh, int task) {
  MemoryStore out = prev;
  for (const auto& [r, list] : fresh) {
    if (prev.contains(r)) {
      throw Error(ErrorKind::kDuplicate,
                  "relation " + std::to_string(r) + " is already in memory");
    }
    if (static_cast<int>(list.size()) > prev.capacity) {
      throw Error(ErrorKind::kSize, "relation " + std::to_string(r) +
                                        " exceeds memory capacity");
    }
    for (const Instance& inst : list) {
      if (inst.relation != r) {
        throw Error(ErrorKind::kInvalidInput, "exemplar label does not match its relation");
      }
    }
    out.exemplars[r] = list;
    out.origin_task[r] = task;
  }
  return out;
}

void write_memory_dump(std::ostream& out, const MemoryStore& memory,
                       const std::vector<std::string>& relation_names) {
  for (const auto& [r, list] : memory.exemplars) {
    for (const Instance& inst : list) {
      nlohmann::json j = {{"tokens", inst.tokens},
                          {"h", {inst.head.start, inst.head.end}},
                          {"t", {inst.tail.start, inst.tail.end}},
                          {"relation", relation_names.at(r)},
                          {"task", memory.origin_task.at(r)}};
      out << j.dump() << '\n';
    }
  }
}

}  // namespace fea
