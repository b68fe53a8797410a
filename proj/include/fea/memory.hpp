#pragma once

// Per-relation exemplar memory and k-means exemplar selection.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "fea/datastream.hpp"
#include "fea/model.hpp"

namespace fea {

struct ClusterResult {
  std::vector<Point> centroids;
  std::vector<int> assignment;
  int iterations = 0;
  bool converged = false;
};

struct KMeansOptions {
  int max_iter = 100;
  double tol = 1e-6;
  // Independent k-means++ starts; the lowest-SSE result wins.
  int restarts = 10;
};

double squared_distance(const Point& a, const Point& b);

// k-means++ seeding followed by Lloyd iterations. At return every point is
// assigned to its nearest centroid (ties to the lowest index) and, when
// converged, every centroid is the mean of its points.
ClusterResult kmeans(const std::vector<Point>& points, int k, std::uint64_t seed,
                     const KMeansOptions& opts = {});

double cluster_sse(const std::vector<Point>& points, const ClusterResult& result);

// Clusters the embeddings into min(capacity, n) groups and returns, per
// cluster in index order, the member closest to its centroid (ties to the
// lowest input index).
std::vector<int> select_exemplars(const std::vector<Point>& embeddings, int capacity,
                                  std::uint64_t seed, const KMeansOptions& opts = {});

std::vector<Instance> select_memory(const Encoder& encoder, int relation,
                                    const std::vector<Instance>& instances, int capacity,
                                    std::uint64_t seed, const KMeansOptions& opts = {});

struct MemoryStore {
  int capacity = 10;
  std::map<int, std::vector<Instance>> exemplars;  // relation -> stored instances
  std::map<int, int> origin_task;                  // relation -> task it came from

  bool contains(int relation) const { return exemplars.count(relation) > 0; }
  std::size_t total() const;
  // All stored instances, relations in ascending id order.
  std::vector<const Instance*> all() const;
};

MemoryStore merge_memory(const MemoryStore& prev,
                         const std::map<int, std::vector<Instance>>& fresh, int task);

// JSON-lines dump: one stored instance per line with relation and task tags.
void write_memory_dump(std::ostream& out, const MemoryStore& memory,
                       const std::vector<std::string>& relation_names);

}  // namespace fea
