#pragma once

// Brute-force k-means optimum and invariant checks shared by the unit and
// acceptance tests.

#include <limits>
#include <random>
#include <vector>

#include "fea/memory.hpp"

namespace oracle {

inline double partition_sse(const std::vector<fea::Point>& pts, const std::vector<int>& label,
                            int k) {
  const std::size_t dim = pts[0].size();
  std::vector<std::vector<double>> sum(k, std::vector<double>(dim, 0.0));
  std::vector<int> n(k, 0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ++n[label[i]];
    for (std::size_t d = 0; d < dim; ++d) sum[label[i]][d] += pts[i][d];
  }
  double sse = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t d = 0; d < dim; ++d) {
      const double m = sum[label[i]][d] / n[label[i]];
      sse += (pts[i][d] - m) * (pts[i][d] - m);
    }
  }
  return sse;
}

// Minimum SSE over every labelling that uses all k clusters.
inline double optimal_sse(const std::vector<fea::Point>& pts, int k) {
  const std::size_t n = pts.size();
  std::vector<int> label(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<bool> used(k, false);
    for (int l : label) used[l] = true;
    bool all = true;
    for (bool u : used) all = all && u;
    if (all) best = std::min(best, partition_sse(pts, label, k));
    std::size_t i = 0;
    while (i < n && ++label[i] == k) label[i++] = 0;
    if (i == n) break;
  }
  return best;
}

struct Invariants {
  bool centroid_is_mean = true;
  bool nearest_assignment = true;
  bool exemplar_rule = true;
};

inline Invariants check_invariants(const std::vector<fea::Point>& pts, int k,
                                   const fea::ClusterResult& res,
                                   const std::vector<int>& picks) {
  Invariants inv;
  const std::size_t dim = pts[0].size();
  for (int c = 0; c < k; ++c) {
    std::vector<double> mean(dim, 0.0);
    int count = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (res.assignment[i] != c) continue;
      ++count;
      for (std::size_t d = 0; d < dim; ++d) mean[d] += pts[i][d];
    }
    if (count == 0) {
      inv.centroid_is_mean = false;
      continue;
    }
    for (std::size_t d = 0; d < dim; ++d)
      if (std::abs(mean[d] / count - res.centroids[c][d]) > 1e-9) inv.centroid_is_mean = false;
  }
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double own = fea::squared_distance(pts[i], res.centroids[res.assignment[i]]);
    for (int c = 0; c < k; ++c)
      if (fea::squared_distance(pts[i], res.centroids[c]) < own - 1e-12)
        inv.nearest_assignment = false;
  }
  for (int c = 0; c < k; ++c) {
    int want = -1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (res.assignment[i] != c) continue;
      const double d = fea::squared_distance(pts[i], res.centroids[c]);
      if (d < best) {
        best = d;
        want = static_cast<int>(i);
      }
    }
    if (picks.at(c) != want) inv.exemplar_rule = false;
  }
  return inv;
}

inline std::vector<fea::Point> random_points(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<fea::Point> pts(n, fea::Point(2));
  for (auto& p : pts)
    for (double& x : p) x = g(rng);
  return pts;
}

}  // namespace oracle
