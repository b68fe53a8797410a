#pragma once

#include <random>
#include <vector>

#include "fea/diagnostics.hpp"

namespace oracle {

struct Recount {
  std::size_t errors = 0, latter = 0, former = 0, inner = 0;
};

inline Recount recount(const std::vector<fea::PredictionRecord>& recs) {
  Recount c;
  for (const auto& r : recs) {
    if (r.gold == r.predicted) continue;
    ++c.errors;
    if (r.predicted_task > r.gold_task) ++c.latter;
    else if (r.predicted_task < r.gold_task) ++c.former;
    else ++c.inner;
  }
  return c;
}

// Records over `relations` relations spread across `tasks` tasks, where
// relation r belongs to task r % tasks.
inline std::vector<fea::PredictionRecord> random_records(std::mt19937_64& rng, int n,
                                                         int relations, int tasks,
                                                         double error_rate) {
  std::uniform_int_distribution<int> rel(0, relations - 1);
  std::bernoulli_distribution wrong(error_rate);
  std::vector<fea::PredictionRecord> out;
  for (int i = 0; i < n; ++i) {
    fea::PredictionRecord r;
    r.instance = i;
    r.gold = rel(rng);
    r.predicted = wrong(rng) ? rel(rng) : r.gold;
    r.gold_task = r.gold % tasks;
    r.predicted_task = r.predicted % tasks;
    out.push_back(r);
  }
  return out;
}

}  // namespace oracle
