#include <random>
#include <sstream>

#include "doctest.h"
#include "fea/diagnostics.hpp"
#include "fea/error.hpp"
#include "taxonomy_oracle.hpp"

using namespace fea;

TEST_CASE("taxonomy shares equal a brute-force recount") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const auto recs = oracle::random_records(rng, 1000, 12, 4, 0.3);
    const Taxonomy t = error_taxonomy(recs);
    const auto c = oracle::recount(recs);
    REQUIRE(c.errors > 0);
    CHECK(t.errors == c.errors);
    CHECK(t.latter == c.latter);
    CHECK(t.former == c.former);
    CHECK(t.inner == c.inner);
    CHECK(t.latter_share == static_cast<double>(c.latter) / c.errors);
    CHECK(t.former_share == static_cast<double>(c.former) / c.errors);
    CHECK(t.inner_share == static_cast<double>(c.inner) / c.errors);
    CHECK(std::abs(t.latter_share + t.former_share + t.inner_share - 1.0) <= 1e-12);
    CHECK(t.error_rate == static_cast<double>(c.errors) / 1000.0);
  }
}

TEST_CASE("taxonomy classes follow the task order") {
  PredictionRecord r{0, 5, 2, 9, 5};
  CHECK(error_taxonomy({r}).latter == 1);
  r.predicted_task = 1;
  CHECK(error_taxonomy({r}).former == 1);
  r.predicted_task = 2;
  CHECK(error_taxonomy({r}).inner == 1);
}

TEST_CASE("no errors gives zero shares") {
  const PredictionRecord r{0, 1, 0, 1, 0};
  const Taxonomy t = error_taxonomy({r, r});
  CHECK(t.errors == 0);
  CHECK(t.error_rate == 0.0);
  CHECK(t.latter_share == 0.0);
  CHECK(t.former_share == 0.0);
  CHECK(t.inner_share == 0.0);
}

TEST_CASE("confusion pairs are ranked and account for every error") {
  std::mt19937_64 rng(5);
  const auto recs = oracle::random_records(rng, 500, 6, 3, 0.4);
  const auto pairs = confusion_pairs(recs, 1000);
  std::size_t total = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    total += pairs[i].count;
    if (i > 0) {
      const auto& a = pairs[i - 1];
      const auto& b = pairs[i];
      CHECK((a.count > b.count ||
             (a.count == b.count && std::make_pair(a.gold, a.predicted) <
                                        std::make_pair(b.gold, b.predicted))));
    }
  }
  CHECK(total == oracle::recount(recs).errors);
  const auto one = confusion_pairs({PredictionRecord{0, 3, 0, 4, 1}}, 5);
  REQUIRE(one.size() == 1);
  CHECK(one[0].gold == 3);
  CHECK(one[0].predicted == 4);
  CHECK(one[0].count == 1);
  CHECK(one[0].rate == 1.0);
}

TEST_CASE("PCA output is centred on both axes") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(3.0, 2.0);
  std::vector<Point> rows(40, Point(5));
  for (auto& r : rows)
    for (double& x : r) x = g(rng);
  const auto xy = pca_2d(rows);
  double m0 = 0, m1 = 0, v0 = 0, v1 = 0;
  for (const auto& p : xy) {
    m0 += p[0];
    m1 += p[1];
    v0 += p[0] * p[0];
    v1 += p[1] * p[1];
  }
  CHECK(std::abs(m0 / 40) < 1e-12);
  CHECK(std::abs(m1 / 40) < 1e-12);
  CHECK(v0 >= v1);
}

TEST_CASE("logistic boundary separates separable points") {
  std::vector<std::array<double, 2>> x;
  std::vector<int> y;
  for (int i = 0; i < 20; ++i) {
    x.push_back({-1.0 - 0.1 * i, 0.3 * (i % 3)});
    y.push_back(0);
    x.push_back({1.0 + 0.1 * i, -0.3 * (i % 3)});
    y.push_back(1);
  }
  const LinearBoundary b = fit_logistic_2d(x, y);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK((b.score(x[i]) > 0) == (y[i] == 1));
}

TEST_CASE("gradient-norm mean of an empty series is zero") {
  CHECK(mean_gradient_norm({}) == 0.0);
  CHECK(mean_gradient_norm({1.0, 2.0, 6.0}) == doctest::Approx(3.0));
}
