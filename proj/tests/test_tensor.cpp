#include <cmath>
#include <random>

#include "doctest.h"
#include "fea/error.hpp"
#include "fea/tensor.hpp"

using namespace fea;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(shape);
  for (double& x : t.values) x = n(rng);
  return t;
}

// Naive triple loop, independent of the library kernels.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul kernels agree with a naive product") {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({3, 5}, rng), b = random_tensor({5, 4}, rng);
  const Tensor c = matmul(a, b), ref = naive_matmul(a, b);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c.values[i] == doctest::Approx(ref.values[i]));
  Tensor bt({4, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) bt(j, i) = b(i, j);
  const Tensor d = matmul_nt(a, bt);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(d.values[i] == doctest::Approx(ref.values[i]));
  CHECK_THROWS_AS(matmul(a, a), Error);
}

TEST_CASE("softmax rows sum to one and cross-entropy matches the closed form") {
  const Tensor logits = Tensor::matrix(2, 3, {1.0, 2.0, 3.0, 0.5, 0.5, -1.0});
  const Tensor p = softmax_rows(logits);
  for (std::size_t r = 0; r < 2; ++r) CHECK(p(r, 0) + p(r, 1) + p(r, 2) == doctest::Approx(1.0));
  Tape tape;
  const Var l = tape.softmax_cross_entropy(tape.constant(logits), {2, 0});
  const double ref = 0.5 * (-(3.0 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0))) -
                            (0.5 - std::log(2 * std::exp(0.5) + std::exp(-1.0))));
  CHECK(tape.value(l).item() == doctest::Approx(ref).epsilon(1e-12));
  Tape bad;
  CHECK_THROWS_AS(bad.softmax_cross_entropy(bad.constant(logits), {3, 0}), Error);
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  std::mt19937_64 rng(7);
  ParamStore ps;
  Parameter& a = ps.add("a", random_tensor({4, 6}, rng));
  Parameter& b = ps.add("b", random_tensor({6, 6}, rng, 0.5));
  Parameter& row = ps.add("row", random_tensor({6}, rng));
  Parameter& g = ps.add("g", random_tensor({6}, rng));
  Parameter& beta = ps.add("beta", random_tensor({6}, rng));
  Parameter& table = ps.add("table", random_tensor({5, 6}, rng));
  const std::vector<int> labels = {0, 3, 5, 1, 2, 4};

  auto loss = [&](bool with_grad) {
    Tape tape(with_grad);
    Var x = tape.matmul(tape.param(a), tape.param(b));
    x = tape.add_row(x, tape.param(row));
    x = tape.gelu(x);
    x = tape.layer_norm(x, tape.param(g), tape.param(beta), 1e-5);
    Var e = tape.gather_rows(tape.param(table), {4, 0, 0, 2});
    x = tape.add(x, tape.scale(e, 0.7));
    Var q = tape.matmul_nt(x, tape.param(b));
    Var att = tape.attention(q, x, x, 2, {0, 2, 4}, {0, 2, 4});
    Var both = tape.concat_rows({att, tape.gather_rows(tape.param(table), {1, 3})});
    Var flat = tape.reshape(both, {3, 12});
    Var sq = tape.sum_squares(flat);
    Var ce = tape.softmax_cross_entropy(tape.matmul_nt(both, tape.param(b)), labels);
    Var total = tape.add(tape.scale(sq, 0.01), ce);
    if (with_grad) tape.backward(total);
    return tape.value(total).item();
  };
  CHECK(grad_check(loss, {&ps}, 1e-5) < 1e-5);
}

TEST_CASE("segmented attention equals attention run per segment") {
  std::mt19937_64 rng(3);
  const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng),
               v = random_tensor({5, 4}, rng);
  Tape tape(false);
  const Var joint = tape.attention(tape.constant(q), tape.constant(k), tape.constant(v), 2,
                                   {0, 1, 3}, {0, 2, 5});
  const Tensor out = tape.value(joint);
  auto slice = [](const Tensor& t, std::size_t b, std::size_t e) {
    return Tensor({e - b, t.cols()}, std::vector<double>(t.values.begin() + b * t.cols(),
                                                         t.values.begin() + e * t.cols()));
  };
  const Var s0 = tape.attention(tape.constant(slice(q, 0, 1)), tape.constant(slice(k, 0, 2)),
                                tape.constant(slice(v, 0, 2)), 2);
  const Var s1 = tape.attention(tape.constant(slice(q, 1, 3)), tape.constant(slice(k, 2, 5)),
                                tape.constant(slice(v, 2, 5)), 2);
  std::vector<double> ref = tape.value(s0).values;
  ref.insert(ref.end(), tape.value(s1).values.begin(), tape.value(s1).values.end());
  CHECK(out.values == ref);
  CHECK_THROWS_AS(tape.attention(tape.constant(q), tape.constant(k), tape.constant(v), 2, {0, 3},
                                 {0, 4}),
                  Error);
}

TEST_CASE("first Adam step moves each weight by lr * g / (|g| + eps)") {
  ParamStore ps;
  Parameter& p = ps.add("w", Tensor({3}, {1.0, -2.0, 0.5}));
  p.grad.values = {0.3, -4.0, 0.0};
  const AdamConfig cfg{0.01};
  adam_step(ps, cfg);
  const std::vector<double> g = {0.3, -4.0, 0.0}, w0 = {1.0, -2.0, 0.5};
  for (int i = 0; i < 3; ++i) {
    const double expect = w0[i] - cfg.lr * g[i] / (std::fabs(g[i]) + cfg.eps);
    CHECK(p.value.values[i] == doctest::Approx(expect).epsilon(1e-12));
    CHECK(p.grad.values[i] == 0.0);
  }
  ps.reset_moments();
  CHECK(ps.step() == 0);
}

TEST_CASE("gradient norm is the L2 norm of all gradients") {
  ParamStore a, b;
  a.add("x", Tensor({2}, {0, 0})).grad.values = {3.0, 0.0};
  b.add("y", Tensor({1}, {0})).grad.values = {4.0};
  CHECK(grad_norm({&a, &b}) == doctest::Approx(5.0));
}

TEST_CASE("backward runs once per tape") {
  ParamStore ps;
  Parameter& p = ps.add("w", Tensor({2}, {1.0, 2.0}));
  Tape tape;
  const Var l = tape.sum_squares(tape.param(p));
  tape.backward(l);
  CHECK(p.grad.values == std::vector<double>{2.0, 4.0});
  CHECK_THROWS_AS(tape.backward(l), Error);
}
