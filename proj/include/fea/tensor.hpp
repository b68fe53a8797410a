#pragma once

// Dense row-major tensors, a reverse-mode tape, and Adam.
//
// All values are 64-bit floats and every reduction runs in a fixed
// sequential order, so two runs with the same inputs produce bitwise
// identical results.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace fea {

using Shape = std::vector<std::size_t>;
using Point = std::vector<double>;

std::string shape_str(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> values;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, std::vector<double> v);

  static Tensor scalar(double x) { return Tensor({1}, {x}); }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> v);

  std::size_t size() const { return values.size(); }
  // Rank-1 tensors behave as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t r, std::size_t c) {
    return values[r * cols() + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return values[r * cols() + c];
  }
  double item() const;

  bool operator==(const Tensor& other) const = default;
};

std::size_t shape_numel(const Shape& shape);

// Plain (untaped) kernels.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor softmax_rows(const Tensor& logits);
double l2_norm(std::span<const double> values);

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m;
  Tensor v;
};

// Named trainable tensors with gradient and Adam moment buffers.
// Parameters live in a deque so references stay valid as entries are added.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Parameter& add(const std::string& name, Tensor value);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  // Replace a parameter's value with a larger one, keeping the existing
  // moments for the leading entries and zero-filling the rest.
  void grow(const std::string& name, Tensor value);

  void zero_grad();
  void reset_moments();

  std::deque<Parameter>& params() { return params_; }
  const std::deque<Parameter>& params() const { return params_; }
  long step() const { return step_; }
  void set_step(long s) { step_ = s; }
  std::size_t numel() const;

 private:
  void rebuild_index();

  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
  long step_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update over every parameter; zeroes gradients.
void adam_step(ParamStore& store, const AdamConfig& cfg);

// L2 norm of the concatenation of every gradient in the given stores.
double grad_norm(std::initializer_list<const ParamStore*> stores);

struct Var {
  int id = -1;
};

// Records forward operations and replays them in reverse.
//
// A tape is single-use: backward() may run once, after which the tape must
// be discarded. Parameter leaves accumulate directly into the owning
// ParamStore's gradient buffers.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Non-owning, non-trainable view of a tensor that outlives the tape.
  Var view(const Tensor& value);
  Var param(Parameter& p);

  const Tensor& value(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var add_row(Var a, Var row);
  Var scale(Var a, double s);
  Var gelu(Var a);
  Var layer_norm(Var x, Var gain, Var bias, double eps);
  Var gather_rows(Var table, std::vector<int> rows);
  Var concat_rows(const std::vector<Var>& parts);
  Var reshape(Var a, Shape shape);
  // Multi-head scaled dot-product attention; q is (nq x d), k and v are
  // (nk x d), heads split the d columns evenly.
  Var attention(Var q, Var k, Var v, int heads);
  // Block-diagonal variant: query rows [q_offsets[s], q_offsets[s+1]) attend
  // only to key rows [k_offsets[s], k_offsets[s+1]).
  Var attention(Var q, Var k, Var v, int heads, std::vector<std::size_t> q_offsets,
                std::vector<std::size_t> k_offsets);
  Var softmax_cross_entropy(Var logits, std::vector<int> labels);
  Var sum_squares(Var a);

  // Returns the number of nodes visited.
  std::size_t backward(Var loss);

 private:
  struct Node {
    Tensor value;
    const Tensor* ext = nullptr;
    Parameter* param = nullptr;
    Tensor grad;
    bool requires_grad = false;
    std::vector<int> inputs;
    std::function<void(Tape&, const Tensor&)> backprop;
  };

  Var push(Tensor value, std::vector<int> inputs,
           std::function<void(Tape&, const Tensor&)> backprop);
  bool needs(int id) const { return nodes_[id].requires_grad; }
  Tensor& grad_of(int id);
  void check(Var v) const;

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

// Central finite-difference check. `loss_fn(true)` must run forward and
// backward (accumulating into the stores' gradients) and return the loss;
// `loss_fn(false)` only evaluates the loss. Returns the worst relative
// error |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
using LossFn = std::function<double(bool with_grad)>;
double grad_check(const LossFn& loss_fn, std::vector<ParamStore*> stores,
                  double h);

}  // namespace fea
