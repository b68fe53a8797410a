#include "fea/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include "fea/error.hpp"

namespace fea {

namespace {

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

// out(m x n) += a(m x k) * b(k x n)
void acc_ab(double* out, const double* a, const double* b, std::size_t m,
            std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out(m x n) += a(m x k) * b(n x k)^T
void acc_abt(double* out, const double* a, const double* b, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out[i * n + j] += s;
    }
  }
}

// out(k x n) += a(m x k)^T * b(m x n)
void acc_atb(double* out, const double* a, const double* b, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

void accumulate(Tensor& into, const Tensor& g) {
  for (std::size_t i = 0; i < g.values.size(); ++i) into.values[i] += g.values[i];
}

[[noreturn]] void dim_error(const char* op, const Tensor& a, const Tensor& b) {
  throw Error(ErrorKind::kDimension, std::string(op) + ": incompatible shapes " +
                                        shape_str(a.shape) + " and " +
                                        shape_str(b.shape));
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape s) : shape(std::move(s)), values(shape_numel(shape), 0.0) {}

Tensor::Tensor(Shape s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {
  if (values.size() != shape_numel(shape)) {
    throw Error(ErrorKind::kShape, "value count " + std::to_string(values.size()) +
                                       " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

std::size_t Tensor::rows() const {
  if (shape.size() <= 1) return 1;
  return shape_numel(shape) / shape.back();
}

std::size_t Tensor::cols() const { return shape.empty() ? 1 : shape.back(); }

double Tensor::item() const {
  if (values.size() != 1) {
    throw Error(ErrorKind::kShape, "item() on tensor of shape " + shape_str(shape));
  }
  return values[0];
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) dim_error("matmul", a, b);
  Tensor out({a.rows(), b.cols()});
  acc_ab(out.values.data(), a.values.data(), b.values.data(), a.rows(), a.cols(),
         b.cols());
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) dim_error("matmul_nt", a, b);
  Tensor out({a.rows(), b.rows()});
  acc_abt(out.values.data(), a.values.data(), b.values.data(), a.rows(), a.cols(),
          b.rows());
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  const std::size_t n = logits.rows(), c = logits.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.values.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= z;
  }
  return out;
}

double l2_norm(std::span<const double> values) {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

// ---------------------------------------------------------------- ParamStore

ParamStore::ParamStore(const ParamStore& other)
    : params_(other.params_), step_(other.step_) {
  rebuild_index();
}

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this != &other) {
    params_ = other.params_;
    step_ = other.step_;
    rebuild_index();
  }
  return *this;
}

void ParamStore::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
}

Parameter& ParamStore::add(const std::string& name, Tensor value) {
  if (index_.count(name)) {
    throw Error(ErrorKind::kDuplicate, "parameter '" + name + "' already exists");
  }
  Parameter p;
  p.name = name;
  p.grad = Tensor(value.shape);
  p.m = Tensor(value.shape);
  p.v = Tensor(value.shape);
  p.value = std::move(value);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw Error(ErrorKind::kInvalidInput, "unknown parameter '" + name + "'");
  }
  return params_[it->second];
}

const Parameter& ParamStore::get(const std::string& name) const {
  return const_cast<ParamStore*>(this)->get(name);
}

bool ParamStore::contains(const std::string& name) const {
  return index_.count(name) > 0;
}

void ParamStore::grow(const std::string& name, Tensor value) {
  Parameter& p = get(name);
  if (value.size() < p.value.size()) {
    throw Error(ErrorKind::kShape, "grow cannot shrink '" + name + "'");
  }
  auto extend = [&](const Tensor& old) {
    Tensor t(value.shape);
    std::copy(old.values.begin(), old.values.end(), t.values.begin());
    return t;
  };
  p.grad = extend(p.grad);
  p.m = extend(p.m);
  p.v = extend(p.v);
  p.value = std::move(value);
}

void ParamStore::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.values.begin(), p.grad.values.end(), 0.0);
}

void ParamStore::reset_moments() {
  for (auto& p : params_) {
    std::fill(p.m.values.begin(), p.m.values.end(), 0.0);
    std::fill(p.v.values.begin(), p.v.values.end(), 0.0);
  }
  step_ = 0;
}

std::size_t ParamStore::numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void adam_step(ParamStore& store, const AdamConfig& cfg) {
  if (store.params().empty()) return;
  store.set_step(store.step() + 1);
  const double t = static_cast<double>(store.step());
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& p : store.params()) {
    auto& w = p.value.values;
    auto& g = p.grad.values;
    auto& m = p.m.values;
    auto& v = p.v.values;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      g[i] = 0.0;
    }
  }
}

double grad_norm(std::initializer_list<const ParamStore*> stores) {
  double s = 0.0;
  for (const ParamStore* st : stores) {
    for (const auto& p : st->params()) {
      for (double g : p.grad.values) s += g * g;
    }
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------- Tape

void Tape::check(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw Error(ErrorKind::kInvalidInput, "variable does not belong to this tape");
  }
}

const Tensor& Tape::value(Var v) const {
  check(v);
  const Node& n = nodes_[v.id];
  return n.ext ? *n.ext : n.value;
}

Tensor& Tape::grad_of(int id) {
  Node& n = nodes_[id];
  if (n.param) {
    if (n.param->grad.size() != n.param->value.size()) {
      n.param->grad = Tensor(n.param->value.shape);
    }
    return n.param->grad;
  }
  if (n.grad.size() != value(Var{id}).size()) n.grad = Tensor(value(Var{id}).shape);
  return n.grad;
}

Var Tape::push(Tensor value, std::vector<int> inputs,
               std::function<void(Tape&, const Tensor&)> backprop) {
  Node n;
  n.value = std::move(value);
  bool req = false;
  if (grad_enabled_) {
    for (int i : inputs) req = req || nodes_[i].requires_grad;
  }
  n.requires_grad = req;
  if (req) n.backprop = std::move(backprop);
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::view(const Tensor& value) {
  Node n;
  n.ext = &value;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.ext = &p.value;
  if (grad_enabled_) {
    n.param = &p;
    n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::matmul(Var a, Var b) {
  check(a);
  check(b);
  Tensor out = fea::matmul(value(a), value(b));
  const int ia = a.id, ib = b.id;
  return push(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(Var{ia});
    const Tensor& B = t.value(Var{ib});
    if (t.needs(ia)) {
      acc_abt(t.grad_of(ia).values.data(), g.values.data(), B.values.data(), A.rows(),
              B.cols(), A.cols());
    }
    if (t.needs(ib)) {
      acc_atb(t.grad_of(ib).values.data(), A.values.data(), g.values.data(), A.rows(),
              A.cols(), B.cols());
    }
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  check(a);
  check(b);
  Tensor out = fea::matmul_nt(value(a), value(b));
  const int ia = a.id, ib = b.id;
  return push(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(Var{ia});
    const Tensor& B = t.value(Var{ib});
    // g is (m x n), A is (m x k), B is (n x k).
    if (t.needs(ia)) {
      acc_ab(t.grad_of(ia).values.data(), g.values.data(), B.values.data(), A.rows(),
             B.rows(), A.cols());
    }
    if (t.needs(ib)) {
      acc_atb(t.grad_of(ib).values.data(), g.values.data(), A.values.data(), A.rows(),
              B.rows(), A.cols());
    }
  });
}

Var Tape::add(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.size() != B.size() || A.cols() != B.cols()) dim_error("add", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += B.values[i];
  const int ia = a.id, ib = b.id;
  return push(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.needs(ia)) accumulate(t.grad_of(ia), g);
    if (t.needs(ib)) accumulate(t.grad_of(ib), g);
  });
}

Var Tape::add_row(Var a, Var row) {
  check(a);
  check(row);
  const Tensor& A = value(a);
  const Tensor& R = value(row);
  if (R.size() != A.cols()) dim_error("add_row", A, R);
  Tensor out = A;
  const std::size_t n = A.rows(), c = A.cols();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.values[i * c + j] += R.values[j];
  }
  const int ia = a.id, ir = row.id;
  return push(std::move(out), {ia, ir}, [ia, ir, n, c](Tape& t, const Tensor& g) {
    if (t.needs(ia)) accumulate(t.grad_of(ia), g);
    if (t.needs(ir)) {
      Tensor& gr = t.grad_of(ir);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) gr.values[j] += g.values[i * c + j];
      }
    }
  });
}

Var Tape::scale(Var a, double s) {
  check(a);
  Tensor out = value(a);
  for (double& x : out.values) x *= s;
  const int ia = a.id;
  return push(std::move(out), {ia}, [ia, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga.values[i] += s * g.values[i];
  });
}

Var Tape::gelu(Var a) {
  check(a);
  Tensor out = value(a);
  for (double& x : out.values) {
    const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
    x = 0.5 * x * (1.0 + std::tanh(u));
  }
  const int ia = a.id;
  return push(std::move(out), {ia}, [ia](Tape& t, const Tensor& g) {
    const Tensor& X = t.value(Var{ia});
    Tensor& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = X.values[i];
      const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
      const double th = std::tanh(u);
      const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
      const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      ga.values[i] += g.values[i] * d;
    }
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  check(x);
  check(gain);
  check(bias);
  const Tensor& X = value(x);
  const Tensor& G = value(gain);
  const Tensor& B = value(bias);
  const std::size_t n = X.rows(), d = X.cols();
  if (d < 2) {
    throw Error(ErrorKind::kInvalidInput,
                "layer_norm needs at least 2 features, got " + std::to_string(d));
  }
  if (G.size() != d) dim_error("layer_norm gain", X, G);
  if (B.size() != d) dim_error("layer_norm bias", X, B);

  Tensor out(X.shape);
  Tensor xhat(X.shape);
  std::vector<double> rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = X.values.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * rstd[i];
      xhat.values[i * d + j] = xh;
      out.values[i * d + j] = xh * G.values[j] + B.values[j];
    }
  }
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return push(std::move(out), {ix, ig, ib},
              [ix, ig, ib, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](
                  Tape& t, const Tensor& g) {
                const Tensor& G = t.value(Var{ig});
                if (t.needs(ig)) {
                  Tensor& gg = t.grad_of(ig);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                      gg.values[j] += g.values[i * d + j] * xhat.values[i * d + j];
                }
                if (t.needs(ib)) {
                  Tensor& gb = t.grad_of(ib);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gb.values[j] += g.values[i * d + j];
                }
                if (t.needs(ix)) {
                  Tensor& gx = t.grad_of(ix);
                  std::vector<double> dxh(d);
                  for (std::size_t i = 0; i < n; ++i) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      dxh[j] = g.values[i * d + j] * G.values[j];
                      mean_d += dxh[j];
                      mean_dx += dxh[j] * xhat.values[i * d + j];
                    }
                    mean_d /= static_cast<double>(d);
                    mean_dx /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                      gx.values[i * d + j] +=
                          rstd[i] * (dxh[j] - mean_d - xhat.values[i * d + j] * mean_dx);
                    }
                  }
                }
              });
}

Var Tape::gather_rows(Var table, std::vector<int> rows) {
  check(table);
  const Tensor& T = value(table);
  const std::size_t r = T.rows(), c = T.cols();
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= r) {
      throw Error(ErrorKind::kInvalidInput, "gather_rows index " + std::to_string(rows[i]) +
                                                " out of range for " + shape_str(T.shape));
    }
    std::copy_n(T.values.data() + rows[i] * c, c, out.values.data() + i * c);
  }
  const int it = table.id;
  return push(std::move(out), {it}, [it, c, rows = std::move(rows)](Tape& t, const Tensor& g) {
    Tensor& gt = t.grad_of(it);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      double* dst = gt.values.data() + rows[i] * c;
      const double* src = g.values.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorKind::kInvalidInput, "concat_rows of nothing");
  const std::size_t c = value(parts[0]).cols();
  std::size_t total = 0;
  std::vector<int> ids;
  for (Var p : parts) {
    check(p);
    if (value(p).cols() != c) dim_error("concat_rows", value(parts[0]), value(p));
    total += value(p).rows();
    ids.push_back(p.id);
  }
  Tensor out({total, c});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& v = value(p);
    std::copy(v.values.begin(), v.values.end(), out.values.begin() + off);
    off += v.size();
  }
  std::vector<int> ids_copy = ids;
  return push(std::move(out), std::move(ids_copy), [ids](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (int id : ids) {
      const std::size_t sz = t.value(Var{id}).size();
      if (t.needs(id)) {
        Tensor& gi = t.grad_of(id);
        for (std::size_t i = 0; i < sz; ++i) gi.values[i] += g.values[off + i];
      }
      off += sz;
    }
  });
}

Var Tape::reshape(Var a, Shape shape) {
  check(a);
  const Tensor& A = value(a);
  if (shape_numel(shape) != A.size()) {
    throw Error(ErrorKind::kShape,
                "cannot reshape " + shape_str(A.shape) + " to " + shape_str(shape));
  }
  Tensor out(std::move(shape), A.values);
  const int ia = a.id;
  return push(std::move(out), {ia},
              [ia](Tape& t, const Tensor& g) { accumulate(t.grad_of(ia), g); });
}

Var Tape::attention(Var q, Var k, Var v, int heads) {
  check(q);
  check(k);
  return attention(q, k, v, heads, {0, value(q).rows()}, {0, value(k).rows()});
}

Var Tape::attention(Var q, Var k, Var v, int heads, std::vector<std::size_t> q_offsets,
                    std::vector<std::size_t> k_offsets) {
  check(q);
  check(k);
  check(v);
  const Tensor& Q = value(q);
  const Tensor& K = value(k);
  const Tensor& V = value(v);
  const std::size_t nq = Q.rows(), nk = K.rows(), d = Q.cols();
  if (K.cols() != d) dim_error("attention q/k", Q, K);
  if (V.cols() != d || V.rows() != nk) dim_error("attention k/v", K, V);
  if (heads < 1 || d % static_cast<std::size_t>(heads) != 0) {
    throw Error(ErrorKind::kInvalidInput, "attention width " + std::to_string(d) +
                                              " not divisible by " + std::to_string(heads) +
                                              " heads");
  }
  const bool offsets_ok = q_offsets.size() >= 2 && q_offsets.size() == k_offsets.size() &&
                          q_offsets.front() == 0 && k_offsets.front() == 0 &&
                          q_offsets.back() == nq && k_offsets.back() == nk &&
                          std::is_sorted(q_offsets.begin(), q_offsets.end()) &&
                          std::is_sorted(k_offsets.begin(), k_offsets.end());
  if (!offsets_ok) throw Error(ErrorKind::kInvalidInput, "attention segment offsets are invalid");
  for (std::size_t s = 0; s + 1 < k_offsets.size(); ++s) {
    if (k_offsets[s] == k_offsets[s + 1] && q_offsets[s] != q_offsets[s + 1]) {
      throw Error(ErrorKind::kInvalidInput, "attention segment has queries but no keys");
    }
  }
  const std::size_t H = static_cast<std::size_t>(heads), dh = d / H;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));

  // Key range and probability offset of every query row.
  std::vector<std::size_t> kb(nq), ke(nq), po(nq + 1, 0);
  for (std::size_t s = 0; s + 1 < q_offsets.size(); ++s) {
    for (std::size_t i = q_offsets[s]; i < q_offsets[s + 1]; ++i) {
      kb[i] = k_offsets[s];
      ke[i] = k_offsets[s + 1];
    }
  }
  for (std::size_t i = 0; i < nq; ++i) po[i + 1] = po[i] + (ke[i] - kb[i]);

  // probs[h * po[nq] + po[i] + (j - kb[i])]
  std::vector<double> probs(H * po[nq]);
  Tensor out({nq, d});
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      double* p = probs.data() + h * po[nq] + po[i];
      const double* qi = Q.values.data() + i * d + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = kb[i]; j < ke[i]; ++j) {
        const double* kj = K.values.data() + j * d + h * dh;
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
        p[j - kb[i]] = s * inv;
        mx = std::max(mx, p[j - kb[i]]);
      }
      double z = 0.0;
      for (std::size_t j = kb[i]; j < ke[i]; ++j) {
        p[j - kb[i]] = std::exp(p[j - kb[i]] - mx);
        z += p[j - kb[i]];
      }
      for (std::size_t j = kb[i]; j < ke[i]; ++j) p[j - kb[i]] /= z;
      double* oi = out.values.data() + i * d + h * dh;
      for (std::size_t j = kb[i]; j < ke[i]; ++j) {
        const double* vj = V.values.data() + j * d + h * dh;
        for (std::size_t e = 0; e < dh; ++e) oi[e] += p[j - kb[i]] * vj[e];
      }
    }
  }
  const int iq = q.id, ik = k.id, iv = v.id;
  return push(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, H, nq, d, dh, inv, probs = std::move(probs), kb = std::move(kb),
       ke = std::move(ke), po = std::move(po)](Tape& t, const Tensor& g) {
        const Tensor& Q = t.value(Var{iq});
        const Tensor& K = t.value(Var{ik});
        const Tensor& V = t.value(Var{iv});
        const bool nq_ = t.needs(iq), nk_ = t.needs(ik), nv_ = t.needs(iv);
        double* gq = nq_ ? t.grad_of(iq).values.data() : nullptr;
        double* gk = nk_ ? t.grad_of(ik).values.data() : nullptr;
        double* gv = nv_ ? t.grad_of(iv).values.data() : nullptr;
        std::vector<double> dp(K.rows());
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < nq; ++i) {
            const double* p = probs.data() + h * po[nq] + po[i];
            const double* go = g.values.data() + i * d + h * dh;
            double dot = 0.0;
            for (std::size_t j = kb[i]; j < ke[i]; ++j) {
              const double* vj = V.values.data() + j * d + h * dh;
              double s = 0.0;
              for (std::size_t e = 0; e < dh; ++e) s += go[e] * vj[e];
              dp[j - kb[i]] = s;
              dot += s * p[j - kb[i]];
              if (gv) {
                double* gvj = gv + j * d + h * dh;
                for (std::size_t e = 0; e < dh; ++e) gvj[e] += p[j - kb[i]] * go[e];
              }
            }
            const double* qi = Q.values.data() + i * d + h * dh;
            for (std::size_t j = kb[i]; j < ke[i]; ++j) {
              const double ds = p[j - kb[i]] * (dp[j - kb[i]] - dot) * inv;
              if (gq) {
                const double* kj = K.values.data() + j * d + h * dh;
                double* gqi = gq + i * d + h * dh;
                for (std::size_t e = 0; e < dh; ++e) gqi[e] += ds * kj[e];
              }
              if (gk) {
                double* gkj = gk + j * d + h * dh;
                for (std::size_t e = 0; e < dh; ++e) gkj[e] += ds * qi[e];
              }
            }
          }
        }
      });
}

Var Tape::softmax_cross_entropy(Var logits, std::vector<int> labels) {
  check(logits);
  const Tensor& L = value(logits);
  const std::size_t n = L.rows(), c = L.cols();
  if (labels.size() != n) {
    throw Error(ErrorKind::kLabel, "got " + std::to_string(labels.size()) +
                                       " labels for " + std::to_string(n) + " rows");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw Error(ErrorKind::kLabel, "label " + std::to_string(labels[i]) + " at index " +
                                         std::to_string(i) + " outside [0, " +
                                         std::to_string(c) + ")");
    }
  }
  Tensor probs = softmax_rows(L);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = L.values.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    loss += -(row[labels[i]] - mx - std::log(z));
  }
  loss /= static_cast<double>(n);
  const int il = logits.id;
  return push(Tensor::scalar(loss), {il},
              [il, n, c, probs = std::move(probs), labels = std::move(labels)](
                  Tape& t, const Tensor& g) {
                Tensor& gl = t.grad_of(il);
                const double s = g.values[0] / static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i) {
                  for (std::size_t j = 0; j < c; ++j) {
                    const double target = static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0;
                    gl.values[i * c + j] += s * (probs.values[i * c + j] - target);
                  }
                }
              });
}

Var Tape::sum_squares(Var a) {
  check(a);
  double s = 0.0;
  for (double x : value(a).values) s += x * x;
  const int ia = a.id;
  return push(Tensor::scalar(s), {ia}, [ia](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(Var{ia});
    Tensor& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < A.size(); ++i) ga.values[i] += 2.0 * A.values[i] * g.values[0];
  });
}

std::size_t Tape::backward(Var loss) {
  check(loss);
  if (!grad_enabled_) {
    throw Error(ErrorKind::kPrecondition, "backward on a tape recorded without gradients");
  }
  if (backward_done_) {
    throw Error(ErrorKind::kPrecondition, "backward already ran on this tape");
  }
  if (value(loss).size() != 1) {
    throw Error(ErrorKind::kShape, "backward needs a scalar loss, got " +
                                       shape_str(value(loss).shape));
  }
  backward_done_ = true;
  std::size_t visited = 0;
  if (nodes_[loss.id].requires_grad) grad_of(loss.id).values[0] = 1.0;
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    ++visited;
    Node& n = nodes_[id];
    if (id > loss.id || !n.requires_grad || !n.backprop) continue;
    if (n.grad.size() == 0) continue;  // no gradient flowed here
    n.backprop(*this, n.grad);
    n.backprop = nullptr;
    n.grad = Tensor();
  }
  return visited;
}

double grad_check(const LossFn& loss_fn, std::vector<ParamStore*> stores, double h) {
  if (!(h > 0.0)) {
    throw Error(ErrorKind::kPrecondition, "finite-difference step must be positive");
  }
  for (ParamStore* s : stores) s->zero_grad();
  const double base = loss_fn(true);
  if (!std::isfinite(base)) throw Error(ErrorKind::kNumeric, "loss is not finite");
  double worst = 0.0;
  for (ParamStore* s : stores) {
    for (auto& p : s->params()) {
      const Tensor analytic = p.grad;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double x0 = p.value.values[i];
        p.value.values[i] = x0 + h;
        const double fp = loss_fn(false);
        p.value.values[i] = x0 - h;
        const double fm = loss_fn(false);
        p.value.values[i] = x0;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
          throw Error(ErrorKind::kNumeric, "loss is not finite under perturbation");
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic.values[i];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(a - numeric) / denom);
      }
    }
  }
  for (ParamStore* s : stores) s->zero_grad();
  return worst;
}

}  // namespace fea
