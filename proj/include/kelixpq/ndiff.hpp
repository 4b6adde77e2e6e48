#pragma once

// Minimal reverse-mode differentiation over dense row-major arrays.
//
// A Graph is a tape: every op appends a node holding its forward value and a
// backward closure. `Graph::backward` walks the tape in reverse creation
// order, which is a topological order, so gradient accumulation order is
// fixed and results are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kelixpq/error.hpp"

namespace kelixpq::ndiff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Rows/cols view of a rank <= 2 shape. Rank 0 is 1x1 and rank 1 is a row.
inline std::pair<std::size_t, std::size_t> dims2(const Shape& shape) {
  switch (shape.size()) {
    case 0: return {1, 1};
    case 1: return {1, shape[0]};
    case 2: return {shape[0], shape[1]};
    default: throw UsageError("rank > 2 not supported: " + shape_str(shape));
  }
}

template <class T>
bool all_finite(std::span<const T> xs) {
  for (T x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

/// Dense array with an optional gradient accumulator.
template <class T = double>
struct DiffArray {
  Shape shape{0};
  std::vector<T> values;
  bool requires_grad = false;
  std::vector<T> grad;  // empty unless requires_grad

  DiffArray() = default;
  DiffArray(Shape s, std::vector<T> v, bool rg = false)
      : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != numel(shape))
      throw UsageError("DiffArray: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    set_requires_grad(rg);
  }

  static DiffArray zeros(Shape s, bool rg = false) {
    const auto n = numel(s);
    return DiffArray(std::move(s), std::vector<T>(n, T{0}), rg);
  }

  void set_requires_grad(bool rg) {
    requires_grad = rg;
    if (rg)
      grad.assign(values.size(), T{0});
    else
      grad.clear();
  }

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return dims2(shape).first; }
  std::size_t cols() const { return dims2(shape).second; }
  T& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  friend bool operator==(const DiffArray& a, const DiffArray& b) {
    return a.shape == b.shape && a.values == b.values;
  }
};

/// Named trainable parameters. Iteration is sorted by name.
template <class T = double>
class ParamSet {
 public:
  explicit ParamSet(std::uint64_t seed = 0) : seed_(seed) {}

  DiffArray<T>& add(const std::string& name, DiffArray<T> value) {
    if (params_.count(name)) throw UsageError("duplicate parameter: " + name);
    value.set_requires_grad(true);
    return params_.emplace(name, std::move(value)).first->second;
  }
  DiffArray<T>& add(const std::string& name, Shape shape, std::vector<T> values) {
    return add(name, DiffArray<T>(std::move(shape), std::move(values)));
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  DiffArray<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }
  const DiffArray<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
  }
  std::size_t size() const { return params_.size(); }
  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += v.size();
    return n;
  }
  void zero_grad() {
    for (auto& [k, v] : params_) std::fill(v.grad.begin(), v.grad.end(), T{0});
  }
  std::uint64_t seed() const { return seed_; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.params_ == b.params_;
  }

 private:
  std::map<std::string, DiffArray<T>> params_;
  std::uint64_t seed_;
};

template <class T>
class Graph;

/// Handle to a node of a Graph.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::uint32_t id = 0;

  const Shape& shape() const { return graph->shape(*this); }
  std::span<const T> value() const { return graph->value(*this); }
  T item() const { return graph->item(*this); }
};

enum class GradMode { kRecord, kNoGrad };

template <class T = double>
class Graph {
 public:
  using Backward = std::function<void(Graph&)>;

  explicit Graph(GradMode mode = GradMode::kRecord) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return mode_ == GradMode::kRecord; }

  Var<T> constant(Shape shape, std::vector<T> values) {
    if (values.size() != numel(shape))
      throw UsageError("constant: size/shape mismatch " + shape_str(shape));
    return push(std::move(shape), std::move(values), false, "constant", nullptr);
  }
  Var<T> constant(const DiffArray<T>& a) { return constant(a.shape, a.values); }
  Var<T> scalar(T x) { return constant(Shape{}, {x}); }

  /// Leaf bound to `p` without copying its values. Repeated calls with the
  /// same array return the same node, so its gradient is accumulated once.
  Var<T> param(const DiffArray<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>{this, it->second};
    Node n;
    n.shape = p.shape;
    n.external = p.values.data();
    n.count = p.values.size();
    n.needs_grad = recording() && p.requires_grad;
    n.op = "param";
    check_finite(n, "param");
    nodes_.push_back(std::move(n));
    const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
    param_nodes_.emplace(&p, id);
    return Var<T>{this, id};
  }
  Var<T> param(const ParamSet<T>& ps, const std::string& name) {
    return param(ps.at(name));
  }

  const Shape& shape(Var<T> v) const { return nodes_[v.id].shape; }
  std::span<const T> value(Var<T> v) const { return data(v.id); }
  T item(Var<T> v) const {
    if (nodes_[v.id].count != 1)
      throw NumericError("expected a scalar, got shape " + shape_str(shape(v)));
    return data(v.id)[0];
  }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var<T> root) {
    if (nodes_[root.id].count != 1)
      throw NumericError("backward: expression is not scalar (shape " +
                         shape_str(shape(root)) + ")");
    if (!nodes_[root.id].needs_grad) return;
    grad_buffer(root.id)[0] += T{1};
    for (std::int64_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      current_ = static_cast<std::uint32_t>(i);
      n.backward(*this);
    }
  }

  std::span<const T> grad(Var<T> v) const {
    const auto& g = nodes_[v.id].grad;
    return {g.data(), g.size()};
  }
  /// Gradient accumulated for a parameter bound with `param`, or nullptr.
  const std::vector<T>* param_grad(const DiffArray<T>& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) return nullptr;
    const auto& g = nodes_[it->second].grad;
    return g.empty() ? nullptr : &g;
  }

  // --- op-author interface -------------------------------------------------

  Var<T> push(Shape shape, std::vector<T> values, bool needs_grad, const char* op,
              Backward backward) {
    Node n;
    n.shape = std::move(shape);
    n.own = std::move(values);
    n.count = n.own.size();
    n.needs_grad = recording() && needs_grad;
    n.op = op;
    if (n.needs_grad) n.backward = std::move(backward);
    check_finite(n, op);
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(Var<T> v) const { return needs_grad(v.id); }
  std::span<const T> data(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return {n.external ? n.external : n.own.data(), n.count};
  }
  std::vector<T>& grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.count, T{0});
    return n.grad;
  }
  /// Upstream gradient of the node whose backward closure is running.
  const std::vector<T>& upstream() const { return nodes_[current_].grad; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> own;
    const T* external = nullptr;
    std::size_t count = 0;
    std::vector<T> grad;
    bool needs_grad = false;
    const char* op = "";
    Backward backward;
  };

  void check_finite(const Node& n, const char* op) const {
    const T* p = n.external ? n.external : n.own.data();
    for (std::size_t i = 0; i < n.count; ++i)
      if (!std::isfinite(p[i]))
        throw NumericError(std::string("non-finite value produced by ") + op);
  }

  GradMode mode_;
  std::vector<Node> nodes_;
  std::unordered_map<const DiffArray<T>*, std::uint32_t> param_nodes_;
  std::uint32_t current_ = 0;
};

// --- ops ---------------------------------------------------------------------

namespace detail {
template <class T>
Graph<T>& same_graph(Var<T> a, Var<T> b) {
  if (a.graph != b.graph || a.graph == nullptr)
    throw UsageError("operands belong to different graphs");
  return *a.graph;
}
template <class T>
void require_same_shape(const Graph<T>& g, Var<T> a, Var<T> b, const char* op) {
  if (numel(g.shape(a)) != numel(g.shape(b)) ||
      dims2(g.shape(a)) != dims2(g.shape(b)))
    throw UsageError(std::string(op) + ": shape mismatch " + shape_str(g.shape(a)) +
                     " vs " + shape_str(g.shape(b)));
}
}  // namespace detail

/// Forward identity; contributes nothing to any gradient.
template <class T>
Var<T> stop_gradient(Var<T> x) {
  auto& g = *x.graph;
  auto v = g.value(x);
  return g.push(g.shape(x), std::vector<T>(v.begin(), v.end()), false, "stop_gradient",
                nullptr);
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  auto& g = *x.graph;
  if (numel(shape) != numel(g.shape(x)))
    throw UsageError("reshape: " + shape_str(g.shape(x)) + " -> " + shape_str(shape));
  auto v = g.value(x);
  const auto xi = x.id;
  return g.push(std::move(shape), std::vector<T>(v.begin(), v.end()), g.needs_grad(x),
                "reshape", [xi](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  auto& dx = gr.grad_buffer(xi);
                  for (std::size_t i = 0; i < up.size(); ++i) dx[i] += up[i];
                });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape(g, a, b, "add");
  auto av = g.value(a), bv = g.value(b);
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const auto ai = a.id, bi = b.id;
  return g.push(g.shape(a), std::move(out), g.needs_grad(a) || g.needs_grad(b), "add",
                [ai, bi](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  for (auto id : {ai, bi}) {
                    if (!gr.needs_grad(id)) continue;
                    auto& d = gr.grad_buffer(id);
                    for (std::size_t i = 0; i < up.size(); ++i) d[i] += up[i];
                  }
                });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape(g, a, b, "sub");
  auto av = g.value(a), bv = g.value(b);
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const auto ai = a.id, bi = b.id;
  return g.push(g.shape(a), std::move(out), g.needs_grad(a) || g.needs_grad(b), "sub",
                [ai, bi](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  if (gr.needs_grad(ai)) {
                    auto& d = gr.grad_buffer(ai);
                    for (std::size_t i = 0; i < up.size(); ++i) d[i] += up[i];
                  }
                  if (gr.needs_grad(bi)) {
                    auto& d = gr.grad_buffer(bi);
                    for (std::size_t i = 0; i < up.size(); ++i) d[i] -= up[i];
                  }
                });
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape(g, a, b, "mul");
  auto av = g.value(a), bv = g.value(b);
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const auto ai = a.id, bi = b.id;
  return g.push(g.shape(a), std::move(out), g.needs_grad(a) || g.needs_grad(b), "mul",
                [ai, bi](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  auto av = gr.data(ai), bv = gr.data(bi);
                  if (gr.needs_grad(ai)) {
                    auto& d = gr.grad_buffer(ai);
                    for (std::size_t i = 0; i < up.size(); ++i) d[i] += up[i] * bv[i];
                  }
                  if (gr.needs_grad(bi)) {
                    auto& d = gr.grad_buffer(bi);
                    for (std::size_t i = 0; i < up.size(); ++i) d[i] += up[i] * av[i];
                  }
                });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
  auto& g = *x.graph;
  auto xv = g.value(x);
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  const auto xi = x.id;
  return g.push(g.shape(x), std::move(out), g.needs_grad(x), "scale",
                [xi, c](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  auto& d = gr.grad_buffer(xi);
                  for (std::size_t i = 0; i < up.size(); ++i) d[i] += up[i] * c;
                });
}

template <class T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <class T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <class T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <class T> Var<T> operator*(Var<T> a, T c) { return scale(a, c); }
template <class T> Var<T> operator*(T c, Var<T> a) { return scale(a, c); }

/// x (m x n) plus a row vector b (n) broadcast over rows.
template <class T>
Var<T> add_rowwise(Var<T> x, Var<T> b) {
  auto& g = detail::same_graph(x, b);
  const auto [m, n] = dims2(g.shape(x));
  if (numel(g.shape(b)) != n)
    throw UsageError("add_rowwise: bias " + shape_str(g.shape(b)) + " vs " +
                     shape_str(g.shape(x)));
  auto xv = g.value(x), bv = g.value(b);
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] + bv[c];
  const auto xi = x.id, bi = b.id;
  return g.push(g.shape(x), std::move(out), g.needs_grad(x) || g.needs_grad(b),
                "add_rowwise", [xi, bi, m, n](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  if (gr.needs_grad(xi)) {
                    auto& d = gr.grad_buffer(xi);
                    for (std::size_t i = 0; i < up.size(); ++i) d[i] += up[i];
                  }
                  if (gr.needs_grad(bi)) {
                    auto& d = gr.grad_buffer(bi);
                    for (std::size_t r = 0; r < m; ++r)
                      for (std::size_t c = 0; c < n; ++c) d[c] += up[r * n + c];
                  }
                });
}

/// a (m x k, or a length-k vector) times b (k x n).
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  if (g.shape(b).size() != 2) throw UsageError("matmul: rhs must be 2-D");
  const auto [m, k] = dims2(g.shape(a));
  const auto [k2, n] = dims2(g.shape(b));
  if (k != k2)
    throw UsageError("matmul: " + shape_str(g.shape(a)) + " x " + shape_str(g.shape(b)));
  auto A = g.value(a), B = g.value(b);
  std::vector<T> out(m * n, T{0});
  for (std::size_t i = 0; i < m; ++i) {
    T* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A[i * k + p];
      const T* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += aip * brow[j];
    }
  }
  Shape shape = g.shape(a).size() == 1 ? Shape{n} : Shape{m, n};
  const auto ai = a.id, bi = b.id;
  const std::size_t M = m, K = k, N = n;
  return g.push(std::move(shape), std::move(out), g.needs_grad(a) || g.needs_grad(b),
                "matmul", [ai, bi, M, K, N](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  auto A = gr.data(ai), B = gr.data(bi);
                  if (gr.needs_grad(ai)) {
                    auto& dA = gr.grad_buffer(ai);
                    for (std::size_t i = 0; i < M; ++i)
                      for (std::size_t p = 0; p < K; ++p) {
                        const T* brow = B.data() + p * N;
                        const T* u = up.data() + i * N;
                        T s{0};
                        for (std::size_t j = 0; j < N; ++j) s += u[j] * brow[j];
                        dA[i * K + p] += s;
                      }
                  }
                  if (gr.needs_grad(bi)) {
                    auto& dB = gr.grad_buffer(bi);
                    for (std::size_t i = 0; i < M; ++i)
                      for (std::size_t p = 0; p < K; ++p) {
                        const T aip = A[i * K + p];
                        T* d = dB.data() + p * N;
                        const T* u = up.data() + i * N;
                        for (std::size_t j = 0; j < N; ++j) d[j] += aip * u[j];
                      }
                  }
                });
}

template <class T>
Var<T> transpose(Var<T> x) {
  auto& g = *x.graph;
  const auto [m, n] = dims2(g.shape(x));
  auto xv = g.value(x);
  std::vector<T> out(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c * m + r] = xv[r * n + c];
  const auto xi = x.id;
  return g.push(Shape{n, m}, std::move(out), g.needs_grad(x), "transpose",
                [xi, m, n](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  auto& d = gr.grad_buffer(xi);
                  for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) d[r * n + c] += up[c * m + r];
                });
}

template <class T>
Var<T> sum(Var<T> x) {
  auto& g = *x.graph;
  auto xv = g.value(x);
  T s{0};
  for (T v : xv) s += v;
  const auto xi = x.id;
  return g.push(Shape{}, {s}, g.needs_grad(x), "sum", [xi](Graph<T>& gr) {
    const T u = gr.upstream()[0];
    auto& d = gr.grad_buffer(xi);
    for (auto& v : d) v += u;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  const auto n = numel(x.graph->shape(x));
  return scale(sum(x), T{1} / static_cast<T>(n));
}

/// Sum of squared entries, i.e. the squared Euclidean norm.
template <class T>
Var<T> sum_squares(Var<T> x) {
  auto& g = *x.graph;
  auto xv = g.value(x);
  T s{0};
  for (T v : xv) s += v * v;
  const auto xi = x.id;
  return g.push(Shape{}, {s}, g.needs_grad(x), "sum_squares", [xi](Graph<T>& gr) {
    const T u = gr.upstream()[0];
    auto xv = gr.data(xi);
    auto& d = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += T{2} * xv[i] * u;
  });
}

template <class T>
Var<T> relu(Var<T> x) {
  auto& g = *x.graph;
  auto xv = g.value(x);
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  const auto xi = x.id;
  return g.push(g.shape(x), std::move(out), g.needs_grad(x), "relu", [xi](Graph<T>& gr) {
    const auto& up = gr.upstream();
    auto xv = gr.data(xi);
    auto& d = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (xv[i] > T{0}) d[i] += up[i];
  });
}

template <class T>
Var<T> tanh(Var<T> x) {
  auto& g = *x.graph;
  auto xv = g.value(x);
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  const auto xi = x.id;
  const auto self = static_cast<std::uint32_t>(g.size());
  return g.push(g.shape(x), std::move(out), g.needs_grad(x), "tanh",
                [xi, self](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  auto y = gr.data(self);
                  auto& d = gr.grad_buffer(xi);
                  for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * (T{1} - y[i] * y[i]);
                });
}

/// tanh-approximated GELU.
template <class T>
Var<T> gelu(Var<T> x) {
  auto& g = *x.graph;
  auto xv = g.value(x);
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T{1} + std::tanh(kC * (v + kA * v * v * v)));
  }
  const auto xi = x.id;
  return g.push(g.shape(x), std::move(out), g.needs_grad(x), "gelu", [xi](Graph<T>& gr) {
    const auto& up = gr.upstream();
    auto xv = gr.data(xi);
    auto& d = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T v = xv[i];
      const T t = std::tanh(kC * (v + kA * v * v * v));
      const T dt = (T{1} - t * t) * kC * (T{1} + T{3} * kA * v * v);
      d[i] += up[i] * (T(0.5) * (T{1} + t) + T(0.5) * v * dt);
    }
  });
}

/// Per-row layer normalization with learned gain and bias (both length n).
template <class T>
Var<T> layer_norm_rows(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  auto& g = *x.graph;
  const auto [m, n] = dims2(g.shape(x));
  if (numel(g.shape(gain)) != n || numel(g.shape(bias)) != n)
    throw UsageError("layer_norm_rows: gain/bias size mismatch");
  auto xv = g.value(x), gv = g.value(gain), bv = g.value(bias);
  std::vector<T> out(m * n);
  std::vector<T> xhat(m * n), inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = xv.data() + r * n;
    T mu{0};
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mu) * is;
      out[r * n + c] = xhat[r * n + c] * gv[c] + bv[c];
    }
  }
  const auto xi = x.id, gi = gain.id, bi = bias.id;
  const bool ng = g.needs_grad(x) || g.needs_grad(gain) || g.needs_grad(bias);
  return g.push(
      g.shape(x), std::move(out), ng, "layer_norm_rows",
      [xi, gi, bi, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& gr) {
        const auto& up = gr.upstream();
        auto gv = gr.data(gi);
        if (gr.needs_grad(gi)) {
          auto& d = gr.grad_buffer(gi);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) d[c] += up[r * n + c] * xhat[r * n + c];
        }
        if (gr.needs_grad(bi)) {
          auto& d = gr.grad_buffer(bi);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) d[c] += up[r * n + c];
        }
        if (gr.needs_grad(xi)) {
          auto& d = gr.grad_buffer(xi);
          const T fn = static_cast<T>(n);
          for (std::size_t r = 0; r < m; ++r) {
            T s1{0}, s2{0};
            for (std::size_t c = 0; c < n; ++c) {
              const T dy = up[r * n + c] * gv[c];
              s1 += dy;
              s2 += dy * xhat[r * n + c];
            }
            for (std::size_t c = 0; c < n; ++c) {
              const T dy = up[r * n + c] * gv[c];
              d[r * n + c] += inv_std[r] * (dy - s1 / fn - xhat[r * n + c] * s2 / fn);
            }
          }
        }
      });
}

/// Boolean (row-major m x n) mask: nonzero entries take part in the softmax.
using Mask = std::shared_ptr<const std::vector<std::uint8_t>>;

/// Row softmax. Masked-out entries get probability exactly 0; every row must
/// keep at least one entry.
template <class T>
Var<T> softmax_rows(Var<T> x, Mask mask = nullptr) {
  auto& g = *x.graph;
  const auto [m, n] = dims2(g.shape(x));
  if (mask && mask->size() != m * n) throw UsageError("softmax_rows: mask size mismatch");
  auto xv = g.value(x);
  std::vector<T> out(m * n, T{0});
  for (std::size_t r = 0; r < m; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (!mask || (*mask)[r * n + c]) mx = std::max(mx, xv[r * n + c]);
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: fully masked row");
    T z{0};
    for (std::size_t c = 0; c < n; ++c)
      if (!mask || (*mask)[r * n + c]) {
        out[r * n + c] = std::exp(xv[r * n + c] - mx);
        z += out[r * n + c];
      }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  const auto xi = x.id;
  const auto self = static_cast<std::uint32_t>(g.size());
  return g.push(g.shape(x), std::move(out), g.needs_grad(x), "softmax_rows",
                [xi, self, m, n](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  auto y = gr.data(self);
                  auto& d = gr.grad_buffer(xi);
                  for (std::size_t r = 0; r < m; ++r) {
                    T dot{0};
                    for (std::size_t c = 0; c < n; ++c) dot += up[r * n + c] * y[r * n + c];
                    for (std::size_t c = 0; c < n; ++c)
                      d[r * n + c] += y[r * n + c] * (up[r * n + c] - dot);
                  }
                });
}

/// Row-wise log-softmax of a plain array (no graph).
template <class T>
std::vector<T> log_softmax_rows(std::span<const T> x, std::size_t m, std::size_t n) {
  std::vector<T> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = x.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z{0};
    for (std::size_t c = 0; c < n; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = row[c] - lse;
  }
  return out;
}

/// sum_r weight[r] * -log softmax(logits[r])[target[r]]. Rows with zero
/// weight are skipped entirely.
template <class T>
Var<T> cross_entropy_rows(Var<T> logits, std::vector<std::int32_t> targets,
                          std::vector<T> weights) {
  auto& g = *logits.graph;
  const auto [m, n] = dims2(g.shape(logits));
  if (targets.size() != m || weights.size() != m)
    throw UsageError("cross_entropy_rows: targets/weights length mismatch");
  auto xv = g.value(logits);
  std::vector<T> probs(m * n, T{0});
  T loss{0};
  for (std::size_t r = 0; r < m; ++r) {
    if (weights[r] == T{0}) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n)
      throw UsageError("cross_entropy_rows: target out of range");
    const T* row = xv.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z{0};
    for (std::size_t c = 0; c < n; ++c) {
      probs[r * n + c] = std::exp(row[c] - mx);
      z += probs[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) probs[r * n + c] /= z;
    loss += weights[r] * (mx + std::log(z) - row[targets[r]]);
  }
  const auto li = logits.id;
  return g.push(Shape{}, {loss}, g.needs_grad(logits), "cross_entropy_rows",
                [li, m, n, probs = std::move(probs), targets = std::move(targets),
                 weights = std::move(weights)](Graph<T>& gr) {
                  const T u = gr.upstream()[0];
                  auto& d = gr.grad_buffer(li);
                  for (std::size_t r = 0; r < m; ++r) {
                    if (weights[r] == T{0}) continue;
                    const T w = weights[r] * u;
                    for (std::size_t c = 0; c < n; ++c) d[r * n + c] += w * probs[r * n + c];
                    d[r * n + static_cast<std::size_t>(targets[r])] -= w;
                  }
                });
}

/// Embedding lookup with aggregation: output row k is
/// scales[k] * sum of table rows listed in groups[k].
template <class T>
Var<T> gather_sum(Var<T> table, std::vector<std::vector<std::uint32_t>> groups,
                  std::vector<T> scales = {}) {
  auto& g = *table.graph;
  const auto [rows, n] = dims2(g.shape(table));
  if (scales.empty()) scales.assign(groups.size(), T{1});
  if (scales.size() != groups.size()) throw UsageError("gather_sum: scales length");
  auto tv = g.value(table);
  std::vector<T> out(groups.size() * n, T{0});
  for (std::size_t k = 0; k < groups.size(); ++k) {
    T* o = out.data() + k * n;
    for (auto id : groups[k]) {
      if (id >= rows) throw UsageError("gather_sum: row id out of range");
      const T* src = tv.data() + static_cast<std::size_t>(id) * n;
      for (std::size_t c = 0; c < n; ++c) o[c] += src[c];
    }
    for (std::size_t c = 0; c < n; ++c) o[c] *= scales[k];
  }
  const auto ti = table.id;
  const std::size_t G = groups.size();
  return g.push(Shape{G, n}, std::move(out), g.needs_grad(table), "gather_sum",
                [ti, n, groups = std::move(groups), scales = std::move(scales)](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  auto& d = gr.grad_buffer(ti);
                  for (std::size_t k = 0; k < groups.size(); ++k)
                    for (auto id : groups[k]) {
                      T* dst = d.data() + static_cast<std::size_t>(id) * n;
                      const T* u = up.data() + k * n;
                      for (std::size_t c = 0; c < n; ++c) dst[c] += scales[k] * u[c];
                    }
                });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  auto& g = *parts.front().graph;
  const std::size_t n = dims2(g.shape(parts.front())).second;
  std::size_t total = 0;
  bool ng = false;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  std::vector<T> out;
  for (auto p : parts) {
    if (p.graph != &g) throw UsageError("concat_rows: mixed graphs");
    const auto [r, c] = dims2(g.shape(p));
    if (c != n) throw UsageError("concat_rows: column mismatch");
    auto v = g.value(p);
    offsets.push_back(out.size());
    out.insert(out.end(), v.begin(), v.end());
    total += r;
    ng = ng || g.needs_grad(p);
    ids.push_back(p.id);
  }
  return g.push(Shape{total, n}, std::move(out), ng, "concat_rows",
                [ids = std::move(ids), offsets = std::move(offsets)](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (!gr.needs_grad(ids[k])) continue;
                    auto& d = gr.grad_buffer(ids[k]);
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[offsets[k] + i];
                  }
                });
}

template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
  auto& g = *x.graph;
  const auto [m, n] = dims2(g.shape(x));
  if (begin + count > m) throw UsageError("slice_rows: out of range");
  auto xv = g.value(x);
  std::vector<T> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * n),
                     xv.begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  const auto xi = x.id;
  return g.push(Shape{count, n}, std::move(out), g.needs_grad(x), "slice_rows",
                [xi, begin, n](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  auto& d = gr.grad_buffer(xi);
                  for (std::size_t i = 0; i < up.size(); ++i) d[begin * n + i] += up[i];
                });
}

template <class T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t count) {
  auto& g = *x.graph;
  const auto [m, n] = dims2(g.shape(x));
  if (begin + count > n) throw UsageError("slice_cols: out of range");
  auto xv = g.value(x);
  std::vector<T> out(m * count);
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(xv.data() + r * n + begin, count, out.data() + r * count);
  const auto xi = x.id;
  return g.push(Shape{m, count}, std::move(out), g.needs_grad(x), "slice_cols",
                [xi, m, n, begin, count](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  auto& d = gr.grad_buffer(xi);
                  for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < count; ++c)
                      d[r * n + begin + c] += up[r * count + c];
                });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  auto& g = *parts.front().graph;
  const std::size_t m = dims2(g.shape(parts.front())).first;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool ng = false;
  for (auto p : parts) {
    const auto [r, c] = dims2(g.shape(p));
    if (r != m) throw UsageError("concat_cols: row mismatch");
    widths.push_back(c);
    total += c;
    ng = ng || g.needs_grad(p);
  }
  std::vector<T> out(m * total);
  std::size_t off = 0;
  std::vector<std::uint32_t> ids;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = g.value(parts[k]);
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + off);
    off += widths[k];
    ids.push_back(parts[k].id);
  }
  return g.push(Shape{m, total}, std::move(out), ng, "concat_cols",
                [ids = std::move(ids), widths = std::move(widths), m, total](Graph<T>& gr) {
                  const auto& up = gr.upstream();
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (gr.needs_grad(ids[k])) {
                      auto& d = gr.grad_buffer(ids[k]);
                      for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t c = 0; c < widths[k]; ++c)
                          d[r * widths[k] + c] += up[r * total + off + c];
                    }
                    off += widths[k];
                  }
                });
}

// --- gradients ---------------------------------------------------------------

template <class T>
struct ValueAndGrad {
  T value{};
  std::map<std::string, std::vector<T>> grads;
};

/// Evaluates `expr(graph)` (which must return a scalar) and differentiates it
/// with respect to every parameter in `params`. Parameters the expression
/// never touches, or that do not require grad, receive zeros. The gradients
/// are also written to each parameter's `grad` field.
template <class T, class F>
ValueAndGrad<T> value_and_grad(F&& expr, ParamSet<T>& params) {
  Graph<T> g;
  Var<T> out = expr(g);
  if (numel(g.shape(out)) != 1)
    throw NumericError("value_and_grad: expression is not scalar (shape " +
                       shape_str(g.shape(out)) + ")");
  g.backward(out);
  ValueAndGrad<T> r;
  r.value = g.item(out);
  for (auto& [name, p] : params) {
    const auto* gr = p.requires_grad ? g.param_grad(p) : nullptr;
    std::vector<T> grad = gr ? *gr : std::vector<T>(p.size(), T{0});
    if (p.requires_grad) p.grad = grad;
    r.grads.emplace(name, std::move(grad));
  }
  return r;
}

/// Central differences, one coordinate at a time, with step
/// eps * max(1, |x|). Parameters without requires_grad get zeros.
template <class T, class F>
std::map<std::string, std::vector<T>> finite_diff_grad(F&& expr, ParamSet<T>& params,
                                                       T eps = T(1e-4)) {
  if (!(eps > T{0})) throw UsageError("finite_diff_grad: eps must be positive");
  auto eval = [&]() {
    Graph<T> g(GradMode::kNoGrad);
    return g.item(expr(g));
  };
  std::map<std::string, std::vector<T>> out;
  for (auto& [name, p] : params) {
    std::vector<T> grad(p.size(), T{0});
    if (p.requires_grad) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T x = p.values[i];
        const T h = eps * std::max(T{1}, std::abs(x));
        p.values[i] = x + h;
        const T fp = eval();
        p.values[i] = x - h;
        const T fm = eval();
        p.values[i] = x;
        grad[i] = (fp - fm) / (T{2} * h);
      }
    }
    out.emplace(name, std::move(grad));
  }
  return out;
}

/// Central-difference derivative for selected coordinates of one parameter.
template <class T, class F>
std::vector<T> finite_diff_slice(F&& expr, DiffArray<T>& p,
                                 std::span<const std::size_t> coords, T eps = T(1e-4)) {
  if (!(eps > T{0})) throw UsageError("finite_diff_slice: eps must be positive");
  auto eval = [&]() {
    Graph<T> g(GradMode::kNoGrad);
    return g.item(expr(g));
  };
  std::vector<T> out;
  for (auto i : coords) {
    const T x = p.values.at(i);
    const T h = eps * std::max(T{1}, std::abs(x));
    p.values[i] = x + h;
    const T fp = eval();
    p.values[i] = x - h;
    const T fm = eval();
    p.values[i] = x;
    out.push_back((fp - fm) / (T{2} * h));
  }
  return out;
}

/// max_i |a_i - b_i| / max(floor, |b_i|): relative error, with an absolute
/// floor so near-zero reference entries do not blow up the ratio.
template <class T>
T max_rel_error(std::span<const T> a, std::span<const T> b, T floor = T{1}) {
  if (a.size() != b.size()) throw UsageError("max_rel_error: length mismatch");
  T worst{0};
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(floor, std::abs(b[i])));
  return worst;
}

}  // namespace kelixpq::ndiff
