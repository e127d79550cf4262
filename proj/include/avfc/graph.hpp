#pragma once

// Reverse-mode autodiff over a recorded operation list.
//
// Nodes are appended in creation order, which is therefore a valid
// topological order. An op whose inputs all carry values is evaluated
// eagerly (define-by-run); a graph built on placeholder inputs is evaluated
// by forward(). forward() always replays every node, so parameters can be
// perturbed in place and re-evaluated, which is what grad_check does.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "avfc/rng.hpp"
#include "avfc/tensor.hpp"

namespace avfc {

class GraphStateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named parameter table. Ordered by name so iteration, checkpointing and
/// initialization are deterministic.
template <class Real>
class ParameterSet {
 public:
  Tensor<Real>& add(const std::string& name, Tensor<Real> value) {
    auto [it, inserted] = table_.emplace(name, std::move(value));
    if (!inserted) throw std::invalid_argument("duplicate parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return table_.count(name) != 0; }
  Tensor<Real>& at(const std::string& name) {
    auto it = table_.find(name);
    if (it == table_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<Real>& at(const std::string& name) const {
    auto it = table_.find(name);
    if (it == table_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : table_) n += t.size();
    return n;
  }
  std::size_t tensors() const { return table_.size(); }
  auto begin() { return table_.begin(); }
  auto end() { return table_.end(); }
  auto begin() const { return table_.begin(); }
  auto end() const { return table_.end(); }

  /// Same names and shapes, every value zero.
  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& [name, t] : table_) out.add(name, Tensor<Real>(t.shape()));
    return out;
  }

  template <class Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& [name, t] : table_) out.add(name, t.template cast<Other>());
    return out;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.table_ == b.table_;
  }

 private:
  std::map<std::string, Tensor<Real>> table_;
};

template <class Real>
using TensorTable = std::map<std::string, Tensor<Real>>;

enum class OpKind {
  kInput,
  kConstant,
  kParameter,
  kMatMul,
  kAddBias,
  kAdd,
  kMul,
  kScale,
  kReLU,
  kSwish,
  kSigmoid,
  kTanh,
  kGLU,
  kLayerNorm,
  kNormalize,
  kLogSoftmax,
  kSoftmax,
  kDropout,
  kSum,
  kMean,
  kConcat,
  kSliceRows,
  kReshape,
  kEmbedding,
  kConv1d,
  kDepthwiseConv1d,
  kConv3d,
  kSpatialMean,
  kRelAttention,
  kLSTM,
  kOuterAdd,
  kScalarLoss,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kReLU: return "relu";
    case OpKind::kSwish: return "swish";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kGLU: return "glu";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kNormalize: return "normalize";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kDropout: return "dropout";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kConcat: return "concat";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kReshape: return "reshape";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kConv1d: return "conv1d";
    case OpKind::kDepthwiseConv1d: return "depthwise_conv1d";
    case OpKind::kConv3d: return "conv3d";
    case OpKind::kSpatialMean: return "spatial_mean";
    case OpKind::kRelAttention: return "rel_attention";
    case OpKind::kLSTM: return "lstm";
    case OpKind::kOuterAdd: return "outer_add";
    case OpKind::kScalarLoss: return "scalar_loss";
  }
  return "?";
}

namespace detail {

template <class Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <class Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;

template <class Real>
Real sigmoid(Real x) {
  return x >= 0 ? Real(1) / (Real(1) + std::exp(-x))
                : std::exp(x) / (Real(1) + std::exp(x));
}

inline std::size_t conv_out(std::size_t n, std::size_t k, std::size_t s, std::size_t p) {
  if (n + 2 * p < k) return 0;
  return (n + 2 * p - k) / s + 1;
}

}  // namespace detail

struct Conv3dGeometry {
  std::size_t kt, kh, kw;
  std::size_t st = 1, sh = 1, sw = 1;
  std::size_t pt = 0, ph = 0, pw = 0;
};

template <class Real>
class Graph {
 public:
  using Id = std::uint32_t;
  using ScalarFn = std::function<std::pair<Real, Tensor<Real>>(const Tensor<Real>&)>;

  explicit Graph(const ParameterSet<Real>* params = nullptr) : params_(params) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// Check every op output for NaN/Inf as it is produced.
  void set_validate_finite(bool on) { validate_finite_ = on; }

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(Id id) const { return node(id).kind; }
  const Shape& shape(Id id) const { return value(id).shape(); }

  const Tensor<Real>& value(Id id) const {
    const Node& n = node(id);
    if (!n.evaluated) {
      throw GraphStateError("node " + describe(id) + " has not been evaluated");
    }
    return n.ref ? *n.ref : n.value;
  }

  // ---------------------------------------------------------------- leaves

  /// Differentiable input whose value is supplied later through forward().
  Id input(const std::string& name, Shape shape) {
    Node n;
    n.kind = OpKind::kInput;
    n.label = name;
    n.declared = std::move(shape);
    n.requires_grad = true;
    return push(std::move(n));
  }

  /// Differentiable input with an immediate value.
  Id input(const std::string& name, Tensor<Real> value) {
    Node n;
    n.kind = OpKind::kInput;
    n.label = name;
    n.declared = value.shape();
    n.value = std::move(value);
    n.requires_grad = true;
    n.evaluated = true;
    return push(std::move(n));
  }

  /// Non-differentiable value (features, masks).
  Id constant(Tensor<Real> value, std::string label = "const") {
    Node n;
    n.kind = OpKind::kConstant;
    n.label = std::move(label);
    n.value = std::move(value);
    n.evaluated = true;
    return push(std::move(n));
  }

  Id parameter(const std::string& name) {
    if (!params_) throw GraphStateError("graph has no parameter set");
    if (auto it = param_ids_.find(name); it != param_ids_.end()) return it->second;
    Node n;
    n.kind = OpKind::kParameter;
    n.label = name;
    n.ref = &params_->at(name);
    n.requires_grad = true;
    n.evaluated = true;
    const Id id = push(std::move(n));
    param_ids_.emplace(name, id);
    return id;
  }

  // ---------------------------------------------------------------- algebra

  /// a [m x k] times b [k x n]; a may have extra leading axes folded into m.
  Id matmul(Id a, Id b) {
    return op(OpKind::kMatMul, {a, b},
              [](Graph& g, Node& self) {
                const auto& A = g.in(self, 0);
                const auto& B = g.in(self, 1);
                if (B.rank() != 2 || A.last_dim() != B.dim(0)) {
                  throw ShapeError("matmul " + shape_str(A.shape()) + " x " +
                                   shape_str(B.shape()));
                }
                const std::size_t m = A.size() / B.dim(0);
                Shape out = A.shape();
                out.back() = B.dim(1);
                self.value = Tensor<Real>(out);
                detail::MatMap<Real>(self.value.data(), m, B.dim(1)).noalias() =
                    detail::ConstMatMap<Real>(A.data(), m, B.dim(0)) *
                    detail::ConstMatMap<Real>(B.data(), B.dim(0), B.dim(1));
              },
              [](Graph& g, Node& self) {
                const auto& A = g.in(self, 0);
                const auto& B = g.in(self, 1);
                const std::size_t k = B.dim(0), n = B.dim(1), m = A.size() / k;
                detail::ConstMatMap<Real> dy(self.grad.data(), m, n);
                if (auto* ga = g.grad_of(self, 0)) {
                  detail::MatMap<Real>(ga->data(), m, k).noalias() +=
                      dy * detail::ConstMatMap<Real>(B.data(), k, n).transpose();
                }
                if (auto* gb = g.grad_of(self, 1)) {
                  detail::MatMap<Real>(gb->data(), k, n).noalias() +=
                      detail::ConstMatMap<Real>(A.data(), m, k).transpose() * dy;
                }
              });
  }

  /// x [... x n] + b [n], broadcast over leading axes.
  Id add_bias(Id x, Id b) {
    return op(OpKind::kAddBias, {x, b},
              [](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const auto& B = g.in(self, 1);
                const std::size_t n = X.last_dim();
                if (B.size() != n) {
                  throw ShapeError("add_bias " + shape_str(X.shape()) + " + " +
                                   shape_str(B.shape()));
                }
                self.value = X;
                for (std::size_t i = 0; i < X.size(); ++i) self.value[i] += B[i % n];
              },
              [](Graph& g, Node& self) {
                const std::size_t n = self.grad.last_dim();
                if (auto* gx = g.grad_of(self, 0)) add_into(*gx, self.grad);
                if (auto* gb = g.grad_of(self, 1)) {
                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                    (*gb)[i % n] += self.grad[i];
                }
              });
  }

  Id add(Id a, Id b) {
    return op(OpKind::kAdd, {a, b},
              [](Graph& g, Node& self) {
                const auto& A = g.in(self, 0);
                const auto& B = g.in(self, 1);
                require_same(A, B, "add");
                self.value = A;
                add_into(self.value, B);
              },
              [](Graph& g, Node& self) {
                if (auto* ga = g.grad_of(self, 0)) add_into(*ga, self.grad);
                if (auto* gb = g.grad_of(self, 1)) add_into(*gb, self.grad);
              });
  }

  Id mul(Id a, Id b) {
    return op(OpKind::kMul, {a, b},
              [](Graph& g, Node& self) {
                const auto& A = g.in(self, 0);
                const auto& B = g.in(self, 1);
                require_same(A, B, "mul");
                self.value = A;
                for (std::size_t i = 0; i < A.size(); ++i) self.value[i] *= B[i];
              },
              [](Graph& g, Node& self) {
                const auto& A = g.in(self, 0);
                const auto& B = g.in(self, 1);
                if (auto* ga = g.grad_of(self, 0))
                  for (std::size_t i = 0; i < A.size(); ++i) (*ga)[i] += self.grad[i] * B[i];
                if (auto* gb = g.grad_of(self, 1))
                  for (std::size_t i = 0; i < A.size(); ++i) (*gb)[i] += self.grad[i] * A[i];
              });
  }

  Id scale(Id x, Real c) {
    return op(OpKind::kScale, {x},
              [c](Graph& g, Node& self) {
                self.value = g.in(self, 0);
                for (auto& v : self.value.values()) v *= c;
              },
              [c](Graph& g, Node& self) {
                if (auto* gx = g.grad_of(self, 0))
                  for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += c * self.grad[i];
              });
  }

  // ---------------------------------------------------------------- pointwise

  Id relu(Id x) {
    return unary(OpKind::kReLU, x, [](Real v) { return v > 0 ? v : Real(0); },
                 [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
  }
  Id sigmoid(Id x) {
    return unary(OpKind::kSigmoid, x, [](Real v) { return detail::sigmoid(v); },
                 [](Real, Real y) { return y * (Real(1) - y); });
  }
  Id tanh(Id x) {
    return unary(OpKind::kTanh, x, [](Real v) { return std::tanh(v); },
                 [](Real, Real y) { return Real(1) - y * y; });
  }
  Id swish(Id x) {
    return unary(OpKind::kSwish, x, [](Real v) { return v * detail::sigmoid(v); },
                 [](Real v, Real) {
                   const Real s = detail::sigmoid(v);
                   return s + v * s * (Real(1) - s);
                 });
  }

  /// Gated linear unit over the last axis: first half * sigmoid(second half).
  Id glu(Id x) {
    return op(OpKind::kGLU, {x},
              [](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const std::size_t n2 = X.last_dim();
                if (n2 % 2) throw ShapeError("glu needs an even last axis, got " + shape_str(X.shape()));
                const std::size_t n = n2 / 2, rows = X.size() / n2;
                Shape out = X.shape();
                out.back() = n;
                self.value = Tensor<Real>(out);
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t j = 0; j < n; ++j)
                    self.value[r * n + j] =
                        X[r * n2 + j] * detail::sigmoid(X[r * n2 + n + j]);
              },
              [](Graph& g, Node& self) {
                auto* gx = g.grad_of(self, 0);
                if (!gx) return;
                const auto& X = g.in(self, 0);
                const std::size_t n2 = X.last_dim(), n = n2 / 2, rows = X.size() / n2;
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t j = 0; j < n; ++j) {
                    const Real a = X[r * n2 + j];
                    const Real s = detail::sigmoid(X[r * n2 + n + j]);
                    const Real dy = self.grad[r * n + j];
                    (*gx)[r * n2 + j] += dy * s;
                    (*gx)[r * n2 + n + j] += dy * a * s * (Real(1) - s);
                  }
              });
  }

  // ---------------------------------------------------------------- normalization

  /// Layer normalization over the last axis with affine gain and bias.
  Id layer_norm(Id x, Id gamma, Id beta, Real eps = Real(1e-5)) {
    return op(OpKind::kLayerNorm, {x, gamma, beta},
              [eps](Graph& g, Node& self) { normalize_forward(g, self, eps, true); },
              [](Graph& g, Node& self) { normalize_backward(g, self, true); });
  }

  /// Layer normalization over the last axis without affine terms.
  Id normalize(Id x, Real eps = Real(1e-5)) {
    return op(OpKind::kNormalize, {x},
              [eps](Graph& g, Node& self) { normalize_forward(g, self, eps, false); },
              [](Graph& g, Node& self) { normalize_backward(g, self, false); });
  }

  Id log_softmax(Id x) {
    return op(OpKind::kLogSoftmax, {x},
              [](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const std::size_t n = X.last_dim(), rows = X.size() / n;
                self.value = X;
                for (std::size_t r = 0; r < rows; ++r) {
                  Real* v = self.value.data() + r * n;
                  const Real m = *std::max_element(v, v + n);
                  Real s = 0;
                  for (std::size_t j = 0; j < n; ++j) s += std::exp(v[j] - m);
                  const Real lse = m + std::log(s);
                  for (std::size_t j = 0; j < n; ++j) v[j] -= lse;
                }
              },
              [](Graph& g, Node& self) {
                auto* gx = g.grad_of(self, 0);
                if (!gx) return;
                const std::size_t n = self.value.last_dim(), rows = self.value.size() / n;
                for (std::size_t r = 0; r < rows; ++r) {
                  Real s = 0;
                  for (std::size_t j = 0; j < n; ++j) s += self.grad[r * n + j];
                  for (std::size_t j = 0; j < n; ++j)
                    (*gx)[r * n + j] +=
                        self.grad[r * n + j] - std::exp(self.value[r * n + j]) * s;
                }
              });
  }

  Id softmax(Id x) {
    return op(OpKind::kSoftmax, {x},
              [](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const std::size_t n = X.last_dim(), rows = X.size() / n;
                self.value = X;
                for (std::size_t r = 0; r < rows; ++r) softmax_row(self.value.data() + r * n, n);
              },
              [](Graph& g, Node& self) {
                auto* gx = g.grad_of(self, 0);
                if (!gx) return;
                const std::size_t n = self.value.last_dim(), rows = self.value.size() / n;
                for (std::size_t r = 0; r < rows; ++r) {
                  Real dot = 0;
                  for (std::size_t j = 0; j < n; ++j)
                    dot += self.grad[r * n + j] * self.value[r * n + j];
                  for (std::size_t j = 0; j < n; ++j)
                    (*gx)[r * n + j] += self.value[r * n + j] * (self.grad[r * n + j] - dot);
                }
              });
  }

  /// Inverted dropout. The mask is a pure function of (seed, element index),
  /// so replays and repeated runs are bit-identical.
  Id dropout(Id x, double rate, std::uint64_t seed) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0,1)");
    return op(OpKind::kDropout, {x},
              [rate, seed](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                self.value = X;
                self.cache.assign(X.size(), Real(1));
                if (rate == 0.0) return;
                Rng rng(derive_seed(seed, {0xD0}));
                const Real keep_scale = Real(1.0 / (1.0 - rate));
                for (std::size_t i = 0; i < X.size(); ++i) {
                  const Real m = uniform01(rng) < rate ? Real(0) : keep_scale;
                  self.cache[i] = m;
                  self.value[i] *= m;
                }
              },
              [](Graph& g, Node& self) {
                if (auto* gx = g.grad_of(self, 0))
                  for (std::size_t i = 0; i < gx->size(); ++i)
                    (*gx)[i] += self.grad[i] * self.cache[i];
              });
  }

  // ---------------------------------------------------------------- reductions / layout

  Id sum(Id x) {
    return op(OpKind::kSum, {x},
              [](Graph& g, Node& self) {
                Real s = 0;
                for (Real v : g.in(self, 0).values()) s += v;
                self.value = Tensor<Real>({1}, s);
              },
              [](Graph& g, Node& self) {
                if (auto* gx = g.grad_of(self, 0))
                  for (auto& v : gx->values()) v += self.grad[0];
              });
  }

  Id mean(Id x) {
    return op(OpKind::kMean, {x},
              [](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                Real s = 0;
                for (Real v : X.values()) s += v;
                self.value = Tensor<Real>({1}, s / Real(X.size()));
              },
              [](Graph& g, Node& self) {
                if (auto* gx = g.grad_of(self, 0)) {
                  const Real d = self.grad[0] / Real(gx->size());
                  for (auto& v : gx->values()) v += d;
                }
              });
  }

  /// Concatenate two rank-2 tensors with equal row counts along columns.
  Id concat(Id a, Id b) {
    return op(OpKind::kConcat, {a, b},
              [](Graph& g, Node& self) {
                const auto& A = g.in(self, 0);
                const auto& B = g.in(self, 1);
                if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != B.dim(0)) {
                  throw ShapeError("concat " + shape_str(A.shape()) + " with " +
                                   shape_str(B.shape()));
                }
                const std::size_t m = A.dim(0), p = A.dim(1), q = B.dim(1);
                self.value = Tensor<Real>({m, p + q});
                for (std::size_t r = 0; r < m; ++r) {
                  std::copy_n(A.data() + r * p, p, self.value.data() + r * (p + q));
                  std::copy_n(B.data() + r * q, q, self.value.data() + r * (p + q) + p);
                }
              },
              [](Graph& g, Node& self) {
                const std::size_t m = self.value.dim(0);
                const std::size_t p = g.in(self, 0).dim(1), q = g.in(self, 1).dim(1);
                auto* ga = g.grad_of(self, 0);
                auto* gb = g.grad_of(self, 1);
                for (std::size_t r = 0; r < m; ++r) {
                  if (ga)
                    for (std::size_t j = 0; j < p; ++j)
                      (*ga)[r * p + j] += self.grad[r * (p + q) + j];
                  if (gb)
                    for (std::size_t j = 0; j < q; ++j)
                      (*gb)[r * q + j] += self.grad[r * (p + q) + p + j];
                }
              });
  }

  /// Rows [start, start + count) of the leading axis.
  Id slice_rows(Id x, std::size_t start, std::size_t count) {
    return op(OpKind::kSliceRows, {x},
              [start, count](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                if (start + count > X.rows()) {
                  throw ShapeError("slice_rows [" + std::to_string(start) + ", " +
                                   std::to_string(start + count) + ") of " +
                                   shape_str(X.shape()));
                }
                const std::size_t c = X.cols();
                Shape out = X.shape();
                out[0] = count;
                self.value = Tensor<Real>(out);
                std::copy_n(X.data() + start * c, count * c, self.value.data());
              },
              [start](Graph& g, Node& self) {
                if (auto* gx = g.grad_of(self, 0)) {
                  const std::size_t off = start * gx->cols();
                  for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[off + i] += self.grad[i];
                }
              });
  }

  Id reshape(Id x, Shape shape) {
    return op(OpKind::kReshape, {x},
              [shape](Graph& g, Node& self) { self.value = g.in(self, 0).reshaped(shape); },
              [](Graph& g, Node& self) {
                if (auto* gx = g.grad_of(self, 0))
                  for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i];
              });
  }

  /// Rows of table [V x E] selected by ids.
  Id embedding(Id table, std::vector<int> ids) {
    return op(OpKind::kEmbedding, {table},
              [ids](Graph& g, Node& self) {
                const auto& W = g.in(self, 0);
                const std::size_t e = W.cols();
                self.value = Tensor<Real>({ids.size(), e});
                for (std::size_t i = 0; i < ids.size(); ++i) {
                  if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= W.rows()) {
                    throw ShapeError("embedding id " + std::to_string(ids[i]) +
                                     " outside table " + shape_str(W.shape()));
                  }
                  std::copy_n(W.data() + ids[i] * e, e, self.value.data() + i * e);
                }
              },
              [ids](Graph& g, Node& self) {
                auto* gw = g.grad_of(self, 0);
                if (!gw) return;
                const std::size_t e = gw->cols();
                for (std::size_t i = 0; i < ids.size(); ++i)
                  for (std::size_t j = 0; j < e; ++j)
                    (*gw)[ids[i] * e + j] += self.grad[i * e + j];
              });
  }

  // ---------------------------------------------------------------- convolutions

  /// Full 1-D convolution: x [T x Cin], w [K x Cin x Cout] -> [T' x Cout].
  Id conv1d(Id x, Id w, std::size_t stride, std::size_t pad) {
    Conv3dGeometry geo{1, 1, 0, 1, 1, stride, 0, 0, pad};
    // Treat time as the width axis of a 1 x 1 x T volume.
    return op(OpKind::kConv1d, {x, w},
              [geo](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const auto& W = g.in(self, 1);
                if (X.rank() != 2 || W.rank() != 3 || W.dim(1) != X.dim(1)) {
                  throw ShapeError("conv1d input " + shape_str(X.shape()) + " kernel " +
                                   shape_str(W.shape()));
                }
                Conv3dGeometry gg = geo;
                gg.kw = W.dim(0);
                conv_forward(self, X, W, {1, 1, X.dim(0), X.dim(1)}, gg, W.dim(2));
                self.value = self.value.reshaped({self.value.size() / W.dim(2), W.dim(2)});
              },
              [geo](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const auto& W = g.in(self, 1);
                Conv3dGeometry gg = geo;
                gg.kw = W.dim(0);
                conv_backward(g, self, {1, 1, X.dim(0), X.dim(1)}, gg, W);
              });
  }

  /// Depthwise 1-D convolution: x [T x C], w [K x C] -> [T' x C].
  Id depthwise_conv1d(Id x, Id w, std::size_t stride, std::size_t pad) {
    return op(OpKind::kDepthwiseConv1d, {x, w},
              [stride, pad](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const auto& W = g.in(self, 1);
                if (X.rank() != 2 || W.rank() != 2 || W.dim(1) != X.dim(1)) {
                  throw ShapeError("depthwise_conv1d input " + shape_str(X.shape()) +
                                   " kernel " + shape_str(W.shape()));
                }
                const std::size_t T = X.dim(0), C = X.dim(1), K = W.dim(0);
                const std::size_t To = detail::conv_out(T, K, stride, pad);
                if (To == 0) throw ShapeError("depthwise_conv1d input too short: " + shape_str(X.shape()));
                self.value = Tensor<Real>({To, C});
                for (std::size_t t = 0; t < To; ++t)
                  for (std::size_t k = 0; k < K; ++k) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) -
                                               static_cast<std::ptrdiff_t>(pad);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
                    const Real* xr = X.data() + src * C;
                    const Real* wr = W.data() + k * C;
                    Real* yr = self.value.data() + t * C;
                    for (std::size_t c = 0; c < C; ++c) yr[c] += wr[c] * xr[c];
                  }
              },
              [stride, pad](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const auto& W = g.in(self, 1);
                auto* gx = g.grad_of(self, 0);
                auto* gw = g.grad_of(self, 1);
                const std::size_t T = X.dim(0), C = X.dim(1), K = W.dim(0);
                const std::size_t To = self.value.dim(0);
                for (std::size_t t = 0; t < To; ++t)
                  for (std::size_t k = 0; k < K; ++k) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) -
                                               static_cast<std::ptrdiff_t>(pad);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
                    const Real* dy = self.grad.data() + t * C;
                    if (gx) {
                      const Real* wr = W.data() + k * C;
                      Real* gxr = gx->data() + src * C;
                      for (std::size_t c = 0; c < C; ++c) gxr[c] += dy[c] * wr[c];
                    }
                    if (gw) {
                      const Real* xr = X.data() + src * C;
                      Real* gwr = gw->data() + k * C;
                      for (std::size_t c = 0; c < C; ++c) gwr[c] += dy[c] * xr[c];
                    }
                  }
              });
  }

  /// 3-D convolution: x [T x H x W x Cin], w [kt x kh x kw x Cin x Cout].
  /// Kernel extents come from w; geometry supplies stride and zero padding.
  Id conv3d(Id x, Id w, Conv3dGeometry geo) {
    return op(OpKind::kConv3d, {x, w},
              [geo](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const auto& W = g.in(self, 1);
                if (X.rank() != 4 || W.rank() != 5 || W.dim(3) != X.dim(3)) {
                  throw ShapeError("conv3d input " + shape_str(X.shape()) + " kernel " +
                                   shape_str(W.shape()));
                }
                Conv3dGeometry gg = geo;
                gg.kt = W.dim(0);
                gg.kh = W.dim(1);
                gg.kw = W.dim(2);
                conv_forward(self, X, W, X.shape(), gg, W.dim(4));
              },
              [geo](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const auto& W = g.in(self, 1);
                Conv3dGeometry gg = geo;
                gg.kt = W.dim(0);
                gg.kh = W.dim(1);
                gg.kw = W.dim(2);
                conv_backward(g, self, X.shape(), gg, W);
              });
  }

  /// Mean over the two spatial axes: [T x H x W x C] -> [T x C].
  Id spatial_mean(Id x) {
    return op(OpKind::kSpatialMean, {x},
              [](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                if (X.rank() != 4) throw ShapeError("spatial_mean expects rank 4, got " + shape_str(X.shape()));
                const std::size_t T = X.dim(0), P = X.dim(1) * X.dim(2), C = X.dim(3);
                self.value = Tensor<Real>({T, C});
                const Real inv = Real(1) / Real(P);
                for (std::size_t t = 0; t < T; ++t)
                  for (std::size_t p = 0; p < P; ++p)
                    for (std::size_t c = 0; c < C; ++c)
                      self.value[t * C + c] += X[(t * P + p) * C + c] * inv;
              },
              [](Graph& g, Node& self) {
                auto* gx = g.grad_of(self, 0);
                if (!gx) return;
                const auto& X = g.in(self, 0);
                const std::size_t T = X.dim(0), P = X.dim(1) * X.dim(2), C = X.dim(3);
                const Real inv = Real(1) / Real(P);
                for (std::size_t t = 0; t < T; ++t)
                  for (std::size_t p = 0; p < P; ++p)
                    for (std::size_t c = 0; c < C; ++c)
                      (*gx)[(t * P + p) * C + c] += self.grad[t * C + c] * inv;
              });
  }

  // ---------------------------------------------------------------- sequence ops

  /// Multi-head scaled dot-product self-attention with a learned scalar bias
  /// per head and clipped relative offset j - i in [-max_rel, max_rel].
  /// q, k, v: [T x d]; bias: [heads x (2 max_rel + 1)].
  Id rel_attention(Id q, Id k, Id v, Id bias, std::size_t heads, std::size_t max_rel) {
    return op(OpKind::kRelAttention, {q, k, v, bias},
              [heads, max_rel](Graph& g, Node& self) {
                const auto& Q = g.in(self, 0);
                const auto& K = g.in(self, 1);
                const auto& V = g.in(self, 2);
                const auto& B = g.in(self, 3);
                require_same(Q, K, "rel_attention q/k");
                require_same(Q, V, "rel_attention q/v");
                if (Q.rank() != 2 || Q.dim(1) % heads ||
                    B.shape() != Shape{heads, 2 * max_rel + 1}) {
                  throw ShapeError("rel_attention q " + shape_str(Q.shape()) + " bias " +
                                   shape_str(B.shape()));
                }
                const std::size_t T = Q.dim(0), d = Q.dim(1), dh = d / heads;
                const Real inv = Real(1) / std::sqrt(Real(dh));
                self.value = Tensor<Real>({T, d});
                self.cache.assign(heads * T * T, Real(0));
                for (std::size_t h = 0; h < heads; ++h) {
                  Real* P = self.cache.data() + h * T * T;
                  for (std::size_t i = 0; i < T; ++i) {
                    for (std::size_t j = 0; j < T; ++j) {
                      Real s = 0;
                      for (std::size_t c = 0; c < dh; ++c)
                        s += Q[i * d + h * dh + c] * K[j * d + h * dh + c];
                      P[i * T + j] = s * inv + B[h * (2 * max_rel + 1) + rel_index(i, j, max_rel)];
                    }
                    softmax_row(P + i * T, T);
                    for (std::size_t j = 0; j < T; ++j) {
                      const Real p = P[i * T + j];
                      for (std::size_t c = 0; c < dh; ++c)
                        self.value[i * d + h * dh + c] += p * V[j * d + h * dh + c];
                    }
                  }
                }
              },
              [heads, max_rel](Graph& g, Node& self) {
                const auto& Q = g.in(self, 0);
                const auto& K = g.in(self, 1);
                const auto& V = g.in(self, 2);
                auto* gq = g.grad_of(self, 0);
                auto* gk = g.grad_of(self, 1);
                auto* gv = g.grad_of(self, 2);
                auto* gb = g.grad_of(self, 3);
                const std::size_t T = Q.dim(0), d = Q.dim(1), dh = d / heads;
                const Real inv = Real(1) / std::sqrt(Real(dh));
                std::vector<Real> dS(T);
                for (std::size_t h = 0; h < heads; ++h) {
                  const Real* P = self.cache.data() + h * T * T;
                  for (std::size_t i = 0; i < T; ++i) {
                    const Real* dOi = self.grad.data() + i * d + h * dh;
                    Real dot = 0;
                    for (std::size_t j = 0; j < T; ++j) {
                      Real dp = 0;
                      for (std::size_t c = 0; c < dh; ++c) dp += dOi[c] * V[j * d + h * dh + c];
                      dS[j] = dp;
                      dot += dp * P[i * T + j];
                      if (gv) {
                        const Real p = P[i * T + j];
                        for (std::size_t c = 0; c < dh; ++c) (*gv)[j * d + h * dh + c] += p * dOi[c];
                      }
                    }
                    for (std::size_t j = 0; j < T; ++j) {
                      const Real ds = P[i * T + j] * (dS[j] - dot);
                      if (gb) (*gb)[h * (2 * max_rel + 1) + rel_index(i, j, max_rel)] += ds;
                      const Real dss = ds * inv;
                      if (gq)
                        for (std::size_t c = 0; c < dh; ++c)
                          (*gq)[i * d + h * dh + c] += dss * K[j * d + h * dh + c];
                      if (gk)
                        for (std::size_t c = 0; c < dh; ++c)
                          (*gk)[j * d + h * dh + c] += dss * Q[i * d + h * dh + c];
                    }
                  }
                }
              });
  }

  /// Single-layer LSTM unrolled over the rows of x [U x E] from zero state.
  /// w_ih [E x 4H], w_hh [H x 4H], b [4H]; gate order input, forget, cell, output.
  Id lstm(Id x, Id w_ih, Id w_hh, Id b) {
    return op(OpKind::kLSTM, {x, w_ih, w_hh, b},
              [](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const auto& Wi = g.in(self, 1);
                const auto& Wh = g.in(self, 2);
                const auto& B = g.in(self, 3);
                const std::size_t U = X.dim(0), E = X.dim(1), H4 = Wi.dim(1), H = H4 / 4;
                if (Wi.dim(0) != E || Wh.shape() != Shape{H, H4} || B.size() != H4) {
                  throw ShapeError("lstm input " + shape_str(X.shape()) + " w_ih " +
                                   shape_str(Wi.shape()) + " w_hh " + shape_str(Wh.shape()));
                }
                // cache layout per step: gates(4H, activated) | c(H) | tanh(c)(H)
                const std::size_t stride = 6 * H;
                self.cache.assign(U * stride, Real(0));
                self.value = Tensor<Real>({U, H});
                detail::RowMat<Real> z(U, H4);
                z.noalias() = detail::ConstMatMap<Real>(X.data(), U, E) *
                              detail::ConstMatMap<Real>(Wi.data(), E, H4);
                std::vector<Real> h_prev(H, Real(0)), c_prev(H, Real(0));
                for (std::size_t u = 0; u < U; ++u) {
                  Real* cache = self.cache.data() + u * stride;
                  for (std::size_t j = 0; j < H4; ++j) {
                    Real s = z(u, j) + B[j];
                    for (std::size_t m = 0; m < H; ++m) s += h_prev[m] * Wh[m * H4 + j];
                    cache[j] = s;
                  }
                  for (std::size_t m = 0; m < H; ++m) {
                    const Real ig = detail::sigmoid(cache[m]);
                    const Real fg = detail::sigmoid(cache[H + m]);
                    const Real gg = std::tanh(cache[2 * H + m]);
                    const Real og = detail::sigmoid(cache[3 * H + m]);
                    cache[m] = ig;
                    cache[H + m] = fg;
                    cache[2 * H + m] = gg;
                    cache[3 * H + m] = og;
                    const Real c = fg * c_prev[m] + ig * gg;
                    cache[4 * H + m] = c;
                    cache[5 * H + m] = std::tanh(c);
                    self.value[u * H + m] = og * cache[5 * H + m];
                  }
                  for (std::size_t m = 0; m < H; ++m) {
                    h_prev[m] = self.value[u * H + m];
                    c_prev[m] = cache[4 * H + m];
                  }
                }
              },
              [](Graph& g, Node& self) {
                const auto& X = g.in(self, 0);
                const auto& Wi = g.in(self, 1);
                const auto& Wh = g.in(self, 2);
                auto* gx = g.grad_of(self, 0);
                auto* gwi = g.grad_of(self, 1);
                auto* gwh = g.grad_of(self, 2);
                auto* gb = g.grad_of(self, 3);
                const std::size_t U = X.dim(0), E = X.dim(1), H4 = Wi.dim(1), H = H4 / 4;
                const std::size_t stride = 6 * H;
                detail::RowMat<Real> dz(U, H4);
                std::vector<Real> dh_next(H, Real(0)), dc_next(H, Real(0));
                for (std::size_t uu = U; uu-- > 0;) {
                  const Real* cache = self.cache.data() + uu * stride;
                  const Real* c_prev = uu ? self.cache.data() + (uu - 1) * stride + 4 * H : nullptr;
                  for (std::size_t m = 0; m < H; ++m) {
                    const Real ig = cache[m], fg = cache[H + m], gg = cache[2 * H + m],
                               og = cache[3 * H + m], tc = cache[5 * H + m];
                    const Real dh = self.grad[uu * H + m] + dh_next[m];
                    const Real dc = dh * og * (Real(1) - tc * tc) + dc_next[m];
                    const Real cp = c_prev ? c_prev[m] : Real(0);
                    dz(uu, m) = dc * gg * ig * (Real(1) - ig);
                    dz(uu, H + m) = dc * cp * fg * (Real(1) - fg);
                    dz(uu, 2 * H + m) = dc * ig * (Real(1) - gg * gg);
                    dz(uu, 3 * H + m) = dh * tc * og * (Real(1) - og);
                    dc_next[m] = dc * fg;
                  }
                  for (std::size_t m = 0; m < H; ++m) {
                    Real s = 0;
                    for (std::size_t j = 0; j < H4; ++j) s += dz(uu, j) * Wh[m * H4 + j];
                    dh_next[m] = s;
                  }
                  if (gwh && uu) {
                    const Real* h_prev = self.value.data() + (uu - 1) * H;
                    for (std::size_t m = 0; m < H; ++m)
                      for (std::size_t j = 0; j < H4; ++j) (*gwh)[m * H4 + j] += h_prev[m] * dz(uu, j);
                  }
                }
                if (gb)
                  for (std::size_t u = 0; u < U; ++u)
                    for (std::size_t j = 0; j < H4; ++j) (*gb)[j] += dz(u, j);
                if (gwi)
                  detail::MatMap<Real>(gwi->data(), E, H4).noalias() +=
                      detail::ConstMatMap<Real>(X.data(), U, E).transpose() * dz;
                if (gx)
                  detail::MatMap<Real>(gx->data(), U, E).noalias() +=
                      dz * detail::ConstMatMap<Real>(Wi.data(), E, H4).transpose();
              });
  }

  /// Pairwise sum a [T x J], b [U x J] -> [T*U x J], row t*U + u = a_t + b_u.
  Id outer_add(Id a, Id b) {
    return op(OpKind::kOuterAdd, {a, b},
              [](Graph& g, Node& self) {
                const auto& A = g.in(self, 0);
                const auto& B = g.in(self, 1);
                if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1)) {
                  throw ShapeError("outer_add " + shape_str(A.shape()) + " with " +
                                   shape_str(B.shape()));
                }
                const std::size_t T = A.dim(0), U = B.dim(0), J = A.dim(1);
                self.value = Tensor<Real>({T * U, J});
                for (std::size_t t = 0; t < T; ++t)
                  for (std::size_t u = 0; u < U; ++u)
                    for (std::size_t j = 0; j < J; ++j)
                      self.value[(t * U + u) * J + j] = A[t * J + j] + B[u * J + j];
              },
              [](Graph& g, Node& self) {
                const auto& A = g.in(self, 0);
                const auto& B = g.in(self, 1);
                auto* ga = g.grad_of(self, 0);
                auto* gb = g.grad_of(self, 1);
                const std::size_t T = A.dim(0), U = B.dim(0), J = A.dim(1);
                for (std::size_t t = 0; t < T; ++t)
                  for (std::size_t u = 0; u < U; ++u)
                    for (std::size_t j = 0; j < J; ++j) {
                      const Real d = self.grad[(t * U + u) * J + j];
                      if (ga) (*ga)[t * J + j] += d;
                      if (gb) (*gb)[u * J + j] += d;
                    }
              });
  }

  /// Scalar-valued node backed by an external function returning the value
  /// and its exact gradient w.r.t. x (the sequence losses plug in here).
  Id scalar_loss(Id x, ScalarFn fn, std::string label) {
    const Id id = op(OpKind::kScalarLoss, {x},
                     [fn](Graph& g, Node& self) {
                       auto [v, grad] = fn(g.in(self, 0));
                       if (grad.shape() != g.in(self, 0).shape()) {
                         throw ShapeError("loss gradient shape " + shape_str(grad.shape()) +
                                          " differs from input " +
                                          shape_str(g.in(self, 0).shape()));
                       }
                       self.value = Tensor<Real>({1}, v);
                       self.aux = std::move(grad);
                     },
                     [](Graph& g, Node& self) {
                       if (auto* gx = g.grad_of(self, 0))
                         for (std::size_t i = 0; i < gx->size(); ++i)
                           (*gx)[i] += self.grad[0] * self.aux[i];
                     });
    nodes_[id].label = std::move(label);
    return id;
  }

  // ---------------------------------------------------------------- evaluation

  /// Supplies placeholder values by name and re-evaluates every node.
  void forward(const TensorTable<Real>& inputs = {}) {
    for (Id id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.kind == OpKind::kInput) {
        auto it = inputs.find(n.label);
        if (it != inputs.end()) {
          if (it->second.shape() != n.declared) {
            throw ShapeError("node " + describe(id) + ": input shape " +
                             shape_str(it->second.shape()) + " does not match declared " +
                             shape_str(n.declared));
          }
          n.value = it->second;
          n.evaluated = true;
        } else if (!n.evaluated) {
          throw ShapeError("node " + describe(id) + ": missing value for input '" +
                           n.label + "'");
        }
      } else if (n.fwd) {
        run_forward(id);
      }
    }
    grads_ready_ = false;
  }

  /// Reverse pass seeded with ones at a scalar output.
  void backward(Id output) {
    const Tensor<Real>& v = value(output);
    backward({{output, Tensor<Real>(v.shape(), Real(1))}});
  }

  void backward(const std::vector<std::pair<Id, Tensor<Real>>>& seeds) {
    for (Id id = 0; id < nodes_.size(); ++id) {
      if (!nodes_[id].evaluated) {
        throw GraphStateError("backward before forward: node " + describe(id) +
                              " has no value");
      }
    }
    for (auto& n : nodes_) {
      n.grad = Tensor<Real>();
      n.has_grad = false;
    }
    for (const auto& [id, g] : seeds) {
      if (g.shape() != value(id).shape()) {
        throw ShapeError("output gradient for node " + describe(id) + " has shape " +
                         shape_str(g.shape()) + ", expected " + shape_str(value(id).shape()));
      }
      Tensor<Real>& slot = ensure_grad(id);
      add_into(slot, g);
    }
    for (Id id = static_cast<Id>(nodes_.size()); id-- > 0;) {
      Node& n = nodes_[id];
      if (n.has_grad && n.bwd) n.bwd(*this, n);
    }
    grads_ready_ = true;
  }

  /// Gradient of a node after backward(); zeros if nothing flowed into it.
  Tensor<Real> gradient(Id id) const {
    if (!grads_ready_) throw GraphStateError("gradient requested before backward");
    const Node& n = node(id);
    if (n.has_grad) return n.grad;
    return Tensor<Real>(value(id).shape());
  }

  /// Which side of the kink every ReLU input lies on. Two evaluations with
  /// equal patterns lie on the same linear piece of every ReLU.
  std::vector<bool> relu_pattern() const {
    std::vector<bool> out;
    for (const auto& n : nodes_) {
      if (n.kind != OpKind::kReLU) continue;
      for (Real v : node(n.inputs[0]).value.values()) out.push_back(v > 0);
    }
    return out;
  }

  /// Gradients of every parameter and named input, keyed by name.
  TensorTable<Real> gradients() const {
    TensorTable<Real> out;
    for (Id id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (n.kind == OpKind::kParameter || n.kind == OpKind::kInput)
        out.emplace(n.label, gradient(id));
    }
    return out;
  }

  /// Adds parameter gradients into a congruent accumulator table.
  void accumulate_parameter_grads(ParameterSet<Real>& acc, Real weight = Real(1)) const {
    if (!grads_ready_) throw GraphStateError("gradient requested before backward");
    for (const auto& [name, id] : param_ids_) {
      const Node& n = nodes_[id];
      if (!n.has_grad) continue;
      auto& dst = acc.at(name);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += weight * n.grad[i];
    }
  }

  std::optional<Id> parameter_node(const std::string& name) const {
    auto it = param_ids_.find(name);
    if (it == param_ids_.end()) return std::nullopt;
    return it->second;
  }

  const ParameterSet<Real>* parameters() const { return params_; }

  std::string describe(Id id) const {
    const Node& n = nodes_.at(id);
    std::string s = "#" + std::to_string(id) + " (" + op_name(n.kind);
    if (!n.label.empty() && n.kind != OpKind::kConstant) s += " '" + n.label + "'";
    return s + ")";
  }

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    std::string label;
    std::vector<Id> inputs;
    Shape declared;
    Tensor<Real> value;
    const Tensor<Real>* ref = nullptr;
    Tensor<Real> grad;
    Tensor<Real> aux;
    std::vector<Real> cache;
    bool requires_grad = false;
    bool has_grad = false;
    bool evaluated = false;
    std::function<void(Graph&, Node&)> fwd;
    std::function<void(Graph&, Node&)> bwd;
  };

  const Node& node(Id id) const {
    if (id >= nodes_.size()) throw std::out_of_range("unknown node id " + std::to_string(id));
    return nodes_[id];
  }

  Id push(Node n) {
    for (Id in : n.inputs) {
      if (in >= nodes_.size()) {
        throw std::out_of_range("node input id " + std::to_string(in) + " does not exist");
      }
    }
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  template <class F, class B>
  Id op(OpKind kind, std::vector<Id> inputs, F&& fwd, B&& bwd) {
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.fwd = std::forward<F>(fwd);
    n.bwd = std::forward<B>(bwd);
    bool ready = true;
    for (Id in : n.inputs) {
      const Node& src = node(in);
      n.requires_grad = n.requires_grad || src.requires_grad;
      ready = ready && src.evaluated;
    }
    const Id id = push(std::move(n));
    if (ready) run_forward(id);
    return id;
  }

  template <class F, class D>
  Id unary(OpKind kind, Id x, F f, D df) {
    return op(kind, {x},
              [f](Graph& g, Node& self) {
                self.value = g.in(self, 0);
                for (auto& v : self.value.values()) v = f(v);
              },
              [df](Graph& g, Node& self) {
                auto* gx = g.grad_of(self, 0);
                if (!gx) return;
                const auto& X = g.in(self, 0);
                for (std::size_t i = 0; i < X.size(); ++i)
                  (*gx)[i] += self.grad[i] * df(X[i], self.value[i]);
              });
  }

  void run_forward(Id id) {
    Node& n = nodes_[id];
    try {
      n.fwd(*this, n);
    } catch (const ShapeError& e) {
      throw ShapeError("node " + describe(id) + ": " + e.what());
    }
    n.evaluated = true;
    if (validate_finite_ && !n.value.all_finite()) {
      throw NonFiniteError("node " + describe(id) + " produced a non-finite value");
    }
  }

  const Tensor<Real>& in(const Node& self, std::size_t i) const { return value(self.inputs[i]); }

  Tensor<Real>& ensure_grad(Id id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<Real>(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient slot for input i of self, or nullptr if it needs no gradient.
  Tensor<Real>* grad_of(const Node& self, std::size_t i) {
    const Id id = self.inputs[i];
    if (!nodes_[id].requires_grad) return nullptr;
    return &ensure_grad(id);
  }

  static void add_into(Tensor<Real>& dst, const Tensor<Real>& src) {
    Real* d = dst.data();
    const Real* s = src.data();
    for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
  }

  static void require_same(const Tensor<Real>& a, const Tensor<Real>& b, const char* what) {
    if (a.shape() != b.shape()) {
      throw ShapeError(std::string(what) + " shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }

  static void softmax_row(Real* v, std::size_t n) {
    const Real m = *std::max_element(v, v + n);
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      v[j] = std::exp(v[j] - m);
      s += v[j];
    }
    for (std::size_t j = 0; j < n; ++j) v[j] /= s;
  }

  static std::size_t rel_index(std::size_t i, std::size_t j, std::size_t max_rel) {
    const auto r = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i);
    const auto m = static_cast<std::ptrdiff_t>(max_rel);
    return static_cast<std::size_t>(std::clamp(r, -m, m) + m);
  }

  static void normalize_forward(Graph& g, Node& self, Real eps, bool affine) {
    const auto& X = g.in(self, 0);
    const std::size_t n = X.last_dim(), rows = X.size() / n;
    if (affine && (g.in(self, 1).size() != n || g.in(self, 2).size() != n)) {
      throw ShapeError("layer_norm input " + shape_str(X.shape()) + " gain " +
                       shape_str(g.in(self, 1).shape()));
    }
    self.value = X;
    self.cache.assign(rows, Real(0));  // inverse std per row
    self.aux = Tensor<Real>(X.shape());  // normalized values
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* x = X.data() + r * n;
      Real mu = 0;
      for (std::size_t j = 0; j < n; ++j) mu += x[j];
      mu /= Real(n);
      Real var = 0;
      for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= Real(n);
      const Real inv = Real(1) / std::sqrt(var + eps);
      self.cache[r] = inv;
      for (std::size_t j = 0; j < n; ++j) {
        const Real xh = (x[j] - mu) * inv;
        self.aux[r * n + j] = xh;
        self.value[r * n + j] =
            affine ? xh * g.in(self, 1)[j] + g.in(self, 2)[j] : xh;
      }
    }
  }

  static void normalize_backward(Graph& g, Node& self, bool affine) {
    const std::size_t n = self.value.last_dim(), rows = self.value.size() / n;
    auto* gx = g.grad_of(self, 0);
    Tensor<Real>* gg = affine ? g.grad_of(self, 1) : nullptr;
    Tensor<Real>* gb = affine ? g.grad_of(self, 2) : nullptr;
    std::vector<Real> dxh(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* dy = self.grad.data() + r * n;
      const Real* xh = self.aux.data() + r * n;
      Real m1 = 0, m2 = 0;
      for (std::size_t j = 0; j < n; ++j) {
        dxh[j] = affine ? dy[j] * g.in(self, 1)[j] : dy[j];
        m1 += dxh[j];
        m2 += dxh[j] * xh[j];
        if (gg) (*gg)[j] += dy[j] * xh[j];
        if (gb) (*gb)[j] += dy[j];
      }
      m1 /= Real(n);
      m2 /= Real(n);
      if (gx)
        for (std::size_t j = 0; j < n; ++j)
          (*gx)[r * n + j] += self.cache[r] * (dxh[j] - m1 - xh[j] * m2);
    }
  }

  // im2col over a [T x H x W x C] volume; columns ordered (kt, kh, kw, cin)
  // to match the kernel layout. Rows index output positions.
  static Tensor<Real> im2col(const Real* x, const Shape& xs, const Conv3dGeometry& g, std::size_t To,
                             std::size_t Ho, std::size_t Wo) {
    const std::size_t T = xs[0], H = xs[1], W = xs[2], C = xs[3];
    const std::size_t cols = g.kt * g.kh * g.kw * C;
    Tensor<Real> m({To * Ho * Wo, cols});
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          Real* row = m.data() + ((t * Ho + i) * Wo + j) * cols;
          for (std::size_t a = 0; a < g.kt; ++a) {
            const std::ptrdiff_t ts = std::ptrdiff_t(t * g.st + a) - std::ptrdiff_t(g.pt);
            if (ts < 0 || ts >= std::ptrdiff_t(T)) continue;
            for (std::size_t b = 0; b < g.kh; ++b) {
              const std::ptrdiff_t hs = std::ptrdiff_t(i * g.sh + b) - std::ptrdiff_t(g.ph);
              if (hs < 0 || hs >= std::ptrdiff_t(H)) continue;
              for (std::size_t c = 0; c < g.kw; ++c) {
                const std::ptrdiff_t ws = std::ptrdiff_t(j * g.sw + c) - std::ptrdiff_t(g.pw);
                if (ws < 0 || ws >= std::ptrdiff_t(W)) continue;
                const Real* src = x + ((ts * H + hs) * W + ws) * C;
                Real* dst = row + ((a * g.kh + b) * g.kw + c) * C;
                if (C == 1) {
                  *dst = *src;
                } else {
                  std::copy_n(src, C, dst);
                }
              }
            }
          }
        }
    return m;
  }

  static void conv_forward(Node& self, const Tensor<Real>& X, const Tensor<Real>& Wt,
                           const Shape& xs, const Conv3dGeometry& g, std::size_t cout) {
    const std::size_t To = detail::conv_out(xs[0], g.kt, g.st, g.pt);
    const std::size_t Ho = detail::conv_out(xs[1], g.kh, g.sh, g.ph);
    const std::size_t Wo = detail::conv_out(xs[2], g.kw, g.sw, g.pw);
    if (To == 0 || Ho == 0 || Wo == 0) {
      throw ShapeError("convolution input " + shape_str(xs) + " smaller than kernel support");
    }
    self.aux = im2col(X.data(), xs, g, To, Ho, Wo);
    const std::size_t rows = self.aux.dim(0), K = self.aux.dim(1);
    self.value = Tensor<Real>({To, Ho, Wo, cout});
    detail::MatMap<Real>(self.value.data(), rows, cout).noalias() =
        detail::ConstMatMap<Real>(self.aux.data(), rows, K) * detail::ConstMatMap<Real>(Wt.data(), K, cout);
  }

  static void conv_backward(Graph& gr, Node& self, const Shape& xs, const Conv3dGeometry& g,
                            const Tensor<Real>& Wt) {
    const std::size_t rows = self.aux.dim(0), K = self.aux.dim(1);
    const std::size_t cout = self.grad.size() / rows;
    detail::ConstMatMap<Real> dy(self.grad.data(), rows, cout);
    if (auto* gw = gr.grad_of(self, 1)) {
      detail::MatMap<Real>(gw->data(), K, cout).noalias() +=
          detail::ConstMatMap<Real>(self.aux.data(), rows, K).transpose() * dy;
    }
    auto* gx = gr.grad_of(self, 0);
    if (!gx) return;
    detail::RowMat<Real> dcols = dy * detail::ConstMatMap<Real>(Wt.data(), K, cout).transpose();
    const std::size_t T = xs[0], H = xs[1], W = xs[2], C = xs[3];
    const std::size_t To = detail::conv_out(T, g.kt, g.st, g.pt);
    const std::size_t Ho = detail::conv_out(H, g.kh, g.sh, g.ph);
    const std::size_t Wo = detail::conv_out(W, g.kw, g.sw, g.pw);
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          const Real* row = dcols.data() + ((t * Ho + i) * Wo + j) * K;
          for (std::size_t a = 0; a < g.kt; ++a) {
            const std::ptrdiff_t ts = std::ptrdiff_t(t * g.st + a) - std::ptrdiff_t(g.pt);
            if (ts < 0 || ts >= std::ptrdiff_t(T)) continue;
            for (std::size_t b = 0; b < g.kh; ++b) {
              const std::ptrdiff_t hs = std::ptrdiff_t(i * g.sh + b) - std::ptrdiff_t(g.ph);
              if (hs < 0 || hs >= std::ptrdiff_t(H)) continue;
              for (std::size_t c = 0; c < g.kw; ++c) {
                const std::ptrdiff_t ws = std::ptrdiff_t(j * g.sw + c) - std::ptrdiff_t(g.pw);
                if (ws < 0 || ws >= std::ptrdiff_t(W)) continue;
                Real* dst = gx->data() + ((ts * H + hs) * W + ws) * C;
                const Real* src = row + ((a * g.kh + b) * g.kw + c) * C;
                for (std::size_t k = 0; k < C; ++k) dst[k] += src[k];
              }
            }
          }
        }
  }

  const ParameterSet<Real>* params_ = nullptr;
  std::vector<Node> nodes_;
  std::map<std::string, Id> param_ids_;
  bool validate_finite_ = true;
  bool grads_ready_ = false;
};

/// Coordinates (parameter or input name, flat index) to probe in grad_check.
/// Round 0 is the initial draw; later rounds supply replacements.
using CoordinateSampler = std::function<std::vector<std::pair<std::string, std::size_t>>(
    const std::map<std::string, Shape>&, std::size_t round)>;

/// Uniformly random coordinates over the given tensors.
inline CoordinateSampler uniform_sampler(std::size_t count, std::uint64_t seed) {
  return [count, seed](const std::map<std::string, Shape>& shapes, std::size_t round) {
    std::vector<std::pair<std::string, std::size_t>> out;
    std::vector<std::pair<std::string, std::size_t>> flat;
    std::size_t total = 0;
    for (const auto& [name, s] : shapes) {
      flat.emplace_back(name, shape_size(s));
      total += shape_size(s);
    }
    if (total == 0) return out;
    Rng rng(derive_seed(seed, {0x6C, round}));
    for (std::size_t i = 0; i < count; ++i) {
      auto k = static_cast<std::size_t>(uniform_int(rng, 0, std::int64_t(total) - 1));
      for (const auto& [name, n] : flat) {
        if (k < n) {
          out.emplace_back(name, k);
          break;
        }
        k -= n;
      }
    }
    return out;
  };
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinked = 0;  // stencils that crossed a ReLU kink; resampled
};

/// Compares reverse-mode gradients with central differences over sampled
/// coordinates of the graph's parameters and inputs. Relative error is
/// |analytic - numeric| / max(floor, |analytic| + |numeric|), where floor is
/// 1e5 times the difference quotient's rounding resolution
/// machine_eps * max(1, |L|) / epsilon: gradients that small (exact zeros
/// included) are compared on an absolute scale instead.
/// A stencil whose +-epsilon evaluations change any ReLU's active side is
/// not a derivative estimate; such a coordinate is counted as kinked and a
/// replacement is drawn, so `checked` reaches the requested count whenever
/// enough smooth coordinates exist. The output node must be scalar.
/// Parameters are perturbed in place through `params` (the set the graph was
/// built on) and restored afterwards.
template <class Real>
GradCheckResult grad_check(Graph<Real>& graph, typename Graph<Real>::Id output, ParameterSet<Real>* params,
                           TensorTable<Real> inputs, Real epsilon, const CoordinateSampler& sample) {
  if (epsilon == Real(0)) throw std::invalid_argument("grad_check epsilon must be non-zero");
  graph.forward(inputs);
  if (graph.value(output).size() != 1) {
    throw std::invalid_argument("grad_check needs a scalar output, got " +
                                shape_str(graph.value(output).shape()));
  }
  const Real loss = graph.value(output)[0];
  const Real floor = Real(1e5) * std::numeric_limits<Real>::epsilon() * std::max(Real(1), std::abs(loss)) /
                     std::abs(epsilon);
  graph.backward(output);
  const auto analytic = graph.gradients();
  const auto base_pattern = graph.relu_pattern();

  std::map<std::string, Shape> shapes;
  for (const auto& [name, g] : analytic) shapes.emplace(name, g.shape());
  auto coords = sample(shapes, 0);
  const std::size_t wanted = coords.size();

  auto eval = [&]() {
    graph.forward(inputs);
    return std::make_pair(graph.value(output)[0], graph.relu_pattern() == base_pattern);
  };

  GradCheckResult r;
  std::size_t next = 0;
  for (std::size_t round = 1; round <= 8 && r.checked < wanted; ++round) {
    for (; next < coords.size() && r.checked < wanted; ++next) {
      const auto& [name, idx] = coords[next];
      Real* slot = nullptr;
      if (auto it = inputs.find(name); it != inputs.end()) {
        slot = &it->second[idx];
      } else if (params && params->contains(name)) {
        slot = &params->at(name)[idx];
      } else {
        throw std::invalid_argument("grad_check cannot perturb '" + name + "'");
      }
      const Real saved = *slot;
      *slot = saved + epsilon;
      const auto [up, up_smooth] = eval();
      *slot = saved - epsilon;
      const auto [down, down_smooth] = eval();
      *slot = saved;
      if (!up_smooth || !down_smooth) {
        ++r.kinked;
        continue;
      }
      const Real numeric = (up - down) / (Real(2) * epsilon);
      const Real a = analytic.at(name)[idx];
      const Real rel = std::abs(a - numeric) / std::max(floor, std::abs(a) + std::abs(numeric));
      r.max_rel_error = std::max(r.max_rel_error, double(rel));
      ++r.checked;
    }
    if (r.checked < wanted) {
      const auto more = sample(shapes, round);
      coords.insert(coords.end(), more.begin(), more.end());
    }
  }
  graph.forward(inputs);
  return r;
}

}  // namespace avfc
