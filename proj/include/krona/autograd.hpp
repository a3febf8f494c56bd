#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "krona/kron.hpp"
#include "krona/matrix.hpp"

namespace krona {

// Closed set of differentiable primitives. `leaf` marks inputs/parameters.
enum class Op : std::uint8_t {
  leaf,
  matmul,
  add,
  mul,
  scale,
  relu,
  gelu,
  gelu_new,
  silu,
  sigmoid,
  mish,
  softmax_rows,
  layer_norm,
  embedding,
  cross_entropy,
  mse,
  concat,
  kron_linear,
};

inline constexpr std::array<Op, 17> kPrimitives = {
    Op::matmul,  Op::add,        Op::mul,          Op::scale,      Op::relu,
    Op::gelu,    Op::gelu_new,   Op::silu,         Op::sigmoid,    Op::mish,
    Op::softmax_rows, Op::layer_norm, Op::embedding, Op::cross_entropy, Op::mse,
    Op::concat,  Op::kron_linear,
};

inline std::vector<Op> primitive_set() { return {kPrimitives.begin(), kPrimitives.end()}; }

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::relu: return "relu";
    case Op::gelu: return "gelu";
    case Op::gelu_new: return "gelu_new";
    case Op::silu: return "silu";
    case Op::sigmoid: return "sigmoid";
    case Op::mish: return "mish";
    case Op::softmax_rows: return "softmax_rows";
    case Op::layer_norm: return "layer_norm";
    case Op::embedding: return "embedding";
    case Op::cross_entropy: return "cross_entropy";
    case Op::mse: return "mse";
    case Op::concat: return "concat";
    case Op::kron_linear: return "kron_linear";
  }
  return "?";
}

// Elementwise nonlinearities usable standalone or inside kron_linear.
enum class Activation : std::uint8_t { none, relu, gelu, gelu_new, silu, sigmoid, mish };

inline std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::gelu_new: return "gelu_new";
    case Activation::silu: return "silu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::mish: return "mish";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  for (auto a : {Activation::none, Activation::relu, Activation::gelu, Activation::gelu_new,
                 Activation::silu, Activation::sigmoid, Activation::mish})
    if (activation_name(a) == s) return a;
  throw SpecError("unknown nonlinearity '" + std::string(s) + "'");
}

namespace act {

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
T softplus(T x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, T(0));
}

inline constexpr double kGeluNewC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluNewK = 0.044715;

template <class T>
T apply(Activation a, T x) {
  switch (a) {
    case Activation::none: return x;
    case Activation::relu: return x > T(0) ? x : T(0);
    case Activation::gelu: return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    case Activation::gelu_new: {
      const T u = T(kGeluNewC) * (x + T(kGeluNewK) * x * x * x);
      return T(0.5) * x * (T(1) + std::tanh(u));
    }
    case Activation::silu: return x * sigmoid(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::mish: return x * std::tanh(softplus(x));
  }
  return x;
}

template <class T>
T derivative(Activation a, T x) {
  switch (a) {
    case Activation::none: return T(1);
    case Activation::relu: return x > T(0) ? T(1) : T(0);
    case Activation::gelu: {
      const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
      const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> /
                    std::numbers::sqrt2_v<T>;
      return cdf + x * pdf;
    }
    case Activation::gelu_new: {
      const T u = T(kGeluNewC) * (x + T(kGeluNewK) * x * x * x);
      const T t = std::tanh(u);
      const T du = T(kGeluNewC) * (T(1) + T(3 * kGeluNewK) * x * x);
      return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
    }
    case Activation::silu: {
      const T s = sigmoid(x);
      return s + x * s * (T(1) - s);
    }
    case Activation::sigmoid: {
      const T s = sigmoid(x);
      return s * (T(1) - s);
    }
    case Activation::mish: {
      const T t = std::tanh(softplus(x));
      return t + x * (T(1) - t * t) * sigmoid(x);
    }
  }
  return T(1);
}

inline Op op_of(Activation a) {
  switch (a) {
    case Activation::relu: return Op::relu;
    case Activation::gelu: return Op::gelu;
    case Activation::gelu_new: return Op::gelu_new;
    case Activation::silu: return Op::silu;
    case Activation::sigmoid: return Op::sigmoid;
    case Activation::mish: return Op::mish;
    case Activation::none: break;
  }
  throw SpecError("activation 'none' has no primitive");
}

}  // namespace act

struct Var {
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

// Deliberate backward corruption, used only as a negative control for the
// finite-difference checker.
enum class Fault : std::uint8_t { none, kron_linear_grad_a };

struct KronLinearOptions {
  Var mid_bias;  // optional, shape a2 x b1, added after the first product
  Activation activation = Activation::none;
};

/// Tape of primitive nodes in creation (= topological) order.
///
/// Values are computed eagerly when a node is added; `forward()` recomputes
/// every non-leaf node after leaf values change. `backward(loss)` fills the
/// gradient slot of every node that depends on a trainable leaf.
template <class T = double>
class Graph {
 public:
  struct Node {
    Op op = Op::leaf;
    std::vector<std::size_t> inputs;
    Matrix<T> value;
    Matrix<T> grad;
    bool trainable = false;
    bool needs_grad = false;
    std::function<void(Graph&, std::size_t)> forward;
    std::function<void(Graph&, std::size_t)> backward;
    Matrix<T> saved;   // op-specific forward intermediates
    Matrix<T> saved2;
    const Matrix<T>* borrowed = nullptr;  // leaf viewing caller-owned storage

    const Matrix<T>& val() const { return borrowed ? *borrowed : value; }
  };

  Var constant(Matrix<T> value) { return leaf(std::move(value), false); }
  Var parameter(Matrix<T> value) { return leaf(std::move(value), true); }

  // Leaves that view `m` without copying it. `m` must outlive the graph and
  // must not change while the graph is in use.
  Var constant_ref(const Matrix<T>& m) { return leaf_ref(m, false); }
  Var parameter_ref(const Matrix<T>& m) { return leaf_ref(m, true); }

  const Matrix<T>& value(Var v) const { return node(v).val(); }
  const Matrix<T>& grad(Var v) const {
    const Node& n = node(v);
    if (!n.needs_grad) throw GraphError("grad requested for a node without gradient");
    return n.grad;
  }
  bool trainable(Var v) const { return node(v).trainable; }
  Op op(Var v) const { return node(v).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void set_value(Var v, Matrix<T> value) {
    Node& n = node(v);
    if (n.op != Op::leaf) throw GraphError("set_value on a non-leaf node");
    if (!n.val().same_shape(value)) throw DimensionError("set_value: shape change");
    n.value = std::move(value);
    n.borrowed = nullptr;
  }

  void set_fault(Fault f) noexcept { fault_ = f; }
  Fault fault() const noexcept { return fault_; }

  // Multiplications performed by matmul and kron_linear forwards so far.
  std::uint64_t forward_mults() const noexcept { return mults_; }

  Var loss() const noexcept { return loss_; }

  // Recompute all non-leaf values in topological order.
  void forward() {
    mults_ = 0;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].forward) nodes_[i].forward(*this, i);
  }

  void backward(Var loss) {
    if (!loss.valid() || loss.id >= nodes_.size()) throw GraphError("backward: detached loss");
    Node& l = nodes_[loss.id];
    if (l.val().rows() != 1 || l.val().cols() != 1)
      throw GraphError("backward: loss must be 1x1, got " + l.val().shape());
    loss_ = loss;
    for (Node& n : nodes_)
      if (n.needs_grad) n.grad = Matrix<T>(n.val().rows(), n.val().cols());
    if (!l.needs_grad) return;
    l.grad(0, 0) = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.backward) n.backward(*this, i);
    }
  }

  // ---- primitives -------------------------------------------------------

  Var matmul(Var a, Var b, bool transpose_b = false) {
    return push(Op::matmul, {a.id, b.id},
        [transpose_b](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& A = g.in(n, 0);
          const auto& B = g.in(n, 1);
          n.value = transpose_b ? krona::matmul_nt(A, B) : krona::matmul(A, B);
          g.mults_ += static_cast<std::uint64_t>(A.rows()) * A.cols() * n.value.cols();
        },
        [transpose_b](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& A = g.in(n, 0);
          const auto& B = g.in(n, 1);
          if (g.wants(n, 0)) add_into(g.gin(n, 0), transpose_b ? krona::matmul(n.grad, B)
                                                                : krona::matmul_nt(n.grad, B));
          if (g.wants(n, 1)) add_into(g.gin(n, 1), transpose_b ? krona::matmul_tn(n.grad, A)
                                                                : krona::matmul_tn(A, n.grad));
        });
  }

  // a + b, where b either matches a or is a single row broadcast over a's rows.
  Var add(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    const bool bcast = B.rows() == 1 && A.rows() != 1 && B.cols() == A.cols();
    if (!bcast && !A.same_shape(B))
      throw DimensionError("add: incompatible shapes " + A.shape() + " and " + B.shape());
    return push(Op::add, {a.id, b.id},
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& A = g.in(n, 0);
          const auto& B = g.in(n, 1);
          n.value = A;
          for (std::size_t i = 0; i < A.rows(); ++i)
            for (std::size_t j = 0; j < A.cols(); ++j) n.value(i, j) += B(B.rows() == 1 ? 0 : i, j);
        },
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          if (g.wants(n, 0)) add_into(g.gin(n, 0), n.grad);
          if (g.wants(n, 1)) {
            Matrix<T>& gb = g.gin(n, 1);
            for (std::size_t i = 0; i < n.grad.rows(); ++i)
              for (std::size_t j = 0; j < n.grad.cols(); ++j)
                gb(gb.rows() == 1 ? 0 : i, j) += n.grad(i, j);
          }
        });
  }

  Var mul(Var a, Var b) {
    if (!value(a).same_shape(value(b)))
      throw DimensionError("mul: incompatible shapes " + value(a).shape() + " and " +
                           value(b).shape());
    return push(Op::mul, {a.id, b.id},
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          n.value = g.in(n, 0);
          const auto& B = g.in(n, 1);
          for (std::size_t k = 0; k < n.value.size(); ++k) n.value.data()[k] *= B.data()[k];
        },
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& A = g.in(n, 0);
          const auto& B = g.in(n, 1);
          for (int side = 0; side < 2; ++side) {
            if (!g.wants(n, side)) continue;
            auto& dst = g.gin(n, side);
            const auto& other = side == 0 ? B : A;
            for (std::size_t k = 0; k < dst.size(); ++k)
              dst.data()[k] += n.grad.data()[k] * other.data()[k];
          }
        });
  }

  Var scale(Var a, T s) {
    return push(Op::scale, {a.id},
        [s](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          n.value = s * g.in(n, 0);
        },
        [s](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          auto& dst = g.gin(n, 0);
          for (std::size_t k = 0; k < dst.size(); ++k) dst.data()[k] += s * n.grad.data()[k];
        });
  }

  // Scale by a 1x1 node (e.g. a learnable residual weight).
  Var scale(Var a, Var s) {
    const auto& S = value(s);
    if (S.rows() != 1 || S.cols() != 1)
      throw DimensionError("scale: factor must be 1x1, got " + S.shape());
    return push(Op::scale, {a.id, s.id},
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          n.value = g.in(n, 1)(0, 0) * g.in(n, 0);
        },
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& A = g.in(n, 0);
          const T s = g.in(n, 1)(0, 0);
          if (g.wants(n, 0)) {
            auto& dst = g.gin(n, 0);
            for (std::size_t k = 0; k < dst.size(); ++k) dst.data()[k] += s * n.grad.data()[k];
          }
          if (g.wants(n, 1)) {
            T acc{};
            for (std::size_t k = 0; k < A.size(); ++k) acc += n.grad.data()[k] * A.data()[k];
            g.gin(n, 1)(0, 0) += acc;
          }
        });
  }

  Var activation(Var a, Activation f) {
    if (f == Activation::none) return a;
    return push(act::op_of(f), {a.id},
        [f](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          n.value = g.in(n, 0);
          for (T& v : n.value.data()) v = act::apply(f, v);
        },
        [f](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& X = g.in(n, 0);
          auto& dst = g.gin(n, 0);
          for (std::size_t k = 0; k < dst.size(); ++k)
            dst.data()[k] += n.grad.data()[k] * act::derivative(f, X.data()[k]);
        });
  }
  Var relu(Var a) { return activation(a, Activation::relu); }
  Var gelu(Var a) { return activation(a, Activation::gelu); }
  Var gelu_new(Var a) { return activation(a, Activation::gelu_new); }
  Var silu(Var a) { return activation(a, Activation::silu); }
  Var sigmoid(Var a) { return activation(a, Activation::sigmoid); }
  Var mish(Var a) { return activation(a, Activation::mish); }

  Var softmax_rows(Var a) {
    return push(Op::softmax_rows, {a.id},
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          n.value = g.in(n, 0);
          for (std::size_t i = 0; i < n.value.rows(); ++i) softmax_inplace(n.value.row(i));
        },
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          auto& dst = g.gin(n, 0);
          for (std::size_t i = 0; i < n.value.rows(); ++i) {
            T dot{};
            for (std::size_t j = 0; j < n.value.cols(); ++j) dot += n.grad(i, j) * n.value(i, j);
            for (std::size_t j = 0; j < n.value.cols(); ++j)
              dst(i, j) += n.value(i, j) * (n.grad(i, j) - dot);
          }
        });
  }

  static constexpr double kLayerNormEps = 1e-6;

  // Row-wise normalization with learnable 1 x d gain and bias.
  Var layer_norm(Var x, Var gain, Var bias) {
    const std::size_t d = value(x).cols();
    for (Var p : {gain, bias})
      if (value(p).rows() != 1 || value(p).cols() != d)
        throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(d));
    return push(Op::layer_norm, {x.id, gain.id, bias.id},
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& X = g.in(n, 0);
          const auto& G = g.in(n, 1);
          const auto& B = g.in(n, 2);
          const std::size_t rows = X.rows(), d = X.cols();
          n.saved = Matrix<T>(rows, d);   // xhat
          n.saved2 = Matrix<T>(rows, 1);  // 1/sigma
          n.value = Matrix<T>(rows, d);
          for (std::size_t i = 0; i < rows; ++i) {
            T mu{};
            for (std::size_t j = 0; j < d; ++j) mu += X(i, j);
            mu /= T(d);
            T var{};
            for (std::size_t j = 0; j < d; ++j) var += (X(i, j) - mu) * (X(i, j) - mu);
            var /= T(d);
            const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
            n.saved2(i, 0) = inv;
            for (std::size_t j = 0; j < d; ++j) {
              const T xh = (X(i, j) - mu) * inv;
              n.saved(i, j) = xh;
              n.value(i, j) = xh * G(0, j) + B(0, j);
            }
          }
        },
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& G = g.in(n, 1);
          const std::size_t rows = n.value.rows(), d = n.value.cols();
          if (g.wants(n, 1) || g.wants(n, 2)) {
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < d; ++j) {
                if (g.wants(n, 1)) g.gin(n, 1)(0, j) += n.grad(i, j) * n.saved(i, j);
                if (g.wants(n, 2)) g.gin(n, 2)(0, j) += n.grad(i, j);
              }
          }
          if (!g.wants(n, 0)) return;
          auto& dx = g.gin(n, 0);
          for (std::size_t i = 0; i < rows; ++i) {
            T mean_d{}, mean_dx{};
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = n.grad(i, j) * G(0, j);
              mean_d += dxh;
              mean_dx += dxh * n.saved(i, j);
            }
            mean_d /= T(d);
            mean_dx /= T(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = n.grad(i, j) * G(0, j);
              dx(i, j) += n.saved2(i, 0) * (dxh - mean_d - n.saved(i, j) * mean_dx);
            }
          }
        });
  }

  // Rows of `table` selected by ids.
  Var embedding(Var table, std::vector<int> ids) {
    const auto& Tb = value(table);
    for (int t : ids)
      if (t < 0 || static_cast<std::size_t>(t) >= Tb.rows())
        throw DimensionError("embedding: id " + std::to_string(t) + " outside table of " +
                             std::to_string(Tb.rows()) + " rows");
    if (ids.empty()) throw DimensionError("embedding: empty id list");
    return push(Op::embedding, {table.id},
        [ids](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& Tb = g.in(n, 0);
          n.value = Matrix<T>(ids.size(), Tb.cols());
          for (std::size_t i = 0; i < ids.size(); ++i) {
            auto src = Tb.row(static_cast<std::size_t>(ids[i]));
            std::copy(src.begin(), src.end(), n.value.row(i).begin());
          }
        },
        [ids](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          auto& dst = g.gin(n, 0);
          for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < dst.cols(); ++j)
              dst(static_cast<std::size_t>(ids[i]), j) += n.grad(i, j);
        });
  }

  // Mean over rows of -log softmax(logits)[label].
  Var cross_entropy(Var logits, std::vector<int> labels) {
    const auto& L = value(logits);
    if (labels.size() != L.rows())
      throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                           std::to_string(L.rows()) + " rows");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= L.cols())
        throw DimensionError("cross_entropy: label " + std::to_string(y) + " out of range");
    return push(Op::cross_entropy, {logits.id},
        [labels](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& L = g.in(n, 0);
          n.saved = L;
          T total{};
          for (std::size_t i = 0; i < L.rows(); ++i) {
            auto row = n.saved.row(i);
            T mx = row[0];
            for (T v : row) mx = std::max(mx, v);
            T sum{};
            for (T v : row) sum += std::exp(v - mx);
            const T lse = mx + std::log(sum);
            total += lse - L(i, static_cast<std::size_t>(labels[i]));
            for (T& v : row) v = std::exp(v - lse);
          }
          n.value = Matrix<T>(1, 1, total / T(L.rows()));
        },
        [labels](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          auto& dst = g.gin(n, 0);
          const T w = n.grad(0, 0) / T(dst.rows());
          for (std::size_t i = 0; i < dst.rows(); ++i)
            for (std::size_t j = 0; j < dst.cols(); ++j) {
              const T onehot = j == static_cast<std::size_t>(labels[i]) ? T(1) : T(0);
              dst(i, j) += w * (n.saved(i, j) - onehot);
            }
        });
  }

  // Mean over all entries of (pred - target)^2.
  Var mse(Var pred, Var target) {
    if (!value(pred).same_shape(value(target)))
      throw DimensionError("mse: incompatible shapes " + value(pred).shape() + " and " +
                           value(target).shape());
    return push(Op::mse, {pred.id, target.id},
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& P = g.in(n, 0);
          const auto& Y = g.in(n, 1);
          T s{};
          for (std::size_t k = 0; k < P.size(); ++k) {
            const T d = P.data()[k] - Y.data()[k];
            s += d * d;
          }
          n.value = Matrix<T>(1, 1, s / T(P.size()));
        },
        [](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& P = g.in(n, 0);
          const auto& Y = g.in(n, 1);
          const T w = T(2) * n.grad(0, 0) / T(P.size());
          for (std::size_t k = 0; k < P.size(); ++k) {
            const T d = w * (P.data()[k] - Y.data()[k]);
            if (g.wants(n, 0)) g.gin(n, 0).data()[k] += d;
            if (g.wants(n, 1)) g.gin(n, 1).data()[k] -= d;
          }
        });
  }

  // axis 0 stacks rows, axis 1 stacks columns.
  Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    if (axis != 0 && axis != 1) throw DimensionError("concat: axis must be 0 or 1");
    std::vector<std::size_t> ids;
    const auto& first = value(parts.front());
    for (Var p : parts) {
      const auto& v = value(p);
      if ((axis == 0 && v.cols() != first.cols()) || (axis == 1 && v.rows() != first.rows()))
        throw DimensionError("concat: mismatched part " + v.shape() + " vs " + first.shape());
      ids.push_back(p.id);
    }
    return push(Op::concat, std::move(ids),
        [axis](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          std::size_t rows = 0, cols = 0;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const auto& v = g.in(n, k);
            rows = axis == 0 ? rows + v.rows() : v.rows();
            cols = axis == 1 ? cols + v.cols() : v.cols();
          }
          n.value = Matrix<T>(rows, cols);
          std::size_t off = 0;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const auto& v = g.in(n, k);
            for (std::size_t i = 0; i < v.rows(); ++i)
              for (std::size_t j = 0; j < v.cols(); ++j)
                (axis == 0 ? n.value(off + i, j) : n.value(i, off + j)) = v(i, j);
            off += axis == 0 ? v.rows() : v.cols();
          }
        },
        [axis](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          std::size_t off = 0;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const auto& v = g.in(n, k);
            if (g.wants(n, k)) {
              auto& dst = g.gin(n, k);
              for (std::size_t i = 0; i < v.rows(); ++i)
                for (std::size_t j = 0; j < v.cols(); ++j)
                  dst(i, j) += axis == 0 ? n.grad(off + i, j) : n.grad(i, off + j);
            }
            off += axis == 0 ? v.rows() : v.cols();
          }
        });
  }

  /// Fused X (A kron B) without reconstructing the operator.
  ///
  /// Each row x is viewed as R (a1 x b1); the node computes
  /// Y = act(A^T R + C) B with C the optional a2 x b1 intermediate bias.
  /// Backward, with Z = A^T R + C and U = act(Z):
  ///   dU = dY B^T, dB += U^T dY, dZ = dU * act'(Z), dC += dZ,
  ///   dA += R dZ^T, dR = A dZ.
  Var kron_linear(Var x, Var a, Var b, KronLinearOptions opt = {}) {
    const auto& X = value(x);
    const auto& A = value(a);
    const auto& B = value(b);
    detail::require_cols(X.cols(), A.rows() * B.rows(), "kron_linear");
    std::vector<std::size_t> ids{x.id, a.id, b.id};
    if (opt.mid_bias.valid()) {
      const auto& C = value(opt.mid_bias);
      if (C.rows() != A.cols() || C.cols() != B.rows())
        throw DimensionError("kron_linear: intermediate bias must be " +
                             Matrix<T>::shape_string(A.cols(), B.rows()) + ", got " + C.shape());
      ids.push_back(opt.mid_bias.id);
    }
    const Activation f = opt.activation;
    return push(Op::kron_linear, std::move(ids),
        [f](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& X = g.in(n, 0);
          const auto& A = g.in(n, 1);
          const auto& B = g.in(n, 2);
          const bool has_c = n.inputs.size() > 3;
          const std::size_t rows = X.rows(), a2 = A.cols(), b1 = B.rows(), b2 = B.cols();
          const std::size_t mid = a2 * b1;
          n.saved = Matrix<T>(rows, mid);   // Z (pre-activation)
          n.saved2 = Matrix<T>(rows, mid);  // U = act(Z)
          n.value = Matrix<T>(rows, a2 * b2);
          for (std::size_t i = 0; i < rows; ++i) {
            T* z = &n.saved(i, 0);
            T* u = &n.saved2(i, 0);
            detail::kron_row_stage1(A, b1, &X(i, 0), z);
            if (has_c) {
              const auto& C = g.in(n, 3);
              for (std::size_t k = 0; k < mid; ++k) z[k] += C.data()[k];
            }
            for (std::size_t k = 0; k < mid; ++k) u[k] = act::apply(f, z[k]);
            detail::kron_row_stage2(B, a2, u, &n.value(i, 0));
          }
          g.mults_ += rows * count_mults(A.rows(), a2, b1, b2).vec_trick;
        },
        [f](Graph& g, std::size_t self) {
          Node& n = g.nodes_[self];
          const auto& X = g.in(n, 0);
          const auto& A = g.in(n, 1);
          const auto& B = g.in(n, 2);
          const bool has_c = n.inputs.size() > 3;
          const std::size_t rows = X.rows(), a1 = A.rows(), a2 = A.cols(), b1 = B.rows(),
                            b2 = B.cols();
          std::vector<T> dz(a2 * b1);
          Matrix<T> dA(a1, a2);
          for (std::size_t i = 0; i < rows; ++i) {
            const T* dy = &n.grad(i, 0);  // a2 x b2
            const T* z = &n.saved(i, 0);
            const T* u = &n.saved2(i, 0);
            if (g.wants(n, 2)) {
              auto& dB = g.gin(n, 2);
              for (std::size_t q = 0; q < a2; ++q)
                for (std::size_t r = 0; r < b1; ++r) {
                  const T uv = u[q * b1 + r];
                  for (std::size_t p = 0; p < b2; ++p) dB(r, p) += uv * dy[q * b2 + p];
                }
            }
            const bool upstream = g.wants(n, 0) || g.wants(n, 1) || (has_c && g.wants(n, 3));
            if (!upstream) continue;
            for (std::size_t q = 0; q < a2; ++q)
              for (std::size_t r = 0; r < b1; ++r) {
                T acc{};
                for (std::size_t p = 0; p < b2; ++p) acc += dy[q * b2 + p] * B(r, p);
                dz[q * b1 + r] = acc * act::derivative(f, z[q * b1 + r]);
              }
            if (has_c && g.wants(n, 3)) {
              auto& dC = g.gin(n, 3);
              for (std::size_t k = 0; k < dz.size(); ++k) dC.data()[k] += dz[k];
            }
            const T* x = &X(i, 0);
            if (g.wants(n, 1)) {
              for (std::size_t c = 0; c < a1; ++c)
                for (std::size_t q = 0; q < a2; ++q) {
                  T acc{};
                  for (std::size_t r = 0; r < b1; ++r) acc += x[c * b1 + r] * dz[q * b1 + r];
                  dA(c, q) += acc;
                }
            }
            if (g.wants(n, 0)) {
              T* dx = &g.gin(n, 0)(i, 0);
              for (std::size_t c = 0; c < a1; ++c)
                for (std::size_t q = 0; q < a2; ++q) {
                  const T av = A(c, q);
                  for (std::size_t r = 0; r < b1; ++r) dx[c * b1 + r] += av * dz[q * b1 + r];
                }
            }
          }
          if (g.wants(n, 1)) {
            if (g.fault_ == Fault::kron_linear_grad_a) dA = T(0.5) * dA;
            add_into(g.gin(n, 1), dA);
          }
        });
  }

 private:
  using Fn = std::function<void(Graph&, std::size_t)>;

  Var leaf(Matrix<T> value, bool trainable) {
    if (value.empty()) throw DimensionError("graph leaf must be non-empty");
    Node n;
    n.op = Op::leaf;
    n.value = std::move(value);
    n.trainable = trainable;
    n.needs_grad = trainable;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var leaf_ref(const Matrix<T>& m, bool trainable) {
    if (m.empty()) throw DimensionError("graph leaf must be non-empty");
    Node n;
    n.op = Op::leaf;
    n.borrowed = &m;
    n.trainable = trainable;
    n.needs_grad = trainable;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var push(Op op, std::vector<std::size_t> inputs, Fn fwd, Fn bwd) {
    Node n;
    n.op = op;
    for (std::size_t id : inputs) {
      if (id >= nodes_.size()) throw GraphError("input node does not belong to this graph");
      n.needs_grad = n.needs_grad || nodes_[id].needs_grad;
    }
    n.inputs = std::move(inputs);
    n.forward = std::move(fwd);
    n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    const std::size_t id = nodes_.size() - 1;
    nodes_[id].forward(*this, id);
    return Var{id};
  }

  const Node& node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw GraphError("invalid node reference");
    return nodes_[v.id];
  }
  Node& node(Var v) {
    if (!v.valid() || v.id >= nodes_.size()) throw GraphError("invalid node reference");
    return nodes_[v.id];
  }

  const Matrix<T>& in(const Node& n, std::size_t k) const { return nodes_[n.inputs[k]].val(); }
  Matrix<T>& gin(const Node& n, std::size_t k) { return nodes_[n.inputs[k]].grad; }
  bool wants(const Node& n, std::size_t k) const { return nodes_[n.inputs[k]].needs_grad; }

  static void add_into(Matrix<T>& dst, const Matrix<T>& src) {
    for (std::size_t k = 0; k < dst.size(); ++k) dst.data()[k] += src.data()[k];
  }

  static void softmax_inplace(std::span<T> row) {
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    T sum{};
    for (T& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (T& v : row) v /= sum;
  }

  std::vector<Node> nodes_;
  Var loss_;
  Fault fault_ = Fault::none;
  std::uint64_t mults_ = 0;
};

}  // namespace krona
