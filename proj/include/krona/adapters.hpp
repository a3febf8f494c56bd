#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "krona/autograd.hpp"
#include "krona/kron.hpp"
#include "krona/shapes.hpp"

namespace krona {

// `ft` is full fine-tuning: no adapter module, every parameter trainable.
enum class AdapterKind : std::uint8_t {
  krona,
  krona_b,
  krona_b_res,
  krona_b_sigres,
  lora,
  pa,
  seq_adapter,
  bitfit,
  ft,
};

enum class Placement : std::uint8_t { weight_parallel, block_parallel, block_sequential };
enum class InitScheme : std::uint8_t { zero_side_kaiming, both_normal };

inline std::string_view kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::krona: return "krona";
    case AdapterKind::krona_b: return "krona_b";
    case AdapterKind::krona_b_res: return "krona_b_res";
    case AdapterKind::krona_b_sigres: return "krona_b_sigres";
    case AdapterKind::lora: return "lora";
    case AdapterKind::pa: return "pa";
    case AdapterKind::seq_adapter: return "seq_adapter";
    case AdapterKind::bitfit: return "bitfit";
    case AdapterKind::ft: return "ft";
  }
  return "?";
}

inline constexpr AdapterKind kAllKinds[] = {
    AdapterKind::krona, AdapterKind::krona_b,     AdapterKind::krona_b_res,
    AdapterKind::krona_b_sigres, AdapterKind::lora, AdapterKind::pa,
    AdapterKind::seq_adapter, AdapterKind::bitfit, AdapterKind::ft,
};

inline AdapterKind parse_kind(std::string_view s) {
  for (AdapterKind k : kAllKinds)
    if (kind_name(k) == s) return k;
  throw SpecError("unknown adapter kind '" + std::string(s) + "'");
}

inline std::string_view placement_name(Placement p) {
  switch (p) {
    case Placement::weight_parallel: return "weight_parallel";
    case Placement::block_parallel: return "block_parallel";
    case Placement::block_sequential: return "block_sequential";
  }
  return "?";
}

inline Placement parse_placement(std::string_view s) {
  for (auto p : {Placement::weight_parallel, Placement::block_parallel, Placement::block_sequential})
    if (placement_name(p) == s) return p;
  throw SpecError("unknown placement '" + std::string(s) + "'");
}

inline std::string_view init_name(InitScheme i) {
  return i == InitScheme::zero_side_kaiming ? "zero_side_kaiming" : "both_normal";
}

inline InitScheme parse_init(std::string_view s) {
  if (s == "zero_side_kaiming") return InitScheme::zero_side_kaiming;
  if (s == "both_normal") return InitScheme::both_normal;
  throw SpecError("unknown init scheme '" + std::string(s) + "'");
}

inline bool is_kronecker(AdapterKind k) {
  return k == AdapterKind::krona || k == AdapterKind::krona_b || k == AdapterKind::krona_b_res ||
         k == AdapterKind::krona_b_sigres;
}
inline bool is_low_rank(AdapterKind k) {
  return k == AdapterKind::lora || k == AdapterKind::pa || k == AdapterKind::seq_adapter;
}
inline bool has_module(AdapterKind k) { return is_kronecker(k) || is_low_rank(k); }
inline bool has_residual_scale(AdapterKind k) {
  return k == AdapterKind::krona_b_res || k == AdapterKind::krona_b_sigres;
}

struct AdapterSpec {
  AdapterKind kind = AdapterKind::krona;
  Placement placement = Placement::weight_parallel;
  FactorShape shape{8, 8, 8, 8};  // Kronecker kinds
  std::size_t rank = 1;           // low-rank kinds
  double scale = 1.0;
  double residual_scale_init = 1.0;
  int bias_mode = 0;
  Activation nonlinearity = Activation::none;
  InitScheme init = InitScheme::zero_side_kaiming;
  std::uint64_t seed = 0;

  friend bool operator==(const AdapterSpec&, const AdapterSpec&) = default;
};

// Square-ish factorization: the largest a <= sqrt(d) dividing d on both sides,
// or the (32,24)/(24,32) pair at d = 768.
inline FactorShape default_shape(std::size_t d_h) {
  if (d_h == 768) return {32, 24, 24, 32};
  std::size_t a = 1;
  for (std::size_t k : divisors(d_h))
    if (k * k <= d_h) a = k;
  return {a, a, d_h / a, d_h / a};
}

// Per-kind defaults taken from the published hyperparameter tables.
inline AdapterSpec default_spec(AdapterKind kind, std::size_t d_h) {
  AdapterSpec s;
  s.kind = kind;
  s.shape = default_shape(d_h);
  switch (kind) {
    case AdapterKind::krona:
    case AdapterKind::lora:
      s.placement = Placement::weight_parallel;
      s.scale = 1.0;
      s.rank = 1;
      break;
    case AdapterKind::krona_b:
    case AdapterKind::krona_b_res:
    case AdapterKind::krona_b_sigres:
      s.placement = Placement::block_parallel;
      s.scale = 16.0;
      s.bias_mode = 1;
      break;
    case AdapterKind::pa:
      s.placement = Placement::block_parallel;
      s.rank = 2;
      s.scale = 16.0;
      s.nonlinearity = Activation::relu;
      break;
    case AdapterKind::seq_adapter:
      s.placement = Placement::block_sequential;
      s.rank = std::max<std::size_t>(1, d_h / 32);  // reduction factor 32
      s.nonlinearity = Activation::relu;
      break;
    case AdapterKind::bitfit:
    case AdapterKind::ft:
      break;
  }
  return s;
}

inline void validate(const AdapterSpec& s, std::size_t d_h) {
  const auto fail = [&](const std::string& why) {
    throw SpecError(std::string(kind_name(s.kind)) + ": " + why);
  };
  if (!std::isfinite(s.scale)) fail("scale must be finite");
  if (s.bias_mode < 0 || s.bias_mode > 2) fail("bias_mode must be 0, 1 or 2");
  if (is_kronecker(s.kind)) {
    if (s.shape.a1 == 0 || s.shape.a2 == 0 || s.shape.b1 == 0 || s.shape.b2 == 0)
      fail("factor dimensions must be positive");
    if (s.shape.d_in() != d_h || s.shape.d_out() != d_h)
      fail("factor shapes (" + std::to_string(s.shape.a1) + "," + std::to_string(s.shape.a2) +
           ")/(" + std::to_string(s.shape.b1) + "," + std::to_string(s.shape.b2) +
           ") do not satisfy a1*b1 = a2*b2 = " + std::to_string(d_h));
    if (s.kind == AdapterKind::krona) {
      if (s.placement != Placement::weight_parallel) fail("requires weight_parallel placement");
      if (s.bias_mode != 0) fail("bias vectors are only defined for block adapters");
    } else if (s.placement == Placement::weight_parallel) {
      fail("requires block_parallel or block_sequential placement");
    }
    if (has_residual_scale(s.kind) && !std::isfinite(s.residual_scale_init))
      fail("residual_scale_init must be finite");
  } else if (is_low_rank(s.kind)) {
    if (s.rank == 0 || 2 * s.rank >= d_h)
      fail("rank must satisfy 1 <= r < d_h/2, got r=" + std::to_string(s.rank));
    if (s.bias_mode != 0) fail("bias vectors are only defined for Kronecker block adapters");
    const Placement want = s.kind == AdapterKind::lora ? Placement::weight_parallel
                         : s.kind == AdapterKind::pa   ? Placement::block_parallel
                                                       : Placement::block_sequential;
    if (s.placement != want) fail("requires " + std::string(placement_name(want)) + " placement");
    if (s.kind == AdapterKind::lora && s.nonlinearity != Activation::none)
      fail("LoRA has no nonlinearity");
  }
}

// krona and lora fold into the host weight; nothing else can.
inline bool is_mergeable(const AdapterSpec& s) {
  return (s.kind == AdapterKind::krona || s.kind == AdapterKind::lora) &&
         s.nonlinearity == Activation::none && s.bias_mode == 0;
}

/// Trainable tensors of one adapter site. For Kronecker kinds `a`/`b` are
/// A_k/B_k; for low-rank kinds they are the down (d_h x r) and up (r x d_h)
/// projections.
template <class T = double>
struct AdapterState {
  AdapterKind kind = AdapterKind::krona;
  Matrix<T> a, b;
  Matrix<T> bias_out;   // 1 x d_out, bias_mode >= 1
  Matrix<T> bias_mid;   // a2 x b1, bias_mode == 2
  Matrix<T> res_scale;  // 1 x 1, residual kinds

  std::vector<std::pair<std::string, Matrix<T>*>> tensors() {
    std::vector<std::pair<std::string, Matrix<T>*>> out;
    for (auto [name, m] : named())
      if (!m->empty()) out.emplace_back(name, m);
    return out;
  }
  std::vector<std::pair<std::string, const Matrix<T>*>> tensors() const {
    std::vector<std::pair<std::string, const Matrix<T>*>> out;
    for (auto [name, m] : const_cast<AdapterState*>(this)->named())
      if (!m->empty()) out.emplace_back(name, m);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors()) n += m->size();
    return n;
  }

  KronFactorPair<T> pair() const { return {a, b}; }

  friend bool operator==(const AdapterState&, const AdapterState&) = default;

 private:
  std::vector<std::pair<std::string, Matrix<T>*>> named() {
    return {{"A", &a}, {"B", &b}, {"bias_out", &bias_out}, {"bias_mid", &bias_mid},
            {"s_res", &res_scale}};
  }
};

namespace detail {

template <class T>
Matrix<T> kaiming_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in,
                          std::mt19937_64& rng) {
  // a = sqrt(5): bound = sqrt(6 / ((1 + a^2) fan_in)) = 1/sqrt(fan_in)
  const double bound = std::sqrt(6.0 / ((1.0 + 5.0) * static_cast<double>(fan_in)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<T> m(rows, cols);
  for (T& v : m.data()) v = static_cast<T>(dist(rng));
  return m;
}

template <class T>
Matrix<T> normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (T& v : m.data()) v = static_cast<T>(dist(rng));
  return m;
}

}  // namespace detail

/// Fresh adapter parameters for a d_h-wide site. Deterministic in spec.seed
/// plus `stream` (used to decorrelate sites sharing one spec).
template <class T = double>
AdapterState<T> init_adapter(const AdapterSpec& spec, std::size_t d_h, std::uint64_t stream = 0) {
  validate(spec, d_h);
  AdapterState<T> st;
  st.kind = spec.kind;
  if (!has_module(spec.kind)) return st;
  std::seed_seq seq{spec.seed, stream, std::uint64_t{0x6b726f6e61}};
  std::mt19937_64 rng(seq);

  std::size_t ar, ac, br, bc, a_fan;
  if (is_kronecker(spec.kind)) {
    ar = spec.shape.a1, ac = spec.shape.a2, br = spec.shape.b1, bc = spec.shape.b2;
    a_fan = ac;
  } else {
    ar = d_h, ac = spec.rank, br = spec.rank, bc = d_h;
    a_fan = d_h;
  }
  if (spec.init == InitScheme::zero_side_kaiming) {
    st.a = detail::kaiming_uniform<T>(ar, ac, a_fan, rng);
    st.b = Matrix<T>(br, bc);
  } else {
    const double sd = 1.0 / std::sqrt(static_cast<double>(d_h));
    st.a = detail::normal<T>(ar, ac, sd, rng);
    st.b = detail::normal<T>(br, bc, sd, rng);
  }
  if (spec.bias_mode >= 1) st.bias_out = Matrix<T>(1, d_h);
  if (spec.bias_mode == 2) st.bias_mid = Matrix<T>(spec.shape.a2, spec.shape.b1);
  if (has_residual_scale(spec.kind))
    st.res_scale = Matrix<T>(1, 1, static_cast<T>(spec.residual_scale_init));
  return st;
}

// Graph handles for one adapter's tensors. bind_adapter views the state
// without copying it.
struct BoundAdapter {
  Var a, b, bias_out, bias_mid, res_scale;
};

template <class T>
BoundAdapter bind_adapter(Graph<T>& g, const AdapterState<T>& st, bool trainable) {
  const auto put = [&](const Matrix<T>& m) {
    if (m.empty()) return Var{};
    return trainable ? g.parameter_ref(m) : g.constant_ref(m);
  };
  return {put(st.a), put(st.b), put(st.bias_out), put(st.bias_mid), put(st.res_scale)};
}

/// The adapter's additive contribution for input x (rows of width d_h).
///
///   Kronecker: s * x(A kron B) [+ bias_out] [+ s_res x | + sigmoid(s_res) x]
///   lora:      s * (x A) B
///   pa:        s * act(x A) B
///   seq:       act(x A) B           (the host adds its own residual x)
template <class T>
Var adapter_delta(Graph<T>& g, Var x, const BoundAdapter& p, const AdapterSpec& spec) {
  const T s = static_cast<T>(spec.scale);
  switch (spec.kind) {
    case AdapterKind::krona:
    case AdapterKind::krona_b:
    case AdapterKind::krona_b_res:
    case AdapterKind::krona_b_sigres: {
      Var y = g.scale(g.kron_linear(x, p.a, p.b, {p.bias_mid, spec.nonlinearity}), s);
      if (p.bias_out.valid()) y = g.add(y, p.bias_out);
      if (spec.kind == AdapterKind::krona_b_res) y = g.add(y, g.scale(x, p.res_scale));
      if (spec.kind == AdapterKind::krona_b_sigres)
        y = g.add(y, g.scale(x, g.sigmoid(p.res_scale)));
      return y;
    }
    case AdapterKind::lora:
      return g.scale(g.matmul(g.matmul(x, p.a), p.b), s);
    case AdapterKind::pa:
      return g.scale(g.matmul(g.activation(g.matmul(x, p.a), spec.nonlinearity), p.b), s);
    case AdapterKind::seq_adapter:
      return g.matmul(g.activation(g.matmul(x, p.a), spec.nonlinearity), p.b);
    case AdapterKind::bitfit:
    case AdapterKind::ft:
      break;
  }
  throw SpecError(std::string(kind_name(spec.kind)) + " has no adapter module");
}

// ---- standalone matrix-level forms ------------------------------------------

namespace detail {

template <class T>
Matrix<T> parallel_weight_forward(const Matrix<T>& x, const Matrix<T>& w,
                                  const AdapterState<T>& st, const AdapterSpec& spec) {
  Graph<T> g;
  const Var xv = g.constant(x);
  const Var base = g.matmul(xv, g.constant(w));
  return g.value(g.add(base, adapter_delta(g, xv, bind_adapter(g, st, false), spec)));
}

template <class T>
Matrix<T> block_parallel_forward(const Matrix<T>& x, const Matrix<T>& host_out,
                                 const AdapterState<T>& st, const AdapterSpec& spec) {
  Graph<T> g;
  const Var xv = g.constant(x);
  return g.value(
      g.add(g.constant(host_out), adapter_delta(g, xv, bind_adapter(g, st, false), spec)));
}

inline AdapterSpec with_scale(AdapterKind kind, double s) {
  AdapterSpec spec;
  spec.kind = kind;
  spec.scale = s;
  return spec;
}

}  // namespace detail

// Y = X W + s X (A_k kron B_k)
template <class T>
Matrix<T> krona_forward(const Matrix<T>& x, const Matrix<T>& w, const AdapterState<T>& st, double s) {
  return detail::parallel_weight_forward(x, w, st, detail::with_scale(AdapterKind::krona, s));
}

// Y = X W + s (X A) B
template <class T>
Matrix<T> lora_forward(const Matrix<T>& x, const Matrix<T>& w, const AdapterState<T>& st, double s) {
  return detail::parallel_weight_forward(x, w, st, detail::with_scale(AdapterKind::lora, s));
}

// Y = FFN(X) + s X (A_k kron B_k) [+ biases]. `act` sits between the two
// factor products.
template <class T>
Matrix<T> krona_b_forward(const Matrix<T>& x, const Matrix<T>& ffn_out, const AdapterState<T>& st,
                          double s, Activation act = Activation::none) {
  AdapterSpec spec = detail::with_scale(AdapterKind::krona_b, s);
  spec.nonlinearity = act;
  return detail::block_parallel_forward(x, ffn_out, st, spec);
}

// Y = FFN(X) + s X (A_k kron B_k) + s_res X   (sigmoid(s_res) for the sigres kind)
template <class T>
Matrix<T> krona_b_res_forward(const Matrix<T>& x, const Matrix<T>& ffn_out,
                              const AdapterState<T>& st, double s) {
  if (x.cols() != ffn_out.cols())
    throw DimensionError("residual branch requires d_in == d_out");
  const AdapterKind kind =
      st.kind == AdapterKind::krona_b_sigres ? AdapterKind::krona_b_sigres : AdapterKind::krona_b_res;
  return detail::block_parallel_forward(x, ffn_out, st, detail::with_scale(kind, s));
}

// Y = FFN(X) + s act(X A) B
template <class T>
Matrix<T> pa_forward(const Matrix<T>& x, const Matrix<T>& ffn_out, const AdapterState<T>& st,
                     double s, Activation act = Activation::relu) {
  AdapterSpec spec = detail::with_scale(AdapterKind::pa, s);
  spec.nonlinearity = act;
  return detail::block_parallel_forward(x, ffn_out, st, spec);
}

// Y = X + act(X A) B
template <class T>
Matrix<T> seq_adapter_forward(const Matrix<T>& x, const AdapterState<T>& st,
                              Activation act = Activation::relu) {
  AdapterSpec spec = detail::with_scale(AdapterKind::seq_adapter, 1.0);
  spec.nonlinearity = act;
  return detail::block_parallel_forward(x, x, st, spec);
}

/// W + s (A_k kron B_k) for krona, W + s A B for lora.
template <class T>
Matrix<T> merge(const Matrix<T>& w, const AdapterState<T>& st, const AdapterSpec& spec) {
  if (!is_mergeable(spec))
    throw MergeUnsupported(std::string(kind_name(spec.kind)) +
                           " cannot be folded into a weight matrix");
  const Matrix<T> delta = spec.kind == AdapterKind::krona ? kron(st.a, st.b) : matmul(st.a, st.b);
  if (!delta.same_shape(w))
    throw DimensionError("merge: update " + delta.shape() + " does not match weight " + w.shape());
  return w + static_cast<T>(spec.scale) * delta;
}

// Multiplies per input row spent in one adapter branch (biases and
// elementwise work excluded).
inline std::uint64_t branch_mults(const AdapterSpec& spec, std::size_t d_h) {
  if (is_kronecker(spec.kind)) return spec.shape.mults().vec_trick;
  if (is_low_rank(spec.kind)) return 2ull * d_h * spec.rank;
  return 0;
}

}  // namespace krona
