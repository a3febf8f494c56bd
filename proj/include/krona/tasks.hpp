#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "krona/adapters.hpp"
#include "krona/kron.hpp"
#include "krona/matrix.hpp"
#include "krona/model.hpp"

namespace krona {

enum class TaskKind : std::uint8_t { seq_classify, label_shift, fullrank_probe };

inline std::string_view task_name(TaskKind k) {
  switch (k) {
    case TaskKind::seq_classify: return "seq_classify";
    case TaskKind::label_shift: return "label_shift";
    case TaskKind::fullrank_probe: return "fullrank_probe";
  }
  return "?";
}

inline TaskKind parse_task(std::string_view s) {
  for (auto k : {TaskKind::seq_classify, TaskKind::label_shift, TaskKind::fullrank_probe})
    if (task_name(k) == s) return k;
  throw SpecError("unknown task kind '" + std::string(s) + "'");
}

struct TaskSpec {
  TaskKind kind = TaskKind::seq_classify;
  std::size_t vocab = 32;
  std::size_t seq_len = 16;
  std::size_t n_classes = 2;
  std::size_t n_train = 512;
  std::size_t n_eval = 256;
  std::uint64_t seed = 0;
  // label_shift: label y becomes permutation[y]; empty means y -> (y+1) mod n.
  std::vector<int> permutation;
  // fullrank_probe: feature width and the (square) Kronecker split of the
  // permutation update; delta_scale = 0 removes the update.
  std::size_t probe_dim = 16;
  std::size_t probe_factor = 4;
  double delta_scale = 1.0;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct ClassificationData {
  TokenBatch train_x, eval_x;
  std::vector<int> train_y, eval_y;
  std::vector<int> permutation;  // identity for seq_classify
};

// Regression pairs y = x (W + dW) with dW a permutation matrix.
struct ProbeData {
  Matrix<double> w, delta;
  Matrix<double> train_x, train_y, eval_x, eval_y;
};

using Dataset = std::variant<ClassificationData, ProbeData>;

// Label = bucket of the number of odd tokens, so the class is a function of
// the token multiset only.
inline int majority_parity_label(const std::vector<int>& seq, std::size_t n_classes) {
  std::size_t odd = 0;
  for (int t : seq) odd += static_cast<std::size_t>(t) & 1u;
  const std::size_t b = odd * n_classes / (seq.size() + 1);
  return static_cast<int>(std::min(b, n_classes - 1));
}

namespace detail {

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{seed, stream, std::uint64_t{0x7461736b}};
  return std::mt19937_64(seq);
}

inline void gen_sequences(std::size_t n, const TaskSpec& spec, std::uint64_t stream,
                          TokenBatch& xs, std::vector<int>& ys) {
  auto rng = stream_rng(spec.seed, stream);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(spec.vocab) - 1);
  xs.assign(n, std::vector<int>(spec.seq_len));
  ys.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int& t : xs[i]) t = tok(rng);
    ys[i] = majority_parity_label(xs[i], spec.n_classes);
  }
}

inline Matrix<double> random_permutation_matrix(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix<double> p(n, n);
  for (std::size_t i = 0; i < n; ++i) p(i, perm[i]) = 1.0;
  return p;
}

}  // namespace detail

inline std::vector<int> resolve_permutation(const TaskSpec& spec) {
  const int n = static_cast<int>(spec.n_classes);
  std::vector<int> perm(spec.n_classes);
  if (spec.kind != TaskKind::label_shift) {
    std::iota(perm.begin(), perm.end(), 0);
    return perm;
  }
  if (spec.permutation.empty()) {
    for (int y = 0; y < n; ++y) perm[y] = (y + 1) % n;
    return perm;
  }
  std::vector<int> sorted = spec.permutation;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> ident(spec.n_classes);
  std::iota(ident.begin(), ident.end(), 0);
  if (sorted != ident) throw SpecError("label_shift: permutation must be a permutation of 0..n_classes-1");
  return spec.permutation;
}

inline void validate(const TaskSpec& spec) {
  if (spec.n_train == 0 || spec.n_eval == 0) throw SpecError("task: n_train and n_eval must be positive");
  if (spec.kind == TaskKind::fullrank_probe) {
    if (spec.probe_factor == 0 || spec.probe_dim % spec.probe_factor != 0)
      throw SpecError("fullrank_probe: probe_factor must divide probe_dim");
    return;
  }
  if (spec.vocab < 2 || spec.seq_len == 0 || spec.n_classes < 2)
    throw SpecError("task: need vocab >= 2, seq_len >= 1, n_classes >= 2");
}

/// Deterministic in spec.seed. Train and eval draw from different seed
/// streams; label_shift reuses the seq_classify inputs of the same seed.
inline Dataset gen_task(const TaskSpec& spec) {
  validate(spec);
  if (spec.kind == TaskKind::fullrank_probe) {
    ProbeData d;
    const std::size_t n = spec.probe_dim, f = spec.probe_factor;
    auto rng = detail::stream_rng(spec.seed, 0);
    d.w = detail::normal<double>(n, n, 1.0 / std::sqrt(static_cast<double>(n)), rng);
    // A Kronecker product of two permutations is itself a permutation matrix.
    d.delta = kron(detail::random_permutation_matrix(f, rng),
                   detail::random_permutation_matrix(n / f, rng));
    d.delta = spec.delta_scale * d.delta;
    const Matrix<double> target_w = d.w + d.delta;
    auto tr = detail::stream_rng(spec.seed, 1);
    auto ev = detail::stream_rng(spec.seed, 2);
    d.train_x = detail::normal<double>(spec.n_train, n, 1.0, tr);
    d.eval_x = detail::normal<double>(spec.n_eval, n, 1.0, ev);
    d.train_y = matmul(d.train_x, target_w);
    d.eval_y = matmul(d.eval_x, target_w);
    return d;
  }
  ClassificationData d;
  detail::gen_sequences(spec.n_train, spec, 1, d.train_x, d.train_y);
  detail::gen_sequences(spec.n_eval, spec, 2, d.eval_x, d.eval_y);
  d.permutation = resolve_permutation(spec);
  for (int& y : d.train_y) y = d.permutation[static_cast<std::size_t>(y)];
  for (int& y : d.eval_y) y = d.permutation[static_cast<std::size_t>(y)];
  return d;
}

}  // namespace krona
