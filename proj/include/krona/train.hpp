#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "krona/digest.hpp"
#include "krona/model.hpp"
#include "krona/optim.hpp"
#include "krona/tasks.hpp"

namespace krona {

struct EpochRecord {
  std::size_t epoch = 0;       // 0 = before any update
  double train_loss = 0.0;     // mean over the epoch's minibatches
  double train_accuracy = 0.0; // running accuracy over the epoch
  double eval_loss = 0.0;
  double eval_metric = 0.0;    // accuracy, or MSE for the regression probe

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainMetrics {
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

namespace detail {

inline void require_train_config(const TrainConfig& cfg) {
  if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate))
    throw SpecError("learning_rate must be finite and non-negative");
  if (cfg.batch_size == 0) throw SpecError("batch_size must be positive");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
    throw SpecError("Adam betas must lie in [0, 1)");
  if (!(cfg.eps > 0.0)) throw SpecError("Adam eps must be positive");
}

template <class T>
std::size_t count_correct(const Matrix<T>& logits, const std::vector<int>& labels) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    ok += best == labels[i];
  }
  return ok;
}

// Trainable tensors of the model, in binding order.
template <class T>
std::vector<Matrix<T>*> resolve(EncoderModel<T>& model,
                                const std::vector<std::pair<std::string, Var>>& bound) {
  std::vector<Matrix<T>*> out;
  auto all = model.named_tensors();
  for (const auto& [name, v] : bound) {
    auto it = std::find_if(all.begin(), all.end(), [&](const auto& p) { return p.first == name; });
    out.push_back(it->second);
  }
  return out;
}

template <class T>
struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

// One pass over the shuffled training set with Adam on `trainable`.
template <class T>
EpochStats<T> run_epoch(EncoderModel<T>& model, const ClassificationData& data,
                        const std::set<std::string>& trainable, const TrainConfig& cfg,
                        std::size_t epoch, AdamState<T>& adam, std::size_t& step) {
  std::vector<std::size_t> order(data.train_x.size());
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x6570}};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);

  double loss_sum = 0.0;
  std::size_t batches = 0, correct = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    TokenBatch xs;
    std::vector<int> ys;
    for (std::size_t k = start; k < end; ++k) {
      xs.push_back(data.train_x[order[k]]);
      ys.push_back(data.train_y[order[k]]);
    }
    Graph<T> g;
    const ModelBinding b = bind_model(g, model, trainable);
    const Var logits = forward_graph(g, model, b, xs);
    const Var loss = g.cross_entropy(logits, ys);
    const double lv = static_cast<double>(g.value(loss)(0, 0));
    if (!std::isfinite(lv)) throw DivergenceError("non-finite training loss", step);
    g.backward(loss);
    std::vector<Matrix<T>> grads;
    grads.reserve(b.trainable.size());
    for (const auto& [name, v] : b.trainable) grads.push_back(g.grad(v));
    const auto targets = resolve(model, b.trainable);
    adam_step<T>(targets, grads, adam, cfg);
    for (const Matrix<T>* p : targets)
      for (T v : p->data())
        if (!std::isfinite(static_cast<double>(v)))
          throw DivergenceError("non-finite parameter after update", step);
    ++step;
    loss_sum += lv;
    ++batches;
    correct += count_correct(g.value(logits), ys);
  }
  return {loss_sum / static_cast<double>(batches),
          static_cast<double>(correct) / static_cast<double>(order.size())};
}

}  // namespace detail

/// Mean cross-entropy and accuracy of the model on (xs, ys).
template <class T>
EvalResult evaluate(const EncoderModel<T>& model, const TokenBatch& xs, const std::vector<int>& ys,
                    std::size_t batch_size = 64) {
  if (xs.empty() || xs.size() != ys.size()) throw DimensionError("evaluate: inputs and labels differ");
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < xs.size(); start += batch_size) {
    const std::size_t end = std::min(xs.size(), start + batch_size);
    const TokenBatch bx(xs.begin() + static_cast<std::ptrdiff_t>(start),
                        xs.begin() + static_cast<std::ptrdiff_t>(end));
    const std::vector<int> by(ys.begin() + static_cast<std::ptrdiff_t>(start),
                              ys.begin() + static_cast<std::ptrdiff_t>(end));
    Graph<T> g;
    const ModelBinding b = bind_model(g, model);
    const Var logits = forward_graph(g, model, b, bx);
    loss += static_cast<double>(g.value(g.cross_entropy(logits, by))(0, 0)) *
            static_cast<double>(end - start);
    correct += detail::count_correct(g.value(logits), by);
  }
  const double n = static_cast<double>(xs.size());
  return {loss / n, static_cast<double>(correct) / n};
}

/// Full-parameter training on the task. Stops after cfg.epochs, or earlier
/// once an epoch's running train accuracy reaches cfg.early_stop_accuracy.
template <class T>
TrainMetrics pretrain(EncoderModel<T>& model, const ClassificationData& data, const TrainConfig& cfg) {
  detail::require_train_config(cfg);
  std::set<std::string> all;
  for (const auto& p : model.params) all.insert(p.name);
  TrainMetrics m;
  AdamState<T> adam;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const auto st = detail::run_epoch(model, data, all, cfg, e, adam, m.steps);
    const EvalResult ev = evaluate(model, data.eval_x, data.eval_y);
    m.epochs.push_back({e, st.loss, st.accuracy, ev.loss, ev.accuracy});
    if (cfg.early_stop_accuracy > 0.0 && st.accuracy >= cfg.early_stop_accuracy) break;
  }
  return m;
}

template <class T>
struct FinetuneResult {
  TrainMetrics metrics;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  std::vector<std::pair<std::string, Matrix<T>>> best_tensors;  // trainable set at best epoch
  std::string frozen_digest;  // SHA-256 of every non-trainable backbone tensor
};

/// Trains only select_trainable(model) on the task. Epoch 0 records the frozen
/// model. The frozen part of the backbone is hashed before training and
/// re-checked after every epoch. On return the model holds the best-epoch
/// tensors (highest eval accuracy, earliest on ties).
template <class T>
FinetuneResult<T> finetune(EncoderModel<T>& model, const ClassificationData& data,
                           const TrainConfig& cfg,
                           const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  detail::require_train_config(cfg);
  if (!model.spec) throw SpecError("finetune: attach adapters (or a bitfit/ft spec) first");
  const std::set<std::string> trainable = select_trainable(model);
  FinetuneResult<T> r;
  r.frozen_digest = backbone_digest(model, trainable);

  const auto snapshot = [&] {
    std::vector<std::pair<std::string, Matrix<T>>> out;
    for (auto& [name, m] : model.named_tensors())
      if (trainable.count(name)) out.emplace_back(name, *m);
    return out;
  };
  const auto record = [&](EpochRecord rec) {
    r.metrics.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (r.metrics.epochs.size() == 1 || rec.eval_metric > r.best_metric) {
      r.best_metric = rec.eval_metric;
      r.best_epoch = rec.epoch;
      r.best_tensors = snapshot();
    }
  };

  const EvalResult ev0 = evaluate(model, data.eval_x, data.eval_y);
  const EvalResult tr0 = evaluate(model, data.train_x, data.train_y);
  record({0, tr0.loss, tr0.accuracy, ev0.loss, ev0.accuracy});

  AdamState<T> adam;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const auto st = detail::run_epoch(model, data, trainable, cfg, e, adam, r.metrics.steps);
    if (backbone_digest(model, trainable) != r.frozen_digest)
      throw InvariantViolation("frozen backbone parameters changed during epoch " + std::to_string(e));
    const EvalResult ev = evaluate(model, data.eval_x, data.eval_y);
    record({e, st.loss, st.accuracy, ev.loss, ev.accuracy});
    if (cfg.early_stop_accuracy > 0.0 && ev.accuracy >= cfg.early_stop_accuracy) break;
  }
  for (const auto& [name, m] : r.best_tensors) model.tensor(name) = m;
  return r;
}

template <class T>
FinetuneResult<T> finetune(EncoderModel<T>& model, const AdapterSpec& spec,
                           const ClassificationData& data, const TrainConfig& cfg) {
  attach_adapters(model, spec);
  return finetune(model, data, cfg);
}

// ---- regression probe ----------------------------------------------------------

struct ProbeResult {
  AdapterState<double> state;
  double train_mse = 0.0;
  double eval_mse = 0.0;
  std::vector<double> history;  // train MSE per epoch
};

inline double probe_mse(const ProbeData& d, const AdapterState<double>& st, const AdapterSpec& spec,
                        const Matrix<double>& x, const Matrix<double>& y) {
  Graph<double> g;
  const Var xv = g.constant(x);
  const Var pred = g.add(g.matmul(xv, g.constant(d.w)), adapter_delta(g, xv, bind_adapter(g, st, false), spec));
  return g.value(g.mse(pred, g.constant(y)))(0, 0);
}

/// Fits one adapter on top of the frozen probe weight W by minimizing
/// mean((x W + delta(x) - y)^2) with Adam. With `on_epoch` set, the eval MSE
/// is computed after every epoch and reported as eval_loss and eval_metric.
inline ProbeResult train_probe(const ProbeData& d, const AdapterSpec& spec, const TrainConfig& cfg,
                               const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  detail::require_train_config(cfg);
  const std::size_t dim = d.w.rows();
  ProbeResult r;
  r.state = init_adapter<double>(spec, dim);
  AdamState<double> adam;
  const std::size_t n = d.train_x.rows();
  std::size_t step = 0;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      Matrix<double> xb(end - start, dim), yb(end - start, dim);
      for (std::size_t i = start; i < end; ++i) {
        std::copy(d.train_x.row(i).begin(), d.train_x.row(i).end(), xb.row(i - start).begin());
        std::copy(d.train_y.row(i).begin(), d.train_y.row(i).end(), yb.row(i - start).begin());
      }
      Graph<double> g;
      const Var xv = g.constant(xb);
      const BoundAdapter ba = bind_adapter(g, r.state, true);
      const Var pred = g.add(g.matmul(xv, g.constant(d.w)), adapter_delta(g, xv, ba, spec));
      const Var loss = g.mse(pred, g.constant(yb));
      const double lv = g.value(loss)(0, 0);
      if (!std::isfinite(lv)) throw DivergenceError("non-finite probe loss", step);
      g.backward(loss);
      std::vector<Matrix<double>*> ps;
      std::vector<Matrix<double>> gs;
      const Var vars[] = {ba.a, ba.b, ba.bias_out, ba.bias_mid, ba.res_scale};
      Matrix<double>* mats[] = {&r.state.a, &r.state.b, &r.state.bias_out, &r.state.bias_mid,
                                &r.state.res_scale};
      for (int k = 0; k < 5; ++k)
        if (vars[k].valid()) {
          ps.push_back(mats[k]);
          gs.push_back(g.grad(vars[k]));
        }
      adam_step<double>(ps, gs, adam, cfg);
      ++step;
      sum += lv;
      ++batches;
    }
    r.history.push_back(sum / static_cast<double>(batches));
    if (on_epoch) {
      const double ev = probe_mse(d, r.state, spec, d.eval_x, d.eval_y);
      on_epoch({e, r.history.back(), 0.0, ev, ev});
    }
  }
  r.train_mse = probe_mse(d, r.state, spec, d.train_x, d.train_y);
  r.eval_mse = probe_mse(d, r.state, spec, d.eval_x, d.eval_y);
  return r;
}

}  // namespace krona
