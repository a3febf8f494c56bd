#include <gtest/gtest.h>

#include <cmath>

#include "krona/digest.hpp"
#include "krona/rank.hpp"
#include "krona/train.hpp"
#include "support.hpp"

using namespace krona;
using namespace krona::testkit;

namespace {

TransformerConfig tiny() {
  TransformerConfig c;
  c.vocab_size = 8;
  c.max_seq_len = 6;
  c.d_h = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_hidden = 32;
  c.seed = 2;
  return c;
}

TaskSpec tiny_task(TaskKind k = TaskKind::seq_classify) {
  TaskSpec t;
  t.kind = k;
  t.vocab = 8;
  t.seq_len = 6;
  t.n_train = 128;
  t.n_eval = 64;
  t.seed = 9;
  return t;
}

ClassificationData classification(const TaskSpec& t) { return std::get<ClassificationData>(gen_task(t)); }

std::vector<Matrix<double>> snapshot(const EncoderModel<double>& m) {
  std::vector<Matrix<double>> out;
  for (const auto& p : m.params) out.push_back(p.value);
  return out;
}

}  // namespace

// ---- Adam --------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Matrix<double> p(2, 3, 0.7);
  const Matrix<double> before = p;
  AdamState<double> st;
  Matrix<double>* ps[] = {&p};
  const Matrix<double> gs[] = {Matrix<double>(2, 3)};
  for (int i = 0; i < 5; ++i) adam_step<double>(ps, gs, st, TrainConfig{});
  EXPECT_EQ(p, before);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  for (double g : {2.5, -0.3, 1e-3}) {
    Matrix<double> p(1, 1, 1.0);
    AdamState<double> st;
    Matrix<double>* ps[] = {&p};
    const Matrix<double> gs[] = {Matrix<double>(1, 1, g)};
    adam_step<double>(ps, gs, st, cfg);
    // m_hat = g, v_hat = g^2 after bias correction.
    const double expected = 1.0 - cfg.learning_rate * g / (std::abs(g) + cfg.eps);
    EXPECT_NEAR(p(0, 0), expected, 1e-15);
    EXPECT_NEAR(p(0, 0), 1.0 - 0.01 * (g > 0 ? 1.0 : -1.0), 1e-7);
  }
}

TEST(Adam, SecondStepMatchesHandComputedMoments) {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  Matrix<double> p(1, 1, 0.0);
  AdamState<double> st;
  Matrix<double>* ps[] = {&p};
  const double g1 = 1.0, g2 = -3.0;
  adam_step<double>(ps, std::vector<Matrix<double>>{Matrix<double>(1, 1, g1)}, st, cfg);
  adam_step<double>(ps, std::vector<Matrix<double>>{Matrix<double>(1, 1, g2)}, st, cfg);
  const double m1 = 0.1 * g1, v1 = 0.001 * g1 * g1;
  const double step1 = 0.1 * (m1 / 0.1) / (std::sqrt(v1 / 0.001) + 1e-8);
  const double m2 = 0.9 * m1 + 0.1 * g2, v2 = 0.999 * v1 + 0.001 * g2 * g2;
  const double c1 = 1 - 0.9 * 0.9, c2 = 1 - 0.999 * 0.999;
  const double step2 = 0.1 * (m2 / c1) / (std::sqrt(v2 / c2) + 1e-8);
  EXPECT_NEAR(p(0, 0), -step1 - step2, 1e-14);
  EXPECT_EQ(st.step, 2u);
}

TEST(Adam, IdenticalRunsAreBitIdentical) {
  std::mt19937_64 rng(3);
  const Matrix<double> g = random_matrix(4, 4, rng);
  auto run = [&] {
    Matrix<double> p(4, 4, 0.5);
    AdamState<double> st;
    Matrix<double>* ps[] = {&p};
    for (int i = 0; i < 10; ++i) adam_step<double>(ps, std::vector<Matrix<double>>{g}, st, TrainConfig{});
    return std::pair(p, st);
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ShapeMismatchThrows) {
  Matrix<double> p(2, 2);
  AdamState<double> st;
  Matrix<double>* ps[] = {&p};
  EXPECT_THROW(adam_step<double>(ps, std::vector<Matrix<double>>{Matrix<double>(2, 3)}, st, TrainConfig{}),
               DimensionError);
  EXPECT_THROW(adam_step<double>(ps, std::vector<Matrix<double>>{}, st, TrainConfig{}), DimensionError);
}

TEST(Adam, GradientClippingBoundsTheMomentInput) {
  TrainConfig cfg;
  cfg.grad_clip = 1.0;
  Matrix<double> p(1, 2);
  AdamState<double> st;
  Matrix<double>* ps[] = {&p};
  Matrix<double> g(1, 2);
  g(0, 0) = 30.0;
  g(0, 1) = 40.0;
  adam_step<double>(ps, std::vector<Matrix<double>>{g}, st, cfg);
  EXPECT_NEAR(st.m[0](0, 0), 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(st.m[0](0, 1), 0.1 * 0.8, 1e-15);
}

// ---- tasks -------------------------------------------------------------------

TEST(Tasks, FixedSeedGivesIdenticalData) {
  const auto a = classification(tiny_task()), b = classification(tiny_task());
  EXPECT_EQ(a.train_x, b.train_x);
  EXPECT_EQ(a.eval_y, b.eval_y);
  TaskSpec other = tiny_task();
  other.seed = 10;
  EXPECT_NE(classification(other).train_x, a.train_x);
}

TEST(Tasks, TrainAndEvalComeFromDifferentStreams) {
  TaskSpec t = tiny_task();
  t.n_eval = t.n_train;
  const auto d = classification(t);
  EXPECT_NE(d.train_x, d.eval_x);
}

TEST(Tasks, LabelsCountOddTokens) {
  TaskSpec t = tiny_task();
  t.n_classes = 3;
  const auto d = classification(t);
  for (std::size_t i = 0; i < d.train_x.size(); ++i) {
    int odd = 0;
    for (int tok : d.train_x[i]) odd += tok % 2;
    // 7 buckets of odd counts 0..6 spread over 3 classes.
    const int want = std::min(2, odd * 3 / 7);
    ASSERT_EQ(d.train_y[i], want);
  }
}

TEST(Tasks, LabelShiftDefaultsToRotationAndIdentityIsBaseTask) {
  const auto base = classification(tiny_task());
  const auto shifted = classification(tiny_task(TaskKind::label_shift));
  EXPECT_EQ(shifted.train_x, base.train_x);
  for (std::size_t i = 0; i < base.train_y.size(); ++i) EXPECT_EQ(shifted.train_y[i], (base.train_y[i] + 1) % 2);
  TaskSpec ident = tiny_task(TaskKind::label_shift);
  ident.permutation = {0, 1};
  EXPECT_EQ(classification(ident).train_y, base.train_y);
  ident.permutation = {1, 1};
  EXPECT_THROW(gen_task(ident), SpecError);
}

TEST(Tasks, ProbeWithoutDeltaTargetsTheBaseWeight) {
  TaskSpec t;
  t.kind = TaskKind::fullrank_probe;
  t.delta_scale = 0.0;
  t.n_train = 20;
  const auto d = std::get<ProbeData>(gen_task(t));
  EXPECT_LE(max_rel_diff(d.train_y, dense_rowmul(d.train_x, d.w)), 1e-13);
}

TEST(Tasks, ProbeDeltaIsAFullRankPermutation) {
  TaskSpec t;
  t.kind = TaskKind::fullrank_probe;
  const auto d = std::get<ProbeData>(gen_task(t));
  ASSERT_EQ(d.delta.rows(), 16u);
  for (std::size_t i = 0; i < 16; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      row += d.delta(i, j);
      col += d.delta(j, i);
      EXPECT_TRUE(d.delta(i, j) == 0.0 || d.delta(i, j) == 1.0);
    }
    EXPECT_EQ(row, 1.0);
    EXPECT_EQ(col, 1.0);
  }
  EXPECT_EQ(numeric_rank(d.delta, 1e-9), 16u);
  EXPECT_LE(max_rel_diff(d.train_y, dense_rowmul(d.train_x, d.w + d.delta)), 1e-12);
}

// ---- pretrain ----------------------------------------------------------------

TEST(Pretrain, ZeroLearningRateLeavesParametersUnchanged) {
  auto m = build_model<double>(tiny());
  const auto before = snapshot(m);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  const auto metrics = pretrain(m, classification(tiny_task()), cfg);
  EXPECT_EQ(snapshot(m), before);
  EXPECT_EQ(metrics.steps, 8u);
}

TEST(Pretrain, SingleStepFollowsFirstOrderPrediction) {
  auto m = build_model<double>(tiny());
  TaskSpec t = tiny_task();
  t.n_train = 1;
  const auto data = classification(t);

  Graph<double> g;
  std::set<std::string> all;
  for (const auto& p : m.params) all.insert(p.name);
  const auto b = bind_model(g, m, all);
  const Var loss = g.cross_entropy(forward_graph(g, m, b, data.train_x), data.train_y);
  const double before = g.value(loss)(0, 0);
  g.backward(loss);
  std::vector<Matrix<double>> grads;
  for (const auto& [name, v] : b.trainable) grads.push_back(g.grad(v));
  const auto old = snapshot(m);

  TrainConfig cfg;
  cfg.learning_rate = 1e-6;
  cfg.epochs = 1;
  cfg.batch_size = 1;
  pretrain(m, data, cfg);
  const double after = evaluate(m, data.train_x, data.train_y).loss;
  double predicted = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (std::size_t k = 0; k < grads[i].size(); ++k)
      predicted += grads[i].data()[k] * (m.params[i].value.data()[k] - old[i].data()[k]);
  EXPECT_LT(predicted, 0.0);
  EXPECT_LT(after, before);
  EXPECT_NEAR(after - before, predicted, 1e-3 * std::abs(predicted));
}

TEST(Pretrain, NonFiniteLossReportsTheStep) {
  auto m = build_model<double>(tiny());
  m.param("embed")(0, 0) = std::nan("");
  TrainConfig cfg;
  cfg.batch_size = 16;
  try {
    pretrain(m, classification(tiny_task()), cfg);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 0u);
  }
}

TEST(Pretrain, ToyModelLearnsTheTask) {
  auto m = build_model<double>(tiny());
  TaskSpec t = tiny_task();
  t.n_train = 512;
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 16;
  cfg.epochs = 6;
  cfg.early_stop_accuracy = 0.97;
  const auto metrics = pretrain(m, classification(t), cfg);
  EXPECT_GE(metrics.epochs.back().train_accuracy, 0.95);
  EXPECT_LT(metrics.epochs.back().train_loss, metrics.epochs.front().train_loss);
}

// ---- finetune ----------------------------------------------------------------

class Finetune : public ::testing::Test {
 protected:
  void SetUp() override {
    model = build_model<double>(tiny());
    TaskSpec t = tiny_task();
    t.n_train = 512;
    TrainConfig cfg;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 16;
    cfg.epochs = 4;
    pretrain(model, classification(t), cfg);
    t.kind = TaskKind::label_shift;
    data = classification(t);
    ft.learning_rate = 1e-2;
    ft.batch_size = 16;
    ft.epochs = 6;
  }
  EncoderModel<double> model;
  ClassificationData data;
  TrainConfig ft;
};

TEST_F(Finetune, ZeroEpochsReportsTheFrozenModel) {
  const EvalResult frozen = evaluate(model, data.eval_x, data.eval_y);
  ft.epochs = 0;
  attach_adapters(model, default_spec(AdapterKind::krona, 16));
  const auto r = finetune(model, data, ft);
  ASSERT_EQ(r.metrics.epochs.size(), 1u);
  EXPECT_EQ(r.metrics.epochs[0].epoch, 0u);
  EXPECT_EQ(r.metrics.epochs[0].eval_metric, frozen.accuracy);
  EXPECT_EQ(r.metrics.epochs[0].eval_loss, frozen.loss);
  EXPECT_EQ(r.best_epoch, 0u);
}

TEST_F(Finetune, KronaKeepsBackboneAndRestoresBestEpoch) {
  const std::string digest = backbone_digest(model);
  const auto r = finetune(model, default_spec(AdapterKind::krona, 16), data, ft);
  EXPECT_EQ(backbone_digest(model), digest);
  EXPECT_EQ(r.frozen_digest, digest);
  double best = -1.0;
  for (const auto& e : r.metrics.epochs) best = std::max(best, e.eval_metric);
  EXPECT_EQ(r.best_metric, best);
  EXPECT_GT(r.best_metric, r.metrics.epochs[0].eval_metric);
  EXPECT_NEAR(evaluate(model, data.eval_x, data.eval_y).accuracy, r.best_metric, 1e-12);
}

TEST_F(Finetune, BitfitUpdatesOnlyBiases) {
  const auto before = snapshot(model);
  const auto r = finetune(model, default_spec(AdapterKind::bitfit, 16), data, ft);
  bool some_bias_moved = false;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (model.params[i].is_bias)
      some_bias_moved |= !(model.params[i].value == before[i]);
    else
      EXPECT_EQ(model.params[i].value, before[i]) << model.params[i].name;
  }
  EXPECT_TRUE(some_bias_moved || r.best_epoch == 0);
  EXPECT_TRUE(model.adapters.empty());
}

TEST_F(Finetune, TamperingWithTheFrozenBackboneIsDetected) {
  attach_adapters(model, default_spec(AdapterKind::krona, 16));
  auto tamper = [&](const EpochRecord& rec) {
    if (rec.epoch == 1) model.param("head.weight")(0, 0) += 1e-9;
  };
  EXPECT_THROW(finetune(model, data, ft, tamper), InvariantViolation);
}

TEST_F(Finetune, EarlyStopOnEvalAccuracy) {
  ft.early_stop_accuracy = 1e-9;  // any accuracy at all
  ft.epochs = 5;
  const auto r = finetune(model, default_spec(AdapterKind::krona, 16), data, ft);
  EXPECT_EQ(r.metrics.epochs.size(), 2u);
}

TEST_F(Finetune, RequiresAnAttachedSpec) {
  EXPECT_THROW(finetune(model, data, ft), SpecError);
}

// ---- probe -------------------------------------------------------------------

TEST(Probe, ZeroInitStartsAtTheDeltaError) {
  TaskSpec t;
  t.kind = TaskKind::fullrank_probe;
  const auto d = std::get<ProbeData>(gen_task(t));
  AdapterSpec s = default_spec(AdapterKind::krona, 16);
  const auto st = init_adapter<double>(s, 16);
  // Adapter output is zero, so the residual is x * delta.
  const Matrix<double> resid = dense_rowmul(d.train_x, d.delta);
  double want = 0.0;
  for (double v : resid.data()) want += v * v;
  want /= static_cast<double>(resid.size());
  EXPECT_NEAR(probe_mse(d, st, s, d.train_x, d.train_y), want, 1e-12 * want);
}

TEST(Probe, KronaFitsThePermutationDelta) {
  TaskSpec t;
  t.kind = TaskKind::fullrank_probe;
  const auto d = std::get<ProbeData>(gen_task(t));
  AdapterSpec s = default_spec(AdapterKind::krona, 16);
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 256;
  cfg.epochs = 600;
  std::size_t calls = 0;
  const auto r = train_probe(d, s, cfg, [&](const EpochRecord&) { ++calls; });
  EXPECT_EQ(calls, 600u);
  EXPECT_LT(r.history.back(), 1e-3 * r.history.front());
  EXPECT_LT(r.eval_mse, 1e-3);
}
