#include <gtest/gtest.h>

#include <cmath>

#include "krona/bench.hpp"

using namespace krona;

namespace {

TransformerConfig tiny() {
  TransformerConfig c;
  c.vocab_size = 8;
  c.max_seq_len = 10;
  c.d_h = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_hidden = 32;
  return c;
}

BenchProtocol quick() {
  BenchProtocol p;
  p.warmup_iters = 2;
  p.timed_iters = 3;
  p.repeats = 2;
  return p;
}

}  // namespace

TEST(BenchProtocol, DefaultsAndRecordedMetadata) {
  const BenchProtocol p;
  EXPECT_EQ(p.warmup_iters, 150u);
  EXPECT_EQ(p.timed_iters, 200u);
  EXPECT_EQ(p.repeats, 3u);
  EXPECT_EQ(p.batch_size, 1u);
  EXPECT_EQ(p.seq_len, 10u);
  const Json j = to_json(p);
  EXPECT_EQ(j.at("input_regenerated_per_repeat"), false);
  EXPECT_EQ(j.at("clock"), "thread_cpu");
  EXPECT_EQ(from_json<BenchProtocol>(j), p);
}

TEST(BenchProtocol, RejectsUnsupportedSettings) {
  BenchProtocol p;
  p.repeats = 0;
  EXPECT_THROW(p.validate(), SpecError);
  Json j = to_json(BenchProtocol{});
  j["input_regenerated_per_repeat"] = true;
  EXPECT_THROW(from_json<BenchProtocol>(j), ConfigError);
  j = to_json(BenchProtocol{});
  j["clock"] = "sundial";
  EXPECT_THROW(from_json<BenchProtocol>(j), ConfigError);
  j = to_json(BenchProtocol{});
  j["warmup"] = 3;
  EXPECT_THROW(from_json<BenchProtocol>(j), ConfigError);
}

TEST(BenchProtocol, DummyInputIsFixedBySeed) {
  const BenchProtocol p;
  const TokenBatch a = dummy_input(p, 8);
  EXPECT_EQ(a, dummy_input(p, 8));
  ASSERT_EQ(a.size(), 1u);
  ASSERT_EQ(a[0].size(), 10u);
  for (int t : a[0]) {
    EXPECT_GE(t, 0);
    EXPECT_LT(t, 8);
  }
  BenchProtocol q = p;
  q.input_seed = 1;
  EXPECT_NE(dummy_input(q, 8), a);
}

TEST(MeasureLatency, OneRecordPerRepeat) {
  const auto m = build_model<double>(tiny());
  const BenchReport r = measure_latency(m, quick(), "ft");
  ASSERT_EQ(r.repeat_mean_ns.size(), 2u);
  EXPECT_GT(r.mean_ns, 0.0);
  EXPECT_NEAR(r.mean_ns, (r.repeat_mean_ns[0] + r.repeat_mean_ns[1]) / 2, 1e-6 * r.mean_ns);
  EXPECT_EQ(r.protocol, quick());
  EXPECT_EQ(r.branch_naive, 0u);
}

TEST(MeasureLatency, SingleRepeatHasZeroSpread) {
  BenchProtocol p = quick();
  p.repeats = 1;
  p.clock = BenchClock::steady;
  const auto m = build_model<double>(tiny());
  const BenchReport r = measure_latency(m, p, "ft");
  EXPECT_EQ(r.std_ns, 0.0);
  EXPECT_EQ(r.mean_ns, r.repeat_mean_ns[0]);
}

TEST(MeasureLatency, SummaryUsesPopulationSpread) {
  BenchReport r;
  r.repeat_mean_ns = {1.0, 2.0, 3.0};
  detail::summarize(r);
  EXPECT_DOUBLE_EQ(r.mean_ns, 2.0);
  EXPECT_DOUBLE_EQ(r.std_ns, std::sqrt(2.0 / 3.0));
}

TEST(Normalize, BaselineIsExactlyOneHundred) {
  std::vector<BenchReport> rs(3);
  rs[0].method = "ft";
  rs[0].mean_ns = 300.0;
  rs[1].method = "krona_b";
  rs[1].mean_ns = 330.0;
  rs[2].method = "lora_merged";
  rs[2].mean_ns = 297.0;
  normalize(rs, "ft");
  EXPECT_EQ(rs[0].normalized, 100.0);
  EXPECT_DOUBLE_EQ(rs[1].normalized, 110.0);
  EXPECT_DOUBLE_EQ(rs[2].normalized, 99.0);
  EXPECT_THROW(normalize(rs, "bitfit"), SpecError);
}

TEST(FlopReport, PublishedShapeSavesSixteenfold) {
  const auto rows = flop_report(default_spec(AdapterKind::krona, 768), 768);
  ASSERT_EQ(rows.size(), 2u);  // q and v
  for (const auto& r : rows) {
    EXPECT_EQ(r.naive, 589824u);
    EXPECT_EQ(r.branch, 36864u);
    EXPECT_FALSE(r.no_saving);
  }
  const auto lora = flop_report(default_spec(AdapterKind::lora, 768), 768);
  EXPECT_EQ(lora[0].branch, 1536u);
}

TEST(FlopReport, FlagsShapesWithoutSaving) {
  AdapterSpec s = default_spec(AdapterKind::krona, 16);
  s.shape = {1, 1, 16, 16};  // vec trick: 16*16*1 + 16*1*1 = 272 > 256
  const auto rows = flop_report(s, 16);
  EXPECT_EQ(rows[0].branch, 272u);
  EXPECT_TRUE(rows[0].no_saving);
}

TEST(BenchVariants, MultiplyCountsOrderTheMethods) {
  const auto backbone = build_model<double>(tiny());
  const TokenBatch input = dummy_input(BenchProtocol{}, 8);
  auto mults = [&](const std::string& method) {
    return forward_counted(bench_variant(backbone, method), input).second;
  };
  const auto ft = mults("ft");
  for (const char* zero : {"bitfit", "krona_merged", "lora_merged"}) EXPECT_EQ(mults(zero), ft) << zero;
  for (const char* more : {"krona", "lora", "krona_b", "krona_b_res", "krona_b_sigres", "pa", "seq_adapter"})
    EXPECT_GT(mults(more), ft) << more;
  // Block-parallel KronA adds one vec-trick branch per token and layer.
  const auto vt = default_spec(AdapterKind::krona_b, 16).shape.mults().vec_trick;
  EXPECT_EQ(mults("krona_b") - ft, 10u * vt);
}

TEST(BenchVariants, UnknownMethodsAreRejected) {
  const auto backbone = build_model<double>(tiny());
  EXPECT_THROW(bench_variant(backbone, "krona_x"), SpecError);
  EXPECT_THROW(bench_variant(backbone, "pa_merged"), SpecError);
  auto attached = backbone;
  attach_adapters(attached, default_spec(AdapterKind::krona, 16));
  EXPECT_THROW(bench_variant(attached, "ft"), SpecError);
  EXPECT_EQ(bench_methods().size(), 11u);
}

TEST(MeasureSuite, InterleavesMethodsOnOneInput) {
  const auto backbone = build_model<double>(tiny());
  const auto kb = bench_variant(backbone, "krona_b");
  auto reports = measure_suite<double>({{"ft", &backbone}, {"krona_b", &kb}}, quick());
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[1].method, "krona_b");
  EXPECT_GT(reports[1].forward_mults, reports[0].forward_mults);
  EXPECT_GT(reports[1].branch_naive, 0u);
  normalize(reports, "ft");
  const std::string table = format_bench_table(reports);
  EXPECT_NE(table.find("krona_b"), std::string::npos);
  EXPECT_THROW(measure_suite<double>({}, quick()), SpecError);
}
