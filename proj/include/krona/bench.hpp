#pragma once

#include <algorithm>
#include <chrono>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <cmath>
#include <cstdint>
#include <ctime>
#include <random>
#include <string>
#include <vector>

#include "krona/model.hpp"
#include "krona/serialize.hpp"

namespace krona {

// steady: monotonic wall clock. thread_cpu: CPU time of the calling thread
// (also non-decreasing; excludes intervals where the thread is descheduled).
enum class BenchClock : std::uint8_t { steady, thread_cpu };

inline std::string_view clock_name(BenchClock c) {
  return c == BenchClock::steady ? "steady" : "thread_cpu";
}

inline BenchClock parse_clock(std::string_view s) {
  if (s == "steady") return BenchClock::steady;
  if (s == "thread_cpu") return BenchClock::thread_cpu;
  throw SpecError("unknown bench clock '" + std::string(s) + "' (steady, thread_cpu)");
}

struct BenchProtocol {
  std::size_t warmup_iters = 150;
  std::size_t timed_iters = 200;
  std::size_t repeats = 3;
  std::size_t batch_size = 1;
  std::size_t seq_len = 10;
  std::uint64_t input_seed = 0;
  BenchClock clock = BenchClock::thread_cpu;

  void validate() const {
    if (warmup_iters == 0 || timed_iters == 0 || repeats == 0 || batch_size == 0 || seq_len == 0)
      throw SpecError("bench protocol counts must all be positive");
  }

  friend bool operator==(const BenchProtocol&, const BenchProtocol&) = default;
};

struct BenchReport {
  std::string method;
  std::vector<double> repeat_mean_ns;  // one entry per repeat
  double mean_ns = 0.0;
  double std_ns = 0.0;                 // population std of the repeat means
  std::uint64_t forward_mults = 0;     // multiplies in one forward of the dummy batch
  std::uint64_t branch_naive = 0;      // per input row, per adapter site; 0 without a branch
  std::uint64_t branch_vec_trick = 0;
  double normalized = 0.0;             // percent of baseline, filled by normalize()
  BenchProtocol protocol;
};

inline Json to_json(const BenchProtocol& p) {
  return {{"warmup_iters", p.warmup_iters}, {"timed_iters", p.timed_iters},
          {"repeats", p.repeats},           {"batch_size", p.batch_size},
          {"seq_len", p.seq_len},           {"input_seed", p.input_seed},
          {"clock", clock_name(p.clock)},        {"input_regenerated_per_repeat", false},
          {"interleave", "per_forward"}};
}

inline void read_into(ObjectReader& r, BenchProtocol& p) {
  r.get("warmup_iters", p.warmup_iters);
  r.get("timed_iters", p.timed_iters);
  r.get("repeats", p.repeats);
  r.get("batch_size", p.batch_size);
  r.get("seq_len", p.seq_len);
  r.get("input_seed", p.input_seed);
  detail::get_enum(r, "clock", p.clock, clock_name, parse_clock);
  bool regen = false;
  r.get("input_regenerated_per_repeat", regen);
  if (regen) throw ConfigError(r.field("input_regenerated_per_repeat") + ": must be false");
  std::string interleave = "per_forward";
  r.get("interleave", interleave);
  if (interleave != "per_forward") throw ConfigError(r.field("interleave") + ": only per_forward is supported");
}

inline Json to_json(const BenchReport& r) {
  return {{"method", r.method},
          {"repeat_mean_ns", r.repeat_mean_ns},
          {"mean_ns", r.mean_ns},
          {"std_ns", r.std_ns},
          {"forward_mults", r.forward_mults},
          {"branch_naive_mults", r.branch_naive},
          {"branch_vec_trick_mults", r.branch_vec_trick},
          {"normalized", r.normalized},
          {"protocol", to_json(r.protocol)}};
}

/// The fixed dummy batch: generated once from the protocol seed.
inline TokenBatch dummy_input(const BenchProtocol& p, std::size_t vocab) {
  std::mt19937_64 rng(p.input_seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab) - 1);
  TokenBatch b(p.batch_size, std::vector<int>(p.seq_len));
  for (auto& s : b)
    for (int& t : s) t = tok(rng);
  return b;
}

namespace detail {

template <class T>
BenchReport prepare_report(const EncoderModel<T>& model, const BenchProtocol& protocol,
                           std::string method, const TokenBatch& input) {
  BenchReport r;
  r.method = std::move(method);
  r.protocol = protocol;
  r.forward_mults = forward_counted(model, input).second;
  if (model.spec && has_module(model.spec->kind) && !model.adapters.empty()) {
    const AdapterSpec& s = *model.spec;
    if (is_kronecker(s.kind)) {
      const MultCount mc = s.shape.mults();
      r.branch_naive = mc.naive;
      r.branch_vec_trick = mc.vec_trick;
    } else {
      r.branch_naive = r.branch_vec_trick = branch_mults(s, model.config.d_h);
    }
  }
  return r;
}

// Keep freed heap memory mapped so timed forwards do not pay for page faults
// after the allocator hands memory back to the OS.
inline void pin_heap() {
#if defined(__GLIBC__)
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
#endif
}

// Untimed forwards.
template <class T>
void warm_up(const EncoderModel<T>& model, const TokenBatch& input, std::size_t iters) {
  volatile double sink = 0.0;
  for (std::size_t i = 0; i < iters; ++i) sink = sink + static_cast<double>(forward(model, input)(0, 0));
}

inline double now_ns(BenchClock c) {
  if (c == BenchClock::steady)
    return std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now().time_since_epoch()).count();
  timespec ts{};
  if (clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts) != 0) throw Error("thread CPU clock unavailable");
  return static_cast<double>(ts.tv_sec) * 1e9 + static_cast<double>(ts.tv_nsec);
}

// Duration (ns) of one forward on the protocol clock.
template <class T>
double timed_forward(const EncoderModel<T>& model, const TokenBatch& input, BenchClock c) {
  const double t0 = now_ns(c);
  volatile double sink = static_cast<double>(forward(model, input)(0, 0));
  (void)sink;
  const double t1 = now_ns(c);
  if (t1 < t0) throw Error("benchmark clock went backwards");
  return t1 - t0;
}

inline void summarize(BenchReport& r) {
  double sum = 0.0;
  for (double v : r.repeat_mean_ns) sum += v;
  r.mean_ns = sum / static_cast<double>(r.repeat_mean_ns.size());
  double var = 0.0;
  for (double v : r.repeat_mean_ns) var += (v - r.mean_ns) * (v - r.mean_ns);
  r.std_ns = std::sqrt(var / static_cast<double>(r.repeat_mean_ns.size()));
}

}  // namespace detail

template <class T>
struct BenchEntry {
  std::string method;
  const EncoderModel<T>* model;
};

/// Benchmarks several models on one shared dummy input. Every model gets
/// warmup_iters untimed forwards. Each repeat then times timed_iters forwards
/// per model, interleaved forward by forward across the models, so drifts in
/// machine speed hit all methods alike. A single model reduces to the plain
/// warmup / timed / repeat loop.
template <class T>
std::vector<BenchReport> measure_suite(const std::vector<BenchEntry<T>>& entries,
                                       const BenchProtocol& protocol) {
  protocol.validate();
  if (entries.empty()) throw SpecError("measure_suite: no methods given");
  detail::pin_heap();
  const std::size_t vocab = entries.front().model->config.vocab_size;
  for (const auto& e : entries)
    if (e.model->config.vocab_size != vocab) throw SpecError("measure_suite: models disagree on vocab size");
  const TokenBatch input = dummy_input(protocol, vocab);
  std::vector<BenchReport> out;
  for (const auto& e : entries) out.push_back(detail::prepare_report(*e.model, protocol, e.method, input));
  for (const auto& e : entries) detail::warm_up(*e.model, input, protocol.warmup_iters);
  std::vector<double> total(entries.size());
  for (std::size_t rep = 0; rep < protocol.repeats; ++rep) {
    std::fill(total.begin(), total.end(), 0.0);
    for (std::size_t i = 0; i < protocol.timed_iters; ++i)
      for (std::size_t j = 0; j < entries.size(); ++j) {
        const std::size_t k = (i + j) % entries.size();  // rotate who goes first
        total[k] += detail::timed_forward(*entries[k].model, input, protocol.clock);
      }
    for (std::size_t k = 0; k < entries.size(); ++k)
      out[k].repeat_mean_ns.push_back(total[k] / static_cast<double>(protocol.timed_iters));
  }
  for (auto& r : out) detail::summarize(r);
  return out;
}

/// warmup_iters untimed forwards, then `repeats` blocks of timed_iters timed
/// forwards on the same input. Each repeat contributes its mean latency.
template <class T>
BenchReport measure_latency(const EncoderModel<T>& model, const BenchProtocol& protocol,
                            std::string method) {
  return measure_suite<T>({{std::move(method), &model}}, protocol).front();
}

/// Fills `normalized` with 100 * mean / baseline mean.
inline void normalize(std::vector<BenchReport>& reports, const std::string& baseline) {
  const BenchReport* base = nullptr;
  for (const auto& r : reports)
    if (r.method == baseline) base = &r;
  if (!base) throw SpecError("normalize: baseline '" + baseline + "' not among the reports");
  const double b = base->mean_ns;
  for (auto& r : reports) r.normalized = r.method == baseline ? 100.0 : 100.0 * r.mean_ns / b;
}

struct FlopRow {
  std::string site;
  std::uint64_t naive = 0;      // dense update applied per input row
  std::uint64_t branch = 0;     // multiplies the branch actually spends per input row
  bool no_saving = false;       // branch >= naive
};

/// Per-site branch multiplies for one layer of a d_h-wide model.
inline std::vector<FlopRow> flop_report(const AdapterSpec& spec, std::size_t d_h) {
  validate(spec, d_h);
  std::vector<FlopRow> rows;
  for (Site s : sites_for(spec)) {
    FlopRow row;
    row.site = std::string(site_name(s));
    if (is_kronecker(spec.kind)) {
      const MultCount mc = spec.shape.mults();
      row.naive = mc.naive;
      row.branch = mc.vec_trick;
    } else {
      row.naive = static_cast<std::uint64_t>(d_h) * d_h;
      row.branch = branch_mults(spec, d_h);
    }
    row.no_saving = row.branch >= row.naive;
    rows.push_back(row);
  }
  return rows;
}

inline const std::vector<std::string>& bench_methods() {
  static const std::vector<std::string> m = {
      "ft",  "bitfit",        "krona_merged", "lora_merged", "krona", "lora",
      "krona_b", "krona_b_res", "krona_b_sigres", "pa",      "seq_adapter"};
  return m;
}

/// The backbone dressed up as one benchmark method. "*_merged" variants are
/// attached, then folded back into the weights.
template <class T>
EncoderModel<T> bench_variant(const EncoderModel<T>& backbone, const std::string& method) {
  if (!backbone.adapters.empty() || backbone.spec)
    throw SpecError("bench_variant expects a bare backbone");
  const std::size_t d = backbone.config.d_h;
  EncoderModel<T> m = backbone;
  if (method == "ft") return m;
  const bool merged = method.size() > 7 && method.ends_with("_merged");
  const std::string kind = merged ? method.substr(0, method.size() - 7) : method;
  AdapterKind k;
  try {
    k = parse_kind(kind);
  } catch (const SpecError&) {
    throw SpecError("unknown bench method '" + method + "'");
  }
  if (merged && k != AdapterKind::krona && k != AdapterKind::lora)
    throw SpecError("unknown bench method '" + method + "'");
  attach_adapters(m, default_spec(k, d));
  return merged ? merge_all(m) : m;
}

inline std::string format_bench_table(const std::vector<BenchReport>& reports) {
  std::string out = "method             mean_ns      std_ns   normalized  forward_mults\n";
  char buf[160];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-16s %10.0f %10.0f %11.2f %14llu\n", r.method.c_str(), r.mean_ns,
                  r.std_ns, r.normalized, static_cast<unsigned long long>(r.forward_mults));
    out += buf;
  }
  return out;
}

}  // namespace krona
