#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "krona/bench.hpp"
#include "krona/checkpoint.hpp"
#include "krona/config.hpp"
#include "krona/gradcheck.hpp"
#include "krona/train.hpp"

// The end-to-end commands behind the CLI. Each writes human-readable progress
// to `log` and raises typed errors; mapping those to exit codes is the
// caller's business.
namespace krona {

namespace fs = std::filesystem;

/// Exclusive claim on a run directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw ConfigError("run directory '" + dir.string() + "' is locked by another run (remove " +
                        path_.string() + " if that run is gone)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << text;
}

// One metrics record per line.
inline std::string metrics_line(const EpochRecord& r) {
  Json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["eval_loss"] = r.eval_loss;
  j["eval_metric"] = r.eval_metric;
  return j.dump() + "\n";
}

// ---- train --------------------------------------------------------------------

struct TrainOutcome {
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  std::size_t trainable = 0;
  std::size_t total = 0;
  fs::path backbone_path, adapter_path, metrics_path;
};

namespace detail {

inline TaskSpec pretrain_task(const TaskSpec& t) {
  TaskSpec p = t;
  p.kind = TaskKind::seq_classify;
  return p;
}

inline std::map<std::string, std::uint64_t> run_seeds(const RunConfig& c) {
  return {{"model", c.model.seed},       {"task", c.task.seed},       {"pretrain", c.pretrain.seed},
          {"finetune", c.finetune.seed}, {"adapter", c.adapter.seed}};
}

inline TrainOutcome train_probe_run(const RunConfig& c, const fs::path& out, std::ostream& log) {
  const auto data = std::get<ProbeData>(gen_task(c.task));
  TrainOutcome o;
  o.metrics_path = out / "metrics.jsonl";
  std::ofstream metrics(o.metrics_path, std::ios::trunc);
  const ProbeResult r = train_probe(data, c.adapter, c.finetune, [&](const EpochRecord& rec) {
    metrics << metrics_line(rec);
  });
  Checkpoint ck;
  ck.spec = c.adapter;
  ck.seeds = run_seeds(c);
  ck.best_epoch = c.finetune.epochs;
  ck.best_metric = r.eval_mse;
  for (const auto& [name, m] : r.state.tensors()) ck.tensors.emplace_back("probe." + name, *m);
  o.adapter_path = out / "adapter.krad";
  save_checkpoint(ck, o.adapter_path);
  o.best_epoch = ck.best_epoch;
  o.best_metric = r.eval_mse;
  o.trainable = r.state.parameter_count();
  o.total = o.trainable + data.w.size();
  log << "probe " << kind_name(c.adapter.kind) << ": train_mse " << r.train_mse << ", eval_mse "
      << r.eval_mse << "\n";
  return o;
}

}  // namespace detail

/// Pretrain (or load) a backbone, attach adapters, fine-tune, and save
/// backbone.krbb, adapter.krad, metrics.jsonl and the resolved config.json
/// into c.out_dir. The fullrank_probe task trains a standalone adapter instead.
template <class T>
TrainOutcome run_train(const RunConfig& c, std::ostream& log) {
  c.validate();
  const fs::path out = c.out_dir;
  RunLock lock(out);
  write_text(out / "config.json", to_json(c).dump(2) + "\n");
  if (c.task.kind == TaskKind::fullrank_probe) return detail::train_probe_run(c, out, log);

  TrainOutcome o;
  EncoderModel<T> model;
  if (!c.backbone.empty()) {
    model = load_backbone<T>(c.backbone);
    if (!(model.config == c.model))
      throw ConfigError("backbone '" + c.backbone + "' was built with a different model section");
    log << "loaded backbone " << c.backbone << "\n";
  } else {
    model = build_model<T>(c.model);
    const auto pre = std::get<ClassificationData>(gen_task(detail::pretrain_task(c.task)));
    std::ofstream pm(out / "pretrain.jsonl", std::ios::trunc);
    const TrainMetrics m = pretrain(model, pre, c.pretrain);
    for (const auto& r : m.epochs) pm << metrics_line(r);
    const auto& last = m.epochs.back();
    log << "pretrained " << m.epochs.size() << " epochs: train_acc " << last.train_accuracy
        << ", eval_acc " << last.eval_metric << "\n";
  }
  o.backbone_path = out / "backbone.krbb";
  save_backbone(model, o.backbone_path);

  const auto data = std::get<ClassificationData>(gen_task(c.task));
  attach_adapters(model, c.adapter);
  o.trainable = trainable_count(model, select_trainable(model));
  o.total = model.parameter_count();
  log << "fine-tuning " << kind_name(c.adapter.kind) << " on " << task_name(c.task.kind) << ": "
      << o.trainable << " trainable of " << o.total << " parameters\n";

  o.metrics_path = out / "metrics.jsonl";
  std::ofstream metrics(o.metrics_path, std::ios::trunc);
  const auto r = finetune(model, data, c.finetune, [&](const EpochRecord& rec) {
    metrics << metrics_line(rec);
    metrics.flush();
    log << "  epoch " << rec.epoch << ": train_loss " << rec.train_loss << ", eval_acc "
        << rec.eval_metric << "\n";
  });
  Checkpoint ck = make_checkpoint(model);
  ck.seeds = detail::run_seeds(c);
  ck.best_epoch = r.best_epoch;
  ck.best_metric = r.best_metric;
  o.adapter_path = out / "adapter.krad";
  save_checkpoint(ck, o.adapter_path);
  o.best_epoch = r.best_epoch;
  o.best_metric = r.best_metric;
  log << "best epoch " << r.best_epoch << ": eval_acc " << r.best_metric << "\n";
  return o;
}

// ---- eval ---------------------------------------------------------------------

/// Eval-split loss and accuracy of a backbone file, optionally with an
/// adapter checkpoint applied.
template <class T>
EvalResult run_eval(const RunConfig& c, const fs::path& backbone, const fs::path& adapter) {
  if (c.task.kind == TaskKind::fullrank_probe) throw ConfigError("eval: the probe task has no classifier");
  EncoderModel<T> model = load_backbone<T>(backbone);
  if (!adapter.empty()) apply_checkpoint(model, load_checkpoint(adapter));
  TaskSpec t = c.task;
  t.vocab = model.config.vocab_size;
  t.n_classes = model.config.n_classes;
  const auto data = std::get<ClassificationData>(gen_task(t));
  return evaluate(model, data.eval_x, data.eval_y);
}

// ---- merge --------------------------------------------------------------------

struct MergeOutcome {
  double max_deviation = 0.0;  // max |merged - unmerged| / max |unmerged| over the probe logits
  std::size_t sites = 0;
};

/// Seeded token batch used to compare merged and unmerged forwards.
inline TokenBatch probe_batch(const TransformerConfig& cfg, std::uint64_t seed, std::size_t n = 8) {
  std::mt19937_64 rng = detail::stream_rng(seed, 3);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab_size) - 1);
  TokenBatch b(n, std::vector<int>(cfg.max_seq_len));
  for (auto& s : b)
    for (int& t : s) t = tok(rng);
  return b;
}

/// Folds the checkpoint's adapters into the backbone and writes the result as
/// a backbone file. Raises MergeUnsupported (naming the sites) for kinds that
/// cannot be folded.
template <class T>
MergeOutcome run_merge(const fs::path& backbone, const fs::path& adapter, const fs::path& out,
                       std::uint64_t seed) {
  EncoderModel<T> model = load_backbone<T>(backbone);
  apply_checkpoint(model, load_checkpoint(adapter));
  const EncoderModel<T> merged = merge_all(model);
  const TokenBatch probe = probe_batch(model.config, seed);
  MergeOutcome o;
  o.max_deviation = max_rel_diff(forward(merged, probe), forward(model, probe));
  o.sites = model.adapters.size();
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_backbone(merged, out);
  return o;
}

// ---- bench --------------------------------------------------------------------

template <class T>
std::vector<BenchReport> run_bench(const RunConfig& c, std::ostream& log) {
  if (c.bench.methods.empty())
    throw ConfigError("bench.methods is empty; list at least one of the known methods");
  const EncoderModel<T> backbone = c.backbone.empty() ? build_model<T>(c.model) : load_backbone<T>(c.backbone);
  if (c.bench.protocol.seq_len > backbone.config.max_seq_len)
    throw ConfigError("bench.protocol.seq_len = " + std::to_string(c.bench.protocol.seq_len) +
                      " exceeds the model's max_seq_len = " + std::to_string(backbone.config.max_seq_len));
  std::vector<EncoderModel<T>> models;
  models.reserve(c.bench.methods.size());
  for (const auto& m : c.bench.methods) {
    try {
      models.push_back(bench_variant(backbone, m));
    } catch (const SpecError& e) {
      std::string known;
      for (const auto& k : bench_methods()) known += (known.empty() ? "" : ", ") + k;
      throw ConfigError(std::string(e.what()) + " (known: " + known + ")");
    }
  }
  std::vector<BenchEntry<T>> entries;
  for (std::size_t i = 0; i < models.size(); ++i) entries.push_back({c.bench.methods[i], &models[i]});
  auto reports = measure_suite(entries, c.bench.protocol);
  const bool has_base = std::find(c.bench.methods.begin(), c.bench.methods.end(), c.bench.baseline) !=
                        c.bench.methods.end();
  normalize(reports, has_base ? c.bench.baseline : c.bench.methods.front());
  log << format_bench_table(reports);

  const fs::path out = c.out_dir;
  RunLock lock(out);
  Json j = Json::array();
  for (const auto& r : reports) j.push_back(to_json(r));
  write_text(out / "bench.json", j.dump(2) + "\n");
  return reports;
}

// ---- gradcheck ----------------------------------------------------------------

struct GradcheckOutcome {
  std::vector<std::pair<std::string, double>> tensors;  // max relative error per tensor
  double worst = 0.0;
  bool passed = false;
};

/// Finite-difference check of every trainable tensor of the configured
/// adapter inside the full model. Always runs in f64. Adapter tensors are
/// moved to a seeded random point first so no gradient is trivially zero.
inline GradcheckOutcome run_gradcheck(const RunConfig& c, Fault fault = Fault::none) {
  if (c.task.kind == TaskKind::fullrank_probe) throw ConfigError("gradcheck: needs a classification task");
  if (c.model.d_h > c.gradcheck.max_d_h)
    throw ConfigError("gradcheck: model.d_h = " + std::to_string(c.model.d_h) + " is too large (limit " +
                      std::to_string(c.gradcheck.max_d_h) +
                      "); use a small model section, e.g. configs/gradcheck.json");
  EncoderModel<double> model = build_model<double>(c.model);
  attach_adapters(model, c.adapter);
  std::mt19937_64 rng = detail::stream_rng(c.adapter.seed, 4);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& [k, st] : model.adapters)
    for (auto& [name, t] : st.tensors())
      for (double& v : t->data()) v = u(rng);

  TaskSpec t = c.task;
  t.n_train = std::max<std::size_t>(t.n_train, c.gradcheck.batch_size);
  const auto data = std::get<ClassificationData>(gen_task(t));
  const std::size_t n = c.gradcheck.batch_size;
  const TokenBatch xs(data.train_x.begin(), data.train_x.begin() + static_cast<std::ptrdiff_t>(n));
  const std::vector<int> ys(data.train_y.begin(), data.train_y.begin() + static_cast<std::ptrdiff_t>(n));

  Graph<double> g;
  g.set_fault(fault);
  const ModelBinding b = bind_model(g, model, select_trainable(model));
  const Var loss = g.cross_entropy(forward_graph(g, model, b, xs), ys);
  g.backward(loss);
  GradcheckOutcome o;
  for (const auto& [name, v] : b.trainable) {
    const double err = finite_diff_check(g, v, c.gradcheck.eps);
    o.tensors.emplace_back(name, err);
    o.worst = std::max(o.worst, err);
  }
  o.passed = !b.trainable.empty() && o.worst <= c.gradcheck.threshold;
  return o;
}

// ---- shapes -------------------------------------------------------------------

inline std::string format_shapes_table(std::size_t d_in, std::size_t d_out) {
  const auto shapes = enumerate_factor_shapes(d_in, d_out);
  std::ostringstream os;
  os << std::setw(6) << "a1" << std::setw(6) << "a2" << std::setw(6) << "b1" << std::setw(6) << "b2"
     << std::setw(10) << "params" << std::setw(14) << "naive_mults" << std::setw(14) << "vec_mults" << "\n";
  for (const auto& s : shapes) {
    const MultCount mc = s.mults();
    os << std::setw(6) << s.a1 << std::setw(6) << s.a2 << std::setw(6) << s.b1 << std::setw(6) << s.b2
       << std::setw(10) << s.parameter_count() << std::setw(14) << mc.naive << std::setw(14) << mc.vec_trick
       << "\n";
  }
  os << shapes.size() << " shapes\n";
  return os.str();
}

}  // namespace krona
