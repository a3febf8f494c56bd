// krona_cli: train, evaluate, merge, benchmark, gradient-check and enumerate
// Kronecker adapter shapes.
//
// Exit codes: 0 ok, 1 other failure, 2 config/usage, 3 divergence,
// 4 merge unsupported, 5 gradcheck failed.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "krona/pipeline.hpp"

namespace {

using namespace krona;

enum Exit : int { ok = 0, failure = 1, usage = 2, diverged = 3, no_merge = 4, grad_fail = 5 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string precision;
  std::string out;
};

RunConfig resolve(const Globals& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  if (g.seed) {
    c.seed = g.seed;
    c.apply_seed();
  }
  if (!g.precision.empty()) c.precision = g.precision;
  if (!g.out.empty()) c.out_dir = g.out;
  c.validate();
  return c;
}

template <class Fn>
int with_precision(const RunConfig& c, Fn&& fn) {
  if (c.precision == "f32") return fn(float{});
  return fn(double{});
}

int cmd_train(const Globals& g) {
  const RunConfig c = resolve(g);
  return with_precision(c, [&](auto tag) {
    using T = decltype(tag);
    const TrainOutcome o = run_train<T>(c, std::cout);
    std::cout << "wrote " << o.adapter_path.string() << " and " << o.metrics_path.string() << "\n";
    return Exit::ok;
  });
}

int cmd_eval(const Globals& g, const std::string& backbone, const std::string& adapter) {
  const RunConfig c = resolve(g);
  return with_precision(c, [&](auto tag) {
    using T = decltype(tag);
    const EvalResult r = run_eval<T>(c, backbone, adapter);
    Json j;
    j["eval_loss"] = r.loss;
    j["eval_metric"] = r.accuracy;
    std::cout << j.dump() << "\n";
    return Exit::ok;
  });
}

int cmd_merge(const Globals& g, const std::string& backbone, const std::string& adapter,
              const std::string& out) {
  const RunConfig c = resolve(g);
  const std::uint64_t seed = g.seed.value_or(0);
  const double limit = c.precision == "f32" ? 1e-5 : 1e-10;
  return with_precision(c, [&](auto tag) {
    using T = decltype(tag);
    const MergeOutcome o = run_merge<T>(backbone, adapter, out, seed);
    std::printf("merged %zu sites into %s\nmax forward deviation %.3e (limit %.0e)\n", o.sites,
                out.c_str(), o.max_deviation, limit);
    return o.max_deviation <= limit ? Exit::ok : Exit::failure;
  });
}

int cmd_bench(const Globals& g) {
  const RunConfig c = resolve(g);
  return with_precision(c, [&](auto tag) {
    using T = decltype(tag);
    run_bench<T>(c, std::cout);
    return Exit::ok;
  });
}

int cmd_gradcheck(const Globals& g, bool corrupt) {
  RunConfig c = resolve(g);
  if (c.precision != "f64") std::cout << "note: gradcheck always evaluates in f64\n";
  const GradcheckOutcome o = run_gradcheck(c, corrupt ? Fault::kron_linear_grad_a : Fault::none);
  for (const auto& [name, err] : o.tensors) std::printf("  %-32s %.3e\n", name.c_str(), err);
  std::printf("max relative error %.3e (threshold %.0e): %s\n", o.worst, c.gradcheck.threshold,
              o.passed ? "PASS" : "FAIL");
  return o.passed ? Exit::ok : Exit::grad_fail;
}

int cmd_shapes(std::size_t d_in, std::size_t d_out) {
  std::cout << format_shapes_table(d_in, d_out);
  return Exit::ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kronecker adapters: train, evaluate, merge, benchmark, gradient-check"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "JSON run config (defaults apply to missing fields)");
  auto* seed_opt = app.add_option("--seed", seed, "override every seed in the config");
  app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--out", g.out, "output directory");

  auto* train = app.add_subcommand("train", "pretrain or load a backbone, attach adapters, fine-tune");

  std::string backbone, adapter, merged_out;
  auto* eval = app.add_subcommand("eval", "evaluate a backbone (plus adapter checkpoint) on the eval split");
  eval->add_option("--backbone", backbone, "backbone file")->required();
  eval->add_option("--adapter", adapter, "adapter checkpoint");

  auto* merge = app.add_subcommand("merge", "fold an adapter checkpoint into its backbone");
  merge->add_option("backbone", backbone, "backbone file")->required();
  merge->add_option("adapter", adapter, "adapter checkpoint")->required();
  merge->add_option("out", merged_out, "merged backbone file to write")->required();

  auto* bench = app.add_subcommand("bench", "inference latency of the configured methods");

  bool corrupt = false;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the adapter gradients");
  grad->add_flag("--corrupt", corrupt, "deliberately break the fused Kronecker backward (negative control)");

  std::size_t d_in = 0, d_out = 0;
  auto* shapes = app.add_subcommand("shapes", "enumerate Kronecker factor shapes for a d_in x d_out weight");
  shapes->add_option("d_in", d_in)->required()->check(CLI::PositiveNumber);
  shapes->add_option("d_out", d_out)->required()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? Exit::ok : Exit::usage;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*train) return cmd_train(g);
    if (*eval) return cmd_eval(g, backbone, adapter);
    if (*merge) return cmd_merge(g, backbone, adapter, merged_out);
    if (*bench) return cmd_bench(g);
    if (*grad) return cmd_gradcheck(g, corrupt);
    if (*shapes) return cmd_shapes(d_in, d_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return Exit::usage;
  } catch (const SpecError& e) {
    std::cerr << "invalid setting: " << e.what() << "\n";
    return Exit::usage;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged at step " << e.step() << ": " << e.what() << "\n";
    return Exit::diverged;
  } catch (const MergeUnsupported& e) {
    std::cerr << "cannot merge: " << e.what() << "\n";
    return Exit::no_merge;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::failure;
  }
  return Exit::usage;
}
