#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "krona/bench.hpp"
#include "krona/serialize.hpp"

namespace krona {

struct GradcheckConfig {
  double eps = 1e-5;
  double threshold = 1e-5;
  std::size_t batch_size = 3;
  std::size_t max_d_h = 32;

  friend bool operator==(const GradcheckConfig&, const GradcheckConfig&) = default;
};

struct BenchConfig {
  BenchProtocol protocol;
  std::vector<std::string> methods = {"ft", "bitfit", "krona_merged", "lora_merged", "krona_b"};
  std::string baseline = "ft";
};

/// Everything one CLI invocation needs. Every field has a default; see
/// configs/default.json for the fully expanded form.
struct RunConfig {
  std::optional<std::uint64_t> seed;  // when set, overrides every component seed
  std::string precision = "f64";
  std::string out_dir = "runs/default";
  std::string backbone;                // optional backbone file; pretrain when empty
  TransformerConfig model;
  TaskSpec task;
  TrainConfig pretrain;
  TrainConfig finetune;
  AdapterSpec adapter;
  BenchConfig bench;
  GradcheckConfig gradcheck;

  // Defaults: pretrain on seq_classify, then fine-tune KronA on its
  // label_shift variant.
  RunConfig() {
    task.kind = TaskKind::label_shift;
    task.n_train = 1024;
    pretrain.batch_size = 16;
    pretrain.epochs = 12;
    pretrain.early_stop_accuracy = 0.99;
    finetune.batch_size = 16;
    finetune.epochs = 20;
    adapter = default_spec(AdapterKind::krona, model.d_h);
  }

  /// Pushes the global seed (if any) into every component.
  void apply_seed() {
    if (!seed) return;
    model.seed = task.seed = pretrain.seed = finetune.seed = adapter.seed = *seed;
    bench.protocol.input_seed = *seed;
  }

  void validate() const {
    if (precision != "f32" && precision != "f64")
      throw ConfigError("precision: expected f32 or f64, got '" + precision + "'");
    try {
      model.validate();
      krona::validate(task);
      if (task.kind != TaskKind::fullrank_probe) {
        if (task.vocab != model.vocab_size) throw SpecError("task.vocab must equal model.vocab_size");
        if (task.seq_len > model.max_seq_len) throw SpecError("task.seq_len exceeds model.max_seq_len");
        if (task.n_classes != model.n_classes) throw SpecError("task.n_classes must equal model.n_classes");
        krona::validate(adapter, model.d_h);
      } else {
        krona::validate(adapter, task.probe_dim);
      }
      bench.protocol.validate();
    } catch (const SpecError& e) {
      throw ConfigError(e.what());
    }
    for (const TrainConfig* t : {&pretrain, &finetune}) {
      const char* name = t == &pretrain ? "pretrain" : "finetune";
      if (!(t->learning_rate > 0.0)) throw ConfigError(std::string(name) + ".learning_rate must be > 0");
      if (t->epochs < 1) throw ConfigError(std::string(name) + ".epochs must be >= 1");
      if (t->batch_size < 1) throw ConfigError(std::string(name) + ".batch_size must be >= 1");
    }
  }
};

inline Json to_json(const RunConfig& c) {
  Json j;
  if (c.seed) j["seed"] = *c.seed;
  j["precision"] = c.precision;
  j["out_dir"] = c.out_dir;
  j["backbone"] = c.backbone;
  j["model"] = to_json(c.model);
  j["task"] = to_json(c.task);
  j["pretrain"] = to_json(c.pretrain);
  j["finetune"] = to_json(c.finetune);
  j["adapter"] = to_json(c.adapter);
  j["bench"] = {{"protocol", to_json(c.bench.protocol)},
                {"methods", c.bench.methods},
                {"baseline", c.bench.baseline}};
  j["gradcheck"] = {{"eps", c.gradcheck.eps},
                    {"threshold", c.gradcheck.threshold},
                    {"batch_size", c.gradcheck.batch_size},
                    {"max_d_h", c.gradcheck.max_d_h}};
  return j;
}

namespace detail {

inline std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

// Line of the first occurrence of the last path component as a JSON key.
inline std::optional<std::size_t> key_line(const std::string& text, const std::string& path) {
  const auto dot = path.find_last_of('.');
  std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
  if (const auto br = key.find('['); br != std::string::npos) key.resize(br);
  const auto at = text.find("\"" + key + "\"");
  if (at == std::string::npos) return std::nullopt;
  return line_col(text, at).first;
}

}  // namespace detail

/// Parses a config document. Unknown keys, wrong types and invalid values
/// raise ConfigError naming the field (and its line when it can be found).
inline RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>") {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    const auto [line, col] = detail::line_col(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) +
                      ": malformed JSON: " + e.what());
  }
  RunConfig c;
  try {
    ObjectReader r(j, "");
    std::uint64_t seed = 0;
    r.get("seed", seed);
    if (j.contains("seed")) c.seed = seed;
    r.get("precision", c.precision);
    r.get("out_dir", c.out_dir);
    r.get("backbone", c.backbone);
    r.nested("model", [&](ObjectReader& s) { read_into(s, c.model); });
    // Adapter defaults depend on the kind and width, so resolve those first.
    AdapterKind kind = c.adapter.kind;
    if (j.is_object() && j.contains("adapter") && j["adapter"].is_object() &&
        j["adapter"].contains("kind") && j["adapter"]["kind"].is_string()) {
      try {
        kind = parse_kind(j["adapter"]["kind"].get<std::string>());
      } catch (const SpecError& e) {
        throw ConfigError(std::string("adapter.kind: ") + e.what());
      }
    }
    r.nested("task", [&](ObjectReader& s) { read_into(s, c.task); });
    const std::size_t width = c.task.kind == TaskKind::fullrank_probe ? c.task.probe_dim : c.model.d_h;
    c.adapter = default_spec(kind, width);
    if (c.task.kind == TaskKind::fullrank_probe && is_kronecker(kind))
      c.adapter.scale = 1.0;
    r.nested("adapter", [&](ObjectReader& s) { read_into(s, c.adapter); });
    r.nested("pretrain", [&](ObjectReader& s) { read_into(s, c.pretrain); });
    if (kind == AdapterKind::ft) c.finetune.learning_rate = 3e-4;  // full fine-tuning wants a smaller step
    r.nested("finetune", [&](ObjectReader& s) { read_into(s, c.finetune); });
    r.nested("bench", [&](ObjectReader& s) {
      s.nested("protocol", [&](ObjectReader& p) { read_into(p, c.bench.protocol); });
      s.get("methods", c.bench.methods);
      s.get("baseline", c.bench.baseline);
    });
    r.nested("gradcheck", [&](ObjectReader& s) {
      s.get("eps", c.gradcheck.eps);
      s.get("threshold", c.gradcheck.threshold);
      s.get("batch_size", c.gradcheck.batch_size);
      s.get("max_d_h", c.gradcheck.max_d_h);
    });
    r.finish();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    const auto colon = msg.find(':');
    const auto line = detail::key_line(text, msg.substr(0, colon));
    throw ConfigError(source + (line ? ":" + std::to_string(*line) : std::string()) + ": " + msg);
  }
  c.apply_seed();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

}  // namespace krona
