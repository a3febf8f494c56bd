#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "krona/adapters.hpp"
#include "krona/model.hpp"
#include "krona/optim.hpp"
#include "krona/tasks.hpp"

namespace krona {

using Json = nlohmann::ordered_json;

// Strict view of one JSON object: typed field reads with defaults, and a
// final check that every key present was consumed.
class ObjectReader {
 public:
  ObjectReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      read(*it, out, field(key));
    } catch (const Json::exception& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  // Nested object; `fn` receives a reader for it.
  template <class Fn>
  void nested(const char* key, Fn&& fn) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    ObjectReader sub(*it, field(key));
    fn(sub);
    sub.finish();
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown key");
  }

  std::string field(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  static void read(const Json& j, double& out, const std::string& f) {
    if (!j.is_number()) throw ConfigError(f + ": expected a number");
    out = j.get<double>();
  }
  static void read(const Json& j, std::size_t& out, const std::string& f) {
    if (!j.is_number_unsigned()) throw ConfigError(f + ": expected a non-negative integer");
    out = j.get<std::size_t>();
  }
  static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed fields share the size_t reader");
  static void read(const Json& j, int& out, const std::string& f) {
    if (!j.is_number_integer()) throw ConfigError(f + ": expected an integer");
    out = j.get<int>();
  }
  static void read(const Json& j, bool& out, const std::string& f) {
    if (!j.is_boolean()) throw ConfigError(f + ": expected true or false");
    out = j.get<bool>();
  }
  static void read(const Json& j, std::string& out, const std::string& f) {
    if (!j.is_string()) throw ConfigError(f + ": expected a string");
    out = j.get<std::string>();
  }
  template <class E>
  static void read(const Json& j, std::vector<E>& out, const std::string& f) {
    if (!j.is_array()) throw ConfigError(f + ": expected an array");
    out.clear();
    for (std::size_t i = 0; i < j.size(); ++i) {
      E v{};
      read(j[i], v, f + "[" + std::to_string(i) + "]");
      out.push_back(std::move(v));
    }
  }

  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

namespace detail {

// Enum fields are stored by name.
template <class E, class Parse>
void get_enum(ObjectReader& r, const char* key, E& out, std::string_view (*name)(E), Parse parse) {
  std::string s(name(out));
  r.get(key, s);
  try {
    out = parse(s);
  } catch (const Error& e) {
    throw ConfigError(r.field(key) + ": " + e.what());
  }
}

}  // namespace detail

// ---- writers -------------------------------------------------------------------

inline Json to_json(const FactorShape& s) {
  return {{"a1", s.a1}, {"a2", s.a2}, {"b1", s.b1}, {"b2", s.b2}};
}

inline Json to_json(const AdapterSpec& s) {
  return {{"kind", kind_name(s.kind)},
          {"placement", placement_name(s.placement)},
          {"shape", to_json(s.shape)},
          {"rank", s.rank},
          {"scale", s.scale},
          {"residual_scale_init", s.residual_scale_init},
          {"bias_mode", s.bias_mode},
          {"nonlinearity", activation_name(s.nonlinearity)},
          {"init", init_name(s.init)},
          {"seed", s.seed}};
}

inline Json to_json(const TransformerConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"d_h", c.d_h},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"ffn_hidden", c.ffn_hidden},
          {"n_classes", c.n_classes},   {"seed", c.seed}};
}

inline Json to_json(const TaskSpec& t) {
  return {{"kind", task_name(t.kind)},   {"vocab", t.vocab},
          {"seq_len", t.seq_len},        {"n_classes", t.n_classes},
          {"n_train", t.n_train},        {"n_eval", t.n_eval},
          {"seed", t.seed},              {"permutation", t.permutation},
          {"probe_dim", t.probe_dim},    {"probe_factor", t.probe_factor},
          {"delta_scale", t.delta_scale}};
}

inline Json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"epochs", c.epochs},               {"beta1", c.beta1},
          {"beta2", c.beta2},                 {"eps", c.eps},
          {"weight_decay", c.weight_decay},   {"grad_clip", c.grad_clip},
          {"early_stop_accuracy", c.early_stop_accuracy}, {"seed", c.seed}};
}

// ---- readers (defaults come from the value passed in) ----------------------------

inline void read_into(ObjectReader& r, FactorShape& s) {
  r.get("a1", s.a1);
  r.get("a2", s.a2);
  r.get("b1", s.b1);
  r.get("b2", s.b2);
}

inline void read_into(ObjectReader& r, AdapterSpec& s) {
  detail::get_enum(r, "kind", s.kind, kind_name, parse_kind);
  detail::get_enum(r, "placement", s.placement, placement_name, parse_placement);
  r.nested("shape", [&](ObjectReader& sub) { read_into(sub, s.shape); });
  r.get("rank", s.rank);
  r.get("scale", s.scale);
  r.get("residual_scale_init", s.residual_scale_init);
  r.get("bias_mode", s.bias_mode);
  detail::get_enum(r, "nonlinearity", s.nonlinearity, activation_name, parse_activation);
  detail::get_enum(r, "init", s.init, init_name, parse_init);
  r.get("seed", s.seed);
}

inline void read_into(ObjectReader& r, TransformerConfig& c) {
  r.get("vocab_size", c.vocab_size);
  r.get("max_seq_len", c.max_seq_len);
  r.get("d_h", c.d_h);
  r.get("n_layers", c.n_layers);
  r.get("n_heads", c.n_heads);
  r.get("ffn_hidden", c.ffn_hidden);
  r.get("n_classes", c.n_classes);
  r.get("seed", c.seed);
}

inline void read_into(ObjectReader& r, TaskSpec& t) {
  detail::get_enum(r, "kind", t.kind, task_name, parse_task);
  r.get("vocab", t.vocab);
  r.get("seq_len", t.seq_len);
  r.get("n_classes", t.n_classes);
  r.get("n_train", t.n_train);
  r.get("n_eval", t.n_eval);
  r.get("seed", t.seed);
  r.get("permutation", t.permutation);
  r.get("probe_dim", t.probe_dim);
  r.get("probe_factor", t.probe_factor);
  r.get("delta_scale", t.delta_scale);
}

inline void read_into(ObjectReader& r, TrainConfig& c) {
  r.get("learning_rate", c.learning_rate);
  r.get("batch_size", c.batch_size);
  r.get("epochs", c.epochs);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("eps", c.eps);
  r.get("weight_decay", c.weight_decay);
  r.get("grad_clip", c.grad_clip);
  r.get("early_stop_accuracy", c.early_stop_accuracy);
  r.get("seed", c.seed);
}

template <class V>
V from_json(const Json& j, V defaults = {}, const std::string& path = "") {
  ObjectReader r(j, path);
  read_into(r, defaults);
  r.finish();
  return defaults;
}

}  // namespace krona
