#pragma once

#include <cmath>
#include <compare>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "krona/adapters.hpp"
#include "krona/autograd.hpp"

namespace krona {

struct TransformerConfig {
  std::size_t vocab_size = 32;
  std::size_t max_seq_len = 16;
  std::size_t d_h = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_hidden = 256;
  std::size_t n_classes = 2;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_h / n_heads; }

  void validate() const {
    if (vocab_size == 0 || max_seq_len == 0 || n_layers == 0 || n_heads == 0 || ffn_hidden == 0 ||
        n_classes < 2)
      throw SpecError("TransformerConfig: sizes must be positive and n_classes >= 2");
    if (d_h < 4) throw SpecError("TransformerConfig: d_h must be >= 4");
    if (d_h % n_heads != 0)
      throw SpecError("TransformerConfig: d_h=" + std::to_string(d_h) +
                      " is not divisible by n_heads=" + std::to_string(n_heads));
  }

  friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

// Adapter attach points. q/v are weight matrices, ffn is the whole FFN block,
// attn_out/ffn_out are the outputs of the attention and FFN blocks.
enum class Site : std::uint8_t { q, v, ffn, attn_out, ffn_out };

inline std::string_view site_name(Site s) {
  switch (s) {
    case Site::q: return "q";
    case Site::v: return "v";
    case Site::ffn: return "ffn";
    case Site::attn_out: return "attn_out";
    case Site::ffn_out: return "ffn_out";
  }
  return "?";
}

inline Site parse_site(std::string_view s) {
  for (auto x : {Site::q, Site::v, Site::ffn, Site::attn_out, Site::ffn_out})
    if (site_name(x) == s) return x;
  throw FormatError("unknown site '" + std::string(s) + "'");
}

struct SiteKey {
  std::size_t layer = 0;
  Site site = Site::q;
  auto operator<=>(const SiteKey&) const = default;
};

inline std::string site_label(const SiteKey& k) {
  return "L" + std::to_string(k.layer) + "." + std::string(site_name(k.site));
}

// Sites an adapter kind occupies in every layer.
inline std::vector<Site> sites_for(const AdapterSpec& spec) {
  switch (spec.kind) {
    case AdapterKind::krona:
    case AdapterKind::lora:
      return {Site::q, Site::v};
    case AdapterKind::krona_b:
    case AdapterKind::krona_b_res:
    case AdapterKind::krona_b_sigres:
      if (spec.placement == Placement::block_sequential) return {Site::attn_out, Site::ffn_out};
      return {Site::ffn};
    case AdapterKind::pa:
      return {Site::ffn};
    case AdapterKind::seq_adapter:
      return {Site::attn_out, Site::ffn_out};
    case AdapterKind::bitfit:
    case AdapterKind::ft:
      break;
  }
  return {};
}

/// Pre-layer-norm encoder classifier with named, individually addressable
/// weights. Sequences are processed independently and mean-pooled.
template <class T = double>
struct EncoderModel {
  struct Param {
    std::string name;
    Matrix<T> value;
    bool is_bias = false;
  };

  TransformerConfig config;
  std::vector<Param> params;                 // backbone, fixed order
  std::optional<AdapterSpec> spec;           // set once adapters are attached
  std::map<SiteKey, AdapterState<T>> adapters;

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return i;
    throw SpecError("no backbone parameter named '" + std::string(name) + "'");
  }
  Matrix<T>& param(std::string_view name) { return params[index_of(name)].value; }
  const Matrix<T>& param(std::string_view name) const { return params[index_of(name)].value; }

  std::size_t backbone_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }
  std::size_t adapter_parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, st] : adapters) n += st.parameter_count();
    return n;
  }
  std::size_t bias_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params)
      if (p.is_bias) n += p.value.size();
    return n;
  }
  std::size_t parameter_count() const {
    return backbone_parameter_count() + adapter_parameter_count();
  }

  static std::string adapter_tensor_name(const SiteKey& k, std::string_view tensor) {
    return "adapter." + site_label(k) + "." + std::string(tensor);
  }

  // Every tensor (backbone first, then adapters) by its global name.
  std::vector<std::pair<std::string, Matrix<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Matrix<T>*>> out;
    for (auto& p : params) out.emplace_back(p.name, &p.value);
    for (auto& [k, st] : adapters)
      for (auto& [name, m] : st.tensors()) out.emplace_back(adapter_tensor_name(k, name), m);
    return out;
  }

  Matrix<T>& tensor(std::string_view name) {
    for (auto& [n, m] : named_tensors())
      if (n == name) return *m;
    throw SpecError("no tensor named '" + std::string(name) + "'");
  }
};

namespace detail {

inline std::string layer_name(std::size_t l, std::string_view rest) {
  return "L" + std::to_string(l) + "." + std::string(rest);
}

}  // namespace detail

template <class T = double>
EncoderModel<T> build_model(const TransformerConfig& cfg) {
  cfg.validate();
  EncoderModel<T> m;
  m.config = cfg;
  std::seed_seq seq{cfg.seed, std::uint64_t{0x656e636f646572}};
  std::mt19937_64 rng(seq);
  const auto gauss = [&](std::size_t r, std::size_t c, double sd) {
    return detail::normal<T>(r, c, sd, rng);
  };
  const auto add = [&](std::string name, Matrix<T> v, bool bias = false) {
    m.params.push_back({std::move(name), std::move(v), bias});
  };
  const std::size_t d = cfg.d_h, f = cfg.ffn_hidden;
  const double wd = 1.0 / std::sqrt(static_cast<double>(d));
  add("embed", gauss(cfg.vocab_size, d, 1.0));
  add("pos", gauss(cfg.max_seq_len, d, 0.1));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    using detail::layer_name;
    add(layer_name(l, "ln1.gain"), Matrix<T>(1, d, T(1)));
    add(layer_name(l, "ln1.bias"), Matrix<T>(1, d), true);
    for (const char* w : {"q", "k", "v", "o"}) {
      add(layer_name(l, std::string("attn.") + w + ".weight"), gauss(d, d, wd));
      add(layer_name(l, std::string("attn.") + w + ".bias"), Matrix<T>(1, d), true);
    }
    add(layer_name(l, "ln2.gain"), Matrix<T>(1, d, T(1)));
    add(layer_name(l, "ln2.bias"), Matrix<T>(1, d), true);
    add(layer_name(l, "ffn.up.weight"), gauss(d, f, wd));
    add(layer_name(l, "ffn.up.bias"), Matrix<T>(1, f), true);
    add(layer_name(l, "ffn.down.weight"), gauss(f, d, 1.0 / std::sqrt(static_cast<double>(f))));
    add(layer_name(l, "ffn.down.bias"), Matrix<T>(1, d), true);
  }
  add("final_ln.gain", Matrix<T>(1, d, T(1)));
  add("final_ln.bias", Matrix<T>(1, d), true);
  add("head.weight", gauss(d, cfg.n_classes, wd));
  add("head.bias", Matrix<T>(1, cfg.n_classes), true);
  return m;
}

/// Inserts one adapter per site per layer as dictated by the kind. bitfit and
/// ft insert nothing but still record the spec.
template <class T>
EncoderModel<T>& attach_adapters(EncoderModel<T>& model, const AdapterSpec& spec) {
  if (model.spec) throw SpecError("adapters already attached to this model");
  validate(spec, model.config.d_h);
  std::uint64_t stream = 0;
  for (std::size_t l = 0; l < model.config.n_layers; ++l)
    for (Site s : sites_for(spec)) {
      const SiteKey key{l, s};
      if (model.adapters.count(key)) throw SpecError("site " + site_label(key) + " already hosts an adapter");
      model.adapters.emplace(key, init_adapter<T>(spec, model.config.d_h, stream++));
    }
  model.spec = spec;
  return model;
}

/// Global names of the parameters updated during fine-tuning.
template <class T>
std::set<std::string> select_trainable(const EncoderModel<T>& model) {
  std::set<std::string> out;
  const AdapterKind kind = model.spec ? model.spec->kind : AdapterKind::ft;
  if (kind == AdapterKind::ft) {
    for (const auto& p : model.params) out.insert(p.name);
    for (const auto& [k, st] : model.adapters)
      for (const auto& [name, m] : st.tensors()) out.insert(EncoderModel<T>::adapter_tensor_name(k, name));
    return out;
  }
  if (kind == AdapterKind::bitfit) {
    for (const auto& p : model.params)
      if (p.is_bias) out.insert(p.name);
    return out;
  }
  for (const auto& [k, st] : model.adapters)
    for (const auto& [name, m] : st.tensors()) out.insert(EncoderModel<T>::adapter_tensor_name(k, name));
  return out;
}

template <class T>
std::size_t trainable_count(EncoderModel<T>& model, const std::set<std::string>& names) {
  std::size_t n = 0;
  for (auto& [name, m] : model.named_tensors())
    if (names.count(name)) n += m->size();
  return n;
}

// Graph leaves viewing every model tensor (no copies: the model must outlive
// the graph and stay unchanged while it is used).
struct ModelBinding {
  std::vector<Var> backbone;
  std::map<SiteKey, BoundAdapter> adapters;
  std::vector<std::pair<std::string, Var>> trainable;  // name -> leaf, in model order
};

template <class T>
ModelBinding bind_model(Graph<T>& g, const EncoderModel<T>& model,
                        const std::set<std::string>& trainable = {}) {
  ModelBinding b;
  for (const auto& p : model.params) {
    const bool train = trainable.count(p.name) > 0;
    const Var v = train ? g.parameter_ref(p.value) : g.constant_ref(p.value);
    b.backbone.push_back(v);
    if (train) b.trainable.emplace_back(p.name, v);
  }
  for (const auto& [key, st] : model.adapters) {
    BoundAdapter ba;
    Var* slots[] = {&ba.a, &ba.b, &ba.bias_out, &ba.bias_mid, &ba.res_scale};
    const Matrix<T>* mats[] = {&st.a, &st.b, &st.bias_out, &st.bias_mid, &st.res_scale};
    const char* names[] = {"A", "B", "bias_out", "bias_mid", "s_res"};
    for (int k = 0; k < 5; ++k) {
      if (mats[k]->empty()) continue;
      const std::string name = EncoderModel<T>::adapter_tensor_name(key, names[k]);
      const bool train = trainable.count(name) > 0;
      *slots[k] = train ? g.parameter_ref(*mats[k]) : g.constant_ref(*mats[k]);
      if (train) b.trainable.emplace_back(name, *slots[k]);
    }
    b.adapters.emplace(key, ba);
  }
  return b;
}

namespace detail {

template <class T>
class ForwardBuilder {
 public:
  ForwardBuilder(Graph<T>& g, const EncoderModel<T>& m, const ModelBinding& b)
      : g_(g), m_(m), b_(b) {
    const std::size_t d = m.config.d_h, hd = m.config.head_dim();
    for (std::size_t h = 0; h < m.config.n_heads; ++h) {
      Matrix<T> sel(d, hd);
      for (std::size_t j = 0; j < hd; ++j) sel(h * hd + j, j) = T(1);
      selectors_.push_back(g.constant(std::move(sel)));
    }
  }

  Var sequence(const std::vector<int>& tokens) {
    const auto& cfg = m_.config;
    if (tokens.empty() || tokens.size() > cfg.max_seq_len)
      throw DimensionError("sequence length " + std::to_string(tokens.size()) +
                           " outside [1, " + std::to_string(cfg.max_seq_len) + "]");
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
    Var h = g_.add(g_.embedding(p("embed"), tokens), g_.embedding(p("pos"), positions));
    const T inv_sqrt_hd = T(1) / std::sqrt(static_cast<T>(cfg.head_dim()));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const Var a = g_.layer_norm(h, lp(l, "ln1.gain"), lp(l, "ln1.bias"));
      const Var q = projection(a, l, "q", Site::q);
      const Var k = projection(a, l, "k", std::nullopt);
      const Var v = projection(a, l, "v", Site::v);
      std::vector<Var> heads;
      for (const Var sel : selectors_) {
        const Var scores = g_.scale(g_.matmul(g_.matmul(q, sel), g_.matmul(k, sel), true), inv_sqrt_hd);
        heads.push_back(g_.matmul(g_.softmax_rows(scores), g_.matmul(v, sel)));
      }
      const Var merged = heads.size() == 1 ? heads.front() : g_.concat(heads, 1);
      Var attn = g_.add(g_.matmul(merged, lp(l, "attn.o.weight")), lp(l, "attn.o.bias"));
      attn = sequential(attn, l, Site::attn_out);
      h = g_.add(h, attn);

      const Var f = g_.layer_norm(h, lp(l, "ln2.gain"), lp(l, "ln2.bias"));
      const Var up = g_.gelu(g_.add(g_.matmul(f, lp(l, "ffn.up.weight")), lp(l, "ffn.up.bias")));
      Var ffn = g_.add(g_.matmul(up, lp(l, "ffn.down.weight")), lp(l, "ffn.down.bias"));
      if (const auto* ad = adapter(l, Site::ffn)) ffn = g_.add(ffn, adapter_delta(g_, f, *ad, *m_.spec));
      ffn = sequential(ffn, l, Site::ffn_out);
      h = g_.add(h, ffn);
    }
    const Var hf = g_.layer_norm(h, p("final_ln.gain"), p("final_ln.bias"));
    const Var pool = g_.constant(Matrix<T>(1, tokens.size(), T(1) / static_cast<T>(tokens.size())));
    return g_.add(g_.matmul(g_.matmul(pool, hf), p("head.weight")), p("head.bias"));
  }

 private:
  Var p(std::string_view name) const { return b_.backbone[m_.index_of(name)]; }
  Var lp(std::size_t l, std::string_view rest) const { return p(layer_name(l, rest)); }

  const BoundAdapter* adapter(std::size_t l, Site s) const {
    auto it = b_.adapters.find(SiteKey{l, s});
    return it == b_.adapters.end() ? nullptr : &it->second;
  }

  Var projection(Var a, std::size_t l, std::string_view w, std::optional<Site> site) {
    const std::string base = "attn." + std::string(w);
    Var y = g_.add(g_.matmul(a, lp(l, base + ".weight")), lp(l, base + ".bias"));
    if (site)
      if (const auto* ad = adapter(l, *site)) y = g_.add(y, adapter_delta(g_, a, *ad, *m_.spec));
    return y;
  }

  // out + delta(out) for adapters inserted after a block.
  Var sequential(Var out, std::size_t l, Site s) {
    if (const auto* ad = adapter(l, s)) return g_.add(out, adapter_delta(g_, out, *ad, *m_.spec));
    return out;
  }

  Graph<T>& g_;
  const EncoderModel<T>& m_;
  const ModelBinding& b_;
  std::vector<Var> selectors_;
};

}  // namespace detail

using TokenBatch = std::vector<std::vector<int>>;

// Logits (batch x n_classes) as a graph node; one sub-graph per sequence.
template <class T>
Var forward_graph(Graph<T>& g, const EncoderModel<T>& model, const ModelBinding& binding,
                  const TokenBatch& batch) {
  if (batch.empty()) throw DimensionError("forward: empty batch");
  detail::ForwardBuilder<T> fb(g, model, binding);
  std::vector<Var> rows;
  rows.reserve(batch.size());
  for (const auto& seq : batch) rows.push_back(fb.sequence(seq));
  return rows.size() == 1 ? rows.front() : g.concat(rows, 0);
}

template <class T>
Matrix<T> forward(const EncoderModel<T>& model, const TokenBatch& batch) {
  Graph<T> g;
  const ModelBinding b = bind_model(g, model);
  return g.value(forward_graph(g, model, b, batch));
}

// Forward logits plus the number of multiplies spent in matmul/kron nodes.
template <class T>
std::pair<Matrix<T>, std::uint64_t> forward_counted(const EncoderModel<T>& model,
                                                     const TokenBatch& batch) {
  Graph<T> g;
  const ModelBinding b = bind_model(g, model);
  Matrix<T> out = g.value(forward_graph(g, model, b, batch));
  return {std::move(out), g.forward_mults()};
}

/// Folds every attached adapter into its host weight. Only krona and lora
/// adapters can be folded; anything else raises MergeUnsupported naming the
/// offending sites.
template <class T>
EncoderModel<T> merge_all(const EncoderModel<T>& model) {
  EncoderModel<T> out = model;
  out.adapters.clear();
  out.spec.reset();
  if (model.adapters.empty()) return out;
  if (!model.spec || !is_mergeable(*model.spec)) {
    std::string sites;
    for (const auto& [k, st] : model.adapters) sites += (sites.empty() ? "" : ", ") + site_label(k);
    throw MergeUnsupported(std::string(model.spec ? kind_name(model.spec->kind) : "?") +
                           " adapters cannot be merged; sites: " + sites);
  }
  for (const auto& [k, st] : model.adapters) {
    const std::string w = detail::layer_name(k.layer, "attn." + std::string(site_name(k.site)) + ".weight");
    Matrix<T>& host = out.param(w);
    host = merge(host, st, *model.spec);
  }
  return out;
}

}  // namespace krona
