#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "krona/model.hpp"
#include "krona/serialize.hpp"

namespace krona {

// File layout shared by adapter checkpoints ("KRAD") and backbone files ("KRBB"):
//
//   magic[4] | u16 version | u32 header_len | header (JSON, UTF-8) | f64 LE payload
//
// The header lists tensors in payload order with their shapes.
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::array<char, 4> kAdapterMagic = {'K', 'R', 'A', 'D'};
inline constexpr std::array<char, 4> kBackboneMagic = {'K', 'R', 'B', 'B'};

using NamedTensors = std::vector<std::pair<std::string, Matrix<double>>>;

struct Checkpoint {
  AdapterSpec spec;
  std::optional<TransformerConfig> model;
  std::map<std::string, std::uint64_t> seeds;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  NamedTensors tensors;

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors) n += m.size();
    return n;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])) << (8 * i);
  return v;
}

inline void write_container(const std::filesystem::path& path, const std::array<char, 4>& magic,
                            Json header, const NamedTensors& tensors) {
  Json list = Json::array();
  for (const auto& [name, m] : tensors) list.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  header["tensors"] = std::move(list);
  const std::string text = header.dump();
  std::string buf(magic.begin(), magic.end());
  put_le(buf, kFormatVersion, 2);
  put_le(buf, text.size(), 4);
  buf += text;
  for (const auto& [name, m] : tensors)
    for (double v : m.data()) put_le(buf, std::bit_cast<std::uint64_t>(v), 8);

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + tmp.string() + "' for writing");
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!os) throw FormatError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

struct Container {
  Json header;
  NamedTensors tensors;
};

inline Container read_container(const std::filesystem::path& path, const std::array<char, 4>& magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path.string() + "'");
  const std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string what = "'" + path.string() + "': ";
  if (buf.size() < 10 || !std::equal(magic.begin(), magic.end(), buf.begin()))
    throw FormatError(what + "bad magic, expected " + std::string(magic.begin(), magic.end()));
  const auto version = get_le(buf, 4, 2);
  if (version != kFormatVersion)
    throw FormatError(what + "unsupported format version " + std::to_string(version) +
                      " (this build reads " + std::to_string(kFormatVersion) + ")");
  const std::size_t hlen = get_le(buf, 6, 4);
  if (10 + hlen > buf.size()) throw FormatError(what + "truncated header");
  Container c;
  try {
    c.header = Json::parse(buf.substr(10, hlen));
  } catch (const Json::exception& e) {
    throw FormatError(what + "corrupt header: " + e.what());
  }
  std::size_t at = 10 + hlen;
  try {
    for (const auto& t : c.header.at("tensors")) {
      const auto rows = t.at("rows").get<std::size_t>(), cols = t.at("cols").get<std::size_t>();
      if (rows == 0 || cols == 0 || rows * cols > (buf.size() - at) / 8)
        throw FormatError(what + "payload too short for tensor " + t.at("name").get<std::string>());
      Matrix<double> m(rows, cols);
      for (double& v : m.data()) {
        v = std::bit_cast<double>(get_le(buf, at, 8));
        at += 8;
      }
      c.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const Json::exception& e) {
    throw FormatError(what + "corrupt tensor table: " + e.what());
  }
  if (at != buf.size()) throw FormatError(what + std::to_string(buf.size() - at) + " trailing bytes");
  return c;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  Json h;
  h["format"] = "krona-adapter";
  h["spec"] = to_json(ck.spec);
  if (ck.model) h["model"] = to_json(*ck.model);
  h["seeds"] = ck.seeds;
  h["metric"] = {{"best_epoch", ck.best_epoch}, {"eval_metric", ck.best_metric}};
  detail::write_container(path, kAdapterMagic, std::move(h), ck.tensors);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto c = detail::read_container(path, kAdapterMagic);
  Checkpoint ck;
  try {
    if (c.header.at("format") != "krona-adapter") throw FormatError("not an adapter checkpoint");
    ck.spec = from_json<AdapterSpec>(c.header.at("spec"), {}, "spec");
    if (c.header.contains("model"))
      ck.model = from_json<TransformerConfig>(c.header.at("model"), {}, "model");
    ck.seeds = c.header.at("seeds").get<std::map<std::string, std::uint64_t>>();
    ck.best_epoch = c.header.at("metric").at("best_epoch").get<std::size_t>();
    ck.best_metric = c.header.at("metric").at("eval_metric").get<double>();
  } catch (const Json::exception& e) {
    throw FormatError("'" + path.string() + "': corrupt header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  ck.tensors = std::move(c.tensors);
  return ck;
}

/// Loads and checks the adapter kind against what the caller expects.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, AdapterKind expected) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.spec.kind != expected)
    throw FormatError("'" + path.string() + "' holds a " + std::string(kind_name(ck.spec.kind)) +
                      " checkpoint, expected " + std::string(kind_name(expected)));
  return ck;
}

/// Adapter-only checkpoint of per-site states (no backbone tensors).
template <class T>
Checkpoint make_checkpoint(const std::map<SiteKey, AdapterState<T>>& states, const AdapterSpec& spec) {
  Checkpoint ck;
  ck.spec = spec;
  ck.seeds["adapter"] = spec.seed;
  for (const auto& [key, st] : states)
    for (const auto& [name, m] : st.tensors())
      ck.tensors.emplace_back(EncoderModel<T>::adapter_tensor_name(key, name), m->template cast<double>());
  return ck;
}

/// The model's trainable set (adapters, or biases for bitfit) as a checkpoint.
template <class T>
Checkpoint make_checkpoint(EncoderModel<T>& model) {
  if (!model.spec) throw SpecError("make_checkpoint: model has no adapter spec");
  Checkpoint ck;
  ck.spec = *model.spec;
  ck.model = model.config;
  ck.seeds["adapter"] = model.spec->seed;
  ck.seeds["model"] = model.config.seed;
  const auto names = select_trainable(model);
  for (auto& [name, m] : model.named_tensors())
    if (names.count(name)) ck.tensors.emplace_back(name, m->template cast<double>());
  return ck;
}

/// Attaches the checkpoint's adapters to a backbone (if not yet attached) and
/// overwrites the stored tensors.
template <class T>
void apply_checkpoint(EncoderModel<T>& model, const Checkpoint& ck) {
  if (ck.model && !(*ck.model == model.config))
    throw FormatError("checkpoint was trained on a different model configuration");
  if (!model.spec) attach_adapters(model, ck.spec);
  else if (model.spec->kind != ck.spec.kind)
    throw FormatError("checkpoint kind " + std::string(kind_name(ck.spec.kind)) +
                      " does not match attached " + std::string(kind_name(model.spec->kind)));
  for (const auto& [name, m] : ck.tensors) {
    Matrix<T>* dst = nullptr;
    for (auto& [n, t] : model.named_tensors())
      if (n == name) dst = t;
    if (!dst) throw FormatError("checkpoint tensor '" + name + "' has no counterpart in the model");
    if (dst->rows() != m.rows() || dst->cols() != m.cols())
      throw FormatError("checkpoint tensor '" + name + "' is " + m.shape() + ", model expects " + dst->shape());
    *dst = m.template cast<T>();
  }
}

// ---- backbone files -------------------------------------------------------------

template <class T>
void save_backbone(const EncoderModel<T>& model, const std::filesystem::path& path) {
  if (!model.adapters.empty()) throw SpecError("save_backbone: merge or detach adapters first");
  NamedTensors ts;
  for (const auto& p : model.params) ts.emplace_back(p.name, p.value.template cast<double>());
  Json h;
  h["format"] = "krona-backbone";
  h["model"] = to_json(model.config);
  detail::write_container(path, kBackboneMagic, std::move(h), ts);
}

template <class T = double>
EncoderModel<T> load_backbone(const std::filesystem::path& path) {
  auto c = detail::read_container(path, kBackboneMagic);
  TransformerConfig cfg;
  try {
    cfg = from_json<TransformerConfig>(c.header.at("model"), {}, "model");
  } catch (const Json::exception& e) {
    throw FormatError("'" + path.string() + "': corrupt header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  EncoderModel<T> m = build_model<T>(cfg);
  if (c.tensors.size() != m.params.size())
    throw FormatError("'" + path.string() + "': expected " + std::to_string(m.params.size()) +
                      " tensors, found " + std::to_string(c.tensors.size()));
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    auto& p = m.params[i];
    if (c.tensors[i].first != p.name || c.tensors[i].second.rows() != p.value.rows() ||
        c.tensors[i].second.cols() != p.value.cols())
      throw FormatError("'" + path.string() + "': tensor " + std::to_string(i) + " is '" +
                        c.tensors[i].first + "' " + c.tensors[i].second.shape() + ", expected '" +
                        p.name + "' " + p.value.shape());
    p.value = c.tensors[i].second.template cast<T>();
  }
  return m;
}

}  // namespace krona
