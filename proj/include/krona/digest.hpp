#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <memory>
#include <set>
#include <string>

#include "krona/errors.hpp"
#include "krona/model.hpp"

namespace krona {

// Incremental SHA-256 over raw bytes (OpenSSL EVP).
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw Error("sha256: digest init failed");
  }

  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error("sha256: update failed");
  }

  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), out.data(), &len) != 1) throw Error("sha256: final failed");
    std::string s;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
      std::snprintf(buf, sizeof buf, "%02x", out[i]);
      s += buf;
    }
    return s;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

/// Digest of every backbone parameter not named in `exclude`, covering names,
/// shapes and raw value bytes in model order.
template <class T>
std::string backbone_digest(const EncoderModel<T>& model, const std::set<std::string>& exclude = {}) {
  Sha256 h;
  for (const auto& p : model.params) {
    if (exclude.count(p.name)) continue;
    h.update(p.name.data(), p.name.size());
    const std::uint64_t dims[2] = {p.value.rows(), p.value.cols()};
    h.update(dims, sizeof dims);
    h.update(p.value.data().data(), p.value.size() * sizeof(T));
  }
  return h.hex();
}

}  // namespace krona
