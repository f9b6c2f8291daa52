#pragma once

#include <openssl/evp.h>

#include <cstdio>
#include <memory>
#include <string>

#include "dfq/vit/params.hpp"

namespace dfq::vit {

/// SHA-256 over every tensor's name, shape and raw bytes, as lowercase hex.
template <typename T>
std::string parameter_digest(const ParameterSet<T>& params) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  params.for_each([&](const std::string& name, const Tensor<T>& t, bool) {
    EVP_DigestUpdate(ctx.get(), name.data(), name.size());
    for (std::size_t d : t.shape()) {
      const auto dim = static_cast<std::uint64_t>(d);
      EVP_DigestUpdate(ctx.get(), &dim, sizeof dim);
    }
    EVP_DigestUpdate(ctx.get(), t.ptr(), t.size() * sizeof(T));
  });
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

}  // namespace dfq::vit
