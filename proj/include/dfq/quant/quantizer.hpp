#pragma once

// Uniform k-bit quantisation:
//   code = round((clip(v, q0, qhi) - q0) / step),  step = (qhi - q0) / (2^k - 1)
// with round-half-away-from-zero.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfq/core/error.hpp"

namespace dfq::quant {

enum class Scheme { symmetric, asymmetric };

inline const char* to_string(Scheme s) { return s == Scheme::symmetric ? "symmetric" : "asymmetric"; }

inline Scheme parse_scheme(const std::string& s) {
  if (s == "symmetric") return Scheme::symmetric;
  if (s == "asymmetric") return Scheme::asymmetric;
  throw ConfigError("unknown quantization scheme '" + s + "'");
}

/// Bit widths at or above this value mean "do not quantise".
inline constexpr int kBypassBits = 32;

class QuantParams {
 public:
  QuantParams() = default;

  /// Validated constructor; throws ConfigError on bad bit width or clip pair.
  QuantParams(int bits, double clip_lo, double clip_hi, Scheme scheme)
      : bits_(bits), lo_(clip_lo), hi_(clip_hi), scheme_(scheme) {
    if (bits < 2 || bits >= kBypassBits) throw ConfigError("bit width must be in [2, 31], got " + std::to_string(bits));
    if (!std::isfinite(clip_lo) || !std::isfinite(clip_hi) || !(clip_lo < clip_hi))
      throw ConfigError("clip range must satisfy lo < hi, got (" + std::to_string(clip_lo) + ", " +
                        std::to_string(clip_hi) + ")");
    if (scheme == Scheme::symmetric && clip_lo != -clip_hi)
      throw ConfigError("symmetric quantization requires clip_lo == -clip_hi");
    step_ = (hi_ - lo_) / static_cast<double>(max_code());
  }

  int bits() const noexcept { return bits_; }
  double clip_lo() const noexcept { return lo_; }
  double clip_hi() const noexcept { return hi_; }
  double step() const noexcept { return step_; }
  Scheme scheme() const noexcept { return scheme_; }
  std::int64_t max_code() const noexcept { return (std::int64_t{1} << bits_) - 1; }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;

 private:
  int bits_ = 8;
  double lo_ = 0.0, hi_ = 1.0, step_ = 1.0 / 255.0;
  Scheme scheme_ = Scheme::asymmetric;
};

inline std::int64_t quantize_value(double v, const QuantParams& qp) {
  const double c = std::min(std::max(v, qp.clip_lo()), qp.clip_hi());
  const auto code = static_cast<std::int64_t>(std::round((c - qp.clip_lo()) / qp.step()));
  return std::min(code, qp.max_code());
}

inline double dequantize_value(std::int64_t code, const QuantParams& qp) {
  if (code < 0 || code > qp.max_code())
    throw ContractError("code " + std::to_string(code) + " outside [0, " + std::to_string(qp.max_code()) + "]");
  return static_cast<double>(code) * qp.step() + qp.clip_lo();
}

template <typename T>
std::vector<std::int64_t> quantize(std::span<const T> values, const QuantParams& qp) {
  std::vector<std::int64_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = quantize_value(static_cast<double>(values[i]), qp);
  return out;
}

template <typename T = double>
std::vector<T> dequantize(std::span<const std::int64_t> codes, const QuantParams& qp) {
  std::vector<T> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = static_cast<T>(dequantize_value(codes[i], qp));
  return out;
}

template <typename T>
void fake_quantize_inplace(std::span<T> values, const QuantParams& qp) {
  for (auto& v : values) v = static_cast<T>(dequantize_value(quantize_value(static_cast<double>(v), qp), qp));
}

template <typename T>
std::vector<T> fake_quantize(std::span<const T> values, const QuantParams& qp) {
  std::vector<T> out(values.begin(), values.end());
  fake_quantize_inplace(std::span<T>(out), qp);
  return out;
}

/// Sum of squared fake-quantisation errors.
template <typename T>
double quantization_sse(std::span<const T> values, const QuantParams& qp) {
  double s = 0;
  for (T v : values) {
    const double e = static_cast<double>(v) - dequantize_value(quantize_value(static_cast<double>(v), qp), qp);
    s += e * e;
  }
  return s;
}

inline void to_json(nlohmann::json& j, const QuantParams& qp) {
  j = nlohmann::json{{"bits", qp.bits()},
                     {"clip_lo", qp.clip_lo()},
                     {"clip_hi", qp.clip_hi()},
                     {"step", qp.step()},
                     {"scheme", to_string(qp.scheme())}};
}

inline void from_json(const nlohmann::json& j, QuantParams& qp) {
  qp = QuantParams(j.at("bits").get<int>(), j.at("clip_lo").get<double>(), j.at("clip_hi").get<double>(),
                   parse_scheme(j.at("scheme").get<std::string>()));
}

}  // namespace dfq::quant
