#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dfq/quant/quantizer.hpp"

namespace dfq::quant {

enum class Strategy { minmax, ema, percentile, omse };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::minmax: return "minmax";
    case Strategy::ema: return "ema";
    case Strategy::percentile: return "percentile";
    case Strategy::omse: return "omse";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "minmax") return Strategy::minmax;
  if (s == "ema") return Strategy::ema;
  if (s == "percentile") return Strategy::percentile;
  if (s == "omse") return Strategy::omse;
  throw ConfigError("unknown calibration strategy '" + s + "' (expected minmax, ema, percentile or omse)");
}

struct ObserverOptions {
  double ema_decay = 0.9;
  double percentile = 1e-5;  // tail fraction trimmed on each side
  double omse_scale_lo = 0.5;
  double omse_scale_hi = 1.0;
  double omse_scale_step = 0.01;
};

/// Widens a collapsed range (lo == hi == c) to c -/+ max(|c|, 1) * 1e-6.
inline std::pair<double, double> widen_degenerate(double lo, double hi) {
  if (lo < hi) return {lo, hi};
  const double c = 0.5 * (lo + hi);
  const double eps = std::max(std::abs(c), 1.0) * 1e-6;
  return {c - eps, c + eps};
}

inline QuantParams make_params(int bits, double lo, double hi, Scheme scheme) {
  if (scheme == Scheme::symmetric) {
    const double m = widen_degenerate(0.0, std::max(std::abs(lo), std::abs(hi))).second;
    return QuantParams(bits, -m, m, scheme);
  }
  const auto [a, b] = widen_degenerate(lo, hi);
  return QuantParams(bits, a, b, scheme);
}

/// Linear-interpolation empirical quantile of sorted data, p in [0, 1].
inline double sorted_quantile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw StateError("quantile of an empty sample");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= sorted.size() || frac == 0.0) return sorted[std::min(lo, sorted.size() - 1)];
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

/// Streaming activation statistics for one quantisation site.
class Observer {
 public:
  explicit Observer(Strategy strategy = Strategy::minmax, ObserverOptions options = {})
      : strategy_(strategy), opt_(options) {
    if (!(opt_.ema_decay > 0.0 && opt_.ema_decay < 1.0)) throw ConfigError("ema decay must lie in (0, 1)");
    if (!(opt_.percentile >= 0.0 && opt_.percentile < 0.5)) throw ConfigError("percentile must lie in [0, 0.5)");
    if (!(opt_.omse_scale_step > 0.0 && opt_.omse_scale_lo > 0.0 && opt_.omse_scale_lo <= opt_.omse_scale_hi))
      throw ConfigError("bad OMSE scale grid");
  }

  Strategy strategy() const noexcept { return strategy_; }
  const ObserverOptions& options() const noexcept { return opt_; }
  bool empty() const noexcept { return batches_ == 0; }
  std::size_t batches() const noexcept { return batches_; }
  double running_min() const noexcept { return min_; }
  double running_max() const noexcept { return max_; }
  const std::vector<double>& buffer() const noexcept { return buffer_; }

  template <typename T>
  void observe(std::span<const T> batch) {
    if (batch.empty()) return;
    double bmin = std::numeric_limits<double>::infinity(), bmax = -bmin;
    for (T v : batch) {
      bmin = std::min(bmin, static_cast<double>(v));
      bmax = std::max(bmax, static_cast<double>(v));
    }
    if (strategy_ == Strategy::ema && batches_ > 0) {
      min_ = opt_.ema_decay * min_ + (1.0 - opt_.ema_decay) * bmin;
      max_ = opt_.ema_decay * max_ + (1.0 - opt_.ema_decay) * bmax;
    } else if (batches_ == 0) {
      min_ = bmin;
      max_ = bmax;
    } else {
      min_ = std::min(min_, bmin);
      max_ = std::max(max_, bmax);
    }
    if (strategy_ == Strategy::percentile || strategy_ == Strategy::omse) {
      buffer_.insert(buffer_.end(), batch.begin(), batch.end());
      sorted_ = false;
    }
    ++batches_;
  }

  /// Clip range from the strategy this observer was built with.
  QuantParams finalize(int bits, Scheme scheme) {
    switch (strategy_) {
      case Strategy::minmax:
      case Strategy::ema: return finalize_minmax(bits, scheme);
      case Strategy::percentile: return finalize_percentile(bits, scheme);
      case Strategy::omse: return finalize_omse(bits, scheme);
    }
    throw ConfigError("unknown strategy");
  }

  /// Running (or exponentially smoothed) extremes. Symmetric uses +/- max|v|.
  QuantParams finalize_minmax(int bits, Scheme scheme) const {
    require_data();
    return make_params(bits, min_, max_, scheme);
  }

  QuantParams finalize_percentile(int bits, Scheme scheme) {
    require_buffer();
    sort_buffer();
    return make_params(bits, sorted_quantile(buffer_, opt_.percentile),
                       sorted_quantile(buffer_, 1.0 - opt_.percentile), scheme);
  }

  /// Exhaustive search over s * (min, max) for s on the configured grid,
  /// minimising the buffer's squared fake-quantisation error. Scanned from the
  /// widest range down; only a strictly smaller error replaces the incumbent.
  QuantParams finalize_omse(int bits, Scheme scheme) const {
    require_buffer();
    const double lo = *std::min_element(buffer_.begin(), buffer_.end());
    const double hi = *std::max_element(buffer_.begin(), buffer_.end());
    const auto n = static_cast<long>(std::floor((opt_.omse_scale_hi - opt_.omse_scale_lo) / opt_.omse_scale_step + 1e-9));
    QuantParams best;
    double best_err = std::numeric_limits<double>::infinity();
    for (long i = n; i >= 0; --i) {
      const double s = opt_.omse_scale_hi - static_cast<double>(n - i) * opt_.omse_scale_step;
      const QuantParams qp = make_params(bits, s * lo, s * hi, scheme);
      const double err = quantization_sse(std::span<const double>(buffer_), qp);
      if (err < best_err) {
        best_err = err;
        best = qp;
      }
    }
    return best;
  }

 private:
  void require_data() const {
    if (batches_ == 0) throw StateError("observer has seen no data");
  }
  void require_buffer() const {
    if (buffer_.empty()) throw StateError("observer buffer is empty (strategy must be percentile or omse)");
  }
  void sort_buffer() {
    if (!sorted_) std::sort(buffer_.begin(), buffer_.end());
    sorted_ = true;
  }

  Strategy strategy_;
  ObserverOptions opt_;
  std::size_t batches_ = 0;
  double min_ = 0.0, max_ = 0.0;
  std::vector<double> buffer_;
  bool sorted_ = false;
};

}  // namespace dfq::quant
