#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "dfq/quant/observer.hpp"

using namespace dfq;
using namespace dfq::quant;

namespace {

std::vector<double> dense_grid(const QuantParams& qp, std::size_t per_step) {
  const std::size_t n = static_cast<std::size_t>(qp.max_code()) * per_step;
  std::vector<double> v(n + 1);
  for (std::size_t i = 0; i <= n; ++i)
    v[i] = qp.clip_lo() + (qp.clip_hi() - qp.clip_lo()) * static_cast<double>(i) / static_cast<double>(n);
  return v;
}

}  // namespace

TEST(QuantParams, StepAndValidation) {
  const QuantParams qp(8, 0.0, 255.0, Scheme::asymmetric);
  EXPECT_DOUBLE_EQ(qp.step(), 1.0);
  EXPECT_EQ(qp.max_code(), 255);
  EXPECT_THROW(QuantParams(1, 0, 1, Scheme::asymmetric), ConfigError);
  EXPECT_THROW(QuantParams(32, 0, 1, Scheme::asymmetric), ConfigError);
  EXPECT_THROW(QuantParams(8, 1, 1, Scheme::asymmetric), ConfigError);
  EXPECT_THROW(QuantParams(8, 2, 1, Scheme::asymmetric), ConfigError);
  EXPECT_THROW(QuantParams(8, -1, 2, Scheme::symmetric), ConfigError);
  EXPECT_NO_THROW(QuantParams(8, -2, 2, Scheme::symmetric));
  EXPECT_THROW(parse_scheme("both"), ConfigError);
}

TEST(Quantize, UnitStepClipAndHalfAwayFromZero) {
  EXPECT_EQ(quantize_value(100.0, QuantParams(8, 0, 255, Scheme::asymmetric)), 100);
  EXPECT_EQ(quantize_value(-2.0, QuantParams(4, -1, 1, Scheme::symmetric)), 0);
  EXPECT_EQ(quantize_value(6.5, QuantParams(4, 0, 15, Scheme::asymmetric)), 7);
  EXPECT_EQ(quantize_value(99.0, QuantParams(4, 0, 15, Scheme::asymmetric)), 15);
}

TEST(Dequantize, EndpointsAndRangeCheck) {
  const QuantParams qp(4, -0.3, 1.2, Scheme::asymmetric);
  EXPECT_EQ(dequantize_value(0, qp), -0.3);
  EXPECT_DOUBLE_EQ(dequantize_value(15, qp), 1.2);
  EXPECT_THROW(dequantize_value(16, qp), ContractError);
  EXPECT_THROW(dequantize_value(-1, qp), ContractError);
}

TEST(FakeQuantize, RoundTripBoundOnDenseGrid) {
  // dyadic step and scan spacing: every quantity is exact, so the bound is checked without slack
  for (int k : {2, 4, 8}) {
    const double m = static_cast<double>((1 << k) - 1) / 8.0;
    const QuantParams qp(k, -m, 3 * m, Scheme::asymmetric);
    ASSERT_EQ(qp.step(), 0.5);
    const auto v = dense_grid(qp, 64);
    const auto fq = fake_quantize(std::span<const double>(v), qp);
    for (std::size_t i = 0; i < v.size(); ++i) ASSERT_LE(std::abs(v[i] - fq[i]), qp.step() / 2) << "k=" << k;
  }
}

TEST(FakeQuantize, RoundTripBoundOnArbitraryRange) {
  // ties at non-dyadic midpoints may round either way by one ulp
  for (int k : {2, 4, 8}) {
    const QuantParams qp(k, -1.7, 2.3, Scheme::asymmetric);
    const double ulps = 4 * std::numeric_limits<double>::epsilon() * 2.3;
    const auto v = dense_grid(qp, 64);
    const auto fq = fake_quantize(std::span<const double>(v), qp);
    for (std::size_t i = 0; i < v.size(); ++i) ASSERT_LE(std::abs(v[i] - fq[i]), qp.step() / 2 + ulps) << "k=" << k;
  }
}

TEST(FakeQuantize, OutOfRangeErrorIsDistanceToClip) {
  const QuantParams qp(4, -1, 1, Scheme::symmetric);
  for (double v : {-5.0, -1.25, 1.01, 3.0}) {
    const double fq = fake_quantize(std::span<const double>(&v, 1), qp)[0];
    const double clip = v < 0 ? -1.0 : 1.0;
    EXPECT_NEAR(std::abs(v - fq), std::abs(v - clip), qp.step() / 2);
  }
}

TEST(FakeQuantize, GridFixedPointsAndIdempotence) {
  for (int k : {2, 4, 8}) {
    const QuantParams qp(k, -0.77, 3.1, Scheme::asymmetric);
    std::vector<double> grid;
    for (std::int64_t n = 0; n <= qp.max_code(); ++n) grid.push_back(dequantize_value(n, qp));
    EXPECT_EQ(fake_quantize(std::span<const double>(grid), qp), grid);
    const auto v = dense_grid(qp, 7);
    const auto once = fake_quantize(std::span<const double>(v), qp);
    EXPECT_EQ(fake_quantize(std::span<const double>(once), qp), once);
  }
}

TEST(Quantize, MonotoneAndInRange) {
  const QuantParams qp(4, -1, 3, Scheme::asymmetric);
  std::int64_t prev = -1;
  for (double v = -3; v <= 5; v += 1e-3) {
    const auto c = quantize_value(v, qp);
    EXPECT_GE(c, prev);
    EXPECT_LE(c, qp.max_code());
    prev = c;
  }
}

TEST(Quantize, FloatTensorsStayOnGrid) {
  const QuantParams qp(8, -2, 2, Scheme::symmetric);
  std::vector<float> v{-3.f, -0.013f, 0.f, 1.999f};
  const auto codes = quantize(std::span<const float>(v), qp);
  const auto back = dequantize<float>(codes, qp);
  fake_quantize_inplace(std::span<float>(v), qp);
  EXPECT_EQ(v, back);
}

TEST(Observer, MinMaxAccumulates) {
  Observer obs(Strategy::minmax);
  const std::vector<double> a{1, 3}, b{-2, 2}, none;
  obs.observe(std::span<const double>(a));
  obs.observe(std::span<const double>(none));
  obs.observe(std::span<const double>(b));
  EXPECT_EQ(obs.batches(), 2u);
  const auto qp = obs.finalize(8, Scheme::asymmetric);
  EXPECT_EQ(qp.clip_lo(), -2);
  EXPECT_EQ(qp.clip_hi(), 3);
}

TEST(Observer, EmaRecurrence) {
  Observer obs(Strategy::ema, {.ema_decay = 0.9});
  const std::vector<double> a{0, 10}, b{0, 20};
  obs.observe(std::span<const double>(a));
  obs.observe(std::span<const double>(b));
  EXPECT_NEAR(obs.running_max(), 11.0, 1e-12);
  EXPECT_NEAR(obs.finalize(8, Scheme::asymmetric).clip_hi(), 11.0, 1e-12);
}

TEST(Observer, SingleBatchClipsStayWithinExtremes) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.3, 2.0);
  std::vector<double> v(5000);
  for (auto& x : v) x = n(rng);
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  for (auto s : {Strategy::minmax, Strategy::ema, Strategy::percentile, Strategy::omse}) {
    Observer obs(s);
    obs.observe(std::span<const double>(v));
    const auto qp = obs.finalize(8, Scheme::asymmetric);
    EXPECT_GE(qp.clip_lo(), *lo) << to_string(s);
    EXPECT_LE(qp.clip_hi(), *hi) << to_string(s);
  }
}

TEST(Observer, MinMaxSchemes) {
  Observer obs;
  const std::vector<double> v{-1, 0, 4};
  obs.observe(std::span<const double>(v));
  const auto a = obs.finalize_minmax(8, Scheme::asymmetric);
  const auto s = obs.finalize_minmax(8, Scheme::symmetric);
  EXPECT_EQ(std::pair(a.clip_lo(), a.clip_hi()), std::pair(-1.0, 4.0));
  EXPECT_EQ(std::pair(s.clip_lo(), s.clip_hi()), std::pair(-4.0, 4.0));
}

TEST(Observer, DegenerateRangeIsWidened) {
  for (double c : {0.0, 0.5, -250.0}) {
    Observer obs;
    const std::vector<double> v(10, c);
    obs.observe(std::span<const double>(v));
    const auto qp = obs.finalize(8, Scheme::asymmetric);
    const double eps = std::max(std::abs(c), 1.0) * 1e-6;
    EXPECT_DOUBLE_EQ(qp.clip_lo(), c - eps);
    EXPECT_DOUBLE_EQ(qp.clip_hi(), c + eps);
  }
}

TEST(Observer, PercentileQuantiles) {
  std::vector<double> v(100000);
  std::iota(v.begin(), v.end(), 1.0);
  std::shuffle(v.begin(), v.end(), std::mt19937_64(2));
  Observer obs(Strategy::percentile, {.percentile = 1e-5});
  obs.observe(std::span<const double>(v));
  const auto qp = obs.finalize(8, Scheme::asymmetric);
  EXPECT_NEAR(qp.clip_lo(), 1.99999, 1e-9);
  EXPECT_NEAR(qp.clip_hi(), 99999.00001, 1e-9);
}

TEST(Observer, PercentileZeroEqualsMinMax) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0.f, 1.f);
  std::vector<float> v(777);
  for (auto& x : v) x = n(rng);
  Observer p(Strategy::percentile, {.percentile = 0.0}), m(Strategy::minmax);
  p.observe(std::span<const float>(v));
  m.observe(std::span<const float>(v));
  EXPECT_EQ(p.finalize(8, Scheme::asymmetric), m.finalize(8, Scheme::asymmetric));
}

TEST(Observer, PercentileOfSymmetricDataIsSymmetric) {
  std::vector<double> v;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 3);
  for (int i = 0; i < 5000; ++i) {
    const double x = u(rng);
    v.push_back(x);
    v.push_back(-x);
  }
  Observer obs(Strategy::percentile, {.percentile = 0.01});
  obs.observe(std::span<const double>(v));
  const auto qp = obs.finalize(8, Scheme::asymmetric);
  EXPECT_NEAR(qp.clip_lo(), -qp.clip_hi(), 1e-9);
}

TEST(Observer, OmseOnGridDataKeepsMinMax) {
  const QuantParams grid(4, -1.5, 3.0, Scheme::asymmetric);
  std::vector<double> v;
  for (std::int64_t n = 0; n <= grid.max_code(); ++n) v.push_back(dequantize_value(n, grid));
  Observer obs(Strategy::omse);
  obs.observe(std::span<const double>(v));
  const auto qp = obs.finalize(4, Scheme::asymmetric);
  EXPECT_EQ(qp.clip_lo(), -1.5);
  EXPECT_EQ(qp.clip_hi(), 3.0);
  EXPECT_EQ(quantization_sse(std::span<const double>(v), qp), 0.0);
}

TEST(Observer, OmseClipsAnOutlier) {
  std::vector<double> v(999);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& x : v) x = u(rng);
  v.push_back(10.0);
  Observer obs(Strategy::omse);
  obs.observe(std::span<const double>(v));
  const auto qp = obs.finalize(4, Scheme::asymmetric);
  EXPECT_LT(qp.clip_hi(), 10.0);
  // exhaustive oracle over the same candidate scales
  double best = std::numeric_limits<double>::infinity(), best_hi = 0;
  for (int i = 100; i >= 50; --i) {
    const double s = i / 100.0;
    const QuantParams c = make_params(4, s * 0.0 + s * *std::min_element(v.begin(), v.end()), s * 10.0, Scheme::asymmetric);
    const double e = quantization_sse(std::span<const double>(v), c);
    if (e < best) best = e, best_hi = c.clip_hi();
  }
  EXPECT_NEAR(qp.clip_hi(), best_hi, 1e-12);
}

TEST(Observer, OmseNeverWorseThanMinMax) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::student_t_distribution<double> t(2.0);
    std::vector<double> v(400);
    for (auto& x : v) x = t(rng);
    Observer obs(Strategy::omse);
    obs.observe(std::span<const double>(v));
    for (int k : {2, 4, 8}) {
      const double omse = quantization_sse(std::span<const double>(v), obs.finalize_omse(k, Scheme::asymmetric));
      const double mm = quantization_sse(std::span<const double>(v), obs.finalize_minmax(k, Scheme::asymmetric));
      EXPECT_LE(omse, mm);
    }
  }
}

TEST(Observer, FinalizeIsIdempotentAndGuarded) {
  Observer empty(Strategy::omse);
  EXPECT_THROW(empty.finalize(8, Scheme::asymmetric), StateError);
  Observer mm;
  EXPECT_THROW(mm.finalize(8, Scheme::asymmetric), StateError);
  Observer p(Strategy::percentile);
  const std::vector<double> v{3, 1, 2, 9, -4};
  p.observe(std::span<const double>(v));
  EXPECT_EQ(p.finalize(4, Scheme::asymmetric), p.finalize(4, Scheme::asymmetric));
}

TEST(Observer, RejectsBadOptions) {
  EXPECT_THROW(parse_strategy("kl"), ConfigError);
  EXPECT_THROW(Observer(Strategy::ema, {.ema_decay = 1.0}), ConfigError);
  EXPECT_THROW(Observer(Strategy::percentile, {.percentile = 0.5}), ConfigError);
}

TEST(QuantParams, JsonRoundTrip) {
  const QuantParams qp(6, -0.25, 0.75, Scheme::asymmetric);
  const nlohmann::json j = qp;
  EXPECT_EQ(j.at("bits"), 6);
  EXPECT_DOUBLE_EQ(j.at("step").get<double>(), qp.step());
  EXPECT_EQ(j.get<QuantParams>(), qp);
}
