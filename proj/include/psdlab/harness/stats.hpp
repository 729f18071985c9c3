#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "psdlab/errors.hpp"
#include "psdlab/rng.hpp"

namespace psdlab::harness {

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw ParameterError("mean: empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

inline double sample_stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / double(v.size() - 1));
}

struct BootstrapCI {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;
  int resamples = 0;
  double level = 0.95;
};

/// Percentile bootstrap interval for the mean of `x`.
inline BootstrapCI bootstrap_mean_ci(const std::vector<double>& x, int resamples = 10000, double level = 0.95,
                                     std::uint64_t seed = 0) {
  if (x.empty()) throw ParameterError("bootstrap_mean_ci: empty sample");
  if (resamples < 1) throw ParameterError("bootstrap_mean_ci: resamples must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw ParameterError("bootstrap_mean_ci: level must lie in (0,1)");
  Rng rng(seed, "bootstrap");
  const int n = static_cast<int>(x.size());
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += x[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
    m = s / double(n);
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * double(resamples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, means.size() - 1);
    return means[lo] + (pos - double(lo)) * (means[hi] - means[lo]);
  };
  const double tail = 0.5 * (1.0 - level);
  return {mean(x), quantile(tail), quantile(1.0 - tail), resamples, level};
}

/// Paired differences a_i - b_i and their bootstrap interval.
inline BootstrapCI paired_bootstrap(const std::vector<double>& a, const std::vector<double>& b,
                                    int resamples = 10000, double level = 0.95, std::uint64_t seed = 0) {
  if (a.size() != b.size()) throw ShapeError("paired_bootstrap: samples differ in length");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return bootstrap_mean_ci(d, resamples, level, seed);
}

/// Trailing moving average; the first entries average what is available.
inline std::vector<double> moving_average(const std::vector<double>& v, int window) {
  if (window < 1) throw ParameterError("moving_average: window must be >= 1");
  std::vector<double> out(v.size());
  const auto w = static_cast<std::size_t>(window);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t lo = i + 1 >= w ? i + 1 - w : 0;
    double acc = 0.0;
    for (std::size_t j = lo; j <= i; ++j) acc += v[j];
    out[i] = acc / double(i + 1 - lo);
  }
  return out;
}

/// Means of consecutive non-overlapping windows; a trailing partial window
/// is dropped.
inline std::vector<double> block_means(const std::vector<double>& v, int window) {
  if (window < 1) throw ParameterError("block_means: window must be >= 1");
  std::vector<double> out;
  const auto w = static_cast<std::size_t>(window);
  for (std::size_t i = 0; i + w <= v.size(); i += w) {
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) s += v[i + j];
    out.push_back(s / double(w));
  }
  return out;
}

/// Counts consecutive steps with v[i] >= v[i-1].
struct TrendCount {
  int non_decreasing = 0;
  int total = 0;
};

inline TrendCount count_non_decreasing(const std::vector<double>& v) {
  TrendCount c;
  for (std::size_t i = 1; i < v.size(); ++i) {
    ++c.total;
    if (v[i] >= v[i - 1]) ++c.non_decreasing;
  }
  return c;
}

}  // namespace psdlab::harness
