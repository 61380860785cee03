#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "neuroextract/core/error.hpp"

namespace neuroextract {

/// Percentile p in [0, 100] with linear interpolation between order
/// statistics (rank = p/100 * (n - 1)). Takes its argument by value because
/// it partially reorders it.
inline double percentile(std::vector<float> values, double p) {
  if (values.empty()) throw Error(ErrorKind::DegenerateInput, "percentile of an empty set");
  p = std::clamp(p, 0.0, 100.0);
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + lo, values.end());
  const double a = values[lo];
  if (hi == lo) return a;
  const double b = *std::min_element(values.begin() + lo + 1, values.end());
  return a + (rank - static_cast<double>(lo)) * (b - a);
}

}  // namespace neuroextract
