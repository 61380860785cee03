#pragma once

#include <cstddef>
#include <span>

#include "json.hpp"

#include "neuroextract/volgrid/volume.hpp"

namespace neuroextract::prequal {

using volgrid::Mask;
using volgrid::Volume;

/// Per-scan quality summary computed against the Otsu foreground F and its
/// complement B:
///   snr  = mean(F) / sd(B)
///   cnr  = (mean(F) - mean(B)) / sd(B)
///   svnr = var(F) / var(B)
/// Population statistics throughout. A zero background spread makes the
/// ratios +infinity.
struct QAReport {
  double snr = 0.0;
  double cnr = 0.0;
  double svnr = 0.0;
  std::size_t foreground_voxels = 0;
  double otsu_threshold = 0.0;
};

/// Infinite ratios serialize as the string "inf".
nlohmann::json to_json(const QAReport& r);
QAReport qa_report_from_json(const nlohmann::json& j);

/// Voxelwise noise standard deviation estimate, same grid as its source.
struct NoiseMap {
  Volume sigma;
};

struct NlmParams {
  int patch_radius = 1;
  int search_radius = 2;
  /// Filtering strength h = h_factor * sigma(x).
  double h_factor = 0.4;
};

/// Histogram Otsu threshold. Candidate thresholds are the interior bin edges
/// min + k (max - min) / bins, k = 1..bins-1; class 0 holds values <= edge.
/// Ties in between-class variance resolve to the lower edge.
double otsu_threshold(std::span<const float> values, int bins = 256);

/// Voxels strictly above the Otsu threshold.
Mask foreground_mask(const Volume& v);

QAReport qa_metrics(const Volume& v);

/// MAD of pseudo-residuals: r(x) = sqrt(n/(n+1)) (v(x) - mean of the n face
/// neighbours), sigma(x) = 1.4826 * median |r| over the (2 radius + 1)^3
/// window clipped to the volume. n = 6 in the interior.
NoiseMap estimate_noise_map(const Volume& v, int radius = 2);

/// Adaptive non-local means. Each voxel becomes the weighted mean of the
/// centres of its search window with
///   w = exp(-max(0, d2 - 2 sigma(x)^2) / h^2),  h = h_factor * sigma(x),
/// d2 being the mean squared difference between the two patches. Where
/// sigma(x) = 0 only identical patches receive weight.
Volume denoise_nlm_adaptive(const Volume& v, const NoiseMap& noise, const NlmParams& params = {});

}  // namespace neuroextract::prequal
