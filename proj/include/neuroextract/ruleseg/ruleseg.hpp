#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuroextract/volgrid/volume.hpp"

namespace neuroextract::ruleseg {

using volgrid::Mask;
using volgrid::Volume;

enum class GradientThresholdMode {
  /// Otsu level of the gradient magnitude over the foreground, re-applied
  /// to the lower class `gradient_otsu_passes - 1` more times.
  Otsu,
  /// `gradient_threshold` used verbatim.
  Fixed,
};

/// Tunables for the seven-step classical extraction. Defaults were tuned on
/// the synthetic phantoms at 150 um isotropic.
struct RuleParams {
  double lo_percentile = 1.0;
  double hi_percentile = 99.0;
  double sobel_scale = 1.0;
  GradientThresholdMode gradient_mode = GradientThresholdMode::Otsu;
  double gradient_threshold = 0.0;
  /// One pass keeps the strongest edges only; the second pass also drops
  /// the partial-volume ramps that bridge brain and scalp.
  int gradient_otsu_passes = 2;
  /// Graph merge constant as a multiple of the number of graph vertices.
  double k_factor = 0.02;
  int min_segment_size = 100;
  int morphology_radius = 2;
  double mrf_beta = 1.0;
  int mrf_max_iters = 100;
  double brain_volume_min_mm3 = 300.0;
  double brain_volume_max_mm3 = 700.0;
  /// Fraction of volume-boundary voxels a mask may cover before it is
  /// declared a leak.
  double leak_boundary_fraction = 0.05;

  /// Throws Config naming the offending field.
  void validate() const;
};

struct SegmentLabels {
  volgrid::Geometry geometry;
  /// 0 for voxels outside the segmented region, else 1..count.
  std::vector<std::int32_t> labels;
  int count = 0;
  std::vector<std::size_t> sizes;
  std::vector<double> mean_intensity;
};

/// Maps percentile lo to 0 and hi to 1, clamped to [0, 1].
Volume normalize_contrast(const Volume& v, double lo, double hi);

/// 3D Sobel: derivative [-1 0 1] along one axis, smoothing [1 2 1] along the
/// other two, normalized so an affine field returns its exact gradient in
/// intensity per mm. Edge-clamped borders.
Volume sobel_gradient_magnitude(const Volume& v, double scale = 1.0);

/// Graph-based segmentation over 6-neighbour edges weighted by absolute
/// intensity difference. Edges are processed in (weight, lower index, upper
/// index) order; two components merge when the edge weight is no larger than
/// either internal difference plus k / |C|. Components smaller than
/// `min_size` are then merged along the cheapest remaining edges. When
/// `region` is given only voxels inside it take part; others get label 0.
SegmentLabels felzenszwalb_segment(const Volume& v, double k, int min_size, const Mask* region = nullptr);

enum class MorphologyOp { Open, Close, Fill };

/// Open/close use a discrete ball (dx^2 + dy^2 + dz^2 <= r^2); voxels beyond
/// the volume are ignored. Fill keeps everything except the background
/// reachable from the volume boundary through 6-connectivity.
Mask morphology(const Mask& m, MorphologyOp op, int radius);

struct MrfResult {
  Mask mask;
  /// Energy after initialization followed by one entry per sweep.
  std::vector<double> energies;
  int sweeps = 0;
  bool converged = false;
};

/// Binary Potts model with unary -ln(p_l + 1e-6) and pairwise beta over 6
/// neighbours, minimized by iterated conditional modes from the p > 0.5
/// labelling. A voxel changes label only when that strictly lowers its local
/// energy.
MrfResult mrf_regularize(const Volume& foreground_prob, double beta, int max_iters);

/// Total Potts energy of a labelling; exposed for verification.
double mrf_energy(const Volume& foreground_prob, const Mask& labels, double beta);

enum class RuleStatus { Ok, LeakWarning };

struct RuleResult {
  Mask mask;
  RuleStatus status = RuleStatus::Ok;
  std::vector<double> mrf_energies;
  int candidate_segments = 0;
  double brain_volume_mm3 = 0.0;
};

std::string to_string(RuleStatus s);

/// Classical extraction on an isotropic ADC baseline map:
///  1. Otsu foreground on the percentile-clamped intensities
///  2. percentile contrast normalization
///  3. adaptive non-local means
///  4. Sobel gradient magnitude
///  5. gradient threshold, graph segmentation of the low-gradient foreground,
///     segments brighter than the foreground Otsu level become candidates;
///     candidates then absorb adjacent high-gradient voxels brighter than half
///     the candidate mean
///  6. open, close, fill
///  7. MRF on the 1-voxel box-blurred candidate indicator
/// The result is the largest 6-connected component; when its volume falls
/// outside the expected range the status is LeakWarning. Throws
/// ExtractionFailed when there are no candidates, the result is empty, or it
/// covers more than `leak_boundary_fraction` of the boundary voxels.
RuleResult extract_brain_rule(const Volume& adc_base, const RuleParams& params = {});

}  // namespace neuroextract::ruleseg
