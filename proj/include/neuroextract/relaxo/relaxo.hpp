#pragma once

#include <optional>
#include <span>
#include <vector>

#include "neuroextract/volgrid/volume.hpp"

namespace neuroextract::relaxo {

using volgrid::Mask;
using volgrid::Volume;

/// Co-registered acquisitions sampled at increasing x (TE in ms or b in
/// s/mm^2).
struct DecaySeries {
  std::vector<double> x;
  std::vector<Volume> volumes;

  /// Throws Shape on length or geometry mismatch, Domain when x is not
  /// strictly increasing or has fewer than two entries.
  void validate() const;
};

/// base is the signal extrapolated to x = 0; rate is 1/ms for T2 series
/// (i.e. R2) and mm^2/s for diffusion series.
struct FitMaps {
  Volume base;
  Volume rate;
  Mask valid;
};

struct MonoexpFit {
  double base = 0.0;
  double rate = 0.0;
};

/// Log-linear least squares of ln s = ln base - rate * x over samples with
/// s > 1e-6 * max(s). Negative slopes clamp the rate to 0. Returns nullopt
/// when fewer than two samples qualify.
std::optional<MonoexpFit> fit_monoexp(std::span<const double> x, std::span<const double> s);

/// Voxelwise fit_monoexp; voxels without a usable fit get base = rate = 0 and
/// valid = 0.
FitMaps fit_series(const DecaySeries& series);

}  // namespace neuroextract::relaxo
