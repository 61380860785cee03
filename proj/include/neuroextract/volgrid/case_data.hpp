#pragma once

#include <array>
#include <optional>
#include <span>

#include "neuroextract/core/case_record.hpp"
#include "neuroextract/volgrid/volume.hpp"

namespace neuroextract::volgrid {

/// A case with its quantitative maps (and truth, when known) in memory.
struct CaseData {
  CaseRecord record;
  std::array<std::optional<Volume>, 4> maps;
  std::optional<Mask> truth;

  bool has(Contrast c) const { return maps[static_cast<int>(c)].has_value(); }
  /// Throws Data when the contrast was not loaded.
  const Volume& map(Contrast c) const;
  const Geometry& geometry() const;
};

/// Loads the requested maps (and the iso truth mask when `with_truth`).
/// Missing files or records without the map raise Data errors.
CaseData load_case_data(const CaseRecord& record, std::span<const Contrast> contrasts = kAllContrasts,
                        bool with_truth = true);

}  // namespace neuroextract::volgrid
