#include "neuroextract/volgrid/case_data.hpp"

#include <filesystem>

#include "neuroextract/volgrid/nifti.hpp"

namespace neuroextract::volgrid {

const Volume& CaseData::map(Contrast c) const {
  const auto& m = maps[static_cast<int>(c)];
  if (!m) throw Error(ErrorKind::Data, "case " + record.case_id + " has no " + to_string(c) + " map loaded");
  return *m;
}

const Geometry& CaseData::geometry() const {
  for (const auto& m : maps)
    if (m) return m->geometry();
  if (truth) return truth->geometry();
  throw Error(ErrorKind::Data, "case " + record.case_id + " has no volumes loaded");
}

CaseData load_case_data(const CaseRecord& record, std::span<const Contrast> contrasts, bool with_truth) {
  CaseData out;
  out.record = record;
  for (const Contrast c : contrasts) {
    const auto& p = record.map_path(c);
    if (p.empty() || !std::filesystem::exists(p))
      throw Error(ErrorKind::Data, "case " + record.case_id + " is missing the " + to_string(c) + " map");
    out.maps[static_cast<int>(c)] = read_nifti(p);
  }
  if (with_truth) {
    if (!record.truth_mask_path || !std::filesystem::exists(*record.truth_mask_path))
      throw Error(ErrorKind::Data, "case " + record.case_id + " has no truth mask");
    out.truth = read_mask(*record.truth_mask_path);
  }
  const Geometry* ref = nullptr;
  for (const auto& m : out.maps) {
    if (!m) continue;
    if (ref && !m->geometry().same_grid(*ref))
      throw Error(ErrorKind::Shape, "case " + record.case_id + " maps do not share a grid");
    ref = &m->geometry();
  }
  if (ref && out.truth && !out.truth->geometry().same_grid(*ref))
    throw Error(ErrorKind::Shape, "case " + record.case_id + " truth mask grid differs from its maps");
  return out;
}

}  // namespace neuroextract::volgrid
