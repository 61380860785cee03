#include "neuroextract/evalharness/dice.hpp"

namespace neuroextract::evalharness {

double dice(const volgrid::Mask& a, const volgrid::Mask& b) {
  if (!a.geometry().same_grid(b.geometry())) throw Error(ErrorKind::Shape, "dice: masks are on different grids");
  std::size_t both = 0, total = 0;
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    both += da[i] & db[i];
    total += da[i] + db[i];
  }
  if (total == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(total);
}

}  // namespace neuroextract::evalharness
