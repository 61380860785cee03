#include "neuroextract/volgrid/components.hpp"

#include <algorithm>
#include <numeric>

namespace neuroextract::volgrid {

ComponentLabels connected_components(const Mask& m, int connectivity) {
  if (connectivity != 6 && connectivity != 26)
    throw Error(ErrorKind::Config, "connectivity must be 6 or 26");
  const Dims& d = m.dims();
  const Geometry& g = m.geometry();
  std::vector<std::array<int, 3>> offsets;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (connectivity == 6 && manhattan != 1) continue;
        offsets.push_back({dx, dy, dz});
      }

  std::vector<std::int32_t> raw(m.size(), 0);
  std::vector<std::size_t> raw_sizes;
  std::vector<std::size_t> queue;
  queue.reserve(1024);
  const auto src = m.data();
  for (std::size_t seed = 0; seed < src.size(); ++seed) {
    if (!src[seed] || raw[seed]) continue;
    const std::int32_t label = static_cast<std::int32_t>(raw_sizes.size()) + 1;
    raw[seed] = label;
    queue.clear();
    queue.push_back(seed);
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const std::size_t i = queue[head];
      const int x = static_cast<int>(i % d[0]);
      const int y = static_cast<int>((i / d[0]) % d[1]);
      const int z = static_cast<int>(i / (static_cast<std::size_t>(d[0]) * d[1]));
      for (const auto& o : offsets) {
        const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
        if (nx < 0 || ny < 0 || nz < 0 || nx >= d[0] || ny >= d[1] || nz >= d[2]) continue;
        const std::size_t j = g.index(nx, ny, nz);
        if (src[j] && !raw[j]) {
          raw[j] = label;
          queue.push_back(j);
        }
      }
    }
    raw_sizes.push_back(queue.size());
  }

  // Discovery order is already ascending by smallest member index, so a
  // stable sort on size yields the required tie-break.
  std::vector<std::int32_t> order(raw_sizes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int32_t a, std::int32_t b) { return raw_sizes[a] > raw_sizes[b]; });
  std::vector<std::int32_t> remap(raw_sizes.size() + 1, 0);
  ComponentLabels out;
  out.geometry = g;
  out.sizes.reserve(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    remap[order[k] + 1] = static_cast<std::int32_t>(k) + 1;
    out.sizes.push_back(raw_sizes[order[k]]);
  }
  for (auto& l : raw) l = remap[l];
  out.labels = std::move(raw);
  return out;
}

Mask largest_component(const Mask& m, int connectivity) {
  const ComponentLabels cc = connected_components(m, connectivity);
  std::vector<std::uint8_t> out(m.size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cc.labels[i] == 1 ? 1 : 0;
  return Mask(m.geometry(), std::move(out));
}

}  // namespace neuroextract::volgrid
