#include "marmo/tracerseg.hpp"

#include <algorithm>
#include <string>

namespace marmo {

Image background_subtract(const Image& cg, const Image& cr, double t) {
  require_same_shape(cg, cr, "background_subtract");
  if (!(t > 0.0)) throw InvalidArgument("background_subtract: factor must be positive");
  Image out(cg.width, cg.height, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double scaled = t * cr.data[i];
    out.data[i] = cg.data[i] < scaled ? 0.0 : cg.data[i] - scaled;
  }
  return out;
}

std::pair<Mask, Mask> double_threshold(const Image& T, double hi, double lo) {
  if (!(lo > 0.0) || !(lo < hi)) {
    throw InvalidArgument("double_threshold: need 0 < lo < hi (lo=" + std::to_string(lo) + ", hi=" + std::to_string(hi) + ")");
  }
  Mask hm(T.width, T.height, 0), lm(T.width, T.height, 0);
  for (std::size_t i = 0; i < T.size(); ++i) {
    hm.data[i] = T.data[i] > hi;
    lm.data[i] = T.data[i] > lo;
  }
  return {hm, lm};
}

std::vector<int> label_components_2d(const Mask& m, int* count) {
  std::vector<int> parent;
  auto find = [&](int a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  };
  std::vector<int> prov(m.size(), -1);
  constexpr int back[4][2] = {{-1, -1}, {0, -1}, {1, -1}, {-1, 0}};
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m(x, y)) continue;
      int label = -1;
      for (const auto& d : back) {
        const int xx = x + d[0], yy = y + d[1];
        if (!m.contains(xx, yy)) continue;
        const int l = prov[static_cast<std::size_t>(yy) * m.width + xx];
        if (l < 0) continue;
        if (label < 0) {
          label = l;
        } else {
          const int a = find(label), b = find(l);
          if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
      }
      if (label < 0) {
        label = static_cast<int>(parent.size());
        parent.push_back(label);
      }
      prov[static_cast<std::size_t>(y) * m.width + x] = label;
    }
  std::vector<int> final_of_root(parent.size(), 0);
  int n = 0;
  std::vector<int> labels(m.size(), 0);
  for (std::size_t i = 0; i < prov.size(); ++i) {
    if (prov[i] < 0) continue;
    const int r = find(prov[i]);
    if (final_of_root[r] == 0) final_of_root[r] = ++n;
    labels[i] = final_of_root[r];
  }
  if (count) *count = n;
  return labels;
}

Mask morph_reconstruct(const Mask& marker, const Mask& mask) {
  require_same_shape(marker, mask, "morph_reconstruct");
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (marker.data[i] && !mask.data[i]) throw InvalidArgument("morph_reconstruct: marker is not a subset of the mask");
  int n = 0;
  const auto labels = label_components_2d(mask, &n);
  std::vector<char> keep(static_cast<std::size_t>(n) + 1, 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (marker.data[i]) keep[labels[i]] = 1;
  Mask out(mask.width, mask.height, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) out.data[i] = labels[i] > 0 && keep[labels[i]];
  return out;
}

std::vector<std::array<int, 2>> disk_offsets(int radius) {
  if (radius < 1) throw InvalidArgument("disk radius must be >= 1");
  std::vector<std::array<int, 2>> off;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) off.push_back({dx, dy});
  return off;
}

Mask dilate(const Mask& m, int radius) {
  const auto off = disk_offsets(radius);
  Mask out(m.width, m.height, 0);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m(x, y)) continue;
      for (const auto& d : off)
        if (out.contains(x + d[0], y + d[1])) out(x + d[0], y + d[1]) = 1;
    }
  return out;
}

Mask erode(const Mask& m, int radius) {
  const auto off = disk_offsets(radius);
  Mask out(m.width, m.height, 0);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m(x, y)) continue;
      bool all = true;
      for (const auto& d : off) {
        const int xx = x + d[0], yy = y + d[1];
        if (m.contains(xx, yy) && !m(xx, yy)) {
          all = false;
          break;
        }
      }
      out(x, y) = all;
    }
  return out;
}

Mask morph_close(const Mask& m, int radius) { return erode(dilate(m, radius), radius); }

TracerLabel compose_label(const Image& saliency, const Image& T, double theta) {
  require_same_shape(saliency, T, "compose_label");
  TracerLabel out{Mask(T.width, T.height, 0), Image(T.width, T.height, 0.0)};
  for (std::size_t i = 0; i < T.size(); ++i) {
    out.mask.data[i] = saliency.data[i] > theta;
    out.signal.data[i] = out.mask.data[i] ? T.data[i] : 0.0;
  }
  return out;
}

TracerLabel threshold_pipeline(const Image& cg, const Image& cr, const ThresholdParams& p) {
  const Image T = background_subtract(cg, cr, p.t);
  const auto [hi, lo] = double_threshold(T, p.hi, p.lo);
  TracerLabel out;
  out.mask = morph_close(morph_reconstruct(hi, lo), p.close_radius);
  out.signal = Image(T.width, T.height, 0.0);
  for (std::size_t i = 0; i < T.size(); ++i) out.signal.data[i] = out.mask.data[i] ? T.data[i] : 0.0;
  return out;
}

}  // namespace marmo
