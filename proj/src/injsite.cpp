#include "marmo/injsite.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "marmo/textio.hpp"

namespace marmo {

namespace {

// Sampled Gaussian and its first and second derivatives, normalized so that
// they act exactly on constants, ramps and parabolas.
std::array<std::vector<double>, 3> gaussian_derivative_kernels(double sigma) {
  const int r = static_cast<int>(std::ceil(5.0 * sigma));
  const std::size_t n = 2 * static_cast<std::size_t>(r) + 1;
  std::array<std::vector<double>, 3> k{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
  const double s2 = sigma * sigma;
  double sum0 = 0.0;
  for (int t = -r; t <= r; ++t) sum0 += k[0][t + r] = std::exp(-0.5 * t * t / s2);
  for (double& v : k[0]) v /= sum0;
  double m1 = 0.0, c2 = 0.0;
  for (int t = -r; t <= r; ++t) {
    const double g = k[0][t + r];
    k[1][t + r] = -t / s2 * g;
    k[2][t + r] = (t * t / s2 - 1.0) / s2 * g;
    m1 -= t * k[1][t + r];
    c2 += k[2][t + r];
  }
  double m2 = 0.0;
  for (int t = -r; t <= r; ++t) {
    k[1][t + r] /= m1;
    k[2][t + r] -= c2 * k[0][t + r];
    m2 += 0.5 * t * t * k[2][t + r];
  }
  for (double& v : k[2]) v /= m2;
  return k;
}

// out(x, y) = sum img(x - i, y - j) kx(i) ky(j), mirrored at the borders.
Image separable_convolve(const Image& img, const std::vector<double>& kx, const std::vector<double>& ky) {
  const int w = img.width, h = img.height;
  const int rx = static_cast<int>(kx.size() / 2), ry = static_cast<int>(ky.size() / 2);
  Image rows(w, h), out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -rx; i <= rx; ++i) acc += kx[i + rx] * img(mirror_index(x - i, w), y);
      rows(x, y) = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = -ry; j <= ry; ++j) acc += ky[j + ry] * rows(x, mirror_index(y - j, h));
      out(x, y) = acc;
    }
  return out;
}

struct UnionFind {
  std::vector<int> parent;
  int make() {
    parent.push_back(static_cast<int>(parent.size()));
    return parent.back();
  }
  int find(int a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

ComponentLabels label_components(const Stack3D& binary, Connectivity conn) {
  const int nx = binary.nx(), ny = binary.ny(), nz = binary.nz();
  // Already-visited neighbours in raster order.
  std::vector<std::array<int, 3>> back;
  if (conn == Connectivity::Six) {
    back = {{-1, 0, 0}, {0, -1, 0}, {0, 0, -1}};
  } else {
    for (int dz = -1; dz <= 0; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
          back.push_back({dx, dy, dz});
        }
  }

  std::vector<int> provisional(binary.size(), -1);
  UnionFind uf;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const std::size_t i = binary.index(x, y, z);
        if (binary.data[i] == 0.0) continue;
        int label = -1;
        for (const auto& d : back) {
          const int xx = x + d[0], yy = y + d[1], zz = z + d[2];
          if (!binary.contains(xx, yy, zz)) continue;
          const int l = provisional[binary.index(xx, yy, zz)];
          if (l < 0) continue;
          if (label < 0) {
            label = l;
          } else {
            uf.unite(label, l);
          }
        }
        provisional[i] = label >= 0 ? label : uf.make();
      }

  ComponentLabels out;
  out.labels.assign(binary.size(), 0);
  out.sizes.assign(1, 0);
  out.first_index.assign(1, 0);
  std::vector<int> final_of_root(uf.parent.size(), 0);
  for (std::size_t i = 0; i < provisional.size(); ++i) {
    if (provisional[i] < 0) continue;
    const int root = uf.find(provisional[i]);
    if (final_of_root[root] == 0) {
      final_of_root[root] = static_cast<int>(out.sizes.size());
      out.sizes.push_back(0);
      out.first_index.push_back(i);
    }
    const int l = final_of_root[root];
    out.labels[i] = l;
    ++out.sizes[l];
  }
  return out;
}

Stack3D largest_component(const Stack3D& binary, Connectivity conn) {
  const auto cc = label_components(binary, conn);
  Stack3D out = binary;
  std::fill(out.data.begin(), out.data.end(), 0.0);
  if (cc.sizes.size() <= 1) return out;
  // Labels are numbered by first appearance, so the first maximum has the smallest index.
  std::size_t best = 1;
  for (std::size_t l = 2; l < cc.sizes.size(); ++l)
    if (cc.sizes[l] > cc.sizes[best]) best = l;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (cc.labels[i] == static_cast<int>(best)) out.data[i] = 1.0;
  return out;
}

Stack3D threshold_half_max(const Stack3D& smoothed, double* t_low) {
  const double mx = *std::max_element(smoothed.data.begin(), smoothed.data.end());
  const double t = 0.5 * mx;
  if (t_low) *t_low = t;
  Stack3D out = smoothed;
  for (double& v : out.data) v = v > t ? 1.0 : 0.0;
  return out;
}

InjectionMask rough_localize(const Stack3D& low_cb, double t_raw, double sigma_um) {
  InjectionMask m;
  m.t_raw = t_raw;
  Stack3D candidates = low_cb;
  candidates.channel = Channel::None;
  bool any = false;
  for (double& v : candidates.data) {
    v = v > t_raw ? 1.0 : 0.0;
    any = any || v > 0.0;
  }
  if (!any) {
    m.mask = candidates;
    m.smoothed = candidates;
    m.empty = true;
    return m;
  }
  m.smoothed = gaussian_blur_um(candidates, sigma_um);
  m.mask = largest_component(threshold_half_max(m.smoothed, &m.t_low), Connectivity::Six);
  m.empty = std::none_of(m.mask.data.begin(), m.mask.data.end(), [](double v) { return v > 0.0; });
  return m;
}

Image hessian_response(const Image& img, double sigma_px) {
  constexpr double eps = 1e-12;
  const auto k = gaussian_derivative_kernels(sigma_px);
  const Image ixx = separable_convolve(img, k[2], k[0]);
  const Image iyy = separable_convolve(img, k[0], k[2]);
  const Image ixy = separable_convolve(img, k[1], k[1]);
  Image out(img.width, img.height, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double dxx = ixx.data[i], dyy = iyy.data[i], dxy = ixy.data[i];
    const double mean = 0.5 * (dxx + dyy);
    const double rad = std::sqrt(0.25 * (dxx - dyy) * (dxx - dyy) + dxy * dxy);
    double l1 = mean + rad, l2 = mean - rad;
    if (std::abs(l2) > std::abs(l1)) std::swap(l1, l2);
    out.data[i] = l2 < 0.0 ? -l1 * std::abs(l2) / (std::abs(l1) + eps) : 0.0;
  }
  return out;
}

Image hessian_cell_filter(const Image& img, std::span<const double> sigmas_px) {
  if (sigmas_px.empty()) throw InvalidArgument("hessian_cell_filter: no scales");
  for (double s : sigmas_px)
    if (!(s > 0.0)) throw InvalidArgument("hessian_cell_filter: scales must be positive");
  Image best = hessian_response(img, sigmas_px[0]);
  for (std::size_t k = 1; k < sigmas_px.size(); ++k) {
    const Image r = hessian_response(img, sigmas_px[k]);
    for (std::size_t i = 0; i < best.size(); ++i) best.data[i] = std::max(best.data[i], r.data[i]);
  }
  return best;
}

CellPointCloud local_maxima(const Image& s, double threshold, int z) {
  CellPointCloud out;
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const double v = s(x, y);
      if (!(v > threshold)) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if ((dx == 0 && dy == 0) || !s.contains(x + dx, y + dy)) continue;
          if (!(v > s(x + dx, y + dy))) {
            is_max = false;
            break;
          }
        }
      if (is_max) out.push_back({x, y, z, v});
    }
  }
  return out;
}

CellPointCloud detect_cells(const Stack3D& saliency, double t_high, const Roi* roi) {
  CellPointCloud out;
  for (int z = 0; z < saliency.nz(); ++z) {
    const PixelRect* rect = nullptr;
    if (roi) {
      const auto it = roi->rects.find(z);
      if (it == roi->rects.end()) continue;
      rect = &it->second;
    }
    for (const auto& p : local_maxima(saliency.slice(z), t_high, z))
      if (!rect || rect->contains(p.x, p.y)) out.push_back(p);
  }
  return out;
}

Roi roi_from_mask(const Stack3D& mask, std::array<int, 2> high_extent, double high_pitch_um, double low_voxel_um,
                  int pad_px) {
  if (!(high_pitch_um > 0.0) || !(low_voxel_um > 0.0)) throw InvalidArgument("roi_from_mask: bad voxel sizes");
  const double s = low_voxel_um / high_pitch_um;
  Roi roi;
  roi.z_min = mask.nz();
  for (int z = 0; z < mask.nz(); ++z) {
    long x0 = std::numeric_limits<long>::max(), y0 = x0, x1 = std::numeric_limits<long>::min(), y1 = x1;
    for (int y = 0; y < mask.ny(); ++y)
      for (int x = 0; x < mask.nx(); ++x) {
        if (mask(x, y, z) == 0.0) continue;
        x0 = std::min(x0, std::lround(x * s));
        y0 = std::min(y0, std::lround(y * s));
        x1 = std::max(x1, std::lround((x + 1) * s));
        y1 = std::max(y1, std::lround((y + 1) * s));
      }
    if (x1 < x0) continue;
    PixelRect r;
    r.x0 = static_cast<int>(std::clamp<long>(x0 - pad_px, 0, high_extent[0]));
    r.y0 = static_cast<int>(std::clamp<long>(y0 - pad_px, 0, high_extent[1]));
    r.x1 = static_cast<int>(std::clamp<long>(x1 + pad_px, 0, high_extent[0]));
    r.y1 = static_cast<int>(std::clamp<long>(y1 + pad_px, 0, high_extent[1]));
    if (r.width() <= 0 || r.height() <= 0) continue;
    roi.rects[z] = r;
    roi.z_min = std::min(roi.z_min, z);
    roi.z_max = std::max(roi.z_max, z);
  }
  if (roi.rects.empty()) throw InvalidArgument("roi_from_mask: empty mask");
  return roi;
}

void write_cells(const CellPointCloud& cells, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& c : cells) out << c.x << ' ' << c.y << ' ' << c.z << ' ' << format_double(c.score) << '\n';
}

CellPointCloud read_cells(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  CellPointCloud cells;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto parts = split_ws(t);
    if (parts.size() != 4) throw FormatError(path.string() + ": expected 'x y z score'");
    cells.push_back({static_cast<int>(parse_int(parts[0])), static_cast<int>(parse_int(parts[1])),
                     static_cast<int>(parse_int(parts[2])), parse_double(parts[3])});
  }
  return cells;
}

}  // namespace marmo
