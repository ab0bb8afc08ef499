#include "marmo/imgcore.hpp"

#include <algorithm>
#include <cmath>

namespace marmo {

std::string_view channel_name(Channel c) {
  switch (c) {
    case Channel::CR: return "CR";
    case Channel::CG: return "CG";
    case Channel::CB: return "CB";
    case Channel::None: return "none";
  }
  return "none";
}

Channel parse_channel(std::string_view s) {
  if (s == "CR") return Channel::CR;
  if (s == "CG") return Channel::CG;
  if (s == "CB") return Channel::CB;
  if (s == "none") return Channel::None;
  throw FormatError("unknown channel tag '" + std::string(s) + "'");
}

Tile2D::Tile2D(int w, int h, Channel c, std::uint16_t fill) : width(w), height(h), channel(c) {
  if (w <= 0 || h <= 0) throw InvalidArgument("tile extent must be positive");
  pixels.assign(static_cast<std::size_t>(w) * h, fill);
}

Image Tile2D::to_image() const {
  Image img(width, height);
  std::transform(pixels.begin(), pixels.end(), img.data.begin(), [](std::uint16_t v) { return double(v); });
  return img;
}

std::uint16_t to_u16(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 65535.0) return 65535;
  return static_cast<std::uint16_t>(std::lround(v));
}

Tile2D tile_from_image(const Image& img, const Tile2D& like) {
  Tile2D t = like;
  t.width = img.width;
  t.height = img.height;
  t.pixels.resize(img.size());
  std::transform(img.data.begin(), img.data.end(), t.pixels.begin(), to_u16);
  return t;
}

Stack3D::Stack3D(std::array<int, 3> d, std::array<double, 3> voxel, Channel c, double fill)
    : dims(d), voxel_um(voxel), channel(c) {
  for (int i = 0; i < 3; ++i) {
    if (d[i] <= 0) throw InvalidArgument("stack dims must be positive");
    if (!(voxel[i] > 0.0)) throw InvalidArgument("voxel size must be positive");
  }
  data.assign(static_cast<std::size_t>(d[0]) * d[1] * d[2], fill);
}

Image Stack3D::slice(int z) const {
  if (z < 0 || z >= dims[2]) throw InvalidArgument("slice index out of range");
  Image img(dims[0], dims[1]);
  auto first = data.begin() + static_cast<std::ptrdiff_t>(index(0, 0, z));
  std::copy(first, first + static_cast<std::ptrdiff_t>(img.size()), img.data.begin());
  return img;
}

void Stack3D::set_slice(int z, const Image& img) {
  if (z < 0 || z >= dims[2]) throw InvalidArgument("slice index out of range");
  if (img.width != dims[0] || img.height != dims[1]) throw InvalidArgument("slice extent mismatch");
  std::copy(img.data.begin(), img.data.end(), data.begin() + static_cast<std::ptrdiff_t>(index(0, 0, z)));
}

Stack3D stack_from_slices(const std::vector<Image>& slices, std::array<double, 3> voxel, Channel c) {
  if (slices.empty()) throw InvalidArgument("no slices");
  Stack3D st({slices[0].width, slices[0].height, static_cast<int>(slices.size())}, voxel, c);
  for (std::size_t k = 0; k < slices.size(); ++k) st.set_slice(static_cast<int>(k), slices[k]);
  return st;
}

Stack3D downsample_stack(const Stack3D& src, std::array<double, 3> target) {
  std::array<std::vector<int>, 3> bin;
  std::array<int, 3> out_dims{};
  for (int a = 0; a < 3; ++a) {
    if (!(target[a] >= src.voxel_um[a])) {
      throw InvalidArgument("downsample_stack: target voxel smaller than source voxel on axis " + std::to_string(a));
    }
    const double ratio = src.voxel_um[a] / target[a];
    bin[a].resize(src.dims[a]);
    for (int j = 0; j < src.dims[a]; ++j) bin[a][j] = static_cast<int>(std::floor((j + 0.5) * ratio));
    out_dims[a] = bin[a].back() + 1;
  }
  Stack3D out(out_dims, target, src.channel);
  std::vector<double> count(out.size(), 0.0);
  for (int z = 0; z < src.nz(); ++z) {
    for (int y = 0; y < src.ny(); ++y) {
      const std::size_t row = (static_cast<std::size_t>(bin[2][z]) * out_dims[1] + bin[1][y]) * out_dims[0];
      const double* s = &src.data[src.index(0, y, z)];
      for (int x = 0; x < src.nx(); ++x) {
        out.data[row + bin[0][x]] += s[x];
        count[row + bin[0][x]] += 1.0;
      }
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] /= count[i];
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidArgument("gaussian sigma must be positive");
  const int r = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + r];
  }
  for (double& v : k) v /= sum;
  return k;
}

int mirror_index(long i, int n) {
  const long period = 2L * n;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<int>(m < n ? m : period - 1 - m);
}

namespace {

// Convolve `n` samples spaced by `stride` starting at `base` (in place via scratch).
void convolve_line(double* base, std::ptrdiff_t stride, int n, const std::vector<double>& k,
                   std::vector<double>& line) {
  const int r = static_cast<int>(k.size() / 2);
  line.resize(static_cast<std::size_t>(n) + 2 * r);
  for (int i = -r; i < n + r; ++i) line[i + r] = base[mirror_index(i, n) * stride];
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    const double* l = &line[i];
    for (std::size_t t = 0; t < k.size(); ++t) acc += k[t] * l[t];
    base[i * stride] = acc;
  }
}

}  // namespace

Image gaussian_blur(const Image& img, double sigma_px) {
  const auto k = gaussian_kernel(sigma_px);
  Image out = img;
  std::vector<double> line;
  for (int y = 0; y < out.height; ++y) convolve_line(&out(0, y), 1, out.width, k, line);
  for (int x = 0; x < out.width; ++x) convolve_line(&out(x, 0), out.width, out.height, k, line);
  return out;
}

Stack3D gaussian_blur(const Stack3D& st, std::array<double, 3> sigma_vox) {
  std::array<std::vector<double>, 3> k;
  for (int a = 0; a < 3; ++a) k[a] = gaussian_kernel(sigma_vox[a]);
  Stack3D out = st;
  std::vector<double> line;
  const auto nx = out.nx(), ny = out.ny(), nz = out.nz();
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y) convolve_line(&out(0, y, z), 1, nx, k[0], line);
  for (int z = 0; z < nz; ++z)
    for (int x = 0; x < nx; ++x) convolve_line(&out(x, 0, z), nx, ny, k[1], line);
  const std::ptrdiff_t zstride = static_cast<std::ptrdiff_t>(nx) * ny;
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) convolve_line(&out(x, y, 0), zstride, nz, k[2], line);
  return out;
}

Stack3D gaussian_blur_um(const Stack3D& st, double sigma_um) {
  if (!(sigma_um > 0.0)) throw InvalidArgument("gaussian sigma must be positive");
  return gaussian_blur(st, {sigma_um / st.voxel_um[0], sigma_um / st.voxel_um[1], sigma_um / st.voxel_um[2]});
}

}  // namespace marmo
