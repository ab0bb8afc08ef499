// Core image containers, coordinate conventions, resampling and file I/O.
//
// Coordinates: voxel (i, j, k) of a grid with voxel size s occupies the box
// [i*s, (i+1)*s) in physical units (µm); its center is at (i + 0.5) * s.
// All grids are stored x-fastest.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace marmo {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument values or incongruent shapes.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Imaging channel. `None` tags derived data (masks, labels, saliency).
enum class Channel { CR, CG, CB, None };

std::string_view channel_name(Channel c);
Channel parse_channel(std::string_view s);

template <typename T>
struct Grid2 {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Grid2() = default;
  Grid2(int w, int h, T fill = T{}) : width(w), height(h), data(checked_size(w, h), fill) {}

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] bool empty() const { return data.empty(); }
  [[nodiscard]] bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  T& operator()(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  const T& operator()(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

  template <typename U>
  [[nodiscard]] bool same_shape(const Grid2<U>& o) const {
    return width == o.width && height == o.height;
  }

  friend bool operator==(const Grid2&, const Grid2&) = default;

 private:
  static std::size_t checked_size(int w, int h) {
    if (w <= 0 || h <= 0) throw InvalidArgument("grid extent must be positive");
    return static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  }
};

using Image = Grid2<double>;
using Mask = Grid2<std::uint8_t>;

template <typename A, typename B>
void require_same_shape(const Grid2<A>& a, const Grid2<B>& b, std::string_view what) {
  if (!a.same_shape(b)) {
    throw InvalidArgument(std::string(what) + ": extent mismatch (" + std::to_string(a.width) + "x" +
                          std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                          std::to_string(b.height) + ")");
  }
}

/// A 16-bit microscope tile with its stage position.
struct Tile2D {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> pixels;
  Channel channel = Channel::CR;
  std::array<double, 3> world_offset_um{0.0, 0.0, 0.0};
  int index = 0;
  double pixel_pitch_um = 1.34;

  Tile2D() = default;
  Tile2D(int w, int h, Channel c, std::uint16_t fill = 0);

  std::uint16_t& operator()(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint16_t operator()(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

  [[nodiscard]] Image to_image() const;
  friend bool operator==(const Tile2D&, const Tile2D&) = default;
};

/// Round and clamp to [0, 65535].
std::uint16_t to_u16(double v);

/// Tile with the same metadata as `like` and pixels taken (rounded, clamped) from `img`.
Tile2D tile_from_image(const Image& img, const Tile2D& like);

struct Stack3D {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> voxel_um{1.0, 1.0, 1.0};
  Channel channel = Channel::None;
  std::vector<double> data;

  Stack3D() = default;
  Stack3D(std::array<int, 3> d, std::array<double, 3> voxel, Channel c = Channel::None, double fill = 0.0);

  [[nodiscard]] int nx() const { return dims[0]; }
  [[nodiscard]] int ny() const { return dims[1]; }
  [[nodiscard]] int nz() const { return dims[2]; }
  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
  }
  [[nodiscard]] bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }
  double& operator()(int x, int y, int z) { return data[index(x, y, z)]; }
  double operator()(int x, int y, int z) const { return data[index(x, y, z)]; }

  [[nodiscard]] Image slice(int z) const;
  void set_slice(int z, const Image& img);
  [[nodiscard]] bool same_grid(const Stack3D& o) const { return dims == o.dims; }

  friend bool operator==(const Stack3D&, const Stack3D&) = default;
};

/// Builds a stack from equally sized slices (slice k at z = k).
Stack3D stack_from_slices(const std::vector<Image>& slices, std::array<double, 3> voxel, Channel c);

// --- resampling and filtering ---------------------------------------------

/// Box average onto a coarser grid: each target voxel is the mean of the
/// source voxels whose centers fall inside it.
Stack3D downsample_stack(const Stack3D& src, std::array<double, 3> target_voxel_um);

/// Normalized Gaussian samples on [-r, r] with r = ceil(4 sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Index into [0, n) under half-sample symmetric reflection (d c b a | a b c d).
int mirror_index(long i, int n);

/// Separable Gaussian blur, sigma in pixels, mirror boundary.
Image gaussian_blur(const Image& img, double sigma_px);

/// Separable Gaussian blur with a per-axis sigma in voxels.
Stack3D gaussian_blur(const Stack3D& st, std::array<double, 3> sigma_vox);

/// Isotropic blur with sigma in µm, converted per axis through the voxel size.
Stack3D gaussian_blur_um(const Stack3D& st, double sigma_um);

// --- file I/O ---------------------------------------------------------------

enum class StorageType { U16, F32, F64 };

/// Binary PGM (P5, maxval 65535, big-endian) plus `<stem>.meta` sidecar.
void write_tile(const Tile2D& tile, const std::filesystem::path& pgm_path);
Tile2D read_tile(const std::filesystem::path& pgm_path);

/// `<prefix>.hdr` text header plus `<prefix>.raw` little-endian payload.
void write_stack(const Stack3D& st, const std::filesystem::path& prefix, StorageType type = StorageType::F32);
Stack3D read_stack(const std::filesystem::path& prefix);

/// Strip a trailing `.hdr` / `.raw` if present.
std::filesystem::path stack_prefix(const std::filesystem::path& p);

}  // namespace marmo
