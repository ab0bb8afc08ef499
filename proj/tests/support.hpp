// Shared helpers for the test executables.
#pragma once

#include <cmath>
#include <cstdlib>
#include <limits>
#include <vector>
#include <filesystem>
#include <random>
#include <string>

#include "marmo/imgcore.hpp"

namespace marmo::test {

/// Fresh scratch directory under $MARMO_TMP (or the system temp dir).
inline std::filesystem::path scratch(const std::string& name) {
  const char* env = std::getenv("MARMO_TMP");
  const std::filesystem::path root = env ? std::filesystem::path(env) : std::filesystem::temp_directory_path() / "marmo";
  const auto dir = root / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Image random_image(int w, int h, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image img(w, h);
  for (double& v : img.data) v = u(rng);
  return img;
}

inline Stack3D random_stack(std::array<int, 3> dims, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Stack3D st(dims, {1.0, 1.0, 1.0});
  for (double& v : st.data) v = u(rng);
  return st;
}

inline double max_abs_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

/// Cuts a tiles_x x tiles_y grid of square tiles from `img` with the given
/// step; tile (i, j) has world offset (i, j) * step * pitch.
inline std::vector<Tile2D> cut_tiles(const Image& img, int tiles_x, int tiles_y, int tile, int step, double pitch = 1.0,
                                     double z_um = 0.0, Channel c = Channel::CR) {
  std::vector<Tile2D> out;
  for (int j = 0; j < tiles_y; ++j)
    for (int i = 0; i < tiles_x; ++i) {
      Tile2D t(tile, tile, c);
      t.index = j * tiles_x + i;
      t.pixel_pitch_um = pitch;
      t.world_offset_um = {i * step * pitch, j * step * pitch, z_um};
      for (int y = 0; y < tile; ++y)
        for (int x = 0; x < tile; ++x) t(x, y) = to_u16(img(i * step + x, j * step + y));
      out.push_back(std::move(t));
    }
  return out;
}

inline double psnr(const Image& a, const Image& b, double peak = 65535.0) {
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  const double mse = se / static_cast<double>(a.size());
  return mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(peak * peak / mse);
}

}  // namespace marmo::test
