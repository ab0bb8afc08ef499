// Multiplicative shading (vignette) estimation and flat-field correction.
//
// Observed tiles follow I = I_true * F (no darkfield term). Averaging many
// tiles with outlier pixels excluded gives F up to a constant; the estimate is
// divided by its own grid mean so it has mean 1.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "marmo/imgcore.hpp"

namespace marmo {

struct ShadingField {
  int width = 0;
  int height = 0;
  Channel channel = Channel::CR;
  std::vector<double> values;            ///< mean-normalized, strictly positive
  std::size_t sample_count = 0;          ///< tiles averaged
  std::vector<std::uint32_t> valid_count;  ///< non-outlier contributions per pixel
  std::size_t unfilled_pixels = 0;       ///< pixels that never had a valid sample (set to 1)

  double operator()(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Per-pixel (sum, count) accumulator. Partial accumulators from parallel
/// producers can be merged; the result does not depend on tile order.
class ShadingAccumulator {
 public:
  ShadingAccumulator(double lower_cut = 2.0, double upper_cut = 2500.0);

  void add(const Tile2D& tile);
  void merge(const ShadingAccumulator& other);
  [[nodiscard]] std::size_t tiles() const { return tiles_; }
  [[nodiscard]] ShadingField finish() const;

 private:
  double lower_;
  double upper_;
  int width_ = 0;
  int height_ = 0;
  Channel channel_ = Channel::CR;
  std::size_t tiles_ = 0;
  std::vector<double> sum_;
  std::vector<std::uint32_t> count_;
};

/// Values in [lower_cut, upper_cut] contribute; everything else is an outlier.
ShadingField estimate_shading(std::span<const Tile2D> tiles, double lower_cut = 2.0, double upper_cut = 2500.0);

/// I / F per pixel, rounded and clamped to 16 bits.
Tile2D correct_tile(const Tile2D& tile, const ShadingField& field);

/// Unrounded variant used where the corrected data stays in floating point.
Image correct_image(const Image& img, const ShadingField& field);

/// Persisted as an f32 stack with nz = 1.
void write_shading(const ShadingField& f, const std::filesystem::path& prefix);
ShadingField read_shading(const std::filesystem::path& prefix);

}  // namespace marmo
