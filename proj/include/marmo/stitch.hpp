// Section reconstruction from stage-positioned tiles: margin cropping,
// linear blending in overlap bands, and z assembly into stacks.
#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "marmo/imgcore.hpp"

namespace marmo {

struct MosaicLayout {
  /// Pixel offset of each (uncropped) tile in the section frame, in input order.
  std::vector<std::array<long, 2>> offsets;
  std::vector<std::array<int, 2>> tile_extents;
  int width = 0;
  int height = 0;
  /// Number of tiles covering each section pixel.
  Grid2<std::uint16_t> overlap;
  /// Smallest positive overlap width between touching tiles (0 for a single tile).
  int nominal_overlap = 0;
  double pitch_um = 0.0;
  double z_um = 0.0;
  /// World position of section pixel (0, 0).
  std::array<double, 2> origin_um{0.0, 0.0};
  std::vector<std::string> warnings;
};

/// world / pitch rounded half away from zero.
long world_to_pixel(double world_um, double pitch_um);

/// Integer tile placement from world offsets. All tiles must share z and pitch.
MosaicLayout plan_layout(std::span<const Tile2D> tiles);

/// Centered crop; world offset moves by margin * pitch.
Tile2D crop_margins(const Tile2D& tile, int margin);

struct AssembledSlice {
  Image image;
  /// Position of image pixel (0, 0) in the layout frame.
  std::array<long, 2> origin{0, 0};
  /// World position of image pixel (0, 0).
  std::array<double, 2> origin_um{0.0, 0.0};
  std::size_t unfilled = 0;
};

/// Per-tile blending weight over its cropped extent, before renormalization.
/// Ramps run from the cropped edge into the overlap band; 1 elsewhere.
Image blend_weights(std::span<const Tile2D> tiles, const MosaicLayout& layout, int margin, std::size_t tile);

AssembledSlice assemble_slice(std::span<const Tile2D> tiles, const MosaicLayout& layout, int margin = 50);

struct Section {
  Image image;
  double z_um = 0.0;
};

/// Sorts by z and stacks; voxel z spacing from the (uniform) section spacing.
Stack3D assemble_stack(std::vector<Section> sections, double pitch_um, Channel channel,
                       double default_spacing_um = 50.0);

}  // namespace marmo
