#include "marmo/stitch.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace marmo {

long world_to_pixel(double world_um, double pitch_um) { return std::lround(world_um / pitch_um); }

namespace {

struct Rect {
  long x0, y0, x1, y1;
  [[nodiscard]] bool intersects(const Rect& o) const { return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1; }
  [[nodiscard]] bool touches(const Rect& o) const { return x0 <= o.x1 && o.x0 <= x1 && y0 <= o.y1 && o.y0 <= y1; }
};

Rect cropped_rect(const MosaicLayout& layout, std::size_t i, int margin) {
  const auto& off = layout.offsets[i];
  const auto& ext = layout.tile_extents[i];
  return {off[0] + margin, off[1] + margin, off[0] + ext[0] - margin, off[1] + ext[1] - margin};
}

}  // namespace

MosaicLayout plan_layout(std::span<const Tile2D> tiles) {
  if (tiles.empty()) throw InvalidArgument("plan_layout: no tiles");
  MosaicLayout layout;
  layout.pitch_um = tiles[0].pixel_pitch_um;
  layout.z_um = tiles[0].world_offset_um[2];
  for (const auto& t : tiles) {
    if (t.world_offset_um[2] != layout.z_um) throw InvalidArgument("plan_layout: tiles from different z positions");
    if (t.pixel_pitch_um != layout.pitch_um) throw InvalidArgument("plan_layout: tiles with different pixel pitch");
  }

  std::vector<std::array<long, 2>> raw(tiles.size());
  long min_x = std::numeric_limits<long>::max(), min_y = min_x;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    raw[i] = {world_to_pixel(tiles[i].world_offset_um[0], layout.pitch_um),
              world_to_pixel(tiles[i].world_offset_um[1], layout.pitch_um)};
    min_x = std::min(min_x, raw[i][0]);
    min_y = std::min(min_y, raw[i][1]);
  }
  long max_x = 0, max_y = 0;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    layout.offsets.push_back({raw[i][0] - min_x, raw[i][1] - min_y});
    layout.tile_extents.push_back({tiles[i].width, tiles[i].height});
    max_x = std::max(max_x, layout.offsets[i][0] + tiles[i].width);
    max_y = std::max(max_y, layout.offsets[i][1] + tiles[i].height);
  }
  layout.width = static_cast<int>(max_x);
  layout.height = static_cast<int>(max_y);
  layout.origin_um = {min_x * layout.pitch_um, min_y * layout.pitch_um};

  layout.overlap = Grid2<std::uint16_t>(layout.width, layout.height, 0);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const auto r = cropped_rect(layout, i, 0);
    for (long y = r.y0; y < r.y1; ++y)
      for (long x = r.x0; x < r.x1; ++x) ++layout.overlap(static_cast<int>(x), static_cast<int>(y));
  }

  int nominal = 0;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const auto a = cropped_rect(layout, i, 0);
    bool touching = false;
    for (std::size_t j = 0; j < tiles.size(); ++j) {
      if (j == i) continue;
      const auto b = cropped_rect(layout, j, 0);
      touching = touching || a.touches(b);
      if (j > i && a.intersects(b)) {
        const long ox = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
        const long oy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
        const int o = static_cast<int>(std::min(ox, oy));
        nominal = nominal == 0 ? o : std::min(nominal, o);
      }
    }
    if (!touching && tiles.size() > 1) {
      layout.warnings.push_back("tile " + std::to_string(tiles[i].index) + " is disjoint from all other tiles");
    }
  }
  layout.nominal_overlap = nominal;
  return layout;
}

Tile2D crop_margins(const Tile2D& tile, int margin) {
  if (margin < 0 || 2 * margin >= std::min(tile.width, tile.height)) {
    throw InvalidArgument("crop_margins: margin " + std::to_string(margin) + " too large for " +
                          std::to_string(tile.width) + "x" + std::to_string(tile.height) + " tile");
  }
  if (margin == 0) return tile;
  Tile2D out(tile.width - 2 * margin, tile.height - 2 * margin, tile.channel);
  out.index = tile.index;
  out.pixel_pitch_um = tile.pixel_pitch_um;
  out.world_offset_um = tile.world_offset_um;
  out.world_offset_um[0] += margin * tile.pixel_pitch_um;
  out.world_offset_um[1] += margin * tile.pixel_pitch_um;
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out(x, y) = tile(x + margin, y + margin);
  return out;
}

Image blend_weights(std::span<const Tile2D> tiles, const MosaicLayout& layout, int margin, std::size_t i) {
  const Rect a = cropped_rect(layout, i, margin);
  long left = 0, right = 0, top = 0, bottom = 0;
  for (std::size_t j = 0; j < tiles.size(); ++j) {
    if (j == i) continue;
    const Rect b = cropped_rect(layout, j, margin);
    if (!a.intersects(b)) continue;
    if (b.x0 < a.x0) left = std::max(left, std::min(b.x1, a.x1) - a.x0);
    if (b.x1 > a.x1) right = std::max(right, a.x1 - std::max(b.x0, a.x0));
    if (b.y0 < a.y0) top = std::max(top, std::min(b.y1, a.y1) - a.y0);
    if (b.y1 > a.y1) bottom = std::max(bottom, a.y1 - std::max(b.y0, a.y0));
  }
  auto ramp = [](long d, long band) { return band > 0 ? std::min(1.0, (d + 0.5) / static_cast<double>(band)) : 1.0; };
  const int w = static_cast<int>(a.x1 - a.x0), h = static_cast<int>(a.y1 - a.y0);
  std::vector<double> wx(w), wy(h);
  for (int x = 0; x < w; ++x) wx[x] = ramp(x, left) * ramp(w - 1 - x, right);
  for (int y = 0; y < h; ++y) wy[y] = ramp(y, top) * ramp(h - 1 - y, bottom);
  Image out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out(x, y) = wx[x] * wy[y];
  return out;
}

AssembledSlice assemble_slice(std::span<const Tile2D> tiles, const MosaicLayout& layout, int margin) {
  if (tiles.size() != layout.offsets.size()) throw InvalidArgument("assemble_slice: layout does not cover the tiles");
  long x0 = std::numeric_limits<long>::max(), y0 = x0, x1 = std::numeric_limits<long>::min(), y1 = x1;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    if (tiles[i].width != layout.tile_extents[i][0] || tiles[i].height != layout.tile_extents[i][1]) {
      throw InvalidArgument("assemble_slice: tile extent differs from layout");
    }
    if (2 * margin >= std::min(tiles[i].width, tiles[i].height) || margin < 0) {
      throw InvalidArgument("assemble_slice: margin too large");
    }
    const Rect r = cropped_rect(layout, i, margin);
    x0 = std::min(x0, r.x0);
    y0 = std::min(y0, r.y0);
    x1 = std::max(x1, r.x1);
    y1 = std::max(y1, r.y1);
  }
  const int w = static_cast<int>(x1 - x0), h = static_cast<int>(y1 - y0);
  // Deviations from the first contributor are blended, so equal contributions
  // reproduce their value exactly.
  Image first(w, h, 0.0), dev(w, h, 0.0), weight(w, h, 0.0);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const Rect r = cropped_rect(layout, i, margin);
    const Image wt = blend_weights(tiles, layout, margin, i);
    for (int y = 0; y < wt.height; ++y) {
      const int oy = static_cast<int>(r.y0 - y0) + y;
      for (int x = 0; x < wt.width; ++x) {
        const int ox = static_cast<int>(r.x0 - x0) + x;
        const double v = tiles[i](x + margin, y + margin);
        if (weight(ox, oy) == 0.0) first(ox, oy) = v;
        dev(ox, oy) += wt(x, y) * (v - first(ox, oy));
        weight(ox, oy) += wt(x, y);
      }
    }
  }
  AssembledSlice out;
  out.image = Image(w, h, 0.0);
  out.origin = {x0, y0};
  out.origin_um = {layout.origin_um[0] + x0 * layout.pitch_um, layout.origin_um[1] + y0 * layout.pitch_um};
  for (std::size_t k = 0; k < weight.size(); ++k) {
    if (weight.data[k] > 0.0) {
      out.image.data[k] = first.data[k] + dev.data[k] / weight.data[k];
    } else {
      ++out.unfilled;
    }
  }
  return out;
}

Stack3D assemble_stack(std::vector<Section> sections, double pitch_um, Channel channel, double default_spacing_um) {
  if (sections.empty()) throw InvalidArgument("assemble_stack: no sections");
  std::stable_sort(sections.begin(), sections.end(), [](const Section& a, const Section& b) { return a.z_um < b.z_um; });
  for (const auto& s : sections) {
    if (!s.image.same_shape(sections[0].image)) throw InvalidArgument("assemble_stack: section extent mismatch");
  }
  double spacing = default_spacing_um;
  if (sections.size() > 1) {
    spacing = sections[1].z_um - sections[0].z_um;
    if (!(spacing > 0.0)) throw InvalidArgument("assemble_stack: duplicate section z positions");
    for (std::size_t k = 1; k < sections.size(); ++k) {
      const double d = sections[k].z_um - sections[k - 1].z_um;
      if (std::abs(d - spacing) > 1e-6 * spacing) throw InvalidArgument("assemble_stack: non-uniform z spacing");
    }
  }
  Stack3D st({sections[0].image.width, sections[0].image.height, static_cast<int>(sections.size())},
             {pitch_um, pitch_um, spacing}, channel);
  for (std::size_t k = 0; k < sections.size(); ++k) st.set_slice(static_cast<int>(k), sections[k].image);
  return st;
}

}  // namespace marmo
