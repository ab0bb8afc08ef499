#include "marmo/flatfield.hpp"

#include <string>

namespace marmo {

ShadingAccumulator::ShadingAccumulator(double lower_cut, double upper_cut) : lower_(lower_cut), upper_(upper_cut) {
  if (!(lower_cut < upper_cut)) throw InvalidArgument("shading: lower cut must be below upper cut");
}

void ShadingAccumulator::add(const Tile2D& tile) {
  if (tiles_ == 0) {
    width_ = tile.width;
    height_ = tile.height;
    channel_ = tile.channel;
    sum_.assign(tile.pixels.size(), 0.0);
    count_.assign(tile.pixels.size(), 0);
  } else if (tile.width != width_ || tile.height != height_) {
    throw InvalidArgument("shading: inconsistent tile extents (" + std::to_string(tile.width) + "x" +
                          std::to_string(tile.height) + " vs " + std::to_string(width_) + "x" +
                          std::to_string(height_) + ")");
  } else if (tile.channel != channel_) {
    throw InvalidArgument("shading: tiles from different channels");
  }
  for (std::size_t i = 0; i < tile.pixels.size(); ++i) {
    const double v = tile.pixels[i];
    if (v >= lower_ && v <= upper_) {
      sum_[i] += v;
      ++count_[i];
    }
  }
  ++tiles_;
}

void ShadingAccumulator::merge(const ShadingAccumulator& other) {
  if (other.tiles_ == 0) return;
  if (lower_ != other.lower_ || upper_ != other.upper_) throw InvalidArgument("shading: merging different cuts");
  if (tiles_ == 0) {
    *this = other;
    return;
  }
  if (other.width_ != width_ || other.height_ != height_) throw InvalidArgument("shading: inconsistent tile extents");
  if (other.channel_ != channel_) throw InvalidArgument("shading: tiles from different channels");
  for (std::size_t i = 0; i < sum_.size(); ++i) {
    sum_[i] += other.sum_[i];
    count_[i] += other.count_[i];
  }
  tiles_ += other.tiles_;
}

ShadingField ShadingAccumulator::finish() const {
  if (tiles_ == 0) throw InvalidArgument("shading: empty tile stream");
  ShadingField f;
  f.width = width_;
  f.height = height_;
  f.channel = channel_;
  f.sample_count = tiles_;
  f.valid_count = count_;
  f.values.assign(sum_.size(), 1.0);

  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < sum_.size(); ++i) {
    if (count_[i] == 0) continue;
    f.values[i] = sum_[i] / count_[i];
    total += f.values[i];
    ++valid;
  }
  f.unfilled_pixels = sum_.size() - valid;
  if (valid == 0 || !(total > 0.0)) {
    f.values.assign(sum_.size(), 1.0);
    f.unfilled_pixels = sum_.size();
    return f;
  }
  const double mean = total / static_cast<double>(valid);
  for (std::size_t i = 0; i < sum_.size(); ++i)
    if (count_[i] != 0) f.values[i] /= mean;
  return f;
}

ShadingField estimate_shading(std::span<const Tile2D> tiles, double lower_cut, double upper_cut) {
  ShadingAccumulator acc(lower_cut, upper_cut);
  for (const auto& t : tiles) acc.add(t);
  return acc.finish();
}

namespace {

void check_field(int w, int h, const ShadingField& field) {
  if (w != field.width || h != field.height) throw InvalidArgument("correct_tile: field extent differs from tile extent");
  for (double v : field.values)
    if (!(v > 0.0)) throw InvalidArgument("correct_tile: shading field must be strictly positive");
}

}  // namespace

Image correct_image(const Image& img, const ShadingField& field) {
  check_field(img.width, img.height, field);
  Image out = img;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] /= field.values[i];
  return out;
}

Tile2D correct_tile(const Tile2D& tile, const ShadingField& field) {
  check_field(tile.width, tile.height, field);
  if (tile.channel != field.channel) throw InvalidArgument("correct_tile: channel differs from field channel");
  Tile2D out = tile;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = to_u16(tile.pixels[i] / field.values[i]);
  return out;
}

void write_shading(const ShadingField& f, const std::filesystem::path& prefix) {
  Stack3D st({f.width, f.height, 1}, {1.0, 1.0, 1.0}, f.channel);
  st.data = f.values;
  write_stack(st, prefix, StorageType::F32);
}

ShadingField read_shading(const std::filesystem::path& prefix) {
  const Stack3D st = read_stack(prefix);
  if (st.nz() != 1) throw FormatError("shading field must have nz = 1");
  ShadingField f;
  f.width = st.nx();
  f.height = st.ny();
  f.channel = st.channel;
  f.values = st.data;
  for (double v : f.values)
    if (!(v > 0.0)) throw FormatError("shading field must be strictly positive");
  return f;
}

}  // namespace marmo
