#include <cmath>
#include <random>

#include "marmo/nnseg.hpp"

namespace marmo {

Image laplacian_of_gaussian(const Image& img, double sigma) {
  if (!(sigma > 0.0)) throw InvalidArgument("laplacian_of_gaussian: sigma must be positive");
  const Image g = gaussian_blur(img, sigma);
  Image out(img.width, img.height, 0.0);
  const double s2 = sigma * sigma;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double c = g(x, y);
      const double dxx = g(mirror_index(x - 1, img.width), y) - 2.0 * c + g(mirror_index(x + 1, img.width), y);
      const double dyy = g(x, mirror_index(y - 1, img.height)) - 2.0 * c + g(x, mirror_index(y + 1, img.height));
      out(x, y) = s2 * (dxx + dyy);
    }
  return out;
}

Image build_cell_weight_map(const Mask& cell_labels, const Image& image, const CellWeightParams& p) {
  require_same_shape(cell_labels, image, "build_cell_weight_map");
  if (p.radius_zero < 0.0) throw InvalidArgument("build_cell_weight_map: negative radius");
  const int w = image.width, h = image.height;
  // 0 = untouched, 1 = ring, 2 = zero disk
  Mask zone(w, h, 0);
  const double r0 = p.radius_zero, r1 = p.radius_zero + 1.0;
  const int reach = static_cast<int>(std::ceil(r1));
  std::vector<std::array<int, 2>> centers;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!cell_labels(x, y)) continue;
      centers.push_back({x, y});
      for (int dy = -reach; dy <= reach; ++dy)
        for (int dx = -reach; dx <= reach; ++dx) {
          if (!zone.contains(x + dx, y + dy)) continue;
          const double d = std::hypot(dx, dy);
          std::uint8_t& z = zone(x + dx, y + dy);
          if (d <= r0) z = 2;
          else if (d <= r1 && z == 0) z = 1;
        }
    }

  const Image log = laplacian_of_gaussian(image, p.log_sigma);
  Image out(w, h, 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (zone.data[i] == 2) out.data[i] = 0.0;
    else if (zone.data[i] == 1) out.data[i] = p.boundary_weight;
    else if (std::abs(log.data[i]) > p.log_threshold) out.data[i] = p.structure_weight;
  }
  for (const auto& c : centers) out(c[0], c[1]) = p.label_weight;
  return out;
}

Image tracer_weight_map(const Mask& label, const Mask* negatives, double tracer_weight, double negative_weight) {
  if (tracer_weight < 0.0 || negative_weight < 0.0) throw InvalidArgument("tracer_weight_map: negative weight");
  if (negatives) require_same_shape(label, *negatives, "tracer_weight_map");
  Image out(label.width, label.height, 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (negatives && negatives->data[i]) out.data[i] = negative_weight;
    else if (label.data[i]) out.data[i] = tracer_weight;
  }
  return out;
}

namespace {

int draw_index(std::vector<double> weights, std::mt19937_64& rng) {
  double sum = 0.0;
  for (double v : weights) sum += v;
  if (!(sum > 0.0)) std::fill(weights.begin(), weights.end(), 1.0);
  std::discrete_distribution<int> dist(weights.begin(), weights.end());
  return dist(rng);
}

}  // namespace

std::vector<TilePick> pick_training_tiles(const Image& label, int n_dense, int n_sparse, int tile, double density_sigma,
                                          std::uint64_t seed) {
  if (tile <= 0 || n_dense < 0 || n_sparse < 0) throw InvalidArgument("pick_training_tiles: bad tile parameters");
  if (tile > label.width || tile > label.height) {
    throw InvalidArgument("pick_training_tiles: slice " + std::to_string(label.width) + "x" +
                          std::to_string(label.height) + " is smaller than the tile extent " + std::to_string(tile));
  }
  const Image density = gaussian_blur(label, density_sigma);
  // Candidate tiles are indexed by origin; the tile center sits at origin + tile / 2.
  const int ox = label.width - tile + 1, oy = label.height - tile + 1;
  std::vector<double> dense(static_cast<std::size_t>(ox) * oy), sparse(dense.size());
  double dmax = 0.0;
  for (int y = 0; y < oy; ++y)
    for (int x = 0; x < ox; ++x) {
      const double d = density(x + tile / 2, y + tile / 2);
      dense[static_cast<std::size_t>(y) * ox + x] = d;
      dmax = std::max(dmax, d);
    }
  for (std::size_t i = 0; i < dense.size(); ++i) sparse[i] = dmax - dense[i];

  std::mt19937_64 rng(seed);
  std::vector<TilePick> picks;
  picks.reserve(static_cast<std::size_t>(n_dense + n_sparse));
  for (int k = 0; k < n_dense + n_sparse; ++k) {
    const bool is_dense = k < n_dense;
    const int i = draw_index(is_dense ? dense : sparse, rng);
    picks.push_back({i % ox, i / ox, is_dense});
  }
  return picks;
}

std::vector<TrainingSample> sample_training_tiles(std::span<const Image> channels, const Image& label,
                                                  const Image& weights, int n_dense, int n_sparse, int tile,
                                                  double density_sigma, std::uint64_t seed,
                                                  std::vector<TilePick>* picks_out) {
  if (channels.empty()) throw InvalidArgument("sample_training_tiles: no input channels");
  for (const auto& c : channels) require_same_shape(c, label, "sample_training_tiles");
  require_same_shape(weights, label, "sample_training_tiles");
  const auto picks = pick_training_tiles(label, n_dense, n_sparse, tile, density_sigma, seed);
  auto crop = [tile](const Image& img, const TilePick& p) {
    Image out(tile, tile);
    for (int y = 0; y < tile; ++y)
      for (int x = 0; x < tile; ++x) out(x, y) = img(p.x0 + x, p.y0 + y);
    return out;
  };
  std::vector<TrainingSample> out;
  out.reserve(picks.size());
  for (const auto& p : picks) {
    std::vector<Image> ch;
    ch.reserve(channels.size());
    for (const auto& c : channels) ch.push_back(crop(c, p));
    out.push_back({Tensor::from_images(ch), crop(label, p), crop(weights, p)});
  }
  if (picks_out) *picks_out = picks;
  return out;
}

}  // namespace marmo
