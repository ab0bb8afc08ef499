#include <cmath>
#include <random>

#include "marmo/nnseg.hpp"

namespace marmo {

AugmentDraw neutral_augment() { return {}; }

AugmentDraw draw_augment(int out_extent, std::uint64_t seed, const AugmentParams& p) {
  if (out_extent <= 0) throw InvalidArgument("draw_augment: output extent must be positive");
  if (p.gamma_min <= 0.0 || p.gamma_max < p.gamma_min || p.scale_min <= 0.0 || p.scale_max < p.scale_min) {
    throw InvalidArgument("draw_augment: bad gamma or scale range");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentDraw d;
  d.rotation = p.max_rotation_rad * (2.0 * unit(rng) - 1.0);
  d.gamma = p.gamma_min + (p.gamma_max - p.gamma_min) * unit(rng);
  d.scale = p.scale_min + (p.scale_max - p.scale_min) * unit(rng);
  if (p.elastic_grid < 2 || p.elastic_std <= 0.0) return d;

  const int g = p.elastic_grid;
  std::normal_distribution<double> normal(0.0, p.elastic_std);
  std::vector<double> cx(static_cast<std::size_t>(g) * g), cy(cx.size());
  for (std::size_t i = 0; i < cx.size(); ++i) {
    cx[i] = normal(rng);
    cy[i] = normal(rng);
  }
  // Control points span the output tile; bilinear upsampling then smoothing.
  d.dx = Image(out_extent, out_extent);
  d.dy = Image(out_extent, out_extent);
  const double step = out_extent > 1 ? static_cast<double>(g - 1) / (out_extent - 1) : 0.0;
  for (int y = 0; y < out_extent; ++y)
    for (int x = 0; x < out_extent; ++x) {
      const double gx = x * step, gy = y * step;
      const int x0 = std::min(static_cast<int>(gx), g - 2), y0 = std::min(static_cast<int>(gy), g - 2);
      const double fx = gx - x0, fy = gy - y0;
      auto lerp = [&](const std::vector<double>& c) {
        auto at = [&](int i, int j) { return c[static_cast<std::size_t>(j) * g + i]; };
        return (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) +
               fy * ((1 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
      };
      d.dx(x, y) = lerp(cx);
      d.dy(x, y) = lerp(cy);
    }
  if (p.elastic_smooth > 0.0) {
    d.dx = gaussian_blur(d.dx, p.elastic_smooth);
    d.dy = gaussian_blur(d.dy, p.elastic_smooth);
  }
  return d;
}

std::array<double, 2> augment_source_point(const AugmentDraw& d, int in_w, int in_h, int out_extent, double x,
                                           double y) {
  double u = x + 0.5 - 0.5 * out_extent;
  double v = y + 0.5 - 0.5 * out_extent;
  if (!d.dx.empty()) {
    const int xi = std::clamp(static_cast<int>(std::lround(x)), 0, d.dx.width - 1);
    const int yi = std::clamp(static_cast<int>(std::lround(y)), 0, d.dx.height - 1);
    u += d.dx(xi, yi);
    v += d.dy(xi, yi);
  }
  const double c = std::cos(d.rotation), s = std::sin(d.rotation);
  const double su = (c * u - s * v) / d.scale;
  const double sv = (s * u + c * v) / d.scale;
  return {su + 0.5 * in_w - 0.5, sv + 0.5 * in_h - 0.5};
}

namespace {

double bilinear(const double* plane, int w, int h, double x, double y) {
  const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, w - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, h - 1);
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = std::clamp(x - x0, 0.0, 1.0), fy = std::clamp(y - y0, 0.0, 1.0);
  auto at = [&](int i, int j) { return plane[static_cast<std::size_t>(j) * w + i]; };
  return (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1 - fx) * at(x0, y1) + fx * at(x1, y1));
}

}  // namespace

TrainingSample apply_augment(const TrainingSample& s, const AugmentDraw& d, int out_extent) {
  const int w = s.input.width, h = s.input.height;
  if (!s.label.same_shape(s.weights) || s.label.width != w || s.label.height != h) {
    throw InvalidArgument("augment: label and weights must match the input extent");
  }
  if (out_extent <= 0 || out_extent > w || out_extent > h) {
    throw InvalidArgument("augment: output extent " + std::to_string(out_extent) + " exceeds the sample");
  }
  if (!d.dx.empty() && (d.dx.width != out_extent || d.dx.height != out_extent)) {
    throw InvalidArgument("augment: displacement field does not match the output extent");
  }
  if (!(d.scale > 0.0) || !(d.gamma > 0.0)) throw InvalidArgument("augment: scale and gamma must be positive");

  constexpr double slack = 1e-9;
  std::vector<std::array<double, 2>> src(static_cast<std::size_t>(out_extent) * out_extent);
  for (int y = 0; y < out_extent; ++y)
    for (int x = 0; x < out_extent; ++x) {
      const auto p = augment_source_point(d, w, h, out_extent, x, y);
      if (p[0] < -slack || p[1] < -slack || p[0] > w - 1 + slack || p[1] > h - 1 + slack) {
        throw InvalidArgument("augment: sample extent too small for the drawn warp");
      }
      src[static_cast<std::size_t>(y) * out_extent + x] = p;
    }

  TrainingSample out{Tensor(s.input.channels, out_extent, out_extent), Image(out_extent, out_extent),
                     Image(out_extent, out_extent)};
  for (int c = 0; c < s.input.channels; ++c) {
    const double* plane = s.input.channel(c);
    double peak = 0.0;
    for (std::size_t i = 0; i < s.input.plane(); ++i) peak = std::max(peak, plane[i]);
    double* o = out.input.channel(c);
    for (std::size_t i = 0; i < src.size(); ++i) {
      double v = bilinear(plane, w, h, src[i][0], src[i][1]);
      if (d.gamma != 1.0 && peak > 0.0) v = peak * std::pow(std::max(v, 0.0) / peak, d.gamma);
      o[i] = v;
    }
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    const int xi = std::clamp(static_cast<int>(std::lround(src[i][0])), 0, w - 1);
    const int yi = std::clamp(static_cast<int>(std::lround(src[i][1])), 0, h - 1);
    out.label.data[i] = s.label(xi, yi);
    out.weights.data[i] = s.weights(xi, yi);
  }
  return out;
}

TrainingSample augment(const TrainingSample& s, int out_extent, std::uint64_t seed, const AugmentParams& p) {
  return apply_augment(s, draw_augment(out_extent, seed, p), out_extent);
}

}  // namespace marmo
