#include "marmo/nnseg.hpp"
#include "marmo/parallel.hpp"

namespace marmo {

namespace {

struct Geometry {
  int in = 0;
  int out = 0;
  int margin = 0;
};

Geometry geometry(const NetworkParams& params) {
  const auto out = unet_output_extent(params.config, params.config.input_extent);
  if (!out) {
    throw InvalidArgument("sliding window: input extent " + std::to_string(params.config.input_extent) +
                          " does not fit the network");
  }
  return {params.config.input_extent, *out, (params.config.input_extent - *out) / 2};
}

void check_channels(const NetworkParams& params, std::span<const Image> channels) {
  if (channels.empty()) throw InvalidArgument("sliding window: no input channels");
  if (static_cast<int>(channels.size()) != params.config.in_channels) {
    throw InvalidArgument("sliding window: network expects " + std::to_string(params.config.in_channels) +
                          " channels, got " + std::to_string(channels.size()));
  }
  for (const auto& c : channels) require_same_shape(c, channels[0], "sliding window");
}

}  // namespace

Tensor sliding_window_padded_input(const NetworkParams& params, std::span<const Image> channels, int* tiles_x,
                                   int* tiles_y) {
  check_channels(params, channels);
  const Geometry g = geometry(params);
  const int w = channels[0].width, h = channels[0].height;
  const int nx = (w + g.out - 1) / g.out, ny = (h + g.out - 1) / g.out;
  const int pw = nx * g.out + 2 * g.margin, ph = ny * g.out + 2 * g.margin;
  Tensor padded(static_cast<int>(channels.size()), ph, pw);
  for (int c = 0; c < padded.channels; ++c)
    for (int y = 0; y < ph; ++y) {
      const int sy = mirror_index(y - g.margin, h);
      for (int x = 0; x < pw; ++x)
        padded.at(c, y, x) = params.config.input_scale * channels[c](mirror_index(x - g.margin, w), sy);
    }
  if (tiles_x) *tiles_x = nx;
  if (tiles_y) *tiles_y = ny;
  return padded;
}

Image sliding_window_predict(const NetworkParams& params, std::span<const Image> channels, int threads) {
  int nx = 0, ny = 0;
  const Tensor padded = sliding_window_padded_input(params, channels, &nx, &ny);
  const Geometry g = geometry(params);
  const int w = channels[0].width, h = channels[0].height;
  Image out(w, h, 0.0);
  parallel_for(static_cast<std::size_t>(nx) * ny, threads, [&](std::size_t t) {
    const int tx = static_cast<int>(t) % nx, ty = static_cast<int>(t) / nx;
    const int x0 = tx * g.out, y0 = ty * g.out;
    Tensor tile(padded.channels, g.in, g.in);
    for (int c = 0; c < padded.channels; ++c)
      for (int y = 0; y < g.in; ++y)
        for (int x = 0; x < g.in; ++x) tile.at(c, y, x) = padded.at(c, y0 + y, x0 + x);
    const Tensor pred = unet_forward(params, tile);
    for (int y = 0; y < g.out && y0 + y < h; ++y)
      for (int x = 0; x < g.out && x0 + x < w; ++x) out(x0 + x, y0 + y) = pred.at(0, y, x);
  });
  return out;
}

}  // namespace marmo
