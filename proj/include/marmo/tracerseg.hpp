// Classical axon-tracer segmentation on 2D sections.
//
// T{t} = C_G - t * C_R where C_G >= t * C_R, else 0. The morphological
// pipeline (double threshold, reconstruction, closing) produces the binary
// tracer mask; the segmented signal is that mask times T.
#pragma once

#include <array>
#include <utility>
#include <vector>

#include "marmo/imgcore.hpp"

namespace marmo {

struct TracerLabel {
  Mask mask;
  Image signal;  ///< L = mask * T
};

Image background_subtract(const Image& cg, const Image& cr, double t = 1.1);

/// (T > hi, T > lo).
std::pair<Mask, Mask> double_threshold(const Image& T, double hi = 300.0, double lo = 100.0);

/// Two-pass union-find labeling with 8-connectivity; returns labels (0 = bg)
/// and the component count.
std::vector<int> label_components_2d(const Mask& m, int* count = nullptr);

/// Union of the 8-connected components of `mask` containing a marker pixel.
Mask morph_reconstruct(const Mask& marker, const Mask& mask);

/// Digital disk: offsets with Euclidean length <= radius.
std::vector<std::array<int, 2>> disk_offsets(int radius);

/// Out-of-image pixels are ignored by both dilation and erosion.
Mask dilate(const Mask& m, int radius);
Mask erode(const Mask& m, int radius);
Mask morph_close(const Mask& m, int radius = 3);

TracerLabel compose_label(const Image& saliency, const Image& T, double theta = 0.5);

struct ThresholdParams {
  double t = 1.1;
  double hi = 300.0;
  double lo = 100.0;
  int close_radius = 3;
};

TracerLabel threshold_pipeline(const Image& cg, const Image& cr, const ThresholdParams& p = {});

}  // namespace marmo
