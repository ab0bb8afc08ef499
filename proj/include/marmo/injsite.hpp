// Injection-site localization: a rough mask on the low-resolution C_B stack,
// cell-body point detection on high-resolution slices, and the multi-scale
// Hessian blob filter used as the classical detector.
#pragma once

#include <map>
#include <span>
#include <vector>

#include "marmo/imgcore.hpp"

namespace marmo {

enum class Connectivity { Six, TwentySix };

struct ComponentLabels {
  std::vector<int> labels;             ///< 0 = background, 1..n components
  std::vector<std::size_t> sizes;      ///< sizes[label], sizes[0] unused
  std::vector<std::size_t> first_index;  ///< smallest linear index per label
};

/// Two-pass union-find labeling of the nonzero voxels of `binary`.
ComponentLabels label_components(const Stack3D& binary, Connectivity conn = Connectivity::Six);

/// Keeps the largest component; ties go to the one with the smallest linear index.
Stack3D largest_component(const Stack3D& binary, Connectivity conn = Connectivity::Six);

struct InjectionMask {
  Stack3D mask;      ///< 0/1
  Stack3D smoothed;  ///< blurred candidate map
  double t_raw = 4500.0;
  double t_low = 0.0;
  bool empty = true;
};

/// 1 where smoothed > 0.5 * max(smoothed).
Stack3D threshold_half_max(const Stack3D& smoothed, double* t_low = nullptr);

/// Binarize (> t_raw), blur with sigma_um, threshold at half maximum, keep the
/// largest 6-connected component.
InjectionMask rough_localize(const Stack3D& low_cb, double t_raw = 4500.0, double sigma_um = 150.0);

/// Single-scale response -l1 * |l2| / (|l1| + eps) * [l2 < 0] with |l1| >= |l2|
/// the eigenvalues of the Hessian from Gaussian-derivative kernels.
Image hessian_response(const Image& img, double sigma_px);

/// Per-pixel maximum of the single-scale responses.
Image hessian_cell_filter(const Image& img, std::span<const double> sigmas_px);

struct CellPoint {
  int x = 0;
  int y = 0;
  int z = 0;
  double score = 0.0;
  friend bool operator==(const CellPoint&, const CellPoint&) = default;
};

using CellPointCloud = std::vector<CellPoint>;

/// Strict 8-neighbour maxima with value > threshold. Neighbours outside the
/// image are ignored.
CellPointCloud local_maxima(const Image& saliency, double threshold, int z = 0);

struct PixelRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  ///< half-open
  [[nodiscard]] bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  [[nodiscard]] int width() const { return x1 - x0; }
  [[nodiscard]] int height() const { return y1 - y0; }
  friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

struct Roi {
  int z_min = 0;
  int z_max = -1;  ///< inclusive
  std::map<int, PixelRect> rects;
};

/// Per-slice detection on a saliency stack; restricted to `roi` when given.
CellPointCloud detect_cells(const Stack3D& saliency, double t_high = 0.5, const Roi* roi = nullptr);

/// Maps low-resolution mask voxels to high-resolution pixel rectangles
/// (scale low_voxel / high_pitch in-plane, z one-to-one), bounding box per z,
/// padded by pad_px and clamped to the high-resolution extent.
Roi roi_from_mask(const Stack3D& mask, std::array<int, 2> high_extent, double high_pitch_um, double low_voxel_um,
                  int pad_px);

/// Text format: one `x y z score` line per point.
void write_cells(const CellPointCloud& cells, const std::filesystem::path& path);
CellPointCloud read_cells(const std::filesystem::path& path);

}  // namespace marmo
