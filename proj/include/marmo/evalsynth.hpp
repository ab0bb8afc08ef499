// Synthetic phantoms with exact ground truth, and the metrics used to score
// detections and segmentations against it.
//
// A phantom is a stack of sections rendered on a canvas that includes the tile
// margins. Tiles are cut from the canvas with a fixed step so that, after the
// margin crop, neighbouring tiles overlap by `overlap` pixels. The section
// frame (what stitching reconstructs) starts `margin` pixels into the canvas.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "marmo/imgcore.hpp"
#include "marmo/injsite.hpp"
#include "marmo/mapping.hpp"

namespace marmo {

struct PhantomSpec {
  std::uint64_t seed = 1;
  int sections = 6;
  int tiles_x = 2;
  int tiles_y = 2;
  int tile_extent = 360;
  int margin = 50;
  int overlap = 80;  ///< after cropping
  double pitch_um = 6.25;
  double section_um = 50.0;

  double vignette_corner = 1.0;  ///< raised-cosine falloff to this value at the corners; 1 = flat
  bool noise = false;            ///< Poisson noise applied last

  double bg_cr = 100.0;
  double crosstalk = 1.1;  ///< C_G background = crosstalk * C_R background
  double bg_cb = 50.0;

  int cell_count = 12;
  double cell_amplitude = 20000.0;
  double cell_sigma_px = 2.0;
  double cell_min_spacing_px = 16.0;
  double cell_cg_fraction = 0.0;
  double cell_region_um = 120.0;  ///< cells within this distance of the injection center; 0 = anywhere

  int axon_count = 6;
  double axon_contrast = 3000.0;
  double axon_width_px = 3.0;
  double axon_length_px = 300.0;

  int vessel_count = 3;
  double vessel_contrast = 2500.0;
  double vessel_width_px = 6.0;
  double vessel_length_px = 250.0;

  std::array<double, 3> injection_center_um{1000.0, 1375.0, 125.0};  ///< section frame
  double injection_sigma_um = 150.0;
  double injection_amplitude = 12000.0;
  double injection_threshold = 4500.0;

  double atlas_voxel_um = 50.0;
  double threshold_t = 1.1;  ///< background subtraction factor used for the truth signal

  [[nodiscard]] int step_px() const { return tile_extent - 2 * margin - overlap; }
  [[nodiscard]] int section_width() const { return (tiles_x - 1) * step_px() + tile_extent - 2 * margin; }
  [[nodiscard]] int section_height() const { return (tiles_y - 1) * step_px() + tile_extent - 2 * margin; }
};

/// Parses `key=value` lines (`#` comments); unknown keys and bad values throw.
PhantomSpec parse_phantom_spec(std::string_view text);
PhantomSpec read_phantom_spec(const std::filesystem::path& path);
std::string format_phantom_spec(const PhantomSpec& spec);
void validate_phantom_spec(const PhantomSpec& spec);

struct GroundTruth {
  Image vignette;                  ///< per tile, peak 1 (not mean-normalized)
  CellPointCloud cells;            ///< section-frame pixels, score 1
  Stack3D tracer_mask;             ///< section frame, 0/1
  Stack3D tracer_signal;           ///< background-subtracted C_G on the tracer mask
  Stack3D vessel_mask;             ///< section frame, 0/1
  Stack3D injection_mask;          ///< atlas grid, 0/1
  RegionAtlas atlas;
  ConnectivityTable table;
};

struct Phantom {
  PhantomSpec spec;
  std::vector<Tile2D> tiles;             ///< every channel, every section
  std::map<Channel, Stack3D> sections;   ///< noiseless, unvignetted section images (u16-rounded)
  GroundTruth truth;
};

Phantom generate_phantom(const PhantomSpec& spec);

/// Three-region toy atlas: an ellipsoid split into slabs along x.
RegionAtlas make_toy_atlas(std::array<int, 3> dims, double voxel_um);

/// `<dir>/tiles/s<z>_t<k>_<CH>.pgm` and `<dir>/truth/...`.
void write_phantom(const Phantom& p, const std::filesystem::path& dir);

/// Ground-truth cells as `x y z score` lines.
CellPointCloud read_truth_cells(const std::filesystem::path& dir);

/// Raised-cosine radial falloff from 1 at the center to `corner` at the corners.
Image vignette_field(int width, int height, double corner);

/// Mean-normalized copy.
Image mean_normalized(const Image& img);

struct FlatfieldPhantom {
  std::vector<Tile2D> tiles;
  Image vignette;  ///< mean-normalized truth
};

/// Tiles = Poisson(lambda) background times the vignette, with a fraction of
/// pixels replaced by dark (< 2) or saturated (> 2500) outliers.
FlatfieldPhantom flatfield_phantom(int n_tiles, int width, int height, double lambda, double corner,
                                   double outlier_fraction, std::uint64_t seed, Channel channel = Channel::CG);

/// Seed for item `k` derived from a base seed (splitmix64 of both).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k);

// --- metrics ----------------------------------------------------------------

struct MatchResult {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  ///< (prediction, truth)
  [[nodiscard]] double precision() const;
  [[nodiscard]] double recall() const;
  [[nodiscard]] double f1() const;
};

/// Greedy matching in descending score order (ties: input order). A prediction
/// matches the nearest unmatched truth point in the same z within `radius_px`.
MatchResult match_detections(const CellPointCloud& pred, const CellPointCloud& truth, double radius_px = 4.0);

struct PrPoint {
  double threshold = 0.0;
  double precision = 1.0;
  double recall = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

/// One point per threshold, counting detections with score > threshold.
/// With no detections above a threshold, precision is reported as 1.
std::vector<PrPoint> precision_recall_curve(const CellPointCloud& pred, const CellPointCloud& truth, double radius_px,
                                            std::span<const double> thresholds);

struct SegmentationMetrics {
  double precision = 1.0;
  double recall = 1.0;
  double f1 = 1.0;
  double iou = 1.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

/// Pixel-set metrics; an empty denominator gives 1.
SegmentationMetrics segmentation_metrics(const Mask& pred, const Mask& truth);
SegmentationMetrics segmentation_metrics(const Stack3D& pred, const Stack3D& truth);

// --- Hessian baseline protocol -----------------------------------------------

struct LabeledSlice {
  Image image;
  CellPointCloud truth;  ///< z ignored
};

struct HessianSelection {
  std::vector<double> sigmas;
  double threshold = 0.0;
  double train_f1 = 0.0;
  MatchResult test;
};

/// Picks the scale set and score threshold with the best F1 on `train` and
/// evaluates that choice on `test`.
HessianSelection select_hessian_baseline(std::span<const LabeledSlice> train, std::span<const LabeledSlice> test,
                                         std::span<const std::vector<double>> sigma_sets, double radius_px = 4.0,
                                         int threads = 1);

}  // namespace marmo
