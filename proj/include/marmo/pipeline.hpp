// Batch orchestration: stitch -> locate -> segment -> map -> connectivity.
//
// Config files are `key=value` lines with `#` comments. A stage is skipped
// when all of its outputs exist, none is older than its inputs, and the stage
// key (parameters plus content hashes of the inputs) matches the one stamped
// by the previous run.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "marmo/flatfield.hpp"
#include "marmo/imgcore.hpp"
#include "marmo/injsite.hpp"
#include "marmo/nnseg.hpp"
#include "marmo/tracerseg.hpp"

namespace marmo {

struct PipelineConfig {
  std::filesystem::path tiles;
  std::filesystem::path out;
  std::filesystem::path atlas;
  std::filesystem::path field;  ///< empty = identity on the atlas grid
  std::string brain_id = "brain";
  std::string injection_id = "injection";
  int threads = 1;

  int margin = 50;
  double flat_lower = 2.0;
  double flat_upper = 2500.0;

  double low_voxel_um = 50.0;
  double t_raw = 4500.0;
  double sigma_um = 150.0;
  double t_high = 0.5;
  std::string cell_backend = "hessian";  ///< hessian | unet
  std::filesystem::path cell_model;
  std::vector<double> hessian_sigmas{2.0};
  double hessian_threshold = 300.0;
  int roi_pad_px = 8;

  std::string tracer_backend = "threshold";  ///< threshold | unet
  std::filesystem::path tracer_model;
  double t = 1.1;
  double hi = 300.0;
  double lo = 100.0;
  int close_radius = 3;
  double theta = 0.5;

  std::string source = "cells";  ///< cells | mask
  bool normalize = false;
};

struct ConfigIssue {
  std::string key;
  std::string value;
  std::string constraint;
  [[nodiscard]] std::string message() const;
};

/// Every key the config accepts.
const std::vector<std::string>& config_keys();

/// Closest known key by edit distance, or empty when nothing is close.
std::string suggest_key(const std::string& unknown);

/// Syntax, unknown keys and value ranges. Fills `cfg` with what parsed.
std::vector<ConfigIssue> parse_config(std::string_view text, PipelineConfig& cfg);

/// Cross-key constraints and referenced paths.
std::vector<ConfigIssue> check_config(const PipelineConfig& cfg);

/// Reads and fully validates a config file; throws Error when unreadable.
/// Relative paths are resolved against the config file's directory.
std::vector<ConfigIssue> validate_config(const std::filesystem::path& path, PipelineConfig* cfg = nullptr);

std::string format_config(const PipelineConfig& cfg);

// --- stage building blocks (also used by the CLI subcommands) ---------------

/// Tiles of one channel grouped by section z (ascending).
using SectionTiles = std::map<double, std::vector<Tile2D>>;

/// Reads every `*.pgm` tile in `dir`, grouped by channel and section.
std::map<Channel, SectionTiles> read_tile_dir(const std::filesystem::path& dir);

ShadingField estimate_channel_shading(const SectionTiles& tiles, double lower, double upper, int threads = 1);

/// Flat-field corrects (when `field` is given), lays out and blends each section.
Stack3D stitch_sections(const SectionTiles& tiles, const ShadingField* field, int margin, int threads = 1,
                        std::vector<std::string>* layout_lines = nullptr);

struct CellDetectionParams {
  double t_raw = 4500.0;
  double sigma_um = 150.0;
  double low_voxel_um = 50.0;
  std::string backend = "hessian";
  const NetworkParams* model = nullptr;
  std::vector<double> hessian_sigmas{2.0};
  double threshold = 300.0;  ///< score cutoff (t_high for the unet backend)
  int roi_pad_px = 8;
};

struct LocateResult {
  InjectionMask injection;
  CellPointCloud cells;
};

/// `low` overrides the low-resolution stack that is otherwise box-averaged from `cb`.
LocateResult locate_injection(const Stack3D& cb, const CellDetectionParams& p, int threads = 1,
                              const Stack3D* low = nullptr);

struct TracerStacks {
  Stack3D mask;
  Stack3D signal;
};

/// Threshold backend when `model` is null, otherwise network saliency composed with T.
TracerStacks segment_tracer(const Stack3D& cr, const Stack3D& cg, const ThresholdParams& p, const NetworkParams* model,
                            double theta, int threads = 1);

/// Points as `x_um y_um z_um score` lines.
void write_points_um(const std::vector<std::array<double, 3>>& pts, const std::vector<double>& scores,
                     const std::filesystem::path& path);
std::vector<std::array<double, 3>> read_points_um(const std::filesystem::path& path,
                                                  std::vector<double>* scores = nullptr);

// --- run -----------------------------------------------------------------------

struct StageReport {
  std::string name;
  std::string status;  ///< ok | skip | fail
  double seconds = 0.0;
  std::string key;
  std::vector<std::pair<std::string, std::string>> info;
  std::string error;
};

struct RunReport {
  std::vector<StageReport> stages;
  [[nodiscard]] bool ok() const;
  [[nodiscard]] std::string format() const;
};

/// Output file names inside `cfg.out`.
namespace outputs {
inline constexpr const char* stitched_cr = "stitched_CR";
inline constexpr const char* stitched_cg = "stitched_CG";
inline constexpr const char* stitched_cb = "stitched_CB";
inline constexpr const char* injection_mask = "injection_mask";
inline constexpr const char* cells = "cells.txt";
inline constexpr const char* tracer_mask = "tracer_mask";
inline constexpr const char* tracer_signal = "tracer_L";
inline constexpr const char* mapped_signal = "L_ref";
inline constexpr const char* mapped_mask = "injection_mask_ref";
inline constexpr const char* mapped_cells = "cells_ref.txt";
inline constexpr const char* connectivity = "connectivity.txt";
inline constexpr const char* report = "report.txt";
}  // namespace outputs

/// Runs stages (a)-(e). Validation problems throw InvalidArgument before any
/// stage runs; a failing stage stops the run and is reported as `fail`.
RunReport run_pipeline(const PipelineConfig& cfg, std::ostream* progress = nullptr);

}  // namespace marmo
