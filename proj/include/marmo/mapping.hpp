// Resampling into a reference space with precomputed displacement fields,
// axisymmetric templates, and region-wise connectivity tables.
//
// Fields use the pull-back convention: the vector stored at reference voxel v
// is the displacement (µm) from v's center to the source position sampled for v.
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "marmo/imgcore.hpp"
#include "marmo/injsite.hpp"

namespace marmo {

struct DisplacementField {
  Stack3D dx;  ///< reference grid; µm
  Stack3D dy;
  Stack3D dz;

  [[nodiscard]] const std::array<int, 3>& dims() const { return dx.dims; }
  [[nodiscard]] const std::array<double, 3>& voxel_um() const { return dx.voxel_um; }
  [[nodiscard]] std::array<double, 3> at(int x, int y, int z) const;

  /// Zero displacement on the given grid.
  static DisplacementField identity(std::array<int, 3> dims, std::array<double, 3> voxel_um);
  /// Constant displacement.
  static DisplacementField translation(std::array<int, 3> dims, std::array<double, 3> voxel_um,
                                       std::array<double, 3> shift_um);
};

/// Throws unless the three components share one grid and are finite.
void validate_field(const DisplacementField& f);

enum class Interpolation { Linear, Nearest };

Interpolation parse_interpolation(std::string_view s);

/// Sample of `src` at physical position p (µm). Nearest: the voxel whose box
/// contains p. Linear: trilinear between voxel centers, edge values held within
/// the outermost half voxel. Positions outside the stack box give 0.
double sample_stack(const Stack3D& src, std::array<double, 3> p_um, Interpolation mode);

/// output(v) = src(center(v) + field(v)). Warns (through `warnings`) when an
/// integer-valued volume is resampled linearly.
Stack3D apply_field(const Stack3D& src, const DisplacementField& field, Interpolation mode,
                    std::vector<std::string>* warnings = nullptr, int threads = 1);

/// Two-hop field on b's grid: first b (reference -> intermediate), then a
/// (intermediate -> source), with a interpolated linearly and clamped at its border.
DisplacementField compose_fields(const DisplacementField& a, const DisplacementField& b);

/// Reference-space position of source points (µm): solves p_ref + field(p_ref) = p_src
/// by fixed-point iteration on the linearly interpolated field.
std::vector<std::array<double, 3>> map_points(std::span<const std::array<double, 3>> source_um,
                                              const DisplacementField& field, int max_iter = 100,
                                              double tol_um = 1e-6);

/// Field stored as `<prefix>_dx`, `<prefix>_dy`, `<prefix>_dz` f32 stacks.
void write_field(const DisplacementField& f, const std::filesystem::path& prefix);
DisplacementField read_field(const std::filesystem::path& prefix);

/// Mirror of the stack about the central plane perpendicular to `axis` (0 = x).
Stack3D mirror_stack(const Stack3D& st, int axis);

/// Mean of all stacks and their mirror images.
Stack3D axisymmetric_average(std::span<const Stack3D> stacks, int midplane_axis = 0);

struct RegionAtlas {
  Stack3D labels;                      ///< integer region IDs, 0 = outside
  std::map<int, std::string> names;

  [[nodiscard]] int region_at(std::array<double, 3> p_um) const;  ///< 0 when out of bounds
};

/// Throws when a label is non-integral, negative, or missing from the name table.
void validate_atlas(const RegionAtlas& atlas);

/// `<prefix>.hdr/.raw` label stack plus `<prefix>.names` (`<id> <name>` lines).
void write_atlas(const RegionAtlas& atlas, const std::filesystem::path& prefix);
RegionAtlas load_atlas(const std::filesystem::path& prefix);

struct RegionCounts {
  std::map<int, long> counts;  ///< nonzero regions only, entries > 0
  long outside = 0;
  [[nodiscard]] long total() const;
};

struct RegionSums {
  std::map<int, double> sums;  ///< every atlas region
  double outside = 0.0;
  [[nodiscard]] double total() const;
};

/// Counts the nonzero voxels of an atlas-space mask per region.
RegionCounts injection_regions(const Stack3D& mask, const RegionAtlas& atlas);

/// Counts points given in atlas-space µm.
RegionCounts injection_regions(std::span<const std::array<double, 3>> points_um, const RegionAtlas& atlas);

/// Cell points with voxel coordinates on a grid of `point_voxel_um`, placed at voxel centers.
RegionCounts injection_regions(const CellPointCloud& cells, std::array<double, 3> point_voxel_um,
                               const RegionAtlas& atlas);

/// Sum of L per region; with `normalize`, divided by the region's voxel count.
RegionSums projection_strengths(const Stack3D& L, const RegionAtlas& atlas, bool normalize = false);

struct ConnectivityTable {
  std::string brain_id;
  std::string injection_id;
  std::array<double, 3> resolution_um{0.0, 0.0, 0.0};
  bool normalized = false;
  std::map<int, long> src;
  std::map<int, double> tgt;

  friend bool operator==(const ConnectivityTable&, const ConnectivityTable&) = default;
};

ConnectivityTable connectivity_table(const RegionCounts& src, const RegionSums& tgt, const RegionAtlas& atlas,
                                     std::string brain_id, std::string injection_id, bool normalized);

void write_connectivity(const ConnectivityTable& t, const std::filesystem::path& path);
ConnectivityTable read_connectivity(const std::filesystem::path& path);

}  // namespace marmo
