#include "marmo/mapping.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "marmo/parallel.hpp"
#include "marmo/textio.hpp"

namespace marmo {

namespace fs = std::filesystem;

std::array<double, 3> DisplacementField::at(int x, int y, int z) const {
  const std::size_t i = dx.index(x, y, z);
  return {dx.data[i], dy.data[i], dz.data[i]};
}

DisplacementField DisplacementField::identity(std::array<int, 3> dims, std::array<double, 3> voxel_um) {
  return translation(dims, voxel_um, {0.0, 0.0, 0.0});
}

DisplacementField DisplacementField::translation(std::array<int, 3> dims, std::array<double, 3> voxel_um,
                                                 std::array<double, 3> shift_um) {
  return {Stack3D(dims, voxel_um, Channel::None, shift_um[0]), Stack3D(dims, voxel_um, Channel::None, shift_um[1]),
          Stack3D(dims, voxel_um, Channel::None, shift_um[2])};
}

void validate_field(const DisplacementField& f) {
  if (!f.dx.same_grid(f.dy) || !f.dx.same_grid(f.dz) || f.dx.voxel_um != f.dy.voxel_um ||
      f.dx.voxel_um != f.dz.voxel_um) {
    throw InvalidArgument("displacement field components are not on one grid");
  }
  if (f.dx.size() == 0) throw InvalidArgument("displacement field is empty");
  for (const Stack3D* c : {&f.dx, &f.dy, &f.dz})
    for (double v : c->data)
      if (!std::isfinite(v)) throw InvalidArgument("displacement field has non-finite vectors");
}

Interpolation parse_interpolation(std::string_view s) {
  if (s == "linear") return Interpolation::Linear;
  if (s == "nearest") return Interpolation::Nearest;
  throw InvalidArgument("unknown interpolation '" + std::string(s) + "' (expected linear or nearest)");
}

namespace {

std::array<double, 3> center_um(const Stack3D& g, int x, int y, int z) {
  return {(x + 0.5) * g.voxel_um[0], (y + 0.5) * g.voxel_um[1], (z + 0.5) * g.voxel_um[2]};
}

// Trilinear lookup at continuous voxel index c, clamped to the grid.
double trilinear(const Stack3D& s, std::array<double, 3> c) {
  int i0[3], i1[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double ca = std::clamp(c[a], 0.0, static_cast<double>(s.dims[a] - 1));
    i0[a] = std::min(static_cast<int>(std::floor(ca)), s.dims[a] - 1);
    i1[a] = std::min(i0[a] + 1, s.dims[a] - 1);
    f[a] = ca - i0[a];
  }
  double acc = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double wz = k ? f[2] : 1.0 - f[2];
    if (wz == 0.0) continue;
    const int z = k ? i1[2] : i0[2];
    for (int j = 0; j < 2; ++j) {
      const double wy = j ? f[1] : 1.0 - f[1];
      if (wy == 0.0) continue;
      const int y = j ? i1[1] : i0[1];
      for (int i = 0; i < 2; ++i) {
        const double wx = i ? f[0] : 1.0 - f[0];
        if (wx == 0.0) continue;
        acc += wz * wy * wx * s(i ? i1[0] : i0[0], y, z);
      }
    }
  }
  return acc;
}

std::array<double, 3> continuous_index(const Stack3D& s, std::array<double, 3> p) {
  return {p[0] / s.voxel_um[0] - 0.5, p[1] / s.voxel_um[1] - 0.5, p[2] / s.voxel_um[2] - 0.5};
}

std::array<double, 3> field_at(const DisplacementField& f, std::array<double, 3> p) {
  const auto c = continuous_index(f.dx, p);
  return {trilinear(f.dx, c), trilinear(f.dy, c), trilinear(f.dz, c)};
}

bool integer_valued(const Stack3D& s) {
  for (double v : s.data)
    if (v != std::floor(v)) return false;
  return true;
}

}  // namespace

double sample_stack(const Stack3D& src, std::array<double, 3> p, Interpolation mode) {
  int idx[3];
  for (int a = 0; a < 3; ++a) {
    if (!(p[a] >= 0.0) || !(p[a] < src.dims[a] * src.voxel_um[a])) return 0.0;
    idx[a] = std::min(static_cast<int>(std::floor(p[a] / src.voxel_um[a])), src.dims[a] - 1);
  }
  if (mode == Interpolation::Nearest) return src(idx[0], idx[1], idx[2]);
  return trilinear(src, continuous_index(src, p));
}

Stack3D apply_field(const Stack3D& src, const DisplacementField& field, Interpolation mode,
                    std::vector<std::string>* warnings, int threads) {
  validate_field(field);
  if (src.size() == 0) throw InvalidArgument("apply_field: empty source stack");
  if (mode == Interpolation::Linear && warnings && integer_valued(src)) {
    warnings->push_back("apply_field: integer-valued volume resampled with linear interpolation; "
                        "use nearest for labels and masks");
  }
  Stack3D out(field.dims(), field.voxel_um(), src.channel, 0.0);
  parallel_for(static_cast<std::size_t>(out.nz()), threads, [&](std::size_t zi) {
    const int z = static_cast<int>(zi);
    for (int y = 0; y < out.ny(); ++y)
      for (int x = 0; x < out.nx(); ++x) {
        auto p = center_um(out, x, y, z);
        const auto d = field.at(x, y, z);
        for (int a = 0; a < 3; ++a) p[a] += d[a];
        out(x, y, z) = sample_stack(src, p, mode);
      }
  });
  return out;
}

DisplacementField compose_fields(const DisplacementField& a, const DisplacementField& b) {
  validate_field(a);
  validate_field(b);
  DisplacementField out = b;
  for (int z = 0; z < b.dx.nz(); ++z)
    for (int y = 0; y < b.dx.ny(); ++y)
      for (int x = 0; x < b.dx.nx(); ++x) {
        const auto db = b.at(x, y, z);
        auto q = center_um(b.dx, x, y, z);
        for (int k = 0; k < 3; ++k) q[k] += db[k];
        const auto da = field_at(a, q);
        const std::size_t i = b.dx.index(x, y, z);
        out.dx.data[i] = db[0] + da[0];
        out.dy.data[i] = db[1] + da[1];
        out.dz.data[i] = db[2] + da[2];
      }
  return out;
}

std::vector<std::array<double, 3>> map_points(std::span<const std::array<double, 3>> source_um,
                                              const DisplacementField& field, int max_iter, double tol_um) {
  validate_field(field);
  std::vector<std::array<double, 3>> out;
  out.reserve(source_um.size());
  for (const auto& ps : source_um) {
    std::array<double, 3> x = ps;
    bool converged = false;
    for (int it = 0; it < max_iter; ++it) {
      const auto d = field_at(field, x);
      const std::array<double, 3> nx{ps[0] - d[0], ps[1] - d[1], ps[2] - d[2]};
      const double step = std::max({std::abs(nx[0] - x[0]), std::abs(nx[1] - x[1]), std::abs(nx[2] - x[2])});
      x = nx;
      if (step <= tol_um) {
        converged = true;
        break;
      }
    }
    if (!converged) {
      throw Error("map_points: field inversion did not converge for point (" + format_double(ps[0]) + ", " +
                  format_double(ps[1]) + ", " + format_double(ps[2]) + ")");
    }
    out.push_back(x);
  }
  return out;
}

namespace {

fs::path component_prefix(const fs::path& prefix, const char* suffix) {
  fs::path p = prefix;
  p += suffix;
  return p;
}

}  // namespace

void write_field(const DisplacementField& f, const fs::path& prefix) {
  validate_field(f);
  write_stack(f.dx, component_prefix(prefix, "_dx"), StorageType::F32);
  write_stack(f.dy, component_prefix(prefix, "_dy"), StorageType::F32);
  write_stack(f.dz, component_prefix(prefix, "_dz"), StorageType::F32);
}

DisplacementField read_field(const fs::path& prefix) {
  DisplacementField f{read_stack(component_prefix(prefix, "_dx")), read_stack(component_prefix(prefix, "_dy")),
                      read_stack(component_prefix(prefix, "_dz"))};
  validate_field(f);
  return f;
}

Stack3D mirror_stack(const Stack3D& st, int axis) {
  if (axis < 0 || axis > 2) throw InvalidArgument("mirror axis must be 0, 1 or 2");
  Stack3D out = st;
  for (int z = 0; z < st.nz(); ++z)
    for (int y = 0; y < st.ny(); ++y)
      for (int x = 0; x < st.nx(); ++x) {
        std::array<int, 3> s{x, y, z};
        s[axis] = st.dims[axis] - 1 - s[axis];
        out(x, y, z) = st(s[0], s[1], s[2]);
      }
  return out;
}

Stack3D axisymmetric_average(std::span<const Stack3D> stacks, int axis) {
  if (stacks.empty()) throw InvalidArgument("axisymmetric_average: no stacks");
  for (const auto& s : stacks)
    if (!s.same_grid(stacks[0])) throw InvalidArgument("axisymmetric_average: stacks are not congruent");
  Stack3D sum = stacks[0];
  std::fill(sum.data.begin(), sum.data.end(), 0.0);
  for (const auto& s : stacks) {
    const Stack3D m = mirror_stack(s, axis);
    for (std::size_t i = 0; i < sum.size(); ++i) sum.data[i] += s.data[i] + m.data[i];
  }
  const double n = 2.0 * static_cast<double>(stacks.size());
  for (double& v : sum.data) v /= n;
  return sum;
}

int RegionAtlas::region_at(std::array<double, 3> p) const {
  int idx[3];
  for (int a = 0; a < 3; ++a) {
    if (!(p[a] >= 0.0) || !(p[a] < labels.dims[a] * labels.voxel_um[a])) return 0;
    idx[a] = std::min(static_cast<int>(std::floor(p[a] / labels.voxel_um[a])), labels.dims[a] - 1);
  }
  return static_cast<int>(labels(idx[0], idx[1], idx[2]));
}

void validate_atlas(const RegionAtlas& atlas) {
  if (atlas.labels.size() == 0) throw InvalidArgument("atlas: empty label stack");
  std::set<int> missing;
  for (double v : atlas.labels.data) {
    if (v < 0.0 || v != std::floor(v)) throw InvalidArgument("atlas: labels must be non-negative integers");
    const int id = static_cast<int>(v);
    if (id != 0 && !atlas.names.contains(id)) missing.insert(id);
  }
  if (!missing.empty()) {
    throw InvalidArgument("atlas: region " + std::to_string(*missing.begin()) + " has no entry in the name table");
  }
}

void write_atlas(const RegionAtlas& atlas, const fs::path& prefix) {
  validate_atlas(atlas);
  write_stack(atlas.labels, prefix, StorageType::U16);
  std::ofstream out(component_prefix(prefix, ".names"));
  for (const auto& [id, name] : atlas.names) out << id << ' ' << name << '\n';
  if (!out) throw Error("cannot write " + component_prefix(prefix, ".names").string());
}

RegionAtlas load_atlas(const fs::path& prefix_in) {
  const fs::path prefix = stack_prefix(prefix_in);
  RegionAtlas atlas;
  atlas.labels = read_stack(prefix);
  const fs::path np = component_prefix(prefix, ".names");
  std::ifstream in(np);
  if (!in) throw FormatError("cannot open atlas name table " + np.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto sp = t.find_first_of(" \t");
    if (sp == std::string_view::npos) throw FormatError(np.string() + ":" + std::to_string(lineno) + ": missing name");
    const int id = static_cast<int>(parse_int(t.substr(0, sp)));
    if (id <= 0) throw FormatError(np.string() + ":" + std::to_string(lineno) + ": region IDs start at 1");
    atlas.names[id] = std::string(trim(t.substr(sp)));
  }
  validate_atlas(atlas);
  return atlas;
}

long RegionCounts::total() const {
  long t = outside;
  for (const auto& [id, c] : counts) t += c;
  return t;
}

double RegionSums::total() const {
  double t = outside;
  for (const auto& [id, s] : sums) t += s;
  return t;
}

RegionCounts injection_regions(const Stack3D& mask, const RegionAtlas& atlas) {
  if (!mask.same_grid(atlas.labels)) throw InvalidArgument("injection_regions: mask is not on the atlas grid");
  RegionCounts r;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.data[i] == 0.0) continue;
    const int id = static_cast<int>(atlas.labels.data[i]);
    if (id == 0) ++r.outside;
    else ++r.counts[id];
  }
  return r;
}

RegionCounts injection_regions(std::span<const std::array<double, 3>> points_um, const RegionAtlas& atlas) {
  RegionCounts r;
  for (const auto& p : points_um) {
    const int id = atlas.region_at(p);
    if (id == 0) ++r.outside;
    else ++r.counts[id];
  }
  return r;
}

RegionCounts injection_regions(const CellPointCloud& cells, std::array<double, 3> vox, const RegionAtlas& atlas) {
  std::vector<std::array<double, 3>> pts;
  pts.reserve(cells.size());
  for (const auto& c : cells) pts.push_back({(c.x + 0.5) * vox[0], (c.y + 0.5) * vox[1], (c.z + 0.5) * vox[2]});
  return injection_regions(pts, atlas);
}

RegionSums projection_strengths(const Stack3D& L, const RegionAtlas& atlas, bool normalize) {
  if (!L.same_grid(atlas.labels)) throw InvalidArgument("projection_strengths: signal is not on the atlas grid");
  RegionSums r;
  std::map<int, long> voxels;
  for (const auto& [id, name] : atlas.names) r.sums[id] = 0.0;
  long outside_voxels = 0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    const int id = static_cast<int>(atlas.labels.data[i]);
    if (id == 0) {
      r.outside += L.data[i];
      ++outside_voxels;
    } else {
      r.sums[id] += L.data[i];
      ++voxels[id];
    }
  }
  if (normalize) {
    for (auto& [id, s] : r.sums) s = voxels[id] ? s / static_cast<double>(voxels[id]) : 0.0;
    r.outside = outside_voxels ? r.outside / static_cast<double>(outside_voxels) : 0.0;
  }
  return r;
}

ConnectivityTable connectivity_table(const RegionCounts& src, const RegionSums& tgt, const RegionAtlas& atlas,
                                     std::string brain_id, std::string injection_id, bool normalized) {
  ConnectivityTable t;
  t.brain_id = std::move(brain_id);
  t.injection_id = std::move(injection_id);
  t.resolution_um = atlas.labels.voxel_um;
  t.normalized = normalized;
  for (const auto& [id, c] : src.counts) {
    if (!atlas.names.contains(id)) throw InvalidArgument("connectivity: source region " + std::to_string(id) + " not in atlas");
    t.src[id] = c;
  }
  for (const auto& [id, s] : tgt.sums) {
    if (!atlas.names.contains(id)) throw InvalidArgument("connectivity: target region " + std::to_string(id) + " not in atlas");
    if (s < 0.0) throw InvalidArgument("connectivity: negative signal sum in region " + std::to_string(id));
    t.tgt[id] = s;
  }
  return t;
}

void write_connectivity(const ConnectivityTable& t, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "# brain=" << t.brain_id << " injection=" << t.injection_id << '\n'
      << "# resolution_um=" << format_double(t.resolution_um[0]) << ' ' << format_double(t.resolution_um[1]) << ' '
      << format_double(t.resolution_um[2]) << '\n'
      << "# strength=" << (t.normalized ? "mean" : "sum") << '\n';
  for (const auto& [id, c] : t.src) out << "src " << id << ' ' << c << '\n';
  for (const auto& [id, s] : t.tgt) out << "tgt " << id << ' ' << format_double(s) << '\n';
  if (!out) throw Error("write failed for " + path.string());
}

ConnectivityTable read_connectivity(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  ConnectivityTable t;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& why) {
    throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto s = trim(line);
    if (s.empty()) continue;
    if (s[0] == '#') {
      for (const auto& tok : split_ws(s.substr(1))) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "brain") t.brain_id = val;
        else if (key == "injection") t.injection_id = val;
        else if (key == "strength") t.normalized = val == "mean";
        else if (key == "resolution_um") {
          const auto rest = split_ws(s.substr(s.find('=') + 1));
          if (rest.size() != 3) fail("resolution_um needs three values");
          for (int a = 0; a < 3; ++a) t.resolution_um[a] = parse_double(rest[a]);
        }
      }
      continue;
    }
    const auto tok = split_ws(s);
    if (tok.size() != 3) fail("expected '<src|tgt> <region> <value>'");
    const int id = static_cast<int>(parse_int(tok[1]));
    if (tok[0] == "src") t.src[id] = parse_int(tok[2]);
    else if (tok[0] == "tgt") t.tgt[id] = parse_double(tok[2]);
    else fail("unknown record '" + tok[0] + "'");
  }
  return t;
}

}  // namespace marmo
