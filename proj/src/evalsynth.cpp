#include "marmo/evalsynth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>

#include "marmo/textio.hpp"

namespace marmo {

namespace fs = std::filesystem;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(seed) ^ k);
}

// --- spec -------------------------------------------------------------------

namespace {

struct SpecField {
  const char* key;
  std::function<void(PhantomSpec&, const std::string&)> set;
  std::function<std::string(const PhantomSpec&)> get;
};

template <typename T>
SpecField num_field(const char* key, T PhantomSpec::*m) {
  return {key,
          [m](PhantomSpec& s, const std::string& v) {
            if constexpr (std::is_same_v<T, double>) s.*m = parse_double(v);
            else s.*m = static_cast<T>(parse_int(v));
          },
          [m](const PhantomSpec& s) {
            if constexpr (std::is_same_v<T, double>) return format_double(s.*m);
            else return std::to_string(s.*m);
          }};
}

const std::vector<SpecField>& spec_fields() {
  static const std::vector<SpecField> fields = [] {
    std::vector<SpecField> f;
    f.push_back({"seed", [](PhantomSpec& s, const std::string& v) { s.seed = std::stoull(v); },
                 [](const PhantomSpec& s) { return std::to_string(s.seed); }});
    f.push_back(num_field("sections", &PhantomSpec::sections));
    f.push_back(num_field("tiles_x", &PhantomSpec::tiles_x));
    f.push_back(num_field("tiles_y", &PhantomSpec::tiles_y));
    f.push_back(num_field("tile_extent", &PhantomSpec::tile_extent));
    f.push_back(num_field("margin", &PhantomSpec::margin));
    f.push_back(num_field("overlap", &PhantomSpec::overlap));
    f.push_back(num_field("pitch_um", &PhantomSpec::pitch_um));
    f.push_back(num_field("section_um", &PhantomSpec::section_um));
    f.push_back(num_field("vignette_corner", &PhantomSpec::vignette_corner));
    f.push_back({"noise",
                 [](PhantomSpec& s, const std::string& v) {
                   if (v == "1" || v == "true") s.noise = true;
                   else if (v == "0" || v == "false") s.noise = false;
                   else throw FormatError("noise must be 0 or 1, got '" + v + "'");
                 },
                 [](const PhantomSpec& s) { return std::string(s.noise ? "1" : "0"); }});
    f.push_back(num_field("bg_cr", &PhantomSpec::bg_cr));
    f.push_back(num_field("crosstalk", &PhantomSpec::crosstalk));
    f.push_back(num_field("bg_cb", &PhantomSpec::bg_cb));
    f.push_back(num_field("cell_count", &PhantomSpec::cell_count));
    f.push_back(num_field("cell_amplitude", &PhantomSpec::cell_amplitude));
    f.push_back(num_field("cell_sigma_px", &PhantomSpec::cell_sigma_px));
    f.push_back(num_field("cell_min_spacing_px", &PhantomSpec::cell_min_spacing_px));
    f.push_back(num_field("cell_cg_fraction", &PhantomSpec::cell_cg_fraction));
    f.push_back(num_field("cell_region_um", &PhantomSpec::cell_region_um));
    f.push_back(num_field("axon_count", &PhantomSpec::axon_count));
    f.push_back(num_field("axon_contrast", &PhantomSpec::axon_contrast));
    f.push_back(num_field("axon_width_px", &PhantomSpec::axon_width_px));
    f.push_back(num_field("axon_length_px", &PhantomSpec::axon_length_px));
    f.push_back(num_field("vessel_count", &PhantomSpec::vessel_count));
    f.push_back(num_field("vessel_contrast", &PhantomSpec::vessel_contrast));
    f.push_back(num_field("vessel_width_px", &PhantomSpec::vessel_width_px));
    f.push_back(num_field("vessel_length_px", &PhantomSpec::vessel_length_px));
    f.push_back({"injection_center_um",
                 [](PhantomSpec& s, const std::string& v) {
                   const auto t = split_ws(v);
                   if (t.size() != 3) throw FormatError("injection_center_um needs three values");
                   for (int a = 0; a < 3; ++a) s.injection_center_um[a] = parse_double(t[a]);
                 },
                 [](const PhantomSpec& s) {
                   return format_double(s.injection_center_um[0]) + " " + format_double(s.injection_center_um[1]) +
                          " " + format_double(s.injection_center_um[2]);
                 }});
    f.push_back(num_field("injection_sigma_um", &PhantomSpec::injection_sigma_um));
    f.push_back(num_field("injection_amplitude", &PhantomSpec::injection_amplitude));
    f.push_back(num_field("injection_threshold", &PhantomSpec::injection_threshold));
    f.push_back(num_field("atlas_voxel_um", &PhantomSpec::atlas_voxel_um));
    f.push_back(num_field("threshold_t", &PhantomSpec::threshold_t));
    return f;
  }();
  return fields;
}

}  // namespace

PhantomSpec parse_phantom_spec(std::string_view text) {
  PhantomSpec spec;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const auto s = trim(std::string_view(line).substr(0, hash));
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw FormatError("phantom spec line " + std::to_string(lineno) + ": expected key=value");
    const std::string key(trim(s.substr(0, eq))), value(trim(s.substr(eq + 1)));
    const auto& fields = spec_fields();
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const SpecField& f) { return key == f.key; });
    if (it == fields.end()) throw FormatError("phantom spec line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    try {
      it->set(spec, value);
    } catch (const std::exception& e) {
      throw FormatError("phantom spec line " + std::to_string(lineno) + ": bad value for " + key + ": " + e.what());
    }
  }
  validate_phantom_spec(spec);
  return spec;
}

PhantomSpec read_phantom_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open phantom spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_phantom_spec(ss.str());
}

std::string format_phantom_spec(const PhantomSpec& spec) {
  std::string out;
  for (const auto& f : spec_fields()) out += std::string(f.key) + "=" + f.get(spec) + "\n";
  return out;
}

void validate_phantom_spec(const PhantomSpec& s) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw InvalidArgument("phantom spec: " + what);
  };
  need(s.sections >= 1, "sections must be >= 1");
  need(s.tiles_x >= 1 && s.tiles_y >= 1, "tile grid must be at least 1x1");
  need(s.margin >= 0 && 2 * s.margin < s.tile_extent, "margin must leave a non-empty tile");
  need(s.overlap >= 0 && s.step_px() > 0, "overlap must be smaller than the cropped tile");
  need(s.pitch_um > 0 && s.section_um > 0 && s.atlas_voxel_um > 0, "pitch, section spacing and atlas voxel must be positive");
  need(s.vignette_corner > 0 && s.vignette_corner <= 1, "vignette_corner must be in (0, 1]");
  need(s.bg_cr >= 0 && s.bg_cb >= 0 && s.crosstalk >= 0, "backgrounds must be non-negative");
  need(s.cell_count >= 0 && s.axon_count >= 0 && s.vessel_count >= 0, "counts must be non-negative");
  need(s.cell_amplitude >= 0 && s.axon_contrast >= 0 && s.vessel_contrast >= 0 && s.injection_amplitude >= 0,
       "amplitudes must be non-negative");
  need(s.cell_sigma_px > 0 && s.axon_width_px > 0 && s.vessel_width_px > 0 && s.injection_sigma_um > 0,
       "structure sizes must be positive");
  need(s.cell_region_um >= 0 && s.cell_min_spacing_px >= 0, "cell placement radii must be non-negative");
  const int border = static_cast<int>(std::ceil(4 * s.cell_sigma_px)) + 1;
  need(s.cell_count == 0 || (s.section_width() > 2 * border && s.section_height() > 2 * border),
       "section smaller than a cell");
  need(s.threshold_t > 0, "threshold_t must be positive");
}

// --- rendering -----------------------------------------------------------------

Image vignette_field(int width, int height, double corner) {
  Image v(width, height);
  const double cx = 0.5 * width, cy = 0.5 * height, rc = std::hypot(cx, cy);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double r = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      v(x, y) = corner + (1.0 - corner) * 0.5 * (1.0 + std::cos(std::numbers::pi * r / rc));
    }
  return v;
}

Image mean_normalized(const Image& img) {
  double sum = 0.0;
  for (double v : img.data) sum += v;
  const double mean = sum / static_cast<double>(img.size());
  if (!(mean > 0.0)) throw InvalidArgument("mean_normalized: mean must be positive");
  Image out = img;
  for (double& v : out.data) v /= mean;
  return out;
}

namespace {

using Polyline = std::vector<std::array<double, 2>>;

// Random walk with a smoothly varying heading, in canvas coordinates.
Polyline random_walk(std::mt19937_64& rng, double x0, double y0, double length) {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> turn(0.0, 0.04);
  double theta = angle(rng), omega = 0.0;
  constexpr double step = 2.0;
  Polyline p{{x0, y0}};
  for (double s = 0.0; s < length; s += step) {
    omega = 0.9 * omega + turn(rng);
    theta += omega;
    p.push_back({p.back()[0] + step * std::cos(theta), p.back()[1] + step * std::sin(theta)});
  }
  return p;
}

// Pixels whose centers lie within width / 2 of the polyline.
void rasterize(const Polyline& p, double width, Mask& m) {
  const double r = 0.5 * width;
  for (std::size_t k = 0; k + 1 < p.size(); ++k) {
    const auto a = p[k], b = p[k + 1];
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a[0], b[0]) - r - 1)));
    const int x1 = std::min(m.width - 1, static_cast<int>(std::ceil(std::max(a[0], b[0]) + r + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a[1], b[1]) - r - 1)));
    const int y1 = std::min(m.height - 1, static_cast<int>(std::ceil(std::max(a[1], b[1]) + r + 1)));
    const double dx = b[0] - a[0], dy = b[1] - a[1], len2 = dx * dx + dy * dy;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5 - a[0], py = y + 0.5 - a[1];
        const double t = len2 > 0 ? std::clamp((px * dx + py * dy) / len2, 0.0, 1.0) : 0.0;
        const double ex = px - t * dx, ey = py - t * dy;
        if (ex * ex + ey * ey <= r * r) m(x, y) = 1;
      }
  }
}

Mask strokes(std::mt19937_64& rng, int count, double length, double width, int canvas_w, int canvas_h, int margin,
             int section_w, int section_h) {
  Mask m(canvas_w, canvas_h, 0);
  std::uniform_real_distribution<double> ux(margin, margin + section_w), uy(margin, margin + section_h);
  for (int i = 0; i < count; ++i) {
    const double x0 = ux(rng), y0 = uy(rng);
    rasterize(random_walk(rng, x0, y0, length), width, m);
  }
  return m;
}

Image crop(const Image& img, int x0, int y0, int w, int h) {
  Image out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out(x, y) = img(x0 + x, y0 + y);
  return out;
}

}  // namespace

RegionAtlas make_toy_atlas(std::array<int, 3> dims, double voxel_um) {
  RegionAtlas atlas;
  atlas.labels = Stack3D(dims, {voxel_um, voxel_um, voxel_um}, Channel::None, 0.0);
  atlas.names = {{1, "source_cortex"}, {2, "relay_nucleus"}, {3, "target_cortex"}};
  const double cx = 0.5 * dims[0], cy = 0.5 * dims[1], cz = 0.5 * dims[2];
  const double rx = 0.48 * dims[0], ry = 0.48 * dims[1], rz = std::max(0.75 * dims[2], 1.0);
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const double ex = (x + 0.5 - cx) / rx, ey = (y + 0.5 - cy) / ry, ez = (z + 0.5 - cz) / rz;
        if (ex * ex + ey * ey + ez * ez > 1.0) continue;
        const double fx = (x + 0.5) / dims[0];
        atlas.labels(x, y, z) = fx < 0.37 ? 1.0 : (fx < 0.65 ? 2.0 : 3.0);
      }
  return atlas;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  validate_phantom_spec(spec);
  const int step = spec.step_px();
  const int cw = (spec.tiles_x - 1) * step + spec.tile_extent;
  const int ch = (spec.tiles_y - 1) * step + spec.tile_extent;
  const int sw = spec.section_width(), sh = spec.section_height();
  const int m = spec.margin;
  const int nz = spec.sections;

  Phantom ph;
  ph.spec = spec;

  // Cells: integer pixel centers in the section frame.
  {
    std::mt19937_64 rng(derive_seed(spec.seed, 1));
    const int border = static_cast<int>(std::ceil(4 * spec.cell_sigma_px)) + 1;
    const auto& c = spec.injection_center_um;
    std::vector<int> eligible;
    for (int k = 0; k < nz; ++k) {
      const double dz = (k + 0.5) * spec.section_um - c[2];
      if (spec.cell_region_um == 0.0 || std::abs(dz) <= spec.cell_region_um) eligible.push_back(k);
    }
    if (spec.cell_count > 0 && eligible.empty()) throw InvalidArgument("phantom: no section lies within cell_region_um");
    std::uniform_int_distribution<std::size_t> pick_z(0, eligible.empty() ? 0 : eligible.size() - 1);
    std::uniform_int_distribution<int> px(border, sw - 1 - border), py(border, sh - 1 - border);
    int attempts = 0;
    while (static_cast<int>(ph.truth.cells.size()) < spec.cell_count) {
      if (++attempts > 200000) {
        throw InvalidArgument("phantom: cannot place " + std::to_string(spec.cell_count) +
                              " cells with the requested spacing");
      }
      const int z = eligible[pick_z(rng)];
      const int x = px(rng), y = py(rng);
      if (spec.cell_region_um > 0.0) {
        const double dx = (x + 0.5) * spec.pitch_um - c[0], dy = (y + 0.5) * spec.pitch_um - c[1];
        const double dz = (z + 0.5) * spec.section_um - c[2];
        if (dx * dx + dy * dy + dz * dz > spec.cell_region_um * spec.cell_region_um) continue;
      }
      bool ok = true;
      for (const auto& o : ph.truth.cells)
        if (o.z == z && std::hypot(o.x - x, o.y - y) < spec.cell_min_spacing_px) ok = false;
      if (ok) ph.truth.cells.push_back({x, y, z, 1.0});
    }
    std::sort(ph.truth.cells.begin(), ph.truth.cells.end(), [](const CellPoint& a, const CellPoint& b) {
      return std::tie(a.z, a.y, a.x) < std::tie(b.z, b.y, b.x);
    });
  }

  const Image vig = vignette_field(spec.tile_extent, spec.tile_extent, spec.vignette_corner);
  ph.truth.vignette = vig;
  std::vector<Image> sec_cr, sec_cg, sec_cb, axon_slices, vessel_slices, signal_slices;
  std::mt19937_64 axon_rng(derive_seed(spec.seed, 2)), vessel_rng(derive_seed(spec.seed, 3));
  const int rc = static_cast<int>(std::ceil(4 * spec.cell_sigma_px));

  for (int k = 0; k < nz; ++k) {
    const Mask axons = strokes(axon_rng, spec.axon_count, spec.axon_length_px, spec.axon_width_px, cw, ch, m, sw, sh);
    const Mask vessels =
        strokes(vessel_rng, spec.vessel_count, spec.vessel_length_px, spec.vessel_width_px, cw, ch, m, sw, sh);
    Image cells(cw, ch, 0.0);
    for (const auto& c : ph.truth.cells) {
      if (c.z != k) continue;
      for (int dy = -rc; dy <= rc; ++dy)
        for (int dx = -rc; dx <= rc; ++dx) {
          const int x = c.x + m + dx, y = c.y + m + dy;
          if (!cells.contains(x, y)) continue;
          cells(x, y) += spec.cell_amplitude *
                         std::exp(-(dx * dx + dy * dy) / (2.0 * spec.cell_sigma_px * spec.cell_sigma_px));
        }
    }
    Image cr(cw, ch), cg(cw, ch), cb(cw, ch);
    const auto& ic = spec.injection_center_um;
    const double dz = (k + 0.5) * spec.section_um - ic[2];
    const double s2 = 2.0 * spec.injection_sigma_um * spec.injection_sigma_um;
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) {
        const double vessel = vessels(x, y) ? spec.vessel_contrast : 0.0;
        const double axon = axons(x, y) ? spec.axon_contrast : 0.0;
        const double ux = (x - m + 0.5) * spec.pitch_um - ic[0], uy = (y - m + 0.5) * spec.pitch_um - ic[1];
        const double inj = spec.injection_amplitude * std::exp(-(ux * ux + uy * uy + dz * dz) / s2);
        cr(x, y) = to_u16(spec.bg_cr + vessel);
        cg(x, y) = to_u16(spec.crosstalk * spec.bg_cr + vessel + axon + spec.cell_cg_fraction * cells(x, y));
        cb(x, y) = to_u16(spec.bg_cb + inj + cells(x, y));
      }

    // Tiles.
    const std::pair<Channel, const Image*> chans[] = {{Channel::CR, &cr}, {Channel::CG, &cg}, {Channel::CB, &cb}};
    for (int j = 0; j < spec.tiles_y; ++j)
      for (int i = 0; i < spec.tiles_x; ++i) {
        const int index = j * spec.tiles_x + i;
        for (const auto& [chan, img] : chans) {
          Tile2D t(spec.tile_extent, spec.tile_extent, chan);
          t.index = index;
          t.pixel_pitch_um = spec.pitch_um;
          t.world_offset_um = {i * step * spec.pitch_um, j * step * spec.pitch_um, k * spec.section_um};
          std::mt19937_64 rng(derive_seed(spec.seed, 1000 + 3 * (static_cast<std::uint64_t>(k) * 1000 + index) +
                                                         static_cast<std::uint64_t>(chan)));
          for (int y = 0; y < t.height; ++y)
            for (int x = 0; x < t.width; ++x) {
              const double mean = (*img)(i * step + x, j * step + y) * vig(x, y);
              if (spec.noise) {
                std::poisson_distribution<long> pois(std::max(mean, 1e-9));
                t(x, y) = to_u16(static_cast<double>(pois(rng)));
              } else {
                t(x, y) = to_u16(mean);
              }
            }
          ph.tiles.push_back(std::move(t));
        }
      }

    Image axon_sec(sw, sh, 0.0), vessel_sec(sw, sh, 0.0), signal(sw, sh, 0.0);
    for (int y = 0; y < sh; ++y)
      for (int x = 0; x < sw; ++x) {
        axon_sec(x, y) = axons(x + m, y + m);
        vessel_sec(x, y) = vessels(x + m, y + m);
        if (axons(x + m, y + m)) {
          const double g = cg(x + m, y + m), r = spec.threshold_t * cr(x + m, y + m);
          signal(x, y) = g < r ? 0.0 : g - r;
        }
      }
    sec_cr.push_back(crop(cr, m, m, sw, sh));
    sec_cg.push_back(crop(cg, m, m, sw, sh));
    sec_cb.push_back(crop(cb, m, m, sw, sh));
    axon_slices.push_back(axon_sec);
    vessel_slices.push_back(vessel_sec);
    signal_slices.push_back(signal);
  }

  const std::array<double, 3> vox{spec.pitch_um, spec.pitch_um, spec.section_um};
  ph.sections[Channel::CR] = stack_from_slices(sec_cr, vox, Channel::CR);
  ph.sections[Channel::CG] = stack_from_slices(sec_cg, vox, Channel::CG);
  ph.sections[Channel::CB] = stack_from_slices(sec_cb, vox, Channel::CB);
  ph.truth.tracer_mask = stack_from_slices(axon_slices, vox, Channel::None);
  ph.truth.vessel_mask = stack_from_slices(vessel_slices, vox, Channel::None);
  ph.truth.tracer_signal = stack_from_slices(signal_slices, vox, Channel::None);

  const std::array<double, 3> atlas_vox{spec.atlas_voxel_um, spec.atlas_voxel_um, spec.atlas_voxel_um};
  const Stack3D low_signal = downsample_stack(ph.truth.tracer_signal, atlas_vox);
  Stack3D low_cb = downsample_stack(ph.sections[Channel::CB], atlas_vox);
  for (double& v : low_cb.data) v = v > spec.injection_threshold ? 1.0 : 0.0;
  low_cb.channel = Channel::None;
  ph.truth.injection_mask = low_cb;
  ph.truth.atlas = make_toy_atlas(low_signal.dims, spec.atlas_voxel_um);

  const auto src = injection_regions(ph.truth.cells, vox, ph.truth.atlas);
  const auto tgt = projection_strengths(low_signal, ph.truth.atlas, false);
  ph.truth.table = connectivity_table(src, tgt, ph.truth.atlas, "phantom-" + std::to_string(spec.seed), "inj0", false);
  return ph;
}

void write_phantom(const Phantom& p, const fs::path& dir) {
  const fs::path tiles = dir / "tiles", truth = dir / "truth";
  fs::create_directories(tiles);
  fs::create_directories(truth);
  const int per_section = p.spec.tiles_x * p.spec.tiles_y;
  for (std::size_t n = 0; n < p.tiles.size(); ++n) {
    const Tile2D& t = p.tiles[n];
    const int z = static_cast<int>(n / (3 * static_cast<std::size_t>(per_section)));
    write_tile(t, tiles / ("s" + std::to_string(z) + "_t" + std::to_string(t.index) + "_" +
                           std::string(channel_name(t.channel)) + ".pgm"));
  }
  {
    std::ofstream spec(truth / "spec.txt");
    spec << format_phantom_spec(p.spec);
  }
  Stack3D vig({p.truth.vignette.width, p.truth.vignette.height, 1}, {p.spec.pitch_um, p.spec.pitch_um, 1.0});
  vig.set_slice(0, p.truth.vignette);
  write_stack(vig, truth / "vignette", StorageType::F32);
  write_cells(p.truth.cells, truth / "cells.txt");
  write_stack(p.truth.tracer_mask, truth / "tracer_mask", StorageType::U16);
  write_stack(p.truth.tracer_signal, truth / "tracer_signal", StorageType::F64);
  write_stack(p.truth.vessel_mask, truth / "vessel_mask", StorageType::U16);
  write_stack(p.truth.injection_mask, truth / "injection_mask", StorageType::U16);
  for (const auto& [chan, st] : p.sections)
    write_stack(st, truth / ("section_" + std::string(channel_name(chan))), StorageType::U16);
  write_atlas(p.truth.atlas, truth / "atlas");
  write_connectivity(p.truth.table, truth / "connectivity.txt");
}

CellPointCloud read_truth_cells(const fs::path& dir) { return read_cells(dir / "truth" / "cells.txt"); }

FlatfieldPhantom flatfield_phantom(int n_tiles, int width, int height, double lambda, double corner,
                                   double outlier_fraction, std::uint64_t seed, Channel channel) {
  if (n_tiles <= 0 || !(lambda > 0.0) || outlier_fraction < 0.0 || outlier_fraction > 1.0) {
    throw InvalidArgument("flatfield_phantom: bad parameters");
  }
  FlatfieldPhantom out;
  const Image vig = vignette_field(width, height, corner);
  out.vignette = mean_normalized(vig);
  // Inverse-CDF table for the Poisson background.
  std::vector<double> cdf;
  double pk = std::exp(-lambda), acc = 0.0;
  for (int k = 0; acc < 1.0 - 1e-15 && k < 100000; ++k) {
    acc += pk;
    cdf.push_back(acc);
    pk *= lambda / (k + 1);
  }
  out.tiles.reserve(static_cast<std::size_t>(n_tiles));
  for (int t = 0; t < n_tiles; ++t) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> bright(3000, 60000);
    Tile2D tile(width, height, channel);
    tile.index = t;
    for (std::size_t i = 0; i < tile.pixels.size(); ++i) {
      const double u = unit(rng);
      const auto k = static_cast<double>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      double v = k * vig.data[i];
      if (outlier_fraction > 0.0 && unit(rng) < outlier_fraction) v = unit(rng) < 0.5 ? 1.0 : bright(rng);
      tile.pixels[i] = to_u16(v);
    }
    out.tiles.push_back(std::move(tile));
  }
  return out;
}

// --- metrics -------------------------------------------------------------------

double MatchResult::precision() const { return tp + fp == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp); }
double MatchResult::recall() const { return tp + fn == 0 ? 1.0 : static_cast<double>(tp) / (tp + fn); }
double MatchResult::f1() const {
  const double p = precision(), r = recall();
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

MatchResult match_detections(const CellPointCloud& pred, const CellPointCloud& truth, double radius_px) {
  if (!(radius_px > 0.0)) throw InvalidArgument("match_detections: radius must be positive");
  std::vector<std::size_t> order(pred.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pred[a].score > pred[b].score; });
  std::vector<char> used(truth.size(), 0);
  MatchResult r;
  const double r2 = radius_px * radius_px;
  for (std::size_t pi : order) {
    const auto& p = pred[pi];
    std::size_t best = truth.size();
    double best_d2 = r2;
    for (std::size_t ti = 0; ti < truth.size(); ++ti) {
      if (used[ti] || truth[ti].z != p.z) continue;
      const double dx = truth[ti].x - p.x, dy = truth[ti].y - p.y, d2 = dx * dx + dy * dy;
      if (d2 <= r2 && (best == truth.size() || d2 < best_d2)) {
        best = ti;
        best_d2 = d2;
      }
    }
    if (best < truth.size()) {
      used[best] = 1;
      ++r.tp;
      r.pairs.emplace_back(pi, best);
    } else {
      ++r.fp;
    }
  }
  r.fn = truth.size() - r.tp;
  return r;
}

std::vector<PrPoint> precision_recall_curve(const CellPointCloud& pred, const CellPointCloud& truth, double radius_px,
                                            std::span<const double> thresholds) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw InvalidArgument("precision_recall_curve: thresholds must be sorted");
  }
  std::vector<PrPoint> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    CellPointCloud kept;
    for (const auto& p : pred)
      if (p.score > t) kept.push_back(p);
    const auto m = match_detections(kept, truth, radius_px);
    out.push_back({t, m.precision(), truth.empty() ? 1.0 : static_cast<double>(m.tp) / truth.size(), m.tp, m.fp, m.fn});
  }
  return out;
}

namespace {

SegmentationMetrics from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  SegmentationMetrics s;
  s.tp = tp;
  s.fp = fp;
  s.fn = fn;
  const auto ratio = [](std::size_t num, std::size_t den) { return den == 0 ? 1.0 : static_cast<double>(num) / den; };
  s.precision = ratio(tp, tp + fp);
  s.recall = ratio(tp, tp + fn);
  s.f1 = ratio(2 * tp, 2 * tp + fp + fn);
  s.iou = ratio(tp, tp + fp + fn);
  return s;
}

template <typename It>
SegmentationMetrics count_sets(It pb, It pe, It tb) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (; pb != pe; ++pb, ++tb) {
    const bool p = *pb != 0, t = *tb != 0;
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
  }
  return from_counts(tp, fp, fn);
}

}  // namespace

SegmentationMetrics segmentation_metrics(const Mask& pred, const Mask& truth) {
  require_same_shape(pred, truth, "segmentation_metrics");
  return count_sets(pred.data.begin(), pred.data.end(), truth.data.begin());
}

SegmentationMetrics segmentation_metrics(const Stack3D& pred, const Stack3D& truth) {
  if (!pred.same_grid(truth)) throw InvalidArgument("segmentation_metrics: stacks differ in extent");
  return count_sets(pred.data.begin(), pred.data.end(), truth.data.begin());
}

// --- Hessian protocol ------------------------------------------------------------

namespace {

CellPointCloud candidates(std::span<const LabeledSlice> slices, std::span<const double> sigmas, double threshold) {
  CellPointCloud all;
  for (std::size_t z = 0; z < slices.size(); ++z) {
    const auto pts = local_maxima(hessian_cell_filter(slices[z].image, sigmas), threshold, static_cast<int>(z));
    all.insert(all.end(), pts.begin(), pts.end());
  }
  return all;
}

CellPointCloud truth_of(std::span<const LabeledSlice> slices) {
  CellPointCloud all;
  for (std::size_t z = 0; z < slices.size(); ++z)
    for (auto p : slices[z].truth) {
      p.z = static_cast<int>(z);
      all.push_back(p);
    }
  return all;
}

}  // namespace

HessianSelection select_hessian_baseline(std::span<const LabeledSlice> train, std::span<const LabeledSlice> test,
                                         std::span<const std::vector<double>> sigma_sets, double radius_px,
                                         int /*threads*/) {
  if (train.empty() || test.empty() || sigma_sets.empty()) throw InvalidArgument("hessian baseline: empty split");
  const CellPointCloud train_truth = truth_of(train);
  HessianSelection best;
  best.train_f1 = -1.0;
  for (const auto& sigmas : sigma_sets) {
    const CellPointCloud cand = candidates(train, sigmas, 0.0);
    std::vector<double> scores;
    for (const auto& p : cand) scores.push_back(p.score);
    std::sort(scores.begin(), scores.end());
    scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
    // Thresholds at up to 256 score quantiles, each just below a candidate score.
    std::vector<double> thresholds{0.0};
    const std::size_t n = scores.size(), stride = std::max<std::size_t>(1, n / 256);
    for (std::size_t i = 1; i < n; i += stride) thresholds.push_back(0.5 * (scores[i - 1] + scores[i]));
    std::sort(thresholds.begin(), thresholds.end());
    const auto curve = precision_recall_curve(cand, train_truth, radius_px, thresholds);
    for (const auto& pt : curve) {
      const double f1 = pt.precision + pt.recall == 0.0 ? 0.0 : 2 * pt.precision * pt.recall / (pt.precision + pt.recall);
      if (f1 > best.train_f1) {
        best.train_f1 = f1;
        best.sigmas = sigmas;
        best.threshold = pt.threshold;
      }
    }
  }
  best.test = match_detections(candidates(test, best.sigmas, best.threshold), truth_of(test), radius_px);
  return best;
}

}  // namespace marmo
