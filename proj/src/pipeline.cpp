#include "marmo/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "marmo/mapping.hpp"
#include "marmo/parallel.hpp"
#include "marmo/stitch.hpp"
#include "marmo/textio.hpp"

namespace marmo {

namespace fs = std::filesystem;

std::string ConfigIssue::message() const { return "key=" + key + " value=" + value + ": " + constraint; }

// --- config ---------------------------------------------------------------------

namespace {

struct KeyDef {
  const char* key;
  // Returns an empty string on success, otherwise the violated constraint.
  std::function<std::string(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <typename F>
std::string guarded(F&& f) {
  try {
    return f();
  } catch (const std::exception&) {
    return "not a number";
  }
}

KeyDef path_key(const char* key, fs::path PipelineConfig::*m) {
  return {key,
          [m](PipelineConfig& c, const std::string& v) {
            c.*m = v;
            return std::string();
          },
          [m](const PipelineConfig& c) { return (c.*m).string(); }};
}

KeyDef string_key(const char* key, std::string PipelineConfig::*m, std::vector<std::string> allowed = {}) {
  return {key,
          [m, allowed](PipelineConfig& c, const std::string& v) {
            if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
              std::string s = "must be one of";
              for (const auto& a : allowed) s += " " + a;
              return s;
            }
            if (v.empty()) return std::string("must not be empty");
            c.*m = v;
            return std::string();
          },
          [m](const PipelineConfig& c) { return c.*m; }};
}

KeyDef real_key(const char* key, double PipelineConfig::*m, double lo, double hi, bool lo_open, const char* range) {
  return {key,
          [=](PipelineConfig& c, const std::string& v) {
            return guarded([&] {
              const double d = parse_double(v);
              if (!(lo_open ? d > lo : d >= lo) || !(d <= hi)) return std::string("must be ") + range;
              c.*m = d;
              return std::string();
            });
          },
          [m](const PipelineConfig& c) { return format_double(c.*m); }};
}

KeyDef int_key(const char* key, int PipelineConfig::*m, int lo, const char* range) {
  return {key,
          [=](PipelineConfig& c, const std::string& v) {
            return guarded([&] {
              const long d = parse_int(v);
              if (d < lo || d > 1000000) return std::string("must be ") + range;
              c.*m = static_cast<int>(d);
              return std::string();
            });
          },
          [m](const PipelineConfig& c) { return std::to_string(c.*m); }};
}

constexpr double kInf = std::numeric_limits<double>::infinity();

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = [] {
    std::vector<KeyDef> d;
    d.push_back(path_key("tiles", &PipelineConfig::tiles));
    d.push_back(path_key("out", &PipelineConfig::out));
    d.push_back(path_key("atlas", &PipelineConfig::atlas));
    d.push_back(path_key("field", &PipelineConfig::field));
    d.push_back(string_key("brain_id", &PipelineConfig::brain_id));
    d.push_back(string_key("injection_id", &PipelineConfig::injection_id));
    d.push_back(int_key("threads", &PipelineConfig::threads, 1, ">= 1"));
    d.push_back(int_key("margin", &PipelineConfig::margin, 0, ">= 0"));
    d.push_back(real_key("flat_lower", &PipelineConfig::flat_lower, 0, kInf, false, ">= 0"));
    d.push_back(real_key("flat_upper", &PipelineConfig::flat_upper, 0, kInf, true, "> 0"));
    d.push_back(real_key("low_voxel_um", &PipelineConfig::low_voxel_um, 0, kInf, true, "> 0"));
    d.push_back(real_key("t_raw", &PipelineConfig::t_raw, 0, kInf, false, ">= 0"));
    d.push_back(real_key("sigma_um", &PipelineConfig::sigma_um, 0, kInf, true, "> 0"));
    d.push_back(real_key("t_high", &PipelineConfig::t_high, 0, 1, false, "in [0, 1]"));
    d.push_back(string_key("cell_backend", &PipelineConfig::cell_backend, {"hessian", "unet"}));
    d.push_back(path_key("cell_model", &PipelineConfig::cell_model));
    d.push_back({"hessian_sigmas",
                 [](PipelineConfig& c, const std::string& v) {
                   std::string s = v;
                   std::replace(s.begin(), s.end(), ',', ' ');
                   std::vector<double> sig;
                   const auto err = guarded([&] {
                     for (const auto& t : split_ws(s)) sig.push_back(parse_double(t));
                     return std::string();
                   });
                   if (!err.empty() || sig.empty() ||
                       std::any_of(sig.begin(), sig.end(), [](double x) { return !(x > 0); })) {
                     return std::string("must be a non-empty list of positive numbers");
                   }
                   c.hessian_sigmas = sig;
                   return std::string();
                 },
                 [](const PipelineConfig& c) {
                   std::string s;
                   for (double x : c.hessian_sigmas) s += (s.empty() ? "" : ",") + format_double(x);
                   return s;
                 }});
    d.push_back(real_key("hessian_threshold", &PipelineConfig::hessian_threshold, 0, kInf, false, ">= 0"));
    d.push_back(int_key("roi_pad_px", &PipelineConfig::roi_pad_px, 0, ">= 0"));
    d.push_back(string_key("tracer_backend", &PipelineConfig::tracer_backend, {"threshold", "unet"}));
    d.push_back(path_key("tracer_model", &PipelineConfig::tracer_model));
    d.push_back(real_key("t", &PipelineConfig::t, 0, kInf, true, "> 0"));
    d.push_back(real_key("hi", &PipelineConfig::hi, 0, kInf, true, "> 0"));
    d.push_back(real_key("lo", &PipelineConfig::lo, 0, kInf, true, "> 0"));
    d.push_back(int_key("close_radius", &PipelineConfig::close_radius, 1, ">= 1"));
    d.push_back(real_key("theta", &PipelineConfig::theta, 0, 1, true, "in (0, 1)"));
    d.push_back(string_key("source", &PipelineConfig::source, {"cells", "mask"}));
    d.push_back({"normalize",
                 [](PipelineConfig& c, const std::string& v) {
                   if (v == "0" || v == "false") c.normalize = false;
                   else if (v == "1" || v == "true") c.normalize = true;
                   else return std::string("must be 0 or 1");
                   return std::string();
                 },
                 [](const PipelineConfig& c) { return std::string(c.normalize ? "1" : "0"); }});
    return d;
  }();
  return defs;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& d : key_defs()) k.emplace_back(d.key);
    return k;
  }();
  return keys;
}

std::string suggest_key(const std::string& unknown) {
  std::string best;
  std::size_t best_d = std::max<std::size_t>(2, unknown.size() / 3) + 1;
  for (const auto& k : config_keys()) {
    const std::size_t d = edit_distance(unknown, k);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

std::vector<ConfigIssue> parse_config(std::string_view text, PipelineConfig& cfg) {
  std::vector<ConfigIssue> issues;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto s = trim(std::string_view(line).substr(0, line.find('#')));
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) {
      issues.push_back({"line " + std::to_string(lineno), std::string(s), "expected key=value"});
      continue;
    }
    const std::string key(trim(s.substr(0, eq))), value(trim(s.substr(eq + 1)));
    const auto& defs = key_defs();
    const auto it = std::find_if(defs.begin(), defs.end(), [&](const KeyDef& d) { return key == d.key; });
    if (it == defs.end()) {
      const auto sug = suggest_key(key);
      issues.push_back({key, value, sug.empty() ? "unknown key" : "unknown key (did you mean '" + sug + "'?)"});
      continue;
    }
    if (auto err = it->set(cfg, value); !err.empty()) issues.push_back({key, value, err});
  }
  return issues;
}

std::vector<ConfigIssue> check_config(const PipelineConfig& c) {
  std::vector<ConfigIssue> issues;
  auto with_ext = [](const fs::path& p, const char* ext) {
    fs::path q = p;
    q += ext;
    return q;
  };
  if (c.tiles.empty()) issues.push_back({"tiles", "", "is required"});
  else if (!fs::is_directory(c.tiles)) issues.push_back({"tiles", c.tiles.string(), "must be an existing directory"});
  if (c.out.empty()) issues.push_back({"out", "", "is required"});
  if (c.atlas.empty()) {
    issues.push_back({"atlas", "", "is required"});
  } else {
    const fs::path a = stack_prefix(c.atlas);
    for (const char* ext : {".hdr", ".raw", ".names"})
      if (!fs::exists(with_ext(a, ext)))
        issues.push_back({"atlas", c.atlas.string(), "missing file " + with_ext(a, ext).string()});
  }
  if (!c.field.empty()) {
    for (const char* comp : {"_dx.hdr", "_dy.hdr", "_dz.hdr"})
      if (!fs::exists(with_ext(c.field, comp)))
        issues.push_back({"field", c.field.string(), "missing file " + with_ext(c.field, comp).string()});
  }
  if (!(c.flat_lower < c.flat_upper)) {
    issues.push_back({"flat_lower", format_double(c.flat_lower),
                      "must be below flat_upper (flat_upper=" + format_double(c.flat_upper) + ")"});
  }
  if (!(c.lo < c.hi)) {
    issues.push_back({"hi", format_double(c.hi), "must exceed lo (lo=" + format_double(c.lo) + ")"});
  }
  auto check_model = [&](const char* key, const fs::path& model, const std::string& backend) {
    if (backend != "unet") return;
    if (model.empty()) {
      issues.push_back({key, "", "is required when the backend is unet"});
      return;
    }
    fs::path m = model;
    if (m.extension() == ".model" || m.extension() == ".bin") m.replace_extension();
    for (const char* ext : {".model", ".bin"})
      if (!fs::exists(with_ext(m, ext)))
        issues.push_back({key, model.string(), "missing file " + with_ext(m, ext).string()});
  };
  check_model("cell_model", c.cell_model, c.cell_backend);
  check_model("tracer_model", c.tracer_model, c.tracer_backend);
  return issues;
}

std::vector<ConfigIssue> validate_config(const fs::path& path, PipelineConfig* out) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  PipelineConfig cfg;
  auto issues = parse_config(ss.str(), cfg);
  // Relative paths are taken relative to the config file.
  const fs::path base = path.parent_path();
  for (fs::path* p : {&cfg.tiles, &cfg.out, &cfg.atlas, &cfg.field, &cfg.cell_model, &cfg.tracer_model})
    if (!p->empty() && p->is_relative()) *p = base / *p;
  const auto more = check_config(cfg);
  issues.insert(issues.end(), more.begin(), more.end());
  if (out) *out = cfg;
  return issues;
}

std::string format_config(const PipelineConfig& cfg) {
  std::string s;
  for (const auto& d : key_defs()) s += std::string(d.key) + "=" + d.get(cfg) + "\n";
  return s;
}

// --- building blocks ---------------------------------------------------------------

std::map<Channel, SectionTiles> read_tile_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InvalidArgument("tile directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::map<Channel, SectionTiles> out;
  for (const auto& f : files) {
    Tile2D t = read_tile(f);
    out[t.channel][t.world_offset_um[2]].push_back(std::move(t));
  }
  if (out.empty()) throw InvalidArgument("no tiles found in " + dir.string());
  for (auto& [ch, secs] : out)
    for (auto& [z, tiles] : secs)
      std::stable_sort(tiles.begin(), tiles.end(), [](const Tile2D& a, const Tile2D& b) { return a.index < b.index; });
  return out;
}

ShadingField estimate_channel_shading(const SectionTiles& tiles, double lower, double upper, int threads) {
  std::vector<const Tile2D*> all;
  for (const auto& [z, ts] : tiles)
    for (const auto& t : ts) all.push_back(&t);
  if (all.empty()) throw InvalidArgument("estimate_channel_shading: no tiles");
  const std::size_t parts = std::min<std::size_t>(all.size(), static_cast<std::size_t>(std::max(threads, 1)));
  std::vector<ShadingAccumulator> acc(parts, ShadingAccumulator(lower, upper));
  parallel_for(parts, threads, [&](std::size_t p) {
    for (std::size_t i = p; i < all.size(); i += parts) acc[p].add(*all[i]);
  });
  for (std::size_t p = 1; p < parts; ++p) acc[0].merge(acc[p]);
  return acc[0].finish();
}

Stack3D stitch_sections(const SectionTiles& tiles, const ShadingField* field, int margin, int threads,
                        std::vector<std::string>* layout_lines) {
  if (tiles.empty()) throw InvalidArgument("stitch_sections: no sections");
  std::vector<const std::vector<Tile2D>*> secs;
  std::vector<double> zs;
  for (const auto& [z, ts] : tiles) {
    secs.push_back(&ts);
    zs.push_back(z);
  }
  std::vector<Section> sections(secs.size());
  std::vector<std::vector<std::string>> lines(secs.size());
  parallel_for(secs.size(), threads, [&](std::size_t k) {
    std::vector<Tile2D> corrected;
    corrected.reserve(secs[k]->size());
    for (const auto& t : *secs[k]) corrected.push_back(field ? correct_tile(t, *field) : t);
    const auto layout = plan_layout(corrected);
    const auto slice = assemble_slice(corrected, layout, margin);
    sections[k] = {slice.image, zs[k]};
    for (std::size_t i = 0; i < corrected.size(); ++i) {
      lines[k].push_back("z_um=" + format_double(zs[k]) + " tile=" + std::to_string(corrected[i].index) +
                         " offset=" + std::to_string(layout.offsets[i][0]) + " " +
                         std::to_string(layout.offsets[i][1]));
    }
    for (const auto& w : layout.warnings) lines[k].push_back("z_um=" + format_double(zs[k]) + " warning=" + w);
  });
  if (layout_lines)
    for (auto& l : lines) layout_lines->insert(layout_lines->end(), l.begin(), l.end());
  const auto& first = secs[0]->front();
  return assemble_stack(std::move(sections), first.pixel_pitch_um, first.channel);
}

LocateResult locate_injection(const Stack3D& cb, const CellDetectionParams& p, int threads, const Stack3D* low_in) {
  if (p.backend != "hessian" && p.backend != "unet") throw InvalidArgument("unknown cell backend '" + p.backend + "'");
  if (p.backend == "unet" && !p.model) throw InvalidArgument("unet cell backend needs a model");
  LocateResult r;
  const Stack3D low = low_in ? *low_in : downsample_stack(cb, {p.low_voxel_um, p.low_voxel_um, cb.voxel_um[2]});
  if (low.nz() != cb.nz()) throw InvalidArgument("locate_injection: low and high stacks differ in section count");
  r.injection = rough_localize(low, p.t_raw, p.sigma_um);
  if (r.injection.empty) return r;
  const Roi roi = roi_from_mask(r.injection.mask, {cb.nx(), cb.ny()}, cb.voxel_um[0], low.voxel_um[0], p.roi_pad_px);
  Stack3D saliency(cb.dims, cb.voxel_um, Channel::None, 0.0);
  const int nz = roi.z_max - roi.z_min + 1;
  parallel_for(static_cast<std::size_t>(std::max(nz, 0)), threads, [&](std::size_t k) {
    const int z = roi.z_min + static_cast<int>(k);
    const Image slice = cb.slice(z);
    if (p.backend == "hessian") {
      saliency.set_slice(z, hessian_cell_filter(slice, p.hessian_sigmas));
    } else {
      const Image ch[] = {slice};
      saliency.set_slice(z, sliding_window_predict(*p.model, ch, 1));
    }
  });
  r.cells = detect_cells(saliency, p.threshold, &roi);
  return r;
}

TracerStacks segment_tracer(const Stack3D& cr, const Stack3D& cg, const ThresholdParams& p, const NetworkParams* model,
                            double theta, int threads) {
  if (!cr.same_grid(cg)) throw InvalidArgument("segment_tracer: C_R and C_G stacks differ in extent");
  TracerStacks out{Stack3D(cr.dims, cr.voxel_um, Channel::None, 0.0), Stack3D(cr.dims, cr.voxel_um, Channel::None, 0.0)};
  parallel_for(static_cast<std::size_t>(cr.nz()), threads, [&](std::size_t k) {
    const int z = static_cast<int>(k);
    const Image r = cr.slice(z), g = cg.slice(z);
    TracerLabel lab;
    if (model) {
      const Image ch[] = {r, g};
      lab = compose_label(sliding_window_predict(*model, ch, 1), background_subtract(g, r, p.t), theta);
    } else {
      lab = threshold_pipeline(g, r, p);
    }
    Image m(lab.mask.width, lab.mask.height);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = lab.mask.data[i];
    out.mask.set_slice(z, m);
    out.signal.set_slice(z, lab.signal);
  });
  return out;
}

void write_points_um(const std::vector<std::array<double, 3>>& pts, const std::vector<double>& scores,
                     const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    out << format_double(pts[i][0]) << ' ' << format_double(pts[i][1]) << ' ' << format_double(pts[i][2]) << ' '
        << format_double(i < scores.size() ? scores[i] : 0.0) << '\n';
  }
}

std::vector<std::array<double, 3>> read_points_um(const fs::path& path, std::vector<double>* scores) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::array<double, 3>> pts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = split_ws(line);
    if (t.empty() || t[0][0] == '#') continue;
    if (t.size() != 4) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 4 values");
    pts.push_back({parse_double(t[0]), parse_double(t[1]), parse_double(t[2])});
    if (scores) scores->push_back(parse_double(t[3]));
  }
  return pts;
}

// --- run -----------------------------------------------------------------------

bool RunReport::ok() const {
  return std::none_of(stages.begin(), stages.end(), [](const StageReport& s) { return s.status == "fail"; });
}

std::string RunReport::format() const {
  std::ostringstream out;
  for (const auto& s : stages) {
    out << "stage=" << s.name << " status=" << s.status << " seconds=" << std::fixed << std::setprecision(3)
        << s.seconds;
    out.unsetf(std::ios::fixed);
    if (!s.key.empty()) out << " key=" << s.key;
    for (const auto& [k, v] : s.info) out << ' ' << k << '=' << v;
    if (!s.error.empty()) out << " error=\"" << s.error << '"';
    out << '\n';
  }
  return out.str();
}

namespace {

std::uint64_t file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::uint64_t h = fnv1a("");
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = static_cast<std::size_t>(in.gcount());
    if (n == 0) break;
    h = fnv1a(std::string_view(buf.data(), n), h);
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

fs::path suffixed(const fs::path& p, const char* ext) {
  fs::path q = p;
  q += ext;
  return q;
}

std::vector<fs::path> stack_files(const fs::path& prefix) { return {suffixed(prefix, ".hdr"), suffixed(prefix, ".raw")}; }

std::vector<fs::path> model_files(const fs::path& model) {
  fs::path m = model;
  if (m.extension() == ".model" || m.extension() == ".bin") m.replace_extension();
  return {suffixed(m, ".model"), suffixed(m, ".bin")};
}

struct Stage {
  std::string name;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  std::string params;
  std::function<void(StageReport&)> run;
};

std::string stage_key(const Stage& s) {
  std::uint64_t h = fnv1a(s.name);
  h = fnv1a(s.params, h);
  for (const auto& in : s.inputs) {
    h = fnv1a(in.filename().string(), h);
    const std::uint64_t c = file_hash(in);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(&c), sizeof c), h);
  }
  return hex(h);
}

bool up_to_date(const Stage& s, const std::string& key, const fs::path& stamp) {
  for (const auto& o : s.outputs)
    if (!fs::exists(o)) return false;
  std::ifstream in(stamp);
  std::string recorded;
  if (!(in >> recorded) || recorded != key) return false;
  fs::file_time_type newest_in = fs::file_time_type::min(), oldest_out = fs::file_time_type::max();
  for (const auto& i : s.inputs) newest_in = std::max(newest_in, fs::last_write_time(i));
  for (const auto& o : s.outputs) oldest_out = std::min(oldest_out, fs::last_write_time(o));
  return oldest_out >= newest_in;
}

}  // namespace

RunReport run_pipeline(const PipelineConfig& cfg, std::ostream* progress) {
  if (const auto issues = check_config(cfg); !issues.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& i : issues) msg += "\n  " + i.message();
    throw InvalidArgument(msg);
  }
  const fs::path out = cfg.out;
  fs::create_directories(out / ".stamps");
  const int th = cfg.threads;

  std::optional<NetworkParams> cell_model, tracer_model;
  if (cfg.cell_backend == "unet") cell_model = load_model(cfg.cell_model);
  if (cfg.tracer_backend == "unet") tracer_model = load_model(cfg.tracer_model);

  std::vector<Stage> stages;

  // (a) flat-field correction and stitching
  {
    Stage s;
    s.name = "stitch";
    std::vector<fs::path> tiles;
    for (const auto& e : fs::directory_iterator(cfg.tiles))
      if (e.is_regular_file()) tiles.push_back(e.path());
    std::sort(tiles.begin(), tiles.end());
    s.inputs = tiles;
    for (const char* p : {outputs::stitched_cr, outputs::stitched_cg, outputs::stitched_cb})
      for (const auto& f : stack_files(out / p)) s.outputs.push_back(f);
    s.outputs.push_back(out / "layout.txt");
    s.params = "margin=" + std::to_string(cfg.margin) + " lower=" + format_double(cfg.flat_lower) +
               " upper=" + format_double(cfg.flat_upper);
    s.run = [&, out](StageReport& r) {
      const auto tiles_by_channel = read_tile_dir(cfg.tiles);
      std::vector<std::string> layout;
      std::size_t n_tiles = 0;
      for (Channel ch : {Channel::CR, Channel::CG, Channel::CB}) {
        const auto it = tiles_by_channel.find(ch);
        if (it == tiles_by_channel.end()) {
          throw InvalidArgument("no " + std::string(channel_name(ch)) + " tiles in " + cfg.tiles.string());
        }
        for (const auto& [z, ts] : it->second) n_tiles += ts.size();
        const std::string name(channel_name(ch));
        std::optional<ShadingField> field;
        if (ch != Channel::CB) {
          field = estimate_channel_shading(it->second, cfg.flat_lower, cfg.flat_upper, th);
          write_shading(*field, out / ("field_" + name));
          r.info.emplace_back("unfilled_" + name, std::to_string(field->unfilled_pixels));
        }
        const Stack3D st =
            stitch_sections(it->second, field ? &*field : nullptr, cfg.margin, th, ch == Channel::CR ? &layout : nullptr);
        write_stack(st, out / ("stitched_" + name), StorageType::F64);
        if (ch == Channel::CR) r.info.emplace_back("sections", std::to_string(st.nz()));
      }
      std::ofstream lf(out / "layout.txt");
      for (const auto& l : layout) lf << l << '\n';
      r.info.emplace_back("tiles", std::to_string(n_tiles));
    };
    stages.push_back(std::move(s));
  }

  // (b) injection site and cell bodies
  {
    Stage s;
    s.name = "locate";
    s.inputs = stack_files(out / outputs::stitched_cb);
    if (cell_model)
      for (const auto& f : model_files(cfg.cell_model)) s.inputs.push_back(f);
    s.outputs = stack_files(out / outputs::injection_mask);
    s.outputs.push_back(out / outputs::cells);
    std::string sig;
    for (double v : cfg.hessian_sigmas) sig += format_double(v) + ",";
    s.params = "backend=" + cfg.cell_backend + " t_raw=" + format_double(cfg.t_raw) + " sigma_um=" +
               format_double(cfg.sigma_um) + " low=" + format_double(cfg.low_voxel_um) + " t_high=" +
               format_double(cfg.t_high) + " hs=" + sig + " ht=" + format_double(cfg.hessian_threshold) +
               " pad=" + std::to_string(cfg.roi_pad_px);
    s.run = [&, out](StageReport& r) {
      const Stack3D cb = read_stack(out / outputs::stitched_cb);
      CellDetectionParams p;
      p.t_raw = cfg.t_raw;
      p.sigma_um = cfg.sigma_um;
      p.low_voxel_um = cfg.low_voxel_um;
      p.backend = cfg.cell_backend;
      p.model = cell_model ? &*cell_model : nullptr;
      p.hessian_sigmas = cfg.hessian_sigmas;
      p.threshold = cfg.cell_backend == "unet" ? cfg.t_high : cfg.hessian_threshold;
      p.roi_pad_px = cfg.roi_pad_px;
      const auto res = locate_injection(cb, p, th);
      write_stack(res.injection.mask, out / outputs::injection_mask, StorageType::U16);
      write_cells(res.cells, out / outputs::cells);
      std::size_t voxels = 0;
      for (double v : res.injection.mask.data) voxels += v != 0.0;
      r.info.emplace_back("mask_voxels", std::to_string(voxels));
      r.info.emplace_back("cells", std::to_string(res.cells.size()));
      if (res.injection.empty) r.info.emplace_back("warning", "no_injection_site");
    };
    stages.push_back(std::move(s));
  }

  // (c) tracer segmentation
  {
    Stage s;
    s.name = "tracer";
    s.inputs = stack_files(out / outputs::stitched_cr);
    for (const auto& f : stack_files(out / outputs::stitched_cg)) s.inputs.push_back(f);
    if (tracer_model)
      for (const auto& f : model_files(cfg.tracer_model)) s.inputs.push_back(f);
    s.outputs = stack_files(out / outputs::tracer_mask);
    for (const auto& f : stack_files(out / outputs::tracer_signal)) s.outputs.push_back(f);
    s.params = "backend=" + cfg.tracer_backend + " t=" + format_double(cfg.t) + " hi=" + format_double(cfg.hi) +
               " lo=" + format_double(cfg.lo) + " close=" + std::to_string(cfg.close_radius) +
               " theta=" + format_double(cfg.theta);
    s.run = [&, out](StageReport& r) {
      const Stack3D cr = read_stack(out / outputs::stitched_cr);
      const Stack3D cg = read_stack(out / outputs::stitched_cg);
      const ThresholdParams tp{cfg.t, cfg.hi, cfg.lo, cfg.close_radius};
      const auto res = segment_tracer(cr, cg, tp, tracer_model ? &*tracer_model : nullptr, cfg.theta, th);
      write_stack(res.mask, out / outputs::tracer_mask, StorageType::U16);
      write_stack(res.signal, out / outputs::tracer_signal, StorageType::F64);
      std::size_t px = 0;
      for (double v : res.mask.data) px += v != 0.0;
      r.info.emplace_back("tracer_pixels", std::to_string(px));
    };
    stages.push_back(std::move(s));
  }

  // (d) mapping into the atlas space
  const fs::path atlas_prefix = stack_prefix(cfg.atlas);
  std::vector<fs::path> atlas_files = stack_files(atlas_prefix);
  atlas_files.push_back(suffixed(atlas_prefix, ".names"));
  {
    Stage s;
    s.name = "map";
    s.inputs = stack_files(out / outputs::tracer_signal);
    for (const auto& f : stack_files(out / outputs::injection_mask)) s.inputs.push_back(f);
    s.inputs.push_back(out / outputs::cells);
    for (const auto& f : atlas_files) s.inputs.push_back(f);
    if (!cfg.field.empty())
      for (const char* c : {"_dx", "_dy", "_dz"})
        for (const auto& f : stack_files(suffixed(cfg.field, c))) s.inputs.push_back(f);
    s.outputs = stack_files(out / outputs::mapped_signal);
    for (const auto& f : stack_files(out / outputs::mapped_mask)) s.outputs.push_back(f);
    s.outputs.push_back(out / outputs::mapped_cells);
    s.params = "field=" + std::string(cfg.field.empty() ? "identity" : "file");
    s.run = [&, out, atlas_prefix](StageReport& r) {
      const RegionAtlas atlas = load_atlas(atlas_prefix);
      const DisplacementField field = cfg.field.empty()
                                          ? DisplacementField::identity(atlas.labels.dims, atlas.labels.voxel_um)
                                          : read_field(cfg.field);
      const Stack3D L = read_stack(out / outputs::tracer_signal);
      const Stack3D low = downsample_stack(L, atlas.labels.voxel_um);
      std::vector<std::string> warnings;
      const Stack3D L_ref = apply_field(low, field, Interpolation::Linear, &warnings, th);
      const Stack3D mask = read_stack(out / outputs::injection_mask);
      const Stack3D mask_ref = apply_field(mask, field, Interpolation::Nearest, nullptr, th);
      const CellPointCloud cells = read_cells(out / outputs::cells);
      std::vector<std::array<double, 3>> pts;
      std::vector<double> scores;
      for (const auto& c : cells) {
        pts.push_back({(c.x + 0.5) * L.voxel_um[0], (c.y + 0.5) * L.voxel_um[1], (c.z + 0.5) * L.voxel_um[2]});
        scores.push_back(c.score);
      }
      const auto mapped = map_points(pts, field);
      write_stack(L_ref, out / outputs::mapped_signal, StorageType::F64);
      write_stack(mask_ref, out / outputs::mapped_mask, StorageType::U16);
      write_points_um(mapped, scores, out / outputs::mapped_cells);
      r.info.emplace_back("resolution_um", format_double(atlas.labels.voxel_um[0]));
      for (const auto& w : warnings) r.info.emplace_back("warning", "\"" + w + "\"");
    };
    stages.push_back(std::move(s));
  }

  // (e) connectivity
  {
    Stage s;
    s.name = "connectivity";
    s.inputs = stack_files(out / outputs::mapped_signal);
    for (const auto& f : stack_files(out / outputs::mapped_mask)) s.inputs.push_back(f);
    s.inputs.push_back(out / outputs::mapped_cells);
    for (const auto& f : atlas_files) s.inputs.push_back(f);
    s.outputs = {out / outputs::connectivity};
    s.params = "source=" + cfg.source + " normalize=" + std::to_string(cfg.normalize) + " brain=" + cfg.brain_id +
               " injection=" + cfg.injection_id;
    s.run = [&, out, atlas_prefix](StageReport& r) {
      const RegionAtlas atlas = load_atlas(atlas_prefix);
      const Stack3D L = read_stack(out / outputs::mapped_signal);
      RegionCounts src;
      if (cfg.source == "cells") src = injection_regions(read_points_um(out / outputs::mapped_cells), atlas);
      else src = injection_regions(read_stack(out / outputs::mapped_mask), atlas);
      const RegionSums tgt = projection_strengths(L, atlas, cfg.normalize);
      if (!cfg.normalize) {
        double total = 0.0;
        for (double v : L.data) total += v;
        const double diff = std::abs(tgt.total() - total);
        if (diff > 1e-6 * std::max(std::abs(total), 1.0)) {
          throw Error("signal not conserved across regions (" + format_double(tgt.total()) + " vs " +
                      format_double(total) + ")");
        }
        r.info.emplace_back("signal_total", format_double(total));
      }
      const auto table = connectivity_table(src, tgt, atlas, cfg.brain_id, cfg.injection_id, cfg.normalize);
      write_connectivity(table, out / outputs::connectivity);
      r.info.emplace_back("src_regions", std::to_string(table.src.size()));
      r.info.emplace_back("outside_points", std::to_string(src.outside));
    };
    stages.push_back(std::move(s));
  }

  RunReport report;
  for (const auto& s : stages) {
    StageReport r;
    r.name = s.name;
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path stamp = out / ".stamps" / (s.name + ".key");
    try {
      r.key = stage_key(s);
      if (up_to_date(s, r.key, stamp)) {
        r.status = "skip";
      } else {
        fs::remove(stamp);
        s.run(r);
        std::ofstream(stamp) << r.key << '\n';
        r.status = "ok";
      }
    } catch (const std::exception& e) {
      r.status = "fail";
      r.error = e.what();
      std::string partial;
      for (const auto& o : s.outputs)
        if (fs::exists(o)) partial += (partial.empty() ? "" : ",") + o.filename().string();
      if (!partial.empty()) r.info.emplace_back("partial", partial);
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.stages.push_back(r);
    if (progress) *progress << RunReport{{r}}.format() << std::flush;
    if (r.status == "fail") break;
  }
  std::ofstream(out / outputs::report) << report.format();
  return report;
}

}  // namespace marmo
