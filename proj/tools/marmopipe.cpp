// marmopipe: command-line front end. Exit codes: 0 ok, 1 validation, 2 runtime.
#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "marmo/evalsynth.hpp"
#include "marmo/flatfield.hpp"
#include "marmo/injsite.hpp"
#include "marmo/mapping.hpp"
#include "marmo/nnseg.hpp"
#include "marmo/pipeline.hpp"
#include "marmo/stitch.hpp"
#include "marmo/textio.hpp"
#include "marmo/tracerseg.hpp"

namespace fs = std::filesystem;
using namespace marmo;

namespace {

StorageType parse_dtype(const std::string& s) {
  if (s == "u16") return StorageType::U16;
  if (s == "f32") return StorageType::F32;
  if (s == "f64") return StorageType::F64;
  throw InvalidArgument("unknown dtype '" + s + "' (u16, f32, f64)");
}

fs::path sibling(const fs::path& prefix, const std::string& suffix) {
  fs::path p = prefix;
  p += suffix;
  return p;
}

Mask slice_mask(const Stack3D& st, int z) {
  Mask m(st.nx(), st.ny(), 0);
  for (int y = 0; y < st.ny(); ++y)
    for (int x = 0; x < st.nx(); ++x) m(x, y) = st(x, y, z) != 0.0;
  return m;
}

Image scaled(Image img, double s) {
  for (double& v : img.data) v *= s;
  return img;
}

struct NetFlags {
  int depth = 2;
  int features = 8;
  int input = 108;
  bool batch_norm = false;
  double dropout = 0.0;
  double input_scale = 1.0;
  int steps = 2000;
  double lr = 0.01;
  std::uint64_t seed = 1;
  int dense = 10;
  int sparse = 10;
  double density_sigma = 20.0;
  int augment = 0;

  void add(CLI::App* c) {
    c->add_option("--depth", depth, "U-Net levels")->capture_default_str();
    c->add_option("--features", features, "base feature count")->capture_default_str();
    c->add_option("--input", input, "network input extent")->capture_default_str();
    c->add_flag("--batch-norm", batch_norm);
    c->add_option("--dropout", dropout)->capture_default_str();
    c->add_option("--input-scale", input_scale, "multiplies raw intensities")->capture_default_str();
    c->add_option("--steps", steps)->capture_default_str();
    c->add_option("--lr", lr)->capture_default_str();
    c->add_option("--seed", seed)->capture_default_str();
    c->add_option("--dense", dense, "tiles per slice from label-dense regions")->capture_default_str();
    c->add_option("--sparse", sparse, "tiles per slice from label-sparse regions")->capture_default_str();
    c->add_option("--density-sigma", density_sigma)->capture_default_str();
    c->add_option("--augment", augment, "augmented copies per tile")->capture_default_str();
  }

  [[nodiscard]] UNetConfig config(int in_channels) const {
    UNetConfig c;
    c.in_channels = in_channels;
    c.depth = depth;
    c.base_features = features;
    c.batch_norm = batch_norm;
    c.dropout = dropout;
    c.input_extent = input;
    c.input_scale = input_scale;
    if (!unet_output_extent(c, input)) throw InvalidArgument("--input " + std::to_string(input) + " does not fit depth " + std::to_string(depth));
    return c;
  }

  // Tiles are cut larger than the network input when augmenting, so the
  // rotated and scaled crop stays inside.
  [[nodiscard]] int tile_extent() const {
    return augment > 0 ? static_cast<int>(std::ceil(input * 1.6)) + 8 : input;
  }
};

std::vector<TrainingSample> expand(std::vector<TrainingSample> base, const NetFlags& f) {
  if (f.augment <= 0) return base;
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < base.size(); ++i) {
    out.push_back(apply_augment(base[i], neutral_augment(), f.input));
    for (int k = 0; k < f.augment; ++k) {
      const std::uint64_t s = derive_seed(f.seed, 7919 * i + k);
      try {
        out.push_back(augment(base[i], f.input, s));
      } catch (const InvalidArgument&) {
        // warp left the tile; drop this copy
      }
    }
  }
  return out;
}

TrainResult run_training(const UNetConfig& cfg, const std::vector<TrainingSample>& samples, const NetFlags& f) {
  if (samples.empty()) throw InvalidArgument("no training samples (check labels and slice extents)");
  TrainOptions opt;
  opt.steps = f.steps;
  opt.learning_rate = f.lr;
  opt.seed = f.seed;
  const int every = std::max(1, f.steps / 20);
  opt.progress = [every](int step, double loss) {
    if (step % every == 0) std::cerr << "step=" << step << " loss=" << format_double(loss) << '\n';
  };
  return train(make_unet(cfg, f.seed), samples, opt);
}

void print_loss(const TrainResult& r) {
  if (r.loss_history.empty()) return;
  std::cout << "steps=" << r.loss_history.size() << " loss_first=" << format_double(r.loss_history.front())
            << " loss_last=" << format_double(r.loss_history.back()) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tracer-image processing pipeline"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);

  // phantom
  auto* ph = app.add_subcommand("phantom", "render a synthetic phantom with ground truth");
  std::string ph_spec, ph_out;
  std::optional<std::uint64_t> ph_seed;
  ph->add_option("--spec", ph_spec, "key=value spec file (defaults when omitted)");
  ph->add_option("--out", ph_out)->required();
  ph->add_option("--seed", ph_seed, "overrides the spec seed");

  // flatfield-estimate
  auto* ff = app.add_subcommand("flatfield-estimate", "estimate the shading field of one channel");
  std::string ff_in, ff_out, ff_channel = "CG";
  double ff_lower = 2.0, ff_upper = 2500.0;
  ff->add_option("--in", ff_in, "tile directory")->required();
  ff->add_option("--channel", ff_channel)->capture_default_str();
  ff->add_option("--lower", ff_lower)->capture_default_str();
  ff->add_option("--upper", ff_upper)->capture_default_str();
  ff->add_option("--out", ff_out, "stack prefix")->required();

  // stitch
  auto* st = app.add_subcommand("stitch", "reconstruct sections and stack them");
  std::string st_tiles, st_out, st_channel, st_field, st_layout, st_dtype = "f32";
  int st_margin = 50;
  st->add_option("--tiles", st_tiles)->required();
  st->add_option("--margin", st_margin)->capture_default_str();
  st->add_option("--channel", st_channel, "required when the directory holds several channels");
  st->add_option("--field", st_field, "shading field prefix (flat-field correction)");
  st->add_option("--layout", st_layout, "layout report (default <out>_layout.txt)");
  st->add_option("--dtype", st_dtype)->capture_default_str();
  st->add_option("--out", st_out, "stack prefix")->required();

  // inject-locate
  auto* il = app.add_subcommand("inject-locate", "injection mask and cell bodies from C_B");
  std::string il_low, il_high, il_backend = "hessian", il_model, il_mask = "injection_mask", il_cells = "cells.txt";
  CellDetectionParams il_p;
  double il_thigh = 0.5;
  il->add_option("--cb-low", il_low, "low-resolution C_B (box-averaged from --cb-high when omitted)");
  il->add_option("--cb-high", il_high)->required();
  il->add_option("--backend", il_backend)->check(CLI::IsMember({"hessian", "unet"}))->capture_default_str();
  il->add_option("--model", il_model);
  il->add_option("--traw", il_p.t_raw)->capture_default_str();
  il->add_option("--sigma-um", il_p.sigma_um)->capture_default_str();
  il->add_option("--low-voxel-um", il_p.low_voxel_um)->capture_default_str();
  il->add_option("--thigh", il_thigh, "saliency cutoff for the unet backend")->capture_default_str();
  il->add_option("--hessian-sigmas", il_p.hessian_sigmas)->delimiter(',')->capture_default_str();
  il->add_option("--hessian-threshold", il_p.threshold)->capture_default_str();
  il->add_option("--pad", il_p.roi_pad_px)->capture_default_str();
  il->add_option("--out-mask", il_mask)->capture_default_str();
  il->add_option("--out-cells", il_cells)->capture_default_str();

  // tracer-seg
  auto* ts = app.add_subcommand("tracer-seg", "segment the anterograde tracer");
  std::string ts_cg, ts_cr, ts_backend = "threshold", ts_model, ts_out, ts_dtype = "f32";
  ThresholdParams ts_p;
  double ts_theta = 0.5;
  ts->add_option("--cg", ts_cg)->required();
  ts->add_option("--cr", ts_cr)->required();
  ts->add_option("--backend", ts_backend)->check(CLI::IsMember({"threshold", "unet"}))->capture_default_str();
  ts->add_option("--model", ts_model);
  ts->add_option("--t", ts_p.t)->capture_default_str();
  ts->add_option("--hi", ts_p.hi)->capture_default_str();
  ts->add_option("--lo", ts_p.lo)->capture_default_str();
  ts->add_option("--close", ts_p.close_radius)->capture_default_str();
  ts->add_option("--theta", ts_theta)->capture_default_str();
  ts->add_option("--dtype", ts_dtype, "storage of L")->capture_default_str();
  ts->add_option("--out", ts_out, "L stack prefix; the mask goes to <out>_mask")->required();

  // train-cells
  auto* tc = app.add_subcommand("train-cells", "train the cell-saliency network on C_B");
  std::string tc_image, tc_cells, tc_out;
  NetFlags tc_f;
  tc_f.input_scale = 1e-3;
  CellWeightParams tc_w;
  tc->add_option("--image", tc_image, "C_B stack")->required();
  tc->add_option("--cells", tc_cells, "annotated centers (x y z score)")->required();
  tc->add_option("--out", tc_out, "model prefix")->required();
  tc->add_option("--radius-zero", tc_w.radius_zero)->capture_default_str();
  tc->add_option("--log-sigma", tc_w.log_sigma)->capture_default_str();
  tc->add_option("--log-threshold", tc_w.log_threshold)->capture_default_str();
  tc_f.add(tc);

  // train-tracer
  auto* tt = app.add_subcommand("train-tracer", "train the tracer-saliency network on (C_R, C_G)");
  std::string tt_cr, tt_cg, tt_label, tt_neg, tt_out;
  double tt_tracer_w = 8.0, tt_neg_w = 100.0;
  NetFlags tt_f;
  tt_f.input_scale = 1e-3;
  tt->add_option("--cr", tt_cr)->required();
  tt->add_option("--cg", tt_cg)->required();
  tt->add_option("--label", tt_label, "binary tracer stack")->required();
  tt->add_option("--negatives", tt_neg, "binary stack of annotated negatives");
  tt->add_option("--tracer-weight", tt_tracer_w)->capture_default_str();
  tt->add_option("--negative-weight", tt_neg_w)->capture_default_str();
  tt->add_option("--out", tt_out, "model prefix")->required();
  tt_f.add(tt);

  // predict
  auto* pr = app.add_subcommand("predict", "sliding-window saliency for every slice");
  std::string pr_model, pr_out;
  std::vector<std::string> pr_in;
  pr->add_option("--model", pr_model)->required();
  pr->add_option("--in", pr_in, "input stack(s), one per network channel")->required();
  pr->add_option("--out", pr_out)->required();

  // map
  auto* mp = app.add_subcommand("map", "resample into the reference space");
  std::string mp_in, mp_out, mp_field, mp_atlas, mp_interp = "linear", mp_cells, mp_cells_out;
  bool mp_down = false;
  mp->add_option("--in", mp_in, "stack to warp");
  mp->add_option("--out", mp_out, "warped stack prefix");
  mp->add_option("--field", mp_field, "displacement field prefix");
  mp->add_option("--atlas", mp_atlas, "reference grid for the identity field when --field is omitted");
  mp->add_option("--interp", mp_interp)->check(CLI::IsMember({"linear", "nearest"}))->capture_default_str();
  mp->add_flag("--downsample", mp_down, "box-average onto the field voxel size first");
  mp->add_option("--cells", mp_cells, "cell cloud in voxel coordinates of --in");
  mp->add_option("--cells-out", mp_cells_out, "mapped cell positions (µm)");

  // connectivity
  auto* cn = app.add_subcommand("connectivity", "region-wise source/target table");
  std::string cn_atlas, cn_signal, cn_cells, cn_mask, cn_out, cn_brain = "brain", cn_inj = "injection";
  bool cn_norm = false;
  cn->add_option("--atlas", cn_atlas)->required();
  cn->add_option("--signal", cn_signal, "mapped tracer signal")->required();
  cn->add_option("--cells", cn_cells, "mapped cell positions (µm)");
  cn->add_option("--mask", cn_mask, "mapped injection mask");
  cn->add_option("--brain", cn_brain)->capture_default_str();
  cn->add_option("--injection", cn_inj)->capture_default_str();
  cn->add_flag("--normalize", cn_norm, "mean instead of sum per region");
  cn->add_option("--out", cn_out)->required();

  // eval
  auto* ev = app.add_subcommand("eval", "score results against ground truth");
  std::string ev_pc, ev_tc, ev_pm, ev_tm, ev_tab, ev_ttab;
  double ev_radius = 4.0;
  std::vector<double> ev_thr;
  ev->add_option("--pred-cells", ev_pc);
  ev->add_option("--truth-cells", ev_tc);
  ev->add_option("--radius", ev_radius)->capture_default_str();
  ev->add_option("--thresholds", ev_thr, "precision-recall thresholds")->delimiter(',');
  ev->add_option("--pred-mask", ev_pm);
  ev->add_option("--truth-mask", ev_tm);
  ev->add_option("--table", ev_tab);
  ev->add_option("--truth-table", ev_ttab);

  // run
  auto* rn = app.add_subcommand("run", "run the whole pipeline from a config file");
  std::string rn_config;
  bool rn_check = false;
  rn->add_option("--config", rn_config)->required();
  rn->add_flag("--check", rn_check, "validate the config and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (ph->parsed()) {
      PhantomSpec spec = ph_spec.empty() ? PhantomSpec{} : read_phantom_spec(ph_spec);
      if (ph_seed) spec.seed = *ph_seed;
      const Phantom p = generate_phantom(spec);
      write_phantom(p, ph_out);
      std::cout << "tiles=" << p.tiles.size() << " cells=" << p.truth.cells.size() << " out=" << ph_out << '\n';
    } else if (ff->parsed()) {
      const auto all = read_tile_dir(ff_in);
      const auto it = all.find(parse_channel(ff_channel));
      if (it == all.end()) throw InvalidArgument("no " + ff_channel + " tiles in " + ff_in);
      const auto field = estimate_channel_shading(it->second, ff_lower, ff_upper, threads);
      write_shading(field, ff_out);
      std::cout << "tiles=" << field.sample_count << " unfilled=" << field.unfilled_pixels << '\n';
    } else if (st->parsed()) {
      const auto all = read_tile_dir(st_tiles);
      const SectionTiles* tiles = nullptr;
      if (!st_channel.empty()) {
        const auto it = all.find(parse_channel(st_channel));
        if (it == all.end()) throw InvalidArgument("no " + st_channel + " tiles in " + st_tiles);
        tiles = &it->second;
      } else if (all.size() == 1) {
        tiles = &all.begin()->second;
      } else {
        throw InvalidArgument("tile directory holds several channels; pass --channel");
      }
      std::optional<ShadingField> field;
      if (!st_field.empty()) field = read_shading(st_field);
      std::vector<std::string> layout;
      const Stack3D stack = stitch_sections(*tiles, field ? &*field : nullptr, st_margin, threads, &layout);
      write_stack(stack, st_out, parse_dtype(st_dtype));
      std::ofstream lf(st_layout.empty() ? sibling(st_out, "_layout.txt") : fs::path(st_layout));
      for (const auto& l : layout) lf << l << '\n';
      std::cout << "sections=" << stack.nz() << " extent=" << stack.nx() << "x" << stack.ny() << '\n';
    } else if (il->parsed()) {
      const Stack3D high = read_stack(il_high);
      std::optional<Stack3D> low;
      if (!il_low.empty()) low = read_stack(il_low);
      std::optional<NetworkParams> model;
      il_p.backend = il_backend;
      if (il_backend == "unet") {
        if (il_model.empty()) throw InvalidArgument("--backend unet needs --model");
        model = load_model(il_model);
        il_p.model = &*model;
        il_p.threshold = il_thigh;
      }
      const auto r = locate_injection(high, il_p, threads, low ? &*low : nullptr);
      write_stack(r.injection.mask, il_mask, StorageType::U16);
      write_cells(r.cells, il_cells);
      std::cout << "empty=" << r.injection.empty << " cells=" << r.cells.size() << '\n';
    } else if (ts->parsed()) {
      const Stack3D cg = read_stack(ts_cg), cr = read_stack(ts_cr);
      std::optional<NetworkParams> model;
      if (ts_backend == "unet") {
        if (ts_model.empty()) throw InvalidArgument("--backend unet needs --model");
        model = load_model(ts_model);
      }
      const auto r = segment_tracer(cr, cg, ts_p, model ? &*model : nullptr, ts_theta, threads);
      write_stack(r.signal, ts_out, parse_dtype(ts_dtype));
      write_stack(r.mask, sibling(ts_out, "_mask"), StorageType::U16);
      std::size_t n = 0;
      for (double v : r.mask.data) n += v != 0.0;
      std::cout << "tracer_pixels=" << n << '\n';
    } else if (tc->parsed()) {
      const Stack3D img = read_stack(tc_image);
      const CellPointCloud cells = read_cells(tc_cells);
      const UNetConfig cfg = tc_f.config(1);
      std::vector<TrainingSample> samples;
      for (int z = 0; z < img.nz(); ++z) {
        Mask lab(img.nx(), img.ny(), 0);
        bool any = false;
        for (const auto& c : cells)
          if (c.z == z && lab.contains(c.x, c.y)) any = lab(c.x, c.y) = 1;
        if (!any) continue;
        const Image raw = img.slice(z);
        const Image w = build_cell_weight_map(lab, raw, tc_w);
        Image labf(lab.width, lab.height);
        for (std::size_t i = 0; i < labf.size(); ++i) labf.data[i] = lab.data[i];
        const Image ch[] = {scaled(raw, cfg.input_scale)};
        auto s = sample_training_tiles(ch, labf, w, tc_f.dense, tc_f.sparse, tc_f.tile_extent(), tc_f.density_sigma,
                                       derive_seed(tc_f.seed, static_cast<std::uint64_t>(z)));
        samples.insert(samples.end(), s.begin(), s.end());
      }
      const auto r = run_training(cfg, expand(std::move(samples), tc_f), tc_f);
      save_model(r.params, tc_out);
      print_loss(r);
    } else if (tt->parsed()) {
      const Stack3D cr = read_stack(tt_cr), cg = read_stack(tt_cg), lab = read_stack(tt_label);
      std::optional<Stack3D> neg;
      if (!tt_neg.empty()) neg = read_stack(tt_neg);
      const UNetConfig cfg = tt_f.config(2);
      std::vector<TrainingSample> samples;
      for (int z = 0; z < cr.nz(); ++z) {
        const Mask m = slice_mask(lab, z);
        std::optional<Mask> nm;
        if (neg) nm = slice_mask(*neg, z);
        const Image w = tracer_weight_map(m, nm ? &*nm : nullptr, tt_tracer_w, tt_neg_w);
        Image labf(m.width, m.height);
        for (std::size_t i = 0; i < labf.size(); ++i) labf.data[i] = m.data[i];
        const Image ch[] = {scaled(cr.slice(z), cfg.input_scale), scaled(cg.slice(z), cfg.input_scale)};
        auto s = sample_training_tiles(ch, labf, w, tt_f.dense, tt_f.sparse, tt_f.tile_extent(), tt_f.density_sigma,
                                       derive_seed(tt_f.seed, static_cast<std::uint64_t>(z)));
        samples.insert(samples.end(), s.begin(), s.end());
      }
      const auto r = run_training(cfg, expand(std::move(samples), tt_f), tt_f);
      save_model(r.params, tt_out);
      print_loss(r);
    } else if (pr->parsed()) {
      const NetworkParams model = load_model(pr_model);
      std::vector<Stack3D> in;
      for (const auto& p : pr_in) in.push_back(read_stack(p));
      for (const auto& s : in)
        if (!s.same_grid(in[0])) throw InvalidArgument("predict: input stacks differ in extent");
      Stack3D out(in[0].dims, in[0].voxel_um, Channel::None, 0.0);
      for (int z = 0; z < out.nz(); ++z) {
        std::vector<Image> ch;
        for (const auto& s : in) ch.push_back(s.slice(z));
        out.set_slice(z, sliding_window_predict(model, ch, threads));
      }
      write_stack(out, pr_out, StorageType::F32);
    } else if (mp->parsed()) {
      DisplacementField field;
      if (!mp_field.empty()) {
        field = read_field(mp_field);
      } else if (!mp_atlas.empty()) {
        const RegionAtlas a = load_atlas(stack_prefix(mp_atlas));
        field = DisplacementField::identity(a.labels.dims, a.labels.voxel_um);
      } else {
        throw InvalidArgument("map needs --field or --atlas");
      }
      if (mp_in.empty() && mp_cells.empty()) throw InvalidArgument("map needs --in and/or --cells");
      std::optional<Stack3D> src;
      if (!mp_in.empty()) src = read_stack(mp_in);
      if (src && !mp_out.empty()) {
        const Stack3D s = mp_down ? downsample_stack(*src, field.voxel_um()) : *src;
        std::vector<std::string> warnings;
        const Stack3D out = apply_field(s, field, parse_interpolation(mp_interp), &warnings, threads);
        for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
        write_stack(out, mp_out, mp_interp == "nearest" ? StorageType::U16 : StorageType::F64);
      }
      if (!mp_cells.empty()) {
        if (!src) throw InvalidArgument("--cells needs --in for its voxel size");
        if (mp_cells_out.empty()) throw InvalidArgument("--cells needs --cells-out");
        std::vector<std::array<double, 3>> pts;
        std::vector<double> scores;
        for (const auto& c : read_cells(mp_cells)) {
          pts.push_back({(c.x + 0.5) * src->voxel_um[0], (c.y + 0.5) * src->voxel_um[1], (c.z + 0.5) * src->voxel_um[2]});
          scores.push_back(c.score);
        }
        write_points_um(map_points(pts, field), scores, mp_cells_out);
      }
    } else if (cn->parsed()) {
      if (cn_cells.empty() == cn_mask.empty()) throw InvalidArgument("pass exactly one of --cells and --mask");
      const RegionAtlas atlas = load_atlas(stack_prefix(cn_atlas));
      const RegionCounts src = cn_cells.empty() ? injection_regions(read_stack(cn_mask), atlas)
                                                : injection_regions(read_points_um(cn_cells), atlas);
      const RegionSums tgt = projection_strengths(read_stack(cn_signal), atlas, cn_norm);
      const auto table = connectivity_table(src, tgt, atlas, cn_brain, cn_inj, cn_norm);
      write_connectivity(table, cn_out);
      std::cout << "src_regions=" << table.src.size() << " tgt_regions=" << table.tgt.size() << '\n';
    } else if (ev->parsed()) {
      bool any = false;
      if (!ev_pc.empty() || !ev_tc.empty()) {
        if (ev_pc.empty() || ev_tc.empty()) throw InvalidArgument("--pred-cells and --truth-cells go together");
        const auto pred = read_cells(ev_pc), truth = read_cells(ev_tc);
        const auto m = match_detections(pred, truth, ev_radius);
        std::cout << "cells tp=" << m.tp << " fp=" << m.fp << " fn=" << m.fn << " precision="
                  << format_double(m.precision()) << " recall=" << format_double(m.recall())
                  << " f1=" << format_double(m.f1()) << '\n';
        std::sort(ev_thr.begin(), ev_thr.end());
        for (const auto& p : precision_recall_curve(pred, truth, ev_radius, ev_thr)) {
          std::cout << "pr threshold=" << format_double(p.threshold) << " precision=" << format_double(p.precision)
                    << " recall=" << format_double(p.recall) << '\n';
        }
        any = true;
      }
      if (!ev_pm.empty() || !ev_tm.empty()) {
        if (ev_pm.empty() || ev_tm.empty()) throw InvalidArgument("--pred-mask and --truth-mask go together");
        const auto m = segmentation_metrics(read_stack(ev_pm), read_stack(ev_tm));
        std::cout << "mask tp=" << m.tp << " fp=" << m.fp << " fn=" << m.fn << " precision=" << format_double(m.precision)
                  << " recall=" << format_double(m.recall) << " f1=" << format_double(m.f1)
                  << " iou=" << format_double(m.iou) << '\n';
        any = true;
      }
      if (!ev_tab.empty() || !ev_ttab.empty()) {
        if (ev_tab.empty() || ev_ttab.empty()) throw InvalidArgument("--table and --truth-table go together");
        const auto a = read_connectivity(ev_tab), b = read_connectivity(ev_ttab);
        double worst = 0.0;
        bool same_keys = a.src == b.src && a.tgt.size() == b.tgt.size();
        for (const auto& [id, v] : b.tgt) {
          const auto it = a.tgt.find(id);
          if (it == a.tgt.end()) {
            same_keys = false;
            continue;
          }
          worst = std::max(worst, std::abs(it->second - v) / std::max(std::abs(v), 1e-300));
        }
        std::cout << "table src_equal=" << (a.src == b.src) << " tgt_max_rel_err=" << format_double(worst)
                  << " exact=" << (same_keys && worst == 0.0) << '\n';
        any = true;
      }
      if (!any) throw InvalidArgument("eval: nothing to compare");
    } else if (rn->parsed()) {
      PipelineConfig cfg;
      const auto issues = validate_config(rn_config, &cfg);
      if (!issues.empty()) {
        for (const auto& i : issues) std::cerr << "config: " << i.message() << '\n';
        return 1;
      }
      if (app.count("--threads")) cfg.threads = threads;
      if (rn_check) {
        std::cout << "config ok\n";
        return 0;
      }
      const RunReport r = run_pipeline(cfg, &std::cout);
      if (!r.ok()) {
        for (const auto& s : r.stages)
          if (s.status == "fail") std::cerr << "stage " << s.name << " failed: " << s.error << '\n';
        return 2;
      }
    }
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
