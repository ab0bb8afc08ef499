// Acceptance run: one PASS/FAIL line per criterion. `acceptance 3 7` runs a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>

#include "marmo/evalsynth.hpp"
#include "marmo/flatfield.hpp"
#include "marmo/injsite.hpp"
#include "marmo/mapping.hpp"
#include "marmo/nnseg.hpp"
#include "marmo/pipeline.hpp"
#include "marmo/stitch.hpp"
#include "marmo/tracerseg.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace marmo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Image crop(const Image& img, int x0, int y0, int w, int h) {
  Image out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out(x, y) = img(x0 + x, y0 + y);
  return out;
}

Image gaussian_blob(int n, double cx, double cy, double s, double amp) {
  Image img(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) img(x, y) = amp * std::exp(-0.5 * ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (s * s));
  return img;
}

void add_poisson(Image& img, std::mt19937_64& rng) {
  for (double& v : img.data) v = std::poisson_distribution<int>(v)(rng);
}

// --- 1 ----------------------------------------------------------------------

void flatfield_recovery(Outcome& o) {
  const auto ph = flatfield_phantom(500, 720, 720, 80.0, 0.6, 0.01, 2024);
  const auto t0 = std::chrono::steady_clock::now();
  const ShadingField f = estimate_shading(ph.tiles);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  for (std::size_t i = 0; i < f.values.size(); ++i)
    worst = std::max(worst, std::abs(f.values[i] / ph.vignette.data[i] - 1.0));
  o.detail << "max_rel_err=" << worst << " seconds=" << secs;
  o.require(worst < 0.03, "max relative error < 3%");
  o.require(secs < 30.0, "runtime < 30 s");
}

// --- 2 ----------------------------------------------------------------------

void stitch_round_trip(Outcome& o) {
  std::mt19937_64 rng(3);
  const int tile = 360, margin = 50, overlap = 80, step = tile - 2 * margin - overlap;
  double worst = 1e300;
  for (int n = 0; n < 3; ++n) {
    const int W = 2 * step + tile;
    const Image src = test::random_image(W, W, rng, 0.0, 65535.0);
    const auto tiles = test::cut_tiles(src, 3, 3, tile, step);
    const auto s = assemble_slice(tiles, plan_layout(tiles), margin);
    const Image ref = crop(src, margin, margin, W - 2 * margin, W - 2 * margin);
    if (!s.image.same_shape(ref)) {
      o.require(false, "reassembled extent");
      return;
    }
    worst = std::min(worst, test::psnr(s.image, ref));
  }
  const Image flat(2 * step + tile, 2 * step + tile, 1234.0);
  const auto tiles = test::cut_tiles(flat, 3, 3, tile, step);
  const auto s = assemble_slice(tiles, plan_layout(tiles), margin);
  const bool constant = std::all_of(s.image.data.begin(), s.image.data.end(), [](double v) { return v == 1234.0; });
  o.detail << "min_psnr_db=" << worst << " constant_exact=" << constant;
  o.require(worst > 50.0, "PSNR > 50 dB");
  o.require(constant && s.unfilled == 0, "constant tiles reassemble to a constant");
}

// --- 3 ----------------------------------------------------------------------

void rough_localization_oracle(Outcome& o) {
  std::mt19937_64 rng(33);
  std::uniform_int_distribution<int> pos(0, 59), ext(1, 8), blobs(0, 4);
  std::uniform_real_distribution<double> bg(0.0, 4400.0), bright(4600.0, 30000.0), u(0.0, 1.0);
  int equal = 0, nonempty = 0;
  for (int n = 0; n < 100; ++n) {
    Stack3D s({64, 64, 64}, {50.0, 50.0, 50.0}, Channel::CB, 0.0);
    const double speckle = u(rng) * 0.003;
    for (double& v : s.data) v = u(rng) < speckle ? bright(rng) : bg(rng);
    for (int b = blobs(rng); b > 0; --b) {
      const int x0 = pos(rng), y0 = pos(rng), z0 = pos(rng);
      const int ex = ext(rng), ey = ext(rng), ez = ext(rng);
      const double v = bright(rng);
      for (int z = z0; z < std::min(64, z0 + ez); ++z)
        for (int y = y0; y < std::min(64, y0 + ey); ++y)
          for (int x = x0; x < std::min(64, x0 + ex); ++x) s(x, y, z) = v;
    }
    const auto got = rough_localize(s);
    const Stack3D want = oracle::rough_localize(s, 4500.0, 150.0);
    equal += got.mask.data == want.data;
    nonempty += !got.empty;
  }
  o.detail << "equal=" << equal << "/100 nonempty=" << nonempty;
  o.require(equal == 100, "voxel-for-voxel equality on every case");
}

// --- 4 ----------------------------------------------------------------------

void hessian_analytic(Outcome& o) {
  double worst = 0.0;
  for (double s : {2.0, 3.0, 4.0})
    for (double sigma : {2.0, 3.0, 4.0}) {
      const double amp = 1000.0;
      const double sg[] = {sigma};
      const double r = hessian_cell_filter(gaussian_blob(81, 40, 40, s, amp), sg)(40, 40);
      const double S2 = s * s + sigma * sigma;
      worst = std::max(worst, std::abs(r / (amp * s * s / (S2 * S2)) - 1.0));
    }
  Image ridge(81, 81);
  for (int y = 0; y < 81; ++y)
    for (int x = 0; x < 81; ++x) ridge(x, y) = 1000.0 * std::exp(-0.5 * (x - 40) * (x - 40) / 9.0);
  const double sg[] = {3.0};
  const double r_ridge = hessian_cell_filter(ridge, sg)(40, 40);
  const double r_blob = hessian_cell_filter(gaussian_blob(81, 40, 40, 3.0, 1000.0), sg)(40, 40);
  const double ratio = std::abs(r_ridge) / r_blob;
  o.detail << "max_center_rel_err=" << worst << " ridge_over_blob=" << ratio;
  o.require(worst < 0.02, "blob center within 2%");
  o.require(r_blob > 0.0 && ratio < 0.05, "ridge response < 5% of blob");
}

// --- 5 ----------------------------------------------------------------------

bool near_mask(const Stack3D& m, int x, int y, int z, int r) {
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r * r && m.contains(x + dx, y + dy, z) && m(x + dx, y + dy, z) != 0.0) return true;
  return false;
}

void threshold_pipeline_check(Outcome& o) {
  std::mt19937_64 rng(55);
  int equal = 0;
  for (int n = 0; n < 100; ++n) {
    const Image cr = test::random_image(64, 64, rng, 0, 300);
    Image cg = test::random_image(64, 64, rng, 0, 500);
    std::bernoulli_distribution bright(0.08);
    for (double& v : cg.data)
      if (bright(rng)) v += 400;
    const TracerLabel got = threshold_pipeline(cg, cr);
    const auto [m, L] = oracle::tracer_pipeline(cg, cr, 1.1, 300, 100, 3);
    equal += got.mask == m && got.signal == L;
  }

  PhantomSpec spec;
  spec.sections = 3;
  spec.cell_count = 0;
  spec.seed = 17;
  const Phantom ph = generate_phantom(spec);
  const Stack3D& cg = ph.sections.at(Channel::CG);
  const Stack3D& cr = ph.sections.at(Channel::CR);
  std::size_t tp = 0, truth = 0, vessel_px = 0, vessel_T = 0, vessel_hit = 0;
  for (int z = 0; z < cg.nz(); ++z) {
    const Image T = background_subtract(cg.slice(z), cr.slice(z), 1.1);
    const TracerLabel l = threshold_pipeline(cg.slice(z), cr.slice(z));
    for (int y = 0; y < cg.ny(); ++y)
      for (int x = 0; x < cg.nx(); ++x) {
        const bool t = ph.truth.tracer_mask(x, y, z) != 0.0;
        truth += t;
        tp += t && l.mask(x, y);
        if (!t && ph.truth.vessel_mask(x, y, z) != 0.0) {
          ++vessel_px;
          vessel_T += T(x, y) != 0.0;
          if (!near_mask(ph.truth.tracer_mask, x, y, z, 3)) vessel_hit += l.mask(x, y);
        }
      }
  }
  const double recall = truth ? static_cast<double>(tp) / truth : 0.0;

  std::size_t fp = 0, total = 0;
  for (int n = 0; n < 5; ++n) {
    Image bcr(256, 256, 100.0), bcg(256, 256, 110.0);
    add_poisson(bcr, rng);
    add_poisson(bcg, rng);
    for (auto v : threshold_pipeline(bcg, bcr).mask.data) fp += v;
    total += 256 * 256;
  }
  const double fp_frac = static_cast<double>(fp) / total;
  o.detail << "oracle_equal=" << equal << "/100 recall=" << recall << " fp_fraction=" << fp_frac
           << " vessel_px=" << vessel_px << " vessel_T_nonzero=" << vessel_T << " vessel_mask_hits=" << vessel_hit;
  o.require(equal == 100, "exact oracle equality");
  o.require(recall >= 0.9, "tracer recall >= 0.9");
  o.require(fp_frac < 1e-3, "false-positive fraction < 1e-3");
  o.require(vessel_px > 0 && vessel_T == 0 && vessel_hit == 0, "vessels contribute 0 pixels");
}

// --- 6 ----------------------------------------------------------------------

double gradient_err(double fd, double analytic) {
  // Biases feeding batch normalization have an exactly zero gradient.
  if (std::max(std::abs(fd), std::abs(analytic)) < 1e-9) return std::abs(fd - analytic);
  return std::abs(fd - analytic) / std::max(std::abs(fd), std::abs(analytic));
}

void gradient_check(Outcome& o) {
  std::mt19937_64 rng(6);
  UNetConfig c;
  c.depth = 2;
  c.base_features = 4;
  c.input_extent = 52;
  NetworkParams params = make_unet(c, 7);
  const int e = c.input_extent;
  TrainingSample s{Tensor(1, e, e), Image(e, e), Image(e, e, 0.0)};
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::bernoulli_distribution bit(0.3);
  for (double& v : s.input.data) v = u(rng);
  for (double& v : s.label.data) v = bit(rng);
  std::uniform_int_distribution<int> pos(e / 2 - 6, e / 2 + 6);
  for (int k = 0; k < 4; ++k) s.weights(pos(rng), pos(rng)) = 1.0;

  const auto fp = unet_forward_pass(params, s.input, false);
  const Tensor& lt = fp.logit_tensor();
  Image p = lt.image(0);
  for (double& v : p.data) v = sigmoid(v);
  const auto loss = weighted_logistic_loss(p, center_crop(s.label, lt.width, lt.height),
                                           center_crop(s.weights, lt.width, lt.height));
  Tensor lg(1, lt.height, lt.width);
  lg.data = loss.grad_logits.data;
  const ParamGrads g = unet_backward(params, fp, lg);
  // At h = 1e-5 rounding in the loss (~1e-11) swamps gradients near 1e-7.
  const double h = 1e-4;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    auto check = [&](std::vector<double>& vals, const std::vector<double>& grad) {
      for (std::size_t k = 0; k < vals.size(); ++k) {
        const double keep = vals[k];
        vals[k] = keep + h;
        const double up = sample_loss(params, s);
        vals[k] = keep - h;
        const double down = sample_loss(params, s);
        vals[k] = keep;
        worst = std::max(worst, gradient_err((up - down) / (2 * h), grad[k]));
        ++checked;
      }
    };
    check(params.layers[li].weights, g[li].weights);
    check(params.layers[li].bias, g[li].bias);
  }

  const Image pr = test::random_image(30, 20, rng, 0.01, 0.99);
  Image y(30, 20);
  for (double& v : y.data) v = bit(rng);
  double bce = 0.0;
  for (std::size_t i = 0; i < pr.size(); ++i)
    bce -= y.data[i] * std::log(pr.data[i]) + (1 - y.data[i]) * std::log(1 - pr.data[i]);
  bce /= pr.size();
  const double bce_err = std::abs(weighted_logistic_loss(pr, y, Image(30, 20, 1.0)).loss - bce);
  o.detail << "parameters=" << checked << " max_rel_err=" << worst << " bce_abs_err=" << bce_err;
  o.require(checked == params.parameter_count(), "every parameter checked");
  o.require(worst < 1e-5, "relative error < 1e-5");
  o.require(bce_err < 1e-12, "uniform-weight loss equals mean BCE");
}

// --- 7 ----------------------------------------------------------------------

struct CellTile {
  TrainingSample sample;
  CellPointCloud truth;  ///< output-grid coordinates
};

// Five tiles of the C_B channel, each centered on a different cell, keeping
// only tiles whose cells sit clear of the output border.
std::vector<CellTile> phantom_cell_tiles(const UNetConfig& cfg, double input_scale) {
  PhantomSpec spec;
  spec.sections = 4;
  spec.cell_count = 40;
  spec.cell_region_um = 0.0;
  spec.seed = 77;
  const Phantom ph = generate_phantom(spec);
  const Stack3D& cb = ph.sections.at(Channel::CB);
  const int in = cfg.input_extent, out = *unet_output_extent(cfg, in), m = unet_margin(cfg, in);
  const int clear = 6;
  std::vector<CellTile> tiles;
  for (const auto& anchor : ph.truth.cells) {
    if (tiles.size() == 5) break;
    const int x0 = anchor.x - in / 2, y0 = anchor.y - in / 2;
    if (x0 < 0 || y0 < 0 || x0 + in > cb.nx() || y0 + in > cb.ny()) continue;
    CellTile t;
    bool ok = true;
    for (const auto& c : ph.truth.cells) {
      if (c.z != anchor.z) continue;
      const int ox = c.x - x0 - m, oy = c.y - y0 - m;
      const bool inside = ox >= clear && oy >= clear && ox < out - clear && oy < out - clear;
      const bool outside = ox < -clear || oy < -clear || ox >= out + clear || oy >= out + clear;
      if (inside) t.truth.push_back({ox, oy, 0, 1.0});
      else if (!outside) ok = false;
    }
    if (!ok) continue;
    Image raw(in, in);
    Mask lab(in, in, 0);
    for (int y = 0; y < in; ++y)
      for (int x = 0; x < in; ++x) raw(x, y) = cb(x0 + x, y0 + y, anchor.z);
    for (const auto& c : t.truth) lab(c.x + m, c.y + m) = 1;
    Image labf(in, in);
    for (std::size_t i = 0; i < labf.size(); ++i) labf.data[i] = lab.data[i];
    const Image w = build_cell_weight_map(lab, raw);
    for (double& v : raw.data) v *= input_scale;
    const Image ch[] = {raw};
    t.sample = {Tensor::from_images(ch), labf, w};
    tiles.push_back(std::move(t));
  }
  return tiles;
}

void overfit_check(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_features = 8;
  cfg.input_extent = 108;
  const auto tiles = phantom_cell_tiles(cfg, 1e-3);
  if (tiles.size() != 5) {
    o.require(false, "five usable phantom tiles");
    return;
  }
  std::vector<TrainingSample> samples;
  for (const auto& t : tiles) samples.push_back(t.sample);
  const NetworkParams init = make_unet(cfg, 1);
  auto mean_loss = [&](const NetworkParams& p) {
    double s = 0.0;
    for (const auto& x : samples) s += sample_loss(p, x);
    return s / samples.size();
  };
  const double before = mean_loss(init);
  TrainOptions opt;
  opt.steps = 2000;
  opt.learning_rate = 0.01;
  opt.seed = 1;
  const TrainResult r = train(init, samples, opt);
  const double after = mean_loss(r.params);

  std::size_t tp = 0, fp = 0, fn = 0, cells = 0;
  for (const auto& t : tiles) {
    const Image sal = unet_forward(r.params, t.sample.input).image(0);
    const auto m = match_detections(local_maxima(sal, 0.5), t.truth);
    tp += m.tp;
    fp += m.fp;
    fn += m.fn;
    cells += t.truth.size();
  }
  const double f1 = 2.0 * tp / std::max<std::size_t>(1, 2 * tp + fp + fn);
  const double secs = seconds_since(t0);
  o.detail << "loss_initial=" << before << " loss_final=" << after << " ratio=" << after / before << " cells=" << cells
           << " tp=" << tp << " fp=" << fp << " fn=" << fn << " f1=" << f1 << " seconds=" << secs;
  o.require(after < 0.1 * before, "loss below 10% of initial");
  o.require(tp > 0 && fp == 0 && fn == 0, "F1 = 1 at t_high = 0.5");
  o.require(secs < 600.0, "runtime < 10 min");
}

// --- 8 ----------------------------------------------------------------------

void sliding_window_identity(Outcome& o) {
  std::mt19937_64 rng(88);
  UNetConfig c;
  c.in_channels = std::uniform_int_distribution<int>(1, 3)(rng);
  c.depth = std::uniform_int_distribution<int>(2, 3)(rng);
  c.base_features = std::uniform_int_distribution<int>(2, 5)(rng);
  for (int e = 40;; ++e)
    if (unet_output_extent(c, e) && *unet_output_extent(c, e) >= 8) {
      c.input_extent = e + std::uniform_int_distribution<int>(0, 3)(rng) * (1 << (c.depth - 1));
      if (unet_output_extent(c, c.input_extent)) break;
    }
  const NetworkParams params = make_unet(c, rng());
  const int m = unet_margin(c, c.input_extent);
  double worst = 0.0;
  for (int n = 0; n < 5; ++n) {
    const int w = std::uniform_int_distribution<int>(30, 90)(rng), h = std::uniform_int_distribution<int>(30, 90)(rng);
    std::vector<Image> ch;
    for (int k = 0; k < c.in_channels; ++k) ch.push_back(test::random_image(w, h, rng));
    const Tensor padded = sliding_window_padded_input(params, ch);
    const Tensor whole = unet_forward(params, padded);
    if (whole.width != padded.width - 2 * m) {
      o.require(false, "whole-image output extent");
      return;
    }
    const Image tiled = sliding_window_predict(params, ch, 1 + n % 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) worst = std::max(worst, std::abs(tiled(x, y) - whole.at(0, y, x)));
  }
  o.detail << "in_channels=" << c.in_channels << " depth=" << c.depth << " base=" << c.base_features
           << " input=" << c.input_extent << " max_abs_diff=" << worst;
  o.require(worst < 1e-9, "tiled equals whole within 1e-9");
}

// --- 9 ----------------------------------------------------------------------

void detection_evaluation(Outcome& o) {
  PhantomSpec spec;
  spec.sections = 12;
  spec.cell_count = 200;
  spec.cell_region_um = 0.0;
  spec.seed = 99;
  const Phantom ph = generate_phantom(spec);
  const Stack3D& cb = ph.sections.at(Channel::CB);
  std::mt19937_64 rng(derive_seed(spec.seed, 9));
  std::vector<LabeledSlice> slices;
  for (int z = 0; z < cb.nz(); ++z) {
    Image img = cb.slice(z);
    add_poisson(img, rng);
    LabeledSlice ls{img, {}};
    for (const auto& c : ph.truth.cells)
      if (c.z == z) ls.truth.push_back({c.x, c.y, 0, 1.0});
    slices.push_back(std::move(ls));
  }
  const std::vector<std::vector<double>> sets{{2.0}, {3.0}, {4.0}, {5.0}};
  const std::size_t half = slices.size() / 2;
  const auto sel = select_hessian_baseline(std::span(slices).subspan(0, half), std::span(slices).subspan(half), sets);
  std::size_t train_cells = 0, test_cells = 0;
  for (std::size_t i = 0; i < slices.size(); ++i) (i < half ? train_cells : test_cells) += slices[i].truth.size();
  o.detail << "cells=" << ph.truth.cells.size() << " train_cells=" << train_cells << " test_cells=" << test_cells
           << " sigma=" << sel.sigmas.front() << " threshold=" << sel.threshold << " train_f1=" << sel.train_f1
           << " test_f1=" << sel.test.f1();
  o.require(ph.truth.cells.size() == 200, "200 planted cells");
  o.require(sel.test.f1() >= 0.8, "test F1 >= 0.8");
}

// --- 10 ---------------------------------------------------------------------

void connectivity_truth(Outcome& o) {
  const RegionAtlas atlas = make_toy_atlas({24, 20, 16}, 50.0);
  std::mt19937_64 rng(10);
  double worst = 0.0;
  for (int n = 0; n < 20; ++n) {
    Stack3D L = test::random_stack(atlas.labels.dims, rng, 0.0, 1e4);
    L.voxel_um = atlas.labels.voxel_um;
    double total = 0.0;
    for (double v : L.data) total += v;
    worst = std::max(worst, std::abs(projection_strengths(L, atlas, false).total() - total) / total);
  }

  PhantomSpec spec;
  spec.seed = 1;
  spec.sections = 6;
  spec.vignette_corner = 1.0;
  spec.noise = false;
  const fs::path dir = test::scratch("acceptance_e2e");
  write_phantom(generate_phantom(spec), dir / "phantom");
  PipelineConfig cfg;
  cfg.tiles = dir / "phantom" / "tiles";
  cfg.atlas = dir / "phantom" / "truth" / "atlas";
  cfg.out = dir / "run";
  cfg.brain_id = "phantom-1";
  cfg.injection_id = "inj0";
  const RunReport r = run_pipeline(cfg);
  bool exact = false;
  if (r.ok()) {
    exact = read_connectivity(cfg.out / outputs::connectivity) ==
            read_connectivity(dir / "phantom" / "truth" / "connectivity.txt");
  }
  o.detail << "max_conservation_rel_err=" << worst << " run_ok=" << r.ok() << " table_exact=" << exact;
  o.require(worst < 1e-6, "conservation within 1e-6");
  o.require(r.ok() && exact, "end-to-end table equals the planted table");
}

// --- 11 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Every output file except the timing report.
std::map<std::string, std::string> run_outputs(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != outputs::report)
      files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return files;
}

void determinism(Outcome& o) {
  PhantomSpec spec;
  spec.sections = 6;
  spec.noise = true;
  spec.vignette_corner = 0.6;
  spec.seed = 11;
  const Phantom a = generate_phantom(spec), b = generate_phantom(spec);
  const bool phantom_same = a.tiles == b.tiles && a.truth.table == b.truth.table;

  const fs::path dir = test::scratch("acceptance_determinism");
  write_phantom(a, dir / "phantom");
  std::vector<std::map<std::string, std::string>> runs;
  for (int threads : {1, 1, 3}) {
    PipelineConfig cfg;
    cfg.tiles = dir / "phantom" / "tiles";
    cfg.atlas = dir / "phantom" / "truth" / "atlas";
    cfg.out = dir / ("run" + std::to_string(runs.size()));
    cfg.threads = threads;
    if (!run_pipeline(cfg).ok()) {
      o.require(false, "pipeline run");
      return;
    }
    runs.push_back(run_outputs(cfg.out));
  }

  UNetConfig c;
  c.base_features = 4;
  c.input_extent = 52;
  std::mt19937_64 rng(12);
  std::vector<TrainingSample> samples;
  for (int k = 0; k < 3; ++k) {
    Tensor in(1, 52, 52);
    for (double& v : in.data) v = std::uniform_real_distribution<double>(0, 1)(rng);
    samples.push_back({in, test::random_image(52, 52, rng) , Image(52, 52, 1.0)});
    for (double& v : samples.back().label.data) v = v > 0.7;
  }
  TrainOptions opt;
  opt.steps = 30;
  const auto t1 = train(make_unet(c, 3), samples, opt), t2 = train(make_unet(c, 3), samples, opt);
  bool train_same = t1.loss_history == t2.loss_history;
  for (std::size_t l = 0; l < t1.params.layers.size(); ++l)
    train_same = train_same && t1.params.layers[l].weights == t2.params.layers[l].weights &&
                 t1.params.layers[l].bias == t2.params.layers[l].bias;
  const Image slice = test::random_image(150, 120, rng);
  const Image ch[] = {slice};
  const bool predict_same = sliding_window_predict(t1.params, ch, 1) == sliding_window_predict(t1.params, ch, 3);

  o.detail << "phantom_identical=" << phantom_same << " files=" << runs[0].size() << " rerun_identical="
           << (runs[0] == runs[1]) << " threads3_identical=" << (runs[0] == runs[2]) << " training_identical=" << train_same
           << " predict_threads_identical=" << predict_same;
  o.require(phantom_same, "phantom bit-identical");
  o.require(runs[0] == runs[1], "two runs bit-identical");
  o.require(runs[0] == runs[2], "threads=1 vs threads=3 bit-identical");
  o.require(train_same && predict_same, "training and inference bit-identical");
}

struct Criterion {
  int id;
  const char* name;
  std::function<void(Outcome&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "flat-field recovery", flatfield_recovery},
      {2, "stitch round trip", stitch_round_trip},
      {3, "rough localization oracle", rough_localization_oracle},
      {4, "Hessian analytic check", hessian_analytic},
      {5, "threshold pipeline", threshold_pipeline_check},
      {6, "CNN gradient check", gradient_check},
      {7, "CNN overfit", overfit_check},
      {8, "sliding-window identity", sliding_window_identity},
      {9, "detection evaluation", detection_evaluation},
      {10, "connectivity conservation and truth", connectivity_truth},
      {11, "determinism", determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.str().c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
