#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "marmo/injsite.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace marmo;

namespace {

Stack3D low_grid(int n) { return Stack3D({n, n, n}, {50.0, 50.0, 50.0}, Channel::CB, 0.0); }

void fill_box(Stack3D& s, std::array<int, 3> lo, std::array<int, 3> hi, double v) {
  for (int z = lo[2]; z < hi[2]; ++z)
    for (int y = lo[1]; y < hi[1]; ++y)
      for (int x = lo[0]; x < hi[0]; ++x) s(x, y, z) = v;
}

// Analytic elliptical Gaussian blob rotated by theta.
Image blob(int n, double cx, double cy, double sx, double sy, double theta, double amp) {
  Image img(n, n);
  const double c = std::cos(theta), s = std::sin(theta);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = c * dx + s * dy, v = -s * dx + c * dy;
      img(x, y) = amp * std::exp(-0.5 * (u * u / (sx * sx) + v * v / (sy * sy)));
    }
  return img;
}

}  // namespace

TEST_CASE("rough_localize: all-zero stack gives an empty mask") {
  const auto m = rough_localize(low_grid(16));
  CHECK(m.empty);
  for (double v : m.mask.data) CHECK(v == 0.0);
}

TEST_CASE("rough_localize: bright cube matches the dense oracle and its bounds") {
  Stack3D s = low_grid(32);
  fill_box(s, {12, 12, 12}, {18, 18, 18}, 10000.0);
  const auto m = rough_localize(s, 4500.0, 150.0);
  CHECK_FALSE(m.empty);
  CHECK(m.mask.data == oracle::rough_localize(s, 4500.0, 150.0).data);
  // Contains the cube's central 2x2x2 and stays within the cube dilated by 2 sigma (6 voxels).
  for (int z = 14; z < 16; ++z)
    for (int y = 14; y < 16; ++y)
      for (int x = 14; x < 16; ++x) CHECK(m.mask(x, y, z) == 1.0);
  for (int z = 0; z < 32; ++z)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (m.mask(x, y, z) != 0.0) {
          CHECK(x >= 6);
          CHECK(x < 24);
          CHECK(y >= 6);
          CHECK(z < 24);
        }
}

TEST_CASE("rough_localize keeps only the larger of two blobs") {
  Stack3D s = low_grid(40);
  fill_box(s, {4, 4, 4}, {12, 12, 12}, 9000.0);     // 512 voxels
  fill_box(s, {28, 28, 28}, {32, 32, 32}, 9000.0);  // 64 voxels
  const auto m = rough_localize(s);
  CHECK(m.mask(8, 8, 8) == 1.0);
  CHECK(m.mask(30, 30, 30) == 0.0);
  CHECK(m.mask.data == oracle::rough_localize(s, 4500.0, 150.0).data);
}

TEST_CASE("rough_localize equals the oracle on random volumes") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> pos(0, 27), ext(1, 6);
  std::uniform_real_distribution<double> bg(0.0, 4400.0), bright(4600.0, 20000.0), u(0.0, 1.0);
  for (int n = 0; n < 6; ++n) {
    Stack3D s = low_grid(32);
    for (double& v : s.data) v = u(rng) < 0.002 ? bright(rng) : bg(rng);
    for (int b = 0; b < 3; ++b) {
      const std::array<int, 3> lo{pos(rng), pos(rng), pos(rng)};
      fill_box(s, lo, {std::min(32, lo[0] + ext(rng)), std::min(32, lo[1] + ext(rng)), std::min(32, lo[2] + ext(rng))},
               bright(rng));
    }
    CHECK(rough_localize(s).mask.data == oracle::rough_localize(s, 4500.0, 150.0).data);
  }
}

TEST_CASE("rough_localize depends only on the set above t_raw") {
  Stack3D s = low_grid(24);
  fill_box(s, {5, 5, 5}, {11, 12, 10}, 6000.0);
  fill_box(s, {15, 15, 15}, {18, 18, 18}, 5000.0);
  Stack3D scaled = s;
  for (double& v : scaled.data) v *= 3.0;  // background is 0, so the set > 4500 is unchanged
  CHECK(rough_localize(s).mask == rough_localize(scaled).mask);
}

TEST_CASE("half-maximum threshold is invariant to positive rescaling") {
  std::mt19937_64 rng(2);
  const Stack3D s = test::random_stack({10, 9, 8}, rng);
  for (double c : {0.01, 3.0, 1e6}) {
    Stack3D t = s;
    for (double& v : t.data) v *= c;
    CHECK(threshold_half_max(t) == threshold_half_max(s));
  }
}

TEST_CASE("largest_component") {
  Stack3D one = low_grid(8);
  fill_box(one, {1, 1, 1}, {4, 3, 2}, 1.0);
  CHECK(largest_component(one) == one);

  Stack3D two = low_grid(12);
  fill_box(two, {0, 0, 0}, {5, 1, 1}, 1.0);
  fill_box(two, {6, 6, 6}, {9, 9, 7}, 1.0);
  const Stack3D big = largest_component(two);
  CHECK(big(0, 0, 0) == 0.0);
  CHECK(big(7, 7, 6) == 1.0);

  // Equal sizes: the one holding the smallest linear index wins.
  Stack3D tie = low_grid(8);
  tie(5, 5, 5) = 1.0;
  tie(1, 0, 0) = 1.0;
  const Stack3D t = largest_component(tie);
  CHECK(t(1, 0, 0) == 1.0);
  CHECK(t(5, 5, 5) == 0.0);

  CHECK(largest_component(low_grid(4)) == low_grid(4));
}

TEST_CASE("largest_component equals BFS flood fill on random sparse volumes") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int n = 0; n < 30; ++n) {
    Stack3D s({15, 13, 11}, {1, 1, 1});
    const double p = 0.1 + 0.02 * (n % 10);
    for (double& v : s.data) v = u(rng) < p ? 1.0 : 0.0;
    CHECK(largest_component(s).data == oracle::flood_fill_largest(s).data);
  }
}

TEST_CASE("26-connectivity joins diagonal neighbours") {
  Stack3D s({4, 4, 4}, {1, 1, 1});
  s(0, 0, 0) = s(1, 1, 1) = s(3, 3, 3) = 1.0;
  s(3, 2, 3) = 1.0;
  const auto six = label_components(s, Connectivity::Six);
  const auto all = label_components(s, Connectivity::TwentySix);
  CHECK(six.sizes.size() == 4);  // three components plus the unused slot
  CHECK(all.sizes.size() == 3);
}

TEST_CASE("hessian: constant image gives zero response") {
  const double sig[] = {1.0, 2.0, 3.5};
  for (double v : hessian_cell_filter(Image(40, 30, 500.0), sig).data) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("hessian: blob center matches the closed-form second derivative") {
  for (double s : {2.0, 3.0, 4.0}) {
    for (double sigma : {2.0, 3.0, 4.0}) {
      const double amp = 1000.0;
      const Image img = blob(81, 40, 40, s, s, 0.0, amp);
      const double sg[] = {sigma};
      const double r = hessian_cell_filter(img, sg)(40, 40);
      const double S2 = s * s + sigma * sigma;
      const double predicted = amp * s * s / (S2 * S2);  // -d2/dx2 of the blurred blob at its center
      CHECK(std::abs(r / predicted - 1.0) < 0.02);
    }
  }
}

TEST_CASE("hessian: ridges are suppressed relative to blobs") {
  const int n = 81;
  const double amp = 1000.0, s = 3.0;
  Image ridge(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) ridge(x, y) = amp * std::exp(-0.5 * (x - 40) * (x - 40) / (s * s));
  const double sg[] = {3.0};
  const double r_ridge = hessian_cell_filter(ridge, sg)(40, 40);
  const double r_blob = hessian_cell_filter(blob(n, 40, 40, s, s, 0.0, amp), sg)(40, 40);
  CHECK(r_blob > 0.0);
  CHECK(std::abs(r_ridge) < 0.05 * r_blob);
}

TEST_CASE("hessian: response is rotation covariant") {
  const double sg[] = {2.5};
  const Image a = hessian_cell_filter(blob(81, 40, 40, 3.0, 4.5, 0.0, 1000.0), sg);
  for (double th : {0.3, 0.7, 1.2}) {
    const Image b = hessian_cell_filter(blob(81, 40, 40, 3.0, 4.5, th, 1000.0), sg);
    CHECK(std::abs(b(40, 40) / a(40, 40) - 1.0) < 0.03);
  }
}

TEST_CASE("hessian rejects bad scales") {
  std::vector<double> none;
  CHECK_THROWS_AS(hessian_cell_filter(Image(8, 8), none), InvalidArgument);
  const double neg[] = {-1.0};
  CHECK_THROWS_AS(hessian_cell_filter(Image(8, 8), neg), InvalidArgument);
}

TEST_CASE("detect_cells examples") {
  Stack3D s({20, 20, 2}, {1, 1, 1});
  CHECK(detect_cells(s).empty());
  s(7, 9, 1) = 0.9;
  const auto c = detect_cells(s);
  REQUIRE(c.size() == 1);
  CHECK(c[0] == CellPoint{7, 9, 1, 0.9});
  fill_box(s, {2, 2, 0}, {5, 5, 1}, 0.8);  // plateau
  CHECK(detect_cells(s).size() == 1);
}

TEST_CASE("detections are exactly the strict maxima above threshold") {
  std::mt19937_64 rng(8);
  for (int n = 0; n < 20; ++n) {
    Image img = test::random_image(25, 20, rng);
    for (double& v : img.data) v = std::round(v * 8) / 8;  // ties happen
    const auto got = local_maxima(img, 0.5, 3);
    CellPointCloud want;
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 25; ++x) {
        bool ok = img(x, y) > 0.5;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            if ((dx || dy) && img.contains(x + dx, y + dy) && !(img(x, y) > img(x + dx, y + dy))) ok = false;
        if (ok) want.push_back({x, y, 3, img(x, y)});
      }
    CHECK(got == want);
  }
}

TEST_CASE("roi_from_mask geometry") {
  const double pitch = 1.34;
  Stack3D m({20, 20, 10}, {50, 50, 50});
  m(10, 10, 5) = 1.0;
  const Roi r = roi_from_mask(m, {2000, 2000}, pitch, 50.0, 0);
  REQUIRE(r.rects.count(5) == 1);
  CHECK(r.rects.at(5).x0 == std::lround(10 * 50.0 / pitch));
  CHECK(r.rects.at(5).y0 == 373);
  CHECK(r.rects.at(5).x1 == std::lround(11 * 50.0 / pitch));

  Stack3D full({4, 3, 2}, {50, 50, 50}, Channel::None, 1.0);
  const Roi f = roi_from_mask(full, {150, 112}, pitch, 50.0, 4);
  for (int z = 0; z < 2; ++z) CHECK(f.rects.at(z) == PixelRect{0, 0, 150, 112});

  Stack3D span({6, 6, 12}, {50, 50, 50});
  for (int z = 5; z <= 8; ++z) span(2, 3, z) = 1.0;
  const Roi sr = roi_from_mask(span, {300, 300}, pitch, 50.0, 3);
  CHECK(sr.z_min == 5);
  CHECK(sr.z_max == 8);

  CHECK_THROWS_AS(roi_from_mask(Stack3D({3, 3, 3}, {50, 50, 50}), {100, 100}, pitch, 50.0, 0), InvalidArgument);
}

TEST_CASE("detect_cells honours the ROI") {
  Stack3D s({30, 30, 3}, {1, 1, 1});
  s(5, 5, 1) = 0.9;
  s(20, 20, 1) = 0.9;
  s(20, 20, 2) = 0.9;
  Roi roi;
  roi.z_min = roi.z_max = 1;
  roi.rects[1] = {15, 15, 25, 25};
  const auto c = detect_cells(s, 0.5, &roi);
  REQUIRE(c.size() == 1);
  CHECK(c[0].x == 20);
  CHECK(c[0].z == 1);
}

TEST_CASE("cell cloud text round trip") {
  const auto dir = test::scratch("injsite_cells");
  const CellPointCloud c{{1, 2, 3, 0.75}, {40, 5, 0, 1234.5678901234567}};
  write_cells(c, dir / "c.txt");
  CHECK(read_cells(dir / "c.txt") == c);
}
