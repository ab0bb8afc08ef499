#include <doctest.h>

#include <cmath>
#include <fstream>

#include "marmo/imgcore.hpp"
#include "support.hpp"

using namespace marmo;

namespace {

void truncate_file(const std::filesystem::path& p, std::size_t drop) {
  const auto n = std::filesystem::file_size(p);
  std::filesystem::resize_file(p, n - drop);
}

// Explicit nested-loop block mean at integer ratios.
Stack3D block_mean(const Stack3D& s, std::array<int, 3> r) {
  Stack3D out({s.nx() / r[0], s.ny() / r[1], s.nz() / r[2]},
              {s.voxel_um[0] * r[0], s.voxel_um[1] * r[1], s.voxel_um[2] * r[2]});
  for (int z = 0; z < out.nz(); ++z)
    for (int y = 0; y < out.ny(); ++y)
      for (int x = 0; x < out.nx(); ++x) {
        double sum = 0.0;
        for (int k = 0; k < r[2]; ++k)
          for (int j = 0; j < r[1]; ++j)
            for (int i = 0; i < r[0]; ++i) sum += s(x * r[0] + i, y * r[1] + j, z * r[2] + k);
        out(x, y, z) = sum / (r[0] * r[1] * r[2]);
      }
  return out;
}

}  // namespace

TEST_CASE("tile round trip keeps pixels and sidecar fields") {
  const auto dir = test::scratch("imgcore_tile");
  Tile2D t(720, 720, Channel::CG, 100);
  t.pixel_pitch_um = 1.34;
  t.world_offset_um = {750.0, 0.0, 0.0};
  t.index = 3;
  write_tile(t, dir / "a.pgm");
  const Tile2D r = read_tile(dir / "a.pgm");
  CHECK(r == t);
  CHECK(r.pixel_pitch_um == 1.34);
  CHECK(r.world_offset_um[0] == 750.0);
}

TEST_CASE("random tiles round trip bit-exactly") {
  const auto dir = test::scratch("imgcore_tile_random");
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> px(0, 65535), ext(1, 40);
  std::uniform_real_distribution<double> off(-1e4, 1e4);
  for (int n = 0; n < 20; ++n) {
    Tile2D t(ext(rng), ext(rng), static_cast<Channel>(n % 3));
    for (auto& v : t.pixels) v = static_cast<std::uint16_t>(px(rng));
    t.world_offset_um = {off(rng), off(rng), off(rng)};
    t.pixel_pitch_um = 0.1 + std::abs(off(rng)) / 1e3;
    t.index = n;
    write_tile(t, dir / "t.pgm");
    CHECK(read_tile(dir / "t.pgm") == t);
  }
}

TEST_CASE("short tile payload is a dimension mismatch") {
  const auto dir = test::scratch("imgcore_tile_short");
  write_tile(Tile2D(16, 16, Channel::CR, 7), dir / "a.pgm");
  truncate_file(dir / "a.pgm", 2);
  CHECK_THROWS_AS(read_tile(dir / "a.pgm"), FormatError);
}

TEST_CASE("unknown channel tag in the sidecar is rejected") {
  const auto dir = test::scratch("imgcore_tile_channel");
  write_tile(Tile2D(4, 4, Channel::CR, 7), dir / "a.pgm");
  std::ofstream(dir / "a.meta") << "channel=CX\noffset_um=0 0 0\npitch_um=1\nindex=0\n";
  CHECK_THROWS_AS(read_tile(dir / "a.pgm"), FormatError);
}

TEST_CASE("stack round trip for every storage type") {
  const auto dir = test::scratch("imgcore_stack");
  Stack3D zeros({4, 4, 4}, {50.0, 50.0, 50.0});
  write_stack(zeros, dir / "z", StorageType::U16);
  const Stack3D r = read_stack(dir / "z");
  CHECK(r == zeros);
  CHECK(r.voxel_um == std::array<double, 3>{50.0, 50.0, 50.0});

  std::mt19937_64 rng(2);
  Stack3D s = test::random_stack({5, 3, 2}, rng, 0.0, 1000.0);
  s.channel = Channel::CB;
  write_stack(s, dir / "d", StorageType::F64);
  CHECK(read_stack(dir / "d") == s);

  for (double& v : s.data) v = static_cast<float>(v);
  write_stack(s, dir / "f", StorageType::F32);
  CHECK(read_stack(dir / "f") == s);

  for (double& v : s.data) v = std::round(v);
  write_stack(s, dir / "u", StorageType::U16);
  CHECK(read_stack(dir / "u") == s);
}

TEST_CASE("truncated stack payload throws") {
  const auto dir = test::scratch("imgcore_stack_trunc");
  write_stack(Stack3D({4, 4, 4}, {1, 1, 1}), dir / "z", StorageType::F32);
  truncate_file(dir / "z.raw", 4);
  CHECK_THROWS_AS(read_stack(dir / "z"), FormatError);
}

TEST_CASE("stack prefix accepts either file name") {
  CHECK(stack_prefix("a/b.hdr") == std::filesystem::path("a/b"));
  CHECK(stack_prefix("a/b.raw") == std::filesystem::path("a/b"));
  CHECK(stack_prefix("a/b") == std::filesystem::path("a/b"));
}

TEST_CASE("downsample: mean of four values") {
  Stack3D s({2, 2, 1}, {1, 1, 1});
  s.data = {1, 3, 5, 7};
  const Stack3D d = downsample_stack(s, {2, 2, 1});
  REQUIRE(d.dims == std::array<int, 3>{1, 1, 1});
  CHECK(d.data[0] == 4.0);
}

TEST_CASE("downsample: constant stays constant at any ratio") {
  Stack3D s({9, 7, 5}, {1, 1, 1}, Channel::None, 3.5);
  for (double r : {1.5, 2.0, 3.0, 4.5}) {
    const Stack3D d = downsample_stack(s, {r, r, r});
    for (double v : d.data) CHECK(v == doctest::Approx(3.5).epsilon(1e-15));
  }
}

TEST_CASE("downsample equals the block-mean oracle at integer ratios") {
  std::mt19937_64 rng(11);
  for (int n = 0; n < 10; ++n) {
    const Stack3D s = test::random_stack({8, 8, 2}, rng, 0.0, 100.0);
    const Stack3D d = downsample_stack(s, {2, 2, 1});
    const Stack3D o = block_mean(s, {2, 2, 1});
    REQUIRE(d.dims == o.dims);
    for (std::size_t i = 0; i < d.size(); ++i) CHECK(d.data[i] == o.data[i]);
    double sum_s = 0, sum_d = 0;
    for (double v : s.data) sum_s += v;
    for (double v : d.data) sum_d += v * 4;
    CHECK(sum_d == doctest::Approx(sum_s).epsilon(1e-12));
  }
}

TEST_CASE("downsample refuses finer target voxels") {
  CHECK_THROWS_AS(downsample_stack(Stack3D({2, 2, 2}, {2, 2, 2}), {1, 2, 2}), InvalidArgument);
}

TEST_CASE("blur: delta gives the kernel, weights sum to 1") {
  Image d(41, 41, 0.0);
  d(20, 20) = 1.0;
  const Image b = gaussian_blur(d, 2.0);
  double sum = 0;
  for (double v : b.data) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  const auto k = gaussian_kernel(2.0);
  CHECK(k.size() == 17u);
  for (int y = -8; y <= 8; ++y)
    for (int x = -8; x <= 8; ++x) CHECK(b(20 + x, 20 + y) == doctest::Approx(k[x + 8] * k[y + 8]).epsilon(1e-12));
}

TEST_CASE("blur: constant image is unchanged") {
  const Image c(23, 17, 42.0);
  for (double v : gaussian_blur(c, 3.3).data) CHECK(v == doctest::Approx(42.0).epsilon(1e-12));
}

TEST_CASE("blur: 1D impulse matches closed-form normalized Gaussian") {
  Image d(61, 1, 0.0);
  d(30, 0) = 1.0;
  const Image b = gaussian_blur(d, 3.0);
  // Along y the extent is 1, so mirror padding folds the whole kernel back onto the row.
  double norm = 0.0;
  for (int x = -12; x <= 12; ++x) norm += std::exp(-x * x / 18.0);
  for (int x = -12; x <= 12; ++x) CHECK(std::abs(b(30 + x, 0) - std::exp(-x * x / 18.0) / norm) < 1e-9);
  CHECK(b(30 + 13, 0) == 0.0);
}

TEST_CASE("blur rejects non-positive sigma") {
  CHECK_THROWS_AS(gaussian_blur(Image(4, 4), 0.0), InvalidArgument);
  CHECK_THROWS_AS(gaussian_blur_um(Stack3D({2, 2, 2}, {1, 1, 1}), -1.0), InvalidArgument);
}

TEST_CASE("blur is linear") {
  std::mt19937_64 rng(3);
  for (int n = 0; n < 5; ++n) {
    const Image X = test::random_image(30, 25, rng), Y = test::random_image(30, 25, rng);
    Image Z(30, 25);
    for (std::size_t i = 0; i < Z.size(); ++i) Z.data[i] = 2.5 * X.data[i] - 0.7 * Y.data[i];
    const Image bx = gaussian_blur(X, 1.7), by = gaussian_blur(Y, 1.7), bz = gaussian_blur(Z, 1.7);
    for (std::size_t i = 0; i < Z.size(); ++i) CHECK(std::abs(bz.data[i] - (2.5 * bx.data[i] - 0.7 * by.data[i])) < 1e-9);
  }
}

TEST_CASE("blur is shift covariant away from the border") {
  std::mt19937_64 rng(4);
  const Image X = test::random_image(80, 60, rng);
  const int k = 5;
  Image S(80, 60);
  for (int y = 0; y < 60; ++y)
    for (int x = 0; x < 80; ++x) S(x, y) = X(mirror_index(x - k, 80), y);
  const Image bx = gaussian_blur(X, 2.0), bs = gaussian_blur(S, 2.0);
  for (int y = 10; y < 50; ++y)
    for (int x = 20; x < 60; ++x) CHECK(std::abs(bs(x, y) - bx(x - k, y)) < 1e-9);
}

TEST_CASE("3D blur conserves the sum of an interior blob") {
  Stack3D s({40, 40, 40}, {50, 50, 50});
  s(20, 20, 20) = 1000.0;
  s(18, 22, 19) = 500.0;
  const Stack3D b = gaussian_blur_um(s, 150.0);
  double sum = 0;
  for (double v : b.data) sum += v;
  CHECK(sum == doctest::Approx(1500.0).epsilon(1e-6));
}

TEST_CASE("mirror index reflects half-sample symmetric") {
  CHECK(mirror_index(-1, 5) == 0);
  CHECK(mirror_index(-2, 5) == 1);
  CHECK(mirror_index(5, 5) == 4);
  CHECK(mirror_index(6, 5) == 3);
  CHECK(mirror_index(-7, 3) == 0);
}
