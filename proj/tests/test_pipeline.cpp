#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "marmo/evalsynth.hpp"
#include "marmo/injsite.hpp"
#include "marmo/mapping.hpp"
#include "marmo/pipeline.hpp"
#include "support.hpp"

using namespace marmo;
namespace fs = std::filesystem;

namespace {

PhantomSpec toy_spec() {
  PhantomSpec s;
  s.seed = 1;
  s.sections = 6;
  s.vignette_corner = 1.0;
  s.noise = false;
  return s;
}

// One rendered toy phantom shared by the tests in this file.
const fs::path& toy_dir() {
  static const fs::path dir = [] {
    const auto d = test::scratch("pipeline_toy");
    write_phantom(generate_phantom(toy_spec()), d);
    return d;
  }();
  return dir;
}

PipelineConfig toy_config(const std::string& run) {
  PipelineConfig c;
  c.tiles = toy_dir() / "tiles";
  c.atlas = toy_dir() / "truth" / "atlas";
  c.out = test::scratch(run);
  c.brain_id = "phantom-1";
  c.injection_id = "inj0";
  return c;
}

std::string status_of(const RunReport& r, const std::string& stage) {
  for (const auto& s : r.stages)
    if (s.name == stage) return s.status;
  return "missing";
}

bool has_issue(const std::vector<ConfigIssue>& issues, const std::string& key) {
  for (const auto& i : issues)
    if (i.key == key) return true;
  return false;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MARMOPIPE_EXE) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config parsing reports each problem with its key") {
  PipelineConfig c;
  auto issues = parse_config("threads=2\n# note\n\nhi=50\nlo=100\n", c);
  CHECK(issues.empty());
  CHECK(c.threads == 2);
  CHECK(has_issue(check_config(c), "hi"));

  issues = parse_config("treshold=3\n", c);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].key == "treshold");
  issues = parse_config("tracer_backnd=unet\n", c);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].constraint.find("tracer_backend") != std::string::npos);
  CHECK(suggest_key("close_radus") == "close_radius");
  CHECK(suggest_key("zzzzzzzzzzzz").empty());

  CHECK_FALSE(parse_config("threads=zero\n", c).empty());
  CHECK_FALSE(parse_config("no equals sign\n", c).empty());
}

TEST_CASE("config round trip through the text format") {
  PipelineConfig c = toy_config("pipeline_fmt");
  c.hi = 250;
  c.hessian_sigmas = {2.0, 3.5};
  c.normalize = true;
  PipelineConfig back;
  CHECK(parse_config(format_config(c), back).empty());
  CHECK(format_config(back) == format_config(c));
}

TEST_CASE("missing paths and models are caught before any stage runs") {
  PipelineConfig c = toy_config("pipeline_missing");
  c.tiles = c.out / "nope";
  CHECK(has_issue(check_config(c), "tiles"));
  c = toy_config("pipeline_missing");
  c.tracer_backend = "unet";
  CHECK(has_issue(check_config(c), "tracer_model"));
  c.tracer_model = c.out / "absent.model";
  CHECK(has_issue(check_config(c), "tracer_model"));
  CHECK_THROWS_AS(run_pipeline(c), InvalidArgument);
  CHECK_FALSE(fs::exists(c.out / outputs::report));
}

TEST_CASE("config files resolve relative paths against their directory") {
  const auto dir = test::scratch("pipeline_relative");
  std::ofstream(dir / "run.conf") << "tiles=" << (toy_dir() / "tiles").string() << "\natlas=" << (toy_dir() / "truth" / "atlas").string()
                                  << "\nout=run\n";
  PipelineConfig c;
  CHECK(validate_config(dir / "run.conf", &c).empty());
  CHECK(c.out == dir / "run");
  CHECK_THROWS_AS(validate_config(dir / "absent.conf"), Error);
}

TEST_CASE("end to end on the toy phantom reproduces the ground-truth table") {
  const PipelineConfig c = toy_config("pipeline_e2e");
  const RunReport r = run_pipeline(c);
  REQUIRE(r.ok());
  REQUIRE(r.stages.size() == 5);
  for (const auto& s : r.stages) CHECK(s.status == "ok");

  const auto table = read_connectivity(c.out / outputs::connectivity);
  const auto truth = read_connectivity(toy_dir() / "truth" / "connectivity.txt");
  CHECK(table.src == truth.src);
  REQUIRE(table.tgt.size() == truth.tgt.size());
  for (const auto& [id, v] : truth.tgt) CHECK(table.tgt.at(id) == doctest::Approx(v).epsilon(1e-9));

  // Conservation: regions plus outside add up to the mapped signal.
  const Stack3D L = read_stack(c.out / outputs::mapped_signal);
  const RegionSums sums = projection_strengths(L, load_atlas(c.atlas), false);
  double total = 0.0, regions = 0.0;
  for (double v : L.data) total += v;
  for (const auto& [id, v] : table.tgt) regions += v;
  CHECK(regions + sums.outside == doctest::Approx(total).epsilon(1e-9));

  const auto same_places = [](const CellPointCloud& a, const CellPointCloud& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].x != b[i].x || a[i].y != b[i].y || a[i].z != b[i].z) return false;
    return true;
  };
  CHECK(same_places(read_cells(c.out / outputs::cells), read_truth_cells(toy_dir())));

  SUBCASE("a second run skips every stage and leaves outputs alone") {
    const auto before = fs::last_write_time(c.out / outputs::connectivity);
    const RunReport again = run_pipeline(c);
    for (const auto& s : again.stages) CHECK(s.status == "skip");
    CHECK(fs::last_write_time(c.out / outputs::connectivity) == before);
  }
  SUBCASE("changing a tracer parameter reruns only what depends on it") {
    PipelineConfig d = c;
    d.hi = 280;
    const RunReport again = run_pipeline(d);
    CHECK(status_of(again, "stitch") == "skip");
    CHECK(status_of(again, "locate") == "skip");
    CHECK(status_of(again, "tracer") == "ok");
  }
  SUBCASE("an input newer than the outputs reruns the stage") {
    const auto later = fs::last_write_time(c.out / outputs::connectivity) + std::chrono::seconds(5);
    for (const auto& e : fs::directory_iterator(c.out))
      if (e.path().filename().string().rfind(outputs::stitched_cb, 0) == 0) fs::last_write_time(e.path(), later);
    const RunReport again = run_pipeline(c);
    CHECK(status_of(again, "stitch") == "skip");
    CHECK(status_of(again, "locate") == "ok");
  }
  SUBCASE("a deleted output reruns its stage") {
    fs::remove(c.out / outputs::cells);
    const RunReport again = run_pipeline(c);
    CHECK(status_of(again, "stitch") == "skip");
    CHECK(status_of(again, "locate") == "ok");
    CHECK(same_places(read_cells(c.out / outputs::cells), read_truth_cells(toy_dir())));
  }
}

TEST_CASE("a failing stage stops the run and is reported") {
  PipelineConfig c = toy_config("pipeline_fail");
  const auto tiles = test::scratch("pipeline_fail_tiles");
  for (const auto& e : fs::directory_iterator(toy_dir() / "tiles"))
    if (e.path().filename().string().find("_CB") == std::string::npos) fs::copy(e.path(), tiles / e.path().filename());
  c.tiles = tiles;
  const RunReport r = run_pipeline(c);
  CHECK_FALSE(r.ok());
  REQUIRE(r.stages.size() == 1);
  CHECK(r.stages[0].status == "fail");
  CHECK(r.stages[0].error.find("CB") != std::string::npos);
  CHECK(fs::exists(c.out / outputs::report));
}

TEST_CASE("command-line exit codes") {
  const auto dir = test::scratch("pipeline_cli");
  CHECK(run_cli("phantom --out " + (dir / "ph").string() + " --seed 3") == 0);
  CHECK(fs::exists(dir / "ph" / "truth" / "cells.txt"));
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("run") == 1);

  std::ofstream(dir / "bad.conf") << "tiles=" << (toy_dir() / "tiles").string() << "\natlas=" << (toy_dir() / "truth" / "atlas").string()
                                  << "\nout=out\nhi=10\nlo=20\n";
  CHECK(run_cli("run --config " + (dir / "bad.conf").string()) == 1);

  std::ofstream(dir / "good.conf") << "tiles=" << (toy_dir() / "tiles").string()
                                   << "\natlas=" << (toy_dir() / "truth" / "atlas").string() << "\nout=out\n";
  CHECK(run_cli("run --check --config " + (dir / "good.conf").string()) == 0);

  // Tiles without C_B fail inside the stitch stage: a runtime error.
  const auto tiles = dir / "partial";
  fs::create_directories(tiles);
  for (const auto& e : fs::directory_iterator(toy_dir() / "tiles"))
    if (e.path().filename().string().find("_CB") == std::string::npos) fs::copy(e.path(), tiles / e.path().filename());
  std::ofstream(dir / "runtime.conf") << "tiles=partial\natlas=" << (toy_dir() / "truth" / "atlas").string()
                                      << "\nout=out2\n";
  CHECK(run_cli("run --config " + (dir / "runtime.conf").string()) == 2);
}
