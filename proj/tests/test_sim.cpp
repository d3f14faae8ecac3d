#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <cstring>
#include <fstream>
#include <sstream>

#include "rbc/sim.hpp"

using namespace rbc;
using namespace rbc::sim;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("rbc_test_sim_" + name);
  std::filesystem::remove_all(p);
  return p;
}

Settings parse(const std::string& text) {
  std::istringstream in(text);
  return parse_settings(in);
}

}  // namespace

TEST_CASE("settings parser") {
  const Settings s = parse("# comment\n  degree = 12  \n\nflow=b # trailing\nout = run one\n");
  REQUIRE(s.size() == 3);
  CHECK(s[0] == std::pair<std::string, std::string>{"degree", "12"});
  CHECK(s[1].second == "b");
  CHECK(s[2].second == "run one");
  CHECK_THROWS_AS(parse("degree 12\n"), ConfigError);
  CHECK_THROWS_AS(parse(" = 3\n"), ConfigError);
}

TEST_CASE("case defaults and overrides") {
  const SimulationConfig a = build_config({});
  CHECK(a.flow == "a");
  CHECK(a.shear_rate == 1.0);
  CHECK(a.tilt_deg == 45.0);

  const SimulationConfig b = build_config(parse("degree = 16\nflow = b\n"));
  CHECK(b.shear_rate == 5.0);
  CHECK(b.degree == 16);
  CHECK(b.max_step == 0.05);

  const SimulationConfig c = build_config(parse("flow = c"));
  CHECK(c.parabolic_a == 1.0);
  CHECK(c.parabolic_b == 2.3);
  CHECK(ambient_flow(c).kind == bie::AmbientFlow::Kind::parabolic);

  const SimulationConfig d = build_config(parse("flow = d"));
  CHECK(ambient_flow(d).kind == bie::AmbientFlow::Kind::quiescent);
  CHECK(d.tilt_deg == 0.0);

  // Explicit values win over case defaults regardless of position.
  CHECK(build_config(parse("shear_rate = 2\nflow = b")).shear_rate == 2.0);
  CHECK(problem_config(build_config(parse("shell_padding = 2\ndegree = 10"))).shell_degree == 20);
  CHECK(problem_config(build_config(parse("shell_padding = 1"))).shell_degree == 0);
  CHECK(problem_config(build_config({})).shell_degree == 24);
}

TEST_CASE("configuration errors") {
  CHECK_THROWS_AS(build_config(parse("viscosity = 2")), ConfigError);
  CHECK_THROWS_AS(build_config(parse("flow = poiseuille")), ConfigError);
  CHECK_THROWS_AS(build_config(parse("degree = 3")), ConfigError);
  CHECK_THROWS_AS(build_config(parse("degree = eight")), ConfigError);
  CHECK_THROWS_AS(build_config(parse("rtol = -1")), ConfigError);
  CHECK_THROWS_AS(build_config(parse("E_D = 1")), ConfigError);
  CHECK_THROWS_AS(build_config(parse("mode = rk4")), ConfigError);
  CHECK_THROWS_AS(build_config(parse("units = cgs")), ConfigError);
  CHECK_THROWS_AS(build_config(parse("shell_padding = 0")), ConfigError);
  CHECK_THROWS_AS(read_settings("/nonexistent/rbc.cfg"), ConfigError);
  for (const std::string& k : config_keys()) CHECK_FALSE(k.empty());
}

TEST_CASE("physical units map onto the nondimensional defaults") {
  const SimulationConfig nd = build_config(parse("flow = c"));
  const SimulationConfig ph = build_config(parse(
      "units = physical\nflow = c\n"
      "shear_rate = 100\n"          // 1/s
      "parabolic_a = 35.4609929\n"  // 1/(um s)
      "parabolic_b = 18.29052\n"    // um^2
      "E_S = 4.19616e-6\n"          // N/m
      "E_D = 6.768e-5\n"
      "E_B = 1.8003412e-19\n"          // N m
      "mu = 1.2e-3\n"               // Pa s
      "alpha = 3.90852\n"           // um
      "t_end = 0.05\n"              // s
      "max_step = 0.0015\n"));
  auto close = [](double a, double b, double tol) { return std::abs(a - b) <= tol * std::abs(b); };
  CHECK(close(ph.shear_rate, 1.0, 1e-10));
  CHECK(close(ph.parabolic_a, nd.parabolic_a, 1e-8));
  CHECK(close(ph.parabolic_b, nd.parabolic_b, 1e-6));
  CHECK(close(ph.E_S, 12.4, 1e-5));
  CHECK(close(ph.E_D, 200.0, 1e-5));
  CHECK(close(ph.E_B, 0.0669, 1e-4));
  CHECK(close(ph.mu, 1.0, 1e-10));
  CHECK(close(ph.alpha, 1.386, 1e-5));
  CHECK(close(ph.t_end, 5.0, 1e-10));
  CHECK(close(ph.max_step, nd.max_step, 1e-10));
  // Dimensionless keys are untouched.
  CHECK(build_config(parse("units = physical\nlambda = 5\nrtol = 1e-3")).rtol == 1e-3);
}

TEST_CASE("snapshot round trip is bit exact") {
  const auto dir = scratch("snap");
  std::filesystem::create_directories(dir);
  Snapshot s;
  s.degree = 6;
  s.t = 0.1 + 0.2;
  const int n = 3 * sph::coeff_count(6);
  s.x = Vector::Random(n);
  s.u = Vector::Random(n);
  s.x(0) = 1e-310;  // subnormal
  write_snapshot(dir / "s.bin", s);
  const Snapshot r = read_snapshot(dir / "s.bin");
  CHECK(r.degree == 6);
  CHECK(std::memcmp(&r.t, &s.t, sizeof(double)) == 0);
  CHECK(std::memcmp(r.x.data(), s.x.data(), sizeof(double) * n) == 0);
  CHECK(std::memcmp(r.u.data(), s.u.data(), sizeof(double) * n) == 0);
  CHECK(std::filesystem::file_size(dir / "s.bin") == 8 + 4 + 4 + 8 + 16 * std::size_t(n));

  std::ofstream(dir / "junk.bin") << "not a snapshot at all";
  CHECK_THROWS_AS(read_snapshot(dir / "junk.bin"), IoError);
  CHECK_THROWS_AS(read_snapshot(dir / "missing.bin"), IoError);
  {
    std::ifstream in(dir / "s.bin", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 8);
  }
  CHECK_THROWS_AS(read_snapshot(dir / "short.bin"), IoError);
  s.u.resize(3);
  CHECK_THROWS(write_snapshot(dir / "bad.bin", s));
  std::filesystem::remove_all(dir);
}

TEST_CASE("principal stress norm") {
  const int N = 8;
  const sph::Transform t(sph::build_grid(N));
  const sph::CartesianCoeffs ref = geom::biconcave_coeffs(1.386, t);
  const shell::MaterialParams mat;
  const shell::Mechanics mech(ref, N, mat);

  SUBCASE("stress free at the reference") {
    const auto s = principal_stress_norm(mech, mech.load(ref));
    for (double v : s) CHECK(std::abs(v) < 1e-9);
  }
  SUBCASE("uniform dilation gives an isotropic tension") {
    const double k = 1.05;
    sph::CartesianCoeffs x = ref;
    for (auto& c : x)
      for (double& v : c.values) v *= k;
    // C = k^2 I, n = (E_S + (2 E_D ln k - E_S) / k^2) I, tau = n P.
    const double nu = mat.E_S + (2.0 * mat.E_D * std::log(k) - mat.E_S) / (k * k);
    const auto s = principal_stress_norm(mech, mech.load(x));
    for (double v : s) CHECK(v == doctest::Approx(std::sqrt(2.0) * nu).epsilon(1e-8));
  }
  SUBCASE("rigid rotation leaves it unchanged") {
    const sph::CartesianCoeffs x0 = geom::rotate(ref, geom::axis_rotation('x', 0.3));
    sph::CartesianCoeffs x = x0;
    for (auto& c : x) c(2, 0) += 0.05;
    const auto s0 = principal_stress_norm(mech, mech.load(x));
    const auto s1 = principal_stress_norm(
        mech, mech.load(geom::rotate(x, geom::axis_rotation('z', 1.1))));
    REQUIRE(s0.size() == s1.size());
    for (std::size_t i = 0; i < s0.size(); ++i) CHECK(s1[i] == doctest::Approx(s0[i]).epsilon(1e-8));
  }
}

TEST_CASE("quiescent run stays at rest") {
  const auto dir = scratch("rest");
  SimulationConfig cfg = build_config(parse("flow = quiescent\ndegree = 6\nt_end = 0.5\n"
                                            "snapshot_interval = 0.2\nout = " +
                                            dir.string()));
  const RunResult r = run(cfg);
  REQUIRE(r.exit_code == 0);
  CHECK(r.t == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(r.u.lpNorm<Eigen::Infinity>() < 1e-8);
  for (const StepRecord& s : r.steps) {
    CHECK(std::abs(s.diag.area_change) < 1e-10);
    CHECK(std::abs(s.diag.volume_error) < 1e-10);
  }

  CHECK(std::filesystem::exists(dir / "metadata.json"));
  CHECK(std::filesystem::exists(dir / "solver_stats.csv"));
  CHECK(std::filesystem::exists(dir / "last.bin"));
  CHECK(std::filesystem::exists(dir / "checkpoint.bin"));
  CHECK(std::filesystem::exists(dir / "snapshot_0000.bin"));
  CHECK(std::filesystem::exists(dir / "snapshot_0002.bin"));

  std::ifstream csv(dir / "diagnostics.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line.rfind("t,area,volume,", 0) == 0);
  double prev = -1.0;
  int rows = 0;
  while (std::getline(csv, line)) {
    const double t = std::stod(line.substr(0, line.find(',')));
    CHECK(t > prev);
    prev = t;
    ++rows;
  }
  CHECK(rows == static_cast<int>(r.steps.size()));
  CHECK(prev == doctest::Approx(0.5));
  std::filesystem::remove_all(dir);
}

TEST_CASE("short shear run conserves area and balances forces") {
  SimulationConfig cfg = build_config(parse("flow = a\ndegree = 6\nt_end = 0.3\n"));
  RunOptions opts;
  opts.write_files = false;
  int seen = 0;
  opts.on_step = [&](const StepRecord&) { ++seen; };
  const RunResult r = run(cfg, opts);
  REQUIRE(r.exit_code == 0);
  CHECK(seen == static_cast<int>(r.steps.size()));
  const Diagnostics& d = r.steps.back().diag;
  CHECK(std::abs(d.area_change) < 1e-2);
  CHECK(std::abs(d.volume_error) < 1e-2);
  CHECK(d.max_stress > 0.0);
  CHECK(r.stats.steps > 0);
  CHECK(r.steps.back().order >= 1);
}

TEST_CASE("explicit mode takes fixed forward Euler steps") {
  SimulationConfig cfg = build_config(
      parse("flow = a\ndegree = 6\nt_end = 0.05\nmode = explicit\nexplicit_step = 0.01\n"));
  RunOptions opts;
  opts.write_files = false;
  const RunResult r = run(cfg, opts);
  REQUIRE(r.exit_code == 0);
  CHECK(r.steps.size() == 6);
  CHECK(r.t == doctest::Approx(0.05));
  for (std::size_t i = 1; i < r.steps.size(); ++i) CHECK(r.steps[i].h == doctest::Approx(0.01));
  CHECK(r.explicit_step == 0.01);
}
