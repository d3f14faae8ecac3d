#include "rbc/sim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>

#include <Eigen/QR>
#include <json.hpp>

namespace rbc::sim {

namespace {

constexpr double pi = std::numbers::pi;
constexpr char snapshot_magic[8] = {'R', 'B', 'C', 'S', 'N', 'A', 'P', '\0'};
constexpr std::uint32_t snapshot_version = 1;

static_assert(std::endian::native == std::endian::little,
              "snapshot I/O assumes a little-endian host");

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long i = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(i);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  }
}

// Factor taking a physical value of the key to nondimensional units, or 0
// for dimensionless keys.
double physical_factor(const std::string& key) {
  const double a = Scales::length;
  if (key == "shear_rate") return 1.0 / Scales::rate;
  if (key == "parabolic_a") return Scales::length_um / Scales::rate;  // 1/(um s)
  if (key == "parabolic_b") return 1.0 / (Scales::length_um * Scales::length_um);  // um^2
  if (key == "E_S" || key == "E_D") return 1.0 / (Scales::stress * a);             // N/m
  if (key == "E_B") return 1.0 / (Scales::stress * a * a * a);                     // N m
  if (key == "mu") return 1.0 / Scales::viscosity;                                 // Pa s
  if (key == "alpha") return 1.0 / Scales::length_um;                              // um
  if (key == "max_step" || key == "t_end" || key == "snapshot_interval" ||
      key == "prerun_time" || key == "explicit_step") {
    return Scales::rate;  // s
  }
  return 0.0;
}

void apply_setting(SimulationConfig& c, const std::string& key, const std::string& value,
                   bool physical) {
  auto num = [&](double& field) {
    double v = to_double(key, value);
    if (physical) {
      const double f = physical_factor(key);
      if (f != 0.0) v *= f;
    }
    field = v;
  };
  if (key == "flow") c.flow = value;
  else if (key == "degree") c.degree = to_int(key, value);
  else if (key == "shear_rate") num(c.shear_rate);
  else if (key == "parabolic_a") num(c.parabolic_a);
  else if (key == "parabolic_b") num(c.parabolic_b);
  else if (key == "E_S") num(c.E_S);
  else if (key == "E_D") num(c.E_D);
  else if (key == "E_B") num(c.E_B);
  else if (key == "lambda") num(c.lambda);
  else if (key == "mu") num(c.mu);
  else if (key == "alpha") num(c.alpha);
  else if (key == "rtol") num(c.rtol);
  else if (key == "atol") num(c.atol);
  else if (key == "max_step") num(c.max_step);
  else if (key == "t_end") num(c.t_end);
  else if (key == "mode") c.mode = value;
  else if (key == "out") c.out = value;
  else if (key == "tilt_deg") num(c.tilt_deg);
  else if (key == "tilt_axis") {
    if (value.size() != 1) throw ConfigError("tilt_axis must be x, y or z");
    c.tilt_axis = value[0];
  } else if (key == "quad_degree") c.quad_degree = to_int(key, value);
  else if (key == "shell_padding") c.shell_padding = to_int(key, value);
  else if (key == "threads") c.threads = to_int(key, value);
  else if (key == "snapshot_interval") num(c.snapshot_interval);
  else if (key == "initial_snapshot") c.initial_snapshot = value;
  else if (key == "prerun_time") num(c.prerun_time);
  else if (key == "explicit_step") num(c.explicit_step);
  else if (key == "velocity_tol") num(c.velocity_tol);
  else if (key == "units") c.units = value;
  else throw ConfigError("unknown configuration key '" + key + "'");
}

sph::CartesianCoeffs resized(const Vector& v, int from, int to) {
  return sph::resize(bie::unpack(v, from), to);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void log_line(std::ostream* log, const std::string& s) {
  if (log) *log << s << '\n' << std::flush;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void SimulationConfig::validate() const {
  static const std::vector<std::string> flows = {"a",     "b",         "c",        "d",
                                                  "shear", "parabolic", "quiescent"};
  if (std::find(flows.begin(), flows.end(), flow) == flows.end()) {
    throw ConfigError("unknown flow '" + flow + "'");
  }
  if (degree < 4) throw ConfigError("degree must be at least 4");
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(E_S, "E_S");
  positive(E_D, "E_D");
  positive(E_B, "E_B");
  positive(lambda, "lambda");
  positive(mu, "mu");
  positive(alpha, "alpha");
  positive(rtol, "rtol");
  positive(atol, "atol");
  positive(max_step, "max_step");
  positive(t_end, "t_end");
  positive(snapshot_interval, "snapshot_interval");
  positive(prerun_time, "prerun_time");
  if (!(shear_rate >= 0.0)) throw ConfigError("shear_rate must be non-negative");
  if (!(parabolic_a >= 0.0)) throw ConfigError("parabolic_a must be non-negative");
  if (!(explicit_step >= 0.0)) throw ConfigError("explicit_step must be non-negative");
  if (!(velocity_tol > 0.0 && velocity_tol < 1.0)) {
    throw ConfigError("velocity_tol must be in (0, 1)");
  }
  if (E_D < E_S) throw ConfigError("E_D must be at least E_S");
  if (mode != "implicit" && mode != "explicit") {
    throw ConfigError("mode must be implicit or explicit");
  }
  if (tilt_axis != 'x' && tilt_axis != 'y' && tilt_axis != 'z') {
    throw ConfigError("tilt_axis must be x, y or z");
  }
  if (quad_degree != 0 && quad_degree < degree) {
    throw ConfigError("quad_degree must be 0 or at least degree");
  }
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (shell_padding < 1 || shell_padding > 8) throw ConfigError("shell_padding must be in 1..8");
  if (units != "nondimensional" && units != "physical") {
    throw ConfigError("units must be nondimensional or physical");
  }
  if (out.empty()) throw ConfigError("out must not be empty");
}

SimulationConfig case_config(const std::string& flow) {
  SimulationConfig c;
  c.flow = flow;
  if (flow == "a") {
    c.shear_rate = 1.0;
    c.max_step = 0.1;
  } else if (flow == "b") {
    c.shear_rate = 5.0;
    c.max_step = 0.05;
  } else if (flow == "c") {
    c.parabolic_a = 1.0;
    c.parabolic_b = 2.3;
    c.max_step = 0.15;
  } else if (flow == "d") {
    c.tilt_deg = 0.0;
    c.max_step = 0.1;
  } else if (flow == "quiescent") {
    c.tilt_deg = 0.0;
  } else if (flow != "shear" && flow != "parabolic") {
    throw ConfigError("unknown flow '" + flow + "'");
  }
  return c;
}

Settings parse_settings(std::istream& in) {
  Settings out;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(number) + ": empty key");
    out.emplace_back(key, value);
  }
  return out;
}

Settings read_settings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  return parse_settings(in);
}

std::vector<std::string> config_keys() {
  return {"flow",      "degree",       "shear_rate",       "parabolic_a",  "parabolic_b",
          "E_S",       "E_D",          "E_B",              "lambda",       "mu",
          "alpha",     "rtol",         "atol",             "max_step",     "t_end",
          "mode",      "out",          "tilt_deg",         "tilt_axis",    "quad_degree",
          "shell_padding", "threads",      "snapshot_interval", "initial_snapshot",
          "prerun_time", "explicit_step", "velocity_tol",   "units"};
}

SimulationConfig build_config(const Settings& settings) {
  const std::vector<std::string> keys = config_keys();
  std::string flow = "a", units = "nondimensional";
  for (const auto& [k, v] : settings) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw ConfigError("unknown configuration key '" + k + "'");
    }
    if (k == "flow") flow = v;
    if (k == "units") units = v;
  }
  SimulationConfig c = case_config(flow);
  c.units = units;
  if (units != "nondimensional" && units != "physical") {
    throw ConfigError("units must be nondimensional or physical");
  }
  const bool physical = units == "physical";
  for (const auto& [k, v] : settings) {
    if (k == "flow" || k == "units") continue;
    apply_setting(c, k, v, physical);
  }
  c.validate();
  return c;
}

bie::AmbientFlow ambient_flow(const SimulationConfig& cfg) {
  if (cfg.flow == "a" || cfg.flow == "b" || cfg.flow == "shear") {
    return bie::AmbientFlow::shear(cfg.shear_rate);
  }
  if (cfg.flow == "c" || cfg.flow == "parabolic") {
    return bie::AmbientFlow::parabolic(cfg.parabolic_a, cfg.parabolic_b);
  }
  return bie::AmbientFlow::quiescent();
}

bie::ProblemConfig problem_config(const SimulationConfig& cfg) {
  bie::ProblemConfig p;
  p.degree = cfg.degree;
  p.fluid.mu = cfg.mu;
  p.fluid.lambda = cfg.lambda;
  p.flow = ambient_flow(cfg);
  p.material.E_S = cfg.E_S;
  p.material.E_D = cfg.E_D;
  p.material.E_B = cfg.E_B;
  p.quad_degree = cfg.quad_degree;
  p.shell_degree = cfg.shell_padding > 1 ? cfg.shell_padding * cfg.degree : 0;
  p.threads = cfg.threads;
  return p;
}

// ---------------------------------------------------------------------------
// Integrator adapter

namespace {

template <class F>
auto recoverable(F&& f) {
  try {
    return f();
  } catch (const geom::DegenerateSurface& e) {
    throw ode::RecoverableError(e.what());
  } catch (const shell::InvalidDeformation& e) {
    throw ode::RecoverableError(e.what());
  } catch (const bie::SingularEvaluation& e) {
    throw ode::RecoverableError(e.what());
  }
}

}  // namespace

Vector CellProblem::residual(const Vector& y, const Vector& yp, double t) {
  return recoverable([&] { return problem_.residual(y, yp, t); });
}

void CellProblem::setup(const Vector& y, const Vector& yp, double t) {
  recoverable([&] {
    problem_.linearize(y, yp, t);
    return 0;
  });
}

Vector CellProblem::jvp(const Vector& dy, const Vector& dyp, double lambda) {
  return recoverable([&] { return problem_.jvp(dy, dyp, lambda); });
}

// ---------------------------------------------------------------------------
// Snapshots

void write_snapshot(const std::filesystem::path& path, const Snapshot& s) {
  const std::size_t n = 3 * static_cast<std::size_t>(sph::coeff_count(s.degree));
  if (static_cast<std::size_t>(s.x.size()) != n || static_cast<std::size_t>(s.u.size()) != n) {
    throw std::invalid_argument("snapshot arrays do not match the degree");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write snapshot " + path.string());
  const std::int32_t degree = s.degree;
  out.write(snapshot_magic, sizeof snapshot_magic);
  out.write(reinterpret_cast<const char*>(&snapshot_version), sizeof snapshot_version);
  out.write(reinterpret_cast<const char*>(&degree), sizeof degree);
  out.write(reinterpret_cast<const char*>(&s.t), sizeof s.t);
  out.write(reinterpret_cast<const char*>(s.x.data()), sizeof(double) * n);
  out.write(reinterpret_cast<const char*>(s.u.data()), sizeof(double) * n);
  if (!out) throw IoError("failed writing snapshot " + path.string());
}

Snapshot read_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read snapshot " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::int32_t degree = 0;
  Snapshot s;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&degree), sizeof degree);
  in.read(reinterpret_cast<char*>(&s.t), sizeof s.t);
  if (!in || !std::equal(magic, magic + 8, snapshot_magic)) {
    throw IoError("not a snapshot file: " + path.string());
  }
  if (version != snapshot_version) throw IoError("unsupported snapshot version");
  if (degree < 1 || degree > 1000) throw IoError("corrupt snapshot degree");
  s.degree = degree;
  const std::size_t n = 3 * static_cast<std::size_t>(sph::coeff_count(degree));
  s.x.resize(n);
  s.u.resize(n);
  in.read(reinterpret_cast<char*>(s.x.data()), sizeof(double) * n);
  in.read(reinterpret_cast<char*>(s.u.data()), sizeof(double) * n);
  if (!in) throw IoError("truncated snapshot " + path.string());
  return s;
}

// ---------------------------------------------------------------------------
// Diagnostics

std::vector<double> principal_stress_norm(const shell::Mechanics& mech,
                                          const shell::MembraneLoad& load) {
  const geom::ReferenceSurface& ref = mech.reference();
  const geom::SurfaceState& cur = load.current;
  std::vector<double> out(cur.size());
  for (std::size_t p = 0; p < cur.size(); ++p) {
    const geom::Mat32& g = cur.grad[p];
    const geom::Mat3 tau = (ref.jacobian[p] / cur.jacobian[p]) * g *
                           shell::inverse2(ref.a[p]) * load.tension[p] * g.transpose();
    const Eigen::HouseholderQR<geom::Mat32> qr(g);
    const geom::Mat32 e = qr.householderQ() * geom::Mat32::Identity();
    const geom::Mat2 s = e.transpose() * tau * e;
    out[p] = (0.5 * (s + s.transpose())).norm();
  }
  return out;
}

Monitor::Monitor(const bie::BoundaryProblem& problem, const Vector& x0) : problem_(problem) {
  const geom::SurfaceState s =
      geom::surface_state(bie::unpack(x0, problem.degree()), problem.transform());
  area0_ = geom::area(s, problem.transform().grid());
  volume0_ = geom::volume(s, problem.transform().grid());
}

Diagnostics Monitor::measure(const Vector& xv, double t) const {
  const sph::Transform& tr = problem_.transform();
  const sph::Grid& g = tr.grid();
  const sph::CartesianCoeffs x = bie::unpack(xv, problem_.degree());
  Diagnostics d;
  d.t = t;
  const geom::SurfaceState s = geom::surface_state(x, tr);
  d.area = geom::area(s, g);
  d.volume = geom::volume(s, g);
  d.area_change = d.area / area0_ - 1.0;
  d.volume_error = d.volume / volume0_ - 1.0;

  const shell::MembraneLoad load = problem_.mechanics().load(x);
  const sph::CartesianSamples f = tr.synthesize(load.force);
  for (int i = 0; i < g.n_lat; ++i)
    for (int j = 0; j < g.n_lon; ++j) {
      const std::size_t p = g.index(i, j);
      const Vec3 fp(f[0][p], f[1][p], f[2][p]);
      d.force += g.area_weight(i) * fp;
      d.moment += g.area_weight(i) * s.x[p].cross(fp);
      d.force_scale = std::max(d.force_scale, fp.norm());
    }
  const std::vector<double> stress = principal_stress_norm(problem_.mechanics(), load);
  d.max_stress = *std::max_element(stress.begin(), stress.end());
  return d;
}

// ---------------------------------------------------------------------------
// Output files

namespace {

class Outputs {
 public:
  Outputs(const SimulationConfig& cfg, bool enabled) : cfg_(cfg), enabled_(enabled) {
    if (!enabled_) return;
    dir_ = cfg.out;
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory " + dir_.string());
    diag_.open(dir_ / "diagnostics.csv");
    stats_.open(dir_ / "solver_stats.csv");
    if (!diag_ || !stats_) throw IoError("cannot open output files in " + dir_.string());
    diag_ << "t,area,volume,area_change,volume_error,fx,fy,fz,mx,my,mz,max_stress,h,order,"
             "nres,njvp,newton_iters\n";
    stats_ << "t,h,order,steps,nres,njvp,setups,newton_iters,linear_iters,"
              "error_test_failures,newton_failures,gmres_iters\n";
  }

  bool enabled() const { return enabled_; }
  const std::filesystem::path& dir() const { return dir_; }

  void record(const StepRecord& r) {
    if (!enabled_) return;
    const Diagnostics& d = r.diag;
    const ode::SolverStats& s = r.stats;
    diag_ << fmt(d.t) << ',' << fmt(d.area) << ',' << fmt(d.volume) << ','
          << fmt(d.area_change) << ',' << fmt(d.volume_error) << ',' << fmt(d.force.x()) << ','
          << fmt(d.force.y()) << ',' << fmt(d.force.z()) << ',' << fmt(d.moment.x()) << ','
          << fmt(d.moment.y()) << ',' << fmt(d.moment.z()) << ',' << fmt(d.max_stress) << ','
          << fmt(r.h) << ',' << r.order << ',' << s.residual_evals << ',' << s.jvp_evals << ','
          << s.newton_iters << '\n';
    stats_ << fmt(d.t) << ',' << fmt(r.h) << ',' << r.order << ',' << s.steps << ','
           << s.residual_evals << ',' << s.jvp_evals << ',' << s.setups << ','
           << s.newton_iters << ',' << s.linear_iters << ',' << s.error_test_failures << ','
           << s.newton_failures << ',' << r.gmres_iterations << '\n';
    diag_.flush();
    stats_.flush();
    if (!diag_ || !stats_) throw IoError("failed writing diagnostics");
  }

  // Snapshot at every crossing of a multiple of the interval.
  void maybe_snapshot(double t, const Vector& x, const Vector& u) {
    if (!enabled_) return;
    if (t + 1e-12 < next_snapshot_time_) return;
    write(dir_ / snapshot_name(index_++), t, x, u);
    while (next_snapshot_time_ <= t + 1e-12) next_snapshot_time_ += cfg_.snapshot_interval;
  }

  void write(const std::filesystem::path& path, double t, const Vector& x, const Vector& u) {
    if (!enabled_) return;
    write_snapshot(path, Snapshot{cfg_.degree, t, x, u});
  }

  void metadata(const RunResult& r, const std::string& status) {
    if (!enabled_) return;
    nlohmann::json j;
    nlohmann::json c;
    c["flow"] = cfg_.flow;
    c["degree"] = cfg_.degree;
    c["shear_rate"] = cfg_.shear_rate;
    c["parabolic_a"] = cfg_.parabolic_a;
    c["parabolic_b"] = cfg_.parabolic_b;
    c["E_S"] = cfg_.E_S;
    c["E_D"] = cfg_.E_D;
    c["E_B"] = cfg_.E_B;
    c["lambda"] = cfg_.lambda;
    c["mu"] = cfg_.mu;
    c["alpha"] = cfg_.alpha;
    c["rtol"] = cfg_.rtol;
    c["atol"] = cfg_.atol;
    c["max_step"] = cfg_.max_step;
    c["t_end"] = cfg_.t_end;
    c["mode"] = cfg_.mode;
    c["tilt_deg"] = cfg_.tilt_deg;
    c["tilt_axis"] = std::string(1, cfg_.tilt_axis);
    c["quad_degree"] = cfg_.quad_degree > 0 ? cfg_.quad_degree : sph::default_quad_degree(cfg_.degree);
    c["shell_padding"] = cfg_.shell_padding;
    c["threads"] = cfg_.threads;
    c["snapshot_interval"] = cfg_.snapshot_interval;
    c["initial_snapshot"] = cfg_.initial_snapshot;
    c["prerun_time"] = cfg_.prerun_time;
    c["explicit_step"] = cfg_.explicit_step;
    c["velocity_tol"] = cfg_.velocity_tol;
    c["units_given"] = cfg_.units;
    j["config"] = c;
    j["units"] = {{"length_m", Scales::length},
                  {"time_s", 1.0 / Scales::rate},
                  {"stress_Pa", Scales::stress},
                  {"note", "all stored values are nondimensional"}};
    j["max_stress"] =
        "Frobenius norm of the symmetrized in-plane tension (J_ref/J) grad(x) A^-1 n grad(x)^T "
        "in an orthonormal tangent frame, maximized over the shell grid";
    j["status"] = status;
    j["t_reached"] = r.t;
    j["steps"] = r.steps.empty() ? 0 : static_cast<long>(r.steps.size() - 1);
    j["solver"] = {{"steps", r.stats.steps},
                   {"residual_evals", r.stats.residual_evals},
                   {"jvp_evals", r.stats.jvp_evals},
                   {"setups", r.stats.setups},
                   {"newton_iters", r.stats.newton_iters},
                   {"linear_iters", r.stats.linear_iters},
                   {"error_test_failures", r.stats.error_test_failures},
                   {"newton_failures", r.stats.newton_failures}};
    if (r.explicit_step > 0.0) j["explicit_step"] = r.explicit_step;
    std::ofstream out(dir_ / "metadata.json");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing metadata.json");
  }

 private:
  static std::string snapshot_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "snapshot_%04d.bin", i);
    return buf;
  }

  const SimulationConfig& cfg_;
  bool enabled_;
  std::filesystem::path dir_;
  std::ofstream diag_, stats_;
  double next_snapshot_time_ = 0.0;
  int index_ = 0;
};

}  // namespace

// ---------------------------------------------------------------------------
// Runs

InitialState initial_state(const SimulationConfig& cfg, const RunOptions& opts) {
  const sph::Transform t(sph::build_grid(cfg.degree));
  InitialState s;
  s.reference = geom::biconcave_coeffs(cfg.alpha, t);
  if (cfg.flow != "d") {
    const geom::Mat3 r = geom::axis_rotation(cfg.tilt_axis, cfg.tilt_deg * pi / 180.0);
    s.x0 = bie::pack(geom::rotate(s.reference, r));
    return s;
  }
  if (!cfg.initial_snapshot.empty()) {
    const Snapshot snap = read_snapshot(cfg.initial_snapshot);
    s.x0 = bie::pack(resized(snap.x, snap.degree, cfg.degree));
    return s;
  }
  // Deformed starting shape: case b run for prerun_time.
  SimulationConfig pre = cfg;
  const SimulationConfig b = case_config("b");
  pre.flow = "b";
  pre.shear_rate = b.shear_rate;
  pre.max_step = b.max_step;
  pre.tilt_deg = b.tilt_deg;
  pre.t_end = cfg.prerun_time;
  pre.mode = "implicit";
  RunOptions quiet;
  quiet.write_files = false;
  quiet.log = opts.log;
  log_line(opts.log, "pre-running case b to t = " + fmt(cfg.prerun_time));
  const RunResult r = run(pre, quiet);
  if (r.exit_code != 0) {
    throw ode::IntegrationFailure("pre-run for the relaxation case failed: " + r.message, r.t,
                                  0.0);
  }
  s.x0 = r.x;
  if (opts.write_files) {
    std::filesystem::create_directories(cfg.out);
    write_snapshot(std::filesystem::path(cfg.out) / "initial_snapshot.bin",
                   Snapshot{cfg.degree, r.t, r.x, r.u});
  }
  return s;
}

namespace {

RunResult run_implicit(const SimulationConfig& cfg, const RunOptions& opts,
                       const InitialState& init, bie::BoundaryProblem& problem,
                       Outputs& outputs) {
  RunResult result;
  const bie::VelocitySolve v0 = problem.solve_velocity(init.x0, 0.0, cfg.velocity_tol);
  CellProblem cell(problem);
  ode::Tolerances tol;
  tol.rtol = cfg.rtol;
  tol.atol = cfg.atol;
  tol.h_max = cfg.max_step;
  tol.t_end = cfg.t_end;
  ode::BdfIntegrator integrator(cell, tol);
  integrator.initialize(0.0, init.x0, v0.u);
  const Monitor monitor(problem, init.x0);

  auto emit = [&](const StepRecord& rec, const Vector& x, const Vector& u) {
    result.steps.push_back(rec);
    outputs.record(rec);
    outputs.maybe_snapshot(rec.diag.t, x, u);
    if (opts.on_step) opts.on_step(rec);
  };
  StepRecord first;
  first.diag = monitor.measure(init.x0, 0.0);
  emit(first, init.x0, v0.u);

  auto finish = [&] {
    result.stats = integrator.stats();
    result.x = integrator.y();
    result.u = integrator.yp();
    result.t = integrator.t();
  };
  try {
    integrator.integrate([&](const ode::StepInfo& info) {
      StepRecord rec;
      rec.diag = monitor.measure(*info.y, info.t);
      rec.h = info.h;
      rec.order = info.order;
      rec.stats = *info.stats;
      emit(rec, *info.y, *info.yp);
      if (opts.log && info.stats->steps % 10 == 0) {
        *opts.log << "t=" << info.t << " h=" << info.h << " order=" << info.order
                  << " nres=" << info.stats->residual_evals
                  << " njvp=" << info.stats->jvp_evals << '\n'
                  << std::flush;
      }
    });
  } catch (const ode::IntegrationFailure& e) {
    finish();
    result.exit_code = 3;
    result.message = e.what();
  }
  finish();
  if (outputs.enabled()) {
    outputs.write(outputs.dir() / "last.bin", result.t, result.x, result.u);
    std::ofstream ck(outputs.dir() / "checkpoint.bin", std::ios::binary);
    integrator.save(ck);
    if (!ck) throw IoError("failed writing checkpoint.bin");
  }
  return result;
}

RunResult run_explicit(const SimulationConfig& cfg, const RunOptions& opts,
                       const InitialState& init, bie::BoundaryProblem& problem,
                       Outputs& outputs) {
  RunResult result;
  double h = cfg.explicit_step;
  if (h <= 0.0) {
    ScanOptions so;
    so.log = opts.log;
    h = 0.9 * stability_scan(cfg, so).h_stable;
    log_line(opts.log, "explicit step from stability scan: " + fmt(h));
  }
  result.explicit_step = h;
  const Monitor monitor(problem, init.x0);
  Vector x = init.x0;
  double t = 0.0;
  long gmres = 0;
  ode::SolverStats stats;
  bie::VelocitySolve v;
  Vector guess;
  auto solve = [&] {
    v = problem.solve_velocity(x, t, cfg.velocity_tol, 40, 400, guess.size() ? &guess : nullptr);
    guess = v.u;
    gmres += v.iterations;
    stats.residual_evals += 1;
  };

  auto emit = [&](double step) {
    StepRecord rec;
    rec.diag = monitor.measure(x, t);
    rec.h = step;
    rec.order = step > 0.0 ? 1 : 0;
    rec.stats = stats;
    rec.gmres_iterations = gmres;
    result.steps.push_back(rec);
    outputs.record(rec);
    outputs.maybe_snapshot(t, x, v.u);
    if (opts.on_step) opts.on_step(rec);
  };

  try {
    solve();
    emit(0.0);
    const double stop = cfg.t_end * (1.0 - 1e-12);
    while (t < stop) {
      const double step = std::min(h, cfg.t_end - t);
      x += step * v.u;
      t += step;
      ++stats.steps;
      solve();
      emit(step);
    }
  } catch (const bie::LinearSolveFailure& e) {
    result.exit_code = 3;
    result.message = e.what();
  } catch (const geom::DegenerateSurface& e) {
    result.exit_code = 3;
    result.message = e.what();
  } catch (const shell::InvalidDeformation& e) {
    result.exit_code = 3;
    result.message = e.what();
  }
  result.stats = stats;
  result.x = x;
  result.u = v.u.size() ? v.u : Vector::Zero(x.size());
  result.t = t;
  if (outputs.enabled()) outputs.write(outputs.dir() / "last.bin", t, result.x, result.u);
  return result;
}

}  // namespace

RunResult run(const SimulationConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const InitialState init = initial_state(cfg, opts);
  bie::BoundaryProblem problem(init.reference, problem_config(cfg));
  Outputs outputs(cfg, opts.write_files);
  RunResult r;
  try {
    r = cfg.mode == "explicit" ? run_explicit(cfg, opts, init, problem, outputs)
                               : run_implicit(cfg, opts, init, problem, outputs);
  } catch (const bie::LinearSolveFailure& e) {
    r.exit_code = 3;
    r.message = e.what();
  }
  outputs.metadata(r, r.exit_code == 0 ? "completed" : "failed: " + r.message);
  return r;
}

// ---------------------------------------------------------------------------
// Explicit stability

bool explicit_trial(const bie::BoundaryProblem& problem, const Vector& x0, double h,
                    const ScanOptions& opts, double velocity_tol) {
  const sph::Transform& tr = problem.transform();
  const int n = problem.degree();
  auto area = [&](const Vector& x) {
    return geom::area(geom::surface_state(bie::unpack(x, n), tr), tr.grid());
  };
  const double extent0 = x0.lpNorm<Eigen::Infinity>();
  const double area0 = area(x0);
  Vector x = x0;
  Vector guess;
  try {
    for (int step = 0; step < opts.steps; ++step) {
      const bie::VelocitySolve v = problem.solve_velocity(x, step * h, velocity_tol, 40, 400,
                                                          guess.size() ? &guess : nullptr);
      guess = v.u;
      x += h * v.u;
      if (!x.allFinite()) return false;
      if (x.lpNorm<Eigen::Infinity>() >= opts.growth_limit * extent0) return false;
      if (std::abs(area(x) / area0 - 1.0) >= opts.area_limit) return false;
    }
  } catch (const geom::DegenerateSurface&) {
    return false;
  } catch (const shell::InvalidDeformation&) {
    return false;
  } catch (const bie::LinearSolveFailure&) {
    return false;
  }
  return true;
}

ScanResult stability_scan(const SimulationConfig& cfg, const ScanOptions& opts) {
  cfg.validate();
  const InitialState init = initial_state(cfg, RunOptions{false, opts.log, {}});
  const bie::BoundaryProblem problem(init.reference, problem_config(cfg));

  // Seeded noise so that every mode starts above round-off.
  Vector x0 = init.x0;
  std::mt19937 gen(12345);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (Eigen::Index i = 0; i < x0.size(); ++i) x0(i) += opts.perturbation * nd(gen);

  ScanResult r;
  auto trial = [&](double h) {
    ++r.trials;
    const bool ok = explicit_trial(problem, x0, h, opts, cfg.velocity_tol);
    log_line(opts.log, "stability trial h=" + fmt(h) + (ok ? " stable" : " unstable"));
    return ok;
  };
  double h = opts.initial_guess > 0.0 ? opts.initial_guess : 0.1 / cfg.degree;
  double lo = 0.0, hi = 0.0;
  if (trial(h)) {
    lo = h;
    for (hi = 2.0 * h; trial(hi); hi *= 2.0) {
      lo = hi;
      if (hi > 10.0) break;
    }
  } else {
    hi = h;
    for (lo = 0.5 * h; !trial(lo); lo *= 0.5) {
      hi = lo;
      if (lo < 1e-8) throw ode::IntegrationFailure("no stable explicit step found", 0.0, lo);
    }
  }
  while (hi / lo > opts.resolution) {
    const double mid = std::sqrt(lo * hi);
    if (trial(mid)) lo = mid;
    else hi = mid;
  }
  r.h_stable = lo;
  r.h_unstable = hi;
  return r;
}

}  // namespace rbc::sim
