#pragma once

// Simulation driver: configuration, the four flow cases, diagnostics,
// snapshots, implicit and explicit runs, and the explicit stability scan.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rbc/bie.hpp"
#include "rbc/ode.hpp"

namespace rbc::sim {

using Vector = Eigen::VectorXd;
using geom::Vec3;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Characteristic scales: length a, time 1/k0, stress mu0 k0.
struct Scales {
  static constexpr double length = 2.82e-6;     // m
  static constexpr double length_um = 2.82;     // um
  static constexpr double rate = 100.0;         // 1/s
  static constexpr double viscosity = 1.2e-3;   // Pa s
  static constexpr double stress = viscosity * rate;
};

struct SimulationConfig {
  std::string flow = "a";  // a | b | c | d | shear | parabolic | quiescent
  int degree = 8;
  double shear_rate = 1.0;
  double parabolic_a = 1.0;
  double parabolic_b = 2.3;
  double E_S = 12.4;
  double E_D = 200.0;
  double E_B = 0.0669;
  double lambda = 5.0;
  double mu = 1.0;
  double alpha = 1.386;
  double rtol = 1e-4;
  double atol = 1e-6;
  double max_step = 0.1;
  double t_end = 5.0;
  std::string mode = "implicit";  // implicit | explicit
  std::string out = "out";
  double tilt_deg = 45.0;
  char tilt_axis = 'y';
  int quad_degree = 0;   // 0: 3 * degree
  int shell_padding = 3;  // shell mechanics on a grid of degree shell_padding * N
  int threads = 1;
  double snapshot_interval = 0.5;
  std::string initial_snapshot;  // case d; empty: pre-run case b
  double prerun_time = 1.0;
  double explicit_step = 0.0;    // 0: use the stability scan
  double velocity_tol = 1e-6;
  std::string units = "nondimensional";  // nondimensional | physical

  void validate() const;
};

// Defaults of the named cases a-d (and of the plain flow kinds).
SimulationConfig case_config(const std::string& flow);

using Settings = std::vector<std::pair<std::string, std::string>>;

// Flat "key = value" text; '#' starts a comment.
Settings parse_settings(std::istream& in);
Settings read_settings(const std::filesystem::path& path);

// Case defaults from the last `flow` setting, then every other key in
// order. With units = physical, explicitly given dimensional values are
// converted to the nondimensional system. Unknown keys are errors.
SimulationConfig build_config(const Settings& settings);

std::vector<std::string> config_keys();

bie::AmbientFlow ambient_flow(const SimulationConfig& cfg);
bie::ProblemConfig problem_config(const SimulationConfig& cfg);

// The boundary problem as an implicit ODE g(x, x', t) = 0. Geometric and
// constitutive failures become recoverable integrator errors.
class CellProblem : public ode::IodeProblem {
 public:
  explicit CellProblem(bie::BoundaryProblem& problem) : problem_(problem) {}
  std::size_t size() const override { return problem_.size(); }
  Vector residual(const Vector& y, const Vector& yp, double t) override;
  void setup(const Vector& y, const Vector& yp, double t) override;
  Vector jvp(const Vector& dy, const Vector& dyp, double lambda) override;

 private:
  bie::BoundaryProblem& problem_;
};

// ---------------------------------------------------------------------------
// Snapshots

struct Snapshot {
  int degree = 0;
  double t = 0.0;
  Vector x;  // 3 (N+1)^2 configuration coefficients
  Vector u;  // 3 (N+1)^2 velocity coefficients
};

void write_snapshot(const std::filesystem::path& path, const Snapshot& s);
Snapshot read_snapshot(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Diagnostics

// Frobenius norm of the in-plane tension (J_ref / J) grad x A^-1 n grad x^T
// expressed in an orthonormal tangent frame, per shell grid point.
std::vector<double> principal_stress_norm(const shell::Mechanics& mech,
                                          const shell::MembraneLoad& load);

struct Diagnostics {
  double t = 0.0;
  double area = 0.0;
  double volume = 0.0;
  double area_change = 0.0;   // relative to the initial state
  double volume_error = 0.0;  // relative to the initial state
  Vec3 force = Vec3::Zero();  // net membrane force
  Vec3 moment = Vec3::Zero(); // net membrane moment about the origin
  double force_scale = 0.0;   // max pointwise |f|
  double max_stress = 0.0;
};

class Monitor {
 public:
  Monitor(const bie::BoundaryProblem& problem, const Vector& x0);
  Diagnostics measure(const Vector& x, double t) const;

 private:
  const bie::BoundaryProblem& problem_;
  double area0_ = 0.0;
  double volume0_ = 0.0;
};

struct StepRecord {
  Diagnostics diag;
  double h = 0.0;
  int order = 0;
  ode::SolverStats stats;  // cumulative
  long gmres_iterations = 0;  // cumulative, explicit mode
};

// ---------------------------------------------------------------------------
// Runs

struct RunOptions {
  bool write_files = true;
  std::ostream* log = nullptr;
  std::function<void(const StepRecord&)> on_step;
};

struct RunResult {
  int exit_code = 0;  // 0 success, 3 integration failure
  std::string message;
  std::vector<StepRecord> steps;  // first entry is the initial state
  ode::SolverStats stats;
  Vector x, u;
  double t = 0.0;
  double explicit_step = 0.0;
};

// Initial configuration of a case (tilted reference shape, or the
// pre-deformed shape for relaxation) and the stress-free reference.
struct InitialState {
  sph::CartesianCoeffs reference;
  Vector x0;
};
InitialState initial_state(const SimulationConfig& cfg, const RunOptions& opts = {});

RunResult run(const SimulationConfig& cfg, const RunOptions& opts = {});

struct ScanOptions {
  int steps = 50;
  double growth_limit = 10.0;     // max |coefficient| relative to the initial state
  double area_limit = 0.10;     // relative area change
  double resolution = 1.1;      // bracket ratio at which bisection stops
  double perturbation = 1e-6;   // seeded noise exciting every mode
  double initial_guess = 0.0;   // <= 0: 0.1 / N
  std::ostream* log = nullptr;
};

struct ScanResult {
  double h_stable = 0.0;
  double h_unstable = 0.0;
  int trials = 0;
};

// Largest forward-Euler step keeping a short run bounded, by bisection.
ScanResult stability_scan(const SimulationConfig& cfg, const ScanOptions& opts = {});

// One short forward-Euler run; true when it stays bounded.
bool explicit_trial(const bie::BoundaryProblem& problem, const Vector& x0, double h,
                    const ScanOptions& opts, double velocity_tol);

}  // namespace rbc::sim
