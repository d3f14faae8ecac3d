#pragma once

// Implicit ODE integration g(y, y', t) = 0 by a fixed-leading-coefficient,
// variable-order (1..5), variable-step BDF method. Nonlinear systems are
// solved by modified Newton with matrix-free GMRES driven by the problem's
// Jacobian-vector product.

#include <functional>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace rbc::ode {

using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// GMRES

struct GmresResult {
  Vector x;
  int iterations = 0;
  double residual_norm = 0.0;  // true residual |b - A x|
  bool converged = false;
};

using LinearOperator = std::function<Vector(const Vector&)>;

// Restarted GMRES(m) with modified Gram-Schmidt and Givens rotations.
// Stops when |b - A x| <= tol * |b| (2-norm). Never throws on
// non-convergence; check `converged`.
GmresResult gmres(const LinearOperator& apply, const Vector& rhs, double tol,
                  int restart = 40, int max_iterations = 400,
                  const Vector* x0 = nullptr);

// ---------------------------------------------------------------------------
// BDF coefficients

struct BdfCoefficients {
  double leading = 0.0;          // y'_n ~ leading * y_n + sum_j history[j] * y_{n-1-j}
  std::vector<double> history;   // k entries
};

// Variable-step BDF differentiation weights of order k from the step sizes
// h_n, h_{n-1}, ..., h_{n-k+1} (most recent first). Exact for polynomials of
// degree <= k.
BdfCoefficients bdf_coefficients(int order, const std::vector<double>& steps);

// ---------------------------------------------------------------------------
// Problem interface

// Thrown by callbacks when the state cannot be evaluated (for example a
// folded surface); the integrator treats it as a failed Newton iteration
// and retries with a smaller step.
class RecoverableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IntegrationFailure : public std::runtime_error {
 public:
  IntegrationFailure(const std::string& what, double t, double h)
      : std::runtime_error(what), t(t), h(h) {}
  double t;
  double h;
};

class IodeProblem {
 public:
  virtual ~IodeProblem() = default;
  virtual std::size_t size() const = 0;
  virtual Vector residual(const Vector& y, const Vector& yp, double t) = 0;
  // Called before a series of jvp calls; the linearization point stays
  // fixed until the next setup (modified Newton).
  virtual void setup(const Vector& y, const Vector& yp, double t) {
    (void)y;
    (void)yp;
    (void)t;
  }
  // D1 g . dy + lambda D2 g . dyp, at the point of the last setup.
  virtual Vector jvp(const Vector& dy, const Vector& dyp, double lambda) = 0;
};

// Adapter for problems given as plain callbacks. The jvp callback receives
// the linearization point explicitly.
class CallbackProblem : public IodeProblem {
 public:
  using ResidualFn = std::function<Vector(const Vector&, const Vector&, double)>;
  using JvpFn = std::function<Vector(const Vector&, const Vector&, double,
                                     const Vector&, const Vector&, double)>;

  CallbackProblem(std::size_t n, ResidualFn residual, JvpFn jvp)
      : n_(n), residual_(std::move(residual)), jvp_(std::move(jvp)) {}

  std::size_t size() const override { return n_; }
  Vector residual(const Vector& y, const Vector& yp, double t) override {
    return residual_(y, yp, t);
  }
  void setup(const Vector& y, const Vector& yp, double t) override {
    y_ = y;
    yp_ = yp;
    t_ = t;
  }
  Vector jvp(const Vector& dy, const Vector& dyp, double lambda) override {
    return jvp_(y_, yp_, t_, dy, dyp, lambda);
  }

 private:
  std::size_t n_;
  ResidualFn residual_;
  JvpFn jvp_;
  Vector y_, yp_;
  double t_ = 0.0;
};

// ---------------------------------------------------------------------------
// Integrator

struct Tolerances {
  double rtol = 1e-4;
  double atol = 1e-6;
  double h_max = 0.1;
  double t_end = 1.0;
  double h_init = 0.0;  // <= 0: min(h_max, 1e-4)
  int max_order = 5;
  int max_krylov = 10;         // Krylov vectors per Newton iteration
  int max_newton = 4;
  int max_error_failures = 10;
  int max_convergence_failures = 10;

  void validate() const;
};

struct SolverStats {
  long steps = 0;
  long residual_evals = 0;
  long jvp_evals = 0;
  long setups = 0;
  long newton_iters = 0;
  long linear_iters = 0;
  long error_test_failures = 0;
  long newton_failures = 0;
};

struct StepInfo {
  double t = 0.0;
  double h = 0.0;     // size of the step just taken
  int order = 0;      // order used for the step just taken
  const SolverStats* stats = nullptr;
  const Vector* y = nullptr;
  const Vector* yp = nullptr;
};

using Observer = std::function<void(const StepInfo&)>;

class BdfIntegrator {
 public:
  static constexpr int max_order_limit = 5;

  BdfIntegrator(IodeProblem& problem, const Tolerances& tol);

  // Consistent initial values (g(y0, yp0, t0) ~ 0).
  void initialize(double t0, const Vector& y0, const Vector& yp0);

  // One accepted step; throws IntegrationFailure after repeated failures.
  void step();

  // Steps until t >= t_end (the last step is clipped to land on t_end).
  void integrate(const Observer& observer = {});

  double t() const { return t_; }
  double h() const { return h_; }
  double last_step() const { return h_used_; }
  int order() const { return k_used_; }
  int next_order() const { return k_; }
  const Vector& y() const { return y_; }
  const Vector& yp() const { return yp_; }
  const SolverStats& stats() const { return stats_; }
  const Tolerances& tolerances() const { return tol_; }

  // Binary checkpoint of the full integrator state.
  void save(std::ostream& os) const;
  void load(std::istream& is);

 private:
  enum class Outcome { ok, convergence_failure, error_failure };

  void set_coefficients();
  void predict();
  Outcome newton();
  Outcome error_test();
  void restore();
  void complete_step();
  void compute_weights();
  double wrms(const Vector& v) const;
  bool solve_linear(const Vector& res, bool first_iteration, Vector& delta);

  IodeProblem& problem_;
  Tolerances tol_;
  SolverStats stats_;

  std::size_t n_ = 0;
  bool initialized_ = false;
  double t_ = 0.0;
  double h_ = 0.0;        // step size for the next attempt
  double h_used_ = 0.0;
  int k_ = 1;             // order for the next attempt
  int k_used_ = 0;
  int k_new_ = 1;         // order suggested by the error test
  int ns_ = 0;            // steps taken at constant h and k
  int phase_ = 0;         // 0 while ramping up order and step
  double cj_ = 0.0, cj_last_ = 0.0, cj_setup_ = 0.0;
  double ss_ = 20.0, old_nrm_ = 0.0;
  double eps_newton_ = 0.33;
  bool setup_current_ = false;
  bool need_setup_ = true;

  std::vector<Vector> phi_;  // modified divided differences
  double psi_[max_order_limit + 2] = {};
  double alpha_[max_order_limit + 2] = {};
  double beta_[max_order_limit + 2] = {};
  double sigma_[max_order_limit + 2] = {};
  double gamma_[max_order_limit + 2] = {};
  double ck_ = 0.0;

  Vector y_, yp_, ewt_, ee_;
  double err_k_ = 0.0, err_km1_ = 0.0, err_km2_ = 0.0;
};

}  // namespace rbc::ode
