#include "rbc/ode.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>

#include <Eigen/Dense>

namespace rbc::ode {

// ---------------------------------------------------------------------------
// GMRES

GmresResult gmres(const LinearOperator& apply, const Vector& rhs, double tol,
                  int restart, int max_iterations, const Vector* x0) {
  const Eigen::Index n = rhs.size();
  GmresResult out;
  out.x = x0 ? *x0 : Vector::Zero(n);
  const double bnorm = rhs.norm();
  if (bnorm == 0.0) {
    out.x.setZero();
    out.converged = true;
    return out;
  }
  const double target = tol * bnorm;
  restart = std::max(1, restart);

  Vector r = x0 ? Vector(rhs - apply(out.x)) : rhs;
  double beta = r.norm();
  out.residual_norm = beta;
  if (beta <= target) {
    out.converged = true;
    return out;
  }

  Eigen::MatrixXd v(n, restart + 1);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(restart + 1, restart);
  Vector cs(restart), sn(restart), g(restart + 1);

  while (out.iterations < max_iterations) {
    v.col(0) = r / beta;
    g.setZero();
    g(0) = beta;
    h.setZero();
    int j = 0;
    double est = beta;
    for (; j < restart && out.iterations < max_iterations; ++j) {
      Vector w = apply(v.col(j));
      ++out.iterations;
      for (int i = 0; i <= j; ++i) {
        h(i, j) = w.dot(v.col(i));
        w -= h(i, j) * v.col(i);
      }
      h(j + 1, j) = w.norm();
      if (h(j + 1, j) > 0.0) v.col(j + 1) = w / h(j + 1, j);
      for (int i = 0; i < j; ++i) {
        const double t = cs(i) * h(i, j) + sn(i) * h(i + 1, j);
        h(i + 1, j) = -sn(i) * h(i, j) + cs(i) * h(i + 1, j);
        h(i, j) = t;
      }
      const double d = std::hypot(h(j, j), h(j + 1, j));
      if (d == 0.0) {
        cs(j) = 1.0;
        sn(j) = 0.0;
      } else {
        cs(j) = h(j, j) / d;
        sn(j) = h(j + 1, j) / d;
      }
      h(j, j) = d;
      h(j + 1, j) = 0.0;
      g(j + 1) = -sn(j) * g(j);
      g(j) = cs(j) * g(j);
      est = std::abs(g(j + 1));
      if (est <= target || d == 0.0) {
        ++j;
        break;
      }
    }
    const Vector y = h.topLeftCorner(j, j).triangularView<Eigen::Upper>().solve(g.head(j));
    out.x += v.leftCols(j) * y;
    r = rhs - apply(out.x);
    beta = r.norm();
    out.residual_norm = beta;
    if (beta <= target) {
      out.converged = true;
      return out;
    }
    // The estimate said converged but the true residual disagrees: the
    // loss of orthogonality is beyond repair by restarting.
    if (est <= target && beta > 10.0 * target) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// BDF coefficients

BdfCoefficients bdf_coefficients(int order, const std::vector<double>& steps) {
  if (order < 1 || order > BdfIntegrator::max_order_limit) {
    throw std::invalid_argument("BDF order must be in 1..5");
  }
  if (static_cast<int>(steps.size()) < order) {
    throw std::invalid_argument("BDF coefficients need one step size per order");
  }
  // Nodes tau_0 = 0 > tau_1 > ... > tau_k; weights are L_j'(0) for the
  // Lagrange basis on these nodes.
  std::vector<double> tau(order + 1, 0.0);
  for (int j = 1; j <= order; ++j) {
    if (!(steps[j - 1] > 0.0)) throw std::invalid_argument("step sizes must be positive");
    tau[j] = tau[j - 1] - steps[j - 1];
  }
  BdfCoefficients c;
  c.history.assign(order, 0.0);
  for (int j = 0; j <= order; ++j) {
    double w;
    if (j == 0) {
      w = 0.0;
      for (int m = 1; m <= order; ++m) w += 1.0 / (tau[0] - tau[m]);
    } else {
      double num = 1.0, den = 1.0;
      for (int m = 0; m <= order; ++m) {
        if (m == j) continue;
        den *= tau[j] - tau[m];
        if (m != 0) num *= tau[0] - tau[m];
      }
      w = num / den;
    }
    if (j == 0) c.leading = w;
    else c.history[j - 1] = w;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Integrator

void Tolerances::validate() const {
  if (!(rtol > 0.0) || !(atol > 0.0)) throw std::invalid_argument("tolerances must be positive");
  if (!(h_max > 0.0)) throw std::invalid_argument("max_step must be positive");
  if (!(t_end > 0.0)) throw std::invalid_argument("t_end must be positive");
  if (max_order < 1 || max_order > BdfIntegrator::max_order_limit) {
    throw std::invalid_argument("max_order must be in 1..5");
  }
  if (max_krylov < 1 || max_newton < 1 || max_error_failures < 1 ||
      max_convergence_failures < 1) {
    throw std::invalid_argument("solver iteration limits must be positive");
  }
}

BdfIntegrator::BdfIntegrator(IodeProblem& problem, const Tolerances& tol)
    : problem_(problem), tol_(tol) {
  tol_.validate();
  n_ = problem_.size();
}

void BdfIntegrator::initialize(double t0, const Vector& y0, const Vector& yp0) {
  if (static_cast<std::size_t>(y0.size()) != n_ || static_cast<std::size_t>(yp0.size()) != n_) {
    throw std::invalid_argument("initial state has the wrong size");
  }
  t_ = t0;
  y_ = y0;
  yp_ = yp0;
  h_ = tol_.h_init > 0.0 ? tol_.h_init : 1e-4;
  h_ = std::min(h_, tol_.h_max);
  phi_.assign(max_order_limit + 2, Vector::Zero(n_));
  phi_[0] = y0;
  phi_[1] = h_ * yp0;
  k_ = 1;
  k_used_ = 0;
  h_used_ = 0.0;
  psi_[0] = h_;
  cj_ = 1.0 / h_;
  cj_last_ = cj_;
  phase_ = 0;
  ns_ = 0;
  ss_ = 20.0;
  need_setup_ = true;
  setup_current_ = false;
  ee_ = Vector::Zero(n_);
  stats_ = SolverStats{};
  initialized_ = true;
}

void BdfIntegrator::compute_weights() {
  ewt_ = (tol_.rtol * y_.cwiseAbs().array() + tol_.atol).inverse().matrix();
}

double BdfIntegrator::wrms(const Vector& v) const {
  return std::sqrt(v.cwiseProduct(ewt_).squaredNorm() / static_cast<double>(n_));
}

void BdfIntegrator::set_coefficients() {
  const int k = k_;
  const double h = h_;
  if (h != h_used_ || k != k_used_) ns_ = 0;
  ns_ = std::min(ns_ + 1, k_used_ + 2);
  if (k + 1 >= ns_) {
    beta_[0] = 1.0;
    alpha_[0] = 1.0;
    double temp1 = h;
    gamma_[0] = 0.0;
    sigma_[0] = 1.0;
    for (int i = 1; i <= k; ++i) {
      const double temp2 = psi_[i - 1];
      psi_[i - 1] = temp1;
      beta_[i] = beta_[i - 1] * psi_[i - 1] / temp2;
      temp1 = temp2 + h;
      alpha_[i] = h / temp1;
      sigma_[i] = i * sigma_[i - 1] * alpha_[i];
      gamma_[i] = gamma_[i - 1] + alpha_[i - 1] / h;
    }
    psi_[k] = temp1;
  }
  double alphas = 0.0, alpha0 = 0.0;
  for (int i = 0; i < k; ++i) {
    alphas -= 1.0 / (i + 1);
    alpha0 -= alpha_[i];
  }
  cj_last_ = cj_;
  cj_ = -alphas / h;
  ck_ = std::max(std::abs(alpha_[k] + alphas - alpha0), alpha_[k]);
  if (ns_ <= k) {
    for (int i = ns_; i <= k; ++i) phi_[i] *= beta_[i];
  }
}

void BdfIntegrator::predict() {
  y_ = phi_[0];
  yp_.setZero();
  for (int j = 1; j <= k_; ++j) {
    y_ += phi_[j];
    yp_ += gamma_[j] * phi_[j];
  }
}

bool BdfIntegrator::solve_linear(const Vector& res, bool first_iteration, Vector& delta) {
  // Work in ewt-scaled variables so that the 2-norm tolerance matches the
  // weighted RMS norm used by the Newton test.
  const double cj = cj_;
  const Vector b = res.cwiseProduct(ewt_);
  const double target = 0.05 * eps_newton_ * std::sqrt(static_cast<double>(n_));
  const double bnorm = b.norm();
  if (bnorm <= target) {
    delta = Vector::Zero(n_);
    return true;
  }
  auto apply = [&](const Vector& z) -> Vector {
    const Vector v = z.cwiseQuotient(ewt_);
    ++stats_.jvp_evals;
    return problem_.jvp(v, v, cj).cwiseProduct(ewt_);
  };
  const GmresResult r = gmres(apply, b, target / bnorm, tol_.max_krylov, tol_.max_krylov);
  stats_.linear_iters += r.iterations;
  delta = r.x.cwiseQuotient(ewt_);
  if (r.converged) return true;
  // A reduced but unconverged residual is acceptable on the first
  // iteration only.
  return first_iteration && r.residual_norm < bnorm;
}

BdfIntegrator::Outcome BdfIntegrator::newton() {
  predict();
  const Vector y_pred = y_, yp_pred = yp_;
  if (std::abs(cj_ / cj_setup_ - 1.0) > 0.3) need_setup_ = true;
  if (cj_ != cj_last_) ss_ = 100.0;

  for (int attempt = 0; attempt < 2; ++attempt) {
    y_ = y_pred;
    yp_ = yp_pred;
    ee_.setZero();
    bool fresh = false;
    try {
      if (need_setup_) {
        problem_.setup(y_, yp_, t_);
        ++stats_.setups;
        cj_setup_ = cj_;
        need_setup_ = false;
        setup_current_ = true;
        fresh = true;
        ss_ = 20.0;
      }
      Vector res = problem_.residual(y_, yp_, t_);
      ++stats_.residual_evals;
      Vector delta;
      for (int m = 0; m < tol_.max_newton; ++m) {
        ++stats_.newton_iters;
        if (!solve_linear(res, m == 0, delta)) break;
        const double delnrm = wrms(delta);
        ee_ -= delta;
        y_ -= delta;
        yp_ -= cj_ * delta;
        if (m == 0) {
          old_nrm_ = delnrm;
          if (delnrm <= 1e-4 * eps_newton_) return Outcome::ok;
        } else {
          const double rate = std::pow(delnrm / old_nrm_, 1.0 / m);
          if (rate > 0.9) break;
          ss_ = rate / (1.0 - rate);
        }
        if (ss_ * delnrm <= eps_newton_) return Outcome::ok;
        res = problem_.residual(y_, yp_, t_);
        ++stats_.residual_evals;
      }
    } catch (const RecoverableError&) {
    }
    if (fresh) break;
    need_setup_ = true;
  }
  need_setup_ = true;
  return Outcome::convergence_failure;
}

BdfIntegrator::Outcome BdfIntegrator::error_test() {
  const int k = k_;
  const double enorm_k = wrms(ee_);
  err_k_ = sigma_[k] * enorm_k;
  const double terr_k = (k + 1) * err_k_;
  k_new_ = k;
  if (k > 1) {
    Vector d = phi_[k] + ee_;
    err_km1_ = sigma_[k - 1] * wrms(d);
    const double terr_km1 = k * err_km1_;
    if (k > 2) {
      d += phi_[k - 1];
      err_km2_ = sigma_[k - 2] * wrms(d);
      const double terr_km2 = (k - 1) * err_km2_;
      if (std::max(terr_km1, terr_km2) <= terr_k) k_new_ = k - 1;
    } else if (terr_km1 <= 0.5 * terr_k) {
      k_new_ = k - 1;
    }
  }
  return ck_ * enorm_k > 1.0 ? Outcome::error_failure : Outcome::ok;
}

void BdfIntegrator::restore() {
  t_ -= h_;
  for (int j = 1; j <= k_; ++j) psi_[j - 1] = psi_[j] - h_;
  if (ns_ <= k_) {
    for (int j = ns_; j <= k_; ++j) phi_[j] /= beta_[j];
  }
}

void BdfIntegrator::complete_step() {
  ++stats_.steps;
  const int kdiff = k_ - k_used_;
  k_used_ = k_;
  h_used_ = h_;
  const int max_order = tol_.max_order;

  if (k_new_ == k_ - 1 || k_ == max_order) phase_ = 1;

  if (phase_ == 0) {
    if (stats_.steps > 1) {
      ++k_;
      h_ = std::min(2.0 * h_, tol_.h_max);
    }
  } else {
    enum { unset, lower, maintain, raise } action = unset;
    if (k_new_ == k_ - 1) action = lower;
    else if (k_ == max_order) action = maintain;
    else if (k_ + 1 >= ns_ || kdiff == 1) action = maintain;

    double err_kp1 = 0.0;
    if (action == unset) {
      err_kp1 = wrms(ee_ - phi_[k_ + 1]) / (k_ + 2);
      const double terr_k = (k_ + 1) * err_k_;
      const double terr_kp1 = (k_ + 2) * err_kp1;
      if (k_ == 1) {
        action = terr_kp1 >= 0.5 * terr_k ? maintain : raise;
      } else {
        const double terr_km1 = k_ * err_km1_;
        if (terr_km1 <= std::min(terr_k, terr_kp1)) action = lower;
        else if (terr_kp1 >= terr_k) action = maintain;
        else action = raise;
      }
    }
    double err_new = err_k_;
    if (action == raise) {
      ++k_;
      err_new = err_kp1;
    } else if (action == lower) {
      --k_;
      err_new = err_km1_;
    }
    const double rr = std::pow(2.0 * err_new + 1e-4, -1.0 / (k_ + 1));
    if (rr >= 2.0) h_ = std::min(2.0 * h_, tol_.h_max);
    else if (rr <= 1.0) h_ *= std::clamp(rr, 0.5, 0.9);
  }

  // Fold the correction into the difference arrays.
  if (k_used_ < max_order_limit) phi_[k_used_ + 1] = ee_;
  phi_[k_used_] += ee_;
  for (int j = k_used_ - 1; j >= 0; --j) phi_[j] += phi_[j + 1];
}

void BdfIntegrator::step() {
  if (!initialized_) throw std::logic_error("integrator used before initialize()");
  compute_weights();
  // Respect the step ceiling and land exactly on t_end.
  if (h_ > tol_.h_max) h_ = tol_.h_max;
  const double remaining = tol_.t_end - t_;
  if (remaining > 0.0 && h_ > remaining) h_ = remaining;
  int error_failures = 0, convergence_failures = 0;
  for (;;) {
    if (!(h_ > 1e-13 * std::max(1.0, std::abs(t_)))) {
      throw IntegrationFailure("step size underflow", t_, h_);
    }
    if (stats_.steps == 0) {
      // Before the first step phi[1] holds h * y'(t0).
      phi_[1] *= h_ / psi_[0];
      psi_[0] = h_;
    }
    set_coefficients();
    t_ += h_;
    Outcome outcome = newton();
    if (outcome == Outcome::ok) outcome = error_test();
    if (outcome == Outcome::ok) break;

    restore();
    if (outcome == Outcome::convergence_failure) {
      ++stats_.newton_failures;
      if (++convergence_failures >= tol_.max_convergence_failures) {
        throw IntegrationFailure("repeated Newton convergence failures", t_, h_);
      }
      h_ *= 0.25;
    } else {
      ++stats_.error_test_failures;
      ++error_failures;
      if (error_failures >= tol_.max_error_failures) {
        throw IntegrationFailure("repeated local error test failures", t_, h_);
      }
      if (error_failures == 1) {
        const double err = k_new_ == k_ ? err_k_ : err_km1_;
        k_ = k_new_;
        const double rr = 0.9 * std::pow(2.0 * err + 1e-4, -1.0 / (k_ + 1));
        h_ *= std::clamp(rr, 0.25, 0.9);
      } else if (error_failures == 2) {
        k_ = k_new_;
        h_ *= 0.25;
      } else {
        k_ = 1;
        h_ *= 0.25;
      }
    }
  }
  complete_step();
}

void BdfIntegrator::integrate(const Observer& observer) {
  const double stop = tol_.t_end - 1e-12 * std::max(1.0, std::abs(tol_.t_end));
  while (t_ < stop) {
    step();
    if (observer) {
      StepInfo info;
      info.t = t_;
      info.h = h_used_;
      info.order = k_used_;
      info.stats = &stats_;
      info.y = &y_;
      info.yp = &yp_;
      observer(info);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char checkpoint_magic[8] = {'B', 'D', 'F', 'S', 'T', 'A', 'T', '1'};

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("truncated integrator checkpoint");
  return v;
}

void put_vector(std::ostream& os, const Vector& v) {
  put<std::int64_t>(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}

Vector get_vector(std::istream& is, std::size_t n) {
  const auto size = get<std::int64_t>(is);
  if (size != static_cast<std::int64_t>(n)) {
    throw std::runtime_error("integrator checkpoint has the wrong state size");
  }
  Vector v(size);
  is.read(reinterpret_cast<char*>(v.data()), sizeof(double) * size);
  if (!is) throw std::runtime_error("truncated integrator checkpoint");
  return v;
}

}  // namespace

void BdfIntegrator::save(std::ostream& os) const {
  os.write(checkpoint_magic, sizeof checkpoint_magic);
  put<std::int64_t>(os, static_cast<std::int64_t>(n_));
  for (double v : {t_, h_, h_used_, cj_, cj_last_, ss_, old_nrm_, ck_, err_k_, err_km1_,
                   err_km2_}) {
    put(os, v);
  }
  for (int v : {k_, k_used_, k_new_, ns_, phase_}) put<std::int32_t>(os, v);
  for (const double* a : {psi_, alpha_, beta_, sigma_, gamma_})
    for (int i = 0; i < max_order_limit + 2; ++i) put(os, a[i]);
  for (long v : {stats_.steps, stats_.residual_evals, stats_.jvp_evals, stats_.setups,
                 stats_.newton_iters, stats_.linear_iters, stats_.error_test_failures,
                 stats_.newton_failures}) {
    put<std::int64_t>(os, v);
  }
  put_vector(os, y_);
  put_vector(os, yp_);
  for (const Vector& p : phi_) put_vector(os, p);
  if (!os) throw std::runtime_error("failed to write integrator checkpoint");
}

void BdfIntegrator::load(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + 8, checkpoint_magic)) {
    throw std::runtime_error("not an integrator checkpoint");
  }
  if (get<std::int64_t>(is) != static_cast<std::int64_t>(n_)) {
    throw std::runtime_error("integrator checkpoint has the wrong state size");
  }
  for (double* v : {&t_, &h_, &h_used_, &cj_, &cj_last_, &ss_, &old_nrm_, &ck_, &err_k_,
                    &err_km1_, &err_km2_}) {
    *v = get<double>(is);
  }
  for (int* v : {&k_, &k_used_, &k_new_, &ns_, &phase_}) *v = get<std::int32_t>(is);
  for (double* a : {psi_, alpha_, beta_, sigma_, gamma_})
    for (int i = 0; i < max_order_limit + 2; ++i) a[i] = get<double>(is);
  for (long* v : {&stats_.steps, &stats_.residual_evals, &stats_.jvp_evals, &stats_.setups,
                  &stats_.newton_iters, &stats_.linear_iters, &stats_.error_test_failures,
                  &stats_.newton_failures}) {
    *v = get<std::int64_t>(is);
  }
  y_ = get_vector(is, n_);
  yp_ = get_vector(is, n_);
  phi_.assign(max_order_limit + 2, Vector());
  for (Vector& p : phi_) p = get_vector(is, n_);
  ee_ = Vector::Zero(n_);
  need_setup_ = true;
  setup_current_ = false;
  initialized_ = true;
}

}  // namespace rbc::ode
