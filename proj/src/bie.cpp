#include "rbc/bie.hpp"

#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

#include "rbc/ode.hpp"

namespace rbc::bie {

namespace {

constexpr double pi = std::numbers::pi;

using Kind = sph::RotatedEvaluator::Kind;
using Request = sph::RotatedEvaluator::Request;

// Rows per node in the evaluated matrices:
//   0-2 x, 3-5 d_theta x, 6-8 d_phi x, 9-11 u, 12-14 f
constexpr int n_fields = 15;

void check_separation(double rho, double scale) {
  if (!(rho > 1e-14 * std::max(1.0, scale))) {
    throw SingularEvaluation("kernel evaluated at coincident points");
  }
}

std::vector<Vec3> grid_points(const sph::Transform& t, const sph::CartesianCoeffs& c) {
  const sph::CartesianSamples s = t.synthesize(c);
  std::vector<Vec3> out(s[0].size());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = {s[0][p], s[1][p], s[2][p]};
  return out;
}

template <class F>
void for_each_latitude(int n_lat, int threads, F&& body) {
  if (threads <= 1 || n_lat <= 1) {
    for (int i = 0; i < n_lat; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n_lat) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n_lat);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::min(threads, n_lat);
  for (int k = 0; k < n; ++k) pool.emplace_back(worker);
  for (std::thread& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::array<Request, n_fields> field_requests(const sph::CartesianCoeffs& x,
                                             const sph::CartesianCoeffs& u,
                                             const sph::CartesianCoeffs& f) {
  std::array<Request, n_fields> r;
  for (int k = 0; k < 3; ++k) {
    r[k] = {&x[k], Kind::value};
    r[3 + k] = {&x[k], Kind::d_theta};
    r[6 + k] = {&x[k], Kind::d_phi};
    r[9 + k] = {&u[k], Kind::value};
    r[12 + k] = {&f[k], Kind::value};
  }
  return r;
}

Vec3 at(const double* p) { return {p[0], p[1], p[2]}; }

bool is_zero(const Vector& v) { return (v.array() == 0.0).all(); }

}  // namespace

// ---------------------------------------------------------------------------
// Parameters and kernels

void FluidParams::validate() const {
  if (!(mu > 0.0)) throw std::invalid_argument("viscosity mu must be positive");
  if (!(lambda > 0.0)) throw std::invalid_argument("viscosity ratio lambda must be positive");
}

AmbientFlow AmbientFlow::quiescent() { return {}; }

AmbientFlow AmbientFlow::shear(double k) {
  AmbientFlow f;
  f.kind = Kind::shear;
  f.rate = k;
  return f;
}

AmbientFlow AmbientFlow::parabolic(double a, double b) {
  AmbientFlow f;
  f.kind = Kind::parabolic;
  f.a = a;
  f.b = b;
  return f;
}

AmbientFlow AmbientFlow::uniform(const Vec3& v) {
  AmbientFlow f;
  f.kind = Kind::uniform;
  f.velocity = v;
  return f;
}

Vec3 AmbientFlow::at(const Vec3& x) const {
  switch (kind) {
    case Kind::quiescent: return Vec3::Zero();
    case Kind::shear: return {rate * x.z(), 0.0, 0.0};
    case Kind::parabolic: return {a * (b - (x.y() * x.y() + x.z() * x.z())), 0.0, 0.0};
    case Kind::uniform: return velocity;
  }
  return Vec3::Zero();
}

Mat3 AmbientFlow::gradient(const Vec3& x) const {
  Mat3 g = Mat3::Zero();
  switch (kind) {
    case Kind::shear: g(0, 2) = rate; break;
    case Kind::parabolic:
      g(0, 1) = -2.0 * a * x.y();
      g(0, 2) = -2.0 * a * x.z();
      break;
    default: break;
  }
  return g;
}

Mat3 kernel_G(const Vec3& chi, const Vec3& xi) {
  const Vec3 r = chi - xi;
  const double rho = r.norm();
  check_separation(rho, std::max(chi.norm(), xi.norm()));
  return (Mat3::Identity() + r * r.transpose() / (rho * rho)) / rho;
}

Mat3 kernel_K(const Vec3& chi, const Vec3& xi, const Vec3& n_xi) {
  const Vec3 r = chi - xi;
  const double rho = r.norm();
  check_separation(rho, std::max(chi.norm(), xi.norm()));
  return 6.0 * r.dot(n_xi) / std::pow(rho, 5) * (r * r.transpose());
}

// ---------------------------------------------------------------------------
// Pointwise quadratures

namespace {

struct NodeGeometry {
  Vec3 x;
  Vec3 nu;
};

NodeGeometry node_geometry(const sph::CartesianCoeffs& xhat, sph::SpherePoint p) {
  Vec3 x, gt, gp;
  for (int k = 0; k < 3; ++k) {
    const sph::PointGradient g = sph::evaluate_with_gradient(xhat[k], p);
    x[k] = g.value;
    gt[k] = g.d_theta;
    gp[k] = g.d_phi;
  }
  return {x, gt.cross(gp)};
}

Vec3 point_value(const sph::CartesianCoeffs& c, sph::SpherePoint p) {
  Vec3 v;
  for (int k = 0; k < 3; ++k) v[k] = sph::evaluate_with_gradient(c[k], p).value;
  return v;
}

}  // namespace

Vec3 single_layer(const geom::SurfaceState& cur, const sph::CartesianCoeffs& f,
                  sph::SpherePoint source, const sph::RotatedRule& rule) {
  const sph::RotatedNodes nodes = sph::rotated_nodes(source, rule);
  const Vec3 xs = point_value(cur.xhat, source);
  Vec3 sum = Vec3::Zero();
  for (std::size_t q = 0; q < nodes.points.size(); ++q) {
    const Vec3 xq = point_value(cur.xhat, nodes.points[q]);
    sum += nodes.weights[q] * (kernel_G(xs, xq) * point_value(f, nodes.points[q]));
  }
  return sum;
}

Vec3 double_layer_deflated(const geom::SurfaceState& cur, const sph::CartesianCoeffs& u,
                           sph::SpherePoint source, const sph::RotatedRule& rule) {
  const sph::RotatedNodes nodes = sph::rotated_nodes(source, rule);
  const Vec3 xs = point_value(cur.xhat, source);
  const Vec3 us = point_value(u, source);
  Vec3 sum = Vec3::Zero();
  for (std::size_t q = 0; q < nodes.points.size(); ++q) {
    const NodeGeometry g = node_geometry(cur.xhat, nodes.points[q]);
    const Vec3 du = point_value(u, nodes.points[q]) - us;
    if ((du.array() == 0.0).all()) continue;
    const double j = g.nu.norm();
    sum += nodes.weights[q] * j * (kernel_K(xs, g.x, g.nu / j) * du);
  }
  return sum;
}

Mat3 double_layer_identity(const geom::SurfaceState& cur, sph::SpherePoint source,
                           const sph::RotatedRule& rule) {
  const sph::RotatedNodes nodes = sph::rotated_nodes(source, rule);
  const Vec3 xs = point_value(cur.xhat, source);
  Mat3 sum = Mat3::Zero();
  for (std::size_t q = 0; q < nodes.points.size(); ++q) {
    const NodeGeometry g = node_geometry(cur.xhat, nodes.points[q]);
    const double j = g.nu.norm();
    sum += nodes.weights[q] * j * kernel_K(xs, g.x, g.nu / j);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Packing

Vector pack(const sph::CartesianCoeffs& c) {
  const std::size_t m = c[0].values.size();
  Vector v(3 * m);
  for (int k = 0; k < 3; ++k) {
    if (c[k].values.size() != m) throw sph::DimensionMismatch("pack: component degrees differ");
    for (std::size_t i = 0; i < m; ++i) v(k * m + i) = c[k].values[i];
  }
  return v;
}

sph::CartesianCoeffs unpack(const Vector& v, int degree) {
  const std::size_t m = sph::coeff_count(degree);
  if (static_cast<std::size_t>(v.size()) != 3 * m) {
    throw sph::DimensionMismatch("unpack: vector length does not match degree");
  }
  sph::CartesianCoeffs c{sph::Coeffs(degree), sph::Coeffs(degree), sph::Coeffs(degree)};
  for (int k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < m; ++i) c[k].values[i] = v(k * m + i);
  return c;
}

// ---------------------------------------------------------------------------
// Boundary problem

struct BoundaryProblem::Fields {
  sph::CartesianCoeffs x, u, f;
  std::vector<Vec3> xs, us;  // on the grid (sources)
};

struct BoundaryProblem::Linearization {
  Fields base;
  shell::MembraneLoad load;
  std::vector<Eigen::MatrixXd> cache;  // per latitude, empty if over the limit
  bool cached = false;
};

BoundaryProblem::BoundaryProblem(const sph::CartesianCoeffs& reference,
                                 const ProblemConfig& config)
    : config_(config),
      transform_(sph::build_grid(config.degree)),
      mechanics_(reference, config.degree, config.material, config.shell_degree) {
  config_.fluid.validate();
  if (config_.quad_degree <= 0) config_.quad_degree = sph::default_quad_degree(config_.degree);
  if (config_.quad_degree < config_.degree) {
    throw std::invalid_argument("quad_degree must be at least the harmonic degree");
  }
  if (config_.threads < 1) config_.threads = 1;
  evaluator_ = std::make_unique<sph::RotatedEvaluator>(transform_.grid(), config_.quad_degree);
}

BoundaryProblem::~BoundaryProblem() = default;

std::size_t BoundaryProblem::size() const {
  return 3 * static_cast<std::size_t>(sph::coeff_count(config_.degree));
}

const sph::RotatedRule& BoundaryProblem::rule() const { return evaluator_->rule(); }

bool BoundaryProblem::linearized() const { return lin_ != nullptr; }

BoundaryProblem::Fields BoundaryProblem::fields(const sph::CartesianCoeffs& x,
                                                const sph::CartesianCoeffs& u,
                                                const sph::CartesianCoeffs& f) const {
  Fields s{x, u, f, grid_points(transform_, x), grid_points(transform_, u)};
  return s;
}

Vector BoundaryProblem::residual(const Vector& xv, const Vector& uv, double) const {
  const int N = config_.degree;
  const sph::CartesianCoeffs x = unpack(xv, N);
  const sph::CartesianCoeffs u = unpack(uv, N);
  const sph::CartesianCoeffs f = mechanics_.force(x);
  const Fields s = fields(x, u, f);

  const sph::Grid& grid = transform_.grid();
  const sph::RotatedRule& rule = evaluator_->rule();
  const int nq = rule.size();
  const double c_dl = (config_.fluid.lambda - 1.0) / (8.0 * pi);
  const double c_sl = 1.0 / (8.0 * pi * config_.fluid.mu);
  const auto requests = field_requests(s.x, s.u, s.f);

  sph::CartesianSamples out;
  for (auto& o : out) o.assign(grid.size(), 0.0);

  for_each_latitude(grid.n_lat, config_.threads, [&](int i) {
    Eigen::MatrixXd m;
    evaluator_->evaluate(i, requests, m);
    for (int j = 0; j < grid.n_lon; ++j) {
      const std::size_t p = grid.index(i, j);
      const Vec3& xs = s.xs[p];
      const Vec3& us = s.us[p];
      const double* col = m.col(j).data();
      Vec3 dl = Vec3::Zero(), sl = Vec3::Zero();
      for (int q = 0; q < nq; ++q) {
        const double* v = col + q * n_fields;
        const Vec3 r = xs - at(v);
        const Vec3 nu = at(v + 3).cross(at(v + 6));
        const Vec3 du = at(v + 9) - us;
        const Vec3 fq = at(v + 12);
        const double inv = 1.0 / r.norm();
        const double inv3 = inv * inv * inv;
        const double w = rule.weights[q];
        dl += (w * 6.0 * r.dot(nu) * r.dot(du) * inv3 * inv * inv) * r;
        sl += w * (inv * fq + (r.dot(fq) * inv3) * r);
      }
      const Vec3 res = us + c_dl * dl - config_.flow.at(xs) + c_sl * sl;
      for (int k = 0; k < 3; ++k) out[k][p] = res[k];
    }
  });
  return pack(transform_.analyze(out));
}

void BoundaryProblem::linearize(const Vector& xv, const Vector& uv, double) {
  const int N = config_.degree;
  auto lin = std::make_unique<Linearization>();
  const sph::CartesianCoeffs x = unpack(xv, N);
  lin->load = mechanics_.load(x);
  lin->base = fields(x, unpack(uv, N), lin->load.force);

  const sph::Grid& grid = transform_.grid();
  const std::size_t bytes = sizeof(double) * static_cast<std::size_t>(evaluator_->n_nodes()) *
                            n_fields * grid.size();
  if (bytes <= config_.cache_limit_bytes) {
    const auto requests = field_requests(lin->base.x, lin->base.u, lin->base.f);
    lin->cache.resize(grid.n_lat);
    for_each_latitude(grid.n_lat, config_.threads,
                      [&](int i) { evaluator_->evaluate(i, requests, lin->cache[i]); });
    lin->cached = true;
  }
  lin_ = std::move(lin);
}

Vector BoundaryProblem::jvp(const Vector& dxv, const Vector& duv, double lambda) const {
  if (!lin_) throw std::logic_error("jvp called before linearize()");
  if (is_zero(dxv)) return apply_velocity_operator(*lin_, duv, lambda);

  const int N = config_.degree;
  const Linearization& lin = *lin_;
  const Fields& b = lin.base;
  const sph::CartesianCoeffs dx = unpack(dxv, N);
  const sph::CartesianCoeffs du = unpack(duv, N);
  const sph::CartesianCoeffs df = mechanics_.force_derivative(lin.load, dx);
  const Fields d = fields(dx, du, df);

  const sph::Grid& grid = transform_.grid();
  const sph::RotatedRule& rule = evaluator_->rule();
  const int nq = rule.size();
  const double c_dl = (config_.fluid.lambda - 1.0) / (8.0 * pi);
  const double c_sl = 1.0 / (8.0 * pi * config_.fluid.mu);
  const auto base_requests = field_requests(b.x, b.u, b.f);
  const auto delta_requests = field_requests(d.x, d.u, d.f);

  sph::CartesianSamples out;
  for (auto& o : out) o.assign(grid.size(), 0.0);

  for_each_latitude(grid.n_lat, config_.threads, [&](int i) {
    Eigen::MatrixXd local, dm;
    const Eigen::MatrixXd* bm = &local;
    if (lin.cached) bm = &lin.cache[i];
    else evaluator_->evaluate(i, base_requests, local);
    evaluator_->evaluate(i, delta_requests, dm);
    for (int j = 0; j < grid.n_lon; ++j) {
      const std::size_t p = grid.index(i, j);
      const Vec3& xs = b.xs[p];
      const Vec3& us = b.us[p];
      const Vec3& dxs = d.xs[p];
      const Vec3& dus = d.us[p];
      const double* col = bm->col(j).data();
      const double* dcol = dm.col(j).data();
      Vec3 dl_x = Vec3::Zero(), dl_u = Vec3::Zero(), sl_x = Vec3::Zero();
      for (int q = 0; q < nq; ++q) {
        const double* v = col + q * n_fields;
        const double* dv = dcol + q * n_fields;
        const Vec3 r = xs - at(v);
        const Vec3 gt = at(v + 3), gp = at(v + 6);
        const Vec3 nu = gt.cross(gp);
        const Vec3 du_q = at(v + 9) - us;
        const Vec3 fq = at(v + 12);
        const Vec3 dr = dxs - at(dv);
        const Vec3 dnu = at(dv + 3).cross(gp) + gt.cross(at(dv + 6));
        const Vec3 ddu = at(dv + 9) - dus;
        const Vec3 dfq = at(dv + 12);

        const double inv = 1.0 / r.norm();
        const double inv2 = inv * inv;
        const double inv3 = inv2 * inv;
        const double inv5 = inv3 * inv2;
        const double w = rule.weights[q];
        const double a = r.dot(nu);
        const double bb = r.dot(du_q);
        const double rdr = r.dot(dr);
        const double rf = r.dot(fq);

        dl_x += w * (6.0 * inv5 * ((dr.dot(nu) + r.dot(dnu)) * bb + a * dr.dot(du_q) -
                                   5.0 * a * bb * rdr * inv2) *
                         r +
                     6.0 * inv5 * a * bb * dr);
        dl_u += (w * 6.0 * inv5 * a * r.dot(ddu)) * r;
        sl_x += w * (-(rdr * inv3) * fq + (rf * inv3) * dr + (dr.dot(fq) * inv3) * r -
                     (3.0 * rf * rdr * inv5) * r + inv * dfq + (r.dot(dfq) * inv3) * r);
      }
      const Vec3 res = lambda * dus + c_dl * (dl_x + lambda * dl_u) -
                       config_.flow.gradient(xs) * dxs + c_sl * sl_x;
      for (int k = 0; k < 3; ++k) out[k][p] = res[k];
    }
  });
  return pack(transform_.analyze(out));
}

Vector BoundaryProblem::apply_velocity_operator(const Linearization& lin, const Vector& duv,
                                                double lambda) const {
  const int N = config_.degree;
  const double c_dl = (config_.fluid.lambda - 1.0) / (8.0 * pi);
  if (c_dl == 0.0 || is_zero(duv)) {
    // The operator reduces to the identity on band-limited fields.
    return lambda * duv;
  }
  const Fields& b = lin.base;
  const sph::CartesianCoeffs du = unpack(duv, N);
  const std::vector<Vec3> dus = grid_points(transform_, du);

  const sph::Grid& grid = transform_.grid();
  const sph::RotatedRule& rule = evaluator_->rule();
  const int nq = rule.size();
  const auto base_requests = field_requests(b.x, b.u, b.f);
  std::array<Request, 3> delta_requests;
  for (int k = 0; k < 3; ++k) delta_requests[k] = {&du[k], Kind::value};

  sph::CartesianSamples out;
  for (auto& o : out) o.assign(grid.size(), 0.0);

  for_each_latitude(grid.n_lat, config_.threads, [&](int i) {
    Eigen::MatrixXd local, dm;
    const Eigen::MatrixXd* bm = &local;
    if (lin.cached) bm = &lin.cache[i];
    else evaluator_->evaluate(i, base_requests, local);
    evaluator_->evaluate(i, delta_requests, dm);
    for (int j = 0; j < grid.n_lon; ++j) {
      const std::size_t p = grid.index(i, j);
      const Vec3& xs = b.xs[p];
      const double* col = bm->col(j).data();
      const double* dcol = dm.col(j).data();
      Vec3 dl = Vec3::Zero();
      for (int q = 0; q < nq; ++q) {
        const double* v = col + q * n_fields;
        const Vec3 r = xs - at(v);
        const Vec3 nu = at(v + 3).cross(at(v + 6));
        const Vec3 ddu = at(dcol + 3 * q) - dus[p];
        const double inv = 1.0 / r.norm();
        const double inv5 = inv * inv * inv * inv * inv;
        dl += (rule.weights[q] * 6.0 * inv5 * r.dot(nu) * r.dot(ddu)) * r;
      }
      const Vec3 res = lambda * (dus[p] + c_dl * dl);
      for (int k = 0; k < 3; ++k) out[k][p] = res[k];
    }
  });
  return pack(transform_.analyze(out));
}

VelocitySolve BoundaryProblem::solve_velocity(const Vector& xv, double t, double tol,
                                              int restart, int max_iterations,
                                              const Vector* guess) const {
  const Vector zero = Vector::Zero(size());
  const Vector g0 = residual(xv, zero, t);
  VelocitySolve out;
  const double g0norm = g0.norm();
  if (g0norm == 0.0) {
    out.u = zero;
    return out;
  }
  if (config_.fluid.lambda == 1.0) {
    out.u = -g0;
    out.residual_norm = residual(xv, out.u, t).norm() / g0norm;
    return out;
  }
  // The operator only needs geometry; a private linearization keeps any
  // jvp state of the caller untouched.
  Linearization lin;
  const int N = config_.degree;
  const sph::CartesianCoeffs x = unpack(xv, N);
  lin.base = fields(x, unpack(zero, N), unpack(zero, N));
  const sph::Grid& grid = transform_.grid();
  const std::size_t bytes = sizeof(double) * static_cast<std::size_t>(evaluator_->n_nodes()) *
                            n_fields * grid.size();
  if (bytes <= config_.cache_limit_bytes) {
    const auto requests = field_requests(lin.base.x, lin.base.u, lin.base.f);
    lin.cache.resize(grid.n_lat);
    for_each_latitude(grid.n_lat, config_.threads,
                      [&](int i) { evaluator_->evaluate(i, requests, lin.cache[i]); });
    lin.cached = true;
  }
  const ode::GmresResult r = ode::gmres(
      [&](const Vector& v) { return apply_velocity_operator(lin, v, 1.0); }, -g0, tol, restart,
      max_iterations, guess);
  out.u = r.x;
  out.iterations = r.iterations;
  out.residual_norm = r.residual_norm / g0norm;
  if (!r.converged) {
    throw LinearSolveFailure("velocity solve did not converge", r.iterations,
                             out.residual_norm);
  }
  return out;
}

}  // namespace rbc::bie
