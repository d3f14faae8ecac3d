#include "rbc/sph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace rbc::sph {

namespace {

constexpr double pi = std::numbers::pi;

void require_size(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw DimensionMismatch(std::string(what) + ": expected " +
                            std::to_string(want) + " values, got " +
                            std::to_string(got));
  }
}

}  // namespace

GaussLegendre gauss_legendre(int n) {
  if (n < 1) throw std::invalid_argument("gauss_legendre: n must be >= 1");
  GaussLegendre gl;
  gl.nodes.resize(n);
  gl.weights.resize(n);
  for (int k = 0; k < (n + 1) / 2; ++k) {
    // Tricomi initial guess, then Newton on P_n.
    double x = std::cos(pi * (k + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int l = 2; l <= n; ++l) {
        const double p2 = ((2 * l - 1) * x * p1 - (l - 1) * p0) / l;
        p0 = p1;
        p1 = p2;
      }
      if (n == 1) p0 = 1.0;
      const double pn = (n == 1) ? x : p1;
      const double pn1 = (n == 1) ? 1.0 : p0;
      dp = n * (x * pn - pn1) / (x * x - 1.0);
      const double dx = pn / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // Recompute the derivative at the converged node.
    double p0 = 1.0, p1 = x;
    for (int l = 2; l <= n; ++l) {
      const double p2 = ((2 * l - 1) * x * p1 - (l - 1) * p0) / l;
      p0 = p1;
      p1 = p2;
    }
    dp = (n == 1) ? 1.0 : n * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    gl.nodes[k] = -x;
    gl.nodes[n - 1 - k] = x;
    gl.weights[k] = w;
    gl.weights[n - 1 - k] = w;
  }
  if (n % 2 == 1) gl.nodes[n / 2] = 0.0;
  return gl;
}

double Grid::area_weight(int i) const {
  return weights[i] * 2.0 * pi / n_lon;
}

Grid build_grid(int degree) {
  if (degree < 4) {
    throw InvalidDegree("spherical harmonic degree must be >= 4, got " +
                        std::to_string(degree));
  }
  Grid g;
  g.degree = degree;
  g.n_lat = degree + 1;
  g.n_lon = 2 * degree + 2;
  const GaussLegendre gl = gauss_legendre(g.n_lat);
  for (int i = 0; i < g.n_lat; ++i) {
    // Descending cos(theta) gives ascending theta.
    const double x = gl.nodes[g.n_lat - 1 - i];
    g.cos_theta.push_back(x);
    g.sin_theta.push_back(std::sqrt((1.0 - x) * (1.0 + x)));
    g.theta.push_back(std::acos(x));
    g.weights.push_back(gl.weights[g.n_lat - 1 - i]);
  }
  for (int j = 0; j < g.n_lon; ++j) g.phi.push_back(2.0 * pi * j / g.n_lon);
  return g;
}

Coeffs resize(const Coeffs& c, int degree) {
  Coeffs out(degree);
  const int n = std::min(c.degree, degree);
  std::copy_n(c.values.begin(), coeff_count(n), out.values.begin());
  return out;
}

CartesianCoeffs resize(const CartesianCoeffs& c, int degree) {
  return {resize(c[0], degree), resize(c[1], degree), resize(c[2], degree)};
}

void legendre_values(int degree, double x, double s, LegendreRow& out) {
  const int n = legendre_count(degree);
  out.value.assign(n, 0.0);
  out.d_theta.assign(n, 0.0);
  out.over_sin.assign(n, 0.0);
  double* p = out.value.data();
  double* dp = out.d_theta.data();
  double* q = out.over_sin.data();

  // Diagonal P_mm = c_m sin^m, its theta derivative and P_mm / sin.
  double pmm = 1.0 / std::sqrt(4.0 * pi);
  double dpmm = 0.0;
  double qmm = 0.0;
  for (int m = 0; m <= degree; ++m) {
    if (m > 0) {
      const double f = std::sqrt((2.0 * m + 1.0) / (2.0 * m));
      // P_mm / sin = f * P_{m-1,m-1}
      qmm = f * pmm;
      dpmm = f * (x * pmm + s * dpmm);
      pmm = f * s * pmm;
    }
    const int kmm = legendre_index(m, m);
    p[kmm] = pmm;
    dp[kmm] = dpmm;
    q[kmm] = qmm;
    if (m + 1 <= degree) {
      const double f = std::sqrt(2.0 * m + 3.0);
      const int k = legendre_index(m + 1, m);
      p[k] = f * x * pmm;
      dp[k] = f * (-s * pmm + x * dpmm);
      q[k] = f * x * qmm;
    }
    for (int l = m + 2; l <= degree; ++l) {
      const double ll = l, mm = m;
      const double a = std::sqrt((4.0 * ll * ll - 1.0) / (ll * ll - mm * mm));
      const double b = std::sqrt(((ll - 1) * (ll - 1) - mm * mm) /
                                 (4.0 * (ll - 1) * (ll - 1) - 1.0));
      const int k = legendre_index(l, m);
      const int k1 = legendre_index(l - 1, m);
      const int k2 = legendre_index(l - 2, m);
      p[k] = a * (x * p[k1] - b * p[k2]);
      dp[k] = a * (-s * p[k1] + x * dp[k1] - b * dp[k2]);
      q[k] = a * (x * q[k1] - b * q[k2]);
    }
  }
  const double r2 = std::sqrt(2.0);
  for (int m = 1; m <= degree; ++m) {
    for (int l = m; l <= degree; ++l) {
      const int k = legendre_index(l, m);
      p[k] *= r2;
      dp[k] *= r2;
      q[k] *= r2;
    }
  }
}

Transform::Transform(Grid grid) : grid_(std::move(grid)) {
  const int N = grid_.degree;
  nleg_ = legendre_count(N);
  p_.resize(static_cast<std::size_t>(grid_.n_lat) * nleg_);
  dp_.resize(p_.size());
  q_.resize(p_.size());
  LegendreRow row;
  for (int i = 0; i < grid_.n_lat; ++i) {
    legendre_values(N, grid_.cos_theta[i], grid_.sin_theta[i], row);
    std::copy(row.value.begin(), row.value.end(), p_.begin() + i * nleg_);
    std::copy(row.d_theta.begin(), row.d_theta.end(), dp_.begin() + i * nleg_);
    std::copy(row.over_sin.begin(), row.over_sin.end(), q_.begin() + i * nleg_);
  }
  cos_.resize(static_cast<std::size_t>(grid_.n_lon) * (N + 1));
  sin_.resize(cos_.size());
  for (int j = 0; j < grid_.n_lon; ++j) {
    for (int m = 0; m <= N; ++m) {
      cos_[j * (N + 1) + m] = std::cos(m * grid_.phi[j]);
      sin_[j * (N + 1) + m] = std::sin(m * grid_.phi[j]);
    }
  }
}

void Transform::check_samples(std::size_t n) const {
  require_size(n, grid_.size(), "grid samples");
}

void Transform::check_coeffs(const Coeffs& c) const {
  if (c.degree != grid_.degree) {
    throw DimensionMismatch("coefficient degree " + std::to_string(c.degree) +
                            " does not match grid degree " +
                            std::to_string(grid_.degree));
  }
  require_size(c.values.size(), coeff_count(c.degree), "coefficients");
}

Coeffs Transform::analyze(std::span<const double> f) const {
  check_samples(f.size());
  const int N = grid_.degree;
  Coeffs c(N);
  std::vector<double> a(N + 1), b(N + 1);
  const double dphi = 2.0 * pi / grid_.n_lon;
  for (int i = 0; i < grid_.n_lat; ++i) {
    std::fill(a.begin(), a.end(), 0.0);
    std::fill(b.begin(), b.end(), 0.0);
    const double* row = f.data() + grid_.index(i, 0);
    for (int j = 0; j < grid_.n_lon; ++j) {
      const double* cs = &cos_[j * (N + 1)];
      const double* sn = &sin_[j * (N + 1)];
      for (int m = 0; m <= N; ++m) {
        a[m] += row[j] * cs[m];
        b[m] += row[j] * sn[m];
      }
    }
    const double w = grid_.weights[i] * dphi;
    const double* p = &p_[i * nleg_];
    for (int m = 0; m <= N; ++m) {
      for (int l = m; l <= N; ++l) {
        const double pw = w * p[legendre_index(l, m)];
        c(l, m) += pw * a[m];
        if (m > 0) c(l, -m) += pw * b[m];
      }
    }
  }
  return c;
}

Samples Transform::synthesize(const Coeffs& c) const {
  check_coeffs(c);
  const int N = grid_.degree;
  Samples f(grid_.size(), 0.0);
  std::vector<double> a(N + 1), b(N + 1);
  for (int i = 0; i < grid_.n_lat; ++i) {
    const double* p = &p_[i * nleg_];
    for (int m = 0; m <= N; ++m) {
      double sa = 0.0, sb = 0.0;
      for (int l = m; l <= N; ++l) {
        const double pl = p[legendre_index(l, m)];
        sa += c(l, m) * pl;
        if (m > 0) sb += c(l, -m) * pl;
      }
      a[m] = sa;
      b[m] = sb;
    }
    for (int j = 0; j < grid_.n_lon; ++j) {
      const double* cs = &cos_[j * (N + 1)];
      const double* sn = &sin_[j * (N + 1)];
      double v = 0.0;
      for (int m = 0; m <= N; ++m) v += a[m] * cs[m] + b[m] * sn[m];
      f[grid_.index(i, j)] = v;
    }
  }
  return f;
}

CartesianCoeffs Transform::analyze(const CartesianSamples& f) const {
  return {analyze(f[0]), analyze(f[1]), analyze(f[2])};
}

CartesianSamples Transform::synthesize(const CartesianCoeffs& c) const {
  return {synthesize(c[0]), synthesize(c[1]), synthesize(c[2])};
}

TangentField Transform::gradient(const Coeffs& c) const {
  check_coeffs(c);
  const int N = grid_.degree;
  TangentField g{Samples(grid_.size()), Samples(grid_.size())};
  std::vector<double> at(N + 1), bt(N + 1), ap(N + 1), bp(N + 1);
  for (int i = 0; i < grid_.n_lat; ++i) {
    const double* dp = &dp_[i * nleg_];
    const double* q = &q_[i * nleg_];
    for (int m = 0; m <= N; ++m) {
      double sat = 0.0, sbt = 0.0, saq = 0.0, sbq = 0.0;
      for (int l = m; l <= N; ++l) {
        const int k = legendre_index(l, m);
        sat += c(l, m) * dp[k];
        saq += c(l, m) * q[k];
        if (m > 0) {
          sbt += c(l, -m) * dp[k];
          sbq += c(l, -m) * q[k];
        }
      }
      at[m] = sat;
      bt[m] = sbt;
      // (1/sin) d/dphi of (a cos + b sin) = m (b cos - a sin) / sin
      ap[m] = m * sbq;
      bp[m] = -m * saq;
    }
    for (int j = 0; j < grid_.n_lon; ++j) {
      const double* cs = &cos_[j * (N + 1)];
      const double* sn = &sin_[j * (N + 1)];
      double vt = 0.0, vp = 0.0;
      for (int m = 0; m <= N; ++m) {
        vt += at[m] * cs[m] + bt[m] * sn[m];
        vp += ap[m] * cs[m] + bp[m] * sn[m];
      }
      g.theta[grid_.index(i, j)] = vt;
      g.phi[grid_.index(i, j)] = vp;
    }
  }
  return g;
}

Coeffs Transform::divergence_coeffs(const TangentField& v) const {
  check_samples(v.theta.size());
  check_samples(v.phi.size());
  const int N = grid_.degree;
  Coeffs c(N);
  std::vector<double> ct(N + 1), st(N + 1), cp(N + 1), sp(N + 1);
  const double dphi = 2.0 * pi / grid_.n_lon;
  for (int i = 0; i < grid_.n_lat; ++i) {
    std::fill(ct.begin(), ct.end(), 0.0);
    std::fill(st.begin(), st.end(), 0.0);
    std::fill(cp.begin(), cp.end(), 0.0);
    std::fill(sp.begin(), sp.end(), 0.0);
    const std::size_t base = grid_.index(i, 0);
    for (int j = 0; j < grid_.n_lon; ++j) {
      const double vt = v.theta[base + j];
      const double vp = v.phi[base + j];
      const double* cs = &cos_[j * (N + 1)];
      const double* sn = &sin_[j * (N + 1)];
      for (int m = 0; m <= N; ++m) {
        ct[m] += vt * cs[m];
        st[m] += vt * sn[m];
        cp[m] += vp * cs[m];
        sp[m] += vp * sn[m];
      }
    }
    const double w = grid_.weights[i] * dphi;
    const double* dp = &dp_[i * nleg_];
    const double* q = &q_[i * nleg_];
    for (int m = 0; m <= N; ++m) {
      for (int l = m; l <= N; ++l) {
        const int k = legendre_index(l, m);
        // -<grad Y, v> for Y = P cos(m phi) and Y = P sin(m phi)
        c(l, m) -= w * (dp[k] * ct[m] - m * q[k] * sp[m]);
        if (m > 0) c(l, -m) -= w * (dp[k] * st[m] + m * q[k] * cp[m]);
      }
    }
  }
  return c;
}

namespace {

struct PointSums {
  double value, d_theta, d_phi;
};

PointSums evaluate_point(const Coeffs& c, double x, double s, double phi,
                         LegendreRow& row, bool with_gradient) {
  const int N = c.degree;
  legendre_values(N, x, s, row);
  PointSums out{0.0, 0.0, 0.0};
  for (int m = 0; m <= N; ++m) {
    const double cm = std::cos(m * phi), sm = std::sin(m * phi);
    for (int l = m; l <= N; ++l) {
      const int k = legendre_index(l, m);
      const double ca = c(l, m);
      const double cb = (m > 0) ? c(l, -m) : 0.0;
      out.value += row.value[k] * (ca * cm + cb * sm);
      if (with_gradient) {
        out.d_theta += row.d_theta[k] * (ca * cm + cb * sm);
        out.d_phi += m * row.over_sin[k] * (cb * cm - ca * sm);
      }
    }
  }
  return out;
}

}  // namespace

std::vector<double> synthesize_at(const Coeffs& c,
                                  std::span<const SpherePoint> points) {
  std::vector<double> out;
  out.reserve(points.size());
  LegendreRow row;
  for (const SpherePoint& pt : points) {
    out.push_back(evaluate_point(c, std::cos(pt.theta), std::sin(pt.theta),
                                 pt.phi, row, false)
                      .value);
  }
  return out;
}

PointGradient evaluate_with_gradient(const Coeffs& c, SpherePoint pt) {
  LegendreRow row;
  const PointSums s = evaluate_point(c, std::cos(pt.theta), std::sin(pt.theta),
                                     pt.phi, row, true);
  return {s.value, s.d_theta, s.d_phi};
}

RotatedRule rotated_rule(int degree, int quad_degree) {
  if (quad_degree < 1) {
    throw std::invalid_argument("quad_degree must be >= 1");
  }
  RotatedRule rule;
  rule.n_theta = quad_degree + 1;
  rule.n_phi = 2 * std::max(degree, (quad_degree + 1) / 2) + 2;
  const GaussLegendre gl = gauss_legendre(rule.n_theta);
  const double dphi = 2.0 * pi / rule.n_phi;
  for (int a = 0; a < rule.n_theta; ++a) {
    rule.theta.push_back(0.5 * pi * (1.0 + gl.nodes[a]));
  }
  for (int a = 0; a < rule.n_theta; ++a) {
    const double w = 0.5 * pi * gl.weights[a] * std::sin(rule.theta[a]) * dphi;
    for (int b = 0; b < rule.n_phi; ++b) rule.weights.push_back(w);
  }
  return rule;
}

namespace {

// Unit vector of rotated node (theta', phi') for a source at (ts, ps).
Eigen::Vector3d rotated_unit(double ts, double ps, double tq, double pq) {
  const Eigen::Vector3d local(std::sin(tq) * std::cos(pq),
                              std::sin(tq) * std::sin(pq), std::cos(tq));
  const double ct = std::cos(ts), st = std::sin(ts);
  // R_y(ts): north pole -> (sin ts, 0, cos ts)
  const Eigen::Vector3d y(ct * local.x() + st * local.z(), local.y(),
                          -st * local.x() + ct * local.z());
  const double cp = std::cos(ps), sp = std::sin(ps);
  return {cp * y.x() - sp * y.y(), sp * y.x() + cp * y.y(), y.z()};
}

}  // namespace

RotatedNodes rotated_nodes(SpherePoint source, const RotatedRule& rule) {
  RotatedNodes out;
  const double dphi = 2.0 * pi / rule.n_phi;
  for (int a = 0; a < rule.n_theta; ++a) {
    for (int b = 0; b < rule.n_phi; ++b) {
      const Eigen::Vector3d u =
          rotated_unit(source.theta, source.phi, rule.theta[a], b * dphi);
      out.unit.push_back(u);
      out.points.push_back({std::atan2(std::hypot(u.x(), u.y()), u.z()),
                            std::atan2(u.y(), u.x())});
      out.weights.push_back(rule.weights[a * rule.n_phi + b]);
    }
  }
  return out;
}

RotatedEvaluator::RotatedEvaluator(const Grid& grid, int quad_degree)
    : grid_(grid), rule_(rotated_rule(grid.degree, quad_degree)) {
  const int N = grid_.degree;
  nleg_ = legendre_count(N);
  const double dphi = 2.0 * pi / rule_.n_phi;
  nodes_.resize(grid_.n_lat);
  for (int i = 0; i < grid_.n_lat; ++i) {
    LatitudeNodes& ln = nodes_[i];
    for (int a = 0; a < rule_.n_theta; ++a) {
      for (int b = 0; b < rule_.n_phi; ++b) {
        const Eigen::Vector3d u =
            rotated_unit(grid_.theta[i], 0.0, rule_.theta[a], b * dphi);
        const double s = std::hypot(u.x(), u.y());
        ln.cos_theta.push_back(u.z());
        ln.sin_theta.push_back(s);
        ln.phi.push_back(std::atan2(u.y(), u.x()));
      }
    }
  }
  trig_.resize(2 * N + 1, grid_.n_lon);
  for (int j = 0; j < grid_.n_lon; ++j) {
    for (int m = 0; m <= N; ++m) trig_(m, j) = std::cos(m * grid_.phi[j]);
    for (int m = 1; m <= N; ++m) trig_(N + m, j) = std::sin(m * grid_.phi[j]);
  }
}

void RotatedEvaluator::evaluate(int lat, std::span<const Request> requests,
                                Eigen::MatrixXd& out) const {
  const int N = grid_.degree;
  const int R = static_cast<int>(requests.size());
  const int nq = rule_.size();
  for (const Request& r : requests) {
    if (r.coeffs->degree != N) {
      throw DimensionMismatch("rotated evaluation: coefficient degree mismatch");
    }
  }
  const LatitudeNodes& ln = nodes_[lat];
  Eigen::MatrixXd partial(nq * R, 2 * N + 1);
  LegendreRow row;
  std::vector<double> cm(N + 1), sm(N + 1);
  for (int q = 0; q < nq; ++q) {
    legendre_values(N, ln.cos_theta[q], ln.sin_theta[q], row);
    for (int m = 0; m <= N; ++m) {
      cm[m] = std::cos(m * ln.phi[q]);
      sm[m] = std::sin(m * ln.phi[q]);
    }
    for (int r = 0; r < R; ++r) {
      const Coeffs& c = *requests[r].coeffs;
      const Kind kind = requests[r].kind;
      const std::vector<double>& table =
          kind == Kind::value     ? row.value
          : kind == Kind::d_theta ? row.d_theta
                                  : row.over_sin;
      const int rowi = q * R + r;
      for (int m = 0; m <= N; ++m) {
        double a = 0.0, b = 0.0;
        for (int l = m; l <= N; ++l) {
          const double t = table[legendre_index(l, m)];
          a += c(l, m) * t;
          if (m > 0) b += c(l, -m) * t;
        }
        if (kind == Kind::d_phi) {
          const double a2 = m * b, b2 = -m * a;
          a = a2;
          b = b2;
        }
        // f(phi_q + phi_j) = sum_m U_m cos(m phi_j) + V_m sin(m phi_j)
        partial(rowi, m) = a * cm[m] + b * sm[m];
        if (m > 0) partial(rowi, N + m) = b * cm[m] - a * sm[m];
      }
    }
  }
  out.noalias() = partial * trig_;
}

}  // namespace rbc::sph
