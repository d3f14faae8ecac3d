#include "rbc/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Geometry>

namespace rbc::geom {

namespace {

sph::CartesianCoeffs padded(const sph::CartesianCoeffs& c, int degree) {
  if (c[0].degree == degree) return c;
  if (c[0].degree > degree) {
    throw sph::DimensionMismatch("surface coefficients exceed transform degree");
  }
  return sph::resize(c, degree);
}

sph::CartesianCoeffs sample_and_analyze(
    const sph::Transform& t, double alpha,
    Vec3 (*fn)(double, double, double)) {
  const sph::Grid& g = t.grid();
  sph::CartesianSamples s;
  for (auto& comp : s) comp.resize(g.size());
  for (int i = 0; i < g.n_lat; ++i) {
    for (int j = 0; j < g.n_lon; ++j) {
      const Vec3 p = fn(alpha, g.theta[i], g.phi[j]);
      for (int k = 0; k < 3; ++k) s[k][g.index(i, j)] = p[k];
    }
  }
  return t.analyze(s);
}

Vec3 sphere_point(double radius, double theta, double phi) {
  return radius * Vec3(std::sin(theta) * std::cos(phi),
                       std::sin(theta) * std::sin(phi), std::cos(theta));
}

}  // namespace

SurfaceState surface_state(const sph::CartesianCoeffs& xhat_in,
                           const sph::Transform& t) {
  const sph::Grid& g = t.grid();
  const std::size_t n = g.size();
  SurfaceState s;
  s.xhat = padded(xhat_in, g.degree);

  const sph::CartesianSamples x = t.synthesize(s.xhat);
  std::array<sph::TangentField, 3> dx;
  for (int k = 0; k < 3; ++k) dx[k] = t.gradient(s.xhat[k]);

  s.x.resize(n);
  s.grad.resize(n);
  s.nu.resize(n);
  s.normal.resize(n);
  s.jacobian.resize(n);
  s.a.resize(n);
  double jmax = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    for (int k = 0; k < 3; ++k) {
      s.x[p][k] = x[k][p];
      s.grad[p](k, 0) = dx[k].theta[p];
      s.grad[p](k, 1) = dx[k].phi[p];
    }
    s.nu[p] = s.grad[p].col(0).cross(s.grad[p].col(1));
    s.jacobian[p] = s.nu[p].norm();
    s.a[p] = s.grad[p].transpose() * s.grad[p];
    jmax = std::max(jmax, s.jacobian[p]);
  }
  for (std::size_t p = 0; p < n; ++p) {
    if (!(s.jacobian[p] > degenerate_tolerance * jmax)) {
      throw DegenerateSurface("surface jacobian collapses at grid point " +
                              std::to_string(p));
    }
    s.normal[p] = s.nu[p] / s.jacobian[p];
  }

  std::array<sph::TangentField, 3> dn;
  for (int k = 0; k < 3; ++k) {
    sph::Samples nk(n);
    for (std::size_t p = 0; p < n; ++p) nk[p] = s.normal[p][k];
    dn[k] = t.gradient(nk);
  }
  s.grad_normal.resize(n);
  s.b.resize(n);
  for (std::size_t p = 0; p < n; ++p) {
    for (int k = 0; k < 3; ++k) {
      s.grad_normal[p](k, 0) = dn[k].theta[p];
      s.grad_normal[p](k, 1) = dn[k].phi[p];
    }
    s.b[p] = s.grad[p].transpose() * s.grad_normal[p];
  }
  return s;
}

Vec3 biconcave_point(double alpha, double theta, double phi) {
  const double st = std::sin(theta), ct = std::cos(theta);
  const double s2 = st * st;
  return {alpha * st * std::cos(phi), alpha * st * std::sin(phi),
          0.5 * alpha * (0.207 + 2.003 * s2 - 1.123 * s2 * s2) * ct};
}

sph::CartesianCoeffs biconcave_coeffs(double alpha, const sph::Transform& t) {
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  return sample_and_analyze(t, alpha, &biconcave_point);
}

ReferenceSurface biconcave_reference(double alpha, const sph::Transform& t) {
  return surface_state(biconcave_coeffs(alpha, t), t);
}

sph::CartesianCoeffs sphere_coeffs(double radius, const sph::Transform& t) {
  return sample_and_analyze(t, radius, &sphere_point);
}

sph::CartesianCoeffs rotate(const sph::CartesianCoeffs& c, const Mat3& r) {
  sph::CartesianCoeffs out{sph::Coeffs(c[0].degree), sph::Coeffs(c[0].degree),
                           sph::Coeffs(c[0].degree)};
  const std::size_t n = c[0].values.size();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k)
      for (std::size_t q = 0; q < n; ++q) out[i].values[q] += r(i, k) * c[k].values[q];
  return out;
}

sph::CartesianCoeffs translate(const sph::CartesianCoeffs& c, const Vec3& d) {
  sph::CartesianCoeffs out = c;
  // A constant d has coefficient d * sqrt(4 pi) on Y_00.
  for (int k = 0; k < 3; ++k) out[k](0, 0) += d[k] * std::sqrt(4.0 * std::numbers::pi);
  return out;
}

Mat3 axis_rotation(char axis, double angle) {
  switch (axis) {
    case 'x':
      return Eigen::AngleAxisd(angle, Vec3::UnitX()).toRotationMatrix();
    case 'y':
      return Eigen::AngleAxisd(angle, Vec3::UnitY()).toRotationMatrix();
    case 'z':
      return Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
    default:
      throw std::invalid_argument(std::string("unknown rotation axis '") + axis + "'");
  }
}

double area(const SurfaceState& s, const sph::Grid& g) {
  double sum = 0.0;
  for (int i = 0; i < g.n_lat; ++i) {
    double row = 0.0;
    for (int j = 0; j < g.n_lon; ++j) row += s.jacobian[g.index(i, j)];
    sum += g.area_weight(i) * row;
  }
  return sum;
}

double volume(const SurfaceState& s, const sph::Grid& g) {
  double sum = 0.0;
  for (int i = 0; i < g.n_lat; ++i) {
    double row = 0.0;
    for (int j = 0; j < g.n_lon; ++j) {
      const std::size_t p = g.index(i, j);
      row += s.x[p].dot(s.nu[p]);
    }
    sum += g.area_weight(i) * row;
  }
  return sum / 3.0;
}

Vec3 closure(const SurfaceState& s, const sph::Grid& g) {
  Vec3 sum = Vec3::Zero();
  for (int i = 0; i < g.n_lat; ++i)
    for (int j = 0; j < g.n_lon; ++j) sum += g.area_weight(i) * s.nu[g.index(i, j)];
  return sum;
}

}  // namespace rbc::geom
