#pragma once

// Spherical-harmonic spectral core on a Gauss-latitude x uniform-longitude
// grid: transforms, surface gradient/divergence, point evaluation and the
// pole-rotated quadrature used by the boundary integrals.
//
// Real orthonormal harmonics:
//   Y_l0  = P_l0(cos t)
//   Y_lm  = sqrt(2) P_lm(cos t) cos(m p)     m > 0
//   Y_l-m = sqrt(2) P_lm(cos t) sin(m p)     m > 0
// with P_lm the fully normalized associated Legendre functions (no
// Condon-Shortley phase), so that the integral of Y_lm^2 over S^2 is 1.

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace rbc::sph {

class InvalidDegree : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct GaussLegendre {
  std::vector<double> nodes;    // ascending on [-1, 1]
  std::vector<double> weights;
};

GaussLegendre gauss_legendre(int n);

struct Grid {
  int degree = 0;
  int n_lat = 0;
  int n_lon = 0;
  std::vector<double> cos_theta;  // Gauss-Legendre nodes, theta ascending
  std::vector<double> sin_theta;
  std::vector<double> theta;
  std::vector<double> weights;    // Gauss weights in cos(theta), sum = 2
  std::vector<double> phi;

  std::size_t size() const { return static_cast<std::size_t>(n_lat) * n_lon; }
  std::size_t index(int i, int j) const {
    return static_cast<std::size_t>(i) * n_lon + j;
  }
  // Surface-area weight of every node in latitude row i.
  double area_weight(int i) const;
};

// n_lat = N+1, n_lon = 2N+2. Throws InvalidDegree for N < 4.
Grid build_grid(int degree);

constexpr int coeff_count(int degree) { return (degree + 1) * (degree + 1); }
constexpr int coeff_index(int l, int m) { return l * l + l + m; }
// Packed (l, m >= 0) index used by the Legendre tables.
constexpr int legendre_index(int l, int m) { return l * (l + 1) / 2 + m; }
constexpr int legendre_count(int degree) {
  return (degree + 1) * (degree + 2) / 2;
}

struct Coeffs {
  int degree = 0;
  std::vector<double> values;

  Coeffs() = default;
  explicit Coeffs(int n) : degree(n), values(coeff_count(n), 0.0) {}

  double& operator()(int l, int m) { return values[coeff_index(l, m)]; }
  double operator()(int l, int m) const { return values[coeff_index(l, m)]; }
};

// Zero-pads or truncates to a new degree.
Coeffs resize(const Coeffs& c, int degree);

using Samples = std::vector<double>;
using CartesianSamples = std::array<Samples, 3>;
using CartesianCoeffs = std::array<Coeffs, 3>;

// (theta, phi) components of a tangent field: (d/dtheta, 1/sin d/dphi).
struct TangentField {
  Samples theta;
  Samples phi;
};

CartesianCoeffs resize(const CartesianCoeffs& c, int degree);

// Normalized associated Legendre values at one point, packed by
// legendre_index. The sqrt(2) real-harmonic factor is folded in for m > 0.
//   value      P_lm
//   d_theta    dP_lm/dtheta
//   over_sin   P_lm / sin(theta)   (m >= 1; zero for m = 0)
// All three come from division-free recurrences, so points at or near the
// poles are fine.
struct LegendreRow {
  std::vector<double> value;
  std::vector<double> d_theta;
  std::vector<double> over_sin;
};

void legendre_values(int degree, double cos_theta, double sin_theta,
                     LegendreRow& out);

class Transform {
 public:
  explicit Transform(Grid grid);

  const Grid& grid() const { return grid_; }
  int degree() const { return grid_.degree; }

  Coeffs analyze(std::span<const double> f) const;
  Samples synthesize(const Coeffs& c) const;

  CartesianCoeffs analyze(const CartesianSamples& f) const;
  CartesianSamples synthesize(const CartesianCoeffs& c) const;

  // Spectral surface gradient of a band-limited field.
  TangentField gradient(const Coeffs& c) const;
  TangentField gradient(std::span<const double> f) const {
    return gradient(analyze(f));
  }

  // Spectral coefficients of the surface divergence, projected onto
  // degree N by integration against grad(Y_lm).
  Coeffs divergence_coeffs(const TangentField& v) const;
  Samples divergence(const TangentField& v) const {
    return synthesize(divergence_coeffs(v));
  }

 private:
  void check_samples(std::size_t n) const;
  void check_coeffs(const Coeffs& c) const;

  Grid grid_;
  int nleg_ = 0;
  // [i * nleg + k]
  std::vector<double> p_;
  std::vector<double> dp_;
  std::vector<double> q_;
  // [j * (N+1) + m]
  std::vector<double> cos_;
  std::vector<double> sin_;
};

inline Coeffs analyze(const Transform& t, std::span<const double> f) {
  return t.analyze(f);
}
inline Samples synthesize(const Transform& t, const Coeffs& c) {
  return t.synthesize(c);
}
inline TangentField gradient(const Transform& t, std::span<const double> f) {
  return t.gradient(f);
}
inline Samples divergence(const Transform& t, const TangentField& v) {
  return t.divergence(v);
}

struct SpherePoint {
  double theta = 0.0;
  double phi = 0.0;
};

// Pointwise evaluation of the truncated series.
std::vector<double> synthesize_at(const Coeffs& c,
                                  std::span<const SpherePoint> points);

struct PointGradient {
  double value = 0.0;
  double d_theta = 0.0;
  double d_phi = 0.0;  // (1/sin theta) d/dphi
};
PointGradient evaluate_with_gradient(const Coeffs& c, SpherePoint p);

// Quadrature on S^2 in a coordinate system whose north pole is the source
// point. Nodes are Gauss-Legendre in theta' on [0, pi] and uniform in phi';
// weights include sin(theta'), so a 1/r singularity at the source becomes a
// bounded, smooth integrand in (theta', phi').
struct RotatedNodes {
  std::vector<SpherePoint> points;        // original coordinates
  std::vector<Eigen::Vector3d> unit;      // unit vectors on S^2
  std::vector<double> weights;
};

struct RotatedRule {
  int n_theta = 0;
  int n_phi = 0;
  std::vector<double> theta;   // theta' nodes
  std::vector<double> weights; // per node, row-major (a * n_phi + b)

  int size() const { return n_theta * n_phi; }
};

// n_theta = quad_degree + 1, n_phi = 2 max(N, ceil(quad_degree / 2)) + 2.
RotatedRule rotated_rule(int degree, int quad_degree);

// Default rotated-rule resolution for a degree-N surface.
constexpr int default_quad_degree(int degree) { return 3 * degree; }

RotatedNodes rotated_nodes(SpherePoint source, const RotatedRule& rule);
inline RotatedNodes rotated_nodes(SpherePoint source, const Grid& grid) {
  return rotated_nodes(source,
                       rotated_rule(grid.degree, default_quad_degree(grid.degree)));
}

// Evaluates band-limited fields at the rotated nodes of every source point
// in one grid latitude. Sources at (theta_i, phi_j) share node colatitudes
// and differ by a shift phi_j in longitude, so the Legendre sums are done
// once per latitude and the longitude shift is a small dense product.
class RotatedEvaluator {
 public:
  enum class Kind { value, d_theta, d_phi };

  struct Request {
    const Coeffs* coeffs;
    Kind kind;
  };

  RotatedEvaluator(const Grid& grid, int quad_degree);

  const Grid& grid() const { return grid_; }
  const RotatedRule& rule() const { return rule_; }
  int n_nodes() const { return rule_.size(); }

  // Result column j holds the values for source (i, j); row q * R + r is
  // node q of request r.
  void evaluate(int lat, std::span<const Request> requests,
                Eigen::MatrixXd& out) const;

 private:
  struct LatitudeNodes {
    // Node positions for the source at (theta_i, 0).
    std::vector<double> cos_theta, sin_theta, phi;
  };

  Grid grid_;
  RotatedRule rule_;
  int nleg_ = 0;
  std::vector<LatitudeNodes> nodes_;
  Eigen::MatrixXd trig_;  // (2N+1) x n_lon: cos(m phi_j) rows, sin rows
};

}  // namespace rbc::sph
