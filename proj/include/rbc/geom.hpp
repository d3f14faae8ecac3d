#pragma once

// Sphere-diffeomorphic surfaces: the biconcave reference shape and the
// geometry derived from a spectral embedding x(theta, phi).
//
// Conventions:
//   grad x     3x2, columns (dx/dtheta, (1/sin theta) dx/dphi)
//   nu         grad_theta x  cross  grad_phi x   (outward on a sphere)
//   jacobian   |nu|, area of the surface per unit area of S^2
//   a          grad x^T grad x
//   b          grad x^T grad n    (b = a = I on the unit sphere)

#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "rbc/sph.hpp"

namespace rbc::geom {

using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat32 = Eigen::Matrix<double, 3, 2>;

class DegenerateSurface : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SurfaceState {
  sph::CartesianCoeffs xhat;
  std::vector<Vec3> x;
  std::vector<Mat32> grad;
  std::vector<Vec3> nu;
  std::vector<Vec3> normal;
  std::vector<double> jacobian;
  std::vector<Mat2> a;
  std::vector<Mat2> b;
  std::vector<Mat32> grad_normal;

  std::size_t size() const { return x.size(); }
};

using ReferenceSurface = SurfaceState;

// Relative jacobian floor below which a surface counts as folded.
inline constexpr double degenerate_tolerance = 1e-8;

// Builds every cached field from the coefficients. The coefficients may be
// of lower degree than the transform; they are zero-padded.
// Throws DegenerateSurface if jacobian <= tol * max(jacobian) anywhere.
SurfaceState surface_state(const sph::CartesianCoeffs& xhat,
                           const sph::Transform& transform);

// Biconcave disk with maximum radius alpha.
Vec3 biconcave_point(double alpha, double theta, double phi);
sph::CartesianCoeffs biconcave_coeffs(double alpha, const sph::Transform& t);
ReferenceSurface biconcave_reference(double alpha, const sph::Transform& t);

sph::CartesianCoeffs sphere_coeffs(double radius, const sph::Transform& t);

// Rigid motions act linearly on the Cartesian coefficient triples.
sph::CartesianCoeffs rotate(const sph::CartesianCoeffs& c, const Mat3& r);
sph::CartesianCoeffs translate(const sph::CartesianCoeffs& c, const Vec3& d);
Mat3 axis_rotation(char axis, double angle_rad);

double area(const SurfaceState& s, const sph::Grid& g);
double volume(const SurfaceState& s, const sph::Grid& g);
// Weighted sum of nu over the surface; zero for a closed surface.
Vec3 closure(const SurfaceState& s, const sph::Grid& g);

}  // namespace rbc::geom
