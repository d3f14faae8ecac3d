#pragma once

// Elastic thin-shell membrane: neo-Hookean in-plane response, linear
// bending, out-of-plane shear, and the force per unit area of S^2 together
// with its directional derivative with respect to the configuration.

#include <stdexcept>
#include <vector>

#include "rbc/geom.hpp"
#include "rbc/sph.hpp"

namespace rbc::shell {

using geom::Mat2;
using geom::Mat32;
using geom::Vec3;

struct MaterialParams {
  double E_S = 12.4;
  double E_D = 200.0;
  double E_B = 0.0669;

  // Throws std::invalid_argument unless all moduli are positive and
  // E_D >= E_S.
  void validate() const;
};

class InvalidDeformation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Closed-form 2x2 inverse; throws InvalidDeformation when
// |det| <= 1e-14 * |m|^2.
Mat2 inverse2(const Mat2& m);

struct Kinematics {
  std::vector<Mat2> strain;     // eps = 1/2 A^-1 (a - A)
  std::vector<Mat2> curvature;  // kappa = A^-1 (b - B)
  std::vector<Mat2> stretch;    // C = 2 eps + I
};

Kinematics kinematics(const geom::ReferenceSurface& ref,
                      const geom::SurfaceState& cur);

// n = E_S I + (E_D/2 log det C - E_S) C^-T. Throws InvalidDeformation if
// det C <= 0.
Mat2 tension(const Mat2& strain, const MaterialParams& mat);
// m = E_B kappa^T
Mat2 moment(const Mat2& curvature, const MaterialParams& mat);

struct MembraneLoad {
  geom::SurfaceState current;     // on the shell grid
  Kinematics kin;
  std::vector<Mat2> stretch_inv_t;  // C^-T
  std::vector<double> log_det;      // log det C
  std::vector<Mat2> tension;        // n
  std::vector<Mat2> moment;         // m
  std::vector<Vec3> r;              // -div(grad x A^-1 m J_Xi)
  std::vector<Vec3> projected_r;    // P r
  std::vector<Mat32> shear;         // n q
  std::vector<Mat32> resultant;     // (grad x A^-1 n + grad n A^-1 m + n q) J_Xi
  sph::CartesianCoeffs force;       // per unit S^2 area, working degree
};

// Holds the reference surface on the shell grid. The shell grid degree may
// exceed the working degree (padding against aliasing in the nonlinear
// products); forces are returned truncated to the working degree.
class Mechanics {
 public:
  Mechanics(const sph::CartesianCoeffs& reference, int working_degree,
            const MaterialParams& mat, int shell_degree = 0);

  int working_degree() const { return working_degree_; }
  const sph::Transform& transform() const { return transform_; }
  const geom::ReferenceSurface& reference() const { return ref_; }
  const MaterialParams& material() const { return mat_; }

  MembraneLoad load(const sph::CartesianCoeffs& xhat) const;
  sph::CartesianCoeffs force(const sph::CartesianCoeffs& xhat) const {
    return load(xhat).force;
  }
  sph::CartesianCoeffs force_derivative(const MembraneLoad& load,
                                        const sph::CartesianCoeffs& dx) const;

 private:
  // -div of each row of a 3x2 field, as working-degree coefficients when
  // truncate is set, otherwise at shell degree.
  sph::CartesianCoeffs row_divergence(const std::vector<Mat32>& t,
                                      bool truncate) const;

  int working_degree_;
  MaterialParams mat_;
  sph::Transform transform_;
  geom::ReferenceSurface ref_;
  std::vector<Mat2> ref_inv_;       // A^-1
};

// Free-function forms on a shared grid.
sph::CartesianCoeffs membrane_force(const geom::ReferenceSurface& ref,
                                    const geom::SurfaceState& cur,
                                    const MaterialParams& mat,
                                    const sph::Transform& t);
sph::CartesianCoeffs membrane_force_derivative(
    const geom::ReferenceSurface& ref, const geom::SurfaceState& cur,
    const MaterialParams& mat, const sph::Transform& t,
    const sph::CartesianCoeffs& dx);

}  // namespace rbc::shell
