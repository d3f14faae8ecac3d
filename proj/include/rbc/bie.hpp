#pragma once

// Stokes boundary integrals for a closed membrane: kernels, rotated-pole
// quadrature of the single layer and the deflated double layer, the
// Galerkin residual g(x, u, t) and its directional derivatives.
//
// The residual at a source point chi is
//   u(chi) + (lambda-1)/(8 pi) int K (u - u(chi)) J  - u_inf(chi)
//          + 1/(8 pi mu) int G f
// where both integrals are over the unit sphere parameter domain and f is
// the membrane force per unit sphere area.

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "rbc/geom.hpp"
#include "rbc/shell.hpp"
#include "rbc/sph.hpp"

namespace rbc::bie {

using geom::Mat3;
using geom::Vec3;
using Vector = Eigen::VectorXd;

struct FluidParams {
  double mu = 1.0;
  double lambda = 5.0;

  void validate() const;
};

struct AmbientFlow {
  enum class Kind { quiescent, shear, parabolic, uniform };

  Kind kind = Kind::quiescent;
  double rate = 0.0;   // shear rate k
  double a = 0.0;      // parabolic amplitude
  double b = 0.0;      // parabolic offset
  Vec3 velocity = Vec3::Zero();  // uniform flow

  static AmbientFlow quiescent();
  static AmbientFlow shear(double k);
  static AmbientFlow parabolic(double a, double b);
  static AmbientFlow uniform(const Vec3& v);

  Vec3 at(const Vec3& x) const;
  // du_i / dx_j
  Mat3 gradient(const Vec3& x) const;
};

class SingularEvaluation : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// G = (I + rr^T / |r|^2) / |r|, r = chi - xi.
Mat3 kernel_G(const Vec3& chi, const Vec3& xi);
// K = 6 (r.n) r r^T / |r|^5.
Mat3 kernel_K(const Vec3& chi, const Vec3& xi, const Vec3& n_xi);

// Per-source quadratures by pointwise evaluation at the rotated nodes.
// `f` is given per unit area of the unit sphere.
Vec3 single_layer(const geom::SurfaceState& cur, const sph::CartesianCoeffs& f,
                  sph::SpherePoint source, const sph::RotatedRule& rule);
Vec3 double_layer_deflated(const geom::SurfaceState& cur,
                           const sph::CartesianCoeffs& u,
                           sph::SpherePoint source, const sph::RotatedRule& rule);
// Quadrature of int K dgamma; -4 pi I for a closed surface.
Mat3 double_layer_identity(const geom::SurfaceState& cur, sph::SpherePoint source,
                           const sph::RotatedRule& rule);

// Packing of three coefficient sets as [x | y | z].
Vector pack(const sph::CartesianCoeffs& c);
sph::CartesianCoeffs unpack(const Vector& v, int degree);

struct ProblemConfig {
  int degree = 8;
  FluidParams fluid;
  AmbientFlow flow;
  shell::MaterialParams material;
  int quad_degree = 0;   // <= 0: sph::default_quad_degree(degree)
  int shell_degree = 0;  // shell grid degree; <= degree means unpadded
  int threads = 1;
  std::size_t cache_limit_bytes = std::size_t{1} << 30;
};

struct VelocitySolve {
  Vector u;
  int iterations = 0;
  double residual_norm = 0.0;  // |g(x, u)| / |g(x, 0)|
};

class LinearSolveFailure : public std::runtime_error {
 public:
  LinearSolveFailure(const std::string& what, int iterations, double residual)
      : std::runtime_error(what), iterations(iterations), residual(residual) {}
  int iterations;
  double residual;
};

class BoundaryProblem {
 public:
  BoundaryProblem(const sph::CartesianCoeffs& reference, const ProblemConfig& config);
  ~BoundaryProblem();
  BoundaryProblem(const BoundaryProblem&) = delete;
  BoundaryProblem& operator=(const BoundaryProblem&) = delete;

  int degree() const { return config_.degree; }
  std::size_t size() const;
  const ProblemConfig& config() const { return config_; }
  const sph::Transform& transform() const { return transform_; }
  const shell::Mechanics& mechanics() const { return mechanics_; }
  const sph::RotatedRule& rule() const;

  Vector residual(const Vector& x, const Vector& u, double t) const;

  // Fixes the linearization point for subsequent jvp calls.
  void linearize(const Vector& x, const Vector& u, double t);
  bool linearized() const;
  // D1 g . dx + lambda D2 g . du at the linearization point.
  Vector jvp(const Vector& dx, const Vector& du, double lambda) const;

  // u with g(x, u, t) = 0 to relative tolerance tol (GMRES, restart 40),
  // optionally starting from a guess.
  VelocitySolve solve_velocity(const Vector& x, double t, double tol = 1e-6,
                               int restart = 40, int max_iterations = 400,
                               const Vector* guess = nullptr) const;

 private:
  struct Fields;
  struct Linearization;

  Fields fields(const sph::CartesianCoeffs& x, const sph::CartesianCoeffs& u,
                const sph::CartesianCoeffs& f) const;
  Vector apply_velocity_operator(const Linearization& lin, const Vector& du,
                                 double lambda) const;

  ProblemConfig config_;
  sph::Transform transform_;
  shell::Mechanics mechanics_;
  std::unique_ptr<sph::RotatedEvaluator> evaluator_;
  std::unique_ptr<Linearization> lin_;
};

}  // namespace rbc::bie
