#include "rbc/shell.hpp"

#include <cmath>
#include <string>

namespace rbc::shell {

namespace {

// Column order of the out-of-plane shear bracket. The default pairs the
// theta column with grad_phi x (P r); defining RBC_SHEAR_COLUMNS_SWAPPED
// exchanges the two columns.
#ifdef RBC_SHEAR_COLUMNS_SWAPPED
constexpr bool swap_shear_columns = true;
#else
constexpr bool swap_shear_columns = false;
#endif

double det2(const Mat2& m) { return m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0); }

Mat32 shear_bracket(const Vec3& g_theta, const Vec3& g_phi, const Vec3& pr) {
  Mat32 out;
  out.col(0) = g_phi.cross(pr);
  out.col(1) = pr.cross(g_theta);
  if constexpr (swap_shear_columns) out = out.rowwise().reverse().eval();
  return out;
}

Mat32 bracket_derivative(const Vec3& g_theta, const Vec3& g_phi,
                         const Vec3& dg_theta, const Vec3& dg_phi,
                         const Vec3& pr, const Vec3& dpr) {
  Mat32 out;
  out.col(0) = dg_phi.cross(pr) + g_phi.cross(dpr);
  out.col(1) = pr.cross(dg_theta) + dpr.cross(g_theta);
  if constexpr (swap_shear_columns) out = out.rowwise().reverse().eval();
  return out;
}

std::vector<Mat32> gradient_rows(const sph::Transform& t,
                                 const sph::CartesianCoeffs& c) {
  std::vector<Mat32> out(t.grid().size());
  for (int k = 0; k < 3; ++k) {
    const sph::TangentField g = t.gradient(c[k]);
    for (std::size_t p = 0; p < out.size(); ++p) {
      out[p](k, 0) = g.theta[p];
      out[p](k, 1) = g.phi[p];
    }
  }
  return out;
}

std::vector<Mat32> gradient_rows(const sph::Transform& t,
                                 const std::vector<Vec3>& v) {
  sph::CartesianCoeffs c;
  for (int k = 0; k < 3; ++k) {
    sph::Samples s(v.size());
    for (std::size_t p = 0; p < v.size(); ++p) s[p] = v[p][k];
    c[k] = t.analyze(s);
  }
  return gradient_rows(t, c);
}

std::vector<Vec3> to_points(const sph::Transform& t,
                            const sph::CartesianCoeffs& c) {
  const sph::CartesianSamples s = t.synthesize(c);
  std::vector<Vec3> out(s[0].size());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = {s[0][p], s[1][p], s[2][p]};
  return out;
}

}  // namespace

void MaterialParams::validate() const {
  if (!(E_S > 0.0 && E_D > 0.0 && E_B > 0.0)) {
    throw std::invalid_argument("material moduli must be positive");
  }
  if (E_D < E_S) {
    throw std::invalid_argument("dilatational modulus must be >= shear modulus");
  }
}

Mat2 inverse2(const Mat2& m) {
  const double det = det2(m);
  const double scale = m.squaredNorm();
  if (!(std::abs(det) > 1e-14 * scale)) {
    throw InvalidDeformation("singular 2x2 matrix in shell kinematics");
  }
  Mat2 inv;
  inv << m(1, 1), -m(0, 1), -m(1, 0), m(0, 0);
  return inv / det;
}

Kinematics kinematics(const geom::ReferenceSurface& ref,
                      const geom::SurfaceState& cur) {
  if (ref.size() != cur.size()) {
    throw sph::DimensionMismatch("reference and current grids differ");
  }
  Kinematics k;
  k.strain.resize(ref.size());
  k.curvature.resize(ref.size());
  k.stretch.resize(ref.size());
  for (std::size_t p = 0; p < ref.size(); ++p) {
    const Mat2 ainv = inverse2(ref.a[p]);
    k.strain[p] = 0.5 * ainv * (cur.a[p] - ref.a[p]);
    k.curvature[p] = ainv * (cur.b[p] - ref.b[p]);
    k.stretch[p] = 2.0 * k.strain[p] + Mat2::Identity();
  }
  return k;
}

Mat2 tension(const Mat2& strain, const MaterialParams& mat) {
  const Mat2 c = 2.0 * strain + Mat2::Identity();
  const double det = det2(c);
  if (!(det > 0.0)) throw InvalidDeformation("det C <= 0 in constitutive law");
  const double s = 0.5 * mat.E_D * std::log(det) - mat.E_S;
  return mat.E_S * Mat2::Identity() + s * inverse2(c).transpose();
}

Mat2 moment(const Mat2& curvature, const MaterialParams& mat) {
  return mat.E_B * curvature.transpose();
}

Mechanics::Mechanics(const sph::CartesianCoeffs& reference, int working_degree,
                     const MaterialParams& mat, int shell_degree)
    : working_degree_(working_degree),
      mat_(mat),
      transform_(sph::build_grid(std::max(working_degree, shell_degree))),
      ref_(geom::surface_state(reference, transform_)) {
  mat_.validate();
  ref_inv_.resize(ref_.size());
  for (std::size_t p = 0; p < ref_.size(); ++p) ref_inv_[p] = inverse2(ref_.a[p]);
}

sph::CartesianCoeffs Mechanics::row_divergence(const std::vector<Mat32>& t,
                                               bool truncate) const {
  const std::size_t n = t.size();
  sph::CartesianCoeffs out;
  sph::TangentField v{sph::Samples(n), sph::Samples(n)};
  for (int k = 0; k < 3; ++k) {
    for (std::size_t p = 0; p < n; ++p) {
      v.theta[p] = t[p](k, 0);
      v.phi[p] = t[p](k, 1);
    }
    sph::Coeffs c = transform_.divergence_coeffs(v);
    for (double& x : c.values) x = -x;
    out[k] = truncate ? sph::resize(c, working_degree_) : std::move(c);
  }
  return out;
}

MembraneLoad Mechanics::load(const sph::CartesianCoeffs& xhat) const {
  MembraneLoad L;
  L.current = geom::surface_state(xhat, transform_);
  const geom::SurfaceState& cur = L.current;
  const std::size_t n = cur.size();
  L.kin = kinematics(ref_, cur);
  L.stretch_inv_t.resize(n);
  L.log_det.resize(n);
  L.tension.resize(n);
  L.moment.resize(n);

  std::vector<Mat32> bend(n);
  for (std::size_t p = 0; p < n; ++p) {
    const Mat2& c = L.kin.stretch[p];
    const double det = det2(c);
    if (!(det > 0.0)) {
      throw InvalidDeformation("det C <= 0 at grid point " + std::to_string(p));
    }
    L.stretch_inv_t[p] = inverse2(c).transpose();
    L.log_det[p] = std::log(det);
    const double s = 0.5 * mat_.E_D * L.log_det[p] - mat_.E_S;
    L.tension[p] = mat_.E_S * Mat2::Identity() + s * L.stretch_inv_t[p];
    L.moment[p] = moment(L.kin.curvature[p], mat_);
    bend[p] = cur.grad[p] * ref_inv_[p] * L.moment[p] * ref_.jacobian[p];
  }

  L.r = to_points(transform_, row_divergence(bend, false));
  L.projected_r.resize(n);
  L.shear.resize(n);
  L.resultant.resize(n);
  for (std::size_t p = 0; p < n; ++p) {
    const Vec3& nn = cur.normal[p];
    L.projected_r[p] = L.r[p] - nn * nn.dot(L.r[p]);
    L.shear[p] = shear_bracket(cur.grad[p].col(0), cur.grad[p].col(1),
                               L.projected_r[p]) /
                 (ref_.jacobian[p] * cur.jacobian[p]);
    L.resultant[p] = (cur.grad[p] * ref_inv_[p] * L.tension[p] +
                      cur.grad_normal[p] * ref_inv_[p] * L.moment[p] + L.shear[p]) *
                     ref_.jacobian[p];
  }
  L.force = row_divergence(L.resultant, true);
  return L;
}

sph::CartesianCoeffs Mechanics::force_derivative(
    const MembraneLoad& L, const sph::CartesianCoeffs& dx_in) const {
  const geom::SurfaceState& cur = L.current;
  const std::size_t n = cur.size();
  const sph::CartesianCoeffs dx = sph::resize(dx_in, transform_.degree());
  const std::vector<Mat32> dgrad = gradient_rows(transform_, dx);

  std::vector<double> djac(n);
  std::vector<Vec3> dnormal(n);
  for (std::size_t p = 0; p < n; ++p) {
    const Mat32& g = cur.grad[p];
    const Vec3 dnu = dgrad[p].col(0).cross(g.col(1)) + g.col(0).cross(dgrad[p].col(1));
    const Vec3& nn = cur.normal[p];
    djac[p] = nn.dot(dnu);
    dnormal[p] = (dnu - nn * nn.dot(dnu)) / cur.jacobian[p];
  }
  const std::vector<Mat32> dgrad_n = gradient_rows(transform_, dnormal);

  std::vector<Mat2> dtension(n), dmoment(n);
  std::vector<Mat32> dbend(n);
  for (std::size_t p = 0; p < n; ++p) {
    const Mat32& g = cur.grad[p];
    const Mat2& ainv = ref_inv_[p];
    const Mat2 da = dgrad[p].transpose() * g + g.transpose() * dgrad[p];
    const Mat2 dc = ainv * da;
    const Mat2 db = dgrad[p].transpose() * cur.grad_normal[p] + g.transpose() * dgrad_n[p];
    const Mat2 dkappa = ainv * db;
    const Mat2& cit = L.stretch_inv_t[p];
    const double s = 0.5 * mat_.E_D * L.log_det[p] - mat_.E_S;
    const double tr = (cit.transpose() * dc).trace();
    dtension[p] = 0.5 * mat_.E_D * tr * cit - s * cit * dc.transpose() * cit;
    dmoment[p] = mat_.E_B * dkappa.transpose();
    dbend[p] = (dgrad[p] * ainv * L.moment[p] + g * ainv * dmoment[p]) * ref_.jacobian[p];
  }
  const std::vector<Vec3> dr = to_points(transform_, row_divergence(dbend, false));

  std::vector<Mat32> dres(n);
  for (std::size_t p = 0; p < n; ++p) {
    const Mat32& g = cur.grad[p];
    const Mat2& ainv = ref_inv_[p];
    const Vec3& nn = cur.normal[p];
    const Vec3& r = L.r[p];
    const Vec3 dpr = dr[p] - nn * nn.dot(dr[p]) - nn.dot(r) * dnormal[p] -
                     dnormal[p].dot(r) * nn;
    const Mat32 dshear =
        -(djac[p] / cur.jacobian[p]) * L.shear[p] +
        bracket_derivative(g.col(0), g.col(1), dgrad[p].col(0), dgrad[p].col(1),
                           L.projected_r[p], dpr) /
            (ref_.jacobian[p] * cur.jacobian[p]);
    dres[p] = (dgrad[p] * ainv * L.tension[p] + g * ainv * dtension[p] +
               dgrad_n[p] * ainv * L.moment[p] + cur.grad_normal[p] * ainv * dmoment[p] +
               dshear) *
              ref_.jacobian[p];
  }
  return row_divergence(dres, true);
}

sph::CartesianCoeffs membrane_force(const geom::ReferenceSurface& ref,
                                    const geom::SurfaceState& cur,
                                    const MaterialParams& mat,
                                    const sph::Transform& t) {
  const Mechanics mech(ref.xhat, t.degree(), mat);
  return mech.load(cur.xhat).force;
}

sph::CartesianCoeffs membrane_force_derivative(
    const geom::ReferenceSurface& ref, const geom::SurfaceState& cur,
    const MaterialParams& mat, const sph::Transform& t,
    const sph::CartesianCoeffs& dx) {
  const Mechanics mech(ref.xhat, t.degree(), mat);
  return mech.force_derivative(mech.load(cur.xhat), dx);
}

}  // namespace rbc::shell
