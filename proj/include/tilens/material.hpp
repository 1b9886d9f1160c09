#ifndef TILENS_MATERIAL_HPP
#define TILENS_MATERIAL_HPP

#include "tilens/fields.hpp"
#include "tilens/types.hpp"

namespace tilens {

// Transversely isotropic stiffness in squared-velocity units (density
// normalized out).  a13 carries no positivity requirement.
struct ElasticParams {
  double a11 = 0, a13 = 0, a33 = 0, a55 = 0, a66 = 0;
};

// Positivity plus max(a55,a66) < min(a11,a33); a11 > a55 strictly so the
// qP/qSV discriminant coefficients stay one-signed.
bool check_admissible(const ElasticParams& p);

// Anellipticity E^2 = (a11-a55)(a33-a55) - (a13+a55)^2.  Zero is the
// elliptic (Riemannian) case.
double e_squared(const ElasticParams& p);

// (E^2, a11, a33, a55) with a13 eliminated: the coordinates in which the
// qP/qSV Hamiltonian and its material sensitivities are expressed.  a66 is
// carried along for qSH.
struct ReducedParams {
  double e2 = 0, a11 = 0, a33 = 0, a55 = 0, a66 = 0;
};

ReducedParams reduce(const ElasticParams& p);

double& reduced_component(ReducedParams& p, Param which);
double reduced_component(const ReducedParams& p, Param which);

// ---------------------------------------------------------------------------
// Closed forms in the tilted-frame invariants u = |xi'|^2 (squared transverse
// part) and v = xi3^2 (squared axial part).  All waves: p is homogeneous of
// degree 2 in xi, so p(u,v) is linear along rays of (u,v).
//
// qSH:     p = a66 u + a55 v
// qP/qSV:  p = (a11+a55)u + (a33+a55)v +/- sqrt(S^2 - 4 E^2 u v),
//          S = (a11-a55)u + (a33-a55)v;  + is qP, - is qSV.
// ---------------------------------------------------------------------------

double uv_hamiltonian(const ReducedParams& rp, WaveMode w, double u, double v);

struct UVDerivs {
  double p = 0;
  double fu = 0;  // dp/du
  double fv = 0;  // dp/dv
};
UVDerivs uv_first_derivs(const ReducedParams& rp, WaveMode w, double u,
                         double v);

struct UVSecond {
  double p = 0, fu = 0, fv = 0;
  double fuu = 0, fvv = 0, fuv = 0;
};
UVSecond uv_second_derivs(const ReducedParams& rp, WaveMode w, double u,
                          double v);

// Sensitivities with respect to the active set (E^2, a11, a33) at fixed a55:
//   dp/dE^2  = -/+ 2uv / sqrt(R)
//   dp/da11  = u (1 +/- S/sqrt(R))
//   dp/da33  = v (1 +/- S/sqrt(R))
// Upper signs qP, lower qSV.  qSH has no dependence on the active set.
struct MaterialSens {
  double de2 = 0, da11 = 0, da33 = 0;
  double get(Param which) const {
    return which == Param::E2 ? de2 : which == Param::A11 ? da11 : da33;
  }
};
MaterialSens uv_sensitivities(const ReducedParams& rp, WaveMode w, double u,
                              double v);

// dp w.r.t. each raw elastic constant at fixed (u,v); feeds the spatial
// chain rule.
struct ElasticSens {
  double da11 = 0, da13 = 0, da33 = 0, da55 = 0, da66 = 0;
};
ElasticSens uv_elastic_derivs(const ElasticParams& p, WaveMode w, double u,
                              double v);

// ---------------------------------------------------------------------------
// Material field: the five stiffness fields, a layer function f whose
// gradient direction is the TI symmetry axis, and a constant background
// metric g0 (identity unless configured otherwise).
// ---------------------------------------------------------------------------

// g0-orthonormal frame with e3 along the axis (e3 . grad f > 0).  e1, e2 are
// completed deterministically by Gram-Schmidt against fixed seed axes; the
// Hamiltonian depends on them only through |xi'|^2.
struct TiltFrame {
  Vec3 e1, e2, e3;
};

struct TiltedCovector {
  double xi3 = 0;
  double xi_perp_sq = 0;
};

class MaterialField {
 public:
  MaterialField() = default;
  MaterialField(Box domain, FieldPtr a11, FieldPtr a13, FieldPtr a33,
                FieldPtr a55, FieldPtr a66, FieldPtr layer,
                Mat3 g0 = Mat3::Identity());

  static MaterialField uniform(const Box& domain, const ElasticParams& p,
                               FieldPtr layer, Mat3 g0 = Mat3::Identity());

  const Box& domain() const { return domain_; }
  const Mat3& g0() const { return g0_; }
  const Mat3& g0_inv() const { return g0_inv_; }
  const ScalarField& layer() const { return *layer_; }
  FieldPtr layer_ptr() const { return layer_; }
  const ScalarField& field(int i) const { return *fields_[i]; }  // a11..a66

  ElasticParams params_at(const Vec3& x) const;
  ReducedParams reduced_at(const Vec3& x) const;

  // Columns are the spatial gradients of (a11, a13, a33, a55, a66).
  Eigen::Matrix<double, 3, 5> param_gradients_at(const Vec3& x) const;

  // Unit symmetry-axis vector m = G0 df / |G0 df|_g0; throws ZeroGradient
  // when |df| degenerates.
  Vec3 axis_at(const Vec3& x) const;
  // d(axis)/dx, columns indexed by the differentiation direction.
  Mat3 axis_jacobian_at(const Vec3& x) const;

  TiltFrame tilt_frame(const Vec3& x) const;

 private:
  Box domain_;
  FieldPtr fields_[5];  // a11, a13, a33, a55, a66
  FieldPtr layer_;
  Mat3 g0_ = Mat3::Identity();
  Mat3 g0_inv_ = Mat3::Identity();
};

// Split an ambient covector into axial and transverse tilted invariants at x.
TiltedCovector to_tilted(const MaterialField& m, const Vec3& x,
                         const Vec3& xi);

double hamiltonian(const MaterialField& m, WaveMode w, const PhasePoint& pt);

struct HamiltonianDerivs {
  double p = 0;
  Vec3 dp_dx;
  Vec3 dp_dxi;
};
HamiltonianDerivs hamiltonian_derivs(const MaterialField& m, WaveMode w,
                                     const PhasePoint& pt);

// (1/2) d^2p/dxi_i dxi_j expressed in the tilted frame (e1,e2,e3).
Mat3 xi_hessian(const MaterialField& m, WaveMode w, const PhasePoint& pt);

// Full ambient-coordinate Hessian d^2p/dxi_i dxi_j (twice the half-Hessian,
// rotated); this is the Jacobian of the Hamilton map.
Mat3 xi_hessian_ambient(const MaterialField& m, WaveMode w,
                        const PhasePoint& pt);

MaterialSens material_sensitivities(const MaterialField& m, WaveMode w,
                                    const PhasePoint& pt);

}  // namespace tilens

#endif
