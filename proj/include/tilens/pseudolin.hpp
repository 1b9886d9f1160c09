#ifndef TILENS_PSEUDOLIN_HPP
#define TILENS_PSEUDOLIN_HPP

#include <array>
#include <functional>

#include "tilens/raytrace.hpp"

namespace tilens {

// ---------------------------------------------------------------------------
// Pseudolinearization along rays (Stefanov-Uhlmann identity).
//
// For a ray gamma of the medium under study and a comparison medium with
// Hamiltonian p~, the difference of the exit covectors of the two flows from
// a shared entry point equals a time integral along gamma:
//
//   Xi(tau) - Xi~(tau)  =  int_0^tau  A(t) d_x f + B(t) d_xi f  dt,
//   f = p - p~,
//
// where A(t), B(t) are (minus/plus) the covector-row Jacobians of the
// comparison flow over the remaining time tau - t, restarted from gamma(t).
// Writing f = sum_l f_l dP/dnu_l-averages turns the right-hand side into a
// transform that is exactly linear in the parameter difference f_l: travel
// data differences become weighted ray integrals of f_l with no
// linearization error.
// ---------------------------------------------------------------------------

struct VariationalOptions {
  double rtol = 1e-9;
  double atol = 1e-11;
  double fd_step = 1e-6;  // phase-space step for the flow-field Jacobian
};

// dXi~/dx and dXi~/dxi of the comparison flow over the remaining travel
// time, at each stored sample of the source ray.  Row index is the exit
// covector component, column index the start-point coordinate.  At the exit
// sample the flow runs for zero time, so dxi_dxi = I and dxi_dx = 0 exactly.
struct FlowJacobian {
  std::vector<double> t;
  std::vector<Mat3> dxi_dx;
  std::vector<Mat3> dxi_dxi;
};

// Jacobian of the comparison flow over a single fixed time span t_flow
// starting at pt, via the variational (linearized-flow) ODE.
void flow_jacobian_at(const MaterialField& comparison, WaveMode wave,
                      const PhasePoint& pt, double t_flow, Mat3& dxi_dx,
                      Mat3& dxi_dxi, const VariationalOptions& opt = {});

FlowJacobian flow_jacobian(const MaterialField& comparison, WaveMode wave,
                           const Bicharacteristic& ray,
                           const VariationalOptions& opt = {});

// ---------------------------------------------------------------------------
// Segment-averaged sensitivities.
// ---------------------------------------------------------------------------

struct SegmentOptions {
  int panels = 8;        // initial Gauss-Legendre(8) panels on s in [0,1]
  double tol = 1e-12;    // per-panel acceptance for adaptive bisection
  int max_depth = 12;    // refinement levels under each initial panel
};

// E^l(x, xi) = int_0^1 dP/dnu_l(s nu + (1-s) nu~, x, xi) ds over the active
// set (E2, a11, a33), the straight-segment average of the material
// sensitivities between the two media's parameters at x.  By construction
//   p(x,xi) - p~(x,xi) = sum_l (nu_l - nu~_l) E^l(x,xi)
// exactly, which is what removes the linearization error.  The media must
// share the layer geometry (and a55, a66) for that identity to close.
// Throws SegmentInadmissibleError when the blended parameters leave the
// admissible cone or their discriminant collapses at this covector.
Vec3 segment_weights(const MaterialField& m, const MaterialField& m_tilde,
                     WaveMode wave, const PhasePoint& pt,
                     const SegmentOptions& opt = {});

// f_l(x) = nu_l(x) - nu~_l(x) over (E2, a11, a33).
Vec3 param_diff(const MaterialField& m, const MaterialField& m_tilde,
                const Vec3& x);

// ---------------------------------------------------------------------------
// Weight systems along a ray.
// ---------------------------------------------------------------------------

struct PseudolinOptions {
  VariationalOptions var;
  SegmentOptions segment;
  TraceOptions trace;
  double fd_step_param = 1e-5;  // step for E^l gradients and d_x f_l
  int deriv_component = 2;      // the fixed axis j of the reduced transform
  // Quadrature panels are the ray's accepted-step intervals, subdivided so
  // that no panel exceeds tau / min_panels: the flow integrator only
  // resolves the Hamiltonian's scale, not that of an integrand like d_j f.
  int min_panels = 16;
};

// A, B and the parameter-resolved weights at the stored ray samples:
//   a(i,j)      = -dXi~_i/dxi_j          (the A^j_i weight)
//   b(i,j)      = +dXi~_i/dx^j           (the B_ij weight)
//   e[l]        = segment weight E^l
//   a_hat[l]    = E^l * a                (weight of d_x f_l)
//   b_hat(i,l)  = sum_j a(i,j) dE^l/dx_j + b(i,j) dE^l/dxi_j
//                                        (weight of f_l itself)
// At the exit sample a = -I and b = 0, so a_hat[l] = -E^l I with E^l equal
// to the pointwise sensitivity when the media agree there.
struct RayWeights {
  std::vector<double> t;
  std::vector<Mat3> a;
  std::vector<Mat3> b;
  std::vector<Vec3> e;
  std::vector<std::array<Mat3, 3>> a_hat;
  std::vector<Mat3> b_hat;
};

RayWeights pseudolin_weights(const MaterialField& m,
                             const MaterialField& m_tilde, WaveMode wave,
                             const Bicharacteristic& ray,
                             const PseudolinOptions& opt = {});

// ---------------------------------------------------------------------------
// The identity residual over a fan.
// ---------------------------------------------------------------------------

struct RayIdentity {
  size_t fan_index = 0;
  PhasePoint entry;
  Vec3 j = Vec3::Zero();          // time integral J_i
  Vec3 flow_diff = Vec3::Zero();  // Xi(tau) - Xi~(tau), fixed-time oracle
  Vec3 exit_diff = Vec3::Zero();  // Xi(tau) - Xi~(tau~), lens endpoints
  double tau = 0;
  double tau_tilde = 0;
};

struct IdentityReport {
  std::vector<RayIdentity> rays;
  std::vector<FailedRay> failed;
};

// Traces the fan in both media from shared (m-normalized) entries and
// evaluates the identity per ray.  j - flow_diff measures the numerical
// residual of the identity itself (exact up to quadrature); exit_diff is
// the observable lens difference, equal to flow_diff whenever the media
// agree near the boundary.  Composite Gauss-Legendre(8) on the adaptive
// step intervals of the source ray.
IdentityReport pseudolin_residuals(const MaterialField& m,
                                   const MaterialField& m_tilde,
                                   const ShootingSpec& spec,
                                   const PseudolinOptions& opt = {});

// ---------------------------------------------------------------------------
// Reduced scalar transform: the diagonal part of the identity.
// ---------------------------------------------------------------------------

// Quadrature nodes of the reduced transform along one ray: at each node the
// weight multiplying d_j f_l is -flow_diag * e[l], with flow_diag the (j,j)
// entry of dXi~/dxi over the remaining time.  Exposed so that callers
// assembling many integrals against different f_l (e.g. voxel bases) reuse
// the expensive restarts.
struct TransformNodes {
  std::vector<double> t;
  std::vector<double> dt;  // quadrature weights
  std::vector<Vec3> x;
  std::vector<double> flow_diag;
  std::vector<Vec3> e;
};

TransformNodes transform_nodes(const MaterialField& m,
                               const MaterialField& m_tilde, WaveMode wave,
                               const Bicharacteristic& ray,
                               const PseudolinOptions& opt = {});

// int -dXi~_j/dxi_j E^l d_j f_l dt along the ray, with f_l the pointwise
// parameter difference of the media.  The weight tends to -dP/dnu_l at the
// boundary (zero remaining time), so short rays reduce to X-ray-type
// integrals with a nonvanishing weight.
double weighted_ray_integral(const MaterialField& m,
                             const MaterialField& m_tilde, WaveMode wave,
                             Param l, const Bicharacteristic& ray,
                             const PseudolinOptions& opt = {});

// Same transform applied to an externally supplied f_l; the weights still
// come from the media pair.  This is the slot in which the transform is
// exactly linear.
double weighted_ray_integral(const MaterialField& m,
                             const MaterialField& m_tilde, WaveMode wave,
                             Param l, const Bicharacteristic& ray,
                             const std::function<double(const Vec3&)>& f_l,
                             const PseudolinOptions& opt = {});

}  // namespace tilens

#endif
