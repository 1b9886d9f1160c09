#ifndef TILENS_RAYTRACE_HPP
#define TILENS_RAYTRACE_HPP

#include <functional>
#include <string>
#include <vector>

#include "tilens/integrate.hpp"
#include "tilens/material.hpp"

namespace tilens {

// Implicit stop surface: negative inside the domain, zero on the surface.
struct StopSurface {
  std::string id;
  std::function<double(const Vec3&)> value;
};

// The six faces of an axis-aligned box ("x_min", "x_max", ..., "z_max").
std::vector<StopSurface> box_surfaces(const Box& box);

// Level set {f = level} of a foliation function, oriented so the side with
// f > level is the inside.
StopSurface foliation_surface(FieldPtr f, double level, std::string id);

struct RaySample {
  double t = 0;
  Vec3 x = Vec3::Zero();
  Vec3 xi = Vec3::Zero();
};

struct Bicharacteristic {
  WaveMode wave = WaveMode::QP;
  double p0 = 0;                     // conserved Hamiltonian value
  std::vector<RaySample> samples;    // uniform in t, endpoints included
  OdeSolution flow;                  // dense output of (X, Xi) on [0, tau]
  double tau = 0;                    // final time (exit time when exited)
  bool exited = false;
  std::string exit_surface;
  double conservation_residual = 0;  // max |p - p0| / p0 along the ray

  PhasePoint at(double t) const;
};

struct TraceOptions {
  double t_max = 10.0;
  double rtol = 1e-10;
  double atol = 1e-12;
  double drift_tol = 1e-8;   // relative conservation bound
  int max_tol_halvings = 6;  // re-runs allowed when the drift bound trips
  int n_samples = 33;
  bool require_exit = true;  // MaxTimeExceededError when no surface is hit
};

// Hamiltonian flow xdot = dp/dxi, xidot = -dp/dx from `start` until the
// first stop surface (or t_max).  The conserved p certifies the run: if the
// relative drift exceeds drift_tol the integration re-runs at halved
// tolerances.
Bicharacteristic integrate_flow(const MaterialField& m, WaveMode wave,
                                const PhasePoint& start,
                                const std::vector<StopSurface>& stops,
                                const TraceOptions& opt = {});

// Rescale the covector so p(x, xi) = 1.
PhasePoint normalize_entry(const MaterialField& m, WaveMode wave,
                           const PhasePoint& pt);

struct LensRecord {
  PhasePoint entry;
  PhasePoint exit;
  double tau = 0;
  std::string exit_surface;
  WaveMode wave = WaveMode::QP;
};

struct ShootingSpec {
  std::vector<PhasePoint> fan;  // entry phase points, normalized internally
  WaveMode wave = WaveMode::QP;
  std::vector<StopSurface> stops;
};

struct FailedRay {
  size_t index = 0;
  std::string reason;
};

struct LensResult {
  std::vector<LensRecord> records;          // one per exited fan entry
  std::vector<size_t> record_fan_index;     // fan index of each record
  std::vector<FailedRay> failed;
};

LensResult lens_relation(const MaterialField& m, const ShootingSpec& spec,
                         const TraceOptions& opt = {});

// ---------------------------------------------------------------------------
// Hamilton map xi -> dp/dxi(x, .) and its local inverse.
// ---------------------------------------------------------------------------

Vec3 hamilton_map(const MaterialField& m, WaveMode w, const Vec3& x,
                  const Vec3& xi);

struct NewtonOptions {
  int max_iter = 60;
  double tol = 1e-12;       // residual tolerance on the reduced system
  double roundtrip_tol = 1e-9;
};

// Damped Newton on the homogeneity-reduced problem: find (xi_hat, lambda)
// with p(xi_hat) = 1 and H(xi_hat) = lambda v, then return xi_hat / lambda.
// Throws SingularHessianError when the covector Hessian at the seed is
// singular, NoConvergenceError when iterations exhaust.
Vec3 invert_hamilton_map(const MaterialField& m, WaveMode w, const Vec3& x,
                         const Vec3& v, const Vec3& seed_xi,
                         const NewtonOptions& opt = {});

// Multi-start variant: seeds on a 26-direction covector stencil scaled to
// the p = 1 level; the first converged branch in stencil order wins.
Vec3 invert_hamilton_map(const MaterialField& m, WaveMode w, const Vec3& x,
                         const Vec3& v, const NewtonOptions& opt = {});

struct BranchSolution {
  Vec3 xi = Vec3::Zero();
  double residual = 0;  // relative round-trip error |H(xi) - v| / |v|
  double det_rel = 0;   // det of the covector Hessian / (|Hess|_F/sqrt(3))^3
};

// All distinct covector branches found by the multi-start inversion.
std::vector<BranchSolution> hamilton_map_branches(const MaterialField& m,
                                                  WaveMode w, const Vec3& x,
                                                  const Vec3& v,
                                                  const NewtonOptions& opt = {});

// ---------------------------------------------------------------------------
// Foliation probes.
// ---------------------------------------------------------------------------

struct TangencyEvent {
  size_t ray = 0;
  double t = 0;
  Vec3 x = Vec3::Zero();
  double phi_second = 0;  // second t-derivative of the foliation value
};

struct ConvexityReport {
  std::vector<TangencyEvent> events;
  bool pass = false;       // every tangency strictly convex (per orientation)
  double min_second = 0;   // worst oriented second derivative
  int orientation = +1;
};

// Scans each ray for interior critical points of t -> f(X(t)) and reports
// the second derivative there.  phi' = df . dp/dxi is evaluated exactly from
// the dense output; phi'' by a centered difference of phi'.  PASS iff
// orientation * phi'' > 0 at every tangency.  zero_band treats |phi'| below
// it as critical (catches rays gliding inside a level set).
ConvexityReport convexity_scan(const MaterialField& m, WaveMode w,
                               const ScalarField& f,
                               const std::vector<Bicharacteristic>& rays,
                               int orientation = +1, double zero_band = 1e-12);

struct ProbeEntry {
  Vec3 v = Vec3::Zero();
  std::vector<BranchSolution> branches;
  bool ok = false;  // some branch is both converged and non-degenerate
};

struct NondegenReport {
  WaveMode wave = WaveMode::QP;
  std::vector<ProbeEntry> entries;
  bool pass = false;
  double det_floor = 0;  // relative determinant threshold used
};

// For a fan of unit tangents v to the foliation level set at x, inverts the
// Hamilton map over all seed branches and checks the covector Hessian
// determinant at each solution.
NondegenReport nondegeneracy_probe(const MaterialField& m, WaveMode w,
                                   const ScalarField& f, const Vec3& x,
                                   int n_fan = 16,
                                   double det_floor = 1e-10);

struct SingularDirection {
  Vec3 xi = Vec3::Zero();  // unit covector with singular Hessian
  double det_before = 0, det_after = 0;
};

// Sweeps unit covectors along meridians of the sphere at x, bisecting sign
// changes of det(d^2 p / dxi^2).  Empty for branches with convex slowness
// (qSH always; qP for admissible media).
std::vector<SingularDirection> triplication_detect(const MaterialField& m,
                                                   WaveMode w, const Vec3& x,
                                                   int n_theta = 181,
                                                   int n_phi = 8);

}  // namespace tilens

#endif
