#ifndef TILENS_INVERSION_HPP
#define TILENS_INVERSION_HPP

#include <string>
#include <vector>

#include "tilens/pseudolin.hpp"
#include "tilens/symbol.hpp"

namespace tilens {

// ---------------------------------------------------------------------------
// Desk-scale linearized recovery.
//
// A known reference medium and a held-out true medium agree near the domain
// boundary and differ by a compactly supported perturbation of the active
// parameters.  Lens data mismatches of a diving-chord fan are, by the
// pseudolinearization identity, weighted ray integrals of the difference;
// discretizing the reduced transform on a voxel slab and conjugating by
// exp(+-digamma/x) in the foliation depth x gives a finite least-squares
// problem for the derivative d_j f_l, which a depth integration turns back
// into the parameter difference itself.
// ---------------------------------------------------------------------------

// Recovery scenario.  `active` lists the unknown parameters (one or two of
// E2, a11, a33); the functional variant instead ties a33 = F(a11) and
// E2 = H(a11) and recovers a11 alone from summed qP + qSV data.  Only F'
// enters the assembly; H' is synthesis bookkeeping (its contribution to the
// summed sensitivity cancels between the wave branches at the boundary).
struct ScenarioPair {
  MaterialField truth;      // data synthesis and scoring only
  MaterialField reference;  // everything the solver is allowed to see
  std::vector<Param> active{Param::A11};
  bool functional = false;
  double f_prime = 1.0;  // F'(a11) at the reference value
  double h_prime = 0.0;  // H'(a11) at the reference value
};

// Axis-aligned voxel slab between the artificial-boundary level set and a
// depth cap.  Unknowns are voxel values (one block per active parameter).
// The shallow face must sit above the support of the perturbation: the depth
// integration that rebuilds f from d_3 f starts from zero there.
struct RecoveryGrid {
  Box box;
  int n1 = 1, n2 = 1, n3 = 1;

  long size() const { return static_cast<long>(n1) * n2 * n3; }
  Vec3 voxel_size() const;
  long flat(int i, int j, int k) const;
  Vec3 center(long v) const;
  long index_of(const Vec3& x) const;  // -1 outside the slab
  void validate() const;               // throws ConfigError
};

// Depth-staggered diving-chord fan: entries on the lateral faces of the
// domain aimed across it, heights laddered over the grid's vertical extent,
// with azimuthal tilts and small dips for angular diversity.  Near-horizontal
// chords are near-tangent to the convex foliation at their deepest point, so
// the fan sits inside the cutoff's near-tangency support by construction.
// The covector slot holds the desired GROUP direction (an aim); data
// synthesis resolves the actual entry covector per wave via the inverse
// hamilton map, so one fan serves qP and qSV alike.
struct FanOptions {
  int heights = 8;
  int offsets = 5;
  int tilts = 3;             // azimuth count (symmetric about straight-across)
  double tilt_max_deg = 8.0;
  int dips = 1;              // vertical-angle count (1 = horizontal only)
  double dip_max_deg = 3.0;
  bool both_axes = true;     // cross along y1 and y2 (else y1 only)
  double face_inset = 1e-3;  // entry offset inside the lateral faces
};

std::vector<PhasePoint> diving_fan(const Box& domain, const RecoveryGrid& grid,
                                   const FanOptions& opt = {});

// ---------------------------------------------------------------------------
// Data synthesis: lens mismatches of the fan between the two media.
// ---------------------------------------------------------------------------

// One matched ray: the same entry traced in both media, with the exit
// covector difference Xi - Xi~ (the observable the identity equates to the
// weighted ray transform of the parameter difference).  `entry` is the
// resolved p = 1 entry covector, not the fan aim.  `noise` is the
// conservation-drift estimate of the integrator floor on the difference.
struct RayMismatch {
  size_t fan_index = 0;
  PhasePoint entry;
  Vec3 dxi = Vec3::Zero();
  double tau = 0, tau_tilde = 0;
  double noise = 0;
};

struct WaveMismatch {
  WaveMode wave = WaveMode::QP;
  std::vector<RayMismatch> rays;
  std::vector<FailedRay> failed;  // untraceable or unmatched entries
};

struct SynthesizedData {
  std::vector<WaveMismatch> waves;
};

// Traces the fan through both media of the pair (entries normalized on the
// shared boundary values) and records per-ray exit-covector differences.
// Rays failing in either medium, or exiting through different faces, are
// reported in `failed` and excluded.
SynthesizedData synthesize_data(const ScenarioPair& pair,
                                const std::vector<WaveMode>& waves,
                                const std::vector<PhasePoint>& fan,
                                const TraceOptions& opt = {});

// ---------------------------------------------------------------------------
// System assembly.
// ---------------------------------------------------------------------------

struct AssembleOptions {
  PseudolinOptions pseudolin;  // tracing, restarts, segment quadrature
  CutoffSpec cutoff;           // near-tangency admission for fan rays
  double digamma = 1.0;        // conjugation strength
  double depth_floor = 0.25;   // clamp on the normalized depth (units of the
                               // slab thickness) inside the exponentials
  double min_apex = 0.0;       // reject rays diving below this foliation value
  bool equilibrate = true;     // per-parameter column-block scaling
};

// Rows are (ray, component) pairs of the reduced transform; the unknown g is
// the conjugated derivative field, d_j f_l = exp(digamma/x) g_l per voxel.
//   a(r, col(l, v)) = w_r sum_nodes dt (-dXi~_j/dxi_j) E^l [node in voxel v]
//                       * col_scale(l, v),
// with w_r = exp(-digamma/x_apex) the row conjugation at the ray's deepest
// foliation level and col_scale = exp(+digamma/x_v) (times the equilibration
// factor).  For two active parameters each ray contributes one row per
// parameter, premultiplied by the transpose of the 2x2 material sensitivity
// matrix of the reference medium at the ray apexes, so the implied normal
// operator carries the positive-definite S^T S symbol.  Rays that never
// enter the grid are dropped with an EmptyRowWarning entry.
struct LinearSystem {
  Eigen::MatrixXd a;
  Eigen::VectorXd rhs;           // row-weighted mismatch components
  Eigen::VectorXd col_scale;     // conjugation x equilibration, per column
  Eigen::VectorXd row_weight;    // exp(-digamma/x_apex) per row
  Eigen::VectorXd regularizer;   // diagonal Tikhonov operator on g (ones)
  std::vector<Param> active;     // column blocks, in order
  RecoveryGrid grid;
  FieldPtr foliation;            // depth function the conjugation used
  double digamma = 0;
  int deriv_component = 2;
  double noise_floor = 0;        // weighted RSS of the per-ray noise
  std::vector<size_t> row_fan_index;
  std::vector<std::string> warnings;
};

// Single- or two-parameter assembly against the synthesized mismatches.
// `waves` must match the data; for two active parameters both wave rows are
// combined through the sensitivity premultiplier, for one parameter each
// wave contributes its own row.  Throws ConfigError when the assembled
// system ends up with fewer rows than columns.
LinearSystem assemble_system(const ScenarioPair& pair,
                             const std::vector<WaveMode>& waves,
                             const std::vector<PhasePoint>& fan,
                             const SynthesizedData& data,
                             const RecoveryGrid& grid, FieldPtr foliation,
                             const AssembleOptions& opt = {});

// Functional variant: one unknown block (a11) with the per-node weight
// summed over the qP and qSV branches, E^{a11} + F' E^{a33} per branch; the
// right-hand side is the sum of the two waves' mismatch components.  At the
// boundary the weight collapses to the closed form 2|xi'|^2 + 2 F' xi3^2.
LinearSystem assemble_functional(const ScenarioPair& pair,
                                 const std::vector<PhasePoint>& fan,
                                 const SynthesizedData& data,
                                 const RecoveryGrid& grid, FieldPtr foliation,
                                 const AssembleOptions& opt = {});

// The summed qP + qSV sensitivity of the functional scenario at one covector:
//   sum_{+-} dp/da11 + F' dp/da33 + H' dp/dE2  =  2|xi'|^2 + 2 F' xi3^2
// (the H' contributions are exact negatives of each other).  Exposed for the
// coefficient checks; u, v are the tilted-frame invariants.
double functional_sensitivity_sum(const ReducedParams& rp, double f_prime,
                                  double h_prime, double u, double v);

// ---------------------------------------------------------------------------
// Tikhonov-regularized least squares and recovery diagnostics.
// ---------------------------------------------------------------------------

struct RecoverOptions {
  double mu = -1.0;           // fixed Tikhonov weight; negative = ladder
  int ladder_steps = 24;      // mu_k = mu0 * ladder_factor^k
  double ladder_factor = 0.5;
  double discrepancy_safety = 2.0;   // target = safety * noise floor
  double discrepancy_floor = 1e-3;   // ... but no less than floor * |rhs|
  double plateau_ratio = 0.98;  // stop the ladder once the residual stalls
  int max_iterations = 5000;
  double cg_tol = 1e-12;      // relative normal-equation residual
  double near_fraction = 0.5; // deepest layers counted as the near slab
};

struct Recovery {
  std::vector<Param> active;
  std::vector<Eigen::VectorXd> deriv;     // d_j f_l per voxel
  std::vector<Eigen::VectorXd> estimate;  // f_l per voxel (depth-integrated)
  std::vector<Eigen::VectorXd> truth;     // held-out f_l at voxel centers
  double mu = 0;
  int iterations = 0;
  std::vector<double> residual_history;   // data-space residual per iteration
  double data_residual = 0;               // final |W(A g - d)| / |W d|
  std::vector<double> rel_l2_full, rel_l2_near;  // per active parameter
  double worst_rel_l2_near = 0;
  // Where the error concentrates: principal direction of the structure
  // tensor of the error field against the predicted degenerate direction
  // (the scattering image of the TI axis at the grid center).
  Vec3 error_principal_dir = Vec3::Zero();
  Vec3 degenerate_dir = Vec3::Zero();
  double error_axis_cos = 0;
  std::vector<std::string> warnings;
};

// Conjugate gradient on the Tikhonov normal equations, with the weight
// chosen by a discrepancy ladder against the integrator noise floor unless
// fixed in the options.  Scores the estimates against the held-out truth of
// the pair; the near-boundary slab is the deepest `near_fraction` of the
// grid layers.  Throws NoConvergenceError when CG exhausts its iterations.
Recovery recover(const LinearSystem& sys, const ScenarioPair& pair,
                 const RecoverOptions& opt = {});

// Convenience pipeline for the functional scenario: synthesize both waves,
// assemble the summed system, recover a11.
Recovery recover_functional(const ScenarioPair& pair,
                            const std::vector<PhasePoint>& fan,
                            const RecoveryGrid& grid, FieldPtr foliation,
                            const AssembleOptions& aopt = {},
                            const RecoverOptions& ropt = {});

}  // namespace tilens

#endif
