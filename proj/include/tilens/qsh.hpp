#ifndef TILENS_QSH_HPP
#define TILENS_QSH_HPP

#include <functional>
#include <vector>

#include "tilens/material.hpp"
#include "tilens/types.hpp"

namespace tilens {

// Shear travel metric g = alpha g0 + (beta - alpha) w (x) w: a rank-one
// perturbation of a conformal multiple of the background.  w is the
// unit-g0-length one-form along the symmetry axis; alpha = 1/a66,
// beta = 1/a55.
struct RankOneMetric {
  std::function<double(const Vec3&)> alpha;
  std::function<double(const Vec3&)> beta;
  std::function<Vec3(const Vec3&)> w;  // covector components
  Mat3 g0 = Mat3::Identity();
};

// The qSH travel metric carried by a material field (w = g0 * axis).
RankOneMetric qsh_metric(const MaterialField& m);

Mat3 assemble_metric(const RankOneMetric& rm, const Vec3& x);
Mat3 assemble_metric_point(double alpha, double beta, const Vec3& w,
                           const Mat3& g0);

// Result of the pointwise eigen-decomposition g v = mu g0 v.  The doubled
// eigenvalue is alpha; the simple one is beta and its eigenvector spans the
// axis.  When all eigenvalues agree within tolerance the point is conformal:
// beta == alpha and the axis direction is undefined.
struct ExtractedMetric {
  double alpha = 0;
  double beta = 0;
  Vec3 axis = Vec3::Zero();  // unit g0-length; sign canonicalized
  bool conformal = false;
};

// Eigenvalues within pair_tol_rel * trace are treated as the doubled alpha.
ExtractedMetric extract_parameters(const Mat3& g, const Mat3& g0,
                                   double pair_tol_rel = 1e-8);

// ---------------------------------------------------------------------------
// Adapted coordinates: y3 = f, with (y1, y2) seeded on a transversal boundary
// patch and extended constant along gradient-flow curves of f.  In these
// coordinates the metric is block diagonal: g(dy_i, dy3) = 0 for i = 1, 2.
// ---------------------------------------------------------------------------

// Planar seed patch q(y1, y2) = origin + y1 t1 + y2 t2.
struct SeedPatch {
  Vec3 origin = Vec3::Zero();
  Vec3 t1 = Vec3::UnitX();
  Vec3 t2 = Vec3::UnitY();
};

struct ChartSpec {
  int n1 = 5, n2 = 5, n3 = 5;
  double y1_min = 0, y1_max = 1;
  double y2_min = 0, y2_max = 1;
  double y3_min = 0, y3_max = 1;
  double fd_step = 1e-5;         // Jacobian step in chart coordinates
  double tangency_tol = 1e-8;    // lower bound on df.G0df along the flow
  double seed_angle_min = 0.05;  // min |cos| of (grad f, patch normal)
  bool flow_with_g = false;      // flow along grad^g f instead of grad^{g0} f
  double rtol = 1e-11, atol = 1e-13;
};

struct ChartSample {
  Vec3 y = Vec3::Zero();
  Vec3 x = Vec3::Zero();
  Mat3 jac = Mat3::Zero();  // dx/dy, columns tangent to the y-axes
  double residual = 0;      // normalized |g(dy_i, dy3)|, worst of i = 1, 2
};

struct FoliationChart {
  std::vector<ChartSample> samples;  // y1 fastest, then y2, then y3
  int n1 = 0, n2 = 0, n3 = 0;
  double max_residual = 0;
};

// Ambient position of chart coordinates y: flow from the seed point along
// the level-parameterized gradient of f until f = y3.  Throws TangencyError
// if the seed patch is near-tangent to grad f or |df|_{g0} collapses along
// the flow.
Vec3 chart_point(const MaterialField& m, const SeedPatch& seed,
                 const ChartSpec& spec, const Vec3& y);

FoliationChart build_adapted_coordinates(const MaterialField& m,
                                         const SeedPatch& seed,
                                         const ChartSpec& spec);

}  // namespace tilens

#endif
