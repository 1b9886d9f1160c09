#include "tilens/qsh.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <cmath>

#include "tilens/integrate.hpp"
#include "tilens/parallel.hpp"

namespace tilens {

RankOneMetric qsh_metric(const MaterialField& m) {
  RankOneMetric rm;
  rm.g0 = m.g0();
  rm.alpha = [&m](const Vec3& x) { return 1.0 / m.field(4).value(x); };
  rm.beta = [&m](const Vec3& x) { return 1.0 / m.field(3).value(x); };
  rm.w = [&m](const Vec3& x) -> Vec3 { return m.g0() * m.axis_at(x); };
  return rm;
}

Mat3 assemble_metric_point(double alpha, double beta, const Vec3& w,
                           const Mat3& g0) {
  return alpha * g0 + (beta - alpha) * (w * w.transpose());
}

Mat3 assemble_metric(const RankOneMetric& rm, const Vec3& x) {
  return assemble_metric_point(rm.alpha(x), rm.beta(x), rm.w(x), rm.g0);
}

ExtractedMetric extract_parameters(const Mat3& g, const Mat3& g0,
                                   double pair_tol_rel) {
  Eigen::GeneralizedSelfAdjointEigenSolver<Mat3> ges(g, g0);
  if (ges.info() != Eigen::Success)
    throw NumericalError("metric eigen-decomposition failed");
  const Vec3 mu = ges.eigenvalues();  // ascending; v^T g0 v = 1
  const double tol = pair_tol_rel * mu.sum();

  ExtractedMetric out;
  const double d01 = mu[1] - mu[0], d12 = mu[2] - mu[1];
  if (d01 < tol && d12 < tol) {
    out.alpha = out.beta = mu.mean();
    out.conformal = true;
    return out;
  }
  // The tighter pair is the doubled alpha; the leftover simple eigenvalue is
  // beta and its eigenvector spans the axis.
  int simple;
  if (d01 <= d12) {
    out.alpha = 0.5 * (mu[0] + mu[1]);
    simple = 2;
  } else {
    out.alpha = 0.5 * (mu[1] + mu[2]);
    simple = 0;
  }
  out.beta = mu[simple];
  Vec3 v = ges.eigenvectors().col(simple);
  // Sign-free span: canonicalize on the largest component.
  int imax = 0;
  v.cwiseAbs().maxCoeff(&imax);
  if (v[imax] < 0) v = -v;
  out.axis = v;
  return out;
}

namespace {

// Level-parameterized gradient flow: dx/ds = grad f / |grad f|^2 so that
// f(x(s)) = f(x(0)) + s exactly.  The g- and g0-gradient versions trace the
// same curves (grad^g f is parallel to grad^{g0} f when w is parallel to df).
OdeRhs level_flow_rhs(const MaterialField& m, const ChartSpec& spec) {
  return [&m, spec](double, const StateVec& y, StateVec& dy) {
    const Vec3 x = y.head<3>();
    const Vec3 df = m.layer().gradient(x);
    Vec3 v;
    double denom;
    if (spec.flow_with_g) {
      const Mat3 g = assemble_metric_point(
          1.0 / m.field(4).value(x), 1.0 / m.field(3).value(x),
          m.g0() * m.axis_at(x), m.g0());
      const Vec3 gi_df = g.inverse() * df;
      denom = df.dot(gi_df);
      v = gi_df;
    } else {
      const Vec3 g0i_df = m.g0_inv() * df;
      denom = df.dot(g0i_df);
      v = g0i_df;
    }
    if (denom < spec.tangency_tol)
      throw TangencyError("layer gradient collapsed along the flow");
    dy.head<3>() = v / denom;
  };
}

}  // namespace

Vec3 chart_point(const MaterialField& m, const SeedPatch& seed,
                 const ChartSpec& spec, const Vec3& y) {
  const Vec3 q = seed.origin + y[0] * seed.t1 + y[1] * seed.t2;

  // Seed transversality: the patch normal must see a substantial component
  // of the gradient flow direction.
  const Vec3 df0 = m.layer().gradient(q);
  const Vec3 flow0 = m.g0_inv() * df0;
  const Vec3 n = seed.t1.cross(seed.t2);
  const double denom = flow0.norm() * n.norm();
  if (denom <= 0 || std::abs(n.dot(flow0)) / denom < spec.seed_angle_min)
    throw TangencyError("seed patch tangent to the layer gradient");

  const double f0 = m.layer().value(q);
  const double ds = y[2] - f0;
  if (std::abs(ds) < 1e-15) return q;

  OdeOptions opt;
  opt.rtol = spec.rtol;
  opt.atol = spec.atol;
  opt.h_init = std::min(0.1, std::abs(ds));
  StateVec y0(3);
  y0 = q;
  const OdeSolution sol = integrate_ode(level_flow_rhs(m, spec), 0.0, y0, ds, opt);
  return sol.y_end.head<3>();
}

FoliationChart build_adapted_coordinates(const MaterialField& m,
                                         const SeedPatch& seed,
                                         const ChartSpec& spec) {
  if (spec.n1 < 1 || spec.n2 < 1 || spec.n3 < 1)
    throw ConfigError("chart lattice dimensions must be positive");
  FoliationChart chart;
  chart.n1 = spec.n1;
  chart.n2 = spec.n2;
  chart.n3 = spec.n3;
  chart.samples.resize(static_cast<size_t>(spec.n1) * spec.n2 * spec.n3);

  auto coord = [](double lo, double hi, int i, int n) {
    return n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1.0);
  };

  const long total = static_cast<long>(chart.samples.size());
  parallel_for(total, [&](long idx) {
    const int i = static_cast<int>(idx % spec.n1);
    const int j = static_cast<int>((idx / spec.n1) % spec.n2);
    const int k = static_cast<int>(idx / (static_cast<long>(spec.n1) * spec.n2));
    ChartSample s;
    s.y = Vec3(coord(spec.y1_min, spec.y1_max, i, spec.n1),
               coord(spec.y2_min, spec.y2_max, j, spec.n2),
               coord(spec.y3_min, spec.y3_max, k, spec.n3));
    s.x = chart_point(m, seed, spec, s.y);

    // Chart Jacobian by centered differences in chart coordinates.
    const double h = spec.fd_step;
    for (int a = 0; a < 3; ++a) {
      Vec3 yp = s.y, ym = s.y;
      yp[a] += h;
      ym[a] -= h;
      s.jac.col(a) =
          (chart_point(m, seed, spec, yp) - chart_point(m, seed, spec, ym)) /
          (2.0 * h);
    }

    // Block-diagonality of the assembled metric in chart coordinates.
    const Mat3 g = assemble_metric_point(
        1.0 / m.field(4).value(s.x), 1.0 / m.field(3).value(s.x),
        m.g0() * m.axis_at(s.x), m.g0());
    const Vec3 t3 = s.jac.col(2);
    const double gn = g.norm();
    double worst = 0;
    for (int a = 0; a < 2; ++a) {
      const Vec3 ta = s.jac.col(a);
      const double denom = gn * ta.norm() * t3.norm();
      if (denom > 0)
        worst = std::max(worst, std::abs(ta.dot(g * t3)) / denom);
    }
    s.residual = worst;
    chart.samples[static_cast<size_t>(idx)] = std::move(s);
  });

  for (const ChartSample& s : chart.samples)
    chart.max_residual = std::max(chart.max_residual, s.residual);
  return chart;
}

}  // namespace tilens
