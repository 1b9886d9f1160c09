#include "tilens/pseudolin.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>

#include "tilens/parallel.hpp"

namespace tilens {
namespace {

// 8-point Gauss-Legendre on [-1, 1].
constexpr int kGlN = 8;
constexpr double kGlX[kGlN] = {
    -0.96028985649753623168, -0.79666647741362673959,
    -0.52553240991632898582, -0.18343464249564980494,
    0.18343464249564980494,  0.52553240991632898582,
    0.79666647741362673959,  0.96028985649753623168};
constexpr double kGlW[kGlN] = {
    0.10122853629037625915, 0.22238103445337447054,
    0.31370664587788728734, 0.36268378337836198297,
    0.36268378337836198297, 0.31370664587788728734,
    0.22238103445337447054, 0.10122853629037625915};

struct Panel {
  double a = 0, b = 0;
};

// Accepted-step intervals of the source ray, clamped to [0, tau] and
// subdivided to at most tau / min_panels each: the integrator resolved the
// flow's scale on them, but an integrand can be sharper than the flow.
std::vector<Panel> ray_panels(const Bicharacteristic& ray, int min_panels) {
  const double target = ray.tau / std::max(1, min_panels);
  std::vector<Panel> panels;
  auto push_split = [&](double a, double b) {
    const int nsub =
        target > 0 ? std::max(1, static_cast<int>(std::ceil((b - a) / target)))
                   : 1;
    for (int i = 0; i < nsub; ++i)
      panels.push_back({a + (b - a) * i / nsub, a + (b - a) * (i + 1) / nsub});
  };
  for (const auto& st : ray.flow.steps) {
    const double a = std::max(0.0, st.t0);
    const double b = std::min(st.t0 + st.h, ray.tau);
    if (b > a) push_split(a, b);
  }
  if (panels.empty() && ray.tau > 0) push_split(0.0, ray.tau);
  return panels;
}

OdeRhs phase_rhs(const MaterialField& m, WaveMode w) {
  return [&m, w](double, const StateVec& y, StateVec& dy) {
    const PhasePoint pt{y.segment<3>(0), y.segment<3>(3)};
    const HamiltonianDerivs hd = hamiltonian_derivs(m, w, pt);
    dy.segment<3>(0) = hd.dp_dxi;
    dy.segment<3>(3) = -hd.dp_dx;
  };
}

// State: (x, xi, V) with V = d(X, Xi)/d(x0, xi0) flattened row-major.
// V' = JV where J is the phase-space Jacobian of the Hamiltonian field,
// formed by central differences of the analytic first derivatives.
OdeRhs variational_rhs(const MaterialField& m, WaveMode w, double fd) {
  return [&m, w, fd](double, const StateVec& y, StateVec& dy) {
    const PhasePoint pt{y.segment<3>(0), y.segment<3>(3)};
    const HamiltonianDerivs hd = hamiltonian_derivs(m, w, pt);
    dy.segment<3>(0) = hd.dp_dxi;
    dy.segment<3>(3) = -hd.dp_dx;

    Eigen::Matrix<double, 6, 6> jac;
    for (int c = 0; c < 6; ++c) {
      PhasePoint pp = pt, pm = pt;
      if (c < 3) {
        pp.x[c] += fd;
        pm.x[c] -= fd;
      } else {
        pp.xi[c - 3] += fd;
        pm.xi[c - 3] -= fd;
      }
      const HamiltonianDerivs hp = hamiltonian_derivs(m, w, pp);
      const HamiltonianDerivs hm = hamiltonian_derivs(m, w, pm);
      jac.col(c).head<3>() = (hp.dp_dxi - hm.dp_dxi) / (2.0 * fd);
      jac.col(c).tail<3>() = -(hp.dp_dx - hm.dp_dx) / (2.0 * fd);
    }

    Eigen::Map<const Eigen::Matrix<double, 6, 6, Eigen::RowMajor>> v(
        y.data() + 6);
    Eigen::Map<Eigen::Matrix<double, 6, 6, Eigen::RowMajor>> dv(dy.data() + 6);
    dv = jac * v;
  };
}

bool blend_admissible(const ReducedParams& r) {
  return r.a11 > 0 && r.a33 > 0 && r.a55 > 0 && r.a66 > 0 &&
         std::max(r.a55, r.a66) < std::min(r.a11, r.a33);
}

ReducedParams lerp(const ReducedParams& r0, const ReducedParams& r1,
                   double s) {
  ReducedParams r;
  r.e2 = (1.0 - s) * r0.e2 + s * r1.e2;
  r.a11 = (1.0 - s) * r0.a11 + s * r1.a11;
  r.a33 = (1.0 - s) * r0.a33 + s * r1.a33;
  r.a55 = (1.0 - s) * r0.a55 + s * r1.a55;
  r.a66 = (1.0 - s) * r0.a66 + s * r1.a66;
  return r;
}

}  // namespace

void flow_jacobian_at(const MaterialField& comparison, WaveMode wave,
                      const PhasePoint& pt, double t_flow, Mat3& dxi_dx,
                      Mat3& dxi_dxi, const VariationalOptions& opt) {
  if (std::abs(t_flow) < 1e-12) {
    // Zero remaining time: the flow map is the identity.
    dxi_dx.setZero();
    dxi_dxi.setIdentity();
    return;
  }
  StateVec y0(42);
  y0.segment<3>(0) = pt.x;
  y0.segment<3>(3) = pt.xi;
  y0.segment(6, 36).setZero();
  for (int r = 0; r < 6; ++r) y0[6 + 6 * r + r] = 1.0;

  OdeOptions oo;
  oo.rtol = opt.rtol;
  oo.atol = opt.atol;
  const OdeSolution sol = integrate_ode(
      variational_rhs(comparison, wave, opt.fd_step), 0.0, y0, t_flow, oo);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      dxi_dx(r, c) = sol.y_end[6 + 6 * (3 + r) + c];
      dxi_dxi(r, c) = sol.y_end[6 + 6 * (3 + r) + (3 + c)];
    }
}

FlowJacobian flow_jacobian(const MaterialField& comparison, WaveMode wave,
                           const Bicharacteristic& ray,
                           const VariationalOptions& opt) {
  FlowJacobian out;
  const size_t n = ray.samples.size();
  out.t.resize(n);
  out.dxi_dx.resize(n);
  out.dxi_dxi.resize(n);
  for (size_t k = 0; k < n; ++k) {
    const RaySample& s = ray.samples[k];
    out.t[k] = s.t;
    flow_jacobian_at(comparison, wave, {s.x, s.xi}, ray.tau - s.t,
                     out.dxi_dx[k], out.dxi_dxi[k], opt);
  }
  return out;
}

Vec3 segment_weights(const MaterialField& m, const MaterialField& m_tilde,
                     WaveMode wave, const PhasePoint& pt,
                     const SegmentOptions& opt) {
  // The qSH Hamiltonian does not involve the active parameters.
  if (wave == WaveMode::QSH) return Vec3::Zero();

  const ReducedParams r1 = m.reduced_at(pt.x);        // s = 1 endpoint
  const ReducedParams r0 = m_tilde.reduced_at(pt.x);  // s = 0 endpoint
  const TiltedCovector tc = to_tilted(m_tilde, pt.x, pt.xi);
  const double u = tc.xi_perp_sq, v = tc.xi3 * tc.xi3;

  auto integrand = [&](double s) -> Vec3 {
    const ReducedParams blend = lerp(r0, r1, s);
    if (!blend_admissible(blend)) {
      std::ostringstream msg;
      msg << "parameter segment leaves the admissible cone at s = " << s;
      throw SegmentInadmissibleError(msg.str());
    }
    MaterialSens sens;
    try {
      sens = uv_sensitivities(blend, wave, u, v);
    } catch (const Error& e) {
      throw SegmentInadmissibleError(
          std::string("parameter segment degenerates: ") + e.what());
    }
    return {sens.de2, sens.da11, sens.da33};
  };
  auto gl8 = [&](double a, double b) -> Vec3 {
    const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    Vec3 acc = Vec3::Zero();
    for (int k = 0; k < kGlN; ++k)
      acc += (half * kGlW[k]) * integrand(mid + half * kGlX[k]);
    return acc;
  };
  // Adaptive bisection: the sensitivities develop a 1/sqrt(R) peak when the
  // blend approaches the discriminant floor, which fixed panels miss.
  std::function<Vec3(double, double, const Vec3&, int)> refine =
      [&](double a, double b, const Vec3& whole, int depth) -> Vec3 {
    const double mid = 0.5 * (a + b);
    const Vec3 left = gl8(a, mid), right = gl8(mid, b);
    const Vec3 sum = left + right;
    if (depth >= opt.max_depth ||
        (whole - sum).norm() <= opt.tol * (1.0 + sum.norm()))
      return sum;
    return refine(a, mid, left, depth + 1) +
           refine(mid, b, right, depth + 1);
  };

  const int np = std::max(1, opt.panels);
  Vec3 acc = Vec3::Zero();
  for (int p = 0; p < np; ++p) {
    const double a = static_cast<double>(p) / np;
    const double b = static_cast<double>(p + 1) / np;
    acc += refine(a, b, gl8(a, b), 0);
  }
  return acc;
}

Vec3 param_diff(const MaterialField& m, const MaterialField& m_tilde,
                const Vec3& x) {
  const ReducedParams r = m.reduced_at(x);
  const ReducedParams rt = m_tilde.reduced_at(x);
  return {r.e2 - rt.e2, r.a11 - rt.a11, r.a33 - rt.a33};
}

RayWeights pseudolin_weights(const MaterialField& m,
                             const MaterialField& m_tilde, WaveMode wave,
                             const Bicharacteristic& ray,
                             const PseudolinOptions& opt) {
  const FlowJacobian fj = flow_jacobian(m_tilde, wave, ray, opt.var);
  const size_t n = fj.t.size();
  const double h = opt.fd_step_param;

  RayWeights w;
  w.t = fj.t;
  w.a.resize(n);
  w.b.resize(n);
  w.e.resize(n);
  w.a_hat.resize(n);
  w.b_hat.resize(n);
  for (size_t k = 0; k < n; ++k) {
    w.a[k] = -fj.dxi_dxi[k];
    w.b[k] = fj.dxi_dx[k];
    const PhasePoint q{ray.samples[k].x, ray.samples[k].xi};
    w.e[k] = segment_weights(m, m_tilde, wave, q, opt.segment);
    for (int l = 0; l < 3; ++l) w.a_hat[k][l] = w.e[k][l] * w.a[k];

    // dE^l/dx_j and dE^l/dxi_j, rows l, columns j.
    Mat3 dex, dexi;
    for (int c = 0; c < 3; ++c) {
      PhasePoint qp = q, qm = q;
      qp.x[c] += h;
      qm.x[c] -= h;
      dex.col(c) = (segment_weights(m, m_tilde, wave, qp, opt.segment) -
                    segment_weights(m, m_tilde, wave, qm, opt.segment)) /
                   (2.0 * h);
      qp = q;
      qm = q;
      qp.xi[c] += h;
      qm.xi[c] -= h;
      dexi.col(c) = (segment_weights(m, m_tilde, wave, qp, opt.segment) -
                     segment_weights(m, m_tilde, wave, qm, opt.segment)) /
                    (2.0 * h);
    }
    w.b_hat[k] = w.a[k] * dex.transpose() + w.b[k] * dexi.transpose();
  }
  return w;
}

IdentityReport pseudolin_residuals(const MaterialField& m,
                                   const MaterialField& m_tilde,
                                   const ShootingSpec& spec,
                                   const PseudolinOptions& opt) {
  const size_t n = spec.fan.size();
  std::vector<std::optional<RayIdentity>> rows(n);
  std::vector<std::optional<FailedRay>> fails(n);

  parallel_for(static_cast<long>(n), [&](long iraw) {
    const size_t i = static_cast<size_t>(iraw);
    try {
      const PhasePoint entry = normalize_entry(m, spec.wave, spec.fan[i]);
      const Bicharacteristic g =
          integrate_flow(m, spec.wave, entry, spec.stops, opt.trace);
      const Bicharacteristic gt =
          integrate_flow(m_tilde, spec.wave, entry, spec.stops, opt.trace);

      RayIdentity row;
      row.fan_index = i;
      row.entry = entry;
      row.tau = g.tau;
      row.tau_tilde = gt.tau;
      row.exit_diff = g.samples.back().xi - gt.samples.back().xi;

      // Comparison flow over the source exit time (no stop surfaces): the
      // exact endpoint of the identity.
      StateVec y0(6);
      y0 << entry.x, entry.xi;
      OdeOptions oo;
      oo.rtol = opt.trace.rtol;
      oo.atol = opt.trace.atol;
      const OdeSolution ft =
          integrate_ode(phase_rhs(m_tilde, spec.wave), 0.0, y0, g.tau, oo);
      row.flow_diff =
          g.samples.back().xi - Vec3(ft.y_end.segment<3>(3));

      Vec3 acc = Vec3::Zero();
      for (const Panel& pn : ray_panels(g, opt.min_panels)) {
        const double mid = 0.5 * (pn.a + pn.b), half = 0.5 * (pn.b - pn.a);
        for (int k = 0; k < kGlN; ++k) {
          const double t = mid + half * kGlX[k];
          const PhasePoint q = g.at(t);
          Mat3 dxx, dxxi;
          flow_jacobian_at(m_tilde, spec.wave, q, g.tau - t, dxx, dxxi,
                           opt.var);
          const HamiltonianDerivs hd = hamiltonian_derivs(m, spec.wave, q);
          const HamiltonianDerivs hdt =
              hamiltonian_derivs(m_tilde, spec.wave, q);
          const Vec3 fx = hd.dp_dx - hdt.dp_dx;
          const Vec3 fxi = hd.dp_dxi - hdt.dp_dxi;
          acc += (half * kGlW[k]) * (-dxxi * fx + dxx * fxi);
        }
      }
      row.j = acc;
      rows[i] = std::move(row);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      fails[i] = FailedRay{i, e.what()};
    }
  });

  IdentityReport out;
  for (size_t i = 0; i < n; ++i) {
    if (rows[i]) {
      out.rays.push_back(std::move(*rows[i]));
    } else if (fails[i]) {
      out.failed.push_back(std::move(*fails[i]));
    }
  }
  return out;
}

TransformNodes transform_nodes(const MaterialField& m,
                               const MaterialField& m_tilde, WaveMode wave,
                               const Bicharacteristic& ray,
                               const PseudolinOptions& opt) {
  const int j = opt.deriv_component;
  if (j < 0 || j > 2)
    throw ConfigError("transform derivative component must be 0, 1 or 2");

  TransformNodes out;
  for (const Panel& pn : ray_panels(ray, opt.min_panels)) {
    const double mid = 0.5 * (pn.a + pn.b), half = 0.5 * (pn.b - pn.a);
    for (int k = 0; k < kGlN; ++k) {
      const double t = mid + half * kGlX[k];
      const PhasePoint q = ray.at(t);
      Mat3 dxx, dxxi;
      flow_jacobian_at(m_tilde, wave, q, ray.tau - t, dxx, dxxi, opt.var);
      out.t.push_back(t);
      out.dt.push_back(half * kGlW[k]);
      out.x.push_back(q.x);
      out.flow_diag.push_back(dxxi(j, j));
      out.e.push_back(segment_weights(m, m_tilde, wave, q, opt.segment));
    }
  }
  return out;
}

double weighted_ray_integral(const MaterialField& m,
                             const MaterialField& m_tilde, WaveMode wave,
                             Param l, const Bicharacteristic& ray,
                             const std::function<double(const Vec3&)>& f_l,
                             const PseudolinOptions& opt) {
  const TransformNodes nodes = transform_nodes(m, m_tilde, wave, ray, opt);
  const int j = opt.deriv_component;
  const int li = static_cast<int>(l);
  const double h = opt.fd_step_param;

  double acc = 0;
  for (size_t k = 0; k < nodes.t.size(); ++k) {
    Vec3 xp = nodes.x[k], xm = nodes.x[k];
    xp[j] += h;
    xm[j] -= h;
    const double df = (f_l(xp) - f_l(xm)) / (2.0 * h);
    acc += nodes.dt[k] * (-nodes.flow_diag[k]) * nodes.e[k][li] * df;
  }
  return acc;
}

double weighted_ray_integral(const MaterialField& m,
                             const MaterialField& m_tilde, WaveMode wave,
                             Param l, const Bicharacteristic& ray,
                             const PseudolinOptions& opt) {
  const int li = static_cast<int>(l);
  return weighted_ray_integral(
      m, m_tilde, wave, l, ray,
      [&](const Vec3& x) { return param_diff(m, m_tilde, x)[li]; }, opt);
}

}  // namespace tilens
