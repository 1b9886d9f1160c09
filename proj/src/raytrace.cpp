#include "tilens/raytrace.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "tilens/parallel.hpp"

namespace tilens {

std::vector<StopSurface> box_surfaces(const Box& box) {
  std::vector<StopSurface> s;
  const Vec3 lo = box.lo, hi = box.hi;
  s.push_back({"x_min", [lo](const Vec3& x) { return lo.x() - x.x(); }});
  s.push_back({"x_max", [hi](const Vec3& x) { return x.x() - hi.x(); }});
  s.push_back({"y_min", [lo](const Vec3& x) { return lo.y() - x.y(); }});
  s.push_back({"y_max", [hi](const Vec3& x) { return x.y() - hi.y(); }});
  s.push_back({"z_min", [lo](const Vec3& x) { return lo.z() - x.z(); }});
  s.push_back({"z_max", [hi](const Vec3& x) { return x.z() - hi.z(); }});
  return s;
}

StopSurface foliation_surface(FieldPtr f, double level, std::string id) {
  return {std::move(id),
          [f, level](const Vec3& x) { return level - f->value(x); }};
}

PhasePoint Bicharacteristic::at(double t) const {
  const StateVec y = flow.eval(t);
  return {y.head<3>(), y.tail<3>()};
}

PhasePoint normalize_entry(const MaterialField& m, WaveMode wave,
                           const PhasePoint& pt) {
  const double p = hamiltonian(m, wave, pt);
  if (!(p > 0))
    throw ConfigError("entry covector gives a nonpositive hamiltonian");
  return {pt.x, pt.xi / std::sqrt(p)};
}

namespace {

OdeRhs hamilton_rhs(const MaterialField& m, WaveMode wave) {
  return [&m, wave](double, const StateVec& y, StateVec& dy) {
    const HamiltonianDerivs d =
        hamiltonian_derivs(m, wave, {y.head<3>(), y.tail<3>()});
    dy.head<3>() = d.dp_dxi;
    dy.tail<3>() = -d.dp_dx;
  };
}

}  // namespace

Bicharacteristic integrate_flow(const MaterialField& m, WaveMode wave,
                                const PhasePoint& start,
                                const std::vector<StopSurface>& stops,
                                const TraceOptions& opt) {
  const double p0 = hamiltonian(m, wave, start);
  if (!(p0 > 0)) throw ConfigError("flow start has nonpositive hamiltonian");

  StateVec y0(6);
  y0.head<3>() = start.x;
  y0.tail<3>() = start.xi;

  // First boundary hit: the max over surface values crosses zero from below.
  // Arm only after the ray is strictly inside, so entries sitting exactly on
  // a face do not trigger at t = 0.
  auto raw_event = [&stops](const Vec3& x) {
    double e = -std::numeric_limits<double>::infinity();
    for (const StopSurface& s : stops) e = std::max(e, s.value(x));
    return e;
  };

  OdeOptions oopt;
  oopt.rtol = opt.rtol;
  oopt.atol = opt.atol;
  Bicharacteristic bc;
  bc.wave = wave;
  bc.p0 = p0;

  for (int attempt = 0;; ++attempt) {
    bool armed = stops.empty() ? false : raw_event(start.x) < -1e-12;
    OdeEvent event = [&](double, const StateVec& y) {
      if (stops.empty()) return -1.0;
      const double e = raw_event(y.head<3>());
      if (!armed) {
        if (e < -1e-12) armed = true;
        return -1.0;
      }
      return e;
    };
    const EventResult res =
        integrate_until(hamilton_rhs(m, wave), 0.0, y0, opt.t_max, event, oopt);

    bc.flow = res.sol;
    bc.tau = res.hit ? res.t_event : res.sol.t_end;
    bc.exited = res.hit;

    // Conservation audit on the stored sample grid.
    bc.samples.clear();
    bc.samples.reserve(opt.n_samples);
    double drift = 0;
    for (int i = 0; i < opt.n_samples; ++i) {
      const double t =
          bc.tau * static_cast<double>(i) / (opt.n_samples - 1.0);
      const StateVec y = bc.flow.eval(t);
      RaySample smp{t, y.head<3>(), y.tail<3>()};
      drift = std::max(
          drift, std::abs(hamiltonian(m, wave, {smp.x, smp.xi}) - p0) / p0);
      bc.samples.push_back(std::move(smp));
    }
    bc.conservation_residual = drift;

    if (drift <= opt.drift_tol) break;
    if (attempt >= opt.max_tol_halvings)
      throw NumericalError(
          "hamiltonian drift persisted through tolerance halvings");
    oopt.rtol *= 0.5;
    oopt.atol *= 0.5;
  }

  if (bc.exited) {
    // Identify which surface fired.
    const Vec3 xe = bc.samples.back().x;
    double best = -std::numeric_limits<double>::infinity();
    for (const StopSurface& s : stops) {
      const double v = s.value(xe);
      if (v > best) {
        best = v;
        bc.exit_surface = s.id;
      }
    }
  } else if (opt.require_exit) {
    throw MaxTimeExceededError("ray failed to reach a stop surface");
  }
  return bc;
}

LensResult lens_relation(const MaterialField& m, const ShootingSpec& spec,
                         const TraceOptions& opt) {
  const size_t n = spec.fan.size();
  std::vector<std::optional<LensRecord>> recs(n);
  std::vector<std::optional<FailedRay>> fails(n);

  parallel_for(static_cast<long>(n), [&](long i) {
    try {
      const PhasePoint entry =
          normalize_entry(m, spec.wave, spec.fan[static_cast<size_t>(i)]);
      const Bicharacteristic bc =
          integrate_flow(m, spec.wave, entry, spec.stops, opt);
      LensRecord rec;
      rec.entry = entry;
      rec.exit = {bc.samples.back().x, bc.samples.back().xi};
      rec.tau = bc.tau;
      rec.exit_surface = bc.exit_surface;
      rec.wave = spec.wave;
      recs[static_cast<size_t>(i)] = std::move(rec);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      fails[static_cast<size_t>(i)] =
          FailedRay{static_cast<size_t>(i), e.what()};
    }
  });

  LensResult out;
  for (size_t i = 0; i < n; ++i) {
    if (recs[i]) {
      out.records.push_back(std::move(*recs[i]));
      out.record_fan_index.push_back(i);
    } else if (fails[i]) {
      out.failed.push_back(std::move(*fails[i]));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hamilton map inversion.
// ---------------------------------------------------------------------------

Vec3 hamilton_map(const MaterialField& m, WaveMode w, const Vec3& x,
                  const Vec3& xi) {
  return hamiltonian_derivs(m, w, {x, xi}).dp_dxi;
}

namespace {

double det_rel_of(const Mat3& a) {
  const double scale = a.norm() / std::sqrt(3.0);
  return scale > 0 ? a.determinant() / (scale * scale * scale) : 0.0;
}

struct NewtonOutcome {
  Vec3 xi = Vec3::Zero();
  double residual = std::numeric_limits<double>::infinity();
  bool converged = false;
};

// Damped Newton on F(xi, lambda) = (H(xi) - lambda v, p(xi) - 1).
NewtonOutcome newton_reduced(const MaterialField& m, WaveMode w, const Vec3& x,
                             const Vec3& v, const Vec3& seed,
                             const NewtonOptions& opt, bool throw_singular) {
  NewtonOutcome out;
  const double vn = v.norm();
  if (!(vn > 0)) throw ConfigError("hamilton map target must be nonzero");

  Eigen::Vector4d z;
  {
    const double p = hamiltonian(m, w, {x, seed});
    if (!(p > 0)) return out;
    const Vec3 s = seed / std::sqrt(p);
    z.head<3>() = s;
    z[3] = hamilton_map(m, w, x, s).dot(v) / (vn * vn);
  }

  auto eval_F = [&](const Eigen::Vector4d& zz, Eigen::Vector4d& F) -> bool {
    const Vec3 xi = zz.head<3>();
    double p;
    Vec3 h;
    try {
      const HamiltonianDerivs d = hamiltonian_derivs(m, w, {x, xi});
      p = d.p;
      h = d.dp_dxi;
    } catch (const Error&) {
      return false;
    }
    F.head<3>() = h - zz[3] * v;
    F[3] = p - 1.0;
    return true;
  };

  Eigen::Vector4d F;
  if (!eval_F(z, F)) return out;

  for (int it = 0; it < opt.max_iter; ++it) {
    const double fn = F.norm();
    const double scale = std::max(1.0, std::abs(z[3])) * vn + 1.0;
    if (fn <= opt.tol * scale) {
      out.converged = true;
      break;
    }
    Mat3 hess;
    try {
      hess = xi_hessian_ambient(m, w, {x, z.head<3>()});
    } catch (const Error&) {
      return out;
    }
    Eigen::Matrix4d J = Eigen::Matrix4d::Zero();
    J.topLeftCorner<3, 3>() = hess;
    J.topRightCorner<3, 1>() = -v;
    J.bottomLeftCorner<1, 3>() =
        hamilton_map(m, w, x, z.head<3>()).transpose();
    const Eigen::FullPivLU<Eigen::Matrix4d> lu(J);
    if (!lu.isInvertible()) {
      if (throw_singular && it == 0)
        throw SingularHessianError(
            "covector hessian singular at the inversion seed");
      return out;
    }
    const Eigen::Vector4d dz = lu.solve(-F);

    // Backtracking line search on |F|.
    double alpha = 1.0;
    Eigen::Vector4d z_new, F_new;
    bool improved = false;
    while (alpha >= 1.0 / 1024) {
      z_new = z + alpha * dz;
      if (eval_F(z_new, F_new) && F_new.norm() < (1.0 - 1e-4 * alpha) * fn) {
        improved = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!improved) return out;
    z = z_new;
    F = F_new;
  }
  if (!out.converged) return out;

  const double lambda = z[3];
  if (std::abs(lambda) < 1e-14) return NewtonOutcome{};
  out.xi = z.head<3>() / lambda;
  out.residual = (hamilton_map(m, w, x, out.xi) - v).norm() / vn;
  out.converged = out.residual <= opt.roundtrip_tol;
  return out;
}

// 26-direction seed stencil in deterministic order.
std::vector<Vec3> seed_stencil() {
  std::vector<Vec3> s;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j)
      for (int k = -1; k <= 1; ++k) {
        if (i == 0 && j == 0 && k == 0) continue;
        s.push_back(Vec3(i, j, k).normalized());
      }
  return s;
}

}  // namespace

Vec3 invert_hamilton_map(const MaterialField& m, WaveMode w, const Vec3& x,
                         const Vec3& v, const Vec3& seed_xi,
                         const NewtonOptions& opt) {
  if (w == WaveMode::QSH) {
    // Quadratic hamiltonian: H = 2 K xi is linear, so invert directly.
    const ElasticParams p = m.params_at(x);
    const Vec3 mv = m.axis_at(x);
    const Mat3 K = p.a66 * m.g0_inv() + (p.a55 - p.a66) * (mv * mv.transpose());
    return K.fullPivLu().solve(v / 2.0);
  }
  const NewtonOutcome out = newton_reduced(m, w, x, v, seed_xi, opt, true);
  if (!out.converged)
    throw NoConvergenceError("hamilton map inversion failed to converge");
  return out.xi;
}

Vec3 invert_hamilton_map(const MaterialField& m, WaveMode w, const Vec3& x,
                         const Vec3& v, const NewtonOptions& opt) {
  if (w == WaveMode::QSH) return invert_hamilton_map(m, w, x, v, Vec3(), opt);
  for (const Vec3& s : seed_stencil()) {
    const NewtonOutcome out = newton_reduced(m, w, x, v, s, opt, false);
    if (out.converged) return out.xi;
  }
  throw NoConvergenceError("hamilton map inversion failed from every seed");
}

std::vector<BranchSolution> hamilton_map_branches(const MaterialField& m,
                                                  WaveMode w, const Vec3& x,
                                                  const Vec3& v,
                                                  const NewtonOptions& opt) {
  std::vector<BranchSolution> out;
  for (const Vec3& s : seed_stencil()) {
    const NewtonOutcome o = newton_reduced(m, w, x, v, s, opt, false);
    if (!o.converged) continue;
    bool dup = false;
    for (const BranchSolution& b : out)
      if ((b.xi - o.xi).norm() <= 1e-6 * std::max(b.xi.norm(), o.xi.norm()))
        dup = true;
    if (dup) continue;
    BranchSolution b;
    b.xi = o.xi;
    b.residual = o.residual;
    b.det_rel = det_rel_of(xi_hessian_ambient(m, w, {x, o.xi}));
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Foliation probes.
// ---------------------------------------------------------------------------

ConvexityReport convexity_scan(const MaterialField& m, WaveMode w,
                               const ScalarField& f,
                               const std::vector<Bicharacteristic>& rays,
                               int orientation, double zero_band) {
  ConvexityReport rep;
  rep.orientation = orientation;
  rep.min_second = std::numeric_limits<double>::infinity();

  for (size_t ri = 0; ri < rays.size(); ++ri) {
    const Bicharacteristic& ray = rays[ri];
    const double tau = ray.tau;
    if (!(tau > 0)) continue;

    auto phi_prime = [&](double t) {
      const PhasePoint pt = ray.at(t);
      return f.gradient(pt.x).dot(hamilton_map(m, ray.wave, pt.x, pt.xi));
    };
    auto add_event = [&](double t) {
      // Merge tangencies that bisection landed on twice.
      for (const TangencyEvent& e : rep.events)
        if (e.ray == ri && std::abs(e.t - t) < 1e-6 * tau) return;
      const double h = 1e-6 * std::max(1.0, tau);
      TangencyEvent ev;
      ev.ray = ri;
      ev.t = t;
      ev.x = ray.at(t).x;
      ev.phi_second = (phi_prime(t + h) - phi_prime(t - h)) / (2.0 * h);
      rep.min_second =
          std::min(rep.min_second, orientation * ev.phi_second);
      rep.events.push_back(std::move(ev));
    };

    const int n = 201;
    double prev_t = 0, prev_d = phi_prime(0);
    for (int i = 1; i < n; ++i) {
      const double t = tau * i / (n - 1.0);
      const double d = phi_prime(t);
      if ((prev_d < 0) != (d < 0) && prev_d != 0) {
        // Bisect the sign change of phi'.
        double a = prev_t, b = t, da = prev_d;
        for (int k = 0; k < 80 && (b - a) > 1e-13 * tau; ++k) {
          const double mid = 0.5 * (a + b);
          const double dm = phi_prime(mid);
          if ((da < 0) == (dm < 0)) {
            a = mid;
            da = dm;
          } else {
            b = mid;
          }
        }
        add_event(0.5 * (a + b));
      } else if (std::abs(d) <= zero_band && i + 1 < n) {
        add_event(t);
      }
      prev_t = t;
      prev_d = d;
    }
  }

  rep.pass = rep.events.empty() || rep.min_second > 0;
  if (rep.events.empty()) rep.min_second = 0;
  return rep;
}

NondegenReport nondegeneracy_probe(const MaterialField& m, WaveMode w,
                                   const ScalarField& f, const Vec3& x,
                                   int n_fan, double det_floor) {
  NondegenReport rep;
  rep.wave = w;
  rep.det_floor = det_floor;

  // Euclidean-orthonormal tangent basis of the level set at x.
  const Vec3 n = f.gradient(x);
  if (n.norm() < 1e-12)
    throw ZeroGradientError("foliation gradient vanishes at the probe point");
  const Vec3 nh = n.normalized();
  int imin = 0;
  nh.cwiseAbs().minCoeff(&imin);
  const Vec3 t1 = nh.cross(Vec3::Unit(imin)).normalized();
  const Vec3 t2 = nh.cross(t1);

  rep.entries.resize(n_fan);
  parallel_for(n_fan, [&](long k) {
    const double th = 2.0 * M_PI * static_cast<double>(k) / n_fan;
    ProbeEntry e;
    e.v = std::cos(th) * t1 + std::sin(th) * t2;
    e.branches = hamilton_map_branches(m, w, x, e.v);
    for (const BranchSolution& b : e.branches)
      if (b.residual <= 1e-9 && std::abs(b.det_rel) > det_floor) e.ok = true;
    rep.entries[static_cast<size_t>(k)] = std::move(e);
  });

  rep.pass = !rep.entries.empty();
  for (const ProbeEntry& e : rep.entries) rep.pass = rep.pass && e.ok;
  return rep;
}

std::vector<SingularDirection> triplication_detect(const MaterialField& m,
                                                   WaveMode w, const Vec3& x,
                                                   int n_theta, int n_phi) {
  std::vector<SingularDirection> out;
  auto det_at = [&](double theta, double phi) {
    const Vec3 xi(std::sin(theta) * std::cos(phi),
                  std::sin(theta) * std::sin(phi), std::cos(theta));
    return det_rel_of(xi_hessian_ambient(m, w, {x, xi}));
  };
  for (int j = 0; j < n_phi; ++j) {
    const double phi = M_PI * j / n_phi;
    double prev_th = 0, prev_d = det_at(0, phi);
    for (int i = 1; i < n_theta; ++i) {
      const double th = M_PI * i / (n_theta - 1.0);
      const double d = det_at(th, phi);
      if ((prev_d < 0) != (d < 0)) {
        double a = prev_th, b = th, da = prev_d;
        while (b - a > 1e-10) {
          const double mid = 0.5 * (a + b);
          const double dm = det_at(mid, phi);
          if ((da < 0) == (dm < 0)) {
            a = mid;
            da = dm;
          } else {
            b = mid;
          }
        }
        const double ts = 0.5 * (a + b);
        SingularDirection sd;
        sd.xi = Vec3(std::sin(ts) * std::cos(phi),
                     std::sin(ts) * std::sin(phi), std::cos(ts));
        sd.det_before = prev_d;
        sd.det_after = d;
        bool dup = false;
        for (const SingularDirection& q : out)
          if ((q.xi - sd.xi).norm() < 1e-6) dup = true;
        if (!dup) out.push_back(std::move(sd));
      }
      prev_th = th;
      prev_d = d;
    }
  }
  return out;
}

}  // namespace tilens
