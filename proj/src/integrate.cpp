#include "tilens/integrate.hpp"

#include <algorithm>
#include <cmath>

namespace tilens {

namespace {

// Dormand-Prince 4(5) tableau (FSAL).
constexpr double kA21 = 1.0 / 5;
constexpr double kA31 = 3.0 / 40, kA32 = 9.0 / 40;
constexpr double kA41 = 44.0 / 45, kA42 = -56.0 / 15, kA43 = 32.0 / 9;
constexpr double kA51 = 19372.0 / 6561, kA52 = -25360.0 / 2187,
                 kA53 = 64448.0 / 6561, kA54 = -212.0 / 729;
constexpr double kA61 = 9017.0 / 3168, kA62 = -355.0 / 33,
                 kA63 = 46732.0 / 5247, kA64 = 49.0 / 176,
                 kA65 = -5103.0 / 18656;
constexpr double kA71 = 35.0 / 384, kA73 = 500.0 / 1113, kA74 = 125.0 / 192,
                 kA75 = -2187.0 / 6784, kA76 = 11.0 / 84;
constexpr double kC2 = 1.0 / 5, kC3 = 3.0 / 10, kC4 = 4.0 / 5, kC5 = 8.0 / 9;
// Embedded error weights b5 - b4.
constexpr double kE1 = 71.0 / 57600, kE3 = -71.0 / 16695, kE4 = 71.0 / 1920,
                 kE5 = -17253.0 / 339200, kE6 = 22.0 / 525, kE7 = -1.0 / 40;
// Dense-output weights.
constexpr double kD1 = -12715105075.0 / 11282082432.0;
constexpr double kD3 = 87487479700.0 / 32700410799.0;
constexpr double kD4 = -10690763975.0 / 1880347072.0;
constexpr double kD5 = 701980252875.0 / 199316789632.0;
constexpr double kD6 = -1453857185.0 / 822651844.0;
constexpr double kD7 = 69997945.0 / 29380423.0;

// Core stepper.  `observer` sees each accepted step and returns false to
// stop integration there.
OdeSolution run_dp45(const OdeRhs& rhs, double t0, const StateVec& y0,
                     double t1, const OdeOptions& opt,
                     const std::function<bool(const OdeStep&)>& observer) {
  OdeSolution sol;
  sol.t_begin = t0;
  if (t1 == t0) {
    sol.t_end = t0;
    sol.y_end = y0;
    return sol;
  }
  const double dir = t1 > t0 ? 1.0 : -1.0;
  const double span = std::abs(t1 - t0);
  const double hmax = opt.h_max > 0 ? opt.h_max : span;

  const Eigen::Index n = y0.size();
  StateVec y = y0, ynew(n), ytmp(n), err(n);
  StateVec k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n);
  double t = t0;
  rhs(t, y, k1);
  long n_rhs = 1;
  double h = std::min(opt.h_init, hmax) * dir;

  for (int step = 0; step < opt.max_steps; ++step) {
    if ((t - t1) * dir >= 0) {
      sol.t_end = t;
      sol.y_end = y;
      sol.n_rhs = n_rhs;
      return sol;
    }
    if (std::abs(h) > hmax) h = hmax * dir;
    // Stretch the final step to land on the endpoint exactly; t + (t1 - t)
    // can fall an ulp short of t1 otherwise.
    bool last = false;
    if ((t + h - t1) * dir > 0) {
      h = t1 - t;
      last = true;
    }

    ytmp = y + h * (kA21 * k1);
    rhs(t + kC2 * h, ytmp, k2);
    ytmp = y + h * (kA31 * k1 + kA32 * k2);
    rhs(t + kC3 * h, ytmp, k3);
    ytmp = y + h * (kA41 * k1 + kA42 * k2 + kA43 * k3);
    rhs(t + kC4 * h, ytmp, k4);
    ytmp = y + h * (kA51 * k1 + kA52 * k2 + kA53 * k3 + kA54 * k4);
    rhs(t + kC5 * h, ytmp, k5);
    ytmp = y + h * (kA61 * k1 + kA62 * k2 + kA63 * k3 + kA64 * k4 + kA65 * k5);
    rhs(t + h, ytmp, k6);
    ynew = y + h * (kA71 * k1 + kA73 * k3 + kA74 * k4 + kA75 * k5 + kA76 * k6);
    rhs(t + h, ynew, k7);
    n_rhs += 6;

    err = h * (kE1 * k1 + kE3 * k3 + kE4 * k4 + kE5 * k5 + kE6 * k6 + kE7 * k7);
    double e2 = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sc =
          opt.atol + opt.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
      const double q = err[i] / sc;
      e2 += q * q;
    }
    const double enorm = std::sqrt(e2 / static_cast<double>(n));

    if (enorm <= 1.0) {
      OdeStep st;
      st.t0 = t;
      st.h = h;
      st.r1 = y;
      st.r2 = ynew - y;
      st.r3 = h * k1 - st.r2;
      st.r4 = st.r2 - h * k7 - st.r3;
      st.r5 = h * (kD1 * k1 + kD3 * k3 + kD4 * k4 + kD5 * k5 + kD6 * k6 +
                   kD7 * k7);
      sol.steps.push_back(std::move(st));
      t = last ? t1 : t + h;
      y.swap(ynew);
      k1.swap(k7);  // FSAL
      if (observer && !observer(sol.steps.back())) {
        sol.t_end = t;
        sol.y_end = y;
        sol.n_rhs = n_rhs;
        return sol;
      }
    }
    const double fac =
        enorm == 0 ? 5.0 : std::clamp(0.9 * std::pow(enorm, -0.2), 0.2, 5.0);
    h *= fac;
    if (std::abs(h) < opt.h_min)
      throw NoConvergenceError("integrator step size underflow");
  }
  throw NoConvergenceError("integrator exceeded the step budget");
}

}  // namespace

StateVec OdeSolution::eval(double t) const {
  if (steps.empty()) return y_end;
  const bool fwd = t_end >= t_begin;
  // Binary search for the step containing t.
  size_t lo = 0, hi = steps.size() - 1;
  while (lo < hi) {
    const size_t mid = (lo + hi) / 2;
    const double te = steps[mid].t0 + steps[mid].h;
    if (fwd ? (te < t) : (te > t))
      lo = mid + 1;
    else
      hi = mid;
  }
  return steps[lo].eval(t);
}

OdeSolution integrate_ode(const OdeRhs& rhs, double t0, const StateVec& y0,
                          double t1, const OdeOptions& opt) {
  return run_dp45(rhs, t0, y0, t1, opt, nullptr);
}

EventResult integrate_until(const OdeRhs& rhs, double t0, const StateVec& y0,
                            double t_max, const OdeEvent& event,
                            const OdeOptions& opt, double t_tol) {
  EventResult res;
  double e_prev = event(t0, y0);
  bool crossed = false;

  OdeSolution sol = run_dp45(
      rhs, t0, y0, t_max, opt, [&](const OdeStep& st) {
        const double te = st.t0 + st.h;
        const double e_here = event(te, st.eval(te));
        if (e_here == 0 || ((e_prev < 0) != (e_here < 0))) {
          crossed = true;
          return false;
        }
        e_prev = e_here;
        return true;
      });

  if (!crossed) {
    res.sol = std::move(sol);
    res.hit = false;
    return res;
  }

  // Localize the crossing inside the last accepted step by bisection on
  // the dense output.
  const OdeStep& st = sol.steps.back();
  double a = st.t0, b = st.t0 + st.h;
  double ea = event(a, st.eval(a));
  if (ea == 0) {
    b = a;
  } else {
    while (std::abs(b - a) > t_tol) {
      const double mid = 0.5 * (a + b);
      const double em = event(mid, st.eval(mid));
      if (em == 0) {
        a = b = mid;
        break;
      }
      if ((ea < 0) == (em < 0)) {
        a = mid;
        ea = em;
      } else {
        b = mid;
      }
    }
  }
  res.hit = true;
  res.t_event = 0.5 * (a + b);
  res.y_event = st.eval(res.t_event);
  res.sol = std::move(sol);
  res.sol.t_end = res.t_event;
  res.sol.y_end = res.y_event;
  return res;
}

}  // namespace tilens
