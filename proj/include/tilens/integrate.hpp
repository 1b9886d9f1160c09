#ifndef TILENS_INTEGRATE_HPP
#define TILENS_INTEGRATE_HPP

#include <Eigen/Core>
#include <functional>
#include <vector>

#include "tilens/types.hpp"

namespace tilens {

using StateVec = Eigen::VectorXd;

// Right-hand side y' = F(t, y), writing into dy.
using OdeRhs = std::function<void(double, const StateVec&, StateVec&)>;

struct OdeOptions {
  double rtol = 1e-10;
  double atol = 1e-12;
  double h_init = 1e-3;
  double h_min = 1e-14;
  double h_max = 0.0;  // 0 -> |t_end - t_begin|
  int max_steps = 200000;
};

// One accepted step with the interpolation coefficients for fourth-order
// dense output on [t0, t0+h].
struct OdeStep {
  double t0 = 0, h = 0;
  StateVec r1, r2, r3, r4, r5;

  StateVec eval(double t) const {
    const double th = (t - t0) / h;
    const double th1 = 1.0 - th;
    return r1 + th * (r2 + th1 * (r3 + th * (r4 + th1 * r5)));
  }
};

struct OdeSolution {
  std::vector<OdeStep> steps;
  double t_begin = 0, t_end = 0;
  StateVec y_end;
  long n_rhs = 0;  // RHS evaluation count

  // Dense output anywhere in [t_begin, t_end] (monotone t assumed).
  StateVec eval(double t) const;
};

// Adaptive Dormand-Prince 4(5) from t0 to t1 (either direction).  Throws
// NoConvergenceError if the step size underflows or the step budget runs out.
OdeSolution integrate_ode(const OdeRhs& rhs, double t0, const StateVec& y0,
                          double t1, const OdeOptions& opt = {});

// Scalar event function along the solution; integration may stop at its
// first sign change.
using OdeEvent = std::function<double(double, const StateVec&)>;

struct EventResult {
  OdeSolution sol;   // truncated at the event when hit
  bool hit = false;
  double t_event = 0;
  StateVec y_event;
};

// Integrate forward until event() changes sign, then localize the crossing
// by bisection on the dense output to |dt| < t_tol.  If no crossing occurs
// by t_max the result has hit = false and carries the full solution.
EventResult integrate_until(const OdeRhs& rhs, double t0, const StateVec& y0,
                            double t_max, const OdeEvent& event,
                            const OdeOptions& opt = {}, double t_tol = 1e-10);

}  // namespace tilens

#endif
