#include "tilens/symbol.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

#include "tilens/parallel.hpp"

namespace tilens {
namespace {

constexpr double kPi = 3.14159265358979323846;

// Gauss-Legendre 8 on [-1, 1]; composite panels drive the arc quadrature.
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

Vec3 omega_hat(const FoliationFrame& fr, double phi) {
  return std::cos(phi) * fr.e1 + std::sin(phi) * fr.e2;
}

// Near-tangent vector entering the symbol weight: normal part scaled by the
// foliation depth, tangential part unit.
Vec3 tangent_vector(const FoliationFrame& fr, double lam, double phi) {
  return fr.x * lam * fr.n + omega_hat(fr, phi);
}

// Relative determinant of the covector Hessian: O(1) on a well-conditioned
// sheet, -> 0 approaching a fold of the Hamilton map.
double hessian_det_rel(const MaterialField& m, WaveMode w, const Vec3& z,
                       const Vec3& xi) {
  const Mat3 h = xi_hessian_ambient(m, w, PhasePoint{z, xi});
  const double s = h.norm() / std::sqrt(3.0);
  return s > 0 ? h.determinant() / (s * s * s) : 0.0;
}

// Below this the walked branch is about to merge with a neighbor and the
// preimage choice is no longer meaningful (healthy media stay above ~0.3).
constexpr double kFoldDetFloor = 1e-2;

// The quadrature needs a single covector branch over every critical tangent
// vector.  The qSV sheet loses that exactly when its tangent-plane Hessian
// entry 2 a33 - 2 (a13+a55)^2 / (a11-a55) turns nonpositive: the sheet
// saddles at xi3 = 0 and tangent directions acquire triplicated preimages.
// qP is immune (its entry 2 a55 + 2 (a13+a55)^2 / (a11-a55) is positive for
// every admissible medium).
void require_resolvable(const MaterialField& m, WaveMode w, const Vec3& z) {
  if (w != WaveMode::QSV) return;
  const ElasticParams p = m.params_at(z);
  const double d13 = p.a13 + p.a55;
  if (p.a33 * (p.a11 - p.a55) <= d13 * d13) {
    std::ostringstream os;
    os << "qSV tangent sheet folds at (" << z.transpose()
       << "): a33 (a11 - a55) <= (a13 + a55)^2, so near-tangent covector "
          "branches are not resolvable";
    throw BranchFailureError(os.str());
  }
}

// Hamilton-map inversion walking a continuous family of tangent vectors.
// The anchor picks, among all covector branches, the one nearest the
// tangent sheet (smallest |xi3| in the tilted frame); subsequent nodes
// warm-start Newton from the previous solution and re-anchor on failure or
// on a suspicious jump.
class BranchWalker {
 public:
  BranchWalker(const MaterialField& m, WaveMode w, const Vec3& z)
      : m_(m), w_(w), z_(z) {}

  Vec3 invert(const Vec3& v) {
    Vec3 xi = Vec3::Zero();
    bool ok = false;
    if (have_prev_) {
      try {
        xi = invert_hamilton_map(m_, w_, z_, v, prev_, nopt_);
        ok = (xi - prev_).norm() <= jump_guard_ * prev_.norm();
      } catch (const Error&) {
        // fall through to re-anchoring
      }
    }
    if (!ok) xi = anchor(v);
    const double dr = hessian_det_rel(m_, w_, z_, xi);
    if (std::abs(dr) < kFoldDetFloor) {
      std::ostringstream os;
      os << "covector Hessian near-singular (relative det " << dr
         << ") on the critical set: Hamilton-map branch folding";
      throw BranchFailureError(os.str());
    }
    prev_ = xi;
    have_prev_ = true;
    return xi;
  }

  void reset() { have_prev_ = false; }

 private:
  Vec3 anchor(const Vec3& v) const {
    std::vector<BranchSolution> branches;
    try {
      branches = hamilton_map_branches(m_, w_, z_, v, nopt_);
    } catch (const Error& e) {
      throw BranchFailureError(std::string("hamilton map inversion failed: ") +
                               e.what());
    }
    const Vec3* best = nullptr;
    double best_ax = 0;
    for (const auto& b : branches) {
      if (b.residual > nopt_.roundtrip_tol) continue;
      const double ax = std::abs(to_tilted(m_, z_, b.xi).xi3);
      if (!best || ax < best_ax) {
        best = &b.xi;
        best_ax = ax;
      }
    }
    if (!best) {
      std::ostringstream os;
      os << "no covector branch for tangent (" << v.transpose() << ") at ("
         << z_.transpose() << ")";
      throw BranchFailureError(os.str());
    }
    return *best;
  }

  const MaterialField& m_;
  WaveMode w_;
  Vec3 z_;
  NewtonOptions nopt_{};
  Vec3 prev_ = Vec3::Zero();
  bool have_prev_ = false;
  double jump_guard_ = 0.75;
};

Vec3 sens_vec(const MaterialField& m, WaveMode w, const Vec3& z,
              const Vec3& xi) {
  const MaterialSens s = material_sensitivities(m, w, PhasePoint{z, xi});
  return Vec3(s.de2, s.da11, s.da33);
}

// Shared core: accumulate sens * chi * leray over the critical set with a
// per-node sensitivity source.
Vec3 accumulate_symbol(const CriticalSet& cs, const CutoffSpec& cutoff,
                       const std::function<Vec3(const CriticalNode&)>& sens) {
  Vec3 acc = Vec3::Zero();
  for (const auto& nd : cs.nodes) {
    const double c = cutoff.chi(nd.lam);
    if (c == 0.0) continue;
    acc += nd.weight * c * sens(nd);
  }
  return acc;
}

// Fibonacci sphere with spacing close to the requested angular resolution.
std::vector<Vec3> sphere_grid(double spacing_deg) {
  const double spacing = spacing_deg * kPi / 180.0;
  const long n =
      std::max<long>(64, std::lround(4.0 * kPi / (spacing * spacing)));
  std::vector<Vec3> dirs(n);
  const double ga = kPi * (3.0 - std::sqrt(5.0));  // golden angle
  for (long k = 0; k < n; ++k) {
    const double c = 1.0 - (2.0 * k + 1.0) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - c * c));
    const double a = ga * k;
    dirs[k] = Vec3(c, r * std::cos(a), r * std::sin(a));
  }
  return dirs;
}

double angle_to_axis_deg(const Vec3& dir, const Vec3& axis) {
  const double c = std::min(1.0, std::abs(dir.dot(axis)));
  return std::acos(c) * 180.0 / kPi;
}

// Degree-4 least-squares fit of samples (t_k, f_k); returns the t^2
// coefficient.  The quartic window keeps the cubic/quartic tail of the ray
// expansion out of the curvature estimate.
double quadratic_coefficient(const std::vector<double>& t,
                             const std::vector<double>& f) {
  const int n = static_cast<int>(t.size());
  Eigen::MatrixXd a(n, 5);
  Eigen::VectorXd b(n);
  for (int i = 0; i < n; ++i) {
    double p = 1.0;
    for (int j = 0; j < 5; ++j) {
      a(i, j) = p;
      p *= t[i];
    }
    b(i) = f[i];
  }
  return a.colPivHouseholderQr().solve(b)(2);
}

struct GaussianWeight {
  double pref = 0;     // (zeta3^2 + fy^2)^{-1/2}, common factor
  double denom2 = 0;   // zeta3^2 + fy^2
};

GaussianWeight gaussian_setup(const ScatteringCovector& zeta, double fy) {
  zeta.validate();
  if (!(fy > 0)) throw ConfigError("fy must be positive");
  GaussianWeight g;
  g.denom2 = zeta.zeta3 * zeta.zeta3 + fy * fy;
  g.pref = 1.0 / std::sqrt(g.denom2);
  return g;
}

double gaussian_node_weight(const GaussianWeight& g, double fy, double alpha,
                            double y_dot_zp) {
  const double nu = alpha / fy;
  return std::pow(nu, -0.5) *
         std::exp(-(y_dot_zp * y_dot_zp) / (2.0 * nu * g.denom2));
}

}  // namespace

// ---------------------------------------------------------------------------
// Cutoff, frame, covector plumbing.
// ---------------------------------------------------------------------------

double CutoffSpec::chi(double s) const {
  const double l2 = lambda_max * lambda_max;
  const double s2 = s * s;
  if (s2 >= l2) return 0.0;
  return std::exp(-sharpness * s2 / (l2 - s2));
}

void CutoffSpec::validate() const {
  if (!(lambda_max > 0)) throw ConfigError("cutoff lambda_max must be > 0");
  if (!(sharpness > 0)) throw ConfigError("cutoff sharpness must be > 0");
  if (nodes < 16) throw ConfigError("cutoff nodes must be >= 16");
}

FoliationFrame foliation_frame(const ScalarField& fol, const Vec3& z) {
  FoliationFrame fr;
  const Vec3 g = fol.gradient(z);
  fr.grad_norm = g.norm();
  if (!(fr.grad_norm > 1e-14))
    throw ZeroGradientError("foliation gradient vanishes at the base point");
  fr.n = g / fr.grad_norm;
  fr.x = fol.value(z);
  // Deterministic tangent completion, same recipe as the tilt frame.
  const Vec3 seeds[3] = {Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ()};
  int got = 0;
  Vec3 t[2];
  for (const Vec3& s : seeds) {
    Vec3 c = s - s.dot(fr.n) * fr.n;
    for (int k = 0; k < got; ++k) c -= c.dot(t[k]) * t[k];
    const double nn = c.norm();
    if (nn > 1e-3) {
      t[got++] = c / nn;
      if (got == 2) break;
    }
  }
  if (got < 2) throw NumericalError("foliation frame completion failed");
  fr.e1 = t[0];
  fr.e2 = t[1];
  return fr;
}

double ScatteringCovector::norm() const {
  return std::sqrt(zeta3 * zeta3 + zeta_p.squaredNorm());
}

void ScatteringCovector::validate() const {
  if (!(norm() > 0)) throw ConfigError("zeta must be nonzero");
}

Vec3 axis_in_frame(const MaterialField& m, const FoliationFrame& fr,
                   const Vec3& z) {
  const Vec3 a = m.axis_at(z);
  return Vec3(a.dot(fr.n), a.dot(fr.e1), a.dot(fr.e2));
}

ScatteringCovector to_scattering(const FoliationFrame& fr, const Vec3& c) {
  ScatteringCovector zeta;
  zeta.zeta3 = fr.x * c(0);
  zeta.zeta_p = Eigen::Vector2d(c(1), c(2));
  const double n = zeta.norm();
  if (!(n > 0)) throw ConfigError("zeta must be nonzero");
  zeta.zeta3 /= n;
  zeta.zeta_p /= n;
  return zeta;
}

// ---------------------------------------------------------------------------
// Critical set.
// ---------------------------------------------------------------------------

CriticalSet critical_set(const ScatteringCovector& zeta,
                         const CutoffSpec& cutoff) {
  zeta.validate();
  cutoff.validate();
  const double z3 = zeta.zeta3;
  const double zp = zeta.zeta_p.norm();
  const double lam_max = cutoff.lambda_max;

  CriticalSet cs;
  if (zp <= lam_max * std::abs(z3)) {
    // The constraint solves for lam over the whole circle: lam(phi) =
    // -zeta'.omega / zeta3 stays inside the cutoff window.
    cs.branch = CriticalBranch::kCircleGraph;
    const int n = cutoff.nodes;
    const double dphi = 2.0 * kPi / n;
    cs.nodes.resize(n);
    for (int j = 0; j < n; ++j) {
      const double phi = dphi * (j + 0.5);
      const double dot =
          zeta.zeta_p(0) * std::cos(phi) + zeta.zeta_p(1) * std::sin(phi);
      cs.nodes[j] = {-dot / z3, phi, dphi / std::abs(z3)};
    }
    return cs;
  }

  // zeta' dominant: two arcs, each a graph phi(lam) over the cutoff window,
  // on either side of the kernel of zeta'.
  cs.branch = CriticalBranch::kLambdaArcs;
  const double phi_z = std::atan2(zeta.zeta_p(1), zeta.zeta_p(0));
  const int panels = std::max(1, cutoff.nodes / (2 * kGlN));
  const double hw = lam_max / panels;  // panel half-count over [-L, L]
  cs.nodes.reserve(2 * panels * kGlN);
  for (int side = 0; side < 2; ++side) {
    const double sgn = side == 0 ? 1.0 : -1.0;
    for (int p = 0; p < panels; ++p) {
      const double a = -lam_max + 2.0 * hw * p;
      for (int g = 0; g < kGlN; ++g) {
        const double lam = a + hw * (1.0 + kGlX[g]);
        const double cosd = std::clamp(-z3 * lam / zp, -1.0, 1.0);
        const double sind = std::sqrt(std::max(0.0, 1.0 - cosd * cosd));
        if (sind < 1e-300) continue;  // grazing endpoint; chi vanishes there
        const double phi = phi_z + sgn * std::acos(cosd);
        cs.nodes.push_back({lam, phi, hw * kGlW[g] / (zp * sind)});
      }
    }
  }
  return cs;
}

// ---------------------------------------------------------------------------
// Standard symbol.
// ---------------------------------------------------------------------------

Vec3 standard_symbol_all(const MaterialField& m, WaveMode w, const Vec3& z,
                         const ScalarField& fol,
                         const ScatteringCovector& zeta,
                         const CutoffSpec& cutoff) {
  if (w == WaveMode::QSH)
    throw ConfigError("qSH data carries no (E2, a11, a33) sensitivity");
  require_resolvable(m, w, z);
  const FoliationFrame fr = foliation_frame(fol, z);
  const CriticalSet cs = critical_set(zeta, cutoff);
  BranchWalker walker(m, w, z);
  // Restart the warm chain at the second arc.
  size_t arc_break = cs.nodes.size();
  if (cs.branch == CriticalBranch::kLambdaArcs)
    arc_break = cs.nodes.size() / 2;
  size_t idx = 0;
  return accumulate_symbol(cs, cutoff, [&](const CriticalNode& nd) {
    if (idx++ == arc_break) walker.reset();
    const Vec3 v = tangent_vector(fr, nd.lam, nd.phi);
    return sens_vec(m, w, z, walker.invert(v));
  });
}

double standard_symbol(const MaterialField& m, WaveMode w, Param l,
                       const Vec3& z, const ScalarField& fol,
                       const ScatteringCovector& zeta,
                       const CutoffSpec& cutoff) {
  return standard_symbol_all(m, w, z, fol, zeta, cutoff)(
      static_cast<int>(l));
}

// ---------------------------------------------------------------------------
// Sensitivity table and degeneracy scan.
// ---------------------------------------------------------------------------

Vec3 SymbolTable::sens_at(double lam, double phi) const {
  const double li = std::clamp((lam + lam_max) / (2.0 * lam_max), 0.0, 1.0) *
                    (n_lam - 1);
  const int i0 = std::min(n_lam - 2, static_cast<int>(li));
  const double fi = li - i0;
  double pj = phi / (2.0 * kPi) * n_phi;
  pj -= std::floor(pj / n_phi) * n_phi;
  const int j0 = static_cast<int>(pj) % n_phi;
  const int j1 = (j0 + 1) % n_phi;
  const double fj = pj - std::floor(pj);
  const auto at = [&](int i, int j) -> const Vec3& {
    return sens[static_cast<size_t>(i) * n_phi + j];
  };
  return (1 - fi) * ((1 - fj) * at(i0, j0) + fj * at(i0, j1)) +
         fi * ((1 - fj) * at(i0 + 1, j0) + fj * at(i0 + 1, j1));
}

SymbolTable build_symbol_table(const MaterialField& m, WaveMode w,
                               const Vec3& z, const ScalarField& fol,
                               double lam_max, int n_lam, int n_phi) {
  if (w == WaveMode::QSH)
    throw ConfigError("qSH data carries no (E2, a11, a33) sensitivity");
  if (n_lam < 2 || n_phi < 8) throw ConfigError("symbol table too coarse");
  require_resolvable(m, w, z);
  SymbolTable tb;
  tb.frame = foliation_frame(fol, z);
  tb.z = z;
  tb.wave = w;
  tb.lam_max = lam_max;
  tb.n_lam = n_lam;
  tb.n_phi = n_phi;
  tb.sens.resize(static_cast<size_t>(n_lam) * n_phi);
  BranchWalker walker(m, w, z);
  // Serpentine walk keeps consecutive tangent vectors close so the warm
  // Newton chain never jumps sheets.
  for (int i = 0; i < n_lam; ++i) {
    const double lam = -lam_max + 2.0 * lam_max * i / (n_lam - 1);
    for (int jj = 0; jj < n_phi; ++jj) {
      const int j = (i % 2 == 0) ? jj : n_phi - 1 - jj;
      const double phi = 2.0 * kPi * j / n_phi;
      const Vec3 v = tangent_vector(tb.frame, lam, phi);
      tb.sens[static_cast<size_t>(i) * n_phi + j] =
          sens_vec(m, w, z, walker.invert(v));
    }
  }
  return tb;
}

SymbolScan degeneracy_scan(const MaterialField& m, WaveMode w, Param l,
                           const Vec3& z, const ScalarField& fol,
                           const ScanOptions& opt) {
  opt.cutoff.validate();
  SymbolScan scan;
  scan.wave = w;
  scan.l = l;

  const FoliationFrame fr = foliation_frame(fol, z);
  scan.boundary = std::abs(fr.x) <= opt.boundary_band;
  const Vec3 axis = axis_in_frame(m, fr, z);
  // Scattering image of the axis: the exact zero direction of the a33/E2
  // weights (a tangent vector is annihilated by df iff its covector has
  // xi3 = 0, since axis . H(xi) = 2 dp/d(xi3^2) xi3).
  const Vec3 image(fr.x * axis(0), axis(1), axis(2));
  scan.expected =
      image.norm() > 1e-12 ? Vec3(image.normalized()) : Vec3::Zero();

  const SymbolTable tb = build_symbol_table(
      m, w, z, fol, opt.cutoff.lambda_max, opt.table_lam, opt.cutoff.nodes);

  const std::vector<Vec3> dirs = sphere_grid(opt.grid_spacing_deg);
  const int comp = static_cast<int>(l);
  scan.grid.resize(dirs.size());
  parallel_for(static_cast<long>(dirs.size()), [&](long k) {
    const Vec3& c = dirs[k];
    ScatteringCovector zeta;
    zeta.zeta3 = c(0);
    zeta.zeta_p = Eigen::Vector2d(c(1), c(2));
    const CriticalSet cs = critical_set(zeta, opt.cutoff);
    const Vec3 val = accumulate_symbol(cs, opt.cutoff, [&](const CriticalNode& nd) {
      return tb.sens_at(nd.lam, nd.phi);
    });
    scan.grid[k] = {c, val(comp)};
  });

  scan.max_abs = 0;
  for (const auto& s : scan.grid)
    scan.max_abs = std::max(scan.max_abs, std::abs(s.value));
  const double thresh = opt.rel_tol * scan.max_abs;

  // The table carries interpolation noise of a few 1e-4 relative, which is
  // the same order as the threshold; confirm every near-threshold direction
  // with an exact (Newton-path) quadrature before classifying it.
  std::vector<long> candidates;
  for (long k = 0; k < static_cast<long>(scan.grid.size()); ++k)
    if (std::abs(scan.grid[k].value) < 3.0 * thresh) candidates.push_back(k);
  parallel_for(static_cast<long>(candidates.size()), [&](long i) {
    const long k = candidates[i];
    ScatteringCovector zeta;
    zeta.zeta3 = scan.grid[k].dir(0);
    zeta.zeta_p = Eigen::Vector2d(scan.grid[k].dir(1), scan.grid[k].dir(2));
    scan.grid[k].value =
        standard_symbol(m, w, l, z, fol, zeta, opt.cutoff);
  });

  scan.min_abs = std::numeric_limits<double>::infinity();
  for (const auto& s : scan.grid)
    scan.min_abs = std::min(scan.min_abs, std::abs(s.value));
  scan.margin = scan.max_abs > 0 ? scan.min_abs / scan.max_abs : 0.0;
  scan.worst_misalign_deg = 0;
  for (long k = 0; k < static_cast<long>(scan.grid.size()); ++k) {
    if (std::abs(scan.grid[k].value) >= thresh) continue;
    scan.degenerate.push_back(k);
    const double ang = scan.expected.norm() > 0
                           ? angle_to_axis_deg(scan.grid[k].dir, scan.expected)
                           : 180.0;
    scan.worst_misalign_deg = std::max(scan.worst_misalign_deg, ang);
  }
  scan.pass = scan.worst_misalign_deg <= opt.pass_radius_deg;
  return scan;
}

// ---------------------------------------------------------------------------
// Quadratic fit.
// ---------------------------------------------------------------------------

QuadraticFit quadratic_fit(const MaterialField& m, WaveMode w, Param l,
                           const Vec3& z, const ScalarField& fol,
                           const Vec3& nu, const FitOptions& opt) {
  opt.cutoff.validate();
  if (opt.k_max <= opt.k_min + 1)
    throw ConfigError("fit ladder needs at least three rungs");
  const FoliationFrame fr = foliation_frame(fol, z);
  const Vec3 axis = axis_in_frame(m, fr, z);

  QuadraticFit fit;
  const Vec3 image(fr.x * axis(0), axis(1), axis(2));
  if (image.norm() < 1e-12)
    throw FitFailureError("axis image vanishes at the base point");
  fit.base_dir = image.normalized();
  Vec3 t = nu - nu.dot(fit.base_dir) * fit.base_dir;
  if (t.norm() < opt.min_transversality)
    throw FitFailureError("probe direction parallel to the degenerate axis");
  fit.trans_dir = t.normalized();

  for (int k = opt.k_min; k <= opt.k_max; ++k) {
    const double eps = std::ldexp(1.0, -k);
    const Vec3 c = (fit.base_dir + eps * fit.trans_dir).normalized();
    ScatteringCovector zeta;
    zeta.zeta3 = c(0);
    zeta.zeta_p = Eigen::Vector2d(c(1), c(2));
    const double v =
        std::abs(standard_symbol(m, w, l, z, fol, zeta, opt.cutoff));
    if (!(v > 1e-300))
      throw FitFailureError("symbol vanished on the probe ladder");
    fit.eps.push_back(eps);
    fit.values.push_back(v);
  }

  // Least-squares line in log-log coordinates.
  const int n = static_cast<int>(fit.eps.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    const double x = std::log(fit.eps[i]);
    const double y = std::log(fit.values[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double det = n * sxx - sx * sx;
  fit.q = (n * sxy - sx * sy) / det;
  const double b = (sy * sxx - sx * sxy) / det;
  fit.c = std::exp(b);
  fit.residual = 0;
  for (int i = 0; i < n; ++i) {
    const double pred = b + fit.q * std::log(fit.eps[i]);
    fit.residual =
        std::max(fit.residual, std::abs(std::log(fit.values[i]) - pred));
  }
  if (fit.residual > opt.max_residual) {
    std::ostringstream os;
    os << "power-law fit residual " << fit.residual << " exceeds "
       << opt.max_residual;
    throw FitFailureError(os.str());
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Boundary symbol at finite points.
// ---------------------------------------------------------------------------

BoundaryCircleTable boundary_circle_table(const MaterialField& m, WaveMode w,
                                          const Vec3& z,
                                          const ScalarField& fol,
                                          const CircleTableOptions& opt) {
  if (w == WaveMode::QSH)
    throw ConfigError("qSH data carries no (E2, a11, a33) sensitivity");
  if (opt.nodes < 16) throw ConfigError("circle table nodes must be >= 16");
  if (!(opt.fit_window > 0)) throw ConfigError("fit_window must be positive");
  require_resolvable(m, w, z);
  BoundaryCircleTable tb;
  tb.frame = foliation_frame(fol, z);
  tb.z = z;
  tb.wave = w;
  tb.phi.resize(opt.nodes);
  tb.alpha.resize(opt.nodes);
  tb.xi.resize(opt.nodes);
  tb.sens.resize(opt.nodes);

  BranchWalker walker(m, w, z);
  const int ns = std::max(2, opt.fit_samples);
  const double h = opt.fit_window;
  tb.min_alpha = std::numeric_limits<double>::infinity();
  for (int j = 0; j < opt.nodes; ++j) {
    const double phi = 2.0 * kPi * j / opt.nodes;
    tb.phi[j] = phi;
    const Vec3 y_hat = omega_hat(tb.frame, phi);
    const Vec3 xi = walker.invert(y_hat);
    tb.xi[j] = xi;
    tb.sens[j] = sens_vec(m, w, z, xi);

    // Short bicharacteristic through (z, xi), both time directions; quartic
    // fit of the foliation value gives the curvature coefficient.
    OdeRhs rhs = [&m, w](double, const StateVec& y, StateVec& dy) {
      const HamiltonianDerivs d =
          hamiltonian_derivs(m, w, {y.head<3>(), y.tail<3>()});
      dy.head<3>() = d.dp_dxi;
      dy.tail<3>() = -d.dp_dx;
    };
    StateVec y0(6);
    y0 << z, xi;
    const OdeSolution fwd = integrate_ode(rhs, 0.0, y0, h, opt.ode);
    const OdeSolution bwd = integrate_ode(rhs, 0.0, y0, -h, opt.ode);
    std::vector<double> ts, fs;
    ts.reserve(2 * ns + 1);
    fs.reserve(2 * ns + 1);
    for (int k = -ns; k <= ns; ++k) {
      const double t = h * k / ns;
      const StateVec y = k < 0 ? bwd.eval(t) : (k > 0 ? fwd.eval(t) : y0);
      ts.push_back(t);
      fs.push_back(fol.value(y.head<3>()));
    }
    const double a = quadratic_coefficient(ts, fs);
    tb.alpha[j] = a;
    tb.min_alpha = std::min(tb.min_alpha, a);
    if (!(a > 0)) {
      std::ostringstream os;
      os << "ray curvature alpha = " << a << " at phi = " << phi
         << ": foliation is not convex for this wave at (" << z.transpose()
         << ")";
      throw NonpositiveNuError(os.str());
    }
  }
  return tb;
}

double boundary_symbol_finite(const BoundaryCircleTable& table, Param l,
                              const ScatteringCovector& zeta, double fy) {
  const GaussianWeight g = gaussian_setup(zeta, fy);
  const int n = static_cast<int>(table.phi.size());
  const double dphi = 2.0 * kPi / n;
  const int comp = static_cast<int>(l);
  double acc = 0;
  for (int j = 0; j < n; ++j) {
    const double y_dot =
        zeta.zeta_p(0) * std::cos(table.phi[j]) +
        zeta.zeta_p(1) * std::sin(table.phi[j]);
    acc += dphi * gaussian_node_weight(g, fy, table.alpha[j], y_dot) *
           table.sens[j](comp);
  }
  return g.pref * acc;
}

double boundary_symbol_finite(const MaterialField& m, WaveMode w, Param l,
                              const Vec3& z, const ScalarField& fol,
                              const ScatteringCovector& zeta, double fy,
                              const CircleTableOptions& opt) {
  return boundary_symbol_finite(boundary_circle_table(m, w, z, fol, opt), l,
                                zeta, fy);
}

// ---------------------------------------------------------------------------
// Two-parameter matrix symbol.
// ---------------------------------------------------------------------------

TwoParamSymbol two_param_matrix_symbol(const MaterialField& m, Param mu1,
                                       Param mu2, const Vec3& z,
                                       const ScalarField& fol,
                                       const ScatteringCovector& zeta,
                                       const TwoParamOptions& opt) {
  if (mu1 == mu2) throw ConfigError("mu1 and mu2 must differ");
  const bool functional = std::isfinite(opt.fprime);
  if (functional && mu2 == Param::A33)
    throw ConfigError("functional constraint needs mu2 != a33");
  const GaussianWeight g = gaussian_setup(zeta, opt.fy);

  CircleTableOptions topt = opt.table;
  topt.nodes = opt.nodes;
  const BoundaryCircleTable tp = boundary_circle_table(m, WaveMode::QP, z, fol, topt);
  const BoundaryCircleTable ts = boundary_circle_table(m, WaveMode::QSV, z, fol, topt);
  const ReducedParams rp = m.reduced_at(z);

  auto column = [&](const MaterialSens& sens, Param mu) {
    double v = sens.get(mu);
    if (functional && mu == mu2) v += opt.fprime * sens.da33;
    return v;
  };

  TwoParamSymbol out;
  const int n = opt.nodes;
  const double dphi = 2.0 * kPi / n;
  out.max_rank_measure = 0;
  for (int j = 0; j < n; ++j) {
    // Common covector for both rows: the qP inverse of the node tangent.
    const TiltedCovector tc = to_tilted(m, z, tp.xi[j]);
    const double u = tc.xi_perp_sq, v = tc.xi3 * tc.xi3;
    const MaterialSens sp = uv_sensitivities(rp, WaveMode::QP, u, v);
    const MaterialSens sm = uv_sensitivities(rp, WaveMode::QSV, u, v);
    Eigen::Matrix2d s;
    s(0, 0) = column(sp, mu1);
    s(0, 1) = column(sp, mu2);
    s(1, 0) = column(sm, mu1);
    s(1, 1) = column(sm, mu2);

    const double c1 = s.col(0).norm(), c2 = s.col(1).norm();
    if (c1 * c2 > 0)
      out.max_rank_measure = std::max(
          out.max_rank_measure, std::abs(s.determinant()) / (c1 * c2));

    const double y_dot = zeta.zeta_p(0) * std::cos(tp.phi[j]) +
                         zeta.zeta_p(1) * std::sin(tp.phi[j]);
    Eigen::Matrix2d w2 = Eigen::Matrix2d::Zero();
    w2(0, 0) = gaussian_node_weight(g, opt.fy, tp.alpha[j], y_dot);
    w2(1, 1) = gaussian_node_weight(g, opt.fy, ts.alpha[j], y_dot);
    out.mat += dphi * s.transpose() * w2 * s;
  }
  out.mat *= g.pref;
  out.rank_deficient = out.max_rank_measure < opt.rank_rel_tol;
  const Eigen::Matrix2d sym = 0.5 * (out.mat + out.mat.transpose());
  out.min_sym_eig =
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d>(sym).eigenvalues()(0);
  return out;
}

// ---------------------------------------------------------------------------
// Functional-constraint coefficient.
// ---------------------------------------------------------------------------

double functional_a11_coefficient(const ReducedParams& rp, double u, double v,
                                  double fprime, double hprime) {
  const MaterialSens sp = uv_sensitivities(rp, WaveMode::QP, u, v);
  const MaterialSens sm = uv_sensitivities(rp, WaveMode::QSV, u, v);
  return sp.da11 + fprime * sp.da33 + hprime * sp.de2 +
         sm.da11 + fprime * sm.da33 + hprime * sm.de2;
}

}  // namespace tilens
