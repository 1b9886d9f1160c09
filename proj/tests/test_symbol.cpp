#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "tilens/symbol.hpp"

using namespace tilens;

namespace {

constexpr double kPi = 3.14159265358979323846;

const Box kBox{Vec3(0, 0, 0), Vec3(1, 1, 1)};
// TI axis tilted 30 degrees from the vertical.
const Vec3 kAxis(0.5, 0.0, std::sqrt(3.0) / 2.0);
// Spherical foliation: level sets are spheres around a deep center; the
// artificial boundary x = 0 passes through the apex point below.
const Vec3 kFolCenter(0.5, 0.5, -2.0);
const double kFolRadius = 2.85;
const Vec3 kInterior(0.5, 0.5, 0.95);  // x = 0.1, frame n = +z
const Vec3 kApex(0.5, 0.5, 0.85);      // x = 0, frame n = +z

RadialField foliation() { return RadialField(kFolCenter, kFolRadius, 1.0); }

MaterialField tilted(const ElasticParams& p, const Vec3& axis = kAxis) {
  return MaterialField::uniform(kBox, p,
                                std::make_shared<LinearField>(axis, 0.0));
}

// ---------------------------------------------------------------------------
// Closed forms for the isotropic oracle medium iso(2,1) = {4,2,4,1,1}:
// E2 = 0, so p_qP = 8|xi|^2 and p_qSV = 2|xi|^2, with Hamilton maps 16 xi
// and 4 xi; rho = S/sqrt(R) = 1.
// ---------------------------------------------------------------------------

Vec3 iso_inverse(WaveMode w, const Vec3& v) {
  return w == WaveMode::QP ? Vec3(v / 16.0) : Vec3(v / 4.0);
}

Vec3 iso_sens_at(WaveMode w, const Vec3& xi) {
  const double x3 = xi.dot(kAxis);
  const double ww = x3 * x3;
  const double u = xi.squaredNorm() - ww;
  const double s = u + ww;
  if (w == WaveMode::QP) return Vec3(-2.0 * u * ww / (3.0 * s), 2.0 * u, 2.0 * ww);
  return Vec3(2.0 * u * ww / (3.0 * s), 0.0, 0.0);
}

Vec3 tangent_of(const FoliationFrame& fr, double lam, double phi) {
  return fr.x * lam * fr.n + std::cos(phi) * fr.e1 + std::sin(phi) * fr.e2;
}

// Composite-Simpson quadrature of the critical-set integral for the
// isotropic medium, independent of critical_set/Newton: circle-graph branch.
Vec3 oracle_circle(WaveMode w, const FoliationFrame& fr,
                   const ScatteringCovector& zeta, const CutoffSpec& cut,
                   int n) {
  const double h = 2.0 * kPi / n;
  Vec3 acc = Vec3::Zero();
  for (int k = 0; k <= n; ++k) {
    const double phi = h * k;
    const double dot =
        zeta.zeta_p(0) * std::cos(phi) + zeta.zeta_p(1) * std::sin(phi);
    const double lam = -dot / zeta.zeta3;
    const double simp = (k == 0 || k == n) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    const Vec3 xi = iso_inverse(w, tangent_of(fr, lam, phi));
    acc += simp * (h / 3.0) * cut.chi(lam) / std::abs(zeta.zeta3) *
           iso_sens_at(w, xi);
  }
  return acc;
}

// Same for the two-arc branch (|zeta'| dominant), integrating in lambda.
Vec3 oracle_arcs(WaveMode w, const FoliationFrame& fr,
                 const ScatteringCovector& zeta, const CutoffSpec& cut,
                 int n) {
  const double zp = zeta.zeta_p.norm();
  const double phi_z = std::atan2(zeta.zeta_p(1), zeta.zeta_p(0));
  const double lmax = cut.lambda_max;
  const double h = 2.0 * lmax / n;
  Vec3 acc = Vec3::Zero();
  for (int side = 0; side < 2; ++side) {
    const double sgn = side == 0 ? 1.0 : -1.0;
    for (int k = 0; k <= n; ++k) {
      const double lam = -lmax + h * k;
      const double cosd = -zeta.zeta3 * lam / zp;
      const double sind = std::sqrt(1.0 - cosd * cosd);
      const double phi = phi_z + sgn * std::acos(cosd);
      const double simp = (k == 0 || k == n) ? 1.0 : (k % 2 ? 4.0 : 2.0);
      const Vec3 xi = iso_inverse(w, tangent_of(fr, lam, phi));
      acc += simp * (h / 3.0) * cut.chi(lam) / (zp * sind) *
             iso_sens_at(w, xi);
    }
  }
  return acc;
}

void orthonormal_pair(const Vec3& b, Vec3& t1, Vec3& t2) {
  const Vec3 seed = std::abs(b(0)) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  t1 = (seed - seed.dot(b) * b).normalized();
  t2 = b.cross(t1).normalized();
}

ScatteringCovector sc(double z3, double p1, double p2) {
  ScatteringCovector zeta;
  zeta.zeta3 = z3;
  zeta.zeta_p = Eigen::Vector2d(p1, p2);
  return zeta;
}

}  // namespace

TEST_CASE("cutoff bump has the advertised shape") {
  CutoffSpec cut;
  CHECK(cut.chi(0.0) == 1.0);
  CHECK(cut.chi(0.5) == 0.0);
  CHECK(cut.chi(0.75) == 0.0);
  CHECK(cut.chi(0.3) ==
        doctest::Approx(std::exp(-0.09 / (0.25 - 0.09))).epsilon(1e-14));
  CHECK(cut.chi(-0.3) == cut.chi(0.3));
  CutoffSpec bad;
  bad.lambda_max = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("critical set realizes the constraint in both parameterizations") {
  const CutoffSpec cut;

  SUBCASE("pure zeta3: the whole circle at lambda = 0") {
    const CriticalSet cs = critical_set(sc(1, 0, 0), cut);
    CHECK(cs.branch == CriticalBranch::kCircleGraph);
    CHECK(cs.nodes.size() == 512);
    double wsum = 0;
    for (const auto& nd : cs.nodes) {
      CHECK(nd.lam == 0.0);
      wsum += nd.weight;
    }
    CHECK(wsum == doctest::Approx(2.0 * kPi).epsilon(1e-12));
  }

  SUBCASE("pure zeta': the kernel line, lambda free over the window") {
    const CriticalSet cs = critical_set(sc(0, 1, 0), cut);
    CHECK(cs.branch == CriticalBranch::kLambdaArcs);
    double lam_lo = 1, lam_hi = -1;
    bool plus = false, minus = false;
    for (const auto& nd : cs.nodes) {
      CHECK(std::abs(std::cos(nd.phi)) < 1e-12);  // omega = (0, +-1)
      lam_lo = std::min(lam_lo, nd.lam);
      lam_hi = std::max(lam_hi, nd.lam);
      (std::sin(nd.phi) > 0 ? plus : minus) = true;
    }
    CHECK(lam_lo < -0.45);
    CHECK(lam_hi > 0.45);
    CHECK(plus);
    CHECK(minus);
  }

  SUBCASE("mixed: lambda = -omega_1, truncated to the window") {
    const CriticalSet cs = critical_set(sc(1, 1, 0), cut);
    CHECK(cs.branch == CriticalBranch::kLambdaArcs);
    for (const auto& nd : cs.nodes) {
      CHECK(nd.lam == doctest::Approx(-std::cos(nd.phi)).epsilon(1e-12));
      CHECK(std::abs(std::cos(nd.phi)) <= cut.lambda_max + 1e-12);
    }
  }

  SUBCASE("constraint and window hold on random covectors") {
    std::mt19937_64 rng(71);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (int t = 0; t < 50; ++t) {
      const ScatteringCovector zeta = sc(n01(rng), n01(rng), n01(rng));
      if (zeta.norm() < 1e-3) continue;
      const CriticalSet cs = critical_set(zeta, cut);
      CHECK(!cs.nodes.empty());
      for (const auto& nd : cs.nodes) {
        const double res = zeta.zeta3 * nd.lam +
                           zeta.zeta_p(0) * std::cos(nd.phi) +
                           zeta.zeta_p(1) * std::sin(nd.phi);
        CHECK(std::abs(res) < 1e-12 * zeta.norm());
        CHECK(std::abs(nd.lam) <= cut.lambda_max + 1e-12);
        CHECK(nd.weight > 0.0);
      }
    }
  }

  SUBCASE("zero covector is rejected") {
    CHECK_THROWS_AS(critical_set(sc(0, 0, 0), cut), ConfigError);
  }
}

TEST_CASE("leray measure is continuous across the branch switch") {
  const CutoffSpec cut;
  const double d = 1e-3;
  const ScatteringCovector a = sc(1, cut.lambda_max * (1 - d), 0);
  const ScatteringCovector b = sc(1, cut.lambda_max * (1 + d), 0);
  const CriticalSet ca = critical_set(a, cut);
  const CriticalSet cb = critical_set(b, cut);
  REQUIRE(ca.branch == CriticalBranch::kCircleGraph);
  REQUIRE(cb.branch == CriticalBranch::kLambdaArcs);
  double ma = 0, mb = 0;
  for (const auto& nd : ca.nodes) ma += nd.weight * cut.chi(nd.lam);
  for (const auto& nd : cb.nodes) mb += nd.weight * cut.chi(nd.lam);
  CHECK(ma == doctest::Approx(mb).epsilon(5e-3));
}

TEST_CASE("standard symbol matches the isotropic closed-form oracle") {
  const MaterialField m = tilted(tu::isotropic(2, 1));
  const RadialField fol = foliation();
  const CutoffSpec cut;
  const FoliationFrame fr = foliation_frame(fol, kInterior);
  REQUIRE(fr.x == doctest::Approx(0.1).epsilon(1e-12));
  REQUIRE((fr.n - Vec3(0, 0, 1)).norm() < 1e-12);

  SUBCASE("circle-graph branch") {
    const ScatteringCovector zeta = sc(1.0, 0.3, 0.1);
    REQUIRE(critical_set(zeta, cut).branch == CriticalBranch::kCircleGraph);
    const Vec3 oracle = oracle_circle(WaveMode::QP, fr, zeta, cut, 8192);
    const Vec3 got = standard_symbol_all(m, WaveMode::QP, kInterior, fol, zeta, cut);
    for (int i = 0; i < 3; ++i)
      CHECK(got(i) == doctest::Approx(oracle(i)).epsilon(1e-6));
    // Frozen values guard the quadrature against silent drift.
    CHECK(got(0) == doctest::Approx(-0.0010390657448727434).epsilon(1e-9));
    CHECK(got(1) == doctest::Approx(0.033985280334839517).epsilon(1e-9));
    CHECK(got(2) == doctest::Approx(0.0037130180242567604).epsilon(1e-9));

    const Vec3 osv = oracle_circle(WaveMode::QSV, fr, zeta, cut, 8192);
    const Vec3 gsv =
        standard_symbol_all(m, WaveMode::QSV, kInterior, fol, zeta, cut);
    CHECK(gsv(0) == doctest::Approx(osv(0)).epsilon(1e-6));
    CHECK(std::abs(gsv(1)) < 1e-12 * std::abs(gsv(0)));
    CHECK(std::abs(gsv(2)) < 1e-12 * std::abs(gsv(0)));
  }

  SUBCASE("two-arc branch") {
    const ScatteringCovector zeta = sc(0.3, 0.8, 0.2);
    REQUIRE(critical_set(zeta, cut).branch == CriticalBranch::kLambdaArcs);
    const Vec3 oracle = oracle_arcs(WaveMode::QP, fr, zeta, cut, 8192);
    const Vec3 got = standard_symbol_all(m, WaveMode::QP, kInterior, fol, zeta, cut);
    for (int i = 0; i < 3; ++i)
      CHECK(got(i) == doctest::Approx(oracle(i)).epsilon(1e-6));
  }

  SUBCASE("scalar accessor picks the requested component") {
    const ScatteringCovector zeta = sc(1.0, 0.3, 0.1);
    const Vec3 all = standard_symbol_all(m, WaveMode::QP, kInterior, fol, zeta, cut);
    CHECK(standard_symbol(m, WaveMode::QP, Param::E2, kInterior, fol, zeta, cut) == all(0));
    CHECK(standard_symbol(m, WaveMode::QP, Param::A11, kInterior, fol, zeta, cut) == all(1));
    CHECK(standard_symbol(m, WaveMode::QP, Param::A33, kInterior, fol, zeta, cut) == all(2));
  }

  SUBCASE("symbol value is continuous across the branch switch") {
    const CutoffSpec c2;
    const double lm = c2.lambda_max, d = 1e-3;
    const Vec3 a = standard_symbol_all(m, WaveMode::QP, kInterior, fol,
                                       sc(1.0, lm * (1 - d), 0.0), c2);
    const Vec3 b = standard_symbol_all(m, WaveMode::QP, kInterior, fol,
                                       sc(1.0, lm * (1 + d), 0.0), c2);
    CHECK((a - b).norm() < 5e-3 * a.norm());
  }

  SUBCASE("qSH is rejected") {
    CHECK_THROWS_AS(standard_symbol_all(m, WaveMode::QSH, kInterior, fol,
                                        sc(1, 0, 0), cut),
                    ConfigError);
  }
}

TEST_CASE("sensitivity table interpolation tracks the exact quadrature") {
  const MaterialField m = tilted(tu::m0());
  const RadialField fol = foliation();
  const CutoffSpec cut;
  const SymbolTable tb =
      build_symbol_table(m, WaveMode::QP, kInterior, fol, cut.lambda_max, 33, 512);
  for (const ScatteringCovector& zeta :
       {sc(1.0, 0.2, -0.1), sc(0.2, 0.9, 0.3), sc(-0.6, 0.25, 0.05)}) {
    const Vec3 exact =
        standard_symbol_all(m, WaveMode::QP, kInterior, fol, zeta, cut);
    const CriticalSet cs = critical_set(zeta, cut);
    Vec3 interp = Vec3::Zero();
    for (const auto& nd : cs.nodes)
      interp += nd.weight * cut.chi(nd.lam) * tb.sens_at(nd.lam, nd.phi);
    CHECK((interp - exact).norm() < 1e-3 * exact.norm());
  }
}

TEST_CASE("degeneracy scan: a11 elliptic, a33 and E2 localized at the axis image") {
  const MaterialField m = tilted(tu::m0());
  const RadialField fol = foliation();
  ScanOptions opt;
  opt.grid_spacing_deg = 2.0;

  // Scattering image of the tilted axis seen from x = 0.1.
  const FoliationFrame fr = foliation_frame(fol, kInterior);
  const Vec3 axis_fr(kAxis.dot(fr.n), kAxis.dot(fr.e1), kAxis.dot(fr.e2));
  const Vec3 image = Vec3(fr.x * axis_fr(0), axis_fr(1), axis_fr(2)).normalized();

  SUBCASE("a11 from qP is elliptic with margin") {
    const SymbolScan s = degeneracy_scan(m, WaveMode::QP, Param::A11,
                                         kInterior, fol, opt);
    CHECK(!s.boundary);
    CHECK(s.degenerate.empty());
    CHECK(s.margin > 1e-2);
    CHECK(s.pass);
    for (const auto& g : s.grid) CHECK(g.value > 0.0);
  }

  // The flagged set around the axis image is an anisotropic valley: along
  // the azimuth whose perturbation enters the critical-set constraint only
  // through lam-hat, the quadratic coefficient carries the chi-moment
  // <lam^2> (about 1/20 of the steep azimuth at Lambda = 0.5), so the
  // sub-1e-3 cone reaches ~13 degrees there.  `pass` (a 3-degree port)
  // therefore honestly reports false; the checks below pin the true
  // structure instead: a single valley, centered on the axis image.
  const auto check_valley = [](const SymbolScan& s, const Vec3& want) {
    CHECK((s.expected - want).norm() < 1e-6);
    CHECK(!s.degenerate.empty());
    CHECK(!s.pass);
    CHECK(s.worst_misalign_deg > 3.0);
    CHECK(s.worst_misalign_deg < 16.0);
    long kmin = 0;
    for (long k = 1; k < static_cast<long>(s.grid.size()); ++k)
      if (std::abs(s.grid[k].value) < std::abs(s.grid[kmin].value)) kmin = k;
    const double cosang =
        std::min(1.0, std::abs(s.grid[kmin].dir.dot(s.expected)));
    CHECK(std::acos(cosang) * 180.0 / kPi < 2.5);  // the zero itself
  };

  SUBCASE("a33 from qP localizes at the axis image, nonnegative") {
    const SymbolScan s = degeneracy_scan(m, WaveMode::QP, Param::A33,
                                         kInterior, fol, opt);
    check_valley(s, image);
    double vmin = 0;
    for (const auto& g : s.grid) vmin = std::min(vmin, g.value);
    CHECK(vmin >= -1e-12 * s.max_abs);
  }

  SUBCASE("E2 from qP localizes, nonpositive; E2 from qSV localizes, nonnegative") {
    const SymbolScan sp = degeneracy_scan(m, WaveMode::QP, Param::E2,
                                          kInterior, fol, opt);
    check_valley(sp, image);
    double vmax = 0;
    for (const auto& g : sp.grid) vmax = std::max(vmax, g.value);
    CHECK(vmax <= 1e-12 * sp.max_abs);

    const SymbolScan sv = degeneracy_scan(m, WaveMode::QSV, Param::E2,
                                          kInterior, fol, opt);
    check_valley(sv, image);
    double vmin = 0;
    for (const auto& g : sv.grid) vmin = std::min(vmin, g.value);
    CHECK(vmin >= -1e-12 * sv.max_abs);
  }

  SUBCASE("boundary point: localization at the tangential axis projection") {
    const SymbolScan s =
        degeneracy_scan(m, WaveMode::QP, Param::A33, kApex, fol, opt);
    CHECK(s.boundary);
    check_valley(s, Vec3(0, 1, 0));
  }
}

TEST_CASE("ellipticity verdicts are stable under the cutoff choice") {
  const MaterialField m = tilted(tu::m0());
  const RadialField fol = foliation();
  CutoffSpec cut_a;  // defaults: lambda 0.5, sharpness 1
  CutoffSpec cut_b;
  cut_b.lambda_max = 0.35;
  cut_b.sharpness = 2.5;

  const FoliationFrame fr = foliation_frame(fol, kInterior);
  const Vec3 axis_fr(kAxis.dot(fr.n), kAxis.dot(fr.e1), kAxis.dot(fr.e2));
  const Vec3 base = Vec3(fr.x * axis_fr(0), axis_fr(1), axis_fr(2)).normalized();
  Vec3 t1, t2;
  orthonormal_pair(base, t1, t2);

  // Verdicts can only disagree inside the shell where a value crosses the
  // hard threshold (the 1e-3 contour moves with chi); probe directions
  // firmly inside the valley (<= 1 degree) and firmly outside it
  // (>= 30 degrees), where both cutoffs must agree.
  std::vector<Vec3> dirs{base};
  for (const Vec3& t : {t1, t2, Vec3(-t1), Vec3(-t2)})
    dirs.push_back((std::cos(kPi / 180.0) * base +
                    std::sin(kPi / 180.0) * t)
                       .normalized());
  const size_t n_near = dirs.size();
  for (int k = 0; k < 24; ++k) {
    const double ang = (30.0 + 20.0 * (k % 3)) * kPi / 180.0;
    const double ps = 2.0 * kPi * k / 24.0;
    dirs.push_back((std::cos(ang) * base +
                    std::sin(ang) * (std::cos(ps) * t1 + std::sin(ps) * t2))
                       .normalized());
  }

  for (const CutoffSpec& cut : {cut_a, cut_b}) {
    std::vector<double> vals;
    for (const Vec3& d : dirs)
      vals.push_back(std::abs(standard_symbol(m, WaveMode::QP, Param::A33,
                                              kInterior, fol,
                                              sc(d(0), d(1), d(2)), cut)));
    const double ref = *std::max_element(vals.begin(), vals.end());
    for (size_t i = 0; i < n_near; ++i)        // degenerate at the axis image
      CHECK(vals[i] < 1e-3 * ref);
    for (size_t i = n_near; i < vals.size(); ++i)  // elliptic off it
      CHECK(vals[i] > 2e-3 * ref);
  }
}

TEST_CASE("quadratic fit recovers the vanishing rate") {
  const MaterialField m = tilted(tu::m0());
  const RadialField fol = foliation();

  SUBCASE("E2 from qP, interior, eight transversal directions") {
    Vec3 t1, t2;
    const FoliationFrame fr = foliation_frame(fol, kInterior);
    const Vec3 axis_fr(kAxis.dot(fr.n), kAxis.dot(fr.e1), kAxis.dot(fr.e2));
    const Vec3 base =
        Vec3(fr.x * axis_fr(0), axis_fr(1), axis_fr(2)).normalized();
    orthonormal_pair(base, t1, t2);
    for (int k = 0; k < 8; ++k) {
      const double ps = 2.0 * kPi * k / 8.0;
      const Vec3 nu = std::cos(ps) * t1 + std::sin(ps) * t2;
      const QuadraticFit fit =
          quadratic_fit(m, WaveMode::QP, Param::E2, kInterior, fol, nu);
      CHECK(fit.q > 1.9);
      CHECK(fit.q < 2.1);
      CHECK(fit.c > 0.0);
    }
  }

  SUBCASE("a33 from qP, interior") {
    Vec3 t1, t2;
    const FoliationFrame fr = foliation_frame(fol, kInterior);
    const Vec3 axis_fr(kAxis.dot(fr.n), kAxis.dot(fr.e1), kAxis.dot(fr.e2));
    const Vec3 base =
        Vec3(fr.x * axis_fr(0), axis_fr(1), axis_fr(2)).normalized();
    orthonormal_pair(base, t1, t2);
    for (int k = 0; k < 8; ++k) {
      const double ps = 2.0 * kPi * k / 8.0;
      const QuadraticFit fit =
          quadratic_fit(m, WaveMode::QP, Param::A33, kInterior, fol,
                        std::cos(ps) * t1 + std::sin(ps) * t2);
      CHECK(fit.q > 1.9);
      CHECK(fit.q < 2.1);
      CHECK(fit.c > 0.0);
    }
  }

  SUBCASE("a33 from qSV, interior: the vanishing is quartic") {
    // The qSV weight for a33 is w (1 - rho) with rho = S / sqrt(R); for an
    // E2 > 0 medium 1 - rho = -2 E2 u w / S^2 (1 + O(w)), so the weight is
    // O(w^2) and a transversal perturbation (w ~ eps^2 on the critical set)
    // decays as eps^4, one power-of-w sharper than the qP branch.
    Vec3 t1, t2;
    const FoliationFrame fr = foliation_frame(fol, kInterior);
    const Vec3 axis_fr(kAxis.dot(fr.n), kAxis.dot(fr.e1), kAxis.dot(fr.e2));
    const Vec3 base =
        Vec3(fr.x * axis_fr(0), axis_fr(1), axis_fr(2)).normalized();
    orthonormal_pair(base, t1, t2);
    for (int k = 0; k < 4; ++k) {
      const double ps = 2.0 * kPi * k / 4.0;
      const QuadraticFit fit =
          quadratic_fit(m, WaveMode::QSV, Param::A33, kInterior, fol,
                        std::cos(ps) * t1 + std::sin(ps) * t2);
      CHECK(fit.q > 3.8);
      CHECK(fit.q < 4.2);
      CHECK(fit.c > 0.0);
    }
  }

  SUBCASE("boundary point, probing in the normal scattering direction") {
    const QuadraticFit fit = quadratic_fit(m, WaveMode::QP, Param::E2, kApex,
                                           fol, Vec3(1, 0, 0));
    CHECK((fit.base_dir - Vec3(0, 1, 0)).norm() < 1e-6);
    CHECK(fit.q > 1.9);
    CHECK(fit.q < 2.1);
    CHECK(fit.c > 0.0);
  }

  SUBCASE("probe along the degenerate direction is rejected") {
    const FoliationFrame fr = foliation_frame(fol, kInterior);
    const Vec3 axis_fr(kAxis.dot(fr.n), kAxis.dot(fr.e1), kAxis.dot(fr.e2));
    const Vec3 base =
        Vec3(fr.x * axis_fr(0), axis_fr(1), axis_fr(2)).normalized();
    CHECK_THROWS_AS(
        quadratic_fit(m, WaveMode::QP, Param::E2, kInterior, fol, base),
        FitFailureError);
  }
}

TEST_CASE("boundary circle table reproduces the spherical ray curvature") {
  const MaterialField m = tilted(tu::isotropic(2, 1));
  const RadialField fol = foliation();
  const double alpha_exact = 1.0 / (2.0 * kFolRadius);
  for (WaveMode w : {WaveMode::QP, WaveMode::QSV}) {
    const BoundaryCircleTable tb = boundary_circle_table(m, w, kApex, fol);
    CHECK(tb.min_alpha == doctest::Approx(alpha_exact).epsilon(1e-6));
    const double scale = w == WaveMode::QP ? 16.0 : 4.0;
    for (size_t j = 0; j < tb.phi.size(); j += 17) {
      CHECK(tb.alpha[j] == doctest::Approx(alpha_exact).epsilon(1e-6));
      const Vec3 y_hat =
          std::cos(tb.phi[j]) * tb.frame.e1 + std::sin(tb.phi[j]) * tb.frame.e2;
      CHECK((tb.xi[j] - y_hat / scale).norm() < 1e-9);
    }
  }
  CHECK_THROWS_AS(boundary_circle_table(m, WaveMode::QSH, kApex, fol),
                  ConfigError);
}

TEST_CASE("boundary symbol matches the dense Gaussian oracle") {
  const MaterialField m = tilted(tu::isotropic(2, 1));
  const RadialField fol = foliation();
  const BoundaryCircleTable tb =
      boundary_circle_table(m, WaveMode::QP, kApex, fol);
  const double alpha = 1.0 / (2.0 * kFolRadius);
  const ScatteringCovector zeta = sc(0.4, 0.7, -0.2);

  for (double fy : {1.0, 2.0}) {
    const double d2 = zeta.zeta3 * zeta.zeta3 + fy * fy;
    const double nu = alpha / fy;
    const int n = 8192;
    const double h = 2.0 * kPi / n;
    Vec3 acc = Vec3::Zero();
    for (int k = 0; k <= n; ++k) {
      const double phi = h * k;
      const Vec3 y_hat = std::cos(phi) * tb.frame.e1 + std::sin(phi) * tb.frame.e2;
      const double ydot =
          zeta.zeta_p(0) * std::cos(phi) + zeta.zeta_p(1) * std::sin(phi);
      const double simp = (k == 0 || k == n) ? 1.0 : (k % 2 ? 4.0 : 2.0);
      acc += simp * (h / 3.0) * std::pow(nu, -0.5) *
             std::exp(-ydot * ydot / (2.0 * nu * d2)) *
             iso_sens_at(WaveMode::QP, y_hat / 16.0);
    }
    acc /= std::sqrt(d2);
    CHECK(boundary_symbol_finite(tb, Param::E2, zeta, fy) ==
          doctest::Approx(acc(0)).epsilon(1e-6));
    CHECK(boundary_symbol_finite(tb, Param::A11, zeta, fy) ==
          doctest::Approx(acc(1)).epsilon(1e-6));
  }

  CHECK_THROWS_AS(boundary_symbol_finite(tb, Param::E2, zeta, 0.0),
                  ConfigError);
  CHECK_THROWS_AS(boundary_symbol_finite(tb, Param::E2, sc(0, 0, 0), 1.0),
                  ConfigError);
}

TEST_CASE("boundary symbol sign battery over the conjugation ladder") {
  const MaterialField m = tilted(tu::m0());  // E2 = 44 > 0: all six elliptic
  const RadialField fol = foliation();
  const BoundaryCircleTable tp =
      boundary_circle_table(m, WaveMode::QP, kApex, fol);
  const BoundaryCircleTable ts =
      boundary_circle_table(m, WaveMode::QSV, kApex, fol);

  std::vector<ScatteringCovector> grid{sc(1, 0, 0), sc(-1, 0, 0)};
  for (int it = 0; it < 6; ++it) {
    const double th = (15.0 + 30.0 * it) * kPi / 180.0;
    for (int ip = 0; ip < 12; ++ip) {
      const double ph = 2.0 * kPi * ip / 12.0;
      grid.push_back(sc(std::cos(th), std::sin(th) * std::cos(ph),
                        std::sin(th) * std::sin(ph)));
    }
  }

  for (double fy : {0.5, 1.0, 2.0, 4.0}) {
    for (const auto& zeta : grid) {
      CHECK(boundary_symbol_finite(tp, Param::A11, zeta, fy) > 0.0);
      CHECK(boundary_symbol_finite(tp, Param::A33, zeta, fy) > 0.0);
      CHECK(boundary_symbol_finite(tp, Param::E2, zeta, fy) < 0.0);
      CHECK(boundary_symbol_finite(ts, Param::A11, zeta, fy) < 0.0);
      CHECK(boundary_symbol_finite(ts, Param::A33, zeta, fy) < 0.0);
      CHECK(boundary_symbol_finite(ts, Param::E2, zeta, fy) > 0.0);
    }
  }
}

TEST_CASE("boundary symbol degeneracies and convexity failures") {
  SUBCASE("concave foliation: nonpositive ray curvature is refused") {
    const MaterialField m = tilted(tu::isotropic(2, 1));
    const RadialField concave(kFolCenter, kFolRadius, -1.0);
    CHECK_THROWS_AS(boundary_circle_table(m, WaveMode::QP, kApex, concave),
                    NonpositiveNuError);
  }

  SUBCASE("axis conormal to the boundary: a33 and E2 lose all sensitivity") {
    const MaterialField m = tilted(tu::m0(), Vec3(0, 0, 1));
    const RadialField fol = foliation();
    const BoundaryCircleTable tb =
        boundary_circle_table(m, WaveMode::QP, kApex, fol);
    const ScatteringCovector zeta = sc(0.3, 0.9, 0.2);
    const double a11 = boundary_symbol_finite(tb, Param::A11, zeta, 1.0);
    CHECK(a11 > 0.0);
    CHECK(std::abs(boundary_symbol_finite(tb, Param::A33, zeta, 1.0)) <
          1e-10 * a11);
    CHECK(std::abs(boundary_symbol_finite(tb, Param::E2, zeta, 1.0)) <
          1e-10 * a11);
  }
}

TEST_CASE("two-parameter matrix symbol: pairings, rank, functional variant") {
  const MaterialField m = tilted(tu::m0());
  const RadialField fol = foliation();
  const ScatteringCovector zeta = sc(0.3, 0.8, 0.1);

  SUBCASE("E2 paired with a11 or a33 is definite") {
    for (Param mu2 : {Param::A11, Param::A33}) {
      const TwoParamSymbol s =
          two_param_matrix_symbol(m, Param::E2, mu2, kApex, fol, zeta);
      CHECK(!s.rank_deficient);
      CHECK(s.max_rank_measure > 1e-3);
      CHECK(s.min_sym_eig > 0.0);
    }
  }

  SUBCASE("a11 paired with a33 is rank-deficient on the whole circle") {
    const TwoParamSymbol s =
        two_param_matrix_symbol(m, Param::A11, Param::A33, kApex, fol, zeta);
    CHECK(s.rank_deficient);
    CHECK(s.max_rank_measure < 1e-9);
  }

  SUBCASE("functional constraint restores full rank") {
    TwoParamOptions opt;
    opt.fprime = 0.7;
    const TwoParamSymbol s =
        two_param_matrix_symbol(m, Param::E2, Param::A11, kApex, fol, zeta, opt);
    CHECK(!s.rank_deficient);
    CHECK(s.min_sym_eig > 0.0);
  }

  SUBCASE("configuration errors") {
    CHECK_THROWS_AS(
        two_param_matrix_symbol(m, Param::E2, Param::E2, kApex, fol, zeta),
        ConfigError);
    TwoParamOptions opt;
    opt.fprime = 0.5;
    CHECK_THROWS_AS(two_param_matrix_symbol(m, Param::E2, Param::A33, kApex,
                                            fol, zeta, opt),
                    ConfigError);
  }
}

TEST_CASE("two-parameter matrix matches the isotropic oracle") {
  const MaterialField m = tilted(tu::isotropic(2, 1));
  const RadialField fol = foliation();
  const ScatteringCovector zeta = sc(0.3, 0.8, 0.1);
  const double fy = 1.0;
  const TwoParamSymbol got =
      two_param_matrix_symbol(m, Param::E2, Param::A11, kApex, fol, zeta);

  const FoliationFrame fr = foliation_frame(fol, kApex);
  const double alpha = 1.0 / (2.0 * kFolRadius);
  const double d2 = zeta.zeta3 * zeta.zeta3 + fy * fy;
  const double nu = alpha / fy;
  const int n = 8192;
  const double h = 2.0 * kPi / n;
  Eigen::Matrix2d mat = Eigen::Matrix2d::Zero();
  for (int k = 0; k <= n; ++k) {
    const double phi = h * k;
    const Vec3 y_hat = std::cos(phi) * fr.e1 + std::sin(phi) * fr.e2;
    const Vec3 sp = iso_sens_at(WaveMode::QP, y_hat / 16.0);
    const Vec3 sm = iso_sens_at(WaveMode::QSV, y_hat / 16.0);
    Eigen::Matrix2d s;
    s << sp(0), sp(1), sm(0), sm(1);
    const double ydot =
        zeta.zeta_p(0) * std::cos(phi) + zeta.zeta_p(1) * std::sin(phi);
    const double wq =
        std::pow(nu, -0.5) * std::exp(-ydot * ydot / (2.0 * nu * d2));
    const double simp = (k == 0 || k == n) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    mat += simp * (h / 3.0) * wq * s.transpose() * s;
  }
  mat /= std::sqrt(d2);
  CHECK((got.mat - mat).norm() < 1e-6 * mat.norm());
}

TEST_CASE("functional coefficient collapses to the closed form") {
  std::mt19937_64 rng(1234);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    const ReducedParams rp = reduce(tu::random_params(rng));
    const double u = 0.01 + 4.0 * u01(rng);
    const double v = 0.01 + 4.0 * u01(rng);
    const double fp = 2.0 * u01(rng);
    const double hp = 2.0 * u01(rng) - 1.0;
    const double got = functional_a11_coefficient(rp, u, v, fp, hp);
    const double want = 2.0 * u + 2.0 * fp * v;
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("branch failure surfaces on a folded qSV tangent sheet") {
  // Medium violating the qSV tangent-sheet invertibility condition:
  // a33 (a11 - a55) = 120 < (a13 + a55)^2 = 144, so the qSV slowness sheet
  // saddles at xi3 = 0 and near-tangent directions have three covector
  // preimages.  The quadratures refuse rather than integrate an arbitrary
  // one of them; the qP sheet of the same medium stays well-posed.
  const MaterialField m = tilted(tu::anelliptic_strong());
  const RadialField fol = foliation();
  CHECK_THROWS_AS(standard_symbol_all(m, WaveMode::QSV, kInterior, fol,
                                      sc(1.0, 0.2, 0.1), CutoffSpec{}),
                  BranchFailureError);
  CHECK_THROWS_AS(boundary_circle_table(m, WaveMode::QSV, kApex, fol),
                  BranchFailureError);
  CHECK_NOTHROW(standard_symbol(m, WaveMode::QP, Param::A33, kInterior, fol,
                                sc(1.0, 0.2, 0.1), CutoffSpec{}));
}
