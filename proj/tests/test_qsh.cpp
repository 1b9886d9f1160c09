#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "tilens/qsh.hpp"

using namespace tilens;

namespace {

// Random symmetric positive-definite background metric with moderate
// conditioning.
Mat3 random_spd(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uc(-0.3, 0.3);
  Mat3 a = Mat3::Identity();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) a(i, j) += uc(rng);
  return a.transpose() * a + 0.5 * Mat3::Identity();
}

// Unit-g0-length one-form along a random direction: w = g0 m / |m|_{g0}.
Vec3 random_unit_form(std::mt19937_64& rng, const Mat3& g0) {
  const Vec3 d = tu::random_unit(rng);
  return g0 * d / std::sqrt(d.dot(g0 * d));
}

double span_angle(const Vec3& a, const Vec3& b) {
  return std::abs(a.normalized().cross(b.normalized()).norm());
}

}  // namespace

TEST_CASE("metric assembly closed forms") {
  std::mt19937_64 rng(11);
  // Conformal case alpha = beta reduces to alpha * g0 for any axis.
  for (int i = 0; i < 10; ++i) {
    const Mat3 g0 = random_spd(rng);
    const Vec3 w = random_unit_form(rng, g0);
    CHECK((assemble_metric_point(1.0, 1.0, w, g0) - g0).norm() < 1e-14);
  }
  // Axis-aligned: alpha=1, beta=2, w = dz, Euclidean background.
  const Mat3 g1 =
      assemble_metric_point(1.0, 2.0, Vec3(0, 0, 1), Mat3::Identity());
  CHECK((g1 - Vec3(1, 1, 2).asDiagonal().toDenseMatrix()).norm() < 1e-15);
  // Shear moduli a55=4, a66=5 give alpha=0.2, beta=0.25.
  const Mat3 g2 =
      assemble_metric_point(0.2, 0.25, Vec3(0, 0, 1), Mat3::Identity());
  CHECK((g2 - Vec3(0.2, 0.2, 0.25).asDiagonal().toDenseMatrix()).norm() <
        1e-15);
}

TEST_CASE("assembled metric is positive definite") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> up(0.05, 5.0);
  for (int i = 0; i < 300; ++i) {
    const Mat3 g0 = random_spd(rng);
    const Vec3 w = random_unit_form(rng, g0);
    const Mat3 g = assemble_metric_point(up(rng), up(rng), w, g0);
    Eigen::SelfAdjointEigenSolver<Mat3> es(g);
    CHECK(es.eigenvalues().minCoeff() > 0.0);
  }
}

TEST_CASE("parameter extraction closed forms") {
  // diag(1,1,2) against the identity: doubled 1, simple 2 along e3.
  const Mat3 g = Vec3(1, 1, 2).asDiagonal();
  const ExtractedMetric ex = extract_parameters(g, Mat3::Identity());
  CHECK(!ex.conformal);
  CHECK(ex.alpha == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ex.beta == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(span_angle(ex.axis, Vec3(0, 0, 1)) < 1e-12);

  // Round trip through a tilted axis (dx + dz)/sqrt(2).
  const Vec3 w = Vec3(1, 0, 1) / std::sqrt(2.0);
  const Mat3 g2 = assemble_metric_point(0.2, 0.25, w, Mat3::Identity());
  const ExtractedMetric ex2 = extract_parameters(g2, Mat3::Identity());
  CHECK(!ex2.conformal);
  CHECK(ex2.alpha == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(ex2.beta == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(span_angle(ex2.axis, Vec3(1, 0, 1)) < 1e-10);

  // Conformal multiple: axis undefined, alpha only.
  std::mt19937_64 rng(13);
  const Mat3 g0 = random_spd(rng);
  const ExtractedMetric ex3 = extract_parameters(3.0 * g0, g0);
  CHECK(ex3.conformal);
  CHECK(ex3.alpha == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(ex3.beta == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("extraction inverts assembly on random inputs") {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> up(0.05, 5.0);
  int done = 0;
  while (done < 1000) {
    const Mat3 g0 = random_spd(rng);
    const double alpha = up(rng);
    const double beta = up(rng);
    if (std::abs(beta - alpha) <= 1e-3) continue;
    const Vec3 w = random_unit_form(rng, g0);
    const Mat3 g = assemble_metric_point(alpha, beta, w, g0);
    const ExtractedMetric ex = extract_parameters(g, g0);
    REQUIRE(!ex.conformal);
    CHECK(ex.alpha == doctest::Approx(alpha).epsilon(1e-9));
    CHECK(ex.beta == doctest::Approx(beta).epsilon(1e-9));
    // The simple eigenvector must span the same line as the axis vector
    // m = G0 w.
    const Vec3 m = g0.inverse() * w;
    CHECK(span_angle(ex.axis, m) < 1e-7);
    // Round trip: reassemble from the extracted pieces.
    const Mat3 g_rt =
        assemble_metric_point(ex.alpha, ex.beta, g0 * ex.axis, g0);
    CHECK((g_rt - g).norm() < 1e-9 * g.norm());
    ++done;
  }
}

TEST_CASE("axis span ignores sign and scaling of the perturbation") {
  std::mt19937_64 rng(15);
  for (int i = 0; i < 50; ++i) {
    const Mat3 g0 = random_spd(rng);
    const Vec3 w = random_unit_form(rng, g0);
    const Mat3 ga = assemble_metric_point(0.3, 0.9, w, g0);
    const Mat3 gb = assemble_metric_point(0.3, 0.9, -w, g0);
    CHECK((ga - gb).norm() < 1e-15);
    // Scale the representative and fold the factor into the coefficient:
    // the same tensor, so the same span.
    const double s = 3.7;
    const Mat3 gc = 0.3 * g0 + ((0.9 - 0.3) / (s * s)) *
                                   ((s * w) * (s * w).transpose());
    CHECK((ga - gc).norm() < 1e-12);
    const ExtractedMetric ea = extract_parameters(ga, g0);
    const ExtractedMetric ec = extract_parameters(gc, g0);
    CHECK(span_angle(ea.axis, ec.axis) < 1e-10);
  }
}

TEST_CASE("qsh metric of a material field round-trips the moduli") {
  // M0 has a55=4, a66=5 -> beta=0.25, alpha=0.2; axis = e3.
  auto m = tu::uniform_m0();
  const RankOneMetric rm = qsh_metric(m);
  const Vec3 x(0.4, 0.6, 0.3);
  const Mat3 g = assemble_metric(rm, x);
  const ExtractedMetric ex = extract_parameters(g, m.g0());
  CHECK(ex.alpha == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(ex.beta == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(span_angle(ex.axis, Vec3(0, 0, 1)) < 1e-12);
}

TEST_CASE("adapted chart is the identity for a flat horizontal layer") {
  auto m = tu::uniform_m0();  // f = z, Euclidean g0, constant moduli
  SeedPatch seed;             // origin 0, t1 = ex, t2 = ey: the z=0 plane
  ChartSpec spec;
  spec.n1 = spec.n2 = spec.n3 = 4;
  spec.y1_min = 0.1, spec.y1_max = 0.9;
  spec.y2_min = 0.1, spec.y2_max = 0.9;
  spec.y3_min = 0.1, spec.y3_max = 0.9;
  const FoliationChart chart = build_adapted_coordinates(m, seed, spec);
  REQUIRE(chart.samples.size() == 64);
  for (const ChartSample& s : chart.samples) {
    CHECK((s.x - s.y).norm() < 1e-9);
    CHECK((s.jac - Mat3::Identity()).norm() < 1e-6);
  }
  CHECK(chart.max_residual < 1e-6);
}

TEST_CASE("adapted chart straightens tilted layers") {
  // f = z + 0.1 x: planes tilted against the seed patch z = 0.
  auto layer = std::make_shared<LinearField>(Vec3(0.1, 0, 1), 0.0);
  auto m = MaterialField::uniform(Box{}, tu::m0(), layer);
  SeedPatch seed;
  ChartSpec spec;
  spec.n1 = spec.n2 = spec.n3 = 4;
  spec.y1_min = 0.1, spec.y1_max = 0.8;
  spec.y2_min = 0.1, spec.y2_max = 0.8;
  spec.y3_min = 0.2, spec.y3_max = 0.9;
  const FoliationChart chart = build_adapted_coordinates(m, seed, spec);
  CHECK(chart.max_residual < 1e-6);
  // y3 labels the layer the sample actually sits on.
  for (const ChartSample& s : chart.samples)
    CHECK(m.layer().value(s.x) == doctest::Approx(s.y[2]).epsilon(1e-10));
}

TEST_CASE("adapted chart works for spherical layers") {
  // Concentric spheres about a center beneath the box; seed on the top face.
  auto layer = std::make_shared<RadialField>(Vec3(0.5, 0.5, -2.0), 2.85, +1);
  auto m = MaterialField::uniform(Box{}, tu::m0(), layer);
  SeedPatch seed;
  seed.origin = Vec3(0.2, 0.2, 1.0);
  ChartSpec spec;
  spec.n1 = spec.n2 = 4;
  spec.n3 = 5;
  spec.y1_min = 0.0, spec.y1_max = 0.6;
  spec.y2_min = 0.0, spec.y2_max = 0.6;
  spec.y3_min = -0.3, spec.y3_max = 0.1;
  const FoliationChart chart = build_adapted_coordinates(m, seed, spec);
  CHECK(chart.max_residual < 1e-6);
  for (const ChartSample& s : chart.samples)
    CHECK(m.layer().value(s.x) == doctest::Approx(s.y[2]).epsilon(1e-9));
}

TEST_CASE("g-gradient and g0-gradient flows give the same chart") {
  // Variable shear moduli; the level-parameterized flows coincide because
  // grad^g f stays parallel to grad^{g0} f when the axis follows df.
  auto bumps55 = std::make_shared<GaussianBumpField>(
      4.0, std::vector<GaussianBumpField::Bump>{
               {Vec3(0.4, 0.5, 0.4), 0.35, 0.8}});
  auto bumps66 = std::make_shared<GaussianBumpField>(
      5.0, std::vector<GaussianBumpField::Bump>{
               {Vec3(0.6, 0.4, 0.6), 0.4, -0.7}});
  auto layer = std::make_shared<LinearField>(Vec3(0.15, -0.1, 1.0), 0.0);
  auto c = [](double v) { return std::make_shared<ConstantField>(v); };
  MaterialField m(Box{}, c(14), c(2), c(12), bumps55, bumps66, layer);

  SeedPatch seed;
  ChartSpec spec;
  spec.n1 = spec.n2 = spec.n3 = 3;
  spec.y1_min = 0.2, spec.y1_max = 0.7;
  spec.y2_min = 0.2, spec.y2_max = 0.7;
  spec.y3_min = 0.2, spec.y3_max = 0.8;
  const FoliationChart c0 = build_adapted_coordinates(m, seed, spec);
  spec.flow_with_g = true;
  const FoliationChart cg = build_adapted_coordinates(m, seed, spec);
  REQUIRE(c0.samples.size() == cg.samples.size());
  for (size_t i = 0; i < c0.samples.size(); ++i)
    CHECK((c0.samples[i].x - cg.samples[i].x).norm() < 1e-8);
  CHECK(cg.max_residual < 1e-6);
}

TEST_CASE("tangency guards") {
  // f = z^2 has a critical sheet at z = 0; flowing toward it collapses the
  // gradient.
  Mat3 q = Mat3::Zero();
  q(2, 2) = 1.0;
  auto layer = std::make_shared<PolynomialField>(0.0, Vec3::Zero(), q);
  auto m = MaterialField::uniform(Box{}, tu::m0(), layer);
  SeedPatch seed;
  seed.origin = Vec3(0, 0, 0.5);
  ChartSpec spec;
  CHECK_THROWS_AS(chart_point(m, seed, spec, Vec3(0.3, 0.3, 1e-9)),
                  TangencyError);

  // A seed patch parallel to the layer planes fails the transversality
  // check outright.
  auto flat = MaterialField::uniform(
      Box{}, tu::m0(), std::make_shared<LinearField>(Vec3(1, 0, 0), 0.0));
  SeedPatch side;  // t1 = ex lies along grad f; normal is ez, orthogonal
  CHECK_THROWS_AS(chart_point(flat, side, spec, Vec3(0.3, 0.3, 0.5)),
                  TangencyError);
}
