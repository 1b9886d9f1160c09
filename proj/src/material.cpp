#include "tilens/material.hpp"

#include <Eigen/LU>

#include <cmath>

namespace tilens {

bool check_admissible(const ElasticParams& p) {
  if (p.a11 <= 0 || p.a33 <= 0 || p.a55 <= 0 || p.a66 <= 0) return false;
  const double smax = std::max(p.a55, p.a66);
  if (!(smax < std::min(p.a11, p.a33))) return false;
  return p.a11 > p.a55;
}

double e_squared(const ElasticParams& p) {
  const double d13 = p.a13 + p.a55;
  return (p.a11 - p.a55) * (p.a33 - p.a55) - d13 * d13;
}

ReducedParams reduce(const ElasticParams& p) {
  return ReducedParams{e_squared(p), p.a11, p.a33, p.a55, p.a66};
}

double& reduced_component(ReducedParams& p, Param which) {
  switch (which) {
    case Param::E2: return p.e2;
    case Param::A11: return p.a11;
    default: return p.a33;
  }
}

double reduced_component(const ReducedParams& p, Param which) {
  switch (which) {
    case Param::E2: return p.e2;
    case Param::A11: return p.a11;
    default: return p.a33;
  }
}

namespace {

// Discriminant R = S^2 - 4 E^2 u v with a relative floor below which the
// square-root branch derivatives are not trusted.
struct Disc {
  double s = 0, r = 0, sqrt_r = 0;
};

double disc_floor(const ReducedParams& rp, double u, double v) {
  const double scale = (rp.a11 + rp.a33) * (u + v);
  return 1e-12 * scale * scale;
}

Disc discriminant(const ReducedParams& rp, double u, double v,
                  bool for_derivs) {
  Disc d;
  d.s = (rp.a11 - rp.a55) * u + (rp.a33 - rp.a55) * v;
  d.r = d.s * d.s - 4.0 * rp.e2 * u * v;
  if (d.r < 0)
    throw NegativeDiscriminantError(
        "qP/qSV discriminant negative: parameters outside validity region");
  if (for_derivs && d.r < disc_floor(rp, u, v))
    throw DiscriminantTooSmallError(
        "qP/qSV discriminant below floor: branches nearly merged");
  d.sqrt_r = std::sqrt(d.r);
  return d;
}

double sign_of(WaveMode w) { return w == WaveMode::QP ? 1.0 : -1.0; }

}  // namespace

double uv_hamiltonian(const ReducedParams& rp, WaveMode w, double u,
                      double v) {
  if (w == WaveMode::QSH) return rp.a66 * u + rp.a55 * v;
  const Disc d = discriminant(rp, u, v, false);
  const double base = (rp.a11 + rp.a55) * u + (rp.a33 + rp.a55) * v;
  return base + sign_of(w) * d.sqrt_r;
}

UVDerivs uv_first_derivs(const ReducedParams& rp, WaveMode w, double u,
                         double v) {
  UVDerivs out;
  if (w == WaveMode::QSH) {
    out.p = rp.a66 * u + rp.a55 * v;
    out.fu = rp.a66;
    out.fv = rp.a55;
    return out;
  }
  const Disc d = discriminant(rp, u, v, true);
  const double sg = sign_of(w);
  const double pu = d.s * (rp.a11 - rp.a55) - 2.0 * rp.e2 * v;
  const double pv = d.s * (rp.a33 - rp.a55) - 2.0 * rp.e2 * u;
  out.p = (rp.a11 + rp.a55) * u + (rp.a33 + rp.a55) * v + sg * d.sqrt_r;
  out.fu = (rp.a11 + rp.a55) + sg * pu / d.sqrt_r;
  out.fv = (rp.a33 + rp.a55) + sg * pv / d.sqrt_r;
  return out;
}

UVSecond uv_second_derivs(const ReducedParams& rp, WaveMode w, double u,
                          double v) {
  UVSecond out;
  if (w == WaveMode::QSH) {
    out.p = rp.a66 * u + rp.a55 * v;
    out.fu = rp.a66;
    out.fv = rp.a55;
    return out;
  }
  const Disc d = discriminant(rp, u, v, true);
  const double sg = sign_of(w);
  const double c1 = rp.a11 - rp.a55;
  const double c3 = rp.a33 - rp.a55;
  const double pu = d.s * c1 - 2.0 * rp.e2 * v;
  const double pv = d.s * c3 - 2.0 * rp.e2 * u;
  const double r32 = d.r * d.sqrt_r;
  out.p = (rp.a11 + rp.a55) * u + (rp.a33 + rp.a55) * v + sg * d.sqrt_r;
  out.fu = (rp.a11 + rp.a55) + sg * pu / d.sqrt_r;
  out.fv = (rp.a33 + rp.a55) + sg * pv / d.sqrt_r;
  out.fuu = sg * (c1 * c1 * d.r - pu * pu) / r32;
  out.fvv = sg * (c3 * c3 * d.r - pv * pv) / r32;
  out.fuv = sg * ((c1 * c3 - 2.0 * rp.e2) * d.r - pu * pv) / r32;
  return out;
}

MaterialSens uv_sensitivities(const ReducedParams& rp, WaveMode w, double u,
                              double v) {
  if (w == WaveMode::QSH)
    throw Error("material sensitivities are defined for qP/qSV only");
  const Disc d = discriminant(rp, u, v, true);
  const double sg = sign_of(w);
  MaterialSens s;
  s.de2 = -sg * 2.0 * u * v / d.sqrt_r;
  const double t = 1.0 + sg * d.s / d.sqrt_r;
  s.da11 = u * t;
  s.da33 = v * t;
  return s;
}

ElasticSens uv_elastic_derivs(const ElasticParams& p, WaveMode w, double u,
                              double v) {
  ElasticSens out;
  if (w == WaveMode::QSH) {
    out.da66 = u;
    out.da55 = v;
    return out;
  }
  const ReducedParams rp = reduce(p);
  const Disc d = discriminant(rp, u, v, true);
  const double sg = sign_of(w);
  const double c1 = rp.a11 - rp.a55;
  const double c3 = rp.a33 - rp.a55;
  const double d13 = p.a13 + p.a55;
  out.da11 = u + sg * (d.s * u - 2.0 * u * v * c3) / d.sqrt_r;
  out.da33 = v + sg * (d.s * v - 2.0 * u * v * c1) / d.sqrt_r;
  out.da13 = sg * 4.0 * u * v * d13 / d.sqrt_r;
  out.da55 =
      (u + v) +
      sg * (-d.s * (u + v) + 2.0 * u * v * (c1 + c3 + 2.0 * d13)) / d.sqrt_r;
  return out;
}

MaterialField::MaterialField(Box domain, FieldPtr a11, FieldPtr a13,
                             FieldPtr a33, FieldPtr a55, FieldPtr a66,
                             FieldPtr layer, Mat3 g0)
    : domain_(domain), layer_(std::move(layer)), g0_(g0) {
  fields_[0] = std::move(a11);
  fields_[1] = std::move(a13);
  fields_[2] = std::move(a33);
  fields_[3] = std::move(a55);
  fields_[4] = std::move(a66);
  g0_inv_ = g0_.inverse();
}

MaterialField MaterialField::uniform(const Box& domain, const ElasticParams& p,
                                     FieldPtr layer, Mat3 g0) {
  return MaterialField(domain, std::make_shared<ConstantField>(p.a11),
                       std::make_shared<ConstantField>(p.a13),
                       std::make_shared<ConstantField>(p.a33),
                       std::make_shared<ConstantField>(p.a55),
                       std::make_shared<ConstantField>(p.a66), std::move(layer),
                       g0);
}

ElasticParams MaterialField::params_at(const Vec3& x) const {
  return ElasticParams{fields_[0]->value(x), fields_[1]->value(x),
                       fields_[2]->value(x), fields_[3]->value(x),
                       fields_[4]->value(x)};
}

ReducedParams MaterialField::reduced_at(const Vec3& x) const {
  return reduce(params_at(x));
}

Eigen::Matrix<double, 3, 5> MaterialField::param_gradients_at(
    const Vec3& x) const {
  Eigen::Matrix<double, 3, 5> g;
  for (int i = 0; i < 5; ++i) g.col(i) = fields_[i]->gradient(x);
  return g;
}

Vec3 MaterialField::axis_at(const Vec3& x) const {
  const Vec3 df = layer_->gradient(x);
  const Vec3 w = g0_inv_ * df;
  const double eta2 = df.dot(w);
  if (eta2 < 1e-20)
    throw ZeroGradientError("layer gradient vanishes: axis undefined");
  return w / std::sqrt(eta2);
}

Mat3 MaterialField::axis_jacobian_at(const Vec3& x) const {
  const Vec3 df = layer_->gradient(x);
  const Mat3 hf = layer_->hessian(x);
  const Vec3 w = g0_inv_ * df;
  const double eta2 = df.dot(w);
  if (eta2 < 1e-20)
    throw ZeroGradientError("layer gradient vanishes: axis undefined");
  const double eta = std::sqrt(eta2);
  const Vec3 m = w / eta;
  const Mat3 dw = g0_inv_ * hf;
  return (Mat3::Identity() - m * (g0_ * m).transpose()) * dw / eta;
}

TiltFrame MaterialField::tilt_frame(const Vec3& x) const {
  TiltFrame f;
  f.e3 = axis_at(x);
  // Deterministic completion: Gram-Schmidt against fixed seed axes, skipping
  // seeds nearly parallel to e3.
  const Vec3 seeds[3] = {Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ()};
  auto g0norm2 = [&](const Vec3& w) { return w.dot(g0_ * w); };
  Vec3 got[2];
  int n = 0;
  for (const Vec3& s : seeds) {
    Vec3 c = s - s.dot(g0_ * f.e3) * f.e3;
    for (int k = 0; k < n; ++k) c -= c.dot(g0_ * got[k]) * got[k];
    const double nn = g0norm2(c);
    if (nn > 1e-6) {
      got[n++] = c / std::sqrt(nn);
      if (n == 2) break;
    }
  }
  if (n < 2) throw NumericalError("tilt frame completion failed");
  f.e1 = got[0];
  f.e2 = got[1];
  return f;
}

TiltedCovector to_tilted(const MaterialField& m, const Vec3& x,
                         const Vec3& xi) {
  const Vec3 ax = m.axis_at(x);
  TiltedCovector t;
  t.xi3 = xi.dot(ax);
  t.xi_perp_sq = xi.dot(m.g0_inv() * xi) - t.xi3 * t.xi3;
  return t;
}

double hamiltonian(const MaterialField& m, WaveMode w, const PhasePoint& pt) {
  const TiltedCovector t = to_tilted(m, pt.x, pt.xi);
  return uv_hamiltonian(m.reduced_at(pt.x), w, t.xi_perp_sq, t.xi3 * t.xi3);
}

HamiltonianDerivs hamiltonian_derivs(const MaterialField& m, WaveMode w,
                                     const PhasePoint& pt) {
  const Vec3 ax = m.axis_at(pt.x);
  const double xi3 = pt.xi.dot(ax);
  const Vec3 g0xi = m.g0_inv() * pt.xi;
  const double u = pt.xi.dot(g0xi) - xi3 * xi3;
  const double v = xi3 * xi3;

  const ElasticParams ep = m.params_at(pt.x);
  const ReducedParams rp = reduce(ep);
  const UVDerivs f = uv_first_derivs(rp, w, u, v);

  HamiltonianDerivs out;
  out.p = f.p;
  out.dp_dxi = 2.0 * f.fu * g0xi + 2.0 * (f.fv - f.fu) * xi3 * ax;

  const ElasticSens es = uv_elastic_derivs(ep, w, u, v);
  const Eigen::Matrix<double, 3, 5> pg = m.param_gradients_at(pt.x);
  Eigen::Matrix<double, 5, 1> fc;
  fc << es.da11, es.da13, es.da33, es.da55, es.da66;
  out.dp_dx = pg * fc;

  // Axis rotation term: dv/dx_k = 2 xi3 (xi . dm/dx_k), du/dx_k = -dv/dx_k.
  const Mat3 dm = m.axis_jacobian_at(pt.x);
  const Vec3 dv_dx = 2.0 * xi3 * (dm.transpose() * pt.xi);
  out.dp_dx += (f.fv - f.fu) * dv_dx;
  return out;
}

namespace {

// (1/2) Hessian of p in the tilted components; p = F(u, v) with
// u = xt1^2 + xt2^2, v = xt3^2.
Mat3 half_hessian_tilted(const UVSecond& f, double xt1, double xt2,
                         double xt3) {
  Mat3 h;
  h(0, 0) = f.fu + 2.0 * xt1 * xt1 * f.fuu;
  h(1, 1) = f.fu + 2.0 * xt2 * xt2 * f.fuu;
  h(2, 2) = f.fv + 2.0 * xt3 * xt3 * f.fvv;
  h(0, 1) = h(1, 0) = 2.0 * xt1 * xt2 * f.fuu;
  h(0, 2) = h(2, 0) = 2.0 * xt1 * xt3 * f.fuv;
  h(1, 2) = h(2, 1) = 2.0 * xt2 * xt3 * f.fuv;
  return h;
}

}  // namespace

Mat3 xi_hessian(const MaterialField& m, WaveMode w, const PhasePoint& pt) {
  const TiltFrame fr = m.tilt_frame(pt.x);
  const double xt1 = pt.xi.dot(fr.e1);
  const double xt2 = pt.xi.dot(fr.e2);
  const double xt3 = pt.xi.dot(fr.e3);
  const double u = xt1 * xt1 + xt2 * xt2;
  const double v = xt3 * xt3;
  const UVSecond f = uv_second_derivs(m.reduced_at(pt.x), w, u, v);
  return half_hessian_tilted(f, xt1, xt2, xt3);
}

Mat3 xi_hessian_ambient(const MaterialField& m, WaveMode w,
                        const PhasePoint& pt) {
  const TiltFrame fr = m.tilt_frame(pt.x);
  Mat3 e;  // rows: tilted components of an ambient covector
  e.row(0) = fr.e1.transpose();
  e.row(1) = fr.e2.transpose();
  e.row(2) = fr.e3.transpose();
  const Vec3 xt = e * pt.xi;
  const UVSecond f =
      uv_second_derivs(m.reduced_at(pt.x), w, xt[0] * xt[0] + xt[1] * xt[1],
                       xt[2] * xt[2]);
  const Mat3 half = half_hessian_tilted(f, xt[0], xt[1], xt[2]);
  return 2.0 * e.transpose() * half * e;
}

MaterialSens material_sensitivities(const MaterialField& m, WaveMode w,
                                    const PhasePoint& pt) {
  const TiltedCovector t = to_tilted(m, pt.x, pt.xi);
  return uv_sensitivities(m.reduced_at(pt.x), w, t.xi_perp_sq, t.xi3 * t.xi3);
}

}  // namespace tilens
