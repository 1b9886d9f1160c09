#include "tilens/fields.hpp"

#include <algorithm>
#include <cmath>

namespace tilens {

const char* wave_name(WaveMode w) {
  switch (w) {
    case WaveMode::QP: return "qP";
    case WaveMode::QSV: return "qSV";
    case WaveMode::QSH: return "qSH";
  }
  return "?";
}

WaveMode wave_from_name(const std::string& s) {
  if (s == "qP" || s == "qp" || s == "P") return WaveMode::QP;
  if (s == "qSV" || s == "qsv" || s == "SV") return WaveMode::QSV;
  if (s == "qSH" || s == "qsh" || s == "SH") return WaveMode::QSH;
  throw ConfigError("unknown wave mode: " + s);
}

const char* param_name(Param p) {
  switch (p) {
    case Param::E2: return "e2";
    case Param::A11: return "a11";
    case Param::A33: return "a33";
  }
  return "?";
}

Param param_from_name(const std::string& s) {
  if (s == "e2" || s == "E2") return Param::E2;
  if (s == "a11") return Param::A11;
  if (s == "a33") return Param::A33;
  throw ConfigError("unknown parameter name: " + s);
}

double GaussianBumpField::value(const Vec3& x) const {
  double v = base_;
  for (const auto& b : bumps_) {
    const double r2 = (x - b.center).squaredNorm();
    v += b.amplitude * std::exp(-0.5 * r2 / (b.sigma * b.sigma));
  }
  return v;
}

Vec3 GaussianBumpField::gradient(const Vec3& x) const {
  Vec3 g = Vec3::Zero();
  for (const auto& b : bumps_) {
    const Vec3 d = x - b.center;
    const double s2 = b.sigma * b.sigma;
    const double e = b.amplitude * std::exp(-0.5 * d.squaredNorm() / s2);
    g -= (e / s2) * d;
  }
  return g;
}

Mat3 GaussianBumpField::hessian(const Vec3& x) const {
  Mat3 h = Mat3::Zero();
  for (const auto& b : bumps_) {
    const Vec3 d = x - b.center;
    const double s2 = b.sigma * b.sigma;
    const double e = b.amplitude * std::exp(-0.5 * d.squaredNorm() / s2);
    h += (e / (s2 * s2)) * (d * d.transpose());
    h -= (e / s2) * Mat3::Identity();
  }
  return h;
}

GridField::GridField(const Vec3& origin, const Vec3& spacing, int nx, int ny,
                     int nz, std::vector<double> values)
    : origin_(origin), spacing_(spacing), nx_(nx), ny_(ny), nz_(nz),
      values_(std::move(values)) {
  if (nx_ < 2 || ny_ < 2 || nz_ < 2)
    throw ConfigError("grid field needs at least 2 samples per axis");
  if (values_.size() != static_cast<size_t>(nx_) * ny_ * nz_)
    throw ConfigError("grid field value count does not match dims");
  if ((spacing_.array() <= 0.0).any())
    throw ConfigError("grid field spacing must be positive");
}

double GridField::value(const Vec3& x) const {
  // Clamped trilinear interpolation.
  double fx = (x.x() - origin_.x()) / spacing_.x();
  double fy = (x.y() - origin_.y()) / spacing_.y();
  double fz = (x.z() - origin_.z()) / spacing_.z();
  fx = std::clamp(fx, 0.0, static_cast<double>(nx_ - 1));
  fy = std::clamp(fy, 0.0, static_cast<double>(ny_ - 1));
  fz = std::clamp(fz, 0.0, static_cast<double>(nz_ - 1));
  const int i = std::min(static_cast<int>(fx), nx_ - 2);
  const int j = std::min(static_cast<int>(fy), ny_ - 2);
  const int k = std::min(static_cast<int>(fz), nz_ - 2);
  const double u = fx - i, v = fy - j, w = fz - k;
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double c00 = lerp(at(i, j, k), at(i + 1, j, k), u);
  const double c10 = lerp(at(i, j + 1, k), at(i + 1, j + 1, k), u);
  const double c01 = lerp(at(i, j, k + 1), at(i + 1, j, k + 1), u);
  const double c11 = lerp(at(i, j + 1, k + 1), at(i + 1, j + 1, k + 1), u);
  return lerp(lerp(c00, c10, v), lerp(c01, c11, v), w);
}

// Centered-difference stencils slide inward near the grid edge so both
// evaluation points stay on the grid; clamping inside value() would otherwise
// shorten the effective step and bias the slope.
double GridField::stencil_center(int a, double xa, double h) const {
  const double lo = origin_[a];
  const double hi = origin_[a] + spacing_[a] * (dim(a) - 1);
  return std::clamp(xa, lo + h, hi - h);
}

Vec3 GridField::gradient(const Vec3& x) const {
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    const double h = 0.5 * spacing_[a];
    Vec3 xp = x, xm = x;
    const double c = stencil_center(a, x[a], h);
    xp[a] = c + h;
    xm[a] = c - h;
    g[a] = (value(xp) - value(xm)) / (2.0 * h);
  }
  return g;
}

Mat3 GridField::hessian(const Vec3& x) const {
  Mat3 h;
  for (int a = 0; a < 3; ++a) {
    const double ha = 0.5 * spacing_[a];
    Vec3 xp = x, xm = x;
    const double c = stencil_center(a, x[a], ha);
    xp[a] = c + ha;
    xm[a] = c - ha;
    const Vec3 gp = gradient(xp), gm = gradient(xm);
    h.col(a) = (gp - gm) / (2.0 * ha);
  }
  return 0.5 * (h + h.transpose());
}

Vec3 RadialField::gradient(const Vec3& x) const {
  const Vec3 d = x - c_;
  const double n = d.norm();
  if (n < 1e-12)
    throw ZeroGradientError("radial foliation gradient at center point");
  return (s_ / n) * d;
}

Mat3 RadialField::hessian(const Vec3& x) const {
  const Vec3 d = x - c_;
  const double n = d.norm();
  if (n < 1e-12)
    throw ZeroGradientError("radial foliation hessian at center point");
  const Vec3 u = d / n;
  return (s_ / n) * (Mat3::Identity() - u * u.transpose());
}

}  // namespace tilens
