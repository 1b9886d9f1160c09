#ifndef TILENS_FIELDS_HPP
#define TILENS_FIELDS_HPP

#include <memory>
#include <vector>

#include "tilens/types.hpp"

namespace tilens {

// Smooth scalar field on R^3.  Closed-form subclasses supply analytic
// derivatives; the gridded one falls back to central differences.
class ScalarField {
 public:
  virtual ~ScalarField() = default;
  virtual double value(const Vec3& x) const = 0;
  virtual Vec3 gradient(const Vec3& x) const = 0;
  virtual Mat3 hessian(const Vec3& x) const = 0;
};

using FieldPtr = std::shared_ptr<const ScalarField>;

class ConstantField final : public ScalarField {
 public:
  explicit ConstantField(double c) : c_(c) {}
  double value(const Vec3&) const override { return c_; }
  Vec3 gradient(const Vec3&) const override { return Vec3::Zero(); }
  Mat3 hessian(const Vec3&) const override { return Mat3::Zero(); }

 private:
  double c_;
};

// c + b.x + x^T Q x with Q symmetric.
class PolynomialField final : public ScalarField {
 public:
  PolynomialField(double c, const Vec3& b, const Mat3& q)
      : c_(c), b_(b), q_(0.5 * (q + q.transpose())) {}
  double value(const Vec3& x) const override {
    return c_ + b_.dot(x) + x.dot(q_ * x);
  }
  Vec3 gradient(const Vec3& x) const override { return b_ + 2.0 * q_ * x; }
  Mat3 hessian(const Vec3&) const override { return 2.0 * q_; }

 private:
  double c_;
  Vec3 b_;
  Mat3 q_;
};

// base + sum of isotropic Gaussian bumps; the standard smooth perturbation
// used in the synthetic scenarios.
class GaussianBumpField final : public ScalarField {
 public:
  struct Bump {
    Vec3 center;
    double sigma;
    double amplitude;
  };
  GaussianBumpField(double base, std::vector<Bump> bumps)
      : base_(base), bumps_(std::move(bumps)) {}
  double value(const Vec3& x) const override;
  Vec3 gradient(const Vec3& x) const override;
  Mat3 hessian(const Vec3& x) const override;
  double base() const { return base_; }
  const std::vector<Bump>& bumps() const { return bumps_; }

 private:
  double base_;
  std::vector<Bump> bumps_;
};

// Regular-grid samples with trilinear interpolation.  Gradients and Hessians
// use central differences of the interpolant at half-spacing steps; queries
// are clamped to the grid box.
class GridField final : public ScalarField {
 public:
  GridField(const Vec3& origin, const Vec3& spacing, int nx, int ny, int nz,
            std::vector<double> values);
  double value(const Vec3& x) const override;
  Vec3 gradient(const Vec3& x) const override;
  Mat3 hessian(const Vec3& x) const override;

  const Vec3& origin() const { return origin_; }
  const Vec3& spacing() const { return spacing_; }
  int nx() const { return nx_; }
  int ny() const { return ny_; }
  int nz() const { return nz_; }
  const std::vector<double>& values() const { return values_; }

 private:
  double at(int i, int j, int k) const {
    return values_[(static_cast<size_t>(k) * ny_ + j) * nx_ + i];
  }
  int dim(int a) const { return a == 0 ? nx_ : (a == 1 ? ny_ : nz_); }
  double stencil_center(int a, double xa, double h) const;
  Vec3 origin_, spacing_;
  int nx_, ny_, nz_;
  std::vector<double> values_;
};

// f = n.x + d; the flat layering / foliation workhorse.
class LinearField final : public ScalarField {
 public:
  LinearField(const Vec3& n, double d) : n_(n), d_(d) {}
  double value(const Vec3& x) const override { return n_.dot(x) + d_; }
  Vec3 gradient(const Vec3&) const override { return n_; }
  Mat3 hessian(const Vec3&) const override { return Mat3::Zero(); }
  const Vec3& normal() const { return n_; }
  double offset() const { return d_; }

 private:
  Vec3 n_;
  double d_;
};

// f = sign * (|x - c| - R).  Level sets are spheres about c; the gradient is
// singular at the center itself.
class RadialField final : public ScalarField {
 public:
  RadialField(const Vec3& center, double radius, double sign = 1.0)
      : c_(center), r_(radius), s_(sign) {}
  double value(const Vec3& x) const override {
    return s_ * ((x - c_).norm() - r_);
  }
  Vec3 gradient(const Vec3& x) const override;
  Mat3 hessian(const Vec3& x) const override;
  const Vec3& center() const { return c_; }
  double radius() const { return r_; }
  double sign() const { return s_; }

 private:
  Vec3 c_;
  double r_;
  double s_;
};

}  // namespace tilens

#endif
