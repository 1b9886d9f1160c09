#ifndef TILENS_TYPES_HPP
#define TILENS_TYPES_HPP

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace tilens {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

enum class WaveMode { QP, QSV, QSH };

const char* wave_name(WaveMode w);
WaveMode wave_from_name(const std::string& s);

// Active material parameters for the recovery problem.  a55 (and a66) are
// treated as known; a13 enters only through E2.
enum class Param { E2 = 0, A11 = 1, A33 = 2 };

const char* param_name(Param p);
Param param_from_name(const std::string& s);

// Point in phase space: position x and covector xi (ambient coordinates).
struct PhasePoint {
  Vec3 x;
  Vec3 xi;
};

struct Box {
  Vec3 lo{0, 0, 0};
  Vec3 hi{1, 1, 1};
  bool contains(const Vec3& p, double tol = 0.0) const {
    return (p.array() >= lo.array() - tol).all() &&
           (p.array() <= hi.array() + tol).all();
  }
  Vec3 extent() const { return hi - lo; }
};

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
  using Error::Error;
};

// Numerical guard failures: these indicate the request left the validity
// region of a formula or an iteration did not converge, not a programming
// error.
struct ZeroGradientError : Error { using Error::Error; };
struct NegativeDiscriminantError : Error { using Error::Error; };
struct DiscriminantTooSmallError : Error { using Error::Error; };
struct TangencyError : Error { using Error::Error; };
struct MaxTimeExceededError : Error { using Error::Error; };
struct SingularHessianError : Error { using Error::Error; };
struct NoConvergenceError : Error { using Error::Error; };
struct SegmentInadmissibleError : Error { using Error::Error; };
struct BranchFailureError : Error { using Error::Error; };
struct NonpositiveNuError : Error { using Error::Error; };
struct FitFailureError : Error { using Error::Error; };
struct NumericalError : Error { using Error::Error; };

}  // namespace tilens

#endif
