#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace raymap {

/// All geometry lives in a local planar (east, north) frame, in meters.
inline constexpr int kDim = 2;

using Vec2 = Eigen::Matrix<double, kDim, 1>;
using Mat2 = Eigen::Matrix<double, kDim, kDim>;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Raised when inputs violate a documented precondition or invariant.
class InvariantError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline bool all_finite(const Vec2& v) { return std::isfinite(v[0]) && std::isfinite(v[1]); }

/// Reduces an angle to (-pi, pi].
inline double wrap_angle(double a) {
  if (!std::isfinite(a)) throw InvariantError("wrap_angle: non-finite angle");
  double r = std::remainder(a, kTwoPi);
  if (r <= -kPi) r += kTwoPi;
  if (r > kPi) r -= kTwoPi;
  return r;
}

inline double angle_of(const Vec2& v) { return std::atan2(v[1], v[0]); }

/// One detection: a sighting with origin and bearing but no depth.
struct Ray {
  Vec2 origin = Vec2::Zero();
  Vec2 bearing = Vec2::UnitX();
  double confidence = 1.0;
  int class_id = 0;
  std::string frame_id;
  double heading = 0.0;  // rad, the angle make_ray built `bearing` from

  double bearing_angle() const { return angle_of(bearing); }
};

inline Ray make_ray(const Vec2& origin, double bearing_angle, double confidence, int class_id,
                    std::string frame_id) {
  if (!all_finite(origin) || !std::isfinite(bearing_angle) || !std::isfinite(confidence)) {
    throw InvariantError("make_ray: non-finite input");
  }
  if (confidence < 0.0 || confidence > 1.0) {
    throw InvariantError("make_ray: confidence outside [0, 1]");
  }
  Ray ray;
  ray.origin = origin;
  ray.bearing = Vec2(std::cos(bearing_angle), std::sin(bearing_angle));
  ray.bearing /= ray.bearing.norm();
  ray.heading = bearing_angle;
  ray.confidence = confidence;
  ray.class_id = class_id;
  ray.frame_id = std::move(frame_id);
  return ray;
}

/// Sparse (ray index, marginal) list, sorted by ray index.
using SparseMarginals = std::vector<std::pair<std::size_t, double>>;

/// A candidate object: Laplace-style summary of one cluster.
struct ObjectHypothesis {
  Vec2 position = Vec2::Zero();
  double existence = 0.0;
  Mat2 covariance = Mat2::Identity();
  SparseMarginals assignment_marginals;
};

struct TruthObject {
  Vec2 position = Vec2::Zero();
  int class_id = 0;
};

struct BoundingBox {
  Vec2 min = Vec2::Zero();
  Vec2 max = Vec2::Zero();

  double width() const { return max[0] - min[0]; }
  double height() const { return max[1] - min[1]; }
  double area() const { return width() * height(); }

  bool contains(const Vec2& p, double margin = 0.0) const {
    return p[0] >= min[0] - margin && p[0] <= max[0] + margin && p[1] >= min[1] - margin &&
           p[1] <= max[1] + margin;
  }

  BoundingBox translated(const Vec2& t) const { return {min + t, max + t}; }

  static BoundingBox around(const std::vector<Ray>& rays) {
    BoundingBox box;
    if (rays.empty()) return box;
    box.min = box.max = rays.front().origin;
    for (const auto& r : rays) {
      box.min = box.min.cwiseMin(r.origin);
      box.max = box.max.cwiseMax(r.origin);
    }
    return box;
  }
};

/// A region's worth of detections, optionally with (possibly partial) labels.
struct SceneBatch {
  std::vector<Ray> rays;
  BoundingBox bounding_box;
  std::optional<std::vector<TruthObject>> ground_truth;

  bool empty() const { return rays.empty(); }

  void validate(double margin = 0.0) const {
    for (std::size_t j = 0; j < rays.size(); ++j) {
      if (!bounding_box.contains(rays[j].origin, margin)) {
        throw InvariantError("SceneBatch: ray " + std::to_string(j) +
                             " origin lies outside the bounding box");
      }
    }
  }

  /// Rays and truth restricted to one class. Ray order is preserved.
  SceneBatch only_class(int class_id) const {
    SceneBatch out;
    out.bounding_box = bounding_box;
    for (const auto& r : rays) {
      if (r.class_id == class_id) out.rays.push_back(r);
    }
    if (ground_truth) {
      out.ground_truth.emplace();
      for (const auto& t : *ground_truth) {
        if (t.class_id == class_id) out.ground_truth->push_back(t);
      }
    }
    return out;
  }
};

}  // namespace raymap
