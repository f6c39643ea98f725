#pragma once

#include <cmath>
#include <string_view>

#include <Eigen/Core>

#include "raymap/domain.hpp"

namespace raymap {

inline constexpr int kNumParams = 8;
using ParamVec = Eigen::Matrix<double, kNumParams, 1>;

/// Coordinates of the unconstrained parameter vector.
enum ParamIndex : int {
  kLogRadialRate = 0,
  kLogAngularSigma = 1,
  kLogGpsSigma = 2,
  kLogitDetectCeiling = 3,
  kConfSlope = 4,
  kConfIntercept = 5,
  kLogClutterDensity = 6,
  kExistenceLogit = 7,
};

inline constexpr std::string_view kParamNames[kNumParams] = {
    "radial_rate",     "angular_sigma",  "gps_sigma",       "detect_ceiling",
    "conf_slope",      "conf_intercept", "clutter_density", "existence_logit",
};

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(sigmoid(x)), stable for large |x|.
inline double log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// Per-class sensor calibration. Stored as unconstrained reals; the physical values
/// come out of exp / sigmoid transforms so every invariant holds by construction.
class SensorParams {
 public:
  struct Values {
    double radial_rate = 1.0 / 30.0;   // 1/m
    double angular_sigma = 0.05;       // rad
    double gps_sigma = 3.0;            // m
    double detect_ceiling = 0.9;
    double conf_slope = 1.0;
    double conf_intercept = 0.0;
    double clutter_density = 1e-3;     // 1/(m rad)
    double existence_logit = -3.0;
  };

  SensorParams() : SensorParams(Values{}) {}

  explicit SensorParams(const Values& v) {
    if (!(v.radial_rate > 0.0) || !(v.angular_sigma > 0.0) || !(v.gps_sigma >= 0.0) ||
        !(v.detect_ceiling > 0.0 && v.detect_ceiling < 1.0) || !(v.clutter_density > 0.0) ||
        !std::isfinite(v.conf_slope) || !std::isfinite(v.conf_intercept) ||
        !std::isfinite(v.existence_logit)) {
      throw InvariantError("SensorParams: value outside its domain");
    }
    u_[kLogRadialRate] = std::log(v.radial_rate);
    u_[kLogAngularSigma] = std::log(v.angular_sigma);
    // gps_sigma == 0 maps to -inf, which exp() sends back to exactly 0.
    u_[kLogGpsSigma] = std::log(v.gps_sigma);
    u_[kLogitDetectCeiling] = logit(v.detect_ceiling);
    u_[kConfSlope] = v.conf_slope;
    u_[kConfIntercept] = v.conf_intercept;
    u_[kLogClutterDensity] = std::log(v.clutter_density);
    u_[kExistenceLogit] = v.existence_logit;
  }

  static SensorParams from_unconstrained(const ParamVec& u) {
    SensorParams p;
    p.u_ = u;
    return p;
  }

  const ParamVec& unconstrained() const { return u_; }

  double radial_rate() const { return std::exp(u_[kLogRadialRate]); }
  double angular_sigma() const { return std::exp(u_[kLogAngularSigma]); }
  double gps_sigma() const { return std::exp(u_[kLogGpsSigma]); }
  double detect_ceiling() const { return sigmoid(u_[kLogitDetectCeiling]); }
  double conf_slope() const { return u_[kConfSlope]; }
  double conf_intercept() const { return u_[kConfIntercept]; }
  double clutter_density() const { return std::exp(u_[kLogClutterDensity]); }
  double existence_logit() const { return u_[kExistenceLogit]; }

  Values values() const {
    return {radial_rate(),  angular_sigma(),   gps_sigma(),      detect_ceiling(),
            conf_slope(),   conf_intercept(),  clutter_density(), existence_logit()};
  }

  friend bool operator==(const SensorParams& a, const SensorParams& b) { return a.u_ == b.u_; }

 private:
  ParamVec u_ = ParamVec::Zero();
};

}  // namespace raymap
