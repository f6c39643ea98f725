#pragma once

// Measurement model for one bearing-only detection.
//
// The density of an object at polar position (r, phi) relative to a ray is
//
//   f(r, phi) = Exp(r; lambda) * VonMises(phi; 0, kappa(r)),
//   kappa(r)  = 1 / (sigma_theta^2 + (sigma_gps / r)^2),
//
// so GPS error on the origin widens the angular law at short range. Detection
// probability is
//
//   p_d = ceiling * sigmoid(delta) * exp(-lambda r) * W(phi),
//   delta = conf_slope * logit(confidence) + conf_intercept,
//
// with W a smooth field-of-view window. Association potentials follow the usual
// JPDA factorization: an existing object contributes (1 - p_d) for every gated ray,
// and assigning ray j multiplies in
//
//   psi_ij = p_d f / ((1 - p_d) f_FD),
//
// so the product over an object's rays is p_d f / f_FD when assigned and (1 - p_d)
// when missed.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>

#include <Eigen/Core>

#include "raymap/detail/bessel.hpp"
#include "raymap/domain.hpp"
#include "raymap/params.hpp"

namespace raymap {

/// Fixed (untrained) sensor configuration.
struct SensorConfig {
  double distance_floor = 0.5;                 // m
  double fov_half_width = 60.0 * kPi / 180.0;  // rad
  double fov_edge = 5.0 * kPi / 180.0;         // rad, logistic edge width
  double confidence_clamp = 1e-6;              // confidence is clamped into [c, 1 - c]
};

class DegenerateGeometry : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

using ParamPositionJacobian = Eigen::Matrix<double, kNumParams, kDim>;

/// A scalar log-quantity with its derivatives in position and in the unconstrained parameters.
struct LikelihoodEval {
  double log_density = 0.0;
  Vec2 grad_position = Vec2::Zero();
  Mat2 hessian_position = Mat2::Zero();
  ParamVec grad_params = ParamVec::Zero();

  LikelihoodEval& operator+=(const LikelihoodEval& o) {
    log_density += o.log_density;
    grad_position += o.grad_position;
    hessian_position += o.hessian_position;
    grad_params += o.grad_params;
    return *this;
  }
};

namespace detail {

/// Polar coordinates of x relative to a ray, with first and second derivatives in x.
struct RayGeometry {
  double r = 0.0;
  double phi = 0.0;
  Vec2 grad_r = Vec2::Zero();
  Vec2 grad_phi = Vec2::Zero();
  Mat2 hess_r = Mat2::Zero();
  Mat2 hess_phi = Mat2::Zero();
};

inline RayGeometry ray_geometry(const Ray& ray, const Vec2& x) {
  RayGeometry g;
  const Vec2 d = x - ray.origin;
  g.r = d.norm();
  const Vec2 u = d / g.r;
  g.phi = wrap_angle(angle_of(d) - ray.bearing_angle());
  g.grad_r = u;
  g.grad_phi = Vec2(-u[1], u[0]) / g.r;
  g.hess_r = (Mat2::Identity() - u * u.transpose()) / g.r;
  const double r4 = g.r * g.r * g.r * g.r;
  const double xy = d[0] * d[1];
  const double diff = d[1] * d[1] - d[0] * d[0];
  g.hess_phi << 2.0 * xy / r4, diff / r4, diff / r4, -2.0 * xy / r4;
  return g;
}

/// kappa(r) with its r-derivatives and its derivatives in the two log-sigma coordinates.
struct Kappa {
  double value = 0.0;
  double dr = 0.0;
  double drr = 0.0;
  double d_log_sigma = 0.0;  // d kappa / d log sigma_theta
  double d_log_gps = 0.0;    // d kappa / d log sigma_gps
  double dr_d_log_sigma = 0.0;
  double dr_d_log_gps = 0.0;
};

inline Kappa kappa(double r, const SensorParams& p) {
  const double s2 = p.angular_sigma() * p.angular_sigma();
  const double g2 = p.gps_sigma() * p.gps_sigma();
  const double r2 = r * r;
  Kappa k;
  k.value = 1.0 / (s2 + g2 / r2);
  const double k2 = k.value * k.value;
  k.dr = 2.0 * g2 * k2 / (r2 * r);
  k.drr = -6.0 * g2 * k2 / (r2 * r2) + 8.0 * g2 * g2 * k2 * k.value / (r2 * r2 * r2);
  k.d_log_sigma = -2.0 * s2 * k2;
  k.d_log_gps = -2.0 * g2 * k2 / r2;
  k.dr_d_log_sigma = 4.0 * g2 * k.value * k.d_log_sigma / (r2 * r);
  k.dr_d_log_gps = 4.0 * g2 * k2 / (r2 * r) + 4.0 * g2 * k.value * k.d_log_gps / (r2 * r);
  return k;
}

inline double clamp_confidence(double c, const SensorConfig& cfg) {
  return std::clamp(c, cfg.confidence_clamp, 1.0 - cfg.confidence_clamp);
}

}  // namespace detail

inline double concentration(double r, const SensorParams& params) {
  return detail::kappa(r, params).value;
}

/// log f at polar coordinates (r, phi), for any r > 0. Used by quadrature checks and plots.
inline double polar_log_density(double r, double phi, const SensorParams& params) {
  const double lambda = params.radial_rate();
  const double k = concentration(r, params);
  return std::log(lambda) - lambda * r + k * std::cos(phi) - std::log(kTwoPi) -
         detail::log_bessel_i0(k);
}

/// Measurement log-likelihood with exact derivatives, or nullopt inside the distance floor.
inline std::optional<LikelihoodEval> try_log_f(const Ray& ray, const Vec2& x,
                                               const SensorParams& params,
                                               const SensorConfig& cfg = {}) {
  if (!all_finite(x)) throw InvariantError("log_f: non-finite position");
  if ((x - ray.origin).norm() < cfg.distance_floor) return std::nullopt;

  const auto geo = detail::ray_geometry(ray, x);
  const auto kap = detail::kappa(geo.r, params);
  const double lambda = params.radial_rate();
  const double k = kap.value;
  const double cos_phi = std::cos(geo.phi);
  const double sin_phi = std::sin(geo.phi);
  const double a = detail::bessel_ratio(k);
  const double da = detail::bessel_ratio_derivative(k);

  LikelihoodEval ev;
  ev.log_density = std::log(lambda) - lambda * geo.r + k * cos_phi - std::log(kTwoPi) -
                   detail::log_bessel_i0(k);

  const double d_kappa = cos_phi - a;  // d log f / d kappa
  const double g_r = -lambda + kap.dr * d_kappa;
  const double g_phi = -k * sin_phi;
  const double g_rr = kap.drr * d_kappa - da * kap.dr * kap.dr;
  const double g_rphi = -kap.dr * sin_phi;
  const double g_phiphi = -k * cos_phi;

  ev.grad_position = g_r * geo.grad_r + g_phi * geo.grad_phi;
  const Mat2 cross = geo.grad_r * geo.grad_phi.transpose();
  ev.hessian_position = g_rr * geo.grad_r * geo.grad_r.transpose() +
                        g_rphi * (cross + cross.transpose()) +
                        g_phiphi * geo.grad_phi * geo.grad_phi.transpose() +
                        g_r * geo.hess_r + g_phi * geo.hess_phi;

  ev.grad_params[kLogRadialRate] = 1.0 - lambda * geo.r;
  ev.grad_params[kLogAngularSigma] = d_kappa * kap.d_log_sigma;
  ev.grad_params[kLogGpsSigma] = d_kappa * kap.d_log_gps;
  return ev;
}

inline LikelihoodEval log_f(const Ray& ray, const Vec2& x, const SensorParams& params,
                            const SensorConfig& cfg = {}) {
  auto ev = try_log_f(ray, x, params, cfg);
  if (!ev) throw DegenerateGeometry("log_f: object within the distance floor of the ray origin");
  return *ev;
}

/// d(grad_position log f) / d(unconstrained params), one row per parameter.
inline ParamPositionJacobian log_f_mixed(const Ray& ray, const Vec2& x, const SensorParams& params,
                                         const SensorConfig& cfg = {}) {
  if ((x - ray.origin).norm() < cfg.distance_floor) {
    throw DegenerateGeometry("log_f_mixed: object within the distance floor");
  }
  const auto geo = detail::ray_geometry(ray, x);
  const auto kap = detail::kappa(geo.r, params);
  const double lambda = params.radial_rate();
  const double cos_phi = std::cos(geo.phi);
  const double sin_phi = std::sin(geo.phi);
  const double a = detail::bessel_ratio(kap.value);
  const double da = detail::bessel_ratio_derivative(kap.value);

  ParamPositionJacobian j = ParamPositionJacobian::Zero();
  j.row(kLogRadialRate) = (-lambda * geo.grad_r).transpose();
  auto fill = [&](int row, double dk, double dkr) {
    const double dg_r = dkr * (cos_phi - a) - kap.dr * da * dk;
    const double dg_phi = -dk * sin_phi;
    j.row(row) = (dg_r * geo.grad_r + dg_phi * geo.grad_phi).transpose();
  };
  fill(kLogAngularSigma, kap.d_log_sigma, kap.dr_d_log_sigma);
  fill(kLogGpsSigma, kap.d_log_gps, kap.dr_d_log_gps);
  return j;
}

/// Detection logit delta mapped from the detector's confidence.
inline double detection_logit(double confidence, const SensorParams& params,
                              const SensorConfig& cfg = {}) {
  return params.conf_slope() * logit(detail::clamp_confidence(confidence, cfg)) +
         params.conf_intercept();
}

/// log p_d with derivatives.
inline std::optional<LikelihoodEval> try_log_detect_prob(const Ray& ray, const Vec2& x,
                                                         const SensorParams& params,
                                                         const SensorConfig& cfg = {}) {
  if (!all_finite(x)) throw InvariantError("detect_prob: non-finite position");
  if ((x - ray.origin).norm() < cfg.distance_floor) return std::nullopt;

  const auto geo = detail::ray_geometry(ray, x);
  const double lambda = params.radial_rate();
  const double conf_logit = logit(detail::clamp_confidence(ray.confidence, cfg));
  const double delta = params.conf_slope() * conf_logit + params.conf_intercept();
  const double s = cfg.fov_edge;
  const double lo = (cfg.fov_half_width - geo.phi) / s;
  const double hi = (cfg.fov_half_width + geo.phi) / s;

  LikelihoodEval ev;
  ev.log_density = log_sigmoid(params.unconstrained()[kLogitDetectCeiling]) + log_sigmoid(delta) -
                   lambda * geo.r + log_sigmoid(lo) + log_sigmoid(hi);

  const double w1 = (-sigmoid(-lo) + sigmoid(-hi)) / s;
  const double w2 = -(sigmoid(-lo) * sigmoid(lo) + sigmoid(-hi) * sigmoid(hi)) / (s * s);
  ev.grad_position = -lambda * geo.grad_r + w1 * geo.grad_phi;
  ev.hessian_position =
      -lambda * geo.hess_r + w2 * geo.grad_phi * geo.grad_phi.transpose() + w1 * geo.hess_phi;

  ev.grad_params[kLogRadialRate] = -lambda * geo.r;
  ev.grad_params[kLogitDetectCeiling] = sigmoid(-params.unconstrained()[kLogitDetectCeiling]);
  ev.grad_params[kConfSlope] = sigmoid(-delta) * conf_logit;
  ev.grad_params[kConfIntercept] = sigmoid(-delta);
  return ev;
}

inline LikelihoodEval log_detect_prob(const Ray& ray, const Vec2& x, const SensorParams& params,
                                      const SensorConfig& cfg = {}) {
  auto ev = try_log_detect_prob(ray, x, params, cfg);
  if (!ev) throw DegenerateGeometry("detect_prob: object within the distance floor");
  return *ev;
}

inline double detect_prob(const Ray& ray, const Vec2& x, const SensorParams& params,
                          const SensorConfig& cfg = {}) {
  return std::exp(log_detect_prob(ray, x, params, cfg).log_density);
}

/// Converts a log p_d evaluation into log(1 - p_d) with derivatives.
inline LikelihoodEval log_complement(const LikelihoodEval& log_p) {
  const double p = std::exp(log_p.log_density);
  const double odds = p / (1.0 - p);
  LikelihoodEval ev;
  ev.log_density = std::log1p(-p);
  ev.grad_position = -odds * log_p.grad_position;
  ev.hessian_position = -odds * log_p.hessian_position -
                        odds / (1.0 - p) * log_p.grad_position * log_p.grad_position.transpose();
  ev.grad_params = -odds * log_p.grad_params;
  return ev;
}

/// log(1 - p_d), or nullopt inside the distance floor.
inline std::optional<LikelihoodEval> try_log_miss_prob(const Ray& ray, const Vec2& x,
                                                       const SensorParams& params,
                                                       const SensorConfig& cfg = {}) {
  auto lp = try_log_detect_prob(ray, x, params, cfg);
  if (!lp) return std::nullopt;
  return log_complement(*lp);
}

/// log psi_i = existence_logit + sum_j log(1 - p_d(x, j)) over the given (gated) rays.
/// Rays inside the distance floor are skipped.
inline LikelihoodEval existence_potential_eval(const Vec2& x, std::span<const Ray> rays,
                                               const SensorParams& params,
                                               const SensorConfig& cfg = {}) {
  LikelihoodEval ev;
  ev.log_density = params.existence_logit();
  ev.grad_params[kExistenceLogit] = 1.0;
  for (const auto& ray : rays) {
    if (auto miss = try_log_miss_prob(ray, x, params, cfg)) ev += *miss;
  }
  return ev;
}

inline double existence_potential(const Vec2& x, std::span<const Ray> rays,
                                  const SensorParams& params, const SensorConfig& cfg = {}) {
  return existence_potential_eval(x, rays, params, cfg).log_density;
}

/// Assignment potential for one (object, ray) pair.
///
/// `log_ratio` is the bare density-ratio form delta + log f - log f_FD. `log_detect_odds`
/// is log(p_d / (1 - p_d)), which already carries delta through p_d, so the value used
/// by association is `composed` = log f - log f_FD + log_detect_odds.
struct AssignmentPotential {
  double log_ratio = 0.0;
  double log_detect_odds = 0.0;
  LikelihoodEval composed;
};

inline std::optional<AssignmentPotential> try_assignment_potential(const Ray& ray, const Vec2& x,
                                                                   const SensorParams& params,
                                                                   const SensorConfig& cfg = {}) {
  auto lf = try_log_f(ray, x, params, cfg);
  auto lp = try_log_detect_prob(ray, x, params, cfg);
  if (!lf || !lp) return std::nullopt;
  const auto miss = log_complement(*lp);
  const double log_fd = std::log(params.clutter_density());

  AssignmentPotential out;
  out.log_ratio = detection_logit(ray.confidence, params, cfg) + lf->log_density - log_fd;
  out.log_detect_odds = lp->log_density - miss.log_density;

  out.composed = *lf;
  out.composed += *lp;
  out.composed.log_density -= miss.log_density + log_fd;
  out.composed.grad_position -= miss.grad_position;
  out.composed.hessian_position -= miss.hessian_position;
  out.composed.grad_params -= miss.grad_params;
  out.composed.grad_params[kLogClutterDensity] -= 1.0;
  return out;
}

inline AssignmentPotential assignment_potential(const Ray& ray, const Vec2& x,
                                                const SensorParams& params,
                                                const SensorConfig& cfg = {}) {
  auto a = try_assignment_potential(ray, x, params, cfg);
  if (!a) throw DegenerateGeometry("assignment_potential: object within the distance floor");
  return *a;
}

}  // namespace raymap
