#pragma once

#include <cmath>
#include <map>
#include <algorithm>
#include <span>
#include <utility>
#include <vector>

#include "raymap/domain.hpp"

namespace raymap {

enum class PriorKind { kUniform, kSpikeSlab };

/// Density over object positions: uniform over the region, or a spike-and-slab
/// mixture of isotropic Gaussians at road intersections over a uniform slab.
struct PriorDensity {
  PriorKind kind = PriorKind::kUniform;
  double region_area = 1e6;  // m^2
  std::vector<Vec2> intersections;
  double intersection_radius = 15.0;  // m, Gaussian scale
  std::map<int, double> affinity;     // per class weight of the spike component
  double default_affinity = 0.5;

  static PriorDensity uniform(double area) {
    PriorDensity p;
    p.region_area = area;
    return p;
  }

  static PriorDensity spike_slab(double area, std::vector<Vec2> intersections, double radius,
                                 std::map<int, double> affinity) {
    PriorDensity p;
    p.kind = PriorKind::kSpikeSlab;
    p.region_area = area;
    p.intersections = std::move(intersections);
    p.intersection_radius = radius;
    p.affinity = std::move(affinity);
    return p;
  }

  double affinity_for(int class_id) const {
    auto it = affinity.find(class_id);
    return it == affinity.end() ? default_affinity : it->second;
  }

  void validate() const {
    if (!(region_area > 0.0)) throw InvariantError("PriorDensity: region_area must be positive");
    auto check_w = [](double w) {
      if (!(w >= 0.0 && w <= 1.0)) throw InvariantError("PriorDensity: affinity outside [0, 1]");
    };
    check_w(default_affinity);
    for (const auto& [cls, w] : affinity) check_w(w);
    if (kind == PriorKind::kSpikeSlab) {
      if (intersections.empty()) throw InvariantError("PriorDensity: spike_slab needs intersections");
      if (!(intersection_radius > 0.0)) throw InvariantError("PriorDensity: intersection_radius must be positive");
    }
  }
};

struct PriorEval {
  double log_density = 0.0;
  Vec2 grad = Vec2::Zero();
  Mat2 hess = Mat2::Zero();
};

namespace detail {

/// Mean of the spike Gaussians at x, with gradient and Hessian.
struct SpikeValue {
  double value = 0.0;
  Vec2 grad = Vec2::Zero();
  Mat2 hess = Mat2::Zero();
};

inline SpikeValue spike(const Vec2& x, std::span<const Vec2> centers, double s) {
  SpikeValue out;
  const double s2 = s * s;
  const double norm = 1.0 / (kTwoPi * s2 * static_cast<double>(centers.size()));
  for (const auto& c : centers) {
    const Vec2 d = x - c;
    const double n = norm * std::exp(-0.5 * d.squaredNorm() / s2);
    out.value += n;
    out.grad -= n * d / s2;
    out.hess += n * (d * d.transpose() / (s2 * s2) - Mat2::Identity() / s2);
  }
  return out;
}

}  // namespace detail

inline PriorEval log_prior(const Vec2& x, const PriorDensity& prior, int class_id) {
  PriorEval out;
  const double slab = 1.0 / prior.region_area;
  if (prior.kind == PriorKind::kUniform) {
    out.log_density = std::log(slab);
    return out;
  }
  if (prior.intersections.empty()) throw InvariantError("log_prior: spike_slab without intersections");
  const double w = prior.affinity_for(class_id);
  const auto sp = detail::spike(x, prior.intersections, prior.intersection_radius);
  const double m = w * sp.value + (1.0 - w) * slab;
  const Vec2 gm = w * sp.grad;
  out.log_density = std::log(m);
  out.grad = gm / m;
  out.hess = w * sp.hess / m - gm * gm.transpose() / (m * m);
  return out;
}

/// Fits each class's intersection affinity w by maximizing
/// sum_signs log(w spike(x) + (1 - w) / area) + log Beta(w; a, b) with golden-section search.
/// Classes listed in the template's affinity map but absent from `truth` get the Beta mode.
inline std::map<int, double> fit_affinity(std::span<const TruthObject> truth, const PriorDensity& prior_template,
                                          std::pair<double, double> pseudo_counts = {2.0, 2.0},
                                          double tol = 1e-6) {
  if (prior_template.intersections.empty()) throw InvariantError("fit_affinity: no intersections");
  const auto [a, b] = pseudo_counts;
  if (!(a >= 1.0 && b >= 1.0)) throw InvariantError("fit_affinity: pseudo-counts must be >= 1");
  const double prior_mode = (a + b > 2.0) ? (a - 1.0) / (a + b - 2.0) : 0.5;

  std::map<int, std::vector<double>> spikes;  // per class, spike density at each sign
  for (const auto& t : truth) {
    spikes[t.class_id].push_back(
        detail::spike(t.position, prior_template.intersections, prior_template.intersection_radius).value);
  }
  std::map<int, double> out;
  for (const auto& [cls, w] : prior_template.affinity) out[cls] = prior_mode;

  const double slab = 1.0 / prior_template.region_area;
  for (auto& [cls, values] : spikes) {
    std::sort(values.begin(), values.end());  // order-independent sums
    auto objective = [&](double w) {
      double total = (a - 1.0) * std::log(w) + (b - 1.0) * std::log1p(-w);
      for (double v : values) total += std::log(w * v + (1.0 - w) * slab);
      return total;
    };
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double lo = 0.0, hi = 1.0;
    double c = hi - phi * (hi - lo), d = lo + phi * (hi - lo);
    double fc = objective(c), fd = objective(d);
    while (hi - lo > tol) {
      if (fc >= fd) {
        hi = d;
        d = c;
        fd = fc;
        c = hi - phi * (hi - lo);
        fc = objective(c);
      } else {
        lo = c;
        c = d;
        fc = fd;
        d = lo + phi * (hi - lo);
        fd = objective(d);
      }
    }
    out[cls] = 0.5 * (lo + hi);
  }
  return out;
}

}  // namespace raymap
