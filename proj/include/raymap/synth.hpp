#pragma once

// Synthetic scenes drawn from the generative model: objects, camera frames,
// detections with Von Mises bearing noise and GPS origin noise, and clutter.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "raymap/detail/rng.hpp"
#include "raymap/domain.hpp"
#include "raymap/params.hpp"
#include "raymap/priors.hpp"
#include "raymap/sensor.hpp"

namespace raymap {

enum class FramePlacement { kGrid, kRandom, kStreets };

struct SynthConfig {
  std::size_t n_objects = 50;
  std::optional<double> object_density;  // objects per m^2; overrides n_objects when set
  BoundingBox region{Vec2(0, 0), Vec2(500, 500)};
  std::size_t n_frames = 400;
  FramePlacement placement = FramePlacement::kRandom;
  /// Every frame sees all around (the detection window is centered on each object).
  bool omnidirectional = false;
  std::map<int, SensorParams> class_params{{1, SensorParams{}}};
  double clutter_rate = 0.0;  // expected false rays per frame
  std::uint64_t seed = 0;
  /// Object placement; a spike-and-slab prior puts each object at an intersection with
  /// probability equal to its class affinity.
  std::optional<PriorDensity> placement_prior;
  double street_spacing = 100.0;  // m, street grid used when no prior gives intersections
  std::optional<double> detect_prob_override;  // replaces p_d for every object/frame pair
  double confidence_min = 0.3;
  double confidence_max = 1.0;
  SensorConfig sensor;
};

struct SynthOutput {
  SceneBatch batch;
  std::vector<int> provenance;  // per ray: source object index, or -1 for clutter
  std::vector<Vec2> frame_origins;  // true (not reported) origins
};

inline constexpr int kClutterSource = -1;

namespace detail {

/// Best-Fisher rejection sampler for VonMises(0, kappa).
inline double sample_von_mises(std::mt19937_64& rng, double kappa) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (kappa < 1e-8) return kPi * (2.0 * unit(rng) - 1.0);
  // Beyond this the rejection constants lose precision; the Gaussian limit is exact to O(1/kappa).
  if (kappa > 1e6) return std::normal_distribution<double>(0.0, 1.0 / std::sqrt(kappa))(rng);
  const double tau = 1.0 + std::sqrt(1.0 + 4.0 * kappa * kappa);
  const double rho = (tau - std::sqrt(2.0 * tau)) / (2.0 * kappa);
  const double s = (1.0 + rho * rho) / (2.0 * rho);
  while (true) {
    const double u1 = unit(rng), u2 = unit(rng), u3 = unit(rng);
    const double z = std::cos(kPi * u1);
    const double f = (1.0 + s * z) / (s + z);
    const double c = kappa * (s - f);
    if (c * (2.0 - c) - u2 > 0.0 || std::log(c / u2) + 1.0 - c >= 0.0) {
      const double theta = std::acos(std::clamp(f, -1.0, 1.0));
      return u3 > 0.5 ? theta : -theta;
    }
  }
}

struct Frame {
  Vec2 origin;
  double heading;
};

}  // namespace detail

/// Intersections of a street grid with the given spacing, inset by half a block.
inline std::vector<Vec2> street_grid(const BoundingBox& region, double spacing) {
  std::vector<Vec2> out;
  for (double x = region.min[0] + 0.5 * spacing; x < region.max[0]; x += spacing) {
    for (double y = region.min[1] + 0.5 * spacing; y < region.max[1]; y += spacing) out.emplace_back(x, y);
  }
  return out;
}

inline SynthOutput generate(const SynthConfig& config) {
  if (config.class_params.empty()) throw InvariantError("generate: no classes configured");
  if (!(config.region.width() > 0.0 && config.region.height() > 0.0)) {
    throw InvariantError("generate: empty region");
  }
  if (!(config.confidence_min >= 0.0 && config.confidence_min <= config.confidence_max &&
        config.confidence_max <= 1.0)) {
    throw InvariantError("generate: invalid confidence range");
  }
  auto object_rng = detail::stream(config.seed, 1);
  auto frame_rng = detail::stream(config.seed, 2);
  auto detect_rng = detail::stream(config.seed, 3);
  auto clutter_rng = detail::stream(config.seed, 4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const BoundingBox& box = config.region;
  auto uniform_point = [&](std::mt19937_64& rng) {
    return Vec2(box.min[0] + box.width() * unit(rng), box.min[1] + box.height() * unit(rng));
  };

  std::vector<int> classes;
  for (const auto& [cls, p] : config.class_params) classes.push_back(cls);
  std::uniform_int_distribution<std::size_t> pick_class(0, classes.size() - 1);

  std::vector<Vec2> intersections;
  if (config.placement_prior && !config.placement_prior->intersections.empty()) {
    intersections = config.placement_prior->intersections;
  } else {
    intersections = street_grid(box, config.street_spacing);
  }

  // Objects
  const std::size_t n_objects =
      config.object_density ? static_cast<std::size_t>(std::llround(*config.object_density * box.area()))
                            : config.n_objects;
  std::vector<TruthObject> truth;
  for (std::size_t i = 0; i < n_objects; ++i) {
    TruthObject t;
    t.class_id = classes[pick_class(object_rng)];
    const auto& prior = config.placement_prior;
    if (prior && prior->kind == PriorKind::kSpikeSlab && unit(object_rng) < prior->affinity_for(t.class_id)) {
      std::uniform_int_distribution<std::size_t> pick(0, prior->intersections.size() - 1);
      std::normal_distribution<double> spread(0.0, prior->intersection_radius);
      const Vec2& c = prior->intersections[pick(object_rng)];
      t.position = c + Vec2(spread(object_rng), spread(object_rng));
    } else {
      t.position = uniform_point(object_rng);
    }
    truth.push_back(t);
  }

  // Frames
  std::vector<detail::Frame> frames;
  const std::size_t n_frames = config.n_frames;
  if (config.placement == FramePlacement::kGrid) {
    const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_frames))));
    for (std::size_t k = 0; k < n_frames; ++k) {
      const double fx = (static_cast<double>(k % side) + 0.5) / static_cast<double>(side);
      const double fy = (static_cast<double>(k / side) + 0.5) / static_cast<double>(side);
      frames.push_back({box.min + Vec2(fx * box.width(), fy * box.height()), kTwoPi * unit(frame_rng)});
    }
  } else if (config.placement == FramePlacement::kRandom) {
    for (std::size_t k = 0; k < n_frames; ++k) frames.push_back({uniform_point(frame_rng), kTwoPi * unit(frame_rng)});
  } else {
    // Frames on street segments between grid intersections, heading along the street.
    const double step = config.street_spacing;
    for (std::size_t k = 0; k < n_frames; ++k) {
      const Vec2& c = intersections[std::uniform_int_distribution<std::size_t>(0, intersections.size() - 1)(frame_rng)];
      const int dir = std::uniform_int_distribution<int>(0, 3)(frame_rng);
      const double heading = dir * 0.5 * kPi;
      const Vec2 d(std::cos(heading), std::sin(heading));
      Vec2 o = c + unit(frame_rng) * step * d;
      o = o.cwiseMax(box.min).cwiseMin(box.max);
      frames.push_back({o, heading});
    }
  }

  SynthOutput out;
  out.batch.bounding_box = box;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& frame = frames[f];
    const std::string frame_id = "f" + std::to_string(f);
    out.frame_origins.push_back(frame.origin);
    // One GPS fix per frame and class.
    std::map<int, Vec2> reported;
    for (int cls : classes) {
      std::normal_distribution<double> gps(0.0, config.class_params.at(cls).gps_sigma());
      reported[cls] = frame.origin + Vec2(gps(detect_rng), gps(detect_rng));
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const auto& t = truth[i];
      const auto& params = config.class_params.at(t.class_id);
      const Vec2 to_object = t.position - frame.origin;
      const double true_bearing = config.omnidirectional ? angle_of(to_object) : frame.heading;
      const double conf = config.confidence_min + (config.confidence_max - config.confidence_min) * unit(detect_rng);
      const double u = unit(detect_rng);
      if (to_object.norm() < config.sensor.distance_floor) continue;
      double pd;
      if (config.detect_prob_override) {
        pd = *config.detect_prob_override;
      } else {
        const Ray camera = make_ray(frame.origin, true_bearing, conf, t.class_id, frame_id);
        pd = detect_prob(camera, t.position, params, config.sensor);
      }
      if (!(u < pd)) continue;
      const Vec2 o = reported.at(t.class_id);
      const Vec2 d = t.position - o;
      const double r = d.norm();
      if (r < config.sensor.distance_floor) continue;
      const double noise = detail::sample_von_mises(detect_rng, concentration(r, params));
      out.batch.rays.push_back(make_ray(o, wrap_angle(angle_of(d) + noise), conf, t.class_id, frame_id));
      out.provenance.push_back(static_cast<int>(i));
    }
    std::poisson_distribution<int> n_clutter(config.clutter_rate > 0.0 ? config.clutter_rate : 1.0);
    const int count = config.clutter_rate > 0.0 ? n_clutter(clutter_rng) : 0;
    for (int c = 0; c < count; ++c) {
      const int cls = classes[pick_class(clutter_rng)];
      const double conf = config.confidence_min + (config.confidence_max - config.confidence_min) * unit(clutter_rng);
      const double bearing = kPi * (2.0 * unit(clutter_rng) - 1.0);
      out.batch.rays.push_back(make_ray(reported.at(cls), bearing, conf, cls, frame_id));
      out.provenance.push_back(kClutterSource);
    }
  }
  out.batch.ground_truth = std::move(truth);
  return out;
}

}  // namespace raymap
