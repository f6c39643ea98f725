#pragma once

// EM driver: seed candidates at ray intersections, then alternate loopy BP
// (E-step) with one Newton step (M-step), pruning and merging as it goes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "raymap/assoc.hpp"
#include "raymap/priors.hpp"
#include "raymap/sensor.hpp"
#include "raymap/solver.hpp"

namespace raymap {

struct EmConfig {
  int em_iters = 10;
  int bp_iters = 5;
  double merge_radius = 5.0;       // m
  double eccentricity_max = 0.95;  // 1 disables eccentricity pruning
  double variance_max = 25.0;      // m^2
  double existence_min = 0.2;
  double edge_radius = 150.0;  // m
  double init_cell = 5.0;      // m
  std::uint64_t seed = 0;
  double min_intersection_angle = 10.0 * kPi / 180.0;  // rad
  double gate_sigmas = 3.0;
  double gate_margin = 60.0 * kPi / 180.0;  // rad, added to the angular gate
  NewtonOptions newton;
  SensorConfig sensor;
  double bp_damping = 0.5;  // undamped BP oscillates on dense seed sets
  double bp_tol = 1e-6;

  void validate() const {
    if (em_iters < 1 || bp_iters < 1) throw InvariantError("EmConfig: iteration counts must be positive");
    if (!(merge_radius > 0.0 && variance_max > 0.0 && edge_radius > 0.0 && init_cell > 0.0)) {
      throw InvariantError("EmConfig: radii, cell size and variance_max must be positive");
    }
    if (!(eccentricity_max > 0.0 && eccentricity_max <= 1.0)) {
      throw InvariantError("EmConfig: eccentricity_max must be in (0, 1]");
    }
    if (!(existence_min >= 0.0 && existence_min <= 1.0)) {
      throw InvariantError("EmConfig: existence_min must be in [0, 1]");
    }
  }
};

struct IterationStats {
  std::size_t hypotheses = 0;  // at the start of the iteration
  std::size_t edges = 0;
  std::size_t skipped_edges = 0;
  std::size_t pruned_eccentricity = 0;
  std::size_t pruned_variance = 0;
  std::size_t pruned_existence = 0;
  std::size_t merged = 0;
  double loss = 0.0;
  bool bp_converged = false;
};

struct ClusterDiagnostics {
  std::size_t seeded = 0;
  std::vector<IterationStats> iterations;
};

struct ClusterResult {
  std::vector<ObjectHypothesis> hypotheses;
  ClusterDiagnostics diagnostics;
  AssociationProblem problem;  // final round; objects index `hypotheses`
  Marginals marginals;
  std::vector<Mat2> hessians;  // M-step Hessian blocks at the final positions
};

namespace detail {

using CellKey = std::pair<std::int64_t, std::int64_t>;

struct CellKeyHash {
  std::size_t operator()(const CellKey& k) const {
    return std::hash<std::int64_t>()(k.first * 73856093LL) ^ std::hash<std::int64_t>()(k.second * 19349663LL);
  }
};

inline CellKey cell_of(const Vec2& p, const Vec2& anchor, double cell) {
  return {static_cast<std::int64_t>(std::floor((p[0] - anchor[0]) / cell)),
          static_cast<std::int64_t>(std::floor((p[1] - anchor[1]) / cell))};
}

/// Uniform grid over point indices; `near` visits every point in the 3x3 block of cells around p.
class PointGrid {
 public:
  PointGrid(std::span<const Vec2> points, double cell) : cell_(cell) {
    if (!points.empty()) {
      anchor_ = points[0];
      for (const auto& p : points) anchor_ = anchor_.cwiseMin(p);
    }
    for (std::size_t i = 0; i < points.size(); ++i) cells_[cell_of(points[i], anchor_, cell_)].push_back(i);
  }

  template <typename Fn>
  void near(const Vec2& p, Fn&& fn) const {
    const auto c = cell_of(p, anchor_, cell_);
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        auto it = cells_.find({c.first + dx, c.second + dy});
        if (it == cells_.end()) continue;
        for (std::size_t i : it->second) fn(i);
      }
    }
  }

 private:
  double cell_;
  Vec2 anchor_ = Vec2::Zero();
  std::unordered_map<CellKey, std::vector<std::size_t>, CellKeyHash> cells_;
};

inline double cross2(const Vec2& a, const Vec2& b) { return a[0] * b[1] - a[1] * b[0]; }

}  // namespace detail

/// Forward intersection of two rays within `max_range` of both origins, if any.
inline std::optional<Vec2> ray_intersection(const Ray& a, const Ray& b, double max_range,
                                            double min_angle) {
  if (std::abs(wrap_angle(a.bearing_angle() - b.bearing_angle())) < min_angle) return std::nullopt;
  const double den = detail::cross2(a.bearing, b.bearing);
  if (den == 0.0) return std::nullopt;
  const Vec2 delta = b.origin - a.origin;
  const double ta = detail::cross2(delta, b.bearing) / den;
  const double tb = detail::cross2(delta, a.bearing) / den;
  if (!(ta > 0.0 && tb > 0.0 && ta <= max_range && tb <= max_range)) return std::nullopt;
  return a.origin + ta * a.bearing;
}

/// Pairwise forward intersections of rays whose origins lie within 2 edge_radius.
inline std::vector<Vec2> pairwise_intersections(std::span<const Ray> rays, const EmConfig& config) {
  std::vector<Vec2> origins;
  origins.reserve(rays.size());
  for (const auto& r : rays) origins.push_back(r.origin);
  const double reach = 2.0 * config.edge_radius;
  const detail::PointGrid grid(origins, reach);
  std::vector<Vec2> out;
  for (std::size_t a = 0; a < rays.size(); ++a) {
    grid.near(origins[a], [&](std::size_t b) {
      if (b <= a || (origins[a] - origins[b]).norm() > reach) return;
      if (auto p = ray_intersection(rays[a], rays[b], config.edge_radius, config.min_intersection_angle)) {
        out.push_back(*p);
      }
    });
  }
  return out;
}

/// Seeds one candidate at the centroid of every grid cell holding at least two intersections.
/// Cells are anchored at the bounding-box minimum and visited in lexicographic order.
inline std::vector<Vec2> init_candidates(const SceneBatch& batch, const EmConfig& config) {
  const auto points = pairwise_intersections(batch.rays, config);
  struct Acc {
    Vec2 sum = Vec2::Zero();
    std::size_t count = 0;
  };
  std::map<detail::CellKey, Acc> cells;
  for (const auto& p : points) {
    auto& acc = cells[detail::cell_of(p, batch.bounding_box.min, config.init_cell)];
    acc.sum += p;
    ++acc.count;
  }
  std::vector<Vec2> seeds;
  for (const auto& [key, acc] : cells) {
    if (acc.count >= 2) seeds.push_back(acc.sum / static_cast<double>(acc.count));
  }
  return seeds;
}

/// Angular gate half-width at range r: gate_sigmas / sqrt(kappa(r)) plus the FOV margin.
inline double gate_half_width(double r, const SensorParams& params, const EmConfig& config) {
  return config.gate_sigmas / std::sqrt(concentration(r, params)) + config.gate_margin;
}

/// Gated sparse association problem. Rays inside the distance floor of an object are not gated.
inline AssociationProblem build_edges(std::span<const Vec2> positions, std::span<const Ray> rays,
                                      const SensorParams& params, const EmConfig& config) {
  AssociationProblem problem;
  problem.n_objects = positions.size();
  problem.n_rays = rays.size();
  problem.log_psi_e.assign(positions.size(), params.existence_logit());
  if (rays.empty()) return problem;

  std::vector<Vec2> origins;
  origins.reserve(rays.size());
  for (const auto& r : rays) origins.push_back(r.origin);
  const detail::PointGrid grid(origins, config.edge_radius);
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const Vec2& x = positions[i];
    candidates.clear();
    grid.near(x, [&](std::size_t j) { candidates.push_back(j); });
    std::sort(candidates.begin(), candidates.end());
    for (std::size_t j : candidates) {
      const Vec2 d = x - rays[j].origin;
      const double r = d.norm();
      if (r > config.edge_radius || r < config.sensor.distance_floor) continue;
      const double phi = wrap_angle(angle_of(d) - rays[j].bearing_angle());
      if (!(std::abs(phi) < gate_half_width(r, params, config))) continue;
      const auto pot = try_assignment_potential(rays[j], x, params, config.sensor);
      const auto miss = try_log_miss_prob(rays[j], x, params, config.sensor);
      if (!pot || !miss) continue;
      problem.edges.push_back({i, j, pot->composed.log_density});
      problem.log_psi_e[i] += miss->log_density;
    }
  }
  return problem;
}

/// sqrt(1 - lambda_min / lambda_max) of a scatter matrix; 1 when the scatter is empty.
inline double eccentricity(const Mat2& scatter) {
  const auto [lo, hi] = sym_eigenvalues(scatter);
  if (!(hi > 0.0)) return 1.0;
  return std::sqrt(std::clamp(1.0 - std::max(lo, 0.0) / hi, 0.0, 1.0));
}

/// Weighted bearing scatter sum_j abar_ij d_j d_j^T over a hypothesis's assigned rays.
inline Mat2 bearing_scatter(const ObjectHypothesis& h, std::span<const Ray> rays) {
  Mat2 s = Mat2::Zero();
  for (const auto& [j, w] : h.assignment_marginals) s += w * rays[j].bearing * rays[j].bearing.transpose();
  return s;
}

struct PruneOutcome {
  std::vector<std::size_t> kept;  // indices into the input, ascending
  std::size_t eccentricity = 0;
  std::size_t variance = 0;
  std::size_t existence = 0;
};

/// Drops hypotheses that are too eccentric, too uncertain, or unlikely to exist.
/// A hypothesis failing several tests is counted under the first one.
inline PruneOutcome prune(std::span<const ObjectHypothesis> hypotheses, std::span<const Ray> rays,
                          const EmConfig& config) {
  PruneOutcome out;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& h = hypotheses[i];
    if (eccentricity(bearing_scatter(h, rays)) > config.eccentricity_max) {
      ++out.eccentricity;
    } else if (sym_eigenvalues(h.covariance).second > config.variance_max) {
      ++out.variance;
    } else if (h.existence < config.existence_min) {
      ++out.existence;
    } else {
      out.kept.push_back(i);
    }
  }
  return out;
}

/// Greedy grid-hash merge. Returns surviving indices in ascending order.
inline std::vector<std::size_t> merge(std::span<const ObjectHypothesis> hypotheses, double merge_radius) {
  std::vector<std::size_t> order(hypotheses.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ha = hypotheses[a];
    const auto& hb = hypotheses[b];
    if (ha.existence != hb.existence) return ha.existence > hb.existence;
    if (ha.position[0] != hb.position[0]) return ha.position[0] < hb.position[0];
    if (ha.position[1] != hb.position[1]) return ha.position[1] < hb.position[1];
    return a < b;
  });
  std::vector<Vec2> positions;
  positions.reserve(hypotheses.size());
  for (const auto& h : hypotheses) positions.push_back(h.position);
  const detail::PointGrid grid(positions, merge_radius);
  std::vector<char> consumed(hypotheses.size(), 0);
  std::vector<std::size_t> survivors;
  for (std::size_t i : order) {
    if (consumed[i]) continue;
    consumed[i] = 1;
    survivors.push_back(i);
    grid.near(positions[i], [&](std::size_t k) {
      if (!consumed[k] && (positions[k] - positions[i]).norm() <= merge_radius) consumed[k] = 1;
    });
  }
  std::sort(survivors.begin(), survivors.end());
  return survivors;
}

namespace detail {

inline int single_class(const SceneBatch& batch) {
  const int cls = batch.rays.front().class_id;
  for (const auto& r : batch.rays) {
    if (r.class_id != cls) throw InvariantError("run_em: batch mixes classes; split it with only_class");
  }
  return cls;
}

inline std::vector<ObjectHypothesis> hypotheses_from(std::span<const Vec2> positions,
                                                     const AssociationProblem& problem, const Marginals& m,
                                                     std::span<const Mat2> hessians, double eig_floor) {
  std::vector<ObjectHypothesis> out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    out[i].position = positions[i];
    out[i].existence = m.existence[i];
    out[i].covariance = posterior_covariance(hessians[i], eig_floor);
  }
  for (std::size_t e = 0; e < problem.edges.size(); ++e) {
    out[problem.edges[e].object].assignment_marginals.emplace_back(problem.edges[e].ray, m.assignment[e]);
  }
  return out;
}

}  // namespace detail

struct EvidenceRound {
  AssociationProblem problem;
  Marginals marginals;
  AssembledLoss loss;
};

/// Gates edges at `positions`, runs BP and assembles the M-step loss. `score_prior` adds
/// log(prior(x) area) to each existence potential (zero for the uniform prior).
inline EvidenceRound evidence_round(std::span<const Vec2> positions, std::span<const Ray> rays,
                                    const SensorParams& params, const PriorDensity& prior, int class_id,
                                    const EmConfig& config, bool score_prior) {
  EvidenceRound out;
  out.problem = build_edges(positions, rays, params, config);
  if (score_prior && prior.kind != PriorKind::kUniform) {
    for (std::size_t i = 0; i < positions.size(); ++i) {
      out.problem.log_psi_e[i] += log_prior(positions[i], prior, class_id).log_density + std::log(prior.region_area);
    }
  }
  out.marginals =
      run_bp(out.problem, {.max_iters = config.bp_iters, .damping = config.bp_damping, .tol = config.bp_tol});
  out.loss = assemble_loss(positions, out.problem, out.marginals, rays, params, prior, class_id, config.sensor);
  return out;
}

inline ClusterResult finalize(std::span<const Vec2> positions, std::span<const Ray> rays,
                              const SensorParams& params, const PriorDensity& prior, int class_id,
                              const EmConfig& config, ClusterDiagnostics diagnostics) {
  ClusterResult result;
  result.diagnostics = std::move(diagnostics);
  auto round = evidence_round(positions, rays, params, prior, class_id, config, true);
  result.hypotheses = detail::hypotheses_from(positions, round.problem, round.marginals, round.loss.hess,
                                              config.newton.eig_floor);
  result.problem = std::move(round.problem);
  result.marginals = std::move(round.marginals);
  result.hessians = std::move(round.loss.hess);
  return result;
}

/// Algorithm 1 on a single-class batch, starting from the given positions.
inline ClusterResult run_em_from(std::vector<Vec2> positions, const SceneBatch& batch, const SensorParams& params,
                                 const PriorDensity& prior, const EmConfig& config) {
  config.validate();
  prior.validate();
  ClusterDiagnostics diag;
  diag.seeded = positions.size();
  if (batch.rays.empty()) {
    ClusterResult empty;
    empty.diagnostics = diag;
    return empty;
  }
  const int class_id = detail::single_class(batch);
  const std::span<const Ray> rays(batch.rays);

  for (int it = 0; it < config.em_iters && !positions.empty(); ++it) {
    IterationStats stats;
    stats.hypotheses = positions.size();
    auto round = evidence_round(positions, rays, params, prior, class_id, config, false);
    stats.edges = round.problem.edges.size();
    stats.skipped_edges = round.loss.skipped_edges;
    stats.loss = round.loss.loss;
    stats.bp_converged = round.marginals.converged;

    const auto weighted = weighted_rays_by_object(round.problem, round.marginals);
    auto loss_of = [&](std::size_t i, const Vec2& x) {
      return object_loss(x, weighted[i], rays, params, prior, class_id, true, config.sensor);
    };
    const auto step = newton_step(positions, round.loss.grad, round.loss.hess, config.newton, loss_of);

    auto hyps = detail::hypotheses_from(step.positions_new, round.problem, round.marginals, round.loss.hess,
                                        config.newton.eig_floor);
    const auto pruned = prune(hyps, rays, config);
    stats.pruned_eccentricity = pruned.eccentricity;
    stats.pruned_variance = pruned.variance;
    stats.pruned_existence = pruned.existence;
    std::vector<ObjectHypothesis> kept;
    kept.reserve(pruned.kept.size());
    for (std::size_t i : pruned.kept) kept.push_back(std::move(hyps[i]));
    const auto survivors = merge(kept, config.merge_radius);
    stats.merged = kept.size() - survivors.size();

    positions.clear();
    for (std::size_t i : survivors) positions.push_back(kept[i].position);
    diag.iterations.push_back(stats);
  }
  return finalize(positions, rays, params, prior, class_id, config, std::move(diag));
}

inline ClusterResult run_em(const SceneBatch& batch, const SensorParams& params, const PriorDensity& prior,
                            const EmConfig& config) {
  config.validate();
  if (batch.rays.empty()) return {};
  return run_em_from(init_candidates(batch, config), batch, params, prior, config);
}

/// Fixed-k baseline: k-means (k-means++ seeding) over pairwise ray intersections. Each
/// cluster's score is its share of intersections relative to the largest cluster.
inline std::vector<ObjectHypothesis> kmeans_baseline(const SceneBatch& batch, std::size_t k,
                                                     const EmConfig& config, int max_iters = 100) {
  const auto points = pairwise_intersections(batch.rays, config);
  if (points.empty() || k == 0) return {};
  k = std::min(k, points.size());
  std::mt19937_64 rng(config.seed);

  std::vector<Vec2> centers{points[std::uniform_int_distribution<std::size_t>(0, points.size() - 1)(rng)]};
  std::vector<double> d2(points.size(), INFINITY);
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t p = 0; p < points.size(); ++p) {
      d2[p] = std::min(d2[p], (points[p] - centers.back()).squaredNorm());
      total += d2[p];
    }
    if (!(total > 0.0)) break;
    double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t pick = points.size() - 1;
    for (std::size_t p = 0; p < points.size(); ++p) {
      u -= d2[p];
      if (u <= 0.0) {
        pick = p;
        break;
      }
    }
    centers.push_back(points[pick]);
  }

  std::vector<std::size_t> label(points.size(), 0);
  std::vector<std::size_t> counts(centers.size(), 0);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = it == 0;
    for (std::size_t p = 0; p < points.size(); ++p) {
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t c = 0; c < centers.size(); ++c) {
        const double d = (points[p] - centers[c]).squaredNorm();
        if (d < best_d) best_d = d, best = c;
      }
      if (label[p] != best) changed = true;
      label[p] = best;
    }
    std::vector<Vec2> sums(centers.size(), Vec2::Zero());
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t p = 0; p < points.size(); ++p) {
      sums[label[p]] += points[p];
      ++counts[label[p]];
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (counts[c] > 0) centers[c] = sums[c] / static_cast<double>(counts[c]);
    }
    if (!changed) break;
  }

  const double largest = static_cast<double>(*std::max_element(counts.begin(), counts.end()));
  std::vector<ObjectHypothesis> out;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    if (counts[c] == 0) continue;
    ObjectHypothesis h;
    h.position = centers[c];
    h.existence = static_cast<double>(counts[c]) / largest;
    h.covariance = Mat2::Identity();
    out.push_back(std::move(h));
  }
  return out;
}

}  // namespace raymap
