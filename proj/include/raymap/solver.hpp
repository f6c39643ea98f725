#pragma once

// M-step: expected negative log-likelihood of object positions under fixed
// assignment marginals, minimized by one regularized Newton step per object.
// The Hessian is block diagonal, so every object is solved independently.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "raymap/assoc.hpp"
#include "raymap/priors.hpp"
#include "raymap/sensor.hpp"

namespace raymap {

struct AssembledLoss {
  double loss = 0.0;
  std::vector<double> object_loss;
  std::vector<Vec2> grad;
  std::vector<Mat2> hess;
  std::size_t skipped_edges = 0;  // edges inside the distance floor
};

struct NewtonOptions {
  double trust_radius = 10.0;  // m
  double eig_floor = 1e-3;
  bool line_search = true;
  int max_halvings = 8;
};

struct NewtonReport {
  std::vector<Vec2> positions_new;
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::vector<double> step_norms;
  std::vector<double> regularizers;
};

/// Eigenvalues of a symmetric 2x2 block, ascending.
inline std::pair<double, double> sym_eigenvalues(const Mat2& h) {
  const double mean = 0.5 * (h(0, 0) + h(1, 1));
  const double rad = std::hypot(0.5 * (h(0, 0) - h(1, 1)), 0.5 * (h(0, 1) + h(1, 0)));
  return {mean - rad, mean + rad};
}

/// Unit eigenvector of the larger eigenvalue of a symmetric 2x2 block.
inline Vec2 sym_major_axis(const Mat2& h) {
  const double theta = 0.5 * std::atan2(h(0, 1) + h(1, 0), h(0, 0) - h(1, 1));
  return {std::cos(theta), std::sin(theta)};
}

/// Laplace covariance: inverse of the block with eigenvalues floored at `eig_floor`.
inline Mat2 posterior_covariance(const Mat2& hess, double eig_floor) {
  if (!(eig_floor > 0.0)) throw InvariantError("posterior_covariance: eig_floor must be positive");
  const auto [lo, hi] = sym_eigenvalues(hess);
  const Vec2 major = sym_major_axis(hess);
  const Vec2 minor(-major[1], major[0]);
  return major * major.transpose() / std::max(hi, eig_floor) +
         minor * minor.transpose() / std::max(lo, eig_floor);
}

/// Loss for one object: -sum_e abar_e log f(ray_e, x) - log prior(x) over the given edges.
/// With `strict`, an edge with positive weight inside the distance floor gives +inf.
inline double object_loss(const Vec2& x, std::span<const std::pair<std::size_t, double>> weighted_rays,
                          std::span<const Ray> rays, const SensorParams& params, const PriorDensity& prior,
                          int class_id, bool strict, const SensorConfig& cfg = {}) {
  double loss = -log_prior(x, prior, class_id).log_density;
  for (const auto& [j, w] : weighted_rays) {
    if (w == 0.0) continue;
    auto lf = try_log_f(rays[j], x, params, cfg);
    if (!lf) {
      if (strict) return std::numeric_limits<double>::infinity();
      continue;
    }
    loss -= w * lf->log_density;
  }
  return loss;
}

/// Per-object (ray, weight) lists from an edge set and its assignment marginals.
inline std::vector<std::vector<std::pair<std::size_t, double>>> weighted_rays_by_object(
    const AssociationProblem& problem, const Marginals& marginals) {
  if (marginals.assignment.size() != problem.edges.size()) {
    throw InvariantError("weighted_rays_by_object: marginals do not match the edge set");
  }
  std::vector<std::vector<std::pair<std::size_t, double>>> out(problem.n_objects);
  for (std::size_t e = 0; e < problem.edges.size(); ++e) {
    out[problem.edges[e].object].emplace_back(problem.edges[e].ray, marginals.assignment[e]);
  }
  return out;
}

inline AssembledLoss assemble_loss(std::span<const Vec2> positions, const AssociationProblem& problem,
                                   const Marginals& marginals, std::span<const Ray> rays,
                                   const SensorParams& params, const PriorDensity& prior, int class_id = 0,
                                   const SensorConfig& cfg = {}) {
  if (positions.size() != problem.n_objects) throw InvariantError("assemble_loss: position count mismatch");
  if (rays.size() != problem.n_rays) throw InvariantError("assemble_loss: ray count mismatch");
  AssembledLoss out;
  out.object_loss.assign(positions.size(), 0.0);
  out.grad.assign(positions.size(), Vec2::Zero());
  out.hess.assign(positions.size(), Mat2::Zero());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (!all_finite(positions[i])) throw InvariantError("assemble_loss: non-finite position");
    const auto pr = log_prior(positions[i], prior, class_id);
    out.object_loss[i] = -pr.log_density;
    out.grad[i] = -pr.grad;
    out.hess[i] = -pr.hess;
  }
  const auto weighted = weighted_rays_by_object(problem, marginals);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (const auto& [j, w] : weighted[i]) {
      if (w == 0.0) continue;
      auto lf = try_log_f(rays[j], positions[i], params, cfg);
      if (!lf) {
        ++out.skipped_edges;
        continue;
      }
      out.object_loss[i] -= w * lf->log_density;
      out.grad[i] -= w * lf->grad_position;
      out.hess[i] -= w * lf->hessian_position;
    }
    out.loss += out.object_loss[i];
  }
  return out;
}

/// Regularized Newton step on every block. `loss_of(i, x)` evaluates object i's loss and
/// enables the halving line search; without it, loss fields stay zero and no fallback runs.
inline NewtonReport newton_step(std::span<const Vec2> positions, std::span<const Vec2> grad,
                                std::span<const Mat2> hess, const NewtonOptions& opt = {},
                                const std::function<double(std::size_t, const Vec2&)>& loss_of = {}) {
  if (grad.size() != positions.size() || hess.size() != positions.size()) {
    throw InvariantError("newton_step: size mismatch");
  }
  if (!(opt.trust_radius > 0.0) || !(opt.eig_floor >= 0.0)) {
    throw InvariantError("newton_step: trust_radius must be positive and eig_floor non-negative");
  }
  NewtonReport rep;
  rep.positions_new.assign(positions.begin(), positions.end());
  rep.step_norms.assign(positions.size(), 0.0);
  rep.regularizers.assign(positions.size(), 0.0);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const Vec2& g = grad[i];
    const Mat2& h = hess[i];
    if (!all_finite(g) || !h.allFinite()) throw InvariantError("newton_step: non-finite gradient or Hessian");
    const double lam_min = sym_eigenvalues(h).first;
    const double reg = std::max(0.0, opt.eig_floor - lam_min) + g.norm() / opt.trust_radius;
    rep.regularizers[i] = reg;
    const Mat2 h_reg = 0.5 * (h + h.transpose()) + reg * Mat2::Identity();
    const double det = h_reg(0, 0) * h_reg(1, 1) - h_reg(0, 1) * h_reg(1, 0);
    Vec2 step = Vec2::Zero();
    if (det > 0.0 && g.squaredNorm() > 0.0) {
      Mat2 inv;
      inv << h_reg(1, 1), -h_reg(0, 1), -h_reg(1, 0), h_reg(0, 0);
      step = -(inv * g) / det;
    }

    if (loss_of) {
      const double before = loss_of(i, positions[i]);
      double after = loss_of(i, positions[i] + step);
      if (opt.line_search) {
        int halvings = 0;
        while (!(after <= before) && halvings < opt.max_halvings) {
          step *= 0.5;
          after = loss_of(i, positions[i] + step);
          ++halvings;
        }
        if (!(after <= before)) {
          step.setZero();
          after = before;
        }
      }
      rep.loss_before += before;
      rep.loss_after += after;
    }
    rep.positions_new[i] = positions[i] + step;
    rep.step_norms[i] = step.norm();
  }
  return rep;
}

/// Solves H v = b for a symmetric block after flooring its eigenvalues.
inline Vec2 floored_solve(const Mat2& h, const Vec2& b, double eig_floor) {
  return posterior_covariance(h, eig_floor) * b;
}

}  // namespace raymap
