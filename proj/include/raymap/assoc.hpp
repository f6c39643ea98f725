#pragma once

// Soft data association between candidate objects and rays.
//
// The joint over existence e_i and assignments a_ij is
//
//   P(e, a) ∝ gamma(e, a) prod_i psi_i^{e_i} prod_ij psi_ij^{a_ij},
//
// where gamma enforces a_ij <= e_i and at most one object per ray (a ray with no
// object is clutter). run_bp approximates the marginals with loopy belief
// propagation; enumerate_exact computes them by brute force for small instances.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "raymap/domain.hpp"
#include "raymap/params.hpp"

namespace raymap {

/// Log-potentials below this are treated as exactly zero potentials.
inline constexpr double kLogPotentialFloor = -40.0;

struct AssociationEdge {
  std::size_t object = 0;
  std::size_t ray = 0;
  double log_psi = 0.0;
};

struct AssociationProblem {
  std::size_t n_objects = 0;
  std::size_t n_rays = 0;
  std::vector<AssociationEdge> edges;
  std::vector<double> log_psi_e;  // one per object

  void validate() const {
    if (log_psi_e.size() != n_objects) {
      throw InvariantError("AssociationProblem: log_psi_e size does not match n_objects");
    }
    for (double v : log_psi_e) {
      if (!std::isfinite(v)) throw InvariantError("AssociationProblem: non-finite existence potential");
    }
    std::vector<std::pair<std::size_t, std::size_t>> keys;
    keys.reserve(edges.size());
    for (const auto& e : edges) {
      if (e.object >= n_objects || e.ray >= n_rays) {
        throw InvariantError("AssociationProblem: edge index out of range");
      }
      if (std::isnan(e.log_psi) || e.log_psi == std::numeric_limits<double>::infinity()) {
        throw InvariantError("AssociationProblem: invalid edge potential");
      }
      keys.emplace_back(e.object, e.ray);
    }
    std::sort(keys.begin(), keys.end());
    if (std::adjacent_find(keys.begin(), keys.end()) != keys.end()) {
      throw InvariantError("AssociationProblem: duplicate (object, ray) edge");
    }
  }
};

struct Marginals {
  std::vector<double> existence;   // per object
  std::vector<double> assignment;  // per edge, same order as the problem's edges
  std::vector<double> null_mass;   // per ray
  bool converged = false;
  int iterations_run = 0;
};

struct BpOptions {
  int max_iters = 5;
  double damping = 0.0;
  double tol = 1e-6;
  /// Called with the current marginals after every iteration, if set.
  std::function<void(const Marginals&)> on_iteration;
};

namespace detail {

inline double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline double softplus(double x) {
  if (x == -std::numeric_limits<double>::infinity()) return 0.0;
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double floored(double log_psi) {
  return log_psi < kLogPotentialFloor ? -std::numeric_limits<double>::infinity() : log_psi;
}

/// Compressed adjacency: for each node, the indices of its incident edges.
struct Adjacency {
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> edges;

  template <typename KeyOf>
  static Adjacency build(std::size_t n_nodes, std::size_t n_edges, KeyOf key_of) {
    Adjacency adj;
    adj.offsets.assign(n_nodes + 1, 0);
    for (std::size_t e = 0; e < n_edges; ++e) ++adj.offsets[key_of(e) + 1];
    for (std::size_t n = 0; n < n_nodes; ++n) adj.offsets[n + 1] += adj.offsets[n];
    adj.edges.resize(n_edges);
    std::vector<std::size_t> cursor(adj.offsets.begin(), adj.offsets.end() - 1);
    for (std::size_t e = 0; e < n_edges; ++e) adj.edges[cursor[key_of(e)]++] = e;
    return adj;
  }

  std::size_t begin(std::size_t n) const { return offsets[n]; }
  std::size_t end(std::size_t n) const { return offsets[n + 1]; }
};

}  // namespace detail

/// Loopy belief propagation in the log domain with a synchronous schedule.
///
/// Messages: log_mu (existence -> edge) is log P(e_i = 1) with edge j excluded;
/// log_nu (edge -> existence) is log(1 + psi_ij / (1 + sum_{l != i} psi_lj mu_lj)).
inline Marginals run_bp(const AssociationProblem& problem, const BpOptions& opt = {}) {
  problem.validate();
  if (opt.max_iters < 1) throw InvariantError("run_bp: max_iters must be >= 1");
  if (!(opt.damping >= 0.0 && opt.damping < 1.0)) throw InvariantError("run_bp: damping outside [0, 1)");

  const std::size_t n_edges = problem.edges.size();
  const auto by_object = detail::Adjacency::build(
      problem.n_objects, n_edges, [&](std::size_t e) { return problem.edges[e].object; });
  const auto by_ray = detail::Adjacency::build(problem.n_rays, n_edges,
                                               [&](std::size_t e) { return problem.edges[e].ray; });

  std::vector<double> log_psi(n_edges);
  for (std::size_t e = 0; e < n_edges; ++e) log_psi[e] = detail::floored(problem.edges[e].log_psi);

  std::vector<double> log_nu(n_edges, 0.0);
  std::vector<double> log_mu(n_edges, 0.0);
  std::vector<double> prefix, suffix;
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  auto blend = [&](double fresh, double old) {
    return opt.damping == 0.0 ? fresh : (1.0 - opt.damping) * fresh + opt.damping * old;
  };

  Marginals out;
  out.existence.assign(problem.n_objects, 0.0);
  out.assignment.assign(n_edges, 0.0);
  out.null_mass.assign(problem.n_rays, 1.0);

  auto assemble = [&]() {
    for (std::size_t i = 0; i < problem.n_objects; ++i) {
      double s = problem.log_psi_e[i];
      for (std::size_t k = by_object.begin(i); k < by_object.end(i); ++k) s += log_nu[by_object.edges[k]];
      out.existence[i] = sigmoid(s);
    }
    for (std::size_t j = 0; j < problem.n_rays; ++j) {
      double total = 0.0;  // log(1 + sum psi mu)
      for (std::size_t k = by_ray.begin(j); k < by_ray.end(j); ++k) {
        const std::size_t e = by_ray.edges[k];
        total = detail::log_add_exp(total, log_psi[e] + log_mu[e]);
      }
      for (std::size_t k = by_ray.begin(j); k < by_ray.end(j); ++k) {
        const std::size_t e = by_ray.edges[k];
        out.assignment[e] = std::exp(log_psi[e] + log_mu[e] - total);
      }
      out.null_mass[j] = std::exp(-total);
    }
  };

  for (int it = 0; it < opt.max_iters; ++it) {
    double change = 0.0;

    // existence -> edge
    for (std::size_t i = 0; i < problem.n_objects; ++i) {
      double s = problem.log_psi_e[i];
      for (std::size_t k = by_object.begin(i); k < by_object.end(i); ++k) s += log_nu[by_object.edges[k]];
      for (std::size_t k = by_object.begin(i); k < by_object.end(i); ++k) {
        const std::size_t e = by_object.edges[k];
        const double fresh = blend(log_sigmoid(s - log_nu[e]), log_mu[e]);
        change = std::max(change, std::abs(fresh - log_mu[e]));
        log_mu[e] = fresh;
      }
    }

    // edge -> existence, excluding each edge's own term via prefix/suffix sums
    for (std::size_t j = 0; j < problem.n_rays; ++j) {
      const std::size_t b = by_ray.begin(j);
      const std::size_t d = by_ray.end(j) - b;
      prefix.assign(d + 1, 0.0);
      suffix.assign(d + 1, kNegInf);
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t e = by_ray.edges[b + k];
        prefix[k + 1] = detail::log_add_exp(prefix[k], log_psi[e] + log_mu[e]);
      }
      for (std::size_t k = d; k-- > 0;) {
        const std::size_t e = by_ray.edges[b + k];
        suffix[k] = detail::log_add_exp(suffix[k + 1], log_psi[e] + log_mu[e]);
      }
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t e = by_ray.edges[b + k];
        const double others = detail::log_add_exp(prefix[k], suffix[k + 1]);
        const double fresh = blend(detail::softplus(log_psi[e] - others), log_nu[e]);
        change = std::max(change, std::abs(fresh - log_nu[e]));
        log_nu[e] = fresh;
      }
    }

    out.iterations_run = it + 1;
    if (opt.on_iteration) {
      assemble();
      opt.on_iteration(out);
    }
    if (change < opt.tol) {
      out.converged = true;
      break;
    }
  }
  assemble();
  return out;
}

/// Exact marginals by brute-force enumeration of every feasible (e, a).
inline Marginals enumerate_exact(const AssociationProblem& problem) {
  problem.validate();
  if (problem.n_objects > 4 || problem.n_rays > 8) {
    throw InvariantError("enumerate_exact: instance too large (limit 4 objects, 8 rays)");
  }
  const std::size_t n = problem.n_objects;
  const std::size_t m = problem.n_rays;

  std::vector<std::vector<std::size_t>> ray_edges(m);
  for (std::size_t e = 0; e < problem.edges.size(); ++e) ray_edges[problem.edges[e].ray].push_back(e);

  std::vector<double> log_psi(problem.edges.size());
  for (std::size_t e = 0; e < log_psi.size(); ++e) log_psi[e] = detail::floored(problem.edges[e].log_psi);

  // All weights are scaled by exp(-ref) <= their maximum so none overflow.
  double ref = 0.0;
  for (double v : problem.log_psi_e) ref += std::max(0.0, v);
  for (std::size_t j = 0; j < m; ++j) {
    double best = 0.0;
    for (auto e : ray_edges[j]) best = std::max(best, log_psi[e]);
    ref += best;
  }

  long double z = 0.0L;
  std::vector<long double> z_exist(n, 0.0L), z_assign(problem.edges.size(), 0.0L), z_null(m, 0.0L);
  std::vector<std::size_t> choice(m);  // 0 = null, k > 0 = ray_edges[j][k - 1]

  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    std::fill(choice.begin(), choice.end(), 0);
    while (true) {
      bool feasible = true;
      double log_w = -ref;
      for (std::size_t i = 0; i < n; ++i) {
        if (mask >> i & 1U) log_w += problem.log_psi_e[i];
      }
      for (std::size_t j = 0; j < m && feasible; ++j) {
        if (choice[j] == 0) continue;
        const std::size_t e = ray_edges[j][choice[j] - 1];
        if (!(mask >> problem.edges[e].object & 1U)) feasible = false;
        log_w += log_psi[e];
      }
      if (feasible) {
        const long double w = std::exp(static_cast<long double>(log_w));
        z += w;
        for (std::size_t i = 0; i < n; ++i) {
          if (mask >> i & 1U) z_exist[i] += w;
        }
        for (std::size_t j = 0; j < m; ++j) {
          if (choice[j] == 0) {
            z_null[j] += w;
          } else {
            z_assign[ray_edges[j][choice[j] - 1]] += w;
          }
        }
      }
      // mixed-radix increment over the rays' options
      std::size_t j = 0;
      for (; j < m; ++j) {
        if (++choice[j] <= ray_edges[j].size()) break;
        choice[j] = 0;
      }
      if (j == m) break;
    }
  }

  Marginals out;
  out.converged = true;
  out.existence.resize(n);
  out.assignment.resize(problem.edges.size());
  out.null_mass.resize(m);
  for (std::size_t i = 0; i < n; ++i) out.existence[i] = static_cast<double>(z_exist[i] / z);
  for (std::size_t e = 0; e < z_assign.size(); ++e) out.assignment[e] = static_cast<double>(z_assign[e] / z);
  for (std::size_t j = 0; j < m; ++j) out.null_mass[j] = static_cast<double>(z_null[j] / z);
  return out;
}

}  // namespace raymap
