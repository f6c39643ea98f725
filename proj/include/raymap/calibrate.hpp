#pragma once

// Variational calibration of per-class sensor parameters. q (assignment and existence
// marginals) and object positions come from the solver and are held fixed while the
// ELBO is differentiated in the unconstrained parameter coordinates.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "raymap/cluster.hpp"
#include "raymap/detail/rng.hpp"

namespace raymap {

struct TrainConfig {
  double learning_rate = 0.001;
  double decay = 0.7;  // multiplies the learning rate after every epoch
  int steps = 200;
  std::uint64_t seed = 0;
  bool detach_inner = true;
  /// Also differentiate positions through the final Newton solve (H dx/dtheta = -dg/dtheta).
  bool implicit_positions = false;
  /// Coordinates left out of the update stay bitwise fixed.
  std::array<bool, kNumParams> trainable{true, true, true, true, true, true, true, true};

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw InvariantError("TrainConfig: learning_rate must be non-negative");
    }
    if (!(decay > 0.0 && decay <= 1.0)) throw InvariantError("TrainConfig: decay must be in (0, 1]");
    if (steps < 0) throw InvariantError("TrainConfig: steps must be non-negative");
    if (!detach_inner) throw InvariantError("TrainConfig: only detached inner solves are supported");
  }
};

struct ElboReport {
  double elbo = 0.0;
  double data_term = 0.0;
  double entropy_term = 0.0;
  double prior_term = 0.0;
  ParamVec grad_params = ParamVec::Zero();
};

namespace detail {

inline double xlogx(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

inline void check_marginals(const AssociationProblem& problem, const Marginals& m) {
  if (m.existence.size() != problem.n_objects || m.assignment.size() != problem.edges.size() ||
      m.null_mass.size() != problem.n_rays) {
    throw InvariantError("elbo: marginals do not match the association problem");
  }
  std::vector<double> total(m.null_mass);
  for (std::size_t e = 0; e < problem.edges.size(); ++e) total[problem.edges[e].ray] += m.assignment[e];
  for (double t : total) {
    if (!(std::abs(t - 1.0) < 1e-6)) throw InvariantError("elbo: marginals are not normalized per ray");
  }
}

}  // namespace detail

/// ELBO of the frozen q in `result` under `params`. With `implicit_positions`, grad_params
/// also carries the response of the M-step optimum to the parameters.
inline ElboReport elbo(const SceneBatch& batch, const ClusterResult& result, const SensorParams& params,
                       const PriorDensity& prior, bool implicit_positions = false, const SensorConfig& cfg = {}) {
  const auto& problem = result.problem;
  const auto& m = result.marginals;
  detail::check_marginals(problem, m);
  if (result.hypotheses.size() != problem.n_objects || batch.rays.size() != problem.n_rays) {
    throw InvariantError("elbo: result does not match the batch");
  }
  ElboReport out;
  if (problem.n_objects == 0 && problem.n_rays == 0) return out;
  const int class_id = batch.rays.empty() ? 0 : batch.rays.front().class_id;
  const std::span<const Ray> rays(batch.rays);

  std::vector<LikelihoodEval> existence(problem.n_objects);
  for (std::size_t i = 0; i < problem.n_objects; ++i) {
    existence[i].log_density = params.existence_logit();
    existence[i].grad_params[kExistenceLogit] = 1.0;
  }
  std::vector<Vec2> d_elbo_dx(problem.n_objects, Vec2::Zero());
  std::vector<ParamPositionJacobian> mixed(problem.n_objects, ParamPositionJacobian::Zero());

  for (std::size_t e = 0; e < problem.edges.size(); ++e) {
    const auto& edge = problem.edges[e];
    const Vec2& x = result.hypotheses[edge.object].position;
    const auto pot = try_assignment_potential(rays[edge.ray], x, params, cfg);
    const auto miss = try_log_miss_prob(rays[edge.ray], x, params, cfg);
    if (!pot || !miss) continue;
    const double a = m.assignment[e];
    out.data_term += a * pot->composed.log_density;
    out.grad_params += a * pot->composed.grad_params;
    existence[edge.object] += *miss;
    if (implicit_positions && a != 0.0) {
      d_elbo_dx[edge.object] += a * pot->composed.grad_position;
      mixed[edge.object] += a * log_f_mixed(rays[edge.ray], x, params, cfg);
    }
  }

  for (std::size_t i = 0; i < problem.n_objects; ++i) {
    const double eb = m.existence[i];
    const double l = existence[i].log_density;
    out.data_term += eb * log_sigmoid(l) + (1.0 - eb) * log_sigmoid(-l);
    const double w = eb - sigmoid(l);
    out.grad_params += w * existence[i].grad_params;
    const auto pr = log_prior(result.hypotheses[i].position, prior, class_id);
    out.prior_term += eb * pr.log_density;
    if (implicit_positions) {
      d_elbo_dx[i] += w * existence[i].grad_position + eb * pr.grad;
      if (i >= result.hessians.size()) throw InvariantError("elbo: implicit gradient needs M-step Hessians");
      // g = -sum a grad_x log f - grad log prior, so dg/dtheta = -mixed^T and
      // dx/dtheta = H^-1 mixed^T.
      const Mat2 cov = posterior_covariance(result.hessians[i], NewtonOptions{}.eig_floor);
      out.grad_params += mixed[i] * (cov * d_elbo_dx[i]);
    }
  }

  for (double a : m.assignment) out.entropy_term -= detail::xlogx(a);
  for (double n : m.null_mass) out.entropy_term -= detail::xlogx(n);
  for (double eb : m.existence) out.entropy_term -= detail::xlogx(eb) + detail::xlogx(1.0 - eb);

  out.elbo = out.data_term + out.entropy_term + out.prior_term;
  return out;
}

struct AdamState {
  Eigen::VectorXd params;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  int t = 0;

  static AdamState start(const Eigen::VectorXd& params) {
    return {params, Eigen::VectorXd::Zero(params.size()), Eigen::VectorXd::Zero(params.size()), 0};
  }
};

/// One bias-corrected Adam step that descends `grad`.
inline AdamState adam_step(AdamState state, const Eigen::VectorXd& grad, double learning_rate,
                           double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (grad.size() != state.params.size() || state.m.size() != state.params.size() ||
      state.v.size() != state.params.size()) {
    throw InvariantError("adam_step: shape mismatch");
  }
  state.t += 1;
  state.m = beta1 * state.m + (1.0 - beta1) * grad;
  state.v = beta2 * state.v + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, state.t);
  const double c2 = 1.0 - std::pow(beta2, state.t);
  for (Eigen::Index k = 0; k < grad.size(); ++k) {
    const double mh = state.m[k] / c1;
    const double vh = state.v[k] / c2;
    state.params[k] -= learning_rate * mh / (std::sqrt(vh) + eps);
  }
  return state;
}

struct TraceEntry {
  int step = 0;
  int class_id = 0;
  std::size_t batch = 0;
  int epoch = 0;
  double learning_rate = 0.0;
  double elbo = 0.0;
  bool skipped = false;
  std::string note;
};

struct TrainResult {
  std::map<int, SensorParams> params;
  std::map<int, AdamState> optimizer;
  std::vector<TraceEntry> trace;
};

/// Clamps hypotheses to the labeled objects and runs BP only.
inline ClusterResult truth_result(const SceneBatch& batch, const SensorParams& params, const PriorDensity& prior,
                                  const EmConfig& config) {
  std::vector<Vec2> positions;
  for (const auto& t : *batch.ground_truth) positions.push_back(t.position);
  const int class_id = batch.rays.empty() ? 0 : batch.rays.front().class_id;
  auto round = evidence_round(positions, batch.rays, params, prior, class_id, config, false);
  ClusterResult result;
  result.hypotheses = detail::hypotheses_from(positions, round.problem, round.marginals, round.loss.hess,
                                              config.newton.eig_floor);
  result.problem = std::move(round.problem);
  result.marginals = std::move(round.marginals);
  result.hessians = std::move(round.loss.hess);
  return result;
}

/// Stochastic variational training. Each class has its own shuffled batch order and Adam
/// state, seeded from (seed, class id), so classes never influence each other.
inline TrainResult train(std::span<const SceneBatch> batches, const std::map<int, SensorParams>& init,
                         const PriorDensity& prior, const EmConfig& em_config, const TrainConfig& config) {
  config.validate();
  em_config.validate();
  if (batches.empty()) throw InvariantError("train: no batches");
  TrainResult out;
  for (const auto& [cls, start] : init) {
    std::vector<SceneBatch> own;
    std::vector<std::size_t> source;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      auto sub = batches[b].only_class(cls);
      if (sub.rays.empty()) continue;
      own.push_back(std::move(sub));
      source.push_back(b);
    }
    if (own.empty()) throw InvariantError("train: no batch has rays of class " + std::to_string(cls));

    auto rng = detail::stream(config.seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(cls)) + 1000);
    AdamState state = AdamState::start(start.unconstrained());
    std::vector<std::size_t> order(own.size());
    double lr = config.learning_rate;
    int epoch = 0;
    std::size_t cursor = order.size();
    for (int step = 0; step < config.steps; ++step) {
      if (cursor == order.size()) {
        if (step > 0) {
          lr *= config.decay;
          ++epoch;
        }
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t b = order[cursor++];
      const SceneBatch& batch = own[b];
      const SensorParams current = SensorParams::from_unconstrained(state.params);

      TraceEntry entry{step, cls, source[b], epoch, lr, 0.0, false, {}};
      const ClusterResult result = batch.ground_truth ? truth_result(batch, current, prior, em_config)
                                                      : run_em(batch, current, prior, em_config);
      const auto report = elbo(batch, result, current, prior, config.implicit_positions, em_config.sensor);
      entry.elbo = report.elbo;
      if (!std::isfinite(report.elbo) || !report.grad_params.allFinite()) {
        entry.skipped = true;
        entry.note = "non-finite ELBO on batch " + std::to_string(source[b]);
        out.trace.push_back(entry);
        continue;
      }
      Eigen::VectorXd grad = -report.grad_params;
      for (int k = 0; k < kNumParams; ++k) {
        if (!config.trainable[static_cast<std::size_t>(k)]) grad[k] = 0.0;
      }
      state = adam_step(std::move(state), grad, lr);
      out.trace.push_back(entry);
    }
    out.params.emplace(cls, SensorParams::from_unconstrained(state.params));
    out.optimizer.emplace(cls, std::move(state));
  }
  return out;
}

}  // namespace raymap
