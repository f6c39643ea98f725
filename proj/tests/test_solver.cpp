#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "raymap/solver.hpp"
#include "test_util.hpp"

namespace raymap {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Scene {
  std::vector<Vec2> positions;
  std::vector<Ray> rays;
  AssociationProblem problem;
  Marginals marginals;
};

/// Objects with a few rays each pointing roughly at them, random assignment weights.
Scene random_scene(std::mt19937_64& rng, std::size_t n_objects, std::size_t rays_per_object) {
  Scene s;
  for (std::size_t i = 0; i < n_objects; ++i) {
    const Vec2 x(testing::uniform(rng, -300, 300), testing::uniform(rng, -300, 300));
    s.positions.push_back(x);
    for (std::size_t k = 0; k < rays_per_object; ++k) {
      const double r = testing::uniform(rng, 5, 80);
      const double a = testing::uniform(rng, -kPi, kPi);
      const Vec2 origin = x + r * Vec2(std::cos(a), std::sin(a));
      const double bearing = angle_of(x - origin) + testing::uniform(rng, -0.2, 0.2);
      s.rays.push_back(make_ray(origin, bearing, testing::uniform(rng, 0.3, 0.9), 1, "f"));
    }
  }
  s.problem.n_objects = n_objects;
  s.problem.n_rays = s.rays.size();
  s.problem.log_psi_e.assign(n_objects, 0.0);
  for (std::size_t i = 0; i < n_objects; ++i) {
    for (std::size_t j = 0; j < s.rays.size(); ++j) {
      if (j / rays_per_object == i || testing::uniform(rng, 0, 1) < 0.2) {
        s.problem.edges.push_back({i, j, 0.0});
        s.marginals.assignment.push_back(testing::uniform(rng, 0, 1));
      }
    }
  }
  return s;
}

TEST(AssembleLoss, ZeroWeightsUniformPrior) {
  std::mt19937_64 rng(1);
  auto s = random_scene(rng, 3, 4);
  for (auto& a : s.marginals.assignment) a = 0.0;
  const auto out = assemble_loss(s.positions, s.problem, s.marginals, s.rays, SensorParams{},
                                 PriorDensity::uniform(1e6));
  for (const auto& g : out.grad) EXPECT_EQ(g, Vec2::Zero());
  EXPECT_NEAR(out.loss, 3 * std::log(1e6), 1e-9);
}

TEST(AssembleLoss, SingleEdgeMatchesLogF) {
  const Ray ray = make_ray(Vec2(0, 0), 0.3, 0.8, 1, "f");
  const Vec2 x(20, 8);
  AssociationProblem p{1, 1, {{0, 0, 0.0}}, {0.0}};
  Marginals m;
  m.assignment = {1.0};
  const SensorParams params;
  const std::vector<Ray> rays{ray};
  const std::vector<Vec2> xs{x};
  const auto out = assemble_loss(xs, p, m, rays, params, PriorDensity::uniform(1e6));
  const auto lf = log_f(ray, x, params);
  EXPECT_EQ(out.grad[0], -lf.grad_position);
  EXPECT_EQ(out.hess[0], -lf.hessian_position);
}

TEST(AssembleLoss, BlocksAreIndependent) {
  std::mt19937_64 rng(2);
  const SensorParams params;
  const auto prior = PriorDensity::uniform(1e6);
  auto a = random_scene(rng, 1, 5);
  auto b = random_scene(rng, 1, 4);
  Scene joint;
  joint.positions = {a.positions[0], b.positions[0]};
  joint.rays = a.rays;
  joint.rays.insert(joint.rays.end(), b.rays.begin(), b.rays.end());
  joint.problem.n_objects = 2;
  joint.problem.n_rays = joint.rays.size();
  joint.problem.log_psi_e = {0.0, 0.0};
  joint.problem.edges = a.problem.edges;
  joint.marginals.assignment = a.marginals.assignment;
  for (std::size_t e = 0; e < b.problem.edges.size(); ++e) {
    auto edge = b.problem.edges[e];
    edge.object = 1;
    edge.ray += a.rays.size();
    joint.problem.edges.push_back(edge);
    joint.marginals.assignment.push_back(b.marginals.assignment[e]);
  }
  const auto ja = assemble_loss(a.positions, a.problem, a.marginals, a.rays, params, prior);
  const auto jb = assemble_loss(b.positions, b.problem, b.marginals, b.rays, params, prior);
  const auto jj = assemble_loss(joint.positions, joint.problem, joint.marginals, joint.rays, params, prior);
  EXPECT_EQ(jj.grad[0], ja.grad[0]);
  EXPECT_EQ(jj.hess[0], ja.hess[0]);
  EXPECT_EQ(jj.grad[1], jb.grad[0]);
  EXPECT_EQ(jj.hess[1], jb.hess[0]);
  EXPECT_NEAR(jj.loss, ja.loss + jb.loss, 1e-9);

  const auto sa = newton_step(a.positions, ja.grad, ja.hess);
  const auto sb = newton_step(b.positions, jb.grad, jb.hess);
  const auto sj = newton_step(joint.positions, jj.grad, jj.hess);
  EXPECT_LT((sj.positions_new[0] - sa.positions_new[0]).norm(), 1e-12);
  EXPECT_LT((sj.positions_new[1] - sb.positions_new[0]).norm(), 1e-12);
}

TEST(AssembleLoss, DerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  const auto prior = PriorDensity::spike_slab(1e6, {Vec2(0, 0), Vec2(100, -50)}, 40.0, {{1, 0.5}});
  for (int t = 0; t < 40; ++t) {
    auto s = random_scene(rng, 2, 4);
    const auto params = testing::random_params(rng);
    const auto out = assemble_loss(s.positions, s.problem, s.marginals, s.rays, params, prior, 1);
    for (std::size_t i = 0; i < s.positions.size(); ++i) {
      auto at = [&](const Vec2& x) {
        auto pos = s.positions;
        pos[i] = x;
        return assemble_loss(pos, s.problem, s.marginals, s.rays, params, prior, 1);
      };
      const std::function<double(const Vec2&)> f = [&](const Vec2& x) { return at(x).loss; };
      const std::function<Vec2(const Vec2&)> g = [&](const Vec2& x) { return at(x).grad[i]; };
      const Vec2 scale(1.0, 1.0);
      EXPECT_LT(testing::rel_error(out.grad[i], testing::fd_gradient<2>(f, s.positions[i], scale)), 1e-4);
      EXPECT_LT(testing::rel_error(out.hess[i], testing::fd_jacobian<2, 2>(g, s.positions[i], scale)), 1e-3);
    }
  }
}

TEST(AssembleLoss, CountsSkippedEdges) {
  const std::vector<Ray> rays{make_ray(Vec2(0, 0), 0.0, 0.5, 1, "a"), make_ray(Vec2(30, 0), kPi, 0.5, 1, "b")};
  const std::vector<Vec2> xs{Vec2(0.1, 0.1)};
  AssociationProblem p{1, 2, {{0, 0, 0.0}, {0, 1, 0.0}}, {0.0}};
  Marginals m;
  m.assignment = {0.5, 0.5};
  const auto out = assemble_loss(xs, p, m, rays, SensorParams{}, PriorDensity::uniform(1e6));
  EXPECT_EQ(out.skipped_edges, 1u);
}

TEST(AssembleLoss, RejectsMismatch) {
  AssociationProblem p{1, 0, {}, {0.0}};
  Marginals m;
  const std::vector<Vec2> two{Vec2(0, 0), Vec2(1, 1)};
  EXPECT_THROW(assemble_loss(two, p, m, {}, SensorParams{}, PriorDensity::uniform(1e6)), InvariantError);
  const std::vector<Vec2> bad{Vec2(NAN, 0)};
  EXPECT_THROW(assemble_loss(bad, p, m, {}, SensorParams{}, PriorDensity::uniform(1e6)), InvariantError);
}

TEST(NewtonStep, QuadraticOneStep) {
  const std::vector<Vec2> x{Vec2(0, 0)};
  const std::vector<Vec2> g{Vec2(-3, 1)};  // grad of 0.5 |x - (3, -1)|^2 at 0
  const std::vector<Mat2> h{Mat2::Identity()};
  const auto rep = newton_step(x, g, h, {.trust_radius = kInf, .eig_floor = 0.0});
  EXPECT_EQ(rep.positions_new[0], Vec2(3, -1));
}

TEST(NewtonStep, FlatHessianStepsTrustRadius) {
  for (double r : {0.5, 2.0, 10.0}) {
    const std::vector<Vec2> x{Vec2(1, 1)};
    const std::vector<Vec2> g{Vec2(1, 0)};
    const std::vector<Mat2> h{Mat2::Zero()};
    const auto rep = newton_step(x, g, h, {.trust_radius = r, .eig_floor = 0.0});
    EXPECT_DOUBLE_EQ(rep.positions_new[0][0], 1.0 - r);
    EXPECT_EQ(rep.positions_new[0][1], 1.0);
    EXPECT_DOUBLE_EQ(rep.step_norms[0], r);
  }
}

TEST(NewtonStep, IndefiniteShift) {
  Mat2 h;
  h << 1, 0, 0, -2;
  const std::vector<Vec2> x{Vec2(0, 0)};
  const std::vector<Vec2> g{Vec2(3.1, 0.1)};
  const std::vector<Mat2> hs{h};
  const auto rep = newton_step(x, g, hs, {.trust_radius = kInf, .eig_floor = 0.1});
  EXPECT_NEAR(rep.regularizers[0], 2.1, 1e-15);
  // H_reg = diag(3.1, 0.1), so the step is -(1, 1).
  EXPECT_NEAR(rep.positions_new[0][0], -1.0, 1e-14);
  EXPECT_NEAR(rep.positions_new[0][1], -1.0, 1e-14);
}

TEST(NewtonStep, PositiveDefiniteQuadraticsExact) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    Eigen::Matrix2d a = Eigen::Matrix2d::Random();
    const Mat2 h = a * a.transpose() + 0.1 * Mat2::Identity();
    const Vec2 target(testing::uniform(rng, -50, 50), testing::uniform(rng, -50, 50));
    const Vec2 x(testing::uniform(rng, -50, 50), testing::uniform(rng, -50, 50));
    const std::vector<Vec2> xs{x};
    const std::vector<Vec2> gs{h * (x - target)};
    const std::vector<Mat2> hs{h};
    const auto rep = newton_step(xs, gs, hs, {.trust_radius = kInf, .eig_floor = 0.0});
    EXPECT_LT((rep.positions_new[0] - target).norm(), 1e-9);
  }
}

TEST(NewtonStep, LineSearchNeverIncreasesLoss) {
  std::mt19937_64 rng(5);
  const auto prior = PriorDensity::uniform(1e6);
  for (int t = 0; t < 60; ++t) {
    auto s = random_scene(rng, 3, 3);
    const auto params = testing::random_params(rng);
    for (auto& p : s.positions) p += Vec2(testing::uniform(rng, -15, 15), testing::uniform(rng, -15, 15));
    const auto out = assemble_loss(s.positions, s.problem, s.marginals, s.rays, params, prior);
    const auto weighted = weighted_rays_by_object(s.problem, s.marginals);
    auto loss_of = [&](std::size_t i, const Vec2& x) {
      return object_loss(x, weighted[i], s.rays, params, prior, 0, true);
    };
    const auto rep = newton_step(s.positions, out.grad, out.hess, {}, loss_of);
    EXPECT_LE(rep.loss_after, rep.loss_before + 1e-9);
    EXPECT_NEAR(rep.loss_before, out.loss, 1e-8 * std::abs(out.loss));
  }
}

TEST(NewtonStep, RejectsNonFinite) {
  const std::vector<Vec2> x{Vec2(0, 0)};
  const std::vector<Vec2> g{Vec2(NAN, 0)};
  const std::vector<Mat2> h{Mat2::Identity()};
  EXPECT_THROW(newton_step(x, g, h), InvariantError);
}

TEST(PosteriorCovariance, Examples) {
  EXPECT_LT((posterior_covariance(Mat2::Identity(), 1e-3) - Mat2::Identity()).norm(), 1e-15);
  Mat2 h;
  h << 4, 0, 0, 1e-4;
  Mat2 expected;
  expected << 0.25, 0, 0, 100;
  EXPECT_LT((posterior_covariance(h, 0.01) - expected).norm(), 1e-12);
}

TEST(PosteriorCovariance, RotationConjugation) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 100; ++t) {
    const double a = testing::uniform(rng, -kPi, kPi);
    Mat2 rot;
    rot << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    const double l1 = testing::uniform(rng, 1e-4, 10), l2 = testing::uniform(rng, 1e-4, 10);
    const Mat2 h = rot * Vec2(l1, l2).asDiagonal() * rot.transpose();
    const Mat2 cov = posterior_covariance(h, 0.01);
    const Mat2 expected = rot * Vec2(1 / std::max(l1, 0.01), 1 / std::max(l2, 0.01)).asDiagonal() * rot.transpose();
    EXPECT_LT((cov - expected).norm(), 1e-9 * expected.norm());
    EXPECT_NEAR(cov(0, 1), cov(1, 0), 1e-15 * expected.norm());
  }
}

TEST(SymEigen, MatchesEigen) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 100; ++t) {
    Mat2 h;
    const double b = testing::uniform(rng, -5, 5);
    h << testing::uniform(rng, -5, 5), b, b, testing::uniform(rng, -5, 5);
    const auto [lo, hi] = sym_eigenvalues(h);
    Eigen::SelfAdjointEigenSolver<Mat2> es(h);
    EXPECT_NEAR(lo, es.eigenvalues()[0], 1e-12);
    EXPECT_NEAR(hi, es.eigenvalues()[1], 1e-12);
  }
}

}  // namespace
}  // namespace raymap
