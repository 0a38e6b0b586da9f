#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "lqi/errors.hpp"
#include "lqi/flow.hpp"
#include "lqi/param.hpp"
#include "lqi/protocol.hpp"
#include "oracles.hpp"

using namespace lqi;

namespace {

Mat row(std::initializer_list<double> v) {
  Mat K(1, static_cast<Index>(v.size()));
  Index j = 0;
  for (double x : v) K(0, j++) = x;
  return K;
}

/// Closed loop [[-1, k], [-1, 0]] of x' = -x + u, y = x under K = [0, -k], Qa = I, R = 1.
/// Solving the 2x2 Lyapunov equation by hand gives tr P = 1 + 1/k + 3k/2 + k^2/2.
double scalar_cost(double k) { return 1.0 + 1.0 / k + 1.5 * k + 0.5 * k * k; }
double scalar_cost_slope(double k) { return -1.0 / (k * k) + 1.5 + k; }

LtiModel scalar_plant() { return LtiModel(Mat::Constant(1, 1, -1.0), Mat::Ones(1, 1), Mat::Ones(1, 1)); }

FlowOptions tight_flow() {
  FlowOptions f;
  f.grad_tol = 1e-11;
  f.horizon = 1e12;
  f.max_steps = 200000;
  f.sample_every = 10;
  return f;
}

void expect_valid_trajectory(const FlowTrajectory& traj) {
  ASSERT_FALSE(traj.samples.empty());
  for (size_t i = 0; i < traj.samples.size(); ++i) {
    const auto& s = traj.samples[i];
    EXPECT_TRUE(s.G.allFinite());
    if (i > 0) {
      const double prev = traj.samples[i - 1].cost;
      EXPECT_LE(s.cost, prev + 1e-10 * std::abs(prev)) << "sample " << i;
      EXPECT_GE(s.t, traj.samples[i - 1].t);
    }
  }
}

}  // namespace

TEST(Projection, OrthonormalRows) {
  CovariancePack pack;
  pack.n = 2;
  pack.m = 2;
  pack.p = 1;
  pack.Xbar = Mat::Zero(2, 4);
  pack.Xbar.leftCols(2).setIdentity();
  const Mat Pi = projection_pi(pack);
  Mat expected = Mat::Zero(4, 4);
  expected.bottomRightCorner(2, 2).setIdentity();
  EXPECT_LE((Pi - expected).norm(), 1e-14);
}

TEST(Projection, RandomPackProperties) {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 30; ++trial) {
    const auto [n, m, p] = oracle::random_dims(rng);
    const CovariancePack pack =
        fixture::random_pack(rng, oracle::random_plant(rng, n, m, p), SamplingVariant::kIntegral);
    const Mat Pi = projection_pi(pack);
    EXPECT_LE((Pi - Pi.transpose()).norm(), 1e-14);
    EXPECT_LE((Pi * Pi - Pi).norm(), 1e-10);
    EXPECT_NEAR(Pi.trace(), static_cast<double>(m), 1e-10);
    EXPECT_LE((Pi * pack.Xbar.transpose()).norm(), 1e-10 * (1.0 + pack.Xbar.norm()));
    Eigen::SelfAdjointEigenSolver<Mat> es(Pi);
    for (Index i = 0; i < es.eigenvalues().size(); ++i) {
      const double l = es.eigenvalues()(i);
      EXPECT_LT(std::min(std::abs(l), std::abs(l - 1.0)), 1e-10);
    }
  }
}

TEST(Projection, DguTraceIsOne) {
  EXPECT_NEAR(projection_pi(fixture::dgu_pack(7)).trace(), 1.0, 1e-10);
}

TEST(Projection, RankDeficientXbar) {
  CovariancePack pack;
  pack.n = 2;
  pack.m = 1;
  pack.p = 1;
  pack.Xbar = Mat::Zero(2, 3);
  pack.Xbar(0, 0) = 1.0;
  pack.Xbar(1, 0) = 2.0;
  EXPECT_THROW(projection_pi(pack), RankError);
}

TEST(Cost, ScalarClosedForm) {
  const LtiModel model = scalar_plant();
  const AugmentedModel aug = augment(model);
  const WeightSpec w = fixture::identity_weights(model);
  std::mt19937_64 rng(31);
  const PackRef pk = share(fixture::random_pack(rng, model, SamplingVariant::kIntegral));
  for (double k : {0.3, 1.0, 2.5}) {
    const Mat K = row({0.0, -k});
    const Mat P = oracle::lyapunov_kron(aug.Aa - aug.Ba * K, w.Qa() + K.transpose() * K);
    EXPECT_NEAR(P.trace(), scalar_cost(k), 1e-12 * scalar_cost(k));
    EXPECT_NEAR(cost_fG(gain_to_parameterizer(K, pk), w), scalar_cost(k), 1e-9 * scalar_cost(k));
    EXPECT_NEAR(model_based_cost(K, aug, w), scalar_cost(k), 1e-12 * scalar_cost(k));
    // dK/dk = [0, -1]
    EXPECT_NEAR(-model_based_gradient(K, aug, w)(0, 1), scalar_cost_slope(k), 1e-10 * scalar_cost(k));
  }
}

TEST(Cost, MatchesModelLyapunovTrace) {
  std::mt19937_64 rng(37);
  for (int trial = 0; trial < 40; ++trial) {
    const auto [model, pack] = fixture::conditioned_case(rng);
    const Index n = model.n(), m = model.m(), p = model.p();
    const WeightSpec w(oracle::random_spd(rng, n), oracle::random_spd(rng, p), oracle::random_spd(rng, m));
    const AugmentedModel aug = augment(model);
    const Mat K = fixture::random_stabilizing_gain(rng, model);
    const PackRef pk = share(pack);
    const Mat Acl = aug.Aa - aug.Ba * K;
    const double fK = model_based_cost(K, aug, w);
    EXPECT_NEAR(cost_fG(gain_to_parameterizer(K, pk), w), fK, 1e-9 * (1.0 + fK)) << "trial " << trial;
    // the Kronecker route is only as accurate as its operator's conditioning
    const Mat I = Mat::Identity(Acl.rows(), Acl.cols());
    const Mat L = oracle::kron(I, Acl.transpose()) + oracle::kron(Acl.transpose(), I);
    Eigen::JacobiSVD<Mat> svd(L);
    const double kappa = svd.singularValues()(0) / svd.singularValues().tail(1)(0);
    const double f_oracle = oracle::lyapunov_kron(Acl, w.Qa() + K.transpose() * w.R() * K).trace();
    EXPECT_NEAR(f_oracle, fK, 1e-14 * kappa * (1.0 + fK)) << "trial " << trial;
  }
}

TEST(Cost, OutsideDomain) {
  const LtiModel model = scalar_plant();
  const AugmentedModel aug = augment(model);
  const WeightSpec w = fixture::identity_weights(model);
  std::mt19937_64 rng(41);
  const PackRef pk = share(fixture::random_pack(rng, model, SamplingVariant::kIntegral));
  const Mat bad = row({0.0, 1.0});  // integrator with positive feedback
  EXPECT_THROW(cost_fG(gain_to_parameterizer(bad, pk), w), DomainError);
  EXPECT_THROW(gradient_fG(gain_to_parameterizer(bad, pk), w), DomainError);
  EXPECT_THROW(model_based_gradient(bad, aug, w), DomainError);
  EXPECT_THROW(integrate_flow(gain_to_parameterizer(bad, pk), w), DomainError);
}

TEST(Cost, OptimumIsCareTrace) {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 15; ++trial) {
    const auto [n, m, p] = oracle::random_dims(rng);
    const LtiModel model = oracle::random_plant(rng, n, m, p);
    const WeightSpec w = fixture::identity_weights(model);
    const AugmentedModel aug = augment(model);
    const Mat P = oracle::care_hamiltonian(aug.Aa, aug.Ba, w.Qa(), w.R());
    const Mat K = w.R().llt().solve(aug.Ba.transpose() * P);
    const PackRef pk = share(fixture::random_pack(rng, model, SamplingVariant::kIntegral));
    const Parameterizer g = gain_to_parameterizer(K, pk);
    EXPECT_NEAR(cost_fG(g, w), P.trace(), 1e-8 * (1.0 + P.trace()));
    const Mat pg = projection_pi(*pk) * gradient_fG(g, w);
    EXPECT_LE(pg.norm(), 1e-7 * (1.0 + gradient_fG(g, w).norm())) << "trial " << trial;
    EXPECT_LE(model_based_gradient(K, aug, w).norm(), 1e-8 * (1.0 + P.norm()));
  }
}

TEST(Gradient, DguStationaryAtOptimum) {
  const PackRef pk = share(fixture::dgu_pack(7));
  const Parameterizer g = gain_to_parameterizer(fixture::dgu_K_care(), pk);
  const Mat grad = gradient_fG(g, fixture::dgu_weights());
  EXPECT_LE((projection_pi(*pk) * grad).norm(), 1e-7 * (1.0 + grad.norm()));
}

TEST(Gradient, FiniteDifferencesAlongTangent) {
  std::mt19937_64 rng(47);
  int pairs = 0;
  for (int plant = 0; plant < 6; ++plant) {
    const auto [model, pack] = fixture::conditioned_case(rng);
    const Index n = model.n(), m = model.m(), p = model.p();
    const WeightSpec w(oracle::random_spd(rng, n), oracle::random_spd(rng, p), oracle::random_spd(rng, m));
    const PackRef pk = share(pack);
    const Mat Pi = projection_pi(*pk);
    for (int gi = 0; gi < 4; ++gi, ++pairs) {
      const Parameterizer g = gain_to_parameterizer(fixture::random_stabilizing_gain(rng, model), pk);
      const Mat grad = gradient_fG(g, w);
      for (int d = 0; d < 20; ++d) {
        Mat D = Pi * oracle::random_matrix(rng, n + m, n + p);
        D /= D.norm();
        const double exact = (grad.array() * D.array()).sum();
        auto f = [&](double s) {
          Parameterizer a = g;
          a.G += s * D;
          return cost_fG(a, w);
        };
        double best = std::numeric_limits<double>::infinity();
        for (double h = 1e-4; h >= 1e-7; h /= 10.0) {
          const double s = h * g.G.norm();
          const double fd = (8.0 * (f(s) - f(-s)) - (f(2.0 * s) - f(-2.0 * s))) / (12.0 * s);
          best = std::min(best, std::abs(fd - exact) / std::abs(exact));
        }
        EXPECT_LE(best, 1e-5) << "plant " << plant << " G " << gi << " direction " << d;
      }
    }
  }
  EXPECT_GE(pairs, 20);
}

TEST(Gradient, DataAndModelAgreeThroughChainRule) {
  // d/de f_G(G + e D) = <grad f_K, -Ubar D> for tangent D
  std::mt19937_64 rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    const auto [n, m, p] = oracle::random_dims(rng);
    const LtiModel model = oracle::random_plant(rng, n, m, p);
    const WeightSpec w = fixture::identity_weights(model);
    const AugmentedModel aug = augment(model);
    const PackRef pk = share(fixture::random_pack(rng, model, SamplingVariant::kIntegral));
    const Mat K = fixture::random_stabilizing_gain(rng, model);
    const Parameterizer g = gain_to_parameterizer(K, pk);
    const Mat D = projection_pi(*pk) * oracle::random_matrix(rng, n + m, n + p);
    const double data = (gradient_fG(g, w).array() * D.array()).sum();
    const double model_side = (model_based_gradient(K, aug, w).array() * (-pk->Ubar * D).array()).sum();
    EXPECT_NEAR(data, model_side, 1e-7 * (1.0 + std::abs(model_side))) << "trial " << trial;
  }
}

TEST(ModelGradient, DescentDirection) {
  std::mt19937_64 rng(59);
  for (int trial = 0; trial < 20; ++trial) {
    const auto [n, m, p] = oracle::random_dims(rng);
    const LtiModel model = oracle::random_plant(rng, n, m, p);
    const WeightSpec w = fixture::identity_weights(model);
    const AugmentedModel aug = augment(model);
    const Mat K = fixture::random_stabilizing_gain(rng, model);
    const Mat g = model_based_gradient(K, aug, w);
    const double f = model_based_cost(K, aug, w);
    const double eps = 1e-4 / (1.0 + g.norm());
    EXPECT_LT(model_based_cost(K - eps * g, aug, w), f);
  }
}

TEST(Flow, StartingAtOptimumStays) {
  const PackRef pk = share(fixture::dgu_pack(7));
  const Mat Kstar = fixture::dgu_K_care();
  FlowOptions f = tight_flow();
  f.grad_tol = 1e-6;
  const FlowTrajectory traj = integrate_flow(gain_to_parameterizer(Kstar, pk), fixture::dgu_weights(), f);
  EXPECT_TRUE(traj.converged);
  EXPECT_EQ(traj.steps, 0);
  EXPECT_LE((traj.last().K - Kstar).norm(), 1e-8);
}

TEST(Flow, RejectsBadOptions) {
  const PackRef pk = share(fixture::dgu_pack(7));
  const Parameterizer g = gain_to_parameterizer(fixture::dgu_K_care(), pk);
  FlowOptions f;
  f.grad_tol = 0.0;
  EXPECT_THROW(integrate_flow(g, fixture::dgu_weights(), f), InputError);
  f = FlowOptions{};
  f.constraint_renorm_every = 0;
  EXPECT_THROW(integrate_flow(g, fixture::dgu_weights(), f), InputError);
}

TEST(Flow, RandomPlantsConvergeToCare) {
  std::mt19937_64 rng(61);
  for (int trial = 0; trial < 8; ++trial) {
    const auto [model, pack] = fixture::conditioned_case(rng);
    const WeightSpec w = fixture::identity_weights(model);
    const AugmentedModel aug = augment(model);
    const Mat Kcare = w.R().llt().solve(aug.Ba.transpose() *
                                        oracle::care_hamiltonian(aug.Aa, aug.Ba, w.Qa(), w.R()));
    const PackRef pk = share(pack);
    const Parameterizer g0 = gain_to_parameterizer(fixture::random_stabilizing_gain(rng, model), pk);
    const FlowTrajectory traj = integrate_flow(g0, w, tight_flow());
    expect_valid_trajectory(traj);
    for (const auto& s : traj.samples) {
      EXPECT_TRUE(is_in_G_set(Parameterizer{s.G, pk}));
      EXPECT_LE(constraint_residual(Parameterizer{s.G, pk}), kMembershipTol);
    }
    EXPECT_TRUE(traj.converged) << "trial " << trial;
    EXPECT_LE((traj.last().K - Kcare).norm(), 1e-4 * (1.0 + Kcare.norm())) << "trial " << trial;
  }
}

TEST(Flow, DguInitialGainsConvergeLinearly) {
  const PackRef pk = share(fixture::dgu_pack(7));
  const Mat Kstar = fixture::dgu_K_care();
  const WeightSpec w = fixture::dgu_weights();
  for (const Mat& K0 : ProtocolOptions::dgu_initial_gains()) {
    const FlowTrajectory traj = integrate_flow(gain_to_parameterizer(K0, pk), w, ProtocolOptions::default_flow());
    expect_valid_trajectory(traj);
    ASSERT_TRUE(traj.converged);
    EXPECT_LE((traj.last().K - Kstar).norm(), 1e-4 * (1.0 + Kstar.norm()));

    // log residual against flow time: after the transient, successive chunks of
    // the trajectory shrink the residual at comparable rates
    const std::vector<double> r = residual_ratios(traj, Kstar);
    EXPECT_LT(r.back(), 1e-6);
    for (size_t i = 1; i < r.size(); ++i) EXPECT_LT(r[i], r[i - 1]) << "sample " << i;
    for (const auto& s : traj.samples) EXPECT_LT(oracle::abscissa(pk->closed_loop_map() * s.G), 0.0);
    std::vector<double> t, lr;
    for (size_t i = 0; i < r.size(); ++i) {
      if (r[i] < 1e-1 && r[i] > 1e-7) {
        t.push_back(traj.samples[i].t);
        lr.push_back(std::log(r[i]));
      }
    }
    ASSERT_GT(t.size(), 20u);
    const size_t q = t.size() / 3;
    auto slope = [&](size_t a, size_t b) { return (lr[b] - lr[a]) / (t[b] - t[a]); };
    const double s1 = slope(0, q), s2 = slope(q, 2 * q), s3 = slope(2 * q, t.size() - 1);
    EXPECT_LT(s1, 0.0);
    EXPECT_LT(s2, 0.0);
    EXPECT_LT(s3, 0.0);
    const double fast = std::min({s1, s2, s3}), slow = std::max({s1, s2, s3});
    EXPECT_LT(fast / slow, 3.0) << s1 << " " << s2 << " " << s3;
  }
}
