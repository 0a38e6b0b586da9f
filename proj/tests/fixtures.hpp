#pragma once

#include <random>

#include "lqi/kernels.hpp"
#include "lqi/lti.hpp"
#include "lqi/param.hpp"
#include "lqi/protocol.hpp"
#include "lqi/tracking.hpp"
#include "oracles.hpp"

namespace fixture {

using lqi::Index;
using lqi::Mat;
using lqi::Vec;

/// Experiment on an arbitrary plant: T above the persistency bound, input holds
/// out of phase with the sampling grid, random initial state.
inline lqi::CovariancePack random_pack(std::mt19937_64& rng, const lqi::LtiModel& model,
                                       lqi::SamplingVariant variant,
                                       lqi::DataBatch* batch_out = nullptr) {
  const Index T = lqi::persistency_bound(model.n(), model.m()) + 2;
  const double dt = 0.1, window = 0.05;
  lqi::ExcitationOptions eo;
  eo.hold = 0.03;
  eo.amplitude = 1.0;
  eo.duration = dt * static_cast<double>(T) + window;
  eo.seed = rng();
  const lqi::InputSignal sig = lqi::make_excitation(model.m(), eo);
  const Vec x0 = oracle::random_matrix(rng, model.n(), 1);
  const lqi::DataBatch b =
      variant == lqi::SamplingVariant::kIntegral
          ? lqi::collect_integral_data(model, sig, T, dt, window, x0)
          : lqi::collect_derivative_data(model, sig, T, dt, x0);
  if (batch_out) *batch_out = b;
  return lqi::build_covariances(b);
}

struct Case {
  lqi::LtiModel model;
  lqi::CovariancePack pack;
};

/// Random plant and experiment whose [Xbar; Ubar] has condition number at most
/// max_cond. Checks that compare data-side values to model-side values at tight
/// tolerances lose about log10(cond) digits.
inline Case conditioned_case(std::mt19937_64& rng, double max_cond = 1e4) {
  for (;;) {
    const auto [n, m, p] = oracle::random_dims(rng);
    lqi::LtiModel model = oracle::random_plant(rng, n, m, p);
    lqi::CovariancePack pack = random_pack(rng, model, lqi::SamplingVariant::kIntegral);
    if (lqi::stack_condition_number(pack) <= max_cond) return {std::move(model), std::move(pack)};
  }
}

inline lqi::WeightSpec identity_weights(const lqi::LtiModel& m) {
  return lqi::WeightSpec(Mat::Identity(m.n(), m.n()), Mat::Identity(m.p(), m.p()),
                         Mat::Identity(m.m(), m.m()));
}

/// A stabilizing augmented gain that is not LQR optimal.
inline Mat random_stabilizing_gain(std::mt19937_64& rng, const lqi::LtiModel& model) {
  const lqi::AugmentedModel aug = lqi::augment(model);
  const Index k = model.n() + model.p();
  const Mat K0 = lqi::lqr_gain(aug.Aa, aug.Ba, oracle::random_spd(rng, k),
                               oracle::random_spd(rng, model.m()));
  // keep half the LQR stability margin so costs stay moderate
  const double margin = 0.5 * oracle::abscissa(aug.Aa - aug.Ba * K0);
  Mat D = oracle::random_matrix(rng, model.m(), k, 0.3 * (1.0 + K0.norm()));
  for (int i = 0; i < 60; ++i, D *= 0.5) {
    if (oracle::abscissa(aug.Aa - aug.Ba * (K0 + D)) < margin) return K0 + D;
  }
  return K0;
}

/// K = R^{-1} Ba^T P from the Hamiltonian CARE oracle, Qa = diag(1, 1, 100), R = 1.
inline Mat dgu_K_care() {
  const lqi::AugmentedModel aug = lqi::augment(lqi::dgu_model(lqi::DguParams{}));
  const Mat Qa = Eigen::Vector3d(1.0, 1.0, 100.0).asDiagonal();
  return aug.Ba.transpose() * oracle::care_hamiltonian(aug.Aa, aug.Ba, Qa, Mat::Identity(1, 1));
}

/// Covariances of the nominal experiment (integral sampling, 10 windows of 0.1 s).
inline lqi::CovariancePack dgu_pack(std::uint64_t seed) {
  const lqi::LtiModel model = lqi::dgu_model(lqi::DguParams{});
  lqi::ExperimentOptions e;
  e.excitation.seed = seed;
  const lqi::InputSignal sig = lqi::make_excitation(1, e.excitation);
  return lqi::build_covariances(
      lqi::collect_integral_data(model, sig, e.samples, e.sample_interval, e.window, Vec::Zero(2)));
}

inline lqi::WeightSpec dgu_weights() {
  return lqi::WeightSpec(Mat::Identity(2, 2), Mat::Constant(1, 1, 100.0), Mat::Identity(1, 1));
}

}  // namespace fixture
