#pragma once

// Projected policy-gradient flow over data parameterizers, and the
// model-based gain-space flow used as a reference and for online adaptation.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lqi/errors.hpp"
#include "lqi/kernels.hpp"
#include "lqi/lti.hpp"
#include "lqi/param.hpp"

namespace lqi {

/// Cost, Lyapunov solutions and closed loop at one parameterizer.
struct CostEvaluation {
  double cost = 0.0;
  Mat P;    // cost Gramian
  Mat W;    // state covariance, empty unless requested
  Mat Acl;  // [Xpbar; -Ybar] G
  Mat K;    // -Ubar G
};

inline CostEvaluation evaluate_fG(const Parameterizer& g, const WeightSpec& weights,
                                  bool with_covariance) {
  const CovariancePack& pk = *g.pack;
  weights.require_compatible(pk.n, pk.m, pk.p);
  if (!is_in_G_set(g)) {
    throw DomainError("parameterizer is outside the stabilizing set (constraint residual " +
                      std::to_string(constraint_residual(g)) + ")");
  }
  CostEvaluation ev;
  ev.Acl = pk.closed_loop_map() * g.G;
  const Mat UG = pk.Ubar * g.G;
  ev.K = -UG;
  const Mat Q = weights.Qa() + UG.transpose() * weights.R() * UG;
  if (with_covariance) {
    const Index k = ev.Acl.rows();
    // Acl W + W Acl^T + I = 0; the closed loop carries -Ybar here as well.
    auto pw = solve_lyapunov_pair(ev.Acl, Q, Mat::Identity(k, k));
    ev.P = std::move(pw.P);
    ev.W = std::move(pw.W);
  } else {
    ev.P = solve_lyapunov(ev.Acl, Q);
  }
  ev.cost = ev.P.trace();
  return ev;
}

/// tr(P_G).
inline double cost_fG(const Parameterizer& g, const WeightSpec& weights) {
  return evaluate_fG(g, weights, false).cost;
}

inline Mat gradient_from(const CovariancePack& pk, const WeightSpec& weights, const Mat& G,
                         const CostEvaluation& ev) {
  return 2.0 *
         (pk.Ubar.transpose() * weights.R() * pk.Ubar * G +
          pk.closed_loop_map().transpose() * ev.P) *
         ev.W;
}

/// 2 (Ubar^T R Ubar G + [Xpbar; -Ybar]^T P_G) W_G.
inline Mat gradient_fG(const Parameterizer& g, const WeightSpec& weights) {
  const auto ev = evaluate_fG(g, weights, true);
  return gradient_from(*g.pack, weights, g.G, ev);
}

/// Orthogonal projector onto ker(Xbar), I - Xbar^+ Xbar.
inline Mat projection_pi(const CovariancePack& pack) {
  const Index k = pack.n + pack.m;
  (void)right_pseudoinverse(pack.Xbar);  // full row rank check
  // I - Q Q^T with Q an orthonormal basis of range(Xbar^T); unlike I - Xbar^+ Xbar
  // this stays idempotent when Xbar is badly conditioned.
  const Mat Q = pack.Xbar.transpose().householderQr().householderQ() * Mat::Identity(k, pack.n);
  const Mat Pi = symmetrize(Mat::Identity(k, k) - Q * Q.transpose());
  const double idem = (Pi * Pi - Pi).norm();
  const double tr = Pi.trace();
  if (idem > 1e-10 || std::abs(tr - static_cast<double>(pack.m)) > 1e-8 ||
      (pack.Xbar * Pi).norm() > 1e-10 * (1.0 + pack.Xbar.norm())) {
    throw NumericalError("projector check failed (idempotency defect " + std::to_string(idem) +
                         ", trace " + std::to_string(tr) + ")");
  }
  return Pi;
}

struct FlowOptions {
  /// Learning rate; <= 0 normalizes the time axis by the local gradient
  /// Lipschitz estimate at G0.
  double alpha = 0.0;
  /// Initial RK4 step in flow time; <= 0 picks 0.5 / (alpha * L).
  double step = 0.0;
  double horizon = 1e5;
  /// Stop when ||Pi grad||_F <= grad_tol.
  double grad_tol = 1e-8;
  int constraint_renorm_every = 25;
  int max_steps = 500000;
  /// Step control on h * ||dv|| / ||dG|| measured over each step.
  double target_step_curvature = 1.5;
  double max_step_curvature = 2.5;
  int sample_every = 1;
};

struct FlowSample {
  double t = 0.0;
  Mat G;
  Mat K;
  double cost = 0.0;
  double grad_norm = 0.0;
};

struct FlowTrajectory {
  std::vector<FlowSample> samples;
  bool converged = false;
  int steps = 0;
  int rejected_steps = 0;
  double alpha = 0.0;

  const FlowSample& last() const { return samples.back(); }
};

namespace detail {

/// Field value at a point: cost, velocity and stationarity measure.
struct FieldValue {
  double cost = 0.0;
  Mat velocity;
  double grad_norm = 0.0;
};

/// One classical RK4 increment; nullopt if a stage leaves the domain.
template <class Field>
std::optional<Mat> rk4_increment(const Field& field, const Mat& X, const FieldValue& f1,
                                 double h) {
  const auto f2 = field(X + 0.5 * h * f1.velocity);
  if (!f2) return std::nullopt;
  const auto f3 = field(X + 0.5 * h * f2->velocity);
  if (!f3) return std::nullopt;
  const auto f4 = field(X + h * f3->velocity);
  if (!f4) return std::nullopt;
  return ((h / 6.0) * (f1.velocity + 2.0 * f2->velocity + 2.0 * f3->velocity + f4->velocity))
      .eval();
}

inline constexpr double kCostSlack = 1e-10;
inline constexpr double kSecantFloor = 1e-9;

}  // namespace detail

/// Integrates G' = -alpha Pi grad f_G with RK4, halving the step whenever a
/// stage leaves the stabilizing set or the cost fails to decrease.
inline FlowTrajectory integrate_flow(const Parameterizer& G0, const WeightSpec& weights,
                                     const FlowOptions& opts = {}) {
  const CovariancePack& pk = *G0.pack;
  weights.require_compatible(pk.n, pk.m, pk.p);
  if (!is_in_G_set(G0)) {
    throw DomainError("initial parameterizer does not stabilize the data closed loop");
  }
  if (opts.constraint_renorm_every < 1 || opts.sample_every < 1 || !(opts.horizon > 0.0) ||
      !(opts.grad_tol > 0.0) || opts.max_steps < 0) {
    throw InputError("flow options must be positive");
  }
  const Mat Pi = projection_pi(pk);
  const Mat Xpinv = right_pseudoinverse(pk.Xbar);
  const PackRef pack = G0.pack;

  double alpha = opts.alpha;
  auto raw = [&](const Mat& G) -> std::optional<detail::FieldValue> {
    Parameterizer g{G, pack};
    try {
      const auto ev = evaluate_fG(g, weights, true);
      Mat pg = Pi * gradient_from(pk, weights, G, ev);
      // Second pass removes the round-off component normal to the constraint.
      pg -= Xpinv * (pk.Xbar * pg);
      return detail::FieldValue{ev.cost, -pg, pg.norm()};
    } catch (const DomainError&) {
      return std::nullopt;
    } catch (const NumericalError&) {
      return std::nullopt;
    }
  };

  auto current = raw(G0.G);
  if (!current) throw DomainError("cost is not defined at the initial parameterizer");
  const double g0 = current->grad_norm;
  const double stop = opts.grad_tol;

  // Local Lipschitz estimate of the projected gradient along the descent ray.
  double lipschitz = 0.0;
  if (g0 > 0.0) {
    double delta = 1e-4 * std::max(G0.G.norm(), 1e-300);
    for (int tries = 0; tries < 30 && lipschitz == 0.0; ++tries, delta *= 0.25) {
      if (auto probe = raw(G0.G + (delta / g0) * current->velocity)) {
        lipschitz = (probe->velocity - current->velocity).norm() / delta;
      }
    }
    if (lipschitz == 0.0) lipschitz = g0 / std::max(G0.G.norm(), 1e-300);
  }
  if (!(alpha > 0.0)) alpha = lipschitz > 0.0 ? 1.0 / lipschitz : 1.0;
  double h = opts.step > 0.0 ? opts.step : (lipschitz > 0.0 ? 0.5 / (alpha * lipschitz) : 1.0);
  const double h_min = h * 1e-12;

  auto field = [&](const Mat& G) -> std::optional<detail::FieldValue> {
    auto v = raw(G);
    if (v) v->velocity *= alpha;
    return v;
  };
  current->velocity *= alpha;

  FlowTrajectory traj;
  traj.alpha = alpha;
  Mat G = G0.G;
  double t = 0.0;
  auto record = [&] {
    traj.samples.push_back({t, G, -pk.Ubar * G, current->cost, current->grad_norm});
  };
  record();

  int streak = 0;
  int since_renorm = 0;
  while (true) {
    if (current->grad_norm <= stop) {
      traj.converged = true;
      break;
    }
    if (t >= opts.horizon || traj.steps >= opts.max_steps) break;
    const double hs = std::min(h, opts.horizon - t);
    std::optional<detail::FieldValue> next;
    Mat Gn;
    if (auto inc = detail::rk4_increment(field, G, *current, hs)) {
      Gn = G + *inc;
      if (++since_renorm >= opts.constraint_renorm_every) {
        Gn = project_onto_constraint({Gn, pack}).G;
        since_renorm = 0;
      }
      next = field(Gn);
    }
    if (!next || !(next->cost <= current->cost + detail::kCostSlack * std::abs(current->cost))) {
      ++traj.rejected_steps;
      streak = 0;
      h *= 0.5;
      if (h < h_min) {
        throw NumericalError("flow step underflow at t = " + std::to_string(t));
      }
      continue;
    }
    // Secant curvature along the step; keeps the stiff modes inside the
    // strongly damped part of the RK4 stability region.
    // Secant estimates below the round-off level of G are ignored.
    const double dG = (Gn - G).norm();
    const double z = dG > detail::kSecantFloor * G.norm()
                         ? hs * (next->velocity - current->velocity).norm() / dG
                         : 0.0;
    if (z > opts.max_step_curvature) {
      ++traj.rejected_steps;
      streak = 0;
      h = hs * 0.5 * opts.max_step_curvature / z;
      if (h < h_min) {
        throw NumericalError("flow step underflow at t = " + std::to_string(t));
      }
      continue;
    }
    G = std::move(Gn);
    current = std::move(next);
    t += hs;
    ++traj.steps;
    if (z > 0.0) {
      h = std::min(1.25 * h, std::max(0.5 * h, h * opts.target_step_curvature / z));
    } else if (++streak >= 10) {
      h *= 1.25;
      streak = 0;
    }
    if (traj.steps % opts.sample_every == 0) record();
  }
  if (traj.samples.back().t != t) record();
  return traj;
}

/// ||K(t) - K*||_F / ||K(0) - K*||_F along a trajectory.
inline std::vector<double> residual_ratios(const FlowTrajectory& traj, const Mat& K_star) {
  std::vector<double> r;
  const double d0 = (traj.samples.front().K - K_star).norm();
  for (const auto& s : traj.samples) {
    r.push_back(d0 > 0.0 ? (s.K - K_star).norm() / d0 : 0.0);
  }
  return r;
}

// --- model-based reference ------------------------------------------------

struct ModelCostEvaluation {
  double cost = 0.0;
  Mat P;
  Mat W;
  Mat Acl;
};

inline ModelCostEvaluation evaluate_model_cost(const Mat& K, const AugmentedModel& aug,
                                               const WeightSpec& weights, bool with_covariance) {
  const Index k = aug.states();
  require_shape(K, aug.Ba.cols(), k, "gain");
  ModelCostEvaluation ev;
  ev.Acl = aug.Aa - aug.Ba * K;
  if (!is_hurwitz(ev.Acl)) {
    throw DomainError("gain does not stabilize the augmented plant (spectral abscissa " +
                      std::to_string(spectral_abscissa(ev.Acl)) + ")");
  }
  const Mat Q = weights.Qa() + K.transpose() * weights.R() * K;
  if (with_covariance) {
    auto pw = solve_lyapunov_pair(ev.Acl, Q, Mat::Identity(k, k));
    ev.P = std::move(pw.P);
    ev.W = std::move(pw.W);
  } else {
    ev.P = solve_lyapunov(ev.Acl, Q);
  }
  ev.cost = ev.P.trace();
  return ev;
}

inline double model_based_cost(const Mat& K, const AugmentedModel& aug,
                               const WeightSpec& weights) {
  return evaluate_model_cost(K, aug, weights, false).cost;
}

/// 2 (R K - Ba^T P_K) W_K.
inline Mat model_based_gradient(const Mat& K, const AugmentedModel& aug,
                                const WeightSpec& weights) {
  const auto ev = evaluate_model_cost(K, aug, weights, true);
  return 2.0 * (weights.R() * K - aug.Ba.transpose() * ev.P) * ev.W;
}

struct ModelFlowResult {
  Mat K;
  double cost = 0.0;
  double grad_norm = 0.0;
  int steps = 0;
  int rejected_steps = 0;
  double step = 0.0;  // step size at exit, reusable as the next initial step
};

/// Advances K' = -alpha grad f_K for `steps` accepted RK4 steps of size `h`,
/// halving on instability or cost increase.
inline ModelFlowResult advance_model_flow(const Mat& K0, const AugmentedModel& aug,
                                          const WeightSpec& weights, double alpha, double h,
                                          int steps) {
  auto field = [&](const Mat& K) -> std::optional<detail::FieldValue> {
    try {
      const auto ev = evaluate_model_cost(K, aug, weights, true);
      const Mat g = 2.0 * (weights.R() * K - aug.Ba.transpose() * ev.P) * ev.W;
      return detail::FieldValue{ev.cost, -alpha * g, g.norm()};
    } catch (const DomainError&) {
      return std::nullopt;
    } catch (const NumericalError&) {
      return std::nullopt;
    }
  };
  auto current = field(K0);
  if (!current) throw DomainError("initial gain does not stabilize the augmented plant");
  ModelFlowResult out;
  out.K = K0;
  const double h_min = h * 1e-12;
  while (out.steps < steps) {
    std::optional<detail::FieldValue> next;
    Mat Kn;
    if (auto inc = detail::rk4_increment(field, out.K, *current, h)) {
      Kn = out.K + *inc;
      next = field(Kn);
    }
    if (!next || !(next->cost <= current->cost + detail::kCostSlack * std::abs(current->cost))) {
      ++out.rejected_steps;
      h *= 0.5;
      if (h < h_min) throw NumericalError("model flow step underflow");
      continue;
    }
    out.K = std::move(Kn);
    current = std::move(next);
    ++out.steps;
  }
  out.cost = current->cost;
  out.grad_norm = current->grad_norm;
  out.step = h;
  return out;
}

}  // namespace lqi
