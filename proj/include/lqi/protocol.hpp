#pragma once

// The DGU experiment end to end: open-loop collection, data-driven synthesis,
// flows from fixed initial gains, reference tracking and the load-step study.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lqi/errors.hpp"
#include "lqi/flow.hpp"
#include "lqi/kernels.hpp"
#include "lqi/lti.hpp"
#include "lqi/param.hpp"
#include "lqi/sdp.hpp"
#include "lqi/tracking.hpp"

namespace lqi {

/// Wraps an exception from one pipeline stage with the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what, int code)
      : Error(stage + ": " + what), stage_(std::move(stage)), code_(code) {}
  const std::string& stage() const { return stage_; }
  /// Exit code of the underlying failure class.
  int code() const { return code_; }

 private:
  std::string stage_;
  int code_;
};

/// Process exit code for each failure class.
inline int exit_code_for(const std::exception& e) {
  if (const auto* s = dynamic_cast<const StageError*>(&e)) return s->code();
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const RankError*>(&e) || dynamic_cast<const PreconditionError*>(&e)) return 3;
  if (dynamic_cast<const InfeasibleError*>(&e) || dynamic_cast<const NonConvergenceError*>(&e)) {
    return 4;
  }
  if (dynamic_cast<const DomainError*>(&e)) return 5;
  return 1;
}

template <class F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what(), exit_code_for(e));
  }
}

struct ExperimentOptions {
  ExcitationOptions excitation{1.0, 0.02, 100.0, 0.0, 7};
  Index samples = 10;
  double sample_interval = 0.1;
  double window = 0.1;
  SamplingVariant variant = SamplingVariant::kIntegral;
  Vec x0;  // zero when empty
};

struct LoadStudyOptions {
  double horizon = 3.5;
  double output_dt = 1e-3;
  std::vector<std::pair<double, double>> load_steps{{0.5, 0.001}, {2.5, 0.1}};
  std::vector<std::pair<double, Vec>> reference;  // defaults to 400 V, 410 V at 1.5 s
  AdaptiveOptions adaptive;
};

struct ProtocolOptions {
  DguParams plant;
  Mat Qx = Mat::Identity(2, 2);
  Mat Qz = Mat::Constant(1, 1, 100.0);
  Mat R = Mat::Identity(1, 1);
  ExperimentOptions experiment;
  SdpOptions sdp;
  FlowOptions flow = default_flow();
  std::vector<Mat> initial_gains = dgu_initial_gains();
  double tracking_start = 1.0;
  double tracking_end = 4.0;
  double tracking_dt = 1e-3;
  std::vector<std::pair<double, double>> reference_steps{{1.0, 400.0}, {2.0, 600.0}, {3.0, 200.0}};
  bool load_study = true;
  LoadStudyOptions load;

  static FlowOptions default_flow() {
    FlowOptions f;
    f.grad_tol = 1e-12;
    f.horizon = 1e12;
    f.max_steps = 200000;
    f.sample_every = 50;
    return f;
  }
  static std::vector<Mat> dgu_initial_gains() {
    Mat K1(1, 3), K2(1, 3), K3(1, 3);
    K1 << 0.5, 0.1, -50.0;
    K2 << 5.0, 1.0, -15.0;
    K3 << 0.0, 0.0, -1.0;
    return {K1, K2, K3};
  }
  WeightSpec weights() const { return WeightSpec(Qx, Qz, R); }
};

struct FlowRun {
  Mat K0;
  FlowTrajectory trajectory;
  std::vector<double> residual_ratio;
};

struct LoadStudyRun {
  std::string label;
  TrackingRecord record;
  std::vector<SegmentMetrics> metrics;
};

struct ProtocolBundle {
  LtiModel model;
  WeightSpec weights;
  InputSignal excitation;
  DataBatch batch;
  CovariancePack pack;
  OpenLoopRecord collection;
  PeRankReport pe;
  StabilizabilityReport stabilizable;
  DetectabilityReport detectable;
  Mat K_care;
  double care_cost = 0.0;
  SdpSolution sdp;
  Mat K_sdp;
  std::vector<FlowRun> flows;
  Scenario tracking_scenario;
  TrackingRecord tracking;
  std::vector<SegmentMetrics> tracking_metrics;
  Scenario load_scenario;
  std::vector<LoadStudyRun> load_runs;
  double gain_error = 0.0;  // ||K_sdp - K_care||_F
};

inline Scenario make_tracking_scenario(const ProtocolOptions& o, const LtiModel& model,
                                       const Vec& x_start) {
  Scenario sc;
  sc.start = o.tracking_start;
  sc.horizon = o.tracking_end - o.tracking_start;
  sc.output_dt = o.tracking_dt;
  sc.plants = {{o.tracking_start, model}};
  for (const auto& [t, v] : o.reference_steps) {
    sc.reference.breakpoints.push_back({t, Vec::Constant(1, v)});
  }
  sc.x0 = x_start;
  return sc;
}

inline Scenario make_load_scenario(const ProtocolOptions& o) {
  Scenario sc;
  sc.start = 0.0;
  sc.horizon = o.load.horizon;
  sc.output_dt = o.load.output_dt;
  sc.plants = {{0.0, dgu_model(o.plant)}};
  for (const auto& [t, y] : o.load.load_steps) {
    DguParams p = o.plant;
    p.Y = y;
    sc.plants.push_back({t, dgu_model(p)});
  }
  if (o.load.reference.empty()) {
    sc.reference.breakpoints = {{0.0, Vec::Constant(1, 400.0)}, {1.5, Vec::Constant(1, 410.0)}};
  } else {
    sc.reference.breakpoints = o.load.reference;
  }
  sc.start_at_equilibrium = true;
  return sc;
}

inline ProtocolBundle run_paper_protocol(std::uint64_t seed, ProtocolOptions o = {}) {
  o.experiment.excitation.seed = seed;
  ProtocolBundle b;
  b.model = run_stage("model", [&] { return dgu_model(o.plant); });
  b.weights = run_stage("weights", [&] { return o.weights(); });
  const Index n = b.model.n();
  const Vec x0 = o.experiment.x0.size() ? o.experiment.x0 : Vec::Zero(n);

  run_stage("collect", [&] {
    b.excitation = make_excitation(b.model.m(), o.experiment.excitation);
    const auto& e = o.experiment;
    b.batch = e.variant == SamplingVariant::kIntegral
                  ? collect_integral_data(b.model, b.excitation, e.samples, e.sample_interval,
                                          e.window, x0)
                  : collect_derivative_data(b.model, b.excitation, e.samples,
                                            e.sample_interval, x0);
    b.pack = build_covariances(b.batch);
    b.collection = simulate_open_loop(b.model, b.excitation, x0, o.tracking_dt,
                                      o.experiment.excitation.duration);
    return 0;
  });

  run_stage("check", [&] {
    b.pe = check_pe_rank(b.pack);
    b.stabilizable = check_aug_stabilizable(b.model);
    b.detectable = check_aug_detectable(b.model, b.weights);
    if (!b.pe.ok) {
      throw RankError("data matrix [Ubar; Xbar] is rank deficient", b.pe.rank, b.pe.required, 0.0);
    }
    if (!b.stabilizable.ok) throw PreconditionError("augmented plant is not stabilizable");
    if (!b.detectable.ok) throw PreconditionError("augmented plant is not detectable");
    return 0;
  });

  run_stage("care", [&] {
    const AugmentedModel aug = augment(b.model);
    b.K_care = lqr_gain(aug.Aa, aug.Ba, b.weights.Qa(), b.weights.R());
    b.care_cost = model_based_cost(b.K_care, aug, b.weights);
    return 0;
  });

  run_stage("synth-sdp", [&] {
    const SdpProblem pr = assemble_sdp(b.pack, b.weights);
    b.sdp = solve_sdp(pr, o.sdp);
    b.K_sdp = extract_gain(b.sdp, b.pack);
    b.gain_error = (b.K_sdp - b.K_care).norm();
    return 0;
  });

  run_stage("synth-pg", [&] {
    const PackRef pk = share(b.pack);
    for (const Mat& K0 : o.initial_gains) {
      const Parameterizer G0 = gain_to_parameterizer(K0, pk);
      if (!is_in_G_set(G0)) {
        throw DomainError("initial gain does not stabilize the data closed loop");
      }
      FlowRun run;
      run.K0 = K0;
      run.trajectory = integrate_flow(G0, b.weights, o.flow);
      run.residual_ratio = residual_ratios(run.trajectory, b.K_care);
      b.flows.push_back(std::move(run));
    }
    return 0;
  });

  run_stage("track", [&] {
    const Vec x_start = b.collection.X.col(b.collection.X.cols() - 1);
    b.tracking_scenario = make_tracking_scenario(o, b.model, x_start);
    b.tracking = simulate_lqi(b.tracking_scenario, Controller::fixed(b.K_sdp));
    b.tracking_metrics = segment_metrics(b.tracking, b.tracking_scenario);
    return 0;
  });

  if (o.load_study) {
    run_stage("load-study", [&] {
      b.load_scenario = make_load_scenario(o);
      std::vector<std::pair<std::string, Mat>> gains{{"K_sdp", b.K_sdp}};
      for (size_t i = 0; i < o.initial_gains.size(); ++i) {
        gains.push_back({"K" + std::to_string(i + 1), o.initial_gains[i]});
      }
      for (const auto& [label, K] : gains) {
        LoadStudyRun r{label, simulate_lqi(b.load_scenario, Controller::fixed(K)), {}};
        r.metrics = segment_metrics(r.record, b.load_scenario);
        b.load_runs.push_back(std::move(r));
      }
      Controller adaptive{b.K_sdp, o.load.adaptive, b.weights};
      LoadStudyRun r{"adaptive", simulate_lqi(b.load_scenario, adaptive), {}};
      r.metrics = segment_metrics(r.record, b.load_scenario);
      b.load_runs.push_back(std::move(r));
      return 0;
    });
  }
  return b;
}

}  // namespace lqi
