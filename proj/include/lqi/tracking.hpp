#pragma once

// Closed-loop LQI tracking: u = -K [x; z], z' = r - C x, simulated exactly
// over piecewise-constant plant and reference segments.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lqi/errors.hpp"
#include "lqi/flow.hpp"
#include "lqi/kernels.hpp"
#include "lqi/lti.hpp"
#include "lqi/param.hpp"

namespace lqi {

struct DguParams {
  double R = 0.2;     // ohm
  double L = 2e-3;    // H
  double C = 2e-3;    // F
  double Y = 0.02;    // S
};

/// Buck converter with RLC filter and constant-admittance load; states (v, i).
inline LtiModel dgu_model(double R, double L, double C, double Y) {
  if (!(L > 0.0) || !(C > 0.0)) throw InputError("filter inductance and capacitance must be positive");
  if (!(R > 0.0)) throw InputError("filter resistance must be positive");
  if (!(Y >= 0.0)) throw InputError("load admittance must be nonnegative");
  Mat A(2, 2), B(2, 1), Cm(1, 2);
  A << -Y / C, 1.0 / C, -1.0 / L, -R / L;
  B << 0.0, 1.0 / L;
  Cm << 1.0, 0.0;
  return LtiModel(A, B, Cm);
}

inline LtiModel dgu_model(const DguParams& p) { return dgu_model(p.R, p.L, p.C, p.Y); }

/// Piecewise-constant reference; value i holds from time i on.
struct ReferenceProfile {
  std::vector<std::pair<double, Vec>> breakpoints;

  void validate(Index p) const {
    if (breakpoints.empty()) throw InputError("reference profile is empty");
    for (size_t i = 0; i < breakpoints.size(); ++i) {
      if (breakpoints[i].second.size() != p) {
        throw DimensionError("reference values must have p entries");
      }
      if (i > 0 && !(breakpoints[i].first > breakpoints[i - 1].first)) {
        throw InputError("reference breakpoint times must be strictly increasing");
      }
    }
  }

  Vec at(double t) const {
    size_t k = 0;
    while (k + 1 < breakpoints.size() && breakpoints[k + 1].first <= t) ++k;
    return breakpoints[k].second;
  }
};

struct PlantSegment {
  double start = 0.0;
  LtiModel model;
};

struct Scenario {
  std::vector<PlantSegment> plants;  // first entry starts at `start`
  ReferenceProfile reference;
  double start = 0.0;
  double horizon = 1.0;  // simulated duration
  double output_dt = 1e-3;
  std::optional<Vec> x0;  // initial plant state; zero when absent
  Vec z0;                 // initial integrator state; zero when empty
  /// Start at the closed-loop equilibrium for the first plant and reference.
  bool start_at_equilibrium = false;

  void validate() const {
    if (plants.empty()) throw InputError("scenario needs at least one plant");
    if (std::abs(plants.front().start - start) > 1e-12 * std::max(1.0, std::abs(start))) {
      throw InputError("first plant must start at the scenario start time");
    }
    const LtiModel& m0 = plants.front().model;
    for (size_t i = 1; i < plants.size(); ++i) {
      if (!(plants[i].start > plants[i - 1].start)) {
        throw InputError("plant schedule times must be strictly increasing");
      }
      const LtiModel& mi = plants[i].model;
      if (mi.n() != m0.n() || mi.m() != m0.m() || mi.p() != m0.p()) {
        throw DimensionError("all scheduled plants must share dimensions");
      }
    }
    reference.validate(m0.p());
    if (!(horizon > 0.0) || !(output_dt > 0.0)) {
      throw InputError("horizon and output interval must be positive");
    }
    if (x0 && x0->size() != m0.n()) throw DimensionError("x0 must have n entries");
    if (z0.size() != 0 && z0.size() != m0.p()) throw DimensionError("z0 must have p entries");
  }

  const LtiModel& plant_at(double t) const {
    size_t k = 0;
    while (k + 1 < plants.size() && plants[k + 1].start <= t) ++k;
    return plants[k].model;
  }
};

struct AdaptiveOptions {
  double alpha = 2000.0;
  int steps_per_sample = 8;
  /// Experimental: flow on a data pack re-collected after each plant switch
  /// instead of the current plant's model-based gradient.
  bool data_driven = false;
  ExcitationOptions excitation;
  Index samples = 10;
  double sample_interval = 0.1;
  double window = 0.1;
};

struct Controller {
  Mat K;  // fixed gain, or the initial gain of the adaptive controller
  std::optional<AdaptiveOptions> adaptive;
  std::optional<WeightSpec> weights;  // required when adaptive

  static Controller fixed(Mat K) { return {std::move(K), std::nullopt, std::nullopt}; }
};

struct TrackingRecord {
  std::vector<double> t;
  Mat X, Z, U, Y, R;
  Mat K;  // row j: gain entries row-major at sample j
  bool adaptive = false;
  bool diverged = false;
  std::vector<std::string> notes;

  Index size() const { return static_cast<Index>(t.size()); }
};

namespace detail {

/// exp([[Aa - Ba K, E], [0, 0]] h) for the state [x; z; r].
inline Mat tracking_propagator(const LtiModel& plant, const Mat& K, double h) {
  const Index n = plant.n(), p = plant.p();
  const AugmentedModel aug = augment(plant);
  const Index k = n + p;
  Mat M = Mat::Zero(k + p, k + p);
  M.topLeftCorner(k, k) = aug.Aa - aug.Ba * K;
  M.block(n, k, p, p) = Mat::Identity(p, p);
  return matrix_exponential(M, h);
}

inline std::vector<double> breakpoints_between(const Scenario& sc, double a, double b,
                                               double tol) {
  std::vector<double> cuts;
  for (const auto& ps : sc.plants)
    if (ps.start > a + tol && ps.start < b - tol) cuts.push_back(ps.start);
  for (const auto& bp : sc.reference.breakpoints)
    if (bp.first > a + tol && bp.first < b - tol) cuts.push_back(bp.first);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  return cuts;
}

}  // namespace detail

/// Closed-loop equilibrium [x; z] for a constant plant, gain and reference.
inline Vec tracking_equilibrium(const LtiModel& plant, const Mat& K, const Vec& r) {
  const AugmentedModel aug = augment(plant);
  const Index n = plant.n(), p = plant.p();
  const Mat Acl = aug.Aa - aug.Ba * K;
  Vec e = Vec::Zero(n + p);
  e.tail(p) = r;
  Eigen::FullPivLU<Mat> lu(Acl);
  if (!lu.isInvertible()) throw SingularityError("closed loop has no unique equilibrium");
  return lu.solve(-e);
}

inline TrackingRecord simulate_lqi(const Scenario& sc, const Controller& ctl) {
  sc.validate();
  const LtiModel& first = sc.plants.front().model;
  const Index n = first.n(), m = first.m(), p = first.p();
  require_shape(ctl.K, m, n + p, "gain");
  require_finite(ctl.K, "gain");
  if (ctl.adaptive && !ctl.weights) throw InputError("adaptive controller needs weights");
  if (ctl.adaptive && ctl.adaptive->steps_per_sample < 1) {
    throw InputError("adaptive controller needs at least one flow step per sample");
  }

  const double scale = std::max(1.0, std::abs(sc.start) + sc.horizon);
  const double tol = 1e-12 * scale;
  const auto N = static_cast<Index>(std::floor(sc.horizon / sc.output_dt + 1e-9));
  std::vector<double> times;
  for (Index k = 0; k <= N; ++k) times.push_back(sc.start + sc.output_dt * static_cast<double>(k));
  if (sc.start + sc.horizon - times.back() > tol) times.push_back(sc.start + sc.horizon);
  const auto S = static_cast<Index>(times.size());

  TrackingRecord rec;
  rec.adaptive = ctl.adaptive.has_value();
  rec.t = times;
  rec.X.resize(n, S);
  rec.Z.resize(p, S);
  rec.U.resize(m, S);
  rec.Y.resize(p, S);
  rec.R.resize(p, S);
  rec.K.resize(S, m * (n + p));

  Mat K = ctl.K;
  Vec xi(n + p);
  if (sc.start_at_equilibrium) {
    xi = tracking_equilibrium(first, K, sc.reference.at(sc.start));
  } else {
    xi.head(n) = sc.x0 ? *sc.x0 : Vec::Zero(n);
    xi.tail(p) = sc.z0.size() ? sc.z0 : Vec::Zero(p);
  }

  auto store = [&](Index j) {
    const double t = times[static_cast<size_t>(j)];
    const LtiModel& plant = sc.plant_at(t + tol);
    rec.X.col(j) = xi.head(n);
    rec.Z.col(j) = xi.tail(p);
    rec.U.col(j) = -K * xi;
    rec.Y.col(j) = plant.C() * xi.head(n);
    rec.R.col(j) = sc.reference.at(t + tol);
    for (Index r = 0; r < m; ++r)
      for (Index c = 0; c < n + p; ++c) rec.K(j, r * (n + p) + c) = K(r, c);
  };

  // Adaptive state.
  std::optional<PackRef> pack;
  const LtiModel* pack_plant = nullptr;
  auto adapt = [&](const LtiModel& plant) {
    const AdaptiveOptions& ao = *ctl.adaptive;
    const WeightSpec& w = *ctl.weights;
    const double h = sc.output_dt / static_cast<double>(ao.steps_per_sample);
    if (!ao.data_driven) {
      K = advance_model_flow(K, augment(plant), w, ao.alpha, h, ao.steps_per_sample).K;
      return;
    }
    if (pack_plant != &plant) {
      const InputSignal sig = make_excitation(m, ao.excitation);
      const DataBatch batch =
          collect_integral_data(plant, sig, ao.samples, ao.sample_interval, ao.window,
                                Vec::Zero(n));
      pack = share(build_covariances(batch));
      pack_plant = &plant;
    }
    const Parameterizer G = gain_to_parameterizer(K, *pack);
    FlowOptions fo;
    fo.alpha = ao.alpha;
    fo.max_steps = ao.steps_per_sample;
    fo.horizon = sc.output_dt;
    K = integrate_flow(G, w, fo).last().K;
  };

  Mat cached;
  const LtiModel* cached_plant = nullptr;
  double cached_h = -1.0;
  bool cache_valid = false;
  auto propagate = [&](const LtiModel& plant, double a, double b) {
    const double h = b - a;
    if (!(cache_valid && cached_plant == &plant && cached_h == h)) {
      cached = detail::tracking_propagator(plant, K, h);
      cached_plant = &plant;
      cached_h = h;
      cache_valid = true;
    }
    Vec s(n + 2 * p);
    s << xi, sc.reference.at(a + tol);
    xi = (cached * s).head(n + p);
  };

  store(0);
  for (Index j = 1; j < S; ++j) {
    const double a = times[static_cast<size_t>(j - 1)];
    const double b = times[static_cast<size_t>(j)];
    std::vector<double> cuts = detail::breakpoints_between(sc, a, b, tol);
    cuts.insert(cuts.begin(), a);
    cuts.push_back(b);
    for (size_t c = 1; c < cuts.size(); ++c) {
      propagate(sc.plant_at(cuts[c - 1] + tol), cuts[c - 1], cuts[c]);
    }
    if (!xi.allFinite() || xi.cwiseAbs().maxCoeff() > 1e12) {
      rec.diverged = true;
      rec.notes.push_back("state diverged at t = " + std::to_string(b));
      const Index kept = j;
      rec.t.resize(static_cast<size_t>(kept));
      rec.X.conservativeResize(n, kept);
      rec.Z.conservativeResize(p, kept);
      rec.U.conservativeResize(m, kept);
      rec.Y.conservativeResize(p, kept);
      rec.R.conservativeResize(p, kept);
      rec.K.conservativeResize(kept, m * (n + p));
      return rec;
    }
    if (ctl.adaptive) {
      try {
        adapt(sc.plant_at(b + tol));
        cache_valid = false;
      } catch (const Error& e) {
        rec.notes.push_back(std::string("gain adaptation stopped at t = ") +
                            std::to_string(b) + ": " + e.what());
      }
    }
    store(j);
  }

  // Hurwitz status of each fixed-gain segment, recorded only.
  if (!ctl.adaptive) {
    for (const auto& ps : sc.plants) {
      const AugmentedModel aug = augment(ps.model);
      if (!is_hurwitz(aug.Aa - aug.Ba * ctl.K)) {
        rec.notes.push_back("closed loop is not Hurwitz for the plant starting at t = " +
                            std::to_string(ps.start));
      }
    }
  }
  return rec;
}

struct SegmentMetrics {
  double start = 0.0;
  double end = 0.0;
  double reference = 0.0;
  double peak_deviation = 0.0;  // max |y - r| within the segment
  double overshoot = 0.0;       // swing past r opposite to the main excursion
  double final_error = 0.0;     // |y - r| at the segment end
};

/// Per-segment metrics for output `channel`; segments are delimited by plant
/// switches and reference changes.
inline std::vector<SegmentMetrics> segment_metrics(const TrackingRecord& rec, const Scenario& sc,
                                                   Index channel = 0) {
  std::vector<double> cuts{sc.start};
  for (const auto& ps : sc.plants) cuts.push_back(ps.start);
  for (const auto& bp : sc.reference.breakpoints) cuts.push_back(bp.first);
  const double end = rec.t.empty() ? sc.start : rec.t.back();
  cuts.push_back(end);
  std::sort(cuts.begin(), cuts.end());
  std::vector<double> edges;
  for (double c : cuts) {
    if (c < sc.start || c > end) continue;
    if (edges.empty() || c - edges.back() > 1e-9) edges.push_back(c);
  }

  std::vector<SegmentMetrics> out;
  for (size_t s = 1; s < edges.size(); ++s) {
    SegmentMetrics sm;
    sm.start = edges[s - 1];
    sm.end = edges[s];
    sm.reference = sc.reference.at(sm.start + 1e-12)(channel);
    std::vector<double> e;
    for (Index j = 0; j < rec.size(); ++j) {
      const double t = rec.t[static_cast<size_t>(j)];
      if (t < sm.start - 1e-12 || t > sm.end + 1e-12) continue;
      e.push_back(rec.Y(channel, j) - sm.reference);
    }
    if (e.empty()) continue;
    double peak = 0.0, peak_signed = 0.0;
    for (double v : e) {
      if (std::abs(v) > peak) {
        peak = std::abs(v);
        peak_signed = v;
      }
    }
    const double sgn = peak_signed >= 0.0 ? 1.0 : -1.0;
    double over = 0.0;
    for (double v : e) over = std::max(over, -sgn * v);
    sm.peak_deviation = peak;
    sm.overshoot = peak > 0.0 ? over : 0.0;
    sm.final_error = std::abs(e.back());
    out.push_back(sm);
  }
  return out;
}

}  // namespace lqi
