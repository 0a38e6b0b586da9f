#pragma once

// Run configuration from YAML. Every section rejects keys it does not know,
// with the offending line in the message.

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "lqi/errors.hpp"
#include "lqi/io/text.hpp"
#include "lqi/kernels.hpp"
#include "lqi/lti.hpp"
#include "lqi/protocol.hpp"
#include "lqi/tracking.hpp"

namespace lqi::io {

namespace detail {

inline std::string where(const YAML::Node& node) {
  const auto mark = node.Mark();
  if (mark.line < 0) return "";
  return " (line " + std::to_string(mark.line + 1) + ")";
}

inline void require_map(const YAML::Node& node, const std::string& path) {
  if (!node.IsMap()) throw ConfigError("'" + path + "' must be a mapping" + where(node));
}

inline void reject_unknown(const YAML::Node& node, const std::string& path,
                           std::initializer_list<std::string_view> allowed) {
  require_map(node, path);
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    bool known = false;
    for (auto a : allowed) known = known || key == a;
    if (!known) {
      throw ConfigError("unknown key '" + key + "' in " + (path.empty() ? "top level" : "'" + path + "'") +
                        where(kv.first));
    }
  }
}

template <class T>
T scalar(const YAML::Node& node, const std::string& path) {
  if (!node.IsScalar()) throw ConfigError("'" + path + "' must be a scalar" + where(node));
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("'" + path + "' has an invalid value '" + node.Scalar() + "'" + where(node));
  }
}

template <class T>
void read(const YAML::Node& parent, const char* key, const std::string& path, T& out) {
  if (const auto n = parent[key]) out = scalar<T>(n, path + "." + key);
}

inline Vec vector(const YAML::Node& node, const std::string& path) {
  if (node.IsScalar()) return Vec::Constant(1, scalar<double>(node, path));
  if (!node.IsSequence()) throw ConfigError("'" + path + "' must be a list of numbers" + where(node));
  Vec v(static_cast<Index>(node.size()));
  for (size_t i = 0; i < node.size(); ++i) {
    v(static_cast<Index>(i)) = scalar<double>(node[i], path + "[" + std::to_string(i) + "]");
  }
  return v;
}

/// A list of rows; a scalar is a 1x1 matrix.
inline Mat matrix(const YAML::Node& node, const std::string& path) {
  if (node.IsScalar()) return Mat::Constant(1, 1, scalar<double>(node, path));
  if (!node.IsSequence() || node.size() == 0) {
    throw ConfigError("'" + path + "' must be a non-empty list of rows" + where(node));
  }
  const size_t rows = node.size();
  size_t cols = 0;
  for (size_t r = 0; r < rows; ++r) {
    if (!node[r].IsSequence()) {
      throw ConfigError("'" + path + "' row " + std::to_string(r + 1) + " must be a list" + where(node[r]));
    }
    if (r == 0) cols = node[r].size();
    if (node[r].size() != cols || cols == 0) {
      throw ConfigError("'" + path + "' rows must have equal, nonzero length" + where(node[r]));
    }
  }
  Mat M(static_cast<Index>(rows), static_cast<Index>(cols));
  for (size_t r = 0; r < rows; ++r)
    for (size_t c = 0; c < cols; ++c)
      M(static_cast<Index>(r), static_cast<Index>(c)) =
          scalar<double>(node[r][c], path + "[" + std::to_string(r) + "][" + std::to_string(c) + "]");
  return M;
}

/// Converts library validation failures into configuration errors.
template <class F>
auto validated(const std::string& path, const YAML::Node& node, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("'" + path + "': " + e.what() + where(node));
  }
}

}  // namespace detail

struct ModelConfig {
  std::optional<DguParams> dgu = DguParams{};
  Mat A, B, C;

  bool is_dgu() const { return dgu.has_value(); }
  LtiModel build() const { return dgu ? dgu_model(*dgu) : LtiModel(A, B, C); }
};

struct TrackGain {
  std::string label;
  enum class Source { kMatrix, kSdp, kCare } source = Source::kMatrix;
  Mat K;
};

struct AdaptiveConfig {
  std::string initial;  // label of the starting gain
  AdaptiveOptions options;
};

struct TrackConfig {
  double start = 0.0;
  double horizon = 3.5;
  double output_dt = 1e-3;
  bool start_at_equilibrium = false;
  /// Run the open-loop experiment first and start tracking from its end state.
  bool after_collection = false;
  std::optional<Vec> x0;
  std::vector<std::pair<double, Vec>> reference;
  std::vector<std::pair<double, ModelConfig>> plant_changes;
  std::vector<TrackGain> gains;
  std::optional<AdaptiveConfig> adaptive;
};

struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::string output_dir = "out";
  ModelConfig model;
  std::optional<Mat> Qx, Qz, R;
  ExperimentOptions experiment;
  SdpOptions sdp;
  FlowOptions flow = ProtocolOptions::default_flow();
  std::vector<Mat> initial_gains;
  std::optional<std::string> pack_file;
  std::optional<TrackConfig> track;

  /// Defaults: identity weights, or the DGU study weights for the DGU model.
  WeightSpec weights() const {
    const LtiModel m = model.build();
    Mat qz = Mat::Identity(m.p(), m.p());
    if (model.is_dgu()) qz *= 100.0;
    return WeightSpec(Qx.value_or(Mat::Identity(m.n(), m.n())), Qz.value_or(qz),
                      R.value_or(Mat::Identity(m.m(), m.m())));
  }

  std::uint64_t require_seed() const {
    if (!seed) throw ConfigError("a seed is required (config key 'seed' or --seed)");
    return *seed;
  }
};

namespace detail {

inline DguParams parse_dgu(const YAML::Node& node, const std::string& path, DguParams base) {
  reject_unknown(node, path, {"R", "L", "C", "Y"});
  read(node, "R", path, base.R);
  read(node, "L", path, base.L);
  read(node, "C", path, base.C);
  read(node, "Y", path, base.Y);
  validated(path, node, [&] { return dgu_model(base); });
  return base;
}

inline ModelConfig parse_model(const YAML::Node& node, const std::string& path,
                               const ModelConfig& base) {
  reject_unknown(node, path, {"dgu", "A", "B", "C"});
  ModelConfig mc = base;
  const bool matrices = node["A"] || node["B"] || node["C"];
  if (node["dgu"] && matrices) {
    throw ConfigError("'" + path + "' takes either 'dgu' or A/B/C, not both" + where(node));
  }
  if (node["dgu"]) {
    mc.dgu = parse_dgu(node["dgu"], path + ".dgu", base.dgu.value_or(DguParams{}));
  } else if (matrices) {
    if (!node["A"] || !node["B"] || !node["C"]) {
      throw ConfigError("'" + path + "' needs all of A, B and C" + where(node));
    }
    mc.dgu.reset();
    mc.A = matrix(node["A"], path + ".A");
    mc.B = matrix(node["B"], path + ".B");
    mc.C = matrix(node["C"], path + ".C");
  }
  validated(path, node, [&] { return mc.build(); });
  return mc;
}

inline void parse_experiment(const YAML::Node& node, ExperimentOptions& e) {
  const std::string path = "experiment";
  reject_unknown(node, path, {"variant", "samples", "sample_interval", "window", "hold",
                              "duration", "amplitude", "offset", "x0"});
  if (const auto v = node["variant"]) {
    const auto s = scalar<std::string>(v, path + ".variant");
    if (s == "integral") {
      e.variant = SamplingVariant::kIntegral;
    } else if (s == "derivative") {
      e.variant = SamplingVariant::kDerivative;
    } else {
      throw ConfigError("'experiment.variant' must be 'integral' or 'derivative'" + where(v));
    }
  }
  long long samples = e.samples;
  read(node, "samples", path, samples);
  if (samples < 1) throw ConfigError("'experiment.samples' must be positive" + where(node["samples"]));
  e.samples = static_cast<Index>(samples);
  read(node, "sample_interval", path, e.sample_interval);
  read(node, "window", path, e.window);
  read(node, "hold", path, e.excitation.hold);
  read(node, "duration", path, e.excitation.duration);
  read(node, "amplitude", path, e.excitation.amplitude);
  read(node, "offset", path, e.excitation.offset);
  if (const auto x = node["x0"]) e.x0 = vector(x, path + ".x0");
  for (double v : {e.sample_interval, e.window, e.excitation.hold, e.excitation.duration}) {
    if (!(v > 0.0)) throw ConfigError("experiment intervals and durations must be positive" + where(node));
  }
}

inline void parse_sdp(const YAML::Node& node, SdpOptions& o) {
  const std::string path = "sdp";
  reject_unknown(node, path, {"tol", "max_outer", "mu", "phase_one_flow_steps", "initial_gain"});
  read(node, "tol", path, o.tol);
  read(node, "max_outer", path, o.max_outer);
  read(node, "mu", path, o.mu_factor);
  read(node, "phase_one_flow_steps", path, o.phase_one_flow_steps);
  if (const auto k = node["initial_gain"]) o.initial_gain = matrix(k, path + ".initial_gain");
  if (!(o.tol > 0.0) || o.max_outer < 1 || !(o.mu_factor > 1.0)) {
    throw ConfigError("'sdp' needs tol > 0, max_outer >= 1 and mu > 1" + where(node));
  }
}

inline void parse_flow(const YAML::Node& node, FlowOptions& f, std::vector<Mat>& gains) {
  const std::string path = "flow";
  reject_unknown(node, path, {"alpha", "step", "horizon", "grad_tol", "constraint_renorm_every",
                              "max_steps", "sample_every", "initial_gain", "initial_gains"});
  read(node, "alpha", path, f.alpha);
  read(node, "step", path, f.step);
  read(node, "horizon", path, f.horizon);
  read(node, "grad_tol", path, f.grad_tol);
  read(node, "constraint_renorm_every", path, f.constraint_renorm_every);
  read(node, "max_steps", path, f.max_steps);
  read(node, "sample_every", path, f.sample_every);
  if (node["initial_gain"] && node["initial_gains"]) {
    throw ConfigError("'flow' takes initial_gain or initial_gains, not both" + where(node));
  }
  if (const auto k = node["initial_gain"]) gains = {matrix(k, path + ".initial_gain")};
  if (const auto ks = node["initial_gains"]) {
    if (!ks.IsSequence()) throw ConfigError("'flow.initial_gains' must be a list" + where(ks));
    gains.clear();
    for (size_t i = 0; i < ks.size(); ++i) {
      gains.push_back(matrix(ks[i], path + ".initial_gains[" + std::to_string(i) + "]"));
    }
  }
  if (!(f.horizon > 0.0) || !(f.grad_tol > 0.0) || f.constraint_renorm_every < 1 ||
      f.max_steps < 0 || f.sample_every < 1) {
    throw ConfigError("'flow' options must be positive" + where(node));
  }
}

inline std::vector<std::pair<double, Vec>> parse_reference(const YAML::Node& node,
                                                           const std::string& path) {
  if (!node.IsSequence() || node.size() == 0) {
    throw ConfigError("'" + path + "' must be a list of [time, value...] entries" + where(node));
  }
  std::vector<std::pair<double, Vec>> out;
  for (size_t i = 0; i < node.size(); ++i) {
    const Vec row = vector(node[i], path + "[" + std::to_string(i) + "]");
    if (row.size() < 2) {
      throw ConfigError("'" + path + "' entries need a time and at least one value" + where(node[i]));
    }
    out.push_back({row(0), row.tail(row.size() - 1)});
  }
  return out;
}

inline TrackConfig parse_track(const YAML::Node& node, const ModelConfig& base) {
  const std::string path = "track";
  reject_unknown(node, path, {"start", "horizon", "output_dt", "start_at_equilibrium",
                              "after_collection", "x0", "reference", "plants", "gains", "adaptive"});
  TrackConfig tc;
  read(node, "start", path, tc.start);
  read(node, "horizon", path, tc.horizon);
  read(node, "output_dt", path, tc.output_dt);
  read(node, "start_at_equilibrium", path, tc.start_at_equilibrium);
  read(node, "after_collection", path, tc.after_collection);
  if (const auto x = node["x0"]) tc.x0 = vector(x, path + ".x0");
  if (!node["reference"]) throw ConfigError("'track.reference' is required" + where(node));
  tc.reference = parse_reference(node["reference"], path + ".reference");
  if (const auto ps = node["plants"]) {
    if (!ps.IsSequence()) throw ConfigError("'track.plants' must be a list" + where(ps));
    for (size_t i = 0; i < ps.size(); ++i) {
      const std::string pp = path + ".plants[" + std::to_string(i) + "]";
      reject_unknown(ps[i], pp, {"start", "dgu", "A", "B", "C"});
      if (!ps[i]["start"]) throw ConfigError("'" + pp + ".start' is required" + where(ps[i]));
      const double t = scalar<double>(ps[i]["start"], pp + ".start");
      YAML::Node model_part(YAML::NodeType::Map);
      for (const auto& kv : ps[i]) {
        if (kv.first.as<std::string>() != "start") model_part[kv.first] = kv.second;
      }
      tc.plant_changes.push_back({t, parse_model(model_part, pp, base)});
    }
  }
  if (!node["gains"]) throw ConfigError("'track.gains' is required" + where(node));
  const auto gs = node["gains"];
  require_map(gs, path + ".gains");
  for (const auto& kv : gs) {
    TrackGain g;
    g.label = kv.first.as<std::string>();
    const std::string gp = path + ".gains." + g.label;
    if (kv.second.IsScalar() && (kv.second.Scalar() == "sdp" || kv.second.Scalar() == "care")) {
      g.source = kv.second.Scalar() == "sdp" ? TrackGain::Source::kSdp : TrackGain::Source::kCare;
    } else {
      g.K = matrix(kv.second, gp);
    }
    tc.gains.push_back(std::move(g));
  }
  if (const auto a = node["adaptive"]) {
    const std::string ap = path + ".adaptive";
    reject_unknown(a, ap, {"initial", "alpha", "steps_per_sample", "data_driven"});
    AdaptiveConfig ac;
    if (!a["initial"]) throw ConfigError("'" + ap + ".initial' is required" + where(a));
    ac.initial = scalar<std::string>(a["initial"], ap + ".initial");
    read(a, "alpha", ap, ac.options.alpha);
    read(a, "steps_per_sample", ap, ac.options.steps_per_sample);
    read(a, "data_driven", ap, ac.options.data_driven);
    bool found = false;
    for (const auto& g : tc.gains) found = found || g.label == ac.initial;
    if (!found) throw ConfigError("'" + ap + ".initial' names no gain in track.gains" + where(a));
    if (!(ac.options.alpha > 0.0) || ac.options.steps_per_sample < 1) {
      throw ConfigError("'" + ap + "' needs alpha > 0 and steps_per_sample >= 1" + where(a));
    }
    tc.adaptive = ac;
  }
  if (!(tc.horizon > 0.0) || !(tc.output_dt > 0.0)) {
    throw ConfigError("'track' horizon and output_dt must be positive" + where(node));
  }
  return tc;
}

}  // namespace detail

inline RunConfig parse_config(const YAML::Node& root) {
  RunConfig rc;
  if (!root || root.IsNull()) return rc;
  detail::reject_unknown(root, "", {"seed", "output", "model", "weights", "experiment", "sdp",
                                    "flow", "pack", "track"});
  if (const auto s = root["seed"]) rc.seed = detail::scalar<std::uint64_t>(s, "seed");
  detail::read(root, "output", "", rc.output_dir);
  if (const auto m = root["model"]) rc.model = detail::parse_model(m, "model", rc.model);
  if (const auto w = root["weights"]) {
    detail::reject_unknown(w, "weights", {"Qx", "Qz", "R"});
    if (w["Qx"]) rc.Qx = detail::matrix(w["Qx"], "weights.Qx");
    if (w["Qz"]) rc.Qz = detail::matrix(w["Qz"], "weights.Qz");
    if (w["R"]) rc.R = detail::matrix(w["R"], "weights.R");
    detail::validated("weights", w, [&] {
      const LtiModel m = rc.model.build();
      rc.weights().require_compatible(m.n(), m.m(), m.p());
      return 0;
    });
  }
  if (const auto e = root["experiment"]) detail::parse_experiment(e, rc.experiment);
  if (const auto s = root["sdp"]) detail::parse_sdp(s, rc.sdp);
  if (const auto f = root["flow"]) detail::parse_flow(f, rc.flow, rc.initial_gains);
  if (const auto p = root["pack"]) rc.pack_file = detail::scalar<std::string>(p, "pack");
  if (const auto t = root["track"]) rc.track = detail::parse_track(t, rc.model);
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path);
  } catch (const YAML::BadFile&) {
    throw ConfigError("cannot read config file " + path);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(path + ": " + e.what());
  }
  try {
    return parse_config(root);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// --- pack files --------------------------------------------------------------

inline void write_pack(const std::string& path, const CovariancePack& pack) {
  TextReport r(true);
  r.value("n", pack.n).value("m", pack.m).value("p", pack.p);
  r.text("variant", to_string(pack.provenance.variant));
  r.value("samples", pack.provenance.samples);
  r.value("sample_interval", pack.provenance.sample_interval);
  r.value("window", pack.provenance.window);
  r.matrix("Xbar", pack.Xbar).matrix("Ubar", pack.Ubar);
  r.matrix("Xpbar", pack.Xpbar).matrix("Ybar", pack.Ybar);
  r.write(path);
}

inline CovariancePack read_pack(const std::string& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path);
  } catch (const YAML::Exception& e) {
    throw ConfigError("cannot read pack file " + path + ": " + e.what());
  }
  try {
    detail::reject_unknown(root, "pack", {"n", "m", "p", "variant", "samples", "sample_interval",
                                          "window", "Xbar", "Ubar", "Xpbar", "Ybar"});
    CovariancePack pk;
    for (const char* k : {"n", "m", "p", "Xbar", "Ubar", "Xpbar", "Ybar"}) {
      if (!root[k]) throw ConfigError(std::string("pack is missing '") + k + "'");
    }
    pk.n = detail::scalar<Index>(root["n"], "n");
    pk.m = detail::scalar<Index>(root["m"], "m");
    pk.p = detail::scalar<Index>(root["p"], "p");
    pk.Xbar = detail::matrix(root["Xbar"], "Xbar");
    pk.Ubar = detail::matrix(root["Ubar"], "Ubar");
    pk.Xpbar = detail::matrix(root["Xpbar"], "Xpbar");
    pk.Ybar = detail::matrix(root["Ybar"], "Ybar");
    if (root["variant"]) {
      pk.provenance.variant = detail::scalar<std::string>(root["variant"], "variant") == "derivative"
                                  ? SamplingVariant::kDerivative
                                  : SamplingVariant::kIntegral;
    }
    if (root["samples"]) pk.provenance.samples = detail::scalar<Index>(root["samples"], "samples");
    detail::read(root, "sample_interval", "pack", pk.provenance.sample_interval);
    detail::read(root, "window", "pack", pk.provenance.window);
    detail::validated("pack", root, [&] {
      pk.validate();
      return 0;
    });
    return pk;
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace lqi::io
