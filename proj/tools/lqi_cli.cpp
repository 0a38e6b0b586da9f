// lqi: data collection, synthesis, tracking runs and the DGU demo.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "lqi/errors.hpp"
#include "lqi/flow.hpp"
#include "lqi/io/artifacts.hpp"
#include "lqi/io/config.hpp"
#include "lqi/io/csv.hpp"
#include "lqi/io/text.hpp"
#include "lqi/kernels.hpp"
#include "lqi/lti.hpp"
#include "lqi/param.hpp"
#include "lqi/protocol.hpp"
#include "lqi/sdp.hpp"
#include "lqi/tracking.hpp"

namespace fs = std::filesystem;
using namespace lqi;
using io::RunConfig;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string pack;
  std::uint64_t seed = 0;
  double sdp_tol = 0, sdp_mu = 0;
  int sdp_max_outer = 0;
  double flow_alpha = 0, flow_step = 0, flow_horizon = 0, flow_grad_tol = 0;
  int flow_max_steps = 0, flow_sample_every = 0;
  std::vector<std::string> k0;
  CLI::App* app = nullptr;

  bool given(const char* name) const { return app->get_option(name)->count() > 0; }
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "YAML run configuration")->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "excitation seed (overrides the config)");
  sub->add_option("--out", f.out, "output directory (overrides the config)");
}

void add_pack(CLI::App* sub, Flags& f) {
  sub->add_option("--pack", f.pack, "covariance pack written by collect")->check(CLI::ExistingFile);
}

void add_sdp(CLI::App* sub, Flags& f) {
  sub->add_option("--sdp-tol", f.sdp_tol, "barrier convergence tolerance");
  sub->add_option("--sdp-max-outer", f.sdp_max_outer, "maximum barrier updates");
  sub->add_option("--sdp-mu", f.sdp_mu, "barrier parameter growth factor");
}

void add_flow(CLI::App* sub, Flags& f, bool with_k0) {
  sub->add_option("--flow-alpha", f.flow_alpha, "learning rate (<= 0: automatic)");
  sub->add_option("--flow-step", f.flow_step, "initial RK4 step (<= 0: automatic)");
  sub->add_option("--flow-horizon", f.flow_horizon, "flow time horizon");
  sub->add_option("--flow-grad-tol", f.flow_grad_tol, "stop when the projected gradient norm is below");
  sub->add_option("--flow-max-steps", f.flow_max_steps, "maximum accepted steps");
  sub->add_option("--flow-sample-every", f.flow_sample_every, "record every n-th step");
  if (with_k0) {
    sub->add_option("--k0", f.k0, "initial gain, rows separated by ';', entries by ','");
  }
}

Mat parse_gain(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::stringstream rs(text);
  std::string row;
  while (std::getline(rs, row, ';')) {
    std::vector<double> r;
    std::stringstream es(row);
    std::string entry;
    while (std::getline(es, entry, ',')) {
      try {
        size_t used = 0;
        r.push_back(std::stod(entry, &used));
        if (entry.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(entry);
      } catch (const std::exception&) {
        throw ConfigError("--k0: cannot read '" + entry + "' as a number");
      }
    }
    rows.push_back(r);
  }
  if (rows.empty() || rows.front().empty()) throw ConfigError("--k0 is empty");
  Mat K(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw ConfigError("--k0 rows differ in length");
    for (size_t j = 0; j < rows[i].size(); ++j) K(Index(i), Index(j)) = rows[i][j];
  }
  return K;
}

RunConfig load(const Flags& f) {
  RunConfig rc = f.config.empty() ? RunConfig{} : io::load_config(f.config);
  if (f.given("--seed")) rc.seed = f.seed;
  if (f.given("--out")) rc.output_dir = f.out;
  if (f.app->get_option_no_throw("--pack") && f.given("--pack")) rc.pack_file = f.pack;
  auto has = [&](const char* n) { return f.app->get_option_no_throw(n) && f.given(n); };
  if (has("--sdp-tol")) rc.sdp.tol = f.sdp_tol;
  if (has("--sdp-max-outer")) rc.sdp.max_outer = f.sdp_max_outer;
  if (has("--sdp-mu")) rc.sdp.mu_factor = f.sdp_mu;
  if (has("--flow-alpha")) rc.flow.alpha = f.flow_alpha;
  if (has("--flow-step")) rc.flow.step = f.flow_step;
  if (has("--flow-horizon")) rc.flow.horizon = f.flow_horizon;
  if (has("--flow-grad-tol")) rc.flow.grad_tol = f.flow_grad_tol;
  if (has("--flow-max-steps")) rc.flow.max_steps = f.flow_max_steps;
  if (has("--flow-sample-every")) rc.flow.sample_every = f.flow_sample_every;
  if (has("--k0")) {
    rc.initial_gains.clear();
    for (const auto& k : f.k0) rc.initial_gains.push_back(parse_gain(k));
  }
  if (!(rc.sdp.tol > 0.0) || rc.sdp.max_outer < 1 || !(rc.sdp.mu_factor > 1.0)) {
    throw ConfigError("SDP options need tol > 0, max outer >= 1 and mu > 1");
  }
  if (!(rc.flow.horizon > 0.0) || !(rc.flow.grad_tol > 0.0) || rc.flow.max_steps < 0 ||
      rc.flow.sample_every < 1) {
    throw ConfigError("flow options must be positive");
  }
  return rc;
}

std::string out_path(const RunConfig& rc, const std::string& name) {
  fs::create_directories(rc.output_dir);
  return (fs::path(rc.output_dir) / name).string();
}

std::string row(const Mat& K) {
  std::string s = "[";
  for (Index r = 0; r < K.rows(); ++r) {
    for (Index c = 0; c < K.cols(); ++c) s += (r || c ? ", " : "") + io::num(K(r, c));
    if (r + 1 < K.rows()) s += ";";
  }
  return s + "]";
}

struct Collected {
  InputSignal excitation;
  DataBatch batch;
  CovariancePack pack;
  OpenLoopRecord record;
};

Collected collect(const RunConfig& rc, const LtiModel& model, double record_dt = 1e-3) {
  const std::uint64_t seed = rc.require_seed();
  return run_stage("collect", [&] {
    Collected c;
    ExcitationOptions eo = rc.experiment.excitation;
    eo.seed = seed;
    const auto& e = rc.experiment;
    const Vec x0 = e.x0.size() ? e.x0 : Vec::Zero(model.n());
    if (x0.size() != model.n()) throw ConfigError("experiment.x0 must have n entries");
    c.excitation = make_excitation(model.m(), eo);
    c.batch = e.variant == SamplingVariant::kIntegral
                  ? collect_integral_data(model, c.excitation, e.samples, e.sample_interval, e.window, x0)
                  : collect_derivative_data(model, c.excitation, e.samples, e.sample_interval, x0);
    c.pack = build_covariances(c.batch);
    c.record = simulate_open_loop(model, c.excitation, x0, record_dt, eo.duration);
    return c;
  });
}

/// Pack from --pack / config, or a fresh experiment.
CovariancePack obtain_pack(const RunConfig& rc, const LtiModel& model) {
  if (rc.pack_file) return run_stage("load-pack", [&] { return io::read_pack(*rc.pack_file); });
  return collect(rc, model).pack;
}

std::optional<Mat> reference_gain(const LtiModel& model, const WeightSpec& w,
                                  const CovariancePack& pack) {
  if (model.n() != pack.n || model.m() != pack.m || model.p() != pack.p) return std::nullopt;
  try {
    const AugmentedModel aug = augment(model);
    return lqr_gain(aug.Aa, aug.Ba, w.Qa(), w.R());
  } catch (const Error&) {
    return std::nullopt;
  }
}

void print_rank(const PeRankReport& pe) {
  std::cout << fmt::format("rank {}/{} {}\n", pe.rank, pe.required, pe.ok ? "OK" : "FAILED");
}

int cmd_collect(const Flags& f) {
  const RunConfig rc = load(f);
  const LtiModel model = rc.model.build();
  const Collected c = collect(rc, model);
  io::write_batch(out_path(rc, "batch.yaml"), c.batch);
  io::write_pack(out_path(rc, "pack.yaml"), c.pack);
  io::collection_table(c.record, rc.model.is_dgu()).write(out_path(rc, "collection.csv"));
  for (const auto& w : c.batch.warnings) std::cout << "warning: " << w << "\n";
  const PeRankReport pe = check_pe_rank(c.pack);
  print_rank(pe);
  if (!pe.ok) throw RankError("collected data are not persistently exciting", pe.rank, pe.required, 0.0);
  return 0;
}

int cmd_check(const Flags& f) {
  const RunConfig rc = load(f);
  const LtiModel model = rc.model.build();
  const WeightSpec w = run_stage("weights", [&] { return rc.weights(); });
  const CovariancePack pack = obtain_pack(rc, model);
  const PeRankReport pe = check_pe_rank(pack);
  const StabilizabilityReport st = check_aug_stabilizable(model);
  const DetectabilityReport de = check_aug_detectable(model, w);
  auto line = [](const std::string& name, bool ok, const std::string& detail) {
    std::cout << fmt::format("{:<30} {:<6} {}\n", name, ok ? "PASS" : "FAIL", detail);
  };
  std::cout << fmt::format("{:<30} {:<6} {}\n", "check", "result", "detail");
  line("data rank [U; X]", pe.ok, fmt::format("{}/{}", pe.rank, pe.required));
  line("augmented stabilizability", st.ok,
       fmt::format("PBH {}, rank [[A, B], [C, 0]] {}/{}", st.pbh_ok ? "ok" : "fails", st.rank,
                   st.required_rank));
  line("augmented detectability", de.ok,
       de.failing_eigenvalue ? fmt::format("unobservable mode {:.12g}{:+.12g}i", de.failing_eigenvalue->real(),
                                           de.failing_eigenvalue->imag())
                             : std::string("PBH ok"));
  if (!(pe.ok && st.ok && de.ok)) throw PreconditionError("preflight checks failed");
  return 0;
}

int cmd_synth_sdp(const Flags& f) {
  const RunConfig rc = load(f);
  const LtiModel model = rc.model.build();
  const WeightSpec w = run_stage("weights", [&] { return rc.weights(); });
  const CovariancePack pack = obtain_pack(rc, model);
  SdpSolution sol;
  Mat K;
  run_stage("synth-sdp", [&] {
    sol = solve_sdp(assemble_sdp(pack, w), rc.sdp);
    K = extract_gain(sol, pack);
    return 0;
  });
  io::TextReport r;
  io::report_sdp(r, sol, K);
  const auto ref = reference_gain(model, w, pack);
  if (ref) r.matrix("K_model_based", *ref).value("gain_error", (K - *ref).norm());
  r.write(out_path(rc, "sdp.yaml"));
  std::cout << "K = " << row(K) << "\n";
  if (ref) std::cout << "||K - K_model_based||_F = " << io::num((K - *ref).norm()) << "\n";
  return 0;
}

int cmd_synth_pg(const Flags& f) {
  const RunConfig rc = load(f);
  const LtiModel model = rc.model.build();
  const WeightSpec w = run_stage("weights", [&] { return rc.weights(); });
  const CovariancePack pack = obtain_pack(rc, model);
  if (rc.initial_gains.empty()) throw ConfigError("no initial gain (flow.initial_gain or --k0)");
  const auto ref = reference_gain(model, w, pack);
  const PackRef pk = share(pack);
  io::TextReport r;
  bool all_converged = true;
  for (size_t i = 0; i < rc.initial_gains.size(); ++i) {
    const Mat& K0 = rc.initial_gains[i];
    const std::string label = "K" + std::to_string(i + 1);
    const FlowTrajectory traj = run_stage("synth-pg", [&] {
      const Parameterizer G0 = gain_to_parameterizer(K0, pk);
      if (!is_in_G_set(G0)) throw DomainError("initial gain " + row(K0) + " does not stabilize the data closed loop");
      return integrate_flow(G0, w, rc.flow);
    });
    const std::vector<double> ratio = ref ? residual_ratios(traj, *ref) : std::vector<double>{};
    io::flow_table(traj, ratio).write(out_path(rc, "flow_" + label + ".csv"));
    const FlowSample& last = traj.last();
    r.section(label);
    r.matrix("K0", K0).matrix("K", last.K).value("cost", last.cost).value("grad_norm", last.grad_norm);
    r.flag("converged", traj.converged).value("steps", traj.steps).value("rejected_steps", traj.rejected_steps);
    r.value("alpha", traj.alpha).value("flow_time", last.t);
    if (ref) r.value("residual_ratio", ratio.back());
    r.end();
    std::cout << fmt::format("{}: K = {} after {} steps{}\n", label, row(last.K), traj.steps,
                             traj.converged ? "" : " (not converged)");
    all_converged = all_converged && traj.converged;
  }
  if (ref) r.matrix("K_model_based", *ref);
  r.write(out_path(rc, "pg.yaml"));
  if (!all_converged) {
    throw StageError("synth-pg", "flow stopped before reaching the gradient tolerance", 4);
  }
  return 0;
}

int cmd_track(const Flags& f) {
  const RunConfig rc = load(f);
  if (!rc.track) throw ConfigError("config has no 'track' section");
  const io::TrackConfig& tc = *rc.track;
  const LtiModel model = rc.model.build();
  const WeightSpec w = run_stage("weights", [&] { return rc.weights(); });
  const bool dgu = rc.model.is_dgu();

  std::optional<Collected> col;
  std::optional<CovariancePack> pack;
  bool need_pack = false;
  for (const auto& g : tc.gains) need_pack = need_pack || g.source == io::TrackGain::Source::kSdp;
  if (tc.after_collection) {
    col = collect(rc, model, tc.output_dt);
    pack = col->pack;
  } else if (need_pack) {
    pack = obtain_pack(rc, model);
  }

  Scenario sc;
  sc.start = tc.start;
  sc.horizon = tc.horizon;
  sc.output_dt = tc.output_dt;
  sc.plants = {{tc.start, model}};
  for (const auto& [t, mc] : tc.plant_changes) sc.plants.push_back({t, mc.build()});
  sc.reference.breakpoints = tc.reference;
  sc.start_at_equilibrium = tc.start_at_equilibrium;
  if (tc.x0) sc.x0 = *tc.x0;
  if (col) {
    const double t_end = col->record.t.back();
    if (tc.start > t_end + 1e-12) throw ConfigError("track.start lies after the collection window");
    Index j = 0;
    while (j + 1 < col->record.X.cols() && col->record.t[size_t(j)] < tc.start - 1e-12) ++j;
    sc.x0 = Vec(col->record.X.col(j));
  }
  run_stage("track", [&] {
    sc.validate();
    return 0;
  });

  std::vector<std::pair<std::string, Mat>> gains;
  for (const auto& g : tc.gains) {
    if (g.source == io::TrackGain::Source::kMatrix) {
      gains.push_back({g.label, g.K});
    } else if (g.source == io::TrackGain::Source::kCare) {
      gains.push_back({g.label, run_stage("care", [&] {
                         const AugmentedModel aug = augment(model);
                         return lqr_gain(aug.Aa, aug.Ba, w.Qa(), w.R());
                       })});
    } else {
      gains.push_back({g.label, run_stage("synth-sdp", [&] {
                         return extract_gain(solve_sdp(assemble_sdp(*pack, w), rc.sdp), *pack);
                       })});
    }
  }

  std::vector<io::LabeledMetrics> metrics;
  auto emit = [&](const std::string& label, const TrackingRecord& rec) {
    const io::CsvTable table =
        col ? io::collection_then_tracking(col->record, rec, dgu) : io::tracking_table(rec, dgu);
    table.write(out_path(rc, "track_" + label + ".csv"));
    if (col && rec.adaptive) io::tracking_table(rec, dgu).write(out_path(rc, "track_" + label + "_gains.csv"));
    metrics.push_back({label, segment_metrics(rec, sc)});
    for (const auto& note : rec.notes) std::cout << label << ": " << note << "\n";
  };
  for (const auto& [label, K] : gains) {
    emit(label, run_stage("track", [&] { return simulate_lqi(sc, Controller::fixed(K)); }));
  }
  if (tc.adaptive) {
    Mat K0;
    for (const auto& [label, K] : gains) {
      if (label == tc.adaptive->initial) K0 = K;
    }
    const Controller ctl{K0, tc.adaptive->options, w};
    emit("adaptive", run_stage("track", [&] { return simulate_lqi(sc, ctl); }));
  }
  io::metrics_table(metrics).write(out_path(rc, "track_metrics.csv"));

  std::cout << fmt::format("{:<12} {:>8} {:>10} {:>10} {:>14} {:>12} {:>12}\n", "controller", "segment",
                           "start", "end", "peak_deviation", "overshoot", "final_error");
  for (const auto& lm : metrics) {
    for (size_t s = 0; s < lm.metrics.size(); ++s) {
      const auto& m = lm.metrics[s];
      std::cout << fmt::format("{:<12} {:>8} {:>10} {:>10} {:>14} {:>12} {:>12}\n", lm.label, s + 1,
                               io::num(m.start), io::num(m.end), io::num(m.peak_deviation),
                               io::num(m.overshoot), io::num(m.final_error));
    }
  }
  return 0;
}

int cmd_dgu_demo(const Flags& f) {
  const RunConfig rc = load(f);
  if (!rc.model.is_dgu()) throw ConfigError("dgu-demo needs the 'model.dgu' form");
  ProtocolOptions o;
  o.plant = *rc.model.dgu;
  const WeightSpec w = run_stage("weights", [&] { return rc.weights(); });
  o.Qx = w.Qx();
  o.Qz = w.Qz();
  o.R = w.R();
  o.experiment = rc.experiment;
  o.sdp = rc.sdp;
  o.flow = rc.flow;
  if (!rc.initial_gains.empty()) o.initial_gains = rc.initial_gains;
  const std::uint64_t seed = rc.require_seed();

  const auto t0 = std::chrono::steady_clock::now();
  const ProtocolBundle b = run_paper_protocol(seed, o);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  io::write_batch(out_path(rc, "batch.yaml"), b.batch);
  io::write_pack(out_path(rc, "pack.yaml"), b.pack);
  io::collection_table(b.collection, true).write(out_path(rc, "collection.csv"));
  io::TextReport sdp;
  io::report_sdp(sdp, b.sdp, b.K_sdp);
  sdp.matrix("K_model_based", b.K_care).value("gain_error", b.gain_error);
  sdp.write(out_path(rc, "sdp.yaml"));
  for (size_t i = 0; i < b.flows.size(); ++i) {
    io::flow_table(b.flows[i].trajectory, b.flows[i].residual_ratio)
        .write(out_path(rc, "flow_K" + std::to_string(i + 1) + ".csv"));
  }
  io::collection_then_tracking(b.collection, b.tracking, true).write(out_path(rc, "fig1.csv"));
  std::vector<io::LabeledMetrics> fig3;
  for (const auto& run : b.load_runs) {
    io::tracking_table(run.record, true).write(out_path(rc, "fig3_" + run.label + ".csv"));
    fig3.push_back({run.label, run.metrics});
  }
  io::metrics_table(fig3).write(out_path(rc, "fig3_metrics.csv"));
  io::metrics_table({{"K_sdp", b.tracking_metrics}}).write(out_path(rc, "fig1_metrics.csv"));

  io::TextReport s;
  s.value("seed", seed);
  s.value("data_rank", b.pe.rank).value("data_rank_required", b.pe.required);
  s.matrix("K_care", b.K_care).value("care_cost", b.care_cost);
  s.matrix("K_sdp", b.K_sdp).value("gain_error", b.gain_error);
  s.section("flows");
  for (size_t i = 0; i < b.flows.size(); ++i) {
    const auto& fr = b.flows[i];
    s.section("K" + std::to_string(i + 1));
    s.matrix("K0", fr.K0).matrix("K", fr.trajectory.last().K);
    s.flag("converged", fr.trajectory.converged).value("steps", fr.trajectory.steps);
    s.value("residual_ratio", fr.residual_ratio.back());
    s.end();
  }
  s.end();
  s.section("tracking");
  for (const auto& m : b.tracking_metrics) {
    s.section(fmt::format("t{}", io::num(m.end)));
    s.value("reference", m.reference).value("final_error", m.final_error);
    s.value("relative_error", m.final_error / std::abs(m.reference));
    s.end();
  }
  s.end();
  s.write(out_path(rc, "summary.yaml"));

  std::cout << fmt::format("data rank           {}/{}\n", b.pe.rank, b.pe.required);
  std::cout << "K_care              " << row(b.K_care) << "\n";
  std::cout << "K_sdp               " << row(b.K_sdp) << "\n";
  std::cout << "||K_sdp - K_care||  " << io::num(b.gain_error) << "\n";
  for (size_t i = 0; i < b.flows.size(); ++i) {
    const auto& fr = b.flows[i];
    std::cout << fmt::format("flow from K{}        {} steps, residual ratio {}\n", i + 1,
                             fr.trajectory.steps, io::num(fr.residual_ratio.back()));
  }
  for (const auto& m : b.tracking_metrics) {
    std::cout << fmt::format("tracking to {:>5} V  error {} V at t = {}\n", io::num(m.reference),
                             io::num(m.final_error), io::num(m.end));
  }
  for (const auto& run : b.load_runs) {
    std::cout << fmt::format("load study {:<9}", run.label);
    for (size_t i = 1; i < run.metrics.size(); ++i) {
      std::cout << fmt::format(" overshoot@{}s {}", io::num(run.metrics[i].start),
                               io::num(run.metrics[i].overshoot));
    }
    std::cout << "\n";
  }
  std::cout << fmt::format("elapsed             {:.2f} s\n", elapsed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-driven LQI synthesis and simulation"};
  app.require_subcommand(1);
  Flags f;

  struct Command {
    const char* name;
    const char* help;
    bool pack, sdp, flow;
    int (*run)(const Flags&);
  };
  const Command commands[] = {
      {"collect", "run the open-loop experiment and write data and covariance files", false, false, false, cmd_collect},
      {"check", "verify data rank, stabilizability and detectability", true, false, false, cmd_check},
      {"synth-sdp", "synthesize the gain by semidefinite programming", true, true, false, cmd_synth_sdp},
      {"synth-pg", "synthesize the gain by the projected gradient flow", true, false, true, cmd_synth_pg},
      {"track", "simulate reference tracking scenarios", true, true, false, cmd_track},
      {"dgu-demo", "run the complete DGU experiment", false, true, true, cmd_dgu_demo},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, f);
    if (c.pack) add_pack(sub, f);
    if (c.sdp) add_sdp(sub, f);
    if (c.flow) add_flow(sub, f, std::string(c.name) == "synth-pg");
    subs.push_back({sub, &c});
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (const auto& [sub, cmd] : subs) {
    if (!sub->parsed()) continue;
    f.app = sub;
    try {
      return cmd->run(f);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return exit_code_for(e);
    }
  }
  return 1;
}
