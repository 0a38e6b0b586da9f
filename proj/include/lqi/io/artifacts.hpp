#pragma once

// Tables and reports written by the command-line tool.

#include <limits>
#include <string>
#include <vector>

#include "lqi/flow.hpp"
#include "lqi/io/csv.hpp"
#include "lqi/io/text.hpp"
#include "lqi/lti.hpp"
#include "lqi/sdp.hpp"
#include "lqi/tracking.hpp"

namespace lqi::io {

/// Column names of the plant state; "v", "i" for the two-state converter.
inline std::vector<std::string> state_names(Index n, bool dgu) {
  if (dgu && n == 2) return {"v", "i"};
  return numbered("x", n);
}

inline std::vector<std::string> stacked_names(Index n, Index m, Index p, bool dgu) {
  std::vector<std::string> h = state_names(n, dgu);
  for (auto& s : p == 1 ? std::vector<std::string>{"z"} : numbered("z", p)) h.push_back(s);
  for (auto& s : m == 1 ? std::vector<std::string>{"u"} : numbered("u", m)) h.push_back(s);
  for (auto& s : p == 1 ? std::vector<std::string>{"r"} : numbered("r", p)) h.push_back(s);
  return h;
}

/// t, states, outputs of the open-loop experiment.
inline CsvTable collection_table(const OpenLoopRecord& rec, bool dgu) {
  const Index n = rec.X.rows(), m = rec.U.rows(), p = rec.Y.rows();
  std::vector<std::string> h{"t"};
  for (auto& s : state_names(n, dgu)) h.push_back(s);
  for (auto& s : numbered("u", m)) h.push_back(s);
  for (auto& s : numbered("y", p)) h.push_back(s);
  CsvTable table(h);
  for (Index j = 0; j < rec.X.cols(); ++j) {
    std::vector<double> row{rec.t[static_cast<size_t>(j)]};
    for (Index i = 0; i < n; ++i) row.push_back(rec.X(i, j));
    for (Index i = 0; i < m; ++i) row.push_back(rec.U(i, j));
    for (Index i = 0; i < p; ++i) row.push_back(rec.Y(i, j));
    table.add_row(row);
  }
  return table;
}

/// t, states, integrator, input, reference; gain entries for adaptive runs.
inline CsvTable tracking_table(const TrackingRecord& rec, bool dgu) {
  const Index n = rec.X.rows(), m = rec.U.rows(), p = rec.Z.rows();
  std::vector<std::string> h{"t"};
  for (auto& s : stacked_names(n, m, p, dgu)) h.push_back(s);
  if (rec.adaptive) {
    for (auto& s : numbered("k_", rec.K.cols())) h.push_back(s);
  }
  CsvTable table(h);
  for (Index j = 0; j < rec.size(); ++j) {
    std::vector<double> row{rec.t[static_cast<size_t>(j)]};
    for (Index i = 0; i < n; ++i) row.push_back(rec.X(i, j));
    for (Index i = 0; i < p; ++i) row.push_back(rec.Z(i, j));
    for (Index i = 0; i < m; ++i) row.push_back(rec.U(i, j));
    for (Index i = 0; i < p; ++i) row.push_back(rec.R(i, j));
    if (rec.adaptive) {
      for (Index c = 0; c < rec.K.cols(); ++c) row.push_back(rec.K(j, c));
    }
    table.add_row(row);
  }
  return table;
}

/// Open-loop collection followed by closed-loop tracking in one table. The
/// integrator is idle and the reference undefined (blank) during collection.
inline CsvTable collection_then_tracking(const OpenLoopRecord& col, const TrackingRecord& rec,
                                         bool dgu) {
  const Index n = rec.X.rows(), m = rec.U.rows(), p = rec.Z.rows();
  std::vector<std::string> h{"t"};
  for (auto& s : stacked_names(n, m, p, dgu)) h.push_back(s);
  CsvTable table(h);
  const double t_switch = rec.t.empty() ? std::numeric_limits<double>::infinity() : rec.t.front();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (Index j = 0; j < col.X.cols(); ++j) {
    const double t = col.t[static_cast<size_t>(j)];
    if (t >= t_switch - 1e-12) break;
    std::vector<double> row{t};
    for (Index i = 0; i < n; ++i) row.push_back(col.X(i, j));
    for (Index i = 0; i < p; ++i) row.push_back(0.0);
    for (Index i = 0; i < m; ++i) row.push_back(col.U(i, j));
    for (Index i = 0; i < p; ++i) row.push_back(nan);
    table.add_row(row);
  }
  for (Index j = 0; j < rec.size(); ++j) {
    std::vector<double> row{rec.t[static_cast<size_t>(j)]};
    for (Index i = 0; i < n; ++i) row.push_back(rec.X(i, j));
    for (Index i = 0; i < p; ++i) row.push_back(rec.Z(i, j));
    for (Index i = 0; i < m; ++i) row.push_back(rec.U(i, j));
    for (Index i = 0; i < p; ++i) row.push_back(rec.R(i, j));
    table.add_row(row);
  }
  return table;
}

/// Flow samples; the residual column is present when a reference gain is known.
inline CsvTable flow_table(const FlowTrajectory& traj, const std::vector<double>& residual_ratio) {
  const Index N = traj.samples.empty() ? 0 : traj.samples.front().K.size();
  std::vector<std::string> h{"t", "cost", "grad_norm"};
  for (auto& s : numbered("k_", N)) h.push_back(s);
  const bool with_ratio = !residual_ratio.empty();
  if (with_ratio) h.push_back("residual_ratio");
  CsvTable table(h);
  for (size_t j = 0; j < traj.samples.size(); ++j) {
    const FlowSample& s = traj.samples[j];
    std::vector<double> row{s.t, s.cost, s.grad_norm};
    for (Index r = 0; r < s.K.rows(); ++r)
      for (Index c = 0; c < s.K.cols(); ++c) row.push_back(s.K(r, c));
    if (with_ratio) row.push_back(residual_ratio[j]);
    table.add_row(row);
  }
  return table;
}

struct LabeledMetrics {
  std::string label;
  std::vector<SegmentMetrics> metrics;
};

inline CsvTable metrics_table(const std::vector<LabeledMetrics>& runs) {
  CsvTable table({"controller", "segment", "start", "end", "reference", "peak_deviation",
                  "overshoot", "final_error"});
  for (const auto& run : runs) {
    for (size_t s = 0; s < run.metrics.size(); ++s) {
      const SegmentMetrics& m = run.metrics[s];
      table.add_cells({run.label, std::to_string(s + 1), num(m.start), num(m.end), num(m.reference),
                       num(m.peak_deviation), num(m.overshoot), num(m.final_error)});
    }
  }
  return table;
}

inline void write_batch(const std::string& path, const DataBatch& batch) {
  TextReport r(true);
  r.text("variant", to_string(batch.variant));
  r.value("samples", batch.samples());
  r.value("sample_interval", batch.sample_interval);
  r.value("window", batch.window);
  r.matrix("X", batch.X).matrix("U", batch.U).matrix("Xp", batch.Xp).matrix("Y", batch.Y);
  r.strings("warnings", batch.warnings);
  r.write(path);
}

inline void report_sdp(TextReport& r, const SdpSolution& sol, const Mat& K) {
  r.matrix("K", K);
  r.value("objective", sol.objective);
  r.flag("converged", sol.converged);
  r.value("outer_iterations", sol.outer_iterations);
  r.value("newton_iterations", sol.barrier_iterations);
  r.value("duality_gap_estimate", sol.duality_gap_estimate);
  r.value("equality_residual", sol.equality_residual);
  r.vector("cone_margins", Eigen::Map<const Vec>(sol.cone_margins.data(),
                                                  static_cast<Index>(sol.cone_margins.size())));
  r.value("stability_violations", sol.stability_violations);
  r.matrix("W", sol.W).matrix("Z", sol.Z).matrix("S", sol.S);
}

}  // namespace lqi::io
