#pragma once

// Plant definition, integral augmentation, exact simulation under
// piecewise-constant inputs, experiment data collection and assumption
// checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lqi/errors.hpp"
#include "lqi/kernels.hpp"

namespace lqi {

/// Continuous-time plant x' = A x + B u, y = C x.
class LtiModel {
 public:
  LtiModel() = default;
  LtiModel(Mat A, Mat B, Mat C) : A_(std::move(A)), B_(std::move(B)), C_(std::move(C)) {
    require_square(A_, "A");
    if (B_.rows() != A_.rows()) {
      throw DimensionError("B must have " + std::to_string(A_.rows()) +
                           " rows, got " + shape_of(B_));
    }
    if (C_.cols() != A_.rows()) {
      throw DimensionError("C must have " + std::to_string(A_.rows()) +
                           " columns, got " + shape_of(C_));
    }
    require_finite(A_, "A");
    require_finite(B_, "B");
    require_finite(C_, "C");
  }

  const Mat& A() const { return A_; }
  const Mat& B() const { return B_; }
  const Mat& C() const { return C_; }
  Index n() const { return A_.rows(); }
  Index m() const { return B_.cols(); }
  Index p() const { return C_.rows(); }

  /// Integral tracking needs at least as many inputs as tracked outputs.
  bool tracking_dims_ok() const { return p() <= m(); }

  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (!tracking_dims_ok()) {
      w.push_back("more tracked outputs (" + std::to_string(p()) +
                  ") than inputs (" + std::to_string(m()) +
                  "): integral tracking synthesis will be rejected");
    }
    return w;
  }

 private:
  Mat A_, B_, C_;
};

/// Error-coordinate augmentation Aa = [[A, 0], [-C, 0]], Ba = [[B], [0]].
struct AugmentedModel {
  Mat Aa;
  Mat Ba;
  LtiModel base;

  Index states() const { return Aa.rows(); }
};

inline AugmentedModel augment(const LtiModel& model) {
  const Index n = model.n(), m = model.m(), p = model.p();
  AugmentedModel aug;
  aug.Aa = Mat::Zero(n + p, n + p);
  aug.Aa.topLeftCorner(n, n) = model.A();
  aug.Aa.bottomLeftCorner(p, n) = -model.C();
  aug.Ba = Mat::Zero(n + p, m);
  aug.Ba.topRows(n) = model.B();
  aug.base = model;
  return aug;
}

/// Weights of the augmented cost: Qa = diag(Qx, Qz) on (x, z), R on u.
class WeightSpec {
 public:
  WeightSpec() = default;
  WeightSpec(Mat Qx, Mat Qz, Mat R) : Qx_(std::move(Qx)), Qz_(std::move(Qz)), R_(std::move(R)) {
    require_square(Qx_, "Qx");
    require_square(Qz_, "Qz");
    require_square(R_, "R");
    if (!is_symmetric(Qx_) || min_symmetric_eigenvalue(Qx_) < -1e-12 * (1.0 + Qx_.norm())) {
      throw PreconditionError("Qx must be symmetric positive semidefinite");
    }
    if (!is_positive_definite(Qz_)) throw PreconditionError("Qz must be positive definite");
    if (!is_positive_definite(R_)) throw PreconditionError("R must be positive definite");
  }

  const Mat& Qx() const { return Qx_; }
  const Mat& Qz() const { return Qz_; }
  const Mat& R() const { return R_; }

  Mat Qa() const {
    const Index n = Qx_.rows(), p = Qz_.rows();
    Mat Q = Mat::Zero(n + p, n + p);
    Q.topLeftCorner(n, n) = Qx_;
    Q.bottomRightCorner(p, p) = Qz_;
    return Q;
  }

  void require_compatible(Index n, Index m, Index p) const {
    if (Qx_.rows() != n || Qz_.rows() != p || R_.rows() != m) {
      throw DimensionError("weights are sized for (n, m, p) = (" +
                           std::to_string(Qx_.rows()) + ", " + std::to_string(R_.rows()) +
                           ", " + std::to_string(Qz_.rows()) + "), model has (" +
                           std::to_string(n) + ", " + std::to_string(m) + ", " +
                           std::to_string(p) + ")");
    }
  }

 private:
  Mat Qx_, Qz_, R_;
};

/// Piecewise-constant input: column k of `levels` holds on [k*hold, (k+1)*hold).
struct InputSignal {
  Mat levels;
  double hold = 0.02;

  double duration() const { return hold * static_cast<double>(levels.cols()); }

  Index index_at(double t) const {
    const auto k = static_cast<Index>(std::floor(t / hold + 1e-9));
    if (t < -1e-12 || k >= levels.cols()) {
      throw InputError("input signal queried at t = " + std::to_string(t) +
                       " outside [0, " + std::to_string(duration()) + ")");
    }
    return std::max<Index>(k, 0);
  }

  Vec at(double t) const { return levels.col(index_at(t)); }
};

struct ExcitationOptions {
  double duration = 1.0;
  double hold = 0.02;
  double amplitude = 100.0;
  double offset = 0.0;
  std::uint64_t seed = 0;
};

/// Uniform random levels in offset +/- amplitude, one draw per hold interval.
inline InputSignal make_excitation(Index m, const ExcitationOptions& opts) {
  if (!(opts.hold > 0.0) || !(opts.duration > 0.0)) {
    throw InputError("excitation hold and duration must be positive");
  }
  const auto count = static_cast<Index>(std::ceil(opts.duration / opts.hold - 1e-9));
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  InputSignal sig;
  sig.hold = opts.hold;
  sig.levels.resize(m, count);
  for (Index k = 0; k < count; ++k) {
    for (Index i = 0; i < m; ++i) sig.levels(i, k) = opts.offset + opts.amplitude * dist(rng);
  }
  return sig;
}

/// Exact zero-order-hold simulation; column k of the result is x(k*dt).
inline Mat simulate_zoh(const LtiModel& model, const Mat& u_samples, const Vec& x0,
                        double dt) {
  if (!(dt > 0.0)) throw InputError("dt must be positive");
  const Index n = model.n(), m = model.m();
  if (u_samples.rows() != m) throw DimensionError("input samples must have m rows");
  if (x0.size() != n) throw DimensionError("x0 must have n entries");
  Mat M = Mat::Zero(n + m, n + m);
  M.topLeftCorner(n, n) = model.A();
  M.topRightCorner(n, m) = model.B();
  const Mat E = matrix_exponential(M, dt);
  const Mat Ad = E.topLeftCorner(n, n);
  const Mat Bd = E.topRightCorner(n, m);
  Mat X(n, u_samples.cols() + 1);
  X.col(0) = x0;
  for (Index k = 0; k < u_samples.cols(); ++k) {
    X.col(k + 1) = Ad * X.col(k) + Bd * u_samples.col(k);
  }
  return X;
}

namespace detail {

struct MarchResult {
  std::vector<double> times;
  Mat X;     // x(t_k)
  Mat Xint;  // int_0^{t_k} x
  Mat Uint;  // int_0^{t_k} u
};

inline std::vector<double> merge_times(std::vector<double> t, double scale) {
  std::sort(t.begin(), t.end());
  std::vector<double> out;
  for (double v : t) {
    if (out.empty() || v - out.back() > 1e-12 * scale) out.push_back(v);
  }
  return out;
}

inline Index find_time(const std::vector<double>& grid, double t, double scale) {
  auto it = std::lower_bound(grid.begin(), grid.end(), t - 1e-12 * scale);
  if (it == grid.end() || std::abs(*it - t) > 1e-12 * scale) {
    throw NumericalError("time grid lookup failed");
  }
  return static_cast<Index>(it - grid.begin());
}

/// Marches the plant across hold boundaries and the requested times, tracking
/// state, state integral and input integral in closed form.
inline MarchResult march(const LtiModel& model, const InputSignal& sig, const Vec& x0,
                         std::vector<double> query) {
  const Index n = model.n(), m = model.m();
  const double horizon = *std::max_element(query.begin(), query.end());
  const double scale = std::max(1.0, horizon);
  if (horizon > sig.duration() * (1.0 + 1e-12) + 1e-12) {
    throw InputError("experiment horizon " + std::to_string(horizon) +
                     " s exceeds excitation duration " + std::to_string(sig.duration()) + " s");
  }
  for (Index k = 0; k <= sig.levels.cols(); ++k) {
    const double tk = sig.hold * static_cast<double>(k);
    if (tk < horizon) query.push_back(tk);
  }
  query.push_back(0.0);
  MarchResult r;
  r.times = merge_times(std::move(query), scale);
  const auto N = static_cast<Index>(r.times.size());
  r.X.resize(n, N);
  r.Xint.resize(n, N);
  r.Uint.resize(m, N);

  // d/dt [x; xi; u] = [[A, 0, B], [I, 0, 0], [0, 0, 0]] [x; xi; u]
  Mat M = Mat::Zero(2 * n + m, 2 * n + m);
  M.block(0, 0, n, n) = model.A();
  M.block(0, 2 * n, n, m) = model.B();
  M.block(n, 0, n, n) = Mat::Identity(n, n);

  Vec x = x0;
  Vec xi = Vec::Zero(n);
  Vec ui = Vec::Zero(m);
  r.X.col(0) = x;
  r.Xint.col(0) = xi;
  r.Uint.col(0) = ui;
  for (Index k = 1; k < N; ++k) {
    const double a = r.times[static_cast<size_t>(k - 1)];
    const double b = r.times[static_cast<size_t>(k)];
    const Vec u = sig.at(0.5 * (a + b));
    const Mat E = matrix_exponential(M, b - a);
    Vec z(2 * n + m);
    z << x, Vec::Zero(n), u;
    const Vec zn = E * z;
    x = zn.head(n);
    xi += zn.segment(n, n);
    ui += u * (b - a);
    r.X.col(k) = x;
    r.Xint.col(k) = xi;
    r.Uint.col(k) = ui;
  }
  return r;
}

}  // namespace detail

enum class SamplingVariant { kDerivative, kIntegral };

inline const char* to_string(SamplingVariant v) {
  return v == SamplingVariant::kDerivative ? "derivative" : "integral";
}

/// Experiment data. For the integral variant X, U, Y hold window integrals
/// and Xp holds the state increments over each window.
struct DataBatch {
  Mat X, U, Xp, Y;
  SamplingVariant variant = SamplingVariant::kDerivative;
  double sample_interval = 0.0;
  double window = 0.0;
  std::vector<std::string> warnings;

  Index samples() const { return X.cols(); }
};

/// Smallest sample count for persistently exciting piecewise-constant inputs.
inline Index persistency_bound(Index n, Index m) { return (m + 1) * n + m; }

namespace detail {

inline void check_sample_count(DataBatch& batch, const LtiModel& model, Index T) {
  if (T < 1) throw InputError("at least one sample is required");
  const Index bound = persistency_bound(model.n(), model.m());
  if (T < bound) {
    batch.warnings.push_back("T = " + std::to_string(T) + " is below the persistency bound " +
                             std::to_string(bound) + "; rank is checked downstream");
  }
}

}  // namespace detail

/// Samples x, u at k*dt and records ideal derivative measurements A x + B u.
inline DataBatch collect_derivative_data(const LtiModel& model, const InputSignal& sig,
                                         Index samples, double dt, const Vec& x0) {
  if (!(dt > 0.0)) throw InputError("sample interval must be positive");
  if (x0.size() != model.n()) throw DimensionError("x0 must have n entries");
  if (sig.levels.rows() != model.m()) throw DimensionError("excitation must have m rows");
  DataBatch b;
  b.variant = SamplingVariant::kDerivative;
  b.sample_interval = dt;
  detail::check_sample_count(b, model, samples);

  std::vector<double> q;
  for (Index k = 0; k < samples; ++k) q.push_back(dt * static_cast<double>(k));
  const auto mr = detail::march(model, sig, x0, q);
  const double scale = std::max(1.0, q.back());
  b.X.resize(model.n(), samples);
  b.U.resize(model.m(), samples);
  for (Index k = 0; k < samples; ++k) {
    const double t = q[static_cast<size_t>(k)];
    b.X.col(k) = mr.X.col(detail::find_time(mr.times, t, scale));
    b.U.col(k) = sig.at(t);
  }
  b.Xp = model.A() * b.X + model.B() * b.U;
  b.Y = model.C() * b.X;
  return b;
}

/// Window integrals over [t_i, t_i + window] with t_i = (i - 1) * dt.
inline DataBatch collect_integral_data(const LtiModel& model, const InputSignal& sig,
                                       Index samples, double dt, double window,
                                       const Vec& x0) {
  if (!(dt > 0.0)) throw InputError("sample interval must be positive");
  if (!(window > 0.0)) throw InputError("integration window must be positive");
  if (x0.size() != model.n()) throw DimensionError("x0 must have n entries");
  if (sig.levels.rows() != model.m()) throw DimensionError("excitation must have m rows");
  DataBatch b;
  b.variant = SamplingVariant::kIntegral;
  b.sample_interval = dt;
  b.window = window;
  detail::check_sample_count(b, model, samples);

  std::vector<double> q;
  for (Index i = 0; i < samples; ++i) {
    const double t0 = dt * static_cast<double>(i);
    q.push_back(t0);
    q.push_back(t0 + window);
  }
  const auto mr = detail::march(model, sig, x0, q);
  const double scale = std::max(1.0, *std::max_element(q.begin(), q.end()));
  b.X.resize(model.n(), samples);
  b.U.resize(model.m(), samples);
  b.Xp.resize(model.n(), samples);
  for (Index i = 0; i < samples; ++i) {
    const Index s = detail::find_time(mr.times, q[static_cast<size_t>(2 * i)], scale);
    const Index e = detail::find_time(mr.times, q[static_cast<size_t>(2 * i + 1)], scale);
    b.X.col(i) = mr.Xint.col(e) - mr.Xint.col(s);
    b.U.col(i) = mr.Uint.col(e) - mr.Uint.col(s);
    b.Xp.col(i) = mr.X.col(e) - mr.X.col(s);
  }
  b.Y = model.C() * b.X;
  return b;
}

/// Open-loop trajectory sampled every `dt` over [0, duration].
struct OpenLoopRecord {
  std::vector<double> t;
  Mat X, U, Y;
};

inline OpenLoopRecord simulate_open_loop(const LtiModel& model, const InputSignal& sig,
                                         const Vec& x0, double dt, double duration) {
  if (!(dt > 0.0)) throw InputError("output interval must be positive");
  const auto N = static_cast<Index>(std::floor(duration / dt + 1e-9)) + 1;
  std::vector<double> q;
  for (Index k = 0; k < N; ++k) q.push_back(dt * static_cast<double>(k));
  const auto mr = detail::march(model, sig, x0, q);
  const double scale = std::max(1.0, q.back());
  OpenLoopRecord rec;
  rec.t = q;
  rec.X.resize(model.n(), N);
  rec.U.resize(model.m(), N);
  for (Index k = 0; k < N; ++k) {
    const double t = q[static_cast<size_t>(k)];
    rec.X.col(k) = mr.X.col(detail::find_time(mr.times, t, scale));
    // the input at the final instant is the level still being held
    rec.U.col(k) = sig.at(std::min(t, sig.duration() - 0.5 * sig.hold));
  }
  rec.Y = model.C() * rec.X;
  return rec;
}

struct PackProvenance {
  SamplingVariant variant = SamplingVariant::kDerivative;
  Index samples = 0;
  double sample_interval = 0.0;
  double window = 0.0;
};

/// Sample covariances of the data against the stacked regressor [U; X].
struct CovariancePack {
  Mat Xbar;   // n x (n+m)
  Mat Ubar;   // m x (n+m)
  Mat Xpbar;  // n x (n+m)
  Mat Ybar;   // p x (n+m)
  Index n = 0, m = 0, p = 0;
  PackProvenance provenance;

  void validate() const {
    const Index k = n + m;
    require_shape(Xbar, n, k, "Xbar");
    require_shape(Ubar, m, k, "Ubar");
    require_shape(Xpbar, n, k, "Xpbar");
    require_shape(Ybar, p, k, "Ybar");
    for (const Mat* M : {&Xbar, &Ubar, &Xpbar, &Ybar}) require_finite(*M, "covariance");
  }

  /// [Xbar; Ubar], square of size n+m.
  Mat state_input_stack() const {
    Mat S(n + m, n + m);
    S << Xbar, Ubar;
    return S;
  }

  /// [Xpbar; -Ybar], the data-side image of [[A, B], [-C, 0]].
  Mat closed_loop_map() const {
    Mat M(n + p, n + m);
    M << Xpbar, -Ybar;
    return M;
  }
};

inline CovariancePack build_covariances(const DataBatch& batch) {
  const Index T = batch.samples();
  const Index n = batch.X.rows(), m = batch.U.rows(), p = batch.Y.rows();
  if (T == 0) throw InputError("empty data batch");
  if (batch.U.cols() != T || batch.Xp.cols() != T || batch.Y.cols() != T) {
    throw DimensionError("data matrices must share the sample count");
  }
  if (batch.Xp.rows() != n) throw DimensionError("Xp must have n rows");
  Mat D(m + n, T);
  D << batch.U, batch.X;
  const double inv = 1.0 / static_cast<double>(T);
  CovariancePack pack;
  pack.n = n;
  pack.m = m;
  pack.p = p;
  pack.Xbar = inv * batch.X * D.transpose();
  pack.Ubar = inv * batch.U * D.transpose();
  pack.Xpbar = inv * batch.Xp * D.transpose();
  pack.Ybar = inv * batch.Y * D.transpose();
  pack.provenance = {batch.variant, T, batch.sample_interval, batch.window};
  return pack;
}

struct PeRankReport {
  int rank = 0;
  int required = 0;
  bool ok = false;
  Vec singular_values;
};

/// Rank of [Ubar; Xbar] against n + m.
inline PeRankReport check_pe_rank(const CovariancePack& pack) {
  PeRankReport r;
  r.required = static_cast<int>(pack.n + pack.m);
  Mat S(pack.m + pack.n, pack.n + pack.m);
  S << pack.Ubar, pack.Xbar;
  if (S.size() > 0) r.singular_values = Eigen::JacobiSVD<Mat>(S).singularValues();
  r.rank = (S.size() == 0 || r.singular_values(0) == 0.0) ? 0 : numerical_rank(S);
  r.ok = r.rank == r.required;
  return r;
}

struct StabilizabilityReport {
  bool ok = false;
  bool pbh_ok = false;
  std::optional<Complex> failing_eigenvalue;
  bool rank_condition_ok = false;
  int rank = 0;
  int required_rank = 0;
};

/// (Aa, Ba) stabilizable iff (A, B) stabilizable and rank [[A, B], [C, 0]] = n + p.
inline StabilizabilityReport check_aug_stabilizable(const LtiModel& model) {
  const Index n = model.n(), m = model.m(), p = model.p();
  StabilizabilityReport r;
  r.failing_eigenvalue = pbh_uncontrollable_mode(model.A(), model.B());
  r.pbh_ok = !r.failing_eigenvalue.has_value();
  Mat M = Mat::Zero(n + p, n + m);
  M.topLeftCorner(n, n) = model.A();
  M.topRightCorner(n, m) = model.B();
  M.bottomLeftCorner(p, n) = model.C();
  r.required_rank = static_cast<int>(n + p);
  r.rank = M.norm() == 0.0 ? 0 : numerical_rank(M);
  r.rank_condition_ok = r.rank == r.required_rank;
  r.ok = r.pbh_ok && r.rank_condition_ok;
  return r;
}

struct DetectabilityReport {
  bool ok = false;
  std::optional<Complex> failing_eigenvalue;
};

/// (Aa, sqrt(Qa)) detectable iff (A, [C; sqrt(Qx)]) detectable, given Qz > 0.
inline DetectabilityReport check_aug_detectable(const LtiModel& model,
                                                const WeightSpec& weights) {
  weights.require_compatible(model.n(), model.m(), model.p());
  Mat H(model.p() + model.n(), model.n());
  H << model.C(), psd_sqrt(weights.Qx());
  DetectabilityReport r;
  r.failing_eigenvalue = pbh_unobservable_mode(model.A(), H);
  r.ok = !r.failing_eigenvalue.has_value();
  return r;
}

/// Augmented-state gain equivalent to the PID law
/// u = -Kp (y - r) - Ki int(r - y) - Kd d/dt (y - r).
inline Mat pid_to_augmented_gain(const Mat& Kp, const Mat& Ki, const Mat& Kd,
                                 const LtiModel& model) {
  const Index n = model.n(), m = model.m(), p = model.p();
  require_shape(Kp, m, p, "Kp");
  require_shape(Ki, m, p, "Ki");
  require_shape(Kd, m, p, "Kd");
  const Mat D = Mat::Identity(m, m) + Kd * model.C() * model.B();
  Eigen::FullPivLU<Mat> lu(D);
  if (!lu.isInvertible() || lu.rcond() < 1e-12) {
    throw SingularityError("I + Kd C B is singular; the PID law has no state-feedback form");
  }
  Mat K(m, n + p);
  K.leftCols(n) = lu.solve(Kp * model.C() + Kd * model.C() * model.A());
  K.rightCols(p) = lu.solve(Ki);
  return K;
}

}  // namespace lqi
