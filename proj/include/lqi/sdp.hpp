#pragma once

// Data-driven LQI synthesis as a semidefinite program in (W, Z, S):
//
//   minimize   tr(Qa W) + tr(S)
//   subject to [[S, R^{1/2} Ubar Z], [Z^T Ubar^T R^{1/2}, W]] >= 0
//              [Xpbar; -Ybar] Z + Z^T [Xpbar; -Ybar]^T + I <= 0
//              [I_n, 0] W = Xbar Z
//              W >= eps_W I
//
// solved with a primal log-det barrier method. The gain is -Ubar Z W^{-1}.

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lqi/errors.hpp"
#include "lqi/flow.hpp"
#include "lqi/kernels.hpp"
#include "lqi/lti.hpp"
#include "lqi/param.hpp"

namespace lqi {

/// Affine matrix function F0 + sum_i x_i F_i, required to be positive definite.
struct LmiBlock {
  std::string name;
  Mat F0;
  std::vector<Mat> F;

  Index dim() const { return F0.rows(); }

  Mat value(const Vec& x) const {
    Mat V = F0;
    for (size_t i = 0; i < F.size(); ++i) {
      if (x(static_cast<Index>(i)) != 0.0) V += x(static_cast<Index>(i)) * F[i];
    }
    return V;
  }
};

/// Index bookkeeping for the stacked decision vector [vech(W); vec(Z); vech(S)].
struct SdpLayout {
  Index k = 0;  // n + p, size of W
  Index q = 0;  // n + m, rows of Z
  Index m = 0;  // size of S

  Index w_count() const { return k * (k + 1) / 2; }
  Index z_count() const { return q * k; }
  Index s_count() const { return m * (m + 1) / 2; }
  Index size() const { return w_count() + z_count() + s_count(); }

  static Index sym_index(Index dim, Index i, Index j) {
    if (i > j) std::swap(i, j);
    // row-major upper triangle
    return i * dim - i * (i - 1) / 2 + (j - i);
  }
  Index w_index(Index i, Index j) const { return sym_index(k, i, j); }
  Index z_index(Index a, Index b) const { return w_count() + a * k + b; }
  Index s_index(Index i, Index j) const { return w_count() + z_count() + sym_index(m, i, j); }
};

struct SdpProblem {
  CovariancePack pack;       // normalized by data_scale
  double data_scale = 1.0;   // original covariances = pack * data_scale
  Mat Qa;
  Mat R;
  Mat R_half;
  double w_floor = 1e-8;
  SdpLayout layout;
  Vec c;
  std::vector<LmiBlock> lmis;  // epigraph, stability, W floor
  Mat A_eq;
  Vec b_eq;

  Mat W(const Vec& x) const {
    Mat V(layout.k, layout.k);
    for (Index i = 0; i < layout.k; ++i)
      for (Index j = 0; j < layout.k; ++j) V(i, j) = x(layout.w_index(i, j));
    return V;
  }
  /// Z for the normalized data.
  Mat Z_normalized(const Vec& x) const {
    Mat V(layout.q, layout.k);
    for (Index a = 0; a < layout.q; ++a)
      for (Index b = 0; b < layout.k; ++b) V(a, b) = x(layout.z_index(a, b));
    return V;
  }
  Mat S(const Vec& x) const {
    Mat V(layout.m, layout.m);
    for (Index i = 0; i < layout.m; ++i)
      for (Index j = 0; j < layout.m; ++j) V(i, j) = x(layout.s_index(i, j));
    return V;
  }
  Vec pack_variables(const Mat& W, const Mat& Zn, const Mat& S) const {
    Vec x(layout.size());
    for (Index i = 0; i < layout.k; ++i)
      for (Index j = i; j < layout.k; ++j) x(layout.w_index(i, j)) = 0.5 * (W(i, j) + W(j, i));
    for (Index a = 0; a < layout.q; ++a)
      for (Index b = 0; b < layout.k; ++b) x(layout.z_index(a, b)) = Zn(a, b);
    for (Index i = 0; i < layout.m; ++i)
      for (Index j = i; j < layout.m; ++j) x(layout.s_index(i, j)) = 0.5 * (S(i, j) + S(j, i));
    return x;
  }

  Index cone_dimension() const {
    Index d = 0;
    for (const auto& l : lmis) d += l.dim();
    return d;
  }
};

inline SdpProblem assemble_sdp(const CovariancePack& pack, const WeightSpec& weights,
                               double w_floor = 1e-8) {
  pack.validate();
  const Index n = pack.n, m = pack.m, p = pack.p;
  weights.require_compatible(n, m, p);
  if (p > m) {
    throw PreconditionError("integral tracking needs p <= m (p = " + std::to_string(p) +
                            ", m = " + std::to_string(m) + ")");
  }
  const auto pe = check_pe_rank(pack);
  if (!pe.ok) {
    throw RankError("data matrix [Ubar; Xbar] is rank deficient", pe.rank, pe.required,
                    pe.singular_values.size() ? 1e-10 * pe.singular_values(0) : 0.0);
  }

  SdpProblem pr;
  pr.data_scale = pack.state_input_stack().norm();
  pr.pack = pack;
  pr.pack.Xbar /= pr.data_scale;
  pr.pack.Ubar /= pr.data_scale;
  pr.pack.Xpbar /= pr.data_scale;
  pr.pack.Ybar /= pr.data_scale;
  pr.Qa = weights.Qa();
  pr.R = weights.R();
  pr.R_half = psd_sqrt(weights.R());
  pr.w_floor = w_floor;
  const Index k = n + p, q = n + m;
  pr.layout = {k, q, m};
  const SdpLayout& L = pr.layout;
  const Index N = L.size();

  auto sym_unit = [](Index dim, Index i, Index j) {
    Mat E = Mat::Zero(dim, dim);
    E(i, j) = 1.0;
    E(j, i) = 1.0;
    return E;
  };

  pr.c = Vec::Zero(N);
  for (Index i = 0; i < k; ++i)
    for (Index j = i; j < k; ++j)
      pr.c(L.w_index(i, j)) = (i == j) ? pr.Qa(i, i) : pr.Qa(i, j) + pr.Qa(j, i);
  for (Index i = 0; i < m; ++i) pr.c(L.s_index(i, i)) = 1.0;

  const Mat RU = pr.R_half * pr.pack.Ubar;      // m x q
  const Mat Mcl = pr.pack.closed_loop_map();    // k x q

  LmiBlock epi{"epigraph", Mat::Zero(m + k, m + k), std::vector<Mat>(N, Mat::Zero(m + k, m + k))};
  LmiBlock stab{"stability", -Mat::Identity(k, k), std::vector<Mat>(N, Mat::Zero(k, k))};
  LmiBlock floor{"W floor", -w_floor * Mat::Identity(k, k), std::vector<Mat>(N, Mat::Zero(k, k))};

  for (Index i = 0; i < k; ++i) {
    for (Index j = i; j < k; ++j) {
      const Index v = L.w_index(i, j);
      const Mat E = sym_unit(k, i, j);
      epi.F[static_cast<size_t>(v)].bottomRightCorner(k, k) = E;
      floor.F[static_cast<size_t>(v)] = E;
    }
  }
  for (Index a = 0; a < q; ++a) {
    for (Index b = 0; b < k; ++b) {
      const auto v = static_cast<size_t>(L.z_index(a, b));
      Mat Eab = Mat::Zero(q, k);
      Eab(a, b) = 1.0;
      const Mat top = RU * Eab;  // m x k
      epi.F[v].topRightCorner(m, k) = top;
      epi.F[v].bottomLeftCorner(k, m) = top.transpose();
      const Mat ME = Mcl * Eab;  // k x k
      stab.F[v] = -(ME + ME.transpose());
    }
  }
  for (Index i = 0; i < m; ++i) {
    for (Index j = i; j < m; ++j) {
      const auto v = static_cast<size_t>(L.s_index(i, j));
      epi.F[v].topLeftCorner(m, m) = sym_unit(m, i, j);
    }
  }
  pr.lmis = {std::move(epi), std::move(stab), std::move(floor)};

  // [I_n, 0] W - Xbar Z = 0, one row per entry of the n x k block.
  pr.A_eq = Mat::Zero(n * k, N);
  pr.b_eq = Vec::Zero(n * k);
  for (Index r = 0; r < n; ++r) {
    for (Index col = 0; col < k; ++col) {
      const Index row = r * k + col;
      pr.A_eq(row, L.w_index(r, col)) += 1.0;
      for (Index a = 0; a < q; ++a) pr.A_eq(row, L.z_index(a, col)) -= pr.pack.Xbar(r, a);
    }
  }
  return pr;
}

struct SdpOptions {
  double tol = 1e-9;
  int max_outer = 60;
  double mu_factor = 10.0;
  double newton_tol = 1e-10;
  int max_newton = 200;
  double ls_alpha = 0.25;
  double ls_beta = 0.5;
  /// Starting gain; otherwise a spectrum-shift gain on the data-implied
  /// augmented plant, refined by a short projected flow.
  std::optional<Mat> initial_gain;
  int phase_one_flow_steps = 100;
  bool record_iterates = false;
};

/// Centered iterate at the end of one outer iteration.
struct SdpIterate {
  Mat W, Z, S;
  double objective = 0.0;
  double barrier_t = 0.0;
};

struct SdpSolution {
  Mat W, Z, S;  // Z for the original (unnormalized) data
  double objective = 0.0;
  int barrier_iterations = 0;  // Newton steps, all outer iterations
  int outer_iterations = 0;
  double duality_gap_estimate = 0.0;
  double equality_residual = 0.0;
  std::vector<double> cone_margins;  // min eigenvalue of each LMI
  bool converged = false;
  int stability_violations = 0;  // iterates whose data closed loop was not Hurwitz
  std::vector<SdpIterate> iterates;
};

class SdpNonConvergence : public NonConvergenceError {
 public:
  SdpNonConvergence(const std::string& what, SdpSolution best)
      : NonConvergenceError(what), best_(std::move(best)) {}
  const SdpSolution& best() const { return best_; }

 private:
  SdpSolution best_;
};

namespace detail {

struct BarrierEval {
  bool interior = false;
  double log_det = 0.0;  // sum over blocks
  std::vector<Mat> inverses;
};

inline BarrierEval barrier_eval(const SdpProblem& pr, const Vec& x, bool want_inverse) {
  BarrierEval out;
  for (const auto& l : pr.lmis) {
    const Mat V = symmetrize(l.value(x));
    Eigen::LLT<Mat> llt(V);
    if (llt.info() != Eigen::Success) return out;
    const Vec d = llt.matrixLLT().diagonal();
    if ((d.array() <= 0.0).any() || !d.allFinite()) return out;
    out.log_det += 2.0 * d.array().log().sum();
    if (want_inverse) out.inverses.push_back(llt.solve(Mat::Identity(V.rows(), V.cols())));
  }
  out.interior = true;
  return out;
}

inline Vec cone_margins(const SdpProblem& pr, const Vec& x) {
  Vec r(static_cast<Index>(pr.lmis.size()));
  for (size_t j = 0; j < pr.lmis.size(); ++j)
    r(static_cast<Index>(j)) = min_symmetric_eigenvalue(pr.lmis[j].value(x));
  return r;
}

}  // namespace detail

/// Builds the data closed loop [Xpbar; -Ybar] Z W^{-1} for original data.
inline Mat sdp_closed_loop(const Mat& W, const Mat& Z, const CovariancePack& pack) {
  return pack.closed_loop_map() * Z * W.inverse();
}

/// Strictly feasible starting point from a stabilizing gain.
inline Vec sdp_phase_one(const SdpProblem& pr, const SdpOptions& opts,
                         const WeightSpec& weights) {
  const PackRef pk = share(pr.pack);
  Mat K0;
  if (opts.initial_gain) {
    K0 = *opts.initial_gain;
  } else {
    try {
      const auto [Aa, Ba] = data_implied_augmented(pr.pack);
      K0 = stabilizing_gain(Aa, Ba);
    } catch (const Error& e) {
      throw InfeasibleError(InfeasibleError::Stage::kPhaseOne,
                            std::string("no stabilizing gain for the data-implied plant: ") +
                                e.what());
    }
  }
  Parameterizer G;
  try {
    G = gain_to_parameterizer(K0, pk);
  } catch (const NumericalError& e) {
    throw InfeasibleError(InfeasibleError::Stage::kPhaseOne,
                          std::string("starting gain cannot be parameterized: ") + e.what());
  }
  if (!is_in_G_set(G)) {
    throw InfeasibleError(InfeasibleError::Stage::kPhaseOne,
                          "starting gain does not stabilize the data closed loop");
  }
  if (opts.phase_one_flow_steps > 0) {
    FlowOptions fo;
    fo.max_steps = opts.phase_one_flow_steps;
    try {
      G.G = integrate_flow(G, weights, fo).last().G;
    } catch (const Error&) {
      // keep the unrefined gain
    }
  }
  const Mat Acl = pk->closed_loop_map() * G.G;
  const Index k = pr.layout.k;
  Mat W = 2.0 * solve_lyapunov(Acl.transpose(), Mat::Identity(k, k));
  const double lam = min_symmetric_eigenvalue(W);
  if (lam < 10.0 * pr.w_floor) W *= 10.0 * pr.w_floor / lam;
  const Mat Z = G.G * W;
  const Mat RUZ = pr.R_half * pr.pack.Ubar * Z;
  const Mat Smin = symmetrize(RUZ * W.ldlt().solve(RUZ.transpose()));
  const Index m = pr.layout.m;
  const Mat S = Smin + 0.1 * (1.0 + Smin.trace()) * Mat::Identity(m, m);
  Vec x = pr.pack_variables(W, Z, S);
  if (!detail::barrier_eval(pr, x, false).interior) {
    throw InfeasibleError(InfeasibleError::Stage::kNumericalStall,
                          "starting point is not numerically interior");
  }
  return x;
}

inline SdpSolution solve_sdp(const SdpProblem& pr, const SdpOptions& opts = {}) {
  if (!(opts.mu_factor > 1.0) || opts.max_outer < 1 || !(opts.tol > 0.0)) {
    throw InputError("SDP options: mu > 1, max_outer >= 1 and tol > 0 are required");
  }
  const Index N = pr.layout.size();
  // The weight object is rebuilt from the stored problem.
  const Index n = pr.pack.n, p = pr.pack.p;
  const WeightSpec weights(pr.Qa.topLeftCorner(n, n), pr.Qa.bottomRightCorner(p, p), pr.R);

  Vec x = sdp_phase_one(pr, opts, weights);

  // Null-space parameterization of the equality constraints.
  Eigen::JacobiSVD<Mat> svd(pr.A_eq, Eigen::ComputeFullV);
  const Index eq_rank = numerical_rank(pr.A_eq);
  const Mat Nb = svd.matrixV().rightCols(N - eq_rank);
  // Remove the phase-one round-off from the equality block.
  x -= pr.A_eq.transpose() *
       (pr.A_eq * pr.A_eq.transpose()).ldlt().solve(pr.A_eq * x - pr.b_eq);
  if (!detail::barrier_eval(pr, x, false).interior) {
    throw InfeasibleError(InfeasibleError::Stage::kNumericalStall,
                          "equality-corrected starting point left the cone");
  }

  const double cone_dim = static_cast<double>(pr.cone_dimension());
  double t = cone_dim / (1.0 + std::abs(pr.c.dot(x)));

  SdpSolution sol;
  auto fill = [&](SdpSolution& s, const Vec& xv) {
    s.W = symmetrize(pr.W(xv));
    s.Z = pr.Z_normalized(xv) / pr.data_scale;
    s.S = symmetrize(pr.S(xv));
    s.objective = pr.c.dot(xv);
    s.duality_gap_estimate = cone_dim / t;
    s.equality_residual = (pr.A_eq * xv - pr.b_eq).norm();
    const Vec cm = detail::cone_margins(pr, xv);
    s.cone_margins.assign(cm.data(), cm.data() + cm.size());
  };
  CovariancePack original = pr.pack;
  original.Xbar *= pr.data_scale;
  original.Ubar *= pr.data_scale;
  original.Xpbar *= pr.data_scale;
  original.Ybar *= pr.data_scale;

  double prev_obj = std::numeric_limits<double>::infinity();
  for (int outer = 1; outer <= opts.max_outer; ++outer) {
    // Centering: damped Newton on t c^T x - sum log det F_j(x) over x0 + Nb y.
    bool centered = false;
    for (int it = 0; it < opts.max_newton; ++it) {
      const auto be = detail::barrier_eval(pr, x, true);
      Vec g = t * pr.c;
      Mat H = Mat::Zero(N, N);
      for (size_t j = 0; j < pr.lmis.size(); ++j) {
        const auto& l = pr.lmis[j];
        const Mat& Fi = be.inverses[j];
        std::vector<Mat> A(static_cast<size_t>(N));
        for (Index i = 0; i < N; ++i) {
          A[static_cast<size_t>(i)] = Fi * l.F[static_cast<size_t>(i)];
          g(i) -= A[static_cast<size_t>(i)].trace();
        }
        for (Index i = 0; i < N; ++i) {
          for (Index r = i; r < N; ++r) {
            const double h = (A[static_cast<size_t>(i)].array() *
                              A[static_cast<size_t>(r)].transpose().array()).sum();
            H(i, r) += h;
            if (r != i) H(r, i) += h;
          }
        }
      }
      const Vec gr = Nb.transpose() * g;
      const Mat Hr = symmetrize(Nb.transpose() * H * Nb);
      Eigen::LDLT<Mat> ldlt(Hr);
      Vec dy = -ldlt.solve(gr);
      if (ldlt.info() != Eigen::Success || !dy.allFinite()) {
        dy = -Hr.completeOrthogonalDecomposition().solve(gr);
      }
      const double dec = -gr.dot(dy);
      ++sol.barrier_iterations;
      if (dec / 2.0 <= opts.newton_tol) {
        centered = true;
        break;
      }
      const Vec dx = Nb * dy;
      double s = 1.0;
      const double slope = gr.dot(dy);
      bool moved = false;
      for (int ls = 0; ls < 80; ++ls, s *= opts.ls_beta) {
        const Vec xn = x + s * dx;
        const auto bn = detail::barrier_eval(pr, xn, false);
        if (!bn.interior) continue;
        // Difference form avoids cancellation in t c^T x at large t.
        const double dphi = t * s * pr.c.dot(dx) - (bn.log_det - be.log_det);
        if (dphi <= opts.ls_alpha * s * slope || (dec < 1e-3 && s == 1.0)) {
          x = xn;
          moved = true;
          break;
        }
      }
      if (!moved) break;
    }
    sol.outer_iterations = outer;
    fill(sol, x);
    const Mat Acl = sdp_closed_loop(sol.W, sol.Z, original);
    if (!is_hurwitz(Acl)) ++sol.stability_violations;
    if (opts.record_iterates) sol.iterates.push_back({sol.W, sol.Z, sol.S, sol.objective, t});

    const double obj = sol.objective;
    const double scale = 1.0 + std::abs(obj);
    const bool small_gap = sol.duality_gap_estimate <= opts.tol * scale;
    const bool small_dec = std::abs(prev_obj - obj) <= opts.tol * scale;
    // relative: Newton steps along the nullspace basis accumulate round-off in A_eq x
    const bool on_plane =
        sol.equality_residual <= opts.tol * (1.0 + pr.A_eq.norm() * x.norm() + pr.b_eq.norm());
    if (centered && small_gap && small_dec && on_plane) {
      sol.converged = true;
      return sol;
    }
    if (!centered && small_gap && on_plane) {
      // Newton stalled at round-off level near the optimum.
      sol.converged = true;
      return sol;
    }
    prev_obj = obj;
    t *= opts.mu_factor;
  }
  throw SdpNonConvergence("SDP did not converge in " + std::to_string(opts.max_outer) +
                              " outer iterations (gap estimate " +
                              std::to_string(sol.duality_gap_estimate) + ")",
                          sol);
}

/// K = -Ubar Z W^{-1}; asserts a Hurwitz data closed loop.
inline Mat extract_gain(const SdpSolution& sol, const CovariancePack& pack) {
  Eigen::JacobiSVD<Mat> svd(sol.W);
  const Vec& s = svd.singularValues();
  const double cond = s(s.size() - 1) > 0.0 ? s(0) / s(s.size() - 1)
                                            : std::numeric_limits<double>::infinity();
  if (!(cond < 1e12)) {
    throw NumericalError("W is near singular (condition number " + std::to_string(cond) + ")");
  }
  const Mat Winv = sol.W.ldlt().solve(Mat::Identity(sol.W.rows(), sol.W.cols()));
  const Mat K = -pack.Ubar * sol.Z * Winv;
  const Mat Acl = pack.closed_loop_map() * sol.Z * Winv;
  if (!is_hurwitz(Acl)) {
    throw NumericalError("extracted gain does not stabilize the data closed loop; "
                         "tighten the solver tolerance");
  }
  return K;
}

}  // namespace lqi
