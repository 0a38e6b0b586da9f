#pragma once

// Data-driven closed-loop parameterization: K <-> G maps through the sample
// covariances and the data closed-loop matrix [Xpbar; -Ybar] G.

#include <memory>
#include <string>

#include "lqi/errors.hpp"
#include "lqi/kernels.hpp"
#include "lqi/lti.hpp"

namespace lqi {

/// Tolerance on Xbar G = [I, 0] when a parameterizer is built directly.
inline constexpr double kConstructionTol = 1e-9;
/// Looser tolerance used for set membership and gain extraction; flow
/// integration accumulates drift between re-projections.
inline constexpr double kMembershipTol = 1e-7;

using PackRef = std::shared_ptr<const CovariancePack>;

inline PackRef share(CovariancePack pack) {
  pack.validate();
  return std::make_shared<const CovariancePack>(std::move(pack));
}

/// G in R^{(n+m) x (n+p)} with Xbar G = [I_n, 0] and K = -Ubar G.
struct Parameterizer {
  Mat G;
  PackRef pack;
};

/// [I_n, 0_{n,p}].
inline Mat constraint_target(const CovariancePack& pack) {
  Mat T = Mat::Zero(pack.n, pack.n + pack.p);
  T.leftCols(pack.n).setIdentity();
  return T;
}

inline double constraint_residual(const Parameterizer& g) {
  return (g.pack->Xbar * g.G - constraint_target(*g.pack)).norm();
}

/// 2-norm condition number of [Xbar; Ubar].
inline double stack_condition_number(const CovariancePack& pack) {
  Eigen::JacobiSVD<Mat> svd(pack.state_input_stack());
  const Vec& s = svd.singularValues();
  return s(s.size() - 1) > 0.0 ? s(0) / s(s.size() - 1)
                               : std::numeric_limits<double>::infinity();
}

/// Unique G solving [Xbar; Ubar] G = [[I, 0], [-K]].
inline Parameterizer gain_to_parameterizer(const Mat& K, const PackRef& pack) {
  const Index n = pack->n, m = pack->m, p = pack->p;
  require_shape(K, m, n + p, "gain");
  require_finite(K, "gain");
  const auto pe = check_pe_rank(*pack);
  if (!pe.ok) {
    throw RankError("data matrix [Ubar; Xbar] is rank deficient", pe.rank, pe.required,
                    pe.singular_values.size() ? rank_threshold(pack->Xbar, pe.singular_values(0))
                                              : 0.0);
  }
  Mat rhs(n + m, n + p);
  rhs << constraint_target(*pack), -K;
  Eigen::PartialPivLU<Mat> lu(pack->state_input_stack());
  Parameterizer g{lu.solve(rhs), pack};
  g.G += lu.solve(rhs - pack->state_input_stack() * g.G);
  if (constraint_residual(g) > kConstructionTol) {
    throw NumericalError("parameterizer solve is inaccurate (condition number " +
                         std::to_string(stack_condition_number(*pack)) + ")");
  }
  return g;
}

inline Mat parameterizer_to_gain(const Parameterizer& g) {
  require_shape(g.G, g.pack->n + g.pack->m, g.pack->n + g.pack->p, "G");
  const double res = constraint_residual(g);
  if (res > kMembershipTol) {
    throw ConsistencyError("Xbar G deviates from [I, 0] by " + std::to_string(res));
  }
  return -g.pack->Ubar * g.G;
}

/// [Xpbar; -Ybar] G.
inline Mat closed_loop_from_data(const Parameterizer& g) {
  const double res = constraint_residual(g);
  if (res > kMembershipTol) {
    throw ConsistencyError("Xbar G deviates from [I, 0] by " + std::to_string(res));
  }
  return g.pack->closed_loop_map() * g.G;
}

/// Membership in the set of constraint-satisfying, stabilizing parameterizers.
inline bool is_in_G_set(const Parameterizer& g) {
  if (g.G.rows() != g.pack->n + g.pack->m || g.G.cols() != g.pack->n + g.pack->p) {
    return false;
  }
  if (!g.G.allFinite() || constraint_residual(g) > kMembershipTol) return false;
  return spectral_abscissa(g.pack->closed_loop_map() * g.G) < 0.0;
}

/// Nearest G in Frobenius norm with Xbar G = [I, 0].
inline Parameterizer project_onto_constraint(const Parameterizer& g) {
  const Mat pinv = right_pseudoinverse(g.pack->Xbar);
  Parameterizer out = g;
  out.G -= pinv * (g.pack->Xbar * g.G - constraint_target(*g.pack));
  return out;
}

/// Augmented plant matrices implied by the data, Aa = [M_x, 0], Ba = M_u with
/// M = [Xpbar; -Ybar] [Xbar; Ubar]^{-1}.
inline std::pair<Mat, Mat> data_implied_augmented(const CovariancePack& pack) {
  const Index n = pack.n, m = pack.m, p = pack.p;
  const Mat S = pack.state_input_stack();
  const Mat M = S.transpose().partialPivLu().solve(pack.closed_loop_map().transpose()).transpose();
  Mat Aa = Mat::Zero(n + p, n + p);
  Aa.leftCols(n) = M.leftCols(n);
  return {Aa, M.rightCols(m)};
}

}  // namespace lqi
