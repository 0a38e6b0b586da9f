#pragma once

// Dense linear-algebra primitives shared by every other module: spectra,
// matrix exponential, Lyapunov and Riccati solvers, rank decisions.

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "lqi/errors.hpp"

namespace lqi {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;
using Complex = std::complex<double>;

inline std::string shape_of(const Mat& M) {
  return std::to_string(M.rows()) + "x" + std::to_string(M.cols());
}

inline void require_finite(const Mat& M, std::string_view what) {
  if (!M.allFinite()) {
    throw NumericalError(std::string(what) + " contains NaN or Inf");
  }
}

inline void require_square(const Mat& M, std::string_view what) {
  if (M.rows() != M.cols()) {
    throw DimensionError(std::string(what) + " must be square, got " +
                         shape_of(M));
  }
}

inline void require_shape(const Mat& M, Index rows, Index cols,
                          std::string_view what) {
  if (M.rows() != rows || M.cols() != cols) {
    throw DimensionError(std::string(what) + " must be " +
                         std::to_string(rows) + "x" + std::to_string(cols) +
                         ", got " + shape_of(M));
  }
}

inline Mat symmetrize(const Mat& M) { return 0.5 * (M + M.transpose()); }

inline bool is_symmetric(const Mat& M, double tol = 1e-10) {
  if (M.rows() != M.cols()) return false;
  return (M - M.transpose()).norm() <= tol * (1.0 + M.norm());
}

inline double min_symmetric_eigenvalue(const Mat& M) {
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(M), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline bool is_positive_definite(const Mat& M) {
  return M.rows() > 0 && is_symmetric(M) && min_symmetric_eigenvalue(M) > 0.0;
}

/// Eigenvalues via Hessenberg reduction and shifted QR iteration.
inline Eigen::VectorXcd eigenvalues(const Mat& M) {
  require_square(M, "matrix");
  require_finite(M, "matrix");
  if (M.rows() == 0) return {};
  Eigen::EigenSolver<Mat> es;
  es.compute(M, false);
  if (es.info() != Eigen::Success) {
    throw NumericalError(
        "QR iteration did not converge within " +
        std::to_string(Eigen::RealSchur<Mat>::m_maxIterationsPerRow *
                       M.rows()) +
        " iterations");
  }
  return es.eigenvalues();
}

/// max_i Re(lambda_i(M)).
inline double spectral_abscissa(const Mat& M) {
  const Eigen::VectorXcd ev = eigenvalues(M);
  if (ev.size() == 0) return -std::numeric_limits<double>::infinity();
  return ev.real().maxCoeff();
}

/// Strict left half plane with a round-off margin, so a computed -1e-16 for an
/// exact zero eigenvalue does not count as stable.
inline bool is_hurwitz(const Mat& M) {
  return spectral_abscissa(M) < -1e-12 * (1.0 + M.lpNorm<Eigen::Infinity>());
}

/// e^{M t}.
inline Mat matrix_exponential(const Mat& M, double t) {
  require_square(M, "matrix");
  require_finite(M, "matrix");
  if (!std::isfinite(t)) throw InputError("exponential time must be finite");
  if (M.rows() == 0) return M;
  const Mat Mt = M * t;
  Mat E = Mt.exp();
  if (!E.allFinite()) {
    std::ostringstream os;
    os << "matrix exponential overflow (||M t||_1 = "
       << Mt.cwiseAbs().colwise().sum().maxCoeff() << ")";
    throw NumericalError(os.str());
  }
  return E;
}

/// Threshold below which a singular value counts as zero.
inline double rank_threshold(const Mat& M, double sigma_max) {
  return static_cast<double>(std::max(M.rows(), M.cols())) * sigma_max *
         1e-10;
}

inline int numerical_rank(const Mat& M) {
  if (M.size() == 0) return 0;
  Eigen::JacobiSVD<Mat> svd(M);
  const Vec& s = svd.singularValues();
  const double thr = rank_threshold(M, s(0));
  int r = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (s(i) > thr && s(i) > 0.0) ++r;
  }
  return r;
}

/// Minimum-norm right inverse M^T (M M^T)^{-1}, computed through the SVD.
inline Mat right_pseudoinverse(const Mat& M) {
  require_finite(M, "matrix");
  if (M.rows() == 0) return Mat::Zero(M.cols(), 0);
  Eigen::JacobiSVD<Mat> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec& s = svd.singularValues();
  const double thr = rank_threshold(M, s(0));
  int r = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (s(i) > thr && s(i) > 0.0) ++r;
  }
  if (r < M.rows() || M.rows() > M.cols()) {
    throw RankError("right inverse requires full row rank", r,
                    static_cast<int>(M.rows()), thr);
  }
  return svd.matrixV() * s.cwiseInverse().asDiagonal() *
         svd.matrixU().transpose();
}

/// Symmetric square root of a positive semidefinite matrix.
inline Mat psd_sqrt(const Mat& M) {
  require_square(M, "matrix");
  if (!is_symmetric(M, 1e-9)) throw PreconditionError("matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(M));
  Vec ev = es.eigenvalues();
  const double tol = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -tol) throw PreconditionError("matrix is not positive semidefinite");
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

namespace detail {

/// Kronecker operator of X -> Acl^T X + X Acl on column-major vec(X).
inline Mat lyapunov_operator(const Mat& Acl) {
  const Index n = Acl.rows();
  const Index nn = n * n;
  Mat L = Mat::Zero(nn, nn);
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < n; ++i) {
      const Index row = i + j * n;
      for (Index k = 0; k < n; ++k) {
        L(row, k + j * n) += Acl(k, i);
        L(row, i + k * n) += Acl(k, j);
      }
    }
  }
  return L;
}

inline void check_lyapunov_residual(const Mat& A, const Mat& X, const Mat& Q) {
  const double res = (A.transpose() * X + X * A + Q).norm();
  if (!(res <= 1e-10 * (1.0 + X.norm() * A.norm()))) {
    throw NumericalError("Lyapunov residual " + std::to_string(res) + " exceeds tolerance");
  }
}

/// Dense solve with one refinement sweep; `transposed` solves with L^T,
/// which is the operator of Acl^T.
inline Mat lyapunov_solve(const Eigen::PartialPivLU<Mat>& lu, const Mat& L, const Mat& Q,
                          bool transposed) {
  const Index n = Q.rows();
  const Mat Qs = symmetrize(Q);
  const Eigen::Map<const Vec> rhs(Qs.data(), n * n);
  Vec p = transposed ? Vec(lu.transpose().solve(-rhs)) : Vec(lu.solve(-rhs));
  const Vec r = -rhs - (transposed ? Vec(L.transpose() * p) : Vec(L * p));
  p += transposed ? Vec(lu.transpose().solve(r)) : Vec(lu.solve(r));
  return symmetrize(Eigen::Map<Mat>(p.data(), n, n));
}

}  // namespace detail

/// Solves Acl^T P + P Acl + Q = 0 by Kronecker vectorization.
inline Mat solve_lyapunov(const Mat& Acl, const Mat& Q) {
  require_square(Acl, "closed-loop matrix");
  require_shape(Q, Acl.rows(), Acl.rows(), "Lyapunov right-hand side");
  require_finite(Acl, "closed-loop matrix");
  require_finite(Q, "Lyapunov right-hand side");
  if (!is_hurwitz(Acl)) {
    throw PreconditionError(
        "Lyapunov equation needs a Hurwitz matrix (spectral abscissa " +
        std::to_string(spectral_abscissa(Acl)) + ")");
  }
  const Mat L = detail::lyapunov_operator(Acl);
  Eigen::PartialPivLU<Mat> lu(L);
  Mat P = detail::lyapunov_solve(lu, L, Q, false);
  detail::check_lyapunov_residual(Acl, P, symmetrize(Q));
  return P;
}

struct LyapunovPair {
  Mat P;  // Acl^T P + P Acl + Qp = 0
  Mat W;  // Acl W + W Acl^T + Qw = 0
};

/// Both Lyapunov equations of one Hurwitz closed loop from a single
/// factorization. The caller has already established that Acl is Hurwitz.
inline LyapunovPair solve_lyapunov_pair(const Mat& Acl, const Mat& Qp, const Mat& Qw) {
  require_square(Acl, "closed-loop matrix");
  require_shape(Qp, Acl.rows(), Acl.rows(), "Lyapunov right-hand side");
  require_shape(Qw, Acl.rows(), Acl.rows(), "Lyapunov right-hand side");
  require_finite(Acl, "closed-loop matrix");
  const Mat L = detail::lyapunov_operator(Acl);
  Eigen::PartialPivLU<Mat> lu(L);
  LyapunovPair out{detail::lyapunov_solve(lu, L, Qp, false),
                   detail::lyapunov_solve(lu, L, Qw, true)};
  detail::check_lyapunov_residual(Acl, out.P, symmetrize(Qp));
  detail::check_lyapunov_residual(Acl.transpose(), out.W, symmetrize(Qw));
  return out;
}

namespace detail {

inline double complex_rank_threshold(const Eigen::MatrixXcd& M, double smax) {
  return static_cast<double>(std::max(M.rows(), M.cols())) * smax * 1e-10;
}

inline int complex_rank(const Eigen::MatrixXcd& M) {
  if (M.size() == 0) return 0;
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(M);
  const Vec s = svd.singularValues();
  const double thr = complex_rank_threshold(M, s(0));
  int r = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (s(i) > thr && s(i) > 0.0) ++r;
  }
  return r;
}

}  // namespace detail

/// Modes with Re(lambda) above this band are checked by the PBH tests.
inline constexpr double kPbhMarginalBand = -1e-9;

/// First eigenvalue lambda of A with Re >= band where [lambda I - A, B] loses
/// row rank, if any.
inline std::optional<Complex> pbh_uncontrollable_mode(const Mat& A, const Mat& B) {
  require_square(A, "A");
  if (B.rows() != A.rows()) throw DimensionError("B rows must match A");
  const Index n = A.rows();
  const Eigen::VectorXcd ev = eigenvalues(A);
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i).real() < kPbhMarginalBand) continue;
    Eigen::MatrixXcd M(n, n + B.cols());
    M.leftCols(n) = ev(i) * Eigen::MatrixXcd::Identity(n, n) - A.cast<Complex>();
    M.rightCols(B.cols()) = B.cast<Complex>();
    if (detail::complex_rank(M) < n) return ev(i);
  }
  return std::nullopt;
}

/// Dual test: first eigenvalue with Re >= band where [A - lambda I; C] loses
/// column rank.
inline std::optional<Complex> pbh_unobservable_mode(const Mat& A, const Mat& C) {
  require_square(A, "A");
  if (C.cols() != A.rows()) throw DimensionError("C columns must match A");
  const Index n = A.rows();
  const Eigen::VectorXcd ev = eigenvalues(A);
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i).real() < kPbhMarginalBand) continue;
    Eigen::MatrixXcd M(n + C.rows(), n);
    M.topRows(n) = A.cast<Complex>() - ev(i) * Eigen::MatrixXcd::Identity(n, n);
    M.bottomRows(C.rows()) = C.cast<Complex>();
    if (detail::complex_rank(M) < n) return ev(i);
  }
  return std::nullopt;
}

inline std::string format_complex(Complex z) {
  std::ostringstream os;
  os.precision(6);
  os << z.real();
  if (z.imag() != 0.0) os << (z.imag() < 0 ? " - " : " + ") << std::abs(z.imag()) << "i";
  return os.str();
}

struct NewtonKleinmanResult {
  Mat P;
  Mat K;
  int iterations = 0;
};

/// Newton-Kleinman iteration from a stabilizing gain K0: each step solves one
/// Lyapunov equation for the current closed loop.
inline NewtonKleinmanResult newton_kleinman(const Mat& A, const Mat& B,
                                            const Mat& Q, const Mat& R,
                                            const Mat& K0,
                                            int max_iterations = 100,
                                            double tol = 1e-13) {
  Eigen::LLT<Mat> Rchol(symmetrize(R));
  if (Rchol.info() != Eigen::Success) {
    throw PreconditionError("R must be positive definite");
  }
  NewtonKleinmanResult out;
  out.K = K0;
  Mat P_prev;
  double prev_step = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= max_iterations; ++it) {
    const Mat Acl = A - B * out.K;
    if (!is_hurwitz(Acl)) {
      throw NumericalError("Newton-Kleinman iterate lost stability at step " +
                           std::to_string(it));
    }
    out.P = solve_lyapunov(Acl, Q + out.K.transpose() * R * out.K);
    out.K = Rchol.solve(B.transpose() * out.P);
    out.iterations = it;
    if (it > 1) {
      const double step = (out.P - P_prev).norm() / (1.0 + out.P.norm());
      if (step <= tol) return out;
      // Quadratic convergence has ended in round-off noise of the Lyapunov solves.
      // The CARE residual check in solve_care judges the result.
      if (step <= 1e-6 && step >= prev_step) return out;
      prev_step = step;
    }
    P_prev = out.P;
  }
  throw NumericalError("Newton-Kleinman did not converge in " +
                       std::to_string(max_iterations) + " iterations");
}

/// Stabilizing gain by aggressive eigenvalue shifting. The primary route
/// (Bass) places every closed-loop eigenvalue on Re = -beta; when (A, B) is
/// stabilizable but not controllable it falls back to a shift homotopy
/// over Riccati solutions of A - sigma I.
inline Mat stabilizing_gain(const Mat& A, const Mat& B) {
  require_square(A, "A");
  if (B.rows() != A.rows()) throw DimensionError("B rows must match A");
  const Index n = A.rows();
  const Index m = B.cols();
  if (is_hurwitz(A)) return Mat::Zero(m, n);

  // Checked first: a B at round-off level would otherwise yield a huge "stabilizing" gain.
  if (auto mode = pbh_uncontrollable_mode(A, B)) {
    throw PreconditionError("(A, B) is not stabilizable: uncontrollable mode " +
                            format_complex(*mode));
  }
  const Eigen::VectorXcd ev = eigenvalues(A);
  const double beta = std::max(0.0, -ev.real().minCoeff()) + 1.0;
  // (-(A + beta I)) Z + Z (-(A + beta I))^T + 2 B B^T = 0
  const Mat Abar = A + beta * Mat::Identity(n, n);
  const Mat Z = solve_lyapunov(-Abar.transpose(), 2.0 * B * B.transpose());
  Eigen::LDLT<Mat> Zf(Z);
  if (Zf.info() == Eigen::Success && Zf.rcond() > 1e-12) {
    Mat K = Zf.solve(B).transpose();
    if (K.allFinite() && is_hurwitz(A - B * K)) return K;
  }

  double sigma = std::max(0.0, ev.real().maxCoeff()) + 1.0;
  Mat K = Mat::Zero(m, n);
  const Mat I = Mat::Identity(n, n);
  const Mat Im = Mat::Identity(m, m);
  for (int it = 0; it < 200; ++it) {
    const Mat As = A - sigma * I;
    K = newton_kleinman(As, B, I, Im, K).K;
    if (is_hurwitz(A - B * K)) return K;
    const double gamma = -spectral_abscissa(As - B * K);
    sigma -= 0.5 * gamma;
  }
  throw NumericalError("shift homotopy failed to find a stabilizing gain");
}

struct CareOptions {
  std::optional<Mat> K0;
  int max_iterations = 100;
  double tolerance = 1e-13;
};

/// Stabilizing solution P of A^T P + P A - P B R^{-1} B^T P + Q = 0.
inline Mat solve_care(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                      const CareOptions& opts = {}) {
  require_square(A, "A");
  const Index n = A.rows();
  if (B.rows() != n) throw DimensionError("B rows must match A");
  const Index m = B.cols();
  require_shape(Q, n, n, "Q");
  require_shape(R, m, m, "R");
  for (const Mat* M : {&A, &B, &Q, &R}) require_finite(*M, "CARE input");
  if (!is_symmetric(Q) || !is_symmetric(R)) {
    throw PreconditionError("Q and R must be symmetric");
  }
  if (!is_positive_definite(R)) throw PreconditionError("R must be positive definite");

  Mat K0;
  if (opts.K0) {
    require_shape(*opts.K0, m, n, "initial gain");
    if (!is_hurwitz(A - B * *opts.K0)) {
      throw PreconditionError("initial gain does not stabilize (A, B)");
    }
    K0 = *opts.K0;
  } else {
    K0 = stabilizing_gain(A, B);
  }

  NewtonKleinmanResult nk;
  try {
    nk = newton_kleinman(A, B, Q, R, K0, opts.max_iterations, opts.tolerance);
  } catch (const NumericalError&) {
    if (auto mode = pbh_unobservable_mode(A, psd_sqrt(Q))) {
      throw PreconditionError("(A, sqrt(Q)) is not detectable: unobservable mode " +
                              format_complex(*mode));
    }
    throw;
  }
  const Mat& P = nk.P;
  const Mat BRB = B * symmetrize(R).llt().solve(B.transpose());
  const Mat res = A.transpose() * P + P * A - P * BRB * P + Q;
  const double scale = 1.0 + Q.norm() + 2.0 * A.norm() * P.norm() +
                       (P * BRB * P).norm();
  if (!(res.norm() <= 1e-8 * scale)) {
    throw NumericalError("CARE residual " + std::to_string(res.norm()) +
                         " exceeds tolerance");
  }
  // A margin at round-off level means the iteration crept toward a marginal mode.
  const double margin = 1e-9 * (1.0 + A.norm() + (B * nk.K).norm());
  if (!(spectral_abscissa(A - B * nk.K) < -margin)) {
    if (auto mode = pbh_unobservable_mode(A, psd_sqrt(Q))) {
      throw PreconditionError("(A, sqrt(Q)) is not detectable: unobservable mode " +
                              format_complex(*mode));
    }
    throw NumericalError("CARE solution is not stabilizing");
  }
  if (min_symmetric_eigenvalue(P) < -1e-10 * (1.0 + P.norm())) {
    throw NumericalError("CARE solution is not positive semidefinite");
  }
  return P;
}

/// Optimal gain R^{-1} B^T P for the CARE solution P.
inline Mat lqr_gain(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                    const CareOptions& opts = {}) {
  const Mat P = solve_care(A, B, Q, R, opts);
  return symmetrize(R).llt().solve(B.transpose() * P);
}

}  // namespace lqi
