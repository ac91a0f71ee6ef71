#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace dcc {

/** Factor a symmetric PSD matrix as L L^T. Tries Cholesky first and falls
 *  back to an eigendecomposition with eigenvalues clamped at zero, rejecting
 *  matrices whose most negative eigenvalue exceeds the tolerance. */
inline Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& S, double tol = 1e-12,
                                  const std::string& what = "matrix") {
    if (S.rows() != S.cols()) throw std::invalid_argument(what + ": not square");
    if (S.rows() == 0) return Eigen::MatrixXd(0, 0);
    if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + S.cwiseAbs().maxCoeff()))
        throw std::invalid_argument(what + ": not symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    if (es.eigenvalues().minCoeff() < -tol * scale)
        throw std::invalid_argument(what + ": not positive semidefinite");
    Eigen::VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * d.asDiagonal();
}

/** Numerical rank with a relative singular-value threshold. */
inline Eigen::Index matrix_rank(const Eigen::MatrixXd& A, double rel_tol = 1e-10) {
    if (A.size() == 0) return 0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
    const double cutoff = rel_tol * svd.singularValues()(0);
    Eigen::Index r = 0;
    for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i)
        if (svd.singularValues()(i) > cutoff) ++r;
    return r;
}

}  // namespace dcc
