#pragma once

#include <vector>

#include <Eigen/Dense>

#include "dcc/qp.hpp"

namespace testsupport {

struct BruteQpResult {
    bool feasible = false;
    Eigen::VectorXd x;
    double objective = 0.0;
};

/** Reference QP solver by exhaustive active-set enumeration: for every subset
 *  of the inequalities, solve the equality-constrained stationarity system and
 *  keep the best candidate that is primal feasible with nonnegative subset
 *  multipliers. Exponential in the number of inequalities; test sizes only. */
inline BruteQpResult qp_bruteforce(const dcc::QpProblem& qp, double tol = 1e-7) {
    const int n = static_cast<int>(qp.H.rows());
    const int meq = static_cast<int>(qp.E.rows());
    const int m = static_cast<int>(qp.A.rows());
    BruteQpResult best;
    double best_obj = dcc::kInf;
    for (unsigned mask = 0; mask < (1u << m); ++mask) {
        std::vector<int> S;
        for (int i = 0; i < m; ++i)
            if (mask & (1u << i)) S.push_back(i);
        const int k = meq + static_cast<int>(S.size());
        Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + k, n + k);
        Eigen::VectorXd rhs(n + k);
        K.topLeftCorner(n, n) = qp.H;
        rhs.head(n) = -qp.c;
        for (int i = 0; i < meq; ++i) {
            K.block(n + i, 0, 1, n) = qp.E.row(i);
            K.block(0, n + i, n, 1) = qp.E.row(i).transpose();
            rhs(n + i) = qp.e(i);
        }
        for (size_t j = 0; j < S.size(); ++j) {
            const int r = n + meq + static_cast<int>(j);
            K.block(r, 0, 1, n) = qp.A.row(S[j]);
            K.block(0, r, n, 1) = qp.A.row(S[j]).transpose();
            rhs(r) = qp.b(S[j]);
        }
        const Eigen::VectorXd sol = K.fullPivLu().solve(rhs);
        if ((K * sol - rhs).cwiseAbs().maxCoeff() > tol * std::max(1.0, rhs.cwiseAbs().maxCoeff()))
            continue;  // singular or inconsistent stationarity system
        const Eigen::VectorXd x = sol.head(n);
        bool ok = true;
        for (size_t j = 0; j < S.size() && ok; ++j)
            if (sol(n + meq + static_cast<int>(j)) < -tol) ok = false;
        if (meq > 0 && (qp.E * x - qp.e).cwiseAbs().maxCoeff() > tol) ok = false;
        if (m > 0 && (qp.A * x - qp.b).maxCoeff() > tol) ok = false;
        if (!ok) continue;
        const double obj = 0.5 * x.dot(qp.H * x) + qp.c.dot(x);
        if (obj < best_obj) {
            best_obj = obj;
            best.feasible = true;
            best.x = x;
            best.objective = obj;
        }
    }
    return best;
}

}  // namespace testsupport
