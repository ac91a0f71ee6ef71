#pragma once

#include <algorithm>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "dcc/normal.hpp"

namespace dcc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/** min 0.5 x'Hx + c'x  s.t.  E x = e,  A x <= b, with H positive definite. */
struct QpProblem {
    MatrixXd H;
    VectorXd c;
    MatrixXd E;
    VectorXd e;
    MatrixXd A;
    VectorXd b;
};

struct QpResult {
    bool feasible = false;
    VectorXd x;
    VectorXd eq_mult;    // stationarity uses H x + c + E' eq_mult + A' ineq_mult = 0
    VectorXd ineq_mult;  // nonnegative, zero off the active set
    int iterations = 0;
    bool kkt_ok = false;
    double stationarity = 0.0;
    double feasibility = 0.0;
    double complementarity = 0.0;
    // infeasibility certificate: y >= 0, y'A + w'E = 0, y'b + w'e < 0
    VectorXd farkas_ineq, farkas_eq;
    double farkas_gap = 0.0;
};

namespace detail {

struct ActiveConstraint {
    bool is_eq = false;
    int index = 0;
    double sign = 1.0;  // equalities are entered with the violated orientation
    VectorXd normal;    // ">=" orientation
    double rhs = 0.0;
    double mult = 0.0;  // internal nonnegative multiplier
};

}  // namespace detail

/** Dual active-set method: walk from the unconstrained minimizer, repeatedly
 *  pulling in the most violated constraint with paired primal/dual steps, and
 *  dropping active inequalities whose multipliers would turn negative.
 *  Equalities are entered first and never dropped. No feasible starting point
 *  is needed, and infeasibility surfaces as a certificate instead of a throw. */
inline QpResult qp_solve_active_set(const QpProblem& qp, double tol = 1e-10) {
    const int n = static_cast<int>(qp.H.rows());
    const int meq = static_cast<int>(qp.E.rows());
    const int mineq = static_cast<int>(qp.A.rows());
    if (n < 1) throw std::invalid_argument("qp: need at least one variable");
    if (qp.H.cols() != n || qp.c.size() != n)
        throw std::invalid_argument("qp: objective dimension mismatch");
    if (qp.e.size() != meq || (meq > 0 && qp.E.cols() != n))
        throw std::invalid_argument("qp: equality dimension mismatch");
    if (qp.b.size() != mineq || (mineq > 0 && qp.A.cols() != n))
        throw std::invalid_argument("qp: inequality dimension mismatch");

    Eigen::LLT<MatrixXd> llt(qp.H);
    if (llt.info() != Eigen::Success)
        throw std::invalid_argument("qp: Hessian must be positive definite");

    QpResult res;
    res.x = llt.solve(-qp.c);
    res.eq_mult = VectorXd::Zero(meq);
    res.ineq_mult = VectorXd::Zero(mineq);

    std::vector<detail::ActiveConstraint> active;
    const double scale =
        std::max({1.0, qp.b.size() > 0 ? qp.b.cwiseAbs().maxCoeff() : 0.0,
                  qp.e.size() > 0 ? qp.e.cwiseAbs().maxCoeff() : 0.0,
                  res.x.cwiseAbs().maxCoeff()});
    const double feas_tol = tol * scale;

    // primal direction z and dual direction r for a candidate normal
    const auto directions = [&](const VectorXd& nplus, VectorXd& z, VectorXd& r) {
        const int q = static_cast<int>(active.size());
        const VectorXd Hin = llt.solve(nplus);
        if (q == 0) {
            z = Hin;
            r.resize(0);
            return;
        }
        MatrixXd N(n, q), Nh(n, q);
        for (int j = 0; j < q; ++j) {
            N.col(j) = active[j].normal;
            Nh.col(j) = llt.solve(active[j].normal);
        }
        const MatrixXd M = N.transpose() * Nh;
        r = M.ldlt().solve(N.transpose() * Hin);
        z = Hin - Nh * r;
    };

    const auto fill_certificate = [&](const detail::ActiveConstraint& cand, const VectorXd& r,
                                      double s) {
        res.farkas_ineq = VectorXd::Zero(mineq);
        res.farkas_eq = VectorXd::Zero(meq);
        if (cand.is_eq)
            res.farkas_eq(cand.index) = -cand.sign;
        else
            res.farkas_ineq(cand.index) = 1.0;
        for (size_t j = 0; j < active.size(); ++j) {
            if (active[j].is_eq)
                res.farkas_eq(active[j].index) += r(j) * active[j].sign;
            else
                res.farkas_ineq(active[j].index) -= r(j);
        }
        res.farkas_gap = s;
        res.feasible = false;
    };

    const auto enter = [&](detail::ActiveConstraint cand) -> bool {
        // returns false on detected infeasibility
        for (int pass = 0;; ++pass) {
            if (pass > 2 * (mineq + meq) + 8)
                throw std::runtime_error("qp: active-set cycling while entering a constraint");
            double s = cand.normal.dot(res.x) - cand.rhs;
            if (s >= -feas_tol) {
                // became satisfied through dual drops; nothing to enter
                if (cand.mult > 0.0) {
                    // accumulated multiplier must be retained only when tight
                    if (s <= feas_tol) {
                        active.push_back(cand);
                    }
                }
                return true;
            }
            VectorXd z, r;
            directions(cand.normal, z, r);
            const double zn = z.dot(cand.normal);
            const bool have_primal = zn > tol * std::max(1.0, cand.normal.squaredNorm());

            double t1 = kInf;
            int blocker = -1;
            for (size_t j = 0; j < active.size(); ++j) {
                if (active[j].is_eq) continue;
                if (r(j) > tol) {
                    const double ratio = active[j].mult / r(j);
                    if (ratio < t1 - 1e-14) {
                        t1 = ratio;
                        blocker = static_cast<int>(j);
                    }
                }
            }
            if (!have_primal && blocker < 0) {
                fill_certificate(cand, r, s);
                return false;
            }
            const double t2 = have_primal ? -s / zn : kInf;
            const double t = std::min(t1, t2);
            if (!(t < kInf))
                throw std::runtime_error("qp: unbounded dual step");
            if (have_primal) res.x += t * z;
            for (size_t j = 0; j < active.size(); ++j) active[j].mult -= t * (r.size() ? r(j) : 0.0);
            cand.mult += t;
            if (t == t2 && have_primal) {
                active.push_back(cand);
                return true;
            }
            active.erase(active.begin() + blocker);
        }
    };

    // equalities first, oriented so the current point violates them downward
    for (int i = 0; i < meq; ++i) {
        detail::ActiveConstraint cand;
        cand.is_eq = true;
        cand.index = i;
        const double s0 = qp.E.row(i).dot(res.x) - qp.e(i);
        cand.sign = s0 > 0.0 ? -1.0 : 1.0;
        cand.normal = cand.sign * qp.E.row(i).transpose();
        cand.rhs = cand.sign * qp.e(i);
        if (std::abs(s0) <= feas_tol) {
            VectorXd z, r;
            directions(cand.normal, z, r);
            if (z.cwiseAbs().maxCoeff() <= tol * std::max(1.0, cand.normal.cwiseAbs().maxCoeff()))
                continue;  // dependent and consistent: redundant
            active.push_back(cand);
            continue;
        }
        VectorXd z, r;
        directions(cand.normal, z, r);
        if (z.cwiseAbs().maxCoeff() <= tol * std::max(1.0, cand.normal.cwiseAbs().maxCoeff())) {
            fill_certificate(cand, r, cand.sign * s0);
            return res;
        }
        if (!enter(std::move(cand))) return res;
        ++res.iterations;
    }

    for (int iter = 0; iter < 100 * (mineq + meq + 10); ++iter) {
        // most violated inequality, lowest index on ties
        int p = -1;
        double worst = -feas_tol;
        for (int i = 0; i < mineq; ++i) {
            const double s = qp.b(i) - qp.A.row(i).dot(res.x);
            if (s < worst - 1e-15) {
                worst = s;
                p = i;
            }
        }
        if (p < 0) {
            res.feasible = true;
            break;
        }
        bool already = false;
        for (const auto& ac : active)
            if (!ac.is_eq && ac.index == p) already = true;
        if (already)
            throw std::runtime_error("qp: active constraint reported violated");
        detail::ActiveConstraint cand;
        cand.is_eq = false;
        cand.index = p;
        cand.normal = -qp.A.row(p).transpose();
        cand.rhs = -qp.b(p);
        if (!enter(std::move(cand))) return res;
        ++res.iterations;
    }
    if (!res.feasible) throw std::runtime_error("qp: iteration limit exceeded");

    for (const auto& ac : active) {
        if (ac.is_eq)
            res.eq_mult(ac.index) = -ac.sign * ac.mult;
        else
            res.ineq_mult(ac.index) = ac.mult;
    }

    // verify the optimality system before reporting success
    VectorXd stat = qp.H * res.x + qp.c;
    if (meq > 0) stat += qp.E.transpose() * res.eq_mult;
    if (mineq > 0) stat += qp.A.transpose() * res.ineq_mult;
    res.stationarity = stat.cwiseAbs().maxCoeff();
    double feas = 0.0;
    if (meq > 0) feas = (qp.E * res.x - qp.e).cwiseAbs().maxCoeff();
    if (mineq > 0) feas = std::max(feas, (qp.A * res.x - qp.b).maxCoeff());
    res.feasibility = std::max(0.0, feas);
    double comp = 0.0;
    for (int i = 0; i < mineq; ++i)
        comp = std::max(comp, std::abs(res.ineq_mult(i) * (qp.A.row(i).dot(res.x) - qp.b(i))));
    res.complementarity = comp;
    res.kkt_ok = res.stationarity <= 1e-8 * scale && res.feasibility <= 1e-9 * scale &&
                 res.complementarity <= 1e-8 * scale;
    return res;
}

/** Euclidean projection onto E x = e, A x <= b. */
inline QpResult qp_project(const VectorXd& y, const MatrixXd& E, const VectorXd& e,
                           const MatrixXd& A, const VectorXd& b) {
    QpProblem qp;
    qp.H = MatrixXd::Identity(y.size(), y.size());
    qp.c = -y;
    qp.E = E;
    qp.e = e;
    qp.A = A;
    qp.b = b;
    return qp_solve_active_set(qp);
}

}  // namespace dcc
