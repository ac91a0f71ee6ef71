#pragma once

#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "dcc/qp.hpp"
#include "dcc/rng.hpp"

namespace dcc {

/** Smooth program
 *      min f(x)  s.t.  c(x) <= 0 (componentwise),  A x <= b,  E x = e.
 *  The nonlinear block may be absent (m = 0); linear blocks may be empty. */
struct NlpProblem {
    int n = 0;
    std::function<double(const VectorXd&)> f;
    std::function<VectorXd(const VectorXd&)> grad;
    int m = 0;
    std::function<VectorXd(const VectorXd&)> c;
    std::function<MatrixXd(const VectorXd&)> c_jac;  // m x n rows of gradients
    MatrixXd A;
    VectorXd b;
    MatrixXd E;
    VectorXd e;
};

struct SolveOptions {
    int starts = 5;                  // random restarts beyond the supplied point
    int max_iter = 500;              // total inner iterations per start
    double kkt_tol = 1e-6;
    std::uint64_t seed = 0;
    double start_spread = 1.0;       // scale of random start perturbations
    double rho0 = 100.0;             // initial quadratic penalty weight
    double runaway_radius = 1e4;     // inner-iterate escape guard (relative)
    std::vector<VectorXd> warm_starts;  // extra start points tried verbatim
};

struct NlpResult {
    VectorXd x;
    double objective = std::numeric_limits<double>::infinity();
    VectorXd nonlinear_mult;
    double stationarity = std::numeric_limits<double>::infinity();
    double violation = std::numeric_limits<double>::infinity();
    double complementarity = std::numeric_limits<double>::infinity();
    int iterations = 0;
    int start_index = -1;
    bool converged = false;
};

namespace detail {

/** Nearest point in the linear feasible set; throws if that set is empty. */
inline VectorXd project_linear(const NlpProblem& nlp, const VectorXd& y) {
    if (nlp.A.rows() == 0 && nlp.E.rows() == 0) return y;
    const QpResult r = qp_project(y, nlp.E, nlp.e, nlp.A, nlp.b);
    if (!r.feasible)
        throw std::invalid_argument("solve_nlp: linear constraints are infeasible");
    return r.x;
}

/** One augmented-Lagrangian run from a fixed start point. */
inline NlpResult solve_from(const NlpProblem& nlp, const SolveOptions& opts, VectorXd x) {
    NlpResult res;
    x = project_linear(nlp, x);
    VectorXd lambda = VectorXd::Zero(nlp.m);
    double rho = opts.rho0;
    int used = 0;
    int runaways = 0;
    double prev_violation = std::numeric_limits<double>::infinity();

    const auto al_value = [&](const VectorXd& xx) {
        double v = nlp.f(xx);
        if (nlp.m > 0) {
            const VectorXd cv = nlp.c(xx);
            for (int i = 0; i < nlp.m; ++i) {
                const double s = std::max(0.0, lambda(i) + rho * cv(i));
                v += (s * s - lambda(i) * lambda(i)) / (2.0 * rho);
            }
        }
        return v;
    };
    const auto al_grad = [&](const VectorXd& xx) {
        VectorXd g = nlp.grad(xx);
        if (nlp.m > 0) {
            const VectorXd cv = nlp.c(xx);
            const MatrixXd J = nlp.c_jac(xx);
            for (int i = 0; i < nlp.m; ++i) {
                const double s = std::max(0.0, lambda(i) + rho * cv(i));
                if (s > 0.0) g += s * J.row(i).transpose();
            }
        }
        return g;
    };
    // step restricted to the linear feasible set, model Hessian H
    const auto qp_step = [&](const MatrixXd& H, const VectorXd& g, const VectorXd& at) {
        QpProblem qp;
        qp.H = H;
        qp.c = g;
        qp.E = nlp.E;
        qp.e = nlp.e.size() ? VectorXd(nlp.e - nlp.E * at) : VectorXd(0);
        qp.A = nlp.A;
        qp.b = nlp.b.size() ? VectorXd(nlp.b - nlp.A * at) : VectorXd(0);
        return qp_solve_active_set(qp);
    };

    const int max_outer = 40;
    for (int outer = 0; outer < max_outer; ++outer) {
        const VectorXd center = x;
        const double escape =
            opts.runaway_radius * (1.0 + center.cwiseAbs().maxCoeff());
        MatrixXd H = MatrixXd::Identity(nlp.n, nlp.n);
        VectorXd g = al_grad(x);
        double fx = al_value(x);
        if (!std::isfinite(fx)) return res;  // hopeless start
        bool ran_away = false;
        // sweeps are capped so multiplier updates still happen within the
        // iteration budget; unconstrained problems need no update and may
        // spend everything in one sweep
        const int sweep_cap = nlp.m > 0 ? std::max(25, nlp.n + 15) : opts.max_iter;
        int sweep = 0;
        // inner quasi-Newton minimization of the augmented Lagrangian
        while (used < opts.max_iter && sweep < sweep_cap) {
            ++sweep;
            ++used;
            const QpResult st = qp_step(H, g, x);
            if (!st.feasible) break;  // numerical trouble; fall back to outer update
            const VectorXd d = st.x;
            const double dn = d.cwiseAbs().maxCoeff();
            if (dn <= 1e-10 * std::max(1.0, x.cwiseAbs().maxCoeff())) break;
            const double slope = g.dot(d);
            double t = 1.0;
            double fnew = fx;
            VectorXd xnew = x;
            bool accepted = false;
            while (t > 1e-13) {
                xnew = x + t * d;
                fnew = al_value(xnew);
                if (std::isfinite(fnew) && fnew <= fx + 1e-4 * t * slope) {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if (!accepted) break;
            if ((xnew - center).cwiseAbs().maxCoeff() > escape) {
                // bounded constraint terms cannot stop an unbounded descent;
                // restart this sweep from the center with a stiffer penalty
                ran_away = true;
                break;
            }
            const VectorXd gnew = al_grad(xnew);
            const VectorXd s = xnew - x;
            VectorXd yv = gnew - g;
            // damped BFGS update keeps H positive definite
            const VectorXd Hs = H * s;
            const double sHs = s.dot(Hs);
            const double sy = s.dot(yv);
            if (sHs > 1e-14) {
                double theta = 1.0;
                if (sy < 0.2 * sHs) theta = 0.8 * sHs / (sHs - sy);
                const VectorXd r = theta * yv + (1.0 - theta) * Hs;
                H += -(Hs * Hs.transpose()) / sHs + (r * r.transpose()) / s.dot(r);
            }
            x = xnew;
            fx = fnew;
            g = gnew;
        }
        if (ran_away) {
            x = center;
            rho = std::min(rho * 100.0, 1e10);
            if (++runaways > 6 || used >= opts.max_iter) return res;
            continue;
        }

        // multiplier update and convergence measures
        VectorXd cv = nlp.m > 0 ? nlp.c(x) : VectorXd(0);
        for (int i = 0; i < nlp.m; ++i) lambda(i) = std::max(0.0, lambda(i) + rho * cv(i));
        // stationarity of the true Lagrangian through a unit-Hessian step
        VectorXd gl = nlp.grad(x);
        if (nlp.m > 0) gl += nlp.c_jac(x).transpose() * lambda;
        const QpResult pg = qp_step(MatrixXd::Identity(nlp.n, nlp.n), gl, x);
        const double stat = pg.feasible ? pg.x.cwiseAbs().maxCoeff()
                                        : std::numeric_limits<double>::infinity();
        double feas = 0.0;
        double comp = 0.0;
        for (int i = 0; i < nlp.m; ++i) {
            feas = std::max(feas, cv(i));
            comp = std::max(comp, std::abs(lambda(i) * cv(i)) / (1.0 + std::abs(lambda(i))));
        }
        res.x = x;
        res.objective = nlp.f(x);
        res.nonlinear_mult = lambda;
        res.stationarity = stat;
        res.violation = std::max(0.0, feas);
        res.complementarity = comp;
        res.iterations = used;
        if (stat <= opts.kkt_tol && res.violation <= opts.kkt_tol && comp <= opts.kkt_tol) {
            res.converged = true;
            return res;
        }
        if (nlp.m == 0 || used >= opts.max_iter) return res;
        // stiffen only on two consecutive meaningfully infeasible outer
        // steps without a 4x reduction; the complementarity residual also
        // shrinks through multiplier updates alone, and escalating on it
        // freezes the iterate on the boundary before the multipliers settle
        const double floor_tol = 0.1 * opts.kkt_tol;
        if (res.violation > 0.25 * prev_violation && res.violation > floor_tol &&
            prev_violation > floor_tol && rho < 1e8)
            rho *= 10.0;
        prev_violation = res.violation;
    }
    return res;
}

}  // namespace detail

/** Multi-start augmented-Lagrangian solver. Nonlinear constraints are
 *  penalized with running multiplier estimates while linear constraints stay
 *  exactly satisfied through the quadratic subproblems. Deterministic for a
 *  fixed seed; returns the best converged run, falling back to the least
 *  violating one. */
inline NlpResult solve_nlp(const NlpProblem& nlp, const VectorXd& x0,
                           const SolveOptions& opts = {}) {
    if (nlp.n < 1 || !nlp.f || !nlp.grad)
        throw std::invalid_argument("solve_nlp: objective callbacks are required");
    if (nlp.m > 0 && (!nlp.c || !nlp.c_jac))
        throw std::invalid_argument("solve_nlp: constraint callbacks are required");

    std::vector<VectorXd> starts;
    starts.push_back(x0);
    for (const auto& w : opts.warm_starts) starts.push_back(w);
    Rng rng(opts.seed);
    const int extra = std::max(0, opts.starts - 1);
    for (int k = 0; k < extra; ++k)
        starts.push_back(x0 + opts.start_spread * rng.normal_vector(nlp.n));

    NlpResult best;
    for (size_t k = 0; k < starts.size(); ++k) {
        NlpResult r = detail::solve_from(nlp, opts, starts[k]);
        r.start_index = static_cast<int>(k);
        const bool better =
            (r.converged && !best.converged) ||
            (r.converged == best.converged &&
             (r.converged ? r.objective < best.objective : r.violation < best.violation));
        if (best.start_index < 0 || better) best = r;
    }
    return best;
}

struct GridResult {
    VectorXd x;
    double value = std::numeric_limits<double>::infinity();
};

/** Full-factorial minimization over a box, then repeated zoom around the best
 *  cell. Exact enough for low-dimensional reference values. */
inline GridResult grid_search(const std::function<double(const VectorXd&)>& f, VectorXd lo,
                              VectorXd hi, int points_per_axis = 101, int refinements = 2) {
    const int d = static_cast<int>(lo.size());
    if (d < 1 || hi.size() != d) throw std::invalid_argument("grid_search: bad box");
    if (points_per_axis < 2) throw std::invalid_argument("grid_search: need a real grid");
    const VectorXd lo0 = lo, hi0 = hi;
    GridResult best;
    for (int pass = 0; pass <= refinements; ++pass) {
        std::vector<long> idx(d, 0);
        VectorXd x(d);
        long total = 1;
        for (int j = 0; j < d; ++j) total *= points_per_axis;
        for (long k = 0; k < total; ++k) {
            long r = k;
            for (int j = 0; j < d; ++j) {
                idx[j] = r % points_per_axis;
                r /= points_per_axis;
                x(j) = lo(j) + (hi(j) - lo(j)) * static_cast<double>(idx[j]) /
                                   (points_per_axis - 1);
            }
            const double v = f(x);
            if (v < best.value) {
                best.value = v;
                best.x = x;
            }
        }
        if (pass == refinements) break;
        // zoom to +-1.5 cells around the incumbent, staying inside the box
        for (int j = 0; j < d; ++j) {
            const double cell = (hi(j) - lo(j)) / (points_per_axis - 1);
            const double c = best.x(j);
            lo(j) = std::max(lo0(j), c - 1.5 * cell);
            hi(j) = std::min(hi0(j), c + 1.5 * cell);
        }
    }
    return best;
}

}  // namespace dcc
