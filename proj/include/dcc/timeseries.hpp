#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dcc/linalg.hpp"
#include "dcc/rng.hpp"

namespace dcc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/** One component of the stage-t relation
 *      sum_{k=0}^{p} alpha[k] xi_{t-k} = mu + sum_{k=0}^{q} beta[k] eps_{t-k}.
 *  alpha[0], alpha[p] and beta[q] must be nonzero. */
struct ComponentSpec {
    int p = 0;
    int q = 0;
    VectorXd alpha;  // size p+1
    VectorXd beta;   // size q+1
    double mu = 0.0;
};

struct StageSpec {
    std::vector<ComponentSpec> comp;  // size M
};

/** Pre-horizon values: column k-1 holds stage index 1-k (so column 0 is
 *  stage 0, column 1 is stage -1, ...). */
struct History {
    MatrixXd xi;   // M x depth
    MatrixXd eps;  // M x depth
};

struct TimeSeriesModel {
    int T = 0;
    int M = 0;
    std::vector<StageSpec> stage;  // size T
    std::vector<MatrixXd> sigma;   // noise covariance per stage, M x M
    History history;

    void validate() const {
        if (T < 1) throw std::invalid_argument("timeseries: T must be >= 1");
        if (M < 1) throw std::invalid_argument("timeseries: M must be >= 1");
        if (static_cast<int>(stage.size()) != T)
            throw std::invalid_argument("timeseries: stage list length != T");
        if (static_cast<int>(sigma.size()) != T)
            throw std::invalid_argument("timeseries: sigma list length != T");
        for (int t = 0; t < T; ++t) {
            if (static_cast<int>(stage[t].comp.size()) != M)
                throw std::invalid_argument("timeseries: component count != M at stage " +
                                            std::to_string(t + 1));
            for (int m = 0; m < M; ++m) {
                const ComponentSpec& c = stage[t].comp[m];
                if (c.p < 0 || c.q < 0)
                    throw std::invalid_argument("timeseries: negative lag order");
                if (c.alpha.size() != c.p + 1 || c.beta.size() != c.q + 1)
                    throw std::invalid_argument("timeseries: coefficient array length mismatch");
                if (c.alpha(0) == 0.0)
                    throw std::invalid_argument("timeseries: alpha[0] must be nonzero");
                if (c.alpha(c.p) == 0.0 || c.beta(c.q) == 0.0)
                    throw std::invalid_argument("timeseries: trailing lag coefficient must be nonzero");
            }
            if (sigma[t].rows() != M || sigma[t].cols() != M)
                throw std::invalid_argument("timeseries: sigma dimension mismatch");
            psd_factor(sigma[t], 1e-12, "timeseries: sigma");
        }
    }
};

/** Coefficients of the causal representation
 *      xi_t(m) = c_t(m) + sum_{k=1}^{r_t} gamma_{t,k}(m) xi_{1-k}(m)
 *                       + sum_{k=1}^{s_t} delta_{t,k}(m) eps_{1-k}(m)
 *                       + sum_{k=1}^{t} theta_{t,k}(m) eps_k(m).
 *  All containers are 0-based in t; lag index k-1 addresses lag k. */
struct Decomposition {
    int T = 0;
    int M = 0;
    std::vector<VectorXd> c;                   // c[t](m)
    std::vector<std::vector<VectorXd>> gamma;  // gamma[t][m](k-1), size r[t][m]
    std::vector<std::vector<VectorXd>> delta;  // delta[t][m](k-1), size s[t][m]
    std::vector<MatrixXd> theta;               // theta[t](m, k-1), M x (t+1)
    std::vector<std::vector<int>> r;
    std::vector<std::vector<int>> s;

    int history_depth() const {
        int d = 0;
        for (int t = 0; t < T; ++t)
            for (int m = 0; m < M; ++m) d = std::max({d, r[t][m], s[t][m]});
        return d;
    }
};

/** Unrolls the stagewise relation into the causal representation. The lag
 *  windows below mirror the structure of the recursion: a new-stage
 *  coefficient inherits from stage t+1-k exactly when that stage's own lag
 *  range reaches index j. */
inline Decomposition decompose_coefficients(const TimeSeriesModel& model) {
    model.validate();
    const int T = model.T, M = model.M;
    Decomposition D;
    D.T = T;
    D.M = M;
    D.c.assign(T, VectorXd::Zero(M));
    D.gamma.assign(T, std::vector<VectorXd>(M));
    D.delta.assign(T, std::vector<VectorXd>(M));
    D.theta.assign(T, MatrixXd());
    D.r.assign(T, std::vector<int>(M, 0));
    D.s.assign(T, std::vector<int>(M, 0));
    for (int t = 0; t < T; ++t) D.theta[t] = MatrixXd::Zero(M, t + 1);

    for (int m = 0; m < M; ++m) {
        const ComponentSpec& c1 = model.stage[0].comp[m];
        const double a0 = c1.alpha(0);
        D.c[0](m) = c1.mu / a0;
        D.r[0][m] = c1.p;
        D.gamma[0][m] = VectorXd::Zero(c1.p);
        for (int k = 1; k <= c1.p; ++k) D.gamma[0][m](k - 1) = -c1.alpha(k) / a0;
        D.s[0][m] = c1.q;
        D.delta[0][m] = VectorXd::Zero(c1.q);
        for (int k = 1; k <= c1.q; ++k) D.delta[0][m](k - 1) = c1.beta(k) / a0;
        D.theta[0](m, 0) = c1.beta(0) / a0;
    }

    for (int t = 1; t < T; ++t) {      // computing stage t+1 in 1-based terms
        const int tp = t;              // previous stage count, 1-based t of the step
        for (int m = 0; m < M; ++m) {
            const ComponentSpec& cs = model.stage[t].comp[m];
            const double a0 = cs.alpha(0);
            const int P = cs.p, Q = cs.q;
            const int kmax = std::min(tp, P);

            double cv = cs.mu / a0;
            for (int k = 1; k <= kmax; ++k)
                cv -= cs.alpha(k) / a0 * D.c[t - k](m);
            D.c[t](m) = cv;

            // theta_{t+1,j}, j = 1..t+1
            D.theta[t](m, t) = cs.beta(0) / a0;
            const int qwin = std::min(tp, Q);
            for (int j = 1; j <= tp; ++j) {
                double v = (j >= tp + 1 - qwin) ? cs.beta(tp + 1 - j) / a0 : 0.0;
                const int imax = std::min(P, tp + 1 - j);
                for (int k = 1; k <= imax; ++k)
                    v -= cs.alpha(k) / a0 * D.theta[t - k](m, j - 1);
                D.theta[t](m, j - 1) = v;
            }

            int X = 0, Y = 0;
            for (int k = 1; k <= kmax; ++k) {
                X = std::max(X, D.r[t - k][m]);
                Y = std::max(Y, D.s[t - k][m]);
            }

            const int rnew = std::max({P - tp, X, 0});
            D.r[t][m] = rnew;
            D.gamma[t][m] = VectorXd::Zero(rnew);
            for (int j = 1; j <= rnew; ++j) {
                double v = (j <= P - tp) ? -cs.alpha(tp + j) / a0 : 0.0;
                for (int k = 1; k <= kmax; ++k)
                    if (j <= D.r[t - k][m]) v -= cs.alpha(k) / a0 * D.gamma[t - k][m](j - 1);
                D.gamma[t][m](j - 1) = v;
            }

            const int snew = std::max({Q - tp, Y, 0});
            D.s[t][m] = snew;
            D.delta[t][m] = VectorXd::Zero(snew);
            for (int j = 1; j <= snew; ++j) {
                double v = (j <= Q - tp) ? cs.beta(tp + j) / a0 : 0.0;
                for (int k = 1; k <= kmax; ++k)
                    if (j <= D.s[t - k][m]) v -= cs.alpha(k) / a0 * D.delta[t - k][m](j - 1);
                D.delta[t][m](j - 1) = v;
            }
        }
    }

    const int need = D.history_depth();
    if (model.history.xi.rows() != M && need > 0)
        throw std::invalid_argument("timeseries: history xi has wrong component count");
    if (model.history.xi.cols() < need || model.history.eps.cols() < need)
        throw std::invalid_argument("timeseries: history too short, need depth " +
                                    std::to_string(need));
    return D;
}

/** Affine-in-noise form xi_t = mu_t + Theta_t eps with eps the stacked noise
 *  (eps_1,...,eps_T) and Sigma its block-diagonal covariance. Theta_t has the
 *  block pattern (diag theta_{t,1}, ..., diag theta_{t,t}, 0). */
struct CompactForm {
    int T = 0;
    int M = 0;
    std::vector<VectorXd> mu;     // per stage, size M
    std::vector<MatrixXd> theta;  // per stage, M x (M*T)
    MatrixXd Sigma;               // (M*T) x (M*T)
    MatrixXd theta_all;           // rows stacked over stages, (M*T) x (M*T)
    VectorXd mu_all;              // stacked over stages

    /** Rows covering stages 1..t (zero-rows matrix when t == 0). */
    MatrixXd theta_stack(int t) const { return theta_all.topRows(static_cast<Eigen::Index>(M) * t); }
    VectorXd mu_stack(int t) const { return mu_all.head(static_cast<Eigen::Index>(M) * t); }
};

inline CompactForm compact_form(const TimeSeriesModel& model, const Decomposition& D) {
    const int T = model.T, M = model.M;
    CompactForm cf;
    cf.T = T;
    cf.M = M;
    cf.mu.assign(T, VectorXd::Zero(M));
    cf.theta.assign(T, MatrixXd::Zero(M, static_cast<Eigen::Index>(M) * T));
    cf.Sigma = MatrixXd::Zero(static_cast<Eigen::Index>(M) * T, static_cast<Eigen::Index>(M) * T);
    for (int t = 0; t < T; ++t) {
        for (int m = 0; m < M; ++m) {
            double v = D.c[t](m);
            for (int k = 1; k <= D.r[t][m]; ++k)
                v += D.gamma[t][m](k - 1) * model.history.xi(m, k - 1);
            for (int k = 1; k <= D.s[t][m]; ++k)
                v += D.delta[t][m](k - 1) * model.history.eps(m, k - 1);
            cf.mu[t](m) = v;
            for (int k = 1; k <= t + 1; ++k)
                cf.theta[t](m, static_cast<Eigen::Index>(M) * (k - 1) + m) = D.theta[t](m, k - 1);
        }
        cf.Sigma.block(static_cast<Eigen::Index>(M) * t, static_cast<Eigen::Index>(M) * t, M, M) =
            model.sigma[t];
    }
    cf.theta_all.resize(static_cast<Eigen::Index>(M) * T, static_cast<Eigen::Index>(M) * T);
    cf.mu_all.resize(static_cast<Eigen::Index>(M) * T);
    for (int t = 0; t < T; ++t) {
        cf.theta_all.middleRows(static_cast<Eigen::Index>(M) * t, M) = cf.theta[t];
        cf.mu_all.segment(static_cast<Eigen::Index>(M) * t, M) = cf.mu[t];
    }
    return cf;
}

struct SimulationResult {
    MatrixXd xi;   // n_paths x (M*T), path i stage t component m at column M*t+m
    MatrixXd eps;  // same layout
};

/** Iterates the stagewise relation directly (independently of the causal
 *  decomposition). Path i uses the seeded stream seed + i, so any subset of
 *  paths is reproducible in isolation. */
inline SimulationResult simulate_paths(const TimeSeriesModel& model, int n_paths,
                                       std::uint64_t seed) {
    model.validate();
    const int T = model.T, M = model.M;
    std::vector<MatrixXd> L(T);
    for (int t = 0; t < T; ++t) L[t] = psd_factor(model.sigma[t], 1e-12, "timeseries: sigma");
    SimulationResult out;
    out.xi.resize(n_paths, static_cast<Eigen::Index>(M) * T);
    out.eps.resize(n_paths, static_cast<Eigen::Index>(M) * T);
    for (int i = 0; i < n_paths; ++i) {
        Rng rng(seed + static_cast<std::uint64_t>(i));
        MatrixXd eps(M, T), xi(M, T);
        for (int t = 0; t < T; ++t) eps.col(t) = L[t] * rng.normal_vector(M);
        // value at stage index u (1-based); u <= 0 comes from history
        auto xi_at = [&](int u, int m) {
            return u >= 1 ? xi(m, u - 1) : model.history.xi(m, -u);
        };
        auto eps_at = [&](int u, int m) {
            return u >= 1 ? eps(m, u - 1) : model.history.eps(m, -u);
        };
        for (int t = 1; t <= T; ++t) {
            for (int m = 0; m < M; ++m) {
                const ComponentSpec& cs = model.stage[t - 1].comp[m];
                double v = cs.mu;
                for (int k = 0; k <= cs.q; ++k) v += cs.beta(k) * eps_at(t - k, m);
                for (int k = 1; k <= cs.p; ++k) v -= cs.alpha(k) * xi_at(t - k, m);
                xi(m, t - 1) = v / cs.alpha(0);
            }
        }
        for (int t = 0; t < T; ++t)
            for (int m = 0; m < M; ++m) {
                out.xi(i, static_cast<Eigen::Index>(M) * t + m) = xi(m, t);
                out.eps(i, static_cast<Eigen::Index>(M) * t + m) = eps(m, t);
            }
    }
    return out;
}

}  // namespace dcc
