#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dcc/linalg.hpp"
#include "dcc/mvn.hpp"
#include "dcc/normal.hpp"
#include "dcc/rng.hpp"

namespace dcc {

using Eigen::VectorXd;

struct ProbabilityOptions {
    MvnOptions mvn;
    TruncationRegion support = TruncationRegion::none();
    /** Value evaluation drops a deterministic row when it holds with this
     *  slack and reports zero probability when it fails by more. */
    double value_variance_tol = 1e-14;
    double value_slack_tol = 1e-12;
    /** Gradient evaluation refuses rows whose variance is below this. */
    double grad_variance_tol = 1e-10;
    /** Correlation-derivative terms require |rho| bounded away from one. */
    double pair_correlation_cap = 1.0 - 1e-12;
};

struct ProbabilityValue {
    double value = 0.0;  // P(G eps <= g | eps in support)
    double error = 0.0;
    double joint = 0.0;  // P(G eps <= g, eps in support)
    double mass = 1.0;   // P(eps in support)
    double mass_error = 0.0;
};

namespace detail {

/** Finite-bound support rows of a box region as one-sided rows w . eps <= c. */
inline void append_box_rows(const TruncationRegion& region, int n, Eigen::MatrixXd& Gs,
                            VectorXd& gs) {
    std::vector<std::pair<int, double>> rows;  // (signed index+1, bound)
    for (int i = 0; i < n; ++i) {
        if (region.upper(i) != kInf) rows.push_back({i + 1, region.upper(i)});
        if (region.lower(i) != -kInf) rows.push_back({-(i + 1), -region.lower(i)});
    }
    Gs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()), n);
    gs.resize(static_cast<Eigen::Index>(rows.size()));
    for (size_t k = 0; k < rows.size(); ++k) {
        const int idx = rows[k].first;
        Gs(static_cast<Eigen::Index>(k), std::abs(idx) - 1) = idx > 0 ? 1.0 : -1.0;
        gs(static_cast<Eigen::Index>(k)) = rows[k].second;
    }
}

/** P(lower_rest <= X_rest <= upper_rest | X_S = v) for X ~ N(0, R)
 *  standardized; R may be singular outside the conditioning block. */
inline MvnResult conditional_rect(const Eigen::MatrixXd& R, const VectorXd& lower,
                                  const VectorXd& upper, const std::vector<int>& cond,
                                  const VectorXd& v, const MvnOptions& opts) {
    const int K = static_cast<int>(R.rows());
    const int kc = static_cast<int>(cond.size());
    std::vector<int> rest;
    {
        std::vector<bool> used(K, false);
        for (int i : cond) used[i] = true;
        for (int i = 0; i < K; ++i)
            if (!used[i]) rest.push_back(i);
    }
    const int kr = static_cast<int>(rest.size());
    if (kr == 0) return {1.0, 0.0};
    Eigen::MatrixXd Rss(kc, kc), Rrs(kr, kc), Rrr(kr, kr);
    for (int a = 0; a < kc; ++a)
        for (int c = 0; c < kc; ++c) Rss(a, c) = R(cond[a], cond[c]);
    for (int a = 0; a < kr; ++a)
        for (int c = 0; c < kc; ++c) Rrs(a, c) = R(rest[a], cond[c]);
    for (int a = 0; a < kr; ++a)
        for (int c = 0; c < kr; ++c) Rrr(a, c) = R(rest[a], rest[c]);
    const Eigen::MatrixXd Rinv_rs = Rss.ldlt().solve(Rrs.transpose()).transpose();  // Rrs Rss^-1
    const VectorXd shift = Rinv_rs * v;
    VectorXd lo(kr), up(kr);
    for (int a = 0; a < kr; ++a) {
        lo(a) = lower(rest[a]) == -kInf ? -kInf : lower(rest[a]) - shift(a);
        up(a) = upper(rest[a]) == kInf ? kInf : upper(rest[a]) - shift(a);
    }
    const Eigen::MatrixXd cov = Rrr - Rinv_rs * Rrs.transpose();
    return mvn_rectangle(lo, up, cov, opts);
}

/** Rows that are scalar multiples of one another collapsed onto shared
 *  unit-variance directions with two-sided limits. */
struct ReducedSystem {
    Eigen::MatrixXd D;                // cluster directions, unit variance
    Eigen::MatrixXd R;                // correlation of the directions
    VectorXd lower, upper;            // standardized limits per cluster
    std::vector<int> up_row, lo_row;  // rows binding the limits, -1 when open
    std::vector<int> rep;             // row carrying each direction
    std::vector<double> rep_sign;     // orientation of rep against D
    bool empty = false;               // some interval has lower > upper
};

/** Groups rows into clusters of scalar multiples (up to tol). Rows oriented
 *  with the cluster direction tighten its upper limit, opposed rows its lower
 *  limit. The collapsed system carries the same probability but keeps the
 *  integrand smooth in the row data where the stacked system would have zero
 *  Cholesky pivots and integrate indicator factors instead. Each direction is
 *  carried by a row among the first n_decision when the cluster has one, so
 *  coefficient derivatives flow back to decision data. */
inline ReducedSystem reduce_proportional_rows(const Eigen::MatrixXd& G, const VectorXd& g,
                                              const VectorXd& sigma,
                                              const Eigen::MatrixXd& Sigma, int n_decision,
                                              double tol = 1e-9) {
    const int K0 = static_cast<int>(G.rows());
    const int n = static_cast<int>(G.cols());
    ReducedSystem out;
    std::vector<Eigen::RowVectorXd> dirs;
    std::vector<double> lo, up;
    for (int i = 0; i < K0; ++i) {
        const Eigen::RowVectorXd u = G.row(i) / sigma(i);
        const double b = g(i) / sigma(i);
        int k = -1;
        double s = 1.0;
        for (size_t c = 0; c < dirs.size() && k < 0; ++c) {
            const double scale = dirs[c].cwiseAbs().maxCoeff();
            if ((u - dirs[c]).cwiseAbs().maxCoeff() <= tol * scale) {
                k = static_cast<int>(c);
            } else if ((u + dirs[c]).cwiseAbs().maxCoeff() <= tol * scale) {
                k = static_cast<int>(c);
                s = -1.0;
            }
        }
        if (k < 0) {
            dirs.push_back(u);
            up.push_back(b);
            lo.push_back(-kInf);
            out.up_row.push_back(i);
            out.lo_row.push_back(-1);
            out.rep.push_back(i);
            out.rep_sign.push_back(1.0);
            continue;
        }
        if (s > 0.0) {
            if (b < up[k]) {
                up[k] = b;
                out.up_row[k] = i;
            }
        } else if (-b > lo[k]) {
            lo[k] = -b;
            out.lo_row[k] = i;
        }
        if (out.rep[k] >= n_decision && i < n_decision) {
            out.rep[k] = i;
            out.rep_sign[k] = s;
        }
    }
    const int K = static_cast<int>(dirs.size());
    out.D.resize(K, n);
    out.lower.resize(K);
    out.upper.resize(K);
    for (int k = 0; k < K; ++k) {
        out.D.row(k) = dirs[k];
        out.lower(k) = lo[k];
        out.upper(k) = up[k];
        if (lo[k] > up[k]) out.empty = true;
    }
    out.R = out.D * Sigma * out.D.transpose();
    for (int k = 0; k < K; ++k) out.R(k, k) = 1.0;
    return out;
}

}  // namespace detail

/** P(G eps <= g | eps in support) with eps ~ N(0, Sigma). Deterministic rows
 *  are dropped when satisfied within tolerance; a violated deterministic row
 *  makes the probability zero. */
inline ProbabilityValue system_probability(const Eigen::MatrixXd& G, const VectorXd& g,
                                           const Eigen::MatrixXd& Sigma,
                                           const ProbabilityOptions& opts = {}) {
    if (G.rows() != g.size() || G.cols() != Sigma.rows() || Sigma.rows() != Sigma.cols())
        throw std::invalid_argument("system probability: dimension mismatch");
    const int n = static_cast<int>(Sigma.rows());
    ProbabilityValue out;
    std::vector<int> kept;
    for (int i = 0; i < G.rows(); ++i) {
        const double var = G.row(i) * Sigma * G.row(i).transpose();
        if (var <= opts.value_variance_tol) {
            if (g(i) >= -opts.value_slack_tol) continue;  // holds surely
            out.value = 0.0;
            out.joint = 0.0;
            if (opts.support.kind != TruncationRegion::Kind::none) {
                const auto mass = truncation_mass(opts.support, Sigma, opts.mvn);
                out.mass = mass.value;
                out.mass_error = mass.error;
            }
            return out;
        }
        kept.push_back(i);
    }
    Eigen::MatrixXd Gk(kept.size(), n);
    VectorXd gk(kept.size());
    for (size_t i = 0; i < kept.size(); ++i) {
        Gk.row(static_cast<Eigen::Index>(i)) = G.row(kept[i]);
        gk(static_cast<Eigen::Index>(i)) = g(kept[i]);
    }
    const auto reduced_rect = [&](const Eigen::MatrixXd& Ga, const VectorXd& ga) -> MvnResult {
        VectorXd sig(Ga.rows());
        for (Eigen::Index i = 0; i < Ga.rows(); ++i)
            sig(i) = std::sqrt(Ga.row(i) * Sigma * Ga.row(i).transpose());
        const auto red = detail::reduce_proportional_rows(Ga, ga, sig, Sigma, 0);
        if (red.empty) return {0.0, 0.0};
        return mvn_rectangle(red.lower, red.upper, red.R, opts.mvn);
    };

    switch (opts.support.kind) {
        case TruncationRegion::Kind::none: {
            const auto r = reduced_rect(Gk, gk);
            out.value = r.value;
            out.error = r.error;
            out.joint = r.value;
            return out;
        }
        case TruncationRegion::Kind::box: {
            const auto mass = truncation_mass(opts.support, Sigma, opts.mvn);
            if (mass.value < 1e-12)
                throw std::domain_error("system probability: support region has no mass");
            Eigen::MatrixXd Gs;
            VectorXd gs;
            detail::append_box_rows(opts.support, n, Gs, gs);
            // support rows without variance hold surely here: a failing one
            // would have emptied the mass above
            std::vector<int> srows;
            for (int i = 0; i < Gs.rows(); ++i)
                if (Gs.row(i) * Sigma * Gs.row(i).transpose() > opts.value_variance_tol)
                    srows.push_back(i);
            Eigen::MatrixXd Ga(Gk.rows() + static_cast<Eigen::Index>(srows.size()), n);
            VectorXd ga(gk.size() + static_cast<Eigen::Index>(srows.size()));
            Ga.topRows(Gk.rows()) = Gk;
            ga.head(gk.size()) = gk;
            for (size_t i = 0; i < srows.size(); ++i) {
                Ga.row(Gk.rows() + static_cast<Eigen::Index>(i)) = Gs.row(srows[i]);
                ga(gk.size() + static_cast<Eigen::Index>(i)) = gs(srows[i]);
            }
            const auto joint = reduced_rect(Ga, ga);
            out.joint = joint.value;
            out.mass = mass.value;
            out.mass_error = mass.error;
            out.value = std::min(1.0, joint.value / mass.value);
            out.error = (joint.error + out.value * mass.error) / mass.value;
            return out;
        }
        case TruncationRegion::Kind::ellipsoid: {
            // plain Monte Carlo on the joint event; seeded for reproducibility
            const Eigen::MatrixXd L = psd_factor(Sigma, 1e-12, "system probability: Sigma");
            Eigen::LLT<Eigen::MatrixXd> shape_llt(opts.support.shape);
            if (shape_llt.info() != Eigen::Success)
                throw std::invalid_argument(
                    "system probability: ellipsoid shape must be positive definite");
            const auto inside = [&](const VectorXd& e) {
                const VectorXd d = e - opts.support.center;
                return d.dot(shape_llt.solve(d)) <= opts.support.radius * opts.support.radius;
            };
            Rng rng(opts.mvn.seed);
            const int N = opts.mvn.mc_points;
            long hit_joint = 0, hit_mass = 0;
            for (int k = 0; k < N; ++k) {
                const VectorXd e = L * rng.normal_vector(n);
                if (!inside(e)) continue;
                ++hit_mass;
                if (((Gk * e - gk).array() <= 0.0).all()) ++hit_joint;
            }
            if (hit_mass == 0)
                throw std::domain_error("system probability: support region has no mass");
            out.joint = static_cast<double>(hit_joint) / N;
            out.mass = static_cast<double>(hit_mass) / N;
            out.mass_error = 3.0 * std::sqrt(out.mass * (1.0 - out.mass) / N);
            out.value = static_cast<double>(hit_joint) / static_cast<double>(hit_mass);
            out.error = 3.0 * std::sqrt(out.value * (1.0 - out.value) /
                                        static_cast<double>(hit_mass));
            return out;
        }
    }
    throw std::logic_error("system probability: unknown support kind");
}

struct ProbabilityGradient {
    double value = 0.0;
    double error = 0.0;
    Eigen::MatrixXd dG;  // d x n, derivative w.r.t. the row coefficients
    VectorXd dg;         // d, derivative w.r.t. the right-hand sides
};

/** Analytic derivative of the (possibly box-conditional) system probability
 *  with respect to every row and right-hand side. Proportional rows collapse
 *  to two-sided rectangle coordinates first so the value stays smooth in the
 *  data; the standardized limits then carry the right-hand-side dependence
 *  and correlation terms follow from the identity that the second mixed
 *  derivative of the normal CDF in a pair of limits equals its derivative in
 *  that pair's correlation. Limit derivatives flow to the rows binding each
 *  limit, direction derivatives to each cluster's carrier row; merged-away
 *  slack rows correctly get zero. All inner CDFs reuse one seeded quadrature
 *  so finite differences against this function are stable. */
inline ProbabilityGradient system_probability_gradient(const Eigen::MatrixXd& G,
                                                       const VectorXd& g,
                                                       const Eigen::MatrixXd& Sigma,
                                                       const ProbabilityOptions& opts = {}) {
    if (G.rows() != g.size() || G.cols() != Sigma.rows() || Sigma.rows() != Sigma.cols())
        throw std::invalid_argument("system probability gradient: dimension mismatch");
    if (opts.support.kind == TruncationRegion::Kind::ellipsoid)
        throw std::invalid_argument(
            "system probability gradient: ellipsoid support needs sampling-based derivatives");
    const int d = static_cast<int>(G.rows());
    const int n = static_cast<int>(Sigma.rows());

    Eigen::MatrixXd Gs = G;
    VectorXd gs = g;
    if (opts.support.kind == TruncationRegion::Kind::box) {
        Eigen::MatrixXd Gb;
        VectorXd gb;
        detail::append_box_rows(opts.support, n, Gb, gb);
        // deterministic support rows either hold surely (drop) or kill the mass
        std::vector<int> srows;
        for (int i = 0; i < Gb.rows(); ++i) {
            const double var = Gb.row(i) * Sigma * Gb.row(i).transpose();
            if (var <= opts.value_variance_tol) {
                if (gb(i) >= -opts.value_slack_tol) continue;
                throw std::domain_error(
                    "system probability gradient: support region has no mass");
            }
            srows.push_back(i);
        }
        Gs.conservativeResize(d + static_cast<Eigen::Index>(srows.size()), n);
        gs.conservativeResize(d + static_cast<Eigen::Index>(srows.size()));
        for (size_t i = 0; i < srows.size(); ++i) {
            Gs.row(d + static_cast<Eigen::Index>(i)) = Gb.row(srows[i]);
            gs(d + static_cast<Eigen::Index>(i)) = gb(srows[i]);
        }
    }
    const int K0 = static_cast<int>(Gs.rows());
    VectorXd sigma(K0);
    for (int i = 0; i < K0; ++i) {
        const double var = Gs.row(i) * Sigma * Gs.row(i).transpose();
        const double tol = i < d ? opts.grad_variance_tol : opts.value_variance_tol;
        if (var < tol)
            throw std::domain_error("system probability gradient: row " + std::to_string(i) +
                                    " is (near-)deterministic; eliminate it first");
        sigma(i) = std::sqrt(var);
    }
    const auto red = detail::reduce_proportional_rows(Gs, gs, sigma, Sigma, d);
    const int K = static_cast<int>(red.D.rows());

    ProbabilityGradient out;
    out.dG = Eigen::MatrixXd::Zero(d, n);
    out.dg = VectorXd::Zero(d);
    MvnResult main_cdf{0.0, 0.0};
    if (!red.empty) {
        main_cdf = mvn_rectangle(red.lower, red.upper, red.R, opts.mvn);

        // dP/dlimit = pdf(limit) * P(rest rectangle | coordinate at the limit),
        // negated for lower limits; only limits bound by decision rows matter
        VectorXd qu = VectorXd::Zero(K), ql = VectorXd::Zero(K);
        for (int k = 0; k < K; ++k) {
            if (red.up_row[k] >= 0 && red.up_row[k] < d && red.upper(k) < kInf)
                qu(k) = norm_pdf(red.upper(k)) *
                        detail::conditional_rect(red.R, red.lower, red.upper, {k},
                                                 VectorXd::Constant(1, red.upper(k)),
                                                 opts.mvn)
                            .value;
            if (red.lo_row[k] >= 0 && red.lo_row[k] < d && red.lower(k) > -kInf)
                ql(k) = norm_pdf(red.lower(k)) *
                        detail::conditional_rect(red.R, red.lower, red.upper, {k},
                                                 VectorXd::Constant(1, red.lower(k)),
                                                 opts.mvn)
                            .value;
        }
        // dP/drho_km as the four-corner sum of pair densities times the
        // conditional rectangle, signs alternating with mixed corners
        Eigen::MatrixXd p = Eigen::MatrixXd::Zero(K, K);
        for (int k = 0; k < K; ++k) {
            for (int m = k + 1; m < K; ++m) {
                if (red.rep[k] >= d && red.rep[m] >= d) continue;  // constant in the data
                const double rho = red.R(k, m);
                const auto corner = [&](double xk, double xm) -> double {
                    if (!(std::isfinite(xk) && std::isfinite(xm))) return 0.0;
                    if (std::abs(rho) >= opts.pair_correlation_cap) {
                        // collinear pair: the density vanishes off the ridge
                        if (std::abs(xk - rho * xm) > 1e-6) return 0.0;
                        throw std::domain_error(
                            "system probability gradient: rows " + std::to_string(k) +
                            " and " + std::to_string(m) + " are collinear at a shared limit");
                    }
                    VectorXd v(2);
                    v << xk, xm;
                    return binorm_pdf(xk, xm, rho) *
                           detail::conditional_rect(red.R, red.lower, red.upper, {k, m}, v,
                                                    opts.mvn)
                               .value;
                };
                double acc = corner(red.upper(k), red.upper(m));
                acc += corner(red.lower(k), red.lower(m));
                acc -= corner(red.upper(k), red.lower(m));
                acc -= corner(red.lower(k), red.upper(m));
                p(k, m) = p(m, k) = acc;
            }
        }
        // limits scale with the binding row's deviation, directions rotate
        // with the carrier row; both chain back through sigma = |row|_Sigma
        for (int k = 0; k < K; ++k) {
            const int iu = red.up_row[k];
            if (iu >= 0 && iu < d && red.upper(k) < kInf) {
                out.dg(iu) += qu(k) / sigma(iu);
                out.dG.row(iu) -=
                    qu(k) * red.upper(k) / (sigma(iu) * sigma(iu)) * (Gs.row(iu) * Sigma);
            }
            const int il = red.lo_row[k];
            if (il >= 0 && il < d && red.lower(k) > -kInf) {
                out.dg(il) += ql(k) / sigma(il);
                out.dG.row(il) +=
                    ql(k) * red.lower(k) / (sigma(il) * sigma(il)) * (Gs.row(il) * Sigma);
            }
            const int ir = red.rep[k];
            if (ir < d) {
                Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(n);
                for (int m = 0; m < K; ++m)
                    if (m != k && p(k, m) != 0.0)
                        acc += p(k, m) * (red.D.row(m) - red.R(k, m) * red.D.row(k));
                out.dG.row(ir) += (red.rep_sign[k] / sigma(ir)) * (acc * Sigma);
            }
        }
    }
    out.value = main_cdf.value;
    out.error = main_cdf.error;

    if (opts.support.kind == TruncationRegion::Kind::box) {
        const auto mass = truncation_mass(opts.support, Sigma, opts.mvn);
        if (mass.value < 1e-12)
            throw std::domain_error("system probability gradient: support region has no mass");
        out.value = std::min(1.0, out.value / mass.value);
        out.error = (main_cdf.error + out.value * mass.error) / mass.value;
        out.dG /= mass.value;
        out.dg /= mass.value;
    }
    return out;
}

/** Removes (near-)deterministic rows ahead of a gradient evaluation. A row
 *  with negligible variance must hold or fail by a clear margin: held rows
 *  are dropped, failed rows flag the system as surely violated, and anything
 *  inside the margin is refused as ill-posed. */
struct FilteredSystem {
    Eigen::MatrixXd G;
    VectorXd g;
    std::vector<int> kept;  // original row indices
    bool surely_violated = false;
};

inline FilteredSystem filter_deterministic_rows(const Eigen::MatrixXd& G, const VectorXd& g,
                                                const Eigen::MatrixXd& Sigma,
                                                double variance_tol = 1e-10,
                                                double margin = 1e-3) {
    FilteredSystem out;
    const int n = static_cast<int>(Sigma.rows());
    for (int i = 0; i < G.rows(); ++i) {
        const double var = G.row(i) * Sigma * G.row(i).transpose();
        if (var < variance_tol) {
            if (std::abs(g(i)) < margin)
                throw std::domain_error(
                    "deterministic row " + std::to_string(i) +
                    " sits on the feasibility boundary; the probability is not differentiable");
            if (g(i) < 0.0) out.surely_violated = true;
            continue;
        }
        out.kept.push_back(i);
    }
    out.G.resize(out.kept.size(), n);
    out.g.resize(out.kept.size());
    for (size_t i = 0; i < out.kept.size(); ++i) {
        out.G.row(static_cast<Eigen::Index>(i)) = G.row(out.kept[i]);
        out.g(static_cast<Eigen::Index>(i)) = g(out.kept[i]);
    }
    return out;
}

}  // namespace dcc
