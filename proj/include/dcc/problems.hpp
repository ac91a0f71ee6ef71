#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gaussian.hpp"
#include "projection.hpp"
#include "reformulation.hpp"
#include "rng.hpp"
#include "solver.hpp"

namespace dcc {

/** The four finite-dimensional approximations of the joint-chance /
 *  almost-sure program over linear decision rules, plus the variant under a
 *  truncated noise distribution.
 *
 *    p1: chance constraint on the probabilistic group, hard group enforced
 *        almost surely through its exact linear reformulation.
 *    p2: chance constraint jointly over the probabilistic and hard groups
 *        (hard rows lose their current-stage noise block); the optimal rule
 *        is projected onto the hard constraints afterwards and the reported
 *        value is the objective of the projected rule.
 *    p3: objective evaluated on the projected (clipped) rule, same joint
 *        chance constraint as p2; requires per-stage box hard constraints.
 *    p4: objective as p3; the chance constraint asks the projected rule to
 *        satisfy the probabilistic group, computed exactly by partitioning
 *        the noise space over clip regimes per decision component.
 *    truncated: p1 under noise conditioned on a bounded region; hard rows
 *        become worst-case bounds over the region.
 */
enum class ProblemKind { p1, p2, p3, p4, truncated };

inline const char* problem_kind_name(ProblemKind k) {
    switch (k) {
        case ProblemKind::p1: return "p1";
        case ProblemKind::p2: return "p2";
        case ProblemKind::p3: return "p3";
        case ProblemKind::p4: return "p4";
        case ProblemKind::truncated: return "truncated";
    }
    return "?";
}

struct ProblemOptions {
    ProbabilityOptions prob;        // quadrature settings shared by all probability calls
    int penalty_samples = 20000;    // frozen sample count for penalty / projection averages
    std::uint64_t sample_seed = 7001;  // seed of the frozen sample set
    int partition_cap = 8;          // p4 refuses more than 3^partition_cap regime tuples
    double fd_step = 1e-3;          // finite-difference step for sampling-based gradients
};

/** max over s in [lo, hi] of w . s, in closed form. */
inline double box_support_max(const VectorXd& w, const VectorXd& lo, const VectorXd& hi) {
    if (w.size() != lo.size() || w.size() != hi.size())
        throw std::invalid_argument("box support max: dimension mismatch");
    double v = 0.0;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        if (hi(i) < lo(i)) throw std::invalid_argument("box support max: empty box");
        if (w(i) == 0.0) continue;  // skip so infinite bounds with zero weight stay finite
        v += 0.5 * (w(i) * (lo(i) + hi(i)) + std::abs(w(i)) * (hi(i) - lo(i)));
    }
    return v;
}

/** max over the ellipsoid (s-center)' shape^{-1} (s-center) <= radius^2 of
 *  w . s = center . w + radius * sqrt(w' shape w). */
inline double ellipsoid_support_max(const VectorXd& w, const VectorXd& center,
                                    const Eigen::MatrixXd& shape, double radius) {
    if (w.size() != center.size() || shape.rows() != w.size() || shape.cols() != w.size())
        throw std::invalid_argument("ellipsoid support max: dimension mismatch");
    if (radius < 0.0) throw std::invalid_argument("ellipsoid support max: negative radius");
    Eigen::LLT<Eigen::MatrixXd> llt(shape);
    if (llt.info() != Eigen::Success)
        throw std::invalid_argument("ellipsoid support max: shape must be positive definite");
    const double q = w.dot(shape * w);
    return center.dot(w) + radius * std::sqrt(std::max(q, 0.0));
}

/** Draws n standard model-noise paths (columns, stacked over stages). */
inline Eigen::MatrixXd sample_noise(const CompactForm& cf, int n, std::uint64_t seed) {
    const int MT = cf.M * cf.T;
    const Eigen::MatrixXd L = psd_factor(cf.Sigma, 1e-12, "sample noise: Sigma");
    Rng rng(seed);
    Eigen::MatrixXd eps(MT, n);
    for (int k = 0; k < n; ++k) eps.col(k) = L * rng.normal_vector(MT);
    return eps;
}

namespace detail {

inline bool region_contains(const TruncationRegion& r, const VectorXd& e) {
    switch (r.kind) {
        case TruncationRegion::Kind::none: return true;
        case TruncationRegion::Kind::box:
            return (e.array() >= r.lower.array()).all() && (e.array() <= r.upper.array()).all();
        case TruncationRegion::Kind::ellipsoid: {
            const VectorXd d = e - r.center;
            Eigen::LLT<Eigen::MatrixXd> llt(r.shape);
            return d.dot(llt.solve(d)) <= r.radius * r.radius;
        }
    }
    return true;
}

}  // namespace detail

/** Rejection sampler for noise conditioned on a truncation region. */
inline Eigen::MatrixXd sample_truncated_noise(const CompactForm& cf,
                                              const TruncationRegion& region, int n,
                                              std::uint64_t seed) {
    if (region.kind == TruncationRegion::Kind::none) return sample_noise(cf, n, seed);
    const int MT = cf.M * cf.T;
    const Eigen::MatrixXd L = psd_factor(cf.Sigma, 1e-12, "sample noise: Sigma");
    Rng rng(seed);
    Eigen::MatrixXd eps(MT, n);
    long attempts = 0;
    const long cap = std::max<long>(10000000L, 2000L * n);
    int got = 0;
    while (got < n) {
        if (++attempts > cap)
            throw std::domain_error("truncated sampling: acceptance rate too low");
        const VectorXd e = L * rng.normal_vector(MT);
        if (!detail::region_contains(region, e)) continue;
        eps.col(got++) = e;
    }
    return eps;
}

/** Largest violation of one constraint group at explicit stage values z
 *  along one realized path (length M*T). */
inline double max_group_violation(const StageSystem& sys, ConstraintGroup gr,
                                  const std::vector<VectorXd>& z, const VectorXd& xi_path) {
    const GroupData& gd = sys.g(gr);
    double worst = -kInf;
    for (int t = 0; t < sys.T; ++t) {
        const int l = gd.rows(t);
        if (l == 0) continue;
        VectorXd v = -gd.b[t];
        for (int tau = 0; tau <= t; ++tau) {
            v += gd.A[t][tau] * z[tau];
            v += gd.B[t][tau] * xi_path.segment(static_cast<Eigen::Index>(sys.M) * tau, sys.M);
        }
        worst = std::max(worst, v.maxCoeff());
    }
    return worst == -kInf ? 0.0 : worst;
}

namespace detail {

/** Shared immutable state captured by the problem callbacks. Held behind a
 *  shared_ptr so instances can be copied and moved freely. Evaluation caches
 *  are per-instance and not thread-safe. */
struct InstanceData {
    ProblemKind kind = ProblemKind::p1;
    StageSystem sys;
    CompactForm cf;
    ProblemOptions opts;
    LdrLayout L;
    int n_full = 0;  // rule coefficients plus any lifted auxiliaries

    // box bounds of the hard group (p3 / p4)
    bool has_box = false;
    std::vector<VectorXd> lo, hi;

    // frozen sample set for penalty and projection averages
    Eigen::MatrixXd eps_s;  // (M*T) x K
    Eigen::MatrixXd xi_s;   // (M*T) x K, mu_all + theta_all * eps
    std::vector<Eigen::MatrixXd> S_stack;  // per stage t: Theta_stack Sigma Theta_stack'

    // truncated variant
    TruncationRegion region;
    VectorXd eps_mean;  // E[eps | region], analytic or from the frozen samples
    double region_mass = 1.0;
    double region_mass_error = 0.0;

    // p4: one synthetic system per clip-regime tuple; the probabilistic
    // group holds the regime rows of each stage first, then the
    // probabilistic rows with clipped components substituted
    struct Tuple {
        StageSystem sys;
        std::vector<int> regime_rows;  // per stage, count of leading regime rows
    };
    std::vector<Tuple> tuples;

    // truncated variant: affine maps of the hard rows, w(x) = w0 + Wx x and
    // g(x) = g0 + gx . x over the rule block
    struct HardRowMap {
        int t = 0, ell = 0;
        Eigen::MatrixXd Wx;  // (M*T) x L.dim()
        VectorXd w0;
        VectorXd gx;
        double g0 = 0.0;
    };
    std::vector<HardRowMap> hard_rows;
    std::vector<int> conic_rows;  // indices into hard_rows handled as nonlinear constraints

    std::vector<std::string> flags;

    struct ChanceCache {
        bool valid = false;
        bool has_grad = false;
        VectorXd x;
        ProbabilityValue pv;
        VectorXd grad;
    };
    mutable ChanceCache cache;
};

using DataPtr = std::shared_ptr<const InstanceData>;

struct RowSubset {
    Eigen::MatrixXd G;
    VectorXd g;
    std::vector<int> kept;
    bool violated = false;
};

/** Lenient split of assembled rows: rows that carry no noise either hold
 *  (dropped, their sensitivity vanishes with the variance) or fail (the
 *  whole event has probability zero). Ties at exactly zero slack count as
 *  holding. */
inline RowSubset usable_rows(const AffineSystem& a, const std::vector<int>& candidates,
                             const Eigen::MatrixXd& Sigma, double var_tol) {
    RowSubset out;
    for (int i : candidates) {
        const auto& row = a.rows[static_cast<size_t>(i)];
        const double var = row.G * Sigma * row.G.transpose();
        if (var < var_tol) {
            if (row.g < 0.0) {
                out.violated = true;
                return out;
            }
            continue;
        }
        out.kept.push_back(i);
    }
    out.G.resize(static_cast<Eigen::Index>(out.kept.size()), Sigma.rows());
    out.g.resize(static_cast<Eigen::Index>(out.kept.size()));
    for (size_t r = 0; r < out.kept.size(); ++r) {
        out.G.row(static_cast<Eigen::Index>(r)) = a.rows[static_cast<size_t>(out.kept[r])].G;
        out.g(static_cast<Eigen::Index>(r)) = a.rows[static_cast<size_t>(out.kept[r])].g;
    }
    return out;
}

/** Joint chance rows of the instance kind: the probabilistic group, plus the
 *  hard group without its current-stage noise block for p2 and p3. */
inline AffineSystem chance_rows(const InstanceData& d, const LinearDecisionRule& rule) {
    AffineSystem a = assemble_affine_system(d.sys, ConstraintGroup::probabilistic, d.cf, rule);
    if (d.kind == ProblemKind::p2 || d.kind == ProblemKind::p3) {
        AssembleOptions ao;
        ao.zero_current_stage_B = true;
        append_system(a, assemble_affine_system(d.sys, ConstraintGroup::hard, d.cf, rule, ao));
    }
    return a;
}

struct ChanceEval {
    ProbabilityValue pv;
    VectorXd grad;  // filled only when requested
};

inline std::vector<int> all_indices(int n) {
    std::vector<int> v(static_cast<size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

inline ChanceEval eval_chance(const InstanceData& d, const VectorXd& x, bool with_grad) {
    if (with_grad) {
        // The solver constrains the frozen-quadrature estimate, so the
        // jacobian row handed to it must differentiate that estimate: central
        // differences under common random numbers. Analytic gradients of the
        // exact probability track the finite point set only to sampling
        // accuracy, which stalls the final digits of a KKT certificate.
        // Indicator-based Monte Carlo (ellipsoid supports) needs steps wide
        // enough to straddle many sample jumps; smooth quadrature wants the
        // step small.
        ChanceEval out = eval_chance(d, x, false);
        out.grad = VectorXd::Zero(d.n_full);
        const bool rough = d.opts.prob.support.kind == TruncationRegion::Kind::ellipsoid;
        VectorXd xs = x;
        for (int j = 0; j < d.L.dim(); ++j) {
            const double save = xs(j);
            const double h = rough ? d.opts.fd_step : 1e-6 * (1.0 + std::abs(save));
            xs(j) = save + h;
            const double up = eval_chance(d, xs, false).pv.value;
            xs(j) = save - h;
            const double dn = eval_chance(d, xs, false).pv.value;
            xs(j) = save;
            out.grad(j) = (up - dn) / (2.0 * h);
        }
        return out;
    }

    const LinearDecisionRule rule = LinearDecisionRule::unflatten(x.head(d.L.dim()), d.L);
    ChanceEval out;

    if (d.kind == ProblemKind::p4) {
        double total = 0.0, err = 0.0;
        for (size_t k = 0; k < d.tuples.size(); ++k) {
            AffineSystem a = assemble_affine_system(d.tuples[k].sys,
                                                    ConstraintGroup::probabilistic, d.cf, rule);
            RowSubset rs = usable_rows(a, all_indices(a.size()), d.cf.Sigma,
                                       d.opts.prob.grad_variance_tol);
            if (rs.violated) continue;
            if (rs.kept.empty()) {
                total += 1.0;
                continue;
            }
            ProbabilityOptions po = d.opts.prob;
            po.mvn.seed += 1000003ull * (k + 1);
            const auto pv = system_probability(rs.G, rs.g, d.cf.Sigma, po);
            total += pv.value;
            err += pv.error;
        }
        out.pv.value = total;
        out.pv.joint = total;
        out.pv.error = err;
        return out;
    }

    AffineSystem a = chance_rows(d, rule);
    RowSubset rs = usable_rows(a, all_indices(a.size()), d.cf.Sigma,
                               d.opts.prob.grad_variance_tol);
    const bool conditioned = d.opts.prob.support.kind != TruncationRegion::Kind::none;
    if (rs.violated) {
        out.pv.value = 0.0;
        out.pv.joint = 0.0;
        out.pv.mass = d.region_mass;
        out.pv.mass_error = d.region_mass_error;
        return out;
    }
    if (rs.kept.empty()) {
        out.pv.value = 1.0;
        out.pv.mass = d.region_mass;
        out.pv.mass_error = d.region_mass_error;
        out.pv.joint = conditioned ? d.region_mass : 1.0;
        return out;
    }
    out.pv = system_probability(rs.G, rs.g, d.cf.Sigma, d.opts.prob);
    return out;
}

inline const InstanceData::ChanceCache& cached_chance(const InstanceData& d, const VectorXd& x,
                                                      bool need_grad) {
    auto& c = d.cache;
    if (c.valid && c.x.size() == x.size() && (c.x.array() == x.array()).all() &&
        (!need_grad || c.has_grad))
        return c;
    const ChanceEval ev = eval_chance(d, x, need_grad);
    c.valid = true;
    c.has_grad = need_grad;
    c.x = x;
    c.pv = ev.pv;
    c.grad = ev.grad;
    return c;
}

struct ObjEval {
    double value = 0.0;
    VectorXd grad;
};

/** Expected cost of the clipped rule: per-component clipped Gaussian means
 *  for the linear term, frozen-sample averages for the penalties. */
inline ObjEval projected_objective(const InstanceData& d, const LinearDecisionRule& rule,
                                   bool with_grad) {
    ObjEval out;
    out.grad = VectorXd::Zero(with_grad ? d.n_full : 0);
    const int K = static_cast<int>(d.eps_s.cols());

    for (int t = 0; t < d.sys.T; ++t) {
        const VectorXd mu = d.cf.mu_stack(t);
        for (int i = 0; i < d.sys.n[t]; ++i) {
            const double m = (t > 0 ? rule.F[t].row(i).dot(mu) : 0.0) + rule.f[t](i);
            double var = 0.0;
            VectorXd SFt;
            if (t > 0) {
                SFt = d.S_stack[static_cast<size_t>(t)] * rule.F[t].row(i).transpose();
                var = rule.F[t].row(i).dot(SFt);
            }
            const double sigma = std::sqrt(std::max(var, 0.0));
            const double a = d.lo[static_cast<size_t>(t)](i);
            const double b = d.hi[static_cast<size_t>(t)](i);
            const double hw = d.sys.h[t](i);
            if (!with_grad) {
                out.value += hw * scalar_clip_mean(a, b, m, sigma);
                continue;
            }
            const auto cm = scalar_clip_mean_d(a, b, m, sigma);
            out.value += hw * cm.value;
            out.grad(d.L.f_index(t, i)) += hw * cm.d_m;
            for (int c = 0; c < d.L.M * t; ++c)
                out.grad(d.L.F_index(t, i, c)) += hw * cm.d_m * mu(c);
            if (sigma > 1e-10 && cm.d_sigma != 0.0)
                for (int c = 0; c < d.L.M * t; ++c)
                    out.grad(d.L.F_index(t, i, c)) += hw * cm.d_sigma * SFt(c) / sigma;
        }
    }

    bool any_penalty = false;
    for (int t = 0; t < d.sys.T; ++t)
        if (d.sys.penalty[t].size() > 0 && d.sys.penalty[t].maxCoeff() > 0.0) any_penalty = true;
    if (!any_penalty || K == 0) return out;

    // clipped rule values on the frozen samples, with the open-interval mask
    // that carries the derivative of the clip
    std::vector<Eigen::MatrixXd> Y(static_cast<size_t>(d.sys.T));
    std::vector<Eigen::ArrayXXd> open(static_cast<size_t>(d.sys.T));
    for (int tau = 0; tau < d.sys.T; ++tau) {
        Eigen::MatrixXd raw = rule.f[tau].replicate(1, K);
        if (tau > 0) raw += rule.F[tau] * d.xi_s.topRows(static_cast<Eigen::Index>(d.sys.M) * tau);
        const VectorXd& a = d.lo[static_cast<size_t>(tau)];
        const VectorXd& b = d.hi[static_cast<size_t>(tau)];
        Eigen::MatrixXd y = raw;
        if (with_grad) open[static_cast<size_t>(tau)].resize(d.sys.n[tau], K);
        for (int i = 0; i < d.sys.n[tau]; ++i) {
            y.row(i) = raw.row(i).cwiseMax(a(i)).cwiseMin(b(i));
            if (with_grad)
                open[static_cast<size_t>(tau)].row(i) =
                    (raw.row(i).array() > a(i) && raw.row(i).array() < b(i)).cast<double>();
        }
        Y[static_cast<size_t>(tau)] = y;
    }

    const GroupData& pen = d.sys.g(ConstraintGroup::penalized);
    for (int t = 0; t < d.sys.T; ++t) {
        const int l = pen.rows(t);
        if (l == 0) continue;
        Eigen::MatrixXd V = (-pen.b[t]).replicate(1, K);
        for (int tau = 0; tau <= t; ++tau) {
            V += pen.A[t][tau] * Y[static_cast<size_t>(tau)];
            V += pen.B[t][tau] * d.xi_s.middleRows(static_cast<Eigen::Index>(d.sys.M) * tau,
                                                   d.sys.M);
        }
        for (int ell = 0; ell < l; ++ell) {
            const double w = d.sys.penalty[t](ell);
            if (w == 0.0) continue;
            const Eigen::ArrayXd row = V.row(ell).transpose().array();
            out.value += w * row.max(0.0).mean();
            if (!with_grad) continue;
            const Eigen::ArrayXd mask = (row > 0.0).cast<double>();
            for (int tau = 0; tau <= t; ++tau) {
                const auto av = pen.A[t][tau].row(ell);
                if (av.cwiseAbs().maxCoeff() == 0.0) continue;
                for (int i = 0; i < d.sys.n[tau]; ++i) {
                    if (av(i) == 0.0) continue;
                    const Eigen::ArrayXd act =
                        mask * open[static_cast<size_t>(tau)].row(i).transpose();
                    const double base = w * av(i);
                    out.grad(d.L.f_index(tau, i)) += base * act.mean();
                    for (int c = 0; c < d.L.M * tau; ++c)
                        out.grad(d.L.F_index(tau, i, c)) +=
                            base * (act * d.xi_s.row(c).transpose().array()).mean() ;
                }
            }
        }
    }
    return out;
}

/** Expected cost of the raw rule under the conditioned noise: linear term at
 *  the conditional mean, penalties by frozen-sample averages. */
inline ObjEval truncated_objective(const InstanceData& d, const LinearDecisionRule& rule,
                                   bool with_grad) {
    ObjEval out;
    out.grad = VectorXd::Zero(with_grad ? d.n_full : 0);
    const VectorXd xi_hat = d.cf.mu_all + d.cf.theta_all * d.eps_mean;
    for (int t = 0; t < d.sys.T; ++t) {
        const VectorXd head = xi_hat.head(static_cast<Eigen::Index>(d.sys.M) * t);
        out.value += d.sys.h[t].dot((t > 0 ? (rule.F[t] * head).eval()
                                           : VectorXd::Zero(d.sys.n[t])) +
                                    rule.f[t]);
        if (!with_grad) continue;
        for (int i = 0; i < d.sys.n[t]; ++i) {
            out.grad(d.L.f_index(t, i)) += d.sys.h[t](i);
            for (int c = 0; c < d.L.M * t; ++c)
                out.grad(d.L.F_index(t, i, c)) += d.sys.h[t](i) * head(c);
        }
    }
    const int K = static_cast<int>(d.eps_s.cols());
    if (K == 0) return out;
    AffineSystem a = assemble_affine_system(d.sys, ConstraintGroup::penalized, d.cf, rule);
    for (int i = 0; i < a.size(); ++i) {
        const auto& row = a.rows[static_cast<size_t>(i)];
        const double w = d.sys.penalty[row.t](row.ell);
        if (w == 0.0) continue;
        const Eigen::ArrayXd v = (row.G * d.eps_s).transpose().array() - row.g;
        out.value += w * v.max(0.0).mean();
        if (!with_grad) continue;
        const Eigen::ArrayXd mask = (v > 0.0).cast<double>();
        const double frac = mask.mean();
        if (frac == 0.0) continue;
        const VectorXd e_mean = (d.eps_s.array().rowwise() * mask.transpose()).rowwise().mean();
        a.add_row_adjoint(d.L, i, w * e_mean, -w * frac, out.grad);
    }
    return out;
}

inline ObjEval objective_eval(const InstanceData& d, const VectorXd& x, bool with_grad) {
    const LinearDecisionRule rule = LinearDecisionRule::unflatten(x.head(d.L.dim()), d.L);
    switch (d.kind) {
        case ProblemKind::p1:
        case ProblemKind::p2: {
            ObjEval out;
            out.value = objective_value(d.sys, d.cf, rule);
            if (with_grad) {
                out.grad = VectorXd::Zero(d.n_full);
                out.grad.head(d.L.dim()) = objective_gradient(d.sys, d.cf, rule);
            }
            return out;
        }
        case ProblemKind::p3:
        case ProblemKind::p4:
            return projected_objective(d, rule, with_grad);
        case ProblemKind::truncated:
            return truncated_objective(d, rule, with_grad);
    }
    throw std::logic_error("objective: unknown problem kind");
}

/** Objective of the scenario-wise projected rule when no box shortcut
 *  exists: every frozen sample is projected through the stagewise quadratic
 *  program. */
inline double projected_objective_sampled(const InstanceData& d, const LinearDecisionRule& rule) {
    const int K = static_cast<int>(d.xi_s.cols());
    if (K == 0) throw std::logic_error("projected objective: no samples");
    const GroupData& pen = d.sys.g(ConstraintGroup::penalized);
    double acc = 0.0;
    for (int k = 0; k < K; ++k) {
        const VectorXd xi = d.xi_s.col(k);
        const ScenarioProjection pr = project_rule_on_path(d.sys, rule, xi);
        if (!pr.feasible)
            throw std::runtime_error(
                "projected objective: hard constraints are infeasible on a sampled scenario");
        for (int t = 0; t < d.sys.T; ++t) acc += d.sys.h[t].dot(pr.z[static_cast<size_t>(t)]);
        for (int t = 0; t < d.sys.T; ++t) {
            const int l = pen.rows(t);
            if (l == 0) continue;
            VectorXd v = -pen.b[t];
            for (int tau = 0; tau <= t; ++tau) {
                v += pen.A[t][tau] * pr.z[static_cast<size_t>(tau)];
                v += pen.B[t][tau] * xi.segment(static_cast<Eigen::Index>(d.sys.M) * tau, d.sys.M);
            }
            for (int ell = 0; ell < l; ++ell)
                acc += d.sys.penalty[t](ell) * std::max(0.0, v(ell));
        }
    }
    return acc / K;
}

}  // namespace detail

/** A ready-to-solve nonlinear program together with the evaluators needed
 *  for reporting. Copyable; all callbacks share one immutable data block. */
struct ProblemInstance {
    ProblemKind kind = ProblemKind::p1;
    LdrLayout layout;
    int n_aux = 0;
    NlpProblem nlp;
    VectorXd x0;
    std::vector<std::string> flags;
    std::function<ProbabilityValue(const VectorXd&)> probability;
    std::function<double(const VectorXd&)> report_objective;
    // p4 only: total mass of all clip-regime tuples (ignoring the
    // probabilistic rows); should integrate to one
    std::function<ProbabilityValue(const VectorXd&)> partition_total;
    detail::DataPtr data;
};

namespace detail {

inline VectorXd default_start(const InstanceData& d) {
    VectorXd x = VectorXd::Zero(d.n_full);
    const auto box = d.sys.hard_box();
    if (box) {
        for (int t = 0; t < d.sys.T; ++t)
            for (int i = 0; i < d.sys.n[t]; ++i) {
                const double a = box->lower[static_cast<size_t>(t)](i);
                const double b = box->upper[static_cast<size_t>(t)](i);
                double v = 0.0;
                if (std::isfinite(a) && std::isfinite(b)) v = 0.5 * (a + b);
                else if (std::isfinite(a)) v = a + 1.0;
                else if (std::isfinite(b)) v = b - 1.0;
                x(d.L.f_index(t, i)) = v;
            }
    }
    return x;
}

inline std::shared_ptr<InstanceData> make_data(ProblemKind kind, const StageSystem& sys,
                                               const CompactForm& cf,
                                               const ProblemOptions& opts) {
    sys.validate();
    if (sys.T != cf.T || sys.M != cf.M)
        throw std::invalid_argument("problem: stage data and compact form disagree");
    auto d = std::make_shared<InstanceData>();
    d->kind = kind;
    d->sys = sys;
    d->cf = cf;
    d->opts = opts;
    d->L = sys.layout();
    d->n_full = d->L.dim();
    d->S_stack.resize(static_cast<size_t>(sys.T));
    for (int t = 1; t < sys.T; ++t) {
        const Eigen::MatrixXd th = cf.theta_stack(t);
        d->S_stack[static_cast<size_t>(t)] = th * cf.Sigma * th.transpose();
    }
    return d;
}

inline void freeze_samples(InstanceData& d) {
    d.eps_s = d.region.kind == TruncationRegion::Kind::none
                  ? sample_noise(d.cf, d.opts.penalty_samples, d.opts.sample_seed)
                  : sample_truncated_noise(d.cf, d.region, d.opts.penalty_samples,
                                           d.opts.sample_seed);
    d.xi_s = (d.cf.theta_all * d.eps_s).colwise() + d.cf.mu_all;
}

inline void require_box(InstanceData& d, const char* who) {
    const auto box = d.sys.hard_box();
    if (!box)
        throw std::invalid_argument(std::string(who) +
                                    ": requires per-stage box hard constraints");
    d.has_box = true;
    d.lo = box->lower;
    d.hi = box->upper;
    for (int t = 0; t < d.sys.T; ++t)
        if (((d.hi[static_cast<size_t>(t)] - d.lo[static_cast<size_t>(t)]).array() < 0.0).any())
            throw std::invalid_argument(std::string(who) + ": empty hard box");
}

inline void wire_common(ProblemInstance& inst, std::shared_ptr<InstanceData> dp) {
    DataPtr d = dp;
    inst.kind = d->kind;
    inst.layout = d->L;
    inst.n_aux = d->n_full - d->L.dim();
    inst.flags = d->flags;
    inst.data = d;
    inst.x0 = default_start(*d);

    inst.nlp.n = d->n_full;
    inst.nlp.f = [d](const VectorXd& x) { return objective_eval(*d, x, false).value; };
    inst.nlp.grad = [d](const VectorXd& x) { return objective_eval(*d, x, true).grad; };
    const int n_conic = static_cast<int>(d->conic_rows.size());
    inst.nlp.m = 1 + n_conic;
    inst.nlp.c = [d, n_conic](const VectorXd& x) {
        VectorXd c(1 + n_conic);
        c(0) = d->sys.p - cached_chance(*d, x, false).pv.value;
        for (int j = 0; j < n_conic; ++j) {
            const auto& hr = d->hard_rows[static_cast<size_t>(d->conic_rows[static_cast<size_t>(j)])];
            const VectorXd w = hr.w0 + hr.Wx * x.head(d->L.dim());
            c(1 + j) = ellipsoid_support_max(w, d->region.center, d->region.shape,
                                             d->region.radius) -
                       (hr.g0 + hr.gx.dot(x.head(d->L.dim())));
        }
        return c;
    };
    inst.nlp.c_jac = [d, n_conic](const VectorXd& x) {
        Eigen::MatrixXd J = Eigen::MatrixXd::Zero(1 + n_conic, d->n_full);
        J.row(0) = -cached_chance(*d, x, true).grad.transpose();
        for (int j = 0; j < n_conic; ++j) {
            const auto& hr = d->hard_rows[static_cast<size_t>(d->conic_rows[static_cast<size_t>(j)])];
            const VectorXd w = hr.w0 + hr.Wx * x.head(d->L.dim());
            const double q = w.dot(d->region.shape * w);
            VectorXd dw = d->region.center;
            if (q > 1e-28) dw += (d->region.radius / std::sqrt(q)) * (d->region.shape * w);
            J.row(0 + 1 + j).head(d->L.dim()) =
                (hr.Wx.transpose() * dw - hr.gx).transpose();
        }
        return J;
    };

    inst.probability = [d](const VectorXd& x) { return cached_chance(*d, x, false).pv; };
    inst.report_objective = [d](const VectorXd& x) { return objective_eval(*d, x, false).value; };
}

/** Affine maps x -> (w_row(x), g_row(x)) of the assembled hard rows; the
 *  adjoint of the assembly is independent of the rule, so probing it once
 *  per coordinate recovers the exact coefficients. */
inline void extract_hard_row_maps(InstanceData& d) {
    const LinearDecisionRule zero = LinearDecisionRule::zeros(d.L);
    AffineSystem a = assemble_affine_system(d.sys, ConstraintGroup::hard, d.cf, zero);
    const int MT = d.cf.M * d.cf.T;
    for (int i = 0; i < a.size(); ++i) {
        InstanceData::HardRowMap hr;
        hr.t = a.rows[static_cast<size_t>(i)].t;
        hr.ell = a.rows[static_cast<size_t>(i)].ell;
        hr.w0 = a.rows[static_cast<size_t>(i)].G.transpose();
        hr.g0 = a.rows[static_cast<size_t>(i)].g;
        hr.Wx = Eigen::MatrixXd::Zero(MT, d.L.dim());
        for (int c = 0; c < MT; ++c) {
            VectorXd gc = VectorXd::Zero(d.L.dim());
            VectorXd wG = VectorXd::Zero(MT);
            wG(c) = 1.0;
            a.add_row_adjoint(d.L, i, wG, 0.0, gc);
            hr.Wx.row(c) = gc.transpose();
        }
        VectorXd gg = VectorXd::Zero(d.L.dim());
        a.add_row_adjoint(d.L, i, VectorXd::Zero(MT), 1.0, gg);
        hr.gx = gg;
        d.hard_rows.push_back(std::move(hr));
    }
}

}  // namespace detail

/** Chance constraint on the probabilistic group, hard group reduced to its
 *  exact linear system over the rule coefficients. */
inline ProblemInstance build_p1(const StageSystem& sys, const CompactForm& cf,
                                const ProblemOptions& opts = {}) {
    if (!sys.wait_and_see)
        throw std::invalid_argument("p1: requires the wait-and-see hard group");
    auto d = detail::make_data(ProblemKind::p1, sys, cf, opts);
    ProblemInstance inst;
    detail::wire_common(inst, d);
    const LinearSystem hard = hard_polyhedral(sys, cf);
    inst.nlp.E = hard.E;
    inst.nlp.e = hard.e;
    inst.nlp.A = hard.A;
    inst.nlp.b = hard.b;
    return inst;
}

/** Joint chance constraint over the probabilistic and hard groups; the
 *  reported objective re-evaluates the solution after projection onto the
 *  hard constraints. */
inline ProblemInstance build_p2(const StageSystem& sys, const CompactForm& cf,
                                const ProblemOptions& opts = {}) {
    auto d = detail::make_data(ProblemKind::p2, sys, cf, opts);
    const auto box = sys.hard_box();
    if (box) {
        d->has_box = true;
        d->lo = box->lower;
        d->hi = box->upper;
        for (int t = 0; t < sys.T; ++t)
            if (((d->hi[static_cast<size_t>(t)] - d->lo[static_cast<size_t>(t)]).array() < 0.0)
                    .any())
                throw std::invalid_argument("p2: empty hard box");
    }
    detail::freeze_samples(*d);
    ProblemInstance inst;
    detail::wire_common(inst, d);
    detail::DataPtr dp = d;
    inst.report_objective = [dp](const VectorXd& x) {
        const LinearDecisionRule rule = LinearDecisionRule::unflatten(x.head(dp->L.dim()), dp->L);
        if (dp->has_box) return detail::projected_objective(*dp, rule, false).value;
        return detail::projected_objective_sampled(*dp, rule);
    };
    return inst;
}

/** Objective on the clipped rule (closed-form linear term, frozen-sample
 *  penalties), joint chance constraint as in p2. */
inline ProblemInstance build_p3(const StageSystem& sys, const CompactForm& cf,
                                const ProblemOptions& opts = {}) {
    auto d = detail::make_data(ProblemKind::p3, sys, cf, opts);
    detail::require_box(*d, "p3");
    detail::freeze_samples(*d);
    ProblemInstance inst;
    detail::wire_common(inst, d);
    return inst;
}

namespace detail {

/** Enumerates clip-regime tuples. Per decision component the regimes are
 *  below-box (rule value caps at the lower bound), inside, above-box; sides
 *  with infinite bounds are unreachable and skipped. */
inline void build_partition(InstanceData& d) {
    std::vector<std::pair<int, int>> comps;  // (t, i)
    for (int t = 0; t < d.sys.T; ++t)
        for (int i = 0; i < d.sys.n[t]; ++i) comps.push_back({t, i});
    const int C = static_cast<int>(comps.size());
    if (C > d.opts.partition_cap)
        throw std::invalid_argument("p4: " + std::to_string(C) +
                                    " decision components exceed the partition cap of " +
                                    std::to_string(d.opts.partition_cap));
    std::vector<std::vector<int>> allowed(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        const auto [t, i] = comps[static_cast<size_t>(c)];
        const double a = d.lo[static_cast<size_t>(t)](i);
        const double b = d.hi[static_cast<size_t>(t)](i);
        if (std::isfinite(a)) allowed[static_cast<size_t>(c)].push_back(1);
        allowed[static_cast<size_t>(c)].push_back(2);
        if (std::isfinite(b)) allowed[static_cast<size_t>(c)].push_back(3);
    }
    std::vector<int> digit(static_cast<size_t>(C), 0);  // index into allowed[c]
    const GroupData& g2 = d.sys.g(ConstraintGroup::probabilistic);
    while (true) {
        std::vector<int> regime(static_cast<size_t>(C));
        for (int c = 0; c < C; ++c)
            regime[static_cast<size_t>(c)] =
                allowed[static_cast<size_t>(c)][static_cast<size_t>(digit[static_cast<size_t>(c)])];

        InstanceData::Tuple tup;
        tup.sys = d.sys;
        tup.regime_rows.assign(static_cast<size_t>(d.sys.T), 0);
        GroupData gd;
        gd.A.resize(static_cast<size_t>(d.sys.T));
        gd.B.resize(static_cast<size_t>(d.sys.T));
        gd.b.resize(static_cast<size_t>(d.sys.T));
        for (int t = 0; t < d.sys.T; ++t) {
            // regime rows of this stage
            std::vector<std::pair<int, double>> rows;  // (signed component+1, rhs)
            for (int c = 0; c < C; ++c) {
                if (comps[static_cast<size_t>(c)].first != t) continue;
                const int i = comps[static_cast<size_t>(c)].second;
                const double a = d.lo[static_cast<size_t>(t)](i);
                const double b = d.hi[static_cast<size_t>(t)](i);
                switch (regime[static_cast<size_t>(c)]) {
                    case 1: rows.push_back({i + 1, a}); break;   // raw <= lower
                    case 3: rows.push_back({-(i + 1), -b}); break;  // raw >= upper
                    default:
                        if (std::isfinite(b)) rows.push_back({i + 1, b});
                        if (std::isfinite(a)) rows.push_back({-(i + 1), -a});
                }
            }
            tup.regime_rows[static_cast<size_t>(t)] = static_cast<int>(rows.size());
            const int l2 = g2.rows(t);
            const int l = static_cast<int>(rows.size()) + l2;
            gd.A[t].assign(static_cast<size_t>(t) + 1, Eigen::MatrixXd());
            gd.B[t].assign(static_cast<size_t>(t) + 1, Eigen::MatrixXd());
            for (int tau = 0; tau <= t; ++tau) {
                gd.A[t][tau] = Eigen::MatrixXd::Zero(l, d.sys.n[tau]);
                gd.B[t][tau] = Eigen::MatrixXd::Zero(l, d.sys.M);
            }
            gd.b[t] = VectorXd::Zero(l);
            for (size_t r = 0; r < rows.size(); ++r) {
                const int si = rows[r].first;
                gd.A[t][t](static_cast<Eigen::Index>(r), std::abs(si) - 1) = si > 0 ? 1.0 : -1.0;
                gd.b[t](static_cast<Eigen::Index>(r)) = rows[r].second;
            }
            // probabilistic rows with clipped components replaced: inside
            // components keep their coefficient, capped components move a
            // constant to the right-hand side
            for (int ell = 0; ell < l2; ++ell) {
                const Eigen::Index rr = static_cast<Eigen::Index>(rows.size()) + ell;
                double shift = 0.0;
                for (int tau = 0; tau <= t; ++tau) {
                    gd.B[t][tau].row(rr) = g2.B[t][tau].row(ell);
                    for (int i = 0; i < d.sys.n[tau]; ++i) {
                        const double av = g2.A[t][tau](ell, i);
                        if (av == 0.0) continue;
                        int reg = 2;
                        for (int c = 0; c < C; ++c)
                            if (comps[static_cast<size_t>(c)] == std::make_pair(tau, i))
                                reg = regime[static_cast<size_t>(c)];
                        if (reg == 2) gd.A[t][tau](rr, i) = av;
                        else if (reg == 1) shift += av * d.lo[static_cast<size_t>(tau)](i);
                        else shift += av * d.hi[static_cast<size_t>(tau)](i);
                    }
                }
                gd.b[t](rr) = g2.b[t](ell) - shift;
            }
        }
        tup.sys.g(ConstraintGroup::probabilistic) = std::move(gd);
        d.tuples.push_back(std::move(tup));

        int c = 0;
        for (; c < C; ++c) {
            if (++digit[static_cast<size_t>(c)] <
                static_cast<int>(allowed[static_cast<size_t>(c)].size()))
                break;
            digit[static_cast<size_t>(c)] = 0;
        }
        if (c == C) break;
    }
}

}  // namespace detail

/** Objective on the clipped rule; the chance constraint asks the clipped
 *  rule to satisfy the probabilistic group, evaluated exactly as a sum of
 *  Gaussian rectangle probabilities over the clip-regime partition. */
inline ProblemInstance build_p4(const StageSystem& sys, const CompactForm& cf,
                                const ProblemOptions& opts = {}) {
    auto d = detail::make_data(ProblemKind::p4, sys, cf, opts);
    detail::require_box(*d, "p4");
    detail::freeze_samples(*d);
    detail::build_partition(*d);
    ProblemInstance inst;
    detail::wire_common(inst, d);
    detail::DataPtr dp = d;
    inst.partition_total = [dp](const VectorXd& x) {
        const LinearDecisionRule rule =
            LinearDecisionRule::unflatten(x.head(dp->L.dim()), dp->L);
        ProbabilityValue out;
        out.value = 0.0;
        for (size_t k = 0; k < dp->tuples.size(); ++k) {
            const auto& tup = dp->tuples[k];
            AffineSystem a = assemble_affine_system(tup.sys, ConstraintGroup::probabilistic,
                                                    dp->cf, rule);
            std::vector<int> candidates;
            for (int i = 0; i < a.size(); ++i)
                if (a.rows[static_cast<size_t>(i)].ell <
                    tup.regime_rows[static_cast<size_t>(a.rows[static_cast<size_t>(i)].t)])
                    candidates.push_back(i);
            detail::RowSubset rs = detail::usable_rows(a, candidates, dp->cf.Sigma,
                                                       dp->opts.prob.grad_variance_tol);
            if (rs.violated) continue;
            if (rs.kept.empty()) {
                out.value += 1.0;
                continue;
            }
            ProbabilityOptions po = dp->opts.prob;
            po.mvn.seed += 1000003ull * (k + 1);
            const auto pv = system_probability(rs.G, rs.g, dp->cf.Sigma, po);
            out.value += pv.value;
            out.error += pv.error;
        }
        out.joint = out.value;
        return out;
    };
    return inst;
}

/** p1 under noise conditioned on a truncation region: the chance constraint
 *  becomes a conditional probability, hard rows hold for every noise value
 *  in the region via closed-form worst cases. Box regions lift the
 *  worst-case absolute values into auxiliary variables so every hard row
 *  stays linear; ellipsoidal regions add smooth conic rows. */
inline ProblemInstance build_truncated(const StageSystem& sys, const CompactForm& cf,
                                       const TruncationRegion& region,
                                       const ProblemOptions& opts = {}) {
    if (region.kind == TruncationRegion::Kind::none)
        throw std::invalid_argument("truncated: a truncation region is required");
    const int MT = cf.M * cf.T;
    if (region.kind == TruncationRegion::Kind::box &&
        (region.lower.size() != MT || region.upper.size() != MT))
        throw std::invalid_argument("truncated: box limits must cover the stacked noise");
    if (region.kind == TruncationRegion::Kind::ellipsoid &&
        (region.center.size() != MT || region.shape.rows() != MT))
        throw std::invalid_argument("truncated: ellipsoid must cover the stacked noise");

    auto d = detail::make_data(ProblemKind::truncated, sys, cf, opts);
    d->region = region;
    d->opts.prob.support = region;

    // unreachable combination: a current-stage hard noise block cannot be
    // bounded over a region of infinite extent
    if (region.kind == TruncationRegion::Kind::box) {
        const GroupData& hard = sys.g(ConstraintGroup::hard);
        for (int t = 0; t < sys.T; ++t) {
            if (hard.rows(t) == 0) continue;
            const Eigen::MatrixXd cur = hard.B[t][t] * cf.theta[t];
            for (int c = 0; c < MT; ++c) {
                const bool unbounded = !std::isfinite(region.lower(c)) ||
                                       !std::isfinite(region.upper(c));
                if (unbounded && cur.col(c).cwiseAbs().maxCoeff() > 0.0)
                    throw std::invalid_argument(
                        "truncated: current-stage hard noise block over an unbounded region");
            }
        }
    }

    {
        const auto mass = truncation_mass(region, cf.Sigma, opts.prob.mvn);
        d->region_mass = mass.value;
        d->region_mass_error = mass.error;
        if (mass.value < 1e-10)
            throw std::domain_error("truncated: region mass below 1e-10");
    }

    // conditional mean of the noise: per-coordinate closed form for a box
    // over independent coordinates, frozen-sample average otherwise
    const bool diag = cf.Sigma.isDiagonal(0.0);
    detail::freeze_samples(*d);
    if (region.kind == TruncationRegion::Kind::box && diag) {
        d->eps_mean.resize(MT);
        for (int c = 0; c < MT; ++c)
            d->eps_mean(c) = truncated_scalar_mean(0.0, std::sqrt(cf.Sigma(c, c)),
                                                   region.lower(c), region.upper(c));
    } else {
        d->eps_mean = d->eps_s.rowwise().mean();
        d->flags.push_back("conditional noise mean estimated from the frozen sample set");
    }
    if (region.kind == TruncationRegion::Kind::ellipsoid) {
        d->flags.push_back("ellipsoid region: probabilities by plain Monte Carlo");
        d->flags.push_back("ellipsoid region: chance gradient by finite differences");
    }

    detail::extract_hard_row_maps(*d);

    // worst-case rows over the region
    std::vector<VectorXd> lin_rows;  // over (rule, aux)
    std::vector<double> lin_rhs;
    std::vector<VectorXd> eq_rows;
    std::vector<double> eq_rhs;
    int n_aux = 0;
    const int nr = d->L.dim();
    if (region.kind == TruncationRegion::Kind::box) {
        struct AuxRef {
            int row, coord, index;
        };
        std::vector<AuxRef> auxes;
        for (size_t j = 0; j < d->hard_rows.size(); ++j) {
            const auto& hr = d->hard_rows[j];
            for (int c = 0; c < MT; ++c) {
                const bool zero_map =
                    hr.w0(c) == 0.0 && hr.Wx.row(c).cwiseAbs().maxCoeff() == 0.0;
                if (zero_map) continue;
                const bool lo_f = std::isfinite(region.lower(c));
                const bool hi_f = std::isfinite(region.upper(c));
                if (lo_f && hi_f) {
                    auxes.push_back({static_cast<int>(j), c, n_aux++});
                }
            }
        }
        d->n_full = nr + n_aux;
        for (size_t j = 0; j < d->hard_rows.size(); ++j) {
            const auto& hr = d->hard_rows[j];
            VectorXd main = VectorXd::Zero(d->n_full);
            double rhs = hr.g0;
            main.head(nr) = -hr.gx;
            for (int c = 0; c < MT; ++c) {
                const bool zero_map =
                    hr.w0(c) == 0.0 && hr.Wx.row(c).cwiseAbs().maxCoeff() == 0.0;
                if (zero_map) continue;
                const bool lo_f = std::isfinite(region.lower(c));
                const bool hi_f = std::isfinite(region.upper(c));
                if (lo_f && hi_f) {
                    int ai = -1;
                    for (const auto& ax : auxes)
                        if (ax.row == static_cast<int>(j) && ax.coord == c) ai = ax.index;
                    // u >= +w_c(x) and u >= -w_c(x)
                    VectorXd r1 = VectorXd::Zero(d->n_full);
                    r1.head(nr) = hr.Wx.row(c).transpose();
                    r1(nr + ai) = -1.0;
                    lin_rows.push_back(r1);
                    lin_rhs.push_back(-hr.w0(c));
                    VectorXd r2 = VectorXd::Zero(d->n_full);
                    r2.head(nr) = -hr.Wx.row(c).transpose();
                    r2(nr + ai) = -1.0;
                    lin_rows.push_back(r2);
                    lin_rhs.push_back(hr.w0(c));
                    const double mid = 0.5 * (region.lower(c) + region.upper(c));
                    const double half = 0.5 * (region.upper(c) - region.lower(c));
                    main.head(nr) += mid * hr.Wx.row(c).transpose();
                    main(nr + ai) += half;
                    rhs -= mid * hr.w0(c);
                } else if (lo_f || hi_f) {
                    // one-sided: the weight must point away from the open
                    // end (w_c <= 0 under an open top, w_c >= 0 under an
                    // open bottom), the finite end contributes linearly
                    const double sgn = lo_f ? 1.0 : -1.0;
                    const double bound = lo_f ? region.lower(c) : region.upper(c);
                    VectorXd r = VectorXd::Zero(d->n_full);
                    r.head(nr) = sgn * hr.Wx.row(c).transpose();
                    lin_rows.push_back(r);
                    lin_rhs.push_back(-sgn * hr.w0(c));
                    main.head(nr) += bound * hr.Wx.row(c).transpose();
                    rhs -= bound * hr.w0(c);
                } else {
                    // both ends open: the weight must vanish identically
                    VectorXd r = VectorXd::Zero(d->n_full);
                    r.head(nr) = hr.Wx.row(c).transpose();
                    eq_rows.push_back(r);
                    eq_rhs.push_back(-hr.w0(c));
                }
            }
            lin_rows.push_back(main);
            lin_rhs.push_back(rhs);
        }
    } else {
        for (size_t j = 0; j < d->hard_rows.size(); ++j)
            d->conic_rows.push_back(static_cast<int>(j));
    }

    ProblemInstance inst;
    detail::wire_common(inst, d);
    inst.nlp.A.resize(static_cast<Eigen::Index>(lin_rows.size()), d->n_full);
    inst.nlp.b.resize(static_cast<Eigen::Index>(lin_rows.size()));
    for (size_t i = 0; i < lin_rows.size(); ++i) {
        inst.nlp.A.row(static_cast<Eigen::Index>(i)) = lin_rows[i].transpose();
        inst.nlp.b(static_cast<Eigen::Index>(i)) = lin_rhs[i];
    }
    inst.nlp.E.resize(static_cast<Eigen::Index>(eq_rows.size()), d->n_full);
    inst.nlp.e.resize(static_cast<Eigen::Index>(eq_rows.size()));
    for (size_t i = 0; i < eq_rows.size(); ++i) {
        inst.nlp.E.row(static_cast<Eigen::Index>(i)) = eq_rows[i].transpose();
        inst.nlp.e(static_cast<Eigen::Index>(i)) = eq_rhs[i];
    }
    // start the auxiliaries at the absolute weights of the default rule
    if (inst.n_aux > 0) {
        VectorXd x0 = inst.x0;
        int ai = 0;
        for (size_t j = 0; j < d->hard_rows.size(); ++j) {
            const auto& hr = d->hard_rows[j];
            for (int c = 0; c < MT; ++c) {
                const bool zero_map =
                    hr.w0(c) == 0.0 && hr.Wx.row(c).cwiseAbs().maxCoeff() == 0.0;
                if (zero_map) continue;
                if (std::isfinite(region.lower(c)) && std::isfinite(region.upper(c)))
                    x0(nr + ai++) = std::abs(hr.w0(c) + hr.Wx.row(c).dot(x0.head(nr)));
            }
        }
        inst.x0 = x0;
    }
    return inst;
}

/** Outcome of one solve, everything needed for reporting and the value
 *  chain. Wall time stays out of serialized reports. */
struct SolveReport {
    ProblemKind kind = ProblemKind::p1;
    LinearDecisionRule rule;
    VectorXd x;
    double objective = 0.0;         // reported value (projected objective for p2)
    double solver_objective = 0.0;  // value the solver minimized
    double probability = 0.0;
    double prob_error = 0.0;
    double stationarity = 0.0;
    double violation = 0.0;
    double complementarity = 0.0;
    int iterations = 0;
    int start_index = 0;
    std::uint64_t seed = 0;
    bool converged = false;
    bool accepted = false;
    double wall_ms = 0.0;
    std::vector<std::string> flags;
};

inline SolveReport solve_problem(const ProblemInstance& inst, const SolveOptions& sopts = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    SolveReport rep;
    rep.kind = inst.kind;
    rep.seed = sopts.seed;
    rep.flags = inst.flags;
    NlpResult r;
    try {
        r = solve_nlp(inst.nlp, inst.x0, sopts);
    } catch (const std::invalid_argument& ex) {
        if (std::string(ex.what()).find("infeasible") == std::string::npos) throw;
        rep.flags.push_back("hard constraint system is infeasible");
        rep.rule = LinearDecisionRule::unflatten(inst.x0.head(inst.layout.dim()), inst.layout);
        rep.x = inst.x0;
        rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                                t0)
                          .count();
        return rep;
    }
    rep.x = r.x;
    rep.rule = LinearDecisionRule::unflatten(r.x.head(inst.layout.dim()), inst.layout);
    rep.solver_objective = r.objective;
    rep.objective = inst.report_objective(r.x);
    const ProbabilityValue pv = inst.probability(r.x);
    rep.probability = pv.value;
    rep.prob_error = pv.error;
    rep.stationarity = r.stationarity;
    rep.violation = r.violation;
    rep.complementarity = r.complementarity;
    rep.iterations = r.iterations;
    rep.start_index = r.start_index;
    rep.converged = r.converged;
    const double slack = rep.prob_error + 2.0 * sopts.kkt_tol;
    const double p = inst.data->sys.p;
    rep.accepted = r.converged && rep.probability >= p - slack;
    rep.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

/** Zero-violation check of the hard group on fresh scenarios; rules of the
 *  projected formulations are projected before the check. */
struct FeasibilityCheck {
    double max_violation = -kInf;
    int violations = 0;
    int samples = 0;
};

inline FeasibilityCheck hard_feasibility_mc(const StageSystem& sys, const CompactForm& cf,
                                            const LinearDecisionRule& rule, bool project,
                                            int n_samples, std::uint64_t seed,
                                            double tol = 1e-9) {
    const Eigen::MatrixXd eps = sample_noise(cf, n_samples, seed);
    FeasibilityCheck out;
    out.samples = n_samples;
    for (int k = 0; k < n_samples; ++k) {
        const VectorXd xi = cf.mu_all + cf.theta_all * eps.col(k);
        std::vector<VectorXd> z(static_cast<size_t>(sys.T));
        if (project) {
            const ScenarioProjection pr = project_rule_on_path(sys, rule, xi);
            if (!pr.feasible) {
                out.violations++;
                out.max_violation = std::max(out.max_violation, kInf);
                continue;
            }
            z = pr.z;
        } else {
            for (int t = 0; t < sys.T; ++t)
                z[static_cast<size_t>(t)] =
                    rule.stage_value(t, xi.head(static_cast<Eigen::Index>(sys.M) * t));
        }
        const double v = max_group_violation(sys, ConstraintGroup::hard, z, xi);
        out.max_violation = std::max(out.max_violation, v);
        if (v > tol) out.violations++;
    }
    return out;
}

/** Verifies the ordering of the four optimal values on shared data and the
 *  feasibility claims behind it. */
struct ChainCheck {
    bool ordering_ok = false;
    bool feasibility_ok = false;
    bool ok() const { return ordering_ok && feasibility_ok; }
    std::string diagnostics;
};

inline ChainCheck value_chain_check(const StageSystem& sys, const CompactForm& cf,
                                    const std::vector<SolveReport>& reports, double tol,
                                    int mc_samples = 20000, std::uint64_t mc_seed = 424242) {
    if (reports.size() != 4)
        throw std::invalid_argument("value chain: expected reports for p1, p2, p3, p4");
    const ProblemKind order[4] = {ProblemKind::p1, ProblemKind::p2, ProblemKind::p3,
                                  ProblemKind::p4};
    for (int i = 0; i < 4; ++i)
        if (reports[static_cast<size_t>(i)].kind != order[i])
            throw std::invalid_argument("value chain: reports must be ordered p1, p2, p3, p4");
    ChainCheck out;
    const double f1 = reports[0].objective, f2 = reports[1].objective;
    const double f3 = reports[2].objective, f4 = reports[3].objective;
    out.ordering_ok = f1 >= f3 - tol && f2 >= f3 - tol && f3 >= f4 - tol;
    std::ostringstream os;
    os << "phi1=" << f1 << " phi2=" << f2 << " phi3=" << f3 << " phi4=" << f4;
    out.feasibility_ok = true;
    for (const auto& rep : reports) {
        os << "\n" << problem_kind_name(rep.kind) << ": probability=" << rep.probability
           << " (err " << rep.prob_error << ")";
        if (!rep.accepted) {
            out.feasibility_ok = false;
            os << " not accepted";
            continue;
        }
        if (rep.probability < sys.p - tol - rep.prob_error) {
            out.feasibility_ok = false;
            os << " below level " << sys.p;
        }
        const bool project = rep.kind != ProblemKind::p1;
        const auto fc = hard_feasibility_mc(sys, cf, rep.rule, project, mc_samples, mc_seed);
        os << " hard max violation " << fc.max_violation << " on " << fc.samples << " samples";
        if (fc.violations > 0) out.feasibility_ok = false;
    }
    out.diagnostics = os.str();
    return out;
}

}  // namespace dcc
