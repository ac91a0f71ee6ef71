#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dcc/linalg.hpp"
#include "dcc/normal.hpp"
#include "dcc/timeseries.hpp"

namespace dcc {

using Eigen::RowVectorXd;

/** Flat layout of the decision variables: per stage, first the gain matrix
 *  entries row-major (stage 1 carries no gains), then the offset entries. */
struct LdrLayout {
    int T = 0;
    int M = 0;
    std::vector<int> n;
    std::vector<int> stage_offset;  // start of stage block in the flat vector

    LdrLayout() = default;
    LdrLayout(int T_, int M_, std::vector<int> n_) : T(T_), M(M_), n(std::move(n_)) {
        stage_offset.resize(T + 1);
        stage_offset[0] = 0;
        for (int t = 0; t < T; ++t)
            stage_offset[t + 1] = stage_offset[t] + n[t] * (M * t) + n[t];
    }
    int dim() const { return stage_offset[T]; }
    int F_index(int t, int i, int c) const { return stage_offset[t] + i * (M * t) + c; }
    int f_index(int t, int i) const { return stage_offset[t] + n[t] * (M * t) + i; }
};

/** y_t(xi_{1:t-1}) = F_t xi_{1:t-1} + f_t, with F_1 empty (first stage is
 *  deterministic). */
struct LinearDecisionRule {
    std::vector<Eigen::MatrixXd> F;  // F[t]: n_t x (M*t)
    std::vector<VectorXd> f;

    static LinearDecisionRule zeros(const LdrLayout& L) {
        LinearDecisionRule r;
        r.F.resize(L.T);
        r.f.resize(L.T);
        for (int t = 0; t < L.T; ++t) {
            r.F[t] = Eigen::MatrixXd::Zero(L.n[t], static_cast<Eigen::Index>(L.M) * t);
            r.f[t] = VectorXd::Zero(L.n[t]);
        }
        return r;
    }
    VectorXd flatten(const LdrLayout& L) const {
        VectorXd x(L.dim());
        for (int t = 0; t < L.T; ++t) {
            for (int i = 0; i < L.n[t]; ++i)
                for (int c = 0; c < L.M * t; ++c) x(L.F_index(t, i, c)) = F[t](i, c);
            for (int i = 0; i < L.n[t]; ++i) x(L.f_index(t, i)) = f[t](i);
        }
        return x;
    }
    static LinearDecisionRule unflatten(const VectorXd& x, const LdrLayout& L) {
        LinearDecisionRule r = zeros(L);
        for (int t = 0; t < L.T; ++t) {
            for (int i = 0; i < L.n[t]; ++i)
                for (int c = 0; c < L.M * t; ++c) r.F[t](i, c) = x(L.F_index(t, i, c));
            for (int i = 0; i < L.n[t]; ++i) r.f[t](i) = x(L.f_index(t, i));
        }
        return r;
    }
    /** Stage decision for the observed prefix xi_{1:t-1} (length M*t). */
    VectorXd stage_value(int t, const VectorXd& xi_prefix) const {
        return F[t] * xi_prefix + f[t];
    }
};

enum class ConstraintGroup { penalized = 0, probabilistic = 1, hard = 2 };

/** Lower-block-triangular constraint data for one group:
 *  sum_{tau<=t} A[t][tau] y_tau + sum_{tau<=t} B[t][tau] xi_tau <= b[t]. */
struct GroupData {
    std::vector<std::vector<Eigen::MatrixXd>> A;  // A[t][tau]: l_t x n_tau
    std::vector<std::vector<Eigen::MatrixXd>> B;  // B[t][tau]: l_t x M
    std::vector<VectorXd> b;

    int rows(int t) const { return static_cast<int>(b[t].size()); }
    int total_rows() const {
        int s = 0;
        for (const auto& v : b) s += static_cast<int>(v.size());
        return s;
    }
};

struct BoxBounds {
    std::vector<VectorXd> lower, upper;
};

struct StageSystem {
    int T = 0;
    int M = 0;
    std::vector<int> n;
    std::array<GroupData, 3> group;  // indexed by ConstraintGroup
    std::vector<VectorXd> h;         // stage costs
    std::vector<VectorXd> penalty;   // nonnegative weights for the penalized group
    double p = 0.0;                  // joint probability level
    bool wait_and_see = true;        // hard group has no current-stage noise term

    const GroupData& g(ConstraintGroup gr) const { return group[static_cast<int>(gr)]; }
    GroupData& g(ConstraintGroup gr) { return group[static_cast<int>(gr)]; }
    LdrLayout layout() const { return LdrLayout(T, M, n); }

    void validate() const {
        if (T < 1 || M < 1) throw std::invalid_argument("stage system: T and M must be positive");
        if (static_cast<int>(n.size()) != T)
            throw std::invalid_argument("stage system: n has wrong length");
        for (int t = 0; t < T; ++t)
            if (n[t] < 1)
                throw std::invalid_argument("stage system: every stage needs a decision");
        if (!(p >= 0.0 && p <= 1.0))
            throw std::invalid_argument("stage system: p must lie in [0,1]");
        for (int gi = 0; gi < 3; ++gi) {
            const GroupData& gd = group[gi];
            if (static_cast<int>(gd.A.size()) != T || static_cast<int>(gd.B.size()) != T ||
                static_cast<int>(gd.b.size()) != T)
                throw std::invalid_argument("stage system: group arrays have wrong length");
            for (int t = 0; t < T; ++t) {
                const int l = gd.rows(t);
                if (static_cast<int>(gd.A[t].size()) != t + 1 ||
                    static_cast<int>(gd.B[t].size()) != t + 1)
                    throw std::invalid_argument("stage system: blocks must cover tau <= t");
                for (int tau = 0; tau <= t; ++tau) {
                    if (gd.A[t][tau].rows() != l || gd.A[t][tau].cols() != n[tau])
                        throw std::invalid_argument("stage system: A block dimension mismatch");
                    if (gd.B[t][tau].rows() != l || gd.B[t][tau].cols() != M)
                        throw std::invalid_argument("stage system: B block dimension mismatch");
                }
            }
        }
        if (static_cast<int>(h.size()) != T)
            throw std::invalid_argument("stage system: h has wrong length");
        for (int t = 0; t < T; ++t)
            if (h[t].size() != n[t])
                throw std::invalid_argument("stage system: h dimension mismatch");
        if (static_cast<int>(penalty.size()) != T)
            throw std::invalid_argument("stage system: penalty has wrong length");
        const GroupData& pen = g(ConstraintGroup::penalized);
        for (int t = 0; t < T; ++t) {
            if (penalty[t].size() != pen.rows(t))
                throw std::invalid_argument("stage system: penalty dimension mismatch");
            if (pen.rows(t) > 0 && penalty[t].minCoeff() < 0.0)
                throw std::invalid_argument("stage system: penalty weights must be nonnegative");
        }
        if (wait_and_see) {
            const GroupData& hard = g(ConstraintGroup::hard);
            for (int t = 0; t < T; ++t)
                if (hard.rows(t) > 0 && hard.B[t][t].cwiseAbs().maxCoeff() > 0.0)
                    throw std::invalid_argument(
                        "stage system: wait-and-see hard group must have zero current-stage noise "
                        "block");
        }
    }

    /** Builds the hard group encoding per-stage bounds lower <= y_t <= upper. */
    static GroupData box_hard_group(int T, int M, const std::vector<int>& n,
                                    const BoxBounds& box) {
        GroupData gd;
        gd.A.resize(T);
        gd.B.resize(T);
        gd.b.resize(T);
        for (int t = 0; t < T; ++t) {
            gd.A[t].resize(t + 1);
            gd.B[t].resize(t + 1);
            for (int tau = 0; tau <= t; ++tau) {
                gd.A[t][tau] = Eigen::MatrixXd::Zero(2 * n[t], n[tau]);
                gd.B[t][tau] = Eigen::MatrixXd::Zero(2 * n[t], M);
            }
            gd.A[t][t].topRows(n[t]) = Eigen::MatrixXd::Identity(n[t], n[t]);
            gd.A[t][t].bottomRows(n[t]) = -Eigen::MatrixXd::Identity(n[t], n[t]);
            gd.b[t].resize(2 * n[t]);
            gd.b[t] << box.upper[t], -box.lower[t];
        }
        return gd;
    }

    /** Recovers per-stage bounds when the hard group has exactly the
     *  (I; -I) current-stage pattern with no other coupling. */
    std::optional<BoxBounds> hard_box() const {
        const GroupData& gd = g(ConstraintGroup::hard);
        BoxBounds box;
        box.lower.resize(T);
        box.upper.resize(T);
        for (int t = 0; t < T; ++t) {
            if (gd.rows(t) != 2 * n[t]) return std::nullopt;
            for (int tau = 0; tau <= t; ++tau) {
                if (gd.B[t][tau].cwiseAbs().maxCoeff() > 0.0) return std::nullopt;
                if (tau < t && gd.A[t][tau].cwiseAbs().maxCoeff() > 0.0) return std::nullopt;
            }
            Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n[t], n[t]);
            if ((gd.A[t][t].topRows(n[t]) - I).cwiseAbs().maxCoeff() > 0.0) return std::nullopt;
            if ((gd.A[t][t].bottomRows(n[t]) + I).cwiseAbs().maxCoeff() > 0.0) return std::nullopt;
            box.upper[t] = gd.b[t].head(n[t]);
            box.lower[t] = -gd.b[t].tail(n[t]);
        }
        return box;
    }
};

/** Rows of one group evaluated at a rule: G_t(x) eps <= g_t(x) over the
 *  stacked noise. Each row keeps its provenance so gradients can be pushed
 *  back through the affine dependence on the rule. */
struct AffineSystem {
    struct Row {
        RowVectorXd G;  // length M*T
        double g = 0.0;
        const GroupData* src = nullptr;
        int t = 0;
        int ell = 0;
    };
    const CompactForm* cf = nullptr;
    std::vector<Row> rows;

    int size() const { return static_cast<int>(rows.size()); }
    Eigen::MatrixXd G_matrix() const {
        Eigen::MatrixXd G(rows.size(), cf ? cf->theta_all.cols() : 0);
        for (size_t i = 0; i < rows.size(); ++i) G.row(i) = rows[i].G;
        return G;
    }
    VectorXd g_vector() const {
        VectorXd g(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) g(i) = rows[i].g;
        return g;
    }

    /** Accumulates the gradient of wG . G_row + wg * g_row with respect to
     *  the flat rule vector. */
    void add_row_adjoint(const LdrLayout& L, int row_idx, const VectorXd& wG, double wg,
                         VectorXd& grad) const {
        const Row& row = rows[row_idx];
        const GroupData& gd = *row.src;
        for (int tau = 0; tau <= row.t; ++tau) {
            const auto av = gd.A[row.t][tau].row(row.ell);
            if (av.cwiseAbs().maxCoeff() == 0.0) continue;
            for (int i = 0; i < L.n[tau]; ++i)
                if (av(i) != 0.0) grad(L.f_index(tau, i)) -= wg * av(i);
            if (tau >= 1) {
                const VectorXd u = cf->theta_stack(tau) * wG;
                const VectorXd mu = cf->mu_stack(tau);
                for (int i = 0; i < L.n[tau]; ++i) {
                    if (av(i) == 0.0) continue;
                    for (int c = 0; c < L.M * tau; ++c)
                        grad(L.F_index(tau, i, c)) += av(i) * (u(c) - wg * mu(c));
                }
            }
        }
    }
};

struct AssembleOptions {
    /** Drop the current-stage noise block B[t][t] (used when folding hard
     *  rows into the joint probability, where the decision cannot react to
     *  the same stage's noise). */
    bool zero_current_stage_B = false;
};

inline AffineSystem assemble_affine_system(const StageSystem& sys, ConstraintGroup gr,
                                           const CompactForm& cf, const LinearDecisionRule& rule,
                                           const AssembleOptions& opts = {}) {
    const GroupData& gd = sys.g(gr);
    AffineSystem out;
    out.cf = &cf;
    const int MT = cf.M * cf.T;
    for (int t = 0; t < sys.T; ++t) {
        const int l = gd.rows(t);
        if (l == 0) continue;
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(l, MT);
        VectorXd g = gd.b[t];
        for (int tau = 0; tau <= t; ++tau) {
            const bool skip_B = opts.zero_current_stage_B && tau == t;
            if (!skip_B) {
                G += gd.B[t][tau] * cf.theta[tau];
                g -= gd.B[t][tau] * cf.mu[tau];
            }
            g -= gd.A[t][tau] * rule.f[tau];
            if (tau >= 1) {
                G += gd.A[t][tau] * (rule.F[tau] * cf.theta_stack(tau));
                g -= gd.A[t][tau] * (rule.F[tau] * cf.mu_stack(tau));
            }
        }
        for (int ell = 0; ell < l; ++ell)
            out.rows.push_back({G.row(ell), g(ell), &gd, t, ell});
    }
    return out;
}

inline void append_system(AffineSystem& dst, const AffineSystem& extra) {
    if (dst.cf == nullptr) dst.cf = extra.cf;
    if (dst.cf != extra.cf)
        throw std::invalid_argument("affine system: cannot merge across compact forms");
    dst.rows.insert(dst.rows.end(), extra.rows.begin(), extra.rows.end());
}

/** E[max(a, min(X, b))] for X ~ N(m, sigma^2); a may be -inf, b may be +inf. */
inline double scalar_clip_mean(double a, double b, double m, double sigma) {
    if (a > b) throw std::invalid_argument("clip mean: a > b");
    if (sigma < 0.0) throw std::invalid_argument("clip mean: negative sigma");
    if (sigma == 0.0) return std::max(a, std::min(m, b));
    double lower_part = 0.0;  // sigma*pdf(u) + (a-m)*cdf(u)
    if (a != -kInf) {
        const double u = (a - m) / sigma;
        lower_part = sigma * norm_pdf(u) + (a - m) * norm_cdf(u);
    }
    double upper_part = m;  // limit of (m-b)*cdf(v) + b - sigma*pdf(v) as b -> inf
    if (b != kInf) {
        const double v = (b - m) / sigma;
        upper_part = (m - b) * norm_cdf(v) + b - sigma * norm_pdf(v);
    }
    return lower_part + upper_part;
}

struct ClipMeanDerivatives {
    double value = 0.0;
    double d_m = 0.0;      // = P(a <= X <= b)
    double d_sigma = 0.0;  // = pdf((a-m)/sigma) - pdf((b-m)/sigma)
};

inline ClipMeanDerivatives scalar_clip_mean_d(double a, double b, double m, double sigma) {
    ClipMeanDerivatives out;
    out.value = scalar_clip_mean(a, b, m, sigma);
    if (sigma == 0.0) {
        out.d_m = (m > a && m < b) ? 1.0 : 0.0;
        out.d_sigma = 0.0;
        return out;
    }
    const double cu = a == -kInf ? 0.0 : norm_cdf((a - m) / sigma);
    const double cv = b == kInf ? 1.0 : norm_cdf((b - m) / sigma);
    const double pu = a == -kInf ? 0.0 : norm_pdf((a - m) / sigma);
    const double pv = b == kInf ? 0.0 : norm_pdf((b - m) / sigma);
    out.d_m = cv - cu;
    out.d_sigma = pu - pv;
    return out;
}

namespace detail {

/** Row variance against the stacked noise covariance; rejects indefinite
 *  products beyond roundoff. */
inline double row_sigma(const AffineSystem::Row& row, const Eigen::MatrixXd& Sigma) {
    const double v = row.G * Sigma * row.G.transpose();
    if (v < -1e-12)
        throw std::invalid_argument("objective: noise covariance produced a negative variance");
    return std::sqrt(std::max(v, 0.0));
}

}  // namespace detail

/** Expected cost of the rule: the linear stage costs at the mean plus the
 *  expected positive part of every penalized row, each of which is a clipped
 *  Gaussian mean in closed form. */
inline double objective_value(const StageSystem& sys, const CompactForm& cf,
                              const LinearDecisionRule& rule) {
    double j1 = 0.0;
    for (int t = 0; t < sys.T; ++t)
        j1 += sys.h[t].dot(rule.F[t] * cf.mu_stack(t) + rule.f[t]);
    double j2 = 0.0;
    AffineSystem pen = assemble_affine_system(sys, ConstraintGroup::penalized, cf, rule);
    for (int i = 0; i < pen.size(); ++i) {
        const auto& row = pen.rows[i];
        const double w = sys.penalty[row.t](row.ell);
        if (w == 0.0) continue;
        const double sigma = detail::row_sigma(row, cf.Sigma);
        j2 += w * scalar_clip_mean(0.0, kInf, -row.g, sigma);
    }
    return j1 + j2;
}

inline VectorXd objective_gradient(const StageSystem& sys, const CompactForm& cf,
                                   const LinearDecisionRule& rule) {
    const LdrLayout L = sys.layout();
    VectorXd grad = VectorXd::Zero(L.dim());
    for (int t = 0; t < sys.T; ++t) {
        const VectorXd mu = cf.mu_stack(t);
        for (int i = 0; i < L.n[t]; ++i) {
            grad(L.f_index(t, i)) += sys.h[t](i);
            for (int c = 0; c < L.M * t; ++c)
                grad(L.F_index(t, i, c)) += sys.h[t](i) * mu(c);
        }
    }
    AffineSystem pen = assemble_affine_system(sys, ConstraintGroup::penalized, cf, rule);
    for (int i = 0; i < pen.size(); ++i) {
        const auto& row = pen.rows[i];
        const double w = sys.penalty[row.t](row.ell);
        if (w == 0.0) continue;
        const double sigma = detail::row_sigma(row, cf.Sigma);
        const auto cm = scalar_clip_mean_d(0.0, kInf, -row.g, sigma);
        // d/dx of w * E[(G eps - g)_+]: the mean enters as -g, the deviation
        // through sigma = sqrt(G Sigma G').
        VectorXd wG = VectorXd::Zero(cf.M * cf.T);
        if (sigma > 0.0 && cm.d_sigma != 0.0)
            wG = (w * cm.d_sigma / sigma) * (cf.Sigma * row.G.transpose());
        pen.add_row_adjoint(L, i, wG, -w * cm.d_m, grad);
    }
    return grad;
}

/** E x = e and A x <= b over the flat rule vector; feasibility is exactly
 *  almost-sure satisfaction of the hard group under the rule. */
struct LinearSystem {
    Eigen::MatrixXd E;
    VectorXd e;
    Eigen::MatrixXd A;
    VectorXd b;
};

inline LinearSystem hard_polyhedral(const StageSystem& sys, const CompactForm& cf) {
    if (!sys.wait_and_see)
        throw std::invalid_argument("hard_polyhedral: requires the wait-and-see hard group");
    const LdrLayout L = sys.layout();
    const GroupData& gd = sys.g(ConstraintGroup::hard);
    const int MT = cf.M * cf.T;
    std::vector<Eigen::RowVectorXd> eq_rows;
    std::vector<double> eq_rhs;
    std::vector<Eigen::RowVectorXd> in_rows;
    std::vector<double> in_rhs;
    // paired rows (such as the two sides of a box) restrict the same gain
    // coordinates; drop rows that duplicate an earlier one up to sign
    std::vector<Eigen::RowVectorXd> eq_keys;
    std::vector<double> eq_key_rhs;
    const auto push_equality = [&](const Eigen::RowVectorXd& coeff, double rhs) {
        Eigen::RowVectorXd key = coeff;
        double key_rhs = rhs;
        double lead = 0.0;
        for (Eigen::Index j = 0; j < key.size() && lead == 0.0; ++j) lead = key(j);
        if (lead == 0.0) lead = key_rhs;
        if (lead < 0.0) {
            key = -key;
            key_rhs = -key_rhs;
        }
        for (size_t j = 0; j < eq_keys.size(); ++j)
            if (eq_key_rhs[j] == key_rhs &&
                (eq_keys[j] - key).cwiseAbs().maxCoeff() == 0.0)
                return;
        eq_keys.push_back(std::move(key));
        eq_key_rhs.push_back(key_rhs);
        eq_rows.push_back(coeff);
        eq_rhs.push_back(rhs);
    };
    for (int t = 0; t < sys.T; ++t) {
        const int l = gd.rows(t);
        if (l == 0) continue;
        // constant noise part: sum_tau B[t][tau] Theta_tau
        Eigen::MatrixXd Gconst = Eigen::MatrixXd::Zero(l, MT);
        VectorXd mu_part = VectorXd::Zero(l);
        for (int tau = 0; tau <= t; ++tau) {
            Gconst += gd.B[t][tau] * cf.theta[tau];
            mu_part += gd.B[t][tau] * cf.mu[tau];
        }
        for (int ell = 0; ell < l; ++ell) {
            // noise loading must vanish coordinate-wise
            for (int c = 0; c < MT; ++c) {
                Eigen::RowVectorXd coeff = Eigen::RowVectorXd::Zero(L.dim());
                bool nonzero = false;
                for (int tau = 1; tau <= t; ++tau) {
                    const auto av = gd.A[t][tau].row(ell);
                    if (av.cwiseAbs().maxCoeff() == 0.0) continue;
                    const Eigen::MatrixXd th = cf.theta_stack(tau);
                    for (int i = 0; i < L.n[tau]; ++i) {
                        if (av(i) == 0.0) continue;
                        for (int cc = 0; cc < L.M * tau; ++cc) {
                            const double v = av(i) * th(cc, c);
                            if (v != 0.0) {
                                coeff(L.F_index(tau, i, cc)) += v;
                                nonzero = true;
                            }
                        }
                    }
                }
                const double rhs = -Gconst(ell, c);
                if (nonzero || rhs != 0.0) push_equality(coeff, rhs);
            }
            // mean part stays within the right-hand side
            Eigen::RowVectorXd coeff = Eigen::RowVectorXd::Zero(L.dim());
            for (int tau = 0; tau <= t; ++tau) {
                const auto av = gd.A[t][tau].row(ell);
                for (int i = 0; i < L.n[tau]; ++i) {
                    if (av(i) == 0.0) continue;
                    coeff(L.f_index(tau, i)) += av(i);
                    if (tau >= 1) {
                        const VectorXd mu = cf.mu_stack(tau);
                        for (int cc = 0; cc < L.M * tau; ++cc)
                            coeff(L.F_index(tau, i, cc)) += av(i) * mu(cc);
                    }
                }
            }
            in_rows.push_back(coeff);
            in_rhs.push_back(gd.b[t](ell) - mu_part(ell));
        }
    }
    LinearSystem out;
    out.E.resize(eq_rows.size(), L.dim());
    out.e.resize(eq_rows.size());
    for (size_t i = 0; i < eq_rows.size(); ++i) {
        out.E.row(i) = eq_rows[i];
        out.e(i) = eq_rhs[i];
    }
    out.A.resize(in_rows.size(), L.dim());
    out.b.resize(in_rows.size());
    for (size_t i = 0; i < in_rows.size(); ++i) {
        out.A.row(i) = in_rows[i];
        out.b(i) = in_rhs[i];
    }
    return out;
}

struct StaticReduction {
    struct StageRank {
        int t = 0;  // 1-based stage whose gains are tested
        int required = 0;
        int rank = 0;
        bool surjective = false;
    };
    bool all_static = true;
    std::vector<StageRank> stages;
};

/** Checks whether the noise prefix maps onto every observation prefix: if
 *  each stacked Theta_{1:t-1} has full row rank, any almost-sure linear
 *  functional of the observations that must vanish forces its gains to zero,
 *  so box-type hard constraints admit only static rules. */
inline StaticReduction static_reduction_test(const CompactForm& cf, double tol = 1e-10) {
    StaticReduction out;
    for (int t = 1; t < cf.T; ++t) {
        StaticReduction::StageRank sr;
        sr.t = t + 1;
        sr.required = cf.M * t;
        sr.rank = static_cast<int>(matrix_rank(cf.theta_stack(t), tol));
        sr.surjective = sr.rank == sr.required;
        out.all_static = out.all_static && sr.surjective;
        out.stages.push_back(sr);
    }
    return out;
}

}  // namespace dcc
