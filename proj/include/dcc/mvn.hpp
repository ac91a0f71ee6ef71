#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include "dcc/linalg.hpp"
#include "dcc/normal.hpp"
#include "dcc/rng.hpp"

namespace dcc {

struct MvnOptions {
    int qmc_points = 16384;  // total across batches
    int batches = 8;         // randomization batches, minimum 8 enforced
    std::uint64_t seed = 1;
    int mc_points = 200000;  // plain Monte Carlo fallbacks only
};

struct MvnResult {
    double value = 0.0;
    double error = 0.0;  // 3x standard deviation across randomization batches
};

namespace detail {

inline double truncated_unit_mean(double a, double b) {
    const double za = a <= -37.0 ? 0.0 : norm_cdf(a);
    const double zb = b >= 37.0 ? 1.0 : norm_cdf(b);
    const double z = zb - za;
    if (z < 1e-300) return 0.5 * (std::max(a, -37.0) + std::min(b, 37.0));
    return (norm_pdf(a) - norm_pdf(b)) / z;
}

/** Generalized Cholesky with greedy variable ordering: at each step pick the
 *  remaining variable whose conditional interval has the smallest mass. Zero
 *  pivots (PSD rank deficiency) keep their dependence on earlier variables
 *  and later enter the integrand as indicator factors. */
struct MvnPlan {
    Eigen::MatrixXd L;
    Eigen::VectorXd a, b;
    std::vector<bool> needs_y;
    int d = 0;
};

inline MvnPlan mvn_plan(Eigen::VectorXd a, Eigen::VectorXd b, Eigen::MatrixXd C) {
    const int d = static_cast<int>(C.rows());
    const double scale = std::max(1.0, C.diagonal().cwiseAbs().maxCoeff());
    const double sing_tol = 1e-12 * scale;
    MvnPlan plan;
    plan.d = d;
    plan.L = Eigen::MatrixXd::Zero(d, d);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(d);
    for (int i = 0; i < d; ++i) {
        int best = -1;
        double best_p = 2.0;
        for (int j = i; j < d; ++j) {
            const double v = C(j, j) - plan.L.row(j).head(i).squaredNorm();
            if (v < -1e-8 * scale)
                throw std::invalid_argument("mvn: covariance not positive semidefinite");
            const double s = std::sqrt(std::max(v, 0.0));
            const double la = a(j) - plan.L.row(j).head(i).dot(y.head(i));
            const double lb = b(j) - plan.L.row(j).head(i).dot(y.head(i));
            double p;
            if (s > std::sqrt(sing_tol))
                p = norm_cdf(lb / s) - norm_cdf(la / s);
            else
                p = (la <= 1e-9 && lb >= -1e-9) ? 1.0 : 0.0;
            if (p < best_p - 1e-15) {
                best_p = p;
                best = j;
            }
        }
        if (best != i) {
            C.row(best).swap(C.row(i));
            C.col(best).swap(C.col(i));
            plan.L.row(best).swap(plan.L.row(i));
            std::swap(a(best), a(i));
            std::swap(b(best), b(i));
        }
        const double v = C(i, i) - plan.L.row(i).head(i).squaredNorm();
        const double s = std::sqrt(std::max(v, 0.0));
        if (v > sing_tol) {
            plan.L(i, i) = s;
            for (int j = i + 1; j < d; ++j)
                plan.L(j, i) =
                    (C(j, i) - plan.L.row(j).head(i).dot(plan.L.row(i).head(i))) / s;
            const double la = (a(i) - plan.L.row(i).head(i).dot(y.head(i))) / s;
            const double lb = (b(i) - plan.L.row(i).head(i).dot(y.head(i))) / s;
            y(i) = truncated_unit_mean(la, lb);
        }
    }
    plan.a = a;
    plan.b = b;
    plan.needs_y.assign(d, false);
    for (int i = 0; i < d; ++i) {
        if (plan.L(i, i) <= 0.0) continue;
        for (int j = i + 1; j < d; ++j)
            if (plan.L(j, i) != 0.0) {
                plan.needs_y[i] = true;
                break;
            }
    }
    return plan;
}

inline const std::vector<double>& lattice_generators() {
    static const std::vector<double> g = [] {
        std::vector<double> out;
        std::vector<int> primes;
        for (int n = 2; static_cast<int>(primes.size()) < 512; ++n) {
            bool is_prime = true;
            for (int p : primes) {
                if (p * p > n) break;
                if (n % p == 0) {
                    is_prime = false;
                    break;
                }
            }
            if (is_prime) primes.push_back(n);
        }
        for (int p : primes) {
            double q = std::sqrt(static_cast<double>(p));
            out.push_back(q - std::floor(q));
        }
        return out;
    }();
    return g;
}

}  // namespace detail

/** P(lower <= Z <= upper) for Z ~ N(0, C), PSD C, entries of the limits may
 *  be infinite. Separation-of-variables with sequential conditioning over a
 *  randomly shifted rank-1 lattice (tent-periodized); the error field is 3x
 *  the standard deviation over the randomization batches, with batch b
 *  seeded as seed + b. */
inline MvnResult mvn_rectangle(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                               const Eigen::MatrixXd& C, const MvnOptions& opts = {}) {
    const int d = static_cast<int>(C.rows());
    if (lower.size() != d || upper.size() != d)
        throw std::invalid_argument("mvn: limit dimension mismatch");
    if (d == 0) return {1.0, 0.0};
    for (int i = 0; i < d; ++i)
        if (lower(i) > upper(i)) return {0.0, 0.0};
    if (d == 1) {
        const double s = std::sqrt(std::max(C(0, 0), 0.0));
        if (s <= 1e-13)
            return {(lower(0) <= 1e-9 && upper(0) >= -1e-9) ? 1.0 : 0.0, 0.0};
        return {std::max(0.0, norm_cdf(upper(0) / s) - norm_cdf(lower(0) / s)), 0.0};
    }

    const auto plan = detail::mvn_plan(lower, upper, C);
    std::vector<int> u_rows;
    for (int i = 0; i < d; ++i)
        if (plan.needs_y[i]) u_rows.push_back(i);
    const int nu = static_cast<int>(u_rows.size());
    const auto& gens = detail::lattice_generators();
    if (nu > static_cast<int>(gens.size()))
        throw std::invalid_argument("mvn: dimension too large for lattice table");

    const int batches = std::max(8, opts.batches);
    const int npts = std::max(1, opts.qmc_points / batches);
    Eigen::VectorXd y(d);
    std::vector<double> batch_mean(batches, 0.0);
    for (int bidx = 0; bidx < batches; ++bidx) {
        Rng rng(opts.seed + static_cast<std::uint64_t>(bidx));
        Eigen::VectorXd shift = rng.uniform_vector(nu);
        double acc = 0.0;
        for (int k = 1; k <= npts; ++k) {
            double f = 1.0;
            int uidx = 0;
            for (int i = 0; i < d; ++i) {
                const double off = plan.L.row(i).head(i).dot(y.head(i));
                const double lo = plan.a(i) - off;
                const double hi = plan.b(i) - off;
                const double Lii = plan.L(i, i);
                if (Lii > 0.0) {
                    const double di = lo == -kInf ? 0.0 : norm_cdf(lo / Lii);
                    double ei = hi == kInf ? 1.0 : norm_cdf(hi / Lii);
                    if (ei < di) ei = di;
                    f *= ei - di;
                    if (f <= 0.0) break;
                    if (plan.needs_y[i]) {
                        double u = k * gens[uidx] + shift(uidx);
                        u = std::fabs(2.0 * (u - std::floor(u)) - 1.0);
                        double w = di + u * (ei - di);
                        w = std::min(std::max(w, 1e-16), 1.0 - 1e-16);
                        y(i) = norm_quantile(w);
                        ++uidx;
                    } else {
                        y(i) = 0.0;
                    }
                } else {
                    y(i) = 0.0;
                    if (!(lo <= 1e-9 && hi >= -1e-9)) {
                        f = 0.0;
                        break;
                    }
                }
            }
            acc += f;
        }
        batch_mean[bidx] = acc / npts;
    }
    double mean = std::accumulate(batch_mean.begin(), batch_mean.end(), 0.0) / batches;
    double var = 0.0;
    for (double v : batch_mean) var += (v - mean) * (v - mean);
    var /= std::max(1, batches - 1);
    MvnResult res;
    res.value = std::min(std::max(mean, 0.0), 1.0);
    res.error = 3.0 * std::sqrt(var / batches);
    return res;
}

/** One-sided CDF P(Z <= upper) for Z ~ N(0, C). */
inline MvnResult mvn_cdf(const Eigen::VectorXd& upper, const Eigen::MatrixXd& C,
                         const MvnOptions& opts = {}) {
    return mvn_rectangle(Eigen::VectorXd::Constant(upper.size(), -kInf), upper, C, opts);
}

struct TruncationRegion {
    enum class Kind { none, box, ellipsoid };
    Kind kind = Kind::none;
    Eigen::VectorXd lower, upper;  // box limits, entries may be infinite
    Eigen::VectorXd center;        // ellipsoid (x-center)' shape^{-1} (x-center) <= radius^2
    Eigen::MatrixXd shape;
    double radius = 0.0;

    static TruncationRegion none() { return {}; }
    static TruncationRegion box(Eigen::VectorXd lo, Eigen::VectorXd hi) {
        TruncationRegion r;
        r.kind = Kind::box;
        r.lower = std::move(lo);
        r.upper = std::move(hi);
        return r;
    }
    static TruncationRegion ellipsoid(Eigen::VectorXd c, Eigen::MatrixXd E, double kappa) {
        TruncationRegion r;
        r.kind = Kind::ellipsoid;
        r.center = std::move(c);
        r.shape = std::move(E);
        r.radius = kappa;
        return r;
    }
    bool bounded() const {
        if (kind == Kind::none) return false;
        if (kind == Kind::ellipsoid) return true;
        return lower.allFinite() && upper.allFinite();
    }
};

/** P(eps in S) for eps ~ N(0, Sigma). Boxes integrate directly as two-sided
 *  rectangles; ellipsoids centered at the origin with shape Sigma reduce to
 *  a chi-square tail, anything else falls back to seeded plain Monte Carlo
 *  (error again a 3-sigma width). */
inline MvnResult truncation_mass(const TruncationRegion& region, const Eigen::MatrixXd& Sigma,
                                 const MvnOptions& opts = {}) {
    const int d = static_cast<int>(Sigma.rows());
    switch (region.kind) {
        case TruncationRegion::Kind::none:
            return {1.0, 0.0};
        case TruncationRegion::Kind::box: {
            if (region.lower.size() != d || region.upper.size() != d)
                throw std::invalid_argument("mvn: truncation box dimension mismatch");
            return mvn_rectangle(region.lower, region.upper, Sigma, opts);
        }
        case TruncationRegion::Kind::ellipsoid: {
            if (region.center.size() != d || region.shape.rows() != d)
                throw std::invalid_argument("mvn: truncation ellipsoid dimension mismatch");
            if (region.center.isZero(0.0) &&
                (region.shape - Sigma).cwiseAbs().maxCoeff() <=
                    1e-12 * (1.0 + Sigma.cwiseAbs().maxCoeff())) {
                return {boost::math::gamma_p(0.5 * d, 0.5 * region.radius * region.radius), 0.0};
            }
            Eigen::MatrixXd Ls = psd_factor(Sigma, 1e-12, "mvn: Sigma");
            Eigen::LLT<Eigen::MatrixXd> shape_llt(region.shape);
            if (shape_llt.info() != Eigen::Success)
                throw std::invalid_argument("mvn: ellipsoid shape must be positive definite");
            const int n = std::max(1000, opts.mc_points);
            Rng rng(opts.seed);
            int hits = 0;
            for (int i = 0; i < n; ++i) {
                Eigen::VectorXd x = Ls * rng.normal_vector(d) - region.center;
                const double q = x.dot(shape_llt.solve(x));
                if (q <= region.radius * region.radius) ++hits;
            }
            const double p = static_cast<double>(hits) / n;
            return {p, 3.0 * std::sqrt(std::max(p * (1.0 - p), 1e-12) / n)};
        }
    }
    return {1.0, 0.0};
}

/** Mean of a N(m, sigma^2) variable conditioned on [a, b]. */
inline double truncated_scalar_mean(double m, double sigma, double a, double b) {
    if (sigma < 0.0) throw std::invalid_argument("mvn: negative sigma");
    if (sigma == 0.0) {
        if (m < a - 1e-12 || m > b + 1e-12)
            throw std::invalid_argument("mvn: degenerate variable outside truncation interval");
        return m;
    }
    const double u = (a - m) / sigma;
    const double v = (b - m) / sigma;
    const double z = norm_cdf(v) - norm_cdf(u);
    if (z < 1e-12) throw std::invalid_argument("mvn: truncation interval mass below 1e-12");
    return m + sigma * (norm_pdf(u) - norm_pdf(v)) / z;
}

}  // namespace dcc
