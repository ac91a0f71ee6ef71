#include <catch2/catch_amalgamated.hpp>

#include "dcc/gaussian.hpp"

#include "support/quadrature.hpp"

using namespace dcc;

namespace {

Eigen::MatrixXd random_pd(Rng& rng, int n, double ridge = 0.3) {
    Eigen::MatrixXd A(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) A(i, j) = rng.normal() / std::sqrt(1.0 * n);
    return A * A.transpose() + ridge * Eigen::MatrixXd::Identity(n, n);
}

Eigen::MatrixXd random_rows(Rng& rng, int d, int n) {
    Eigen::MatrixXd G(d, n);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < n; ++j) G(i, j) = rng.uniform(-1.0, 1.0);
    return G;
}

struct Saa {
    double value = 0.0;
    double se = 0.0;
};

/** Sampled P(G eps <= g | eps in region), rejection over the support. */
Saa saa_system(const Eigen::MatrixXd& G, const Eigen::VectorXd& g, const Eigen::MatrixXd& Sigma,
               const TruncationRegion& region, int n_samples, std::uint64_t seed) {
    const Eigen::MatrixXd L = psd_factor(Sigma, 1e-12, "saa");
    Rng rng(seed);
    long hits = 0, total = 0;
    for (int k = 0; k < n_samples; ++k) {
        const Eigen::VectorXd e = L * rng.normal_vector(static_cast<int>(Sigma.rows()));
        if (region.kind == TruncationRegion::Kind::box) {
            if (((e - region.lower).array() < 0.0).any()) continue;
            if (((region.upper - e).array() < 0.0).any()) continue;
        } else if (region.kind == TruncationRegion::Kind::ellipsoid) {
            const Eigen::VectorXd d = e - region.center;
            const Eigen::LLT<Eigen::MatrixXd> llt(region.shape);
            if (d.dot(llt.solve(d)) > region.radius * region.radius) continue;
        }
        ++total;
        if (((G * e - g).array() <= 0.0).all()) ++hits;
    }
    Saa out;
    out.value = static_cast<double>(hits) / std::max(1L, total);
    out.se = std::sqrt(std::max(out.value * (1.0 - out.value), 1e-12) / std::max(1L, total));
    return out;
}

}  // namespace

TEST_CASE("single-row system matches the scalar normal law") {
    Rng rng(7);
    const Eigen::MatrixXd Sigma = random_pd(rng, 3);
    Eigen::MatrixXd G(1, 3);
    G << 1.2, -0.4, 0.3;
    Eigen::VectorXd g(1);
    g << 0.7;
    const double sigma = std::sqrt((G * Sigma * G.transpose())(0, 0));
    const double want = norm_cdf(0.7 / sigma);

    const auto val = system_probability(G, g, Sigma);
    REQUIRE(val.value == Catch::Approx(want).margin(1e-12));
    REQUIRE(val.error == 0.0);

    const auto grad = system_probability_gradient(G, g, Sigma);
    REQUIRE(grad.value == Catch::Approx(want).margin(1e-12));
    const double b = 0.7 / sigma;
    REQUIRE(grad.dg(0) == Catch::Approx(norm_pdf(b) / sigma).epsilon(1e-10));
    const Eigen::RowVectorXd want_dG =
        -norm_pdf(b) * b / (sigma * sigma) * (G * Sigma);
    for (int j = 0; j < 3; ++j)
        REQUIRE(grad.dG(0, j) == Catch::Approx(want_dG(j)).margin(1e-10));
}

TEST_CASE("independent rows factor into a product") {
    Eigen::MatrixXd Sigma = Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd G = Eigen::MatrixXd::Identity(2, 2);
    Eigen::VectorXd g(2);
    g << 0.8, -0.3;
    MvnOptions mvn;
    mvn.qmc_points = 32768;
    ProbabilityOptions opts;
    opts.mvn = mvn;
    const auto val = system_probability(G, g, Sigma, opts);
    REQUIRE(val.value == Catch::Approx(norm_cdf(0.8) * norm_cdf(-0.3)).margin(2e-5));

    const auto grad = system_probability_gradient(G, g, Sigma, opts);
    REQUIRE(grad.dg(0) == Catch::Approx(norm_pdf(0.8) * norm_cdf(-0.3)).margin(2e-4));
    REQUIRE(grad.dg(1) == Catch::Approx(norm_pdf(-0.3) * norm_cdf(0.8)).margin(2e-4));
}

TEST_CASE("pair-limit coupling matches the bivariate density identity") {
    // for a standardized pair, d P / d rho = pdf2(b1, b2; rho); realize the
    // rho-shift through the covariance of the second row
    const double rho = 0.45, b1 = 0.6, b2 = -0.2;
    Eigen::MatrixXd Sigma = Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd G(2, 2);
    G << 1.0, 0.0, rho, std::sqrt(1.0 - rho * rho);
    Eigen::VectorXd g(2);
    g << b1, b2;
    ProbabilityOptions opts;
    opts.mvn.qmc_points = 65536;
    const auto grad = system_probability_gradient(G, g, Sigma, opts);

    const double h = 1e-5;
    auto value_at = [&](double r) {
        Eigen::MatrixXd G2 = G;
        G2(1, 0) = r;
        G2(1, 1) = std::sqrt(1.0 - r * r);
        return system_probability(G2, g, Sigma, opts).value;
    };
    const double fd = (value_at(rho + h) - value_at(rho - h)) / (2 * h);
    // chain rule through the explicit parameterization of row 2
    const double analytic = grad.dG(1, 0) - grad.dG(1, 1) * rho / std::sqrt(1.0 - rho * rho);
    REQUIRE(analytic == Catch::Approx(binorm_pdf(b1, b2, rho)).margin(2e-4));
    REQUIRE(fd == Catch::Approx(binorm_pdf(b1, b2, rho)).margin(2e-4));
}

TEST_CASE("gradient matches common-random-number finite differences") {
    for (std::uint64_t seed : {101u, 102u, 103u}) {
        Rng rng(seed);
        const int d = 3, n = 4;
        const Eigen::MatrixXd Sigma = random_pd(rng, n);
        const Eigen::MatrixXd G = random_rows(rng, d, n);
        Eigen::VectorXd g(d);
        for (int i = 0; i < d; ++i) g(i) = rng.uniform(0.2, 1.5);

        // no support region here: the stacked box system has a singular
        // covariance whose quadrature error does not cancel between the two
        // sides of a difference quotient (the box case is checked against
        // quadrature ground truth instead)
        ProbabilityOptions opts;
        opts.mvn.qmc_points = 32768;
        opts.mvn.seed = 42;
        const double h = 1e-4;
        const auto grad = system_probability_gradient(G, g, Sigma, opts);
        // near-zero entries are judged against the gradient's scale, where
        // quadrature noise in the differences would otherwise dominate
        const double gmax =
            std::max(grad.dG.cwiseAbs().maxCoeff(), grad.dg.cwiseAbs().maxCoeff());
        auto rel = [&](double fd, double an) {
            return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 0.05 * gmax});
        };

        double worst = 0.0;
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < n; ++j) {
                Eigen::MatrixXd Gp = G, Gm = G;
                Gp(i, j) += h;
                Gm(i, j) -= h;
                const double fd = (system_probability(Gp, g, Sigma, opts).value -
                                   system_probability(Gm, g, Sigma, opts).value) /
                                  (2 * h);
                worst = std::max(worst, rel(fd, grad.dG(i, j)));
            }
            Eigen::VectorXd gp = g, gm = g;
            gp(i) += h;
            gm(i) -= h;
            const double fd = (system_probability(G, gp, Sigma, opts).value -
                               system_probability(G, gm, Sigma, opts).value) /
                              (2 * h);
            worst = std::max(worst, rel(fd, grad.dg(i)));
        }
        CAPTURE(seed, worst);
        REQUIRE(worst <= 1e-2);
    }
}

TEST_CASE("box-conditional gradient matches quadrature ground truth") {
    // P(a . eps <= g | eps in [lo,up]^2) for independent standard noise,
    // differentiated against an adaptive-quadrature evaluation of the joint
    const double a1 = 0.8, a2 = -0.5, g0 = 0.4, lo = -1.5, up = 2.0;
    auto joint = [&](double x, double y) {
        return testsupport::integrate(
            [&](double e2) {
                const double c = (g0 - y * e2) / x;
                const double hi1 = std::min(c, up);
                if (hi1 <= lo) return 0.0;
                return norm_pdf(e2) * (norm_cdf(hi1) - norm_cdf(lo));
            },
            lo, up, 1e-13);
    };
    const double mass = std::pow(norm_cdf(up) - norm_cdf(lo), 2);
    const double hq = 1e-6;
    const double want_d1 = (joint(a1 + hq, a2) - joint(a1 - hq, a2)) / (2 * hq) / mass;
    const double want_d2 = (joint(a1, a2 + hq) - joint(a1, a2 - hq)) / (2 * hq) / mass;

    Eigen::MatrixXd Sigma = Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd G(1, 2);
    G << a1, a2;
    Eigen::VectorXd g(1);
    g << g0;
    ProbabilityOptions opts;
    opts.mvn.qmc_points = 1 << 17;
    opts.support = TruncationRegion::box(Eigen::VectorXd::Constant(2, lo),
                                         Eigen::VectorXd::Constant(2, up));
    const auto grad = system_probability_gradient(G, g, Sigma, opts);
    REQUIRE(grad.dG(0, 0) == Catch::Approx(want_d1).margin(2e-5));
    REQUIRE(grad.dG(0, 1) == Catch::Approx(want_d2).margin(2e-5));
    REQUIRE(grad.value == Catch::Approx(joint(a1, a2) / mass).margin(5e-4));
}

TEST_CASE("system values agree with sampling") {
    for (std::uint64_t seed : {201u, 202u}) {
        Rng rng(seed);
        const int d = 4, n = 5;
        const Eigen::MatrixXd Sigma = random_pd(rng, n);
        const Eigen::MatrixXd G = random_rows(rng, d, n);
        Eigen::VectorXd g(d);
        for (int i = 0; i < d; ++i) g(i) = rng.uniform(0.0, 1.5);

        ProbabilityOptions opts;
        opts.mvn.qmc_points = 32768;

        const auto plain = system_probability(G, g, Sigma, opts);
        const auto plain_saa = saa_system(G, g, Sigma, TruncationRegion::none(), 400000, seed + 1);
        CAPTURE(seed, plain.value, plain_saa.value);
        REQUIRE(std::abs(plain.value - plain_saa.value) <= 3.0 * plain_saa.se + plain.error);

        opts.support = TruncationRegion::box(Eigen::VectorXd::Constant(n, -1.2),
                                             Eigen::VectorXd::Constant(n, 1.8));
        const auto boxed = system_probability(G, g, Sigma, opts);
        const auto boxed_saa = saa_system(G, g, Sigma, opts.support, 400000, seed + 2);
        CAPTURE(boxed.value, boxed_saa.value);
        REQUIRE(std::abs(boxed.value - boxed_saa.value) <= 3.0 * boxed_saa.se + boxed.error);
        REQUIRE(boxed.mass < 1.0);
        REQUIRE(boxed.joint <= boxed.mass + 1e-12);

        opts.support = TruncationRegion::ellipsoid(Eigen::VectorXd::Zero(n), Sigma, 2.0);
        const auto ell = system_probability(G, g, Sigma, opts);
        const auto ell_saa = saa_system(G, g, Sigma, opts.support, 400000, seed + 3);
        CAPTURE(ell.value, ell_saa.value);
        REQUIRE(std::abs(ell.value - ell_saa.value) <= 3.0 * ell_saa.se + ell.error);
    }
}

TEST_CASE("deterministic rows follow the drop rules") {
    Eigen::MatrixXd Sigma = Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd G(3, 2);
    G << 1.0, 0.0, 0.0, 1.0, 0.0, 0.0;  // last row has zero variance
    Eigen::VectorXd g(3);
    g << 0.5, 0.4, 0.0;

    // satisfied deterministic row drops out
    const auto val = system_probability(G, g, Sigma);
    Eigen::MatrixXd G2 = G.topRows(2);
    Eigen::VectorXd g2 = g.head(2);
    const auto val2 = system_probability(G2, g2, Sigma);
    REQUIRE(val.value == Catch::Approx(val2.value).margin(1e-12));

    // violated deterministic row kills the probability
    g(2) = -0.5;
    REQUIRE(system_probability(G, g, Sigma).value == 0.0);

    // the gradient refuses near-deterministic rows outright
    REQUIRE_THROWS_AS(system_probability_gradient(G, g, Sigma), std::domain_error);

    // the filter drops held rows, flags violated ones, refuses ambiguity
    g(2) = 0.5;
    auto filt = filter_deterministic_rows(G, g, Sigma);
    REQUIRE(filt.kept == std::vector<int>{0, 1});
    REQUIRE(!filt.surely_violated);
    g(2) = -0.5;
    REQUIRE(filter_deterministic_rows(G, g, Sigma).surely_violated);
    g(2) = 1e-6;
    REQUIRE_THROWS_AS(filter_deterministic_rows(G, g, Sigma), std::domain_error);
}

TEST_CASE("probability is reproducible and monotone in the right-hand side") {
    Rng rng(303);
    const int d = 3, n = 4;
    const Eigen::MatrixXd Sigma = random_pd(rng, n);
    const Eigen::MatrixXd G = random_rows(rng, d, n);
    Eigen::VectorXd g(d);
    g << 0.4, 0.9, 0.1;
    ProbabilityOptions opts;
    const auto a = system_probability(G, g, Sigma, opts);
    const auto b = system_probability(G, g, Sigma, opts);
    REQUIRE(a.value == b.value);

    Eigen::VectorXd g_up = g;
    g_up(0) += 0.75;
    const auto c = system_probability(G, g_up, Sigma, opts);
    REQUIRE(c.value >= a.value - 2.0 * (a.error + c.error));
}
