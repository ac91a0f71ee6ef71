#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "dcc/problems.hpp"

#include "support/lp_bruteforce.hpp"
#include "support/saa_oracle.hpp"

using namespace dcc;

namespace {

VectorXd v1(double a) {
    VectorXd v(1);
    v << a;
    return v;
}

Eigen::RowVectorXd r1(double a) {
    Eigen::RowVectorXd r(1);
    r << a;
    return r;
}

StageSystem empty_system(int T, int M, std::vector<int> n) {
    StageSystem sys;
    sys.T = T;
    sys.M = M;
    sys.n = std::move(n);
    for (int gi = 0; gi < 3; ++gi) {
        GroupData& gd = sys.group[gi];
        gd.A.resize(T);
        gd.B.resize(T);
        gd.b.resize(T);
        for (int t = 0; t < T; ++t) {
            gd.A[t].assign(t + 1, Eigen::MatrixXd());
            gd.B[t].assign(t + 1, Eigen::MatrixXd());
            for (int tau = 0; tau <= t; ++tau) {
                gd.A[t][tau] = Eigen::MatrixXd::Zero(0, sys.n[tau]);
                gd.B[t][tau] = Eigen::MatrixXd::Zero(0, M);
            }
            gd.b[t] = VectorXd::Zero(0);
        }
    }
    sys.h.resize(T);
    sys.penalty.resize(T);
    for (int t = 0; t < T; ++t) {
        sys.h[t] = VectorXd::Zero(sys.n[t]);
        sys.penalty[t] = VectorXd::Zero(0);
    }
    sys.p = 0.9;
    return sys;
}

void append_row(StageSystem& sys, ConstraintGroup gr, int t,
                const std::vector<Eigen::RowVectorXd>& a,
                const std::vector<Eigen::RowVectorXd>& bn, double rhs) {
    GroupData& gd = sys.g(gr);
    for (int tau = 0; tau <= t; ++tau) {
        Eigen::MatrixXd& A = gd.A[t][tau];
        A.conservativeResize(A.rows() + 1, Eigen::NoChange);
        A.row(A.rows() - 1) = a[static_cast<size_t>(tau)];
        Eigen::MatrixXd& B = gd.B[t][tau];
        B.conservativeResize(B.rows() + 1, Eigen::NoChange);
        B.row(B.rows() - 1) = bn[static_cast<size_t>(tau)];
    }
    gd.b[t].conservativeResize(gd.b[t].size() + 1);
    gd.b[t](gd.b[t].size() - 1) = rhs;
}

/** Two stages, scalar noise and decisions: xi_1 = 0.3 + e_1,
 *  xi_2 = 0.4 + 0.5 e_1 + e_2 with Var(e) = diag(0.04, 0.09). */
CompactForm two_stage_form(double sigma_cross = 0.0) {
    CompactForm cf;
    cf.T = 2;
    cf.M = 1;
    cf.mu = {v1(0.3), v1(0.4)};
    cf.theta.assign(2, Eigen::MatrixXd::Zero(1, 2));
    cf.theta[0] << 1.0, 0.0;
    cf.theta[1] << 0.5, 1.0;
    cf.Sigma = Eigen::MatrixXd::Zero(2, 2);
    cf.Sigma << 0.04, sigma_cross, sigma_cross, 0.09;
    cf.theta_all = Eigen::MatrixXd::Zero(2, 2);
    cf.theta_all << 1.0, 0.0, 0.5, 1.0;
    cf.mu_all = Eigen::Vector2d(0.3, 0.4);
    return cf;
}

CompactForm single_stage_form(double mu, double theta, double var) {
    CompactForm cf;
    cf.T = 1;
    cf.M = 1;
    cf.mu = {v1(mu)};
    cf.theta = {Eigen::MatrixXd::Constant(1, 1, theta)};
    cf.Sigma = Eigen::MatrixXd::Constant(1, 1, var);
    cf.theta_all = cf.theta[0];
    cf.mu_all = v1(mu);
    return cf;
}

/** Workhorse instance: minimize E[y_1 + y_2] with box 0 <= y_t <= 1, a joint
 *  chance constraint xi_1 - y_1 <= 0.25, xi_1 + xi_2 - y_1 - y_2 <= 0.6 at
 *  level p, and (optionally) a penalized budget row y_1 + y_2 <= 1.2. */
StageSystem two_stage_system(double p, double pen_w) {
    StageSystem sys = empty_system(2, 1, {1, 1});
    sys.h[0] = v1(1.0);
    sys.h[1] = v1(1.0);
    sys.p = p;
    BoxBounds box;
    box.lower = {v1(0.0), v1(0.0)};
    box.upper = {v1(1.0), v1(1.0)};
    sys.g(ConstraintGroup::hard) = StageSystem::box_hard_group(2, 1, sys.n, box);
    append_row(sys, ConstraintGroup::probabilistic, 0, {r1(-1.0)}, {r1(1.0)}, 0.25);
    append_row(sys, ConstraintGroup::probabilistic, 1, {r1(-1.0), r1(-1.0)}, {r1(1.0), r1(1.0)},
               0.6);
    if (pen_w > 0.0) {
        append_row(sys, ConstraintGroup::penalized, 1, {r1(1.0), r1(1.0)}, {r1(0.0), r1(0.0)},
                   1.2);
        sys.penalty[1] = v1(pen_w);
    }
    sys.validate();
    return sys;
}

/** Single stage: minimize y subject to P(xi <= y) >= p inside a wide box. */
StageSystem quantile_system(double p) {
    StageSystem sys = empty_system(1, 1, {1});
    sys.h[0] = v1(1.0);
    sys.p = p;
    BoxBounds box;
    box.lower = {v1(-10.0)};
    box.upper = {v1(10.0)};
    sys.g(ConstraintGroup::hard) = StageSystem::box_hard_group(1, 1, sys.n, box);
    append_row(sys, ConstraintGroup::probabilistic, 0, {r1(-1.0)}, {r1(1.0)}, 0.0);
    sys.validate();
    return sys;
}

/** Single stage with a hard row that carries current-stage noise: xi <= y
 *  almost surely plus the tighter probabilistic row xi <= y - 0.1. */
StageSystem robust_single_stage(double p) {
    StageSystem sys = empty_system(1, 1, {1});
    sys.h[0] = v1(1.0);
    sys.p = p;
    sys.wait_and_see = false;
    append_row(sys, ConstraintGroup::hard, 0, {r1(-1.0)}, {r1(1.0)}, 0.0);
    append_row(sys, ConstraintGroup::probabilistic, 0, {r1(-1.0)}, {r1(1.0)}, -0.1);
    sys.validate();
    return sys;
}

/** A flat point with a nonzero gain so every assembled row keeps variance. */
VectorXd two_stage_point(const LdrLayout& L, double gain = 0.35) {
    LinearDecisionRule r = LinearDecisionRule::zeros(L);
    r.f[0](0) = 0.45;
    r.F[1](0, 0) = gain;
    r.f[1](0) = 0.30;
    return r.flatten(L);
}

/** Extends a rule point with slack values for any lifted auxiliaries. */
VectorXd padded_point(const ProblemInstance& inst, const VectorXd& head) {
    VectorXd x = VectorXd::Constant(inst.nlp.n, 0.7);
    x.head(head.size()) = head;
    return x;
}

struct MeanStat {
    double mean = 0.0;
    double sd = 0.0;
};

MeanStat mean_stat(const std::vector<double>& vals) {
    MeanStat s;
    const double n = static_cast<double>(vals.size());
    for (double v : vals) s.mean += v;
    s.mean /= n;
    for (double v : vals) s.sd += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(s.sd / (n - 1.0));
    return s;
}

/** Cost plus weighted penalty excess of explicit stage values along xi. */
double path_cost(const StageSystem& sys, const std::vector<VectorXd>& y,
                 const Eigen::VectorXd& xi) {
    double c = 0.0;
    for (int t = 0; t < sys.T; ++t) c += sys.h[t].dot(y[static_cast<size_t>(t)]);
    const GroupData& pen = sys.g(ConstraintGroup::penalized);
    for (int t = 0; t < sys.T; ++t) {
        if (pen.rows(t) == 0) continue;
        VectorXd v = -pen.b[t];
        for (int tau = 0; tau <= t; ++tau) {
            v += pen.A[t][tau] * y[static_cast<size_t>(tau)];
            v += pen.B[t][tau] * xi.segment(static_cast<Eigen::Index>(sys.M) * tau, sys.M);
        }
        c += sys.penalty[t].dot(v.cwiseMax(0.0));
    }
    return c;
}

std::vector<VectorXd> raw_values(const StageSystem& sys, const LinearDecisionRule& rule,
                                 const Eigen::VectorXd& xi) {
    std::vector<VectorXd> y(static_cast<size_t>(sys.T));
    for (int t = 0; t < sys.T; ++t)
        y[static_cast<size_t>(t)] =
            rule.stage_value(t, xi.head(static_cast<Eigen::Index>(sys.M) * t));
    return y;
}

}  // namespace

TEST_CASE("box support maximum matches vertex enumeration", "[problems]") {
    std::mt19937 gen(91);
    std::uniform_real_distribution<double> U(-2.0, 2.0);
    for (int rep = 0; rep < 40; ++rep) {
        const int d = 1 + static_cast<int>(gen() % 10);
        VectorXd w(d), lo(d), hi(d);
        for (int i = 0; i < d; ++i) {
            w(i) = U(gen);
            const double a = U(gen), b = U(gen);
            lo(i) = std::min(a, b);
            hi(i) = std::max(a, b);
        }
        double best = -kInf;
        for (long mask = 0; mask < (1L << d); ++mask) {
            double s = 0.0;
            for (int i = 0; i < d; ++i) s += w(i) * (((mask >> i) & 1) ? hi(i) : lo(i));
            best = std::max(best, s);
        }
        CAPTURE(rep, d);
        REQUIRE(box_support_max(w, lo, hi) == Catch::Approx(best).margin(1e-12));
    }

    VectorXd w(2), lo(2), hi(2);
    w << 1.0, 0.0;
    lo << 0.0, -kInf;
    hi << 1.0, kInf;
    // zero-weight coordinates keep infinite sides harmless
    REQUIRE(box_support_max(w, lo, hi) == 1.0);
    w << 1.0, -2.0;
    lo << 0.0, 0.0;
    hi << 1.0, 1.0;
    REQUIRE(box_support_max(w, lo, hi) == 1.0);
    lo << 1.0, 0.0;
    hi << 0.0, 1.0;
    REQUIRE_THROWS_AS(box_support_max(w, lo, hi), std::invalid_argument);
}

TEST_CASE("ellipsoid support maximum matches a square-root oracle", "[problems]") {
    // closed form center.w + radius * |shape^(1/2) w| via the symmetric root,
    // plus attainability on sampled boundary points
    std::mt19937 gen(7);
    std::normal_distribution<double> N(0.0, 1.0);
    for (int rep = 0; rep < 20; ++rep) {
        const int d = 1 + static_cast<int>(gen() % 4);
        Eigen::MatrixXd A(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) A(i, j) = N(gen);
        const Eigen::MatrixXd S =
            A * A.transpose() + 0.3 * Eigen::MatrixXd::Identity(d, d);
        VectorXd w(d), c(d);
        for (int i = 0; i < d; ++i) {
            w(i) = N(gen);
            c(i) = N(gen);
        }
        const double radius = 0.3 + std::abs(N(gen));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
        const double want = c.dot(w) + radius * (es.operatorSqrt() * w).norm();
        const double got = ellipsoid_support_max(w, c, S, radius);
        CAPTURE(rep, d);
        REQUIRE(got == Catch::Approx(want).epsilon(1e-10));

        const Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(S).matrixL();
        for (int k = 0; k < 2000; ++k) {
            VectorXd u(d);
            for (int i = 0; i < d; ++i) u(i) = N(gen);
            u /= u.norm();
            REQUIRE(w.dot(c + radius * (L * u)) <= got + 1e-9);
        }
    }

    VectorXd w2(2);
    w2 << 3.0, 4.0;
    REQUIRE(ellipsoid_support_max(w2, VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2), 1.0) ==
            Catch::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("static interior rules collapse the clip partition", "[problems]") {
    const StageSystem sys = two_stage_system(0.8, 0.0);
    const CompactForm cf = two_stage_form();
    const ProblemInstance inst = build_p4(sys, cf);
    // midpoint start: zero gains, offsets strictly inside the box
    const VectorXd x0 = inst.x0;
    const ProbabilityValue total = inst.partition_total(x0);
    REQUIRE(total.value == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(total.error <= 1e-9);

    // with clipping inactive the chance value equals the plain system value
    const LinearDecisionRule rule = LinearDecisionRule::unflatten(x0.head(inst.layout.dim()),
                                                                  inst.layout);
    const AffineSystem a =
        assemble_affine_system(sys, ConstraintGroup::probabilistic, cf, rule);
    const ProbabilityValue direct =
        system_probability(a.G_matrix(), a.g_vector(), cf.Sigma);
    const ProbabilityValue part = inst.probability(x0);
    CAPTURE(direct.value, part.value);
    REQUIRE(std::abs(part.value - direct.value) <= direct.error + part.error + 5e-4);
}

TEST_CASE("clip partition total mass integrates to one", "[problems]") {
    const StageSystem sys = two_stage_system(0.8, 0.0);
    const CompactForm cf = two_stage_form();
    const ProblemInstance inst = build_p4(sys, cf);
    for (double gain : {0.35, -0.6, 1.4}) {
        const VectorXd x = two_stage_point(inst.layout, gain);
        const ProbabilityValue total = inst.partition_total(x);
        CAPTURE(gain, total.value, total.error);
        REQUIRE(total.value == Catch::Approx(1.0).margin(total.error + 2e-3));
    }
}

TEST_CASE("clip partition probability matches a clipped-rule sample average", "[problems]") {
    const StageSystem sys = two_stage_system(0.8, 0.0);
    const CompactForm cf = two_stage_form();
    const ProblemInstance inst = build_p4(sys, cf);
    const auto box = sys.hard_box();
    REQUIRE(box.has_value());

    const int n = 400000;
    const Eigen::MatrixXd eps = testsupport::gaussian_paths(cf.Sigma, n, 5150);
    for (double gain : {0.35, -0.6}) {
        const VectorXd x = two_stage_point(inst.layout, gain);
        const LinearDecisionRule rule =
            LinearDecisionRule::unflatten(x.head(inst.layout.dim()), inst.layout);
        const double saa =
            testsupport::saa_clipped_feasible(sys, cf, rule, box->lower, box->upper, eps);
        const ProbabilityValue pv = inst.probability(x);
        const double sigma3 = 3.0 * std::sqrt(std::max(saa * (1.0 - saa), 1e-6) / n);
        CAPTURE(gain, pv.value, saa, sigma3, pv.error);
        REQUIRE(std::abs(pv.value - saa) <= sigma3 + pv.error + 1e-3);
    }
}

TEST_CASE("clipped-rule objective matches a sample average", "[problems]") {
    const CompactForm cf = two_stage_form();
    const auto box = two_stage_system(0.8, 0.0).hard_box();
    REQUIRE(box.has_value());
    const int n = 300000;
    const Eigen::MatrixXd eps = testsupport::gaussian_paths(cf.Sigma, n, 616);

    // pure linear part first (closed-form clip means), then with penalties
    for (double pen_w : {0.0, 0.4}) {
        const StageSystem sys = two_stage_system(0.8, pen_w);
        const ProblemInstance inst = build_p3(sys, cf);
        const VectorXd x = two_stage_point(inst.layout);
        const LinearDecisionRule rule =
            LinearDecisionRule::unflatten(x.head(inst.layout.dim()), inst.layout);

        std::vector<double> vals(static_cast<size_t>(n));
        for (int k = 0; k < n; ++k) {
            const VectorXd xi = cf.mu_all + cf.theta_all * eps.col(k);
            const auto y = testsupport::clipped_values(sys, rule, xi, box->lower, box->upper);
            vals[static_cast<size_t>(k)] = path_cost(sys, y, xi);
        }
        const MeanStat st = mean_stat(vals);
        // the instance freezes its own penalty sample set, so allow for both
        // the oracle and the frozen-sample standard errors
        const double tol =
            3.0 * st.sd * (1.0 / std::sqrt(static_cast<double>(n)) + 1.0 / std::sqrt(20000.0)) +
            1e-9;
        const double got = inst.nlp.f(x);
        CAPTURE(pen_w, got, st.mean, tol);
        REQUIRE(std::abs(got - st.mean) <= tol);
    }
}

namespace {

void check_grad_fd(const NlpProblem& nlp, const VectorXd& x, double h, double rel, double floor) {
    const VectorXd g = nlp.grad(x);
    for (int i = 0; i < nlp.n; ++i) {
        VectorXd xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        const double fd = (nlp.f(xp) - nlp.f(xm)) / (2.0 * h);
        CAPTURE(i, fd, g(i));
        REQUIRE(std::abs(fd - g(i)) <= rel * std::max({std::abs(fd), std::abs(g(i)), floor}));
    }
}

void check_cjac_fd(const NlpProblem& nlp, const VectorXd& x, int row, double h, double rel,
                   double floor) {
    const Eigen::MatrixXd J = nlp.c_jac(x);
    for (int i = 0; i < nlp.n; ++i) {
        VectorXd xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        const double fd = (nlp.c(xp)(row) - nlp.c(xm)(row)) / (2.0 * h);
        CAPTURE(row, i, fd, J(row, i));
        REQUIRE(std::abs(fd - J(row, i)) <=
                rel * std::max({std::abs(fd), std::abs(J(row, i)), floor}));
    }
}

}  // namespace

TEST_CASE("objective gradients match finite differences", "[problems]") {
    const CompactForm cf = two_stage_form();

    // closed-form objective on the raw rule, smooth at a nonzero gain
    const StageSystem sys_pen = two_stage_system(0.8, 0.4);
    const ProblemInstance i1 = build_p1(sys_pen, cf);
    check_grad_fd(i1.nlp, two_stage_point(i1.layout), 1e-5, 1e-5, 1e-3);

    // clipped objective, no penalties: closed-form clip means
    const StageSystem sys0 = two_stage_system(0.8, 0.0);
    const ProblemInstance i3 = build_p3(sys0, cf);
    check_grad_fd(i3.nlp, two_stage_point(i3.layout), 1e-4, 1e-5, 1e-3);

    // frozen-sample penalties are piecewise linear; kink pollution stays O(h)
    const ProblemInstance i3p = build_p3(sys_pen, cf);
    check_grad_fd(i3p.nlp, two_stage_point(i3p.layout), 1e-4, 5e-3, 1e-2);

    // truncated objective: analytic conditional mean plus frozen penalties
    const TruncationRegion region =
        TruncationRegion::box(Eigen::Vector2d(-0.3, -0.4), Eigen::Vector2d(0.25, 0.35));
    const ProblemInstance it = build_truncated(sys_pen, cf, region);
    check_grad_fd(it.nlp, padded_point(it, two_stage_point(it.layout)), 1e-4, 5e-3, 1e-2);
}

TEST_CASE("chance constraint gradients match finite differences", "[problems]") {
    const CompactForm cf = two_stage_form();
    const StageSystem sys = two_stage_system(0.8, 0.0);

    const ProblemInstance i1 = build_p1(sys, cf);
    check_cjac_fd(i1.nlp, two_stage_point(i1.layout), 0, 1e-3, 1e-2, 1e-4);

    const ProblemInstance i3 = build_p3(sys, cf);
    check_cjac_fd(i3.nlp, two_stage_point(i3.layout), 0, 1e-3, 1e-2, 1e-4);

    const ProblemInstance i4 = build_p4(sys, cf);
    check_cjac_fd(i4.nlp, two_stage_point(i4.layout), 0, 1e-3, 1e-2, 1e-4);

    const TruncationRegion region =
        TruncationRegion::box(Eigen::Vector2d(-0.9, -1.1), Eigen::Vector2d(0.8, 1.0));
    const ProblemInstance it = build_truncated(sys, cf, region);
    check_cjac_fd(it.nlp, padded_point(it, two_stage_point(it.layout)), 0, 1e-3, 1e-2, 1e-4);
}

TEST_CASE("single-stage solve recovers the normal quantile", "[problems]") {
    const CompactForm cf = single_stage_form(0.5, 1.0, 0.25);
    SolveOptions so;
    so.starts = 2;
    so.kkt_tol = 1e-7;
    double prev = -kInf;
    for (double p : {0.5, 0.8, 0.95}) {
        const ProblemInstance inst = build_p1(quantile_system(p), cf);
        const SolveReport rep = solve_problem(inst, so);
        const double want = 0.5 + 0.5 * norm_quantile(p);
        CAPTURE(p, rep.objective, want);
        REQUIRE(rep.converged);
        REQUIRE(rep.accepted);
        REQUIRE(rep.rule.f[0](0) == Catch::Approx(want).margin(1e-5));
        REQUIRE(rep.objective == Catch::Approx(want).margin(1e-5));
        REQUIRE(rep.probability == Catch::Approx(p).margin(1e-6));
        REQUIRE(rep.objective > prev);
        prev = rep.objective;
    }
}

TEST_CASE("box bounds force static rules in the polyhedral reduction", "[problems]") {
    const StageSystem sys = two_stage_system(0.8, 0.3);
    const CompactForm cf = two_stage_form();
    const ProblemInstance inst = build_p1(sys, cf);
    REQUIRE(inst.nlp.E.rows() > 0);
    SolveOptions so;
    so.starts = 2;
    so.kkt_tol = 1e-7;
    so.max_iter = 600;
    const SolveReport rep = solve_problem(inst, so);
    REQUIRE(rep.converged);
    REQUIRE(rep.accepted);
    REQUIRE(rep.rule.F[1].cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("vanishing probability level reduces to a linear program", "[problems]") {
    const StageSystem sys = two_stage_system(0.0, 0.0);
    const CompactForm cf = two_stage_form();
    const ProblemInstance inst = build_p1(sys, cf);

    // without penalties the objective is linear; its gradient is constant
    const VectorXd c = inst.nlp.grad(VectorXd::Zero(inst.nlp.n));
    const auto lp = testsupport::lp_bruteforce(c, inst.nlp.A, inst.nlp.b, inst.nlp.E, inst.nlp.e);
    REQUIRE(lp.feasible);

    SolveOptions so;
    so.starts = 2;
    so.kkt_tol = 1e-8;
    const SolveReport rep = solve_problem(inst, so);
    REQUIRE(rep.converged);
    REQUIRE(rep.accepted);
    const double shift = inst.nlp.f(VectorXd::Zero(inst.nlp.n));
    REQUIRE(rep.solver_objective == Catch::Approx(lp.value + shift).margin(1e-6));
}

TEST_CASE("empty hard boxes are reported, not silently accepted", "[problems]") {
    StageSystem sys = two_stage_system(0.8, 0.0);
    BoxBounds box;
    box.lower = {v1(0.0), v1(0.6)};
    box.upper = {v1(1.0), v1(0.4)};
    sys.g(ConstraintGroup::hard) = StageSystem::box_hard_group(2, 1, sys.n, box);
    sys.validate();
    const CompactForm cf = two_stage_form();

    const ProblemInstance inst = build_p1(sys, cf);
    const SolveReport rep = solve_problem(inst);
    REQUIRE_FALSE(rep.accepted);
    bool flagged = false;
    for (const auto& f : rep.flags) flagged = flagged || f.find("infeasible") != std::string::npos;
    REQUIRE(flagged);

    REQUIRE_THROWS_AS(build_p2(sys, cf), std::invalid_argument);
    REQUIRE_THROWS_AS(build_p3(sys, cf), std::invalid_argument);
    REQUIRE_THROWS_AS(build_p4(sys, cf), std::invalid_argument);
}

TEST_CASE("joint-chance solves report the projected objective", "[problems]") {
    const StageSystem sys = two_stage_system(0.8, 0.3);
    const CompactForm cf = two_stage_form();
    const ProblemInstance i2 = build_p2(sys, cf);
    const ProblemInstance i3 = build_p3(sys, cf);
    const VectorXd x = two_stage_point(i2.layout);

    // same frozen sample set, same clipping: the reported value of the joint
    // solve is exactly the clipped objective
    REQUIRE(i2.report_objective(x) == Catch::Approx(i3.nlp.f(x)).margin(1e-12));

    // the joint chance constraint covers the probabilistic and hard groups
    // on the raw rule
    const LinearDecisionRule rule =
        LinearDecisionRule::unflatten(x.head(i2.layout.dim()), i2.layout);
    const int n = 400000;
    const Eigen::MatrixXd eps = testsupport::gaussian_paths(cf.Sigma, n, 99123);
    long hits = 0;
    for (int k = 0; k < n; ++k) {
        const VectorXd xi = cf.mu_all + cf.theta_all * eps.col(k);
        const auto y = raw_values(sys, rule, xi);
        if (testsupport::group_holds(sys, ConstraintGroup::probabilistic, y, xi) &&
            testsupport::group_holds(sys, ConstraintGroup::hard, y, xi))
            ++hits;
    }
    const double saa = static_cast<double>(hits) / n;
    const ProbabilityValue pv = i2.probability(x);
    const double sigma3 = 3.0 * std::sqrt(std::max(saa * (1.0 - saa), 1e-6) / n);
    CAPTURE(pv.value, saa);
    REQUIRE(std::abs(pv.value - saa) <= sigma3 + pv.error + 1e-3);
}

TEST_CASE("value chain orders the approximating objectives", "[problems]") {
    const StageSystem sys = two_stage_system(0.8, 0.3);
    const CompactForm cf = two_stage_form();
    ProblemOptions po;
    po.prob.mvn.qmc_points = 4096;
    po.penalty_samples = 4000;
    SolveOptions so;
    so.starts = 2;
    so.max_iter = 300;
    so.kkt_tol = 1e-5;

    std::vector<SolveReport> reports;
    reports.push_back(solve_problem(build_p1(sys, cf, po), so));
    reports.push_back(solve_problem(build_p2(sys, cf, po), so));
    reports.push_back(solve_problem(build_p3(sys, cf, po), so));
    reports.push_back(solve_problem(build_p4(sys, cf, po), so));
    for (const auto& rep : reports) {
        CAPTURE(problem_kind_name(rep.kind), rep.objective, rep.probability, rep.converged);
        REQUIRE(rep.accepted);
    }

    const ChainCheck chain = value_chain_check(sys, cf, reports, 0.02);
    INFO(chain.diagnostics);
    REQUIRE(chain.ordering_ok);
    REQUIRE(chain.feasibility_ok);
}

TEST_CASE("whole-space truncation matches the untruncated solve", "[problems]") {
    const CompactForm cf = single_stage_form(0.5, 1.0, 0.25);
    const StageSystem sys = quantile_system(0.8);
    const TruncationRegion whole = TruncationRegion::box(v1(-kInf), v1(kInf));

    SolveOptions so;
    so.starts = 2;
    so.kkt_tol = 1e-7;
    const SolveReport plain = solve_problem(build_p1(sys, cf), so);
    const ProblemInstance ti = build_truncated(sys, cf, whole);
    const SolveReport trunc = solve_problem(ti, so);

    REQUIRE(trunc.accepted);
    REQUIRE(trunc.objective == Catch::Approx(plain.objective).margin(1e-4));
    REQUIRE(trunc.probability == Catch::Approx(plain.probability).margin(5e-3));
    const ProbabilityValue pv = ti.probability(trunc.x);
    REQUIRE(pv.mass == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("truncated hard rows hold at every region point", "[problems]") {
    const CompactForm cf = single_stage_form(0.5, 0.8, 1.0);
    const TruncationRegion region = TruncationRegion::box(v1(-1.0), v1(1.0));
    SolveOptions so;
    so.starts = 2;
    so.kkt_tol = 1e-7;

    // chance level below the robust bound: the hard row binds, y* = 1.3
    {
        const ProblemInstance inst = build_truncated(robust_single_stage(0.9), cf, region);
        REQUIRE(inst.n_aux == 1);
        const SolveReport rep = solve_problem(inst, so);
        REQUIRE(rep.accepted);
        REQUIRE(rep.rule.f[0](0) == Catch::Approx(1.3).margin(1e-5));

        const Eigen::MatrixXd eps = sample_truncated_noise(cf, region, 20000, 3355);
        double worst = -kInf;
        for (int k = 0; k < eps.cols(); ++k) {
            REQUIRE(std::abs(eps(0, k)) <= 1.0);
            worst = std::max(worst, 0.5 + 0.8 * eps(0, k) - rep.rule.f[0](0));
        }
        REQUIRE(worst <= 1e-9);

        const ProbabilityValue pv = inst.probability(rep.x);
        const double mass = norm_cdf(1.0) - norm_cdf(-1.0);
        REQUIRE(pv.mass == Catch::Approx(mass).margin(2e-3));
    }

    // chance level above the robust bound: the conditional quantile decides
    {
        const ProblemInstance inst = build_truncated(robust_single_stage(0.97), cf, region);
        const SolveReport rep = solve_problem(inst, so);
        REQUIRE(rep.accepted);
        const double mass = norm_cdf(1.0) - norm_cdf(-1.0);
        const double z = norm_quantile(0.97 * mass + norm_cdf(-1.0));
        REQUIRE(rep.rule.f[0](0) == Catch::Approx(0.6 + 0.8 * z).margin(2e-3));
        REQUIRE(rep.probability >= 0.97 - rep.prob_error - 1e-6);
    }

    // a current-stage hard noise block over an unbounded region cannot work
    try {
        build_truncated(robust_single_stage(0.9), cf, TruncationRegion::box(v1(-1.0), v1(kInf)));
        FAIL("expected an exception");
    } catch (const std::invalid_argument& ex) {
        REQUIRE(std::string(ex.what()).find("unbounded") != std::string::npos);
    }
}

TEST_CASE("truncated chance value is the conditional probability", "[problems]") {
    const CompactForm cf = single_stage_form(0.5, 0.8, 1.0);
    const StageSystem sys = robust_single_stage(0.9);
    const TruncationRegion region = TruncationRegion::box(v1(-1.0), v1(1.0));
    const ProblemInstance inst = build_truncated(sys, cf, region);

    VectorXd x = VectorXd::Zero(inst.nlp.n);
    x(inst.layout.f_index(0, 0)) = 1.0;
    const ProbabilityValue pv = inst.probability(x);

    // analytic: P(0.8 e <= 0.4 | |e| <= 1)
    const double mass = norm_cdf(1.0) - norm_cdf(-1.0);
    const double want = (norm_cdf(0.5) - norm_cdf(-1.0)) / mass;
    REQUIRE(pv.value == Catch::Approx(want).margin(pv.error + 1e-3));

    // and a rejection sample average agrees
    const Eigen::MatrixXd eps = testsupport::gaussian_paths(cf.Sigma, 400000, 2024);
    long kept = 0, hits = 0;
    for (int k = 0; k < eps.cols(); ++k) {
        if (std::abs(eps(0, k)) > 1.0) continue;
        ++kept;
        if (0.5 + 0.8 * eps(0, k) - 1.0 <= -0.1) ++hits;
    }
    const double saa = static_cast<double>(hits) / static_cast<double>(kept);
    const double sigma3 = 3.0 * std::sqrt(saa * (1.0 - saa) / static_cast<double>(kept));
    REQUIRE(pv.value == Catch::Approx(saa).margin(sigma3 + pv.error + 1e-3));
}

TEST_CASE("truncated objective averages the conditional cost", "[problems]") {
    const StageSystem sys = two_stage_system(0.8, 0.4);
    const TruncationRegion region =
        TruncationRegion::box(Eigen::Vector2d(-0.3, -0.4), Eigen::Vector2d(0.25, 0.35));

    // diagonal covariance: conditional noise mean handled in closed form
    {
        const CompactForm cf = two_stage_form();
        const ProblemInstance inst = build_truncated(sys, cf, region);
        for (const auto& f : inst.flags) REQUIRE(f.find("frozen") == std::string::npos);
        const VectorXd x = two_stage_point(inst.layout);
        const LinearDecisionRule rule =
            LinearDecisionRule::unflatten(x.head(inst.layout.dim()), inst.layout);

        const Eigen::MatrixXd eps = testsupport::gaussian_paths(cf.Sigma, 600000, 31415);
        std::vector<double> vals;
        vals.reserve(500000);
        for (int k = 0; k < eps.cols(); ++k) {
            if (eps(0, k) < -0.3 || eps(0, k) > 0.25) continue;
            if (eps(1, k) < -0.4 || eps(1, k) > 0.35) continue;
            const VectorXd xi = cf.mu_all + cf.theta_all * eps.col(k);
            vals.push_back(path_cost(sys, raw_values(sys, rule, xi), xi));
        }
        const MeanStat st = mean_stat(vals);
        const double tol = 3.0 * st.sd *
                               (1.0 / std::sqrt(static_cast<double>(vals.size())) +
                                1.0 / std::sqrt(20000.0)) +
                           1e-9;
        const double got = inst.nlp.f(x);
        CAPTURE(got, st.mean, vals.size());
        REQUIRE(std::abs(got - st.mean) <= tol);
    }

    // correlated covariance: the conditional mean falls back to the frozen
    // sample set and says so
    {
        const CompactForm cf = two_stage_form(0.03);
        const ProblemInstance inst = build_truncated(sys, cf, region);
        bool flagged = false;
        for (const auto& f : inst.flags)
            flagged = flagged || f.find("frozen sample") != std::string::npos;
        REQUIRE(flagged);
    }
}

TEST_CASE("ellipsoid regions become smooth conic hard rows", "[problems]") {
    const CompactForm cf = single_stage_form(0.5, 0.8, 1.0);
    const TruncationRegion region =
        TruncationRegion::ellipsoid(v1(0.0), Eigen::MatrixXd::Identity(1, 1), 1.0);
    ProblemOptions po;
    po.prob.mvn.mc_points = 60000;
    const ProblemInstance inst = build_truncated(robust_single_stage(0.9), cf, region, po);

    REQUIRE(inst.n_aux == 0);
    REQUIRE(inst.nlp.m == 2);  // chance row plus one conic hard row
    bool fd_flag = false, mc_flag = false;
    for (const auto& f : inst.flags) {
        fd_flag = fd_flag || f.find("finite differences") != std::string::npos;
        mc_flag = mc_flag || f.find("Monte Carlo") != std::string::npos;
    }
    REQUIRE(fd_flag);
    REQUIRE(mc_flag);

    SolveOptions so;
    so.starts = 2;
    so.max_iter = 300;
    so.kkt_tol = 1e-5;
    const SolveReport rep = solve_problem(inst, so);
    REQUIRE(rep.accepted);
    // in one dimension the unit ball is the box [-1, 1]: same bound as there
    REQUIRE(rep.rule.f[0](0) == Catch::Approx(1.3).margin(2e-3));
    const VectorXd cv = inst.nlp.c(rep.x);
    REQUIRE(std::abs(cv(1)) <= 1e-4);  // the conic row binds
}

TEST_CASE("partition cap refuses oversized enumerations", "[problems]") {
    ProblemOptions po;
    po.partition_cap = 1;
    REQUIRE_THROWS_AS(build_p4(two_stage_system(0.8, 0.0), two_stage_form(), po),
                      std::invalid_argument);
}
