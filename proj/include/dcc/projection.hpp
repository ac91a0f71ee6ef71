#pragma once

#include <vector>

#include <Eigen/Dense>

#include "dcc/qp.hpp"
#include "dcc/reformulation.hpp"

namespace dcc {

inline VectorXd clip_to_box(const VectorXd& y, const VectorXd& lo, const VectorXd& up) {
    return y.cwiseMax(lo).cwiseMin(up);
}

struct ProjectOptions {
    bool allow_box_fast_path = true;
};

struct ScenarioProjection {
    std::vector<VectorXd> z;  // per-stage projected decisions
    bool feasible = true;     // false if some stage admits no point given earlier stages
};

/** Stage-wise Euclidean projection of a candidate trajectory onto the hard
 *  group along one noise path. Stage t minimizes |z_t - y_t|^2 subject to the
 *  stage-t hard rows with the already projected z_1..z_{t-1} substituted, so
 *  each decision uses only information available when it is taken. On an
 *  infeasible stage the candidate y_t is kept and the whole result is flagged.
 */
inline ScenarioProjection project_scenario(const StageSystem& sys, const VectorXd& xi_path,
                                           const std::vector<VectorXd>& y,
                                           const ProjectOptions& opts = {}) {
    if (xi_path.size() != static_cast<Eigen::Index>(sys.M) * sys.T)
        throw std::invalid_argument("project_scenario: noise path has wrong length");
    if (static_cast<int>(y.size()) != sys.T)
        throw std::invalid_argument("project_scenario: need one candidate per stage");
    for (int t = 0; t < sys.T; ++t)
        if (y[t].size() != sys.n[t])
            throw std::invalid_argument("project_scenario: candidate dimension mismatch");

    ScenarioProjection out;
    out.z.resize(sys.T);

    if (opts.allow_box_fast_path) {
        if (auto box = sys.hard_box()) {
            bool ordered = true;
            for (int t = 0; t < sys.T && ordered; ++t)
                if ((box->upper[t] - box->lower[t]).minCoeff() < 0.0) ordered = false;
            if (ordered) {
                for (int t = 0; t < sys.T; ++t)
                    out.z[t] = clip_to_box(y[t], box->lower[t], box->upper[t]);
                return out;
            }
            // empty box: fall through so infeasibility is reported uniformly
        }
    }

    const GroupData& gd = sys.g(ConstraintGroup::hard);
    for (int t = 0; t < sys.T; ++t) {
        const int l = gd.rows(t);
        if (l == 0) {
            out.z[t] = y[t];
            continue;
        }
        VectorXd rhs = gd.b[t];
        for (int tau = 0; tau < t; ++tau) rhs -= gd.A[t][tau] * out.z[tau];
        for (int tau = 0; tau <= t; ++tau) rhs -= gd.B[t][tau] * xi_path.segment(sys.M * tau, sys.M);
        const QpResult qr = qp_project(y[t], Eigen::MatrixXd(0, sys.n[t]), VectorXd(0),
                                       gd.A[t][t], rhs);
        if (!qr.feasible) {
            out.feasible = false;
            out.z[t] = y[t];
            continue;
        }
        out.z[t] = qr.x;
    }
    return out;
}

/** Projects every stage value of a decision rule along one noise path. */
inline ScenarioProjection project_rule_on_path(const StageSystem& sys,
                                               const LinearDecisionRule& rule,
                                               const VectorXd& xi_path,
                                               const ProjectOptions& opts = {}) {
    std::vector<VectorXd> y(sys.T);
    for (int t = 0; t < sys.T; ++t) y[t] = rule.stage_value(t, xi_path.head(sys.M * t));
    return project_scenario(sys, xi_path, y, opts);
}

}  // namespace dcc
