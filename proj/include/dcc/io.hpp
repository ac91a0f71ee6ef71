#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcc/problems.hpp"
#include "dcc/reformulation.hpp"
#include "dcc/timeseries.hpp"

namespace dcc {

using nlohmann::json;

/** All decode errors carry the field path that failed, so a malformed file
 *  points at itself. */
inline std::invalid_argument io_error(const std::string& path, const std::string& what) {
    return std::invalid_argument(path + ": " + what);
}

namespace detail {

inline const json& field(const json& j, const char* key, const std::string& path) {
    if (!j.is_object()) throw io_error(path, "expected an object");
    const auto it = j.find(key);
    if (it == j.end()) throw io_error(path + "." + key, "missing field");
    return *it;
}

inline int as_int(const json& j, const std::string& path) {
    if (!j.is_number_integer()) throw io_error(path, "expected an integer");
    return j.get<int>();
}

inline std::uint64_t as_u64(const json& j, const std::string& path) {
    if (!j.is_number_unsigned() && !j.is_number_integer())
        throw io_error(path, "expected a nonnegative integer");
    return j.get<std::uint64_t>();
}

inline bool as_bool(const json& j, const std::string& path) {
    if (!j.is_boolean()) throw io_error(path, "expected a boolean");
    return j.get<bool>();
}

inline std::string as_string(const json& j, const std::string& path) {
    if (!j.is_string()) throw io_error(path, "expected a string");
    return j.get<std::string>();
}

/** Numbers, with the strings "inf" / "+inf" / "-inf" for unbounded limits
 *  (JSON itself has no infinity literal). */
inline double as_real(const json& j, const std::string& path) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "inf" || s == "+inf") return kInf;
        if (s == "-inf") return -kInf;
    }
    throw io_error(path, "expected a number or \"inf\"/\"-inf\"");
}

inline VectorXd as_vector(const json& j, const std::string& path) {
    if (!j.is_array()) throw io_error(path, "expected an array of numbers");
    VectorXd v(j.size());
    for (size_t i = 0; i < j.size(); ++i)
        v(static_cast<Eigen::Index>(i)) = as_real(j[i], path + "[" + std::to_string(i) + "]");
    return v;
}

inline MatrixXd as_matrix(const json& j, const std::string& path) {
    if (!j.is_array()) throw io_error(path, "expected an array of rows");
    if (j.empty()) return MatrixXd(0, 0);
    MatrixXd m;
    for (size_t i = 0; i < j.size(); ++i) {
        const VectorXd row = as_vector(j[i], path + "[" + std::to_string(i) + "]");
        if (i == 0) m.resize(static_cast<Eigen::Index>(j.size()), row.size());
        if (row.size() != m.cols()) throw io_error(path, "rows have unequal lengths");
        m.row(static_cast<Eigen::Index>(i)) = row.transpose();
    }
    return m;
}

/** Infinite entries serialize back as the string form accepted above. */
inline json real_json(double v) {
    if (v == kInf) return json("inf");
    if (v == -kInf) return json("-inf");
    return json(v);
}

inline json vector_json(const VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(real_json(v(i)));
    return a;
}

inline json matrix_json(const MatrixXd& m) {
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(vector_json(m.row(i).transpose()));
    return a;
}

}  // namespace detail

inline json parse_json_text(const std::string& text, const std::string& origin) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& ex) {
        throw io_error(origin, std::string("invalid JSON: ") + ex.what());
    }
}

inline json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error(path, "cannot open file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_json_text(ss.str(), path);
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(path, "cannot open file for writing");
    out << text;
    if (!out) throw io_error(path, "write failed");
}

/** Model document: {T, M, stages:[{components:[{p,q,alpha,beta,mu}]}],
 *  sigma:[matrix per stage], history:{xi, eps}} with history rows per
 *  component and column k-1 holding pre-horizon stage 1-k. */
inline TimeSeriesModel model_from_json(const json& j, const std::string& path = "model") {
    using namespace detail;
    TimeSeriesModel m;
    m.T = as_int(field(j, "T", path), path + ".T");
    m.M = as_int(field(j, "M", path), path + ".M");
    const json& stages = field(j, "stages", path);
    if (!stages.is_array() || static_cast<int>(stages.size()) != m.T)
        throw io_error(path + ".stages", "expected an array of length T");
    for (int t = 0; t < m.T; ++t) {
        const std::string sp = path + ".stages[" + std::to_string(t) + "]";
        const json& comps = field(stages[static_cast<size_t>(t)], "components", sp);
        if (!comps.is_array() || static_cast<int>(comps.size()) != m.M)
            throw io_error(sp + ".components", "expected an array of length M");
        StageSpec st;
        for (int c = 0; c < m.M; ++c) {
            const std::string cp = sp + ".components[" + std::to_string(c) + "]";
            const json& jc = comps[static_cast<size_t>(c)];
            ComponentSpec cs;
            cs.p = as_int(field(jc, "p", cp), cp + ".p");
            cs.q = as_int(field(jc, "q", cp), cp + ".q");
            cs.alpha = as_vector(field(jc, "alpha", cp), cp + ".alpha");
            cs.beta = as_vector(field(jc, "beta", cp), cp + ".beta");
            cs.mu = jc.contains("mu") ? as_real(jc["mu"], cp + ".mu") : 0.0;
            st.comp.push_back(std::move(cs));
        }
        m.stage.push_back(std::move(st));
    }
    const json& sig = field(j, "sigma", path);
    if (!sig.is_array() || static_cast<int>(sig.size()) != m.T)
        throw io_error(path + ".sigma", "expected an array of length T");
    for (int t = 0; t < m.T; ++t)
        m.sigma.push_back(
            as_matrix(sig[static_cast<size_t>(t)], path + ".sigma[" + std::to_string(t) + "]"));
    if (j.contains("history")) {
        const json& h = j["history"];
        m.history.xi = as_matrix(field(h, "xi", path + ".history"), path + ".history.xi");
        m.history.eps = as_matrix(field(h, "eps", path + ".history"), path + ".history.eps");
    } else {
        m.history.xi = MatrixXd::Zero(m.M, 0);
        m.history.eps = MatrixXd::Zero(m.M, 0);
    }
    m.validate();
    return m;
}

inline TimeSeriesModel load_model(const std::string& path) {
    return model_from_json(load_json_file(path), path);
}

namespace detail {

/** One constraint group at one stage: {A:[blocks tau<=t], B:[blocks], b}.
 *  A and B may be omitted (all-zero blocks); a missing group has no rows. */
inline void group_from_json(GroupData& gd, const json& j, int t, int M,
                            const std::vector<int>& n, const std::string& path) {
    const VectorXd b = as_vector(field(j, "b", path), path + ".b");
    const int l = static_cast<int>(b.size());
    gd.b[static_cast<size_t>(t)] = b;
    auto blocks = [&](const char* key, bool is_A) {
        auto& dst = is_A ? gd.A[static_cast<size_t>(t)] : gd.B[static_cast<size_t>(t)];
        for (int tau = 0; tau <= t; ++tau)
            dst[static_cast<size_t>(tau)] =
                MatrixXd::Zero(l, is_A ? n[static_cast<size_t>(tau)] : M);
        if (!j.contains(key)) return;
        const json& a = j[key];
        const std::string ap = path + "." + key;
        if (!a.is_array() || static_cast<int>(a.size()) != t + 1)
            throw io_error(ap, "expected one block per stage tau <= t (" +
                                   std::to_string(t + 1) + " blocks)");
        for (int tau = 0; tau <= t; ++tau) {
            const std::string bp = ap + "[" + std::to_string(tau) + "]";
            MatrixXd blk = as_matrix(a[static_cast<size_t>(tau)], bp);
            const Eigen::Index cols = is_A ? n[static_cast<size_t>(tau)] : M;
            if (blk.rows() == 0) blk = MatrixXd::Zero(l, cols);
            if (blk.rows() != l || blk.cols() != cols)
                throw io_error(bp, "expected a " + std::to_string(l) + " x " +
                                       std::to_string(cols) + " block");
            dst[static_cast<size_t>(tau)] = std::move(blk);
        }
    };
    blocks("A", true);
    blocks("B", false);
}

}  // namespace detail

/** Stage-data document: {T, M, n, p, wait_and_see?, stages:[{h, penalty?,
 *  penalized?, probabilistic?, hard?}], hard_box?:{lower:[...], upper:[...]}}.
 *  hard_box is a shorthand that fills the hard group with the per-stage
 *  band lower <= y_t <= upper. */
inline StageSystem system_from_json(const json& j, const std::string& path = "stage-data") {
    using namespace detail;
    StageSystem sys;
    sys.T = as_int(field(j, "T", path), path + ".T");
    sys.M = as_int(field(j, "M", path), path + ".M");
    const VectorXd nv = as_vector(field(j, "n", path), path + ".n");
    for (Eigen::Index i = 0; i < nv.size(); ++i) sys.n.push_back(static_cast<int>(nv(i)));
    sys.p = as_real(field(j, "p", path), path + ".p");
    if (j.contains("wait_and_see"))
        sys.wait_and_see = as_bool(j["wait_and_see"], path + ".wait_and_see");
    if (sys.T < 1 || static_cast<int>(sys.n.size()) != sys.T)
        throw io_error(path + ".n", "expected one decision count per stage");

    for (int gi = 0; gi < 3; ++gi) {
        GroupData& gd = sys.group[static_cast<size_t>(gi)];
        gd.A.resize(static_cast<size_t>(sys.T));
        gd.B.resize(static_cast<size_t>(sys.T));
        gd.b.resize(static_cast<size_t>(sys.T));
        for (int t = 0; t < sys.T; ++t) {
            gd.A[static_cast<size_t>(t)].resize(static_cast<size_t>(t) + 1);
            gd.B[static_cast<size_t>(t)].resize(static_cast<size_t>(t) + 1);
            for (int tau = 0; tau <= t; ++tau) {
                gd.A[static_cast<size_t>(t)][static_cast<size_t>(tau)] =
                    MatrixXd::Zero(0, sys.n[static_cast<size_t>(tau)]);
                gd.B[static_cast<size_t>(t)][static_cast<size_t>(tau)] = MatrixXd::Zero(0, sys.M);
            }
            gd.b[static_cast<size_t>(t)] = VectorXd(0);
        }
    }

    const json& stages = field(j, "stages", path);
    if (!stages.is_array() || static_cast<int>(stages.size()) != sys.T)
        throw io_error(path + ".stages", "expected an array of length T");
    static const char* group_keys[3] = {"penalized", "probabilistic", "hard"};
    for (int t = 0; t < sys.T; ++t) {
        const std::string sp = path + ".stages[" + std::to_string(t) + "]";
        const json& js = stages[static_cast<size_t>(t)];
        sys.h.push_back(as_vector(field(js, "h", sp), sp + ".h"));
        for (int gi = 0; gi < 3; ++gi)
            if (js.contains(group_keys[gi]))
                group_from_json(sys.group[static_cast<size_t>(gi)], js[group_keys[gi]], t, sys.M,
                                sys.n, sp + "." + group_keys[gi]);
        if (js.contains("penalty"))
            sys.penalty.push_back(as_vector(js["penalty"], sp + ".penalty"));
        else
            sys.penalty.push_back(
                VectorXd::Zero(sys.g(ConstraintGroup::penalized).rows(t)));
    }

    if (j.contains("hard_box")) {
        if (sys.g(ConstraintGroup::hard).total_rows() > 0)
            throw io_error(path + ".hard_box", "hard group rows and hard_box are exclusive");
        const json& hb = j["hard_box"];
        const json& lo = field(hb, "lower", path + ".hard_box");
        const json& hi = field(hb, "upper", path + ".hard_box");
        if (!lo.is_array() || !hi.is_array() || static_cast<int>(lo.size()) != sys.T ||
            static_cast<int>(hi.size()) != sys.T)
            throw io_error(path + ".hard_box", "lower/upper need one array per stage");
        BoxBounds box;
        for (int t = 0; t < sys.T; ++t) {
            box.lower.push_back(as_vector(lo[static_cast<size_t>(t)],
                                          path + ".hard_box.lower[" + std::to_string(t) + "]"));
            box.upper.push_back(as_vector(hi[static_cast<size_t>(t)],
                                          path + ".hard_box.upper[" + std::to_string(t) + "]"));
        }
        sys.g(ConstraintGroup::hard) = StageSystem::box_hard_group(sys.T, sys.M, sys.n, box);
    }
    sys.validate();
    return sys;
}

inline StageSystem load_stage_system(const std::string& path) {
    return system_from_json(load_json_file(path), path);
}

inline TruncationRegion truncation_from_json(const json& j, const std::string& path) {
    using namespace detail;
    const std::string kind = as_string(field(j, "kind", path), path + ".kind");
    if (kind == "none") return TruncationRegion::none();
    if (kind == "box")
        return TruncationRegion::box(as_vector(field(j, "lower", path), path + ".lower"),
                                     as_vector(field(j, "upper", path), path + ".upper"));
    if (kind == "ellipsoid") {
        TruncationRegion r;
        r.kind = TruncationRegion::Kind::ellipsoid;
        r.center = as_vector(field(j, "center", path), path + ".center");
        r.shape = as_matrix(field(j, "shape", path), path + ".shape");
        r.radius = as_real(field(j, "radius", path), path + ".radius");
        return r;
    }
    throw io_error(path + ".kind", "expected \"none\", \"box\" or \"ellipsoid\"");
}

inline ProblemKind kind_from_string(const std::string& s, const std::string& path) {
    if (s == "p1") return ProblemKind::p1;
    if (s == "p2") return ProblemKind::p2;
    if (s == "p3") return ProblemKind::p3;
    if (s == "p4") return ProblemKind::p4;
    if (s == "truncated") return ProblemKind::truncated;
    throw io_error(path, "expected one of p1, p2, p3, p4, truncated");
}

/** Everything one solve needs: data file paths (resolved against the config
 *  file's directory), the formulation kind, and numeric options. */
struct RunConfig {
    std::string model_path;
    std::string stage_data_path;
    ProblemKind kind = ProblemKind::p1;
    std::optional<double> p_override;
    TruncationRegion truncation = TruncationRegion::none();
    ProblemOptions problem;
    SolveOptions solver;
    std::string out_path;
};

inline RunConfig run_config_from_json(const json& j, const std::string& base_dir,
                                      const std::string& path = "config") {
    using namespace detail;
    RunConfig cfg;
    auto resolve = [&base_dir](const std::string& p) {
        std::filesystem::path fp(p);
        if (fp.is_absolute() || base_dir.empty()) return p;
        return (std::filesystem::path(base_dir) / fp).string();
    };
    cfg.model_path = resolve(as_string(field(j, "model", path), path + ".model"));
    cfg.stage_data_path = resolve(as_string(field(j, "stage_data", path), path + ".stage_data"));
    cfg.kind = kind_from_string(as_string(field(j, "kind", path), path + ".kind"), path + ".kind");
    if (j.contains("p")) cfg.p_override = as_real(j["p"], path + ".p");
    if (j.contains("truncation"))
        cfg.truncation = truncation_from_json(j["truncation"], path + ".truncation");
    if (j.contains("qmc_points"))
        cfg.problem.prob.mvn.qmc_points = as_int(j["qmc_points"], path + ".qmc_points");
    if (j.contains("penalty_samples"))
        cfg.problem.penalty_samples = as_int(j["penalty_samples"], path + ".penalty_samples");
    if (j.contains("sample_seed"))
        cfg.problem.sample_seed = as_u64(j["sample_seed"], path + ".sample_seed");
    if (j.contains("partition_cap"))
        cfg.problem.partition_cap = as_int(j["partition_cap"], path + ".partition_cap");
    if (j.contains("solver")) {
        const json& s = j["solver"];
        const std::string sp = path + ".solver";
        if (s.contains("starts")) cfg.solver.starts = as_int(s["starts"], sp + ".starts");
        if (s.contains("max_iter")) cfg.solver.max_iter = as_int(s["max_iter"], sp + ".max_iter");
        if (s.contains("kkt_tol")) cfg.solver.kkt_tol = as_real(s["kkt_tol"], sp + ".kkt_tol");
        if (s.contains("seed")) cfg.solver.seed = as_u64(s["seed"], sp + ".seed");
        if (s.contains("start_spread"))
            cfg.solver.start_spread = as_real(s["start_spread"], sp + ".start_spread");
    }
    if (j.contains("out")) cfg.out_path = resolve(as_string(j["out"], path + ".out"));
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    const std::string dir = std::filesystem::path(path).parent_path().string();
    return run_config_from_json(load_json_file(path), dir, path);
}

inline json rule_json(const LinearDecisionRule& rule) {
    json F = json::array(), f = json::array();
    for (size_t t = 0; t < rule.f.size(); ++t) {
        F.push_back(detail::matrix_json(rule.F[t]));
        f.push_back(detail::vector_json(rule.f[t]));
    }
    return json{{"F", F}, {"f", f}};
}

/** Policy document {F:[matrix per stage], f:[vector per stage]}; the
 *  stage-1 gain block may be an empty array. */
inline LinearDecisionRule rule_from_json(const json& j, const LdrLayout& L,
                                         const std::string& path = "policy") {
    using namespace detail;
    LinearDecisionRule rule = LinearDecisionRule::zeros(L);
    const json& F = field(j, "F", path);
    const json& f = field(j, "f", path);
    if (!F.is_array() || static_cast<int>(F.size()) != L.T)
        throw io_error(path + ".F", "expected one gain block per stage");
    if (!f.is_array() || static_cast<int>(f.size()) != L.T)
        throw io_error(path + ".f", "expected one offset per stage");
    for (int t = 0; t < L.T; ++t) {
        const std::string fp = path + ".F[" + std::to_string(t) + "]";
        MatrixXd Ft = as_matrix(F[static_cast<size_t>(t)], fp);
        if (Ft.size() == 0) Ft = MatrixXd::Zero(L.n[static_cast<size_t>(t)], L.M * t);
        if (Ft.rows() != L.n[static_cast<size_t>(t)] || Ft.cols() != L.M * t)
            throw io_error(fp, "expected a " + std::to_string(L.n[static_cast<size_t>(t)]) +
                                   " x " + std::to_string(L.M * t) + " gain block");
        rule.F[static_cast<size_t>(t)] = std::move(Ft);
        const VectorXd ft =
            as_vector(f[static_cast<size_t>(t)], path + ".f[" + std::to_string(t) + "]");
        if (ft.size() != L.n[static_cast<size_t>(t)])
            throw io_error(path + ".f[" + std::to_string(t) + "]", "offset length mismatch");
        rule.f[static_cast<size_t>(t)] = ft;
    }
    return rule;
}

inline json decomposition_json(const Decomposition& D) {
    using namespace detail;
    json stages = json::array();
    for (int t = 0; t < D.T; ++t) {
        json comps = json::array();
        for (int m = 0; m < D.M; ++m) {
            json c;
            c["c"] = D.c[static_cast<size_t>(t)](m);
            c["r"] = D.r[static_cast<size_t>(t)][static_cast<size_t>(m)];
            c["s"] = D.s[static_cast<size_t>(t)][static_cast<size_t>(m)];
            c["gamma"] = vector_json(D.gamma[static_cast<size_t>(t)][static_cast<size_t>(m)]);
            c["delta"] = vector_json(D.delta[static_cast<size_t>(t)][static_cast<size_t>(m)]);
            c["theta"] = vector_json(D.theta[static_cast<size_t>(t)].row(m).transpose());
            comps.push_back(std::move(c));
        }
        stages.push_back(json{{"components", std::move(comps)}});
    }
    return json{{"T", D.T}, {"M", D.M}, {"stages", std::move(stages)}};
}

inline json compact_form_json(const CompactForm& cf) {
    using namespace detail;
    json mu = json::array(), theta = json::array();
    for (int t = 0; t < cf.T; ++t) {
        mu.push_back(vector_json(cf.mu[static_cast<size_t>(t)]));
        theta.push_back(matrix_json(cf.theta[static_cast<size_t>(t)]));
    }
    return json{{"mu", std::move(mu)}, {"theta", std::move(theta)}};
}

/** Serialized solve outcome. Wall time is deliberately absent so identical
 *  configs and seeds reproduce reports byte for byte. */
inline json report_json(const SolveReport& rep) {
    json j;
    j["kind"] = problem_kind_name(rep.kind);
    j["objective"] = rep.objective;
    j["solver_objective"] = rep.solver_objective;
    j["probability"] = rep.probability;
    j["probability_error"] = rep.prob_error;
    j["stationarity"] = rep.stationarity;
    j["violation"] = rep.violation;
    j["complementarity"] = rep.complementarity;
    j["iterations"] = rep.iterations;
    j["start_index"] = rep.start_index;
    j["seed"] = rep.seed;
    j["converged"] = rep.converged;
    j["accepted"] = rep.accepted;
    j["rule"] = rule_json(rep.rule);
    j["flags"] = rep.flags;
    return j;
}

inline json simulation_json(const SimulationResult& sim, std::uint64_t seed) {
    using namespace detail;
    return json{{"seed", seed},
                {"paths", static_cast<int>(sim.xi.rows())},
                {"xi", matrix_json(sim.xi)},
                {"eps", matrix_json(sim.eps)}};
}

}  // namespace dcc
