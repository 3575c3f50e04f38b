#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mixinf/covariance.hpp"
#include "mixinf/errors.hpp"
#include "mixinf/estimation.hpp"
#include "mixinf/inference.hpp"
#include "mixinf/io.hpp"
#include "mixinf/lmm.hpp"
#include "mixinf/prediction.hpp"
#include "mixinf/simulation.hpp"

namespace mixinf::cli {

using io::json;
using io::InputError;

enum ExitCode : int { Ok = 0, Validation = 2, Numeric = 3, NothingToDo = 4 };

/// Raised when a command has nothing to act on (e.g. projecting a non-rejected test).
class NothingToDoError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TestConfig {
    std::optional<MatrixXd> rows;        // explicit L
    std::string builder = "identity";    // identity | within-subset-contrasts
    std::vector<std::string> subset;     // labels for the builder
    std::optional<VectorXd> a;           // defaults to zero
};

struct SimulateConfig {
    std::string kind = "coverage";  // coverage | clusterwise | power_linear | power_tukey | marginal_table
    SimConfig base;
    std::vector<double> grid;
    std::vector<SimConfig> cells;   // marginal_table rows (and optional coverage grid)
};

struct RunConfig {
    std::string model = "ner";
    EstimationMethod estimator = EstimationMethod::Reml;
    std::optional<VectorXd> delta;
    double alpha = 0.05;
    Law law = Law::Conditional;
    bool intercept = true;
    std::optional<TestConfig> test;
    std::optional<std::vector<std::string>> tukey_subset;
    std::vector<std::string> designated;
    std::optional<std::uint64_t> seed;
    std::optional<SimulateConfig> simulate;
};

namespace detail {

inline std::vector<std::string> string_list(const json& j, const std::string& what) {
    if (!j.is_array()) throw InputError(what + ": expected a list of cluster labels");
    std::vector<std::string> out;
    for (const auto& e : j) {
        if (e.is_string()) {
            out.push_back(e.get<std::string>());
        } else if (e.is_number_integer()) {
            out.push_back(std::to_string(e.get<long long>()));
        } else {
            throw InputError(what + ": labels must be strings");
        }
    }
    return out;
}

inline double number(const json& j, const std::string& what) {
    if (!j.is_number()) throw InputError(what + ": expected a number");
    return j.get<double>();
}

inline long long integer(const json& j, const std::string& what) {
    if (!j.is_number_integer()) throw InputError(what + ": expected an integer");
    return j.get<long long>();
}

inline EstimationMethod parse_estimator(const json& j, const std::string& what) {
    if (!j.is_string()) throw InputError(what + ": expected a string");
    const std::string s = j.get<std::string>();
    if (s == "reml") return EstimationMethod::Reml;
    if (s == "henderson3") return EstimationMethod::Henderson3;
    if (s == "known") return EstimationMethod::Known;
    throw InputError(what + ": unknown estimator '" + s + "' (reml, henderson3, known)");
}

inline Law parse_law(const json& j, const std::string& what) {
    if (!j.is_string()) throw InputError(what + ": expected a string");
    const std::string s = j.get<std::string>();
    if (s == "marginal") return Law::Marginal;
    if (s == "conditional") return Law::Conditional;
    throw InputError(what + ": unknown law '" + s + "' (marginal, conditional)");
}

inline void apply_cell(const json& j, SimConfig& c, const std::string& where) {
    io::reject_unknown_keys(j, {"m", "n_i", "sigma_v2", "sigma_e2"}, where);
    if (j.contains("m")) c.m = static_cast<Index>(integer(j["m"], where + ".m"));
    if (j.contains("sigma_v2")) c.sigma_v2 = number(j["sigma_v2"], where + ".sigma_v2");
    if (j.contains("sigma_e2")) c.sigma_e2 = number(j["sigma_e2"], where + ".sigma_e2");
    if (j.contains("n_i")) {
        const json& n = j["n_i"];
        if (n.is_number_integer()) {
            c.n_i = SimConfig::balanced(c.m, static_cast<Index>(n.get<long long>()));
        } else if (n.is_array()) {
            c.n_i.clear();
            for (const auto& e : n) c.n_i.push_back(static_cast<Index>(integer(e, where + ".n_i")));
        } else {
            throw InputError(where + ".n_i: expected an integer or a list of integers");
        }
    } else if (static_cast<Index>(c.n_i.size()) != c.m) {
        const Index n = c.n_i.empty() ? 5 : c.n_i.front();
        c.n_i = SimConfig::balanced(c.m, n);
    }
    if (c.m < 2) throw InputError(where + ".m must be >= 2");
    if (static_cast<Index>(c.n_i.size()) != c.m) throw InputError(where + ".n_i must have m entries");
}

inline SimulateConfig parse_simulate(const json& j) {
    io::reject_unknown_keys(j,
                            {"kind", "m", "n_i", "sigma_v2", "sigma_e2", "reps", "law", "estimator", "oracle_lambda",
                             "grid", "beta_range", "pilot_reps", "cells"},
                            "simulate");
    SimulateConfig s;
    if (j.contains("kind")) {
        if (!j["kind"].is_string()) throw InputError("simulate.kind: expected a string");
        s.kind = j["kind"].get<std::string>();
        static const std::vector<std::string> kinds = {"coverage", "clusterwise", "power_linear", "power_tukey",
                                                       "marginal_table"};
        if (std::find(kinds.begin(), kinds.end(), s.kind) == kinds.end())
            throw InputError("simulate.kind: unknown kind '" + s.kind + "'");
    }
    SimConfig& c = s.base;
    c.n_i = SimConfig::balanced(c.m, 5);
    json cell = json::object();
    for (const char* k : {"m", "n_i", "sigma_v2", "sigma_e2"})
        if (j.contains(k)) cell[k] = j[k];
    apply_cell(cell, c, "simulate");
    if (j.contains("reps")) c.reps = static_cast<int>(integer(j["reps"], "simulate.reps"));
    if (j.contains("law")) c.law = parse_law(j["law"], "simulate.law");
    if (j.contains("estimator")) {
        c.estimator = parse_estimator(j["estimator"], "simulate.estimator");
        if (c.estimator == EstimationMethod::Henderson3)
            throw InputError("simulate.estimator: henderson3 is unavailable for the intercept-only design");
    }
    if (j.contains("oracle_lambda")) {
        if (!j["oracle_lambda"].is_boolean()) throw InputError("simulate.oracle_lambda: expected a boolean");
        c.oracle_lambda = j["oracle_lambda"].get<bool>();
    }
    if (j.contains("pilot_reps")) c.pilot_reps = static_cast<int>(integer(j["pilot_reps"], "simulate.pilot_reps"));
    if (j.contains("beta_range")) {
        const VectorXd br = io::vector_from_json(j["beta_range"], "simulate.beta_range");
        if (br.size() != 2) throw InputError("simulate.beta_range: expected [low, high]");
        c.beta_low = br(0);
        c.beta_high = br(1);
    }
    if (j.contains("grid")) {
        const VectorXd g = io::vector_from_json(j["grid"], "simulate.grid");
        s.grid.assign(g.data(), g.data() + g.size());
    }
    if (j.contains("cells")) {
        if (!j["cells"].is_array() || j["cells"].empty()) throw InputError("simulate.cells: expected a non-empty list");
        for (std::size_t k = 0; k < j["cells"].size(); ++k) {
            SimConfig cc = c;
            apply_cell(j["cells"][k], cc, "simulate.cells[" + std::to_string(k) + "]");
            s.cells.push_back(cc);
        }
    }
    if ((s.kind == "power_linear" || s.kind == "power_tukey") && s.grid.empty())
        s.grid = {0.0, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0};
    return s;
}

inline TestConfig parse_test(const json& j) {
    io::reject_unknown_keys(j, {"L", "a", "subset"}, "test");
    TestConfig t;
    if (j.contains("L")) {
        if (j["L"].is_string()) {
            t.builder = j["L"].get<std::string>();
            if (t.builder != "identity" && t.builder != "within-subset-contrasts")
                throw InputError("test.L: unknown builder '" + t.builder + "'");
        } else {
            t.rows = io::matrix_from_json(j["L"], "test.L");
            t.builder = "rows";
        }
    }
    if (j.contains("subset")) t.subset = string_list(j["subset"], "test.subset");
    if (t.builder == "within-subset-contrasts" && t.subset.size() < 2)
        throw InputError("test.subset: the within-subset-contrasts builder needs at least two clusters");
    if (j.contains("a")) t.a = io::vector_from_json(j["a"], "test.a");
    return t;
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    const json j = io::parse_json(text, "config");
    io::reject_unknown_keys(j,
                            {"model", "estimator", "delta", "alpha", "law", "targets", "intercept", "test", "tukey",
                             "project", "seed", "simulate"},
                            "config");
    RunConfig c;
    if (j.contains("model")) {
        if (j["model"] != "ner") throw InputError("config.model: only \"ner\" is supported");
    }
    if (j.contains("targets")) {
        if (j["targets"] != "cluster-mean") throw InputError("config.targets: only \"cluster-mean\" is supported");
    }
    if (j.contains("estimator")) c.estimator = detail::parse_estimator(j["estimator"], "config.estimator");
    if (j.contains("delta")) {
        c.delta = io::vector_from_json(j["delta"], "config.delta");
        if (c.delta->size() != 2) throw InputError("config.delta: expected [sigma_v2, sigma_e2]");
    }
    if (c.estimator == EstimationMethod::Known && !c.delta)
        throw InputError("config.delta is required when estimator is \"known\"");
    if (j.contains("alpha")) c.alpha = detail::number(j["alpha"], "config.alpha");
    if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw InputError("config.alpha must lie in (0,1)");
    if (j.contains("law")) c.law = detail::parse_law(j["law"], "config.law");
    if (j.contains("intercept")) {
        if (!j["intercept"].is_boolean()) throw InputError("config.intercept: expected a boolean");
        c.intercept = j["intercept"].get<bool>();
    }
    if (j.contains("test")) c.test = detail::parse_test(j["test"]);
    if (j.contains("tukey")) {
        io::reject_unknown_keys(j["tukey"], {"subset"}, "tukey");
        if (!j["tukey"].contains("subset")) throw InputError("tukey.subset is required");
        c.tukey_subset = detail::string_list(j["tukey"]["subset"], "tukey.subset");
    }
    if (j.contains("project")) {
        io::reject_unknown_keys(j["project"], {"designated"}, "project");
        if (j["project"].contains("designated"))
            c.designated = detail::string_list(j["project"]["designated"], "project.designated");
    }
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned()) throw InputError("config.seed: expected a non-negative integer");
        c.seed = j["seed"].get<std::uint64_t>();
    }
    if (j.contains("simulate")) c.simulate = detail::parse_simulate(j["simulate"]);
    return c;
}

// ---------------------------------------------------------------------------
// Fitting shared by the data commands
// ---------------------------------------------------------------------------

struct FittedModel {
    NerModel model;
    VarianceFit fit;
    ModelState state;
    VectorXd mu_hat;

    const LmmDataset& data() const { return model.data; }
};

inline NerModel load_model(const std::string& csv_text, const RunConfig& cfg) {
    NerSpec spec = io::read_input_table(csv_text);
    if (!cfg.intercept) {
        spec.x_names.erase(spec.x_names.begin());
        if (spec.x_names.empty()) throw InputError("config.intercept=false needs at least one covariate column");
        for (auto& r : spec.rows) r.x = VectorXd(r.x.tail(r.x.size() - 1));
    }
    NerModel m = build_ner(spec);
    return m;
}

inline FittedModel fit_model(const std::string& csv_text, const RunConfig& cfg, bool second_derivatives) {
    FittedModel f{load_model(csv_text, cfg), {}, {}, {}};
    const LmmDataset& d = f.model.data;
    switch (cfg.estimator) {
        case EstimationMethod::Reml: f.fit = fit_reml(d, *f.model.structure); break;
        case EstimationMethod::Henderson3: f.fit = fit_henderson3_ner(d); break;
        case EstimationMethod::Known: f.fit = known_delta_fit(d, *f.model.structure, *cfg.delta); break;
    }
    f.state = make_state(d, *f.model.structure, f.model.targets, f.fit.delta_hat, second_derivatives);
    f.mu_hat = blup_values(d, f.state.blup, f.model.targets, f.fit.beta_hat);
    return f;
}

inline std::vector<Index> resolve_labels(const LmmDataset& d, const std::vector<std::string>& labels,
                                         const std::string& what) {
    std::vector<Index> out;
    for (const auto& l : labels) {
        Index found = -1;
        for (Index i = 0; i < d.m(); ++i)
            if (d.block(i).id == l) found = i;
        if (found < 0) throw InputError(what + ": unknown cluster '" + l + "'");
        if (std::find(out.begin(), out.end(), found) != out.end())
            throw InputError(what + ": cluster '" + l + "' listed twice");
        out.push_back(found);
    }
    return out;
}

inline json clusters_json(const LmmDataset& d) {
    json a = json::array();
    for (Index i = 0; i < d.m(); ++i) a.push_back({{"index", i}, {"id", d.block(i).id}, {"n", d.block(i).size()}});
    return a;
}

inline LinearHypothesis build_hypothesis(const LmmDataset& d, const TestConfig& t) {
    LinearHypothesis h;
    const Index m = d.m();
    if (t.builder == "rows") {
        h.L = *t.rows;
    } else if (t.builder == "within-subset-contrasts") {
        h.L = within_subset_contrasts(m, resolve_labels(d, t.subset, "test.subset"));
    } else {
        h.L = MatrixXd::Identity(m, m);
    }
    if (h.L.cols() != m)
        throw InputError("test.L: rows must have m = " + std::to_string(m) + " entries, got " +
                         std::to_string(h.L.cols()));
    h.a = t.a ? *t.a : VectorXd::Zero(m);
    if (h.a.size() != m) throw InputError("test.a: expected m = " + std::to_string(m) + " entries");
    return h;
}

inline json test_json(const EllipsoidTest& t) {
    return {{"law", law_name(t.law)}, {"statistic", t.statistic}, {"df", t.df}, {"noncentrality", t.noncentrality},
            {"threshold", t.threshold}, {"p_value", t.p_value}, {"reject", t.reject}};
}

inline json fit_json(const FittedModel& f) {
    const LmmDataset& d = f.data();
    json clusters = clusters_json(d);
    for (Index i = 0; i < d.m(); ++i)
        clusters[static_cast<std::size_t>(i)]["icc"] = icc(f.fit.delta_hat, d.block(i).size());
    json boundary = json::array();
    for (bool b : f.fit.boundary_flags) boundary.push_back(b);
    json names = json::array();
    for (Index e = 0; e < 2; ++e) names.push_back(f.model.structure->component_name(e));
    return {{"estimator", method_name(f.fit.method)},
            {"x_names", d.x_names()},
            {"components", names},
            {"delta_hat", io::to_json(f.fit.delta_hat)},
            {"beta_hat", io::to_json(f.fit.beta_hat)},
            {"vbar", io::to_json(f.fit.vbar)},
            {"converged", f.fit.converged},
            {"iterations", f.fit.iterations},
            {"boundary", boundary},
            {"singular_information", f.fit.singular_information},
            {"warnings", f.fit.warnings},
            {"clusters", clusters}};
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct CommandOutput {
    int exit_code = Ok;
    json report;
    std::string text;                          // human-readable summary
    std::map<std::string, std::string> files;  // file name -> contents
};

inline CommandOutput cmd_fit(const std::string& csv_text, const RunConfig& cfg) {
    const FittedModel f = fit_model(csv_text, cfg, false);
    CommandOutput out;
    out.report = fit_json(f);
    out.report["command"] = "fit";
    const LmmDataset& d = f.data();
    const BlockSystem& sys = f.state.sys;
    bool pd = true;
    for (Index i = 0; i < d.m(); ++i)
        pd = pd && Eigen::LLT<MatrixXd>(sys.R[static_cast<std::size_t>(i)]).info() == Eigen::Success;
    pd = pd && f.fit.delta_hat(0) >= 0.0;
    // Predicted random effects stand in for v in the C1 diagnostic.
    VectorXd v_hat(d.m());
    for (Index i = 0; i < d.m(); ++i) {
        const auto& b = d.block(i);
        v_hat(i) = f.fit.delta_hat(0) *
                   (sys.Vinv[static_cast<std::size_t>(i)] * (b.y - b.X * f.fit.beta_hat)).sum();
    }
    const TukeyConditionReport dr =
        check_tukey_conditions(d, *f.model.structure, f.model.targets, f.fit.delta_hat);
    out.report["diagnostics"] = {
        {"B1_finite", true},
        {"B1_positive_definite", pd},
        {"B4_linear_in_delta", f.model.structure->linear_in_delta()},
        {"C1_predicted_effects", c1_statistic(v_hat)},
        {"D_max_l_deviation", dr.max_l_deviation},
        {"D_max_h_deviation", dr.max_h_deviation},
        {"D_max_precision_deviation", dr.max_precision_deviation},
        {"D_passed", dr.passed}};
    std::ostringstream t;
    t << "estimator " << method_name(f.fit.method) << (f.fit.converged ? " (converged)" : " (NOT converged)") << "\n";
    t << "sigma_v2 = " << f.fit.delta_hat(0) << ", sigma_e2 = " << f.fit.delta_hat(1) << "\n";
    for (Index k = 0; k < d.p(); ++k) t << "beta[" << d.x_names()[static_cast<std::size_t>(k)] << "] = " << f.fit.beta_hat(k) << "\n";
    out.text = t.str();
    return out;
}

inline CommandOutput cmd_predict(const std::string& csv_text, const RunConfig& cfg) {
    const FittedModel f = fit_model(csv_text, cfg, cfg.estimator != EstimationMethod::Known);
    const LmmDataset& d = f.data();
    const CovEstimate sm = sigma_marginal(d, f.state, f.model.targets, f.fit);
    const CovEstimate sc = sigma_conditional(d, *f.model.structure, f.model.targets, f.fit, f.state);
    CommandOutput out;
    out.report = fit_json(f);
    out.report["command"] = "predict";
    out.report["kind"] = cfg.estimator == EstimationMethod::Known ? "blup" : "eblup";
    json rows = json::array();
    std::ostringstream t;
    t << "cluster,mu_hat,se_marginal,se_conditional\n";
    for (Index i = 0; i < d.m(); ++i) {
        const double sem = std::sqrt(sm.sigma(i, i)), sec = std::sqrt(sc.sigma(i, i));
        rows.push_back({{"index", i}, {"id", d.block(i).id}, {"mu_hat", f.mu_hat(i)}, {"se_marginal", sem},
                        {"se_conditional", sec}});
        t << io::csv_escape(d.block(i).id) << "," << io::format_double(f.mu_hat(i)) << "," << io::format_double(sem)
          << "," << io::format_double(sec) << "\n";
    }
    out.report["predictions"] = rows;
    out.report["lambda_hat"] = *sc.lambda_hat;
    out.text = t.str();
    out.files["predictions.csv"] = t.str();
    return out;
}

/// Both ellipsoid tests of H0: L(mu - a) = 0, plus the pieces the projection needs.
struct TestBundle {
    FittedModel fitted;
    LinearHypothesis hyp;
    CovEstimate marginal, conditional;
    NoncentralityInputs inputs;
    EllipsoidTest marginal_test, conditional_test;
};

inline TestBundle run_tests(const std::string& csv_text, const RunConfig& cfg) {
    if (!cfg.test) throw InputError("config.test is required");
    TestBundle b{fit_model(csv_text, cfg, cfg.estimator != EstimationMethod::Known), {}, {}, {}, {}, {}, {}};
    const LmmDataset& d = b.fitted.data();
    b.hyp = build_hypothesis(d, *cfg.test);
    try {
        b.hyp.validate(d.m());
    } catch (const RankError& e) {
        throw InputError(std::string("test.L: ") + e.what());
    }
    b.marginal = sigma_marginal(d, b.fitted.state, b.fitted.model.targets, b.fitted.fit);
    const AMatrix a = a_matrix(d, b.fitted.state, b.fitted.model.targets);
    b.conditional =
        sigma_conditional(d, *b.fitted.model.structure, b.fitted.model.targets, b.fitted.fit, b.fitted.state, nullptr, &a);
    b.inputs = noncentrality_inputs(a, d, b.fitted.state.sys, d.y(), b.fitted.fit.beta_hat);
    b.marginal_test = test_linear(b.hyp, b.fitted.mu_hat, b.marginal, cfg.alpha);
    b.conditional_test = test_linear(b.hyp, b.fitted.mu_hat, b.conditional, cfg.alpha, &b.inputs);
    return b;
}

inline CommandOutput cmd_test(const std::string& csv_text, const RunConfig& cfg) {
    const TestBundle b = run_tests(csv_text, cfg);
    CommandOutput out;
    out.report = {{"command", "test"},
                  {"alpha", cfg.alpha},
                  {"rows", b.hyp.u()},
                  {"mu_hat", io::to_json(b.fitted.mu_hat)},
                  {"clusters", clusters_json(b.fitted.data())},
                  {"estimator", method_name(b.fitted.fit.method)},
                  {"marginal", test_json(b.marginal_test)},
                  {"conditional", test_json(b.conditional_test)}};
    std::ostringstream t;
    t << "set          statistic     df  lambda_L      threshold     p_value\n";
    for (const EllipsoidTest* e : {&b.marginal_test, &b.conditional_test}) {
        t << std::left << std::setw(12) << law_name(e->law) << " " << std::setw(13) << e->statistic << " "
          << std::setw(3) << e->df << " " << std::setw(13) << e->noncentrality << " " << std::setw(13) << e->threshold
          << " " << e->p_value << (e->reject ? "  reject" : "") << "\n";
    }
    out.text = t.str();
    return out;
}

inline CommandOutput cmd_tukey(const std::string& csv_text, const RunConfig& cfg) {
    if (!cfg.tukey_subset) throw InputError("config.tukey.subset is required");
    if (cfg.tukey_subset->size() < 2) throw InputError("tukey.subset: needs at least two clusters");
    const bool conditional = cfg.law == Law::Conditional;
    const FittedModel f = fit_model(csv_text, cfg, conditional && cfg.estimator != EstimationMethod::Known);
    const LmmDataset& d = f.data();
    const std::vector<Index> subset = resolve_labels(d, *cfg.tukey_subset, "tukey.subset");
    const CovEstimate cov = conditional
                                ? sigma_conditional(d, *f.model.structure, f.model.targets, f.fit, f.state)
                                : sigma_marginal(d, f.state, f.model.targets, f.fit);
    TukeyResult res = tukey_all_pairs(f.mu_hat, cov, subset, cfg.alpha);
    std::stable_sort(res.contrasts.begin(), res.contrasts.end(), [](const TukeyContrast& x, const TukeyContrast& y) {
        if (x.statistic != y.statistic) return x.statistic > y.statistic;
        if (x.i != y.i) return x.i < y.i;
        return x.j < y.j;
    });
    TukeyConditionReport dr;
    dr.tolerance = 1e-6;
    for (std::size_t a = 0; a < subset.size(); ++a) {
        for (std::size_t b = a + 1; b < subset.size(); ++b) {
            const auto i = static_cast<std::size_t>(subset[a]), j = static_cast<std::size_t>(subset[b]);
            const VectorXd oi = VectorXd::Ones(f.state.sys.Vinv[i].rows()), oj = VectorXd::Ones(f.state.sys.Vinv[j].rows());
            dr.max_l_deviation = std::max(dr.max_l_deviation, (f.model.targets.l[i] - f.model.targets.l[j]).norm());
            dr.max_h_deviation = std::max(dr.max_h_deviation, (f.model.targets.h[i] - f.model.targets.h[j]).norm());
            dr.max_precision_deviation = std::max(
                dr.max_precision_deviation, std::abs(oi.dot(f.state.sys.Vinv[i] * oi) - oj.dot(f.state.sys.Vinv[j] * oj)));
        }
    }
    dr.passed = dr.max_l_deviation <= dr.tolerance && dr.max_h_deviation <= dr.tolerance &&
                dr.max_precision_deviation <= dr.tolerance;
    std::vector<std::string> warnings = res.warnings;
    if (!dr.passed)
        warnings.push_back("conditions D1/D2 are not met within tolerance on the subset (max deviations: l " +
                           std::to_string(dr.max_l_deviation) + ", precision " +
                           std::to_string(dr.max_precision_deviation) + ")");
    json rows = json::array();
    std::ostringstream t;
    t << "i,j,id_i,id_j,difference,c_plus,statistic,p_value,reject\n";
    for (const auto& c : res.contrasts) {
        rows.push_back({{"i", c.i}, {"j", c.j}, {"id_i", d.block(c.i).id}, {"id_j", d.block(c.j).id},
                        {"difference", c.difference}, {"c_plus", c.c_plus}, {"statistic", c.statistic},
                        {"p_value", c.p_value}, {"reject", c.reject}});
        t << c.i << "," << c.j << "," << io::csv_escape(d.block(c.i).id) << "," << io::csv_escape(d.block(c.j).id)
          << "," << io::format_double(c.difference) << "," << io::format_double(c.c_plus) << ","
          << io::format_double(c.statistic) << "," << io::format_double(c.p_value) << "," << (c.reject ? 1 : 0)
          << "\n";
    }
    CommandOutput out;
    out.report = {{"command", "tukey"},
                  {"alpha", cfg.alpha},
                  {"law", law_name(cov.law)},
                  {"m_prime", res.m_prime},
                  {"threshold", res.threshold},
                  {"clusters", clusters_json(d)},
                  {"contrasts", rows},
                  {"diagnostics",
                   {{"D_max_l_deviation", dr.max_l_deviation},
                    {"D_max_h_deviation", dr.max_h_deviation},
                    {"D_max_precision_deviation", dr.max_precision_deviation},
                    {"D_passed", dr.passed}}},
                  {"warnings", warnings}};
    out.text = t.str();
    out.files["tukey.csv"] = t.str();
    return out;
}

inline CommandOutput cmd_project(const std::string& csv_text, const RunConfig& cfg) {
    const TestBundle b = run_tests(csv_text, cfg);
    const bool conditional = cfg.law == Law::Conditional;
    const EllipsoidTest& test = conditional ? b.conditional_test : b.marginal_test;
    const CovEstimate& cov = conditional ? b.conditional : b.marginal;
    if (!test.reject)
        throw NothingToDoError("nothing to project: the " + std::string(law_name(test.law)) +
                               " test does not reject at alpha = " + std::to_string(cfg.alpha));
    const LmmDataset& d = b.fitted.data();
    if (cfg.designated.empty()) throw InputError("project.designated is required");
    const std::vector<Index> designated = resolve_labels(d, cfg.designated, "project.designated");
    const ProjectionResult p = project_onto_ellipsoid(b.hyp, b.fitted.mu_hat, cov, test, designated);
    if (p.attribution_error) throw InputError("project.designated: " + *p.attribution_error);
    // Re-test at the adjusted hypothesis value.
    LinearHypothesis moved = b.hyp;
    moved.a = p.a_star;
    const EllipsoidTest re =
        test_linear(moved, b.fitted.mu_hat, cov, cfg.alpha, conditional ? &b.inputs : nullptr);
    json coords = json::array();
    std::ostringstream t;
    t << "cluster,mu_hat,mu_star,delta\n";
    for (Index j : designated) {
        coords.push_back({{"index", j}, {"id", d.block(j).id}, {"mu_hat", b.fitted.mu_hat(j)},
                          {"mu_star", p.mu_star(j)}, {"delta", p.coordinate_delta(j)}});
        t << io::csv_escape(d.block(j).id) << "," << io::format_double(b.fitted.mu_hat(j)) << ","
          << io::format_double(p.mu_star(j)) << "," << io::format_double(p.coordinate_delta(j)) << "\n";
    }
    t << "total,,," << io::format_double(p.total) << "\n";
    CommandOutput out;
    out.report = {{"command", "project"},
                  {"alpha", cfg.alpha},
                  {"law", law_name(test.law)},
                  {"test", test_json(test)},
                  {"adjustments", coords},
                  {"total", p.total},
                  {"contrast_adjustment", io::to_json(p.contrast_adjustment)},
                  {"a_star", io::to_json(p.a_star)},
                  {"statistic_after", p.statistic_after},
                  {"threshold", p.threshold},
                  {"retest", test_json(re)}};
    out.text = t.str();
    out.files["projection.csv"] = t.str();
    return out;
}

inline std::string n_i_label(const std::vector<Index>& n) {
    std::set<Index> distinct(n.begin(), n.end());
    std::string s;
    for (Index v : distinct) s += (s.empty() ? "" : "/") + std::to_string(v);
    return s;
}

inline std::string coverage_csv_header() {
    return "m,n_i,sigma_v2,sigma_e2,reps,law,seed,method,coverage,se,rel_log_volume,failed_reps\n";
}

inline std::string coverage_csv_rows(const SimConfig& c, const CoverageReport& r) {
    std::ostringstream t;
    for (const auto& mc : r.methods)
        t << c.m << "," << n_i_label(c.n_i) << "," << io::format_double(c.sigma_v2) << ","
          << io::format_double(c.sigma_e2) << "," << c.reps << "," << law_name(c.law) << "," << *c.seed << ","
          << mc.method << "," << io::format_double(mc.coverage) << "," << io::format_double(mc.se) << ","
          << io::format_double(mc.rel_log_volume) << "," << mc.failed_reps << "\n";
    return t.str();
}

inline json coverage_json(const SimConfig& c, const CoverageReport& r) {
    json methods = json::array();
    for (const auto& mc : r.methods)
        methods.push_back({{"method", mc.method}, {"coverage", mc.coverage}, {"se", mc.se},
                           {"rel_log_volume", mc.rel_log_volume}, {"valid_reps", mc.valid_reps},
                           {"failed_reps", mc.failed_reps}});
    return {{"m", c.m},           {"n_i", n_i_label(c.n_i)},      {"sigma_v2", c.sigma_v2},
            {"sigma_e2", c.sigma_e2}, {"reps", c.reps},        {"law", law_name(c.law)},
            {"beta", r.beta},     {"c1", r.c1},                {"lambda_oracle", r.lambda_oracle},
            {"delta_known", io::to_json(r.delta_known)},       {"methods", methods}};
}

inline std::string power_csv(const PowerReport& p) {
    std::ostringstream t;
    t << "delta,method,power,se\n";
    for (const auto& pt : p.points)
        t << io::format_double(pt.delta) << "," << pt.method << "," << io::format_double(pt.power) << ","
          << io::format_double(pt.se) << "\n";
    return t.str();
}

inline json power_json(const PowerReport& p) {
    json a = json::array();
    for (const auto& pt : p.points)
        a.push_back({{"delta", pt.delta}, {"method", pt.method}, {"power", pt.power}, {"se", pt.se},
                     {"valid_reps", pt.valid_reps}});
    return a;
}

struct SimulateOptions {
    std::optional<std::uint64_t> seed;
    int threads = 1;
    bool fast = false;
};

inline CommandOutput cmd_simulate(const RunConfig& cfg, const SimulateOptions& opt) {
    if (!cfg.simulate) throw InputError("config.simulate is required");
    const SimulateConfig& s = *cfg.simulate;
    const std::optional<std::uint64_t> seed = opt.seed ? opt.seed : cfg.seed;
    if (!seed) throw InputError("a seed is required (config.seed or --seed)");
    auto finish = [&](SimConfig c) {
        c.seed = seed;
        c.alpha = cfg.alpha;
        c.threads = opt.threads;
        if (opt.fast) c.reps = std::min(c.reps, 1000);
        try {
            c.validate();
        } catch (const ArgumentError& e) {
            throw InputError(e.what());
        }
        return c;
    };
    CommandOutput out;
    out.report = {{"command", "simulate"}, {"kind", s.kind}, {"seed", *seed}, {"alpha", cfg.alpha}};
    if (s.kind == "coverage" || s.kind == "marginal_table") {
        std::vector<SimConfig> cells = s.cells.empty() ? std::vector<SimConfig>{s.base} : s.cells;
        std::string csv = coverage_csv_header();
        json results = json::array();
        for (SimConfig c : cells) {
            c = finish(c);
            if (s.kind == "marginal_table") c.law = Law::Marginal;
            const CoverageReport r = run_coverage(c);
            csv += coverage_csv_rows(c, r);
            results.push_back(coverage_json(c, r));
        }
        out.report["results"] = results;
        out.files["coverage.csv"] = csv;
        out.text = csv;
    } else if (s.kind == "clusterwise") {
        SimConfig c = finish(s.base);
        c.law = Law::Conditional;
        const ClusterwiseReport r = run_clusterwise(c);
        std::ostringstream t;
        t << "cluster,v,empirical,theoretical\n";
        for (Index i = 0; i < c.m; ++i)
            t << i << "," << io::format_double(r.v(i)) << "," << io::format_double(r.empirical(i)) << ","
              << io::format_double(r.theoretical(i)) << "\n";
        out.report["average_empirical"] = r.average_empirical;
        out.report["average_theoretical"] = r.average_theoretical;
        out.report["valid_reps"] = r.valid_reps;
        out.report["failed_reps"] = r.failed_reps;
        out.files["clusterwise.csv"] = t.str();
        out.text = t.str();
    } else {
        SimConfig c = finish(s.base);
        c.law = Law::Conditional;
        const PowerReport p = s.kind == "power_linear" ? run_power_linear(c, s.grid) : run_power_tukey(c, s.grid);
        out.report["points"] = power_json(p);
        out.files["power.csv"] = power_csv(p);
        out.text = out.files["power.csv"];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Error mapping
// ---------------------------------------------------------------------------

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NothingToDoError*>(&e)) return NothingToDo;
    if (dynamic_cast<const InputError*>(&e) || dynamic_cast<const ArgumentError*>(&e) ||
        dynamic_cast<const StructuralError*>(&e))
        return Validation;
    return Numeric;
}

inline const char* error_kind(const std::exception& e) {
    if (dynamic_cast<const NothingToDoError*>(&e)) return "nothing_to_do";
    if (dynamic_cast<const InputError*>(&e)) return "input";
    if (dynamic_cast<const ArgumentError*>(&e)) return "argument";
    if (dynamic_cast<const StructuralError*>(&e)) return "structural";
    if (dynamic_cast<const RankError*>(&e)) return "rank";
    if (dynamic_cast<const DegeneracyError*>(&e)) return "degeneracy";
    if (dynamic_cast<const NumericError*>(&e)) return "numeric";
    return "internal";
}

/// Runs a command body and converts failures into an exit code plus an error report.
template <class Fn>
CommandOutput guarded(const std::string& command, Fn&& fn) {
    try {
        return fn();
    } catch (const std::exception& e) {
        CommandOutput out;
        out.exit_code = exit_code_for(e);
        out.report = {{"command", command}, {"error", {{"kind", error_kind(e)}, {"message", e.what()}}}};
        out.text = std::string("error: ") + e.what() + "\n";
        return out;
    }
}

}  // namespace mixinf::cli
