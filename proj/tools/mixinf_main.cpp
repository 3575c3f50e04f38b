#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "mixinf/cli.hpp"

namespace fs = std::filesystem;
using namespace mixinf;

namespace {

struct Flags {
    std::string config, data, out;
    std::optional<double> alpha;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    bool fast = false;
};

void add_common(CLI::App* sub, Flags& f, bool needs_data) {
    sub->add_option("--config", f.config, "JSON run configuration")->required();
    auto* d = sub->add_option("--data", f.data, "input CSV (cluster, y, x1..xp)");
    if (needs_data) d->required();
    sub->add_option("--out", f.out, "directory for report.json and CSV outputs");
    sub->add_option("--alpha", f.alpha, "significance level (default 0.05)");
}

int emit(const cli::CommandOutput& r, const Flags& f) {
    if (!f.out.empty() && r.exit_code == cli::Ok) {
        fs::create_directories(f.out);
        io::write_file((fs::path(f.out) / "report.json").string(), r.report.dump(2) + "\n");
        for (const auto& [name, content] : r.files) io::write_file((fs::path(f.out) / name).string(), content);
    }
    std::cout << r.report.dump(2) << std::endl;
    std::cerr << r.text;
    return r.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Confidence sets and tests for mixed parameters of linear mixed models"};
    app.require_subcommand(1);
    Flags f;
    auto* fit = app.add_subcommand("fit", "estimate variance components and fixed effects");
    auto* predict = app.add_subcommand("predict", "EBLUP/BLUP with marginal and conditional standard errors");
    auto* test = app.add_subcommand("test", "marginal and conditional ellipsoid tests of L(mu - a) = 0");
    auto* tukey = app.add_subcommand("tukey", "all pairwise comparisons within a subset");
    auto* project = app.add_subcommand("project", "smallest adjustment that makes a rejected test accept");
    auto* simulate = app.add_subcommand("simulate", "Monte Carlo coverage and power studies");
    for (auto* s : {fit, predict, test, tukey, project}) add_common(s, f, true);
    add_common(simulate, f, false);
    simulate->add_option("--seed", f.seed, "RNG seed (overrides config.seed)");
    simulate->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
    simulate->add_flag("--fast", f.fast, "cap reps at 1000");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : cli::Validation;
    }

    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    const cli::CommandOutput r = cli::guarded(name, [&]() -> cli::CommandOutput {
        cli::RunConfig cfg = cli::parse_run_config(io::read_file(f.config));
        if (f.alpha) {
            if (!(*f.alpha > 0.0 && *f.alpha < 1.0)) throw io::InputError("--alpha must lie in (0,1)");
            cfg.alpha = *f.alpha;
        }
        if (name == "simulate") return cli::cmd_simulate(cfg, {f.seed, f.threads, f.fast});
        const std::string csv = io::read_file(f.data);
        if (name == "fit") return cli::cmd_fit(csv, cfg);
        if (name == "predict") return cli::cmd_predict(csv, cfg);
        if (name == "test") return cli::cmd_test(csv, cfg);
        if (name == "tukey") return cli::cmd_tukey(csv, cfg);
        return cli::cmd_project(csv, cfg);
    });
    return emit(r, f);
}
