#include <iostream>

#include "CLI11.hpp"

#include "atlasreg/pipeline.hpp"

using namespace atlasreg;
namespace pl = atlasreg::pipeline;

namespace {

struct Options {
    std::string config;
    int workers = 1;
    std::optional<std::uint64_t> seed;
    std::string case_id;
    bool quiet = false;
};

int fail(const std::string& kind, const std::string& message, const std::optional<std::string>& path = std::nullopt,
         int code = 1)
{
    nlohmann::json j = {{"error", kind}, {"message", message}, {"version", kVersion}};
    if (path)
        j["path"] = *path;
    std::cerr << j.dump() << std::endl;
    return code;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Atlas registration and lesion-distribution pipeline"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);
    Options opt;

    using Stage = void (*)(const pl::Context&);
    const std::vector<std::tuple<const char*, const char*, Stage, bool>> stages{
        {"phantom-gen", "Generate a synthetic atlas and tumour cohort", pl::phantom_gen, true},
        {"prealign", "Select or estimate the subject-to-atlas affine per case", pl::prealign, true},
        {"train-general", "Train the general registration model", pl::train_general_stage, false},
        {"overfit", "Over-fit the general model to each case", pl::overfit_stage, true},
        {"warp", "Warp subject image, labels and tumour into atlas space", pl::warp_stage, true},
        {"metrics", "Registration and tumour-plausibility metrics", pl::metrics_stage, true},
        {"cohort-analyze", "Lesion mapping and region statistics", pl::cohort_stage, true},
        {"report", "CSV tables and SVG figures from persisted results", pl::report_stage, false},
    };
    std::map<CLI::App*, Stage> handlers;
    for (const auto& [name, help, fn, per_case] : stages) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", opt.config, "Pipeline config (JSON)")->required();
        sub->add_option("--workers", opt.workers, "Worker threads for per-case work")->check(CLI::PositiveNumber);
        sub->add_option("--seed", opt.seed, "Override the config seed");
        if (per_case)
            sub->add_option("--case-id", opt.case_id, "Restrict to one manifest case");
        sub->add_flag("--quiet", opt.quiet, "Suppress progress messages");
        handlers[sub] = fn;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), std::nullopt, 2);
    }

    try {
        auto cfg = pl::load_config(opt.config);
        if (opt.seed) {
            cfg.seed = *opt.seed;
            cfg.train.seed = *opt.seed;
        }
        pl::Context ctx(std::move(cfg));
        ctx.workers = opt.workers;
        if (!opt.case_id.empty())
            ctx.case_id = opt.case_id;
        if (!opt.quiet)
            ctx.log = [](const std::string& m) { std::cout << m << std::endl; };
        for (auto* sub : app.get_subcommands())
            handlers.at(sub)(ctx);
    } catch (const pl::MissingInput& e) {
        return fail("missing_input", e.what(), e.path.string());
    } catch (const pl::ConfigError& e) {
        return fail("config", e.what());
    } catch (const IoError& e) {
        return fail("io", e.what());
    } catch (const GeometryError& e) {
        return fail("geometry", e.what());
    } catch (const std::exception& e) {
        return fail("runtime", e.what());
    }
    return 0;
}
