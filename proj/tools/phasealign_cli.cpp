#include <CLI11.hpp>

#include "phasealign/cli/commands.hpp"

using namespace phasealign;
namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

cli::RunConfig resolve_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
    auto cfg = path.empty() ? cli::RunConfig{} : cli::load_run_config(path);
    if (seed) cfg.seed = *seed;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multiphase lesion detection with attention-guided alignment on synthetic phantoms"};
    app.set_version_flag("--version", std::string(cli::kToolVersion));
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
    app.add_option("--config", config_path, "run configuration (JSON)")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "override the configured seed");
    app.add_option("--out", out, "output directory");
    app.add_flag("--force", force, "overwrite a non-empty output directory");

    auto* generate = app.add_subcommand("generate", "write train/val/test dataset containers");

    std::string data_dir;
    auto* train = app.add_subcommand("train", "train a detector on a generated dataset");
    train->add_option("--data", data_dir, "dataset directory from `generate`")->required()->check(CLI::ExistingDirectory);

    std::string checkpoint, split = "val";
    auto* evaluate = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    evaluate->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    evaluate->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

    auto* robustness = app.add_subcommand("robustness", "train one model per tier and report sensitivity");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");

    int count = 4;
    auto* export_maps = app.add_subcommand("export-maps", "dump attention gate maps and offset fields");
    export_maps->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    export_maps->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    export_maps->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    export_maps->add_option("-n,--count", count, "number of samples")->check(CLI::NonNegativeNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    auto need_out = [&]() -> fs::path {
        if (out.empty()) throw cli::ConfigError("--out is required for this command");
        return out;
    };

    try {
        if (*gradcheck) return cli::cmd_gradcheck(out, force) ? 0 : kExitFailure;
        const auto cfg = resolve_config(config_path, seed);
        if (*generate) cli::cmd_generate(cfg, need_out(), force);
        if (*train) cli::cmd_train(cfg, data_dir, need_out(), force);
        if (*evaluate) cli::cmd_eval(cfg, checkpoint, data_dir, split, need_out(), force);
        if (*robustness) cli::cmd_robustness(cfg, need_out(), force);
        if (*export_maps) cli::cmd_export_maps(cfg, checkpoint, data_dir, split, count, need_out(), force);
    } catch (const cli::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return 0;
}
