#include <exception>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"
#include "sinsemi/errors.hpp"

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kConfig = 2;
constexpr int kNumeric = 3;
constexpr int kIo = 4;

}  // namespace

int main(int argc, char** argv) {
    using namespace sinsemi;
    cli::RunConfig cfg;
    CLI::App app{"One-shot line-pattern image generator: fixtures, training, sampling, evaluation", "sinsemi"};
    app.set_version_flag("--version", cli::kToolVersion);
    app.set_config("--config", "", "read `key = value` options from a file (command-line flags win)");
    app.allow_config_extras(CLI::config_extras_mode::error);
    cli::bind(app, cfg);
    app.require_subcommand(1, 1);

    using Command = void (*)(const cli::RunConfig&);
    const std::map<std::string, std::pair<Command, const char*>> commands{
        {"fixture", {cli::cmd_fixture, "write procedural fixture images and masks"}},
        {"train", {cli::cmd_train, "train the velocity network on one image"}},
        {"sample", {cli::cmd_sample, "generate images from a checkpoint"}},
        {"eval", {cli::cmd_eval, "SIFID and perceptual distance of samples against references"}},
        {"segtrain", {cli::cmd_segtrain, "train the defect segmenter"}},
        {"segeval", {cli::cmd_segeval, "IoU, defect counts and heatmap on labeled images"}},
        {"ablate", {cli::cmd_ablate, "steps and guidance sweeps into one CSV"}},
    };
    for (const auto& [name, entry] : commands) app.add_subcommand(name, entry.second)->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    }

    try {
        for (const auto* sub : app.get_subcommands()) commands.at(sub->get_name()).first(cfg);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kOk;
}
