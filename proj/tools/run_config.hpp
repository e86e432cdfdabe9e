#pragma once

// Flat run configuration shared by every subcommand. Each field is one
// `--flag` on the command line and one `flag = value` line in a config file
// or manifest; the names are identical in both places.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sinsemi/bridge.hpp"
#include "sinsemi/downstream.hpp"
#include "sinsemi/fixtures.hpp"
#include "sinsemi/sampler.hpp"
#include "sinsemi/trainer.hpp"
#include "sinsemi/vfnet.hpp"

namespace CLI {
class App;
}

namespace sinsemi::cli {

inline constexpr const char* kToolVersion = "sinsemi 0.1.0";

struct RunConfig {
    // paths
    std::string out = "out";
    std::string image;       // training image
    std::string checkpoint;  // model for sample / ablate
    std::string resume;
    std::string ref_defect;
    std::string ref_clean;
    std::string samples;      // directory of PNGs
    std::string data;         // directory of <stem>.png + <stem>.mask.png
    std::string segmenter;    // segmenter weights for segeval
    std::string predictions;  // directory of predicted <stem>.mask.png
    std::string extractor = "procedural";
    std::uint64_t extractor_seed = kDefaultExtractorSeed;

    std::uint64_t seed = 0;

    // bridge
    double sigma = 0.35;
    double eps_reg = 1e-5;
    double t_clamp = 1e-3;
    std::string velocity_variant = "as_printed";

    // pyramid
    double scale_factor = 1.4;
    int min_side = 24;

    // model
    int channels = 64;
    std::string kernels = "9,9,9,11";
    int embed_dim = 128;
    int num_scales = 8;

    // train
    long iters = 120000;
    int batch = 32;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    long checkpoint_every = 0;
    long log_every = 100;

    // sample
    int steps = 300;
    double guidance = 1.0;
    bool ode = false;
    int count = 1;

    // ablation sweeps
    std::string steps_list = "10,50,100,300";
    std::string guidance_list = "0,0.1,0.5,1";

    // fixture
    int size = 96;
    int line_width = 8;
    int gap = 12;
    std::string orientation = "vertical";
    int defects = 1;
    int defect_length = 6;
    double noise = 0.1;
    double brightness_line = 0.6;
    double brightness_bg = -0.6;
    std::string augment = "none";
    bool vary = false;  // item i of a fixture set uses seed + i (fresh defect positions)

    // segmentation
    int epochs = 20;
    double seg_lr = 1e-3;
    int seg_batch = 4;
    int seg_depth = 3;
    int seg_width = 16;
    double seg_threshold = 0.5;
    double label_threshold = 0.5;
    int min_area = 4;

    BridgeConfig bridge() const;
    ModelConfig model() const;
    TrainConfig train() const;
    SampleConfig sample() const;
    FixtureSpec fixture() const;
    SegConfig seg_model() const;
    SegTrainConfig seg_train() const;
};

/// Registers every field as a long option on `app`.
void bind(CLI::App& app, RunConfig& cfg);

/// `key = value` for every field, in declaration order. Strings are quoted.
std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg);

/// Text manifest: comment header (tool version, command, config hash,
/// input digests, extra notes) followed by config_entries(). Feeding it back
/// through --config reproduces the run.
std::string manifest_text(const std::string& command, const RunConfig& cfg,
                          const std::vector<std::pair<std::string, std::string>>& digests,
                          const std::vector<std::string>& notes = {});

/// FNV-1a over the config_entries() text except `out`, 16 hex digits.
std::string config_hash(const RunConfig& cfg);

std::vector<double> parse_double_list(const std::string& s, const char* what);

}  // namespace sinsemi::cli
