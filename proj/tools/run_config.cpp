#include "run_config.hpp"

#include <cstdio>
#include <sstream>

#include "CLI11.hpp"
#include "sinsemi/digest.hpp"
#include "sinsemi/errors.hpp"

namespace sinsemi::cli {

namespace {

// Calls f(name, field, help) for every field, in manifest order.
template <class Cfg, class F>
void visit(Cfg& c, F&& f) {
    f("out", c.out, "output directory");
    f("image", c.image, "training image (PNG)");
    f("checkpoint", c.checkpoint, "model checkpoint for sample/ablate");
    f("resume", c.resume, "checkpoint to resume training from");
    f("ref-defect", c.ref_defect, "reference image with a defect");
    f("ref-clean", c.ref_clean, "defect-free reference image");
    f("samples", c.samples, "directory of sample PNGs");
    f("data", c.data, "directory of <stem>.png + <stem>.mask.png pairs");
    f("segmenter", c.segmenter, "segmenter weights file");
    f("predictions", c.predictions, "directory of predicted <stem>.mask.png masks");
    f("extractor", c.extractor, "'procedural' or a feature-extractor weights file");
    f("extractor-seed", c.extractor_seed, "seed of the procedural extractor");
    f("seed", c.seed, "base seed for every random stream");
    f("sigma", c.sigma, "bridge noise scale");
    f("eps-reg", c.eps_reg, "regularizer in the c1 denominator");
    f("t-clamp", c.t_clamp, "training t range is [t_clamp, 1 - t_clamp]");
    f("velocity-variant", c.velocity_variant, "as_printed | noise_scaled");
    f("scale-factor", c.scale_factor, "pyramid scale factor");
    f("min-side", c.min_side, "smallest pyramid side");
    f("channels", c.channels, "velocity net hidden width");
    f("kernels", c.kernels, "depthwise kernel sizes, comma separated");
    f("embed-dim", c.embed_dim, "conditioning embedding width");
    f("num-scales", c.num_scales, "scale embedding rows");
    f("iters", c.iters, "training iterations");
    f("batch", c.batch, "training batch size");
    f("lr", c.lr, "learning rate");
    f("beta1", c.beta1, "Adam beta1");
    f("beta2", c.beta2, "Adam beta2");
    f("checkpoint-every", c.checkpoint_every, "checkpoint interval (0 = final only)");
    f("log-every", c.log_every, "loss trace interval");
    f("steps", c.steps, "sampling steps per scale");
    f("guidance", c.guidance, "perceptual guidance strength lambda");
    f("ode", c.ode, "drop the diffusion term when sampling");
    f("count", c.count, "number of images");
    f("steps-list", c.steps_list, "ablation: steps values");
    f("guidance-list", c.guidance_list, "ablation: guidance values");
    f("size", c.size, "fixture side");
    f("line-width", c.line_width, "fixture line width");
    f("gap", c.gap, "fixture gap between lines");
    f("orientation", c.orientation, "vertical | horizontal");
    f("defects", c.defects, "bridges per fixture");
    f("defect-length", c.defect_length, "bridge extent along the lines");
    f("noise", c.noise, "fixture noise std");
    f("brightness-line", c.brightness_line, "line value");
    f("brightness-bg", c.brightness_bg, "background value");
    f("augment", c.augment, "fixture set augmentation: none | noise | flip | noise,flip");
    f("vary", c.vary, "fixture set item i uses seed + i");
    f("epochs", c.epochs, "segmenter epochs");
    f("seg-lr", c.seg_lr, "segmenter learning rate");
    f("seg-batch", c.seg_batch, "segmenter batch size");
    f("seg-depth", c.seg_depth, "segmenter resolution levels");
    f("seg-width", c.seg_width, "segmenter base width");
    f("seg-threshold", c.seg_threshold, "segmenter probability cutoff");
    f("label-threshold", c.label_threshold, "pseudo-label difference threshold");
    f("min-area", c.min_area, "smallest counted defect");
}

std::string format_value(const std::string& v) { return "\"" + v + "\""; }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
template <class T>
std::string format_value(T v) {
    return std::to_string(v);
}

}  // namespace

void bind(CLI::App& app, RunConfig& cfg) {
    visit(cfg, [&](const char* name, auto& field, const char* help) {
        using T = std::decay_t<decltype(field)>;
        if constexpr (std::is_same_v<T, bool>) {
            app.add_flag(std::string("--") + name, field, help);
        } else {
            app.add_option(std::string("--") + name, field, help)->capture_default_str();
        }
    });
}

std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    visit(cfg, [&](const char* name, const auto& field, const char*) { out.emplace_back(name, format_value(field)); });
    return out;
}

std::string config_hash(const RunConfig& cfg) {
    std::uint64_t h = kFnvOffset;
    for (const auto& [k, v] : config_entries(cfg)) {
        if (k == "out") continue;
        h = fnv1a_str(k, h);
        h = fnv1a_str("=", h);
        h = fnv1a_str(v, h);
        h = fnv1a_str("\n", h);
    }
    return hex64(h);
}

std::string manifest_text(const std::string& command, const RunConfig& cfg,
                          const std::vector<std::pair<std::string, std::string>>& digests,
                          const std::vector<std::string>& notes) {
    std::ostringstream os;
    os << "# " << kToolVersion << "\n";
    os << "# command: " << command << "\n";
    os << "# config_hash: " << config_hash(cfg) << "\n";
    for (const auto& [name, d] : digests) os << "# input " << name << " fnv1a=" << d << "\n";
    for (const auto& n : notes) os << "# " << n << "\n";
    for (const auto& [k, v] : config_entries(cfg)) os << k << " = " << v << "\n";
    return os.str();
}

std::vector<double> parse_double_list(const std::string& s, const char* what) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            out.push_back(std::stod(item, &pos));
            if (item.find_first_not_of(" \t", pos) != std::string::npos) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(std::string(what) + ": cannot parse '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
    return out;
}

BridgeConfig RunConfig::bridge() const {
    BridgeConfig b;
    b.sigma = sigma;
    b.eps_reg = eps_reg;
    b.t_clamp = t_clamp;
    b.velocity_variant = parse_velocity_variant(velocity_variant);
    b.validate();
    return b;
}

ModelConfig RunConfig::model() const {
    ModelConfig m;
    m.channels = channels;
    m.kernels = parse_kernels(kernels);
    m.embed_dim = embed_dim;
    m.num_scales = num_scales;
    m.validate();
    return m;
}

TrainConfig RunConfig::train() const {
    TrainConfig t;
    t.iterations = iters;
    t.batch_size = batch;
    t.learning_rate = lr;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.seed = seed;
    t.checkpoint_every = checkpoint_every;
    t.log_every = log_every;
    t.validate();
    return t;
}

SampleConfig RunConfig::sample() const {
    SampleConfig s;
    s.steps = steps;
    s.guidance = guidance;
    s.sigma = sigma;
    s.seed = seed;
    s.ode_mode = ode;
    s.validate();
    return s;
}

FixtureSpec RunConfig::fixture() const {
    FixtureSpec f;
    f.size = size;
    f.line_width = line_width;
    f.gap = gap;
    if (orientation == "vertical") {
        f.orientation = Orientation::vertical;
    } else if (orientation == "horizontal") {
        f.orientation = Orientation::horizontal;
    } else {
        throw ConfigError("orientation must be 'vertical' or 'horizontal', got '" + orientation + "'");
    }
    f.defect_count = defects;
    f.defect_length = defect_length;
    f.noise_std = noise;
    f.brightness_line = brightness_line;
    f.brightness_bg = brightness_bg;
    f.seed = seed;
    f.validate();
    return f;
}

SegConfig RunConfig::seg_model() const {
    SegConfig s;
    s.depth = seg_depth;
    s.base_width = seg_width;
    s.threshold = seg_threshold;
    s.validate();
    return s;
}

SegTrainConfig RunConfig::seg_train() const {
    SegTrainConfig s;
    s.epochs = epochs;
    s.batch_size = seg_batch;
    s.learning_rate = seg_lr;
    s.seed = seed;
    s.validate();
    return s;
}

}  // namespace sinsemi::cli
