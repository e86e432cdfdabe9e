#include "sinsemi/trainer.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sinsemi/digest.hpp"
#include "sinsemi/errors.hpp"

namespace sinsemi {

void TrainConfig::validate() const {
    if (iterations < 1) throw ConfigError("train: iterations must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("train: learning_rate must be a finite value >= 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("train: Adam betas must be in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be > 0");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
    if (log_every < 1) throw ConfigError("train: log_every must be >= 1");
}

TrainState make_train_state(const ModelConfig& model_cfg, const TrainConfig& cfg, std::uint64_t init_seed) {
    cfg.validate();
    VectorFieldModel model = VectorFieldModel::init(model_cfg, init_seed);
    nn::Adam<float> opt(model.params(), {cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps});
    return {std::move(model), std::move(opt), 0};
}

namespace {

double item_loss(const nn::HwcTensor<float>& out, const Image& target, nn::HwcTensor<float>* dout, double scale) {
    double acc = 0.0;
    const double n = static_cast<double>(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = static_cast<double>(out.v[i]) - target.data[i];
        acc += d * d;
        if (dout) dout->v[i] = static_cast<float>(2.0 * d / n * scale);
    }
    return acc / n;
}

std::uint64_t scale_hash(const std::vector<TrainingItem>& batch) {
    std::uint64_t h = kFnvOffset;
    for (const auto& item : batch) {
        const auto s = static_cast<std::uint32_t>(item.scale);
        h = fnv1a(&s, sizeof s, h);
    }
    return h;
}

}  // namespace

double batch_loss_and_grad(VectorFieldModel& model, const std::vector<TrainingItem>& batch) {
    model.params().zero_grad();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    VectorFieldModel::Cache cache;
    for (const auto& item : batch) {
        const auto x = to_tensor<float>(item.xt);
        const auto out = model.forward(x, item.t, item.scale, cache);
        nn::HwcTensor<float> dout(out.h, out.w, out.c);
        total += item_loss(out, item.target, &dout, inv_b);
        model.backward(cache, dout, nullptr);
    }
    return total * inv_b;
}

double batch_loss(const VectorFieldModel& model, const std::vector<TrainingItem>& batch) {
    double total = 0.0;
    for (const auto& item : batch) {
        const auto out = model.forward(to_tensor<float>(item.xt), item.t, item.scale);
        total += item_loss(out, item.target, nullptr, 1.0);
    }
    return total / static_cast<double>(batch.size());
}

std::vector<TrainingItem> training_batch(const PairSource& src, const BridgeConfig& bridge_cfg,
                                         const TrainConfig& cfg, long step) {
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(step)}));
    return draw_training_batch(src, cfg.batch_size, bridge_cfg, rng);
}

std::vector<LossRecord> train(TrainState& state, const PairSource& src, const BridgeConfig& bridge_cfg,
                              const TrainConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    bridge_cfg.validate();
    if (src.levels() > state.model.config().num_scales) {
        throw ConfigError("train: pyramid has " + std::to_string(src.levels()) + " levels but the model only " +
                          std::to_string(state.model.config().num_scales) + " scale embeddings");
    }
    if (src.x0(0).channels != state.model.config().in_channels) {
        throw ConfigError("train: image channels do not match the model");
    }
    state.optimizer.set_learning_rate(cfg.learning_rate);
    std::vector<LossRecord> trace;
    for (long step = state.step + 1; step <= cfg.iterations; ++step) {
        const auto batch = training_batch(src, bridge_cfg, cfg, step);
        const double loss = batch_loss_and_grad(state.model, batch);
        LossRecord rec{step, loss, scale_hash(batch)};
        if (!std::isfinite(loss)) {
            std::vector<int> hist(src.levels(), 0);
            for (const auto& item : batch) ++hist[item.scale];
            std::ostringstream msg;
            msg << "train: non-finite loss " << loss << " at step " << step << ", scale histogram [";
            for (std::size_t s = 0; s < hist.size(); ++s) msg << (s ? " " : "") << hist[s];
            msg << "]";
            throw NumericError(msg.str());
        }
        if (cfg.learning_rate > 0.0) state.optimizer.step(state.model.params());
        state.step = step;
        trace.push_back(rec);
        if (hooks.on_log && (step % cfg.log_every == 0 || step == cfg.iterations)) hooks.on_log(rec);
        if (hooks.on_checkpoint &&
            ((cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.iterations)) {
            hooks.on_checkpoint(state);
        }
    }
    return trace;
}

double loss_floor_estimate(const PairSource& src, const BridgeConfig& bridge_cfg, int samples, std::uint64_t seed) {
    bridge_cfg.validate();
    if (samples < 100) throw ConfigError("loss_floor_estimate: samples must be >= 100");
    Rng rng(seed);
    const double lo = bridge_cfg.t_clamp, span = 1.0 - 2.0 * bridge_cfg.t_clamp;
    double acc = 0.0;
    for (int i = 0; i < samples; ++i) {
        const double t = lo + span * (i + rng.uniform()) / samples;
        const double b2 = t * (1.0 - t) * bridge_cfg.sigma * bridge_cfg.sigma;
        const double z2 = t * t + b2;  // Var(t x1 + b eps) at s = 0
        if (z2 <= 0.0) continue;
        double v;
        if (bridge_cfg.velocity_variant == VelocityVariant::as_printed) {
            v = b2 / z2;  // Var(x1 | Z)
        } else {
            const double k = bridge_cfg.sigma * bridge_c1(t, bridge_cfg.eps_reg);
            const double cov = t + k * std::sqrt(b2);
            v = 1.0 + k * k - cov * cov / z2;  // Var(x1 + k eps | Z)
        }
        acc += std::max(v, 0.0);
    }
    // Levels s >= 1 have fixed endpoints, so x_t determines the target.
    return acc / samples / src.levels();
}

void write_loss_csv(const std::vector<LossRecord>& records, const std::string& path, bool append) {
    const bool header = !append || !std::filesystem::exists(path);
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw IoError("cannot write loss trace '" + path + "'");
    if (header) out << "step,loss,scale_mix_hash\n";
    char buf[96];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%ld,%.17g,%016" PRIx64 "\n", r.step, r.loss, r.scale_mix_hash);
        out << buf;
    }
    if (!out) throw IoError("write failed for '" + path + "'");
}

std::vector<LossRecord> read_loss_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read loss trace '" + path + "'");
    std::vector<LossRecord> out;
    std::string line;
    std::getline(in, line);
    if (line != "step,loss,scale_mix_hash") throw IoError("'" + path + "' is not a loss trace");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        LossRecord r;
        char* end = nullptr;
        r.step = std::strtol(line.c_str(), &end, 10);
        if (*end != ',') throw IoError("malformed loss trace row: " + line);
        r.loss = std::strtod(end + 1, &end);
        if (*end != ',') throw IoError("malformed loss trace row: " + line);
        r.scale_mix_hash = std::strtoull(end + 1, &end, 16);
        out.push_back(r);
    }
    return out;
}

}  // namespace sinsemi
