#include "sinsemi/bridge.hpp"

#include <cmath>
#include <string>

#include "sinsemi/errors.hpp"

namespace sinsemi {

void BridgeConfig::validate() const {
    if (!(sigma >= 0.0)) throw ConfigError("bridge: sigma must be >= 0");
    if (!(eps_reg > 0.0)) throw ConfigError("bridge: eps_reg must be > 0");
    if (!(t_clamp > 0.0 && t_clamp < 0.5)) throw ConfigError("bridge: t_clamp must be in (0, 0.5)");
}

const char* to_string(VelocityVariant v) {
    return v == VelocityVariant::as_printed ? "as_printed" : "noise_scaled";
}

VelocityVariant parse_velocity_variant(const std::string& s) {
    if (s == "as_printed") return VelocityVariant::as_printed;
    if (s == "noise_scaled") return VelocityVariant::noise_scaled;
    throw ConfigError("unknown velocity variant '" + s + "'");
}

double bridge_c1(double t, double eps) {
    return (1.0 - 2.0 * t) / (2.0 * std::sqrt(t * (1.0 - t)) + eps);
}

double bridge_std(double t, double sigma) { return std::sqrt(t * (1.0 - t)) * sigma; }

namespace {

void require_same(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ConfigError(std::string(what) + ": shape mismatch " + std::to_string(a.height) + "x" +
                          std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " +
                          std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                          std::to_string(b.channels));
    }
}

}  // namespace

Image gaussian_like(int h, int w, int c, Rng& rng) {
    Image out(h, w, c);
    for (auto& v : out.data) v = rng.normal();
    return out;
}

Image path_point(const Image& x0, const Image& x1, double t, double sigma, const Image& noise) {
    require_same(x0, x1, "path_point");
    require_same(x0, noise, "path_point");
    const double sd = bridge_std(t, sigma);
    Image xt(x0.height, x0.width, x0.channels);
    for (std::size_t i = 0; i < xt.size(); ++i) {
        xt.data[i] = (1.0 - t) * x0.data[i] + t * x1.data[i] + sd * noise.data[i];
    }
    return xt;
}

BridgeSample sample_path(const Image& x0, const Image& x1, double t, const BridgeConfig& cfg,
                         Rng& rng) {
    require_same(x0, x1, "sample_path");
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("sample_path: t must be in [0, 1]");
    BridgeSample s;
    s.t = t;
    s.noise = gaussian_like(x0.height, x0.width, x0.channels, rng);
    s.xt = path_point(x0, x1, t, cfg.sigma, s.noise);
    return s;
}

Image target_velocity(const Image& x0, const Image& x1, double t, const BridgeSample& sample,
                      const BridgeConfig& cfg) {
    require_same(x0, x1, "target_velocity");
    if (t < cfg.t_clamp || t > 1.0 - cfg.t_clamp) {
        throw ConfigError("target_velocity: t = " + std::to_string(t) + " outside [" +
                          std::to_string(cfg.t_clamp) + ", " + std::to_string(1.0 - cfg.t_clamp) +
                          "]");
    }
    const double k = cfg.sigma * bridge_c1(t, cfg.eps_reg);
    Image u(x0.height, x0.width, x0.channels);
    if (cfg.velocity_variant == VelocityVariant::as_printed) {
        for (std::size_t i = 0; i < u.size(); ++i) u.data[i] = x1.data[i] - x0.data[i] + k;
    } else {
        require_same(x0, sample.noise, "target_velocity");
        for (std::size_t i = 0; i < u.size(); ++i) {
            u.data[i] = x1.data[i] - x0.data[i] + k * sample.noise.data[i];
        }
    }
    return u;
}

double cfm_loss(const Image& predicted, const Image& target) {
    require_same(predicted, target, "cfm_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const double d = predicted.data[i] - target.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(predicted.size());
}

PairSource::PairSource(Pyramid pyramid) : pyramid_(std::move(pyramid)) {
    if (pyramid_.levels.empty()) throw ConfigError("PairSource: empty pyramid");
    upsampled_.resize(pyramid_.levels.size());
    for (std::size_t s = 1; s < pyramid_.levels.size(); ++s) {
        const Image& fine = pyramid_.levels[s];
        upsampled_[s] = resize_bilinear(pyramid_.levels[s - 1], fine.height, fine.width);
    }
}

const Image& PairSource::x1(int s) const {
    if (s < 1 || s >= levels()) throw ConfigError("PairSource::x1: level out of range");
    return upsampled_[s];
}

Image PairSource::draw_x1(int s, Rng& rng) const {
    if (s == 0) {
        const Image& c = x0(0);
        return gaussian_like(c.height, c.width, c.channels, rng);
    }
    return x1(s);
}

TrainingItem draw_training_item(const PairSource& src, const BridgeConfig& cfg, std::uint64_t key,
                                std::uint64_t index) {
    Rng rng(derive_seed(key, {index}));
    TrainingItem item;
    item.scale = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(src.levels())));
    item.t = rng.uniform(cfg.t_clamp, 1.0 - cfg.t_clamp);
    const Image& x0 = src.x0(item.scale);
    const Image x1 = src.draw_x1(item.scale, rng);
    BridgeSample sample = sample_path(x0, x1, item.t, cfg, rng);
    sample.scale = item.scale;
    item.target = target_velocity(x0, x1, item.t, sample, cfg);
    item.xt = std::move(sample.xt);
    return item;
}

std::vector<TrainingItem> draw_training_batch(const PairSource& src, int batch,
                                              const BridgeConfig& cfg, Rng& rng) {
    if (batch < 1) throw ConfigError("draw_training_batch: batch must be >= 1");
    const std::uint64_t key = rng.next_u64();
    std::vector<TrainingItem> items;
    items.reserve(batch);
    for (int i = 0; i < batch; ++i) {
        items.push_back(draw_training_item(src, cfg, key, static_cast<std::uint64_t>(i)));
    }
    return items;
}

}  // namespace sinsemi
