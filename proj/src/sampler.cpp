#include "sinsemi/sampler.hpp"

#include <cmath>
#include <sstream>
#include <string>

#include "sinsemi/errors.hpp"
#include "sinsemi/parallel.hpp"

namespace sinsemi {

void SampleConfig::validate() const {
    if (steps < 1) throw ConfigError("sample: steps must be >= 1");
    if (!(guidance >= 0.0)) throw ConfigError("sample: guidance must be >= 0");
    if (!(sigma >= 0.0)) throw ConfigError("sample: sigma must be >= 0");
    if (start_scale < 0) throw ConfigError("sample: start_scale must be >= 0");
    if (record_every < 0) throw ConfigError("sample: record_every must be >= 0");
}

double PerceptualEnergy::evaluate(const Image& c, const Image& x, Image* grad_x) const {
    calls_.fetch_add(1);
    return perceptual_distance(c, x, fx_, grad_x);
}

Image em_step(const Image& x, double t, double h, const Image& u, const Image& g, double sigma,
              const Image& noise) {
    if (!x.same_shape(u) || !x.same_shape(g) || !x.same_shape(noise)) {
        throw ConfigError("em_step: shape mismatch");
    }
    const double k = std::sqrt(h) * std::sqrt(t * (1.0 - t)) * sigma;
    Image out(x.height, x.width, x.channels);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = x.data[i] - h * (u.data[i] - g.data[i]) + k * noise.data[i];
    }
    return out;
}

Image guidance_term(const Image& x_hat, const Image& x0s, const Image& x1s, double t, double lambda,
                    double sigma, const Energy* D, Rng& rng) {
    if (!(lambda >= 0.0)) throw ConfigError("guidance_term: lambda must be >= 0");
    if (!x_hat.same_shape(x0s) || !x_hat.same_shape(x1s)) throw ConfigError("guidance_term: shape mismatch");
    Image g(x_hat.height, x_hat.width, x_hat.channels);
    if (lambda == 0.0) return g;
    if (!D) throw ConfigError("guidance_term: no perceptual backend configured");
    const Image eps = gaussian_like(x_hat.height, x_hat.width, x_hat.channels, rng);
    const Image c = path_point(x0s, x1s, t, sigma, eps);
    Image grad;
    D->evaluate(c, x_hat, &grad);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = -lambda * grad.data[i];
    return g;
}

Trajectory sample(const VelocityField& field, const PairSource& src, const SampleConfig& cfg, const Energy* D) {
    cfg.validate();
    if (cfg.guidance > 0.0 && !D) {
        throw ConfigError("sample: guidance > 0 requires a perceptual backend");
    }
    const int last = cfg.stop_scale < 0 ? src.levels() - 1 : cfg.stop_scale;
    if (last >= src.levels() || cfg.start_scale > last) {
        throw ConfigError("sample: scale range [" + std::to_string(cfg.start_scale) + ", " +
                          std::to_string(last) + "] outside the " + std::to_string(src.levels()) +
                          "-level pyramid");
    }
    Rng init_rng(derive_seed(cfg.seed, {0}));
    Rng noise_rng(derive_seed(cfg.seed, {1}));
    Rng guide_rng(derive_seed(cfg.seed, {2}));

    const int n = cfg.steps;
    const double h = 1.0 / n;
    const double diffusion = cfg.ode_mode ? 0.0 : cfg.sigma;

    Trajectory tr;
    Image x;
    Image noise0;  // s = 0 endpoint for the guidance condition
    for (int s = cfg.start_scale; s <= last; ++s) {
        const Image& level = src.x0(s);
        if (s == cfg.start_scale) {
            if (s == 0) {
                x = gaussian_like(level.height, level.width, level.channels, init_rng);
                noise0 = x;
            } else {
                x = src.x1(s);
            }
        } else {
            x = resize_bilinear(x, level.height, level.width);
        }
        const Image& x1s = s == 0 ? noise0 : src.x1(s);
        tr.scales.push_back(s);
        tr.scale_inputs.push_back(x);
        tr.recorded.emplace_back();
        Image zero(level.height, level.width, level.channels);
        for (int i = 0; i < n; ++i) {
            const double t = static_cast<double>(n - i) / n;
            const Image u = field.velocity(x, t, s);
            const Image g = guidance_term(x, level, x1s, t, cfg.guidance, cfg.sigma, D, guide_rng);
            const Image eps = diffusion > 0.0 ? gaussian_like(x.height, x.width, x.channels, noise_rng) : zero;
            x = em_step(x, t, h, u, g, diffusion, eps);
            ++tr.em_steps;
            if (!all_finite(x)) {
                std::ostringstream msg;
                msg << "sample: non-finite state at scale " << s << ", t = " << t;
                throw NumericError(msg.str());
            }
            if (cfg.record_every > 0 && (i + 1) % cfg.record_every == 0) tr.recorded.back().push_back(x);
        }
        tr.scale_outputs.push_back(x);
    }
    tr.final = std::move(x);
    return tr;
}

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index) { return derive_seed(seed, {index}); }

std::vector<Image> sample_batch(const VelocityField& field, const PairSource& src, const SampleConfig& cfg,
                                const Energy* D, int count, int first_index) {
    if (count < 1) throw ConfigError("sample_batch: count must be >= 1");
    std::vector<Image> out(count);
    parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
        SampleConfig c = cfg;
        c.seed = sample_seed(cfg.seed, static_cast<std::uint64_t>(first_index) + i);
        c.record_every = 0;
        out[i] = clamp(sample(field, src, c, D).final);
    });
    return out;
}

}  // namespace sinsemi
