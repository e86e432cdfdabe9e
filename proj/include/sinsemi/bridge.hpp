#pragma once

#include <cstdint>
#include <vector>

#include "sinsemi/image.hpp"
#include "sinsemi/rng.hpp"

namespace sinsemi {

enum class VelocityVariant {
    as_printed,    // (x1 - x0) + sigma * c1, c1 added as a scalar
    noise_scaled,  // (x1 - x0) + sigma * c1 * noise, the time derivative of the sampled path
};

struct BridgeConfig {
    double sigma = 0.35;
    double eps_reg = 1e-5;
    double t_clamp = 1e-3;
    VelocityVariant velocity_variant = VelocityVariant::as_printed;

    void validate() const;
};

const char* to_string(VelocityVariant v);
VelocityVariant parse_velocity_variant(const std::string& s);

/// One draw from the Brownian-bridge path between x0 and x1.
struct BridgeSample {
    Image xt;
    Image noise;
    double t = 0.0;
    int scale = 0;
};

/// (1 - 2t) / (2 sqrt(t (1 - t)) + eps)
double bridge_c1(double t, double eps);

/// sqrt(t (1 - t)) * sigma, the path standard deviation at time t.
double bridge_std(double t, double sigma);

/// xt = (1 - t) x0 + t x1 + sqrt(t (1 - t)) sigma noise, noise ~ N(0, I).
BridgeSample sample_path(const Image& x0, const Image& x1, double t, const BridgeConfig& cfg,
                         Rng& rng);

/// Same path with a caller-supplied noise field.
Image path_point(const Image& x0, const Image& x1, double t, double sigma, const Image& noise);

/// Regression target for the velocity network. Requires t in
/// [t_clamp, 1 - t_clamp].
Image target_velocity(const Image& x0, const Image& x1, double t, const BridgeSample& sample,
                      const BridgeConfig& cfg);

/// Mean over all elements of the squared difference.
double cfm_loss(const Image& predicted, const Image& target);

/// Endpoint pairs per pyramid level. Level 0 pairs the coarsest image with
/// fresh Gaussian noise; level s >= 1 pairs level s with the bilinear
/// upsample of level s - 1.
class PairSource {
public:
    explicit PairSource(Pyramid pyramid);

    const Pyramid& pyramid() const { return pyramid_; }
    int levels() const { return pyramid_.size(); }
    const Image& x0(int s) const { return pyramid_.levels.at(s); }

    /// Upsampled coarser level. Only valid for s >= 1.
    const Image& x1(int s) const;

    /// x1 for level s: a fresh N(0, I) draw when s = 0, else x1(s).
    Image draw_x1(int s, Rng& rng) const;

private:
    Pyramid pyramid_;
    std::vector<Image> upsampled_;  // index s, empty at 0
};

struct TrainingItem {
    Image xt;
    double t = 0.0;
    int scale = 0;
    Image target;
};

/// One optimizer batch. Draws a single key from `rng` and gives each item
/// its own derived stream, so items can be built in any order.
std::vector<TrainingItem> draw_training_batch(const PairSource& src, int batch,
                                              const BridgeConfig& cfg, Rng& rng);

/// Builds batch item `index` from an explicit key; draw_training_batch uses
/// this with a key drawn from its generator.
TrainingItem draw_training_item(const PairSource& src, const BridgeConfig& cfg, std::uint64_t key,
                                std::uint64_t index);

Image gaussian_like(int h, int w, int c, Rng& rng);

}  // namespace sinsemi
