#pragma once

// Coarse-to-fine Euler-Maruyama generation with optional perceptual guidance.
//
// Per scale s the state is integrated from t = 1 to t = 0 in n steps of
// h = 1/n on the grid t_i = (n - i) / n:
//   x <- x - h (u(x, t_i, s) - g) + sqrt(h) sqrt(t_i (1 - t_i)) sigma eps
// with g = -lambda * grad_x D(c_t, x) and a fresh diffused condition c_t per
// step. The result at t = 0 is upsampled to the next level as its t = 1 state.

#include <atomic>
#include <cstdint>
#include <memory>
#include <vector>

#include "sinsemi/bridge.hpp"
#include "sinsemi/image.hpp"
#include "sinsemi/perceptual.hpp"
#include "sinsemi/rng.hpp"
#include "sinsemi/vfnet.hpp"

namespace sinsemi {

struct SampleConfig {
    int steps = 300;
    double guidance = 1.0;  // lambda
    double sigma = 0.35;
    std::uint64_t seed = 0;
    bool ode_mode = false;  // drop the sqrt(h) noise term
    int start_scale = 0;    // > 0 starts from the upsampled training level
    int stop_scale = -1;    // last scale integrated, -1 = finest
    int record_every = 0;   // record the state every k steps (0 = never)

    void validate() const;
};

/// u(x, t, s). Implementations must allow concurrent calls.
class VelocityField {
public:
    virtual ~VelocityField() = default;
    virtual Image velocity(const Image& x, double t, int s) const = 0;
};

class ModelField final : public VelocityField {
public:
    explicit ModelField(const VectorFieldModel& model) : model_(model) {}
    Image velocity(const Image& x, double t, int s) const override { return model_.velocity(x, t, s); }

private:
    const VectorFieldModel& model_;
};

/// Guidance energy D(c, x) with gradient in x. Must allow concurrent calls.
class Energy {
public:
    virtual ~Energy() = default;
    virtual double evaluate(const Image& c, const Image& x, Image* grad_x) const = 0;
};

/// perceptual_distance as an Energy, with a call counter.
class PerceptualEnergy final : public Energy {
public:
    explicit PerceptualEnergy(const FeatureExtractor& fx) : fx_(fx) {}
    double evaluate(const Image& c, const Image& x, Image* grad_x) const override;
    long calls() const { return calls_.load(); }

private:
    const FeatureExtractor& fx_;
    mutable std::atomic<long> calls_{0};
};

/// x - h (u - g) + sqrt(h) sqrt(t (1 - t)) sigma noise.
Image em_step(const Image& x, double t, double h, const Image& u, const Image& g, double sigma,
              const Image& noise);

/// Draws eps_c, forms c_t = (1 - t) x0s + t x1s + sqrt(t (1 - t)) sigma eps_c
/// and returns -lambda grad_x D(c_t, x_hat). With lambda = 0 returns zeros
/// without touching D or rng.
Image guidance_term(const Image& x_hat, const Image& x0s, const Image& x1s, double t, double lambda,
                    double sigma, const Energy* D, Rng& rng);

struct Trajectory {
    std::vector<Image> scale_inputs;               // t = 1 state per integrated scale
    std::vector<Image> scale_outputs;              // t = 0 state per integrated scale
    std::vector<std::vector<Image>> recorded;      // per scale, every record_every steps
    std::vector<int> scales;                       // scale index of each entry above
    Image final;                                   // last scale's t = 0 state, unclamped
    long em_steps = 0;
};

/// One trajectory. The s = 0 guidance condition pairs the coarsest level with
/// the trajectory's own initial noise. Throws ConfigError when lambda > 0 and
/// D is null, NumericError on a non-finite state.
Trajectory sample(const VelocityField& field, const PairSource& src, const SampleConfig& cfg,
                  const Energy* D);

/// Seed used for image `index` of a batch.
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index);

/// `count` trajectories with seeds sample_seed(cfg.seed, first_index + i),
/// run in parallel, results clamped to [-1, 1] and in index order.
std::vector<Image> sample_batch(const VelocityField& field, const PairSource& src, const SampleConfig& cfg,
                                const Energy* D, int count, int first_index = 0);

}  // namespace sinsemi
