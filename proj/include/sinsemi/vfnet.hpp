#pragma once

// Conditional velocity network u(x, t, s).
//
// Fully convolutional, no down/upsampling, no attention:
//   stem    1x1 conv in_channels -> C
//   block b depthwise kxk conv (C) + additive (t, s) modulation -> GELU
//           -> 1x1 conv C -> C, added back to the block input
//   head    1x1 conv C -> in_channels, zero-initialized
// The receptive field is 1 + sum(k_b - 1) and must equal 35.
//
// Conditioning: sinusoidal features of t concatenated with a learned
// per-scale vector, passed through one dense GELU layer; each block projects
// the result to a per-channel bias.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sinsemi/image.hpp"
#include "sinsemi/nn/param.hpp"
#include "sinsemi/nn/tensor.hpp"

namespace sinsemi {

inline constexpr int kReceptiveField = 35;
inline constexpr const char* kModelSchema = "vfnet/1";

struct ModelConfig {
    int in_channels = 1;
    int channels = 64;
    std::vector<int> kernels{9, 9, 9, 11};
    int embed_dim = 128;
    int num_scales = 8;

    int blocks() const { return static_cast<int>(kernels.size()); }
    int receptive_field() const;
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

std::string format_kernels(const std::vector<int>& kernels);
std::vector<int> parse_kernels(const std::string& s);

/// Sinusoidal time features, `dim` values (dim / 2 sines then dim / 2 cosines).
std::vector<double> time_features(double t, int dim);

template <class T>
class VectorFieldNet {
public:
    /// Activations kept for the backward pass.
    struct Cache {
        int scale = 0;
        nn::HwcTensor<T> x;
        std::vector<T> e_in, e_pre, e;
        std::vector<nn::HwcTensor<T>> h;  // block inputs, then final features
        std::vector<nn::HwcTensor<T>> a;  // pre-activation per block
        std::vector<nn::HwcTensor<T>> g;  // post-activation per block
    };

    explicit VectorFieldNet(ModelConfig cfg);

    /// Seeded initialization: scale table ~ N(0, 1), weights ~ N(0, 1 / fan_in),
    /// biases 0, head exactly 0 (so the initial field is identically zero).
    static VectorFieldNet init(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    nn::ParamSet<T>& params() { return params_; }
    const nn::ParamSet<T>& params() const { return params_; }

    nn::HwcTensor<T> forward(const nn::HwcTensor<T>& x, double t, int s) const;
    nn::HwcTensor<T> forward(const nn::HwcTensor<T>& x, double t, int s, Cache& cache) const;

    /// Accumulates parameter gradients for d(loss)/d(output) = dout and,
    /// when dx is non-null, adds d(loss)/d(x) into it.
    void backward(const Cache& cache, const nn::HwcTensor<T>& dout, nn::HwcTensor<T>* dx);

    /// Image-level convenience wrapper around forward().
    Image velocity(const Image& x, double t, int s) const;

private:
    void check_input(const nn::HwcTensor<T>& x, double t, int s) const;
    void embed(double t, int s, std::vector<T>& e_in, std::vector<T>& e_pre, std::vector<T>& e) const;

    ModelConfig cfg_;
    nn::ParamSet<T> params_;
    int scale_table_ = -1, fc_w_ = -1, fc_b_ = -1, stem_w_ = -1, stem_b_ = -1, head_w_ = -1, head_b_ = -1;
    std::vector<int> dw_w_, mod_w_, mod_b_, pw_w_, pw_b_;
};

using VectorFieldModel = VectorFieldNet<float>;

/// Image <-> channels-last tensor (same element order, precision cast).
template <class T>
nn::HwcTensor<T> to_tensor(const Image& img);
template <class T>
Image to_image(const nn::HwcTensor<T>& t);

/// Ordered parameter names and shapes for a config (the checkpoint schema).
std::vector<std::pair<std::string, std::vector<int>>> parameter_schema(const ModelConfig& cfg);

struct Checkpoint {
    VectorFieldModel model;
    nn::Adam<float> optimizer;
    long step = 0;
    std::vector<std::pair<std::string, std::string>> manifest;
};

/// Writes model parameters, Adam moments and a manifest (format version,
/// model config, step, optimizer settings, plus `extra`) to `path`.
void save_checkpoint(const VectorFieldModel& model, const nn::Adam<float>& optimizer, long step,
                     const std::string& path,
                     const std::vector<std::pair<std::string, std::string>>& extra = {});

/// Throws IoError on bad magic ("corrupt checkpoint"), version mismatch,
/// checksum mismatch or missing arrays.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sinsemi
