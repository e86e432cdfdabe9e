#pragma once

// Defect segmentation and defect statistics on generated images.
//
// SegModel is a small U-Net: `depth` resolution levels with widths
// base, 2 base, 4 base, ...; two conv3x3 + ReLU per level, 2x2 max pooling
// down, nearest upsampling plus skip concatenation up, 1x1 head + sigmoid.

#include <cstdint>
#include <string>
#include <vector>

#include "sinsemi/fixtures.hpp"
#include "sinsemi/image.hpp"
#include "sinsemi/nn/param.hpp"
#include "sinsemi/nn/tensor.hpp"

namespace sinsemi {

inline constexpr const char* kSegSchema = "unet/1";

struct SegConfig {
    int in_channels = 1;
    int depth = 3;
    int base_width = 16;
    double threshold = 0.5;

    void validate() const;
};

class SegModel {
public:
    struct Cache;

    explicit SegModel(SegConfig cfg);
    /// He-normal conv weights, zero biases.
    static SegModel init(const SegConfig& cfg, std::uint64_t seed);

    const SegConfig& config() const { return cfg_; }
    nn::ParamSet<float>& params() { return params_; }
    const nn::ParamSet<float>& params() const { return params_; }

    /// Per-pixel defect probability, single channel, same dims as x.
    Image probabilities(const Image& x) const;
    /// probabilities > threshold.
    Mask predict(const Image& x) const;

    /// Mean per-pixel binary cross-entropy against `truth`; when `grad` is
    /// true the parameter gradients are accumulated, scaled by `weight`.
    double bce(const Image& x, const Mask& truth, bool grad, double weight = 1.0);

    void save(const std::string& path) const;
    static SegModel load(const std::string& path);

private:
    nn::TensorF logits(const Image& x, Cache* cache) const;
    void backward(const Cache& cache, const nn::TensorF& dlogits);

    SegConfig cfg_;
    nn::ParamSet<float> params_;
    struct Conv {
        int w, b, cin, cout, k;
    };
    std::vector<Conv> enc_, dec_;  // two per level
    Conv head_{};
};

struct SegTrainConfig {
    int epochs = 20;
    int batch_size = 4;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Adam on mean BCE over shuffled minibatches. Deterministic for a fixed
/// seed. `epoch_loss` (optional) receives the mean training loss per epoch.
/// Throws NumericError on a non-finite loss.
SegModel train_segmenter(const std::vector<LabeledImage>& data, const SegConfig& model_cfg,
                         const SegTrainConfig& cfg, std::vector<double>* epoch_loss = nullptr);

/// Mask of pixels where the 3x3 mean of |generated - ref_clean| (averaged
/// over channels, window clipped at the border) exceeds threshold, with
/// 4-connected components under 4 pixels removed.
Mask pseudo_label(const Image& generated, const Image& ref_clean, double threshold = 0.5);

/// |pred & truth| / |pred | truth|, 1 when both are empty.
double iou(const Mask& pred, const Mask& truth);

/// 4-connected component areas in scan order of their first pixel.
std::vector<int> component_areas(const Mask& m);

/// Number of 4-connected components with area >= min_area.
int count_defects(const Mask& m, int min_area = 1);

/// Per-pixel mask count divided by the largest count (all zeros stay zero).
/// Values in [0, 1]; use heatmap_to_image before saving as PNG.
Image defect_heatmap(const std::vector<Mask>& masks);

/// Maps [0, 1] to [-1, 1] so save_image writes 0..255.
Image heatmap_to_image(const Image& heat);

}  // namespace sinsemi
