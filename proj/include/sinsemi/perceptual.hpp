#pragma once

// Perceptual distance, SIFID and the two-reference evaluation protocol.
//
// The feature extractor is a small conv stack evaluated in double precision:
//   stage 0: conv3x3 in -> 16, GELU
//   stage 1: avgpool2, conv3x3 16 -> 32, GELU
//   stage 2: avgpool2, conv3x3 32 -> 32, GELU
// Every stage output is a tap. Weights are either drawn from a fixed seed
// (procedural mode) or read from a named-array file (loaded mode).

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sinsemi/image.hpp"
#include "sinsemi/nn/tensor.hpp"

namespace sinsemi {

inline constexpr std::uint64_t kDefaultExtractorSeed = 20240611;
inline constexpr const char* kExtractorSchema = "extractor/1";

struct StageSpec {
    int in = 1;
    int out = 16;
    int kernel = 3;
    bool pool = false;  // 2x2 average pooling before the conv
};

class FeatureExtractor {
public:
    struct Stage {
        StageSpec spec;
        std::vector<double> weight;  // [out][in][k][k]
        std::vector<double> bias;    // [out]
        std::vector<double> calib;   // per-channel distance weights w_l, [out]
    };

    /// Default three-stage stack with seeded weights: N(0, 2 / fan_in) conv
    /// weights, N(0, 0.1^2) biases, unit calibration weights.
    static FeatureExtractor procedural(int in_channels = 1, std::uint64_t seed = kDefaultExtractorSeed);

    /// Reads a named-array file (manifest `format = extractor/1`,
    /// `stages`, `stageN.in/out/kernel/pool`; arrays stageN.weight/bias/calib).
    static FeatureExtractor load(const std::string& path);
    void save(const std::string& path) const;

    explicit FeatureExtractor(std::vector<Stage> stages, std::string provenance);

    int in_channels() const { return stages_.front().spec.in; }
    int taps() const { return static_cast<int>(stages_.size()); }
    const std::vector<Stage>& stages() const { return stages_; }
    /// "procedural:seed=<n>" or "loaded:fnv1a=<hex>".
    const std::string& provenance() const { return provenance_; }
    /// Smallest side that survives the pooling stages.
    int min_side() const;

    /// Raw (unnormalized) tap outputs, planar C x H x W.
    std::vector<nn::TensorD> features(const Image& img) const;

    /// Tap outputs plus what backward() needs.
    struct Trace {
        std::vector<nn::TensorD> input;  // per stage, after pooling
        std::vector<nn::TensorD> pre;    // per stage, before GELU
        std::vector<nn::TensorD> tap;    // per stage, after GELU
        int height = 0, width = 0;       // image dims
    };
    Trace trace(const Image& img) const;

    /// Gradient with respect to the image given gradients at every tap.
    Image backward(const Trace& tr, const std::vector<nn::TensorD>& dtap, int channels) const;

private:
    void check(const Image& img) const;
    std::vector<Stage> stages_;
    std::string provenance_;
};

/// Sum over taps of the spatial mean of ||w (n_a - n_b)||^2 where n is the
/// tap feature divided by its channel norm at each position. When grad_b is
/// non-null it receives dD/db.
double perceptual_distance(const Image& a, const Image& b, const FeatureExtractor& fx,
                           Image* grad_b = nullptr);

/// Per-position feature statistics of one tap.
struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

/// Mean and unbiased covariance of the deepest tap over positions, with
/// 1e-6 added to the covariance diagonal.
FeatureStats feature_stats(const Image& img, const FeatureExtractor& fx);

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)). The square-root
/// trace comes from the symmetric form S_a^(1/2) S_b S_a^(1/2) with
/// eigenvalues clamped at 0. If an eigensolver fails the inputs get a larger
/// diagonal shift and *flagged is set.
double frechet_distance(const FeatureStats& a, const FeatureStats& b, bool* flagged = nullptr);

double sifid(const Image& a, const Image& b, const FeatureExtractor& fx, bool* flagged = nullptr);

struct BaselineScores {
    double sifid = 0.0;
    double lpips = 0.0;
};

/// Scores between the defect and the clean reference.
BaselineScores baseline_scores(const Image& ref_defect, const Image& ref_clean,
                               const FeatureExtractor& fx);

struct MetricReport {
    double sifid_mean = 0.0, sifid_std = 0.0;
    double lpips_mean = 0.0, lpips_std = 0.0;
    bool has_baseline = false;
    double baseline_sifid = 0.0, baseline_lpips = 0.0;
    int sample_count = 0;
    std::vector<double> sifid_values, lpips_values;  // per sample, input order
};

/// Scores every sample against ref_defect; stds use the n - 1 denominator.
/// Adds the baseline row when ref_clean is given. Runs in parallel over
/// samples.
MetricReport evaluate_batch(const std::vector<Image>& samples, const Image& ref_defect,
                            const FeatureExtractor& fx, const Image* ref_clean = nullptr);

/// Mean and n - 1 standard deviation (0 for fewer than two values).
std::pair<double, double> mean_std(const std::vector<double>& v);

}  // namespace sinsemi
