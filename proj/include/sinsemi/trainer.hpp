#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sinsemi/bridge.hpp"
#include "sinsemi/nn/param.hpp"
#include "sinsemi/vfnet.hpp"

namespace sinsemi {

struct TrainConfig {
    long iterations = 120000;
    int batch_size = 32;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    long checkpoint_every = 0;  // 0 = final checkpoint only
    long log_every = 100;

    /// learning_rate = 0 is accepted (frozen-parameter runs).
    void validate() const;
};

struct LossRecord {
    long step = 0;  // 1-based optimizer step
    double loss = 0.0;
    std::uint64_t scale_mix_hash = 0;  // FNV-1a over the batch's scale indices
};

struct TrainState {
    VectorFieldModel model;
    nn::Adam<float> optimizer;
    long step = 0;  // optimizer steps already taken
};

/// Fresh state: seeded model init, zero Adam moments.
TrainState make_train_state(const ModelConfig& model_cfg, const TrainConfig& cfg, std::uint64_t init_seed);

struct TrainHooks {
    std::function<void(const LossRecord&)> on_log;
    std::function<void(const TrainState&)> on_checkpoint;
};

/// Mean CFM loss of a batch and its gradients (accumulated into the model's
/// parameter gradients, which are zeroed first).
double batch_loss_and_grad(VectorFieldModel& model, const std::vector<TrainingItem>& batch);

/// Mean CFM loss of a batch without touching gradients.
double batch_loss(const VectorFieldModel& model, const std::vector<TrainingItem>& batch);

/// The batch used at optimizer step `step` (1-based): a pure function of
/// (seed, step), so resuming reproduces the uninterrupted run exactly.
std::vector<TrainingItem> training_batch(const PairSource& src, const BridgeConfig& bridge_cfg,
                                         const TrainConfig& cfg, long step);

/// Runs optimizer steps state.step + 1 .. cfg.iterations. Every step's loss
/// is returned; on_log sees every log_every-th step and the last one;
/// on_checkpoint runs every checkpoint_every steps and after the last step.
/// Throws NumericError on a non-finite loss.
std::vector<LossRecord> train(TrainState& state, const PairSource& src, const BridgeConfig& bridge_cfg,
                              const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Stratified Monte Carlo estimate of E||u - E[u | x_t, t, s]||^2 per element,
/// averaged over scales. Only the s = 0 level (Gaussian x1) is stochastic
/// given x_t; per pixel the posterior is Gaussian, so the conditional variance
/// is closed-form for each sampled t.
double loss_floor_estimate(const PairSource& src, const BridgeConfig& bridge_cfg, int samples,
                           std::uint64_t seed = 0);

/// `step,loss,scale_mix_hash` rows; the header is written when `append` is
/// false or the file is new.
void write_loss_csv(const std::vector<LossRecord>& records, const std::string& path, bool append = false);
std::vector<LossRecord> read_loss_csv(const std::string& path);

}  // namespace sinsemi
