#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mano/darcy.hpp"
#include "mano/model.hpp"

namespace mano {

struct TrainConfig {
    int epochs = 50;
    int batch_size = 16;
    double lr0 = 3e-4;
    double lr_min = 1e-6;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    double train_frac = 0.9;
    double val_frac = 0.1;
    bool verbose = false;

    void validate() const;  // throws ConfigError
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double train_mse = 0.0;
    double val_rel_mse = 0.0;
    double seconds = 0.0;  // wall clock; excluded from determinism comparisons
};

struct RunMetrics {
    std::vector<EpochRecord> epochs;
    double best_val = 0.0;
    int best_epoch = 0;
};

/// ||pred - truth||_2 / ||truth||_2 over all grid values.
double rel_mse(const Tensor& pred, const Tensor& truth);

/// One AdamW update. Weight decay is decoupled (theta -= lr*wd*theta before
/// the adaptive step); moments are bias-corrected with step counter t >= 1.
struct AdamWState {
    std::vector<double> m, v;
};
void adamw_step(std::vector<double>& params, const std::vector<double>& grads, AdamWState& state,
                int t, double lr, double beta1, double beta2, double eps, double weight_decay);

/// lr_min + (lr0 - lr_min) * (1 + cos(pi t / T)) / 2 for 0 <= t <= T.
double cosine_lr(int t, int T, double lr0, double lr_min);

/// index split: first train_frac of the file order is train, the rest val
struct SplitIndices {
    std::vector<std::size_t> train, val;
};
SplitIndices split_dataset(std::size_t count, double train_frac);

/// fills cfg.{a_mu,a_sigma,u_mu,u_sigma} with mean/std over the given
/// training samples; call before OperatorModel::create for fresh runs
void fit_normalizer(ModelConfig& cfg, const std::vector<DarcySample>& data,
                    const std::vector<std::size_t>& train_indices);

/// mean relative MSE over the given samples, evaluation mode
struct EvalResult {
    std::vector<double> per_sample;
    double mean = 0.0;
    double median = 0.0;
};
EvalResult evaluate(const OperatorModel& m, const std::vector<DarcySample>& data,
                    const std::vector<std::size_t>& indices);

/// Checkpoint: magic "MNOC", u32 version=1, u32 config-text length, the
/// config text (key=value lines), u32 epoch, u32 step, then every parameter
/// tensor as raw f64 in canonical declaration order.
void save_checkpoint(const OperatorModel& m, const std::string& path, int epoch, int step);
struct Checkpoint {
    OperatorModel model;
    int epoch = 0;
    int step = 0;
};
Checkpoint load_checkpoint(const std::string& path);
/// loads parameters into an existing model; throws ConfigError naming the
/// first mismatching parameter when shapes disagree
void load_checkpoint_into(OperatorModel& m, const std::string& path);

std::string config_to_text(const ModelConfig& cfg);
ModelConfig config_from_text(const std::string& text);

/// Full training loop: seeded shuffling, batched AdamW with cosine schedule,
/// per-epoch validation, best/last checkpoints and an incrementally flushed
/// metrics.csv under out_dir. Deterministic given (seed, config, dataset).
/// Throws NumericError after writing the last good checkpoint if the loss
/// leaves the finite range.
RunMetrics train(OperatorModel& m, const std::vector<DarcySample>& data, const TrainConfig& cfg,
                 const std::string& out_dir, int start_epoch = 0, int start_step = 0);

}  // namespace mano
