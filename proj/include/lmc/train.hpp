#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lmc/data.hpp"
#include "lmc/model.hpp"

namespace lmc {

struct TrainConfig {
    int batch_size = 32;
    double lr0 = 1e-5;
    double plateau_factor = 0.1;
    int plateau_patience = 10;
    double min_delta = 1e-4;
    int max_epochs = 0;
    uint64_t seed = 0;
    std::vector<std::string> freeze_prefixes;
    // Scale augmentation: when > 0, every training sample is re-rendered each
    // epoch from a random prefix of its byte stream, length drawn uniformly in
    // [augment_min_bytes, full]. Deterministic given (seed, epoch). Evaluation
    // always sees the full stream.
    int64_t augment_min_bytes = 0;
    // Decoupled weight decay (AdamW style), applied to every non-frozen
    // parameter except biases and batchnorm affines.
    double weight_decay = 0.0;
    // optional early-stop targets (deterministic; plumbing, not protocol)
    std::optional<double> stop_train_accuracy;
    std::optional<double> stop_val_accuracy;

    void validate() const;
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

struct PlateauState {
    double best_metric = -std::numeric_limits<double>::infinity();
    int epochs_since_improvement = 0;
    double current_lr = 0.0;
    double min_delta = 1e-4;
};

struct EpochMetric {
    int epoch = 0;
    std::string split;
    double loss = 0.0;
    double accuracy = 0.0;
    double lr = 0.0;
};

struct Checkpoint {
    uint16_t version = 1;
    ModelGraph model;
    std::optional<AdamState> opt;
    int epoch = 0;
    std::vector<EpochMetric> history;
};

// Bias-corrected Adam update; parameters matching a freeze prefix are left
// untouched (moments included). Arithmetic in double, storage in float.
void adam_step(std::map<std::string, Tensor>& params,
               const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
               const std::vector<std::string>& freeze_prefixes = {}, double weight_decay = 0.0);

// True for parameters that weight decay skips (biases, batchnorm affines).
bool decay_exempt(const std::string& name);

// Maximize-mode plateau rule: strict improvement over best + min_delta resets
// the counter; once the counter exceeds `patience`, lr decays by `factor`.
void plateau_step(PlateauState& state, double val_metric, int patience, double factor);

struct TrainResult {
    Checkpoint final;
    Checkpoint best;  // highest plateau metric seen
    std::vector<EpochMetric> log;
    bool aborted_numeric = false;
};

TrainResult train_model(ModelGraph model, const DatasetManifest& manifest,
                        const TrainConfig& cfg, const Checkpoint* resume = nullptr);

// Transfer-learning step: reinitialize the linear head to `new_head_classes`
// outputs, then train with the given freeze prefixes.
TrainResult fine_tune(const Checkpoint& base, const std::string& expected_arch,
                      int new_head_classes, const DatasetManifest& manifest,
                      const TrainConfig& cfg);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::vector<uint8_t> checkpoint_to_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(const std::vector<uint8_t>& bytes);

std::string metrics_to_csv(const std::vector<EpochMetric>& log);

// Stage routing: benign-vs-rest relabeling for stage 1, malign-only family
// labels for stage 2.
DatasetManifest relabel_stage1(const DatasetManifest& manifest);
DatasetManifest relabel_stage2(const DatasetManifest& manifest);

}  // namespace lmc
