#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <torch/torch.h>

#include <json.hpp>

#include "dualfuse/losses.hpp"
#include "dualfuse/nets.hpp"
#include "dualfuse/synth.hpp"

namespace dualfuse {

// dt: fusion loss only, detector optionally trained afterwards on frozen output.
// tt: detection loss only, back-propagated through detector and generator.
// ct: critic updates, then one joint step on detection + lambda * fusion.
enum class Strategy { dt, tt, ct };

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view text);

struct AblationFlags {
    bool use_dt_critic = true;
    bool use_dd_critic = true;
    bool use_sdw = true;
    bool use_mask = true;

    bool operator==(const AblationFlags&) const = default;
};

struct TrainConfig {
    Strategy strategy = Strategy::ct;
    LossWeights weights;  // alpha 20, beta 0.1, lambda 1, k 2, p 6
    double lr = 1e-3;
    double lr_decay = 0.98;  // per epoch
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    int64_t epochs = 20;
    int64_t batch_size = 16;
    int64_t patch_size = 64;
    int64_t critic_steps_per_gen = 1;
    int64_t max_steps = 0;  // 0: run all epochs
    uint64_t seed = 0;
    AblationFlags flags;
    MaskSource mask_source = MaskSource::ground_truth;
    int64_t num_classes = 3;
    bool train_detector = false;   // dt only: detector phase after fusion training
    int64_t detector_epochs = 0;   // dt detector phase; 0 means `epochs`
    GeneratorOptions generator;
    DecodeOptions decode;
    torch::Dtype dtype = torch::kFloat;

    // Throws ValueError on non-positive rates, patch sizes not divisible by 16, ...
    void validate() const;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);

    // FNV-1a of the canonical JSON dump.
    uint64_t hash() const;

    // The full-size schedule: 320x320 patches, batch 64, 300 epochs.
    static TrainConfig full_scale();
};

// lr(e) = lr0 * decay^e for zero-based epoch e.
double learning_rate_at(const TrainConfig& config, int64_t epoch);

}  // namespace dualfuse
