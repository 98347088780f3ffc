#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "dualfuse/imagecore.hpp"
#include "dualfuse/losses.hpp"
#include "dualfuse/nets.hpp"
#include "dualfuse/train_config.hpp"

namespace dualfuse {

// A device-ready minibatch: Nx1xPxP tensors plus per-sample boxes.
struct Batch {
    torch::Tensor infrared;
    torch::Tensor visible;
    torch::Tensor mask;
    std::vector<std::vector<BoundingBox>> boxes;
    std::vector<std::string> pair_ids;

    int64_t size() const { return infrared.size(0); }
};

// In-memory training set with masks resolved from the configured source.
class TrainingData {
public:
    TrainingData(std::vector<AnnotatedPair> pairs, MaskSource mask_source);

    static TrainingData from_manifest(const DatasetManifest& manifest, MaskSource mask_source);

    std::size_t size() const { return pairs_.size(); }
    const AnnotatedPair& pair(std::size_t i) const { return pairs_[i]; }
    const TargetMask& mask(std::size_t i) const { return masks_[i]; }

    // Crops each listed pair to patch x patch at an rng-drawn offset (no
    // draw when the image already has the patch size). Boxes are clipped to
    // the crop and dropped when less than half of their area remains.
    Batch make_batch(std::span<const int64_t> indices, int64_t patch, torch::Dtype dtype, at::Generator& rng) const;

private:
    std::vector<AnnotatedPair> pairs_;
    std::vector<TargetMask> masks_;
};

// Instrumentation used to prove strategy isolation.
struct TrainCounters {
    int64_t fusion_loss_evaluations = 0;
    int64_t detection_loss_evaluations = 0;
    int64_t detection_updates_to_generator = 0;
    int64_t generator_updates = 0;
    int64_t critic_updates = 0;
    int64_t detector_updates = 0;
};

class TrainState {
public:
    explicit TrainState(const TrainConfig& config);

    TrainConfig config;
    Generator generator{nullptr};
    Critic critic_target{nullptr};
    Critic critic_detail{nullptr};
    Detector detector{nullptr};
    std::unique_ptr<torch::optim::Adam> opt_generator;
    std::unique_ptr<torch::optim::Adam> opt_critic_target;
    std::unique_ptr<torch::optim::Adam> opt_critic_detail;
    std::unique_ptr<torch::optim::Adam> opt_detector;
    at::Generator rng;

    int64_t step = 0;
    int64_t epoch = 0;
    // Position inside the current epoch's shuffled order (resumable).
    std::vector<int64_t> epoch_order;
    int64_t cursor = 0;

    TrainCounters counters;
    std::map<std::string, std::pair<double, int64_t>> running;  // term -> (sum, count) this epoch

    // Critics that participate according to the ablation flags.
    CriticSet active_critics();

    void set_learning_rate(double lr);
    double learning_rate() const;
};

// Everything one optimization step reports.
struct StepReport {
    LossBreakdown losses;
    std::optional<CriticLossTerms> critic_target;
    std::optional<CriticLossTerms> critic_detail;

    nlohmann::json to_json(int64_t step, int64_t epoch, double lr) const;
};

// critic_steps_per_gen critic updates (each enabled critic on its own loss),
// then one generator update on the fusion objective.
StepReport gan_step(TrainState& state, const Batch& batch);

// One detection-only update through detector and generator.
StepReport tt_step(TrainState& state, const Batch& batch);

// Critic updates on the current fused output, then one joint update of
// detection + lambda * fusion into detector and generator.
StepReport ct_step(TrainState& state, const Batch& batch);

// Detector update on frozen fused output (dt detector phase).
StepReport detector_step(TrainState& state, const Batch& batch);

struct TrainHooks {
    std::function<void(const nlohmann::json&)> on_step;  // one JSON object per step
    std::optional<std::filesystem::path> checkpoint_dir;  // epoch checkpoints
    int64_t stop_after_steps = 0;                         // pause once state.step reaches it (0: off)
};

// Runs the configured strategy until all epochs (or max_steps) are done.
// Resumes from state.epoch / state.cursor.
void train(TrainState& state, const TrainingData& data, const TrainHooks& hooks = {});

// Detector phase of dt: generator frozen in eval mode, detector trained on
// its fused output for detector_epochs (or epochs).
void train_detector_on_frozen(TrainState& state, const TrainingData& data, const TrainHooks& hooks = {});

TrainState train_dt(const TrainConfig& config, const DatasetManifest& manifest, const TrainHooks& hooks = {});
TrainState train_tt(const TrainConfig& config, const DatasetManifest& manifest, const TrainHooks& hooks = {});
TrainState train_ct(const TrainConfig& config, const DatasetManifest& manifest, const TrainHooks& hooks = {});

struct DecompositionReport {
    double cross_term_norm = 0.0;   // ||d(detection)/d(theta_g)||
    double fusion_term_norm = 0.0;  // ||lambda * d(fusion)/d(theta_g)||
    double max_residual = 0.0;      // max |combined - (detection + lambda * fusion)|
};

// Gradient of the joint objective w.r.t. the generator, computed once in a
// combined backward and once as the sum of the two path gradients.
DecompositionReport gradient_decomposition_check(TrainState& state, const Batch& batch, double lambda);

// Archive of parameters, optimizer moments and RNG state at `path`, plus a
// JSON sidecar at `path`.json (step, epoch, config, config hash, seed).
void save_checkpoint(TrainState& state, const std::filesystem::path& path);

// Reconstructs the state from the sidecar's config. With `expected`, a
// differing class count is an error and a differing config hash a warning
// (written to `warnings` when given).
TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<TrainConfig>& expected = std::nullopt,
                           std::vector<std::string>* warnings = nullptr);

std::filesystem::path checkpoint_sidecar(const std::filesystem::path& path);

}  // namespace dualfuse
