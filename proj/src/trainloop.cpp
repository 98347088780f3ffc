#include "dualfuse/trainloop.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dualfuse/synth.hpp"

namespace dualfuse {

namespace {

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    // splitmix64 finalizer over (seed, stream)
    uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::unique_ptr<torch::optim::Adam> make_adam(const std::vector<torch::Tensor>& params, const TrainConfig& c) {
    return std::make_unique<torch::optim::Adam>(
        params, torch::optim::AdamOptions(c.lr).betas(std::make_tuple(c.adam_beta1, c.adam_beta2)));
}

void set_lr(torch::optim::Adam& opt, double lr) {
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

void ensure_finite(const torch::Tensor& value, const char* term, int64_t step) {
    if (value.defined() && !std::isfinite(value.detach().to(torch::kDouble).item<double>())) {
        throw TrainingError("non-finite loss term '" + std::string(term) + "' at step " + std::to_string(step));
    }
}

void ensure_finite(const LossBreakdown& l, int64_t step) {
    ensure_finite(l.ssim_term, "ssim_term", step);
    ensure_finite(l.pixel_term, "pixel_term", step);
    ensure_finite(l.adv_term, "adv_term", step);
    ensure_finite(l.total_fusion, "total_fusion", step);
    ensure_finite(l.detection_term, "detection_term", step);
    ensure_finite(l.joint_total, "joint_total", step);
}

// Critic updates shared by dt and ct. The generator output is computed once
// without gradient and reused for every critic step.
void update_critics(TrainState& state, const Batch& batch, const Regions& regions, const CriticSet& critics,
                    StepReport& report) {
    if (!critics.target && !critics.detail) return;
    torch::Tensor fused;
    {
        torch::NoGradGuard no_grad;
        fused = state.generator->forward(batch.infrared, batch.visible);
    }
    const auto& w = state.config.weights;
    for (int64_t s = 0; s < state.config.critic_steps_per_gen; ++s) {
        if (critics.target) {
            state.opt_critic_target->zero_grad();
            auto terms = critic_loss(CriticKind::target, batch.infrared, fused, regions, critics.target, state.rng, w.k, w.p);
            ensure_finite(terms.loss, "critic_target", state.step);
            terms.loss.backward();
            state.opt_critic_target->step();
            ++state.counters.critic_updates;
            report.critic_target = terms;
        }
        if (critics.detail) {
            state.opt_critic_detail->zero_grad();
            auto terms = critic_loss(CriticKind::detail, batch.visible, fused, regions, critics.detail, state.rng, w.k, w.p);
            ensure_finite(terms.loss, "critic_detail", state.step);
            terms.loss.backward();
            state.opt_critic_detail->step();
            ++state.counters.critic_updates;
            report.critic_detail = terms;
        }
    }
}

using StepFn = StepReport (*)(TrainState&, const Batch&);

void record(TrainState& state, const StepReport& report, const TrainHooks& hooks) {
    auto line = report.to_json(state.step, state.epoch, state.learning_rate());
    for (const auto& [key, value] : line.items()) {
        if (value.is_number_float()) {
            auto& slot = state.running[key];
            slot.first += value.get<double>();
            slot.second += 1;
        }
    }
    if (hooks.on_step) hooks.on_step(line);
}

std::vector<int64_t> shuffled(int64_t n, at::Generator& rng) {
    auto perm = torch::randperm(n, rng, torch::TensorOptions().dtype(torch::kLong));
    return {perm.data_ptr<int64_t>(), perm.data_ptr<int64_t>() + n};
}

std::string epoch_file(int64_t epoch) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03lld.pt", static_cast<long long>(epoch));
    return name;
}

}  // namespace

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

TrainingData::TrainingData(std::vector<AnnotatedPair> pairs, MaskSource mask_source) : pairs_(std::move(pairs)) {
    masks_.reserve(pairs_.size());
    for (const auto& p : pairs_) masks_.push_back(mask_oracle(p.infrared, mask_source, &p));
}

TrainingData TrainingData::from_manifest(const DatasetManifest& manifest, MaskSource mask_source) {
    return TrainingData(load_all(manifest), mask_source);
}

Batch TrainingData::make_batch(std::span<const int64_t> indices, int64_t patch, torch::Dtype dtype,
                               at::Generator& rng) const {
    using torch::indexing::Slice;
    if (indices.empty()) throw ValueError("make_batch: empty index list");
    std::vector<torch::Tensor> ir, vis, mask;
    Batch batch;
    for (int64_t idx : indices) {
        const auto& p = pairs_.at(static_cast<std::size_t>(idx));
        const auto shape = p.shape();
        if (shape.height < patch || shape.width < patch) {
            throw ShapeError("pair '" + p.pair_id + "' (" + shape.str() + ") is smaller than patch " + std::to_string(patch));
        }
        int64_t top = 0;
        int64_t left = 0;
        if (shape.height > patch) top = torch::randint(shape.height - patch + 1, {1}, rng, torch::kLong).item<int64_t>();
        if (shape.width > patch) left = torch::randint(shape.width - patch + 1, {1}, rng, torch::kLong).item<int64_t>();
        auto crop = [&](torch::Tensor t) {
            return t.index({Slice(), Slice(), Slice(top, top + patch), Slice(left, left + patch)});
        };
        ir.push_back(crop(to_tensor(p.infrared, dtype)));
        vis.push_back(crop(to_tensor(p.visible, dtype)));
        mask.push_back(crop(to_tensor(masks_[static_cast<std::size_t>(idx)], dtype)));

        std::vector<BoundingBox> kept;
        const Shape patch_shape{patch, patch};
        for (const auto& b : p.boxes) {
            BoundingBox moved = b;
            moved.x_min -= static_cast<double>(left);
            moved.x_max -= static_cast<double>(left);
            moved.y_min -= static_cast<double>(top);
            moved.y_max -= static_cast<double>(top);
            const auto clipped = moved.clipped(patch_shape);
            if (clipped.is_valid() && clipped.area() >= 0.5 * b.area()) kept.push_back(clipped);
        }
        batch.boxes.push_back(std::move(kept));
        batch.pair_ids.push_back(p.pair_id);
    }
    batch.infrared = torch::cat(ir, 0).contiguous();
    batch.visible = torch::cat(vis, 0).contiguous();
    batch.mask = torch::cat(mask, 0).contiguous();
    return batch;
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

TrainState::TrainState(const TrainConfig& cfg)
    : config(cfg), rng(at::make_generator<at::CPUGeneratorImpl>(derive_seed(cfg.seed, 0))) {
    config.validate();
    generator = Generator(config.generator);
    initialize_generator(*generator, derive_seed(config.seed, 1));
    critic_target = Critic(CriticOptions{.height = config.patch_size, .width = config.patch_size});
    initialize_critic(*critic_target, derive_seed(config.seed, 2));
    critic_detail = Critic(CriticOptions{.height = config.patch_size, .width = config.patch_size});
    initialize_critic(*critic_detail, derive_seed(config.seed, 3));
    detector = Detector(DetectorOptions{.num_classes = config.num_classes});
    initialize_detector(*detector, derive_seed(config.seed, 4));

    generator->to(config.dtype);
    critic_target->to(config.dtype);
    critic_detail->to(config.dtype);
    detector->to(config.dtype);

    opt_generator = make_adam(generator->parameters(), config);
    opt_critic_target = make_adam(critic_target->parameters(), config);
    opt_critic_detail = make_adam(critic_detail->parameters(), config);
    opt_detector = make_adam(detector->parameters(), config);
}

CriticSet TrainState::active_critics() {
    CriticSet set;
    if (config.flags.use_dt_critic) set.target = [c = critic_target](const torch::Tensor& t) mutable { return c->forward(t); };
    if (config.flags.use_dd_critic) set.detail = [c = critic_detail](const torch::Tensor& t) mutable { return c->forward(t); };
    return set;
}

void TrainState::set_learning_rate(double lr) {
    for (auto* opt : {opt_generator.get(), opt_critic_target.get(), opt_critic_detail.get(), opt_detector.get()}) {
        set_lr(*opt, lr);
    }
}

double TrainState::learning_rate() const {
    return static_cast<const torch::optim::AdamOptions&>(opt_generator->param_groups().front().options()).lr();
}

nlohmann::json StepReport::to_json(int64_t step, int64_t epoch, double lr) const {
    auto j = losses.to_json();
    j["step"] = step;
    j["epoch"] = epoch;
    j["lr"] = lr;
    auto critic = [](const std::optional<CriticLossTerms>& t) -> nlohmann::json {
        if (!t) return nullptr;
        return t->loss.detach().to(torch::kDouble).item<double>();
    };
    j["critic_target_loss"] = critic(critic_target);
    j["critic_detail_loss"] = critic(critic_detail);
    return j;
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

StepReport gan_step(TrainState& state, const Batch& batch) {
    const auto& cfg = state.config;
    auto regions = mask_regions(batch.mask, cfg.flags.use_mask);
    auto critics = state.active_critics();
    StepReport report;
    update_critics(state, batch, regions, critics, report);

    state.opt_generator->zero_grad();
    auto fused = state.generator->forward(batch.infrared, batch.visible);
    {
        FrozenParameters freeze_target(*state.critic_target);
        FrozenParameters freeze_detail(*state.critic_detail);
        report.losses = fusion_total_loss(fused, batch.infrared, batch.visible, regions, critics, cfg.weights,
                                          cfg.flags.use_sdw);
    }
    ++state.counters.fusion_loss_evaluations;
    ensure_finite(report.losses, state.step);
    report.losses.total_fusion.backward();
    state.opt_generator->step();
    ++state.counters.generator_updates;
    return report;
}

StepReport tt_step(TrainState& state, const Batch& batch) {
    StepReport report;
    report.losses.weights = state.config.weights;
    state.opt_generator->zero_grad();
    state.opt_detector->zero_grad();
    auto fused = state.generator->forward(batch.infrared, batch.visible);
    auto raw = state.detector->forward(fused);
    report.losses.detection_term = detection_loss(raw, batch.boxes);
    report.losses.joint_total = report.losses.detection_term;
    ++state.counters.detection_loss_evaluations;
    ensure_finite(report.losses, state.step);
    report.losses.detection_term.backward();
    state.opt_generator->step();
    state.opt_detector->step();
    ++state.counters.detection_updates_to_generator;
    ++state.counters.generator_updates;
    ++state.counters.detector_updates;
    return report;
}

StepReport ct_step(TrainState& state, const Batch& batch) {
    const auto& cfg = state.config;
    auto regions = mask_regions(batch.mask, cfg.flags.use_mask);
    auto critics = state.active_critics();
    StepReport report;
    update_critics(state, batch, regions, critics, report);

    state.opt_generator->zero_grad();
    state.opt_detector->zero_grad();
    auto fused = state.generator->forward(batch.infrared, batch.visible);
    auto raw = state.detector->forward(fused);
    {
        FrozenParameters freeze_target(*state.critic_target);
        FrozenParameters freeze_detail(*state.critic_detail);
        report.losses = joint_loss(raw, batch.boxes, fused, batch.infrared, batch.visible, regions, critics,
                                   cfg.weights, cfg.flags.use_sdw);
    }
    ++state.counters.fusion_loss_evaluations;
    ++state.counters.detection_loss_evaluations;
    ensure_finite(report.losses, state.step);
    report.losses.joint_total.backward();
    state.opt_generator->step();
    state.opt_detector->step();
    ++state.counters.detection_updates_to_generator;
    ++state.counters.generator_updates;
    ++state.counters.detector_updates;
    return report;
}

StepReport detector_step(TrainState& state, const Batch& batch) {
    StepReport report;
    report.losses.weights = state.config.weights;
    torch::Tensor fused;
    {
        torch::NoGradGuard no_grad;
        state.generator->eval();
        fused = state.generator->forward(batch.infrared, batch.visible);
        state.generator->train();
    }
    state.opt_detector->zero_grad();
    auto raw = state.detector->forward(fused);
    report.losses.detection_term = detection_loss(raw, batch.boxes);
    ++state.counters.detection_loss_evaluations;
    ensure_finite(report.losses, state.step);
    report.losses.detection_term.backward();
    state.opt_detector->step();
    ++state.counters.detector_updates;
    return report;
}

// ---------------------------------------------------------------------------
// Loops
// ---------------------------------------------------------------------------

void train(TrainState& state, const TrainingData& data, const TrainHooks& hooks) {
    if (data.size() == 0) throw TrainingError("training set is empty");
    const auto& cfg = state.config;
    StepFn step_fn = cfg.strategy == Strategy::dt ? &gan_step : cfg.strategy == Strategy::tt ? &tt_step : &ct_step;
    const auto n = static_cast<int64_t>(data.size());
    state.generator->train();
    state.detector->train();

    while (state.epoch < cfg.epochs) {
        if (cfg.max_steps > 0 && state.step >= cfg.max_steps) break;
        if (hooks.stop_after_steps > 0 && state.step >= hooks.stop_after_steps) break;
        if (state.epoch_order.empty()) {
            state.epoch_order = shuffled(n, state.rng);
            state.cursor = 0;
            state.running.clear();
        }
        state.set_learning_rate(learning_rate_at(cfg, state.epoch));

        const int64_t end = std::min(state.cursor + cfg.batch_size, n);
        std::span<const int64_t> indices(state.epoch_order.data() + state.cursor, static_cast<std::size_t>(end - state.cursor));
        auto batch = data.make_batch(indices, cfg.patch_size, cfg.dtype, state.rng);
        auto report = step_fn(state, batch);
        record(state, report, hooks);
        ++state.step;
        state.cursor = end;

        if (state.cursor >= n) {
            state.epoch_order.clear();
            state.cursor = 0;
            ++state.epoch;
            if (hooks.checkpoint_dir) {
                std::filesystem::create_directories(*hooks.checkpoint_dir);
                save_checkpoint(state, *hooks.checkpoint_dir / epoch_file(state.epoch));
            }
        }
    }
}

void train_detector_on_frozen(TrainState& state, const TrainingData& data, const TrainHooks& hooks) {
    if (data.size() == 0) throw TrainingError("training set is empty");
    const auto& cfg = state.config;
    const int64_t epochs = cfg.detector_epochs > 0 ? cfg.detector_epochs : cfg.epochs;
    const auto n = static_cast<int64_t>(data.size());
    state.detector->train();
    for (int64_t e = 0; e < epochs; ++e) {
        const auto order = shuffled(n, state.rng);
        set_lr(*state.opt_detector, learning_rate_at(cfg, e));
        for (int64_t start = 0; start < n; start += cfg.batch_size) {
            const int64_t end = std::min(start + cfg.batch_size, n);
            std::span<const int64_t> indices(order.data() + start, static_cast<std::size_t>(end - start));
            auto batch = data.make_batch(indices, cfg.patch_size, cfg.dtype, state.rng);
            auto report = detector_step(state, batch);
            record(state, report, hooks);
            ++state.step;
        }
    }
    if (hooks.checkpoint_dir) {
        std::filesystem::create_directories(*hooks.checkpoint_dir);
        save_checkpoint(state, *hooks.checkpoint_dir / "detector_final.pt");
    }
}

namespace {

TrainState run_strategy(TrainConfig config, Strategy strategy, const DatasetManifest& manifest, const TrainHooks& hooks) {
    if (manifest.entries.empty()) throw TrainingError("manifest has no entries");
    config.strategy = strategy;
    TrainState state(config);
    auto data = TrainingData::from_manifest(manifest, config.mask_source);
    train(state, data, hooks);
    if (strategy == Strategy::dt && config.train_detector) train_detector_on_frozen(state, data, hooks);
    return state;
}

}  // namespace

TrainState train_dt(const TrainConfig& config, const DatasetManifest& manifest, const TrainHooks& hooks) {
    return run_strategy(config, Strategy::dt, manifest, hooks);
}

TrainState train_tt(const TrainConfig& config, const DatasetManifest& manifest, const TrainHooks& hooks) {
    return run_strategy(config, Strategy::tt, manifest, hooks);
}

TrainState train_ct(const TrainConfig& config, const DatasetManifest& manifest, const TrainHooks& hooks) {
    return run_strategy(config, Strategy::ct, manifest, hooks);
}

// ---------------------------------------------------------------------------
// Gradient decomposition
// ---------------------------------------------------------------------------

DecompositionReport gradient_decomposition_check(TrainState& state, const Batch& batch, double lambda) {
    const auto& cfg = state.config;
    std::vector<torch::Tensor> params;
    for (auto& p : state.generator->parameters()) {
        if (p.requires_grad()) params.push_back(p);
    }
    // Forward passes update batch-norm statistics; restore them afterwards.
    std::vector<std::pair<torch::Tensor, torch::Tensor>> buffers;
    for (auto& b : state.generator->buffers()) buffers.emplace_back(b, b.clone());

    auto regions = mask_regions(batch.mask, cfg.flags.use_mask);
    auto critics = state.active_critics();
    auto fused = state.generator->forward(batch.infrared, batch.visible);
    auto raw = state.detector->forward(fused);
    torch::Tensor detection = detection_loss(raw, batch.boxes);
    torch::Tensor fusion;
    {
        FrozenParameters freeze_target(*state.critic_target);
        FrozenParameters freeze_detail(*state.critic_detail);
        fusion = fusion_total_loss(fused, batch.infrared, batch.visible, regions, critics, cfg.weights, cfg.flags.use_sdw)
                     .total_fusion;
    }
    auto joint = detection + lambda * fusion;

    auto grads = [&](const torch::Tensor& loss, bool retain) {
        auto g = torch::autograd::grad({loss}, params, {}, retain, false, /*allow_unused=*/true);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!g[i].defined()) g[i] = torch::zeros_like(params[i]);
        }
        return g;
    };
    const auto combined = grads(joint, true);
    const auto det_path = grads(detection, true);
    const auto fusion_path = grads(fusion, false);

    DecompositionReport report;
    double cross_sq = 0.0;
    double fusion_sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto scaled = lambda * fusion_path[i];
        auto residual = (combined[i] - (det_path[i] + scaled)).abs().max().item<double>();
        report.max_residual = std::max(report.max_residual, residual);
        cross_sq += det_path[i].to(torch::kDouble).pow(2).sum().item<double>();
        fusion_sq += scaled.to(torch::kDouble).pow(2).sum().item<double>();
    }
    report.cross_term_norm = std::sqrt(cross_sq);
    report.fusion_term_norm = std::sqrt(fusion_sq);

    torch::NoGradGuard no_grad;
    for (auto& [live, saved] : buffers) live.copy_(saved);
    return report;
}

}  // namespace dualfuse
