#include "dualfuse/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "dualfuse/nets.hpp"
#include "dualfuse/signalops.hpp"

namespace dualfuse {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

namespace {

void require_same(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
    if (a.sizes() != b.sizes()) throw ShapeError(std::string(op) + ": " + shape_string(a) + " vs " + shape_string(b));
}

nlohmann::json scalar_or_null(const torch::Tensor& t) {
    if (!t.defined()) return nullptr;
    return t.detach().to(torch::kDouble).item<double>();
}

}  // namespace

Regions mask_regions(const torch::Tensor& mask, bool use_mask) {
    if (!use_mask) {
        auto ones = torch::ones_like(mask);
        return {ones, ones};
    }
    return {mask, complement_mask(mask)};
}

nlohmann::json LossBreakdown::to_json() const {
    return {{"ssim_term", scalar_or_null(ssim_term)},
            {"pixel_term", scalar_or_null(pixel_term)},
            {"adv_term", scalar_or_null(adv_term)},
            {"total_fusion", scalar_or_null(total_fusion)},
            {"detection_term", scalar_or_null(detection_term)},
            {"joint_total", scalar_or_null(joint_total)},
            {"alpha", weights.alpha},
            {"beta", weights.beta},
            {"lambda", weights.lambda},
            {"k", weights.k},
            {"p", weights.p}};
}

torch::Tensor ssim_loss(const torch::Tensor& u, const torch::Tensor& x, const torch::Tensor& y) {
    require_same(u, x, "ssim_loss");
    require_same(u, y, "ssim_loss");
    return (1.0 - ssim(u, x)) / 2.0 + (1.0 - ssim(u, y)) / 2.0;
}

torch::Tensor pixel_loss(const torch::Tensor& u, const torch::Tensor& x, const torch::Tensor& y, const torch::Tensor& w1,
                         const torch::Tensor& w2) {
    require_same(u, x, "pixel_loss");
    require_same(u, y, "pixel_loss");
    require_same(u, w1, "pixel_loss");
    require_same(u, w2, "pixel_loss");
    return (torch::abs(u - w1 * x) + torch::abs(u - w2 * y)).mean();
}

torch::Tensor pixel_loss(const torch::Tensor& u, const torch::Tensor& x, const torch::Tensor& y, bool use_sdw) {
    require_same(u, x, "pixel_loss");
    require_same(u, y, "pixel_loss");
    if (!use_sdw) {
        auto ones = torch::ones_like(x);
        return pixel_loss(u, x, y, ones, ones);
    }
    auto [w1, w2] = sdw_weights(saliency_map(x), saliency_map(y));
    return pixel_loss(u, x, y, w1.detach(), w2.detach());
}

torch::Tensor gen_adv_loss(const torch::Tensor& u, const Regions& regions, const CriticSet& critics) {
    require_same(u, regions.target, "gen_adv_loss");
    require_same(u, regions.background, "gen_adv_loss");
    auto loss = torch::zeros({}, u.options());
    if (critics.target) loss = loss - critics.target(apply_mask(u, regions.target)).mean();
    if (critics.detail) loss = loss - critics.detail(apply_mask(sobel_gradient(u), regions.background)).mean();
    return loss;
}

std::pair<torch::Tensor, torch::Tensor> critic_samples(CriticKind which, const torch::Tensor& real_source,
                                                       const torch::Tensor& u, const Regions& regions) {
    require_same(real_source, u, "critic_loss");
    if (which == CriticKind::target) {
        return {apply_mask(real_source, regions.target), apply_mask(u, regions.target)};
    }
    return {apply_mask(sobel_gradient(real_source), regions.background),
            apply_mask(sobel_gradient(u), regions.background)};
}

torch::Tensor gradient_penalty(const CriticFn& critic, const torch::Tensor& real, const torch::Tensor& fake,
                               const torch::Tensor& t, double k, double p) {
    require_same(real, fake, "gradient_penalty");
    if (t.dim() != 1 || t.size(0) != real.size(0)) {
        throw ShapeError("gradient_penalty: need one interpolation weight per sample, got " + shape_string(t));
    }
    auto tw = t.to(real.options().requires_grad(false)).view({-1, 1, 1, 1});
    auto mixed = tw * real + (1.0 - tw) * fake;
    if (!mixed.requires_grad()) mixed = mixed.detach().requires_grad_(true);

    auto scores = critic(mixed);
    torch::Tensor grads;
    if (scores.requires_grad()) {
        grads = torch::autograd::grad({scores.sum()}, {mixed}, {}, /*retain_graph=*/true, /*create_graph=*/true,
                                      /*allow_unused=*/true)[0];
    }
    if (!grads.defined()) grads = torch::zeros_like(mixed);

    // ||g||^p as (sum g^2)^(p/2): smooth at g = 0.
    auto per_sample = grads.flatten(1).pow(2).sum(1).pow(p / 2.0);
    auto finite = torch::isfinite(per_sample.detach());
    if (!finite.all().item<bool>()) {
        const auto bad = (~finite).nonzero().flatten()[0].item<int64_t>();
        throw ValueError("gradient_penalty: non-finite penalty at sample " + std::to_string(bad));
    }
    return k * per_sample.mean();
}

CriticLossTerms critic_loss(CriticKind which, const torch::Tensor& real_source, const torch::Tensor& u,
                            const Regions& regions, const CriticFn& critic, const torch::Tensor& t, double k, double p) {
    if (!critic) throw ValueError("critic_loss: critic is disabled");
    auto [real, fake] = critic_samples(which, real_source, u, regions);
    CriticLossTerms terms;
    terms.wasserstein = critic(fake).mean() - critic(real).mean();
    terms.penalty = gradient_penalty(critic, real, fake, t, k, p);
    terms.loss = terms.wasserstein + terms.penalty;
    return terms;
}

CriticLossTerms critic_loss(CriticKind which, const torch::Tensor& real_source, const torch::Tensor& u,
                            const Regions& regions, const CriticFn& critic, at::Generator& rng, double k, double p) {
    auto t = torch::empty({u.size(0)}, torch::kDouble).uniform_(0.0, 1.0, rng);
    return critic_loss(which, real_source, u, regions, critic, t, k, p);
}

torch::Tensor detection_loss(const torch::Tensor& raw, std::span<const std::vector<BoundingBox>> gt_boxes) {
    if (raw.dim() != 4 || raw.size(1) < 6) throw ShapeError("detection_loss: bad raw grid " + shape_string(raw));
    const int64_t n = raw.size(0);
    const int64_t classes = raw.size(1) - 5;
    const int64_t rows = raw.size(2);
    const int64_t cols = raw.size(3);
    if (static_cast<int64_t>(gt_boxes.size()) != n) {
        throw ShapeError("detection_loss: " + std::to_string(gt_boxes.size()) + " box lists for a batch of " +
                         std::to_string(n));
    }
    const Shape image{rows * kDetectorStride, cols * kDetectorStride};

    // One box per cell. The largest box wins a shared cell, ties broken by
    // coordinates, so the assignment does not depend on list order.
    auto rank = [](const BoundingBox& b) { return std::make_tuple(b.area(), b.x_min, b.y_min, b.x_max, b.y_max, -b.class_id); };
    std::vector<int64_t> b_idx, r_idx, c_idx, cls;
    std::vector<double> targets;
    for (int64_t b = 0; b < n; ++b) {
        std::map<std::pair<int64_t, int64_t>, const BoundingBox*> owner;
        for (const auto& box : gt_boxes[static_cast<std::size_t>(b)]) {
            if (!box.is_valid() || !box.inside(image)) {
                throw ValueError("detection_loss: box outside the " + image.str() + " image");
            }
            if (box.class_id >= classes) {
                throw ValueError("detection_loss: class " + std::to_string(box.class_id) + " exceeds head with " +
                                 std::to_string(classes) + " classes");
            }
            const auto cell = encode_box(box);
            auto& slot = owner[{cell.row, cell.col}];
            if (!slot || rank(box) > rank(*slot)) slot = &box;
        }
        for (const auto& [cell, box] : owner) {
            const auto a = encode_box(*box);
            b_idx.push_back(b);
            r_idx.push_back(cell.first);
            c_idx.push_back(cell.second);
            cls.push_back(box->class_id);
            targets.insert(targets.end(), a.target.begin(), a.target.end());
        }
    }

    auto objectness = raw.select(1, 0);
    auto obj_target = torch::zeros_like(objectness);
    const auto positives = static_cast<int64_t>(b_idx.size());
    auto long_opts = torch::TensorOptions().dtype(torch::kLong);
    auto bi = torch::tensor(b_idx, long_opts);
    auto ri = torch::tensor(r_idx, long_opts);
    auto ci = torch::tensor(c_idx, long_opts);
    if (positives > 0) obj_target.index_put_({bi, ri, ci}, 1.0);

    auto loss = kObjectnessWeight * F::binary_cross_entropy_with_logits(objectness, obj_target);
    if (positives == 0) return loss;

    auto cells = raw.permute({0, 2, 3, 1}).index({bi, ri, ci});  // [P, 5 + C]
    auto pred_box = torch::cat({torch::sigmoid(cells.index({Slice(), Slice(1, 3)})), cells.index({Slice(), Slice(3, 5)})}, 1);
    auto target_box = torch::tensor(targets, raw.options().requires_grad(false)).view({positives, 4});
    auto box_loss = (pred_box - target_box).abs().sum(1).mean();
    auto class_loss = F::cross_entropy(cells.index({Slice(), Slice(5, torch::indexing::None)}), torch::tensor(cls, long_opts));
    return loss + kBoxWeight * box_loss + kClassWeight * class_loss;
}

LossBreakdown fusion_total_loss(const torch::Tensor& u, const torch::Tensor& x, const torch::Tensor& y,
                                const Regions& regions, const CriticSet& critics, const LossWeights& weights,
                                bool use_sdw) {
    LossBreakdown out;
    out.weights = weights;
    out.ssim_term = ssim_loss(u, x, y);
    out.pixel_term = pixel_loss(u, x, y, use_sdw);
    out.adv_term = gen_adv_loss(u, regions, critics);
    out.total_fusion = out.ssim_term + weights.alpha * out.pixel_term + weights.beta * out.adv_term;
    return out;
}

LossBreakdown joint_loss(const torch::Tensor& raw, std::span<const std::vector<BoundingBox>> gt_boxes,
                         const torch::Tensor& u, const torch::Tensor& x, const torch::Tensor& y, const Regions& regions,
                         const CriticSet& critics, const LossWeights& weights, bool use_sdw) {
    auto out = fusion_total_loss(u, x, y, regions, critics, weights, use_sdw);
    out.detection_term = detection_loss(raw, gt_boxes);
    out.joint_total = out.detection_term + weights.lambda * out.total_fusion;
    return out;
}

}  // namespace dualfuse
