#pragma once

#include <functional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "dualfuse/imagecore.hpp"

namespace dualfuse {

// A critic maps an Nx1xHxW batch to N unbounded scores. Any differentiable
// callable qualifies; an empty function means the critic is disabled.
using CriticFn = std::function<torch::Tensor(const torch::Tensor&)>;

struct CriticSet {
    CriticFn target;  // judges masked infrared intensities
    CriticFn detail;  // judges complement-masked gradients of the visible
};

// Pixel selections the two critics see. With masking enabled the target
// region is m and the background is 1 - m; disabled, both are all-ones.
struct Regions {
    torch::Tensor target;
    torch::Tensor background;
};

Regions mask_regions(const torch::Tensor& mask, bool use_mask = true);

struct LossWeights {
    double alpha = 20.0;
    double beta = 0.1;
    double lambda = 1.0;
    double k = 2.0;
    double p = 6.0;
};

// Scalar loss terms of one step. Undefined tensors are terms the active
// strategy never computed.
struct LossBreakdown {
    torch::Tensor ssim_term;
    torch::Tensor pixel_term;
    torch::Tensor adv_term;
    torch::Tensor total_fusion;
    torch::Tensor detection_term;
    torch::Tensor joint_total;
    LossWeights weights;

    nlohmann::json to_json() const;
};

// (1 - SSIM(u,x))/2 + (1 - SSIM(u,y))/2.
torch::Tensor ssim_loss(const torch::Tensor& u, const torch::Tensor& x, const torch::Tensor& y);

// Per-pixel mean of |u - w1 x| + |u - w2 y|. With use_sdw the weights come
// from histogram saliency of x and y (no gradient); otherwise w1 = w2 = 1.
torch::Tensor pixel_loss(const torch::Tensor& u, const torch::Tensor& x, const torch::Tensor& y, bool use_sdw = true);
torch::Tensor pixel_loss(const torch::Tensor& u, const torch::Tensor& x, const torch::Tensor& y, const torch::Tensor& w1,
                         const torch::Tensor& w2);

// Generator side of the dual game: -mean D_T(u * target) - mean D_D(grad(u) * background).
torch::Tensor gen_adv_loss(const torch::Tensor& u, const Regions& regions, const CriticSet& critics);

enum class CriticKind { target, detail };

struct CriticLossTerms {
    torch::Tensor loss;         // wasserstein + penalty
    torch::Tensor wasserstein;  // mean D(fake) - mean D(real)
    torch::Tensor penalty;      // k * mean ||dD/dx~||^p
};

// Real/fake samples of a critic's domain: intensities for the target critic,
// Sobel magnitudes for the detail critic, each restricted to its region.
std::pair<torch::Tensor, torch::Tensor> critic_samples(CriticKind which, const torch::Tensor& real_source,
                                                       const torch::Tensor& u, const Regions& regions);

// k * mean_n ||dD/dx~(x~_n)||_2^p with x~_n = t_n real_n + (1 - t_n) fake_n.
// `t` holds one interpolation weight per sample.
torch::Tensor gradient_penalty(const CriticFn& critic, const torch::Tensor& real, const torch::Tensor& fake,
                               const torch::Tensor& t, double k = 2.0, double p = 6.0);

CriticLossTerms critic_loss(CriticKind which, const torch::Tensor& real_source, const torch::Tensor& u,
                            const Regions& regions, const CriticFn& critic, const torch::Tensor& t, double k = 2.0,
                            double p = 6.0);
CriticLossTerms critic_loss(CriticKind which, const torch::Tensor& real_source, const torch::Tensor& u,
                            const Regions& regions, const CriticFn& critic, at::Generator& rng, double k = 2.0,
                            double p = 6.0);

// Toy detector objective: BCE objectness over all cells + 5 * L1 box
// regression + cross-entropy class loss, the latter two on cells holding a
// ground-truth center. gt_boxes holds one list per batch element.
torch::Tensor detection_loss(const torch::Tensor& raw, std::span<const std::vector<BoundingBox>> gt_boxes);

inline constexpr double kObjectnessWeight = 1.0;
inline constexpr double kBoxWeight = 5.0;
inline constexpr double kClassWeight = 1.0;

// ssim + alpha * pixel + beta * adversarial.
LossBreakdown fusion_total_loss(const torch::Tensor& u, const torch::Tensor& x, const torch::Tensor& y,
                                const Regions& regions, const CriticSet& critics, const LossWeights& weights = {},
                                bool use_sdw = true);

// detection + lambda * fusion_total.
LossBreakdown joint_loss(const torch::Tensor& raw, std::span<const std::vector<BoundingBox>> gt_boxes,
                         const torch::Tensor& u, const torch::Tensor& x, const torch::Tensor& y, const Regions& regions,
                         const CriticSet& critics, const LossWeights& weights = {}, bool use_sdw = true);

}  // namespace dualfuse
