#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "dualfuse/losses.hpp"
#include "dualfuse/trainloop.hpp"

namespace dualfuse {

// A scalar-valued function of one float64 tensor.
using ScalarFn = std::function<torch::Tensor(const torch::Tensor&)>;

struct FiniteDifferenceResult {
    double max_relative_error = 0.0;  // max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
    double max_abs_error = 0.0;
};

inline constexpr double kGradcheckEpsilon = 1e-4;
inline constexpr double kGradcheckTolerance = 1e-3;
inline constexpr double kRelativeErrorFloor = 1e-6;

// Autograd gradient of f at `point` against central differences with step
// `eps`, coordinate by coordinate.
FiniteDifferenceResult compare_gradients(const ScalarFn& f, const torch::Tensor& point, double eps = kGradcheckEpsilon);

// A twice-differentiable critic for inputs of any size: a fixed random
// tanh feature layer followed by a fixed linear read-out.
CriticFn smooth_test_critic(int64_t height, int64_t width, uint64_t seed, int64_t features = 6);

struct GradcheckOptions {
    int64_t trials = 10;
    uint64_t seed = 0;
    double epsilon = kGradcheckEpsilon;
    double tolerance = kGradcheckTolerance;
    int64_t max_resamples = 50;
};

struct GradcheckSuiteResult {
    std::string name;
    int64_t trials = 0;
    int64_t resampled = 0;  // points discarded for sitting on a kink
    double max_relative_error = 0.0;
    double tolerance = kGradcheckTolerance;
    double seconds = 0.0;

    bool passed() const { return trials > 0 && max_relative_error <= tolerance; }
    nlohmann::json to_json() const;
};

// Gradients with respect to the fused image on 8x8 inputs (16x16 for SSIM,
// whose window is 11x11; detection differentiates an 8x8 raw grid).
GradcheckSuiteResult gradcheck_ssim_loss(const GradcheckOptions& options = {});
GradcheckSuiteResult gradcheck_pixel_loss(const GradcheckOptions& options = {});
GradcheckSuiteResult gradcheck_gen_adv_loss(const GradcheckOptions& options = {});
GradcheckSuiteResult gradcheck_critic_loss(const GradcheckOptions& options = {});
GradcheckSuiteResult gradcheck_detection_loss(const GradcheckOptions& options = {});

std::vector<GradcheckSuiteResult> run_gradient_suites(const GradcheckOptions& options = {});

// Small float64 networks on 32x32 patches.
TrainConfig tiny_model_config(uint64_t seed = 0);

// A batch of synthetic pairs sized for tiny_model_config.
Batch tiny_batch(const TrainConfig& config, int64_t count = 2);

inline constexpr double kDecompositionTolerance = 1e-6;

struct DecompositionCheck {
    double lambda = 0.0;
    DecompositionReport report;

    bool passed() const { return report.max_residual <= kDecompositionTolerance; }
    nlohmann::json to_json() const;
};

std::vector<DecompositionCheck> run_decomposition_checks(const std::vector<double>& lambdas = {0.0, 0.5, 1.0},
                                                         uint64_t seed = 0);

}  // namespace dualfuse
