#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "dualfuse/imagecore.hpp"

namespace dualfuse {

// ---------------------------------------------------------------------------
// Histograms and histogram-contrast saliency
// ---------------------------------------------------------------------------

struct Histogram256 {
    std::array<int64_t, 256> counts{};
    int64_t total = 0;
};

// counts[i] = number of pixels whose 8-bit level round(v*255) is i.
Histogram256 histogram256(const GrayImage& image);
Histogram256 histogram256(std::span<const uint8_t> levels);

// Per-level saliency: lut[q] = sum_i H(i) * |q - i|.
std::array<double, 256> saliency_lut(const Histogram256& hist);

struct SaliencyMap {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<double> data;
};

SaliencyMap saliency_map(const GrayImage& image);

// Batched saliency for Nx1xHxW tensors with values in [0,1]. Each sample uses
// its own histogram. The result is detached and has the input's dtype.
torch::Tensor saliency_map(const torch::Tensor& images);

// Saliency-degree weights w1 = s_x / (s_x + s_y + eps), w2 = 1 - w1.
inline constexpr double kSdwEpsilon = 1e-8;

struct SdwWeights {
    std::vector<double> w1;
    std::vector<double> w2;
};

SdwWeights sdw_weights(const SaliencyMap& s_x, const SaliencyMap& s_y);
std::pair<torch::Tensor, torch::Tensor> sdw_weights(const torch::Tensor& s_x, const torch::Tensor& s_y);

// ---------------------------------------------------------------------------
// Differentiable structure operators
// ---------------------------------------------------------------------------

// Gaussian-windowed SSIM (11x11, sigma 1.5, K1 = 0.01, K2 = 0.03, data range 1)
// averaged over every valid window position.
struct SsimOptions {
    int64_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

// Nx1xHxW inputs; returns the mean SSIM over the batch as a 0-dim tensor.
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& options = {});
// Per-sample mean SSIM, shape N.
torch::Tensor ssim_per_sample(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& options = {});
double ssim(const GrayImage& a, const GrayImage& b);

inline constexpr double kSobelDelta = 1e-12;

// sqrt(gx^2 + gy^2 + delta) with 3x3 Sobel kernels and reflect padding.
torch::Tensor sobel_gradient(const torch::Tensor& images);
std::vector<double> sobel_gradient(const GrayImage& image);

// ---------------------------------------------------------------------------
// Fusion metrics on 8-bit quantized values
// ---------------------------------------------------------------------------

double entropy_metric(const GrayImage& image);
double sd_metric(const GrayImage& image);
double mi_metric(const GrayImage& a, const GrayImage& b);

struct MetricReport {
    double mi = 0.0;  // mi_x + mi_y
    double mi_x = 0.0;
    double mi_y = 0.0;
    double en = 0.0;
    double sd = 0.0;
    double ssim_x = 0.0;
    double ssim_y = 0.0;
};

MetricReport fusion_metrics(const GrayImage& fused, const GrayImage& infrared, const GrayImage& visible);

// ---------------------------------------------------------------------------
// Detection metrics
// ---------------------------------------------------------------------------

double iou(const BoundingBox& a, const BoundingBox& b);

// Predictions and ground truth of one image. Matching never crosses images.
struct DetectionSample {
    std::vector<BoundingBox> predictions;
    std::vector<BoundingBox> ground_truth;
};

// All-point interpolated AP for one class.
double average_precision(std::span<const DetectionSample> samples, int class_id, double iou_threshold = 0.5);
double average_precision(std::span<const BoundingBox> predictions, std::span<const BoundingBox> ground_truth,
                         double iou_threshold = 0.5);

struct MapResult {
    std::vector<std::pair<int, double>> per_class;  // (class_id, AP) for classes with ground truth
    double map = 0.0;
};

// Unweighted mean of AP@0.5 over classes with at least one ground-truth box.
MapResult map50(std::span<const DetectionSample> samples);

}  // namespace dualfuse
