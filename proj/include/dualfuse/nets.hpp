#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "dualfuse/imagecore.hpp"

namespace dualfuse {

// ---------------------------------------------------------------------------
// Fusion generator: 5-layer dense block over the concatenated (ir, vis)
// input, then a 3-conv merge block and a scaled tanh into [0,1].
// ---------------------------------------------------------------------------

struct GeneratorOptions {
    int64_t dense_layers = 5;
    int64_t growth = 16;
    int64_t merge_width = 32;
    int64_t merge_mid = 16;
};

class GeneratorImpl : public torch::nn::Module {
public:
    explicit GeneratorImpl(const GeneratorOptions& options = {});

    // infrared, visible: Nx1xHxW in [0,1]. Returns Nx1xHxW in [0,1].
    torch::Tensor forward(const torch::Tensor& infrared, const torch::Tensor& visible);

    const GeneratorOptions& options() const { return options_; }

private:
    GeneratorOptions options_;
    std::vector<torch::nn::Sequential> dense_;
    torch::nn::Sequential merge_{nullptr};
    torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(Generator);

// ---------------------------------------------------------------------------
// Wasserstein critic: four stride-2 3x3 convs with leaky ReLU, one linear
// layer to an unbounded score. No normalization layers.
// ---------------------------------------------------------------------------

struct CriticOptions {
    int64_t height = 64;
    int64_t width = 64;
    std::array<int64_t, 4> channels{16, 32, 64, 64};
    double slope = 0.2;
};

inline constexpr int64_t kMinCriticSide = 16;

class CriticImpl : public torch::nn::Module {
public:
    explicit CriticImpl(const CriticOptions& options = {});

    // Nx1xHxW, H and W as constructed. Returns N scores.
    torch::Tensor forward(const torch::Tensor& patch);

    const CriticOptions& options() const { return options_; }

private:
    CriticOptions options_;
    torch::nn::Sequential features_{nullptr};
    torch::nn::Linear score_{nullptr};
};
TORCH_MODULE(Critic);

// ---------------------------------------------------------------------------
// Toy single-scale anchor-free detector. Four stride-2 convs put one grid
// cell on every 16x16 block; a 1x1 head emits per cell
// [objectness, tx, ty, tw, th, class logits...].
// ---------------------------------------------------------------------------

inline constexpr int64_t kDetectorStride = 16;

struct DetectorOptions {
    int64_t num_classes = 3;
    std::array<int64_t, 4> channels{16, 32, 64, 64};
    double slope = 0.1;
    double objectness_prior = 0.01;  // initial sigmoid(objectness)
};

class DetectorImpl : public torch::nn::Module {
public:
    explicit DetectorImpl(const DetectorOptions& options = {});

    // Nx1xHxW with H, W divisible by 16. Returns Nx(5+C)x(H/16)x(W/16).
    torch::Tensor forward(const torch::Tensor& image);

    int64_t num_classes() const { return options_.num_classes; }
    const DetectorOptions& options() const { return options_; }

private:
    DetectorOptions options_;
    torch::nn::Sequential backbone_{nullptr};
    torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(Detector);

// Box coding shared by decoding and the detection loss. A box is assigned
// to the cell containing its center; the regression targets are the
// fractional center offset inside that cell and log(size / stride).
struct CellAssignment {
    int64_t row = 0;
    int64_t col = 0;
    std::array<double, 4> target{};  // offset_x, offset_y, log_w, log_h
};

CellAssignment encode_box(const BoundingBox& box);
BoundingBox decode_cell(int64_t row, int64_t col, double offset_x, double offset_y, double log_w, double log_h);

struct DecodeOptions {
    double conf_threshold = 0.25;
    double nms_iou = 0.45;
};

// One list per batch element: score = sigmoid(objectness) * max softmax
// class probability, thresholded, per-class greedy NMS, clipped to the image.
std::vector<std::vector<BoundingBox>> decode_detections(const torch::Tensor& raw, const DecodeOptions& options = {});

// Greedy NMS on scored boxes of any classes; suppression only within a class.
std::vector<BoundingBox> non_max_suppression(std::vector<BoundingBox> boxes, double iou_threshold);

// Seeded initialization: Kaiming-uniform conv/linear weights (gain from each
// layer's activation slope), zero biases, unit batch-norm scale.
void initialize_generator(GeneratorImpl& net, uint64_t seed);
void initialize_critic(CriticImpl& net, uint64_t seed);
void initialize_detector(DetectorImpl& net, uint64_t seed);

int64_t parameter_count(const torch::nn::Module& module);

// Temporarily stops gradient tracking on a module's parameters.
class FrozenParameters {
public:
    explicit FrozenParameters(torch::nn::Module& module);
    ~FrozenParameters();
    FrozenParameters(const FrozenParameters&) = delete;
    FrozenParameters& operator=(const FrozenParameters&) = delete;

private:
    std::vector<std::pair<torch::Tensor, bool>> saved_;
};

}  // namespace dualfuse
