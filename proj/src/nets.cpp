#include "dualfuse/nets.hpp"

#include <algorithm>
#include <cmath>

#include "dualfuse/signalops.hpp"

namespace dualfuse {

namespace nn = torch::nn;

namespace {

nn::Conv2dOptions conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
    return nn::Conv2dOptions(in, out, 3).stride(stride).padding(1);
}

void check_finite(const torch::Tensor& t, const std::string& layer) {
    if (!torch::isfinite(t).all().item<bool>()) throw ValueError("non-finite activation after layer '" + layer + "'");
}

int64_t halved(int64_t side, int times) {
    for (int i = 0; i < times; ++i) side = (side + 1) / 2;
    return side;
}

double kaiming_bound(int64_t fan_in, double slope) {
    const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
    return gain * std::sqrt(3.0 / static_cast<double>(fan_in));
}

void init_module(nn::Module& root, uint64_t seed, double slope) {
    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    for (auto& item : root.named_modules("", /*include_self=*/true)) {
        auto& m = item.value();
        if (auto* conv = m->as<nn::Conv2d>()) {
            const int64_t fan_in = conv->weight.size(1) * conv->weight.size(2) * conv->weight.size(3);
            const double b = kaiming_bound(fan_in, slope);
            conv->weight.copy_(torch::empty(conv->weight.sizes(), torch::kDouble).uniform_(-b, b, gen));
            if (conv->bias.defined()) conv->bias.zero_();
        } else if (auto* lin = m->as<nn::Linear>()) {
            const double b = kaiming_bound(lin->weight.size(1), slope);
            lin->weight.copy_(torch::empty(lin->weight.sizes(), torch::kDouble).uniform_(-b, b, gen));
            if (lin->bias.defined()) lin->bias.zero_();
        } else if (auto* bn = m->as<nn::BatchNorm2d>()) {
            bn->weight.fill_(1.0);
            bn->bias.zero_();
            bn->reset_running_stats();
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

GeneratorImpl::GeneratorImpl(const GeneratorOptions& options) : options_(options) {
    if (options_.dense_layers < 1 || options_.growth < 1 || options_.merge_width < 1 || options_.merge_mid < 1) {
        throw ValueError("generator widths must be positive");
    }
    int64_t channels = 2;
    for (int64_t i = 0; i < options_.dense_layers; ++i) {
        nn::Sequential layer(nn::Conv2d(conv3x3(channels, options_.growth)), nn::BatchNorm2d(options_.growth),
                             nn::ReLU());
        dense_.push_back(register_module("dense" + std::to_string(i), layer));
        channels += options_.growth;
    }
    merge_ = register_module("merge", nn::Sequential(nn::Conv2d(conv3x3(channels, options_.merge_width)),
                                                     nn::BatchNorm2d(options_.merge_width), nn::ReLU(),
                                                     nn::Conv2d(conv3x3(options_.merge_width, options_.merge_mid)),
                                                     nn::BatchNorm2d(options_.merge_mid), nn::ReLU()));
    out_ = register_module("out", nn::Conv2d(conv3x3(options_.merge_mid, 1)));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& infrared, const torch::Tensor& visible) {
    if (infrared.sizes() != visible.sizes()) {
        throw ShapeError("generator: infrared " + shape_string(infrared) + " vs visible " + shape_string(visible));
    }
    if (infrared.dim() != 4 || infrared.size(1) != 1) {
        throw ShapeError("generator: expected Nx1xHxW, got " + shape_string(infrared));
    }
    auto features = torch::cat({infrared, visible}, 1);
    for (std::size_t i = 0; i < dense_.size(); ++i) {
        auto out = dense_[i]->forward(features);
        check_finite(out, "dense" + std::to_string(i));
        features = torch::cat({features, out}, 1);
    }
    auto merged = merge_->forward(features);
    check_finite(merged, "merge");
    auto logits = out_->forward(merged);
    check_finite(logits, "out");
    return 0.5 * (torch::tanh(logits) + 1.0);
}

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

CriticImpl::CriticImpl(const CriticOptions& options) : options_(options) {
    if (options_.height < kMinCriticSide || options_.width < kMinCriticSide) {
        throw ShapeError("critic input " + Shape{options_.height, options_.width}.str() + " is below " +
                         std::to_string(kMinCriticSide));
    }
    nn::Sequential features;
    int64_t in = 1;
    for (int64_t c : options_.channels) {
        features->push_back(nn::Conv2d(conv3x3(in, c, 2)));
        features->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(options_.slope)));
        in = c;
    }
    features_ = register_module("features", features);
    const int64_t flat = in * halved(options_.height, 4) * halved(options_.width, 4);
    score_ = register_module("score", nn::Linear(flat, 1));
}

torch::Tensor CriticImpl::forward(const torch::Tensor& patch) {
    if (patch.dim() != 4 || patch.size(1) != 1) throw ShapeError("critic: expected Nx1xHxW, got " + shape_string(patch));
    if (patch.size(2) < kMinCriticSide || patch.size(3) < kMinCriticSide) {
        throw ShapeError("critic: input " + shape_string(patch) + " is undersized (minimum side " +
                         std::to_string(kMinCriticSide) + ")");
    }
    if (patch.size(2) != options_.height || patch.size(3) != options_.width) {
        throw ShapeError("critic: input " + shape_string(patch) + " does not match the constructed " +
                         Shape{options_.height, options_.width}.str());
    }
    auto h = features_->forward(patch);
    return score_->forward(h.flatten(1)).squeeze(1);
}

// ---------------------------------------------------------------------------
// Detector
// ---------------------------------------------------------------------------

DetectorImpl::DetectorImpl(const DetectorOptions& options) : options_(options) {
    if (options_.num_classes < 1) throw ValueError("detector needs at least one class");
    nn::Sequential backbone;
    int64_t in = 1;
    for (int64_t c : options_.channels) {
        backbone->push_back(nn::Conv2d(conv3x3(in, c, 2)));
        backbone->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(options_.slope)));
        in = c;
    }
    backbone_ = register_module("backbone", backbone);
    head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(in, 5 + options_.num_classes, 1)));
}

torch::Tensor DetectorImpl::forward(const torch::Tensor& image) {
    if (image.dim() != 4 || image.size(1) != 1) throw ShapeError("detector: expected Nx1xHxW, got " + shape_string(image));
    if (image.size(2) % kDetectorStride != 0 || image.size(3) % kDetectorStride != 0) {
        throw ShapeError("detector: input " + shape_string(image) + " sides must be divisible by " +
                         std::to_string(kDetectorStride));
    }
    return head_->forward(backbone_->forward(image));
}

// ---------------------------------------------------------------------------
// Box coding and decoding
// ---------------------------------------------------------------------------

CellAssignment encode_box(const BoundingBox& box) {
    const double stride = static_cast<double>(kDetectorStride);
    const double gx = box.center_x() / stride;
    const double gy = box.center_y() / stride;
    CellAssignment a;
    a.col = static_cast<int64_t>(std::floor(gx));
    a.row = static_cast<int64_t>(std::floor(gy));
    a.target = {gx - static_cast<double>(a.col), gy - static_cast<double>(a.row), std::log(box.width() / stride),
                std::log(box.height() / stride)};
    return a;
}

BoundingBox decode_cell(int64_t row, int64_t col, double offset_x, double offset_y, double log_w, double log_h) {
    const double stride = static_cast<double>(kDetectorStride);
    const double cx = (static_cast<double>(col) + offset_x) * stride;
    const double cy = (static_cast<double>(row) + offset_y) * stride;
    const double w = stride * std::exp(std::clamp(log_w, -10.0, 10.0));
    const double h = stride * std::exp(std::clamp(log_h, -10.0, 10.0));
    return BoundingBox{.x_min = cx - 0.5 * w, .y_min = cy - 0.5 * h, .x_max = cx + 0.5 * w, .y_max = cy + 0.5 * h};
}

std::vector<BoundingBox> non_max_suppression(std::vector<BoundingBox> boxes, double iou_threshold) {
    std::ranges::stable_sort(boxes, std::greater<>{}, [](const BoundingBox& b) { return b.score.value_or(0.0); });
    std::vector<BoundingBox> kept;
    for (const auto& b : boxes) {
        const bool suppressed = std::ranges::any_of(
            kept, [&](const BoundingBox& k) { return k.class_id == b.class_id && iou(k, b) > iou_threshold; });
        if (!suppressed) kept.push_back(b);
    }
    return kept;
}

std::vector<std::vector<BoundingBox>> decode_detections(const torch::Tensor& raw, const DecodeOptions& options) {
    if (raw.dim() != 4 || raw.size(1) < 6) throw ShapeError("decode_detections: bad raw grid " + shape_string(raw));
    auto r = raw.detach().to(torch::kCPU, torch::kDouble).contiguous();
    const int64_t n = r.size(0);
    const int64_t classes = r.size(1) - 5;
    const int64_t rows = r.size(2);
    const int64_t cols = r.size(3);
    const Shape image{rows * kDetectorStride, cols * kDetectorStride};

    auto objectness = torch::sigmoid(r.select(1, 0));
    auto offsets = torch::sigmoid(r.narrow(1, 1, 2));
    auto sizes = r.narrow(1, 3, 2);
    auto probs = torch::softmax(r.narrow(1, 5, classes), 1);
    auto [best_prob, best_class] = probs.max(1);

    auto obj = objectness.accessor<double, 3>();
    auto off = offsets.accessor<double, 4>();
    auto sz = sizes.accessor<double, 4>();
    auto bp = best_prob.accessor<double, 3>();
    auto bc = best_class.accessor<int64_t, 3>();

    std::vector<std::vector<BoundingBox>> out(static_cast<std::size_t>(n));
    for (int64_t b = 0; b < n; ++b) {
        std::vector<BoundingBox> candidates;
        for (int64_t i = 0; i < rows; ++i) {
            for (int64_t j = 0; j < cols; ++j) {
                const double score = obj[b][i][j] * bp[b][i][j];
                if (!(score >= options.conf_threshold)) continue;
                auto box = decode_cell(i, j, off[b][0][i][j], off[b][1][i][j], sz[b][0][i][j], sz[b][1][i][j]).clipped(image);
                if (!(box.x_min < box.x_max && box.y_min < box.y_max)) continue;
                box.class_id = static_cast<int>(bc[b][i][j]);
                box.score = score;
                candidates.push_back(box);
            }
        }
        out[static_cast<std::size_t>(b)] = non_max_suppression(std::move(candidates), options.nms_iou);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Initialization helpers
// ---------------------------------------------------------------------------

void initialize_generator(GeneratorImpl& net, uint64_t seed) { init_module(net, seed, 0.0); }

void initialize_critic(CriticImpl& net, uint64_t seed) { init_module(net, seed, net.options().slope); }

void initialize_detector(DetectorImpl& net, uint64_t seed) {
    init_module(net, seed, net.options().slope);
    torch::NoGradGuard no_grad;
    const double p = net.options().objectness_prior;
    for (auto& item : net.named_parameters()) {
        if (item.key() == "head.bias") item.value()[0].fill_(std::log(p / (1.0 - p)));
    }
}

int64_t parameter_count(const torch::nn::Module& module) {
    int64_t total = 0;
    for (const auto& p : module.parameters()) total += p.numel();
    return total;
}

FrozenParameters::FrozenParameters(torch::nn::Module& module) {
    for (auto& p : module.parameters()) {
        saved_.emplace_back(p, p.requires_grad());
        p.set_requires_grad(false);
    }
}

FrozenParameters::~FrozenParameters() {
    for (auto& [p, flag] : saved_) p.set_requires_grad(flag);
}

}  // namespace dualfuse
