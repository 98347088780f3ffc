#include "dualfuse/signalops.hpp"

#include <cmath>
#include <cstdlib>

namespace dualfuse {

namespace F = torch::nn::functional;

Histogram256 histogram256(std::span<const uint8_t> levels) {
    Histogram256 hist;
    for (uint8_t q : levels) ++hist.counts[q];
    hist.total = static_cast<int64_t>(levels.size());
    return hist;
}

Histogram256 histogram256(const GrayImage& image) { return histogram256(quantize(image.data())); }

std::array<double, 256> saliency_lut(const Histogram256& hist) {
    std::array<double, 256> lut{};
    for (int q = 0; q < 256; ++q) {
        double s = 0.0;
        for (int i = 0; i < 256; ++i) s += static_cast<double>(hist.counts[i]) * std::abs(q - i);
        lut[q] = s;
    }
    return lut;
}

SaliencyMap saliency_map(const GrayImage& image) {
    const auto levels = quantize(image.data());
    const auto lut = saliency_lut(histogram256(levels));
    SaliencyMap map{image.height(), image.width(), std::vector<double>(levels.size())};
    for (std::size_t k = 0; k < levels.size(); ++k) map.data[k] = lut[levels[k]];
    return map;
}

namespace {

torch::Tensor quantize_levels(const torch::Tensor& images) {
    return torch::floor(images.detach().to(torch::kDouble) * 255.0 + 0.5).clamp(0, 255).to(torch::kLong);
}

void require_same_sizes(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
    if (a.sizes() != b.sizes()) {
        throw ShapeError(std::string(op) + ": " + shape_string(a) + " vs " + shape_string(b));
    }
}

}  // namespace

torch::Tensor saliency_map(const torch::Tensor& images) {
    if (images.dim() < 2) throw ShapeError("saliency_map: expected an image tensor, got " + shape_string(images));
    const int64_t n = images.dim() == 4 ? images.size(0) : 1;
    auto levels = quantize_levels(images).reshape({n, -1});
    auto hist = torch::zeros({n, 256}, torch::kDouble);
    hist.scatter_add_(1, levels, torch::ones(levels.sizes(), torch::kDouble));
    auto grid = torch::arange(256, torch::kDouble);
    auto distance = (grid.unsqueeze(0) - grid.unsqueeze(1)).abs();  // [q, i]
    auto lut = torch::matmul(hist, distance);                          // [n, q]
    return lut.gather(1, levels).reshape(images.sizes()).to(images.scalar_type());
}

SdwWeights sdw_weights(const SaliencyMap& s_x, const SaliencyMap& s_y) {
    if (s_x.height != s_y.height || s_x.width != s_y.width) {
        throw ShapeError("sdw_weights: " + Shape{s_x.height, s_x.width}.str() + " vs " +
                         Shape{s_y.height, s_y.width}.str());
    }
    SdwWeights w{std::vector<double>(s_x.data.size()), std::vector<double>(s_x.data.size())};
    for (std::size_t k = 0; k < w.w1.size(); ++k) {
        w.w1[k] = s_x.data[k] / (s_x.data[k] + s_y.data[k] + kSdwEpsilon);
        w.w2[k] = 1.0 - w.w1[k];
    }
    return w;
}

std::pair<torch::Tensor, torch::Tensor> sdw_weights(const torch::Tensor& s_x, const torch::Tensor& s_y) {
    require_same_sizes(s_x, s_y, "sdw_weights");
    auto w1 = s_x / (s_x + s_y + kSdwEpsilon);
    return {w1, 1.0 - w1};
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

namespace {

torch::Tensor gaussian_window(const SsimOptions& o, const torch::TensorOptions& options) {
    auto coords = torch::arange(o.window, torch::kDouble) - static_cast<double>(o.window - 1) / 2.0;
    auto g = torch::exp(-(coords * coords) / (2.0 * o.sigma * o.sigma));
    g = g / g.sum();
    return torch::outer(g, g).reshape({1, 1, o.window, o.window}).to(options);
}

}  // namespace

torch::Tensor ssim_per_sample(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& o) {
    require_same_sizes(a, b, "ssim");
    if (a.dim() != 4 || a.size(1) != 1) throw ShapeError("ssim: expected Nx1xHxW, got " + shape_string(a));
    if (a.size(2) < o.window || a.size(3) < o.window) {
        throw ShapeError("ssim: image " + shape_string(a) + " is smaller than the " + std::to_string(o.window) +
                         "x" + std::to_string(o.window) + " window");
    }
    const double c1 = (o.k1) * (o.k1);
    const double c2 = (o.k2) * (o.k2);
    auto window = gaussian_window(o, a.options().requires_grad(false));
    auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, window); };

    auto mu_a = filt(a);
    auto mu_b = filt(b);
    auto var_a = filt(a * a) - mu_a * mu_a;
    auto var_b = filt(b * b) - mu_b * mu_b;
    auto cov = filt(a * b) - mu_a * mu_b;
    auto map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
               ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    return map.mean({1, 2, 3});
}

torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& options) {
    return ssim_per_sample(a, b, options).mean();
}

double ssim(const GrayImage& a, const GrayImage& b) {
    if (a.shape() != b.shape()) throw ShapeError("ssim: " + a.shape().str() + " vs " + b.shape().str());
    torch::NoGradGuard no_grad;
    return ssim(to_tensor(a, torch::kDouble), to_tensor(b, torch::kDouble)).item<double>();
}

// ---------------------------------------------------------------------------
// Sobel
// ---------------------------------------------------------------------------

torch::Tensor sobel_gradient(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 1) {
        throw ShapeError("sobel_gradient: expected Nx1xHxW, got " + shape_string(images));
    }
    auto kx = torch::tensor({-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0}, torch::kDouble).reshape({3, 3});
    auto kernels = torch::stack({kx, kx.t()}).unsqueeze(1).to(images.options().requires_grad(false));
    auto padded = F::pad(images, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReflect));
    auto g = F::conv2d(padded, kernels);
    auto gx = g.narrow(1, 0, 1);
    auto gy = g.narrow(1, 1, 1);
    return torch::sqrt(gx * gx + gy * gy + kSobelDelta);
}

std::vector<double> sobel_gradient(const GrayImage& image) {
    torch::NoGradGuard no_grad;
    auto g = sobel_gradient(to_tensor(image, torch::kDouble)).contiguous();
    const double* p = g.data_ptr<double>();
    return {p, p + g.numel()};
}

}  // namespace dualfuse
