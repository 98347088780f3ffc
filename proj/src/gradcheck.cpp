#include "dualfuse/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "dualfuse/signalops.hpp"
#include "dualfuse/synth.hpp"

namespace dualfuse {

namespace {

at::Generator trial_generator(uint64_t seed, uint64_t salt, int64_t trial) {
    return at::make_generator<at::CPUGeneratorImpl>(seed * 1000003ULL + salt * 7919ULL + static_cast<uint64_t>(trial));
}

torch::Tensor random_image(at::Generator& gen, int64_t n, int64_t side) {
    return 0.1 + 0.8 * torch::rand({n, 1, side, side}, gen, torch::kDouble);
}

torch::Tensor random_mask(at::Generator& gen, int64_t n, int64_t side) {
    return (torch::rand({n, 1, side, side}, gen, torch::kDouble) > 0.5).to(torch::kDouble);
}

double to_double(const torch::Tensor& t) { return t.detach().to(torch::kDouble).item<double>(); }

// Draws points until `near_kink` rejects none of them, then compares.
template <class Draw, class Kink>
GradcheckSuiteResult run_suite(const std::string& name, const GradcheckOptions& options, Draw draw, Kink near_kink) {
    const auto start = std::chrono::steady_clock::now();
    GradcheckSuiteResult result;
    result.name = name;
    result.tolerance = options.tolerance;
    for (int64_t trial = 0; trial < options.trials; ++trial) {
        for (int64_t attempt = 0;; ++attempt) {
            if (attempt > options.max_resamples) {
                throw Error(name + ": no kink-free point after " + std::to_string(options.max_resamples) + " draws");
            }
            auto [f, point] = draw(trial, attempt);
            if (near_kink(point, options.epsilon)) {
                ++result.resampled;
                continue;
            }
            const auto cmp = compare_gradients(f, point, options.epsilon);
            result.max_relative_error = std::max(result.max_relative_error, cmp.max_relative_error);
            ++result.trials;
            break;
        }
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

auto no_kink = [](const torch::Tensor&, double) { return false; };

}  // namespace

FiniteDifferenceResult compare_gradients(const ScalarFn& f, const torch::Tensor& point, double eps) {
    auto x = point.detach().to(torch::kDouble).clone().requires_grad_(true);
    auto value = f(x);
    auto grads = torch::autograd::grad({value}, {x}, {}, false, false, /*allow_unused=*/true);
    auto analytic = grads[0].defined() ? grads[0].detach().contiguous() : torch::zeros_like(x);

    auto probe = x.detach().clone().contiguous();
    auto flat = probe.view({-1});
    auto a = analytic.view({-1});
    FiniteDifferenceResult result;
    for (int64_t i = 0; i < flat.numel(); ++i) {
        const double original = flat[i].item<double>();
        flat[i] = original + eps;
        const double plus = to_double(f(probe));
        flat[i] = original - eps;
        const double minus = to_double(f(probe));
        flat[i] = original;
        const double numeric = (plus - minus) / (2.0 * eps);
        const double exact = a[i].item<double>();
        const double abs_err = std::abs(exact - numeric);
        const double denom = std::max({std::abs(exact), std::abs(numeric), kRelativeErrorFloor});
        result.max_abs_error = std::max(result.max_abs_error, abs_err);
        result.max_relative_error = std::max(result.max_relative_error, abs_err / denom);
    }
    return result;
}

CriticFn smooth_test_critic(int64_t height, int64_t width, uint64_t seed, int64_t features) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    const int64_t d = height * width;
    auto w = torch::randn({features, d}, gen, torch::kDouble) * (2.0 / std::sqrt(static_cast<double>(d)));
    auto b = torch::randn({features}, gen, torch::kDouble) * 0.1;
    auto v = torch::randn({features}, gen, torch::kDouble);
    return [w, b, v](const torch::Tensor& z) {
        auto flat = z.reshape({z.size(0), -1});
        auto opts = flat.options().requires_grad(false);
        return torch::matmul(torch::tanh(torch::matmul(flat, w.to(opts).t()) + b.to(opts)), v.to(opts));
    };
}

nlohmann::json GradcheckSuiteResult::to_json() const {
    return {{"suite", name},
            {"trials", trials},
            {"resampled", resampled},
            {"max_relative_error", max_relative_error},
            {"tolerance", tolerance},
            {"passed", passed()},
            {"seconds", seconds}};
}

GradcheckSuiteResult gradcheck_ssim_loss(const GradcheckOptions& options) {
    return run_suite(
        "ssim_loss", options,
        [&](int64_t trial, int64_t attempt) {
            auto gen = trial_generator(options.seed, 1 + 100 * attempt, trial);
            auto x = random_image(gen, 2, 16);
            auto y = random_image(gen, 2, 16);
            auto u = random_image(gen, 2, 16);
            ScalarFn f = [x, y](const torch::Tensor& t) { return ssim_loss(t, x, y); };
            return std::make_pair(f, u);
        },
        no_kink);
}

GradcheckSuiteResult gradcheck_pixel_loss(const GradcheckOptions& options) {
    torch::Tensor x, y;
    return run_suite(
        "pixel_loss", options,
        [&](int64_t trial, int64_t attempt) {
            auto gen = trial_generator(options.seed, 2 + 100 * attempt, trial);
            x = random_image(gen, 2, 8);
            y = random_image(gen, 2, 8);
            auto u = random_image(gen, 2, 8);
            ScalarFn f = [x, y](const torch::Tensor& t) { return pixel_loss(t, x, y, true); };
            return std::make_pair(f, u);
        },
        [&](const torch::Tensor& u, double eps) {
            auto [w1, w2] = sdw_weights(saliency_map(x), saliency_map(y));
            return (u - w1 * x).abs().min().item<double>() < 2 * eps || (u - w2 * y).abs().min().item<double>() < 2 * eps;
        });
}

GradcheckSuiteResult gradcheck_gen_adv_loss(const GradcheckOptions& options) {
    return run_suite(
        "gen_adv_loss", options,
        [&](int64_t trial, int64_t attempt) {
            auto gen = trial_generator(options.seed, 3 + 100 * attempt, trial);
            auto regions = mask_regions(random_mask(gen, 2, 8), true);
            auto u = random_image(gen, 2, 8);
            const auto critic_seed = options.seed * 31 + static_cast<uint64_t>(trial);
            CriticSet critics{smooth_test_critic(8, 8, critic_seed), smooth_test_critic(8, 8, critic_seed + 1)};
            ScalarFn f = [regions, critics](const torch::Tensor& t) { return gen_adv_loss(t, regions, critics); };
            return std::make_pair(f, u);
        },
        no_kink);
}

GradcheckSuiteResult gradcheck_critic_loss(const GradcheckOptions& options) {
    return run_suite(
        "critic_loss", options,
        [&](int64_t trial, int64_t attempt) {
            auto gen = trial_generator(options.seed, 4 + 100 * attempt, trial);
            auto x = random_image(gen, 2, 8);
            auto y = random_image(gen, 2, 8);
            auto regions = mask_regions(random_mask(gen, 2, 8), true);
            auto t = torch::rand({2}, gen, torch::kDouble);
            auto u = random_image(gen, 2, 8);
            const auto critic_seed = options.seed * 37 + static_cast<uint64_t>(trial);
            auto d_t = smooth_test_critic(8, 8, critic_seed);
            auto d_d = smooth_test_critic(8, 8, critic_seed + 1);
            ScalarFn f = [=](const torch::Tensor& v) {
                return critic_loss(CriticKind::target, x, v, regions, d_t, t).loss +
                       critic_loss(CriticKind::detail, y, v, regions, d_d, t).loss;
            };
            return std::make_pair(f, u);
        },
        no_kink);
}

GradcheckSuiteResult gradcheck_detection_loss(const GradcheckOptions& options) {
    constexpr int64_t kCells = 8;
    constexpr int64_t kClasses = 3;
    std::vector<std::vector<BoundingBox>> boxes;
    return run_suite(
        "detection_loss", options,
        [&](int64_t trial, int64_t attempt) {
            auto gen = trial_generator(options.seed, 5 + 100 * attempt, trial);
            const double side = static_cast<double>(kCells * kDetectorStride);
            boxes.assign(2, {});
            for (auto& list : boxes) {
                const int64_t count = 1 + torch::randint(4, {1}, gen, torch::kLong).item<int64_t>();
                for (int64_t i = 0; i < count; ++i) {
                    auto r = torch::rand({4}, gen, torch::kDouble);
                    const double w = 6.0 + 30.0 * r[0].item<double>();
                    const double h = 6.0 + 30.0 * r[1].item<double>();
                    const double x0 = (side - w) * r[2].item<double>();
                    const double y0 = (side - h) * r[3].item<double>();
                    const int cls = static_cast<int>(torch::randint(kClasses, {1}, gen, torch::kLong).item<int64_t>());
                    list.push_back(BoundingBox{.x_min = x0, .y_min = y0, .x_max = x0 + w, .y_max = y0 + h, .class_id = cls});
                }
            }
            auto raw = torch::randn({2, 5 + kClasses, kCells, kCells}, gen, torch::kDouble);
            auto gt = boxes;
            ScalarFn f = [gt](const torch::Tensor& t) { return detection_loss(t, gt); };
            return std::make_pair(f, raw);
        },
        [&](const torch::Tensor& raw, double eps) {
            for (std::size_t b = 0; b < boxes.size(); ++b) {
                for (const auto& box : boxes[b]) {
                    const auto cell = encode_box(box);
                    const auto at = [&](int64_t ch) { return raw[static_cast<int64_t>(b)][ch][cell.row][cell.col].item<double>(); };
                    const double px = 1.0 / (1.0 + std::exp(-at(1)));
                    const double py = 1.0 / (1.0 + std::exp(-at(2)));
                    if (std::abs(px - cell.target[0]) < 2 * eps || std::abs(py - cell.target[1]) < 2 * eps ||
                        std::abs(at(3) - cell.target[2]) < 2 * eps || std::abs(at(4) - cell.target[3]) < 2 * eps) {
                        return true;
                    }
                }
            }
            return false;
        });
}

std::vector<GradcheckSuiteResult> run_gradient_suites(const GradcheckOptions& options) {
    return {gradcheck_ssim_loss(options), gradcheck_pixel_loss(options), gradcheck_gen_adv_loss(options),
            gradcheck_critic_loss(options), gradcheck_detection_loss(options)};
}

TrainConfig tiny_model_config(uint64_t seed) {
    TrainConfig c;
    c.seed = seed;
    c.patch_size = 32;
    c.batch_size = 2;
    c.epochs = 1;
    c.dtype = torch::kDouble;
    c.generator.dense_layers = 2;
    c.generator.growth = 4;
    c.generator.merge_width = 8;
    c.generator.merge_mid = 4;
    return c;
}

Batch tiny_batch(const TrainConfig& config, int64_t count) {
    SynthConfig sc;
    sc.count = count;
    sc.image_size = config.patch_size;
    sc.min_targets = 1;
    sc.max_targets = 2;
    sc.min_target_side = 6;
    sc.max_target_side = 10;
    sc.num_classes = config.num_classes;
    sc.seed = config.seed;
    std::vector<AnnotatedPair> pairs;
    for (int64_t i = 0; i < count; ++i) pairs.push_back(synth_pair(sc, i));
    TrainingData data(std::move(pairs), MaskSource::ground_truth);
    std::vector<int64_t> indices(static_cast<std::size_t>(count));
    for (int64_t i = 0; i < count; ++i) indices[static_cast<std::size_t>(i)] = i;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed);
    return data.make_batch(indices, config.patch_size, config.dtype, gen);
}

nlohmann::json DecompositionCheck::to_json() const {
    return {{"lambda", lambda},
            {"cross_term_norm", report.cross_term_norm},
            {"fusion_term_norm", report.fusion_term_norm},
            {"max_residual", report.max_residual},
            {"tolerance", kDecompositionTolerance},
            {"passed", passed()}};
}

std::vector<DecompositionCheck> run_decomposition_checks(const std::vector<double>& lambdas, uint64_t seed) {
    std::vector<DecompositionCheck> out;
    for (double lambda : lambdas) {
        auto config = tiny_model_config(seed);
        config.weights.lambda = lambda;
        TrainState state(config);
        const auto batch = tiny_batch(config);
        out.push_back({lambda, gradient_decomposition_check(state, batch, lambda)});
    }
    return out;
}

}  // namespace dualfuse
