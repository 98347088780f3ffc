#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "dualfuse/evaluation.hpp"
#include "dualfuse/gradcheck.hpp"
#include "dualfuse/signalops.hpp"
#include "dualfuse/synth.hpp"
#include "dualfuse/trainloop.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace dualfuse;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double elapsed(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

std::string fmt(const char* format, double a = 0, double b = 0, double c = 0, double d = 0) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), format, a, b, c, d);
    return buf;
}

// ---------------------------------------------------------------------------

Outcome metric_oracles() {
    const auto start = Clock::now();
    double worst = 0.0;
    auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
    std::vector<GrayImage> images;
    for (uint64_t s = 0; s < 50; ++s) images.push_back(oracle::random_image(1000 + s, 32, 32));
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& img = images[i];
        const auto lv = oracle::levels(img);
        track(entropy_metric(img), oracle::entropy(lv));
        track(sd_metric(img), oracle::standard_deviation(lv));
        const auto& other = images[(i + 1) % images.size()];
        track(mi_metric(img, other), oracle::mutual_information(lv, oracle::levels(other)));
        const auto sal = saliency_map(img);
        const auto ref = oracle::saliency(lv);
        for (std::size_t k = 0; k < ref.size(); ++k) track(sal.data[k], ref[k]);
        const auto h = histogram256(img);
        const auto hr = oracle::histogram(lv);
        for (int k = 0; k < 256; ++k) track(static_cast<double>(h.counts[k]), static_cast<double>(hr[k]));
    }
    const double t = elapsed(start);
    return {worst <= 1e-9 && t < 30.0, fmt("max_abs_err=%.3g (tol 1e-9), runtime=%.2fs (limit 30s)", worst, t)};
}

Outcome metric_identities() {
    const auto x = oracle::random_image(77, 32, 32);
    const double mi_en = std::abs(mi_metric(x, x) - entropy_metric(x));
    const double ssim_self = std::abs(ssim(x, x) - 1.0);
    const auto constant = GrayImage::filled(32, 32, 0.42);
    const double en_c = entropy_metric(constant);
    const double sd_c = sd_metric(constant);
    const double iou_err = std::abs(iou({.x_min = 0, .y_min = 0, .x_max = 10, .y_max = 10},
                                        {.x_min = 5, .y_min = 5, .x_max = 15, .y_max = 15}) -
                                    1.0 / 7.0);
    const bool pass = mi_en <= 1e-9 && ssim_self <= 1e-9 && en_c == 0.0 && sd_c == 0.0 && iou_err <= 1e-12;
    return {pass, fmt("|MI(x,x)-EN(x)|=%.3g, |SSIM(x,x)-1|=%.3g, EN/SD(const)=%g/%g", mi_en, ssim_self, en_c, sd_c) +
                      fmt(", |IoU-1/7|=%.3g", iou_err)};
}

Outcome gradient_suite() {
    const auto start = Clock::now();
    GradcheckOptions options;
    options.trials = 10;
    bool pass = true;
    std::string detail;
    for (const auto& s : run_gradient_suites(options)) {
        pass = pass && s.passed() && s.trials == 10;
        detail += s.name + "=" + fmt("%.2g", s.max_relative_error) + " ";
    }
    const double t = elapsed(start);
    pass = pass && t < 120.0;
    return {pass, detail + fmt("(tol 1e-3, 10 trials each), runtime=%.1fs (limit 120s)", t)};
}

Outcome decomposition() {
    const auto start = Clock::now();
    bool pass = true;
    std::string detail;
    for (const auto& d : run_decomposition_checks({0.0, 0.5, 1.0}, 0)) {
        pass = pass && d.passed();
        detail += fmt("lambda=%.1f residual=%.2g; ", d.lambda, d.report.max_residual);
    }
    const double t = elapsed(start);
    pass = pass && t < 30.0;
    return {pass, detail + fmt("tol 1e-6, runtime=%.2fs (limit 30s)", t)};
}

Outcome linear_critic_penalty() {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        auto w = torch::randn({256}, gen, torch::kDouble);
        w = w / w.norm();
        CriticFn linear = [w](const torch::Tensor& z) { return torch::matmul(z.reshape({z.size(0), -1}), w); };
        auto x = torch::rand({4, 1, 16, 16}, gen, torch::kDouble);
        auto u = torch::rand({4, 1, 16, 16}, gen, torch::kDouble);
        auto mask = (torch::rand({4, 1, 16, 16}, gen, torch::kDouble) > 0.5).to(torch::kDouble);
        for (auto which : {CriticKind::target, CriticKind::detail}) {
            const auto terms = critic_loss(which, x, u, mask_regions(mask), linear, gen, 2.0, 6.0);
            worst = std::max(worst, std::abs(terms.penalty.item<double>() - 2.0));
        }
    }
    return {worst <= 1e-9, fmt("max |penalty - 2| = %.3g (tol 1e-9, k=2, p=6)", worst)};
}

Outcome loss_assembly() {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(6);
    Critic dt(CriticOptions{.height = 32, .width = 32});
    Critic dd(CriticOptions{.height = 32, .width = 32});
    initialize_critic(*dt, 1);
    initialize_critic(*dd, 2);
    dt->to(torch::kDouble);
    dd->to(torch::kDouble);
    CriticSet critics{[dt](const torch::Tensor& t) mutable { return dt->forward(t); },
                      [dd](const torch::Tensor& t) mutable { return dd->forward(t); }};
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        auto x = torch::rand({2, 1, 32, 32}, gen, torch::kDouble);
        auto y = torch::rand({2, 1, 32, 32}, gen, torch::kDouble);
        auto u = torch::rand({2, 1, 32, 32}, gen, torch::kDouble);
        auto regions = mask_regions((torch::rand({2, 1, 32, 32}, gen, torch::kDouble) > 0.5).to(torch::kDouble));
        const LossWeights weights;
        const auto total = fusion_total_loss(u, x, y, regions, critics, weights).total_fusion.item<double>();
        const double manual = ssim_loss(u, x, y).item<double>() + 20.0 * pixel_loss(u, x, y).item<double>() +
                              0.1 * gen_adv_loss(u, regions, critics).item<double>();
        worst = std::max(worst, std::abs(total - manual));
    }
    return {worst <= 1e-9, fmt("max |total - (ssim + 20 pixel + 0.1 adv)| = %.3g (tol 1e-9)", worst)};
}

TrainingData synth_data(int64_t count, uint64_t seed, int64_t size, Split split = Split::train) {
    SynthConfig sc;
    sc.count = count;
    sc.image_size = size;
    sc.seed = seed;
    sc.split = split;
    std::vector<AnnotatedPair> pairs;
    for (int64_t i = 0; i < count; ++i) pairs.push_back(synth_pair(sc, i));
    return TrainingData(std::move(pairs), MaskSource::ground_truth);
}

bool same_parameters(torch::nn::Module& a, torch::nn::Module& b) {
    auto pa = a.parameters(), pb = b.parameters();
    auto ba = a.buffers(), bb = b.buffers();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (!torch::equal(pa[i], pb[i])) return false;
    }
    for (std::size_t i = 0; i < ba.size(); ++i) {
        if (!torch::equal(ba[i], bb[i])) return false;
    }
    return true;
}

Outcome strategy_equivalences() {
    const auto start = Clock::now();
    const auto data = synth_data(16, 21, 64);
    TrainConfig ct;
    ct.strategy = Strategy::ct;
    ct.weights.lambda = 0.0;
    ct.flags.use_dt_critic = ct.flags.use_dd_critic = false;
    ct.batch_size = 8;
    ct.epochs = 1;
    ct.seed = 4;
    auto tt = ct;
    tt.strategy = Strategy::tt;
    TrainState a(ct), b(tt);
    train(a, data);
    train(b, data);
    const bool ct_tt = same_parameters(*a.generator, *b.generator) && same_parameters(*a.detector, *b.detector) && a.step == 2;

    TrainConfig dt;
    dt.strategy = Strategy::dt;
    dt.batch_size = 8;
    dt.epochs = 1;
    dt.train_detector = true;
    dt.seed = 4;
    TrainState s(dt);
    train(s, data);
    TrainState before(dt);
    for (auto [dst, src] : {std::pair{before.generator->parameters(), s.generator->parameters()},
                            std::pair{before.generator->buffers(), s.generator->buffers()}}) {
        torch::NoGradGuard no_grad;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i].copy_(src[i]);
    }
    train_detector_on_frozen(s, data);
    const bool dt_isolated = same_parameters(*before.generator, *s.generator) && s.counters.detection_updates_to_generator == 0 &&
                             s.counters.detector_updates > 0;
    const double t = elapsed(start);
    return {ct_tt && dt_isolated && t < 60.0,
            std::string("ct(lambda=0, no critics) == tt bitwise: ") + (ct_tt ? "yes" : "no") +
                "; dt detector phase leaves generator bitwise: " + (dt_isolated ? "yes" : "no") +
                fmt("; runtime=%.1fs (limit 60s)", t)};
}

// Mean over val pairs of per-pair region statistics of the fused output.
struct FusedStats {
    int64_t fidelity_ok = 0;     // mean|u-x| < mean|u-y| inside the mask
    int64_t texture_ok = 0;      // corr(grad u, grad y) > corr(grad u, grad x) in the background
    int64_t both_ok = 0;
    int64_t pairs = 0;
    double contrast = 0.0;       // mean over pairs of mean(u | mask) - mean(u | background)
    double corr_y = 0.0;         // mean over pairs of corr(grad u, grad y) in the background
    double corr_x = 0.0;
};

// Background pixels whose 3x3 Sobel footprint does not touch the mask.
std::vector<bool> clear_background(const TargetMask& mask) {
    const int64_t h = mask.height(), w = mask.width();
    std::vector<bool> clear(static_cast<std::size_t>(h * w), true);
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            for (int64_t dr = -1; dr <= 1; ++dr) {
                for (int64_t dc = -1; dc <= 1; ++dc) {
                    const int64_t rr = std::clamp<int64_t>(r + dr, 0, h - 1), cc = std::clamp<int64_t>(c + dc, 0, w - 1);
                    if (mask[static_cast<std::size_t>(rr * w + cc)] > 0.5) clear[static_cast<std::size_t>(r * w + c)] = false;
                }
            }
        }
    }
    return clear;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb + 1e-300);
}

FusedStats fused_stats(TrainState& state, const TrainingData& val) {
    FusedStats s;
    auto fuser = generator_fuser(state.generator);
    for (std::size_t i = 0; i < val.size(); ++i) {
        const auto& p = val.pair(i);
        const auto u = fuse_pair(p, fuser, state.config.dtype);
        const auto gu = sobel_gradient(u);
        const auto gx = sobel_gradient(p.infrared);
        const auto gy = sobel_gradient(p.visible);
        double dux = 0, duy = 0, in_sum = 0, out_sum = 0;
        int64_t n_in = 0, n_out = 0;
        std::vector<double> bu, bx, by;
        const auto clear = clear_background(p.mask);
        for (std::size_t k = 0; k < u.size(); ++k) {
            if (p.mask[k] > 0.5) {
                dux += std::abs(u[k] - p.infrared[k]);
                duy += std::abs(u[k] - p.visible[k]);
                in_sum += u[k];
                ++n_in;
            } else {
                out_sum += u[k];
                ++n_out;
            }
            if (clear[k]) {
                bu.push_back(gu[k]);
                bx.push_back(gx[k]);
                by.push_back(gy[k]);
            }
        }
        const bool fidelity = dux < duy;
        const double cy = correlation(bu, by), cx = correlation(bu, bx);
        const bool texture = cy > cx;
        s.corr_y += cy / static_cast<double>(val.size());
        s.corr_x += cx / static_cast<double>(val.size());
        s.fidelity_ok += fidelity;
        s.texture_ok += texture;
        s.both_ok += fidelity && texture;
        s.contrast += in_sum / static_cast<double>(n_in) - out_sum / static_cast<double>(n_out);
        ++s.pairs;
    }
    s.contrast /= static_cast<double>(s.pairs);
    return s;
}

TrainConfig smoke_config(Strategy strategy, uint64_t seed) {
    TrainConfig c;
    c.strategy = strategy;
    c.seed = seed;
    c.batch_size = 16;
    c.patch_size = 64;
    return c;
}

Outcome smoke_training() {
    const auto start = Clock::now();
    const auto train_set = synth_data(64, 100, 64);
    const auto val_set = synth_data(32, 200, 64, Split::val);
    std::string detail;

    // (a) 200 dt generator steps.
    auto dt = smoke_config(Strategy::dt, 1);
    dt.epochs = 50;
    dt.max_steps = 200;
    TrainState a(dt);
    std::vector<double> totals;
    TrainHooks hooks;
    hooks.on_step = [&](const nlohmann::json& j) { totals.push_back(j["total_fusion"].get<double>()); };
    train(a, train_set, hooks);
    const double initial = totals.front();
    double final_epoch = 0.0;
    for (std::size_t i = totals.size() - 4; i < totals.size(); ++i) final_epoch += totals[i] / 4.0;
    const bool pass_a = a.counters.generator_updates == 200 && final_epoch < 0.8 * initial;
    detail += fmt("(a) total_fusion %.3f -> %.3f (ratio %.3f, need < 0.8); ", initial, final_epoch, final_epoch / initial);

    // (b) 20 ct epochs.
    auto ct = smoke_config(Strategy::ct, 1);
    ct.epochs = 20;
    TrainState b(ct);
    train(b, train_set);
    const auto sb = fused_stats(b, val_set);
    const double frac = static_cast<double>(sb.both_ok) / static_cast<double>(sb.pairs);
    const bool pass_b = frac >= 0.7;
    detail += fmt("(b) both hold on %.0f%% of val pairs (fidelity %.0f%%, texture %.0f%%, need >= 70%%", 100 * frac,
                  100.0 * sb.fidelity_ok / sb.pairs, 100.0 * sb.texture_ok / sb.pairs);
    detail += fmt(", mean background gradient corr with y %.3f vs x %.3f); ", sb.corr_y, sb.corr_x);

    // (c) target critic on versus both critics off, same seeds.
    auto with_dt = smoke_config(Strategy::dt, 2);
    with_dt.epochs = 25;
    with_dt.flags.use_dd_critic = false;
    auto m1 = with_dt;
    m1.flags.use_dt_critic = false;
    TrainState c_on(with_dt), c_off(m1);
    train(c_on, train_set);
    train(c_off, train_set);
    const double contrast_on = fused_stats(c_on, val_set).contrast;
    const double contrast_off = fused_stats(c_off, val_set).contrast;
    const bool pass_c = contrast_on > contrast_off;
    detail += fmt("(c) target contrast with target critic %.4f vs without critics %.4f; ", contrast_on, contrast_off);

    const double t = elapsed(start);
    detail += fmt("runtime=%.0fs (limit 900s)", t);
    return {pass_a && pass_b && pass_c && t < 900.0, detail};
}

Outcome ablation_matrix() {
    const auto start = Clock::now();
    const auto data = synth_data(16, 300, 64);
    int ran = 0;
    std::string failures;
    for (int bits = 0; bits < 16; ++bits) {
        TrainConfig c;
        c.strategy = Strategy::ct;
        c.seed = static_cast<uint64_t>(bits);
        c.batch_size = 4;
        c.epochs = 5;
        c.max_steps = 20;
        c.flags = {.use_dt_critic = (bits & 1) != 0, .use_dd_critic = (bits & 2) != 0, .use_sdw = (bits & 4) != 0,
                   .use_mask = (bits & 8) != 0};
        try {
            TrainState s(c);
            train(s, data);
            if (s.step == 20) ++ran;
            else failures += " combo " + std::to_string(bits) + " stopped early";
        } catch (const std::exception& e) {
            failures += " combo " + std::to_string(bits) + ": " + e.what();
        }
    }
    const double t = elapsed(start);
    return {ran == 16 && t < 600.0, fmt("%.0f/16 flag combinations ran 20 ct steps, runtime=%.0fs (limit 600s)", ran, t) + failures};
}

std::vector<std::string> pipeline_report(const std::filesystem::path& dir) {
    SynthConfig sc;
    sc.count = 16;
    sc.seed = 31;
    const auto manifest = synth_dataset(sc, dir / "data");
    TrainConfig c;
    c.seed = 8;
    c.batch_size = 8;
    c.epochs = 1;
    auto state = train_ct(c, manifest);
    std::vector<std::string> lines;
    auto strip = [](nlohmann::json j) {
        j.erase("seconds");
        j.erase("seconds_per_image");
        return j.dump();
    };
    for (const auto& j : eval_fusion(manifest, generator_fuser(state.generator)).jsonl()) lines.push_back(strip(j));
    for (const auto& j : eval_detection(manifest, state.generator, state.detector).jsonl()) lines.push_back(strip(j));
    return lines;
}

Outcome determinism() {
    testing::TempDir a, b;
    const auto ra = pipeline_report(a.path());
    const auto rb = pipeline_report(b.path());
    const bool reports_equal = !ra.empty() && ra == rb;

    const auto data = synth_data(8, 41, 64);
    TrainConfig c;
    c.batch_size = 4;
    c.epochs = 1;
    TrainState s(c);
    train(s, data);
    save_checkpoint(s, a.path() / "probe.pt");
    auto loaded = load_checkpoint(a.path() / "probe.pt");
    auto probe = torch::rand({2, 1, 64, 64});
    s.generator->eval();
    loaded.generator->eval();
    s.detector->eval();
    loaded.detector->eval();
    const bool probe_equal = torch::equal(s.generator->forward(probe, probe), loaded.generator->forward(probe, probe)) &&
                             torch::equal(s.detector->forward(probe), loaded.detector->forward(probe)) &&
                             torch::equal(s.critic_target->forward(probe), loaded.critic_target->forward(probe));
    return {reports_equal && probe_equal, std::string("repeated synth->train->eval reports identical: ") +
                                              (reports_equal ? "yes" : "no") + fmt(" (%.0f lines)", ra.size()) +
                                              "; checkpoint probe outputs bit-identical: " + (probe_equal ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    torch::manual_seed(0);
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"metric oracle equivalence", metric_oracles},
        {"closed-form metric identities", metric_identities},
        {"finite-difference gradient suite", gradient_suite},
        {"joint gradient decomposition", decomposition},
        {"linear-critic penalty", linear_critic_penalty},
        {"fusion loss assembly", loss_assembly},
        {"strategy equivalences", strategy_equivalences},
        {"smoke training", smoke_training},
        {"ablation matrix", ablation_matrix},
        {"determinism and persistence", determinism},
    };
    std::vector<bool> selected(criteria.size(), argc < 2);
    for (int a = 1; a < argc; ++a) {
        const int n = std::atoi(argv[a]);
        if (n >= 1 && n <= static_cast<int>(criteria.size())) selected[static_cast<std::size_t>(n - 1)] = true;
    }
    int failed = 0;
    int ran = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected[i]) continue;
        ++ran;
        Outcome outcome;
        try {
            outcome = criteria[i].second();
        } catch (const std::exception& e) {
            outcome = {false, std::string("exception: ") + e.what()};
        }
        failed += outcome.pass ? 0 : 1;
        std::printf("criterion %2zu %s %s: %s\n", i + 1, outcome.pass ? "PASS" : "FAIL", criteria[i].first,
                    outcome.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%d criteria passed\n", ran - failed, ran);
    return failed == 0 ? 0 : 1;
}
