#include <doctest.h>

#include <cmath>

#include "dualfuse/signalops.hpp"
#include "oracles.hpp"

using namespace dualfuse;

namespace {

GrayImage from_levels(int64_t h, int64_t w, const std::vector<int>& levels) {
    std::vector<double> v;
    for (int l : levels) v.push_back(l / 255.0);
    return GrayImage(h, w, v);
}

GrayImage tiled_levels(int64_t h, int64_t w, const std::vector<int>& pattern) {
    std::vector<int> levels;
    for (int64_t k = 0; k < h * w; ++k) levels.push_back(pattern[static_cast<std::size_t>(k) % pattern.size()]);
    return from_levels(h, w, levels);
}

torch::Tensor levels_tensor(std::initializer_list<int> levels, int64_t h, int64_t w) {
    std::vector<double> v;
    for (int l : levels) v.push_back(l / 255.0);
    return torch::tensor(v, torch::kDouble).reshape({1, 1, h, w});
}

}  // namespace

TEST_CASE("histogram256") {
    const auto zero = histogram256(GrayImage::filled(8, 8, 0.0));
    CHECK(zero.counts[0] == 64);
    CHECK(zero.total == 64);
    const std::vector<uint8_t> lv{0, 0, 2, 2};
    const auto h = histogram256(std::span<const uint8_t>(lv));
    CHECK(h.counts[0] == 2);
    CHECK(h.counts[2] == 2);
    CHECK(h.counts[1] == 0);
    const auto img = oracle::random_image(5, 16, 12);
    const auto r = histogram256(img);
    int64_t sum = 0;
    for (auto c : r.counts) sum += c;
    CHECK(sum == 16 * 12);
}

TEST_CASE("saliency") {
    SUBCASE("constant image") {
        for (double s : saliency_map(GrayImage::filled(8, 8, 0.3)).data) CHECK(s == 0.0);
    }
    SUBCASE("2x2 levels {0,0,2,2}") {
        auto s = saliency_map(levels_tensor({0, 0, 2, 2}, 2, 2));
        CHECK(torch::equal(s, torch::full({1, 1, 2, 2}, 4.0, torch::kDouble)));
    }
    SUBCASE("per-level evaluation equals per-pixel evaluation") {
        const auto img = oracle::random_image(9, 16, 16);
        const auto lv = oracle::levels(img);
        const auto direct = oracle::saliency(lv);
        const auto fast = saliency_map(img);
        for (std::size_t k = 0; k < direct.size(); ++k) CHECK(fast.data[k] == direct[k]);
        auto batched = saliency_map(to_tensor(img, torch::kDouble)).flatten();
        for (std::size_t k = 0; k < direct.size(); ++k) CHECK(batched[static_cast<int64_t>(k)].item<double>() == direct[k]);
    }
}

TEST_CASE("sdw_weights") {
    auto s = torch::rand({1, 1, 8, 8}, torch::kDouble) + 0.5;
    auto [w1, w2] = sdw_weights(s, s);
    CHECK((w1 - 0.5).abs().max().item<double>() <= 1e-6);
    CHECK((w2 - 0.5).abs().max().item<double>() <= 1e-6);
    auto [a1, a2] = sdw_weights(torch::full({1}, 3.0, torch::kDouble), torch::full({1}, 1.0, torch::kDouble));
    CHECK(a1.item<double>() == doctest::Approx(0.75).epsilon(1e-8));
    CHECK(a2.item<double>() == doctest::Approx(0.25).epsilon(1e-8));
    auto [z1, z2] = sdw_weights(torch::zeros({1}, torch::kDouble), torch::zeros({1}, torch::kDouble));
    CHECK(z1.item<double>() == 0.0);
    CHECK(z2.item<double>() == 1.0);
}

TEST_CASE("ssim") {
    auto a = torch::rand({2, 1, 24, 20}, torch::kDouble);
    auto b = torch::rand({2, 1, 24, 20}, torch::kDouble);
    CHECK(std::abs(ssim(a, a).item<double>() - 1.0) <= 1e-12);
    CHECK(std::abs(ssim(a, b).item<double>() - ssim(b, a).item<double>()) <= 1e-9);
    SUBCASE("constant 0.5 against 0.6 matches the windowed reference") {
        std::vector<double> x(32 * 32, 0.5), y(32 * 32, 0.6);
        const double ref = oracle::ssim(x, y, 32, 32);
        const double got = ssim(torch::full({1, 1, 32, 32}, 0.5, torch::kDouble), torch::full({1, 1, 32, 32}, 0.6, torch::kDouble))
                               .item<double>();
        CHECK(std::abs(ref - got) <= 1e-6);
    }
    SUBCASE("random images match the windowed reference") {
        const auto x = oracle::random_image(1, 32, 32);
        const auto y = oracle::random_image(2, 32, 32);
        const std::vector<double> xv(x.data().begin(), x.data().end()), yv(y.data().begin(), y.data().end());
        CHECK(std::abs(oracle::ssim(xv, yv, 32, 32) - ssim(x, y)) <= 1e-9);
    }
    CHECK_THROWS_AS(ssim(torch::rand({1, 1, 10, 12}), torch::rand({1, 1, 10, 12})), ShapeError);
}

TEST_CASE("sobel_gradient") {
    SUBCASE("constant image") {
        auto g = sobel_gradient(torch::full({1, 1, 8, 8}, 0.7, torch::kDouble));
        CHECK(g.max().item<double>() <= 1.000001e-6);
    }
    SUBCASE("vertical step of height d gives 4d at the edge") {
        const double d = 0.3;
        auto img = torch::zeros({1, 1, 8, 8}, torch::kDouble);
        img.index_put_({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(),
                        torch::indexing::Slice(4, torch::indexing::None)},
                       d);
        auto g = sobel_gradient(img);
        for (int64_t r = 1; r < 7; ++r) {
            CHECK(g[0][0][r][3].item<double>() == doctest::Approx(4 * d).epsilon(1e-9));
            CHECK(g[0][0][r][4].item<double>() == doctest::Approx(4 * d).epsilon(1e-9));
        }
    }
    SUBCASE("invariant to a constant offset") {
        auto img = torch::rand({1, 1, 12, 12}, torch::kDouble) * 0.5;
        CHECK(torch::allclose(sobel_gradient(img), sobel_gradient(img + 0.25), 0, 1e-12));
    }
    SUBCASE("matches the direct loop") {
        const auto img = oracle::random_image(4, 9, 11);
        const std::vector<double> v(img.data().begin(), img.data().end());
        const auto ref = oracle::sobel(v, 9, 11);
        const auto got = sobel_gradient(img);
        for (std::size_t k = 0; k < ref.size(); ++k) CHECK(std::abs(ref[k] - got[k]) <= 1e-12);
    }
}

TEST_CASE("fusion metrics") {
    const auto constant = GrayImage::filled(8, 8, 0.4);
    CHECK(entropy_metric(constant) == 0.0);
    CHECK(sd_metric(constant) == 0.0);
    const auto two_level = tiled_levels(8, 8, {0, 2});
    CHECK(entropy_metric(two_level) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sd_metric(two_level) == doctest::Approx(1.0).epsilon(1e-12));
    const auto x = oracle::random_image(6, 16, 16);
    CHECK(std::abs(mi_metric(x, x) - entropy_metric(x)) <= 1e-9);
    CHECK(std::abs(mi_metric(x, GrayImage::filled(16, 16, 0.4))) <= 1e-12);
    const auto y = oracle::random_image(7, 16, 16);
    const auto r = fusion_metrics(x, x, y);
    CHECK(r.mi == doctest::Approx(r.mi_x + r.mi_y));
    CHECK(r.ssim_x == doctest::Approx(1.0));
    CHECK(std::abs(r.mi_y - oracle::mutual_information(oracle::levels(x), oracle::levels(y))) <= 1e-9);
}

TEST_CASE("iou") {
    BoundingBox a{.x_min = 0, .y_min = 0, .x_max = 10, .y_max = 10};
    BoundingBox b{.x_min = 5, .y_min = 5, .x_max = 15, .y_max = 15};
    BoundingBox far{.x_min = 20, .y_min = 20, .x_max = 30, .y_max = 30};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, far) == 0.0);
    CHECK(std::abs(iou(a, b) - 1.0 / 7.0) <= 1e-12);
}

TEST_CASE("average precision") {
    const BoundingBox g1{.x_min = 0, .y_min = 0, .x_max = 10, .y_max = 10};
    const BoundingBox g2{.x_min = 50, .y_min = 50, .x_max = 60, .y_max = 60};
    auto scored = [](BoundingBox b, double s) {
        b.score = s;
        return b;
    };
    SUBCASE("exact hit") {
        std::vector<BoundingBox> p{scored(g1, 0.9)}, g{g1};
        CHECK(average_precision(p, g) == 1.0);
    }
    SUBCASE("IoU 0.4 misses at 0.5") {
        auto shifted = g1;
        shifted.x_min = 0;
        shifted.x_max = 4;  // IoU 0.4 with g1
        REQUIRE(iou(shifted, g1) == doctest::Approx(0.4));
        std::vector<BoundingBox> p{scored(shifted, 0.9)}, g{g1};
        CHECK(average_precision(p, g) == 0.0);
    }
    SUBCASE("two GTs, TP FP TP") {
        const BoundingBox fp{.x_min = 100, .y_min = 100, .x_max = 110, .y_max = 110};
        std::vector<BoundingBox> p{scored(g1, 0.9), scored(fp, 0.8), scored(g2, 0.7)}, g{g1, g2};
        const double ap = average_precision(p, g);
        CHECK(std::abs(ap - 5.0 / 6.0) <= 1e-12);
        CHECK(std::abs(ap - oracle::average_precision({{0.9, true}, {0.8, false}, {0.7, true}}, 2)) <= 1e-12);
    }
    SUBCASE("mAP averages classes with ground truth") {
        auto g2c = g2;
        g2c.class_id = 1;
        std::vector<DetectionSample> samples{{{scored(g1, 0.9)}, {g1, g2c}}};
        const auto m = map50(samples);
        REQUIRE(m.per_class.size() == 2);
        CHECK(m.map == doctest::Approx(0.5));
        CHECK_THROWS_AS(map50(std::vector<DetectionSample>{{{scored(g1, 0.9)}, {}}}), Error);
    }
}
