#include <doctest.h>

#include <fstream>

#include "dualfuse/imagecore.hpp"
#include "dualfuse/synth.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace dualfuse;

namespace {

torch::Tensor grid2(std::initializer_list<double> v) {
    return torch::tensor(std::vector<double>(v), torch::kDouble).reshape({1, 1, 2, 2});
}

DatasetManifest small_manifest(const std::filesystem::path& dir, int64_t count) {
    SynthConfig cfg;
    cfg.count = count;
    cfg.image_size = 32;
    cfg.max_target_side = 10;
    cfg.seed = 3;
    return synth_dataset(cfg, dir);
}

}  // namespace

TEST_CASE("grids reject out-of-range values and undersized shapes") {
    CHECK_THROWS_AS(GrayImage(8, 8, std::vector<double>(64, 1.5)), ValueError);
    CHECK_THROWS_AS(GrayImage(4, 8, std::vector<double>(32, 0.5)), ShapeError);
    CHECK_THROWS_AS(GrayImage(8, 8, std::vector<double>(10, 0.5)), ShapeError);
    const auto g = GrayImage::filled(8, 9, 0.25);
    CHECK(g.shape() == Shape{8, 9});
    CHECK(g(7, 8) == 0.25);
}

TEST_CASE("apply_mask on tensors") {
    SUBCASE("all-zero mask annihilates") {
        auto img = torch::ones({1, 1, 8, 8}, torch::kDouble);
        CHECK(apply_mask(img, torch::zeros_like(img)).abs().sum().item<double>() == 0.0);
    }
    SUBCASE("all-one mask is the identity") {
        auto img = torch::rand({2, 1, 8, 8}, torch::kDouble);
        CHECK(torch::equal(apply_mask(img, torch::ones_like(img)), img));
    }
    SUBCASE("elementwise product") {
        auto out = apply_mask(grid2({0.2, 0.4, 0.6, 0.8}), grid2({1, 0, 0, 1}));
        CHECK(torch::allclose(out, grid2({0.2, 0, 0, 0.8}), 0, 1e-15));
    }
    SUBCASE("shape mismatch names both shapes") {
        auto a = torch::zeros({1, 1, 8, 8});
        auto b = torch::zeros({1, 1, 8, 9});
        try {
            apply_mask(a, b);
            FAIL("expected ShapeError");
        } catch (const ShapeError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("8x8") != std::string::npos);
            CHECK(msg.find("8x9") != std::string::npos);
        }
    }
}

TEST_CASE("apply_mask on grids") {
    const auto img = oracle::random_image(1, 8, 8);
    const auto full = apply_mask(img, TargetMask::filled(8, 8, 1.0));
    CHECK(full == img);
    const auto none = apply_mask(img, TargetMask::filled(8, 8, 0.0));
    for (double v : none.data()) CHECK(v == 0.0);
}

TEST_CASE("complement_mask") {
    CHECK(torch::equal(complement_mask(grid2({0, 0, 0, 0})), grid2({1, 1, 1, 1})));
    CHECK(torch::allclose(complement_mask(grid2({1, 0, 0.5, 1})), grid2({0, 1, 0.5, 0}), 0, 1e-15));
    auto m = (torch::rand({3, 1, 8, 8}, torch::kDouble) > 0.5).to(torch::kDouble);
    CHECK(torch::equal(complement_mask(complement_mask(m)), m));
    const auto grid = mask_from_tensor(m.index({0}).unsqueeze(0));
    CHECK(complement_mask(complement_mask(grid)) == grid);
}

TEST_CASE("bounding boxes") {
    BoundingBox b{.x_min = 2, .y_min = 3, .x_max = 12, .y_max = 8};
    CHECK(b.is_valid());
    CHECK(b.area() == doctest::Approx(50));
    CHECK(b.inside(Shape{8, 12}));
    CHECK_FALSE(b.inside(Shape{7, 12}));
    const auto c = BoundingBox{.x_min = -4, .y_min = 1, .x_max = 20, .y_max = 30}.clipped(Shape{16, 16});
    CHECK(c.x_min == 0);
    CHECK(c.x_max == 16);
    CHECK(c.y_max == 16);
    CHECK_FALSE(BoundingBox{.x_min = 3, .y_min = 0, .x_max = 3, .y_max = 5}.is_valid());
}

TEST_CASE("manifest round trips") {
    testing::TempDir dir;
    SUBCASE("empty manifest") {
        DatasetManifest m;
        m.root_path = dir.path();
        m.seed = 11;
        write_manifest(m, dir.path() / "m.jsonl");
        const auto back = read_manifest(dir.path() / "m.jsonl");
        CHECK(back.entries.empty());
        CHECK(back.seed == 11);
    }
    SUBCASE("three entries keep their order") {
        const auto m = small_manifest(dir.path(), 3);
        const auto back = read_manifest(dir.path() / kManifestFileName);
        REQUIRE(back.entries.size() == 3);
        CHECK((back.entries == m.entries));
        CHECK(back.entries[0].pair_id < back.entries[2].pair_id);
    }
    SUBCASE("a deleted image names its pair") {
        const auto m = small_manifest(dir.path(), 3);
        std::filesystem::remove(m.resolve(m.entries[1].visible_path));
        try {
            load_all(read_manifest(dir.path() / kManifestFileName));
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find(m.entries[1].pair_id) != std::string::npos);
        }
    }
    SUBCASE("malformed lines report their line number") {
        std::ofstream(dir.path() / "bad.jsonl") << "{\"version\":1,\"split\":\"train\",\"seed\":0,\"count\":1}\n{nope\n";
        try {
            read_manifest(dir.path() / "bad.jsonl");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
    }
}

TEST_CASE("8-bit normalization endpoints") {
    testing::TempDir dir;
    std::vector<double> v(64, 0.0);
    v[0] = 1.0;
    v[1] = 128.0 / 255.0;
    const GrayImage img(8, 8, v);
    write_png(img, dir.path() / "a.png");
    const auto back = read_png(dir.path() / "a.png");
    CHECK(back[0] == 1.0);
    CHECK(back[1] == doctest::Approx(0.50196).epsilon(1e-5));
    CHECK(back[1] == 128.0 / 255.0);
    CHECK(back[2] == 0.0);
}

TEST_CASE("pair loading keeps shapes, masks and boxes") {
    testing::TempDir dir;
    const auto m = small_manifest(dir.path(), 2);
    const auto pair = load_pair(m, m.entries[0].pair_id);
    CHECK(pair.shape() == Shape{32, 32});
    CHECK(is_binary(pair.mask));
    CHECK_FALSE(pair.boxes.empty());
    CHECK_NOTHROW(pair.validate(kSynthMinCoverage));
    CHECK_THROWS_AS(load_pair(m, "missing"), Error);
}

TEST_CASE("annotations round trip") {
    testing::TempDir dir;
    std::vector<BoundingBox> boxes{{.x_min = 1, .y_min = 2, .x_max = 9, .y_max = 10, .class_id = 2},
                                   {.x_min = 0, .y_min = 0, .x_max = 4, .y_max = 3, .class_id = 0}};
    write_annotations(boxes, dir.path() / "a.txt");
    CHECK((read_annotations(dir.path() / "a.txt") == boxes));
}
