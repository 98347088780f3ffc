#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "dualfuse/imagecore.hpp"

namespace dualfuse {

// Seeded generator of aligned infrared/visible pairs. Infrared renders
// bright, texture-free targets over a smooth dim background; the visible
// carries rich background texture and only faint targets.
struct SynthConfig {
    int64_t count = 16;
    int64_t image_size = 64;  // divisible by 16
    int64_t min_targets = 1;
    int64_t max_targets = 4;
    int64_t min_target_side = 8;
    int64_t max_target_side = 20;
    double target_ir_low = 0.8;
    double target_ir_high = 1.0;
    double background_ir_low = 0.2;
    double background_ir_high = 0.4;
    double visible_texture = 0.15;
    double visible_target_contrast = 0.08;
    double noise_sigma = 0.02;
    int64_t num_classes = 3;  // 0 disc, 1 rectangle, 2 triangle
    uint64_t seed = 0;
    Split split = Split::train;
    std::string id_prefix = "pair";

    void validate() const;
};

// Minimum fraction of each box's cells covered by its target mask.
inline constexpr double kSynthMinCoverage = 0.25;

// Pair `index` of the dataset described by cfg, quantized to 8-bit levels
// exactly as it is stored on disk.
AnnotatedPair synth_pair(const SynthConfig& cfg, int64_t index);

// Writes ir/, vis/, mask/, ann/ and manifest.jsonl under out_dir.
DatasetManifest synth_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

inline constexpr const char* kManifestFileName = "manifest.jsonl";

// Stand-in for a learned saliency network.
enum class MaskSource { ground_truth, threshold_saliency };

std::string_view to_string(MaskSource s);
MaskSource parse_mask_source(std::string_view text);

// ground_truth returns the pair's stored mask. threshold_saliency binarizes
// the histogram-contrast saliency of `ir` at Otsu's threshold; a constant
// image yields the empty mask.
TargetMask mask_oracle(const GrayImage& ir, MaskSource source, const AnnotatedPair* pair = nullptr);

// Otsu threshold over a 256-bin histogram of arbitrary real values; returns
// the cut value v such that entries >= v form the upper class.
double otsu_threshold(std::span<const double> values);

double mask_iou(const TargetMask& a, const TargetMask& b);

}  // namespace dualfuse
