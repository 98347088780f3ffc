#include "dualfuse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "dualfuse/signalops.hpp"

namespace dualfuse {

namespace fs = std::filesystem;

std::string_view to_string(MaskSource s) {
    return s == MaskSource::ground_truth ? "ground_truth" : "threshold_saliency";
}

MaskSource parse_mask_source(std::string_view text) {
    if (text == "ground_truth") return MaskSource::ground_truth;
    if (text == "threshold_saliency") return MaskSource::threshold_saliency;
    throw ValueError("unknown mask source '" + std::string(text) + "' (expected ground_truth or threshold_saliency)");
}

void SynthConfig::validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (count < 1) throw ValueError("synth: count must be at least 1");
    if (image_size < 16 || image_size % 16 != 0) throw ValueError("synth: image_size must be a multiple of 16");
    if (min_targets < 1 || max_targets < min_targets) throw ValueError("synth: bad target count range");
    if (min_target_side < 3 || max_target_side < min_target_side || max_target_side > image_size / 2) {
        throw ValueError("synth: bad target side range");
    }
    if (!unit(target_ir_low) || !unit(target_ir_high) || target_ir_low > target_ir_high || !unit(background_ir_low) ||
        !unit(background_ir_high) || background_ir_low > background_ir_high || !unit(visible_texture) ||
        !unit(visible_target_contrast) || !unit(noise_sigma)) {
        throw ValueError("synth: intensity parameters must lie in [0,1]");
    }
    if (num_classes < 1 || num_classes > 3) throw ValueError("synth: num_classes must be 1, 2 or 3");
}

namespace {

using Rng = std::mt19937_64;

Rng pair_rng(uint64_t seed, int64_t index) {
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(index),
                      static_cast<uint32_t>(static_cast<uint64_t>(index) >> 32), 0x5eedu};
    return Rng(seq);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); }

// Bilinear value noise in [0,1] with lattice spacing `cell` pixels.
std::vector<double> value_noise(int64_t size, double cell, Rng& rng) {
    const auto lattice = static_cast<int64_t>(std::ceil(static_cast<double>(size) / cell)) + 2;
    std::vector<double> grid(static_cast<std::size_t>(lattice * lattice));
    for (auto& g : grid) g = uniform(rng, 0.0, 1.0);
    auto at = [&](int64_t r, int64_t c) { return grid[static_cast<std::size_t>(r * lattice + c)]; };
    auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
    std::vector<double> out(static_cast<std::size_t>(size * size));
    for (int64_t r = 0; r < size; ++r) {
        const double fy = (static_cast<double>(r) + 0.5) / cell;
        const auto y0 = static_cast<int64_t>(std::floor(fy));
        const double ty = smooth(fy - static_cast<double>(y0));
        for (int64_t c = 0; c < size; ++c) {
            const double fx = (static_cast<double>(c) + 0.5) / cell;
            const auto x0 = static_cast<int64_t>(std::floor(fx));
            const double tx = smooth(fx - static_cast<double>(x0));
            const double top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            const double bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[static_cast<std::size_t>(r * size + c)] = top * (1.0 - ty) + bottom * ty;
        }
    }
    return out;
}

// Multi-octave smooth field in [0,1].
std::vector<double> smooth_field(int64_t size, Rng& rng) {
    std::vector<double> out(static_cast<std::size_t>(size * size), 0.0);
    double amplitude = 1.0;
    double norm = 0.0;
    for (double cell : {size / 2.0, size / 4.0, size / 8.0}) {
        const auto octave = value_noise(size, cell, rng);
        for (std::size_t k = 0; k < out.size(); ++k) out[k] += amplitude * octave[k];
        norm += amplitude;
        amplitude *= 0.5;
    }
    for (auto& v : out) v /= norm;
    return out;
}

// Zero-mean high-frequency texture in [-1,1]: fine value noise plus a grating.
std::vector<double> texture_field(int64_t size, Rng& rng) {
    const auto fine = value_noise(size, 2.0, rng);
    const auto medium = value_noise(size, 4.0, rng);
    const double freq = uniform(rng, 1.0 / 6.0, 1.0 / 3.0);
    const double angle = uniform(rng, 0.0, std::numbers::pi);
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double fx = freq * std::cos(angle);
    const double fy = freq * std::sin(angle);
    std::vector<double> out(static_cast<std::size_t>(size * size));
    for (int64_t r = 0; r < size; ++r) {
        for (int64_t c = 0; c < size; ++c) {
            const auto k = static_cast<std::size_t>(r * size + c);
            const double noise = (2.0 * fine[k] - 1.0) * 0.6 + (2.0 * medium[k] - 1.0) * 0.4;
            const double grating = std::sin(2.0 * std::numbers::pi * (fx * c + fy * r) + phase);
            out[k] = 0.5 * noise + 0.5 * grating;
        }
    }
    return out;
}

struct Shape2D {
    int kind = 0;  // 0 disc, 1 rectangle, 2 triangle
    double x0 = 0, y0 = 0, w = 0, h = 0;

    bool contains(double px, double py) const {
        switch (kind) {
            case 0: {
                const double r = 0.5 * w;
                const double dx = px - (x0 + r);
                const double dy = py - (y0 + r);
                return dx * dx + dy * dy <= r * r;
            }
            case 1: return px >= x0 && px < x0 + w && py >= y0 && py < y0 + h;
            default: {
                // Apex at the top center, base along the bottom edge.
                if (py < y0 || py > y0 + h) return false;
                const double half = 0.5 * w * (py - y0) / h;
                const double cx = x0 + 0.5 * w;
                return px >= cx - half && px <= cx + half;
            }
        }
    }
};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

std::vector<double> quantized(const std::vector<double>& values) {
    std::vector<double> out(values.size());
    for (std::size_t k = 0; k < values.size(); ++k) out[k] = std::clamp(quantize_level(values[k]), 0, 255) / 255.0;
    return out;
}

}  // namespace

AnnotatedPair synth_pair(const SynthConfig& cfg, int64_t index) {
    cfg.validate();
    const int64_t size = cfg.image_size;
    const auto pixels = static_cast<std::size_t>(size * size);
    auto rng = pair_rng(cfg.seed, index);

    const auto ir_field = smooth_field(size, rng);
    const auto vis_field = smooth_field(size, rng);
    const auto texture = texture_field(size, rng);

    std::vector<double> ir(pixels);
    std::vector<double> vis(pixels);
    for (std::size_t k = 0; k < pixels; ++k) {
        ir[k] = cfg.background_ir_low + (cfg.background_ir_high - cfg.background_ir_low) * ir_field[k];
        vis[k] = 0.3 + 0.4 * vis_field[k] + cfg.visible_texture * texture[k];
    }

    std::vector<double> mask(pixels, 0.0);
    std::vector<int64_t> owner(pixels, -1);
    std::vector<BoundingBox> boxes;
    const int64_t wanted = uniform_int(rng, cfg.min_targets, cfg.max_targets);
    for (int64_t t = 0; t < wanted; ++t) {
        for (int attempt = 0; attempt < 100; ++attempt) {
            Shape2D shape;
            shape.kind = static_cast<int>(uniform_int(rng, 0, cfg.num_classes - 1));
            shape.w = static_cast<double>(uniform_int(rng, cfg.min_target_side, cfg.max_target_side));
            shape.h = shape.kind == 0 ? shape.w : static_cast<double>(uniform_int(rng, cfg.min_target_side, cfg.max_target_side));
            shape.x0 = static_cast<double>(uniform_int(rng, 1, size - 1 - static_cast<int64_t>(shape.w)));
            shape.y0 = static_cast<double>(uniform_int(rng, 1, size - 1 - static_cast<int64_t>(shape.h)));

            // Keep a two-pixel gap to earlier targets.
            bool clear = true;
            const auto r0 = std::max<int64_t>(0, static_cast<int64_t>(shape.y0) - 2);
            const auto r1 = std::min<int64_t>(size, static_cast<int64_t>(shape.y0 + shape.h) + 3);
            const auto c0 = std::max<int64_t>(0, static_cast<int64_t>(shape.x0) - 2);
            const auto c1 = std::min<int64_t>(size, static_cast<int64_t>(shape.x0 + shape.w) + 3);
            for (int64_t r = r0; r < r1 && clear; ++r) {
                for (int64_t c = c0; c < c1; ++c) {
                    if (owner[static_cast<std::size_t>(r * size + c)] >= 0) {
                        clear = false;
                        break;
                    }
                }
            }
            if (!clear) continue;

            const double ir_level = uniform(rng, cfg.target_ir_low, cfg.target_ir_high);
            int64_t min_r = size, min_c = size, max_r = -1, max_c = -1;
            for (int64_t r = r0; r < r1; ++r) {
                for (int64_t c = c0; c < c1; ++c) {
                    if (!shape.contains(static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5)) continue;
                    const auto k = static_cast<std::size_t>(r * size + c);
                    owner[k] = t;
                    mask[k] = 1.0;
                    ir[k] = ir_level;
                    vis[k] = 0.3 + 0.4 * vis_field[k] + 0.5 * cfg.visible_texture * texture[k] + cfg.visible_target_contrast;
                    min_r = std::min(min_r, r);
                    max_r = std::max(max_r, r);
                    min_c = std::min(min_c, c);
                    max_c = std::max(max_c, c);
                }
            }
            if (max_r < 0) continue;
            boxes.push_back(BoundingBox{.x_min = static_cast<double>(min_c),
                                        .y_min = static_cast<double>(min_r),
                                        .x_max = static_cast<double>(max_c + 1),
                                        .y_max = static_cast<double>(max_r + 1),
                                        .class_id = shape.kind});
            break;
        }
    }

    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (std::size_t k = 0; k < pixels; ++k) {
        ir[k] = clamp01(ir[k] + (cfg.noise_sigma > 0.0 ? noise(rng) : 0.0));
        vis[k] = clamp01(vis[k] + (cfg.noise_sigma > 0.0 ? noise(rng) : 0.0));
    }

    char id[64];
    std::snprintf(id, sizeof(id), "%s_%05lld", cfg.id_prefix.c_str(), static_cast<long long>(index));
    AnnotatedPair pair{
        .pair_id = id,
        .infrared = GrayImage(size, size, quantized(ir)),
        .visible = GrayImage(size, size, quantized(vis)),
        .mask = TargetMask(size, size, std::move(mask)),
        .boxes = std::move(boxes),
    };
    pair.validate(kSynthMinCoverage);
    return pair;
}

DatasetManifest synth_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    std::error_code ec;
    for (const char* sub : {"ir", "vis", "mask", "ann"}) {
        fs::create_directories(out_dir / sub, ec);
        if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
    }
    DatasetManifest manifest;
    manifest.root_path = out_dir;
    manifest.split = cfg.split;
    manifest.seed = cfg.seed;
    for (int64_t i = 0; i < cfg.count; ++i) {
        const auto pair = synth_pair(cfg, i);
        ManifestEntry entry{
            .pair_id = pair.pair_id,
            .infrared_path = "ir/" + pair.pair_id + ".png",
            .visible_path = "vis/" + pair.pair_id + ".png",
            .mask_path = "mask/" + pair.pair_id + ".png",
            .annotation_path = "ann/" + pair.pair_id + ".txt",
        };
        write_png(pair.infrared, out_dir / entry.infrared_path);
        write_png(pair.visible, out_dir / entry.visible_path);
        write_mask_png(pair.mask, out_dir / entry.mask_path);
        write_annotations(pair.boxes, out_dir / entry.annotation_path);
        manifest.entries.push_back(std::move(entry));
    }
    write_manifest(manifest, out_dir / kManifestFileName);
    return manifest;
}

// ---------------------------------------------------------------------------
// Mask oracle
// ---------------------------------------------------------------------------

double otsu_threshold(std::span<const double> values) {
    if (values.empty()) throw ValueError("otsu_threshold: no values");
    const auto [lo_it, hi_it] = std::ranges::minmax_element(values);
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (!(hi > lo)) return std::nextafter(hi, std::numeric_limits<double>::infinity());

    const double range = hi - lo;
    std::array<double, 256> hist{};
    for (double v : values) {
        const auto b = std::min<int64_t>(255, static_cast<int64_t>(std::floor((v - lo) / range * 256.0)));
        hist[static_cast<std::size_t>(b)] += 1.0;
    }
    const auto total = static_cast<double>(values.size());
    double sum_all = 0.0;
    for (int i = 0; i < 256; ++i) sum_all += i * hist[i];

    double best = -1.0;
    int best_t = 0;
    double w0 = 0.0;
    double sum0 = 0.0;
    for (int t = 0; t < 255; ++t) {
        w0 += hist[t];
        sum0 += t * hist[t];
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double m0 = sum0 / w0;
        const double m1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_t = t;
        }
    }
    return lo + static_cast<double>(best_t + 1) * range / 256.0;
}

TargetMask mask_oracle(const GrayImage& ir, MaskSource source, const AnnotatedPair* pair) {
    if (source == MaskSource::ground_truth) {
        if (!pair) throw ValueError("mask_oracle: ground_truth requested but no stored mask is available");
        if (pair->mask.shape() != ir.shape()) {
            throw ShapeError("mask_oracle: stored mask " + pair->mask.shape().str() + " vs image " + ir.shape().str());
        }
        return pair->mask;
    }
    const auto saliency = saliency_map(ir);
    const double cut = otsu_threshold(saliency.data);
    std::vector<double> out(saliency.data.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = saliency.data[k] >= cut ? 1.0 : 0.0;
    return TargetMask(ir.height(), ir.width(), std::move(out));
}

double mask_iou(const TargetMask& a, const TargetMask& b) {
    if (a.shape() != b.shape()) throw ShapeError("mask_iou: " + a.shape().str() + " vs " + b.shape().str());
    double inter = 0.0;
    double uni = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const bool pa = a[k] > 0.5;
        const bool pb = b[k] > 0.5;
        inter += (pa && pb) ? 1.0 : 0.0;
        uni += (pa || pb) ? 1.0 : 0.0;
    }
    return uni == 0.0 ? 1.0 : inter / uni;
}

}  // namespace dualfuse
