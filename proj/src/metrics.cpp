#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "dualfuse/signalops.hpp"

namespace dualfuse {

double entropy_metric(const GrayImage& image) {
    const auto hist = histogram256(image);
    const double total = static_cast<double>(hist.total);
    double en = 0.0;
    for (int64_t c : hist.counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / total;
        en -= p * std::log2(p);
    }
    return en;
}

double sd_metric(const GrayImage& image) {
    const auto hist = histogram256(image);
    const double total = static_cast<double>(hist.total);
    double mean = 0.0;
    for (int i = 0; i < 256; ++i) mean += i * static_cast<double>(hist.counts[i]);
    mean /= total;
    double var = 0.0;
    for (int i = 0; i < 256; ++i) var += static_cast<double>(hist.counts[i]) * (i - mean) * (i - mean);
    return std::sqrt(var / total);
}

double mi_metric(const GrayImage& a, const GrayImage& b) {
    if (a.shape() != b.shape()) throw ShapeError("mi_metric: " + a.shape().str() + " vs " + b.shape().str());
    const auto qa = quantize(a.data());
    const auto qb = quantize(b.data());
    std::vector<int64_t> joint(256 * 256, 0);
    std::array<int64_t, 256> ca{};
    std::array<int64_t, 256> cb{};
    for (std::size_t k = 0; k < qa.size(); ++k) {
        ++joint[qa[k] * 256 + qb[k]];
        ++ca[qa[k]];
        ++cb[qb[k]];
    }
    const double total = static_cast<double>(qa.size());
    double mi = 0.0;
    for (int i = 0; i < 256; ++i) {
        if (ca[i] == 0) continue;
        for (int j = 0; j < 256; ++j) {
            const int64_t c = joint[i * 256 + j];
            if (c == 0) continue;
            // p_ij / (p_i p_j) = c * total / (ca * cb)
            mi += (static_cast<double>(c) / total) *
                  std::log2(static_cast<double>(c) * total / (static_cast<double>(ca[i]) * static_cast<double>(cb[j])));
        }
    }
    return std::max(mi, 0.0);
}

MetricReport fusion_metrics(const GrayImage& fused, const GrayImage& infrared, const GrayImage& visible) {
    MetricReport r;
    r.mi_x = mi_metric(fused, infrared);
    r.mi_y = mi_metric(fused, visible);
    r.mi = r.mi_x + r.mi_y;
    r.en = entropy_metric(fused);
    r.sd = sd_metric(fused);
    r.ssim_x = ssim(fused, infrared);
    r.ssim_y = ssim(fused, visible);
    return r;
}

// ---------------------------------------------------------------------------
// Detection
// ---------------------------------------------------------------------------

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

double average_precision(std::span<const DetectionSample> samples, int class_id, double iou_threshold) {
    struct Candidate {
        double score;
        std::size_t sample;
        const BoundingBox* box;
    };
    std::vector<Candidate> candidates;
    std::vector<std::vector<const BoundingBox*>> truth(samples.size());
    std::size_t positives = 0;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        for (const auto& p : samples[s].predictions) {
            if (p.class_id != class_id) continue;
            if (!p.score) throw ValueError("average_precision: prediction without a score");
            candidates.push_back({*p.score, s, &p});
        }
        for (const auto& g : samples[s].ground_truth) {
            if (g.class_id == class_id) truth[s].push_back(&g);
        }
        positives += truth[s].size();
    }
    if (positives == 0) throw ValueError("average_precision: class " + std::to_string(class_id) + " has no ground truth");

    std::ranges::stable_sort(candidates, std::greater<>{}, &Candidate::score);

    std::vector<std::vector<bool>> matched(samples.size());
    for (std::size_t s = 0; s < samples.size(); ++s) matched[s].assign(truth[s].size(), false);

    std::vector<double> recall;
    std::vector<double> precision;
    recall.reserve(candidates.size());
    precision.reserve(candidates.size());
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (const auto& c : candidates) {
        double best = -1.0;
        std::size_t best_index = 0;
        for (std::size_t g = 0; g < truth[c.sample].size(); ++g) {
            if (matched[c.sample][g]) continue;
            const double overlap = iou(*c.box, *truth[c.sample][g]);
            if (overlap > best) {
                best = overlap;
                best_index = g;
            }
        }
        if (best >= iou_threshold) {
            matched[c.sample][best_index] = true;
            ++tp;
        } else {
            ++fp;
        }
        recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }

    // All-point interpolation over the monotone precision envelope.
    std::vector<double> mrec{0.0};
    std::vector<double> mpre{0.0};
    mrec.insert(mrec.end(), recall.begin(), recall.end());
    mpre.insert(mpre.end(), precision.begin(), precision.end());
    mrec.push_back(1.0);
    mpre.push_back(0.0);
    for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
    double ap = 0.0;
    for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
    return ap;
}

double average_precision(std::span<const BoundingBox> predictions, std::span<const BoundingBox> ground_truth,
                         double iou_threshold) {
    std::set<int> classes;
    for (const auto& g : ground_truth) classes.insert(g.class_id);
    if (classes.size() > 1) throw ValueError("average_precision: ground truth mixes classes");
    if (classes.empty()) throw ValueError("average_precision: no ground truth");
    DetectionSample sample{{predictions.begin(), predictions.end()}, {ground_truth.begin(), ground_truth.end()}};
    return average_precision(std::span<const DetectionSample>(&sample, 1), *classes.begin(), iou_threshold);
}

MapResult map50(std::span<const DetectionSample> samples) {
    std::set<int> classes;
    for (const auto& s : samples) {
        for (const auto& g : s.ground_truth) classes.insert(g.class_id);
    }
    if (classes.empty()) throw ValueError("map50: no class has ground truth; mAP is undefined");
    MapResult result;
    for (int c : classes) result.per_class.emplace_back(c, average_precision(samples, c, 0.5));
    result.map = std::accumulate(result.per_class.begin(), result.per_class.end(), 0.0,
                                 [](double acc, const auto& entry) { return acc + entry.second; }) /
                 static_cast<double>(result.per_class.size());
    return result;
}

}  // namespace dualfuse
