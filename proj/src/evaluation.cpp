#include "dualfuse/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace dualfuse {

using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

torch::Tensor detector_grid(Detector& detector, const torch::Tensor& image) {
    torch::NoGradGuard no_grad;
    detector->eval();
    auto raw = detector->forward(image);
    detector->train();
    return raw;
}

}  // namespace

Fuser generator_fuser(Generator generator) {
    return [generator](const torch::Tensor& x, const torch::Tensor& y) mutable {
        torch::NoGradGuard no_grad;
        const bool was_training = generator->is_training();
        generator->eval();
        auto u = generator->forward(x, y);
        generator->train(was_training);
        return u;
    };
}

Fuser copy_infrared_fuser() {
    return [](const torch::Tensor& x, const torch::Tensor&) { return x.clone(); };
}

Fuser average_fuser() {
    return [](const torch::Tensor& x, const torch::Tensor& y) { return 0.5 * (x + y); };
}

GrayImage fuse_pair(const AnnotatedPair& pair, const Fuser& fuser, torch::Dtype dtype) {
    auto u = fuser(to_tensor(pair.infrared, dtype), to_tensor(pair.visible, dtype));
    return image_from_tensor(u.to(torch::kDouble).clamp(0.0, 1.0));
}

Aggregate aggregate(std::vector<double> values) {
    Aggregate a;
    if (values.empty()) return a;
    const auto n = static_cast<double>(values.size());
    a.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double sq = 0.0;
    for (double v : values) sq += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(sq / n);
    std::sort(values.begin(), values.end());
    const std::size_t mid = values.size() / 2;
    a.median = values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
    return a;
}

const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{"mi", "mi_x", "mi_y", "en", "sd", "ssim_x", "ssim_y"};
    return names;
}

double metric_value(const MetricReport& r, const std::string& name) {
    if (name == "mi") return r.mi;
    if (name == "mi_x") return r.mi_x;
    if (name == "mi_y") return r.mi_y;
    if (name == "en") return r.en;
    if (name == "sd") return r.sd;
    if (name == "ssim_x") return r.ssim_x;
    if (name == "ssim_y") return r.ssim_y;
    throw ValueError("unknown metric '" + name + "'");
}

std::map<std::string, Aggregate> aggregate_rows(const std::vector<FusionRow>& rows) {
    std::map<std::string, Aggregate> out;
    for (const auto& name : metric_names()) {
        std::vector<double> values;
        values.reserve(rows.size());
        for (const auto& row : rows) values.push_back(metric_value(row.metrics, name));
        out[name] = aggregate(std::move(values));
    }
    return out;
}

std::vector<json> EvalReport::jsonl() const {
    std::vector<json> lines;
    for (const auto& row : rows) {
        json j{{"kind", "pair"}, {"label", label}, {"pair_id", row.pair_id}, {"seconds", row.seconds}};
        for (const auto& name : metric_names()) j[name] = metric_value(row.metrics, name);
        lines.push_back(std::move(j));
    }
    for (const auto& [name, a] : aggregates) {
        lines.push_back({{"kind", "aggregate"}, {"label", label}, {"metric", name}, {"mean", a.mean},
                         {"median", a.median}, {"std", a.std}});
    }
    for (const auto& d : detection) {
        json per_class = json::object();
        for (const auto& [cls, ap] : d.map.per_class) per_class[std::to_string(cls)] = ap;
        lines.push_back({{"kind", "detection"}, {"label", label}, {"source", d.source}, {"map50", d.map.map},
                         {"per_class_ap", per_class}});
    }
    lines.push_back({{"kind", "runtime"}, {"label", label}, {"seconds_per_image", seconds_per_image}});
    return lines;
}

void EvalReport::write_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report '" + path.string() + "'");
    for (const auto& line : jsonl()) out << line.dump() << '\n';
}

std::string EvalReport::summary_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << label << " (" << pair_count << " pairs, " << seconds_per_image << " s/image)\n";
    if (!aggregates.empty()) {
        os << std::left << std::setw(10) << "metric" << std::right << std::setw(12) << "mean" << std::setw(12)
           << "median" << std::setw(12) << "std" << '\n';
        for (const auto& name : metric_names()) {
            const auto it = aggregates.find(name);
            if (it == aggregates.end()) continue;
            os << std::left << std::setw(10) << name << std::right << std::setw(12) << it->second.mean
               << std::setw(12) << it->second.median << std::setw(12) << it->second.std << '\n';
        }
    }
    if (!detection.empty()) {
        os << std::left << std::setw(10) << "source" << std::right << std::setw(12) << "mAP@0.5" << "  per-class AP\n";
        for (const auto& d : detection) {
            os << std::left << std::setw(10) << d.source << std::right << std::setw(12) << d.map.map << " ";
            for (const auto& [cls, ap] : d.map.per_class) os << " " << cls << ":" << ap;
            os << '\n';
        }
    }
    return os.str();
}

EvalReport eval_fusion(const std::vector<AnnotatedPair>& pairs, const Fuser& fuser,
                       const std::optional<std::filesystem::path>& fused_dir, torch::Dtype dtype) {
    if (pairs.empty()) throw ValueError("eval_fusion: no pairs");
    if (fused_dir) std::filesystem::create_directories(*fused_dir);
    EvalReport report;
    report.label = "fusion";
    report.pair_count = pairs.size();
    double fuse_seconds = 0.0;
    for (const auto& pair : pairs) {
        const auto start = Clock::now();
        const auto fused = fuse_pair(pair, fuser, dtype);
        const double elapsed = seconds_since(start);
        fuse_seconds += elapsed;
        if (fused_dir) write_png(fused, *fused_dir / (pair.pair_id + ".png"));
        report.rows.push_back({pair.pair_id, fusion_metrics(fused, pair.infrared, pair.visible), elapsed});
    }
    report.aggregates = aggregate_rows(report.rows);
    report.seconds_per_image = fuse_seconds / static_cast<double>(pairs.size());
    return report;
}

EvalReport eval_fusion(const DatasetManifest& manifest, const Fuser& fuser,
                       const std::optional<std::filesystem::path>& fused_dir, torch::Dtype dtype) {
    return eval_fusion(load_all(manifest), fuser, fused_dir, dtype);
}

DetectionSummary eval_detection_source(const std::vector<AnnotatedPair>& pairs, const RawDetector& detector,
                                       const std::string& source, const DecodeOptions& decode) {
    std::vector<DetectionSample> samples;
    samples.reserve(pairs.size());
    for (const auto& pair : pairs) {
        auto raw = detector(pair);
        auto decoded = decode_detections(raw, decode);
        samples.push_back({std::move(decoded.front()), pair.boxes});
    }
    return {source, map50(samples)};
}

EvalReport eval_detection(const std::vector<AnnotatedPair>& pairs, Generator generator, Detector detector,
                          const DecodeOptions& decode, torch::Dtype dtype) {
    if (pairs.empty()) throw ValueError("eval_detection: no pairs");
    EvalReport report;
    report.label = "detection";
    report.pair_count = pairs.size();
    auto fuser = generator_fuser(generator);
    double seconds = 0.0;
    RawDetector fused = [&](const AnnotatedPair& p) {
        const auto start = Clock::now();
        auto u = fuser(to_tensor(p.infrared, dtype), to_tensor(p.visible, dtype));
        auto raw = detector_grid(detector, u);
        seconds += seconds_since(start);
        return raw;
    };
    RawDetector infrared = [&](const AnnotatedPair& p) { return detector_grid(detector, to_tensor(p.infrared, dtype)); };
    RawDetector visible = [&](const AnnotatedPair& p) { return detector_grid(detector, to_tensor(p.visible, dtype)); };
    report.detection.push_back(eval_detection_source(pairs, fused, "fused", decode));
    report.detection.push_back(eval_detection_source(pairs, infrared, "infrared", decode));
    report.detection.push_back(eval_detection_source(pairs, visible, "visible", decode));
    report.seconds_per_image = seconds / static_cast<double>(pairs.size());
    return report;
}

EvalReport eval_detection(const DatasetManifest& manifest, Generator generator, Detector detector,
                          const DecodeOptions& decode, torch::Dtype dtype) {
    return eval_detection(load_all(manifest), std::move(generator), std::move(detector), decode, dtype);
}

torch::Tensor ground_truth_raw_grid(const AnnotatedPair& pair, int64_t num_classes) {
    const auto shape = pair.shape();
    if (shape.height % kDetectorStride != 0 || shape.width % kDetectorStride != 0) {
        throw ShapeError("ground_truth_raw_grid: " + shape.str() + " is not divisible by " + std::to_string(kDetectorStride));
    }
    constexpr double kLogit = 30.0;
    auto logit = [](double p) {
        p = std::clamp(p, 1e-12, 1.0 - 1e-12);
        return std::log(p / (1.0 - p));
    };
    auto raw = torch::full({1, 5 + num_classes, shape.height / kDetectorStride, shape.width / kDetectorStride}, -kLogit,
                           torch::kDouble);
    auto acc = raw.accessor<double, 4>();
    for (const auto& box : pair.boxes) {
        const auto cell = encode_box(box);
        acc[0][0][cell.row][cell.col] = kLogit;
        acc[0][1][cell.row][cell.col] = logit(cell.target[0]);
        acc[0][2][cell.row][cell.col] = logit(cell.target[1]);
        acc[0][3][cell.row][cell.col] = cell.target[2];
        acc[0][4][cell.row][cell.col] = cell.target[3];
        for (int64_t c = 0; c < num_classes; ++c) acc[0][5 + c][cell.row][cell.col] = c == box.class_id ? kLogit : -kLogit;
    }
    return raw;
}

}  // namespace dualfuse
