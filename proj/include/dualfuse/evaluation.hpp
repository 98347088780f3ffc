#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "dualfuse/imagecore.hpp"
#include "dualfuse/nets.hpp"
#include "dualfuse/signalops.hpp"

namespace dualfuse {

// Maps (infrared, visible) Nx1xHxW batches to a fused batch in [0,1].
using Fuser = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;

// The network in eval mode without gradient tracking.
Fuser generator_fuser(Generator generator);
// Reference fusers: u := x and u := (x + y) / 2.
Fuser copy_infrared_fuser();
Fuser average_fuser();

GrayImage fuse_pair(const AnnotatedPair& pair, const Fuser& fuser, torch::Dtype dtype = torch::kFloat);

struct Aggregate {
    double mean = 0.0;
    double median = 0.0;
    double std = 0.0;  // population standard deviation
};

Aggregate aggregate(std::vector<double> values);

struct FusionRow {
    std::string pair_id;
    MetricReport metrics;
    double seconds = 0.0;
};

struct DetectionSummary {
    std::string source;  // fused, infrared or visible
    MapResult map;
};

struct EvalReport {
    std::string label;
    std::vector<FusionRow> rows;
    std::map<std::string, Aggregate> aggregates;  // keyed by metric name
    std::vector<DetectionSummary> detection;
    double seconds_per_image = 0.0;
    std::size_t pair_count = 0;

    // One object per pair row, per aggregate and per detection source.
    std::vector<nlohmann::json> jsonl() const;
    void write_jsonl(const std::filesystem::path& path) const;
    std::string summary_table() const;
};

// Metric names in report order and the accessor for each.
const std::vector<std::string>& metric_names();
double metric_value(const MetricReport& report, const std::string& name);

// Recomputes the aggregates from the rows.
std::map<std::string, Aggregate> aggregate_rows(const std::vector<FusionRow>& rows);

// Fuses every pair and measures MI (both parts and sum), EN, SD and SSIM to
// each source. With `fused_dir`, fused images are written there as PNG.
EvalReport eval_fusion(const std::vector<AnnotatedPair>& pairs, const Fuser& fuser,
                       const std::optional<std::filesystem::path>& fused_dir = std::nullopt,
                       torch::Dtype dtype = torch::kFloat);
EvalReport eval_fusion(const DatasetManifest& manifest, const Fuser& fuser,
                       const std::optional<std::filesystem::path>& fused_dir = std::nullopt,
                       torch::Dtype dtype = torch::kFloat);

// Produces the raw 1x(5+C)x(H/16)x(W/16) detector grid for one pair.
using RawDetector = std::function<torch::Tensor(const AnnotatedPair&)>;

DetectionSummary eval_detection_source(const std::vector<AnnotatedPair>& pairs, const RawDetector& detector,
                                       const std::string& source, const DecodeOptions& decode = {});

// Fused, infrared-only and visible-only rows. The single-modality rows feed
// the raw modality straight to the detector.
EvalReport eval_detection(const std::vector<AnnotatedPair>& pairs, Generator generator, Detector detector,
                          const DecodeOptions& decode = {}, torch::Dtype dtype = torch::kFloat);
EvalReport eval_detection(const DatasetManifest& manifest, Generator generator, Detector detector,
                          const DecodeOptions& decode = {}, torch::Dtype dtype = torch::kFloat);

// Test fixture: a raw grid whose decoding reproduces the pair's boxes with
// near-certain scores (one box per cell; later boxes in a shared cell win).
torch::Tensor ground_truth_raw_grid(const AnnotatedPair& pair, int64_t num_classes);

}  // namespace dualfuse
