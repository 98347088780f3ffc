#include "dualfuse/imagecore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace dualfuse {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string Shape::str() const { return std::to_string(height) + "x" + std::to_string(width); }

template <class Kind>
UnitGrid<Kind>::UnitGrid(int64_t height, int64_t width, std::vector<double> data)
    : height_(height), width_(width), data_(std::move(data)) {
    if (height_ < kMinImageSide || width_ < kMinImageSide) {
        throw ShapeError("grid " + Shape{height_, width_}.str() + " is below the minimum side of " +
                         std::to_string(kMinImageSide));
    }
    if (static_cast<int64_t>(data_.size()) != height_ * width_) {
        throw ShapeError("grid " + Shape{height_, width_}.str() + " given " + std::to_string(data_.size()) +
                         " values");
    }
    for (std::size_t k = 0; k < data_.size(); ++k) {
        const double v = data_[k];
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw ValueError("grid value " + std::to_string(v) + " at index " + std::to_string(k) +
                             " is outside [0,1]");
        }
    }
}

template <class Kind>
UnitGrid<Kind> UnitGrid<Kind>::filled(int64_t height, int64_t width, double value) {
    return UnitGrid(height, width, std::vector<double>(static_cast<std::size_t>(std::max<int64_t>(height * width, 0)), value));
}

template class UnitGrid<IntensityTag>;
template class UnitGrid<MaskTag>;

bool is_binary(const TargetMask& mask) {
    return std::ranges::all_of(mask.data(), [](double v) { return v == 0.0 || v == 1.0; });
}

// ---------------------------------------------------------------------------
// Boxes and pairs
// ---------------------------------------------------------------------------

bool BoundingBox::is_valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) && std::isfinite(y_max) &&
           x_min < x_max && y_min < y_max && class_id >= 0 && (!score || (*score >= 0.0 && *score <= 1.0));
}

bool BoundingBox::inside(const Shape& shape) const {
    return x_min >= 0.0 && y_min >= 0.0 && x_max <= static_cast<double>(shape.width) &&
           y_max <= static_cast<double>(shape.height);
}

BoundingBox BoundingBox::clipped(const Shape& shape) const {
    BoundingBox out = *this;
    out.x_min = std::clamp(x_min, 0.0, static_cast<double>(shape.width));
    out.x_max = std::clamp(x_max, 0.0, static_cast<double>(shape.width));
    out.y_min = std::clamp(y_min, 0.0, static_cast<double>(shape.height));
    out.y_max = std::clamp(y_max, 0.0, static_cast<double>(shape.height));
    return out;
}

double mask_coverage(const BoundingBox& box, const TargetMask& mask) {
    const auto c0 = static_cast<int64_t>(std::floor(std::max(box.x_min, 0.0)));
    const auto r0 = static_cast<int64_t>(std::floor(std::max(box.y_min, 0.0)));
    const auto c1 = std::min<int64_t>(static_cast<int64_t>(std::ceil(box.x_max)), mask.width());
    const auto r1 = std::min<int64_t>(static_cast<int64_t>(std::ceil(box.y_max)), mask.height());
    int64_t cells = 0;
    int64_t positive = 0;
    for (int64_t r = r0; r < r1; ++r) {
        for (int64_t c = c0; c < c1; ++c) {
            ++cells;
            if (mask(r, c) > 0.5) ++positive;
        }
    }
    return cells == 0 ? 0.0 : static_cast<double>(positive) / static_cast<double>(cells);
}

void AnnotatedPair::validate(double min_coverage) const {
    if (infrared.shape() != visible.shape() || infrared.shape() != mask.shape()) {
        throw ShapeError("pair '" + pair_id + "': infrared " + infrared.shape().str() + ", visible " +
                         visible.shape().str() + ", mask " + mask.shape().str() + " differ");
    }
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& box = boxes[i];
        if (!box.is_valid() || !box.inside(shape())) {
            throw FormatError("pair '" + pair_id + "': box " + std::to_string(i) + " is invalid or outside " +
                              shape().str());
        }
        if (min_coverage > 0.0 && mask_coverage(box, mask) < min_coverage) {
            throw FormatError("pair '" + pair_id + "': box " + std::to_string(i) + " covers less than " +
                              std::to_string(min_coverage) + " mask");
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::string_view to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split parse_split(std::string_view text) {
    if (text == "train") return Split::train;
    if (text == "val") return Split::val;
    if (text == "test") return Split::test;
    throw ValueError("unknown split '" + std::string(text) + "'");
}

const ManifestEntry& DatasetManifest::find(std::string_view pair_id) const {
    auto it = std::ranges::find(entries, pair_id, &ManifestEntry::pair_id);
    if (it == entries.end()) throw ValueError("unknown pair_id '" + std::string(pair_id) + "'");
    return *it;
}

namespace {

std::string required_string(const json& record, const char* key, std::size_t line_no) {
    if (!record.contains(key) || !record[key].is_string()) {
        throw FormatError("manifest line " + std::to_string(line_no) + ": missing string field '" + key + "'");
    }
    return record[key].get<std::string>();
}

}  // namespace

DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());

    DatasetManifest manifest;
    manifest.root_path = path.parent_path();

    std::string line;
    std::size_t line_no = 0;
    std::optional<std::size_t> declared_count;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!record.is_object()) throw FormatError("manifest line " + std::to_string(line_no) + ": not an object");

        if (!declared_count) {
            try {
                if (record.at("version").get<int>() != kManifestVersion) {
                    throw FormatError("manifest line 1: unsupported version");
                }
                manifest.split = parse_split(record.at("split").get<std::string>());
                manifest.seed = record.at("seed").get<uint64_t>();
                declared_count = record.at("count").get<std::size_t>();
            } catch (const json::exception& e) {
                throw FormatError("manifest line " + std::to_string(line_no) + ": bad header: " + e.what());
            }
            continue;
        }

        ManifestEntry entry;
        entry.pair_id = required_string(record, "pair_id", line_no);
        entry.infrared_path = required_string(record, "ir", line_no);
        entry.visible_path = required_string(record, "vis", line_no);
        entry.mask_path = required_string(record, "mask", line_no);
        entry.annotation_path = required_string(record, "ann", line_no);
        if (record.contains("tag")) entry.tag = required_string(record, "tag", line_no);
        if (!seen.insert(entry.pair_id).second) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": duplicate pair_id '" + entry.pair_id +
                              "'");
        }
        for (const auto* rel : {&entry.infrared_path, &entry.visible_path, &entry.mask_path, &entry.annotation_path}) {
            if (!fs::exists(manifest.resolve(*rel))) {
                throw IoError("pair '" + entry.pair_id + "' references missing file " + *rel);
            }
        }
        manifest.entries.push_back(std::move(entry));
    }
    if (!declared_count) throw FormatError("manifest " + path.string() + " has no header line");
    if (*declared_count != manifest.entries.size()) {
        throw FormatError("manifest header declares " + std::to_string(*declared_count) + " entries, found " +
                          std::to_string(manifest.entries.size()));
    }
    return manifest;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + path.string());
    json header = {{"version", kManifestVersion},
                   {"split", std::string(to_string(manifest.split))},
                   {"seed", manifest.seed},
                   {"count", manifest.entries.size()}};
    out << header.dump() << '\n';
    for (const auto& e : manifest.entries) {
        json record = {{"pair_id", e.pair_id},
                       {"ir", e.infrared_path},
                       {"vis", e.visible_path},
                       {"mask", e.mask_path},
                       {"ann", e.annotation_path}};
        if (!e.tag.empty()) record["tag"] = e.tag;
        out << record.dump() << '\n';
    }
    if (!out) throw IoError("failed writing manifest " + path.string());
}

std::vector<BoundingBox> read_annotations(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open annotation file " + path.string());
    std::vector<BoundingBox> boxes;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream fields(line);
        BoundingBox box;
        std::string extra;
        if (!(fields >> box.class_id >> box.x_min >> box.y_min >> box.x_max >> box.y_max) || (fields >> extra)) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected `class_id x0 y0 x1 y1`");
        }
        if (!box.is_valid()) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": degenerate box");
        }
        boxes.push_back(box);
    }
    return boxes;
}

void write_annotations(const std::vector<BoundingBox>& boxes, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write annotation file " + path.string());
    out.precision(17);
    for (const auto& b : boxes) {
        out << b.class_id << ' ' << b.x_min << ' ' << b.y_min << ' ' << b.x_max << ' ' << b.y_max << '\n';
    }
}

AnnotatedPair load_pair(const DatasetManifest& manifest, std::string_view pair_id) {
    const auto& entry = manifest.find(pair_id);
    AnnotatedPair pair{
        .pair_id = entry.pair_id,
        .infrared = read_png(manifest.resolve(entry.infrared_path)),
        .visible = read_png(manifest.resolve(entry.visible_path)),
        .mask = read_mask_png(manifest.resolve(entry.mask_path)),
        .boxes = read_annotations(manifest.resolve(entry.annotation_path)),
    };
    pair.validate();
    return pair;
}

std::vector<AnnotatedPair> load_all(const DatasetManifest& manifest) {
    std::vector<AnnotatedPair> pairs;
    pairs.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) pairs.push_back(load_pair(manifest, e.pair_id));
    return pairs;
}

std::vector<uint8_t> quantize(std::span<const double> values) {
    std::vector<uint8_t> out(values.size());
    std::ranges::transform(values, out.begin(),
                           [](double v) { return static_cast<uint8_t>(std::clamp(quantize_level(v), 0, 255)); });
    return out;
}

// ---------------------------------------------------------------------------
// Mask algebra
// ---------------------------------------------------------------------------

std::string shape_string(const torch::Tensor& tensor) {
    std::string out;
    for (int64_t d = 0; d < tensor.dim(); ++d) out += (d ? "x" : "") + std::to_string(tensor.size(d));
    return out.empty() ? "scalar" : out;
}

GrayImage apply_mask(const GrayImage& image, const TargetMask& mask) {
    if (image.shape() != mask.shape()) {
        throw ShapeError("apply_mask: image " + image.shape().str() + " vs mask " + mask.shape().str());
    }
    std::vector<double> out(image.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = image[k] * mask[k];
    return GrayImage(image.height(), image.width(), std::move(out));
}

torch::Tensor apply_mask(const torch::Tensor& image, const torch::Tensor& mask) {
    if (image.sizes() != mask.sizes()) {
        throw ShapeError("apply_mask: image " + shape_string(image) + " vs mask " + shape_string(mask));
    }
    return image * mask;
}

TargetMask complement_mask(const TargetMask& mask) {
    std::vector<double> out(mask.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = 1.0 - mask[k];
    return TargetMask(mask.height(), mask.width(), std::move(out));
}

torch::Tensor complement_mask(const torch::Tensor& mask) { return 1.0 - mask; }

// ---------------------------------------------------------------------------
// Tensor bridges
// ---------------------------------------------------------------------------

namespace {

template <class Grid>
torch::Tensor grid_to_tensor(const Grid& grid, torch::Dtype dtype) {
    auto data = grid.data();
    auto t = torch::from_blob(const_cast<double*>(data.data()), {1, 1, grid.height(), grid.width()}, torch::kDouble);
    return t.to(dtype).clone();
}

template <class Grid>
torch::Tensor stack_grids(std::span<const Grid> grids, torch::Dtype dtype) {
    if (grids.empty()) throw ValueError("cannot stack an empty batch");
    std::vector<torch::Tensor> parts;
    parts.reserve(grids.size());
    for (const auto& g : grids) {
        if (g.shape() != grids.front().shape()) {
            throw ShapeError("batch mixes shapes " + grids.front().shape().str() + " and " + g.shape().str());
        }
        parts.push_back(grid_to_tensor(g, dtype));
    }
    return torch::cat(parts, 0);
}

template <class Grid>
Grid grid_from_tensor(const torch::Tensor& tensor) {
    auto t = tensor.detach().to(torch::kCPU, torch::kDouble).contiguous();
    if (t.dim() == 4 && t.size(0) == 1 && t.size(1) == 1) t = t.squeeze(0).squeeze(0);
    if (t.dim() != 2) throw ShapeError("expected an HxW or 1x1xHxW tensor, got " + shape_string(tensor));
    const double* p = t.data_ptr<double>();
    return Grid(t.size(0), t.size(1), std::vector<double>(p, p + t.numel()));
}

}  // namespace

torch::Tensor to_tensor(const GrayImage& image, torch::Dtype dtype) { return grid_to_tensor(image, dtype); }
torch::Tensor to_tensor(const TargetMask& mask, torch::Dtype dtype) { return grid_to_tensor(mask, dtype); }
torch::Tensor stack_images(std::span<const GrayImage> images, torch::Dtype dtype) { return stack_grids(images, dtype); }
torch::Tensor stack_masks(std::span<const TargetMask> masks, torch::Dtype dtype) { return stack_grids(masks, dtype); }
GrayImage image_from_tensor(const torch::Tensor& tensor) { return grid_from_tensor<GrayImage>(tensor); }
TargetMask mask_from_tensor(const torch::Tensor& tensor) { return grid_from_tensor<TargetMask>(tensor); }

}  // namespace dualfuse
