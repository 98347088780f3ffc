#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "dualfuse/error.hpp"

namespace dualfuse {

struct Shape {
    int64_t height = 0;
    int64_t width = 0;

    int64_t pixels() const { return height * width; }
    std::string str() const;
    bool operator==(const Shape&) const = default;
};

// Smallest side accepted by any stored image (SSIM windows, conv stacks).
inline constexpr int64_t kMinImageSide = 8;

struct IntensityTag {};
struct MaskTag {};

// Row-major grid of reals in [0,1]. GrayImage and TargetMask share the
// representation but are distinct types so a mask is never passed where an
// image is expected.
template <class Kind>
class UnitGrid {
public:
    UnitGrid(int64_t height, int64_t width, std::vector<double> data);

    static UnitGrid filled(int64_t height, int64_t width, double value);

    int64_t height() const { return height_; }
    int64_t width() const { return width_; }
    Shape shape() const { return {height_, width_}; }
    std::size_t size() const { return data_.size(); }

    double operator()(int64_t row, int64_t col) const { return data_[static_cast<std::size_t>(row * width_ + col)]; }
    double operator[](std::size_t k) const { return data_[k]; }
    std::span<const double> data() const { return data_; }

    bool operator==(const UnitGrid&) const = default;

private:
    int64_t height_;
    int64_t width_;
    std::vector<double> data_;
};

using GrayImage = UnitGrid<IntensityTag>;
using TargetMask = UnitGrid<MaskTag>;

extern template class UnitGrid<IntensityTag>;
extern template class UnitGrid<MaskTag>;

bool is_binary(const TargetMask& mask);

struct BoundingBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;
    int class_id = 0;
    std::optional<double> score;  // predictions only

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x_min + x_max); }
    double center_y() const { return 0.5 * (y_min + y_max); }

    bool is_valid() const;
    bool inside(const Shape& shape) const;
    BoundingBox clipped(const Shape& shape) const;

    bool operator==(const BoundingBox&) const = default;
};

// Fraction of the box's pixel cells that are mask-positive (mask > 0.5).
double mask_coverage(const BoundingBox& box, const TargetMask& mask);

struct AnnotatedPair {
    std::string pair_id;
    GrayImage infrared;
    GrayImage visible;
    TargetMask mask;
    std::vector<BoundingBox> boxes;

    Shape shape() const { return infrared.shape(); }

    // Throws when shapes disagree or a box leaves the image. With
    // min_coverage > 0 every box must also overlap the mask by that fraction.
    void validate(double min_coverage = 0.0) const;
};

enum class Split { train, val, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct ManifestEntry {
    std::string pair_id;
    std::string infrared_path;  // relative to the manifest root
    std::string visible_path;
    std::string mask_path;
    std::string annotation_path;
    std::string tag;  // optional free-form scenario label

    bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
    std::filesystem::path root_path;
    std::vector<ManifestEntry> entries;
    Split split = Split::train;
    uint64_t seed = 0;

    const ManifestEntry& find(std::string_view pair_id) const;
    std::filesystem::path resolve(const std::string& relative) const { return root_path / relative; }
};

inline constexpr int kManifestVersion = 1;

// Reads a JSON-lines manifest. The root path is the manifest's directory.
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// One line per box: `class_id x_min y_min x_max y_max`.
std::vector<BoundingBox> read_annotations(const std::filesystem::path& path);
void write_annotations(const std::vector<BoundingBox>& boxes, const std::filesystem::path& path);

AnnotatedPair load_pair(const DatasetManifest& manifest, std::string_view pair_id);
std::vector<AnnotatedPair> load_all(const DatasetManifest& manifest);

// 8-bit single-channel PNG I/O. Reads divide by 255; writes store round(v*255).
GrayImage read_png(const std::filesystem::path& path);
void write_png(const GrayImage& image, const std::filesystem::path& path);
TargetMask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const TargetMask& mask, const std::filesystem::path& path);

// round(v*255) with halves rounded up, the quantization every 8-bit rule uses.
inline int quantize_level(double v) { return static_cast<int>(std::floor(v * 255.0 + 0.5)); }
std::vector<uint8_t> quantize(std::span<const double> values);

// Mask algebra. The tensor overloads keep the autograd graph intact.
GrayImage apply_mask(const GrayImage& image, const TargetMask& mask);
torch::Tensor apply_mask(const torch::Tensor& image, const torch::Tensor& mask);
TargetMask complement_mask(const TargetMask& mask);
torch::Tensor complement_mask(const torch::Tensor& mask);

// Tensor bridges. Single images map to 1x1xHxW, batches to Nx1xHxW.
torch::Tensor to_tensor(const GrayImage& image, torch::Dtype dtype = torch::kFloat);
torch::Tensor to_tensor(const TargetMask& mask, torch::Dtype dtype = torch::kFloat);
torch::Tensor stack_images(std::span<const GrayImage> images, torch::Dtype dtype = torch::kFloat);
torch::Tensor stack_masks(std::span<const TargetMask> masks, torch::Dtype dtype = torch::kFloat);
GrayImage image_from_tensor(const torch::Tensor& tensor);
TargetMask mask_from_tensor(const torch::Tensor& tensor);

std::string shape_string(const torch::Tensor& tensor);

}  // namespace dualfuse
