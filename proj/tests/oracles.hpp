#pragma once

// Direct, loop-based reference implementations used only by the tests.

#include <array>
#include <cstdint>
#include <vector>

#include "dualfuse/imagecore.hpp"

namespace oracle {

std::vector<uint8_t> levels(const dualfuse::GrayImage& image);

std::array<int64_t, 256> histogram(const std::vector<uint8_t>& levels);

// S(p) = sum over every pixel q of |L(p) - L(q)|.
std::vector<double> saliency(const std::vector<uint8_t>& levels);

double entropy(const std::vector<uint8_t>& levels);
double standard_deviation(const std::vector<uint8_t>& levels);
double mutual_information(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b);

// Gaussian-windowed SSIM with explicit window loops.
double ssim(const std::vector<double>& a, const std::vector<double>& b, int64_t height, int64_t width);

// Sobel magnitude with reflect padding.
std::vector<double> sobel(const std::vector<double>& image, int64_t height, int64_t width);

// AP from an explicit precision/recall list with the all-point envelope.
double average_precision(const std::vector<std::pair<double, bool>>& scored_hits, int64_t num_gt);

dualfuse::GrayImage random_image(uint64_t seed, int64_t height, int64_t width);

}  // namespace oracle
