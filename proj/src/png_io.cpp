#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>

#include "dualfuse/imagecore.hpp"

namespace dualfuse {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct Raw8 {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<uint8_t> pixels;
};

Raw8 read_png_8bit(const fs::path& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw IoError("cannot open image " + path.string());

    png_byte signature[8];
    if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
        throw FormatError("not a PNG file: " + path.string());
    }

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw FormatError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw FormatError("libpng init failed");
    }

    Raw8 raw;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("corrupt PNG: " + path.string());
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (color != PNG_COLOR_TYPE_GRAY || depth != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("expected 8-bit grayscale PNG: " + path.string());
    }
    raw.width = png_get_image_width(png, info);
    raw.height = png_get_image_height(png, info);
    raw.pixels.resize(static_cast<std::size_t>(raw.width * raw.height));
    rows.resize(static_cast<std::size_t>(raw.height));
    for (int64_t r = 0; r < raw.height; ++r) rows[static_cast<std::size_t>(r)] = raw.pixels.data() + r * raw.width;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return raw;
}

void write_png_8bit(const fs::path& path, int64_t height, int64_t width, std::vector<uint8_t> pixels) {
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw IoError("cannot write image " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng init failed");
    }
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int64_t r = 0; r < height; ++r) rows[static_cast<std::size_t>(r)] = pixels.data() + r * width;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing PNG " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

GrayImage read_png(const fs::path& path) {
    auto raw = read_png_8bit(path);
    std::vector<double> data(raw.pixels.size());
    for (std::size_t k = 0; k < data.size(); ++k) data[k] = raw.pixels[k] / 255.0;
    return GrayImage(raw.height, raw.width, std::move(data));
}

void write_png(const GrayImage& image, const fs::path& path) {
    write_png_8bit(path, image.height(), image.width(), quantize(image.data()));
}

TargetMask read_mask_png(const fs::path& path) {
    auto raw = read_png_8bit(path);
    std::vector<double> data(raw.pixels.size());
    for (std::size_t k = 0; k < data.size(); ++k) data[k] = raw.pixels[k] / 255.0;
    return TargetMask(raw.height, raw.width, std::move(data));
}

void write_mask_png(const TargetMask& mask, const fs::path& path) {
    write_png_8bit(path, mask.height(), mask.width(), quantize(mask.data()));
}

}  // namespace dualfuse
