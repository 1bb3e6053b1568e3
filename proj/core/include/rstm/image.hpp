#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rstm {

constexpr int kNumClasses = 8;

// class ids are stable across the whole pipeline
enum FaceClass : int {
    kBackground = 0,
    kSkin = 1,
    kHair = 2,
    kLeftEye = 3,
    kRightEye = 4,
    kNose = 5,
    kMouth = 6,
    kBrows = 7,
};

const std::array<std::string, kNumClasses>& class_names();
int class_id_from_name(const std::string& name);  // throws on unknown name

// H x W x 3 floats in [0,1], row-major, interleaved channels
struct Image {
    int height = 0, width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0.f) {}
    float& at(int h, int w, int c) {
        return pixels[(static_cast<std::size_t>(h) * width + w) * 3 + c];
    }
    float at(int h, int w, int c) const {
        return pixels[(static_cast<std::size_t>(h) * width + w) * 3 + c];
    }
};

// H x W integer class ids in [0, kNumClasses)
struct SegMask {
    int height = 0, width = 0;
    std::vector<std::uint8_t> labels;

    SegMask() = default;
    SegMask(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}
    std::uint8_t& at(int h, int w) { return labels[static_cast<std::size_t>(h) * width + w]; }
    std::uint8_t at(int h, int w) const { return labels[static_cast<std::size_t>(h) * width + w]; }
};

struct PngError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// 8-bit PNG I/O; floats are quantized with round(v*255) on write and read
// back as k/255.
void write_png_rgb(const std::string& path, const Image& img);
Image read_png_rgb(const std::string& path);
void write_png_gray(const std::string& path, const SegMask& mask);
SegMask read_png_gray(const std::string& path);

// nearest-neighbor label downsample (floor index mapping, matches resize)
SegMask resize_mask_nearest(const SegMask& m, int out_h, int out_w);

}  // namespace rstm
