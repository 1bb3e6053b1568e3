#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "rstm/image.hpp"
#include "rstm/rng.hpp"

namespace rstm {

enum class Split { kStudio, kWild };

inline std::string split_name(Split s) { return s == Split::kStudio ? "studio" : "wild"; }
Split split_from_name(const std::string& name);

// Full recipe for one synthetic face: colors, ellipse geometry, hair texture
// and a global lighting multiplier. render() is a pure function of this.
struct FaceSpec {
    std::uint64_t seed = 0;
    Split split = Split::kStudio;
    double brightness = 1.0;  // in [0.4, 1.3]; studio stays in [0.95, 1.05]

    std::array<std::array<double, 3>, kNumClasses> colors{};

    // ellipse geometry, pixel units on a height x width canvas
    double face_cx, face_cy, face_rx, face_ry;
    double hair_cy, hair_rx, hair_ry;
    double eye_dx, eye_dy, eye_rx, eye_ry;
    double brow_dy, brow_rx, brow_ry;
    double nose_dy, nose_rx, nose_ry;
    double mouth_dy, mouth_rx, mouth_ry;

    // sinusoidal hair stripes: frequency in cycles per canvas width
    double hair_freq;   // [2, 10]
    double hair_angle;  // radians
    double hair_amp;

    int height = 64, width = 64;
};

// Deterministic per (seed, split).
FaceSpec sample_face(std::uint64_t seed, Split split);

// Rasterize: topmost region wins the mask label; image is per-region base
// color (+ hair stripes), scaled by brightness and clamped to [0,1].
void render(const FaceSpec& spec, Image* img, SegMask* mask);

struct CompositeResult {
    Image image;
    SegMask fg_mask;  // 1 where pixels were replaced, else 0
    std::vector<std::string> warnings;
};

// Copy reference pixels of the chosen classes into the target, aligned by
// per-region mean position, no blending.
CompositeResult naive_composite(const Image& target, const SegMask& target_mask,
                                const Image& reference, const SegMask& reference_mask,
                                const std::set<int>& region_set);

struct Dataset {
    std::vector<Image> images;
    std::vector<SegMask> masks;
    std::uint64_t seed = 0;
    Split split = Split::kStudio;
    std::vector<std::string> classes;
};

// Layout: NNNNNN_img.png, NNNNNN_mask.png, meta.json
void write_dataset(const std::string& dir, int count, std::uint64_t seed, Split split);
Dataset read_dataset(const std::string& dir);

}  // namespace rstm
