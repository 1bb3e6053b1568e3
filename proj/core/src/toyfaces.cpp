#include "rstm/toyfaces.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace rstm {

namespace fs = std::filesystem;
using json = nlohmann::json;

Split split_from_name(const std::string& name) {
    if (name == "studio") return Split::kStudio;
    if (name == "wild") return Split::kWild;
    throw std::invalid_argument("unknown split: " + name);
}

FaceSpec sample_face(std::uint64_t seed, Split split) {
    // distinct streams per split so studio/wild never share a face
    Rng rng(seed * 2 + (split == Split::kWild ? 1 : 0) + 0x7f4a7c15u);
    FaceSpec s;
    s.seed = seed;
    s.split = split;
    s.brightness = split == Split::kStudio ? rng.uniform(0.95, 1.05) : rng.uniform(0.4, 1.3);

    auto color = [&](double rl, double rh, double gl, double gh, double bl, double bh) {
        return std::array<double, 3>{rng.uniform(rl, rh), rng.uniform(gl, gh),
                                     rng.uniform(bl, bh)};
    };
    s.colors[kBackground] = color(0.10, 0.45, 0.10, 0.45, 0.15, 0.55);
    s.colors[kSkin] = color(0.55, 0.85, 0.40, 0.70, 0.30, 0.55);
    // nose shares the skin palette, slightly shaded
    double shade = rng.uniform(0.85, 0.98);
    for (int c = 0; c < 3; ++c) s.colors[kNose][static_cast<std::size_t>(c)] =
        s.colors[kSkin][static_cast<std::size_t>(c)] * shade;
    s.colors[kHair] = color(0.05, 0.75, 0.03, 0.55, 0.02, 0.45);
    s.colors[kLeftEye] = color(0.05, 0.30, 0.05, 0.30, 0.05, 0.45);
    s.colors[kRightEye] = s.colors[kLeftEye];
    s.colors[kMouth] = color(0.55, 0.85, 0.15, 0.35, 0.15, 0.35);
    s.colors[kBrows] = color(0.05, 0.25, 0.03, 0.20, 0.02, 0.18);

    s.face_cx = 32.0 + rng.uniform(-2.0, 2.0);
    s.face_cy = 34.0 + rng.uniform(-2.0, 2.0);
    s.face_rx = rng.uniform(13.0, 16.0);
    s.face_ry = rng.uniform(17.0, 20.0);
    s.hair_cy = s.face_cy - rng.uniform(4.0, 7.0);
    s.hair_rx = s.face_rx + rng.uniform(4.0, 7.0);
    s.hair_ry = s.face_ry + rng.uniform(3.0, 6.0);
    s.eye_dx = rng.uniform(5.0, 7.0);
    s.eye_dy = -rng.uniform(5.0, 7.0);
    s.eye_rx = rng.uniform(2.0, 3.0);
    s.eye_ry = rng.uniform(1.2, 1.8);
    s.brow_dy = s.eye_dy - rng.uniform(3.0, 4.5);
    s.brow_rx = rng.uniform(2.5, 3.5);
    s.brow_ry = rng.uniform(0.6, 1.0);
    s.nose_dy = rng.uniform(1.0, 3.0);
    s.nose_rx = rng.uniform(1.5, 2.5);
    s.nose_ry = rng.uniform(2.5, 4.0);
    s.mouth_dy = rng.uniform(8.5, 11.0);
    s.mouth_rx = rng.uniform(4.0, 6.0);
    s.mouth_ry = rng.uniform(1.2, 2.0);

    s.hair_freq = rng.uniform(2.0, 10.0);
    s.hair_angle = rng.uniform(0.0, 3.14159265358979);
    s.hair_amp = rng.uniform(0.08, 0.22);
    return s;
}

namespace {

inline bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
    double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
}

}  // namespace

void render(const FaceSpec& s, Image* img, SegMask* mask) {
    *img = Image(s.height, s.width);
    *mask = SegMask(s.height, s.width);
    double ca = std::cos(s.hair_angle), sa = std::sin(s.hair_angle);
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            double fx = x + 0.5, fy = y + 0.5;
            int label = kBackground;
            // topmost first
            if (in_ellipse(fx, fy, s.face_cx, s.face_cy + s.mouth_dy, s.mouth_rx, s.mouth_ry))
                label = kMouth;
            else if (in_ellipse(fx, fy, s.face_cx, s.face_cy + s.nose_dy, s.nose_rx, s.nose_ry))
                label = kNose;
            else if (in_ellipse(fx, fy, s.face_cx - s.eye_dx, s.face_cy + s.eye_dy, s.eye_rx,
                                s.eye_ry))
                label = kLeftEye;
            else if (in_ellipse(fx, fy, s.face_cx + s.eye_dx, s.face_cy + s.eye_dy, s.eye_rx,
                                s.eye_ry))
                label = kRightEye;
            else if (in_ellipse(fx, fy, s.face_cx - s.eye_dx, s.face_cy + s.brow_dy, s.brow_rx,
                                s.brow_ry) ||
                     in_ellipse(fx, fy, s.face_cx + s.eye_dx, s.face_cy + s.brow_dy, s.brow_rx,
                                s.brow_ry))
                label = kBrows;
            else if (in_ellipse(fx, fy, s.face_cx, s.face_cy, s.face_rx, s.face_ry))
                label = kSkin;
            else if (in_ellipse(fx, fy, s.face_cx, s.hair_cy, s.hair_rx, s.hair_ry))
                label = kHair;
            mask->at(y, x) = static_cast<std::uint8_t>(label);
            const auto& base = s.colors[static_cast<std::size_t>(label)];
            double tex = 0.0;
            if (label == kHair) {
                double u = (fx * ca + fy * sa) / s.width;
                tex = s.hair_amp * std::sin(6.283185307179586 * s.hair_freq * u);
            }
            for (int c = 0; c < 3; ++c) {
                double v = (base[static_cast<std::size_t>(c)] + tex) * s.brightness;
                img->at(y, x, c) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
            }
        }
    }
}

CompositeResult naive_composite(const Image& target, const SegMask& target_mask,
                                const Image& reference, const SegMask& reference_mask,
                                const std::set<int>& region_set) {
    if (target.height != reference.height || target.width != reference.width ||
        target_mask.height != target.height || reference_mask.height != reference.height)
        throw std::invalid_argument("naive_composite: dimension mismatch");
    CompositeResult out;
    out.image = target;
    out.fg_mask = SegMask(target.height, target.width);
    int H = target.height, W = target.width;
    for (int cls : region_set) {
        double rsy = 0, rsx = 0, tsy = 0, tsx = 0;
        long rcnt = 0, tcnt = 0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (reference_mask.at(y, x) == cls) {
                    rsy += y;
                    rsx += x;
                    ++rcnt;
                }
                if (target_mask.at(y, x) == cls) {
                    tsy += y;
                    tsx += x;
                    ++tcnt;
                }
            }
        if (rcnt == 0) {
            out.warnings.push_back("region absent in reference: " +
                                   class_names()[static_cast<std::size_t>(cls)]);
            continue;
        }
        int dy = 0, dx = 0;
        if (tcnt > 0) {
            dy = static_cast<int>(std::lround(tsy / tcnt - rsy / rcnt));
            dx = static_cast<int>(std::lround(tsx / tcnt - rsx / rcnt));
        }
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (reference_mask.at(y, x) != cls) continue;
                int ty = y + dy, tx = x + dx;
                if (ty < 0 || ty >= H || tx < 0 || tx >= W) continue;
                for (int c = 0; c < 3; ++c) out.image.at(ty, tx, c) = reference.at(y, x, c);
                out.fg_mask.at(ty, tx) = 1;
            }
    }
    return out;
}

namespace {

std::string index_name(int i, const char* suffix) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06d_%s.png", i, suffix);
    return buf;
}

}  // namespace

void write_dataset(const std::string& dir, int count, std::uint64_t seed, Split split) {
    fs::create_directories(dir);
    for (int i = 0; i < count; ++i) {
        // per-image stream derived from (dataset seed, index)
        Rng mix(seed);
        std::uint64_t img_seed = mix.fork(static_cast<std::uint64_t>(i) + 1).next_u64();
        FaceSpec spec = sample_face(img_seed, split);
        Image img;
        SegMask mask;
        render(spec, &img, &mask);
        write_png_rgb(dir + "/" + index_name(i, "img"), img);
        write_png_gray(dir + "/" + index_name(i, "mask"), mask);
    }
    json meta;
    meta["count"] = count;
    meta["seed"] = seed;
    meta["split"] = split_name(split);
    meta["classes"] = std::vector<std::string>(class_names().begin(), class_names().end());
    std::ofstream f(dir + "/meta.json");
    f << meta.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
    std::ifstream f(dir + "/meta.json");
    if (!f) throw std::runtime_error("cannot open " + dir + "/meta.json");
    json meta;
    try {
        f >> meta;
    } catch (const json::exception& e) {
        throw std::runtime_error("bad meta.json in " + dir + ": " + e.what());
    }
    Dataset ds;
    ds.seed = meta.at("seed").get<std::uint64_t>();
    ds.split = split_from_name(meta.at("split").get<std::string>());
    ds.classes = meta.at("classes").get<std::vector<std::string>>();
    int count = meta.at("count").get<int>();
    ds.images.reserve(static_cast<std::size_t>(count));
    ds.masks.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        ds.images.push_back(read_png_rgb(dir + "/" + index_name(i, "img")));
        ds.masks.push_back(read_png_gray(dir + "/" + index_name(i, "mask")));
    }
    return ds;
}

}  // namespace rstm
