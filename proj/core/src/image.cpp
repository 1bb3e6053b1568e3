#include "rstm/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <csetjmp>
#include <memory>

namespace rstm {

const std::array<std::string, kNumClasses>& class_names() {
    static const std::array<std::string, kNumClasses> names = {
        "background", "skin", "hair", "left-eye", "right-eye", "nose", "mouth", "brows"};
    return names;
}

int class_id_from_name(const std::string& name) {
    const auto& names = class_names();
    for (int i = 0; i < kNumClasses; ++i)
        if (names[static_cast<std::size_t>(i)] == name) return i;
    throw std::invalid_argument("unknown region name: " + name);
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// read callback that tracks the byte offset so parse errors can report it
struct ReadState {
    std::FILE* f;
    std::size_t offset = 0;
    bool short_read = false;
};

void read_fn(png_structp png, png_bytep out, png_size_t len) {
    auto* st = static_cast<ReadState*>(png_get_io_ptr(png));
    std::size_t got = std::fread(out, 1, len, st->f);
    st->offset += got;
    if (got != len) {
        st->short_read = true;
        png_error(png, "unexpected end of file");
    }
}

[[noreturn]] void fail_parse(const std::string& path, std::size_t offset, const char* what) {
    throw PngError("PNG parse error in " + path + " at byte " + std::to_string(offset) + ": " +
                   what);
}

std::uint8_t quant(float v) {
    float c = std::min(1.f, std::max(0.f, v));
    return static_cast<std::uint8_t>(std::lround(c * 255.f));
}

void write_png(const std::string& path, int h, int w, int channels,
               const std::vector<std::uint8_t>& bytes) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw PngError("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw PngError("PNG write error for " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y)
        rows[static_cast<std::size_t>(y)] =
            const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * w * channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_png(const std::string& path, int expect_channels, int* out_h,
                                   int* out_w) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw PngError("cannot open " + path);
    ReadState st{f.get()};
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    std::vector<std::uint8_t> data;
    if (setjmp(png_jmpbuf(png))) {
        std::size_t off = st.offset;
        png_destroy_read_struct(&png, &info, nullptr);
        fail_parse(path, off, "invalid or truncated PNG stream");
    }
    png_set_read_fn(png, &st, read_fn);
    png_read_info(png, info);
    int w = static_cast<int>(png_get_image_width(png, info));
    int h = static_cast<int>(png_get_image_height(png, info));
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (expect_channels == 3) {
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
            png_set_gray_to_rgb(png);
        png_set_strip_alpha(png);
    } else {
        if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
            color == PNG_COLOR_TYPE_PALETTE)
            png_set_rgb_to_gray_fixed(png, 1, -1, -1);
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    data.resize(static_cast<std::size_t>(h) * w * expect_channels);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y)
        rows[static_cast<std::size_t>(y)] =
            data.data() + static_cast<std::size_t>(y) * w * expect_channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    *out_h = h;
    *out_w = w;
    return data;
}

}  // namespace

void write_png_rgb(const std::string& path, const Image& img) {
    std::vector<std::uint8_t> bytes(img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) bytes[i] = quant(img.pixels[i]);
    write_png(path, img.height, img.width, 3, bytes);
}

Image read_png_rgb(const std::string& path) {
    int h = 0, w = 0;
    auto bytes = read_png(path, 3, &h, &w);
    Image img(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        img.pixels[i] = static_cast<float>(bytes[i]) / 255.f;
    return img;
}

void write_png_gray(const std::string& path, const SegMask& mask) {
    std::vector<std::uint8_t> bytes(mask.labels.begin(), mask.labels.end());
    write_png(path, mask.height, mask.width, 1, bytes);
}

SegMask read_png_gray(const std::string& path) {
    int h = 0, w = 0;
    auto bytes = read_png(path, 1, &h, &w);
    SegMask m(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        if (bytes[i] >= kNumClasses)
            fail_parse(path, i, "mask label out of range");
        m.labels[i] = bytes[i];
    }
    return m;
}

SegMask resize_mask_nearest(const SegMask& m, int out_h, int out_w) {
    SegMask out(out_h, out_w);
    for (int i = 0; i < out_h; ++i) {
        int sh = std::min(m.height - 1, i * m.height / out_h);
        for (int j = 0; j < out_w; ++j) {
            int sw = std::min(m.width - 1, j * m.width / out_w);
            out.at(i, j) = m.at(sh, sw);
        }
    }
    return out;
}

}  // namespace rstm
