#include "sinsemi/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "sinsemi/digest.hpp"
#include "sinsemi/errors.hpp"

namespace sinsemi {

Image::Image(int h, int w, int c, double fill)
    : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {
    if (h < 1 || w < 1 || (c != 1 && c != 3)) {
        throw ConfigError("invalid image shape " + std::to_string(h) + "x" + std::to_string(w) +
                          "x" + std::to_string(c));
    }
}

unsigned char to_byte(double v) {
    const double c = std::clamp(v, -1.0, 1.0);
    return static_cast<unsigned char>(std::lround((c + 1.0) * 127.5));
}

double from_byte(unsigned char b) { return 2.0 * (static_cast<double>(b) / 255.0) - 1.0; }

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image load_image(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open image " + path);

    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw IoError("not a PNG file: " + path);
    }

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialization failed");
    }
    std::vector<unsigned char> pixels;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int bit_depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (bit_depth != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported bit depth " + std::to_string(bit_depth) + " in " + path +
                      " (8-bit required)");
    }
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int c = png_get_channels(png, info);
    if (c != 1 && c != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported channel count in " + path);
    }
    pixels.resize(static_cast<std::size_t>(w) * h * c);
    rows.resize(h);
    for (int y = 0; y < h; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * w * c;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(h, w, c);
    std::transform(pixels.begin(), pixels.end(), img.data.begin(), from_byte);
    return img;
}

void save_image(const Image& img, const std::string& path) {
    if (img.empty() || (img.channels != 1 && img.channels != 3)) {
        throw ConfigError("cannot save image with " + std::to_string(img.channels) + " channels");
    }
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write image " + path);

    std::vector<unsigned char> bytes(img.size());
    std::transform(img.data.begin(), img.data.end(), bytes.begin(), to_byte);
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) {
        rows[y] = bytes.data() + static_cast<std::size_t>(y) * img.width * img.channels;
    }

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw ConfigError("resize target must be at least 1x1");
    if (out_h == img.height && out_w == img.width) return img;

    // Per-axis source taps: lower index, upper index, weight of upper.
    struct Tap {
        int lo, hi;
        double frac;
    };
    auto taps = [](int in, int out) {
        std::vector<Tap> t(out);
        const double scale = static_cast<double>(in) / out;
        for (int i = 0; i < out; ++i) {
            double src = (i + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            const int lo = static_cast<int>(std::floor(src));
            const int hi = std::min(lo + 1, in - 1);
            t[i] = {lo, hi, src - lo};
        }
        return t;
    };
    const auto ty = taps(img.height, out_h);
    const auto tx = taps(img.width, out_w);

    Image out(out_h, out_w, img.channels);
    for (int y = 0; y < out_h; ++y) {
        const auto [y0, y1, fy] = ty[y];
        for (int x = 0; x < out_w; ++x) {
            const auto [x0, x1, fx] = tx[x];
            for (int c = 0; c < img.channels; ++c) {
                const double top = img.at(y0, x0, c) * (1.0 - fx) + img.at(y0, x1, c) * fx;
                const double bot = img.at(y1, x0, c) * (1.0 - fx) + img.at(y1, x1, c) * fx;
                out.at(y, x, c) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    return out;
}

int pyramid_side(int side, double scale_factor, int k) {
    return static_cast<int>(std::floor(side / std::pow(scale_factor, k) + 0.5));
}

Pyramid build_pyramid(const Image& img, double scale_factor, int min_side) {
    if (!(scale_factor > 1.0)) throw ConfigError("scale_factor must be > 1");
    if (min_side < 8) throw ConfigError("min_side must be >= 8");
    if (std::min(img.height, img.width) < min_side) {
        throw ConfigError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                          " is smaller than min_side " + std::to_string(min_side));
    }
    Pyramid p;
    p.scale_factor = scale_factor;
    p.source_height = img.height;
    p.source_width = img.width;

    std::vector<Image> fine_to_coarse{img};
    for (int k = 1;; ++k) {
        const int h = pyramid_side(img.height, scale_factor, k);
        const int w = pyramid_side(img.width, scale_factor, k);
        if (std::min(h, w) < min_side) break;
        const Image& prev = fine_to_coarse.back();
        // Rounding can stall on tiny factors; keep levels strictly shrinking.
        if (h >= prev.height || w >= prev.width) break;
        fine_to_coarse.push_back(resize_bilinear(img, h, w));
    }
    p.levels.assign(fine_to_coarse.rbegin(), fine_to_coarse.rend());
    return p;
}

Image flip_horizontal(const Image& img) {
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    return out;
}

Image flip_vertical(const Image& img) {
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(img.height - 1 - y, x, c);
    return out;
}

Image clamp(const Image& img, double lo, double hi) {
    Image out = img;
    for (auto& v : out.data) v = std::clamp(v, lo, hi);
    return out;
}

bool all_finite(const Image& img) {
    return std::all_of(img.data.begin(), img.data.end(), [](double v) { return std::isfinite(v); });
}

std::uint64_t image_digest(const Image& img) {
    const int shape[3] = {img.height, img.width, img.channels};
    std::uint64_t h = fnv1a(shape, sizeof shape);
    return fnv1a(img.data.data(), img.data.size() * sizeof(double), h);
}

}  // namespace sinsemi
