#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace sinsemi {

/// H x W x C raster, row-major with interleaved channels. Nominal range [-1, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, int c, double fill = 0.0);

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    double& at(int y, int x, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

/// Coarse-to-fine image pyramid. levels.front() is the coarsest level,
/// levels.back() is the source image.
struct Pyramid {
    std::vector<Image> levels;
    double scale_factor = 1.4;
    int source_height = 0;
    int source_width = 0;

    int size() const { return static_cast<int>(levels.size()); }
};

/// Reads an 8-bit grayscale or RGB PNG. Byte v maps to 2 * v / 255 - 1.
/// Gray+alpha and RGBA inputs drop the alpha channel.
Image load_image(const std::string& path);

/// Writes an 8-bit PNG (gray for 1 channel, RGB for 3). Values are clamped
/// to [-1, 1] and rounded to the nearest byte.
void save_image(const Image& img, const std::string& path);

unsigned char to_byte(double v);
double from_byte(unsigned char b);

/// Bilinear resampling with half-pixel centers and edge clamping:
/// source coordinate = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1].
Image resize_bilinear(const Image& img, int out_h, int out_w);

/// Side length of pyramid level k (counted from the finest level):
/// round-half-up of side / factor^k.
int pyramid_side(int side, double scale_factor, int k);

/// Builds levels while both sides stay >= min_side. The finest level is the
/// source image unmodified; the coarser ones are bilinear downsamples of it.
Pyramid build_pyramid(const Image& img, double scale_factor = 1.4, int min_side = 24);

Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);

/// Clamps every value to [lo, hi].
Image clamp(const Image& img, double lo = -1.0, double hi = 1.0);

bool all_finite(const Image& img);

/// FNV-1a over the raw bytes of the pixel buffer plus shape.
std::uint64_t image_digest(const Image& img);

}  // namespace sinsemi
