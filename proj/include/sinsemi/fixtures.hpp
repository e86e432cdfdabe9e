#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sinsemi/image.hpp"

namespace sinsemi {

/// Binary H x W raster, one byte per pixel (0 or 1).
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

    std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
    std::size_t count() const;
    bool operator==(const Mask&) const = default;
};

Mask flip_horizontal(const Mask& m);
Mask flip_vertical(const Mask& m);

/// Mask <-> 0/255 grayscale PNG.
void save_mask(const Mask& m, const std::string& path);
Mask load_mask(const std::string& path);

enum class Orientation { vertical, horizontal };

/// Procedural "line pair" image: two parallel bright lines separated by a
/// gap, optional bright bridges across the gap, additive Gaussian noise.
struct FixtureSpec {
    int size = 96;
    int line_width = 8;
    int gap = 12;
    Orientation orientation = Orientation::vertical;
    int defect_count = 1;
    int defect_length = 6;
    double noise_std = 0.1;
    double brightness_line = 0.6;
    double brightness_bg = -0.6;
    std::uint64_t seed = 0;

    /// Throws ConfigError when the invariants do not hold.
    void validate() const;
};

struct LabeledImage {
    Image image;
    Mask mask;
};

/// Bridge placement keeps this many pixels clear of the image border.
inline constexpr int kDefectBorderMargin = 4;

/// Renders a fixture. Defect positions and noise come from separate streams
/// derived from spec.seed, so the same seed with defect_count = 0 yields the
/// defect-free twin with identical noise. Values are clamped to [-1, 1].
LabeledImage make_fixture(const FixtureSpec& spec);

struct Augment {
    bool noise = false;
    bool flip = false;
};

/// Parses "noise,flip" style lists ("" and "none" mean no augmentation).
Augment parse_augment(const std::string& list);

/// `count` variants of make_fixture(spec): with noise augmentation each item
/// gets fresh noise of spec.noise_std; with flip augmentation each item gets
/// a seeded random horizontal/vertical flip applied to image and mask alike.
std::vector<LabeledImage> make_test_set(const FixtureSpec& spec, int count, Augment augment);

}  // namespace sinsemi
