#include "sinsemi/fixtures.hpp"

#include <algorithm>
#include <sstream>

#include "sinsemi/errors.hpp"
#include "sinsemi/rng.hpp"

namespace sinsemi {

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

Mask flip_horizontal(const Mask& m) {
    Mask out(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(y, m.width - 1 - x);
    return out;
}

Mask flip_vertical(const Mask& m) {
    Mask out(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(m.height - 1 - y, x);
    return out;
}

void save_mask(const Mask& m, const std::string& path) {
    Image img(m.height, m.width, 1, -1.0);
    for (std::size_t i = 0; i < m.data.size(); ++i) img.data[i] = m.data[i] ? 1.0 : -1.0;
    save_image(img, path);
}

Mask load_mask(const std::string& path) {
    const Image img = load_image(path);
    Mask m(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) m.at(y, x) = img.at(y, x, 0) > 0.0 ? 1 : 0;
    return m;
}

namespace {

// Stream keys for derive_seed.
constexpr std::uint64_t kPlacementStream = 1;
constexpr std::uint64_t kNoiseStream = 2;
constexpr std::uint64_t kAugmentStream = 3;

struct Geometry {
    int first_line;   // offset of the first line across the lines
    int gap_begin;    // offset where the gap starts
};

Geometry layout(const FixtureSpec& s) {
    const int span = 2 * s.line_width + s.gap;
    const int first = (s.size - span) / 2;
    return {first, first + s.line_width};
}

// Start offsets along the lines for each bridge; bridges never touch.
std::vector<int> place_defects(const FixtureSpec& s) {
    const int lo = kDefectBorderMargin;
    const int hi = s.size - kDefectBorderMargin - s.defect_length;  // inclusive
    std::vector<int> starts;
    if (s.defect_count == 0) return starts;
    Rng rng(derive_seed(s.seed, {kPlacementStream}));
    for (int attempt = 0; attempt < 10000 && static_cast<int>(starts.size()) < s.defect_count; ++attempt) {
        const int pos = lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
        const bool clear = std::all_of(starts.begin(), starts.end(), [&](int p) {
            return pos >= p + s.defect_length + 1 || p >= pos + s.defect_length + 1;
        });
        if (clear) starts.push_back(pos);
    }
    if (static_cast<int>(starts.size()) < s.defect_count) {
        throw ConfigError("could not place " + std::to_string(s.defect_count) +
                          " non-touching defects of length " + std::to_string(s.defect_length));
    }
    return starts;
}

// Clean render plus mask, no noise.
LabeledImage render(const FixtureSpec& s) {
    LabeledImage out{Image(s.size, s.size, 1, s.brightness_bg), Mask(s.size, s.size)};
    const auto g = layout(s);
    // (across, along) -> (y, x) depending on orientation.
    auto set = [&](int across, int along, bool defect) {
        const int y = s.orientation == Orientation::vertical ? along : across;
        const int x = s.orientation == Orientation::vertical ? across : along;
        out.image.at(y, x) = s.brightness_line;
        if (defect) out.mask.at(y, x) = 1;
    };
    for (int along = 0; along < s.size; ++along) {
        for (int i = 0; i < s.line_width; ++i) {
            set(g.first_line + i, along, false);
            set(g.gap_begin + s.gap + i, along, false);
        }
    }
    for (int start : place_defects(s)) {
        for (int along = start; along < start + s.defect_length; ++along)
            for (int i = 0; i < s.gap; ++i) set(g.gap_begin + i, along, true);
    }
    return out;
}

void add_noise(Image& img, double std_dev, std::uint64_t seed) {
    if (std_dev == 0.0) return;
    Rng rng(seed);
    for (auto& v : img.data) v += std_dev * rng.normal();
}

}  // namespace

void FixtureSpec::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("fixture: " + msg); };
    if (size < 1 || line_width < 1 || gap < 1) fail("size, line_width and gap must be positive");
    if (2 * line_width + gap >= size) fail("2*line_width + gap must be smaller than size");
    if (noise_std < 0.0) fail("noise_std must be >= 0");
    if (defect_count < 0) fail("defect_count must be >= 0");
    if (defect_count > 0) {
        if (defect_length < 1) fail("defect_length must be >= 1");
        const int available = size - 2 * kDefectBorderMargin;
        if (defect_count * (defect_length + 1) - 1 > available) {
            fail("defects do not fit: " + std::to_string(defect_count) + " x length " +
                 std::to_string(defect_length) + " in " + std::to_string(available) + " pixels");
        }
    }
}

LabeledImage make_fixture(const FixtureSpec& spec) {
    spec.validate();
    LabeledImage out = render(spec);
    add_noise(out.image, spec.noise_std, derive_seed(spec.seed, {kNoiseStream}));
    out.image = clamp(out.image);
    return out;
}

Augment parse_augment(const std::string& list) {
    Augment a;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
        if (item.empty() || item == "none") continue;
        if (item == "noise") a.noise = true;
        else if (item == "flip") a.flip = true;
        else throw ConfigError("unknown augmentation '" + item + "' (expected noise, flip)");
    }
    return a;
}

std::vector<LabeledImage> make_test_set(const FixtureSpec& spec, int count, Augment augment) {
    if (count < 1) throw ConfigError("test set count must be >= 1");
    spec.validate();
    const LabeledImage base = make_fixture(spec);
    const LabeledImage clean = render(spec);

    std::vector<LabeledImage> items;
    items.reserve(count);
    for (int i = 0; i < count; ++i) {
        const auto idx = static_cast<std::uint64_t>(i);
        LabeledImage item = base;
        if (augment.noise) {
            item = clean;
            add_noise(item.image, spec.noise_std, derive_seed(spec.seed, {kNoiseStream, idx}));
            item.image = clamp(item.image);
        }
        if (augment.flip) {
            Rng rng(derive_seed(spec.seed, {kAugmentStream, idx}));
            if (rng.uniform() < 0.5) {
                item.image = flip_horizontal(item.image);
                item.mask = flip_horizontal(item.mask);
            }
            if (rng.uniform() < 0.5) {
                item.image = flip_vertical(item.image);
                item.mask = flip_vertical(item.mask);
            }
        }
        items.push_back(std::move(item));
    }
    return items;
}

}  // namespace sinsemi
