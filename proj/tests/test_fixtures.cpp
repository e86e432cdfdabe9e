#include <set>
#include <utility>
#include <vector>

#include "doctest.h"
#include "sinsemi/errors.hpp"
#include "sinsemi/fixtures.hpp"
#include "support.hpp"

using namespace sinsemi;

namespace {

// Plain 4-connected flood fill, independent of the library's labelling.
std::vector<int> component_sizes(const Mask& m) {
    std::vector<int> seen(m.data.size(), 0), sizes;
    for (int y0 = 0; y0 < m.height; ++y0) {
        for (int x0 = 0; x0 < m.width; ++x0) {
            if (!m.at(y0, x0) || seen[y0 * m.width + x0]) continue;
            int n = 0;
            std::vector<std::pair<int, int>> stack{{y0, x0}};
            seen[y0 * m.width + x0] = 1;
            while (!stack.empty()) {
                auto [y, x] = stack.back();
                stack.pop_back();
                ++n;
                const int dy[] = {1, -1, 0, 0}, dx[] = {0, 0, 1, -1};
                for (int d = 0; d < 4; ++d) {
                    const int ny = y + dy[d], nx = x + dx[d];
                    if (ny < 0 || nx < 0 || ny >= m.height || nx >= m.width) continue;
                    if (!m.at(ny, nx) || seen[ny * m.width + nx]) continue;
                    seen[ny * m.width + nx] = 1;
                    stack.push_back({ny, nx});
                }
            }
            sizes.push_back(n);
        }
    }
    return sizes;
}

std::set<std::pair<int, int>> mask_pixels(const Mask& m) {
    std::set<std::pair<int, int>> s;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(y, x)) s.insert({y, x});
    return s;
}

}  // namespace

TEST_CASE("no defects means an empty mask") {
    FixtureSpec s;
    s.defect_count = 0;
    const LabeledImage f = make_fixture(s);
    CHECK(f.mask.count() == 0);
    CHECK(f.image.height == 96);
    CHECK(f.image.width == 96);
    CHECK(f.mask.height == 96);
}

TEST_CASE("fixture is deterministic per seed") {
    FixtureSpec s;
    s.seed = 42;
    const LabeledImage a = make_fixture(s), b = make_fixture(s);
    CHECK(a.image.data == b.image.data);
    CHECK(a.mask == b.mask);
}

TEST_CASE("two defects give two components of length x gap pixels") {
    for (auto o : {Orientation::vertical, Orientation::horizontal}) {
        FixtureSpec s;
        s.defect_count = 2;
        s.orientation = o;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            s.seed = seed;
            const auto sizes = component_sizes(make_fixture(s).mask);
            REQUIRE(sizes.size() == 2);
            for (int n : sizes) CHECK(n == s.defect_length * s.gap);
        }
    }
}

TEST_CASE("defect pixels are bright before noise") {
    FixtureSpec s;
    s.noise_std = 0.0;
    s.defect_count = 3;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        s.seed = seed;
        const LabeledImage f = make_fixture(s);
        const double floor = s.brightness_bg + 0.5 * (s.brightness_line - s.brightness_bg);
        for (auto [y, x] : mask_pixels(f.mask)) CHECK(f.image.at(y, x) >= floor);
    }
}

TEST_CASE("defect-free twin shares the noise") {
    FixtureSpec s;
    s.seed = 9;
    FixtureSpec clean = s;
    clean.defect_count = 0;
    const LabeledImage a = make_fixture(s), b = make_fixture(clean);
    for (int y = 0; y < s.size; ++y)
        for (int x = 0; x < s.size; ++x)
            if (!a.mask.at(y, x)) CHECK(a.image.at(y, x) == b.image.at(y, x));
}

TEST_CASE("defects keep clear of the border") {
    FixtureSpec s;
    s.defect_count = 2;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        s.seed = seed;
        for (auto [y, x] : mask_pixels(make_fixture(s).mask)) {
            CHECK(y >= kDefectBorderMargin);
            CHECK(y < s.size - kDefectBorderMargin);
        }
    }
}

TEST_CASE("distinct seeds usually move the defect") {
    FixtureSpec a, b;
    int differ = 0;
    for (std::uint64_t i = 0; i < 100; ++i) {
        a.seed = 2 * i;
        b.seed = 2 * i + 1;
        if (make_fixture(a).mask != make_fixture(b).mask) ++differ;
    }
    CHECK(differ >= 95);
}

TEST_CASE("fixture parameter validation") {
    FixtureSpec s;
    s.size = 20;  // 2*8 + 12 >= 20
    CHECK_THROWS_AS(make_fixture(s), ConfigError);
    s = FixtureSpec{};
    s.noise_std = -0.1;
    CHECK_THROWS_AS(make_fixture(s), ConfigError);
    s = FixtureSpec{};
    s.defect_count = -1;
    CHECK_THROWS_AS(make_fixture(s), ConfigError);
    s = FixtureSpec{};
    s.defect_length = 95;
    CHECK_THROWS_AS(make_fixture(s), ConfigError);
}

TEST_CASE("test set size and flip consistency") {
    FixtureSpec s;
    s.noise_std = 0.0;
    const auto set = make_test_set(s, 50, parse_augment("noise,flip"));
    REQUIRE(set.size() == 50);
    bool saw_flip = false;
    const LabeledImage base = make_fixture(s);
    for (const auto& li : set) {
        CHECK(li.mask.count() == base.mask.count());
        if (li.mask != base.mask) saw_flip = true;
        // Mask pixels must sit on bright image pixels after any flip.
        for (auto [y, x] : mask_pixels(li.mask)) CHECK(li.image.at(y, x) == doctest::Approx(s.brightness_line));
    }
    CHECK(saw_flip);
}

TEST_CASE("noise augmentation with zero noise reproduces the base fixture") {
    FixtureSpec s;
    s.noise_std = 0.0;
    const LabeledImage base = make_fixture(s);
    for (const auto& li : make_test_set(s, 5, parse_augment("noise"))) {
        CHECK(li.image.data == base.image.data);
        CHECK(li.mask == base.mask);
    }
}

TEST_CASE("noise augmentation draws fresh noise per item") {
    FixtureSpec s;
    const auto set = make_test_set(s, 3, parse_augment("noise"));
    CHECK(set[0].image.data != set[1].image.data);
    CHECK(set[0].mask == set[1].mask);
}

TEST_CASE("augment parsing") {
    CHECK(!parse_augment("none").noise);
    CHECK(!parse_augment("").flip);
    const Augment a = parse_augment("flip,noise");
    CHECK(a.noise);
    CHECK(a.flip);
    CHECK_THROWS_AS(parse_augment("rotate"), ConfigError);
    CHECK_THROWS_AS(make_test_set(FixtureSpec{}, 0, {}), ConfigError);
}

TEST_CASE("mask png round trip") {
    testing::TempDir dir("fixtures");
    FixtureSpec s;
    s.defect_count = 2;
    const Mask m = make_fixture(s).mask;
    save_mask(m, dir.file("m.mask.png"));
    CHECK(load_mask(dir.file("m.mask.png")) == m);
    const Image as_image = load_image(dir.file("m.mask.png"));
    for (std::size_t i = 0; i < m.data.size(); ++i) CHECK(as_image.data[i] == (m.data[i] ? 1.0 : -1.0));
}
