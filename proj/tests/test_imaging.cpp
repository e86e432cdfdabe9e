#include <cmath>

#include "doctest.h"
#include "sinsemi/errors.hpp"
#include "sinsemi/image.hpp"
#include "support.hpp"

using namespace sinsemi;

TEST_CASE("byte mapping endpoints and midpoint") {
    CHECK(from_byte(0) == -1.0);
    CHECK(from_byte(255) == 1.0);
    CHECK(from_byte(128) == doctest::Approx(2.0 * 128.0 / 255.0 - 1.0).epsilon(1e-15));
    CHECK(from_byte(128) == doctest::Approx(0.00392).epsilon(1e-3));
    CHECK(to_byte(-1.0) == 0);
    CHECK(to_byte(1.2) == 255);
    CHECK(to_byte(-7.0) == 0);
}

TEST_CASE("every byte survives the value round trip") {
    for (int b = 0; b < 256; ++b) CHECK(to_byte(from_byte(static_cast<unsigned char>(b))) == b);
}

TEST_CASE("png round trip stays within one quantization step") {
    testing::TempDir dir("imaging");
    for (int c : {1, 3}) {
        Image img = testing::random_image(13, 17, c, 5 + c, 1.3);
        save_image(img, dir.file("rt.png"));
        const Image back = load_image(dir.file("rt.png"));
        REQUIRE(back.same_shape(img));
        const Image ref = clamp(img);
        double worst = 0.0;
        for (std::size_t i = 0; i < img.size(); ++i) worst = std::max(worst, std::abs(back.data[i] - ref.data[i]));
        CHECK(worst <= 1.0 / 255.0 + 1e-12);
    }
}

TEST_CASE("load failures are i/o errors") {
    testing::TempDir dir("imaging_bad");
    CHECK_THROWS_AS(load_image(dir.file("missing.png")), IoError);
    {
        std::ofstream(dir.file("junk.png")) << "definitely not a png";
    }
    CHECK_THROWS_AS(load_image(dir.file("junk.png")), IoError);
    CHECK_THROWS_AS(save_image(Image(4, 4, 1), dir.file("no/such/dir/x.png")), IoError);
}

TEST_CASE("resize of a constant is the constant") {
    Image img(7, 5, 3, 0.5);
    for (auto [h, w] : {std::pair{3, 2}, {7, 5}, {19, 11}, {1, 1}}) {
        const Image r = resize_bilinear(img, h, w);
        CHECK(r.height == h);
        CHECK(r.width == w);
        for (double v : r.data) CHECK(v == 0.5);
    }
}

TEST_CASE("identity resize is bitwise") {
    const Image img = testing::random_image(9, 6, 3, 11);
    CHECK(resize_bilinear(img, 9, 6).data == img.data);
}

TEST_CASE("2-wide row upsampled to 4 matches hand-evaluated weights") {
    // Half-pixel centres: source x = (dst + 0.5) * 2 / 4 - 0.5 = -0.25, 0.25, 0.75, 1.25,
    // clamped to [0, 1].
    const double a = -0.3, b = 0.9;
    Image img(1, 2, 1);
    img.at(0, 0) = a;
    img.at(0, 1) = b;
    const Image r = resize_bilinear(img, 1, 4);
    CHECK(r.at(0, 0) == doctest::Approx(a).epsilon(1e-15));
    CHECK(r.at(0, 1) == doctest::Approx(0.75 * a + 0.25 * b).epsilon(1e-15));
    CHECK(r.at(0, 2) == doctest::Approx(0.25 * a + 0.75 * b).epsilon(1e-15));
    CHECK(r.at(0, 3) == doctest::Approx(b).epsilon(1e-15));

    // Same along the other axis.
    Image col(2, 1, 1);
    col.at(0, 0) = a;
    col.at(1, 0) = b;
    const Image rc = resize_bilinear(col, 4, 1);
    for (int i = 0; i < 4; ++i) CHECK(rc.at(i, 0) == r.at(0, i));
}

TEST_CASE("resize keeps the global mean within 5% for moderate scale changes") {
    Image img(24, 24, 1);
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x) img.at(y, x) = 0.5 + 0.3 * std::sin(0.4 * x) * std::cos(0.3 * y);
    auto mean = [](const Image& im) {
        double s = 0;
        for (double v : im.data) s += v;
        return s / static_cast<double>(im.size());
    };
    for (int side : {12, 17, 30, 48}) CHECK(std::abs(mean(resize_bilinear(img, side, side)) - mean(img)) <= 0.05 * mean(img));
}

TEST_CASE("resize rejects empty targets") {
    CHECK_THROWS_AS(resize_bilinear(Image(4, 4, 1), 0, 3), ConfigError);
}

TEST_CASE("pyramid sizes follow round-half-up of side / 1.4^k") {
    const Pyramid p = build_pyramid(Image(96, 96, 1), 1.4, 24);
    REQUIRE(p.size() == 5);
    const int expect[] = {25, 35, 49, 69, 96};
    for (int i = 0; i < 5; ++i) {
        CHECK(p.levels[i].height == expect[i]);
        CHECK(p.levels[i].width == expect[i]);
    }
    CHECK(build_pyramid(Image(24, 24, 1), 1.4, 24).size() == 1);

    const Pyramid desk = build_pyramid(Image(32, 32, 1), 1.4, 16);
    REQUIRE(desk.size() == 3);
    CHECK(desk.levels[0].height == 16);
    CHECK(desk.levels[1].height == 23);
    CHECK(desk.levels[2].height == 32);
}

TEST_CASE("pyramid on non-square input rounds each axis independently") {
    const Pyramid p = build_pyramid(Image(40, 64, 1), 1.4, 16);
    for (int k = 0; k < p.size(); ++k) {
        const int back = p.size() - 1 - k;
        CHECK(p.levels[k].height == static_cast<int>(std::floor(40 / std::pow(1.4, back) + 0.5)));
        CHECK(p.levels[k].width == static_cast<int>(std::floor(64 / std::pow(1.4, back) + 0.5)));
    }
}

TEST_CASE("pyramid invariants") {
    const Image src = testing::random_image(50, 50, 3, 3);
    const Pyramid p = build_pyramid(src, 1.4, 12);
    CHECK(p.levels.back().data == src.data);
    CHECK(p.source_height == 50);
    for (int k = 0; k + 1 < p.size(); ++k) {
        CHECK(p.levels[k].height < p.levels[k + 1].height);
        CHECK(p.levels[k].width < p.levels[k + 1].width);
        const Image up = resize_bilinear(p.levels[k], p.levels[k + 1].height, p.levels[k + 1].width);
        CHECK(up.same_shape(p.levels[k + 1]));
        CHECK(all_finite(p.levels[k]));
    }
    const Pyramid q = build_pyramid(src, 1.4, 12);
    for (int k = 0; k < p.size(); ++k) CHECK(q.levels[k].data == p.levels[k].data);
}

TEST_CASE("pyramid preconditions") {
    CHECK_THROWS_AS(build_pyramid(Image(20, 20, 1), 1.4, 24), ConfigError);
    CHECK_THROWS_AS(build_pyramid(Image(32, 32, 1), 1.0, 16), ConfigError);
    CHECK_THROWS_AS(build_pyramid(Image(32, 32, 1), 1.4, 4), ConfigError);
}

TEST_CASE("flips are involutions") {
    const Image img = testing::random_image(5, 8, 3, 1);
    CHECK(flip_horizontal(flip_horizontal(img)).data == img.data);
    CHECK(flip_vertical(flip_vertical(img)).data == img.data);
    CHECK(flip_horizontal(img).at(0, 0, 2) == img.at(0, 7, 2));
    CHECK(flip_vertical(img).at(0, 3, 1) == img.at(4, 3, 1));
}
