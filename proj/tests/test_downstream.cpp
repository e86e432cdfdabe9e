#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "sinsemi/downstream.hpp"
#include "sinsemi/errors.hpp"
#include "sinsemi/rng.hpp"
#include "support.hpp"

using namespace sinsemi;

namespace {

Mask from_rows(const std::vector<std::string>& rows) {
    Mask m(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) m.at(y, x) = rows[y][x] == '#' ? 1 : 0;
    return m;
}

Mask random_mask(int h, int w, double p, std::uint64_t seed) {
    Mask m(h, w);
    Rng rng(seed);
    for (auto& v : m.data) v = rng.uniform() < p ? 1 : 0;
    return m;
}

LabeledImage small_fixture(std::uint64_t seed, int defects = 1, double noise = 0.1) {
    FixtureSpec fs;
    fs.size = 32;
    fs.line_width = 5;
    fs.gap = 6;
    fs.defect_length = 4;
    fs.defect_count = defects;
    fs.noise_std = noise;
    fs.seed = seed;
    return make_fixture(fs);
}

SegConfig tiny_config() {
    SegConfig c;
    c.depth = 2;
    c.base_width = 4;
    return c;
}

std::vector<float> flat_params(const SegModel& m) {
    std::vector<float> out;
    for (const auto& p : m.params()) out.insert(out.end(), p.value.begin(), p.value.end());
    return out;
}

}  // namespace

TEST_CASE("iou unit cases") {
    const Mask a = from_rows({"##..", "##..", "....", "...."});
    CHECK(iou(a, a) == 1.0);
    const Mask disjoint = from_rows({"....", "....", "..##", "..##"});
    CHECK(iou(a, disjoint) == 0.0);
    const Mask half = from_rows({"##..", "....", "....", "...."});
    CHECK(iou(half, a) == 0.5);
    const Mask empty(4, 4);
    CHECK(iou(empty, empty) == 1.0);
    CHECK(iou(empty, a) == 0.0);
    CHECK_THROWS_AS(iou(a, Mask(4, 5)), ConfigError);
}

TEST_CASE("iou is symmetric, bounded and matches a direct count") {
    for (std::uint64_t s = 0; s < 30; ++s) {
        const Mask a = random_mask(9, 11, 0.3, s), b = random_mask(9, 11, 0.3, 1000 + s);
        const double v = iou(a, b);
        CHECK(v == iou(b, a));
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        int inter = 0, uni = 0;
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            inter += a.data[i] && b.data[i];
            uni += a.data[i] || b.data[i];
        }
        CHECK(v == static_cast<double>(inter) / uni);
    }
}

TEST_CASE("count_defects on constructed masks") {
    CHECK(count_defects(Mask(8, 8)) == 0);
    const Mask blocks = from_rows({
        "###.....",
        "###.....",
        "###.....",
        "........",
        ".....###",
        ".....###",
        ".....###",
    });
    CHECK(count_defects(blocks, 4) == 2);
    CHECK(component_areas(blocks) == std::vector<int>{9, 9});
    // Diagonal neighbors are separate under 4-connectivity.
    const Mask diag = from_rows({"#...", ".#..", "..##", "...."});
    CHECK(component_areas(diag) == std::vector<int>{1, 1, 2});
    CHECK(count_defects(diag) == 3);
    CHECK(count_defects(diag, 2) == 1);
    CHECK(count_defects(diag, 3) == 0);
    CHECK_THROWS_AS(count_defects(diag, 0), ConfigError);
    // A U shape is one component even though its arms meet late in scan order.
    const Mask u = from_rows({"#.#", "#.#", "###"});
    CHECK(component_areas(u) == std::vector<int>{7});
}

TEST_CASE("count_defects is invariant under mask flips") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const Mask m = random_mask(13, 10, 0.35, s);
        const int n = count_defects(m);
        CHECK(count_defects(flip_horizontal(m)) == n);
        CHECK(count_defects(flip_vertical(m)) == n);
        CHECK(count_defects(flip_vertical(flip_horizontal(m)), 3) == count_defects(m, 3));
        auto areas = component_areas(m), flipped = component_areas(flip_horizontal(m));
        std::sort(areas.begin(), areas.end());
        std::sort(flipped.begin(), flipped.end());
        CHECK(areas == flipped);
        CHECK(std::accumulate(areas.begin(), areas.end(), std::size_t{0}) == m.count());
    }
}

TEST_CASE("defect_heatmap normalizes per-pixel counts") {
    const Mask one = from_rows({"#..", ".#.", "..."});
    const Image h1 = defect_heatmap({one});
    for (std::size_t i = 0; i < one.data.size(); ++i) CHECK(h1.data[i] == one.data[i]);

    const Image zero = defect_heatmap({Mask(3, 3), Mask(3, 3)});
    for (double v : zero.data) CHECK(v == 0.0);

    std::vector<Mask> masks;
    for (std::uint64_t s = 0; s < 25; ++s) masks.push_back(random_mask(7, 6, 0.2, s));
    const Image heat = defect_heatmap(masks);
    std::vector<int> count(42, 0);
    for (const auto& m : masks)
        for (std::size_t i = 0; i < m.data.size(); ++i) count[i] += m.data[i];
    const int peak = *std::max_element(count.begin(), count.end());
    REQUIRE(peak > 0);
    for (std::size_t i = 0; i < count.size(); ++i) {
        CHECK(heat.data[i] * peak == doctest::Approx(count[i]).epsilon(1e-12));
        CHECK(heat.data[i] >= 0.0);
        CHECK(heat.data[i] <= 1.0);
    }
    CHECK(*std::max_element(heat.data.begin(), heat.data.end()) == 1.0);

    const Image img = heatmap_to_image(heat);
    for (std::size_t i = 0; i < heat.size(); ++i) CHECK(img.data[i] == 2.0 * heat.data[i] - 1.0);

    CHECK_THROWS_AS(defect_heatmap({}), ConfigError);
    CHECK_THROWS_AS(defect_heatmap({Mask(3, 3), Mask(3, 4)}), ConfigError);
}

TEST_CASE("pseudo_label degenerate cases") {
    const auto li = small_fixture(3);
    CHECK(pseudo_label(li.image, li.image).count() == 0);
    const auto clean = small_fixture(3, 0);
    CHECK(pseudo_label(li.image, clean.image, std::numeric_limits<double>::infinity()).count() == 0);
    CHECK_THROWS_AS(pseudo_label(li.image, Image(32, 31, 1)), ConfigError);
}

TEST_CASE("pseudo_label smooths with a border-clipped 3x3 mean and drops small components") {
    // One-pixel difference of 2 in the corner: window means are 2/4, 2/6, 2/9
    // at the corner, its edge neighbors and the diagonal.
    Image a(6, 6, 1, 0.0), b(6, 6, 1, 0.0);
    b.at(0, 0) = 2.0;
    const Mask corner = pseudo_label(b, a, 0.4);
    CHECK(corner.count() == 0);  // one pixel passes, then removed
    CHECK(pseudo_label(b, a, 0.3).count() == 0);  // three pixels pass, still removed

    Image c(7, 7, 1, 0.0);
    c.at(3, 3) = 2.0;
    const Mask centre = pseudo_label(c, Image(7, 7, 1, 0.0), 0.2);
    CHECK(centre.count() == 9);
    for (int y = 2; y <= 4; ++y)
        for (int x = 2; x <= 4; ++x) CHECK(centre.at(y, x) == 1);

    // Channels are averaged before smoothing.
    Image rgb0(7, 7, 3, 0.0), rgb1(7, 7, 3, 0.0);
    rgb1.at(3, 3, 0) = 2.0;
    CHECK(pseudo_label(rgb1, rgb0, 0.2).count() == 0);  // 2/3/9 < 0.2
    CHECK(pseudo_label(rgb1, rgb0, 0.07).count() == 9);
}

TEST_CASE("pseudo_label recovers fixture bridges against the clean twin") {
    double total = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto defect = small_fixture(100 + s);
        const auto clean = small_fixture(100 + s, 0);
        const double v = iou(pseudo_label(defect.image, clean.image), defect.mask);
        CAPTURE(s);
        CHECK(v >= 0.7);
        total += v;
    }
    CHECK(total / 10 >= 0.7);
}

TEST_CASE("pseudo_label is equivariant under simultaneous flips") {
    const auto defect = small_fixture(21);
    const auto clean = small_fixture(21, 0);
    Image noisy = defect.image;
    Rng rng(4);
    for (auto& v : noisy.data) v += 0.3 * rng.normal();
    const Mask m = pseudo_label(noisy, clean.image, 0.3);
    CHECK(pseudo_label(flip_horizontal(noisy), flip_horizontal(clean.image), 0.3) == flip_horizontal(m));
    CHECK(pseudo_label(flip_vertical(noisy), flip_vertical(clean.image), 0.3) == flip_vertical(m));
}

TEST_CASE("segmenter output is a probability map with input dims") {
    const SegModel m = SegModel::init(SegConfig{}, 3);
    for (auto [h, w] : {std::pair{32, 32}, std::pair{17, 23}}) {
        const Image x = testing::random_image(h, w, 1, 9);
        const Image p = m.probabilities(x);
        CHECK(p.height == h);
        CHECK(p.width == w);
        CHECK(p.channels == 1);
        for (double v : p.data) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
        const Mask pred = m.predict(x);
        for (std::size_t i = 0; i < p.size(); ++i) REQUIRE(pred.data[i] == (p.data[i] > 0.5 ? 1 : 0));
    }
    CHECK_THROWS_AS(m.probabilities(testing::random_image(3, 32, 1, 1)), ConfigError);
    CHECK_THROWS_AS(m.probabilities(testing::random_image(32, 32, 3, 1)), ConfigError);
}

TEST_CASE("segmenter configs are validated") {
    SegConfig c;
    c.depth = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SegConfig{};
    c.threshold = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SegConfig{};
    c.in_channels = 2;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    SegTrainConfig t;
    t.epochs = 0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = SegTrainConfig{};
    t.learning_rate = -1.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    CHECK_THROWS_AS(train_segmenter({}, SegConfig{}, SegTrainConfig{}), ConfigError);
}

TEST_CASE("segmenter parameter gradient agrees with central differences") {
    SegModel m = SegModel::init(tiny_config(), 5);
    const auto li = small_fixture(6);
    Image x = resize_bilinear(li.image, 12, 12);
    Mask truth(12, 12);
    for (int y = 0; y < 12; ++y)
        for (int xx = 4; xx < 7; ++xx) truth.at(y, xx) = 1;

    m.params().zero_grad();
    m.bce(x, truth, true);
    struct Coord {
        int p;
        std::size_t i;
        double g;
    };
    std::vector<Coord> coords;
    for (int p = 0; p < m.params().size(); ++p)
        for (std::size_t i = 0; i < m.params()[p].grad.size(); ++i)
            coords.push_back({p, i, static_cast<double>(m.params()[p].grad[i])});
    std::sort(coords.begin(), coords.end(), [](const Coord& a, const Coord& b) { return std::abs(a.g) > std::abs(b.g); });
    coords.resize(20);
    // ReLU kinks make central differences unreliable where a unit crosses zero
    // within the step; there the analytic value must lie between the one-sided
    // differences.
    int kinks = 0;
    for (const auto& c : coords) {
        float& w = m.params()[c.p].value[c.i];
        const float keep = w;
        const float h = 1e-3f;
        const double mid = m.bce(x, truth, false);
        w = keep + h;
        const double up = m.bce(x, truth, false);
        w = keep - h;
        const double dn = m.bce(x, truth, false);
        w = keep;
        const double fd = (up - dn) / (2.0 * static_cast<double>(h));
        const double right = (up - mid) / h, left = (mid - dn) / h;
        const double tol = 2e-2 * std::abs(c.g);
        const bool central_ok = std::abs(fd - c.g) <= tol;
        const bool kink = std::abs(right - left) > tol;
        const bool between = c.g >= std::min(left, right) - tol && c.g <= std::max(left, right) + tol;
        kinks += !central_ok && kink;
        CAPTURE(m.params()[c.p].name);
        CAPTURE(c.g);
        CAPTURE(fd);
        CAPTURE(left);
        CAPTURE(right);
        CHECK((central_ok || (kink && between)));
    }
    CHECK(kinks <= 5);
}

TEST_CASE("bce gradient weight scales accumulated gradients") {
    SegModel m = SegModel::init(tiny_config(), 8);
    const auto li = small_fixture(9);
    m.params().zero_grad();
    const double l1 = m.bce(li.image, li.mask, true, 1.0);
    const auto g1 = m.params()[0].grad;
    m.params().zero_grad();
    const double l2 = m.bce(li.image, li.mask, true, 0.25);
    CHECK(l1 == l2);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(m.params()[0].grad[i] == doctest::Approx(0.25 * g1[i]).epsilon(1e-5));
    CHECK_THROWS_AS(m.bce(li.image, Mask(31, 32), false), ConfigError);
}

TEST_CASE("train_segmenter is seed-deterministic and lr = 0 keeps the init") {
    std::vector<LabeledImage> data;
    for (std::uint64_t s = 0; s < 6; ++s) data.push_back(small_fixture(s));
    SegTrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.seed = 17;
    std::vector<double> l1, l2;
    const SegModel a = train_segmenter(data, tiny_config(), tc, &l1);
    const SegModel b = train_segmenter(data, tiny_config(), tc, &l2);
    CHECK(flat_params(a) == flat_params(b));
    CHECK(l1 == l2);
    CHECK(l1.size() == 2);

    tc.seed = 18;
    CHECK(flat_params(train_segmenter(data, tiny_config(), tc)) != flat_params(a));

    tc.learning_rate = 0.0;
    const SegModel frozen = train_segmenter(data, tiny_config(), tc);
    CHECK(flat_params(frozen) == flat_params(SegModel::init(tiny_config(), derive_seed(18, {0}))));
}

TEST_CASE("training loss on a repeated item decreases over the first epochs") {
    const auto li = small_fixture(30);
    const std::vector<LabeledImage> data(4, li);
    SegTrainConfig tc;
    tc.epochs = 10;
    tc.batch_size = 2;
    tc.learning_rate = 3e-3;
    std::vector<double> loss;
    train_segmenter(data, tiny_config(), tc, &loss);
    REQUIRE(loss.size() == 10);
    for (std::size_t e = 1; e < loss.size(); ++e) {
        CAPTURE(e);
        CHECK(loss[e] <= loss[e - 1] * 1.02);
    }
    CHECK(loss.back() < 0.5 * loss.front());
}

TEST_CASE("non-finite inputs and a diverging loss abort training with a diagnostic") {
    std::vector<LabeledImage> data{small_fixture(1), small_fixture(2)};
    SegTrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 1;
    tc.learning_rate = 1e30;
    try {
        train_segmenter(data, tiny_config(), tc);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("non-finite loss") != std::string::npos);
    }

    data[1].image.data[5] = std::numeric_limits<double>::quiet_NaN();
    tc.learning_rate = 1e-3;
    try {
        train_segmenter(data, tiny_config(), tc);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("item 1") != std::string::npos);
    }
}

TEST_CASE("segmenter save and load round trip") {
    testing::TempDir dir("seg");
    SegConfig cfg = tiny_config();
    cfg.threshold = 0.3;
    const SegModel m = SegModel::init(cfg, 12);
    m.save(dir.file("seg.bin"));
    const SegModel back = SegModel::load(dir.file("seg.bin"));
    CHECK(back.config().depth == 2);
    CHECK(back.config().base_width == 4);
    CHECK(back.config().threshold == 0.3);
    CHECK(flat_params(back) == flat_params(m));
    const Image x = testing::random_image(16, 16, 1, 2);
    CHECK(back.probabilities(x).data == m.probabilities(x).data);

    std::string bytes = testing::read_bytes(dir.file("seg.bin"));
    bytes[bytes.size() / 2] ^= 0x5a;
    std::ofstream(dir.file("bad.bin"), std::ios::binary) << bytes;
    CHECK_THROWS_AS(SegModel::load(dir.file("bad.bin")), IoError);
    CHECK_THROWS_AS(SegModel::load(dir.file("none.bin")), IoError);
}
