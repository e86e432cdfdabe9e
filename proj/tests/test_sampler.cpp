#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>

#include "doctest.h"
#include "sinsemi/errors.hpp"
#include "sinsemi/sampler.hpp"
#include "support.hpp"

using namespace sinsemi;

namespace {

// u(x, t, s) = a * x + b, elementwise.
class LinearField final : public VelocityField {
public:
    LinearField(double a, double b) : a_(a), b_(b) {}
    Image velocity(const Image& x, double, int) const override {
        Image u = x;
        for (auto& v : u.data) v = a_ * v + b_;
        return u;
    }

private:
    double a_, b_;
};

class NanField final : public VelocityField {
public:
    Image velocity(const Image& x, double t, int) const override {
        Image u(x.height, x.width, x.channels);
        if (t < 0.5) u.data[0] = std::nan("");
        return u;
    }
};

// D = 0.5 ||x - c||^2, recording every condition it sees.
class QuadraticEnergy final : public Energy {
public:
    double evaluate(const Image& c, const Image& x, Image* grad) const override {
        ++calls;
        {
            std::lock_guard<std::mutex> lock(mu);
            conditions.push_back(c);
        }
        double d = 0;
        if (grad) *grad = Image(x.height, x.width, x.channels);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double r = x.data[i] - c.data[i];
            d += 0.5 * r * r;
            if (grad) grad->data[i] = r;
        }
        return d;
    }
    mutable std::atomic<long> calls{0};
    mutable std::mutex mu;
    mutable std::vector<Image> conditions;
};

// Exact E[u | x_t] for a coarsest-scale bridge from x0 to x1 ~ N(0, I):
// with y = x - (1 - t) x0 and b^2 = sigma^2 t (1 - t), E[x1 | y] = t y / (t^2 + b^2)
// and E[eps | y] = b y / (t^2 + b^2).
class PosteriorField final : public VelocityField {
public:
    PosteriorField(Image x0, BridgeConfig cfg) : x0_(std::move(x0)), cfg_(cfg) {}
    Image velocity(const Image& x, double t, int) const override {
        t = std::clamp(t, cfg_.t_clamp, 1.0 - cfg_.t_clamp);
        const double b = cfg_.sigma * std::sqrt(t * (1.0 - t));
        const double k = cfg_.sigma * bridge_c1(t, cfg_.eps_reg);
        Image u = x;
        for (std::size_t i = 0; i < u.size(); ++i) {
            const double y = x.data[i] - (1.0 - t) * x0_.data[i];
            const double ex1 = t * y / (t * t + b * b);
            u.data[i] = ex1 - x0_.data[i];
            if (cfg_.velocity_variant == VelocityVariant::as_printed) {
                u.data[i] += k;
            } else {
                u.data[i] += k * b * y / (t * t + b * b);
            }
        }
        return u;
    }

private:
    Image x0_;
    BridgeConfig cfg_;
};

PairSource source(int side, int min_side = 16, int channels = 1) {
    return PairSource(build_pyramid(testing::random_image(side, side, channels, 3, 0.8), 1.4, min_side));
}

}  // namespace

TEST_CASE("em step arithmetic") {
    Image x(1, 1, 1, 2.0), u(1, 1, 1, -2.0), zero(1, 1, 1), one(1, 1, 1, 1.0);
    CHECK(em_step(x, 0.5, 0.1, u, zero, 0.0, one).data[0] == doctest::Approx(2.2).epsilon(1e-15));
    CHECK(em_step(x, 0.5, 0.1, zero, zero, 0.0, one).data[0] == 2.0);
    const double coef = em_step(zero, 0.5, 1.0 / 300, zero, zero, 0.35, one).data[0];
    CHECK(coef == doctest::Approx(std::sqrt(1.0 / 300) * 0.5 * 0.35).epsilon(1e-14));
    CHECK(coef == doctest::Approx(0.010104).epsilon(1e-4));
    Image g(1, 1, 1, 0.5);
    CHECK(em_step(x, 0.5, 0.1, u, g, 0.0, one).data[0] == doctest::Approx(2.0 - 0.1 * (-2.5)).epsilon(1e-15));
    CHECK_THROWS_AS(em_step(x, 0.5, 0.1, Image(1, 2, 1), zero, 0.0, one), ConfigError);
}

TEST_CASE("zero guidance touches neither the backend nor the generator") {
    const Image x = testing::random_image(8, 8, 1, 1);
    QuadraticEnergy D;
    Rng rng(5), ref(5);
    const Image g = guidance_term(x, x, x, 0.5, 0.0, 0.35, &D, rng);
    for (double v : g.data) CHECK(v == 0.0);
    CHECK(D.calls == 0);
    CHECK(rng.next_u64() == ref.next_u64());
    const Image g2 = guidance_term(x, x, x, 0.5, 0.0, 0.35, nullptr, rng);
    for (double v : g2.data) CHECK(v == 0.0);
    CHECK_THROWS_AS(guidance_term(x, x, x, 0.5, 1.0, 0.35, nullptr, rng), ConfigError);
    CHECK_THROWS_AS(guidance_term(x, x, x, 0.5, -1.0, 0.35, &D, rng), ConfigError);
}

TEST_CASE("guidance is the scaled negative gradient at the diffused condition") {
    const Image x0 = testing::random_image(6, 6, 1, 1), x1 = testing::random_image(6, 6, 1, 2);
    const Image xh = testing::random_image(6, 6, 1, 3);
    QuadraticEnergy D;
    Rng rng(9), replay(9);
    const double t = 0.3, sigma = 0.35, lambda = 0.7;
    const Image g = guidance_term(xh, x0, x1, t, lambda, sigma, &D, rng);
    const Image eps = gaussian_like(6, 6, 1, replay);
    const Image c = path_point(x0, x1, t, sigma, eps);
    REQUIRE(D.conditions.size() == 1);
    CHECK(D.conditions[0].data == c.data);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g.data[i] == doctest::Approx(-lambda * (xh.data[i] - c.data[i])));
    // Fresh condition noise on every call.
    guidance_term(xh, x0, x1, t, lambda, sigma, &D, rng);
    CHECK(D.conditions[1].data != D.conditions[0].data);
}

TEST_CASE("perceptual guidance vanishes at the condition and matches finite differences") {
    const FeatureExtractor fx = FeatureExtractor::procedural(1, kDefaultExtractorSeed);
    const PerceptualEnergy D(fx);
    const Image x0 = testing::random_image(16, 16, 1, 1, 0.8), x1 = testing::random_image(16, 16, 1, 2, 0.8);
    const double t = 0.4;
    const Image c = path_point(x0, x1, t, 0.0, Image(16, 16, 1));
    Rng rng(1);
    const Image at_c = guidance_term(c, x0, x1, t, 1.0, 0.0, &D, rng);
    double worst = 0;
    for (double v : at_c.data) worst = std::max(worst, std::abs(v));
    CHECK(worst < 1e-6);

    Image xh = testing::random_image(16, 16, 1, 4, 0.8);
    const Image g = guidance_term(xh, x0, x1, t, 1.0, 0.0, &D, rng);
    Rng pick(2);
    for (int k = 0; k < 20; ++k) {
        const auto i = pick.uniform_int(xh.size());
        const double h = 1e-4, keep = xh.data[i];
        xh.data[i] = keep + h;
        const double up = D.evaluate(c, xh, nullptr);
        xh.data[i] = keep - h;
        const double dn = D.evaluate(c, xh, nullptr);
        xh.data[i] = keep;
        const double fd = -(up - dn) / (2 * h);
        CHECK(std::abs(fd - g.data[i]) <= 1e-2 * std::max(std::abs(fd), 1e-8));
    }
}

TEST_CASE("a guided step lowers the distance") {
    const FeatureExtractor fx = FeatureExtractor::procedural(1, kDefaultExtractorSeed);
    const PerceptualEnergy D(fx);
    const Image x0 = testing::random_image(16, 16, 1, 5, 0.8), x1 = testing::random_image(16, 16, 1, 6, 0.8);
    const Image xh = testing::random_image(16, 16, 1, 7, 0.8);
    const double t = 0.6, h = 1e-3;
    const Image c = path_point(x0, x1, t, 0.0, Image(16, 16, 1));
    Rng rng(1);
    const Image zero(16, 16, 1);
    const Image g = guidance_term(xh, x0, x1, t, 1.0, 0.0, &D, rng);
    const Image guided = em_step(xh, t, h, zero, g, 0.0, zero);
    const Image plain = em_step(xh, t, h, zero, zero, 0.0, zero);
    CHECK(D.evaluate(c, guided, nullptr) < D.evaluate(c, plain, nullptr));
}

TEST_CASE("step count and scale chaining") {
    const PairSource src = source(96, 24);
    REQUIRE(src.levels() == 5);
    SampleConfig cfg;
    cfg.guidance = 0.0;
    const Trajectory tr = sample(LinearField(0.0, 0.1), src, cfg, nullptr);
    CHECK(tr.em_steps == 5 * 300);
    REQUIRE(tr.scale_inputs.size() == 5);
    for (int s = 0; s < 5; ++s) {
        CHECK(tr.scale_inputs[s].same_shape(src.x0(s)));
        CHECK(tr.scale_outputs[s].same_shape(src.x0(s)));
        if (s > 0) {
            const Image up = resize_bilinear(tr.scale_outputs[s - 1], src.x0(s).height, src.x0(s).width);
            CHECK(tr.scale_inputs[s].data == up.data);
        }
    }
    CHECK(tr.final.same_shape(src.x0(4)));
}

TEST_CASE("constant field integrates exactly") {
    const PairSource src = source(16);
    REQUIRE(src.levels() == 1);
    SampleConfig cfg;
    cfg.guidance = 0.0;
    cfg.sigma = 0.0;
    cfg.ode_mode = true;
    cfg.steps = 137;
    const double a = 0.8;
    const Trajectory tr = sample(LinearField(0.0, a), src, cfg, nullptr);
    for (std::size_t i = 0; i < tr.final.size(); ++i) CHECK(std::abs(tr.final.data[i] - (tr.scale_inputs[0].data[i] - a)) < 1e-6);
}

TEST_CASE("Euler error halves when steps double") {
    // x' = -a x in reverse time, closed form x(0) = x(1) exp(-a).
    const PairSource src = source(16);
    const double a = 1.5;
    auto error = [&](int n) {
        SampleConfig cfg;
        cfg.guidance = 0.0;
        cfg.sigma = 0.0;
        cfg.steps = n;
        const Trajectory tr = sample(LinearField(a, 0.0), src, cfg, nullptr);
        double e = 0;
        for (std::size_t i = 0; i < tr.final.size(); ++i)
            e = std::max(e, std::abs(tr.final.data[i] - tr.scale_inputs[0].data[i] * std::exp(-a)));
        return e;
    };
    const double e50 = error(50), e100 = error(100), e200 = error(200);
    CHECK(e50 / e100 == doctest::Approx(2.0).epsilon(0.2));
    CHECK(e100 / e200 == doctest::Approx(2.0).epsilon(0.2));
}

TEST_CASE("posterior-mean flow: scalar addend shifts the endpoint, noise-scaled target does not") {
    // For the scalar addend y' = y / (t + sigma^2 (1 - t)) + sigma c1(t) in
    // reverse time, so y(0) = Phi(0) (y(1) - I) with
    // Phi(t) = (t + sigma^2 (1 - t))^(1 / (1 - sigma^2)) and I = int_0^1 sigma c1 / Phi.
    // Under t = sin^2(th), sigma c1 dt = sigma cos(2 th) dth.
    const PairSource src = source(16);
    const double sigma = 0.35;
    auto phi = [&](double t) { return std::pow(t + sigma * sigma * (1.0 - t), 1.0 / (1.0 - sigma * sigma)); };
    const int m = 20000;
    double I = 0.0;
    for (int j = 0; j < m; ++j) {
        const double th = (j + 0.5) * (M_PI / 2) / m;
        I += sigma * std::cos(2 * th) / phi(std::sin(th) * std::sin(th)) * (M_PI / 2) / m;
    }
    const double shift = -phi(0.0) * I;
    CHECK(shift == doctest::Approx(-0.0932).epsilon(0.01));

    SampleConfig cfg;
    cfg.guidance = 0.0;
    cfg.ode_mode = true;
    cfg.steps = 4000;
    cfg.seed = 2;
    BridgeConfig bc;
    bc.sigma = sigma;

    const Trajectory printed = sample(PosteriorField(src.x0(0), bc), src, cfg, nullptr);
    double worst = 0.0, bias = 0.0;
    for (std::size_t i = 0; i < printed.final.size(); ++i) {
        const double y0 = printed.final.data[i] - src.x0(0).data[i];
        worst = std::max(worst, std::abs(y0 - phi(0.0) * (printed.scale_inputs[0].data[i] - I)));
        bias += y0 / printed.final.size();
    }
    CHECK(worst < 0.01);
    CHECK(bias < -0.08);

    bc.velocity_variant = VelocityVariant::noise_scaled;
    const Trajectory scaled = sample(PosteriorField(src.x0(0), bc), src, cfg, nullptr);
    double mean_abs = 0.0, mean = 0.0;
    for (std::size_t i = 0; i < scaled.final.size(); ++i) {
        const double y0 = scaled.final.data[i] - src.x0(0).data[i];
        mean_abs += std::abs(y0) / scaled.final.size();
        mean += y0 / scaled.final.size();
    }
    CHECK(mean_abs < 0.02);
    CHECK(std::abs(mean) < 0.01);
}

TEST_CASE("sampling is deterministic per seed") {
    const PairSource src = source(32);
    SampleConfig cfg;
    cfg.steps = 20;
    cfg.seed = 11;
    QuadraticEnergy D;
    const Trajectory a = sample(LinearField(0.3, 0.0), src, cfg, &D), b = sample(LinearField(0.3, 0.0), src, cfg, &D);
    CHECK(a.final.data == b.final.data);
    cfg.seed = 12;
    CHECK(sample(LinearField(0.3, 0.0), src, cfg, &D).final.data != a.final.data);
}

TEST_CASE("coarsest guidance condition pairs the level with the initial noise") {
    const PairSource src = source(16);
    SampleConfig cfg;
    cfg.steps = 4;
    cfg.sigma = 0.0;  // c_t is then exactly (1 - t) x0 + t x1
    QuadraticEnergy D;
    const Trajectory tr = sample(LinearField(0.0, 0.0), src, cfg, &D);
    REQUIRE(D.conditions.size() == 4);
    // First step at t = 1: the condition is x1 itself.
    CHECK(D.conditions[0].data == tr.scale_inputs[0].data);
    const Image mid = path_point(src.x0(0), tr.scale_inputs[0], 0.5, 0.0, Image(16, 16, 1));
    CHECK(D.conditions[2].data == mid.data);
}

TEST_CASE("finer guidance conditions use the upsampled coarser level") {
    const PairSource src = source(32);
    SampleConfig cfg;
    cfg.steps = 2;
    cfg.sigma = 0.0;
    QuadraticEnergy D;
    sample(LinearField(0.0, 0.0), src, cfg, &D);
    REQUIRE(D.conditions.size() == 6);
    CHECK(D.conditions[2].data == src.x1(1).data);  // scale 1, t = 1
    CHECK(D.conditions[4].data == src.x1(2).data);
}

TEST_CASE("zero guidance never calls the backend") {
    const PairSource src = source(32);
    const FeatureExtractor fx = FeatureExtractor::procedural(1, kDefaultExtractorSeed);
    const PerceptualEnergy D(fx);
    SampleConfig cfg;
    cfg.steps = 10;
    cfg.guidance = 0.0;
    sample_batch(LinearField(0.1, 0.0), src, cfg, &D, 3);
    CHECK(D.calls() == 0);
    cfg.guidance = 0.5;
    sample(LinearField(0.1, 0.0), src, cfg, &D);
    CHECK(D.calls() == 30);
}

TEST_CASE("guidance without a backend is a configuration error") {
    SampleConfig cfg;
    CHECK_THROWS_AS(sample(LinearField(0, 0), source(16), cfg, nullptr), ConfigError);
}

TEST_CASE("non-finite states abort with the scale and time") {
    SampleConfig cfg;
    cfg.guidance = 0.0;
    cfg.steps = 10;
    try {
        sample(NanField(), source(16), cfg, nullptr);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("scale 0") != std::string::npos);
        CHECK(msg.find("t = 0.4") != std::string::npos);
    }
}

TEST_CASE("config validation") {
    SampleConfig c;
    c.steps = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SampleConfig{};
    c.guidance = -0.1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SampleConfig{};
    c.sigma = -0.1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SampleConfig{};
    CHECK(c.steps == 300);
    CHECK(c.guidance == 1.0);
    CHECK(c.sigma == 0.35);
    c.stop_scale = 5;
    c.guidance = 0;
    CHECK_THROWS_AS(sample(LinearField(0, 0), source(32), c, nullptr), ConfigError);
}

TEST_CASE("start and stop scales and recording") {
    const PairSource src = source(32);
    SampleConfig cfg;
    cfg.guidance = 0.0;
    cfg.steps = 6;
    cfg.start_scale = 1;
    cfg.stop_scale = 1;
    cfg.record_every = 2;
    const Trajectory tr = sample(LinearField(0.2, 0.0), src, cfg, nullptr);
    REQUIRE(tr.scales == std::vector<int>{1});
    CHECK(tr.scale_inputs[0].data == src.x1(1).data);
    CHECK(tr.recorded[0].size() == 3);
    CHECK(tr.recorded[0].back().data == tr.final.data);
    CHECK(tr.em_steps == 6);
}

TEST_CASE("batch seeds are per index and results are clamped") {
    const PairSource src = source(32);
    SampleConfig cfg;
    cfg.guidance = 0.0;
    cfg.steps = 8;
    cfg.seed = 3;
    const auto batch = sample_batch(LinearField(-2.0, 0.0), src, cfg, nullptr, 9);
    REQUIRE(batch.size() == 9);
    CHECK(batch[0].data != batch[1].data);
    const auto seventh = sample_batch(LinearField(-2.0, 0.0), src, cfg, nullptr, 1, 7);
    CHECK(seventh[0].data == batch[7].data);
    SampleConfig single = cfg;
    single.seed = sample_seed(3, 7);
    CHECK(clamp(sample(LinearField(-2.0, 0.0), src, single, nullptr).final).data == batch[7].data);
    for (const auto& img : batch)
        for (double v : img.data) CHECK(std::abs(v) <= 1.0);
    CHECK(sample_seed(3, 7) != sample_seed(4, 7));
    CHECK_THROWS_AS(sample_batch(LinearField(0, 0), src, cfg, nullptr, 0), ConfigError);
}
