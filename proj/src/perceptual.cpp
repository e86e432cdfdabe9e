#include "sinsemi/perceptual.hpp"

#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>

#include "sinsemi/archive.hpp"
#include "sinsemi/digest.hpp"
#include "sinsemi/errors.hpp"
#include "sinsemi/nn/ops.hpp"
#include "sinsemi/parallel.hpp"
#include "sinsemi/rng.hpp"

namespace sinsemi {

namespace {

constexpr double kNormEps = 1e-10;
constexpr double kCovReg = 1e-6;

nn::TensorD to_planar(const Image& img) {
    nn::TensorD t(img.channels, img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) t.at(c, y, x) = img.at(y, x, c);
    return t;
}

Image from_planar(const nn::TensorD& t) {
    Image img(t.h, t.w, t.c);
    for (int y = 0; y < t.h; ++y)
        for (int x = 0; x < t.w; ++x)
            for (int c = 0; c < t.c; ++c) img.at(y, x, c) = t.at(c, y, x);
    return img;
}

// Channel-normalized copy of a tap, and the per-position norms used.
void normalize(const nn::TensorD& f, nn::TensorD& n, std::vector<double>& r) {
    const int P = f.pixels();
    n = f;
    r.assign(P, 0.0);
    for (int c = 0; c < f.c; ++c) {
        const double* src = f.plane(c);
        for (int p = 0; p < P; ++p) r[p] += src[p] * src[p];
    }
    for (auto& v : r) v = std::sqrt(v + kNormEps);
    for (int c = 0; c < f.c; ++c) {
        double* dst = n.plane(c);
        for (int p = 0; p < P; ++p) dst[p] /= r[p];
    }
}

}  // namespace

FeatureExtractor::FeatureExtractor(std::vector<Stage> stages, std::string provenance)
    : stages_(std::move(stages)), provenance_(std::move(provenance)) {
    if (stages_.empty()) throw ConfigError("feature extractor: no stages");
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const auto& s = stages_[i];
        if (s.spec.in < 1 || s.spec.out < 1 || s.spec.kernel < 1 || s.spec.kernel % 2 == 0) {
            throw ConfigError("feature extractor: bad shape at stage " + std::to_string(i));
        }
        if (i > 0 && s.spec.in != stages_[i - 1].spec.out) {
            throw ConfigError("feature extractor: stage " + std::to_string(i) + " expects " +
                              std::to_string(s.spec.in) + " channels, previous stage gives " +
                              std::to_string(stages_[i - 1].spec.out));
        }
        const std::size_t nw = static_cast<std::size_t>(s.spec.out) * s.spec.in * s.spec.kernel * s.spec.kernel;
        if (s.weight.size() != nw || s.bias.size() != static_cast<std::size_t>(s.spec.out) ||
            s.calib.size() != static_cast<std::size_t>(s.spec.out)) {
            throw ConfigError("feature extractor: array size mismatch at stage " + std::to_string(i));
        }
    }
}

FeatureExtractor FeatureExtractor::procedural(int in_channels, std::uint64_t seed) {
    if (in_channels != 1 && in_channels != 3) throw ConfigError("feature extractor: channels must be 1 or 3");
    const StageSpec specs[] = {{in_channels, 16, 3, false}, {16, 32, 3, true}, {32, 32, 3, true}};
    std::vector<Stage> stages;
    for (std::size_t i = 0; i < std::size(specs); ++i) {
        const StageSpec& sp = specs[i];
        Rng rng(derive_seed(seed, {i}));
        Stage st;
        st.spec = sp;
        const int fan_in = sp.in * sp.kernel * sp.kernel;
        const double sd = std::sqrt(2.0 / fan_in);
        st.weight.resize(static_cast<std::size_t>(sp.out) * fan_in);
        for (auto& w : st.weight) w = sd * rng.normal();
        st.bias.resize(sp.out);
        for (auto& b : st.bias) b = 0.1 * rng.normal();
        st.calib.assign(sp.out, 1.0);
        stages.push_back(std::move(st));
    }
    return FeatureExtractor(std::move(stages), "procedural:seed=" + std::to_string(seed));
}

FeatureExtractor FeatureExtractor::load(const std::string& path) {
    const Archive ar = Archive::load(path);
    if (!ar.has("format") || ar.get("format") != kExtractorSchema) {
        throw IoError("feature extractor file '" + path + "': expected format = " + kExtractorSchema);
    }
    auto as_doubles = [&](const std::string& name, std::size_t n) {
        const NamedArray& a = ar.array(name);
        if (a.count() != n) {
            throw IoError("feature extractor array '" + name + "' has " + std::to_string(a.count()) +
                          " values, expected " + std::to_string(n));
        }
        if (a.dtype == DType::f64) return a.f64;
        return std::vector<double>(a.f32.begin(), a.f32.end());
    };
    int count = 0;
    try {
        count = std::stoi(ar.get("stages"));
    } catch (const std::invalid_argument&) {
        throw IoError("feature extractor: bad stage count");
    }
    std::vector<Stage> stages;
    for (int i = 0; i < count; ++i) {
        const std::string pre = "stage" + std::to_string(i);
        Stage st;
        try {
            st.spec.in = std::stoi(ar.get(pre + ".in"));
            st.spec.out = std::stoi(ar.get(pre + ".out"));
            st.spec.kernel = std::stoi(ar.get(pre + ".kernel"));
            st.spec.pool = ar.get(pre + ".pool") == "1";
        } catch (const std::invalid_argument&) {
            throw IoError("feature extractor: bad shape entry for " + pre);
        }
        const std::size_t nw =
            static_cast<std::size_t>(st.spec.out) * st.spec.in * st.spec.kernel * st.spec.kernel;
        st.weight = as_doubles(pre + ".weight", nw);
        st.bias = as_doubles(pre + ".bias", st.spec.out);
        st.calib = as_doubles(pre + ".calib", st.spec.out);
        stages.push_back(std::move(st));
    }
    return FeatureExtractor(std::move(stages), "loaded:fnv1a=" + file_digest(path));
}

void FeatureExtractor::save(const std::string& path) const {
    Archive ar;
    ar.set("format", kExtractorSchema);
    ar.set("stages", std::to_string(stages_.size()));
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const auto& s = stages_[i];
        const std::string pre = "stage" + std::to_string(i);
        ar.set(pre + ".in", std::to_string(s.spec.in));
        ar.set(pre + ".out", std::to_string(s.spec.out));
        ar.set(pre + ".kernel", std::to_string(s.spec.kernel));
        ar.set(pre + ".pool", s.spec.pool ? "1" : "0");
        const auto o = static_cast<std::uint32_t>(s.spec.out), in = static_cast<std::uint32_t>(s.spec.in),
                   k = static_cast<std::uint32_t>(s.spec.kernel);
        ar.put(pre + ".weight", {o, in, k, k}, std::span<const double>(s.weight));
        ar.put(pre + ".bias", {o}, std::span<const double>(s.bias));
        ar.put(pre + ".calib", {o}, std::span<const double>(s.calib));
    }
    ar.save(path);
}

int FeatureExtractor::min_side() const {
    int side = 1;
    for (auto it = stages_.rbegin(); it != stages_.rend(); ++it)
        if (it->spec.pool) side *= 2;
    return side;
}

void FeatureExtractor::check(const Image& img) const {
    if (img.channels != in_channels()) {
        throw ConfigError("feature extractor expects " + std::to_string(in_channels()) +
                          " channels, image has " + std::to_string(img.channels));
    }
    if (std::min(img.height, img.width) < min_side()) {
        throw ConfigError("feature extractor needs images of at least " + std::to_string(min_side()) +
                          " pixels per side");
    }
}

FeatureExtractor::Trace FeatureExtractor::trace(const Image& img) const {
    check(img);
    Trace tr;
    tr.height = img.height;
    tr.width = img.width;
    std::vector<double> scratch;
    nn::TensorD cur = to_planar(img);
    for (const auto& st : stages_) {
        nn::TensorD in;
        if (st.spec.pool) {
            nn::avgpool2(cur, in);
        } else {
            in = std::move(cur);
        }
        nn::TensorD pre;
        nn::conv2d(in, st.weight.data(), st.bias.data(), st.spec.out, st.spec.kernel, pre, scratch);
        nn::TensorD post = pre;
        nn::gelu_inplace(post.v);
        cur = post;
        tr.input.push_back(std::move(in));
        tr.pre.push_back(std::move(pre));
        tr.tap.push_back(std::move(post));
    }
    return tr;
}

std::vector<nn::TensorD> FeatureExtractor::features(const Image& img) const { return trace(img).tap; }

Image FeatureExtractor::backward(const Trace& tr, const std::vector<nn::TensorD>& dtap, int channels) const {
    std::vector<double> scratch;
    nn::TensorD carry;  // gradient flowing into the output of stage l from stage l + 1
    for (int l = taps() - 1; l >= 0; --l) {
        const auto& st = stages_[l];
        std::vector<double> g = dtap[l].v;
        if (!carry.v.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += carry.v[i];
        }
        nn::gelu_backward(tr.pre[l].v, g);
        nn::TensorD dpre = tr.pre[l];
        dpre.v = std::move(g);
        nn::TensorD din(tr.input[l].c, tr.input[l].h, tr.input[l].w);
        nn::conv2d_backward(tr.input[l], st.weight.data(), st.spec.out, st.spec.kernel, dpre,
                            static_cast<double*>(nullptr), static_cast<double*>(nullptr), &din, scratch);
        if (st.spec.pool) {
            nn::TensorD up(din.c, l > 0 ? tr.tap[l - 1].h : tr.height, l > 0 ? tr.tap[l - 1].w : tr.width);
            nn::avgpool2_backward(din, up);
            carry = std::move(up);
        } else {
            carry = std::move(din);
        }
    }
    if (carry.c != channels) throw ConfigError("feature extractor: gradient channel mismatch");
    return from_planar(carry);
}

double perceptual_distance(const Image& a, const Image& b, const FeatureExtractor& fx, Image* grad_b) {
    if (!a.same_shape(b)) throw ConfigError("perceptual_distance: image dims differ");
    const auto fa = fx.features(a);
    const auto tb = fx.trace(b);
    double total = 0.0;
    std::vector<nn::TensorD> dtap;
    if (grad_b) dtap.resize(fx.taps());
    nn::TensorD na, nb;
    std::vector<double> ra, rb;
    for (int l = 0; l < fx.taps(); ++l) {
        const auto& calib = fx.stages()[l].calib;
        normalize(fa[l], na, ra);
        normalize(tb.tap[l], nb, rb);
        const int P = na.pixels();
        double acc = 0.0;
        for (int c = 0; c < na.c; ++c) {
            const double w2 = calib[c] * calib[c];
            const double* pa = na.plane(c);
            const double* pb = nb.plane(c);
            for (int p = 0; p < P; ++p) {
                const double d = pa[p] - pb[p];
                acc += w2 * d * d;
            }
        }
        total += acc / P;
        if (grad_b) {
            // dD/dn_b, then through n = f / r with r = sqrt(sum_c f^2 + eps).
            nn::TensorD dn(na.c, na.h, na.w);
            for (int c = 0; c < na.c; ++c) {
                const double w2 = calib[c] * calib[c];
                for (int p = 0; p < P; ++p)
                    dn.plane(c)[p] = -2.0 * w2 * (na.plane(c)[p] - nb.plane(c)[p]) / P;
            }
            std::vector<double> dot(P, 0.0);
            for (int c = 0; c < na.c; ++c)
                for (int p = 0; p < P; ++p) dot[p] += dn.plane(c)[p] * nb.plane(c)[p];
            nn::TensorD df(na.c, na.h, na.w);
            for (int c = 0; c < na.c; ++c)
                for (int p = 0; p < P; ++p)
                    df.plane(c)[p] = (dn.plane(c)[p] - nb.plane(c)[p] * dot[p]) / rb[p];
            dtap[l] = std::move(df);
        }
    }
    if (grad_b) *grad_b = fx.backward(tb, dtap, b.channels);
    return total;
}

FeatureStats feature_stats(const Image& img, const FeatureExtractor& fx) {
    const auto taps = fx.features(img);
    const nn::TensorD& f = taps.back();
    const int P = f.pixels();
    if (P < 2) throw ConfigError("feature_stats: deepest tap has fewer than 2 positions");
    // Fixed-order sums into an owned (aligned) matrix: reductions over a Map
    // pick their vector path from the buffer's runtime alignment.
    FeatureStats s;
    s.mean.resize(f.c);
    Eigen::MatrixXd centered(f.c, P);
    for (int c = 0; c < f.c; ++c) {
        const double* row = f.v.data() + static_cast<std::size_t>(c) * P;
        double acc = 0.0;
        for (int p = 0; p < P; ++p) acc += row[p];
        s.mean[c] = acc / static_cast<double>(P);
        for (int p = 0; p < P; ++p) centered(c, p) = row[p] - s.mean[c];
    }
    s.cov = centered * centered.transpose() / static_cast<double>(P - 1);
    s.cov.diagonal().array() += kCovReg;
    return s;
}

namespace {

bool sym_sqrt(const Eigen::MatrixXd& m, Eigen::MatrixXd& out) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    if (es.info() != Eigen::Success) return false;
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    return true;
}

bool sqrt_trace(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double& tr) {
    Eigen::MatrixXd ra;
    if (!sym_sqrt(a, ra)) return false;
    const Eigen::MatrixXd m = ra * b * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) return false;
    tr = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    return true;
}

}  // namespace

double frechet_distance(const FeatureStats& a, const FeatureStats& b, bool* flagged) {
    if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows()) {
        throw ConfigError("frechet_distance: dimension mismatch");
    }
    if (flagged) *flagged = false;
    double tr = 0.0;
    Eigen::MatrixXd ca = a.cov, cb = b.cov;
    for (double shift = 1e-4; !sqrt_trace(ca, cb, tr); shift *= 10.0) {
        if (flagged) *flagged = true;
        if (shift > 1.0) throw NumericError("frechet_distance: matrix square root did not converge");
        ca.diagonal().array() += shift;
        cb.diagonal().array() += shift;
    }
    const double d = (a.mean - b.mean).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr;
    return d > 0.0 ? d : 0.0;
}

double sifid(const Image& a, const Image& b, const FeatureExtractor& fx, bool* flagged) {
    if (!a.same_shape(b)) throw ConfigError("sifid: image dims differ");
    return frechet_distance(feature_stats(a, fx), feature_stats(b, fx), flagged);
}

BaselineScores baseline_scores(const Image& ref_defect, const Image& ref_clean, const FeatureExtractor& fx) {
    return {sifid(ref_defect, ref_clean, fx), perceptual_distance(ref_defect, ref_clean, fx)};
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    double sum = 0.0;
    for (double x : v) sum += x;
    const double mean = sum / static_cast<double>(v.size());
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

MetricReport evaluate_batch(const std::vector<Image>& samples, const Image& ref_defect,
                            const FeatureExtractor& fx, const Image* ref_clean) {
    if (samples.size() < 2) throw ConfigError("evaluate_batch: need at least 2 samples");
    const FeatureStats ref_stats = feature_stats(ref_defect, fx);
    MetricReport r;
    r.sample_count = static_cast<int>(samples.size());
    r.sifid_values.assign(samples.size(), 0.0);
    r.lpips_values.assign(samples.size(), 0.0);
    parallel_for(samples.size(), [&](std::size_t i) {
        if (!samples[i].same_shape(ref_defect)) {
            throw ConfigError("evaluate_batch: sample " + std::to_string(i) + " dims differ from the reference");
        }
        r.sifid_values[i] = frechet_distance(feature_stats(samples[i], fx), ref_stats);
        r.lpips_values[i] = perceptual_distance(ref_defect, samples[i], fx);
    });
    std::tie(r.sifid_mean, r.sifid_std) = mean_std(r.sifid_values);
    std::tie(r.lpips_mean, r.lpips_std) = mean_std(r.lpips_values);
    if (ref_clean) {
        const BaselineScores b = baseline_scores(ref_defect, *ref_clean, fx);
        r.has_baseline = true;
        r.baseline_sifid = b.sifid;
        r.baseline_lpips = b.lpips;
    }
    return r;
}

}  // namespace sinsemi
