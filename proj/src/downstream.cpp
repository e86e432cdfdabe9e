#include "sinsemi/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sinsemi/archive.hpp"
#include "sinsemi/errors.hpp"
#include "sinsemi/nn/ops.hpp"
#include "sinsemi/rng.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace sinsemi {

namespace {

// Once the BCE loss is near zero the gradients are mostly subnormal floats,
// which run ~4x slower on x86. Flushing them to zero leaves results unchanged
// at the float precision that matters here.
class FlushDenormals {
public:
#if defined(__SSE__)
    FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
    ~FlushDenormals() { _mm_setcsr(saved_); }

private:
    unsigned saved_;
#endif
};

}  // namespace

void SegConfig::validate() const {
    if (in_channels != 1 && in_channels != 3) throw ConfigError("segmenter: in_channels must be 1 or 3");
    if (depth < 1 || depth > 6) throw ConfigError("segmenter: depth must be in [1, 6]");
    if (base_width < 1) throw ConfigError("segmenter: base_width must be >= 1");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("segmenter: threshold must be in (0, 1)");
}

void SegTrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("segtrain: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("segtrain: batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("segtrain: learning_rate must be a finite value >= 0");
    }
}

struct SegModel::Cache {
    nn::TensorF x;
    std::vector<nn::TensorF> in, a1, a2;  // encoder, per level
    std::vector<std::vector<int>> pool_arg;  // pool_arg[l]: a2[l] -> in[l + 1]
    std::vector<nn::TensorF> cat, d1, d2;  // decoder, indexed by level
    nn::TensorF top;                       // input to the head
};

SegModel::SegModel(SegConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    auto add_conv = [&](const std::string& name, int cin, int cout, int k) {
        Conv c{};
        c.cin = cin;
        c.cout = cout;
        c.k = k;
        c.w = params_.add(name + ".weight", {cout, cin, k, k});
        c.b = params_.add(name + ".bias", {cout});
        return c;
    };
    const int D = cfg_.depth;
    auto width = [&](int l) { return cfg_.base_width << l; };
    for (int l = 0; l < D; ++l) {
        const int cin = l == 0 ? cfg_.in_channels : width(l - 1);
        enc_.push_back(add_conv("enc" + std::to_string(l) + ".conv1", cin, width(l), 3));
        enc_.push_back(add_conv("enc" + std::to_string(l) + ".conv2", width(l), width(l), 3));
    }
    dec_.resize(2 * std::max(0, D - 1));
    for (int l = D - 2; l >= 0; --l) {
        dec_[2 * l] = add_conv("dec" + std::to_string(l) + ".conv1", width(l + 1) + width(l), width(l), 3);
        dec_[2 * l + 1] = add_conv("dec" + std::to_string(l) + ".conv2", width(l), width(l), 3);
    }
    head_ = add_conv("head", width(0), 1, 1);
}

SegModel SegModel::init(const SegConfig& cfg, std::uint64_t seed) {
    SegModel m(cfg);
    Rng rng(seed);
    for (auto& p : m.params_) {
        if (p.shape.size() != 4) continue;
        const double sd = std::sqrt(2.0 / (p.shape[1] * p.shape[2] * p.shape[3]));
        for (auto& v : p.value) v = static_cast<float>(sd * rng.normal());
    }
    return m;
}

namespace {

nn::TensorF planar(const Image& img) {
    nn::TensorF t(img.channels, img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) t.at(c, y, x) = static_cast<float>(img.at(y, x, c));
    return t;
}

}  // namespace

nn::TensorF SegModel::logits(const Image& img, Cache* cache) const {
    if (img.channels != cfg_.in_channels) throw ConfigError("segmenter: image channel count mismatch");
    const int D = cfg_.depth;
    if (std::min(img.height, img.width) < (1 << (D - 1))) {
        throw ConfigError("segmenter: image too small for depth " + std::to_string(D));
    }
    Cache local;
    Cache& c = cache ? *cache : local;
    c = Cache{};
    std::vector<float> scratch;
    auto conv_relu = [&](const Conv& cv, const nn::TensorF& in, nn::TensorF& out) {
        nn::conv2d(in, params_[cv.w].value.data(), params_[cv.b].value.data(), cv.cout, cv.k, out, scratch);
        nn::relu_inplace(out.v);
    };
    c.x = planar(img);
    c.in.resize(D);
    c.a1.resize(D);
    c.a2.resize(D);
    c.pool_arg.resize(D);
    c.in[0] = c.x;
    for (int l = 0; l < D; ++l) {
        if (l > 0) nn::maxpool2(c.a2[l - 1], c.in[l], c.pool_arg[l - 1]);
        conv_relu(enc_[2 * l], c.in[l], c.a1[l]);
        conv_relu(enc_[2 * l + 1], c.a1[l], c.a2[l]);
    }
    c.cat.resize(D);
    c.d1.resize(D);
    c.d2.resize(D);
    const nn::TensorF* deep = &c.a2[D - 1];
    for (int l = D - 2; l >= 0; --l) {
        nn::TensorF up;
        nn::upsample_nearest(*deep, c.a2[l].h, c.a2[l].w, up);
        c.cat[l] = nn::concat(up, c.a2[l]);
        conv_relu(dec_[2 * l], c.cat[l], c.d1[l]);
        conv_relu(dec_[2 * l + 1], c.d1[l], c.d2[l]);
        deep = &c.d2[l];
    }
    c.top = *deep;
    nn::TensorF out;
    nn::conv2d(c.top, params_[head_.w].value.data(), params_[head_.b].value.data(), 1, 1, out, scratch);
    return out;
}

void SegModel::backward(const Cache& c, const nn::TensorF& dlogits) {
    const int D = cfg_.depth;
    std::vector<float> scratch;
    auto conv_back = [&](const Conv& cv, const nn::TensorF& in, const nn::TensorF& post, std::vector<float> g) {
        nn::relu_backward(post.v, g);
        nn::TensorF dout = post;
        dout.v = std::move(g);
        nn::TensorF din(in.c, in.h, in.w);
        nn::conv2d_backward(in, params_[cv.w].value.data(), cv.cout, cv.k, dout, params_[cv.w].grad.data(),
                            params_[cv.b].grad.data(), &din, scratch);
        return din;
    };
    nn::TensorF g(c.top.c, c.top.h, c.top.w);
    nn::conv2d_backward(c.top, params_[head_.w].value.data(), 1, 1, dlogits, params_[head_.w].grad.data(),
                        params_[head_.b].grad.data(), &g, scratch);
    std::vector<nn::TensorF> skip(D);
    for (int l = 0; l < D; ++l) skip[l] = nn::TensorF(c.a2[l].c, c.a2[l].h, c.a2[l].w);
    for (int l = 0; l <= D - 2; ++l) {
        nn::TensorF gd1 = conv_back(dec_[2 * l + 1], c.d1[l], c.d2[l], g.v);
        nn::TensorF gcat = conv_back(dec_[2 * l], c.cat[l], c.d1[l], gd1.v);
        const nn::TensorF& deep = l + 1 == D - 1 ? c.a2[D - 1] : c.d2[l + 1];
        const std::size_t nup = static_cast<std::size_t>(deep.c) * c.a2[l].h * c.a2[l].w;
        nn::TensorF gup(deep.c, c.a2[l].h, c.a2[l].w);
        std::copy(gcat.v.begin(), gcat.v.begin() + nup, gup.v.begin());
        for (std::size_t i = 0; i < skip[l].v.size(); ++i) skip[l].v[i] += gcat.v[nup + i];
        nn::TensorF gdeep(deep.c, deep.h, deep.w);
        nn::upsample_nearest_backward(gup, gdeep);
        g = std::move(gdeep);
    }
    // g is now the gradient at the bottom encoder output.
    for (int l = D - 1; l >= 0; --l) {
        for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += skip[l].v[i];
        nn::TensorF ga1 = conv_back(enc_[2 * l + 1], c.a1[l], c.a2[l], g.v);
        nn::TensorF gin = conv_back(enc_[2 * l], c.in[l], c.a1[l], ga1.v);
        if (l > 0) {
            nn::TensorF gprev(c.a2[l - 1].c, c.a2[l - 1].h, c.a2[l - 1].w);
            nn::maxpool2_backward(gin, c.pool_arg[l - 1], gprev);
            g = std::move(gprev);
        }
    }
}

Image SegModel::probabilities(const Image& x) const {
    const nn::TensorF z = logits(x, nullptr);
    Image p(x.height, x.width, 1);
    for (std::size_t i = 0; i < p.size(); ++i) p.data[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(z.v[i])));
    return p;
}

Mask SegModel::predict(const Image& x) const {
    const Image p = probabilities(x);
    Mask m(x.height, x.width);
    for (std::size_t i = 0; i < p.size(); ++i) m.data[i] = p.data[i] > cfg_.threshold ? 1 : 0;
    return m;
}

double SegModel::bce(const Image& x, const Mask& truth, bool grad, double weight) {
    if (truth.height != x.height || truth.width != x.width) throw ConfigError("segmenter: mask dims differ");
    Cache cache;
    const nn::TensorF z = logits(x, grad ? &cache : nullptr);
    const double n = static_cast<double>(z.size());
    double loss = 0.0;
    nn::TensorF dz(1, z.h, z.w);
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double zi = z.v[i];
        const double y = truth.data[i] ? 1.0 : 0.0;
        loss += std::max(zi, 0.0) - zi * y + std::log1p(std::exp(-std::abs(zi)));
        dz.v[i] = static_cast<float>((1.0 / (1.0 + std::exp(-zi)) - y) / n * weight);
    }
    if (grad) backward(cache, dz);
    return loss / n;
}

void SegModel::save(const std::string& path) const {
    Archive ar;
    ar.set("format", kSegSchema);
    ar.set("in_channels", std::to_string(cfg_.in_channels));
    ar.set("depth", std::to_string(cfg_.depth));
    ar.set("base_width", std::to_string(cfg_.base_width));
    std::ostringstream th;
    th.precision(17);
    th << cfg_.threshold;
    ar.set("threshold", th.str());
    for (const auto& p : params_) {
        std::vector<std::uint32_t> shape(p.shape.begin(), p.shape.end());
        ar.put(p.name, shape, std::span<const float>(p.value));
    }
    ar.save(path);
}

SegModel SegModel::load(const std::string& path) {
    const Archive ar = Archive::load(path);
    if (!ar.has("format") || ar.get("format") != kSegSchema) {
        throw IoError("'" + path + "' is not a segmenter file (expected format = " + kSegSchema + ")");
    }
    SegConfig cfg;
    try {
        cfg.in_channels = std::stoi(ar.get("in_channels"));
        cfg.depth = std::stoi(ar.get("depth"));
        cfg.base_width = std::stoi(ar.get("base_width"));
        cfg.threshold = std::stod(ar.get("threshold"));
    } catch (const std::invalid_argument&) {
        throw IoError("'" + path + "': malformed segmenter manifest");
    }
    SegModel m(cfg);
    for (auto& p : m.params_) {
        const NamedArray& a = ar.array(p.name);
        if (a.dtype != DType::f32 || a.count() != p.size()) {
            throw IoError("'" + path + "': array '" + p.name + "' has the wrong shape or type");
        }
        p.value = a.f32;
    }
    return m;
}

SegModel train_segmenter(const std::vector<LabeledImage>& data, const SegConfig& model_cfg,
                         const SegTrainConfig& cfg, std::vector<double>* epoch_loss) {
    cfg.validate();
    if (data.empty()) throw ConfigError("train_segmenter: empty training set");
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!all_finite(data[i].image)) {
            throw NumericError("train_segmenter: item " + std::to_string(i) + " has non-finite pixels");
        }
    }
    const FlushDenormals ftz;
    SegModel model = SegModel::init(model_cfg, derive_seed(cfg.seed, {0}));
    nn::Adam<float> opt(model.params(), {cfg.learning_rate, 0.9, 0.999, 1e-8});
    std::vector<std::size_t> order(data.size());
    if (epoch_loss) epoch_loss->clear();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(epoch)}));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double w = 1.0 / static_cast<double>(end - start);
            model.params().zero_grad();
            for (std::size_t j = start; j < end; ++j) {
                const auto& item = data[order[j]];
                const double l = model.bce(item.image, item.mask, true, w);
                if (!std::isfinite(l)) {
                    throw NumericError("train_segmenter: non-finite loss at epoch " + std::to_string(epoch) +
                                       ", item " + std::to_string(order[j]));
                }
                total += l;
            }
            if (cfg.learning_rate > 0.0) opt.step(model.params());
        }
        if (epoch_loss) epoch_loss->push_back(total / static_cast<double>(data.size()));
    }
    return model;
}

namespace {

// Pixel indices of each 4-connected component, in scan order of the first pixel.
std::vector<std::vector<int>> components(const Mask& m) {
    const int H = m.height, W = m.width;
    std::vector<char> seen(m.data.size(), 0);
    std::vector<std::vector<int>> out;
    std::vector<int> stack;
    for (int start = 0; start < static_cast<int>(m.data.size()); ++start) {
        if (!m.data[start] || seen[start]) continue;
        std::vector<int> comp;
        stack.assign(1, start);
        seen[start] = 1;
        auto visit = [&](int q) {
            if (m.data[q] && !seen[q]) {
                seen[q] = 1;
                stack.push_back(q);
            }
        };
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            comp.push_back(p);
            const int y = p / W, x = p % W;
            if (y > 0) visit(p - W);
            if (y + 1 < H) visit(p + W);
            if (x > 0) visit(p - 1);
            if (x + 1 < W) visit(p + 1);
        }
        out.push_back(std::move(comp));
    }
    return out;
}

}  // namespace

Mask pseudo_label(const Image& generated, const Image& ref_clean, double threshold) {
    if (!generated.same_shape(ref_clean)) throw ConfigError("pseudo_label: image dims differ");
    const int H = generated.height, W = generated.width, C = generated.channels;
    std::vector<double> diff(static_cast<std::size_t>(H) * W, 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int c = 0; c < C; ++c) acc += std::abs(generated.at(y, x, c) - ref_clean.at(y, x, c));
            diff[static_cast<std::size_t>(y) * W + x] = acc / C;
        }
    Mask m(H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            int n = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    acc += diff[static_cast<std::size_t>(yy) * W + xx];
                    ++n;
                }
            m.at(y, x) = acc / n > threshold ? 1 : 0;
        }
    for (const auto& comp : components(m))
        if (comp.size() < 4)
            for (int p : comp) m.data[p] = 0;
    return m;
}

double iou(const Mask& pred, const Mask& truth) {
    if (pred.height != truth.height || pred.width != truth.width) throw ConfigError("iou: mask dims differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool a = pred.data[i] != 0, b = truth.data[i] != 0;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<int> component_areas(const Mask& m) {
    std::vector<int> areas;
    for (const auto& comp : components(m)) areas.push_back(static_cast<int>(comp.size()));
    return areas;
}

int count_defects(const Mask& m, int min_area) {
    if (min_area < 1) throw ConfigError("count_defects: min_area must be >= 1");
    int n = 0;
    for (int a : component_areas(m)) n += a >= min_area;
    return n;
}

Image defect_heatmap(const std::vector<Mask>& masks) {
    if (masks.empty()) throw ConfigError("defect_heatmap: no masks");
    const int H = masks[0].height, W = masks[0].width;
    Image heat(H, W, 1);
    for (const auto& m : masks) {
        if (m.height != H || m.width != W) throw ConfigError("defect_heatmap: mask dims differ");
        for (std::size_t i = 0; i < m.data.size(); ++i) heat.data[i] += m.data[i] ? 1.0 : 0.0;
    }
    const double peak = *std::max_element(heat.data.begin(), heat.data.end());
    if (peak > 0.0)
        for (auto& v : heat.data) v /= peak;
    return heat;
}

Image heatmap_to_image(const Image& heat) {
    Image out = heat;
    for (auto& v : out.data) v = 2.0 * v - 1.0;
    return out;
}

}  // namespace sinsemi
