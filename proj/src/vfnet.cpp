#include "sinsemi/vfnet.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sinsemi/archive.hpp"
#include "sinsemi/errors.hpp"
#include "sinsemi/nn/ops.hpp"
#include "sinsemi/rng.hpp"

namespace sinsemi {

int ModelConfig::receptive_field() const {
    int rf = 1;
    for (int k : kernels) rf += k - 1;
    return rf;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
    if (in_channels != 1 && in_channels != 3) fail("in_channels must be 1 or 3");
    if (channels < 1) fail("channels must be >= 1");
    if (embed_dim < 4 || embed_dim % 4 != 0) fail("embed_dim must be a positive multiple of 4");
    if (num_scales < 1) fail("num_scales must be >= 1");
    if (kernels.empty()) fail("at least one block is required");
    for (int k : kernels)
        if (k < 1 || k % 2 == 0) fail("kernel sizes must be odd and positive");
    if (receptive_field() != kReceptiveField) {
        fail("receptive field is " + std::to_string(receptive_field()) + ", must be " +
             std::to_string(kReceptiveField) + " (kernels " + format_kernels(kernels) + ")");
    }
}

std::string format_kernels(const std::vector<int>& kernels) {
    std::string s;
    for (std::size_t i = 0; i < kernels.size(); ++i) s += (i ? "," : "") + std::to_string(kernels[i]);
    return s;
}

std::vector<int> parse_kernels(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ConfigError("bad kernel list '" + s + "'");
        }
    }
    return out;
}

std::vector<double> time_features(double t, int dim) {
    const int half = dim / 2;
    std::vector<double> f(dim);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        const double angle = 1000.0 * t * freq;
        f[i] = std::sin(angle);
        f[half + i] = std::cos(angle);
    }
    return f;
}

std::vector<std::pair<std::string, std::vector<int>>> parameter_schema(const ModelConfig& cfg) {
    const int C = cfg.channels, E = cfg.embed_dim;
    std::vector<std::pair<std::string, std::vector<int>>> s{
        {"embed.scale", {cfg.num_scales, E / 2}},
        {"embed.fc.weight", {E, E}},
        {"embed.fc.bias", {E}},
        {"stem.weight", {C, cfg.in_channels}},
        {"stem.bias", {C}},
    };
    for (int b = 0; b < cfg.blocks(); ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        const int k = cfg.kernels[b];
        s.push_back({p + "dw.weight", {k, k, C}});
        s.push_back({p + "mod.weight", {C, E}});
        s.push_back({p + "mod.bias", {C}});
        s.push_back({p + "pw.weight", {C, C}});
        s.push_back({p + "pw.bias", {C}});
    }
    s.push_back({"head.weight", {cfg.in_channels, C}});
    s.push_back({"head.bias", {cfg.in_channels}});
    return s;
}

template <class T>
VectorFieldNet<T>::VectorFieldNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (auto& [name, shape] : parameter_schema(cfg_)) {
        const int idx = params_.add(name, shape);
        if (name == "embed.scale") scale_table_ = idx;
        else if (name == "embed.fc.weight") fc_w_ = idx;
        else if (name == "embed.fc.bias") fc_b_ = idx;
        else if (name == "stem.weight") stem_w_ = idx;
        else if (name == "stem.bias") stem_b_ = idx;
        else if (name == "head.weight") head_w_ = idx;
        else if (name == "head.bias") head_b_ = idx;
        else if (name.ends_with("dw.weight")) dw_w_.push_back(idx);
        else if (name.ends_with("mod.weight")) mod_w_.push_back(idx);
        else if (name.ends_with("mod.bias")) mod_b_.push_back(idx);
        else if (name.ends_with("pw.weight")) pw_w_.push_back(idx);
        else if (name.ends_with("pw.bias")) pw_b_.push_back(idx);
    }
}

template <class T>
VectorFieldNet<T> VectorFieldNet<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
    VectorFieldNet net(cfg);
    for (int i = 0; i < net.params_.size(); ++i) {
        auto& p = net.params_[i];
        double std_dev = 0.0;
        if (i == net.scale_table_) std_dev = 1.0;
        else if (p.name.ends_with(".weight") && i != net.head_w_) {
            // Depthwise kernels are [k][k][C]; everything else is [out][in...].
            int fan_in = 1;
            if (p.name.ends_with("dw.weight")) fan_in = p.shape[0] * p.shape[1];
            else
                for (std::size_t d = 1; d < p.shape.size(); ++d) fan_in *= p.shape[d];
            std_dev = 1.0 / std::sqrt(static_cast<double>(fan_in));
        }
        if (std_dev == 0.0) continue;
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
        for (auto& v : p.value) v = static_cast<T>(std_dev * rng.normal());
    }
    return net;
}

template <class T>
void VectorFieldNet<T>::check_input(const nn::HwcTensor<T>& x, double t, int s) const {
    if (x.c != cfg_.in_channels) {
        throw ConfigError("vfnet: input has " + std::to_string(x.c) + " channels, model expects " +
                          std::to_string(cfg_.in_channels));
    }
    if (x.h < 1 || x.w < 1) throw ConfigError("vfnet: empty input");
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("vfnet: t must be in [0, 1]");
    if (s < 0 || s >= cfg_.num_scales) {
        throw ConfigError("vfnet: scale " + std::to_string(s) + " outside [0, " +
                          std::to_string(cfg_.num_scales) + ")");
    }
}

template <class T>
void VectorFieldNet<T>::embed(double t, int s, std::vector<T>& e_in, std::vector<T>& e_pre,
                              std::vector<T>& e) const {
    const int E = cfg_.embed_dim, half = E / 2;
    e_in.resize(E);
    const auto tf = time_features(t, half);
    for (int i = 0; i < half; ++i) e_in[i] = static_cast<T>(tf[i]);
    const T* row = params_[scale_table_].value.data() + static_cast<std::size_t>(s) * half;
    std::copy(row, row + half, e_in.begin() + half);
    e_pre.resize(E);
    nn::linear(e_in.data(), E, params_[fc_w_].value.data(), params_[fc_b_].value.data(), E, e_pre.data());
    e = e_pre;
    nn::gelu_inplace(e);
}

template <class T>
nn::HwcTensor<T> VectorFieldNet<T>::forward(const nn::HwcTensor<T>& x, double t, int s) const {
    check_input(x, t, s);
    const int C = cfg_.channels, E = cfg_.embed_dim, P = x.pixels(), H = x.h, W = x.w;
    std::vector<T> e_in, e_pre, e, mod(C);
    embed(t, s, e_in, e_pre, e);

    nn::HwcTensor<T> h(H, W, C), a(H, W, C), r(H, W, C), out(H, W, cfg_.in_channels);
    nn::pointwise(x.v.data(), P, x.c, params_[stem_w_].value.data(), params_[stem_b_].value.data(), C,
                  h.v.data());
    for (int b = 0; b < cfg_.blocks(); ++b) {
        nn::linear(e.data(), E, params_[mod_w_[b]].value.data(), params_[mod_b_[b]].value.data(), C, mod.data());
        nn::depthwise_hwc(h.v.data(), H, W, C, params_[dw_w_[b]].value.data(), mod.data(), cfg_.kernels[b],
                          a.v.data());
        nn::gelu_inplace(a.v);
        nn::pointwise(a.v.data(), P, C, params_[pw_w_[b]].value.data(), params_[pw_b_[b]].value.data(), C,
                      r.v.data());
        for (std::size_t i = 0; i < h.v.size(); ++i) h.v[i] += r.v[i];
    }
    nn::pointwise(h.v.data(), P, C, params_[head_w_].value.data(), params_[head_b_].value.data(),
                  cfg_.in_channels, out.v.data());
    return out;
}

template <class T>
nn::HwcTensor<T> VectorFieldNet<T>::forward(const nn::HwcTensor<T>& x, double t, int s,
                                            Cache& cache) const {
    check_input(x, t, s);
    const int C = cfg_.channels, E = cfg_.embed_dim, B = cfg_.blocks(), P = x.pixels(), H = x.h, W = x.w;
    std::vector<T> mod(C);
    cache.scale = s;
    cache.x = x;
    embed(t, s, cache.e_in, cache.e_pre, cache.e);
    cache.h.assign(B + 1, nn::HwcTensor<T>(H, W, C));
    cache.a.assign(B, nn::HwcTensor<T>(H, W, C));
    cache.g.resize(B);

    nn::pointwise(x.v.data(), P, x.c, params_[stem_w_].value.data(), params_[stem_b_].value.data(), C,
                  cache.h[0].v.data());
    nn::HwcTensor<T> r(H, W, C);
    for (int b = 0; b < B; ++b) {
        nn::linear(cache.e.data(), E, params_[mod_w_[b]].value.data(), params_[mod_b_[b]].value.data(), C,
                   mod.data());
        nn::depthwise_hwc(cache.h[b].v.data(), H, W, C, params_[dw_w_[b]].value.data(), mod.data(),
                          cfg_.kernels[b], cache.a[b].v.data());
        cache.g[b] = cache.a[b];
        nn::gelu_inplace(cache.g[b].v);
        nn::pointwise(cache.g[b].v.data(), P, C, params_[pw_w_[b]].value.data(),
                      params_[pw_b_[b]].value.data(), C, r.v.data());
        auto& next = cache.h[b + 1].v;
        const auto& prev = cache.h[b].v;
        for (std::size_t i = 0; i < next.size(); ++i) next[i] = prev[i] + r.v[i];
    }
    nn::HwcTensor<T> out(H, W, cfg_.in_channels);
    nn::pointwise(cache.h[B].v.data(), P, C, params_[head_w_].value.data(), params_[head_b_].value.data(),
                  cfg_.in_channels, out.v.data());
    return out;
}

template <class T>
void VectorFieldNet<T>::backward(const Cache& cache, const nn::HwcTensor<T>& dout, nn::HwcTensor<T>* dx) {
    const int C = cfg_.channels, E = cfg_.embed_dim, B = cfg_.blocks();
    const int H = dout.h, W = dout.w, P = H * W;
    nn::HwcTensor<T> dh(H, W, C);
    nn::pointwise_backward(cache.h[B].v.data(), P, C, params_[head_w_].value.data(), cfg_.in_channels,
                           dout.v.data(), params_[head_w_].grad.data(), params_[head_b_].grad.data(),
                           dh.v.data());

    std::vector<T> de(E, T(0)), dmod(C);
    nn::HwcTensor<T> da(H, W, C);
    for (int b = B - 1; b >= 0; --b) {
        std::fill(da.v.begin(), da.v.end(), T(0));
        nn::pointwise_backward(cache.g[b].v.data(), P, C, params_[pw_w_[b]].value.data(), C, dh.v.data(),
                               params_[pw_w_[b]].grad.data(), params_[pw_b_[b]].grad.data(), da.v.data());
        nn::gelu_backward(cache.a[b].v, da.v);
        std::fill(dmod.begin(), dmod.end(), T(0));
        // The modulation enters as the depthwise bias; its gradient is the spatial sum.
        nn::depthwise_hwc_backward(cache.h[b].v.data(), H, W, C, params_[dw_w_[b]].value.data(),
                                   cfg_.kernels[b], da.v.data(), params_[dw_w_[b]].grad.data(),
                                   dmod.data(), dh.v.data());
        nn::linear_backward(cache.e.data(), E, params_[mod_w_[b]].value.data(), C, dmod.data(),
                            params_[mod_w_[b]].grad.data(), params_[mod_b_[b]].grad.data(), de.data());
    }
    nn::pointwise_backward(cache.x.v.data(), P, cfg_.in_channels, params_[stem_w_].value.data(), C,
                           dh.v.data(), params_[stem_w_].grad.data(), params_[stem_b_].grad.data(),
                           dx ? dx->v.data() : nullptr);

    for (int i = 0; i < E; ++i) de[i] *= nn::gelu_grad(cache.e_pre[i]);
    std::vector<T> de_in(E, T(0));
    nn::linear_backward(cache.e_in.data(), E, params_[fc_w_].value.data(), E, de.data(),
                        params_[fc_w_].grad.data(), params_[fc_b_].grad.data(), de_in.data());
    const int half = E / 2;
    T* row = params_[scale_table_].grad.data() + static_cast<std::size_t>(cache.scale) * half;
    for (int i = 0; i < half; ++i) row[i] += de_in[half + i];
}

template <class T>
nn::HwcTensor<T> to_tensor(const Image& img) {
    nn::HwcTensor<T> t(img.height, img.width, img.channels);
    std::transform(img.data.begin(), img.data.end(), t.v.begin(), [](double v) { return static_cast<T>(v); });
    return t;
}

template <class T>
Image to_image(const nn::HwcTensor<T>& t) {
    Image img(t.h, t.w, t.c);
    std::transform(t.v.begin(), t.v.end(), img.data.begin(), [](T v) { return static_cast<double>(v); });
    return img;
}

template <class T>
Image VectorFieldNet<T>::velocity(const Image& x, double t, int s) const {
    return to_image(forward(to_tensor<T>(x), t, s));
}

template class VectorFieldNet<float>;
template class VectorFieldNet<double>;
template nn::HwcTensor<float> to_tensor<float>(const Image&);
template nn::HwcTensor<double> to_tensor<double>(const Image&);
template Image to_image<float>(const nn::HwcTensor<float>&);
template Image to_image<double>(const nn::HwcTensor<double>&);

namespace {

std::vector<std::uint32_t> dims(const std::vector<int>& shape) {
    return {shape.begin(), shape.end()};
}

int manifest_int(const Archive& a, const std::string& key) {
    try {
        return std::stoi(a.get(key));
    } catch (const std::invalid_argument&) {
        throw IoError("corrupt checkpoint: bad value for " + key);
    }
}

}  // namespace

void save_checkpoint(const VectorFieldModel& model, const nn::Adam<float>& optimizer, long step,
                     const std::string& path,
                     const std::vector<std::pair<std::string, std::string>>& extra) {
    if (!model.params().all_finite()) throw NumericError("refusing to checkpoint non-finite parameters");
    const auto& cfg = model.config();
    Archive a;
    a.set("format", "sinsemi-checkpoint");
    a.set("schema", kModelSchema);
    a.set("model.in_channels", std::to_string(cfg.in_channels));
    a.set("model.channels", std::to_string(cfg.channels));
    a.set("model.blocks", std::to_string(cfg.blocks()));
    a.set("model.kernels", format_kernels(cfg.kernels));
    a.set("model.embed_dim", std::to_string(cfg.embed_dim));
    a.set("model.num_scales", std::to_string(cfg.num_scales));
    a.set("step", std::to_string(step));
    a.set("optimizer", "adam");
    std::ostringstream os;
    os.precision(17);
    const auto& oc = optimizer.config();
    os << oc.learning_rate;
    a.set("optimizer.learning_rate", os.str());
    os.str("");
    os << oc.beta1 << "," << oc.beta2 << "," << oc.eps;
    a.set("optimizer.beta1_beta2_eps", os.str());
    a.set("optimizer.weight_decay", "0");
    a.set("optimizer.steps", std::to_string(optimizer.steps()));
    for (const auto& [k, v] : extra) a.set(k, v);

    const bool has_moments = !optimizer.first_moments().empty();
    const auto& params = model.params();
    for (int i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        a.put(p.name, dims(p.shape), std::span<const float>(p.value));
        if (has_moments) {
            a.put("adam.m/" + p.name, dims(p.shape), std::span<const float>(optimizer.first_moments()[i]));
            a.put("adam.v/" + p.name, dims(p.shape), std::span<const float>(optimizer.second_moments()[i]));
        }
    }
    a.save(path);
}

Checkpoint load_checkpoint(const std::string& path) {
    const Archive a = Archive::load(path);
    if (a.get("format") != "sinsemi-checkpoint") throw IoError("not a model checkpoint: " + path);
    if (a.get("schema") != kModelSchema) {
        throw IoError("unsupported model schema '" + a.get("schema") + "' (expected " + kModelSchema + ")");
    }
    ModelConfig cfg;
    cfg.in_channels = manifest_int(a, "model.in_channels");
    cfg.channels = manifest_int(a, "model.channels");
    cfg.kernels = parse_kernels(a.get("model.kernels"));
    cfg.embed_dim = manifest_int(a, "model.embed_dim");
    cfg.num_scales = manifest_int(a, "model.num_scales");

    Checkpoint ck{VectorFieldModel(cfg), {}, std::stol(a.get("step")), a.manifest()};
    auto& params = ck.model.params();
    for (auto& p : params) {
        const NamedArray& arr = a.array(p.name);
        if (arr.dtype != DType::f32 || arr.shape != dims(p.shape)) {
            throw IoError("checkpoint array '" + p.name + "' has unexpected shape or dtype");
        }
        p.value = arr.f32;
    }
    nn::AdamConfig oc;
    oc.learning_rate = std::stod(a.get("optimizer.learning_rate"));
    {
        std::stringstream ss(a.get("optimizer.beta1_beta2_eps"));
        char comma;
        ss >> oc.beta1 >> comma >> oc.beta2 >> comma >> oc.eps;
    }
    ck.optimizer = nn::Adam<float>(params, oc);
    ck.optimizer.set_steps(std::stol(a.get("optimizer.steps")));
    if (a.contains("adam.m/" + params[0].name)) {
        for (int i = 0; i < params.size(); ++i) {
            ck.optimizer.first_moments()[i] = a.array("adam.m/" + params[i].name).f32;
            ck.optimizer.second_moments()[i] = a.array("adam.v/" + params[i].name).f32;
        }
    }
    return ck;
}

}  // namespace sinsemi
