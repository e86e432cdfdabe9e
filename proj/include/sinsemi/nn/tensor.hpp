#pragma once

#include <cstddef>
#include <vector>

namespace sinsemi::nn {

/// Single-item activation, planar C x H x W.
template <class T>
struct Tensor {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int channels, int height, int width, T fill = T(0))
        : c(channels), h(height), w(width), v(static_cast<std::size_t>(channels) * height * width, fill) {}

    int pixels() const { return h * w; }
    std::size_t size() const { return v.size(); }
    T* plane(int ch) { return v.data() + static_cast<std::size_t>(ch) * h * w; }
    const T* plane(int ch) const { return v.data() + static_cast<std::size_t>(ch) * h * w; }
    T& at(int ch, int y, int x) { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    T at(int ch, int y, int x) const { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
    void reshape(int channels, int height, int width) {
        c = channels;
        h = height;
        w = width;
        v.assign(static_cast<std::size_t>(channels) * height * width, T(0));
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace sinsemi::nn

namespace sinsemi::nn {

/// Single-item activation, channels-last H x W x C (same order as Image).
template <class T>
struct HwcTensor {
    int h = 0;
    int w = 0;
    int c = 0;
    std::vector<T> v;

    HwcTensor() = default;
    HwcTensor(int height, int width, int channels, T fill = T(0))
        : h(height), w(width), c(channels), v(static_cast<std::size_t>(height) * width * channels, fill) {}

    int pixels() const { return h * w; }
    std::size_t size() const { return v.size(); }
    T& at(int y, int x, int ch) { return v[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
    T at(int y, int x, int ch) const { return v[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
    bool same_shape(const HwcTensor& o) const { return c == o.c && h == o.h && w == o.w; }
    void reshape(int height, int width, int channels) {
        h = height;
        w = width;
        c = channels;
        v.assign(static_cast<std::size_t>(height) * width * channels, T(0));
    }
};

}  // namespace sinsemi::nn
