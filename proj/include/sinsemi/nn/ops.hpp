#pragma once

// Forward/backward kernels for the small convolutional networks in this
// project. All convolutions are stride 1 with zero "same" padding unless the
// name says otherwise. Weight layouts:
//   conv2d     [cout][cin][k][k]
//   depthwise  [c][k][k]
//   linear     [out][in]
// Backward functions accumulate (+=) into weight/bias/input gradients.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "sinsemi/nn/tensor.hpp"

namespace sinsemi::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// dst (+)= lhs * rhs. Eigen switches to GEMV and reductions whose summation
// order follows pointer alignment when a result side is 1, which breaks
// bitwise reproducibility across runs; those shapes use a fixed-order loop.
template <class Dst, class L, class R>
void product(Dst&& dst, const L& lhs, const R& rhs, bool accumulate) {
    if (dst.rows() > 1 && dst.cols() > 1) {
        if (accumulate) {
            dst.noalias() += lhs * rhs;
        } else {
            dst.noalias() = lhs * rhs;
        }
        return;
    }
    using T = typename std::decay_t<Dst>::Scalar;
    for (Eigen::Index i = 0; i < dst.rows(); ++i) {
        for (Eigen::Index j = 0; j < dst.cols(); ++j) {
            T acc = T(0);
            for (Eigen::Index k = 0; k < lhs.cols(); ++k) acc += lhs(i, k) * rhs(k, j);
            dst(i, j) = accumulate ? dst(i, j) + acc : acc;
        }
    }
}

// Rows indexed by (ci, ky, kx), columns by output pixel.
template <class T>
void im2col(const Tensor<T>& in, int k, std::vector<T>& col) {
    const int p = k / 2;
    const int H = in.h, W = in.w, P = H * W;
    col.assign(static_cast<std::size_t>(in.c) * k * k * P, T(0));
    for (int ci = 0; ci < in.c; ++ci) {
        const T* src = in.plane(ci);
        for (int ky = 0; ky < k; ++ky) {
            const int dy = ky - p;
            const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            for (int kx = 0; kx < k; ++kx) {
                const int dx = kx - p;
                const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                T* dst = col.data() + (static_cast<std::size_t>(ci * k + ky) * k + kx) * P;
                for (int y = y0; y < y1; ++y) {
                    const T* s = src + (y + dy) * W + dx;
                    T* d = dst + y * W;
                    for (int x = x0; x < x1; ++x) d[x] = s[x];
                }
            }
        }
    }
}

template <class T>
void col2im_add(const std::vector<T>& col, int k, Tensor<T>& din) {
    const int p = k / 2;
    const int H = din.h, W = din.w, P = H * W;
    for (int ci = 0; ci < din.c; ++ci) {
        T* dst = din.plane(ci);
        for (int ky = 0; ky < k; ++ky) {
            const int dy = ky - p;
            const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            for (int kx = 0; kx < k; ++kx) {
                const int dx = kx - p;
                const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                const T* src = col.data() + (static_cast<std::size_t>(ci * k + ky) * k + kx) * P;
                for (int y = y0; y < y1; ++y) {
                    T* d = dst + (y + dy) * W + dx;
                    const T* s = src + y * W;
                    for (int x = x0; x < x1; ++x) d[x] += s[x];
                }
            }
        }
    }
}

template <class T>
void conv2d(const Tensor<T>& in, const T* weight, const T* bias, int cout, int k, Tensor<T>& out,
            std::vector<T>& scratch) {
    const int P = in.pixels();
    const int K = in.c * k * k;
    out.reshape(cout, in.h, in.w);
    const T* colp = in.v.data();
    if (k != 1) {
        im2col(in, k, scratch);
        colp = scratch.data();
    }
    MapMat<T> o(out.v.data(), cout, P);
    product(o, CMapMat<T>(weight, cout, K), CMapMat<T>(colp, K, P), false);
    if (bias) {
        for (int co = 0; co < cout; ++co) o.row(co).array() += bias[co];
    }
}

template <class T>
void conv2d_backward(const Tensor<T>& in, const T* weight, int cout, int k, const Tensor<T>& dout,
                     T* dweight, T* dbias, Tensor<T>* din, std::vector<T>& scratch) {
    const int P = in.pixels();
    const int K = in.c * k * k;
    CMapMat<T> g(dout.v.data(), cout, P);
    if (dbias) {
        for (int co = 0; co < cout; ++co) {
            T acc = T(0);
            for (int q = 0; q < P; ++q) acc += g(co, q);
            dbias[co] += acc;
        }
    }
    const T* colp = in.v.data();
    if (k != 1) {
        im2col(in, k, scratch);
        colp = scratch.data();
    }
    if (dweight) {
        product(MapMat<T>(dweight, cout, K), g, CMapMat<T>(colp, K, P).transpose(), true);
    }
    if (din) {
        if (k == 1) {
            product(MapMat<T>(din->v.data(), K, P), CMapMat<T>(weight, cout, K).transpose(), g, true);
        } else {
            std::vector<T> dcol(static_cast<std::size_t>(K) * P);
            product(MapMat<T>(dcol.data(), K, P), CMapMat<T>(weight, cout, K).transpose(), g, false);
            col2im_add(dcol, k, *din);
        }
    }
}

// y = W x + b
template <class T>
void linear(const T* x, int in, const T* weight, const T* bias, int out, T* y) {
    for (int o = 0; o < out; ++o) {
        T s = bias ? bias[o] : T(0);
        const T* wr = weight + static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) s += wr[i] * x[i];
        y[o] = s;
    }
}

template <class T>
void linear_backward(const T* x, int in, const T* weight, int out, const T* dy, T* dweight,
                     T* dbias, T* dx) {
    for (int o = 0; o < out; ++o) {
        if (dbias) dbias[o] += dy[o];
        const T* wr = weight + static_cast<std::size_t>(o) * in;
        T* dwr = dweight ? dweight + static_cast<std::size_t>(o) * in : nullptr;
        for (int i = 0; i < in; ++i) {
            if (dwr) dwr[i] += dy[o] * x[i];
            if (dx) dx[i] += dy[o] * wr[i];
        }
    }
}

// Gaussian error linear unit, tanh form.
template <class T>
inline T gelu(T x) {
    constexpr T a = T(0.7978845608028654);  // sqrt(2 / pi)
    constexpr T b = T(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(a * (x + b * x * x * x)));
}

template <class T>
inline T gelu_grad(T x) {
    constexpr T a = T(0.7978845608028654);
    constexpr T b = T(0.044715);
    const T th = std::tanh(a * (x + b * x * x * x));
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * a * (T(1) + T(3) * b * x * x);
}

// Vectorized through Eigen's packet tanh.
template <class T>
void gelu_inplace(std::vector<T>& v) {
    constexpr T a = T(0.7978845608028654);
    constexpr T b = T(0.044715);
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> x(v.data(), static_cast<Eigen::Index>(v.size()));
    x = T(0.5) * x * (T(1) + (a * (x + b * x.cube())).tanh());
}

// grad *= gelu'(pre), elementwise.
template <class T>
void gelu_backward(const std::vector<T>& pre, std::vector<T>& grad) {
    constexpr T a = T(0.7978845608028654);
    constexpr T b = T(0.044715);
    const auto n = static_cast<Eigen::Index>(grad.size());
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> x(pre.data(), n);
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> g(grad.data(), n);
    const Eigen::Array<T, Eigen::Dynamic, 1> th = (a * (x + b * x.cube())).tanh();
    g *= T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th.square()) * a * (T(1) + T(3) * b * x.square());
}

template <class T>
void relu_inplace(std::vector<T>& v) {
    for (auto& x : v) x = x > T(0) ? x : T(0);
}

template <class T>
void relu_backward(const std::vector<T>& post, std::vector<T>& grad) {
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(post[i] > T(0))) grad[i] = T(0);
}

// 2x2 average pooling, floor on odd sizes.
template <class T>
void avgpool2(const Tensor<T>& in, Tensor<T>& out) {
    out.reshape(in.c, in.h / 2, in.w / 2);
    for (int c = 0; c < in.c; ++c)
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x)
                out.at(c, y, x) = T(0.25) * (in.at(c, 2 * y, 2 * x) + in.at(c, 2 * y, 2 * x + 1) +
                                             in.at(c, 2 * y + 1, 2 * x) + in.at(c, 2 * y + 1, 2 * x + 1));
}

template <class T>
void avgpool2_backward(const Tensor<T>& dout, Tensor<T>& din) {
    for (int c = 0; c < dout.c; ++c)
        for (int y = 0; y < dout.h; ++y)
            for (int x = 0; x < dout.w; ++x) {
                const T g = T(0.25) * dout.at(c, y, x);
                din.at(c, 2 * y, 2 * x) += g;
                din.at(c, 2 * y, 2 * x + 1) += g;
                din.at(c, 2 * y + 1, 2 * x) += g;
                din.at(c, 2 * y + 1, 2 * x + 1) += g;
            }
}

// 2x2 max pooling, floor on odd sizes. `arg` records the winning input offset.
template <class T>
void maxpool2(const Tensor<T>& in, Tensor<T>& out, std::vector<int>& arg) {
    out.reshape(in.c, in.h / 2, in.w / 2);
    arg.assign(out.size(), 0);
    std::size_t o = 0;
    for (int c = 0; c < in.c; ++c)
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x, ++o) {
                int best = (c * in.h + 2 * y) * in.w + 2 * x;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int idx = (c * in.h + 2 * y + dy) * in.w + 2 * x + dx;
                        if (in.v[idx] > in.v[best]) best = idx;
                    }
                arg[o] = best;
                out.v[o] = in.v[best];
            }
}

template <class T>
void maxpool2_backward(const Tensor<T>& dout, const std::vector<int>& arg, Tensor<T>& din) {
    for (std::size_t o = 0; o < dout.size(); ++o) din.v[arg[o]] += dout.v[o];
}

// Nearest-neighbour resize to (h, w): source index = floor(dst * in / out).
template <class T>
void upsample_nearest(const Tensor<T>& in, int h, int w, Tensor<T>& out) {
    out.reshape(in.c, h, w);
    for (int c = 0; c < in.c; ++c)
        for (int y = 0; y < h; ++y) {
            const int sy = std::min(in.h - 1, y * in.h / h);
            for (int x = 0; x < w; ++x) out.at(c, y, x) = in.at(c, sy, std::min(in.w - 1, x * in.w / w));
        }
}

template <class T>
void upsample_nearest_backward(const Tensor<T>& dout, Tensor<T>& din) {
    for (int c = 0; c < dout.c; ++c)
        for (int y = 0; y < dout.h; ++y) {
            const int sy = std::min(din.h - 1, y * din.h / dout.h);
            for (int x = 0; x < dout.w; ++x)
                din.at(c, sy, std::min(din.w - 1, x * din.w / dout.w)) += dout.at(c, y, x);
        }
}

// Channel concatenation of two same-size tensors.
template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> out(a.c + b.c, a.h, a.w);
    std::copy(a.v.begin(), a.v.end(), out.v.begin());
    std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.v.size());
    return out;
}

// ---- channels-last kernels (pixel-major buffers, P x C) ----

// out[P x cout] = in[P x cin] * W^T + b, W laid out [cout][cin].
template <class T>
void pointwise(const T* in, int P, int cin, const T* weight, const T* bias, int cout, T* out) {
    MapMat<T> o(out, P, cout);
    product(o, CMapMat<T>(in, P, cin), CMapMat<T>(weight, cout, cin).transpose(), false);
    if (bias) o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias, cout);
}

template <class T>
void pointwise_backward(const T* in, int P, int cin, const T* weight, int cout, const T* dout,
                        T* dweight, T* dbias, T* din) {
    CMapMat<T> g(dout, P, cout);
    if (dbias) {
        for (int p = 0; p < P; ++p)
            for (int co = 0; co < cout; ++co) dbias[co] += g(p, co);
    }
    if (dweight) product(MapMat<T>(dweight, cout, cin), g.transpose(), CMapMat<T>(in, P, cin), true);
    if (din) product(MapMat<T>(din, P, cin), g, CMapMat<T>(weight, cout, cin), true);
}

namespace detail {

// One 512-bit register worth of channels. GCC vector types keep the
// accumulators below in registers, which plain arrays did not.
template <class T>
struct Lanes {
    typedef T vec __attribute__((vector_size(64)));
    static constexpr int n = 64 / sizeof(T);
    static vec load(const T* p) {
        vec v;
        std::memcpy(&v, p, sizeof v);
        return v;
    }
    static void store(T* p, vec v) { std::memcpy(p, &v, sizeof v); }
};

inline constexpr int kRun = 4;  // output pixels or taps per register block

// Copies an H x W x C buffer into a zero border of width p.
template <class T>
void pad_hwc(const T* in, int H, int W, int C, int p, std::vector<T>& out) {
    const int Wp = W + 2 * p;
    out.assign(static_cast<std::size_t>(H + 2 * p) * Wp * C, T(0));
    for (int y = 0; y < H; ++y) {
        std::copy(in + static_cast<std::size_t>(y) * W * C, in + static_cast<std::size_t>(y + 1) * W * C,
                  out.data() + (static_cast<std::size_t>(y + p) * Wp + p) * C);
    }
}

// out[y][x][c] += sum_{ky,kx} w[ky][kx][c] * src[y + ky][x + kx][c] for a
// source already padded to (H + k - 1) x (W + k - 1).
template <class T>
void correlate_padded(const T* src, int H, int W, int C, const T* w, int k, T* out) {
    using V = Lanes<T>;
    using vec = typename V::vec;
    constexpr int L = V::n, R = kRun;
    const int Wp = W + k - 1;
    const std::size_t rs = static_cast<std::size_t>(Wp) * C;
    for (int y = 0; y < H; ++y) {
        T* orow = out + static_cast<std::size_t>(y) * W * C;
        int c0 = 0;
        for (; c0 + L <= C; c0 += L) {
            int x = 0;
            for (; x + R <= W; x += R) {
                vec a0 = V::load(orow + (x + 0) * C + c0);
                vec a1 = V::load(orow + (x + 1) * C + c0);
                vec a2 = V::load(orow + (x + 2) * C + c0);
                vec a3 = V::load(orow + (x + 3) * C + c0);
                for (int ky = 0; ky < k; ++ky) {
                    const T* row = src + (y + ky) * rs + static_cast<std::size_t>(x) * C + c0;
                    const T* wr = w + static_cast<std::size_t>(ky) * k * C + c0;
                    vec i0 = V::load(row), i1 = V::load(row + C), i2 = V::load(row + 2 * C);
                    for (int kx = 0; kx < k; ++kx) {
                        const vec wv = V::load(wr + static_cast<std::size_t>(kx) * C);
                        const vec i3 = V::load(row + static_cast<std::size_t>(kx + 3) * C);
                        a0 += wv * i0;
                        a1 += wv * i1;
                        a2 += wv * i2;
                        a3 += wv * i3;
                        i0 = i1;
                        i1 = i2;
                        i2 = i3;
                    }
                }
                V::store(orow + (x + 0) * C + c0, a0);
                V::store(orow + (x + 1) * C + c0, a1);
                V::store(orow + (x + 2) * C + c0, a2);
                V::store(orow + (x + 3) * C + c0, a3);
            }
            for (; x < W; ++x) {
                vec acc = V::load(orow + x * C + c0);
                for (int ky = 0; ky < k; ++ky) {
                    const T* row = src + (y + ky) * rs + static_cast<std::size_t>(x) * C + c0;
                    const T* wr = w + static_cast<std::size_t>(ky) * k * C + c0;
                    for (int kx = 0; kx < k; ++kx)
                        acc += V::load(wr + static_cast<std::size_t>(kx) * C) *
                               V::load(row + static_cast<std::size_t>(kx) * C);
                }
                V::store(orow + x * C + c0, acc);
            }
        }
        for (; c0 < C; ++c0) {
            for (int x = 0; x < W; ++x) {
                T acc = orow[x * C + c0];
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx)
                        acc += w[(static_cast<std::size_t>(ky) * k + kx) * C + c0] *
                               src[(y + ky) * rs + static_cast<std::size_t>(x + kx) * C + c0];
                orow[x * C + c0] = acc;
            }
        }
    }
}

// dw[ky][kx][c] += sum_{y,x} g[y][x][c] * src[y + ky][x + kx][c], src padded.
template <class T>
void weight_grad_padded(const T* src, int H, int W, int C, const T* g, int k, T* dw) {
    using V = Lanes<T>;
    using vec = typename V::vec;
    constexpr int L = V::n, R = kRun;
    const int Wp = W + k - 1;
    const std::size_t rs = static_cast<std::size_t>(Wp) * C;
    for (int ky = 0; ky < k; ++ky) {
        int c0 = 0;
        for (; c0 + L <= C; c0 += L) {
            int kx0 = 0;
            for (; kx0 + R <= k; kx0 += R) {
                vec a0 = {}, a1 = {}, a2 = {}, a3 = {};
                for (int y = 0; y < H; ++y) {
                    const T* grow = g + static_cast<std::size_t>(y) * W * C + c0;
                    const T* irow = src + (y + ky) * rs + static_cast<std::size_t>(kx0) * C + c0;
                    vec i0 = V::load(irow), i1 = V::load(irow + C), i2 = V::load(irow + 2 * C);
                    for (int x = 0; x < W; ++x) {
                        const vec gv = V::load(grow + static_cast<std::size_t>(x) * C);
                        const vec i3 = V::load(irow + static_cast<std::size_t>(x + 3) * C);
                        a0 += gv * i0;
                        a1 += gv * i1;
                        a2 += gv * i2;
                        a3 += gv * i3;
                        i0 = i1;
                        i1 = i2;
                        i2 = i3;
                    }
                }
                T* d = dw + (static_cast<std::size_t>(ky) * k + kx0) * C + c0;
                V::store(d, V::load(d) + a0);
                V::store(d + C, V::load(d + C) + a1);
                V::store(d + 2 * C, V::load(d + 2 * C) + a2);
                V::store(d + 3 * C, V::load(d + 3 * C) + a3);
            }
            for (int kx = kx0; kx < k; ++kx) {
                vec acc = {};
                for (int y = 0; y < H; ++y) {
                    const T* grow = g + static_cast<std::size_t>(y) * W * C + c0;
                    const T* irow = src + (y + ky) * rs + static_cast<std::size_t>(kx) * C + c0;
                    for (int x = 0; x < W; ++x)
                        acc += V::load(grow + static_cast<std::size_t>(x) * C) *
                               V::load(irow + static_cast<std::size_t>(x) * C);
                }
                T* d = dw + (static_cast<std::size_t>(ky) * k + kx) * C + c0;
                V::store(d, V::load(d) + acc);
            }
        }
        for (; c0 < C; ++c0) {
            for (int kx = 0; kx < k; ++kx) {
                T acc = 0;
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        acc += g[(static_cast<std::size_t>(y) * W + x) * C + c0] *
                               src[(y + ky) * rs + static_cast<std::size_t>(x + kx) * C + c0];
                dw[(static_cast<std::size_t>(ky) * k + kx) * C + c0] += acc;
            }
        }
    }
}

}  // namespace detail

// Depthwise kxk, weight laid out [k][k][C], zero padding.
template <class T>
void depthwise_hwc(const T* in, int H, int W, int C, const T* weight, const T* bias, int k, T* out) {
    const std::size_t P = static_cast<std::size_t>(H) * W;
    for (std::size_t i = 0; i < P; ++i)
        for (int c = 0; c < C; ++c) out[i * C + c] = bias ? bias[c] : T(0);
    std::vector<T> padded;
    detail::pad_hwc(in, H, W, C, k / 2, padded);
    detail::correlate_padded(padded.data(), H, W, C, weight, k, out);
}

// Accumulates weight, bias and input gradients of depthwise_hwc.
template <class T>
void depthwise_hwc_backward(const T* in, int H, int W, int C, const T* weight, int k, const T* dout,
                            T* dweight, T* dbias, T* din) {
    const int p = k / 2;
    const std::size_t P = static_cast<std::size_t>(H) * W;
    if (dbias) {
        for (std::size_t i = 0; i < P; ++i)
            for (int c = 0; c < C; ++c) dbias[c] += dout[i * C + c];
    }
    std::vector<T> padded;
    if (din) {
        // Correlation of the padded upstream gradient with the flipped kernel.
        std::vector<T> flipped(static_cast<std::size_t>(k) * k * C);
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx)
                std::copy_n(weight + (static_cast<std::size_t>(ky) * k + kx) * C, C,
                            flipped.data() + (static_cast<std::size_t>(k - 1 - ky) * k + (k - 1 - kx)) * C);
        detail::pad_hwc(dout, H, W, C, p, padded);
        detail::correlate_padded(padded.data(), H, W, C, flipped.data(), k, din);
    }
    if (dweight) {
        detail::pad_hwc(in, H, W, C, p, padded);
        detail::weight_grad_padded(padded.data(), H, W, C, dout, k, dweight);
    }
}

}  // namespace sinsemi::nn
