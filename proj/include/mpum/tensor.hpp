#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mpum/error.hpp"
#include "mpum/rng.hpp"

namespace mpum {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) {
        if (e < 0) throw ShapeError("negative extent in shape");
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // allocated lazily, same length as values
    bool requires_grad = false;
};

// Shared handle to an n-dimensional array participating in a DiffGraph.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto d = std::make_shared<TensorData<T>>();
        int64_t n = shape_numel(shape);
        d->shape = std::move(shape);
        d->values.assign(static_cast<size_t>(n), T(0));
        d->requires_grad = requires_grad;
        return Tensor(std::move(d));
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.values().begin(), t.values().end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> vals, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(vals.size()))
            throw ShapeError("Tensor::from: value count does not match shape " + shape_str(shape));
        auto d = std::make_shared<TensorData<T>>();
        d->shape = std::move(shape);
        d->values = std::move(vals);
        d->requires_grad = requires_grad;
        return Tensor(std::move(d));
    }

    static Tensor scalar_of(T v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.values()) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    int64_t dim(size_t i) const { return d_->shape.at(i); }
    size_t rank() const { return d_->shape.size(); }
    int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }

    std::vector<T>& values() { return d_->values; }
    const std::vector<T>& values() const { return d_->values; }
    T* data() { return d_->values.data(); }
    const T* data() const { return d_->values.data(); }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<T>& grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
        return d_->grad;
    }
    const std::vector<T>& grad() const {
        const_cast<Tensor*>(this)->grad();
        return d_->grad;
    }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
    }
    // drops the buffer entirely so has_grad() reports "untouched"
    void clear_grad() { d_->grad.clear(); }

    T scalar() const {
        if (numel() != 1) throw ShapeError("Tensor::scalar: tensor has " + std::to_string(numel()) + " elements");
        return d_->values[0];
    }

    Tensor clone() const {
        auto d = std::make_shared<TensorData<T>>();
        d->shape = d_->shape;
        d->values = d_->values;
        d->requires_grad = d_->requires_grad;
        return Tensor(std::move(d));
    }

    bool same_data(const Tensor& o) const { return d_ == o.d_; }

private:
    explicit Tensor(std::shared_ptr<TensorData<T>> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData<T>> d_;
};

template <typename T>
inline void ensure_finite(const std::vector<T>& v, const char* op) {
    for (const T& x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value in result");
    }
}

// Recorded tape of operations. Nodes are appended in execution order, which
// is a topological order of the data-flow graph; backward() sweeps it once
// in reverse.
template <typename T>
class Graph {
public:
    struct Node {
        const char* op;
        std::function<void()> backward;
    };

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    void record(const char* op, std::function<void()> backward) {
        nodes_.push_back(Node{op, std::move(backward)});
    }

    size_t size() const { return nodes_.size(); }

    void backward(Tensor<T>& loss) {
        if (consumed_) throw Error("Graph::backward: tape already consumed; reset the graph first");
        if (loss.numel() != 1) throw ShapeError("Graph::backward: loss must be scalar");
        if (!loss.requires_grad())
            throw Error("Graph::backward: loss is not connected to any gradient-tracked input");
        loss.grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
        consumed_ = true;
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

private:
    std::vector<Node> nodes_;
    bool recording_ = true;
    bool consumed_ = false;
};

template <typename T>
class NoGradGuard {
public:
    explicit NoGradGuard(Graph<T>& g) : g_(g), prev_(g.recording()) { g_.set_recording(false); }
    ~NoGradGuard() { g_.set_recording(prev_); }

private:
    Graph<T>& g_;
    bool prev_;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Graph<T>& g, Tensor<T> a, Tensor<T> b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner extents disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    {
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.data();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
                T av = pa[i * k + kk];
                const T* brow = pb + kk * n;
                T* orow = po + i * n;
                for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
    }
    ensure_finite(out.values(), "matmul");
    if (g.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        g.record("matmul", [a, b, out, m, k, n]() mutable {
            const std::vector<T>& go = out.grad();
            if (a.requires_grad()) {
                std::vector<T>& ga = a.grad();
                const T* pb = b.data();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) {
                        T gv = go[i * n + j];
                        const T* brow = pb + j;  // column j
                        for (int64_t kk = 0; kk < k; ++kk) ga[i * k + kk] += gv * brow[kk * n];
                    }
            }
            if (b.requires_grad()) {
                std::vector<T>& gb = b.grad();
                const T* pa = a.data();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t kk = 0; kk < k; ++kk) {
                        T av = pa[i * k + kk];
                        const T* grow = go.data() + i * n;
                        T* gbrow = gb.data() + kk * n;
                        for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
            }
        });
    }
    return out;
}

namespace detail {

// Valid output range [o_lo, o_hi) along one axis for kernel offset kk:
// input index o*stride + kk - padding must land in [0, extent).
inline void conv_axis_range(int64_t extent, int64_t out_extent, int64_t stride, int64_t padding,
                            int64_t kk, int64_t& o_lo, int64_t& o_hi) {
    int64_t shift = kk - padding;
    // o*stride + shift >= 0  =>  o >= ceil(-shift / stride)
    int64_t lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
    // o*stride + shift <= extent-1  =>  o <= floor((extent-1-shift)/stride)
    int64_t hi = (extent - 1 - shift) >= 0 ? (extent - 1 - shift) / stride + 1 : 0;
    o_lo = std::min(std::max<int64_t>(lo, 0), out_extent);
    o_hi = std::min(hi, out_extent);
}

// Row-at-a-time kernels for the dominant 3x3x3 / stride 1 / pad 1 case. Each
// output row is touched once per (ci, kz, ky) and stays in L1; the x loops
// carry no reduction, so they vectorize without reassociation.

template <typename T>
void conv333_forward(const T* in, const T* w, T* o, int64_t B, int64_t Ci, int64_t Co, int64_t D, int64_t H,
                     int64_t W) {
    const int64_t ch = D * H * W;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Co; ++co) {
            T* och = o + (b * Co + co) * ch;
            const T* wco = w + co * Ci * 27;
            for (int64_t z = 0; z < D; ++z)
                for (int64_t y = 0; y < H; ++y) {
                    T* dst = och + (z * H + y) * W;
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        const T* ich = in + (b * Ci + ci) * ch;
                        const T* wk27 = wco + ci * 27;
                        for (int64_t kz = 0; kz < 3; ++kz) {
                            const int64_t iz = z + kz - 1;
                            if (iz < 0 || iz >= D) continue;
                            for (int64_t ky = 0; ky < 3; ++ky) {
                                const int64_t iy = y + ky - 1;
                                if (iy < 0 || iy >= H) continue;
                                const T* row = ich + (iz * H + iy) * W;
                                const T* wk = wk27 + (kz * 3 + ky) * 3;
                                const T w0 = wk[0], w1 = wk[1], w2 = wk[2];
                                if (W == 1) {
                                    dst[0] += w1 * row[0];
                                    continue;
                                }
                                dst[0] += w1 * row[0] + w2 * row[1];
                                for (int64_t x = 1; x < W - 1; ++x)
                                    dst[x] += w0 * row[x - 1] + w1 * row[x] + w2 * row[x + 1];
                                dst[W - 1] += w0 * row[W - 2] + w1 * row[W - 1];
                            }
                        }
                    }
                }
        }
}

template <typename T>
void conv333_input_grad(const T* go, const T* w, T* gi, int64_t B, int64_t Ci, int64_t Co, int64_t D, int64_t H,
                        int64_t W) {
    const int64_t ch = D * H * W;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t ci = 0; ci < Ci; ++ci) {
            T* gich = gi + (b * Ci + ci) * ch;
            for (int64_t z = 0; z < D; ++z)
                for (int64_t y = 0; y < H; ++y) {
                    T* dst = gich + (z * H + y) * W;
                    for (int64_t co = 0; co < Co; ++co) {
                        const T* goch = go + (b * Co + co) * ch;
                        const T* wk27 = w + (co * Ci + ci) * 27;
                        for (int64_t kz = 0; kz < 3; ++kz) {
                            const int64_t oz = z + 1 - kz;
                            if (oz < 0 || oz >= D) continue;
                            for (int64_t ky = 0; ky < 3; ++ky) {
                                const int64_t oy = y + 1 - ky;
                                if (oy < 0 || oy >= H) continue;
                                const T* row = goch + (oz * H + oy) * W;
                                const T* wk = wk27 + (kz * 3 + ky) * 3;
                                const T w0 = wk[0], w1 = wk[1], w2 = wk[2];
                                // in[x] feeds out[x + 1 - kx] with weight wk[kx]
                                if (W == 1) {
                                    dst[0] += w1 * row[0];
                                    continue;
                                }
                                dst[0] += w1 * row[0] + w0 * row[1];
                                for (int64_t x = 1; x < W - 1; ++x)
                                    dst[x] += w2 * row[x - 1] + w1 * row[x] + w0 * row[x + 1];
                                dst[W - 1] += w2 * row[W - 2] + w1 * row[W - 1];
                            }
                        }
                    }
                }
        }
}

template <typename T>
void conv333_kernel_grad(const T* go, const T* in, T* gw, int64_t B, int64_t Ci, int64_t Co, int64_t D, int64_t H,
                         int64_t W) {
    const int64_t ch = D * H * W;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Co; ++co) {
            const T* goch = go + (b * Co + co) * ch;
            for (int64_t ci = 0; ci < Ci; ++ci) {
                const T* ich = in + (b * Ci + ci) * ch;
                T* wk27 = gw + (co * Ci + ci) * 27;
                for (int64_t kz = 0; kz < 3; ++kz) {
                    const int64_t z_lo = std::max<int64_t>(0, 1 - kz);
                    const int64_t z_hi = std::min(D, D + 1 - kz);
                    for (int64_t ky = 0; ky < 3; ++ky) {
                        const int64_t y_lo = std::max<int64_t>(0, 1 - ky);
                        const int64_t y_hi = std::min(H, H + 1 - ky);
                        // two interleaved partials per tap break the serial
                        // dependence of the reductions
                        T a0 = 0, a1 = 0, a2 = 0, b0 = 0, b1 = 0, b2 = 0;
                        for (int64_t z = z_lo; z < z_hi; ++z) {
                            const int64_t iz = z + kz - 1;
                            for (int64_t y = y_lo; y < y_hi; ++y) {
                                const int64_t iy = y + ky - 1;
                                const T* row = ich + (iz * H + iy) * W;
                                const T* grow = goch + (z * H + y) * W;
                                if (W == 1) {
                                    a1 += grow[0] * row[0];
                                    continue;
                                }
                                a1 += grow[0] * row[0];
                                a2 += grow[0] * row[1];
                                int64_t x = 1;
                                for (; x + 1 < W - 1; x += 2) {
                                    const T g0 = grow[x], g1 = grow[x + 1];
                                    a0 += g0 * row[x - 1];
                                    a1 += g0 * row[x];
                                    a2 += g0 * row[x + 1];
                                    b0 += g1 * row[x];
                                    b1 += g1 * row[x + 1];
                                    b2 += g1 * row[x + 2];
                                }
                                for (; x < W - 1; ++x) {
                                    const T g = grow[x];
                                    a0 += g * row[x - 1];
                                    a1 += g * row[x];
                                    a2 += g * row[x + 1];
                                }
                                a0 += grow[W - 1] * row[W - 2];
                                a1 += grow[W - 1] * row[W - 1];
                            }
                        }
                        wk27[(kz * 3 + ky) * 3 + 0] += a0 + b0;
                        wk27[(kz * 3 + ky) * 3 + 1] += a1 + b1;
                        wk27[(kz * 3 + ky) * 3 + 2] += a2 + b2;
                    }
                }
            }
        }
}

}  // namespace detail

// 3-D cross-correlation with zero padding. Kernel spatial size must be 3
// (or 1 for fusion layers). Gradient flows into both the input and the
// kernels, so runtime-generated kernels are trainable.
template <typename T>
Tensor<T> conv3d(Graph<T>& g, Tensor<T> input, Tensor<T> kernels, int64_t stride,
                 int64_t padding) {
    if (input.rank() != 5) throw ShapeError("conv3d: input must be BxCxDxHxW, got " + shape_str(input.shape()));
    if (kernels.rank() != 5) throw ShapeError("conv3d: kernels must be CoxCixKxKxK, got " + shape_str(kernels.shape()));
    if (stride < 1) throw ShapeError("conv3d: stride must be positive");
    if (padding < 0) throw ShapeError("conv3d: padding must be non-negative");
    const int64_t B = input.dim(0), Ci = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const int64_t Co = kernels.dim(0), K = kernels.dim(2);
    if (kernels.dim(3) != K || kernels.dim(4) != K || (K != 3 && K != 1))
        throw ShapeError("conv3d: only 3x3x3 and 1x1x1 kernels are supported, got " + shape_str(kernels.shape()));
    if (kernels.dim(1) != Ci)
        throw ShapeError("conv3d: kernel input channels " + std::to_string(kernels.dim(1)) +
                         " do not match input channels " + std::to_string(Ci));
    const int64_t Do = (D + 2 * padding - K) / stride + 1;
    const int64_t Ho = (H + 2 * padding - K) / stride + 1;
    const int64_t Wo = (W + 2 * padding - K) / stride + 1;
    if (Do < 1 || Ho < 1 || Wo < 1) throw ShapeError("conv3d: output would be empty");

    Tensor<T> out = Tensor<T>::zeros({B, Co, Do, Ho, Wo});
    const T* in = input.data();
    const T* w = kernels.data();
    T* o = out.data();
    const int64_t in_ch = D * H * W, out_ch = Do * Ho * Wo;

    if (K == 3 && stride == 1 && padding == 1) {
        detail::conv333_forward(in, w, o, B, Ci, Co, D, H, W);
    } else {
        for (int64_t b = 0; b < B; ++b)
            for (int64_t co = 0; co < Co; ++co) {
                T* och = o + (b * Co + co) * out_ch;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    const T* ich = in + (b * Ci + ci) * in_ch;
                    for (int64_t kz = 0; kz < K; ++kz) {
                        int64_t z0, z1;
                        detail::conv_axis_range(D, Do, stride, padding, kz, z0, z1);
                        for (int64_t ky = 0; ky < K; ++ky) {
                            int64_t y0, y1;
                            detail::conv_axis_range(H, Ho, stride, padding, ky, y0, y1);
                            for (int64_t kx = 0; kx < K; ++kx) {
                                int64_t x0, x1;
                                detail::conv_axis_range(W, Wo, stride, padding, kx, x0, x1);
                                if (x0 >= x1) continue;
                                const T wv = w[(((co * Ci + ci) * K + kz) * K + ky) * K + kx];
                                for (int64_t z = z0; z < z1; ++z) {
                                    const int64_t iz = z * stride + kz - padding;
                                    for (int64_t y = y0; y < y1; ++y) {
                                        const int64_t iy = y * stride + ky - padding;
                                        const T* src = ich + (iz * H + iy) * W + (x0 * stride + kx - padding);
                                        T* dst = och + (z * Ho + y) * Wo + x0;
                                        const int64_t len = x1 - x0;
                                        if (stride == 1) {
                                            for (int64_t x = 0; x < len; ++x) dst[x] += wv * src[x];
                                        } else {
                                            for (int64_t x = 0; x < len; ++x) dst[x] += wv * src[x * stride];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
    }
    ensure_finite(out.values(), "conv3d");

    if (g.recording() && (input.requires_grad() || kernels.requires_grad())) {
        out.set_requires_grad(true);
        g.record("conv3d", [input, kernels, out, stride, padding, B, Ci, Co, D, H, W, Do, Ho, Wo, K,
                            in_ch, out_ch]() mutable {
            const T* go = out.grad().data();
            const bool fast = (K == 3 && stride == 1 && padding == 1);
            if (input.requires_grad() && fast) {
                detail::conv333_input_grad(go, kernels.data(), input.grad().data(), B, Ci, Co, D, H, W);
            } else if (input.requires_grad()) {
                T* gi = input.grad().data();
                const T* w = kernels.data();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t co = 0; co < Co; ++co) {
                        const T* goch = go + (b * Co + co) * out_ch;
                        for (int64_t ci = 0; ci < Ci; ++ci) {
                            T* gich = gi + (b * Ci + ci) * in_ch;
                            for (int64_t kz = 0; kz < K; ++kz) {
                                int64_t z0, z1;
                                detail::conv_axis_range(D, Do, stride, padding, kz, z0, z1);
                                for (int64_t ky = 0; ky < K; ++ky) {
                                    int64_t y0, y1;
                                    detail::conv_axis_range(H, Ho, stride, padding, ky, y0, y1);
                                    for (int64_t kx = 0; kx < K; ++kx) {
                                        int64_t x0, x1;
                                        detail::conv_axis_range(W, Wo, stride, padding, kx, x0, x1);
                                        if (x0 >= x1) continue;
                                        const T wv = w[(((co * Ci + ci) * K + kz) * K + ky) * K + kx];
                                        for (int64_t z = z0; z < z1; ++z) {
                                            const int64_t iz = z * stride + kz - padding;
                                            for (int64_t y = y0; y < y1; ++y) {
                                                const int64_t iy = y * stride + ky - padding;
                                                T* dst = gich + (iz * H + iy) * W + (x0 * stride + kx - padding);
                                                const T* src = goch + (z * Ho + y) * Wo + x0;
                                                const int64_t len = x1 - x0;
                                                if (stride == 1) {
                                                    for (int64_t x = 0; x < len; ++x) dst[x] += wv * src[x];
                                                } else {
                                                    for (int64_t x = 0; x < len; ++x) dst[x * stride] += wv * src[x];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
            }
            if (kernels.requires_grad() && fast) {
                detail::conv333_kernel_grad(go, input.data(), kernels.grad().data(), B, Ci, Co, D, H, W);
            } else if (kernels.requires_grad()) {
                T* gw = kernels.grad().data();
                const T* in = input.data();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t co = 0; co < Co; ++co) {
                        const T* goch = go + (b * Co + co) * out_ch;
                        for (int64_t ci = 0; ci < Ci; ++ci) {
                            const T* ich = in + (b * Ci + ci) * in_ch;
                            for (int64_t kz = 0; kz < K; ++kz) {
                                int64_t z0, z1;
                                detail::conv_axis_range(D, Do, stride, padding, kz, z0, z1);
                                for (int64_t ky = 0; ky < K; ++ky) {
                                    int64_t y0, y1;
                                    detail::conv_axis_range(H, Ho, stride, padding, ky, y0, y1);
                                    for (int64_t kx = 0; kx < K; ++kx) {
                                        int64_t x0, x1;
                                        detail::conv_axis_range(W, Wo, stride, padding, kx, x0, x1);
                                        if (x0 >= x1) continue;
                                        T acc = T(0);
                                        for (int64_t z = z0; z < z1; ++z) {
                                            const int64_t iz = z * stride + kz - padding;
                                            for (int64_t y = y0; y < y1; ++y) {
                                                const int64_t iy = y * stride + ky - padding;
                                                const T* src = ich + (iz * H + iy) * W + (x0 * stride + kx - padding);
                                                const T* gsrc = goch + (z * Ho + y) * Wo + x0;
                                                const int64_t len = x1 - x0;
                                                if (stride == 1) {
                                                    for (int64_t x = 0; x < len; ++x) acc += gsrc[x] * src[x];
                                                } else {
                                                    for (int64_t x = 0; x < len; ++x) acc += gsrc[x] * src[x * stride];
                                                }
                                            }
                                        }
                                        gw[(((co * Ci + ci) * K + kz) * K + ky) * K + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
            }
        });
    }
    return out;
}

// Adds b[c] to every voxel of channel c.
template <typename T>
Tensor<T> bias_add_channel(Graph<T>& g, Tensor<T> x, Tensor<T> b) {
    if (x.rank() < 2) throw ShapeError("bias_add_channel: input must have a channel axis");
    if (b.rank() != 1 || b.dim(0) != x.dim(1))
        throw ShapeError("bias_add_channel: bias shape " + shape_str(b.shape()) + " does not match channels of " +
                         shape_str(x.shape()));
    const int64_t B = x.dim(0), C = x.dim(1);
    int64_t inner = 1;
    for (size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
    Tensor<T> out = Tensor<T>::from(x.shape(), x.values());
    T* o = out.data();
    const T* pb = b.data();
    for (int64_t bb = 0; bb < B; ++bb)
        for (int64_t c = 0; c < C; ++c) {
            T* ch = o + (bb * C + c) * inner;
            const T bv = pb[c];
            for (int64_t i = 0; i < inner; ++i) ch[i] += bv;
        }
    ensure_finite(out.values(), "bias_add_channel");
    if (g.recording() && (x.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        g.record("bias_add_channel", [x, b, out, B, C, inner]() mutable {
            const std::vector<T>& go = out.grad();
            if (x.requires_grad()) {
                std::vector<T>& gx = x.grad();
                for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
            }
            if (b.requires_grad()) {
                std::vector<T>& gb = b.grad();
                for (int64_t bb = 0; bb < B; ++bb)
                    for (int64_t c = 0; c < C; ++c) {
                        const T* ch = go.data() + (bb * C + c) * inner;
                        T acc = T(0);
                        for (int64_t i = 0; i < inner; ++i) acc += ch[i];
                        gb[c] += acc;
                    }
            }
        });
    }
    return out;
}

enum class Unary { Relu, LeakyRelu, Sigmoid, Exp, Log, Scale, AddC };

// Elementwise map. Scale and AddC take the constant `c`; LeakyRelu slope is
// fixed at 0.01.
template <typename T>
Tensor<T> pointwise(Graph<T>& g, Tensor<T> x, Unary kind, T c = T(0)) {
    constexpr T kLeakySlope = T(0.01);
    if (kind == Unary::Log) {
        for (const T& v : x.values())
            if (!(v > T(0))) throw NumericError("pointwise(log): input must be strictly positive");
    }
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const int64_t n = x.numel();
    switch (kind) {
        case Unary::Relu:
            for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
            break;
        case Unary::LeakyRelu:
            for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : kLeakySlope * px[i];
            break;
        case Unary::Sigmoid:
            for (int64_t i = 0; i < n; ++i) po[i] = T(1) / (T(1) + std::exp(-px[i]));
            break;
        case Unary::Exp:
            for (int64_t i = 0; i < n; ++i) po[i] = std::exp(px[i]);
            break;
        case Unary::Log:
            for (int64_t i = 0; i < n; ++i) po[i] = std::log(px[i]);
            break;
        case Unary::Scale:
            for (int64_t i = 0; i < n; ++i) po[i] = c * px[i];
            break;
        case Unary::AddC:
            for (int64_t i = 0; i < n; ++i) po[i] = c + px[i];
            break;
    }
    ensure_finite(out.values(), "pointwise");
    if (g.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        g.record("pointwise", [x, out, kind, c, n]() mutable {
            const std::vector<T>& go = out.grad();
            std::vector<T>& gx = x.grad();
            const T* px = x.data();
            const T* po = out.data();
            switch (kind) {
                case Unary::Relu:
                    for (int64_t i = 0; i < n; ++i) gx[i] += px[i] > T(0) ? go[i] : T(0);
                    break;
                case Unary::LeakyRelu:
                    for (int64_t i = 0; i < n; ++i) gx[i] += px[i] > T(0) ? go[i] : kLeakySlope * go[i];
                    break;
                case Unary::Sigmoid:
                    for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * po[i] * (T(1) - po[i]);
                    break;
                case Unary::Exp:
                    for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * po[i];
                    break;
                case Unary::Log:
                    for (int64_t i = 0; i < n; ++i) gx[i] += go[i] / px[i];
                    break;
                case Unary::Scale:
                    for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * c;
                    break;
                case Unary::AddC:
                    for (int64_t i = 0; i < n; ++i) gx[i] += go[i];
                    break;
            }
        });
    }
    return out;
}

enum class Binary { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> binary_op(Graph<T>& g, Tensor<T> a, Tensor<T> b, Binary kind) {
    if (a.shape() != b.shape())
        throw ShapeError("binary op: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const int64_t n = a.numel();
    switch (kind) {
        case Binary::Add:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
            break;
        case Binary::Sub:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
            break;
        case Binary::Mul:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
            break;
        case Binary::Div:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
            break;
    }
    ensure_finite(out.values(), "binary op");
    if (g.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        g.record("binary", [a, b, out, kind, n]() mutable {
            const std::vector<T>& go = out.grad();
            const T* pa = a.data();
            const T* pb = b.data();
            if (a.requires_grad()) {
                std::vector<T>& ga = a.grad();
                switch (kind) {
                    case Binary::Add:
                    case Binary::Sub:
                        for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
                        break;
                    case Binary::Mul:
                        for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * pb[i];
                        break;
                    case Binary::Div:
                        for (int64_t i = 0; i < n; ++i) ga[i] += go[i] / pb[i];
                        break;
                }
            }
            if (b.requires_grad()) {
                std::vector<T>& gb = b.grad();
                switch (kind) {
                    case Binary::Add:
                        for (int64_t i = 0; i < n; ++i) gb[i] += go[i];
                        break;
                    case Binary::Sub:
                        for (int64_t i = 0; i < n; ++i) gb[i] -= go[i];
                        break;
                    case Binary::Mul:
                        for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * pa[i];
                        break;
                    case Binary::Div:
                        for (int64_t i = 0; i < n; ++i) gb[i] -= go[i] * pa[i] / (pb[i] * pb[i]);
                        break;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(Graph<T>& g, Tensor<T> a, Tensor<T> b) { return binary_op(g, a, b, Binary::Add); }
template <typename T>
Tensor<T> sub(Graph<T>& g, Tensor<T> a, Tensor<T> b) { return binary_op(g, a, b, Binary::Sub); }
template <typename T>
Tensor<T> mul(Graph<T>& g, Tensor<T> a, Tensor<T> b) { return binary_op(g, a, b, Binary::Mul); }
template <typename T>
Tensor<T> div(Graph<T>& g, Tensor<T> a, Tensor<T> b) { return binary_op(g, a, b, Binary::Div); }

// m[r][c] + v[c], broadcast over rows.
template <typename T>
Tensor<T> add_rowvec(Graph<T>& g, Tensor<T> m, Tensor<T> v) {
    if (m.rank() != 2 || v.rank() != 1 || v.dim(0) != m.dim(1))
        throw ShapeError("add_rowvec: incompatible shapes " + shape_str(m.shape()) + " and " + shape_str(v.shape()));
    const int64_t R = m.dim(0), C = m.dim(1);
    Tensor<T> out = Tensor<T>::from(m.shape(), m.values());
    T* po = out.data();
    const T* pv = v.data();
    for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) po[r * C + c] += pv[c];
    ensure_finite(out.values(), "add_rowvec");
    if (g.recording() && (m.requires_grad() || v.requires_grad())) {
        out.set_requires_grad(true);
        g.record("add_rowvec", [m, v, out, R, C]() mutable {
            const std::vector<T>& go = out.grad();
            if (m.requires_grad()) {
                std::vector<T>& gm = m.grad();
                for (size_t i = 0; i < gm.size(); ++i) gm[i] += go[i];
            }
            if (v.requires_grad()) {
                std::vector<T>& gv = v.grad();
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t c = 0; c < C; ++c) gv[c] += go[r * C + c];
            }
        });
    }
    return out;
}

// Concatenation along the channel axis (axis 1) of BxCxDxHxW tensors.
template <typename T>
Tensor<T> concat_channels(Graph<T>& g, Tensor<T> a, Tensor<T> b) {
    if (a.rank() != b.rank() || a.rank() < 2)
        throw ShapeError("concat_channels: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    for (size_t i = 0; i < a.rank(); ++i)
        if (i != 1 && a.dim(i) != b.dim(i))
            throw ShapeError("concat_channels: non-channel extents disagree: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    int64_t inner = 1;
    for (size_t i = 2; i < a.rank(); ++i) inner *= a.dim(i);
    Shape out_shape = a.shape();
    out_shape[1] = Ca + Cb;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    T* po = out.data();
    const T* pa = a.data();
    const T* pb = b.data();
    for (int64_t bb = 0; bb < B; ++bb) {
        std::copy(pa + bb * Ca * inner, pa + (bb + 1) * Ca * inner, po + bb * (Ca + Cb) * inner);
        std::copy(pb + bb * Cb * inner, pb + (bb + 1) * Cb * inner, po + (bb * (Ca + Cb) + Ca) * inner);
    }
    if (g.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        g.record("concat_channels", [a, b, out, B, Ca, Cb, inner]() mutable {
            const std::vector<T>& go = out.grad();
            if (a.requires_grad()) {
                std::vector<T>& ga = a.grad();
                for (int64_t bb = 0; bb < B; ++bb) {
                    const T* src = go.data() + bb * (Ca + Cb) * inner;
                    T* dst = ga.data() + bb * Ca * inner;
                    for (int64_t i = 0; i < Ca * inner; ++i) dst[i] += src[i];
                }
            }
            if (b.requires_grad()) {
                std::vector<T>& gb = b.grad();
                for (int64_t bb = 0; bb < B; ++bb) {
                    const T* src = go.data() + (bb * (Ca + Cb) + Ca) * inner;
                    T* dst = gb.data() + bb * Cb * inner;
                    for (int64_t i = 0; i < Cb * inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

namespace detail {

// align-corners=false source coordinate for a given scale: the centers of
// output voxel o and input voxel i sit at (o+0.5)/scale and i+0.5.
struct LinearTap {
    int64_t i0, i1;
    double w1;  // weight of i1; i0 gets 1-w1
};

inline LinearTap linear_tap(int64_t o, double scale, int64_t extent) {
    double src = (static_cast<double>(o) + 0.5) / scale - 0.5;
    double fl = std::floor(src);
    int64_t i0 = static_cast<int64_t>(fl);
    double w1 = src - fl;
    int64_t i1 = i0 + 1;
    if (i0 < 0) { i0 = 0; }
    if (i1 > extent - 1) { i1 = extent - 1; }
    if (i0 > extent - 1) { i0 = extent - 1; }
    return {i0, i1, w1};
}

}  // namespace detail

// Doubles every spatial extent of a BxCxDxHxW tensor by trilinear
// interpolation (align-corners=false).
template <typename T>
Tensor<T> upsample_trilinear2(Graph<T>& g, Tensor<T> x) {
    if (x.rank() != 5) throw ShapeError("upsample_trilinear2: input must be BxCxDxHxW");
    const int64_t B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t Do = 2 * D, Ho = 2 * H, Wo = 2 * W;
    Tensor<T> out = Tensor<T>::zeros({B, C, Do, Ho, Wo});

    std::vector<detail::LinearTap> tz(Do), ty(Ho), tx(Wo);
    for (int64_t i = 0; i < Do; ++i) tz[i] = detail::linear_tap(i, 2.0, D);
    for (int64_t i = 0; i < Ho; ++i) ty[i] = detail::linear_tap(i, 2.0, H);
    for (int64_t i = 0; i < Wo; ++i) tx[i] = detail::linear_tap(i, 2.0, W);

    const T* in = x.data();
    T* o = out.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* src = in + bc * D * H * W;
        T* dst = o + bc * Do * Ho * Wo;
        for (int64_t z = 0; z < Do; ++z)
            for (int64_t y = 0; y < Ho; ++y)
                for (int64_t xx = 0; xx < Wo; ++xx) {
                    const auto& az = tz[z];
                    const auto& ay = ty[y];
                    const auto& ax = tx[xx];
                    T acc = T(0);
                    for (int iz = 0; iz < 2; ++iz) {
                        const double wz = iz ? az.w1 : 1.0 - az.w1;
                        const int64_t zz = iz ? az.i1 : az.i0;
                        for (int iy = 0; iy < 2; ++iy) {
                            const double wy = iy ? ay.w1 : 1.0 - ay.w1;
                            const int64_t yy = iy ? ay.i1 : ay.i0;
                            const T* row = src + (zz * H + yy) * W;
                            const double wzy = wz * wy;
                            acc += static_cast<T>(wzy * (1.0 - ax.w1)) * row[ax.i0] +
                                   static_cast<T>(wzy * ax.w1) * row[ax.i1];
                        }
                    }
                    dst[(z * Ho + y) * Wo + xx] = acc;
                }
    }
    ensure_finite(out.values(), "upsample_trilinear2");
    if (g.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        g.record("upsample_trilinear2", [x, out, B, C, D, H, W, Do, Ho, Wo, tz, ty, tx]() mutable {
            const T* go = out.grad().data();
            T* gx = x.grad().data();
            for (int64_t bc = 0; bc < B * C; ++bc) {
                T* dst = gx + bc * D * H * W;
                const T* src = go + bc * Do * Ho * Wo;
                for (int64_t z = 0; z < Do; ++z)
                    for (int64_t y = 0; y < Ho; ++y)
                        for (int64_t xx = 0; xx < Wo; ++xx) {
                            const auto& az = tz[z];
                            const auto& ay = ty[y];
                            const auto& ax = tx[xx];
                            const T gv = src[(z * Ho + y) * Wo + xx];
                            for (int iz = 0; iz < 2; ++iz) {
                                const double wz = iz ? az.w1 : 1.0 - az.w1;
                                const int64_t zz = iz ? az.i1 : az.i0;
                                for (int iy = 0; iy < 2; ++iy) {
                                    const double wy = iy ? ay.w1 : 1.0 - ay.w1;
                                    const int64_t yy = iy ? ay.i1 : ay.i0;
                                    T* row = dst + (zz * H + yy) * W;
                                    const double wzy = wz * wy;
                                    row[ax.i0] += static_cast<T>(wzy * (1.0 - ax.w1)) * gv;
                                    row[ax.i1] += static_cast<T>(wzy * ax.w1) * gv;
                                }
                            }
                        }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(Graph<T>& g, Tensor<T> x) {
    T acc = T(0);
    for (const T& v : x.values()) acc += v;
    Tensor<T> out = Tensor<T>::scalar_of(acc);
    ensure_finite(out.values(), "sum_all");
    if (g.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        g.record("sum_all", [x, out]() mutable {
            const T gv = out.grad()[0];
            std::vector<T>& gx = x.grad();
            for (auto& v : gx) v += gv;
        });
    }
    return out;
}

// Per-channel sum over batch and spatial axes: BxCx... -> [C].
template <typename T>
Tensor<T> sum_per_channel(Graph<T>& g, Tensor<T> x) {
    if (x.rank() < 2) throw ShapeError("sum_per_channel: input must have a channel axis");
    const int64_t B = x.dim(0), C = x.dim(1);
    int64_t inner = 1;
    for (size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
    Tensor<T> out = Tensor<T>::zeros({C});
    const T* px = x.data();
    T* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T* ch = px + (b * C + c) * inner;
            T acc = T(0);
            for (int64_t i = 0; i < inner; ++i) acc += ch[i];
            po[c] += acc;
        }
    ensure_finite(out.values(), "sum_per_channel");
    if (g.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        g.record("sum_per_channel", [x, out, B, C, inner]() mutable {
            const std::vector<T>& go = out.grad();
            T* gx = x.grad().data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    T* ch = gx + (b * C + c) * inner;
                    const T gv = go[c];
                    for (int64_t i = 0; i < inner; ++i) ch[i] += gv;
                }
        });
    }
    return out;
}

// v[begin:end] of a rank-1 tensor.
template <typename T>
Tensor<T> slice1d(Graph<T>& g, Tensor<T> v, int64_t begin, int64_t end) {
    if (v.rank() != 1) throw ShapeError("slice1d: expected rank-1 tensor");
    if (begin < 0 || end > v.dim(0) || begin > end) throw ShapeError("slice1d: range out of bounds");
    Tensor<T> out = Tensor<T>::zeros({end - begin});
    std::copy(v.data() + begin, v.data() + end, out.data());
    if (g.recording() && v.requires_grad()) {
        out.set_requires_grad(true);
        g.record("slice1d", [v, out, begin]() mutable {
            const std::vector<T>& go = out.grad();
            std::vector<T>& gv = v.grad();
            for (size_t i = 0; i < go.size(); ++i) gv[static_cast<size_t>(begin) + i] += go[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(Graph<T>& g, Tensor<T> x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: element count mismatch: " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
    Tensor<T> out = Tensor<T>::from(std::move(new_shape), x.values());
    if (g.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        g.record("reshape", [x, out]() mutable {
            const std::vector<T>& go = out.grad();
            std::vector<T>& gx = x.grad();
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

// Softmax over the channel axis of BxKx(spatial...) tensors, per voxel.
template <typename T>
Tensor<T> softmax_channel(Graph<T>& g, Tensor<T> x) {
    if (x.rank() < 2) throw ShapeError("softmax_channel: input must have a channel axis");
    const int64_t B = x.dim(0), K = x.dim(1);
    int64_t inner = 1;
    for (size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < inner; ++i) {
            const T* col = px + b * K * inner + i;
            T* ocol = po + b * K * inner + i;
            T m = col[0];
            for (int64_t k = 1; k < K; ++k) m = std::max(m, col[k * inner]);
            T z = T(0);
            for (int64_t k = 0; k < K; ++k) {
                T e = std::exp(col[k * inner] - m);
                ocol[k * inner] = e;
                z += e;
            }
            const T invz = T(1) / z;
            for (int64_t k = 0; k < K; ++k) ocol[k * inner] *= invz;
        }
    ensure_finite(out.values(), "softmax_channel");
    if (g.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        g.record("softmax_channel", [x, out, B, K, inner]() mutable {
            const T* go = out.grad().data();
            const T* po = out.data();
            T* gx = x.grad().data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < inner; ++i) {
                    const int64_t base = b * K * inner + i;
                    T dot = T(0);
                    for (int64_t k = 0; k < K; ++k) dot += go[base + k * inner] * po[base + k * inner];
                    for (int64_t k = 0; k < K; ++k)
                        gx[base + k * inner] += po[base + k * inner] * (go[base + k * inner] - dot);
                }
        });
    }
    return out;
}

// Mean voxelwise cross-entropy of logits BxKx(spatial...) against integer
// labels in [0, K). Fused softmax + NLL with the analytic backward rule.
template <typename T>
Tensor<T> softmax_cross_entropy(Graph<T>& g, Tensor<T> logits, const std::vector<int32_t>& labels) {
    if (logits.rank() < 2) throw ShapeError("softmax_cross_entropy: logits must have a channel axis");
    const int64_t B = logits.dim(0), K = logits.dim(1);
    int64_t inner = 1;
    for (size_t i = 2; i < logits.rank(); ++i) inner *= logits.dim(i);
    if (static_cast<int64_t>(labels.size()) != B * inner)
        throw ShapeError("softmax_cross_entropy: label count " + std::to_string(labels.size()) +
                         " does not match logits " + shape_str(logits.shape()));
    const int64_t N = B * inner;
    const T* px = logits.data();
    double total = 0.0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < inner; ++i) {
            const int32_t lab = labels[static_cast<size_t>(b * inner + i)];
            if (lab < 0 || lab >= K)
                throw DataError("softmax_cross_entropy: label " + std::to_string(lab) + " out of range [0," +
                                std::to_string(K) + ")");
            const T* col = px + b * K * inner + i;
            T m = col[0];
            for (int64_t k = 1; k < K; ++k) m = std::max(m, col[k * inner]);
            T z = T(0);
            for (int64_t k = 0; k < K; ++k) z += std::exp(col[k * inner] - m);
            total += static_cast<double>(m + std::log(z) - col[lab * inner]);
        }
    Tensor<T> out = Tensor<T>::scalar_of(static_cast<T>(total / static_cast<double>(N)));
    ensure_finite(out.values(), "softmax_cross_entropy");
    if (g.recording() && logits.requires_grad()) {
        out.set_requires_grad(true);
        g.record("softmax_cross_entropy", [logits, out, labels, B, K, inner, N]() mutable {
            const T gv = out.grad()[0];
            const T* px = logits.data();
            T* gx = logits.grad().data();
            const T scale = gv / static_cast<T>(N);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < inner; ++i) {
                    const int32_t lab = labels[static_cast<size_t>(b * inner + i)];
                    const T* col = px + b * K * inner + i;
                    T* gcol = gx + b * K * inner + i;
                    T m = col[0];
                    for (int64_t k = 1; k < K; ++k) m = std::max(m, col[k * inner]);
                    T z = T(0);
                    for (int64_t k = 0; k < K; ++k) z += std::exp(col[k * inner] - m);
                    const T invz = T(1) / z;
                    for (int64_t k = 0; k < K; ++k) {
                        T p = std::exp(col[k * inner] - m) * invz;
                        gcol[k * inner] += scale * (p - (k == lab ? T(1) : T(0)));
                    }
                }
        });
    }
    return out;
}

}  // namespace mpum
