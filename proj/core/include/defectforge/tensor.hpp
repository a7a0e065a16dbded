#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "defectforge/errors.hpp"

namespace df {

// Reverse-mode differentiable tensor. Nodes own their values and (lazily)
// their gradient; each op records a backprop closure over its parents.
// Scalar type T is float for training, double for gradient verification.
template <class T>
struct Tensor : std::enable_shared_from_this<Tensor<T>> {
    std::vector<int> shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;  // leaf wants accumulated gradients
    bool needs_grad = false;     // reachable from a requires_grad leaf

    std::vector<std::shared_ptr<Tensor<T>>> parents;
    std::function<void()> backprop;

    std::size_t numel() const { return values.size(); }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }
    void zero_grad() { grad.assign(values.size(), T(0)); }
};

template <class T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

namespace detail {

inline std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

// Reflection without edge repeat: -1 -> 1, n -> n-2.
inline int reflect(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

template <class T>
TensorPtr<T> make_node(std::vector<int> shape, std::vector<TensorPtr<T>> parents) {
    auto t = std::make_shared<Tensor<T>>();
    t->shape = std::move(shape);
    t->values.assign(shape_numel(t->shape), T(0));
    for (const auto& p : parents) t->needs_grad = t->needs_grad || p->needs_grad;
    t->parents = std::move(parents);
    if (t->needs_grad) t->ensure_grad();
    return t;
}

template <class T>
void check_same_shape(const TensorPtr<T>& a, const TensorPtr<T>& b, const char* op) {
    if (a->shape != b->shape) throw ShapeMismatch(std::string(op) + ": operand shapes differ");
}

}  // namespace detail

template <class T>
TensorPtr<T> make_tensor(std::vector<int> shape, std::vector<T> values,
                         bool requires_grad = false) {
    if (detail::shape_numel(shape) != values.size())
        throw ShapeMismatch("make_tensor: shape does not match value count");
    for (T v : values)
        if (!std::isfinite(static_cast<double>(v)))
            throw std::invalid_argument("make_tensor: non-finite value");
    auto t = std::make_shared<Tensor<T>>();
    t->shape = std::move(shape);
    t->values = std::move(values);
    t->requires_grad = requires_grad;
    t->needs_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
}

template <class T>
TensorPtr<T> make_zeros(std::vector<int> shape, bool requires_grad = false) {
    const std::size_t n = detail::shape_numel(shape);
    return make_tensor<T>(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

// ---- elementwise ----

template <class T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape(a, b, "add");
    auto out = detail::make_node<T>(a->shape, {a, b});
    for (std::size_t i = 0; i < out->numel(); ++i)
        out->values[i] = a->values[i] + b->values[i];
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a, b] {
            if (a->needs_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < o->numel(); ++i) b->grad[i] += o->grad[i];
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape(a, b, "sub");
    auto out = detail::make_node<T>(a->shape, {a, b});
    for (std::size_t i = 0; i < out->numel(); ++i)
        out->values[i] = a->values[i] - b->values[i];
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a, b] {
            if (a->needs_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < o->numel(); ++i) b->grad[i] -= o->grad[i];
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape(a, b, "mul");
    auto out = detail::make_node<T>(a->shape, {a, b});
    for (std::size_t i = 0; i < out->numel(); ++i)
        out->values[i] = a->values[i] * b->values[i];
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a, b] {
            if (a->needs_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < o->numel(); ++i)
                    a->grad[i] += o->grad[i] * b->values[i];
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < o->numel(); ++i)
                    b->grad[i] += o->grad[i] * a->values[i];
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> scale(const TensorPtr<T>& a, T s) {
    auto out = detail::make_node<T>(a->shape, {a});
    for (std::size_t i = 0; i < out->numel(); ++i) out->values[i] = a->values[i] * s;
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a, s] {
            a->ensure_grad();
            for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i] * s;
        };
    }
    return out;
}

template <class T>
TensorPtr<T> add_scalar(const TensorPtr<T>& a, T s) {
    auto out = detail::make_node<T>(a->shape, {a});
    for (std::size_t i = 0; i < out->numel(); ++i) out->values[i] = a->values[i] + s;
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a] {
            a->ensure_grad();
            for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
        };
    }
    return out;
}

template <class T>
TensorPtr<T> relu(const TensorPtr<T>& a) {
    auto out = detail::make_node<T>(a->shape, {a});
    for (std::size_t i = 0; i < out->numel(); ++i)
        out->values[i] = a->values[i] > T(0) ? a->values[i] : T(0);
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a] {
            a->ensure_grad();
            for (std::size_t i = 0; i < o->numel(); ++i)
                if (a->values[i] > T(0)) a->grad[i] += o->grad[i];
        };
    }
    return out;
}

template <class T>
TensorPtr<T> tanh_op(const TensorPtr<T>& a) {
    auto out = detail::make_node<T>(a->shape, {a});
    for (std::size_t i = 0; i < out->numel(); ++i)
        out->values[i] = std::tanh(a->values[i]);
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a] {
            a->ensure_grad();
            for (std::size_t i = 0; i < o->numel(); ++i)
                a->grad[i] += o->grad[i] * (T(1) - o->values[i] * o->values[i]);
        };
    }
    return out;
}

// ---- reductions / reshaping ----

template <class T>
TensorPtr<T> sum(const TensorPtr<T>& a) {
    auto out = detail::make_node<T>({1}, {a});
    out->values[0] = std::accumulate(a->values.begin(), a->values.end(), T(0));
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a] {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += o->grad[0];
        };
    }
    return out;
}

template <class T>
TensorPtr<T> mean(const TensorPtr<T>& a) {
    const T inv = T(1) / static_cast<T>(a->numel());
    return scale(sum(a), inv);
}

template <class T>
TensorPtr<T> reshape(const TensorPtr<T>& a, std::vector<int> shape) {
    if (detail::shape_numel(shape) != a->numel())
        throw ShapeMismatch("reshape: element count changes");
    auto out = detail::make_node<T>(std::move(shape), {a});
    out->values = a->values;
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a] {
            a->ensure_grad();
            for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
        };
    }
    return out;
}

// ---- linear algebra ----

template <class T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw ShapeMismatch("matmul: incompatible shapes");
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = detail::make_node<T>({m, n}, {a, b});
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            const T av = a->values[static_cast<std::size_t>(i) * k + l];
            const T* brow = &b->values[static_cast<std::size_t>(l) * n];
            T* orow = &out->values[static_cast<std::size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a, b, m, k, n] {
            if (a->needs_grad) {
                a->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const T g = o->grad[static_cast<std::size_t>(i) * n + j];
                        for (int l = 0; l < k; ++l)
                            a->grad[static_cast<std::size_t>(i) * k + l] +=
                                g * b->values[static_cast<std::size_t>(l) * n + j];
                    }
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const T g = o->grad[static_cast<std::size_t>(i) * n + j];
                        for (int l = 0; l < k; ++l)
                            b->grad[static_cast<std::size_t>(l) * n + j] +=
                                g * a->values[static_cast<std::size_t>(i) * k + l];
                    }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> transpose2d(const TensorPtr<T>& a) {
    if (a->shape.size() != 2) throw ShapeMismatch("transpose2d: rank must be 2");
    const int m = a->shape[0], n = a->shape[1];
    auto out = detail::make_node<T>({n, m}, {a});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->values[static_cast<std::size_t>(j) * m + i] =
                a->values[static_cast<std::size_t>(i) * n + j];
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a, m, n] {
            a->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    a->grad[static_cast<std::size_t>(i) * n + j] +=
                        o->grad[static_cast<std::size_t>(j) * m + i];
        };
    }
    return out;
}

// ---- spatial ops (NCHW) ----

// Cross-correlation with reflection padding floor(K/2); stride-1 output keeps
// H×W, stride s gives ceil(H/s) × ceil(W/s).
template <class T>
TensorPtr<T> conv2d_reflect(const TensorPtr<T>& input, const TensorPtr<T>& kernel,
                            int stride = 1) {
    if (input->shape.size() != 4 || kernel->shape.size() != 4)
        throw ShapeMismatch("conv2d_reflect: NCHW input and OIKK kernel required");
    const int n = input->shape[0], ci = input->shape[1];
    const int h = input->shape[2], w = input->shape[3];
    const int co = kernel->shape[0], ki = kernel->shape[1];
    const int kh = kernel->shape[2], kw = kernel->shape[3];
    if (kh != kw || kh % 2 == 0) throw UnsupportedKernel("conv2d_reflect: kernel must be odd square");
    if (ki != ci) throw ShapeMismatch("conv2d_reflect: kernel input channels differ from input");
    if (stride < 1) throw ShapeMismatch("conv2d_reflect: stride must be >= 1");

    const int k = kh, pad = k / 2;
    const int oh = (h + stride - 1) / stride;
    const int ow = (w + stride - 1) / stride;
    auto out = detail::make_node<T>({n, co, oh, ow}, {input, kernel});

    // Precomputed reflected index maps, indexed [out_pos * k + tap].
    std::vector<int> ymap(static_cast<std::size_t>(oh) * k), xmap(static_cast<std::size_t>(ow) * k);
    for (int y = 0; y < oh; ++y)
        for (int t = 0; t < k; ++t)
            ymap[static_cast<std::size_t>(y) * k + t] = detail::reflect(y * stride - pad + t, h);
    for (int x = 0; x < ow; ++x)
        for (int t = 0; t < k; ++t)
            xmap[static_cast<std::size_t>(x) * k + t] = detail::reflect(x * stride - pad + t, w);

    const std::size_t in_plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
    for (int b = 0; b < n; ++b)
        for (int oc = 0; oc < co; ++oc) {
            T* optr = &out->values[(static_cast<std::size_t>(b) * co + oc) * out_plane];
            for (int ic = 0; ic < ci; ++ic) {
                const T* iptr = &input->values[(static_cast<std::size_t>(b) * ci + ic) * in_plane];
                const T* kptr = &kernel->values[((static_cast<std::size_t>(oc) * ci + ic) * k) * k];
                for (int ty = 0; ty < k; ++ty)
                    for (int tx = 0; tx < k; ++tx) {
                        const T kv = kptr[ty * k + tx];
                        if (kv == T(0)) continue;
                        for (int y = 0; y < oh; ++y) {
                            const T* irow = iptr + static_cast<std::size_t>(ymap[y * k + ty]) * w;
                            T* orow = optr + static_cast<std::size_t>(y) * ow;
                            const int* xm = &xmap[tx];
                            for (int x = 0; x < ow; ++x)
                                orow[x] += kv * irow[xm[static_cast<std::size_t>(x) * k]];
                        }
                    }
            }
        }

    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, input, kernel, ymap, xmap, n, ci, co, h, w, k] {
            const int oh = o->shape[2], ow = o->shape[3];
            const std::size_t in_plane = static_cast<std::size_t>(h) * w;
            const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
            if (input->needs_grad) input->ensure_grad();
            if (kernel->needs_grad) kernel->ensure_grad();
            for (int b = 0; b < n; ++b)
                for (int oc = 0; oc < co; ++oc) {
                    const T* gptr = &o->grad[(static_cast<std::size_t>(b) * co + oc) * out_plane];
                    for (int ic = 0; ic < ci; ++ic) {
                        const std::size_t koff = (static_cast<std::size_t>(oc) * ci + ic) *
                                                 static_cast<std::size_t>(k) * k;
                        const T* iptr = &input->values[(static_cast<std::size_t>(b) * ci + ic) * in_plane];
                        T* igrad = input->needs_grad
                                       ? &input->grad[(static_cast<std::size_t>(b) * ci + ic) * in_plane]
                                       : nullptr;
                        for (int ty = 0; ty < k; ++ty)
                            for (int tx = 0; tx < k; ++tx) {
                                const T kv = kernel->values[koff + static_cast<std::size_t>(ty) * k + tx];
                                T kacc = T(0);
                                for (int y = 0; y < oh; ++y) {
                                    const std::size_t irow =
                                        static_cast<std::size_t>(ymap[y * k + ty]) * w;
                                    const T* grow = gptr + static_cast<std::size_t>(y) * ow;
                                    for (int x = 0; x < ow; ++x) {
                                        const std::size_t ix = irow + xmap[static_cast<std::size_t>(x) * k + tx];
                                        const T g = grow[x];
                                        if (igrad) igrad[ix] += kv * g;
                                        kacc += iptr[ix] * g;
                                    }
                                }
                                if (kernel->needs_grad)
                                    kernel->grad[koff + static_cast<std::size_t>(ty) * k + tx] += kacc;
                            }
                    }
                }
        };
    }
    return out;
}

// Per-sample per-channel standardization over H·W (population variance),
// then affine gamma, beta.
template <class T>
TensorPtr<T> instance_norm(const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                           const TensorPtr<T>& beta, T eps = T(1e-5)) {
    if (x->shape.size() != 4) throw ShapeMismatch("instance_norm: NCHW input required");
    const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (gamma->numel() != static_cast<std::size_t>(c) || beta->numel() != static_cast<std::size_t>(c))
        throw ShapeMismatch("instance_norm: affine params must be per-channel");

    const std::size_t plane = static_cast<std::size_t>(h) * w;
    auto out = detail::make_node<T>(x->shape, {x, gamma, beta});
    // normalized values and 1/std per (n,c), kept for the backward pass
    auto norm = std::make_shared<std::vector<T>>(x->numel());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * c);

    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
            T mu = T(0);
            for (std::size_t i = 0; i < plane; ++i) mu += x->values[off + i];
            mu /= static_cast<T>(plane);
            T var = T(0);
            for (std::size_t i = 0; i < plane; ++i) {
                const T d = x->values[off + i] - mu;
                var += d * d;
            }
            var /= static_cast<T>(plane);
            const T is = T(1) / std::sqrt(var + eps);
            (*inv_std)[static_cast<std::size_t>(b) * c + ch] = is;
            const T g = gamma->values[ch], bt = beta->values[ch];
            for (std::size_t i = 0; i < plane; ++i) {
                const T y = (x->values[off + i] - mu) * is;
                (*norm)[off + i] = y;
                out->values[off + i] = g * y + bt;
            }
        }

    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, x, gamma, beta, norm, inv_std, n, c, plane] {
            if (x->needs_grad) x->ensure_grad();
            if (gamma->needs_grad) gamma->ensure_grad();
            if (beta->needs_grad) beta->ensure_grad();
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
                    T sum_g = T(0), sum_gy = T(0);
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_g += o->grad[off + i];
                        sum_gy += o->grad[off + i] * (*norm)[off + i];
                    }
                    if (gamma->needs_grad) gamma->grad[ch] += sum_gy;
                    if (beta->needs_grad) beta->grad[ch] += sum_g;
                    if (x->needs_grad) {
                        const T gch = gamma->values[ch];
                        const T is = (*inv_std)[static_cast<std::size_t>(b) * c + ch];
                        const T mg = sum_g / static_cast<T>(plane);
                        const T mgy = sum_gy / static_cast<T>(plane);
                        for (std::size_t i = 0; i < plane; ++i)
                            x->grad[off + i] +=
                                gch * is * (o->grad[off + i] - mg - (*norm)[off + i] * mgy);
                    }
                }
        };
    }
    return out;
}

// Nearest-neighbor ×2: each pixel duplicated into a 2×2 block.
template <class T>
TensorPtr<T> upsample2x(const TensorPtr<T>& x) {
    if (x->shape.size() != 4) throw ShapeMismatch("upsample2x: NCHW input required");
    const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    auto out = detail::make_node<T>({n, c, 2 * h, 2 * w}, {x});
    const std::size_t planes = static_cast<std::size_t>(n) * c;
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = &x->values[p * h * w];
        T* dst = &out->values[p * 4 * h * w];
        for (int y = 0; y < h; ++y)
            for (int x2 = 0; x2 < w; ++x2) {
                const T v = src[static_cast<std::size_t>(y) * w + x2];
                const std::size_t base = (static_cast<std::size_t>(2 * y) * 2 * w) + 2 * x2;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
    }
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, x, h, w, planes] {
            x->ensure_grad();
            for (std::size_t p = 0; p < planes; ++p) {
                T* gsrc = &x->grad[p * h * w];
                const T* gdst = &o->grad[p * 4 * h * w];
                for (int y = 0; y < h; ++y)
                    for (int x2 = 0; x2 < w; ++x2) {
                        const std::size_t base = (static_cast<std::size_t>(2 * y) * 2 * w) + 2 * x2;
                        gsrc[static_cast<std::size_t>(y) * w + x2] +=
                            gdst[base] + gdst[base + 1] + gdst[base + 2 * w] + gdst[base + 2 * w + 1];
                    }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> concat_channels(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape.size() != 4 || b->shape.size() != 4 || a->shape[0] != b->shape[0] ||
        a->shape[2] != b->shape[2] || a->shape[3] != b->shape[3])
        throw ShapeMismatch("concat_channels: spatial/batch dims differ");
    const int n = a->shape[0], ca = a->shape[1], cb = b->shape[1];
    const std::size_t plane = static_cast<std::size_t>(a->shape[2]) * a->shape[3];
    auto out = detail::make_node<T>({n, ca + cb, a->shape[2], a->shape[3]}, {a, b});
    for (int bn = 0; bn < n; ++bn) {
        std::copy_n(&a->values[static_cast<std::size_t>(bn) * ca * plane], ca * plane,
                    &out->values[static_cast<std::size_t>(bn) * (ca + cb) * plane]);
        std::copy_n(&b->values[static_cast<std::size_t>(bn) * cb * plane], cb * plane,
                    &out->values[static_cast<std::size_t>(bn) * (ca + cb) * plane + ca * plane]);
    }
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, a, b, n, ca, cb, plane] {
            for (int bn = 0; bn < n; ++bn) {
                const std::size_t obase = static_cast<std::size_t>(bn) * (ca + cb) * plane;
                if (a->needs_grad) {
                    a->ensure_grad();
                    for (std::size_t i = 0; i < ca * plane; ++i)
                        a->grad[static_cast<std::size_t>(bn) * ca * plane + i] += o->grad[obase + i];
                }
                if (b->needs_grad) {
                    b->ensure_grad();
                    for (std::size_t i = 0; i < cb * plane; ++i)
                        b->grad[static_cast<std::size_t>(bn) * cb * plane + i] +=
                            o->grad[obase + ca * plane + i];
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> spatial_crop(const TensorPtr<T>& x, int top, int left, int ch, int cw) {
    if (x->shape.size() != 4) throw ShapeMismatch("spatial_crop: NCHW input required");
    const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (top < 0 || left < 0 || top + ch > h || left + cw > w)
        throw ShapeMismatch("spatial_crop: crop exceeds bounds");
    auto out = detail::make_node<T>({n, c, ch, cw}, {x});
    const std::size_t planes = static_cast<std::size_t>(n) * c;
    for (std::size_t p = 0; p < planes; ++p)
        for (int y = 0; y < ch; ++y)
            std::copy_n(&x->values[(p * h + top + y) * w + left], cw,
                        &out->values[(p * ch + y) * static_cast<std::size_t>(cw)]);
    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, x, top, left, ch, cw, h, w, planes] {
            x->ensure_grad();
            for (std::size_t p = 0; p < planes; ++p)
                for (int y = 0; y < ch; ++y)
                    for (int x2 = 0; x2 < cw; ++x2)
                        x->grad[(p * h + top + y) * w + left + x2] +=
                            o->grad[(p * ch + y) * static_cast<std::size_t>(cw) + x2];
        };
    }
    return out;
}

// Mean over all pixels of softmax cross-entropy against integer labels.
// logits: {N,K,H,W}; labels: N·H·W class indices in row-major (n,y,x) order.
template <class T>
TensorPtr<T> softmax_ce_mean(const TensorPtr<T>& logits, const std::vector<int>& labels) {
    if (logits->shape.size() != 4) throw ShapeMismatch("softmax_ce_mean: NKHW logits required");
    const int n = logits->shape[0], k = logits->shape[1];
    const int h = logits->shape[2], w = logits->shape[3];
    const std::size_t pixels = static_cast<std::size_t>(n) * h * w;
    if (labels.size() != pixels) throw ShapeMismatch("softmax_ce_mean: label count differs");

    const std::size_t plane = static_cast<std::size_t>(h) * w;
    auto probs = std::make_shared<std::vector<T>>(logits->numel());
    auto out = detail::make_node<T>({1}, {logits});
    double acc = 0.0;
    for (int b = 0; b < n; ++b)
        for (std::size_t p = 0; p < plane; ++p) {
            T mx = logits->values[(static_cast<std::size_t>(b) * k) * plane + p];
            for (int c = 1; c < k; ++c)
                mx = std::max(mx, logits->values[(static_cast<std::size_t>(b) * k + c) * plane + p]);
            T z = T(0);
            for (int c = 0; c < k; ++c) {
                const T e = std::exp(logits->values[(static_cast<std::size_t>(b) * k + c) * plane + p] - mx);
                (*probs)[(static_cast<std::size_t>(b) * k + c) * plane + p] = e;
                z += e;
            }
            const int lbl = labels[static_cast<std::size_t>(b) * plane + p];
            for (int c = 0; c < k; ++c)
                (*probs)[(static_cast<std::size_t>(b) * k + c) * plane + p] /= z;
            acc -= std::log(static_cast<double>(
                (*probs)[(static_cast<std::size_t>(b) * k + lbl) * plane + p]));
        }
    out->values[0] = static_cast<T>(acc / static_cast<double>(pixels));

    if (out->needs_grad) {
        auto* o = out.get();
        out->backprop = [o, logits, probs, labels, n, k, plane, pixels] {
            logits->ensure_grad();
            const T inv = T(1) / static_cast<T>(pixels);
            for (int b = 0; b < n; ++b)
                for (std::size_t p = 0; p < plane; ++p) {
                    const int lbl = labels[static_cast<std::size_t>(b) * plane + p];
                    for (int c = 0; c < k; ++c) {
                        T g = (*probs)[(static_cast<std::size_t>(b) * k + c) * plane + p];
                        if (c == lbl) g -= T(1);
                        logits->grad[(static_cast<std::size_t>(b) * k + c) * plane + p] +=
                            o->grad[0] * g * inv;
                    }
                }
        };
    }
    return out;
}

// ---- backward ----

template <class T>
void backward(const TensorPtr<T>& output) {
    if (output->numel() != 1) throw NotScalar("backward: output must be scalar");

    // Post-order DFS gives a deterministic topological order.
    std::vector<Tensor<T>*> order;
    std::unordered_set<Tensor<T>*> visited;
    std::vector<std::pair<Tensor<T>*, std::size_t>> stack;
    stack.emplace_back(output.get(), 0);
    visited.insert(output.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor<T>* parent = node->parents[next++].get();
            if (visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    output->ensure_grad();
    output->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop && (*it)->needs_grad) (*it)->backprop();
}

// Max over coordinates of |analytic - central_difference| /
// max(|analytic|, |cd|, 1e-8).
template <class T>
double grad_check(const std::function<TensorPtr<T>(const TensorPtr<T>&)>& fn,
                  const TensorPtr<T>& point, double step) {
    auto leaf = make_tensor<T>(point->shape, point->values, true);
    auto out = fn(leaf);
    backward(out);
    const std::vector<T> analytic = leaf->grad;

    double max_err = 0.0;
    for (std::size_t i = 0; i < point->numel(); ++i) {
        auto eval = [&](double delta) {
            auto probe = make_tensor<T>(point->shape, point->values, false);
            probe->values[i] = static_cast<T>(static_cast<double>(probe->values[i]) + delta);
            return static_cast<double>(fn(probe)->values[0]);
        };
        const double cd = (eval(step) - eval(-step)) / (2.0 * step);
        const double an = static_cast<double>(analytic[i]);
        const double denom = std::max({std::abs(an), std::abs(cd), 1e-8});
        max_err = std::max(max_err, std::abs(an - cd) / denom);
    }
    return max_err;
}

using DiffTensor = TensorPtr<float>;

}  // namespace df
