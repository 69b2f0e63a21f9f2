#pragma once

#include <cmath>
#include <cstring>
#include <limits>

#include "dqnet/gemm.hpp"
#include "dqnet/tensor.hpp"

namespace dqnet {

namespace detail {

template <typename T>
inline void accum(TensorImpl<T>* p, const std::vector<T>& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
}

template <typename T>
inline std::vector<T>& grad_of(TensorImpl<T>* p) {
    p->ensure_grad();
    return p->grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto* pa = a.impl().get();
    auto* pb = b.impl().get();
    return make_op_output<T>(a.shape(), std::move(out), {a, b}, [pa, pb](TensorImpl<T>& o) {
        detail::accum(pa, o.grad);
        detail::accum(pb, o.grad);
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto* pa = a.impl().get();
    auto* pb = b.impl().get();
    return make_op_output<T>(a.shape(), std::move(out), {a, b}, [pa, pb](TensorImpl<T>& o) {
        detail::accum(pa, o.grad);
        if (pb->requires_grad) {
            auto& g = detail::grad_of(pb);
            for (size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto* pa = a.impl().get();
    auto* pb = b.impl().get();
    return make_op_output<T>(a.shape(), std::move(out), {a, b}, [pa, pb](TensorImpl<T>& o) {
        if (pa->requires_grad) {
            auto& g = detail::grad_of(pa);
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            auto& g = detail::grad_of(pb);
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa->data[i];
        }
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "div");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    auto* pa = a.impl().get();
    auto* pb = b.impl().get();
    return make_op_output<T>(a.shape(), std::move(out), {a, b}, [pa, pb](TensorImpl<T>& o) {
        if (pa->requires_grad) {
            auto& g = detail::grad_of(pa);
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / pb->data[i];
        }
        if (pb->requires_grad) {
            auto& g = detail::grad_of(pb);
            for (size_t i = 0; i < g.size(); ++i)
                g[i] -= o.grad[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
        }
    });
}

// a*x + b, one node
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T a, T b) {
    std::vector<T> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a * x.data()[i] + b;
    auto* px = x.impl().get();
    return make_op_output<T>(x.shape(), std::move(out), {x}, [px, a](TensorImpl<T>& o) {
        if (px->requires_grad) {
            auto& g = detail::grad_of(px);
            for (size_t i = 0; i < g.size(); ++i) g[i] += a * o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
    return affine(x, s, T(0));
}
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return affine(x, T(1), s);
}
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
    return affine(x, T(-1), T(1));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
    auto* px = x.impl().get();
    return make_op_output<T>(x.shape(), std::move(out), {x}, [px](TensorImpl<T>& o) {
        if (px->requires_grad) {
            auto& g = detail::grad_of(px);
            for (size_t i = 0; i < g.size(); ++i)
                if (px->data[i] > T(0)) g[i] += o.grad[i];
        }
    });
}

// exact erf form
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    std::vector<T> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double v = static_cast<double>(x.data()[i]);
        out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    auto* px = x.impl().get();
    return make_op_output<T>(x.shape(), std::move(out), {x}, [px](TensorImpl<T>& o) {
        if (!px->requires_grad) return;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        auto& g = detail::grad_of(px);
        for (size_t i = 0; i < g.size(); ++i) {
            const double v = static_cast<double>(px->data[i]);
            const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            g[i] += o.grad[i] * static_cast<T>(cdf + v * pdf);
        }
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double v = static_cast<double>(x.data()[i]);
        out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-v)));
    }
    auto* px = x.impl().get();
    return make_op_output<T>(x.shape(), std::move(out), {x}, [px](TensorImpl<T>& o) {
        if (!px->requires_grad) return;
        auto& g = detail::grad_of(px);
        for (size_t i = 0; i < g.size(); ++i) {
            const T s = o.data[i];
            g[i] += o.grad[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
Tensor<T> abs_val(const Tensor<T>& x) {
    std::vector<T> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(x.data()[i]);
    auto* px = x.impl().get();
    return make_op_output<T>(x.shape(), std::move(out), {x}, [px](TensorImpl<T>& o) {
        if (!px->requires_grad) return;
        auto& g = detail::grad_of(px);
        for (size_t i = 0; i < g.size(); ++i) {
            const T v = px->data[i];
            if (v > T(0))
                g[i] += o.grad[i];
            else if (v < T(0))
                g[i] -= o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& x) {
    std::vector<T> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (x.data()[i] <= T(0)) throw DomainError("log of non-positive value");
        out[i] = std::log(x.data()[i]);
    }
    auto* px = x.impl().get();
    return make_op_output<T>(x.shape(), std::move(out), {x}, [px](TensorImpl<T>& o) {
        if (!px->requires_grad) return;
        auto& g = detail::grad_of(px);
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / px->data[i];
    });
}

// gradient is passed through only where the value was not clipped
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    std::vector<T> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, x.data()[i]));
    auto* px = x.impl().get();
    return make_op_output<T>(x.shape(), std::move(out), {x}, [px, lo, hi](TensorImpl<T>& o) {
        if (!px->requires_grad) return;
        auto& g = detail::grad_of(px);
        for (size_t i = 0; i < g.size(); ++i)
            if (px->data[i] > lo && px->data[i] < hi) g[i] += o.grad[i];
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.data()) s += v;
    auto* px = x.impl().get();
    return make_op_output<T>({1}, {s}, {x}, [px](TensorImpl<T>& o) {
        if (!px->requires_grad) return;
        auto& g = detail::grad_of(px);
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    T s = 0;
    for (T v : x.data()) s += v;
    s *= inv;
    auto* px = x.impl().get();
    return make_op_output<T>({1}, {s}, {x}, [px, inv](TensorImpl<T>& o) {
        if (!px->requires_grad) return;
        auto& g = detail::grad_of(px);
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0] * inv;
    });
}

// [C,H,W] -> [H,W]
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
    if (x.ndim() != 3) throw DimensionError("channel_mean expects [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int64_t hw = static_cast<int64_t>(H) * W;
    const T inv = T(1) / static_cast<T>(C);
    std::vector<T> out(static_cast<size_t>(hw), T(0));
    for (int c = 0; c < C; ++c) {
        const T* p = x.data().data() + c * hw;
        for (int64_t i = 0; i < hw; ++i) out[static_cast<size_t>(i)] += p[i];
    }
    for (auto& v : out) v *= inv;
    auto* px = x.impl().get();
    return make_op_output<T>({H, W}, std::move(out), {x}, [px, C, hw, inv](TensorImpl<T>& o) {
        if (!px->requires_grad) return;
        auto& g = detail::grad_of(px);
        for (int c = 0; c < C; ++c) {
            T* gp = g.data() + c * hw;
            for (int64_t i = 0; i < hw; ++i) gp[i] += o.grad[static_cast<size_t>(i)] * inv;
        }
    });
}

// ---------------------------------------------------------------------------
// shape manipulation (all copying; backward scatters accordingly)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                             ": element count mismatch");
    auto* px = x.impl().get();
    return make_op_output<T>(std::move(shape), x.data(), {x}, [px](TensorImpl<T>& o) {
        detail::accum(px, o.grad);
    });
}

template <typename T>
Tensor<T> concat_axis0(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_axis0 of zero tensors");
    std::vector<int> shape = parts[0].shape();
    std::vector<int64_t> offsets;
    int rows = 0;
    int64_t total = 0;
    const int64_t trail = parts[0].numel() / parts[0].dim(0);
    for (const auto& p : parts) {
        if (p.ndim() != static_cast<int>(shape.size()) || p.numel() / p.dim(0) != trail)
            throw DimensionError("concat_axis0: trailing dims differ");
        offsets.push_back(total);
        rows += p.dim(0);
        total += p.numel();
    }
    shape[0] = rows;
    std::vector<T> out(static_cast<size_t>(total));
    for (size_t i = 0; i < parts.size(); ++i)
        std::copy(parts[i].data().begin(), parts[i].data().end(),
                  out.begin() + static_cast<size_t>(offsets[i]));
    std::vector<TensorImpl<T>*> raw;
    for (const auto& p : parts) raw.push_back(p.impl().get());
    return make_op_output<T>(std::move(shape), std::move(out), parts,
                             [raw, offsets](TensorImpl<T>& o) {
                                 for (size_t i = 0; i < raw.size(); ++i) {
                                     if (!raw[i]->requires_grad) continue;
                                     auto& g = detail::grad_of(raw[i]);
                                     const T* src = o.grad.data() + offsets[i];
                                     for (size_t j = 0; j < g.size(); ++j) g[j] += src[j];
                                 }
                             });
}

template <typename T>
Tensor<T> slice_axis0(const Tensor<T>& x, int r0, int r1) {
    if (r0 < 0 || r1 > x.dim(0) || r0 >= r1) throw DimensionError("slice_axis0: bad range");
    const int64_t trail = x.numel() / x.dim(0);
    std::vector<int> shape = x.shape();
    shape[0] = r1 - r0;
    std::vector<T> out(static_cast<size_t>((r1 - r0) * trail));
    std::copy(x.data().begin() + r0 * trail, x.data().begin() + r1 * trail, out.begin());
    auto* px = x.impl().get();
    return make_op_output<T>(std::move(shape), std::move(out), {x},
                             [px, r0, trail](TensorImpl<T>& o) {
                                 if (!px->requires_grad) return;
                                 auto& g = detail::grad_of(px);
                                 T* dst = g.data() + r0 * trail;
                                 for (size_t j = 0; j < o.grad.size(); ++j) dst[j] += o.grad[j];
                             });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
        throw DimensionError("concat_cols expects [N,Da],[N,Db]");
    const int N = a.dim(0), Da = a.dim(1), Db = b.dim(1);
    std::vector<T> out(static_cast<size_t>(N) * (Da + Db));
    for (int i = 0; i < N; ++i) {
        std::copy_n(a.data().data() + static_cast<size_t>(i) * Da, Da,
                    out.data() + static_cast<size_t>(i) * (Da + Db));
        std::copy_n(b.data().data() + static_cast<size_t>(i) * Db, Db,
                    out.data() + static_cast<size_t>(i) * (Da + Db) + Da);
    }
    auto* pa = a.impl().get();
    auto* pb = b.impl().get();
    return make_op_output<T>({N, Da + Db}, std::move(out), {a, b},
                             [pa, pb, N, Da, Db](TensorImpl<T>& o) {
                                 if (pa->requires_grad) {
                                     auto& g = detail::grad_of(pa);
                                     for (int i = 0; i < N; ++i)
                                         for (int j = 0; j < Da; ++j)
                                             g[static_cast<size_t>(i) * Da + j] +=
                                                 o.grad[static_cast<size_t>(i) * (Da + Db) + j];
                                 }
                                 if (pb->requires_grad) {
                                     auto& g = detail::grad_of(pb);
                                     for (int i = 0; i < N; ++i)
                                         for (int j = 0; j < Db; ++j)
                                             g[static_cast<size_t>(i) * Db + j] +=
                                                 o.grad[static_cast<size_t>(i) * (Da + Db) + Da + j];
                                 }
                             });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
    if (x.ndim() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
        throw DimensionError("slice_cols: bad range");
    const int N = x.dim(0), D = x.dim(1), Dc = c1 - c0;
    std::vector<T> out(static_cast<size_t>(N) * Dc);
    for (int i = 0; i < N; ++i)
        std::copy_n(x.data().data() + static_cast<size_t>(i) * D + c0, Dc,
                    out.data() + static_cast<size_t>(i) * Dc);
    auto* px = x.impl().get();
    return make_op_output<T>({N, Dc}, std::move(out), {x}, [px, N, D, c0, Dc](TensorImpl<T>& o) {
        if (!px->requires_grad) return;
        auto& g = detail::grad_of(px);
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < Dc; ++j)
                g[static_cast<size_t>(i) * D + c0 + j] += o.grad[static_cast<size_t>(i) * Dc + j];
    });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<int> indices) {
    if (x.ndim() < 1) throw DimensionError("gather_rows on scalar");
    const int64_t trail = x.numel() / x.dim(0);
    for (int idx : indices)
        if (idx < 0 || idx >= x.dim(0)) throw DimensionError("gather_rows: index out of range");
    std::vector<int> shape = x.shape();
    shape[0] = static_cast<int>(indices.size());
    std::vector<T> out(indices.size() * static_cast<size_t>(trail));
    for (size_t i = 0; i < indices.size(); ++i)
        std::copy_n(x.data().data() + indices[i] * trail, trail,
                    out.data() + static_cast<int64_t>(i) * trail);
    auto* px = x.impl().get();
    return make_op_output<T>(std::move(shape), std::move(out), {x},
                             [px, indices, trail](TensorImpl<T>& o) {
                                 if (!px->requires_grad) return;
                                 auto& g = detail::grad_of(px);
                                 for (size_t i = 0; i < indices.size(); ++i) {
                                     const T* src = o.grad.data() + static_cast<int64_t>(i) * trail;
                                     T* dst = g.data() + indices[i] * trail;
                                     for (int64_t j = 0; j < trail; ++j) dst[j] += src[j];
                                 }
                             });
}

// [C,H,W] -> [H*W, C] (token t = y*W + x)
template <typename T>
Tensor<T> chw_to_tokens(const Tensor<T>& x) {
    if (x.ndim() != 3) throw DimensionError("chw_to_tokens expects [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int64_t hw = static_cast<int64_t>(H) * W;
    std::vector<T> out(x.data().size());
    for (int c = 0; c < C; ++c)
        for (int64_t t = 0; t < hw; ++t)
            out[static_cast<size_t>(t * C + c)] = x.data()[static_cast<size_t>(c * hw + t)];
    auto* px = x.impl().get();
    return make_op_output<T>({static_cast<int>(hw), C}, std::move(out), {x},
                             [px, C, hw](TensorImpl<T>& o) {
                                 if (!px->requires_grad) return;
                                 auto& g = detail::grad_of(px);
                                 for (int c = 0; c < C; ++c)
                                     for (int64_t t = 0; t < hw; ++t)
                                         g[static_cast<size_t>(c * hw + t)] +=
                                             o.grad[static_cast<size_t>(t * C + c)];
                             });
}

// [H*W, C] -> [C,H,W]
template <typename T>
Tensor<T> tokens_to_chw(const Tensor<T>& x, int H, int W) {
    if (x.ndim() != 2 || x.dim(0) != H * W)
        throw DimensionError("tokens_to_chw: token count does not match grid");
    const int C = x.dim(1);
    const int64_t hw = static_cast<int64_t>(H) * W;
    std::vector<T> out(x.data().size());
    for (int64_t t = 0; t < hw; ++t)
        for (int c = 0; c < C; ++c)
            out[static_cast<size_t>(c * hw + t)] = x.data()[static_cast<size_t>(t * C + c)];
    auto* px = x.impl().get();
    return make_op_output<T>({C, H, W}, std::move(out), {x}, [px, C, hw](TensorImpl<T>& o) {
        if (!px->requires_grad) return;
        auto& g = detail::grad_of(px);
        for (int64_t t = 0; t < hw; ++t)
            for (int c = 0; c < C; ++c)
                g[static_cast<size_t>(t * C + c)] += o.grad[static_cast<size_t>(c * hw + t)];
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<T> out(static_cast<size_t>(M) * N, T(0));
    gemm_nn(M, K, N, a.data().data(), b.data().data(), out.data());
    auto* pa = a.impl().get();
    auto* pb = b.impl().get();
    return make_op_output<T>({M, N}, std::move(out), {a, b}, [pa, pb, M, K, N](TensorImpl<T>& o) {
        if (pa->requires_grad)
            gemm_nt(M, N, K, o.grad.data(), pb->data.data(), detail::grad_of(pa).data());
        if (pb->requires_grad)
            gemm_tn(K, M, N, pa->data.data(), o.grad.data(), detail::grad_of(pb).data());
    });
}

// y = x * W^T + bias, x:[N,Din], W:[Dout,Din], bias:[Dout] (optional)
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1))
        throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " with W " +
                             shape_str(w.shape()));
    const int N = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
    std::vector<T> out(static_cast<size_t>(N) * Dout, T(0));
    gemm_nt(N, Din, Dout, x.data().data(), w.data().data(), out.data());
    if (bias.defined()) {
        if (bias.numel() != Dout) throw DimensionError("linear: bias size mismatch");
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < Dout; ++j)
                out[static_cast<size_t>(i) * Dout + j] += bias.data()[static_cast<size_t>(j)];
    }
    auto* px = x.impl().get();
    auto* pw = w.impl().get();
    auto* pbias = bias.defined() ? bias.impl().get() : nullptr;
    std::vector<Tensor<T>> ins = {x, w};
    if (bias.defined()) ins.push_back(bias);
    return make_op_output<T>({N, Dout}, std::move(out), std::move(ins),
                             [px, pw, pbias, N, Din, Dout](TensorImpl<T>& o) {
                                 if (px->requires_grad)
                                     gemm_nn(N, Dout, Din, o.grad.data(), pw->data.data(),
                                             detail::grad_of(px).data());
                                 if (pw->requires_grad)
                                     gemm_tn(Dout, N, Din, o.grad.data(), px->data.data(),
                                             detail::grad_of(pw).data());
                                 if (pbias && pbias->requires_grad) {
                                     auto& g = detail::grad_of(pbias);
                                     for (int i = 0; i < N; ++i)
                                         for (int j = 0; j < Dout; ++j)
                                             g[static_cast<size_t>(j)] +=
                                                 o.grad[static_cast<size_t>(i) * Dout + j];
                                 }
                             });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
    const int64_t S = static_cast<int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        const T* plane = x + static_cast<int64_t>(c) * H * W;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                T* row = col + ((static_cast<int64_t>(c) * k + ky) * k + kx) * S;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    T* dst = row + static_cast<int64_t>(oy) * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + Wo, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<int64_t>(iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
                    }
                }
            }
    }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
                T* xg) {
    const int64_t S = static_cast<int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        T* plane = xg + static_cast<int64_t>(c) * H * W;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const T* row = col + ((static_cast<int64_t>(c) * k + ky) * k + kx) * S;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    const T* src = row + static_cast<int64_t>(oy) * Wo;
                    T* dst = plane + static_cast<int64_t>(iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
    }
}

// at most this many col elements before switching to the direct stride-1 path
constexpr int64_t kIm2colLimit = 16ll << 20;

// shifted-row axpy convolution, stride 1 only
template <typename T>
void conv_direct_fwd(const T* x, const T* w, int Cin, int H, int W, int Cout, int k, int pad,
                     int Ho, int Wo, T* y) {
    for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci) {
            const T* plane = x + static_cast<int64_t>(ci) * H * W;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const T wv = w[((static_cast<int64_t>(co) * Cin + ci) * k + ky) * k + kx];
                    const int ox0 = std::max(0, pad - kx);
                    const int ox1 = std::min(Wo, W + pad - kx);
                    if (ox0 >= ox1) continue;
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        const T* src = plane + static_cast<int64_t>(iy) * W + (ox0 - pad + kx);
                        T* dst = y + (static_cast<int64_t>(co) * Ho + oy) * Wo + ox0;
                        for (int ox = 0; ox < ox1 - ox0; ++ox) dst[ox] += wv * src[ox];
                    }
                }
        }
}

template <typename T>
void conv_direct_bwd(const T* x, const T* w, const T* dy, int Cin, int H, int W, int Cout, int k,
                     int pad, int Ho, int Wo, T* dx, T* dw) {
    for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci) {
            const T* plane = x + static_cast<int64_t>(ci) * H * W;
            T* dplane = dx ? dx + static_cast<int64_t>(ci) * H * W : nullptr;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const int64_t widx = ((static_cast<int64_t>(co) * Cin + ci) * k + ky) * k + kx;
                    const T wv = w[widx];
                    const int ox0 = std::max(0, pad - kx);
                    const int ox1 = std::min(Wo, W + pad - kx);
                    if (ox0 >= ox1) continue;
                    T wacc = 0;
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        const T* srcx = plane + static_cast<int64_t>(iy) * W + (ox0 - pad + kx);
                        const T* srcg = dy + (static_cast<int64_t>(co) * Ho + oy) * Wo + ox0;
                        const int len = ox1 - ox0;
                        if (dw)
                            for (int ox = 0; ox < len; ++ox) wacc += srcg[ox] * srcx[ox];
                        if (dplane) {
                            T* dst = dplane + static_cast<int64_t>(iy) * W + (ox0 - pad + kx);
                            for (int ox = 0; ox < len; ++ox) dst[ox] += wv * srcg[ox];
                        }
                    }
                    if (dw) dw[widx] += wacc;
                }
        }
}

}  // namespace detail

// x:[Cin,H,W], w:[Cout,Cin,k,k], bias:[Cout] or undefined
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride = 1,
                 int padding = 0) {
    if (x.ndim() != 3 || w.ndim() != 4) throw DimensionError("conv2d expects x[C,H,W], w[O,I,k,k]");
    if (w.dim(2) != w.dim(3)) throw DimensionError("conv2d: non-square kernel");
    if (x.dim(0) != w.dim(1))
        throw DimensionError("conv2d: input channels " + std::to_string(x.dim(0)) +
                             " do not match weight " + std::to_string(w.dim(1)));
    if (stride < 1 || padding < 0) throw DimensionError("conv2d: bad stride/padding");
    const int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int Cout = w.dim(0), k = w.dim(2);
    const int Ho = (H + 2 * padding - k) / stride + 1;
    const int Wo = (W + 2 * padding - k) / stride + 1;
    if (H + 2 * padding < k || W + 2 * padding < k)
        throw DimensionError("conv2d: kernel larger than padded input");
    if (bias.defined() && bias.numel() != Cout) throw DimensionError("conv2d: bias size mismatch");

    const int64_t S = static_cast<int64_t>(Ho) * Wo;
    const int64_t K = static_cast<int64_t>(Cin) * k * k;
    std::vector<T> out(static_cast<size_t>(Cout) * S, T(0));
    const bool direct = stride == 1 && K * S > detail::kIm2colLimit;
    if (direct) {
        detail::conv_direct_fwd(x.data().data(), w.data().data(), Cin, H, W, Cout, k, padding, Ho,
                                Wo, out.data());
    } else {
        std::vector<T> col(static_cast<size_t>(K * S));
        detail::im2col(x.data().data(), Cin, H, W, k, stride, padding, Ho, Wo, col.data());
        gemm_nn(Cout, static_cast<int>(K), static_cast<int>(S), w.data().data(), col.data(),
                out.data());
    }
    if (bias.defined())
        for (int co = 0; co < Cout; ++co) {
            const T b = bias.data()[static_cast<size_t>(co)];
            T* dst = out.data() + static_cast<int64_t>(co) * S;
            for (int64_t i = 0; i < S; ++i) dst[i] += b;
        }

    auto* px = x.impl().get();
    auto* pw = w.impl().get();
    auto* pbias = bias.defined() ? bias.impl().get() : nullptr;
    std::vector<Tensor<T>> ins = {x, w};
    if (bias.defined()) ins.push_back(bias);
    return make_op_output<T>(
        {Cout, Ho, Wo}, std::move(out), std::move(ins),
        [px, pw, pbias, Cin, H, W, Cout, k, stride, padding, Ho, Wo, S, K,
         direct](TensorImpl<T>& o) {
            if (pbias && pbias->requires_grad) {
                auto& g = detail::grad_of(pbias);
                for (int co = 0; co < Cout; ++co) {
                    T acc = 0;
                    const T* src = o.grad.data() + static_cast<int64_t>(co) * S;
                    for (int64_t i = 0; i < S; ++i) acc += src[i];
                    g[static_cast<size_t>(co)] += acc;
                }
            }
            const bool need_x = px->requires_grad;
            const bool need_w = pw->requires_grad;
            if (!need_x && !need_w) return;
            if (direct) {
                detail::conv_direct_bwd(px->data.data(), pw->data.data(), o.grad.data(), Cin, H, W,
                                        Cout, k, padding, Ho, Wo,
                                        need_x ? detail::grad_of(px).data() : nullptr,
                                        need_w ? detail::grad_of(pw).data() : nullptr);
                return;
            }
            std::vector<T> col(static_cast<size_t>(K * S));
            detail::im2col(px->data.data(), Cin, H, W, k, stride, padding, Ho, Wo, col.data());
            if (need_w)
                gemm_nt(Cout, static_cast<int>(S), static_cast<int>(K), o.grad.data(), col.data(),
                        detail::grad_of(pw).data());
            if (need_x) {
                std::vector<T> dcol(static_cast<size_t>(K * S), T(0));
                gemm_tn(static_cast<int>(K), Cout, static_cast<int>(S), pw->data.data(),
                        o.grad.data(), dcol.data());
                detail::col2im_add(dcol.data(), Cin, H, W, k, stride, padding, Ho, Wo,
                                   detail::grad_of(px).data());
            }
        });
}

// Non-overlapping transposed convolution (kernel size == stride).
// x:[Cin,h,w], w:[Cin,Cout,k,k], output [Cout, h*k, w*k].
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                            int stride) {
    if (x.ndim() != 3 || w.ndim() != 4)
        throw DimensionError("transposed_conv2d expects x[C,h,w], w[I,O,k,k]");
    if (w.dim(2) != w.dim(3) || w.dim(2) != stride)
        throw DimensionError("transposed_conv2d: kernel size must equal stride");
    if (x.dim(0) != w.dim(0)) throw DimensionError("transposed_conv2d: channel mismatch");
    const int Cin = x.dim(0), h = x.dim(1), wdt = x.dim(2);
    const int Cout = w.dim(1), k = w.dim(2);
    const int Ho = h * stride, Wo = wdt * stride;
    if (bias.defined() && bias.numel() != Cout)
        throw DimensionError("transposed_conv2d: bias size mismatch");

    const int64_t S = static_cast<int64_t>(h) * wdt;
    const int M = Cout * k * k;
    std::vector<T> tmp(static_cast<size_t>(M) * S, T(0));
    gemm_tn(M, Cin, static_cast<int>(S), w.data().data(), x.data().data(), tmp.data());
    std::vector<T> out(static_cast<size_t>(Cout) * Ho * Wo);
    for (int co = 0; co < Cout; ++co)
        for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
                const T* row = tmp.data() + ((static_cast<int64_t>(co) * k + dy) * k + dx) * S;
                const T b = bias.defined() ? bias.data()[static_cast<size_t>(co)] : T(0);
                for (int i = 0; i < h; ++i) {
                    T* dst =
                        out.data() + (static_cast<int64_t>(co) * Ho + (i * stride + dy)) * Wo + dx;
                    const T* src = row + static_cast<int64_t>(i) * wdt;
                    for (int j = 0; j < wdt; ++j) dst[static_cast<int64_t>(j) * stride] = src[j] + b;
                }
            }

    auto* px = x.impl().get();
    auto* pw = w.impl().get();
    auto* pbias = bias.defined() ? bias.impl().get() : nullptr;
    std::vector<Tensor<T>> ins = {x, w};
    if (bias.defined()) ins.push_back(bias);
    return make_op_output<T>(
        {Cout, Ho, Wo}, std::move(out), std::move(ins),
        [px, pw, pbias, Cin, h, wdt, Cout, k, stride, Ho, Wo, S, M](TensorImpl<T>& o) {
            std::vector<T> dtmp(static_cast<size_t>(M) * S);
            for (int co = 0; co < Cout; ++co)
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) {
                        T* row = dtmp.data() + ((static_cast<int64_t>(co) * k + dy) * k + dx) * S;
                        for (int i = 0; i < h; ++i) {
                            const T* src = o.grad.data() +
                                           (static_cast<int64_t>(co) * Ho + (i * stride + dy)) * Wo +
                                           dx;
                            T* dst = row + static_cast<int64_t>(i) * wdt;
                            for (int j = 0; j < wdt; ++j) dst[j] = src[static_cast<int64_t>(j) * stride];
                        }
                    }
            if (pbias && pbias->requires_grad) {
                auto& g = detail::grad_of(pbias);
                for (int co = 0; co < Cout; ++co) {
                    T acc = 0;
                    const T* src = o.grad.data() + static_cast<int64_t>(co) * Ho * Wo;
                    for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) acc += src[i];
                    g[static_cast<size_t>(co)] += acc;
                }
            }
            if (px->requires_grad)
                gemm_nn(Cin, M, static_cast<int>(S), pw->data.data(), dtmp.data(),
                        detail::grad_of(px).data());
            if (pw->requires_grad)
                gemm_nt(Cin, static_cast<int>(S), M, px->data.data(), dtmp.data(),
                        detail::grad_of(pw).data());
        });
}

// Subgradient routes to the first maximal element in row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride) {
    if (x.ndim() != 3) throw DimensionError("maxpool2d expects [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (k > H || k > W) throw DimensionError("maxpool2d: kernel larger than input");
    if (k < 1 || stride < 1) throw DimensionError("maxpool2d: bad kernel/stride");
    const int Ho = (H - k) / stride + 1;
    const int Wo = (W - k) / stride + 1;
    std::vector<T> out(static_cast<size_t>(C) * Ho * Wo);
    std::vector<int64_t> argmax(out.size());
    for (int c = 0; c < C; ++c) {
        const T* plane = x.data().data() + static_cast<int64_t>(c) * H * W;
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                int64_t bidx = -1;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const int64_t idx =
                            static_cast<int64_t>(oy * stride + ky) * W + (ox * stride + kx);
                        if (plane[idx] > best) {
                            best = plane[idx];
                            bidx = idx;
                        }
                    }
                const int64_t oidx = (static_cast<int64_t>(c) * Ho + oy) * Wo + ox;
                out[static_cast<size_t>(oidx)] = best;
                argmax[static_cast<size_t>(oidx)] = static_cast<int64_t>(c) * H * W + bidx;
            }
    }
    auto* px = x.impl().get();
    return make_op_output<T>({C, Ho, Wo}, std::move(out), {x},
                             [px, argmax](TensorImpl<T>& o) {
                                 if (!px->requires_grad) return;
                                 auto& g = detail::grad_of(px);
                                 for (size_t i = 0; i < argmax.size(); ++i)
                                     g[static_cast<size_t>(argmax[i])] += o.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// normalizes the last axis
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    if (x.ndim() < 1) throw DimensionError("layer_norm on scalar");
    const int D = x.dim(x.ndim() - 1);
    if (gamma.numel() != D || beta.numel() != D)
        throw DimensionError("layer_norm: affine parameter size mismatch");
    const int64_t rows = x.numel() / D;
    std::vector<T> out(x.data().size());
    std::vector<T> rstd(static_cast<size_t>(rows));
    std::vector<T> mu(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = x.data().data() + r * D;
        T m = 0;
        for (int i = 0; i < D; ++i) m += src[i];
        m /= static_cast<T>(D);
        T var = 0;
        for (int i = 0; i < D; ++i) var += (src[i] - m) * (src[i] - m);
        var /= static_cast<T>(D);
        const T rs = T(1) / std::sqrt(var + eps);
        mu[static_cast<size_t>(r)] = m;
        rstd[static_cast<size_t>(r)] = rs;
        T* dst = out.data() + r * D;
        for (int i = 0; i < D; ++i)
            dst[i] = (src[i] - m) * rs * gamma.data()[static_cast<size_t>(i)] +
                     beta.data()[static_cast<size_t>(i)];
    }
    auto* px = x.impl().get();
    auto* pg = gamma.impl().get();
    auto* pb = beta.impl().get();
    return make_op_output<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [px, pg, pb, D, rows, mu, rstd](TensorImpl<T>& o) {
            const T invd = T(1) / static_cast<T>(D);
            for (int64_t r = 0; r < rows; ++r) {
                const T* src = px->data.data() + r * D;
                const T* dy = o.grad.data() + r * D;
                const T m = mu[static_cast<size_t>(r)];
                const T rs = rstd[static_cast<size_t>(r)];
                if (pg->requires_grad || pb->requires_grad) {
                    auto& gg = detail::grad_of(pg);
                    auto& gb = detail::grad_of(pb);
                    for (int i = 0; i < D; ++i) {
                        gg[static_cast<size_t>(i)] += dy[i] * (src[i] - m) * rs;
                        gb[static_cast<size_t>(i)] += dy[i];
                    }
                }
                if (px->requires_grad) {
                    T sum_dxh = 0, sum_dxh_xh = 0;
                    for (int i = 0; i < D; ++i) {
                        const T xh = (src[i] - m) * rs;
                        const T dxh = dy[i] * pg->data[static_cast<size_t>(i)];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    auto& gx = detail::grad_of(px);
                    T* dst = gx.data() + r * D;
                    for (int i = 0; i < D; ++i) {
                        const T xh = (src[i] - m) * rs;
                        const T dxh = dy[i] * pg->data[static_cast<size_t>(i)];
                        dst[i] += rs * (dxh - invd * sum_dxh - xh * invd * sum_dxh_xh);
                    }
                }
            }
        });
}

enum class BnMode { kTrain, kEval };

template <typename T>
struct BnState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = T(0.1);
};

// x: [N,C,H,W] or [C,H,W] (treated as N=1). Population variance throughout.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BnState<T>& state, BnMode mode, T eps = T(1e-5)) {
    int N, C, H, W;
    if (x.ndim() == 4) {
        N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    } else if (x.ndim() == 3) {
        N = 1, C = x.dim(0), H = x.dim(1), W = x.dim(2);
    } else {
        throw DimensionError("batch_norm2d expects [N,C,H,W] or [C,H,W]");
    }
    if (gamma.numel() != C || beta.numel() != C ||
        static_cast<int>(state.running_mean.size()) != C ||
        static_cast<int>(state.running_var.size()) != C)
        throw DimensionError("batch_norm2d: per-channel parameter size mismatch");
    const int64_t m = static_cast<int64_t>(N) * H * W;
    if (mode == BnMode::kTrain && m == 1)
        throw DomainError("batch_norm2d: degenerate batch (N*H*W == 1) in train mode");

    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t sstride = static_cast<int64_t>(C) * plane;
    std::vector<T> mean_c(static_cast<size_t>(C)), rstd_c(static_cast<size_t>(C));
    if (mode == BnMode::kTrain) {
        for (int c = 0; c < C; ++c) {
            T s = 0;
            for (int n = 0; n < N; ++n) {
                const T* src = x.data().data() + n * sstride + c * plane;
                for (int64_t i = 0; i < plane; ++i) s += src[i];
            }
            const T mu = s / static_cast<T>(m);
            T var = 0;
            for (int n = 0; n < N; ++n) {
                const T* src = x.data().data() + n * sstride + c * plane;
                for (int64_t i = 0; i < plane; ++i) var += (src[i] - mu) * (src[i] - mu);
            }
            var /= static_cast<T>(m);
            mean_c[static_cast<size_t>(c)] = mu;
            rstd_c[static_cast<size_t>(c)] = T(1) / std::sqrt(var + eps);
            state.running_mean[static_cast<size_t>(c)] =
                (T(1) - state.momentum) * state.running_mean[static_cast<size_t>(c)] +
                state.momentum * mu;
            state.running_var[static_cast<size_t>(c)] =
                (T(1) - state.momentum) * state.running_var[static_cast<size_t>(c)] +
                state.momentum * var;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean_c[static_cast<size_t>(c)] = state.running_mean[static_cast<size_t>(c)];
            rstd_c[static_cast<size_t>(c)] =
                T(1) / std::sqrt(state.running_var[static_cast<size_t>(c)] + eps);
        }
    }
    std::vector<T> out(x.data().size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* src = x.data().data() + n * sstride + c * plane;
            T* dst = out.data() + n * sstride + c * plane;
            const T mu = mean_c[static_cast<size_t>(c)];
            const T rs = rstd_c[static_cast<size_t>(c)];
            const T gv = gamma.data()[static_cast<size_t>(c)];
            const T bv = beta.data()[static_cast<size_t>(c)];
            for (int64_t i = 0; i < plane; ++i) dst[i] = (src[i] - mu) * rs * gv + bv;
        }

    auto* px = x.impl().get();
    auto* pg = gamma.impl().get();
    auto* pb = beta.impl().get();
    const bool train = mode == BnMode::kTrain;
    return make_op_output<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [px, pg, pb, N, C, plane, sstride, m, mean_c, rstd_c, train](TensorImpl<T>& o) {
            for (int c = 0; c < C; ++c) {
                const T mu = mean_c[static_cast<size_t>(c)];
                const T rs = rstd_c[static_cast<size_t>(c)];
                const T gv = pg->data[static_cast<size_t>(c)];
                T sum_dy = 0, sum_dy_xh = 0;
                for (int n = 0; n < N; ++n) {
                    const T* src = px->data.data() + n * sstride + c * plane;
                    const T* dy = o.grad.data() + n * sstride + c * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        sum_dy += dy[i];
                        sum_dy_xh += dy[i] * (src[i] - mu) * rs;
                    }
                }
                if (pg->requires_grad) detail::grad_of(pg)[static_cast<size_t>(c)] += sum_dy_xh;
                if (pb->requires_grad) detail::grad_of(pb)[static_cast<size_t>(c)] += sum_dy;
                if (px->requires_grad) {
                    auto& gx = detail::grad_of(px);
                    const T invm = T(1) / static_cast<T>(m);
                    for (int n = 0; n < N; ++n) {
                        const T* src = px->data.data() + n * sstride + c * plane;
                        const T* dy = o.grad.data() + n * sstride + c * plane;
                        T* dst = gx.data() + n * sstride + c * plane;
                        if (train) {
                            for (int64_t i = 0; i < plane; ++i) {
                                const T xh = (src[i] - mu) * rs;
                                dst[i] +=
                                    gv * rs * (dy[i] - invm * sum_dy - xh * invm * sum_dy_xh);
                            }
                        } else {
                            for (int64_t i = 0; i < plane; ++i) dst[i] += gv * rs * dy[i];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

struct AttentionStats {
    uint64_t score_elements = 0;
    uint64_t score_bytes = 0;
    void reset() { *this = AttentionStats{}; }
};
inline thread_local AttentionStats g_attention_stats;

// softmax(Q K^T / sqrt(d) + bias) V
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const Tensor<T>& bias = Tensor<T>()) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw DimensionError("attention expects 2-D Q, K, V");
    const int nq = q.dim(0), d = q.dim(1), nk = k.dim(0);
    if (nk == 0) throw DimensionError("attention: empty key set");
    if (k.dim(1) != d || v.dim(0) != nk)
        throw DimensionError("attention: Q/K/V shape mismatch");
    const int dv = v.dim(1);
    if (bias.defined() && (bias.ndim() != 2 || bias.dim(0) != nq || bias.dim(1) != nk))
        throw DimensionError("attention: bias must be [n_q,n_k]");

    g_attention_stats.score_elements += static_cast<uint64_t>(nq) * nk;
    g_attention_stats.score_bytes += static_cast<uint64_t>(nq) * nk * sizeof(T);

    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    std::vector<T> probs(static_cast<size_t>(nq) * nk, T(0));
    gemm_nt(nq, d, nk, q.data().data(), k.data().data(), probs.data());
    for (int i = 0; i < nq; ++i) {
        T* row = probs.data() + static_cast<size_t>(i) * nk;
        for (int j = 0; j < nk; ++j) {
            row[j] *= scale;
            if (bias.defined()) row[j] += bias.data()[static_cast<size_t>(i) * nk + j];
        }
        T mx = row[0];
        for (int j = 1; j < nk; ++j) mx = std::max(mx, row[j]);
        T denom = 0;
        for (int j = 0; j < nk; ++j) {
            row[j] = std::exp(row[j] - mx);
            denom += row[j];
        }
        for (int j = 0; j < nk; ++j) row[j] /= denom;
    }
    std::vector<T> out(static_cast<size_t>(nq) * dv, T(0));
    gemm_nn(nq, nk, dv, probs.data(), v.data().data(), out.data());

    auto* pq = q.impl().get();
    auto* pk = k.impl().get();
    auto* pv = v.impl().get();
    auto* pbias = bias.defined() ? bias.impl().get() : nullptr;
    std::vector<Tensor<T>> ins = {q, k, v};
    if (bias.defined()) ins.push_back(bias);
    return make_op_output<T>(
        {nq, dv}, std::move(out), std::move(ins),
        [pq, pk, pv, pbias, nq, nk, d, dv, scale, probs](TensorImpl<T>& o) {
            std::vector<T> dp(static_cast<size_t>(nq) * nk, T(0));
            gemm_nt(nq, dv, nk, o.grad.data(), pv->data.data(), dp.data());
            if (pv->requires_grad)
                gemm_tn(nk, nq, dv, probs.data(), o.grad.data(), detail::grad_of(pv).data());
            // softmax backward -> dS (reuse dp buffer)
            for (int i = 0; i < nq; ++i) {
                const T* p = probs.data() + static_cast<size_t>(i) * nk;
                T* dpr = dp.data() + static_cast<size_t>(i) * nk;
                T dot = 0;
                for (int j = 0; j < nk; ++j) dot += p[j] * dpr[j];
                for (int j = 0; j < nk; ++j) dpr[j] = p[j] * (dpr[j] - dot);
            }
            if (pbias && pbias->requires_grad) detail::accum(pbias, dp);
            if (pq->requires_grad || pk->requires_grad) {
                std::vector<T> ds(dp.size());
                for (size_t i = 0; i < dp.size(); ++i) ds[i] = dp[i] * scale;
                if (pq->requires_grad)
                    gemm_nn(nq, nk, d, ds.data(), pk->data.data(), detail::grad_of(pq).data());
                if (pk->requires_grad)
                    gemm_tn(nk, nq, d, ds.data(), pq->data.data(), detail::grad_of(pk).data());
            }
        });
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

namespace detail {

// half-pixel-center source coordinate
inline double src_coord(int dst, int64_t dst_size, int64_t src_size) {
    return (static_cast<double>(dst) + 0.5) * static_cast<double>(src_size) /
               static_cast<double>(dst_size) -
           0.5;
}

struct LinTap {
    int i0, i1;
    double w1;  // weight of i1; i0 gets 1-w1
};

inline LinTap linear_tap(int dst, int dst_size, int src_size) {
    double s = src_coord(dst, dst_size, src_size);
    if (s < 0) s = 0;
    if (s > src_size - 1) s = src_size - 1;
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, src_size - 1);
    return {i0, i1, s - i0};
}

inline double cubic_w(double t) {
    constexpr double a = -0.5;
    const double at = std::fabs(t);
    if (at <= 1.0) return (a + 2.0) * at * at * at - (a + 3.0) * at * at + 1.0;
    if (at < 2.0) return a * at * at * at - 5.0 * a * at * at + 8.0 * a * at - 4.0 * a;
    return 0.0;
}

}  // namespace detail

enum class ResizeMode { kNearest, kBilinear, kBicubic };

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int Ho, int Wo) {
    if (x.ndim() != 3) throw DimensionError("resize expects [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (Ho < 1 || Wo < 1) throw DimensionError("resize: target must be >= 1");
    if (Ho == H && Wo == W) {
        auto* px = x.impl().get();
        return make_op_output<T>(x.shape(), x.data(), {x},
                                 [px](TensorImpl<T>& o) { detail::accum(px, o.grad); });
    }
    std::vector<detail::LinTap> ty(static_cast<size_t>(Ho)), tx(static_cast<size_t>(Wo));
    for (int i = 0; i < Ho; ++i) ty[static_cast<size_t>(i)] = detail::linear_tap(i, Ho, H);
    for (int j = 0; j < Wo; ++j) tx[static_cast<size_t>(j)] = detail::linear_tap(j, Wo, W);
    std::vector<T> out(static_cast<size_t>(C) * Ho * Wo);
    for (int c = 0; c < C; ++c) {
        const T* plane = x.data().data() + static_cast<int64_t>(c) * H * W;
        T* dst = out.data() + static_cast<int64_t>(c) * Ho * Wo;
        for (int i = 0; i < Ho; ++i) {
            const auto& a = ty[static_cast<size_t>(i)];
            for (int j = 0; j < Wo; ++j) {
                const auto& b = tx[static_cast<size_t>(j)];
                const double v =
                    (1 - a.w1) * ((1 - b.w1) * plane[static_cast<int64_t>(a.i0) * W + b.i0] +
                                  b.w1 * plane[static_cast<int64_t>(a.i0) * W + b.i1]) +
                    a.w1 * ((1 - b.w1) * plane[static_cast<int64_t>(a.i1) * W + b.i0] +
                            b.w1 * plane[static_cast<int64_t>(a.i1) * W + b.i1]);
                dst[static_cast<int64_t>(i) * Wo + j] = static_cast<T>(v);
            }
        }
    }
    auto* px = x.impl().get();
    return make_op_output<T>(
        {C, Ho, Wo}, std::move(out), {x}, [px, C, H, W, Ho, Wo, ty, tx](TensorImpl<T>& o) {
            if (!px->requires_grad) return;
            auto& g = detail::grad_of(px);
            for (int c = 0; c < C; ++c) {
                T* gp = g.data() + static_cast<int64_t>(c) * H * W;
                const T* dy = o.grad.data() + static_cast<int64_t>(c) * Ho * Wo;
                for (int i = 0; i < Ho; ++i) {
                    const auto& a = ty[static_cast<size_t>(i)];
                    for (int j = 0; j < Wo; ++j) {
                        const auto& b = tx[static_cast<size_t>(j)];
                        const T dv = dy[static_cast<int64_t>(i) * Wo + j];
                        gp[static_cast<int64_t>(a.i0) * W + b.i0] +=
                            static_cast<T>((1 - a.w1) * (1 - b.w1)) * dv;
                        gp[static_cast<int64_t>(a.i0) * W + b.i1] +=
                            static_cast<T>((1 - a.w1) * b.w1) * dv;
                        gp[static_cast<int64_t>(a.i1) * W + b.i0] +=
                            static_cast<T>(a.w1 * (1 - b.w1)) * dv;
                        gp[static_cast<int64_t>(a.i1) * W + b.i1] +=
                            static_cast<T>(a.w1 * b.w1) * dv;
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, int Ho, int Wo) {
    if (x.ndim() != 3) throw DimensionError("resize expects [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (Ho < 1 || Wo < 1) throw DimensionError("resize: target must be >= 1");
    std::vector<int> iy(static_cast<size_t>(Ho)), ix(static_cast<size_t>(Wo));
    for (int i = 0; i < Ho; ++i)
        iy[static_cast<size_t>(i)] = std::min(
            H - 1, std::max(0, static_cast<int>(std::floor((i + 0.5) * H / double(Ho)))));
    for (int j = 0; j < Wo; ++j)
        ix[static_cast<size_t>(j)] = std::min(
            W - 1, std::max(0, static_cast<int>(std::floor((j + 0.5) * W / double(Wo)))));
    std::vector<T> out(static_cast<size_t>(C) * Ho * Wo);
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j)
                out[(static_cast<int64_t>(c) * Ho + i) * Wo + j] =
                    x.data()[(static_cast<int64_t>(c) * H + iy[static_cast<size_t>(i)]) * W +
                             ix[static_cast<size_t>(j)]];
    auto* px = x.impl().get();
    return make_op_output<T>({C, Ho, Wo}, std::move(out), {x},
                             [px, C, H, W, Ho, Wo, iy, ix](TensorImpl<T>& o) {
                                 if (!px->requires_grad) return;
                                 auto& g = detail::grad_of(px);
                                 for (int c = 0; c < C; ++c)
                                     for (int i = 0; i < Ho; ++i)
                                         for (int j = 0; j < Wo; ++j)
                                             g[(static_cast<int64_t>(c) * H +
                                                iy[static_cast<size_t>(i)]) *
                                                   W +
                                               ix[static_cast<size_t>(j)]] +=
                                                 o.grad[(static_cast<int64_t>(c) * Ho + i) * Wo + j];
                             });
}

// preprocessing only; refuses to participate in a gradient graph
template <typename T>
Tensor<T> resize_bicubic(const Tensor<T>& x, int Ho, int Wo) {
    if (x.ndim() != 3) throw DimensionError("resize expects [C,H,W]");
    if (x.requires_grad() && grad_enabled())
        throw DomainError("resize_bicubic has no gradient path");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (Ho < 1 || Wo < 1) throw DimensionError("resize: target must be >= 1");
    if (Ho == H && Wo == W) return x.detach();
    std::vector<T> out(static_cast<size_t>(C) * Ho * Wo);
    for (int c = 0; c < C; ++c) {
        const T* plane = x.data().data() + static_cast<int64_t>(c) * H * W;
        for (int i = 0; i < Ho; ++i) {
            const double sy = detail::src_coord(i, Ho, H);
            const int y0 = static_cast<int>(std::floor(sy));
            for (int j = 0; j < Wo; ++j) {
                const double sx = detail::src_coord(j, Wo, W);
                const int x0 = static_cast<int>(std::floor(sx));
                double acc = 0;
                for (int dy = -1; dy <= 2; ++dy) {
                    const int yy = std::min(H - 1, std::max(0, y0 + dy));
                    const double wy = detail::cubic_w(sy - (y0 + dy));
                    for (int dx = -1; dx <= 2; ++dx) {
                        const int xx = std::min(W - 1, std::max(0, x0 + dx));
                        acc += wy * detail::cubic_w(sx - (x0 + dx)) *
                               static_cast<double>(plane[static_cast<int64_t>(yy) * W + xx]);
                    }
                }
                out[(static_cast<int64_t>(c) * Ho + i) * Wo + j] = static_cast<T>(acc);
            }
        }
    }
    return Tensor<T>::from_data({C, Ho, Wo}, std::move(out));
}

template <typename T>
Tensor<T> resize(const Tensor<T>& x, int Ho, int Wo, ResizeMode mode) {
    switch (mode) {
        case ResizeMode::kNearest:
            return resize_nearest(x, Ho, Wo);
        case ResizeMode::kBilinear:
            return resize_bilinear(x, Ho, Wo);
        case ResizeMode::kBicubic:
            return resize_bicubic(x, Ho, Wo);
    }
    throw ConfigError("unknown resize mode");
}

}  // namespace dqnet
