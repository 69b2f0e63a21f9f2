#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dqnet/ops.hpp"
#include "dqnet/rng.hpp"
#include "dqnet/tensor.hpp"

namespace dqnet {

template <typename T>
using ParamFn = std::function<void(const std::string&, Tensor<T>&)>;
template <typename T>
using BufferFn = std::function<void(const std::string&, std::vector<T>&)>;

// mini-batch of per-sample tensors; ops without cross-sample coupling map over it
template <typename T>
using Batch = std::vector<Tensor<T>>;

// Every parameter is initialized from an RNG derived from its own name, so two
// model variants that share a parameter name share its initial value. Ablation
// sweeps rely on this for common-random-numbers runs.
template <typename T>
class ParamInit {
public:
    explicit ParamInit(uint64_t seed) : seed_(seed) {}

    Tensor<T> kaiming(const std::string& name, std::vector<int> shape, int64_t fan_in) {
        Rng rng(mix_seed(seed_, fnv1a64(name)));
        const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
        std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : v) x = static_cast<T>(rng.normal(0.0, std));
        return Tensor<T>::from_data(std::move(shape), std::move(v), true);
    }

    Tensor<T> trunc_normal(const std::string& name, std::vector<int> shape, double std) {
        Rng rng(mix_seed(seed_, fnv1a64(name)));
        std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : v) x = static_cast<T>(rng.trunc_normal(std));
        return Tensor<T>::from_data(std::move(shape), std::move(v), true);
    }

    Tensor<T> zeros(std::vector<int> shape) { return Tensor<T>::zeros(std::move(shape), true); }
    Tensor<T> ones(std::vector<int> shape) {
        return Tensor<T>::full(std::move(shape), T(1), true);
    }

private:
    uint64_t seed_;
};

template <typename T>
struct LinearLayer {
    Tensor<T> w;  // [out, in]
    Tensor<T> b;  // [out], optional

    static LinearLayer create(ParamInit<T>& init, const std::string& name, int in, int out,
                              bool bias = true, bool zero_init = false) {
        LinearLayer l;
        l.w = zero_init ? init.zeros({out, in}) : init.trunc_normal(name + ".weight", {out, in}, 0.02);
        if (bias) l.b = init.zeros({out});
        return l;
    }

    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w, b); }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        fn(prefix + ".weight", w);
        if (b.defined()) fn(prefix + ".bias", b);
    }
};

template <typename T>
struct ConvLayer {
    Tensor<T> w;  // [out, in, k, k]
    Tensor<T> b;  // [out], optional
    int stride = 1;
    int pad = 0;

    static ConvLayer create(ParamInit<T>& init, const std::string& name, int in, int out, int k,
                            int stride, int pad, bool bias = true, bool zero_init = false) {
        ConvLayer c;
        c.w = zero_init ? init.zeros({out, in, k, k})
                        : init.kaiming(name + ".weight", {out, in, k, k},
                                       static_cast<int64_t>(in) * k * k);
        if (bias) c.b = init.zeros({out});
        c.stride = stride;
        c.pad = pad;
        return c;
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
    Batch<T> forward(const Batch<T>& xs) const {
        Batch<T> out;
        out.reserve(xs.size());
        for (const auto& x : xs) out.push_back(forward(x));
        return out;
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        fn(prefix + ".weight", w);
        if (b.defined()) fn(prefix + ".bias", b);
    }
};

template <typename T>
struct TConvLayer {
    Tensor<T> w;  // [in, out, k, k], kernel == stride
    Tensor<T> b;
    int stride = 1;

    static TConvLayer create(ParamInit<T>& init, const std::string& name, int in, int out,
                             int stride, bool bias = true) {
        TConvLayer c;
        c.w = init.kaiming(name + ".weight", {in, out, stride, stride}, in);
        if (bias) c.b = init.zeros({out});
        c.stride = stride;
        return c;
    }

    Tensor<T> forward(const Tensor<T>& x) const { return transposed_conv2d(x, w, b, stride); }
    Batch<T> forward(const Batch<T>& xs) const {
        Batch<T> out;
        out.reserve(xs.size());
        for (const auto& x : xs) out.push_back(forward(x));
        return out;
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        fn(prefix + ".weight", w);
        if (b.defined()) fn(prefix + ".bias", b);
    }
};

template <typename T>
struct LayerNormLayer {
    Tensor<T> gamma, beta;
    T eps = T(1e-5);

    static LayerNormLayer create(ParamInit<T>& init, int dim) {
        LayerNormLayer l;
        l.gamma = init.ones({dim});
        l.beta = init.zeros({dim});
        return l;
    }

    Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        fn(prefix + ".gamma", gamma);
        fn(prefix + ".beta", beta);
    }
};

// Statistics are shared across the samples of a batch by stacking them into a
// single [N,C,H,W] tensor around the normalization.
template <typename T>
struct BatchNormLayer {
    Tensor<T> gamma, beta;
    BnState<T> state;
    T eps = T(1e-5);

    static BatchNormLayer create(ParamInit<T>& init, int channels) {
        BatchNormLayer l;
        l.gamma = init.ones({channels});
        l.beta = init.zeros({channels});
        l.state.running_mean.assign(static_cast<size_t>(channels), T(0));
        l.state.running_var.assign(static_cast<size_t>(channels), T(1));
        return l;
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        return batch_norm2d(x, gamma, beta, state, training ? BnMode::kTrain : BnMode::kEval, eps);
    }

    Batch<T> forward(const Batch<T>& xs, bool training) {
        if (xs.size() == 1) return {forward(xs[0], training)};
        std::vector<Tensor<T>> expanded;
        expanded.reserve(xs.size());
        const int C = xs[0].dim(0), H = xs[0].dim(1), W = xs[0].dim(2);
        for (const auto& x : xs) expanded.push_back(reshape(x, {1, C, H, W}));
        Tensor<T> stacked = concat_axis0(expanded);
        Tensor<T> normed = forward(stacked, training);
        Batch<T> out;
        out.reserve(xs.size());
        for (int n = 0; n < static_cast<int>(xs.size()); ++n)
            out.push_back(reshape(slice_axis0(normed, n, n + 1), {C, H, W}));
        return out;
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        fn(prefix + ".gamma", gamma);
        fn(prefix + ".beta", beta);
    }
    void visit_buffers(const std::string& prefix, const BufferFn<T>& fn) {
        fn(prefix + ".running_mean", state.running_mean);
        fn(prefix + ".running_var", state.running_var);
    }
};

template <typename T>
inline Batch<T> map_batch(const Batch<T>& xs, const std::function<Tensor<T>(const Tensor<T>&)>& f) {
    Batch<T> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(f(x));
    return out;
}

}  // namespace dqnet
