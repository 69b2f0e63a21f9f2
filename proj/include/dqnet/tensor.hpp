#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace dqnet {

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor extent must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

namespace detail {
inline thread_local int no_grad_depth = 0;
}

// Disables graph recording for the enclosing scope (evaluation, metrics).
struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <typename T>
struct TensorImpl {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated on demand, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl<T>>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(TensorImpl<T>&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

// Dense row-major tensor with reverse-mode differentiation. Value semantics
// over a shared node: copies alias the same storage and graph edge.
template <typename T>
class Tensor {
public:
    using Impl = TensorImpl<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor full(std::vector<int> shape, T value, bool requires_grad = false) {
        auto impl = std::make_shared<Impl>();
        int64_t n = shape_numel(shape);
        impl->shape = std::move(shape);
        impl->data.assign(static_cast<size_t>(n), value);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                            bool requires_grad = false) {
        int64_t n = shape_numel(shape);
        if (static_cast<int64_t>(data.size()) != n)
            throw DimensionError("data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        auto impl = std::make_shared<Impl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
    int64_t numel() const { return impl_->numel(); }

    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }
    std::vector<T>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    T item() const {
        if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    T& operator[](int64_t i) { return impl_->data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }

    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    // Value copy detached from the graph.
    Tensor detach(bool requires_grad = false) const {
        return from_data(impl_->shape, impl_->data, requires_grad);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(impl_->data.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(impl_->data[i]);
        return Tensor<U>::from_data(impl_->shape, std::move(out));
    }

    bool all_finite() const {
        for (T v : impl_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // Reverse-mode sweep from a scalar root. Single-threaded; the visit order
    // (reverse topological, first-parent-first) fixes the accumulation order.
    void backward() {
        if (numel() != 1) throw DimensionError("backward() requires a scalar root");
        if (!impl_->requires_grad)
            throw NumericError("backward() on a tensor that does not require grad");
        std::vector<Impl*> order;
        std::unordered_set<Impl*> seen;
        std::vector<std::pair<Impl*, size_t>> stack;
        stack.emplace_back(impl_.get(), 0);
        seen.insert(impl_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Impl* p = node->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        impl_->ensure_grad();
        impl_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Impl* node = *it;
            if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
        }
    }

    const std::shared_ptr<Impl>& impl() const { return impl_; }

private:
    std::shared_ptr<Impl> impl_;
};

// Op-construction helper: allocates the output node and wires the graph edge
// when any input requires grad and recording is enabled. The backward closure
// must not capture the output's shared_ptr (that would leak the graph).
template <typename T>
Tensor<T> make_op_output(std::vector<int> shape,
                         std::vector<T> data,
                         std::vector<Tensor<T>> inputs,
                         std::function<void(TensorImpl<T>&)> backward_fn) {
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(data));
    bool rg = false;
    if (grad_enabled())
        for (const auto& in : inputs)
            if (in.defined() && in.requires_grad()) rg = true;
    if (rg) {
        out.impl()->requires_grad = true;
        for (auto& in : inputs)
            if (in.defined()) out.impl()->parents.push_back(in.impl());
        out.impl()->backward_fn = std::move(backward_fn);
    }
    return out;
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& context) {
    if (!t.all_finite()) throw NumericError("non-finite values in " + context);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace dqnet
