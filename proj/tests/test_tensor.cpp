#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dqnet/gemm.hpp"
#include "dqnet/gradcheck.hpp"
#include "dqnet/ops.hpp"
#include "dqnet/rng.hpp"
#include "dqnet/tensor.hpp"

using namespace dqnet;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return Tensor<double>::from_data(std::move(shape), std::move(v));
}

void naive_gemm_nn(int M, int K, int N, const double* A, const double* B, double* C) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double s = 0;
            for (int k = 0; k < K; ++k) s += A[i * K + k] * B[k * N + j];
            C[i * N + j] += s;
        }
}

}  // namespace

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor<double>::from_data({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
    CHECK_THROWS_AS(Tensor<double>::zeros({0, 3}), DimensionError);
    auto t = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.shape() == std::vector<int>{2, 3});
    CHECK(t.all_finite());
    t[0] = std::nan("");
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(require_finite(t, "unit"), NumericError);
}

TEST_CASE("gemm variants match naive reference") {
    Rng rng(7);
    for (int trial = 0; trial < 4; ++trial) {
        const int M = static_cast<int>(rng.randint(1, 17));
        const int K = static_cast<int>(rng.randint(1, 33));
        const int N = static_cast<int>(rng.randint(1, 519));
        auto A = random_tensor({M, K}, rng);
        auto B = random_tensor({K, N}, rng);
        std::vector<double> ref(static_cast<size_t>(M) * N, 0.0), got(ref.size(), 0.0);
        naive_gemm_nn(M, K, N, A.data().data(), B.data().data(), ref.data());
        gemm_nn(M, K, N, A.data().data(), B.data().data(), got.data());
        for (size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-12));

        // A^T path: store A as [K,M]
        std::vector<double> At(static_cast<size_t>(K) * M);
        for (int i = 0; i < M; ++i)
            for (int k = 0; k < K; ++k) At[static_cast<size_t>(k) * M + i] = A.data()[i * K + k];
        std::fill(got.begin(), got.end(), 0.0);
        gemm_tn(M, K, N, At.data(), B.data().data(), got.data());
        for (size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-12));

        // B^T path: store B as [N,K]
        std::vector<double> Bt(static_cast<size_t>(N) * K);
        for (int k = 0; k < K; ++k)
            for (int j = 0; j < N; ++j) Bt[static_cast<size_t>(j) * K + k] = B.data()[k * N + j];
        std::fill(got.begin(), got.end(), 0.0);
        gemm_nt(M, K, N, A.data().data(), Bt.data(), got.data());
        for (size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("autograd basics: sum and sum of squares") {
    Rng rng(3);
    auto x = random_tensor({4, 5}, rng);

    auto r1 = grad_check("sum", [](Tensor<double>& t) { return sum(t); }, x, 1e-4, 1e-5);
    CHECK(r1.pass);
    CHECK(r1.max_abs_dev < 1e-9);

    auto r2 = grad_check(
        "sum_sq", [](Tensor<double>& t) { return sum(mul(t, t)); }, x, 1e-4, 1e-5);
    CHECK(r2.pass);

    // analytic value: d/dx sum(x^2) = 2x
    auto y = sum(mul(x, x));
    x.set_requires_grad(true);
    x.zero_grad();
    auto y2 = sum(mul(x, x));
    y2.backward();
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(x.grad()[static_cast<size_t>(i)] == doctest::Approx(2.0 * x[i]));
    (void)y;
}

TEST_CASE("elementwise primitives pass finite-difference checks") {
    Rng rng(11);
    auto x = random_tensor({3, 7}, rng);
    // keep |x| away from kinks of abs/relu/clamp
    for (int64_t i = 0; i < x.numel(); ++i)
        if (std::fabs(x[i]) < 1e-2) x[i] = 0.05;

    auto check = [&](const char* name, auto fn) {
        auto r = grad_check(name, fn, x, 1e-5, 1e-5);
        INFO(name, " rel dev ", r.max_rel_dev);
        CHECK(r.pass);
    };
    check("relu", [](Tensor<double>& t) { return sum(relu(t)); });
    check("gelu", [](Tensor<double>& t) { return sum(gelu(t)); });
    check("sigmoid", [](Tensor<double>& t) { return sum(sigmoid(t)); });
    check("abs", [](Tensor<double>& t) { return sum(abs_val(t)); });
    check("affine", [](Tensor<double>& t) { return sum(affine(t, 3.0, -1.0)); });
    check("mul", [](Tensor<double>& t) { return sum(mul(t, affine(t, 2.0, 0.5))); });
    check("div", [](Tensor<double>& t) { return sum(div(t, affine(abs_val(t), 1.0, 2.0))); });
    check("mean", [](Tensor<double>& t) { return mean(mul(t, t)); });
    check("log", [](Tensor<double>& t) { return sum(log_t(affine(abs_val(t), 1.0, 1.0))); });
}

TEST_CASE("shape ops route gradients faithfully") {
    Rng rng(5);
    auto x = random_tensor({4, 6}, rng);
    auto r = grad_check(
        "reshape_concat_slice",
        [](Tensor<double>& t) {
            auto a = reshape(t, {2, 12});
            auto b = concat_axis0(std::vector<Tensor<double>>{a, a});
            auto c = slice_axis0(b, 1, 3);
            auto d = concat_cols(c, c);
            auto e = slice_cols(d, 3, 20);
            auto f = gather_rows(e, {1, 0, 1});
            return sum(mul(f, f));
        },
        x, 1e-4, 1e-5);
    CHECK(r.pass);

    auto y = random_tensor({3, 4, 5}, rng);
    auto r2 = grad_check(
        "chw_tokens_roundtrip",
        [](Tensor<double>& t) {
            auto tok = chw_to_tokens(t);
            auto back = tokens_to_chw(tok, 4, 5);
            return sum(mul(back, back));
        },
        y, 1e-4, 1e-5);
    CHECK(r2.pass);

    // roundtrip is bit exact
    auto tok = chw_to_tokens(y);
    auto back = tokens_to_chw(tok, 4, 5);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(back[i] == y[i]);

    auto cm = channel_mean(y);
    CHECK(cm.shape() == std::vector<int>{4, 5});
    double expect = (y[0] + y[20] + y[40]) / 3.0;
    CHECK(cm[0] == doctest::Approx(expect));
}

TEST_CASE("matmul and linear against finite differences") {
    Rng rng(13);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 5}, rng);
    auto rA = grad_check(
        "matmul_lhs", [&](Tensor<double>& t) { return sum(mul(matmul(t, b), matmul(t, b))); }, a,
        1e-4, 1e-5);
    CHECK(rA.pass);
    auto rB = grad_check(
        "matmul_rhs", [&](Tensor<double>& t) { return sum(mul(matmul(a, t), matmul(a, t))); }, b,
        1e-4, 1e-5);
    CHECK(rB.pass);

    auto w = random_tensor({5, 4}, rng);
    auto bias = random_tensor({5}, rng);
    auto rw = grad_check(
        "linear_w", [&](Tensor<double>& t) { return sum(mul(linear(a, t, bias), linear(a, t, bias))); },
        w, 1e-4, 1e-5);
    CHECK(rw.pass);
    auto rb = grad_check(
        "linear_bias", [&](Tensor<double>& t) { return sum(mul(linear(a, w, t), linear(a, w, t))); },
        bias, 1e-4, 1e-5);
    CHECK(rb.pass);
}

TEST_CASE("forward passes are deterministic") {
    Rng rng(17);
    auto x = random_tensor({2, 16, 16}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto b = random_tensor({3}, rng);
    auto y1 = conv2d(x, w, b, 1, 1);
    auto y2 = conv2d(x, w, b, 1, 1);
    for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);
}
