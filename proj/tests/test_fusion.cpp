#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dqnet/fusion.hpp"
#include "dqnet/gradcheck.hpp"

using namespace dqnet;

namespace {

TokenGrid<double> random_grid(int h, int w, int dim, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(h) * w * dim);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return TokenGrid<double>{h, w, Tensor<double>::from_data({h * w, dim}, std::move(v))};
}

Tensor<double> random_feature(int c, int hw, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(c) * hw * hw);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor<double>::from_data({c, hw, hw}, std::move(v));
}

// full cross attention over all tokens, written from the formula, including
// an independent re-derivation of the relative-position bias lookup
std::vector<double> full_cross_attention_oracle(const RbqModule<double>& m,
                                                const TokenGrid<double>& z,
                                                const TokenGrid<double>& y) {
    const int n = z.count(), D = z.dim(), heads = m.heads, dh = D / heads;
    const int w = m.window, span = 2 * w - 1;
    auto project = [&](const Tensor<double>& t, const LinearLayer<double>& l) {
        std::vector<double> out(static_cast<size_t>(n) * D, 0.0);
        for (int i = 0; i < n; ++i)
            for (int o = 0; o < D; ++o) {
                double acc = l.b.defined() ? l.b[o] : 0.0;
                for (int c = 0; c < D; ++c) acc += t.data()[i * D + c] * l.w[o * D + c];
                out[static_cast<size_t>(i) * D + o] = acc;
            }
        return out;
    };
    auto q = project(z.tokens, m.wq);
    auto k = project(y.tokens, m.wk);
    auto v = project(y.tokens, m.wv);
    std::vector<double> attn(static_cast<size_t>(n) * D, 0.0);
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < n; ++i) {
            std::vector<double> wgt(static_cast<size_t>(n));
            double denom = 0;
            const int qy = i / z.w, qx = i % z.w;
            for (int j = 0; j < n; ++j) {
                double s = 0;
                for (int c = 0; c < dh; ++c) s += q[i * D + h * dh + c] * k[j * D + h * dh + c];
                s /= std::sqrt(double(dh));
                const int ky = j / z.w, kx = j % z.w;
                s += m.bias_table[((qy - ky + w - 1) * span + (qx - kx + w - 1)) * heads + h];
                wgt[static_cast<size_t>(j)] = s;
            }
            double mx = wgt[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, wgt[static_cast<size_t>(j)]);
            for (int j = 0; j < n; ++j) {
                wgt[static_cast<size_t>(j)] = std::exp(wgt[static_cast<size_t>(j)] - mx);
                denom += wgt[static_cast<size_t>(j)];
            }
            for (int j = 0; j < n; ++j)
                for (int c = 0; c < dh; ++c)
                    attn[static_cast<size_t>(i) * D + h * dh + c] +=
                        wgt[static_cast<size_t>(j)] / denom * v[j * D + h * dh + c];
        }
    std::vector<double> out(static_cast<size_t>(n) * D);
    for (int i = 0; i < n; ++i)
        for (int o = 0; o < D; ++o) {
            double acc = m.out_proj.b[o];
            for (int c = 0; c < D; ++c)
                acc += attn[static_cast<size_t>(i) * D + c] * m.out_proj.w[o * D + c];
            out[static_cast<size_t>(i) * D + o] =
                acc + z.tokens.data()[i * D + o] + y.tokens.data()[i * D + o];
        }
    return out;
}

}  // namespace

TEST_CASE("window partition: enumeration, single window, errors") {
    Rng rng(1);
    auto grid = random_grid(4, 4, 3, rng);

    auto all = window_partition(grid, 4);
    CHECK(all.size() == 1);
    for (int64_t i = 0; i < grid.tokens.numel(); ++i) CHECK(all[0][i] == grid.tokens[i]);

    auto wins = window_partition(grid, 2);
    CHECK(wins.size() == 4);
    // window 0 holds grid positions (0,0),(0,1),(1,0),(1,1) -> tokens 0,1,4,5
    const int ref[4] = {0, 1, 4, 5};
    for (int t = 0; t < 4; ++t)
        for (int d = 0; d < 3; ++d) CHECK(wins[0][t * 3 + d] == grid.tokens[ref[t] * 3 + d]);

    CHECK_THROWS_AS(window_partition(grid, 3), ConfigError);
}

TEST_CASE("window partition/merge roundtrip is bit exact") {
    Rng rng(2);
    for (auto [h, w, win] : {std::tuple{4, 4, 2}, {8, 8, 4}, {8, 8, 8}, {6, 6, 3}, {8, 8, 1}}) {
        auto grid = random_grid(h, w, 5, rng);
        auto parts = window_partition(grid, win);
        auto merged = window_merge(parts, h, w, win);
        REQUIRE(merged.tokens.numel() == grid.tokens.numel());
        for (int64_t i = 0; i < grid.tokens.numel(); ++i)
            CHECK(merged.tokens[i] == grid.tokens[i]);
    }
    auto grid = random_grid(4, 4, 5, rng);
    auto parts = window_partition(grid, 2);
    parts.pop_back();
    CHECK_THROWS_AS(window_merge(parts, 4, 4, 2), DimensionError);
}

TEST_CASE("rbq_cost: ratios, monotonicity, direct counts") {
    // 16x16 grid, w=4: 256*16 = 4096 score elements vs 65536 for full attention
    auto c4 = rbq_cost(16, 16, 4);
    CHECK(c4.score_elements == 4096);
    auto cfull = rbq_cost(16, 16, 16);
    CHECK(cfull.score_elements == 65536);
    CHECK(double(c4.score_elements) / double(cfull.score_elements) == doctest::Approx(1.0 / 16));

    uint64_t prev = 0;
    for (int w : {1, 2, 4, 8, 16}) {
        auto c = rbq_cost(16, 16, w);
        CHECK(c.score_elements ==
              static_cast<uint64_t>(256) * static_cast<uint64_t>(w) * static_cast<uint64_t>(w));
        CHECK(c.score_elements > prev);
        prev = c.score_elements;
        CHECK(double(c.score_elements) / double(cfull.score_elements) ==
              doctest::Approx(double(w) * w / 256.0));
    }
}

TEST_CASE("rbq: zero projections reduce to element-wise addition, exactly") {
    const int D = 8;
    ParamInit<double> init(61);
    auto m = RbqModule<double>::create(init, "r", D, 2, 2);
    std::fill(m.wq.w.data().begin(), m.wq.w.data().end(), 0.0);
    std::fill(m.wk.w.data().begin(), m.wk.w.data().end(), 0.0);
    std::fill(m.wv.w.data().begin(), m.wv.w.data().end(), 0.0);
    Rng rng(3);
    auto z = random_grid(4, 4, D, rng);
    auto y = random_grid(4, 4, D, rng);
    auto b = m.forward(z, y);
    for (int64_t i = 0; i < b.tokens.numel(); ++i)
        CHECK(b.tokens[i] == z.tokens[i] + y.tokens[i]);
}

TEST_CASE("rbq residual guarantee: zero output projection alone suffices") {
    const int D = 8;
    ParamInit<double> init(67);
    auto m = RbqModule<double>::create(init, "r", D, 2, 2);  // wq/wk/wv random, out zero
    Rng rng(4);
    auto z = random_grid(4, 4, D, rng);
    auto y = random_grid(4, 4, D, rng);
    auto b = m.forward(z, y);
    for (int64_t i = 0; i < b.tokens.numel(); ++i)
        CHECK(b.tokens[i] == z.tokens[i] + y.tokens[i]);
}

TEST_CASE("rbq with w=1: each query reads its own projected value row") {
    const int D = 6;
    ParamInit<double> init(71);
    auto m = RbqModule<double>::create(init, "r", D, 1, 2);
    Rng rng(5);
    for (auto& x : m.out_proj.w.data()) x = rng.uniform(-0.5, 0.5);
    auto z = random_grid(4, 4, D, rng);
    auto y = random_grid(4, 4, D, rng);
    auto got = m.forward(z, y);
    auto expect = add(add(m.out_proj.forward(m.wv.forward(y.tokens)), z.tokens), y.tokens);
    for (int64_t i = 0; i < got.tokens.numel(); ++i)
        CHECK(got.tokens[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("rbq with window == grid equals full cross attention") {
    const int D = 8, heads = 2, g = 4;
    ParamInit<double> init(73);
    auto m = RbqModule<double>::create(init, "r", D, g, heads);
    Rng rng(6);
    for (auto& x : m.out_proj.w.data()) x = rng.uniform(-0.5, 0.5);
    for (auto& x : m.bias_table.data()) x = rng.uniform(-0.5, 0.5);
    auto z = random_grid(g, g, D, rng);
    auto y = random_grid(g, g, D, rng);
    auto got = m.forward(z, y);
    auto ref = full_cross_attention_oracle(m, z, y);
    for (int64_t i = 0; i < got.tokens.numel(); ++i)
        CHECK(rel_dev(got.tokens[i], ref[static_cast<size_t>(i)]) < 1e-6);
}

TEST_CASE("rbq locality: in-window permutations of (K,V) do not move the window") {
    const int D = 8, g = 4, w = 2;
    ParamInit<double> init(79);
    auto m = RbqModule<double>::create(init, "r", D, w, 2);
    Rng rng(7);
    for (auto& x : m.out_proj.w.data()) x = rng.uniform(-0.5, 0.5);
    // bias table stays zero so attention is a pure set operation
    auto z = random_grid(g, g, D, rng);
    auto y = random_grid(g, g, D, rng);
    auto attn_part = [&](const TokenGrid<double>& yy) {
        auto b = m.forward(z, yy);
        return sub(sub(b.tokens, z.tokens), yy.tokens);
    };
    auto base = attn_part(y);

    // swap tokens 0 <-> 5: both live in window 0 (positions (0,0) and (1,1))
    auto swapped = y;
    std::vector<int> perm(16);
    for (int i = 0; i < 16; ++i) perm[static_cast<size_t>(i)] = i;
    std::swap(perm[0], perm[5]);
    swapped.tokens = gather_rows(y.tokens, perm);
    auto moved = attn_part(swapped);
    for (int64_t i = 0; i < base.numel(); ++i)
        CHECK(moved[i] == doctest::Approx(base[i]).epsilon(1e-9));

    // swap across windows: token 0 (window 0) with token 2 (window 1)
    std::vector<int> cross(16);
    for (int i = 0; i < 16; ++i) cross[static_cast<size_t>(i)] = i;
    std::swap(cross[0], cross[2]);
    auto crossed = y;
    crossed.tokens = gather_rows(y.tokens, cross);
    auto movedx = attn_part(crossed);
    double dev = 0;
    for (int64_t i = 0; i < base.numel(); ++i) dev = std::max(dev, std::fabs(movedx[i] - base[i]));
    CHECK(dev > 1e-6);
}

TEST_CASE("rbq attention-score instrumentation scales as w^2") {
    const int D = 8, g = 8;
    ParamInit<double> init(83);
    Rng rng(8);
    auto z = random_grid(g, g, D, rng);
    auto y = random_grid(g, g, D, rng);
    uint64_t full = 0;
    for (int w : {1, 2, 4, 8}) {
        auto m = RbqModule<double>::create(init, "r", D, w, 2);
        g_attention_stats.reset();
        (void)m.forward(z, y);
        const uint64_t measured = g_attention_stats.score_elements;
        // heads * tokens * w^2
        CHECK(measured == static_cast<uint64_t>(2) * 64 * w * w);
        if (w == 8) full = measured;
        const auto predicted = rbq_cost(g, g, w);
        CHECK(measured == 2 * predicted.score_elements);
    }
    CHECK(full == 2ull * 64 * 64);
}

TEST_CASE("tokenize_align: same-scale identity, constants, pooled oracle") {
    ParamInit<double> init(89);
    Rng rng(9);
    // stage at the grid scale (ratio 1): output = LN(conv1x1(r))
    auto fs = FusionStage<double>::create(init, 4, 6, 8, 8, 10, 2, 2, FusionMode::kAdd);
    auto r = random_feature(6, 8, rng);
    auto tg = fs.tokenize_align(r);
    auto ref = layer_norm(chw_to_tokens(conv2d(r, fs.align_conv.w, fs.align_conv.b)),
                          fs.align_ln.gamma, fs.align_ln.beta, 1e-5);
    for (int64_t i = 0; i < ref.numel(); ++i)
        CHECK(tg.tokens[i] == doctest::Approx(ref[i]).epsilon(1e-12));

    // constant map with zeroed projection: post-norm tokens equal beta
    auto fsz = FusionStage<double>::create(init, 4, 6, 8, 8, 10, 2, 2, FusionMode::kAdd);
    std::fill(fsz.align_conv.w.data().begin(), fsz.align_conv.w.data().end(), 0.0);
    for (auto& x : fsz.align_ln.beta.data()) x = 0.37;
    auto tc = fsz.tokenize_align(Tensor<double>::full({6, 8, 8}, 2.0));
    for (int64_t i = 0; i < tc.tokens.numel(); ++i) CHECK(tc.tokens[i] == doctest::Approx(0.37));

    // 1/4-scale stage on a 128px image with an 8x8 grid: maxpool k=4 first
    auto fs2 = FusionStage<double>::create(init, 2, 6, 32, 8, 10, 2, 2, FusionMode::kAdd);
    auto r2 = random_feature(6, 32, rng);
    auto tg2 = fs2.tokenize_align(r2);
    auto ref2 = layer_norm(
        chw_to_tokens(conv2d(maxpool2d(r2, 4, 4), fs2.align_conv.w, fs2.align_conv.b)),
        fs2.align_ln.gamma, fs2.align_ln.beta, 1e-5);
    for (int64_t i = 0; i < ref2.numel(); ++i)
        CHECK(tg2.tokens[i] == doctest::Approx(ref2[i]).epsilon(1e-12));

    // coarser stage (1/32 on a 1/16 grid) resizes up bilinearly
    auto fs5 = FusionStage<double>::create(init, 5, 6, 4, 8, 10, 2, 2, FusionMode::kAdd);
    auto r5 = random_feature(6, 4, rng);
    auto tg5 = fs5.tokenize_align(r5);
    auto ref5 = layer_norm(
        chw_to_tokens(conv2d(resize_bilinear(r5, 8, 8), fs5.align_conv.w, fs5.align_conv.b)),
        fs5.align_ln.gamma, fs5.align_ln.beta, 1e-5);
    for (int64_t i = 0; i < ref5.numel(); ++i)
        CHECK(tg5.tokens[i] == doctest::Approx(ref5[i]).epsilon(1e-12));
}

TEST_CASE("detokenize_align: roundtrip shapes for every stage, zero tokens") {
    ParamInit<double> init(97);
    Rng rng(10);
    // 128px image, 8x8 grid: stage sizes 32,16,8,4
    for (int stage = 2; stage <= 5; ++stage) {
        const int size = 128 >> stage;
        auto fs = FusionStage<double>::create(init, stage, 6, size, 8, 10, 2, 2, FusionMode::kAdd);
        auto r = random_feature(6, size, rng);
        auto grid = fs.tokenize_align(r);
        auto back = fs.detokenize_align(grid, false);
        CHECK(back.shape() == r.shape());
    }

    // zero tokens, zero bias -> zero pre-norm feature (eval norm keeps zeros)
    auto fs = FusionStage<double>::create(init, 3, 6, 16, 8, 10, 2, 2, FusionMode::kAdd);
    auto zg = TokenGrid<double>{8, 8, Tensor<double>::zeros({64, 10})};
    auto out = fs.detokenize_align(zg, false);
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 0.0);
}

TEST_CASE("gradients flow through align -> fuse -> de-align") {
    ParamInit<double> init(101);
    Rng rng(11);
    for (auto mode :
         {FusionMode::kRbq, FusionMode::kAdd, FusionMode::kMultiply, FusionMode::kConcat}) {
        auto fs = FusionStage<double>::create(init, 3, 4, 8, 4, 6, 2, 2, mode);
        if (mode == FusionMode::kRbq)
            for (auto& x : fs.rbq.out_proj.w.data()) x = rng.uniform(-0.5, 0.5);
        auto z = random_grid(4, 4, 6, rng);
        auto r = random_feature(4, 8, rng);
        auto rep = grad_check(
            std::string("fusion_chain_") + fusion_mode_name(mode),
            [&](Tensor<double>& t) {
                auto y = fs.tokenize_align(t);
                auto fused = fs.fuse(z, y);
                auto back = fs.detokenize_align(fused, true);
                return sum(mul(back, back));
            },
            r, 1e-5, 1e-5);
        CHECK(rep.pass);
    }
}

TEST_CASE("mismatched grids are rejected") {
    ParamInit<double> init(103);
    auto fs = FusionStage<double>::create(init, 3, 4, 8, 4, 6, 2, 2, FusionMode::kRbq);
    Rng rng(12);
    auto z = random_grid(4, 4, 6, rng);
    auto y8 = random_grid(8, 8, 6, rng);
    CHECK_THROWS_AS(fs.fuse(z, y8), DimensionError);
    auto fs2 = FusionStage<double>::create(init, 3, 4, 8, 4, 6, 2, 2, FusionMode::kAdd);
    CHECK_THROWS_AS(fs2.tokenize_align(Tensor<double>::zeros({4, 12, 12})), DimensionError);
}
