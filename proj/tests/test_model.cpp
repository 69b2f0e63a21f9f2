#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dqnet/gradcheck.hpp"
#include "dqnet/losses.hpp"
#include "dqnet/model.hpp"

using namespace dqnet;

namespace {

ModelConfig tiny_cfg(int image = 64) {
    ModelConfig cfg;
    cfg.vit.image_size = image;
    cfg.vit.patch_size = 8;
    cfg.vit.embed_dim = 16;
    cfg.vit.depth = 1;
    cfg.vit.heads = 2;
    cfg.vit.mlp_ratio = 2.0;
    cfg.cnn.channels = {4, 4, 8, 8, 16};
    cfg.window = 2;
    cfg.decoder_width = 16;
    return cfg;
}

Tensor<double> random_image(int size, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(3) * size * size);
    for (auto& x : v) x = rng.uniform(0.0, 1.0);
    return Tensor<double>::from_data({3, size, size}, std::move(v));
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("config validation catches bad geometry") {
    auto cfg = tiny_cfg();
    cfg.vit.image_size = 48;  // not divisible by 32
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_cfg();
    cfg.window = 3;  // does not divide the 8x8 grid
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(tiny_cfg().validate());
}

TEST_CASE("forward output shapes, including the 128px desk geometry") {
    auto model = DqnetModel<double>::create(tiny_cfg(), 1);
    Rng rng(1);
    auto out = model.forward(random_image(64, rng), false);
    CHECK(out.logits.shape() == std::vector<int>{1, 64, 64});
    CHECK(out.enhanced.size() == 4);
    CHECK(out.aux.size() == 4);
    for (const auto& p : out.aux) CHECK(p.shape() == std::vector<int>{64, 64});
    CHECK(out.vit_grid.tokens.shape() == std::vector<int>{64, 16});

    auto cfg128 = tiny_cfg(128);
    cfg128.vit.patch_size = 16;
    auto big = DqnetModel<double>::create(cfg128, 1);
    auto bout = big.forward(random_image(128, rng), false);
    CHECK(bout.logits.shape() == std::vector<int>{1, 128, 128});
}

TEST_CASE("empty enhancement mask degenerates to a plain cnn + decoder") {
    auto cfg = tiny_cfg();
    cfg.enhance = {false, false, false, false};
    auto model = DqnetModel<double>::create(cfg, 2);
    Rng rng(2);
    auto out = model.forward(random_image(64, rng), false);
    CHECK(out.logits.shape() == std::vector<int>{1, 64, 64});
    CHECK(out.enhanced.empty());
    CHECK(out.aux.empty());
    // no fusion parameters exist in this configuration
    bool has_fusion_params = false;
    model.visit([&](const std::string& name, Tensor<double>&) {
        if (name.rfind("fusion.", 0) == 0) has_fusion_params = true;
    });
    CHECK_FALSE(has_fusion_params);
}

TEST_CASE("rbq and add modes coincide exactly at initialization") {
    auto cfg = tiny_cfg();
    cfg.fusion = FusionMode::kRbq;
    auto rbq_model = DqnetModel<double>::create(cfg, 7);
    cfg.fusion = FusionMode::kAdd;
    auto add_model = DqnetModel<double>::create(cfg, 7);
    Rng rng(3);
    auto img = random_image(64, rng);
    auto a = rbq_model.forward(img, false);
    auto b = add_model.forward(img, false);
    for (int64_t i = 0; i < a.logits.numel(); ++i) CHECK(a.logits[i] == b.logits[i]);
}

TEST_CASE("all fusion modes and every stage-mask setting run") {
    Rng rng(4);
    auto img = random_image(64, rng);
    for (auto mode :
         {FusionMode::kRbq, FusionMode::kAdd, FusionMode::kMultiply, FusionMode::kConcat}) {
        auto cfg = tiny_cfg();
        cfg.fusion = mode;
        auto model = DqnetModel<double>::create(cfg, 5);
        auto out = model.forward(img, false);
        CHECK(out.logits.shape() == std::vector<int>{1, 64, 64});
    }
    for (auto mask : {std::array<bool, 4>{false, false, false, true},
                      {false, false, true, true},
                      {false, true, true, true},
                      {true, true, true, true}}) {
        auto cfg = tiny_cfg();
        cfg.enhance = mask;
        auto model = DqnetModel<double>::create(cfg, 5);
        auto out = model.forward(img, false);
        int expected = 0;
        for (bool e : mask) expected += e ? 1 : 0;
        CHECK(static_cast<int>(out.enhanced.size()) == expected);
    }
}

TEST_CASE("zeroed decoder produces an all-zero pre-sigmoid map") {
    auto model = DqnetModel<double>::create(tiny_cfg(), 6);
    model.decoder.visit([](const std::string&, Tensor<double>& t) {
        std::fill(t.data().begin(), t.data().end(), 0.0);
    });
    Rng rng(5);
    auto out = model.forward(random_image(64, rng), false);
    for (int64_t i = 0; i < out.logits.numel(); ++i) CHECK(out.logits[i] == 0.0);
}

TEST_CASE("aux head: zeroed feature gives 0.5 everywhere; outputs stay in (0,1)") {
    auto model = DqnetModel<double>::create(tiny_cfg(), 8);
    auto zero_feat = Tensor<double>::zeros({4, 32, 32});  // stage-2 shape
    auto p = model.aux_predict(zero_feat, 0);
    for (int64_t i = 0; i < p.numel(); ++i) CHECK(p[i] == doctest::Approx(0.5));

    Rng rng(6);
    auto out = model.forward(random_image(64, rng), false);
    for (const auto& pr : out.aux)
        for (int64_t i = 0; i < pr.numel(); ++i) {
            CHECK(pr[i] > 0.0);
            CHECK(pr[i] < 1.0);
        }

    // conv -> resize -> sigmoid composition oracle
    std::vector<double> fv(static_cast<size_t>(4) * 32 * 32);
    for (auto& v : fv) v = rng.uniform(-1.0, 1.0);
    auto feat = Tensor<double>::from_data({4, 32, 32}, fv);
    auto got = model.aux_predict(feat, 0);
    auto ref = reshape(
        sigmoid(resize_bilinear(
            conv2d(feat, model.aux_heads[0].w, model.aux_heads[0].b), 64, 64)),
        {64, 64});
    for (int64_t i = 0; i < ref.numel(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("gradient from the prediction reaches every decoder input") {
    auto model = DqnetModel<double>::create(tiny_cfg(), 9);
    Rng rng(7);
    auto img = random_image(64, rng);
    img.set_requires_grad(true);
    auto out = model.forward(img, true);
    auto loss = sum(mul(out.logits, out.logits));
    loss.backward();
    // every enhanced feature and the ViT grid received gradient
    for (const auto& b : out.enhanced) {
        REQUIRE(b.has_grad());
        double g = 0;
        for (double v : b.impl()->grad) g = std::max(g, std::fabs(v));
        CHECK(g > 0.0);
    }
    REQUIRE(out.vit_grid.tokens.has_grad());
    double gv = 0;
    for (double v : out.vit_grid.tokens.impl()->grad) gv = std::max(gv, std::fabs(v));
    CHECK(gv > 0.0);
}

TEST_CASE("perturbing a vit parameter moves the input of every later enhanced stage") {
    auto model = DqnetModel<double>::create(tiny_cfg(), 10);
    Rng rng(8);
    auto img = random_image(64, rng);
    auto base = model.forward(img, false);
    model.vit.patch_weight[0] += 0.25;
    auto moved = model.forward(img, false);
    // B_2..B_4 feed stages 3..5; all must change
    for (size_t s = 0; s + 1 < base.enhanced.size(); ++s)
        CHECK(max_abs_diff(base.enhanced[s], moved.enhanced[s]) > 0.0);
    // and so do the raw stage outputs after the first enhanced stage
    for (size_t s = 1; s < base.stage_outputs.size(); ++s)
        CHECK(max_abs_diff(base.stage_outputs[s], moved.stage_outputs[s]) > 0.0);
}

TEST_CASE("forward is deterministic") {
    auto model = DqnetModel<double>::create(tiny_cfg(), 11);
    Rng rng(9);
    auto img = random_image(64, rng);
    auto a = model.forward(img, false);
    auto b = model.forward(img, false);
    CHECK(max_abs_diff(a.logits, b.logits) == 0.0);
}

TEST_CASE("batched forward shares batch-norm statistics") {
    auto model = DqnetModel<double>::create(tiny_cfg(), 12);
    Rng rng(10);
    Batch<double> imgs = {random_image(64, rng), random_image(64, rng)};
    auto outs = model.forward(imgs, true);
    CHECK(outs.size() == 2);
    auto fresh = DqnetModel<double>::create(tiny_cfg(), 12);
    auto solo = fresh.forward(imgs[0], true);
    CHECK(max_abs_diff(outs[0].logits, solo.logits) > 0.0);
}

TEST_CASE("sampled end-to-end gradient check through the total loss") {
    ModelConfig cfg = tiny_cfg(32);
    cfg.vit.patch_size = 8;  // 4x4 grid
    cfg.window = 2;
    auto model = DqnetModel<double>::create(cfg, 13);
    Rng rng(11);
    Batch<double> imgs = {random_image(32, rng), random_image(32, rng)};
    std::vector<double> mv(32 * 32);
    for (auto& v : mv) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    auto mask = Tensor<double>::from_data({32, 32}, mv);
    LossConfig lcfg;

    auto eval_loss = [&](DqnetModel<double>& m) {
        auto outs = m.forward(imgs, true);
        Tensor<double> acc;
        for (auto& o : outs) {
            auto l = total_loss(o.logits, o.aux, o.enhanced, mask, lcfg).total_tensor;
            acc = acc.defined() ? add(acc, l) : l;
        }
        return mul_scalar(acc, 0.5);
    };

    // a couple of representative parameters, sampled coordinates
    auto rp = grad_check(
        "model_patch_weight",
        [&](Tensor<double>& t) {
            model.vit.patch_weight = t;
            return eval_loss(model);
        },
        model.vit.patch_weight.detach(), 1e-6, 1e-3, 10, 123);
    CHECK(rp.pass);

    auto rf = grad_check(
        "model_fusion_align",
        [&](Tensor<double>& t) {
            model.fusion_stages[1].align_conv.w = t;
            return eval_loss(model);
        },
        model.fusion_stages[1].align_conv.w.detach(), 1e-6, 1e-3, 10, 124);
    CHECK(rf.pass);
}
