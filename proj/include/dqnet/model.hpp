#pragma once

#include <array>
#include <string>
#include <vector>

#include "dqnet/fusion.hpp"

namespace dqnet {

struct ModelConfig {
    VitConfig vit;
    CnnConfig cnn;
    int window = 4;
    std::array<bool, 4> enhance = {true, true, true, true};  // stages 2..5
    int decoder_width = 256;
    FusionMode fusion = FusionMode::kRbq;

    int image_size() const { return vit.image_size; }
    bool any_enhanced() const {
        for (bool e : enhance)
            if (e) return true;
        return false;
    }
    std::vector<int> enhanced_stages() const {
        std::vector<int> s;
        for (int i = 0; i < 4; ++i)
            if (enhance[static_cast<size_t>(i)]) s.push_back(i + 2);
        return s;
    }

    void validate() const {
        vit.validate();
        cnn.validate();
        if (vit.image_size % 32 != 0)
            throw ConfigError("model: image size must be divisible by 32");
        if (decoder_width < 1) throw ConfigError("model: decoder width must be positive");
        if (any_enhanced() && fusion == FusionMode::kRbq) {
            const int g = vit.grid_size();
            if (window < 1 || g % window != 0)
                throw ConfigError("model: window size " + std::to_string(window) +
                                  " does not divide the " + std::to_string(g) + "x" +
                                  std::to_string(g) + " token grid");
        }
        if (vit.patch_size % 4 != 0)
            throw ConfigError("model: patch size must be a multiple of 4 for the decoder pyramid");
    }
};

template <typename T>
struct ForwardOutput {
    Tensor<T> logits;                  // F, [1,H,W] pre-sigmoid
    std::vector<Tensor<T>> enhanced;   // B^s in CNN space, one per enhanced stage
    std::vector<Tensor<T>> aux;        // P^s in (0,1) at [H,W]
    std::vector<int> enhanced_stages;  // stage index each entry refers to
    TokenGrid<T> vit_grid;             // V1
    std::vector<Tensor<T>> stage_outputs;  // raw R_2..R_5 before fusion
};

// Top-down lateral decoder: 1x1 laterals to a common width, pairwise top-down
// sums with transposed-conv upsampling, everything lifted to 1/4 scale,
// concatenated, fused by a 3x3 conv, then the head maps to one channel at the
// input resolution.
template <typename T>
struct Decoder {
    int width = 256;
    int image_size = 0;
    int grid_size = 0;
    std::array<ConvLayer<T>, 4> lateral;  // B2..B5
    ConvLayer<T> lateral_v;
    std::array<TConvLayer<T>, 3> topdown;  // Up(B~_{i+1}) for H2..H4
    TConvLayer<T> lift_h1, lift_h3, lift_h4;
    bool lift_h1_identity = false;
    ConvLayer<T> fuse;
    ConvLayer<T> head;

    static Decoder create(ParamInit<T>& init, const ModelConfig& cfg) {
        Decoder d;
        d.width = cfg.decoder_width;
        d.image_size = cfg.image_size();
        d.grid_size = cfg.vit.grid_size();
        for (int i = 0; i < 4; ++i)
            d.lateral[static_cast<size_t>(i)] = ConvLayer<T>::create(
                init, "decoder.lateral.b" + std::to_string(i + 2),
                cfg.cnn.channels[static_cast<size_t>(i) + 1], d.width, 1, 1, 0);
        d.lateral_v = ConvLayer<T>::create(init, "decoder.lateral.v", cfg.vit.embed_dim, d.width, 1,
                                           1, 0);
        for (int i = 0; i < 3; ++i)
            d.topdown[static_cast<size_t>(i)] = TConvLayer<T>::create(
                init, "decoder.topdown.h" + std::to_string(i + 2), d.width, d.width, 2);
        const int lift1 = cfg.vit.patch_size / 4;  // grid scale -> 1/4
        d.lift_h1_identity = lift1 == 1;
        if (!d.lift_h1_identity)
            d.lift_h1 = TConvLayer<T>::create(init, "decoder.lift.h1", d.width, d.width, lift1);
        d.lift_h3 = TConvLayer<T>::create(init, "decoder.lift.h3", d.width, d.width, 2);
        d.lift_h4 = TConvLayer<T>::create(init, "decoder.lift.h4", d.width, d.width, 4);
        d.fuse = ConvLayer<T>::create(init, "decoder.fuse", 4 * d.width, d.width, 3, 1, 1);
        d.head = ConvLayer<T>::create(init, "decoder.head", d.width, 1, 3, 1, 1);
        return d;
    }

    // b[0..3] = B2..B5 in CNN space, v1 = final ViT grid
    Tensor<T> forward(const std::array<Tensor<T>, 4>& b, const TokenGrid<T>& v1) const {
        std::array<Tensor<T>, 4> lat;
        for (int i = 0; i < 4; ++i)
            lat[static_cast<size_t>(i)] = lateral[static_cast<size_t>(i)].forward(b[static_cast<size_t>(i)]);
        Tensor<T> vlat = lateral_v.forward(tokens_to_chw(v1.tokens, v1.h, v1.w));

        // H1 = V~; Hi = B~_i + Up(B~_{i+1})
        Tensor<T> h1 = vlat;
        Tensor<T> h2 = add(lat[0], topdown[0].forward(lat[1]));
        Tensor<T> h3 = add(lat[1], topdown[1].forward(lat[2]));
        Tensor<T> h4 = add(lat[2], topdown[2].forward(lat[3]));

        Tensor<T> h1q = lift_h1_identity ? h1 : lift_h1.forward(h1);
        Tensor<T> h3q = lift_h3.forward(h3);
        Tensor<T> h4q = lift_h4.forward(h4);

        Tensor<T> cat = concat_axis0(std::vector<Tensor<T>>{h1q, h2, h3q, h4q});
        Tensor<T> fused = fuse.forward(cat);
        Tensor<T> up = resize_bilinear(fused, image_size, image_size);
        return head.forward(up);
    }

    void visit(const ParamFn<T>& fn) {
        for (int i = 0; i < 4; ++i)
            lateral[static_cast<size_t>(i)].visit("decoder.lateral.b" + std::to_string(i + 2), fn);
        lateral_v.visit("decoder.lateral.v", fn);
        for (int i = 0; i < 3; ++i)
            topdown[static_cast<size_t>(i)].visit("decoder.topdown.h" + std::to_string(i + 2), fn);
        if (!lift_h1_identity) lift_h1.visit("decoder.lift.h1", fn);
        lift_h3.visit("decoder.lift.h3", fn);
        lift_h4.visit("decoder.lift.h4", fn);
        fuse.visit("decoder.fuse", fn);
        head.visit("decoder.head", fn);
    }
};

template <typename T>
struct DqnetModel {
    ModelConfig cfg;
    VitBranch<T> vit;
    CnnBranch<T> cnn;
    std::vector<FusionStage<T>> fusion_stages;  // aligned with cfg.enhanced_stages()
    Decoder<T> decoder;
    std::vector<ConvLayer<T>> aux_heads;  // 1x1 conv per enhanced stage

    static DqnetModel create(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        DqnetModel m;
        m.cfg = cfg;
        ParamInit<T> init(seed);
        m.vit = VitBranch<T>::create(cfg.vit, init);
        m.cnn = CnnBranch<T>::create(cfg.cnn, init);
        const int grid = cfg.vit.grid_size();
        for (int stage : cfg.enhanced_stages()) {
            const int stage_size = cfg.image_size() >> stage;  // scale 1/2^stage
            m.fusion_stages.push_back(FusionStage<T>::create(
                init, stage, cfg.cnn.channels[static_cast<size_t>(stage) - 1], stage_size, grid,
                cfg.vit.embed_dim, cfg.window, cfg.vit.heads, cfg.fusion));
            m.aux_heads.push_back(ConvLayer<T>::create(
                init, "aux.stage" + std::to_string(stage),
                cfg.cnn.channels[static_cast<size_t>(stage) - 1], 1, 1, 1, 0));
        }
        m.decoder = Decoder<T>::create(init, cfg);
        return m;
    }

    // P^s: 1x1 conv to one channel, bilinear upsample, sigmoid
    Tensor<T> aux_predict(const Tensor<T>& enhanced, size_t head_index) const {
        Tensor<T> logit = aux_heads[head_index].forward(enhanced);
        Tensor<T> up = resize_bilinear(logit, cfg.image_size(), cfg.image_size());
        return reshape(sigmoid(up), {cfg.image_size(), cfg.image_size()});
    }

    std::vector<ForwardOutput<T>> forward(const Batch<T>& images, bool training) {
        const size_t n = images.size();
        if (n == 0) throw DimensionError("forward: empty batch");
        std::vector<ForwardOutput<T>> outs(n);
        for (size_t i = 0; i < n; ++i) {
            outs[i].vit_grid = vit.forward(images[i]);
            outs[i].enhanced_stages = cfg.enhanced_stages();
        }

        Batch<T> prev = cnn.stem(images, training);
        std::array<Batch<T>, 4> carried;  // B2..B5 per stage (enhanced or raw)
        size_t fid = 0;
        for (int stage = 2; stage <= 5; ++stage) {
            Batch<T> r = cnn.stage_forward(stage, prev, training);
            for (size_t i = 0; i < n; ++i) outs[i].stage_outputs.push_back(r[i]);
            if (cfg.enhance[static_cast<size_t>(stage) - 2]) {
                FusionStage<T>& fs = fusion_stages[fid];
                std::vector<TokenGrid<T>> fused;
                fused.reserve(n);
                for (size_t i = 0; i < n; ++i) {
                    TokenGrid<T> y = fs.tokenize_align(r[i]);
                    fused.push_back(fs.fuse(outs[i].vit_grid, y));
                }
                Batch<T> b = fs.detokenize_align(fused, training);
                for (size_t i = 0; i < n; ++i) {
                    outs[i].enhanced.push_back(b[i]);
                    outs[i].aux.push_back(aux_predict(b[i], fid));
                }
                prev = b;
                ++fid;
            } else {
                prev = r;
            }
            carried[static_cast<size_t>(stage) - 2] = prev;
        }

        for (size_t i = 0; i < n; ++i) {
            std::array<Tensor<T>, 4> b;
            for (int s = 0; s < 4; ++s) b[static_cast<size_t>(s)] = carried[static_cast<size_t>(s)][i];
            outs[i].logits = decoder.forward(b, outs[i].vit_grid);
        }
        return outs;
    }

    ForwardOutput<T> forward(const Tensor<T>& image, bool training) {
        return forward(Batch<T>{image}, training)[0];
    }

    void visit(const ParamFn<T>& fn) {
        vit.visit(fn);
        cnn.visit(fn);
        for (size_t i = 0; i < fusion_stages.size(); ++i)
            fusion_stages[i].visit("fusion.stage" + std::to_string(fusion_stages[i].stage), fn);
        for (size_t i = 0; i < aux_heads.size(); ++i)
            aux_heads[i].visit("aux.stage" + std::to_string(cfg.enhanced_stages()[i]), fn);
        decoder.visit(fn);
    }
    void visit_buffers(const BufferFn<T>& fn) {
        cnn.visit_buffers(fn);
        for (size_t i = 0; i < fusion_stages.size(); ++i)
            fusion_stages[i].visit_buffers(
                "fusion.stage" + std::to_string(fusion_stages[i].stage), fn);
    }
};

}  // namespace dqnet
