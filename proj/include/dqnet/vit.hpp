#pragma once

#include <string>
#include <vector>

#include "dqnet/nn.hpp"

namespace dqnet {

// Plain single-stride vision transformer: one token grid, constant width.
struct VitConfig {
    int image_size = 128;
    int patch_size = 16;
    int embed_dim = 64;
    int depth = 4;
    int heads = 4;
    double mlp_ratio = 4.0;

    int grid_size() const { return image_size / patch_size; }
    int token_count() const { return grid_size() * grid_size(); }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw ConfigError("vit: image size must be a positive multiple of the patch size");
        if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
            throw ConfigError("vit: embed_dim must be divisible by the head count");
        if (depth < 0) throw ConfigError("vit: depth must be non-negative");
        if (mlp_ratio <= 0) throw ConfigError("vit: mlp_ratio must be positive");
    }
};

template <typename T>
struct TokenGrid {
    int h = 0;
    int w = 0;
    Tensor<T> tokens;  // [h*w, dim]

    int dim() const { return tokens.dim(1); }
    int count() const { return h * w; }
};

// multi-head self/cross attention over already-projected token rows
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               int heads, const std::vector<Tensor<T>>& per_head_bias = {}) {
    const int d = q.dim(1);
    if (d % heads != 0) throw DimensionError("attention width not divisible by head count");
    const int dh = d / heads;
    Tensor<T> out;
    for (int h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * dh, (h + 1) * dh);
        auto kh = slice_cols(k, h * dh, (h + 1) * dh);
        auto vh = slice_cols(v, h * dh, (h + 1) * dh);
        auto bias = per_head_bias.empty() ? Tensor<T>() : per_head_bias[static_cast<size_t>(h)];
        auto oh = scaled_dot_attention(qh, kh, vh, bias);
        out = (h == 0) ? oh : concat_cols(out, oh);
    }
    return out;
}

// pre-norm block: a = MSA(LN(z)) + z; out = MLP(LN(a)) + a
template <typename T>
struct TransformerLayer {
    LayerNormLayer<T> ln1, ln2;
    LinearLayer<T> wq, wk, wv, proj;
    LinearLayer<T> fc1, fc2;
    int heads = 1;

    static TransformerLayer create(ParamInit<T>& init, const std::string& name, int dim, int heads,
                                   double mlp_ratio) {
        TransformerLayer l;
        l.heads = heads;
        l.ln1 = LayerNormLayer<T>::create(init, dim);
        l.ln2 = LayerNormLayer<T>::create(init, dim);
        l.wq = LinearLayer<T>::create(init, name + ".wq", dim, dim);
        l.wk = LinearLayer<T>::create(init, name + ".wk", dim, dim);
        l.wv = LinearLayer<T>::create(init, name + ".wv", dim, dim);
        l.proj = LinearLayer<T>::create(init, name + ".proj", dim, dim);
        const int hidden = static_cast<int>(dim * mlp_ratio);
        l.fc1 = LinearLayer<T>::create(init, name + ".fc1", dim, hidden);
        l.fc2 = LinearLayer<T>::create(init, name + ".fc2", hidden, dim);
        return l;
    }

    Tensor<T> forward(const Tensor<T>& z) const {
        auto n1 = ln1.forward(z);
        auto msa = multi_head_attention(wq.forward(n1), wk.forward(n1), wv.forward(n1), heads);
        auto a = add(proj.forward(msa), z);
        auto n2 = ln2.forward(a);
        auto mlp = fc2.forward(gelu(fc1.forward(n2)));
        return add(mlp, a);
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        ln1.visit(prefix + ".ln1", fn);
        ln2.visit(prefix + ".ln2", fn);
        wq.visit(prefix + ".wq", fn);
        wk.visit(prefix + ".wk", fn);
        wv.visit(prefix + ".wv", fn);
        proj.visit(prefix + ".proj", fn);
        fc1.visit(prefix + ".fc1", fn);
        fc2.visit(prefix + ".fc2", fn);
    }
};

template <typename T>
struct VitBranch {
    VitConfig cfg;
    Tensor<T> patch_weight;  // [D, 3, P, P]
    Tensor<T> patch_bias;    // [D]
    Tensor<T> pos;           // [N, D]
    std::vector<TransformerLayer<T>> layers;

    static VitBranch create(const VitConfig& cfg, ParamInit<T>& init) {
        cfg.validate();
        VitBranch v;
        v.cfg = cfg;
        const int P = cfg.patch_size, D = cfg.embed_dim;
        v.patch_weight = init.trunc_normal("vit.patch.weight", {D, 3, P, P}, 0.02);
        v.patch_bias = init.zeros({D});
        v.pos = init.trunc_normal("vit.pos", {cfg.token_count(), D}, 0.02);
        for (int i = 0; i < cfg.depth; ++i)
            v.layers.push_back(TransformerLayer<T>::create(
                init, "vit.layers." + std::to_string(i), D, cfg.heads, cfg.mlp_ratio));
        return v;
    }

    // z0 = patches * E + pos
    TokenGrid<T> patch_embed(const Tensor<T>& image) const {
        if (image.ndim() != 3 || image.dim(0) != 3)
            throw DimensionError("patch_embed expects a [3,H,W] image");
        if (image.dim(1) != cfg.image_size || image.dim(2) != cfg.image_size)
            throw ConfigError("patch_embed: image size does not match the configuration");
        auto grid = conv2d(image, patch_weight, patch_bias, cfg.patch_size, 0);
        auto tokens = add(chw_to_tokens(grid), pos);
        return TokenGrid<T>{cfg.grid_size(), cfg.grid_size(), tokens};
    }

    TokenGrid<T> forward(const Tensor<T>& image) const {
        TokenGrid<T> z = patch_embed(image);
        for (const auto& layer : layers) z.tokens = layer.forward(z.tokens);
        return z;
    }

    std::vector<TokenGrid<T>> forward(const Batch<T>& images) const {
        std::vector<TokenGrid<T>> out;
        out.reserve(images.size());
        for (const auto& img : images) out.push_back(forward(img));
        return out;
    }

    void visit(const ParamFn<T>& fn) {
        fn("vit.patch.weight", patch_weight);
        fn("vit.patch.bias", patch_bias);
        fn("vit.pos", pos);
        for (size_t i = 0; i < layers.size(); ++i)
            layers[i].visit("vit.layers." + std::to_string(i), fn);
    }
};

}  // namespace dqnet
