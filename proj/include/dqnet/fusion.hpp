#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dqnet/cnn.hpp"
#include "dqnet/nn.hpp"
#include "dqnet/vit.hpp"

namespace dqnet {

enum class FusionMode { kRbq, kAdd, kMultiply, kConcat };

inline const char* fusion_mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::kRbq: return "rbq";
        case FusionMode::kAdd: return "add";
        case FusionMode::kMultiply: return "multiply";
        case FusionMode::kConcat: return "concat";
    }
    return "?";
}

inline FusionMode fusion_mode_from_name(const std::string& s) {
    if (s == "rbq") return FusionMode::kRbq;
    if (s == "add") return FusionMode::kAdd;
    if (s == "multiply") return FusionMode::kMultiply;
    if (s == "concat") return FusionMode::kConcat;
    throw ConfigError("unknown fusion mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// window partition / merge
// ---------------------------------------------------------------------------

// token indices of each non-overlapping w-by-w window, windows in row-major
// order over window coordinates, tokens row-major within the window
inline std::vector<int> window_indices(int h_t, int w_t, int w) {
    if (w < 1 || h_t % w != 0 || w_t % w != 0)
        throw ConfigError("window size " + std::to_string(w) + " does not divide the " +
                          std::to_string(h_t) + "x" + std::to_string(w_t) + " token grid");
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(h_t) * w_t);
    for (int wy = 0; wy < h_t / w; ++wy)
        for (int wx = 0; wx < w_t / w; ++wx)
            for (int ty = 0; ty < w; ++ty)
                for (int tx = 0; tx < w; ++tx) idx.push_back((wy * w + ty) * w_t + (wx * w + tx));
    return idx;
}

template <typename T>
std::vector<Tensor<T>> window_partition(const TokenGrid<T>& grid, int w) {
    const auto idx = window_indices(grid.h, grid.w, w);
    const int per = w * w;
    const int count = grid.count() / per;
    std::vector<Tensor<T>> windows;
    windows.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i)
        windows.push_back(gather_rows(
            grid.tokens, std::vector<int>(idx.begin() + static_cast<int64_t>(i) * per,
                                          idx.begin() + static_cast<int64_t>(i + 1) * per)));
    return windows;
}

template <typename T>
TokenGrid<T> window_merge(const std::vector<Tensor<T>>& windows, int h_t, int w_t, int w) {
    const auto idx = window_indices(h_t, w_t, w);
    if (windows.empty() || static_cast<int>(windows.size()) * w * w != h_t * w_t)
        throw DimensionError("window_merge: window count inconsistent with grid");
    for (const auto& win : windows)
        if (win.ndim() != 2 || win.dim(0) != w * w)
            throw DimensionError("window_merge: window token count mismatch");
    std::vector<int> inverse(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) inverse[static_cast<size_t>(idx[i])] = static_cast<int>(i);
    Tensor<T> stacked = concat_axis0(windows);
    return TokenGrid<T>{h_t, w_t, gather_rows(stacked, inverse)};
}

// ---------------------------------------------------------------------------
// cost model
// ---------------------------------------------------------------------------

struct RbqCost {
    uint64_t window_count = 0;
    uint64_t score_elements = 0;  // per head: one QK^T entry per (query,key) pair
    uint64_t value_elements = 0;  // per head: one weighted value row per score
    uint64_t total() const { return score_elements + value_elements; }
};

inline RbqCost rbq_cost(int h_t, int w_t, int w) {
    (void)window_indices(h_t, w_t, w);  // validates divisibility
    RbqCost c;
    c.window_count = static_cast<uint64_t>(h_t / w) * static_cast<uint64_t>(w_t / w);
    c.score_elements = static_cast<uint64_t>(h_t) * w_t * w * w;
    c.value_elements = c.score_elements;
    return c;
}

// ---------------------------------------------------------------------------
// relation-based querying
// ---------------------------------------------------------------------------

// Windowed multi-head cross attention: ViT tokens query keys/values from the
// aligned CNN tokens; a learned relative-position bias is added per head; the
// projected result is added to both inputs. The output projection starts at
// zero, so an untrained module reduces to element-wise addition.
template <typename T>
struct RbqModule {
    LinearLayer<T> wq, wk, wv;  // [D,D], no bias
    LinearLayer<T> out_proj;    // zero-initialized
    Tensor<T> bias_table;       // [(2w-1)^2, heads]
    int window = 4;
    int heads = 4;

    static RbqModule create(ParamInit<T>& init, const std::string& name, int dim, int window,
                            int heads) {
        if (dim % heads != 0) throw ConfigError("rbq: head count must divide the embedding width");
        RbqModule m;
        m.window = window;
        m.heads = heads;
        m.wq = LinearLayer<T>::create(init, name + ".wq", dim, dim, false);
        m.wk = LinearLayer<T>::create(init, name + ".wk", dim, dim, false);
        m.wv = LinearLayer<T>::create(init, name + ".wv", dim, dim, false);
        m.out_proj = LinearLayer<T>::create(init, name + ".out", dim, dim, true, true);
        const int span = 2 * window - 1;
        m.bias_table = init.zeros({span * span, heads});
        return m;
    }

    // one [w^2, w^2] additive bias per head, shared by all windows
    std::vector<Tensor<T>> head_biases() const {
        const int w = window;
        const int span = 2 * w - 1;
        std::vector<int> idx;
        idx.reserve(static_cast<size_t>(w) * w * w * w);
        for (int qy = 0; qy < w; ++qy)
            for (int qx = 0; qx < w; ++qx)
                for (int ky = 0; ky < w; ++ky)
                    for (int kx = 0; kx < w; ++kx)
                        idx.push_back((qy - ky + w - 1) * span + (qx - kx + w - 1));
        Tensor<T> rows = gather_rows(bias_table, idx);  // [w^4, heads]
        std::vector<Tensor<T>> biases;
        biases.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h)
            biases.push_back(reshape(slice_cols(rows, h, h + 1), {w * w, w * w}));
        return biases;
    }

    TokenGrid<T> forward(const TokenGrid<T>& z, const TokenGrid<T>& y) const {
        if (z.h != y.h || z.w != y.w || z.dim() != y.dim())
            throw DimensionError("rbq: query and key/value grids must match");
        const auto biases = head_biases();
        auto zw = window_partition(z, window);
        auto yw = window_partition(y, window);
        std::vector<Tensor<T>> out;
        out.reserve(zw.size());
        for (size_t i = 0; i < zw.size(); ++i) {
            auto q = wq.forward(zw[i]);
            auto k = wk.forward(yw[i]);
            auto v = wv.forward(yw[i]);
            auto attn = multi_head_attention(q, k, v, heads, biases);
            auto b = out_proj.forward(attn);
            out.push_back(add(add(b, zw[i]), yw[i]));
        }
        return window_merge(out, z.h, z.w, window);
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        wq.visit(prefix + ".wq", fn);
        wk.visit(prefix + ".wk", fn);
        wv.visit(prefix + ".wv", fn);
        out_proj.visit(prefix + ".out", fn);
        fn(prefix + ".bias_table", bias_table);
    }
};

// ---------------------------------------------------------------------------
// per-stage alignment + fusion
// ---------------------------------------------------------------------------

// Converts a CNN stage feature to the ViT token grid and back. Stages finer
// than the grid are maxpooled in and restored by a transposed conv; a stage
// coarser than the grid (1/32 vs a 1/16 grid) is resized up bilinearly and
// restored by a strided conv.
template <typename T>
struct FusionStage {
    int stage = 2;
    int stage_channels = 0;
    int stage_size = 0;  // spatial extent of the stage feature
    int grid_h = 0, grid_w = 0;
    FusionMode mode = FusionMode::kRbq;

    ConvLayer<T> align_conv;  // 1x1, c_i -> D
    LayerNormLayer<T> align_ln;
    TConvLayer<T> dealign_tconv;  // stage finer than or equal to the grid
    ConvLayer<T> dealign_down;    // stage coarser than the grid
    BatchNormLayer<T> dealign_bn;
    RbqModule<T> rbq;
    LinearLayer<T> concat_proj;  // concat fusion: 2D -> D

    bool coarser_than_grid() const { return stage_size < grid_h; }
    int pool_ratio() const { return stage_size / grid_h; }

    static FusionStage create(ParamInit<T>& init, int stage, int stage_channels, int stage_size,
                              int grid, int dim, int window, int heads, FusionMode mode) {
        FusionStage f;
        f.stage = stage;
        f.stage_channels = stage_channels;
        f.stage_size = stage_size;
        f.grid_h = f.grid_w = grid;
        f.mode = mode;
        const std::string name = "fusion.stage" + std::to_string(stage);
        if (stage_size >= grid && stage_size % grid != 0)
            throw ConfigError("fusion: stage scale is not an integer multiple of the token grid");
        if (stage_size < grid && grid % stage_size != 0)
            throw ConfigError("fusion: token grid is not an integer multiple of the stage scale");
        f.align_conv = ConvLayer<T>::create(init, name + ".align", stage_channels, dim, 1, 1, 0);
        f.align_ln = LayerNormLayer<T>::create(init, dim);
        if (stage_size >= grid) {
            f.dealign_tconv =
                TConvLayer<T>::create(init, name + ".dealign", dim, stage_channels,
                                      stage_size / grid);
        } else {
            f.dealign_down = ConvLayer<T>::create(init, name + ".dealign", dim, stage_channels, 2,
                                                  grid / stage_size, 0);
        }
        f.dealign_bn = BatchNormLayer<T>::create(init, stage_channels);
        if (mode == FusionMode::kRbq)
            f.rbq = RbqModule<T>::create(init, name + ".rbq", dim, window, heads);
        if (mode == FusionMode::kConcat)
            f.concat_proj = LinearLayer<T>::create(init, name + ".concat", 2 * dim, dim);
        return f;
    }

    // resample to the grid, 1x1 channel projection, layer norm
    TokenGrid<T> tokenize_align(const Tensor<T>& r) const {
        if (r.dim(0) != stage_channels || r.dim(1) != stage_size || r.dim(2) != stage_size)
            throw DimensionError("tokenize_align: unexpected stage feature shape " +
                                 shape_str(r.shape()));
        Tensor<T> sampled;
        if (stage_size > grid_h) {
            const int ratio = pool_ratio();
            sampled = maxpool2d(r, ratio, ratio);
        } else if (stage_size < grid_h) {
            sampled = resize_bilinear(r, grid_h, grid_w);
        } else {
            sampled = r;
        }
        Tensor<T> projected = align_conv.forward(sampled);
        Tensor<T> tokens = align_ln.forward(chw_to_tokens(projected));
        return TokenGrid<T>{grid_h, grid_w, tokens};
    }

    TokenGrid<T> fuse(const TokenGrid<T>& z, const TokenGrid<T>& y) const {
        if (z.h != y.h || z.w != y.w || z.dim() != y.dim())
            throw DimensionError("fuse: grids must match");
        switch (mode) {
            case FusionMode::kRbq: return rbq.forward(z, y);
            case FusionMode::kAdd: return TokenGrid<T>{z.h, z.w, add(z.tokens, y.tokens)};
            case FusionMode::kMultiply: return TokenGrid<T>{z.h, z.w, mul(z.tokens, y.tokens)};
            case FusionMode::kConcat:
                return TokenGrid<T>{z.h, z.w, concat_proj.forward(concat_cols(z.tokens, y.tokens))};
        }
        throw ConfigError("fuse: unknown mode");
    }

    // restore spatial scale and channel width, then batch norm; batched so the
    // normalization sees the whole mini-batch
    Batch<T> detokenize_align(const std::vector<TokenGrid<T>>& grids, bool training) {
        Batch<T> features;
        features.reserve(grids.size());
        for (const auto& g : grids) {
            Tensor<T> chw = tokens_to_chw(g.tokens, g.h, g.w);
            features.push_back(coarser_than_grid() ? dealign_down.forward(chw)
                                                   : dealign_tconv.forward(chw));
        }
        Batch<T> out = dealign_bn.forward(features, training);
        for (const auto& t : out)
            if (t.dim(0) != stage_channels || t.dim(1) != stage_size)
                throw DimensionError("detokenize_align: restored shape mismatch");
        return out;
    }

    Tensor<T> detokenize_align(const TokenGrid<T>& grid, bool training) {
        return detokenize_align(std::vector<TokenGrid<T>>{grid}, training)[0];
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        align_conv.visit(prefix + ".align", fn);
        align_ln.visit(prefix + ".align_ln", fn);
        if (coarser_than_grid())
            dealign_down.visit(prefix + ".dealign", fn);
        else
            dealign_tconv.visit(prefix + ".dealign", fn);
        dealign_bn.visit(prefix + ".dealign_bn", fn);
        if (mode == FusionMode::kRbq) rbq.visit(prefix + ".rbq", fn);
        if (mode == FusionMode::kConcat) concat_proj.visit(prefix + ".concat", fn);
    }
    void visit_buffers(const std::string& prefix, const BufferFn<T>& fn) {
        dealign_bn.visit_buffers(prefix + ".dealign_bn", fn);
    }
};

}  // namespace dqnet
