#pragma once

#include <array>
#include <string>
#include <vector>

#include "dqnet/nn.hpp"

namespace dqnet {

// Residual backbone with five stages at scales {1/2, 1/4, 1/8, 1/16, 1/32}.
struct CnnConfig {
    std::array<int, 5> channels = {16, 16, 32, 64, 128};
    int blocks_per_stage = 1;

    void validate() const {
        for (int c : channels)
            if (c <= 0) throw ConfigError("cnn: channel widths must be positive");
        if (blocks_per_stage < 1) throw ConfigError("cnn: at least one block per stage");
    }
};

template <typename T>
struct FeatureMap {
    Tensor<T> values;  // [C,H,W]

    int channels() const { return values.dim(0); }
    int height() const { return values.dim(1); }
    int width() const { return values.dim(2); }
};

// two 3x3 convs with a projected shortcut when shape changes
template <typename T>
struct BasicBlock {
    ConvLayer<T> conv1, conv2;
    BatchNormLayer<T> bn1, bn2;
    bool has_proj = false;
    ConvLayer<T> proj;
    BatchNormLayer<T> bnp;

    static BasicBlock create(ParamInit<T>& init, const std::string& name, int in, int out,
                             int stride) {
        BasicBlock b;
        b.conv1 = ConvLayer<T>::create(init, name + ".conv1", in, out, 3, stride, 1, false);
        b.bn1 = BatchNormLayer<T>::create(init, out);
        b.conv2 = ConvLayer<T>::create(init, name + ".conv2", out, out, 3, 1, 1, false);
        b.bn2 = BatchNormLayer<T>::create(init, out);
        b.has_proj = stride != 1 || in != out;
        if (b.has_proj) {
            b.proj = ConvLayer<T>::create(init, name + ".proj", in, out, 1, stride, 0, false);
            b.bnp = BatchNormLayer<T>::create(init, out);
        }
        return b;
    }

    Batch<T> forward(const Batch<T>& x, bool training) {
        Batch<T> main = bn1.forward(conv1.forward(x), training);
        for (auto& t : main) t = relu(t);
        main = bn2.forward(conv2.forward(main), training);
        Batch<T> shortcut = has_proj ? bnp.forward(proj.forward(x), training) : x;
        Batch<T> out;
        out.reserve(x.size());
        for (size_t i = 0; i < x.size(); ++i) out.push_back(relu(add(main[i], shortcut[i])));
        return out;
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        conv1.visit(prefix + ".conv1", fn);
        bn1.visit(prefix + ".bn1", fn);
        conv2.visit(prefix + ".conv2", fn);
        bn2.visit(prefix + ".bn2", fn);
        if (has_proj) {
            proj.visit(prefix + ".proj", fn);
            bnp.visit(prefix + ".bnp", fn);
        }
    }
    void visit_buffers(const std::string& prefix, const BufferFn<T>& fn) {
        bn1.visit_buffers(prefix + ".bn1", fn);
        bn2.visit_buffers(prefix + ".bn2", fn);
        if (has_proj) bnp.visit_buffers(prefix + ".bnp", fn);
    }
};

template <typename T>
struct CnnBranch {
    CnnConfig cfg;
    ConvLayer<T> stem_conv;
    BatchNormLayer<T> stem_bn;
    std::array<std::vector<BasicBlock<T>>, 4> stages;  // stages 2..5

    static CnnBranch create(const CnnConfig& cfg, ParamInit<T>& init) {
        cfg.validate();
        CnnBranch c;
        c.cfg = cfg;
        c.stem_conv =
            ConvLayer<T>::create(init, "cnn.stem.conv", 3, cfg.channels[0], 3, 2, 1, false);
        c.stem_bn = BatchNormLayer<T>::create(init, cfg.channels[0]);
        for (int s = 0; s < 4; ++s) {
            const int in = cfg.channels[static_cast<size_t>(s)];
            const int out = cfg.channels[static_cast<size_t>(s) + 1];
            for (int b = 0; b < cfg.blocks_per_stage; ++b) {
                const std::string name = "cnn.stage" + std::to_string(s + 2) + ".block" +
                                         std::to_string(b);
                c.stages[static_cast<size_t>(s)].push_back(BasicBlock<T>::create(
                    init, name, b == 0 ? in : out, out, b == 0 ? 2 : 1));
            }
        }
        return c;
    }

    // R1 at 1/2 scale; never enhanced
    Batch<T> stem(const Batch<T>& images, bool training) {
        Batch<T> out = stem_bn.forward(stem_conv.forward(images), training);
        for (auto& t : out) t = relu(t);
        return out;
    }

    FeatureMap<T> stem(const Tensor<T>& image, bool training) {
        return FeatureMap<T>{stem(Batch<T>{image}, training)[0]};
    }

    // stage index 2..5; input is the (possibly enhanced) previous feature
    Batch<T> stage_forward(int stage, const Batch<T>& input, bool training) {
        if (stage < 2 || stage > 5) throw ConfigError("cnn: stage index must be in 2..5");
        const int expected_in = cfg.channels[static_cast<size_t>(stage) - 2];
        for (const auto& t : input)
            if (t.dim(0) != expected_in)
                throw DimensionError("cnn stage " + std::to_string(stage) + ": expected " +
                                     std::to_string(expected_in) + " input channels, got " +
                                     std::to_string(t.dim(0)));
        Batch<T> x = input;
        for (auto& block : stages[static_cast<size_t>(stage) - 2]) x = block.forward(x, training);
        return x;
    }

    FeatureMap<T> stage_forward(int stage, const FeatureMap<T>& input, bool training) {
        return FeatureMap<T>{stage_forward(stage, Batch<T>{input.values}, training)[0]};
    }

    void visit(const ParamFn<T>& fn) {
        stem_conv.visit("cnn.stem.conv", fn);
        stem_bn.visit("cnn.stem.bn", fn);
        for (int s = 0; s < 4; ++s)
            for (size_t b = 0; b < stages[static_cast<size_t>(s)].size(); ++b)
                stages[static_cast<size_t>(s)][b].visit(
                    "cnn.stage" + std::to_string(s + 2) + ".block" + std::to_string(b), fn);
    }
    void visit_buffers(const BufferFn<T>& fn) {
        stem_bn.visit_buffers("cnn.stem.bn", fn);
        for (int s = 0; s < 4; ++s)
            for (size_t b = 0; b < stages[static_cast<size_t>(s)].size(); ++b)
                stages[static_cast<size_t>(s)][b].visit_buffers(
                    "cnn.stage" + std::to_string(s + 2) + ".block" + std::to_string(b), fn);
    }
};

}  // namespace dqnet
