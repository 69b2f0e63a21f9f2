#pragma once

#include <string>

#include "dqnet/data.hpp"
#include "dqnet/losses.hpp"
#include "dqnet/model.hpp"

namespace dqnet {

struct TrainConfig {
    int batch = 4;
    int max_steps = 500;
    double lr0 = 1e-3;
    double poly_power = 0.9;
    double weight_decay = 0.01;
    double layer_decay = 1.0;  // < 1 enables per-depth lr factors on the ViT
    uint64_t seed = 1;
    int checkpoint_every = 0;  // 0: final checkpoint only
    bool augment = true;
    int synth_n = 8;  // training-set size when data is synthetic

    void validate() const {
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
        if (max_steps < 1) throw ConfigError("train: max_steps must be >= 1");
        if (lr0 <= 0) throw ConfigError("train: lr must be positive");
        if (poly_power <= 0) throw ConfigError("train: poly power must be positive");
        if (weight_decay < 0) throw ConfigError("train: weight decay must be >= 0");
        if (layer_decay <= 0 || layer_decay > 1) throw ConfigError("train: layer decay in (0,1]");
        if (synth_n < 1) throw ConfigError("train: synth_n must be >= 1");
    }
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SynthConfig synth;
    LossConfig loss;

    void validate() const {
        model.validate();
        train.validate();
        synth.validate();
        loss.validate();
    }
};

// one `key = value` per line, '#' comments, unknown keys are errors
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);
std::string serialize_config(const RunConfig& cfg);

// keys that must match between a checkpoint and a requested configuration for
// the parameters to be compatible; returns a human-readable diff, empty if ok
std::string model_config_diff(const RunConfig& a, const RunConfig& b);

}  // namespace dqnet
