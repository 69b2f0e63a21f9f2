#pragma once

#include <string>
#include <vector>

#include "dqnet/rng.hpp"
#include "dqnet/tensor.hpp"

namespace dqnet {

struct Sample {
    Tensor<float> image;  // [3,H,W], values in [0,1]
    Tensor<float> mask;   // [H,W], values in {0,1}
    std::string id;
};

// Procedural camouflage: a band-limited sinusoid texture background and a
// smooth random blob whose interior repeats the same texture field, phase
// shifted and blended toward its inversion with weight delta. Small delta
// means near-perfect camouflage.
struct SynthConfig {
    int image_size = 128;
    double freq_lo = 2.0;  // texture band, cycles per image
    double freq_hi = 8.0;
    int blobs_min = 1;
    int blobs_max = 1;
    double delta = 0.6;  // camouflage strength in (0,1]
    uint64_t seed = 1;

    void validate() const {
        if (image_size < 8) throw ConfigError("synth: image size too small");
        if (freq_lo <= 0 || freq_hi < freq_lo) throw ConfigError("synth: bad frequency band");
        if (blobs_min < 1 || blobs_max < blobs_min) throw ConfigError("synth: bad blob count range");
        if (delta <= 0.0 || delta > 1.0) throw ConfigError("synth: delta must be in (0,1]");
    }
};

std::vector<Sample> gen_synthetic(const SynthConfig& cfg, int n);

// directory layout: <dir>/images/<stem>.png + <dir>/masks/<stem>.png
std::vector<Sample> load_dataset(const std::string& dir, int target_size,
                                 std::vector<std::string>* warnings = nullptr);
void save_dataset(const std::vector<Sample>& samples, const std::string& dir);

struct AugmentParams {
    bool hflip = false;
    int rot_quarter = 0;  // multiples of 90 degrees
    double scale = 1.0;   // in [0.75, 1.25]
};

AugmentParams sample_augment(Rng& rng);
Sample augment_with(const Sample& s, const AugmentParams& p);
Sample augment(const Sample& s, Rng& rng);

}  // namespace dqnet
