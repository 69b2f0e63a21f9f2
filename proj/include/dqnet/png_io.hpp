#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dqnet {

// 8-bit image, interleaved rows, 1 or 3 channels
struct ImageU8 {
    int h = 0;
    int w = 0;
    int channels = 1;
    std::vector<uint8_t> px;
};

ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);

}  // namespace dqnet
