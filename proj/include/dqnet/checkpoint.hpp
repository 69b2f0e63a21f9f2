#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dqnet {

// Binary archive: magic "DQNT", u32 version, u32 tensor count; per tensor a
// u16 name length, the UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank,
// u32 dims, raw little-endian values; trailing u32 CRC-32 over the payload
// (every byte between the tensor count and the checksum).

constexpr uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    uint8_t dtype = 0;  // 0: f32, 1: f64
    std::vector<uint32_t> dims;
    std::vector<uint8_t> bytes;  // raw little-endian payload

    int64_t element_count() const {
        int64_t n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }
    std::vector<float> as_floats() const;
    std::vector<double> as_doubles() const;
};

TensorRecord record_from_floats(const std::string& name, std::vector<uint32_t> dims,
                                const std::vector<float>& values);
TensorRecord record_from_doubles(const std::string& name, std::vector<uint32_t> dims,
                                 const std::vector<double>& values);
// arbitrary text stored as one f32 element per byte
TensorRecord record_from_text(const std::string& name, const std::string& text);
std::string text_from_record(const TensorRecord& rec);

uint32_t crc32(const uint8_t* data, size_t len);

void write_checkpoint(const std::string& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> read_checkpoint(const std::string& path);

}  // namespace dqnet
