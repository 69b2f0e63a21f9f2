#include "dqnet/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "dqnet/tensor.hpp"

namespace dqnet {

namespace {

const char kMagic[4] = {'D', 'Q', 'N', 'T'};

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw IoError("checkpoint truncated");
    }
    uint8_t u8() {
        need(1);
        return buf[pos++];
    }
    uint16_t u16() {
        need(2);
        const uint16_t v = static_cast<uint16_t>(buf[pos] | (buf[pos + 1] << 8));
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + static_cast<size_t>(i)]) << (8 * i);
        pos += 4;
        return v;
    }
};

}  // namespace

uint32_t crc32(const uint8_t* data, size_t len) {
    static uint32_t table[256];
    static bool built = false;
    if (!built) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int b = 0; b < 8; ++b) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        built = true;
    }
    uint32_t crc = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

std::vector<float> TensorRecord::as_floats() const {
    if (dtype != 0) throw IoError("record '" + name + "' is not f32");
    std::vector<float> out(bytes.size() / 4);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

std::vector<double> TensorRecord::as_doubles() const {
    if (dtype != 1) throw IoError("record '" + name + "' is not f64");
    std::vector<double> out(bytes.size() / 8);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

TensorRecord record_from_floats(const std::string& name, std::vector<uint32_t> dims,
                                const std::vector<float>& values) {
    TensorRecord rec;
    rec.name = name;
    rec.dtype = 0;
    rec.dims = std::move(dims);
    if (rec.element_count() != static_cast<int64_t>(values.size()))
        throw IoError("record '" + name + "': dims do not match value count");
    rec.bytes.resize(values.size() * 4);
    std::memcpy(rec.bytes.data(), values.data(), rec.bytes.size());
    return rec;
}

TensorRecord record_from_doubles(const std::string& name, std::vector<uint32_t> dims,
                                 const std::vector<double>& values) {
    TensorRecord rec;
    rec.name = name;
    rec.dtype = 1;
    rec.dims = std::move(dims);
    if (rec.element_count() != static_cast<int64_t>(values.size()))
        throw IoError("record '" + name + "': dims do not match value count");
    rec.bytes.resize(values.size() * 8);
    std::memcpy(rec.bytes.data(), values.data(), rec.bytes.size());
    return rec;
}

TensorRecord record_from_text(const std::string& name, const std::string& text) {
    std::vector<float> vals(text.size());
    for (size_t i = 0; i < text.size(); ++i) vals[i] = static_cast<float>(static_cast<uint8_t>(text[i]));
    return record_from_floats(name, {static_cast<uint32_t>(std::max<size_t>(text.size(), 1))},
                              text.empty() ? std::vector<float>{0.0f} : vals);
}

std::string text_from_record(const TensorRecord& rec) {
    std::string out;
    for (float v : rec.as_floats()) {
        const int c = static_cast<int>(v);
        if (c > 0) out.push_back(static_cast<char>(c));
    }
    return out;
}

void write_checkpoint(const std::string& path, const std::vector<TensorRecord>& records) {
    std::vector<uint8_t> payload;
    for (const auto& rec : records) {
        if (rec.name.size() > 0xFFFF) throw IoError("tensor name too long");
        if (rec.dims.size() > 0xFF) throw IoError("tensor rank too large");
        const size_t esize = rec.dtype == 0 ? 4 : 8;
        if (rec.bytes.size() != static_cast<size_t>(rec.element_count()) * esize)
            throw IoError("record '" + rec.name + "': payload size mismatch");
        put_u16(payload, static_cast<uint16_t>(rec.name.size()));
        payload.insert(payload.end(), rec.name.begin(), rec.name.end());
        payload.push_back(rec.dtype);
        payload.push_back(static_cast<uint8_t>(rec.dims.size()));
        for (uint32_t d : rec.dims) put_u32(payload, d);
        payload.insert(payload.end(), rec.bytes.begin(), rec.bytes.end());
    }

    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<uint32_t>(records.size()));
    out.insert(out.end(), payload.begin(), payload.end());
    put_u32(out, crc32(payload.data(), payload.size()));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint '" + path + "'");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write on checkpoint '" + path + "'");
}

std::vector<TensorRecord> read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint '" + path + "'");
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 16) throw IoError("checkpoint too small");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) throw IoError("checkpoint: bad magic bytes");
    Reader r{buf, 4};
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    const uint32_t count = r.u32();

    const size_t payload_start = r.pos;
    if (buf.size() < payload_start + 4) throw IoError("checkpoint truncated");
    const size_t payload_len = buf.size() - payload_start - 4;
    Reader tail{buf, payload_start + payload_len};
    const uint32_t stored_crc = tail.u32();
    const uint32_t actual_crc = crc32(buf.data() + payload_start, payload_len);
    if (stored_crc != actual_crc) throw IoError("checkpoint: checksum mismatch");

    std::vector<TensorRecord> records;
    records.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        TensorRecord rec;
        const uint16_t name_len = r.u16();
        r.need(name_len);
        rec.name.assign(reinterpret_cast<const char*>(buf.data() + r.pos), name_len);
        r.pos += name_len;
        rec.dtype = r.u8();
        if (rec.dtype > 1) throw IoError("checkpoint: unknown dtype code");
        const uint8_t rank = r.u8();
        for (uint8_t d = 0; d < rank; ++d) rec.dims.push_back(r.u32());
        const size_t esize = rec.dtype == 0 ? 4 : 8;
        const size_t nbytes = static_cast<size_t>(rec.element_count()) * esize;
        r.need(nbytes);
        rec.bytes.assign(buf.begin() + static_cast<int64_t>(r.pos),
                         buf.begin() + static_cast<int64_t>(r.pos + nbytes));
        r.pos += nbytes;
        records.push_back(std::move(rec));
    }
    if (r.pos != payload_start + payload_len)
        throw IoError("checkpoint: trailing bytes after the last tensor");
    return records;
}

}  // namespace dqnet
