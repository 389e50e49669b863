#pragma once

// "MODW" weight container:
//   magic "MODW", version u16 LE, then records until EOF of
//   {name length u16 LE, UTF-8 name, rank u8, dims u32 LE each, f32 LE data}.

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mode/nn.hpp"

namespace mode {

namespace io {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }
inline void put_u16(std::ostream& os, std::uint16_t v) {
    put_u8(os, v & 0xFF);
    put_u8(os, v >> 8);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) put_u8(os, (v >> (8 * i)) & 0xFF);
}
inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline std::uint8_t get_u8(std::istream& is) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("unexpected end of file");
    return static_cast<std::uint8_t>(c);
}
inline std::uint16_t get_u16(std::istream& is) {
    const std::uint16_t lo = get_u8(is);
    return static_cast<std::uint16_t>(lo | (get_u8(is) << 8));
}
inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(get_u8(is)) << (8 * i);
    return v;
}
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
    char buf[4];
    if (!is.read(buf, 4) || std::string(buf, 4) != std::string(magic, 4))
        throw FormatError(what + ": bad magic, expected \"" + std::string(magic, 4) + "\"");
}

}  // namespace io

struct WeightRecord {
    std::string name;
    Tensor<float> value;

    friend bool operator==(const WeightRecord&, const WeightRecord&) = default;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const std::vector<WeightRecord>& records) {
    os.write("MODW", 4);
    io::put_u16(os, kCheckpointVersion);
    for (const auto& r : records) {
        if (r.name.size() > 0xFFFF) throw ValueError("checkpoint: name too long");
        if (r.value.rank() > 0xFF) throw ValueError("checkpoint: rank too large");
        io::put_u16(os, static_cast<std::uint16_t>(r.name.size()));
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        io::put_u8(os, static_cast<std::uint8_t>(r.value.rank()));
        for (auto d : r.value.shape()) io::put_u32(os, static_cast<std::uint32_t>(d));
        for (float v : r.value) io::put_f32(os, v);
    }
    if (!os) throw FormatError("checkpoint: write failed");
}

inline std::vector<WeightRecord> read_checkpoint(std::istream& is) {
    io::expect_magic(is, "MODW", "checkpoint");
    const auto version = io::get_u16(is);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    std::vector<WeightRecord> out;
    while (is.peek() != std::char_traits<char>::eof()) {
        WeightRecord r;
        r.name.resize(io::get_u16(is));
        if (!is.read(r.name.data(), static_cast<std::streamsize>(r.name.size())))
            throw FormatError("checkpoint: truncated name");
        Shape shape(io::get_u8(is));
        for (auto& d : shape) d = io::get_u32(is);
        std::vector<float> data(volume(shape));
        for (auto& v : data) v = io::get_f32(is);
        r.value = Tensor<float>(std::move(shape), std::move(data));
        out.push_back(std::move(r));
    }
    return out;
}

inline void save_checkpoint(const std::string& path, const std::vector<WeightRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    write_checkpoint(os, records);
}

inline std::vector<WeightRecord> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");
    try {
        return read_checkpoint(is);
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

template <typename Real>
std::vector<WeightRecord> to_records(const std::vector<nn::Param<Real>*>& params) {
    std::vector<WeightRecord> out;
    for (const auto* p : params) out.push_back({p->name, p->value.template cast<float>()});
    return out;
}

/// Assigns records to parameters by name; every parameter must be present.
template <typename Real>
void assign_records(const std::vector<WeightRecord>& records, const std::vector<nn::Param<Real>*>& params) {
    for (auto* p : params) {
        auto it = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.name == p->name; });
        if (it == records.end()) throw FormatError("checkpoint: missing parameter '" + p->name + "'");
        require_same_shape(it->value.shape(), p->value.shape(), "checkpoint parameter '" + p->name + "'");
        p->value = it->value.template cast<Real>();
        p->grad = Tensor<Real>(p->value.shape());
    }
}

}  // namespace mode
