#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mambatrans/tensor.hpp"

// Flat binary tensor format "MTT1":
//   magic "MTT1" | u32 rank | u32 dims[rank] | u8 precision (32 or 64) |
//   raw little-endian scalars.
// Checkpoints are a tagged container of named MTT1 records preceded by a
// JSON config header (canonical key order).

namespace mambatrans {

namespace detail {

template <typename T>
constexpr uint8_t precision_tag() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 32 : 64;
}

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("truncated stream reading u32");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    os.write("MTT1", 4);
    detail::write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) detail::write_u32(os, static_cast<uint32_t>(t.dim(i)));
    const uint8_t tag = detail::precision_tag<T>();
    os.write(reinterpret_cast<const char*>(&tag), 1);
    // Raw scalars; this codebase targets little-endian hosts.
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.data().size() * sizeof(T)));
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MTT1", 4) != 0) throw DataError("bad tensor magic (expected MTT1)");
    const uint32_t rank = detail::read_u32(is);
    if (rank > 8) throw DataError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(detail::read_u32(is));
    uint8_t tag = 0;
    is.read(reinterpret_cast<char*>(&tag), 1);
    if (tag != detail::precision_tag<T>())
        throw DataError("precision tag " + std::to_string(tag) + " does not match requested " +
                        std::to_string(detail::precision_tag<T>()));
    std::vector<T> data(static_cast<size_t>(numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
    if (!is) throw DataError("truncated tensor payload");
    return Tensor<T>::from_data(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for write: " + path);
    write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    return read_tensor<T>(is);
}

// Named-record checkpoint. `magic` distinguishes model ("MTCKPT1") from
// detector ("MTDET1") files; `header` is the JSON-encoded config.
template <typename T>
void write_checkpoint(const std::string& path, const std::string& magic, const std::string& header,
                      const std::vector<std::pair<std::string, const Tensor<T>*>>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for write: " + path);
    detail::write_u32(os, static_cast<uint32_t>(magic.size()));
    os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
    detail::write_u32(os, static_cast<uint32_t>(header.size()));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::write_u32(os, static_cast<uint32_t>(records.size()));
    for (const auto& [name, tensor] : records) {
        detail::write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, *tensor);
    }
}

template <typename T>
struct Checkpoint {
    std::string header;
    std::map<std::string, Tensor<T>> records;
};

template <typename T>
Checkpoint<T> read_checkpoint(const std::string& path, const std::string& expected_magic) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    const uint32_t mlen = detail::read_u32(is);
    if (mlen > 32) throw DataError("implausible checkpoint magic length in " + path);
    std::string magic(mlen, '\0');
    is.read(magic.data(), mlen);
    if (magic != expected_magic)
        throw DataError("checkpoint magic '" + magic + "' in " + path + ", expected '" + expected_magic + "'");
    Checkpoint<T> ckpt;
    const uint32_t hlen = detail::read_u32(is);
    ckpt.header.resize(hlen);
    is.read(ckpt.header.data(), hlen);
    const uint32_t count = detail::read_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t nlen = detail::read_u32(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        if (!is) throw DataError("truncated checkpoint " + path);
        ckpt.records.emplace(std::move(name), read_tensor<T>(is));
    }
    return ckpt;
}

}  // namespace mambatrans
