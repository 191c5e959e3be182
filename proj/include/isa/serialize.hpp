#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "isa/error.hpp"
#include "isa/tensor.hpp"

namespace isa {

// Binary tensor container: magic "ISAT", version byte, u32 rank, u32 per
// dimension, then row-major little-endian f64 payload.

inline constexpr char kTensorMagic[4] = {'I', 'S', 'A', 'T'};
inline constexpr std::uint8_t kTensorVersion = 1;

namespace detail {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                 static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    os.write(b, 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64_le(std::ostream& os, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

inline double get_f64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

}  // namespace detail

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_tensor: cannot open " + path);
    os.write(kTensorMagic, 4);
    os.put(static_cast<char>(kTensorVersion));
    detail::put_u32_le(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32_le(os, static_cast<std::uint32_t>(d));
    for (double v : t.values()) detail::put_f64_le(os, v);
    if (!os) throw IoError("save_tensor: write failed for " + path);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_tensor: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kTensorMagic, 4) != 0) {
        throw IoError("load_tensor: bad magic in " + path);
    }
    const int version = is.get();
    if (version != kTensorVersion) {
        throw IoError("load_tensor: unsupported version " + std::to_string(version) + " in " +
                      path);
    }
    const std::uint32_t rank = detail::get_u32_le(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u32_le(is);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = detail::get_f64_le(is);
    if (!is) throw IoError("load_tensor: truncated payload in " + path);
    return Tensor::from(std::move(shape), std::move(values));
}

}  // namespace isa
