#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "caga/tensor.hpp"

// TNSR raw tensor file: magic "TNSR", u8 version=1, u8 dtype (0=f32, 1=f64),
// u8 rank, rank x u32 little-endian extents, row-major payload (IEEE-754,
// little-endian). Used for weight checkpoints and dataset tensors.

namespace caga {

namespace detail {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw IoError("TNSR: truncated header in " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32_le(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32_le(os, bits);
}

inline void put_f64_le(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u32_le(os, static_cast<std::uint32_t>(bits & 0xFFFFFFFFULL));
    put_u32_le(os, static_cast<std::uint32_t>(bits >> 32));
}

inline float get_f32_le(std::istream& is, const std::string& path) {
    std::uint32_t bits = get_u32_le(is, path);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline double get_f64_le(std::istream& is, const std::string& path) {
    std::uint64_t lo = get_u32_le(is, path);
    std::uint64_t hi = get_u32_le(is, path);
    std::uint64_t bits = lo | (hi << 32);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

} // namespace detail

enum class TnsrDtype : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr TnsrDtype native_dtype() {
    return sizeof(T) == 4 ? TnsrDtype::f32 : TnsrDtype::f64;
}

template <typename T>
void save_tnsr(const Tensor<T>& t, const std::string& path,
               TnsrDtype dtype = native_dtype<T>()) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("TNSR: cannot open " + path + " for writing");
    os.write("TNSR", 4);
    const unsigned char version = 1;
    const unsigned char dt = static_cast<unsigned char>(dtype);
    const unsigned char rank = static_cast<unsigned char>(t.rank());
    os.put(static_cast<char>(version));
    os.put(static_cast<char>(dt));
    os.put(static_cast<char>(rank));
    for (std::size_t e : t.shape()) detail::put_u32_le(os, static_cast<std::uint32_t>(e));
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (dtype == TnsrDtype::f32)
            detail::put_f32_le(os, static_cast<float>(t[i]));
        else
            detail::put_f64_le(os, static_cast<double>(t[i]));
    }
    if (!os) throw IoError("TNSR: write failed for " + path);
}

// Loads into the build's scalar type, converting from the stored dtype.
template <typename T>
Tensor<T> load_tnsr(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("TNSR: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "TNSR", 4) != 0)
        throw IoError("TNSR: bad magic in " + path);
    int version = is.get(), dt = is.get(), rank = is.get();
    if (version != 1) throw IoError("TNSR: unsupported version in " + path);
    if (dt != 0 && dt != 1) throw IoError("TNSR: unknown dtype in " + path);
    if (rank < 0 || rank > 8) throw IoError("TNSR: bad rank in " + path);
    Shape shape(static_cast<std::size_t>(rank));
    for (auto& e : shape) e = detail::get_u32_le(is, path);
    Tensor<T> t = Tensor<T>::zeros(shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = dt == 0 ? static_cast<T>(detail::get_f32_le(is, path))
                       : static_cast<T>(detail::get_f64_le(is, path));
    }
    return t;
}

} // namespace caga
