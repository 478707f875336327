#pragma once

// File formats.
//
// NDT1 tensor record: magic "NDT1", u32 LE rank, rank x u64 LE extents, then row-major
// IEEE-754 binary32 LE values. PGM P5 / PPM P6 with maxval 255 for masks and overlays.

#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "projnet/error.hpp"
#include "projnet/tensor.hpp"

namespace projnet::io {

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    std::array<char, 4> b;
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b.data(), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    std::array<char, 8> b;
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b.data(), 8);
}

inline std::uint64_t get_le(std::istream& is, int bytes) {
    std::array<unsigned char, 8> b{};
    if (!is.read(reinterpret_cast<char*>(b.data()), bytes)) throw IoError("NDT1: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

} // namespace detail

template <class T>
void write_ndt(std::ostream& os, const Tensor<T>& t) {
    os.write("NDT1", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u64(os, e);
    for (T v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    if (!os) throw IoError("NDT1: write failed");
}

template <class T = float>
Tensor<T> read_ndt(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "NDT1", 4) != 0) throw IoError("NDT1: bad magic");
    const auto rank = static_cast<std::uint32_t>(detail::get_le(is, 4));
    if (rank > 16) throw IoError("NDT1: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(detail::get_le(is, 8));
    const std::size_t n = numel(shape);
    std::vector<unsigned char> raw(n * 4);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw IoError("NDT1: truncated payload");
    std::vector<T> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(raw[i * 4 + b]) << (8 * b);
        data[i] = static_cast<T>(std::bit_cast<float>(u));
    }
    return Tensor<T>(std::move(shape), std::move(data));
}

template <class T>
void save_ndt(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_ndt(os, t);
}

template <class T = float>
Tensor<T> load_ndt(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_ndt<T>(is);
}

/// 8-bit grey image, row-major, `rows` x `cols`.
struct GreyImage {
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> pixels;
};

inline void write_pgm(const std::filesystem::path& path, const GreyImage& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "P5\n" << img.cols << " " << img.rows << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!os) throw IoError("PGM: write failed");
}

namespace detail {
inline std::string next_token(std::istream& is) {
    std::string tok;
    char c;
    while (is.get(c)) {
        if (c == '#') {
            std::string skip;
            std::getline(is, skip);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!tok.empty()) break;
            continue;
        }
        tok += c;
    }
    return tok;
}
} // namespace detail

inline GreyImage read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    if (detail::next_token(is) != "P5") throw IoError(path.string() + ": not a binary PGM");
    GreyImage img;
    try {
        img.cols = std::stoul(detail::next_token(is));
        img.rows = std::stoul(detail::next_token(is));
        if (std::stoul(detail::next_token(is)) != 255) throw IoError(path.string() + ": maxval must be 255");
    } catch (const std::logic_error&) {
        throw IoError(path.string() + ": malformed PGM header");
    }
    img.pixels.resize(img.rows * img.cols);
    if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
        throw IoError(path.string() + ": truncated PGM");
    return img;
}

struct Rgb {
    std::uint8_t r, g, b;
};

inline void write_ppm(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                      const std::vector<Rgb>& pixels) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "P6\n" << cols << " " << rows << "\n255\n";
    for (const auto& p : pixels) {
        const char px[3] = {static_cast<char>(p.r), static_cast<char>(p.g), static_cast<char>(p.b)};
        os.write(px, 3);
    }
    if (!os) throw IoError("PPM: write failed");
}

} // namespace projnet::io
