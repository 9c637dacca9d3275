#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "cmtr/tensor.hpp"

// Tensor wire format: u32 rank, rank x u32 dims, then the row-major float64
// payload; everything little-endian. Used by checkpoints, dataset blobs and
// embedding dumps.

namespace cmtr {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    check(bool(is), "read_u32: truncated stream");
    return v;
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
    check(bool(os), "write_tensor: stream failure");
}

inline Tensor read_tensor(std::istream& is) {
    std::uint32_t rank = read_u32(is);
    check(rank <= 8, "read_tensor: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = read_u32(is);
    std::vector<double> data(numel(shape));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    check(bool(is), "read_tensor: truncated payload");
    return Tensor::from_data(std::move(shape), std::move(data));
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    check(bool(is), "read_string: truncated stream");
    return s;
}

inline void save_tensor_file(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    check(bool(os), "cannot open for write: " + path);
    write_tensor(os, t);
}

inline Tensor load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(bool(is), "cannot open for read: " + path);
    return read_tensor(is);
}

}  // namespace cmtr
