#include "cmb/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "cmb/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "CMBT serialization assumes a little-endian host");

namespace cmb {

namespace {
constexpr char kMagic[4] = {'C', 'M', 'B', 'T'};
constexpr uint8_t kVersion = 1;
} // namespace

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write(kMagic, 4);
    uint8_t version = kVersion;
    uint8_t rank = static_cast<uint8_t>(t.rank());
    f.write(reinterpret_cast<const char*>(&version), 1);
    f.write(reinterpret_cast<const char*>(&rank), 1);
    for (int i = 0; i < t.rank(); ++i) {
        uint64_t d = static_cast<uint64_t>(t.dim(i));
        f.write(reinterpret_cast<const char*>(&d), 8);
    }
    f.write(reinterpret_cast<const char*>(t.data()), sizeof(double) * t.size());
    if (!f) throw IoError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    auto fail = [&](const std::string& what, int64_t offset) {
        throw FormatError(path + ": " + what + " at byte offset " + std::to_string(offset));
    };
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) fail("bad magic", 0);
    uint8_t version = 0, rank = 0;
    f.read(reinterpret_cast<char*>(&version), 1);
    if (!f || version != kVersion) fail("unsupported version", 4);
    f.read(reinterpret_cast<char*>(&rank), 1);
    if (!f || rank == 0) fail("bad rank", 5);
    Shape shape(rank);
    int64_t offset = 6;
    for (int i = 0; i < rank; ++i) {
        uint64_t d = 0;
        f.read(reinterpret_cast<char*>(&d), 8);
        if (!f || d == 0) fail("bad dimension", offset);
        shape[i] = static_cast<int64_t>(d);
        offset += 8;
    }
    int64_t n = numel(shape);
    std::vector<double> data(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(data.data()), sizeof(double) * n);
    if (f.gcount() != static_cast<std::streamsize>(sizeof(double) * n))
        fail("truncated payload", offset + f.gcount());
    return Tensor::from_data(std::move(shape), std::move(data));
}

} // namespace cmb
