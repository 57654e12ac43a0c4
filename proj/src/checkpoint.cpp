#include "realdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace realdiff {

namespace {

constexpr char kMagic[4] = {'C', 'D', 'E', 'F'};

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return true;
}

bool get_u64(std::istream& is, std::uint64_t& v) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
    v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return true;
}

bool get_f64(std::istream& is, double& v) {
    std::uint64_t bits;
    if (!get_u64(is, bits)) return false;
    std::memcpy(&v, &bits, 8);
    return true;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 4);
    put_u32(os, kCheckpointVersion);
    for (const auto& [name, value] : params.entries()) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(value.rank()));
        for (int d = 0; d < value.rank(); ++d) put_u64(os, static_cast<std::uint64_t>(value.dim(d)));
        for (std::int64_t i = 0; i < value.size(); ++i) put_f64(os, value.data()[i]);
    }
    if (!os) throw FormatError("write failure on checkpoint: " + path);
}

ParamStore load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("not a checkpoint file (bad magic): " + path);
    }
    std::uint32_t version = 0;
    if (!get_u32(is, version)) throw FormatError("truncated checkpoint header: " + path);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    }
    ParamStore params;
    while (is.peek() != std::char_traits<char>::eof()) {
        std::uint32_t name_len = 0;
        if (!get_u32(is, name_len)) throw FormatError("truncated checkpoint record: " + path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw FormatError("truncated parameter name: " + path);
        std::uint32_t rank = 0;
        if (!get_u32(is, rank)) throw FormatError("truncated record for " + name + ": " + path);
        if (rank > 8) throw FormatError("implausible rank for " + name + ": " + path);
        Shape shape;
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            std::uint64_t dim = 0;
            if (!get_u64(is, dim)) throw FormatError("truncated dims for " + name + ": " + path);
            shape.push_back(static_cast<int>(dim));
            numel *= static_cast<std::int64_t>(dim);
        }
        std::vector<double> data(static_cast<std::size_t>(numel));
        for (auto& v : data) {
            if (!get_f64(is, v)) throw FormatError("truncated payload for " + name + ": " + path);
        }
        params.create(name, Tensor(std::move(shape), std::move(data)));
    }
    return params;
}

}  // namespace realdiff
