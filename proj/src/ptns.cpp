#include "protoprp/ptns.hpp"

#include "protoprp/errors.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace protoprp {

namespace {

void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t get_u32le(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

} // namespace

std::vector<std::uint8_t> ptns_encode(const Tensor& t) {
    if (t.rank() < 1 || t.rank() > 4)
        throw IoError("ptns: tensor rank must be 1..4, got " + std::to_string(t.rank()));
    std::vector<std::uint8_t> out;
    out.reserve(5 + 4 * t.rank() + 4 * t.size());
    out.push_back('P');
    out.push_back('T');
    out.push_back('N');
    out.push_back('S');
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape)
        put_u32le(out, static_cast<std::uint32_t>(d));
    static_assert(sizeof(float) == 4);
    for (float v : t.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32le(out, bits);
    }
    return out;
}

Tensor ptns_decode(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 5 || bytes[0] != 'P' || bytes[1] != 'T' || bytes[2] != 'N' ||
        bytes[3] != 'S')
        throw IoError("ptns: bad magic in " + origin);
    const int rank = bytes[4];
    if (rank < 1 || rank > 4)
        throw IoError("ptns: rank " + std::to_string(rank) + " out of range in " + origin);
    std::size_t off = 5;
    if (bytes.size() < off + 4 * static_cast<std::size_t>(rank))
        throw IoError("ptns: truncated header in " + origin);
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (int i = 0; i < rank; ++i) {
        const std::uint32_t d = get_u32le(bytes.data() + off);
        off += 4;
        if (d == 0 || d > (1u << 24))
            throw IoError("ptns: implausible dim " + std::to_string(d) + " in " + origin);
        shape[i] = static_cast<int>(d);
        numel *= d;
    }
    if (bytes.size() != off + 4 * numel)
        throw IoError("ptns: payload size mismatch in " + origin + " (expected " +
                      std::to_string(off + 4 * numel) + " bytes, got " +
                      std::to_string(bytes.size()) + ")");
    std::vector<float> data(numel);
    for (std::size_t i = 0; i < numel; ++i) {
        const std::uint32_t bits = get_u32le(bytes.data() + off + 4 * i);
        std::memcpy(&data[i], &bits, 4);
    }
    return Tensor::from(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::streamoff len = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(len));
    if (len > 0) in.read(reinterpret_cast<char*>(bytes.data()), len);
    if (!in) throw IoError("read failed for " + path);
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(parent, ec);
        if (ec) throw IoError("cannot create directory " + parent.string() + ": " + ec.message());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    if (!bytes.empty()) out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    if (!out) throw IoError("write failed for " + path);
}

void write_file_text(const std::string& path, const std::string& text) {
    std::vector<std::uint8_t> bytes(text.begin(), text.end());
    write_file_bytes(path, bytes);
}

std::string read_file_text(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

void write_ptns(const std::string& path, const Tensor& t) {
    write_file_bytes(path, ptns_encode(t));
}

Tensor read_ptns(const std::string& path) {
    return ptns_decode(read_file_bytes(path), path);
}

} // namespace protoprp
