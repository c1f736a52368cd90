#include "calpa/tensor.hpp"

#include <cstdio>
#include <cstring>

namespace calpa {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t x) {
    out.push_back(static_cast<std::uint8_t>(x & 0xff));
    out.push_back(static_cast<std::uint8_t>((x >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((x >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((x >> 24) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

} // namespace

void append_blob(std::vector<std::uint8_t>& out, const TensorF& t) {
    out.push_back('C');
    out.push_back('L');
    out.push_back('P');
    out.push_back('T');
    put_u32(out, 1u);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    put_u32(out, 0u);
    for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : t.v) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
}

TensorF read_blob(const std::uint8_t* data, std::size_t size, std::size_t& off) {
    if (off + 16 > size) throw std::runtime_error("blob: truncated header");
    const std::uint8_t* p = data + off;
    if (p[0] != 'C' || p[1] != 'L' || p[2] != 'P' || p[3] != 'T')
        throw std::runtime_error("blob: bad magic");
    std::uint32_t version = get_u32(p + 4);
    if (version != 1u) throw std::runtime_error("blob: unsupported version");
    std::uint32_t rank = get_u32(p + 8);
    if (rank > 8u) throw std::runtime_error("blob: implausible rank");
    off += 16;
    if (off + 4u * rank > size) throw std::runtime_error("blob: truncated dims");
    std::vector<int> shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<int>(get_u32(data + off));
        off += 4;
    }
    TensorF t(shape);
    if (off + 4u * t.numel() > size) throw std::runtime_error("blob: truncated values");
    for (std::size_t i = 0; i < t.numel(); ++i) {
        std::uint32_t bits = get_u32(data + off);
        off += 4;
        float f;
        std::memcpy(&f, &bits, 4);
        t.v[i] = f;
    }
    return t;
}

void save_blob(const std::string& path, const TensorF& t) {
    std::vector<std::uint8_t> buf;
    buf.reserve(16 + 4 * t.shape.size() + 4 * t.numel());
    append_blob(buf, t);
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("blob: cannot open for write: " + path);
    std::size_t n = std::fwrite(buf.data(), 1, buf.size(), f);
    std::fclose(f);
    if (n != buf.size()) throw std::runtime_error("blob: short write: " + path);
}

TensorF load_blob(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("blob: cannot open for read: " + path);
    std::fseek(f, 0, SEEK_END);
    long sz = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(sz));
    std::size_t n = std::fread(buf.data(), 1, buf.size(), f);
    std::fclose(f);
    if (n != buf.size()) throw std::runtime_error("blob: short read: " + path);
    std::size_t off = 0;
    return read_blob(buf.data(), buf.size(), off);
}

} // namespace calpa
