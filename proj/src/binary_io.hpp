#pragma once

// Little-endian stream helpers shared by the dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "egnn/errors.hpp"

namespace egnn::io {

class ByteWriter {
public:
    explicit ByteWriter(std::ostream& out) : out_(out) {}

    void bytes(const void* src, std::size_t n) {
        out_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) { put_le(v); }
    void u32(std::uint32_t v) { put_le(v); }
    void u64(std::uint64_t v) { put_le(v); }
    void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

private:
    template <typename U>
    void put_le(U v) {
        unsigned char buf[sizeof(U)];
        for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = (v >> (8 * i)) & 0xff;
        bytes(buf, sizeof(U));
    }

    std::ostream& out_;
};

class ByteReader {
public:
    ByteReader(std::istream& in, std::string context) : in_(in), context_(std::move(context)) {}

    std::size_t offset() const { return offset_; }

    void bytes(void* dst, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        const std::size_t got = static_cast<std::size_t>(in_.gcount());
        offset_ += got;
        if (got != n)
            throw DataError(context_ + ": truncated " + what + " at byte " +
                            std::to_string(offset_));
    }
    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        bytes(&v, 1, what);
        return v;
    }
    std::uint16_t u16(const char* what) { return get_le<std::uint16_t>(what); }
    std::uint32_t u32(const char* what) { return get_le<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return get_le<std::uint64_t>(what); }
    float f32(const char* what) { return std::bit_cast<float>(get_le<std::uint32_t>(what)); }
    double f64(const char* what) { return std::bit_cast<double>(get_le<std::uint64_t>(what)); }
    std::string str(const char* what) {
        const std::uint32_t len = u32(what);
        std::string s(len, '\0');
        if (len) bytes(s.data(), len, what);
        return s;
    }

    void expect_eof(const char* what) {
        char extra;
        in_.read(&extra, 1);
        if (in_.gcount() != 0)
            throw DataError(context_ + ": unexpected trailing bytes after " + what + " at byte " +
                            std::to_string(offset_));
    }

private:
    template <typename U>
    U get_le(const char* what) {
        unsigned char buf[sizeof(U)];
        bytes(buf, sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
        return v;
    }

    std::istream& in_;
    std::string context_;
    std::size_t offset_ = 0;
};

} // namespace egnn::io
