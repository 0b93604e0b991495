#pragma once

// Little-endian byte (de)serialisation shared by the feature and model
// containers. Private to the core library.

#include "covifex/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace covifex::detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }

    void u16(std::uint16_t v) { put_le(v); }
    void u32(std::uint32_t v) { put_le(v); }
    void u64(std::uint64_t v) { put_le(v); }
    void i32(std::int32_t v) { put_le(static_cast<std::uint32_t>(v)); }
    void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }

    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    // u16 length prefix, UTF-8 payload.
    void str16(std::string_view s) {
        if (s.size() > 0xFFFF) throw ValidationError("string too long for u16 length prefix");
        u16(static_cast<std::uint16_t>(s.size()));
        bytes(s);
    }

    std::size_t size() const noexcept { return buf_.size(); }
    std::vector<std::uint8_t>& buffer() noexcept { return buf_; }
    const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

    void patch_u32(std::size_t offset, std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_[offset + i] = static_cast<std::uint8_t>(v >> (8 * i));
    }

private:
    template <class T>
    void put_le(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> data, std::string what) : data_(data), what_(std::move(what)) {}

    std::uint8_t u8() { return get_le<std::uint8_t>(); }
    std::uint16_t u16() { return get_le<std::uint16_t>(); }
    std::uint32_t u32() { return get_le<std::uint32_t>(); }
    std::uint64_t u64() { return get_le<std::uint64_t>(); }
    std::int32_t i32() { return static_cast<std::int32_t>(get_le<std::uint32_t>()); }
    float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::string str16() { return bytes(u16()); }

    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }

    void need(std::size_t n) const {
        if (n > remaining()) {
            throw FormatError("truncated " + what_ + " at offset " + std::to_string(pos_) + " (need " +
                              std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left)");
        }
    }

private:
    template <class T>
    T get_le() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v = static_cast<T>(v | static_cast<T>(static_cast<T>(data_[pos_ + i]) << (8 * i)));
        }
        pos_ += sizeof(T);
        return v;
    }

    std::span<const std::uint8_t> data_;
    std::string what_;
    std::size_t pos_ = 0;
};

std::uint32_t crc32(std::span<const std::uint8_t> data);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);

} // namespace covifex::detail
