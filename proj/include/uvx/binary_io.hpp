#pragma once

#include "uvx/errors.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <string>
#include <string_view>
#include <vector>

namespace uvx::io {

/// Little-endian byte sink.
class ByteWriter {
public:
    template <class U>
    void put(U v) {
        static_assert(std::is_trivially_copyable_v<U>);
        unsigned char b[sizeof(U)];
        std::memcpy(b, &v, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
        bytes_.insert(bytes_.end(), b, b + sizeof(U));
    }
    void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
    const std::vector<unsigned char>& bytes() const { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

/// Little-endian byte source; reports the failing offset on truncation.
class ByteReader {
public:
    ByteReader(std::vector<unsigned char> bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

    template <class U>
    U get() {
        require(sizeof(U));
        unsigned char b[sizeof(U)];
        std::memcpy(b, bytes_.data() + pos_, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
        pos_ += sizeof(U);
        U v;
        std::memcpy(&v, b, sizeof(U));
        return v;
    }

    std::string get_bytes(std::size_t n) {
        require(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void require(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(what_ + ": truncated at byte offset " + std::to_string(pos_) + ": expected " +
                              std::to_string(n) + " more bytes, found " + std::to_string(bytes_.size() - pos_));
        }
    }

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& what() const { return what_; }

private:
    std::vector<unsigned char> bytes_;
    std::size_t pos_ = 0;
    std::string what_;
};

std::vector<unsigned char> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<unsigned char>& bytes);

} // namespace uvx::io
