#pragma once

// Little-endian primitive encoding shared by the dataset cache and the
// checkpoint container.

#include <bit>
#include <fstream>
#include <iterator>
#include <cstdint>
#include <cstring>
#include <string>
#include <type_traits>
#include <vector>

#include "usts/error.hpp"

namespace usts::io {

static_assert(std::endian::native == std::endian::little, "only little-endian hosts are supported");

class Writer {
public:
    template <class V>
    void put(V v) {
        static_assert(std::is_trivially_copyable_v<V>);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(V));
    }
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }
    void str(const std::string& s) { bytes(s.data(), s.size()); }

    std::vector<std::uint8_t>& buffer() { return buf_; }
    std::size_t size() const { return buf_.size(); }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size, std::string what)
        : data_(data), size_(size), what_(std::move(what)) {}

    template <class V>
    V get() {
        static_assert(std::is_trivially_copyable_v<V>);
        V v;
        std::memcpy(&v, take(sizeof(V)), sizeof(V));
        return v;
    }
    const std::uint8_t* take(std::size_t n) {
        if (n > size_ - pos_) {
            throw FormatError(what_ + ": truncated at byte offset " + std::to_string(pos_) + " (needed " +
                              std::to_string(n) + " more bytes, " + std::to_string(size_ - pos_) + " left)");
        }
        const auto* p = data_ + pos_;
        pos_ += n;
        return p;
    }
    std::string str(std::size_t n) {
        const auto* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }
    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
    std::string what_;
};

/// LSB-first bit packing.
inline std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& flags) {
    std::vector<std::uint8_t> out((flags.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < flags.size(); ++i)
        if (flags[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    return out;
}

inline std::vector<std::uint8_t> unpack_bits(const std::uint8_t* bits, std::size_t count) {
    std::vector<std::uint8_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = (bits[i / 8] >> (i % 8)) & 1u;
    return out;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace usts::io
