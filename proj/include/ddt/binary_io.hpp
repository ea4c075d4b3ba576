#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "ddt/errors.hpp"

namespace ddt::bin {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
T byteswap_if_big(T v) {
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        std::uint8_t raw[sizeof(T)];
        std::memcpy(raw, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
        std::memcpy(&v, raw, sizeof(T));
    }
    return v;
}

class Writer {
public:
    template <class T>
        requires std::is_arithmetic_v<T>
    void put(T v) {
        v = byteswap_if_big(v);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void put_bytes(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
    void put_string(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    std::vector<std::uint8_t>& bytes() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <class T>
        requires std::is_arithmetic_v<T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return byteswap_if_big(v);
    }
    std::span<const std::uint8_t> get_bytes(std::uint64_t n, const char* what) {
        need(n, what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::string get_string(const char* what) {
        const auto n = get<std::uint32_t>(what);
        auto s = get_bytes(n, what);
        return {s.begin(), s.end()};
    }
    std::uint64_t offset() const { return pos_; }
    std::uint64_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::uint64_t n, const char* what) const {
        if (n > bytes_.size() - pos_) throw FormatError(pos_, std::string("truncated ") + what);
    }

    std::span<const std::uint8_t> bytes_;
    std::uint64_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path);
// Writes to a sibling temporary and renames over `path`.
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace ddt::bin
