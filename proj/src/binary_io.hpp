#pragma once

// Little-endian helpers for the DSTF and DSTW raster formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace dst::detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline void put_magic(std::vector<std::uint8_t>& out, const char (&magic)[5]) {
    out.insert(out.end(), magic, magic + 4);
}

/// Bounds-checked cursor; every failure reports the byte offset.
template <typename Error>
class Reader {
  public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void expect_magic(const char (&magic)[5]) {
        need(4, "magic");
        if (std::memcmp(bytes_.data(), magic, 4) != 0) {
            throw Error(std::string("bad magic at offset 0: expected \"") + magic + "\"");
        }
        pos_ += 4;
    }

    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    float f32(const std::string& what) { return std::bit_cast<float>(u32(what)); }

    void need(std::size_t n, const std::string& what) const {
        if (remaining() < n) {
            throw Error("truncated payload at offset " + std::to_string(pos_) + ": need " + std::to_string(n) +
                        " bytes for " + what + ", " + std::to_string(remaining()) + " left");
        }
    }

  private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace dst::detail
