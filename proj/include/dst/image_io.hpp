#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "dst/image.hpp"

namespace dst {

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Loads an 8-bit PNG or JPEG as RGB in [0,1] (v / 255). Grey and
/// alpha inputs are expanded/dropped to three channels.
Image load_image(const std::filesystem::path& path);

/// Writes PNG or JPEG, chosen by extension. Values are clamped to [0,1]
/// and quantised with round-half-up: floor(v * 255 + 0.5).
void save_image(const std::filesystem::path& path, const Image& img);

/// Quantisation used by save_image, exposed for byte-level comparisons.
std::vector<std::uint8_t> to_bytes(const Image& img);

}  // namespace dst
