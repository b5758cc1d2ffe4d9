#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "dst/image.hpp"

namespace dst {

/// One level of a feature pyramid. Values are held as an interleaved
/// Image (channel = feature channel); `scale` is level pixels per source
/// pixel, stored as a ratio so the DSTF header round-trips exactly.
struct FeatureMap {
    Image map;
    std::uint32_t scale_num = 1;
    std::uint32_t scale_den = 1;

    double scale() const { return static_cast<double>(scale_num) / scale_den; }
    int channels() const { return map.channels(); }
    int height() const { return map.height(); }
    int width() const { return map.width(); }
};

/// Feature levels ordered fine to coarse (levels[0] has the highest
/// resolution).
struct FeaturePyramid {
    std::vector<FeatureMap> levels;
    /// Dimensions of the image the features describe. Files do not carry
    /// them; the loader derives them from level 0 and its scale.
    int source_height = 0;
    int source_width = 0;

    /// Sum of channel counts, i.e. the hypercolumn dimension.
    int total_channels() const;
    bool empty() const { return levels.empty(); }
    bool same_shape(const FeaturePyramid& other) const;
    /// Zero-valued pyramid with the same shape.
    FeaturePyramid zeros_like() const;
};

/// Hypercolumns as rows: one row per sample coordinate, columns are the
/// level features concatenated fine to coarse.
using Hypercolumns = Eigen::MatrixXd;

inline constexpr int kBuiltinFeaturesPerChannel = 4;

/// Hand-crafted differentiable extractor. Level l is the image blurred and
/// decimated l times; for every colour channel it carries the value, the
/// central x- and y-differences and a smoothed 3x3 local standard
/// deviation, grouped as [values..., dx..., dy..., std...].
FeaturePyramid builtin_extract(const Image& img, int n_levels);

/// Vector-Jacobian product of builtin_extract w.r.t. the image.
Image builtin_extract_backward(const Image& img, const FeaturePyramid& grad);

/// Samples every level bilinearly at coord * level.scale().
Hypercolumns sample_hypercolumns(const FeaturePyramid& pyr, std::span<const Vec2> coords);

/// Accumulates dL/dHypercolumns into a pyramid-shaped gradient.
void sample_hypercolumns_backward(const FeaturePyramid& pyr, std::span<const Vec2> coords,
                                  const Hypercolumns& grad, FeaturePyramid& grad_pyr);

/// DSTF reader/writer: "DSTF", u32 version (1), u32 level count, then per
/// level u32 C, H, W, scale_num, scale_den and C*H*W float32 values in
/// channel-major order; all little-endian.
FeaturePyramid load_features(const std::filesystem::path& path);
FeaturePyramid parse_features(std::span<const std::uint8_t> bytes);
void save_features(const std::filesystem::path& path, const FeaturePyramid& pyr);
std::vector<std::uint8_t> serialize_features(const FeaturePyramid& pyr);

}  // namespace dst
