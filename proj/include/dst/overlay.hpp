#pragma once

#include <array>

#include "dst/image.hpp"
#include "dst/keypoints.hpp"

namespace dst {

struct OverlayStyle {
    std::array<double, 3> source_color{1.0, 0.2, 0.2};
    std::array<double, 3> target_color{0.2, 0.4, 1.0};
    std::array<double, 3> line_color{1.0, 1.0, 0.2};
    int marker_radius = 3;
};

/// Copy of img (RGB) with a line from every source point to its target,
/// hollow circles on sources and hollow squares on targets.
Image render_overlay(const Image& img, const KeypointSet& kps, const OverlayStyle& style = {});

}  // namespace dst
