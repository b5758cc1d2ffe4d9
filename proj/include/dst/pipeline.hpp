#pragma once

#include <stdexcept>
#include <vector>

#include "dst/features.hpp"
#include "dst/image.hpp"
#include "dst/keypoints.hpp"

namespace dst {

struct AutoMatchOptions {
    /// Long side both images are resized to before built-in extraction.
    int long_side = 128;
    int feature_levels = 4;
    MatchOptions match;
    SelectOptions select;
};

/// Every stage of automatic keypoint extraction. All points are in
/// full-resolution pixels: candidate and selected pairs pair content
/// points with style points; aligned and cleaned are content-frame sets.
struct AutoMatchResult {
    std::vector<Correspondence> candidates;
    std::vector<Correspondence> selected;
    KeypointSet aligned;
    KeypointSet cleaned;
};

/// match -> select -> align_targets -> remove_crossings. Imported feature
/// pyramids replace the built-in extractor when both are given. Throws
/// InsufficientKeypoints when fewer than two pairs reach alignment or
/// survive cleaning.
AutoMatchResult auto_match(const Image& content, const Image& style, const FeaturePyramid* content_feats = nullptr,
                           const FeaturePyramid* style_feats = nullptr, const AutoMatchOptions& options = {});

class InsufficientKeypoints : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Content-frame keypoints from a file: "style"-frame files go through
/// align_targets, "content"-frame files are used as they are. Targets
/// of a style-frame file are style pixels, so no rescaling is needed.
KeypointSet prepare_keypoints(const KeypointFile& file);

}  // namespace dst
