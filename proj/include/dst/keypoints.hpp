#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dst/features.hpp"
#include "dst/image.hpp"

namespace dst {

/// A cross-image match: `src` in content pixels, `dst` in style pixels.
struct Correspondence {
    Vec2 src;
    Vec2 dst;
    double activation = 0.0;
};

/// Paired source points P and target points P' (both in the content
/// frame), with one activation score per pair.
struct KeypointSet {
    std::vector<Vec2> source;
    std::vector<Vec2> target;
    std::vector<double> activations;

    std::size_t size() const { return source.size(); }
    bool empty() const { return source.empty(); }
    /// Throws InvalidArgument unless all three lists have equal length.
    void validate() const;
};

/// x -> scale * rotation * x + translation.
struct SimilarityTransform {
    double scale = 1.0;
    Eigen::Matrix2d rotation = Eigen::Matrix2d::Identity();
    Vec2 translation;

    Vec2 apply(Vec2 p) const;
};

struct MatchOptions {
    /// Number of finest pyramid levels walked coarse to fine.
    int max_levels = 3;
    /// Search radius, in finer-level pixels, around each projected match.
    int search_radius = 8;
};

/// Hierarchical mutual-nearest-neighbour matching under cosine similarity.
/// The coarsest used level is searched exhaustively; every mutual pair
/// then restricts the next finer level to windows of `search_radius`
/// around its projection in both images. Activation of a pair is the
/// product of the two feature norms, each divided by its level's mean
/// norm. Returns the finest-level pairs in source-image pixels.
std::vector<Correspondence> match(const FeaturePyramid& content_feats, const FeaturePyramid& style_feats,
                                  const MatchOptions& options = {});

struct SelectOptions {
    std::size_t max_pairs = 80;
    double min_spacing = 10.0;
    double min_activation = 1.0;
};

/// Greedy selection by descending activation with a minimum spacing
/// between selected source points, capped at max_pairs, after which pairs
/// below min_activation are dropped. Ties go to the lower index.
std::vector<Correspondence> select(std::span<const Correspondence> cands, const SelectOptions& options = {});

/// Least-squares similarity transform mapping src_pts onto dst_pts, with
/// the determinant correction that keeps the rotation proper.
SimilarityTransform umeyama(std::span<const Vec2> src_pts, std::span<const Vec2> dst_pts);

/// Maps style-frame dst points into the content frame with the similarity
/// fit of dst onto src.
KeypointSet align_targets(std::span<const Correspondence> pairs);

/// True when segments ab and cd cross at a single interior point of both.
/// Touching endpoints, collinear overlap and zero-length segments do not
/// count.
bool segments_properly_intersect(Vec2 a, Vec2 b, Vec2 c, Vec2 d);

/// Repeatedly drops the pair involved in the most proper crossings of the
/// displacement segments (p_i -> p'_i); ties go to the lower activation,
/// then the lower index.
KeypointSet remove_crossings(const KeypointSet& kps);

class KeypointFormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// "content": targets already live in the content frame. "style": targets
/// are raw style-image points and still need align_targets.
enum class KeypointFrame { content, style };

struct KeypointFile {
    KeypointSet keypoints;
    KeypointFrame frame = KeypointFrame::content;
};

KeypointFile parse_keypoints(const std::string& text);
KeypointFile load_keypoints(const std::filesystem::path& path);
std::string serialize_keypoints(const KeypointSet& kps, KeypointFrame frame = KeypointFrame::content);
void save_keypoints(const std::filesystem::path& path, const KeypointSet& kps,
                    KeypointFrame frame = KeypointFrame::content);

/// Maps every point of a content-frame keypoint set between resolutions.
KeypointSet rescale_keypoints(const KeypointSet& kps, int from_h, int from_w, int to_h, int to_w);

}  // namespace dst
