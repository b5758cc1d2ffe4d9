#include "dst/pipeline.hpp"

#include <algorithm>
#include <string>

namespace dst {

namespace {

Vec2 to_frame(Vec2 p, const FeaturePyramid& feats, const Image& img) {
    return rescale_point(p, feats.source_height, feats.source_width, img.height(), img.width());
}

}  // namespace

AutoMatchResult auto_match(const Image& content, const Image& style, const FeaturePyramid* content_feats,
                           const FeaturePyramid* style_feats, const AutoMatchOptions& options) {
    FeaturePyramid cf;
    FeaturePyramid sf;
    if (content_feats != nullptr && style_feats != nullptr) {
        cf = *content_feats;
        sf = *style_feats;
    } else if (content_feats != nullptr || style_feats != nullptr) {
        throw InvalidArgument("auto_match: imported features must be given for both images");
    } else {
        cf = builtin_extract(resize(content, options.long_side), options.feature_levels);
        sf = builtin_extract(resize(style, options.long_side), options.feature_levels);
    }

    AutoMatchResult r;
    r.candidates = match(cf, sf, options.match);
    for (auto& c : r.candidates) {
        c.src = to_frame(c.src, cf, content);
        c.dst = to_frame(c.dst, sf, style);
    }
    SelectOptions sel = options.select;
    // Spacing is specified in working-resolution pixels.
    const double ratio =
        static_cast<double>(std::max(content.height(), content.width())) / std::max(cf.source_height, cf.source_width);
    sel.min_spacing *= ratio;
    r.selected = select(r.candidates, sel);
    if (r.selected.size() < 2) {
        throw InsufficientKeypoints("only " + std::to_string(r.selected.size()) +
                                    " keypoint pair(s) survived selection; at least 2 are needed. Try images with "
                                    "more shared structure, or supply --keypoints");
    }
    r.aligned = align_targets(r.selected);
    r.cleaned = remove_crossings(r.aligned);
    if (r.cleaned.size() < 2) {
        throw InsufficientKeypoints("only " + std::to_string(r.cleaned.size()) +
                                    " keypoint pair(s) survived crossing removal; at least 2 are needed");
    }
    return r;
}

KeypointSet prepare_keypoints(const KeypointFile& file) {
    file.keypoints.validate();
    if (file.frame == KeypointFrame::content) {
        return file.keypoints;
    }
    std::vector<Correspondence> pairs(file.keypoints.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        pairs[i] = {file.keypoints.source[i], file.keypoints.target[i], file.keypoints.activations[i]};
    }
    return align_targets(pairs);
}

}  // namespace dst
