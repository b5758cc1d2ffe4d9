#include "dst/keypoints.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace dst {

void KeypointSet::validate() const {
    if (source.size() != target.size() || source.size() != activations.size()) {
        throw InvalidArgument("keypoint set: source/target/activation lengths differ (" +
                              std::to_string(source.size()) + "/" + std::to_string(target.size()) + "/" +
                              std::to_string(activations.size()) + ")");
    }
}

Vec2 SimilarityTransform::apply(Vec2 p) const {
    const Eigen::Vector2d v = scale * (rotation * Eigen::Vector2d(p.x, p.y));
    return {v.x() + translation.x, v.y() + translation.y};
}

// ---------------------------------------------------------------------------
// Matching

namespace {

constexpr double kTieTolerance = 1e-12;

struct LevelData {
    int height = 0;
    int width = 0;
    double scale = 1.0;
    Eigen::MatrixXd unit;          // one row per location, y * width + x
    std::vector<double> activation;  // norm / mean norm
};

LevelData prepare_level(const FeatureMap& level) {
    LevelData d;
    d.height = level.height();
    d.width = level.width();
    d.scale = level.scale();
    const int n = d.height * d.width;
    const int ch = level.channels();
    d.unit.resize(n, ch);
    d.activation.resize(n);
    const auto& v = level.map.values();
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        double sq = 0.0;
        for (int c = 0; c < ch; ++c) {
            sq += v[static_cast<std::size_t>(i) * ch + c] * v[static_cast<std::size_t>(i) * ch + c];
        }
        const double nrm = std::sqrt(sq);
        for (int c = 0; c < ch; ++c) {
            d.unit(i, c) = nrm > 0.0 ? v[static_cast<std::size_t>(i) * ch + c] / nrm : 0.0;
        }
        d.activation[i] = nrm;
        total += nrm;
    }
    const double mean = total / n;
    for (auto& a : d.activation) {
        a = mean > 0.0 ? a / mean : 0.0;
    }
    return d;
}

struct Candidate {
    int index = -1;
    double sim = -2.0;
    double dist2 = 0.0;
};

// Higher similarity wins; near-ties prefer the candidate closer to the
// query's projection, then the lower index.
bool better(double sim, double dist2, int index, const Candidate& best) {
    if (best.index < 0 || sim > best.sim + kTieTolerance) {
        return true;
    }
    if (sim < best.sim - kTieTolerance) {
        return false;
    }
    if (dist2 != best.dist2) {
        return dist2 < best.dist2;
    }
    return index < best.index;
}

double projected_dist2(int from, const LevelData& from_level, int to, const LevelData& to_level) {
    const double fx = (from % from_level.width) * static_cast<double>(to_level.width) / from_level.width;
    const double fy = (from / from_level.width) * static_cast<double>(to_level.height) / from_level.height;
    const double dx = fx - to % to_level.width;
    const double dy = fy - to / to_level.width;
    return dx * dx + dy * dy;
}

struct LevelMatch {
    int a;
    int b;
    double sim;
};

std::vector<LevelMatch> mutual_nearest(const LevelData& A, const std::vector<int>& ai, const LevelData& B,
                                       const std::vector<int>& bi) {
    if (ai.empty() || bi.empty()) {
        return {};
    }
    const int ch = static_cast<int>(A.unit.cols());
    Eigen::MatrixXd ub(static_cast<Eigen::Index>(bi.size()), ch);
    for (std::size_t j = 0; j < bi.size(); ++j) {
        ub.row(static_cast<Eigen::Index>(j)) = B.unit.row(bi[j]);
    }
    std::vector<Candidate> best_a(ai.size());
    std::vector<Candidate> best_b(bi.size());
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < ai.size(); start += kChunk) {
        const std::size_t rows = std::min(kChunk, ai.size() - start);
        Eigen::MatrixXd ua(static_cast<Eigen::Index>(rows), ch);
        for (std::size_t r = 0; r < rows; ++r) {
            ua.row(static_cast<Eigen::Index>(r)) = A.unit.row(ai[start + r]);
        }
        const Eigen::MatrixXd sim = ua * ub.transpose();
        for (std::size_t r = 0; r < rows; ++r) {
            const int a = ai[start + r];
            for (std::size_t j = 0; j < bi.size(); ++j) {
                const double s = sim(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
                const int b = bi[j];
                const double da = projected_dist2(a, A, b, B);
                if (better(s, da, static_cast<int>(j), best_a[start + r])) {
                    best_a[start + r] = {static_cast<int>(j), s, da};
                }
                const double db = projected_dist2(b, B, a, A);
                if (better(s, db, static_cast<int>(start + r), best_b[j])) {
                    best_b[j] = {static_cast<int>(start + r), s, db};
                }
            }
        }
    }
    std::vector<LevelMatch> out;
    for (std::size_t r = 0; r < ai.size(); ++r) {
        const int j = best_a[r].index;
        if (j >= 0 && best_b[j].index == static_cast<int>(r)) {
            out.push_back({ai[r], bi[j], best_a[r].sim});
        }
    }
    return out;
}

std::vector<int> window_indices(const LevelData& level, int cx, int cy, int radius) {
    std::vector<int> idx;
    for (int y = std::max(0, cy - radius); y <= std::min(level.height - 1, cy + radius); ++y) {
        for (int x = std::max(0, cx - radius); x <= std::min(level.width - 1, cx + radius); ++x) {
            idx.push_back(y * level.width + x);
        }
    }
    return idx;
}

Vec2 to_source(int index, const LevelData& level, int src_h, int src_w) {
    const double x = (index % level.width) / level.scale;
    const double y = (index / level.width) / level.scale;
    return {std::clamp(x, 0.0, std::max(0, src_w - 1) * 1.0), std::clamp(y, 0.0, std::max(0, src_h - 1) * 1.0)};
}

}  // namespace

std::vector<Correspondence> match(const FeaturePyramid& content_feats, const FeaturePyramid& style_feats,
                                  const MatchOptions& options) {
    if (content_feats.empty() || style_feats.empty()) {
        return {};
    }
    if (content_feats.levels.size() != style_feats.levels.size()) {
        throw InvalidArgument("match: feature pyramids have different level counts (" +
                              std::to_string(content_feats.levels.size()) + " vs " +
                              std::to_string(style_feats.levels.size()) + ")");
    }
    if (content_feats.total_channels() != style_feats.total_channels()) {
        throw InvalidArgument("match: feature pyramids have different channel counts");
    }
    const int used = std::min<int>(std::max(1, options.max_levels), static_cast<int>(content_feats.levels.size()));

    std::vector<LevelData> cl;
    std::vector<LevelData> sl;
    for (int l = 0; l < used; ++l) {
        cl.push_back(prepare_level(content_feats.levels[l]));
        sl.push_back(prepare_level(style_feats.levels[l]));
    }

    std::vector<int> all_c(cl.back().height * cl.back().width);
    std::iota(all_c.begin(), all_c.end(), 0);
    std::vector<int> all_s(sl.back().height * sl.back().width);
    std::iota(all_s.begin(), all_s.end(), 0);
    std::vector<LevelMatch> matches = mutual_nearest(cl.back(), all_c, sl.back(), all_s);

    for (int l = used - 2; l >= 0; --l) {
        const LevelData& coarse_c = cl[l + 1];
        const LevelData& coarse_s = sl[l + 1];
        const LevelData& fine_c = cl[l];
        const LevelData& fine_s = sl[l];
        const double rc = fine_c.scale / coarse_c.scale;
        const double rs = fine_s.scale / coarse_s.scale;
        // Best match per content location; std::map keeps output ordered.
        std::map<int, LevelMatch> refined;
        for (const auto& m : matches) {
            const int ax = static_cast<int>(std::lround((m.a % coarse_c.width) * rc));
            const int ay = static_cast<int>(std::lround((m.a / coarse_c.width) * rc));
            const int bx = static_cast<int>(std::lround((m.b % coarse_s.width) * rs));
            const int by = static_cast<int>(std::lround((m.b / coarse_s.width) * rs));
            const auto wa = window_indices(fine_c, ax, ay, options.search_radius);
            const auto wb = window_indices(fine_s, bx, by, options.search_radius);
            for (const auto& fm : mutual_nearest(fine_c, wa, fine_s, wb)) {
                auto it = refined.find(fm.a);
                if (it == refined.end()) {
                    refined.emplace(fm.a, fm);
                } else if (fm.sim > it->second.sim + kTieTolerance) {
                    it->second = fm;
                }
            }
        }
        matches.clear();
        for (const auto& [a, m] : refined) {
            matches.push_back(m);
        }
    }

    const LevelData& fc = cl.front();
    const LevelData& fs = sl.front();
    std::vector<Correspondence> out;
    out.reserve(matches.size());
    for (const auto& m : matches) {
        out.push_back({to_source(m.a, fc, content_feats.source_height, content_feats.source_width),
                       to_source(m.b, fs, style_feats.source_height, style_feats.source_width),
                       fc.activation[m.a] * fs.activation[m.b]});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Selection and alignment

std::vector<Correspondence> select(std::span<const Correspondence> cands, const SelectOptions& options) {
    if (!(options.min_spacing > 0.0)) {
        throw InvalidArgument("select: min_spacing must be positive");
    }
    std::vector<std::size_t> order(cands.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return cands[a].activation > cands[b].activation; });
    std::vector<Correspondence> chosen;
    const double min_d2 = options.min_spacing * options.min_spacing;
    for (std::size_t i : order) {
        if (chosen.size() >= options.max_pairs) {
            break;
        }
        const Vec2 p = cands[i].src;
        const bool spaced = std::all_of(chosen.begin(), chosen.end(), [&](const Correspondence& c) {
            const Vec2 d = c.src - p;
            return d.x * d.x + d.y * d.y >= min_d2;
        });
        if (spaced) {
            chosen.push_back(cands[i]);
        }
    }
    std::erase_if(chosen, [&](const Correspondence& c) { return c.activation < options.min_activation; });
    return chosen;
}

SimilarityTransform umeyama(std::span<const Vec2> src_pts, std::span<const Vec2> dst_pts) {
    if (src_pts.size() != dst_pts.size()) {
        throw InvalidArgument("umeyama: point lists differ in length");
    }
    if (src_pts.size() < 2) {
        throw InvalidArgument("umeyama: at least 2 point pairs required");
    }
    const double n = static_cast<double>(src_pts.size());
    Eigen::Vector2d mu_s = Eigen::Vector2d::Zero();
    Eigen::Vector2d mu_d = Eigen::Vector2d::Zero();
    for (std::size_t i = 0; i < src_pts.size(); ++i) {
        mu_s += Eigen::Vector2d(src_pts[i].x, src_pts[i].y);
        mu_d += Eigen::Vector2d(dst_pts[i].x, dst_pts[i].y);
    }
    mu_s /= n;
    mu_d /= n;
    double var_s = 0.0;
    double var_d = 0.0;
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    for (std::size_t i = 0; i < src_pts.size(); ++i) {
        const Eigen::Vector2d s = Eigen::Vector2d(src_pts[i].x, src_pts[i].y) - mu_s;
        const Eigen::Vector2d d = Eigen::Vector2d(dst_pts[i].x, dst_pts[i].y) - mu_d;
        var_s += s.squaredNorm();
        var_d += d.squaredNorm();
        cov += d * s.transpose();
    }
    var_s /= n;
    var_d /= n;
    cov /= n;
    const double extent = 1.0 + mu_s.squaredNorm() + mu_d.squaredNorm();
    if (var_s <= 1e-18 * extent || var_d <= 1e-18 * extent) {
        throw InvalidArgument("umeyama: all points coincident, scale undefined");
    }
    Eigen::JacobiSVD<Eigen::Matrix2d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix2d S = Eigen::Matrix2d::Identity();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) {
        S(1, 1) = -1.0;
    }
    SimilarityTransform t;
    t.rotation = svd.matrixU() * S * svd.matrixV().transpose();
    t.scale = (svd.singularValues().asDiagonal() * S).trace() / var_s;
    const Eigen::Vector2d trans = mu_d - t.scale * t.rotation * mu_s;
    t.translation = {trans.x(), trans.y()};
    return t;
}

KeypointSet align_targets(std::span<const Correspondence> pairs) {
    if (pairs.size() < 2) {
        throw InvalidArgument("align_targets: at least 2 pairs required, got " + std::to_string(pairs.size()));
    }
    std::vector<Vec2> src;
    std::vector<Vec2> dst;
    for (const auto& p : pairs) {
        src.push_back(p.src);
        dst.push_back(p.dst);
    }
    const SimilarityTransform t = umeyama(dst, src);
    KeypointSet kps;
    for (const auto& p : pairs) {
        kps.source.push_back(p.src);
        kps.target.push_back(t.apply(p.dst));
        kps.activations.push_back(p.activation);
    }
    return kps;
}

// ---------------------------------------------------------------------------
// Crossing removal

namespace {

int orientation(Vec2 a, Vec2 b, Vec2 c) {
    const double cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    return (cross > 0.0) - (cross < 0.0);
}

}  // namespace

bool segments_properly_intersect(Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
    const int o1 = orientation(a, b, c);
    const int o2 = orientation(a, b, d);
    const int o3 = orientation(c, d, a);
    const int o4 = orientation(c, d, b);
    return o1 * o2 < 0 && o3 * o4 < 0;
}

KeypointSet remove_crossings(const KeypointSet& kps) {
    kps.validate();
    KeypointSet cur = kps;
    while (true) {
        const std::size_t k = cur.size();
        std::vector<int> crossings(k, 0);
        bool any = false;
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = i + 1; j < k; ++j) {
                if (segments_properly_intersect(cur.source[i], cur.target[i], cur.source[j], cur.target[j])) {
                    ++crossings[i];
                    ++crossings[j];
                    any = true;
                }
            }
        }
        if (!any) {
            return cur;
        }
        std::size_t worst = 0;
        for (std::size_t i = 1; i < k; ++i) {
            if (crossings[i] > crossings[worst] ||
                (crossings[i] == crossings[worst] && cur.activations[i] < cur.activations[worst])) {
                worst = i;
            }
        }
        cur.source.erase(cur.source.begin() + static_cast<std::ptrdiff_t>(worst));
        cur.target.erase(cur.target.begin() + static_cast<std::ptrdiff_t>(worst));
        cur.activations.erase(cur.activations.begin() + static_cast<std::ptrdiff_t>(worst));
    }
}

// ---------------------------------------------------------------------------
// Keypoint files

namespace {

std::size_t line_of(const std::string& text, std::size_t byte) {
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + std::min(byte, text.size()), '\n'));
}

std::vector<Vec2> read_points(const nlohmann::json& doc, const char* field) {
    if (!doc.contains(field)) {
        throw KeypointFormatError(std::string("missing field \"") + field + "\"");
    }
    const auto& arr = doc.at(field);
    if (!arr.is_array()) {
        throw KeypointFormatError(std::string("field \"") + field + "\": expected an array of [x, y]");
    }
    std::vector<Vec2> pts;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto& p = arr[i];
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
            throw KeypointFormatError(std::string("field \"") + field + "\"[" + std::to_string(i) +
                                      "]: expected [x, y]");
        }
        pts.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    return pts;
}

}  // namespace

KeypointFile parse_keypoints(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw KeypointFormatError("JSON parse error at line " + std::to_string(line_of(text, e.byte)) + ": " +
                                  e.what());
    }
    if (!doc.is_object()) {
        throw KeypointFormatError("keypoint file must hold a JSON object");
    }
    KeypointFile file;
    file.keypoints.source = read_points(doc, "source");
    file.keypoints.target = read_points(doc, "target");
    if (doc.contains("activations")) {
        const auto& acts = doc.at("activations");
        if (!acts.is_array()) {
            throw KeypointFormatError("field \"activations\": expected an array of numbers");
        }
        for (std::size_t i = 0; i < acts.size(); ++i) {
            if (!acts[i].is_number() || acts[i].get<double>() < 0.0) {
                throw KeypointFormatError("field \"activations\"[" + std::to_string(i) +
                                          "]: expected a nonnegative number");
            }
            file.keypoints.activations.push_back(acts[i].get<double>());
        }
    } else {
        file.keypoints.activations.assign(file.keypoints.source.size(), 1.0);
    }
    const std::string frame = doc.value("frame", std::string("content"));
    if (frame == "content") {
        file.frame = KeypointFrame::content;
    } else if (frame == "style") {
        file.frame = KeypointFrame::style;
    } else {
        throw KeypointFormatError("field \"frame\": expected \"content\" or \"style\", got \"" + frame + "\"");
    }
    if (file.keypoints.source.size() != file.keypoints.target.size() ||
        file.keypoints.source.size() != file.keypoints.activations.size()) {
        throw KeypointFormatError("fields \"source\", \"target\" and \"activations\" differ in length");
    }
    return file;
}

KeypointFile load_keypoints(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw KeypointFormatError("cannot open keypoint file " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return parse_keypoints(buf.str());
    } catch (const KeypointFormatError& e) {
        throw KeypointFormatError(path.string() + ": " + e.what());
    }
}

std::string serialize_keypoints(const KeypointSet& kps, KeypointFrame frame) {
    kps.validate();
    nlohmann::json doc;
    doc["source"] = nlohmann::json::array();
    doc["target"] = nlohmann::json::array();
    for (std::size_t i = 0; i < kps.size(); ++i) {
        doc["source"].push_back({kps.source[i].x, kps.source[i].y});
        doc["target"].push_back({kps.target[i].x, kps.target[i].y});
    }
    doc["activations"] = kps.activations;
    doc["frame"] = frame == KeypointFrame::content ? "content" : "style";
    return doc.dump(2) + "\n";
}

void save_keypoints(const std::filesystem::path& path, const KeypointSet& kps, KeypointFrame frame) {
    std::ofstream out(path);
    if (!out) {
        throw KeypointFormatError("cannot write keypoint file " + path.string());
    }
    out << serialize_keypoints(kps, frame);
}

KeypointSet rescale_keypoints(const KeypointSet& kps, int from_h, int from_w, int to_h, int to_w) {
    KeypointSet out = kps;
    for (std::size_t i = 0; i < kps.size(); ++i) {
        out.source[i] = rescale_point(kps.source[i], from_h, from_w, to_h, to_w);
        out.target[i] = rescale_point(kps.target[i], from_h, from_w, to_h, to_w);
    }
    return out;
}

}  // namespace dst
