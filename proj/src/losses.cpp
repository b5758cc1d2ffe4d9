#include "dst/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace dst {

std::string to_string(LossFamily family) { return family == LossFamily::gram ? "gram" : "selfsim_remd"; }

std::optional<LossFamily> parse_family(const std::string& name) {
    if (name == "gram") {
        return LossFamily::gram;
    }
    if (name == "selfsim_remd") {
        return LossFamily::selfsim_remd;
    }
    return std::nullopt;
}

LossWeights LossWeights::defaults(LossFamily family) {
    LossWeights w;
    w.family = family;
    if (family == LossFamily::gram) {
        w.content_scale = 1.0 / 50000.0;
        w.style_scale = 1.0 / 100000.0;
        w.deformation_grad_scale = 1e-6;
    }
    return w;
}

void LossWeights::validate() const {
    const std::pair<const char*, double> all[] = {
        {"alpha", alpha},          {"beta", beta},
        {"gamma", gamma},          {"style", style},
        {"remd", style_terms.remd}, {"moment", style_terms.moment},
        {"color", style_terms.color}, {"content_scale", content_scale},
        {"style_scale", style_scale}, {"deformation_grad_scale", deformation_grad_scale}};
    for (const auto& [name, value] : all) {
        if (!std::isfinite(value) || value < 0.0) {
            throw InvalidArgument(std::string("loss weight ") + name + " must be finite and >= 0, got " +
                                  std::to_string(value));
        }
    }
}

double compose_total(const LossReport& r, const LossWeights& w) {
    return w.alpha * r.content + r.style_unwarped + r.style_warped + w.beta * r.match + w.gamma * r.tv;
}

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Pixel-major view of a feature map: one row per location, one column per
// channel.
Eigen::Map<const RowMajor> as_matrix(const FeatureMap& level) {
    return {level.map.values().data(), static_cast<Eigen::Index>(level.height()) * level.width(), level.channels()};
}

Eigen::Map<RowMajor> as_matrix(FeatureMap& level) {
    return {level.map.values().data(), static_cast<Eigen::Index>(level.height()) * level.width(), level.channels()};
}

void axpy(FeaturePyramid& dst, double a, const FeaturePyramid& src) {
    for (std::size_t l = 0; l < dst.levels.size(); ++l) {
        auto& d = dst.levels[l].map.values();
        const auto& s = src.levels[l].map.values();
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] += a * s[i];
        }
    }
}

double sign(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace

// ---------------------------------------------------------------------------
// Gram family

double content_gram(const FeaturePyramid& content, const FeaturePyramid& output, FeaturePyramid* grad, int level) {
    if (!content.same_shape(output) || content.empty()) {
        throw InvalidArgument("content_gram: feature pyramids differ in shape");
    }
    const std::size_t l = level < 0 ? content.levels.size() - 1 : static_cast<std::size_t>(level);
    if (l >= content.levels.size()) {
        throw InvalidArgument("content_gram: level out of range");
    }
    const auto& c = content.levels[l].map.values();
    const auto& x = output.levels[l].map.values();
    const double n = static_cast<double>(c.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        const double d = x[i] - c[i];
        sum += d * d;
    }
    if (grad != nullptr) {
        auto& g = grad->levels[l].map.values();
        for (std::size_t i = 0; i < c.size(); ++i) {
            g[i] += 2.0 * (x[i] - c[i]) / n;
        }
    }
    return sum / n;
}

Eigen::MatrixXd gram_matrix(const FeatureMap& level) {
    const auto f = as_matrix(level);
    const double n = static_cast<double>(level.channels()) * level.height() * level.width();
    return (f.transpose() * f) / n;
}

double style_gram(const FeaturePyramid& style, const FeaturePyramid& output, FeaturePyramid* grad) {
    if (style.levels.size() != output.levels.size() || style.empty()) {
        throw InvalidArgument("style_gram: pyramids differ in level count");
    }
    const double u = 1.0 / static_cast<double>(style.levels.size());
    double loss = 0.0;
    for (std::size_t l = 0; l < style.levels.size(); ++l) {
        const auto& sl = style.levels[l];
        const auto& xl = output.levels[l];
        if (sl.channels() != xl.channels()) {
            throw InvalidArgument("style_gram: channel mismatch at level " + std::to_string(l));
        }
        const Eigen::MatrixXd diff = gram_matrix(xl) - gram_matrix(sl);
        loss += u * diff.squaredNorm();
        if (grad != nullptr) {
            const double n = static_cast<double>(xl.channels()) * xl.height() * xl.width();
            auto g = as_matrix(grad->levels[l]);
            g.noalias() += (4.0 * u / n) * (as_matrix(xl) * diff);
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Self-similarity / relaxed EMD family

namespace {

struct Normalized {
    Eigen::MatrixXd unit;
    Eigen::VectorXd norms;  // guarded
};

Normalized normalize_rows(const Eigen::MatrixXd& a) {
    Normalized out;
    out.norms = a.rowwise().norm().cwiseMax(kCosineEps);
    out.unit = a.array().colwise() / out.norms.array();
    return out;
}

// dL/da from dL/dunit through unit = a / max(|a|, eps).
Eigen::MatrixXd normalize_rows_backward(const Eigen::MatrixXd& a, const Normalized& n, const Eigen::MatrixXd& dunit) {
    Eigen::MatrixXd da(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const double raw = a.row(i).norm();
        if (raw > kCosineEps) {
            const double proj = n.unit.row(i).dot(dunit.row(i));
            da.row(i) = (dunit.row(i) - proj * n.unit.row(i)) / n.norms(i);
        } else {
            da.row(i) = dunit.row(i) / kCosineEps;
        }
    }
    return da;
}

struct SelfSim {
    Normalized norm;
    Eigen::MatrixXd dist;   // 1 - U U^T
    Eigen::VectorXd sums;   // guarded row sums
    Eigen::MatrixXd normed;
};

SelfSim self_similarity(const Eigen::MatrixXd& cols) {
    SelfSim s;
    s.norm = normalize_rows(cols);
    s.dist = Eigen::MatrixXd::Ones(cols.rows(), cols.rows()) - s.norm.unit * s.norm.unit.transpose();
    s.sums = s.dist.rowwise().sum().cwiseMax(kCosineEps);
    s.normed = s.dist.array().colwise() / s.sums.array();
    return s;
}

}  // namespace

namespace {

// 1 - u.v over unit rows. Near-duplicates are recomputed as |u - v|^2 / 2,
// equal for unit vectors, so identical rows cost exactly 0.
Eigen::MatrixXd unit_cosine_cost(const Eigen::MatrixXd& ua, const Eigen::MatrixXd& ub) {
    Eigen::MatrixXd c = Eigen::MatrixXd::Ones(ua.rows(), ub.rows()) - ua * ub.transpose();
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
        for (Eigen::Index i = 0; i < c.rows(); ++i) {
            if (c(i, j) < 1e-12) {
                c(i, j) = 0.5 * (ua.row(i) - ub.row(j)).squaredNorm();
            }
        }
    }
    return c;
}

}  // namespace

Eigen::MatrixXd cosine_cost(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return unit_cosine_cost(normalize_rows(a).unit, normalize_rows(b).unit);
}

double content_selfsim(const Hypercolumns& content, const Hypercolumns& output, Hypercolumns* grad) {
    if (content.rows() != output.rows() || content.cols() != output.cols()) {
        throw InvalidArgument("content_selfsim: sample sets differ in shape");
    }
    const Eigen::Index n = content.rows();
    if (n < 2) {
        throw InvalidArgument("content_selfsim: at least 2 samples required");
    }
    const SelfSim sc = self_similarity(content);
    const SelfSim sx = self_similarity(output);
    const Eigen::MatrixXd diff = sx.normed - sc.normed;
    const double inv_n2 = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
    const double loss = diff.cwiseAbs().sum() * inv_n2;
    if (grad != nullptr) {
        const Eigen::MatrixXd gnormed = diff.unaryExpr([&](double v) { return sign(v) * inv_n2; });
        // normed = dist / sums (row-wise).
        const Eigen::VectorXd raw_sums = sx.dist.rowwise().sum();
        Eigen::MatrixXd gdist = gnormed.array().colwise() / sx.sums.array();
        const Eigen::VectorXd corr = gnormed.cwiseProduct(sx.dist).rowwise().sum().cwiseQuotient(
            sx.sums.cwiseProduct(sx.sums));
        gdist.colwise() -= (raw_sums.array() > kCosineEps).select(corr, 0.0).matrix();
        // dist = 1 - U U^T.
        const Eigen::MatrixXd gunit = -(gdist + gdist.transpose()) * sx.norm.unit;
        *grad += normalize_rows_backward(output, sx.norm, gunit);
    }
    return loss;
}

namespace {

// Active (row, col, weight) entries of the relaxed EMD subgradient.
struct RemdResult {
    double value = 0.0;
    std::vector<std::pair<Eigen::Index, Eigen::Index>> active;
    double weight = 0.0;
};

RemdResult remd_core(const Eigen::MatrixXd& cost) {
    const Eigen::Index rows = cost.rows();
    const Eigen::Index cols = cost.cols();
    if (rows == 0 || cols == 0) {
        throw InvalidArgument("relaxed_emd: empty sample set");
    }
    std::vector<Eigen::Index> row_arg(rows, 0);
    std::vector<Eigen::Index> col_arg(cols, 0);
    Eigen::VectorXd row_min = cost.col(0);
    Eigen::VectorXd col_min(cols);
    // Column-major walk; strict comparisons keep the first minimum.
    for (Eigen::Index j = 0; j < cols; ++j) {
        const double* c = cost.col(j).data();
        Eigen::Index arg = 0;
        double best = c[0];
        for (Eigen::Index i = 0; i < rows; ++i) {
            if (c[i] < best) {
                best = c[i];
                arg = i;
            }
            if (c[i] < row_min(i)) {
                row_min(i) = c[i];
                row_arg[i] = j;
            }
        }
        col_min(j) = best;
        col_arg[j] = arg;
    }
    const double row_mean = row_min.sum() / static_cast<double>(rows);
    const double col_mean = col_min.sum() / static_cast<double>(cols);
    RemdResult r;
    r.value = std::max(row_mean, col_mean);
    if (row_mean >= col_mean) {
        r.weight = 1.0 / static_cast<double>(rows);
        for (Eigen::Index i = 0; i < rows; ++i) {
            r.active.emplace_back(i, row_arg[i]);
        }
    } else {
        r.weight = 1.0 / static_cast<double>(cols);
        for (Eigen::Index j = 0; j < cols; ++j) {
            r.active.emplace_back(col_arg[j], j);
        }
    }
    return r;
}

}  // namespace

double relaxed_emd(const Eigen::MatrixXd& cost, Eigen::MatrixXd* grad) {
    const RemdResult r = remd_core(cost);
    if (grad != nullptr) {
        for (const auto& [i, j] : r.active) {
            (*grad)(i, j) += r.weight;
        }
    }
    return r.value;
}

namespace {

Eigen::MatrixXd euclidean_cost(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd c(a.rows(), b.rows());
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            double sq = 0.0;
            for (Eigen::Index d = 0; d < a.cols(); ++d) {
                const double t = a(i, d) - b(j, d);
                sq += t * t;
            }
            c(i, j) = std::sqrt(sq);
        }
    }
    return c;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& mean) {
    const Eigen::MatrixXd centered = x.rowwise() - mean;
    return centered.transpose() * centered / static_cast<double>(x.rows());
}

}  // namespace

StyleTerms style_remd_family(const Hypercolumns& style_cols, const Hypercolumns& output_cols,
                             const Eigen::MatrixXd& style_colors, const Eigen::MatrixXd& output_colors,
                             const StyleTermWeights& weights, Hypercolumns* grad_cols,
                             Eigen::MatrixXd* grad_colors) {
    if (style_cols.rows() == 0 || output_cols.rows() == 0 || style_colors.rows() == 0 || output_colors.rows() == 0) {
        throw InvalidArgument("style_remd_family: empty sample set");
    }
    if (style_cols.cols() != output_cols.cols() || style_colors.cols() != output_colors.cols()) {
        throw InvalidArgument("style_remd_family: feature dimensions differ");
    }
    StyleTerms t;
    const double d = static_cast<double>(output_cols.cols());

    // Relaxed EMD over cosine cost; rows index output samples.
    const Normalized nx = normalize_rows(output_cols);
    const Normalized ns = normalize_rows(style_cols);
    const Eigen::MatrixXd cost = unit_cosine_cost(nx.unit, ns.unit);
    const RemdResult feat_emd = remd_core(cost);
    t.remd = feat_emd.value;

    // Moment matching.
    const Eigen::RowVectorXd mu_x = output_cols.colwise().mean();
    const Eigen::RowVectorXd mu_s = style_cols.colwise().mean();
    const Eigen::MatrixXd cov_x = covariance(output_cols, mu_x);
    const Eigen::MatrixXd cov_s = covariance(style_cols, mu_s);
    t.moment = (mu_x - mu_s).cwiseAbs().sum() / d + (cov_x - cov_s).cwiseAbs().sum() / (d * d);

    // Palette: relaxed EMD on colours, Euclidean cost.
    const Eigen::MatrixXd ccost = euclidean_cost(output_colors, style_colors);
    const RemdResult color_emd = remd_core(ccost);
    t.color = color_emd.value;

    t.total = weights.remd * t.remd + weights.moment * t.moment + weights.color * t.color;

    if (grad_cols != nullptr) {
        const double n = static_cast<double>(output_cols.rows());
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(output_cols.rows(), output_cols.cols());
        if (weights.remd != 0.0) {
            Eigen::MatrixXd gunit = Eigen::MatrixXd::Zero(output_cols.rows(), output_cols.cols());
            for (const auto& [i, j] : feat_emd.active) {
                gunit.row(i) -= weights.remd * feat_emd.weight * ns.unit.row(j);
            }
            g += normalize_rows_backward(output_cols, nx, gunit);
        }
        if (weights.moment != 0.0) {
            const Eigen::RowVectorXd gmu = (mu_x - mu_s).unaryExpr([](double v) { return sign(v); }) / d;
            const Eigen::MatrixXd gcov = (cov_x - cov_s).unaryExpr([](double v) { return sign(v); }) / (d * d);
            const Eigen::MatrixXd centered = output_cols.rowwise() - mu_x;
            g += weights.moment * (centered * (gcov + gcov.transpose()) / n);
            g.rowwise() += weights.moment * gmu / n;
        }
        *grad_cols += g;
    }
    if (grad_colors != nullptr && weights.color != 0.0) {
        for (const auto& [i, j] : color_emd.active) {
            if (ccost(i, j) == 0.0) {
                continue;
            }
            grad_colors->row(i) +=
                weights.color * color_emd.weight * (output_colors.row(i) - style_colors.row(j)) / ccost(i, j);
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Deformation terms

double match_loss(const KeypointSet& kps, std::span<const Vec2> theta, std::vector<Vec2>* grad) {
    kps.validate();
    const std::size_t k = kps.size();
    if (k == 0) {
        throw InvalidArgument("match_loss: empty keypoint set");
    }
    if (theta.size() != k) {
        throw InvalidArgument("match_loss: theta length differs from keypoint count");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const Vec2 r = kps.source[i] + theta[i] - kps.target[i];
        const double len = norm(r);
        sum += len;
        if (grad != nullptr) {
            (*grad)[i] = (*grad)[i] + (1.0 / (static_cast<double>(k) * (len + kMatchEps))) * r;
        }
    }
    return sum / static_cast<double>(k);
}

double tv_reg(const WarpField& field, WarpField* grad) {
    const int w = field.width;
    const int h = field.height;
    const double inv = 1.0 / (static_cast<double>(w) * h);
    double sum = 0.0;
    auto pair = [&](int y0, int x0, int y1, int x1) {
        // Displacement differences: (f1 - q1) - (f0 - q0).
        const Vec2 f0 = field.at(y0, x0);
        const Vec2 f1 = field.at(y1, x1);
        const double dx = (f1.x - x1) - (f0.x - x0);
        const double dy = (f1.y - y1) - (f0.y - y0);
        sum += std::abs(dx) + std::abs(dy);
        if (grad != nullptr) {
            const Vec2 g{inv * sign(dx), inv * sign(dy)};
            grad->at(y1, x1) = grad->at(y1, x1) + g;
            grad->at(y0, x0) = grad->at(y0, x0) - g;
        }
    };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (x + 1 < w) {
                pair(y, x, y, x + 1);
            }
            if (y + 1 < h) {
                pair(y, x, y + 1, x);
            }
        }
    }
    return sum * inv;
}

// ---------------------------------------------------------------------------
// Composition

double dual_style(const StyleLossFn& style_loss, const Image& output, const Image& output_warped, Image* grad_output,
                  Image* grad_warped, double* unwarped, double* warped) {
    if (output.height() != output_warped.height() || output.width() != output_warped.width()) {
        throw InvalidArgument("dual_style: output and warped output differ in size");
    }
    const double a = style_loss(output, grad_output);
    const double b = style_loss(output_warped, grad_warped);
    if (unwarped != nullptr) {
        *unwarped = a;
    }
    if (warped != nullptr) {
        *warped = b;
    }
    return a + b;
}

std::vector<Vec2> sample_coords(int height, int width, int n, std::uint64_t seed) {
    const std::size_t total = static_cast<std::size_t>(height) * width;
    const std::size_t count = std::min(total, static_cast<std::size_t>(std::max(n, 0)));
    std::vector<std::uint32_t> idx(total);
    std::iota(idx.begin(), idx.end(), 0u);
    std::mt19937_64 rng(seed);
    // Partial Fisher-Yates; modulo keeps the draw platform-independent.
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (total - i));
        std::swap(idx[i], idx[j]);
    }
    std::vector<Vec2> coords(count);
    for (std::size_t i = 0; i < count; ++i) {
        coords[i] = {static_cast<double>(idx[i] % width), static_cast<double>(idx[i] / width)};
    }
    return coords;
}

Objective::Objective(Image content, Image style, KeypointSet kps, LossWeights weights, ObjectiveOptions options)
    : content_(std::move(content)),
      style_(std::move(style)),
      kps_(std::move(kps)),
      weights_(weights),
      options_(options) {
    weights_.validate();
    kps_.validate();
    if (kps_.empty()) {
        throw InvalidArgument("objective: at least one keypoint pair required");
    }
    const int ref_h = options_.reference_height > 0 ? options_.reference_height : content_.height();
    const int ref_w = options_.reference_width > 0 ? options_.reference_width : content_.width();
    kps_local_ = rescale_keypoints(kps_, ref_h, ref_w, content_.height(), content_.width());
    ratio_ = {static_cast<double>(content_.width()) / ref_w, static_cast<double>(content_.height()) / ref_h};
    content_feats_ = builtin_extract(content_, options_.feature_levels);
    style_feats_ = builtin_extract(style_, options_.feature_levels);
}

namespace {

Eigen::MatrixXd sample_colors(const Image& img, std::span<const Vec2> coords) {
    const auto values = bilinear_sample(img, coords);
    Eigen::MatrixXd out(static_cast<Eigen::Index>(coords.size()), img.channels());
    for (std::size_t i = 0; i < coords.size(); ++i) {
        for (int c = 0; c < img.channels(); ++c) {
            out(static_cast<Eigen::Index>(i), c) = values[i * img.channels() + c];
        }
    }
    return out;
}

void add_scaled(Image& dst, double a, const Image& src) {
    auto& d = dst.values();
    const auto& s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += a * s[i];
    }
}

struct StyleSamples {
    Hypercolumns cols;
    Eigen::MatrixXd colors;
};

}  // namespace

Objective::Result Objective::evaluate(const Image& output, std::span<const Vec2> theta, std::uint64_t sample_seed,
                                      bool want_gradients) const {
    if (!output.same_shape(content_)) {
        throw InvalidArgument("objective: output and content image differ in shape");
    }
    if (theta.size() != kps_.size()) {
        throw InvalidArgument("objective: theta length differs from keypoint count");
    }
    const LossWeights& w = weights_;
    const bool selfsim = w.family == LossFamily::selfsim_remd;
    const int height = output.height();
    const int width = output.width();

    Result res;
    res.grad_output = Image(height, width, output.channels());
    res.grad_theta.assign(theta.size(), Vec2{});

    const auto coords = sample_coords(height, width, options_.n_samples, sample_seed);
    const auto style_coords =
        sample_coords(style_.height(), style_.width(), options_.n_samples, sample_seed ^ 0x9e3779b97f4a7c15ULL);
    StyleSamples style_samples;
    if (selfsim && w.style * w.style_scale != 0.0) {
        style_samples.cols = sample_hypercolumns(style_feats_, style_coords);
        style_samples.colors = sample_colors(style_, style_coords);
    }

    const double style_factor = w.style * w.style_scale;
    const double content_factor = w.content_scale;

    // Style term of one image: value already scaled; gradients accumulated
    // into grad_img (direct colour path) and grad_feats (feature path).
    auto style_of = [&](const Image& img, const FeaturePyramid& feats, Image* grad_img, FeaturePyramid* grad_feats) {
        if (style_factor == 0.0) {
            return 0.0;
        }
        const bool grads = grad_feats != nullptr;
        if (!selfsim) {
            FeaturePyramid g;
            if (grads) {
                g = feats.zeros_like();
            }
            const double raw = style_gram(style_feats_, feats, grads ? &g : nullptr);
            if (grads) {
                axpy(*grad_feats, style_factor, g);
            }
            return style_factor * raw;
        }
        const Hypercolumns cols = sample_hypercolumns(feats, coords);
        const Eigen::MatrixXd colors = sample_colors(img, coords);
        Hypercolumns gcols;
        Eigen::MatrixXd gcolors;
        if (grads) {
            gcols = Hypercolumns::Zero(cols.rows(), cols.cols());
            gcolors = Eigen::MatrixXd::Zero(colors.rows(), colors.cols());
        }
        const StyleTerms t = style_remd_family(style_samples.cols, cols, style_samples.colors, colors, w.style_terms,
                                               grads ? &gcols : nullptr, grads ? &gcolors : nullptr);
        if (grads) {
            gcols *= style_factor;
            sample_hypercolumns_backward(feats, coords, gcols, *grad_feats);
            gcolors *= style_factor;
            std::vector<double> flat(static_cast<std::size_t>(gcolors.size()));
            for (Eigen::Index i = 0; i < gcolors.rows(); ++i) {
                for (Eigen::Index c = 0; c < gcolors.cols(); ++c) {
                    flat[static_cast<std::size_t>(i * gcolors.cols() + c)] = gcolors(i, c);
                }
            }
            bilinear_sample_backward(img, coords, flat, grad_img, nullptr);
        }
        return style_factor * t.total;
    };

    // --- Unwarped output: content + style.
    const FeaturePyramid feats_x = builtin_extract(output, options_.feature_levels);
    FeaturePyramid grad_feats_x;
    if (want_gradients) {
        grad_feats_x = feats_x.zeros_like();
    }
    const bool content_grads = want_gradients && w.alpha != 0.0;
    if (w.alpha == 0.0) {
        // switched off: not evaluated, reported as 0
    } else if (selfsim) {
        const Hypercolumns cc = sample_hypercolumns(content_feats_, coords);
        const Hypercolumns cx = sample_hypercolumns(feats_x, coords);
        Hypercolumns g;
        if (content_grads) {
            g = Hypercolumns::Zero(cx.rows(), cx.cols());
        }
        res.report.content = content_factor * content_selfsim(cc, cx, content_grads ? &g : nullptr);
        if (content_grads) {
            g *= w.alpha * content_factor;
            sample_hypercolumns_backward(feats_x, coords, g, grad_feats_x);
        }
    } else {
        FeaturePyramid g;
        if (content_grads) {
            g = feats_x.zeros_like();
        }
        res.report.content = content_factor * content_gram(content_feats_, feats_x, content_grads ? &g : nullptr);
        if (content_grads) {
            axpy(grad_feats_x, w.alpha * content_factor, g);
        }
    }
    res.report.style_unwarped =
        style_of(output, feats_x, want_gradients ? &res.grad_output : nullptr, want_gradients ? &grad_feats_x : nullptr);
    if (want_gradients) {
        add_scaled(res.grad_output, 1.0, builtin_extract_backward(output, grad_feats_x));
    }

    // --- Warped output.
    std::vector<Vec2> theta_local(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        theta_local[i] = {ratio_.x * theta[i].x, ratio_.y * theta[i].y};
    }
    const TpsSolution sol = tps_solve(kps_local_.source, theta_local, options_.tps);
    res.field = synth_field(sol, width, height);
    res.warped = warp(output, res.field);
    const FeaturePyramid feats_w = builtin_extract(res.warped, options_.feature_levels);
    Image grad_warped;
    FeaturePyramid grad_feats_w;
    if (want_gradients) {
        grad_warped = Image(height, width, output.channels());
        grad_feats_w = feats_w.zeros_like();
    }
    res.report.style_warped = style_of(res.warped, feats_w, want_gradients ? &grad_warped : nullptr,
                                       want_gradients ? &grad_feats_w : nullptr);

    WarpField grad_field;
    if (want_gradients) {
        grad_field = WarpField(width, height);
    }
    res.report.tv = tv_reg(res.field, want_gradients && w.gamma != 0.0 ? &grad_field : nullptr);
    if (want_gradients && w.gamma != 0.0) {
        for (auto& g : grad_field.flow) {
            g = w.gamma * g;
        }
    }
    std::vector<Vec2> grad_match(theta.size());
    res.report.match = match_loss(kps_, theta, want_gradients ? &grad_match : nullptr);
    res.report.total = compose_total(res.report, w);

    if (want_gradients) {
        if (style_factor != 0.0) {
            add_scaled(grad_warped, 1.0, builtin_extract_backward(res.warped, grad_feats_w));
            warp_backward(output, res.field, grad_warped, &res.grad_output, &grad_field);
        }
        const bool field_grad = std::any_of(grad_field.flow.begin(), grad_field.flow.end(),
                                            [](Vec2 g) { return g.x != 0.0 || g.y != 0.0; });
        if (field_grad) {
            res.grad_theta = tps_solve_backward(sol, synth_field_backward(sol, grad_field));
            for (auto& g : res.grad_theta) {
                g = {ratio_.x * g.x, ratio_.y * g.y};
            }
        }
        for (std::size_t i = 0; i < theta.size(); ++i) {
            res.grad_theta[i] = res.grad_theta[i] + w.beta * grad_match[i];
        }
    }
    return res;
}

}  // namespace dst
