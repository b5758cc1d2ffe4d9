#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dst/features.hpp"
#include "dst/image.hpp"
#include "dst/keypoints.hpp"
#include "dst/tps.hpp"

namespace dst {

enum class LossFamily { gram, selfsim_remd };

std::string to_string(LossFamily family);
std::optional<LossFamily> parse_family(const std::string& name);

/// Weights of the relaxed-EMD style loss subterms.
struct StyleTermWeights {
    double remd = 1.0;
    double moment = 1.0;
    double color = 1.0;
};

struct LossWeights {
    LossFamily family = LossFamily::selfsim_remd;
    double alpha = 1.0;  ///< content
    double beta = 0.0;   ///< keypoint deformation
    double gamma = 0.0;  ///< warp-field total variation
    /// Multiplier on each of the two style terms.
    double style = 1.0;
    StyleTermWeights style_terms;
    /// Fixed rescaling of the raw content and style values; the gram family
    /// defaults to 1/50000 and 1/100000.
    double content_scale = 1.0;
    double style_scale = 1.0;
    /// Factor applied to theta gradients by the optimiser (gram: 1e-6).
    double deformation_grad_scale = 1.0;

    static LossWeights defaults(LossFamily family);
    /// Throws InvalidArgument on a negative or non-finite weight.
    void validate() const;
};

/// Per-term values as they enter the objective (content and style terms
/// already carry their scale factors and style weight).
struct LossReport {
    double content = 0.0;
    double style_unwarped = 0.0;
    double style_warped = 0.0;
    double match = 0.0;
    double tv = 0.0;
    double total = 0.0;
};

/// alpha * content + style_unwarped + style_warped + beta * match + gamma * tv.
double compose_total(const LossReport& report, const LossWeights& weights);

// --- Gram family -----------------------------------------------------------

/// Mean squared feature difference on one level (-1 = deepest). grad, if
/// given, receives dL/dX accumulated into the matching level.
double content_gram(const FeaturePyramid& content, const FeaturePyramid& output, FeaturePyramid* grad = nullptr,
                    int level = -1);

/// Gram matrix G = F F^T / (C H W) of one feature map.
Eigen::MatrixXd gram_matrix(const FeatureMap& level);

/// (1/L) * sum over levels of ||G_X - G_S||_F^2. Spatial sizes may differ.
double style_gram(const FeaturePyramid& style, const FeaturePyramid& output, FeaturePyramid* grad = nullptr);

// --- Self-similarity / relaxed EMD family ---------------------------------

inline constexpr double kCosineEps = 1e-8;

/// Pairwise cosine distances 1 - cos(a_i, b_j), norms guarded by kCosineEps.
Eigen::MatrixXd cosine_cost(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// (1/n^2) sum |Dx~ - Dc~| where D~ are the row-normalised pairwise cosine
/// distance matrices of the two co-located sample sets.
double content_selfsim(const Hypercolumns& content, const Hypercolumns& output, Hypercolumns* grad = nullptr);

/// max(mean_i min_j C_ij, mean_j min_i C_ij); grad receives dL/dC.
double relaxed_emd(const Eigen::MatrixXd& cost, Eigen::MatrixXd* grad = nullptr);

struct StyleTerms {
    double remd = 0.0;
    double moment = 0.0;
    double color = 0.0;
    double total = 0.0;
};

/// Relaxed EMD on cosine cost + moment matching (|dmu|_1/d + |dSigma|_1/d^2)
/// + relaxed EMD on RGB samples with Euclidean cost, weighted.
StyleTerms style_remd_family(const Hypercolumns& style_cols, const Hypercolumns& output_cols,
                             const Eigen::MatrixXd& style_colors, const Eigen::MatrixXd& output_colors,
                             const StyleTermWeights& weights, Hypercolumns* grad_cols = nullptr,
                             Eigen::MatrixXd* grad_colors = nullptr);

// --- Deformation terms -----------------------------------------------------

inline constexpr double kMatchEps = 1e-8;

/// (1/k) sum_i |p'_i - (p_i + theta_i)|_2.
double match_loss(const KeypointSet& kps, std::span<const Vec2> theta, std::vector<Vec2>* grad = nullptr);

/// Anisotropic TV of the displacement field f(q) - q over in-grid
/// neighbour pairs, divided by W * H.
double tv_reg(const WarpField& field, WarpField* grad = nullptr);

// --- Composition -----------------------------------------------------------

/// Style loss of one image with its image-space gradient.
using StyleLossFn = std::function<double(const Image& img, Image* grad)>;

/// style(X) + style(X_warped); gradients are accumulated separately so the
/// caller can route the warped half through the warp.
double dual_style(const StyleLossFn& style_loss, const Image& output, const Image& output_warped,
                  Image* grad_output = nullptr, Image* grad_warped = nullptr, double* unwarped = nullptr,
                  double* warped = nullptr);

struct ObjectiveOptions {
    int feature_levels = 3;
    /// Sample count for the self-similarity / EMD family.
    int n_samples = 1024;
    TpsOptions tps;
    /// Frame of the keypoints and theta handed to the objective; 0 means
    /// the content image's own frame. The warp field is always built at
    /// the content resolution from rescaled points and displacements.
    int reference_height = 0;
    int reference_width = 0;
};

/// Full objective at one working resolution. Content and style features are
/// extracted once at construction; evaluate() computes the report and the
/// gradients with respect to X (image space) and theta. A content or style
/// term whose weight is 0 is skipped and reported as 0.
class Objective {
  public:
    Objective(Image content, Image style, KeypointSet kps, LossWeights weights, ObjectiveOptions options = {});

    struct Result {
        LossReport report;
        Image grad_output;
        std::vector<Vec2> grad_theta;
        WarpField field;
        Image warped;
    };

    /// theta is in the reference frame, as is grad_theta. sample_seed fixes
    /// the random sample coordinates of this evaluation.
    Result evaluate(const Image& output, std::span<const Vec2> theta, std::uint64_t sample_seed,
                    bool want_gradients = true) const;

    const LossWeights& weights() const { return weights_; }
    void set_alpha(double alpha) { weights_.alpha = alpha; }
    const KeypointSet& keypoints() const { return kps_; }
    const Image& content() const { return content_; }
    const Image& style() const { return style_; }

  private:
    Image content_;
    Image style_;
    KeypointSet kps_;        // reference frame
    KeypointSet kps_local_;  // content frame
    Vec2 ratio_{1.0, 1.0};   // content / reference, per axis
    LossWeights weights_;
    ObjectiveOptions options_;
    FeaturePyramid content_feats_;
    FeaturePyramid style_feats_;
};

/// Draws min(n, height * width) distinct integer pixel coordinates.
std::vector<Vec2> sample_coords(int height, int width, int n, std::uint64_t seed);

}  // namespace dst
