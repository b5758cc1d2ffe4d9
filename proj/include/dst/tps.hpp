#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "dst/image.hpp"
#include "dst/keypoints.hpp"

namespace dst {

/// Per-source-point displacements theta_i (pixels).
using ThetaParams = std::vector<Vec2>;

struct TpsOptions {
    /// Tikhonov ridge added to the kernel diagonal.
    double ridge = 1e-8;
    /// Weight pulling the affine part toward a translation when the
    /// centres cannot pin it down (k < 3 or collinear).
    double affine_prior = 1e-6;
};

struct TpsSolutionGrad;

/// Thin-plate spline inverse map
///   f(q) = sum_i w_i phi(|q - c_i|) + v^T q + b,   phi(r) = r^2 log r,
/// with centres c_i = p_i + theta_i, interpolating f(c_i) = p_i.
struct TpsSolution {
    std::vector<Vec2> centers;
    std::vector<Vec2> w;
    /// f(q)_d = sum_e v(e, d) q_e + b_d.
    Eigen::Matrix2d v = Eigen::Matrix2d::Identity();
    Vec2 b;
    bool degenerate = false;

    /// Evaluates f at an arbitrary point.
    Vec2 evaluate(Vec2 q) const;

  private:
    friend TpsSolution tps_solve(std::span<const Vec2>, std::span<const Vec2>, const TpsOptions&);
    friend std::vector<Vec2> tps_solve_backward(const TpsSolution&, const TpsSolutionGrad&);

    // Bordered system and its solution, kept for the adjoint solve.
    std::shared_ptr<const Eigen::FullPivLU<Eigen::MatrixXd>> lu_;
    Eigen::MatrixXd z_;
    double affine_prior_ = 0.0;
};

/// Gradient of a scalar with respect to a TpsSolution's fields.
struct TpsSolutionGrad {
    std::vector<Vec2> w;
    Eigen::Matrix2d v = Eigen::Matrix2d::Zero();
    Vec2 b;
    /// Direct dependence on centre positions (kernel arguments in f).
    std::vector<Vec2> centers;

    explicit TpsSolutionGrad(std::size_t k = 0) : w(k), centers(k) {}
};

/// TPS kernel phi(r) = r^2 log r with phi(0) = 0, taking r^2.
double tps_kernel(double r2);

TpsSolution tps_solve(std::span<const Vec2> sources, std::span<const Vec2> theta, const TpsOptions& options = {});

/// Maps dL/dSolution to dL/dtheta by differentiating the linear solve.
std::vector<Vec2> tps_solve_backward(const TpsSolution& sol, const TpsSolutionGrad& grad);

/// Dense inverse-mapping field over a width x height grid.
struct WarpField {
    int width = 0;
    int height = 0;
    std::vector<Vec2> flow;  // row-major, y * width + x

    WarpField() = default;
    WarpField(int w, int h) : width(w), height(h), flow(static_cast<std::size_t>(w) * h) {}

    Vec2& at(int y, int x) { return flow[static_cast<std::size_t>(y) * width + x]; }
    Vec2 at(int y, int x) const { return flow[static_cast<std::size_t>(y) * width + x]; }

    static WarpField identity(int width, int height);
    bool all_finite() const;
};

WarpField synth_field(const TpsSolution& sol, int width, int height);
TpsSolutionGrad synth_field_backward(const TpsSolution& sol, const WarpField& grad);

/// Output pixel q = bilinear_sample(img, flow(q)), border-clamped.
Image warp(const Image& img, const WarpField& field);
void warp_backward(const Image& img, const WarpField& field, const Image& grad_out, Image* grad_img,
                   WarpField* grad_field);

/// Baseline: one TPS warp with theta = P' - P, no optimisation.
Image naive_warp(const Image& img, const KeypointSet& kps, WarpField* field_out = nullptr,
                 const TpsOptions& options = {});

/// DSTW raster: "DSTW", u32 version (1), u32 W, u32 H, then H*W*2 float32
/// (x then y), all little-endian.
std::vector<std::uint8_t> serialize_field(const WarpField& field);
WarpField parse_field(std::span<const std::uint8_t> bytes);
void save_field(const std::filesystem::path& path, const WarpField& field);
WarpField load_field(const std::filesystem::path& path);

}  // namespace dst
