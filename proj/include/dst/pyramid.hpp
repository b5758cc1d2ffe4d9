#pragma once

#include <vector>

#include "dst/image.hpp"

namespace dst {

// Building blocks shared by the Laplacian pyramid and the built-in feature
// extractor. Each linear operator comes with its exact adjoint so gradients
// can be routed backwards through it.

/// Separable 5-tap binomial blur [1,4,6,4,1]/16, border-replicated.
Image binomial_blur(const Image& img);
Image binomial_blur_adjoint(const Image& grad);

/// Keeps even rows/columns: output is ceil(h/2) x ceil(w/2).
Image decimate(const Image& img);
Image decimate_adjoint(const Image& grad, int height, int width);

/// Bilinear 2x upsampling onto a height x width grid; fine pixel (y, x)
/// reads the coarse image at (y/2, x/2), matching decimate()'s sample sites.
Image upsample(const Image& coarse, int height, int width);
Image upsample_adjoint(const Image& grad, int coarse_height, int coarse_width);

/// blur then decimate.
Image pyr_down(const Image& img);
Image pyr_down_adjoint(const Image& grad, int height, int width);

struct LaplacianPyramid {
    /// Band-pass residuals, coarse to fine.
    std::vector<Image> levels;
    /// Coarsest low-pass image.
    Image base;

    int n_levels() const { return static_cast<int>(levels.size()) + 1; }
};

/// Largest level count for which the coarsest level keeps both sides >= 2.
int max_pyramid_levels(int height, int width);

LaplacianPyramid pyramid_decompose(const Image& img, int n_levels);
Image pyramid_reconstruct(const LaplacianPyramid& pyr);

/// Adjoint of pyramid_reconstruct: maps dL/dImage to dL/dCoefficients.
/// `shape` supplies the level dimensions.
LaplacianPyramid pyramid_reconstruct_adjoint(const Image& grad, const LaplacianPyramid& shape);

}  // namespace dst
