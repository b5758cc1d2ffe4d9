#include "dst/pyramid.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace dst {

namespace {

constexpr std::array<double, 5> kBinomial = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

int clamp_index(int i, int n) { return std::clamp(i, 0, n - 1); }

// Horizontal pass when horizontal == true, vertical otherwise. The adjoint
// scatters each output to the clamped taps it was gathered from.
Image blur_pass(const Image& img, bool horizontal, bool adjoint) {
    Image out(img.height(), img.width(), img.channels());
    const int h = img.height();
    const int w = img.width();
    const int ch = img.channels();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int t = 0; t < 5; ++t) {
                const int sx = horizontal ? clamp_index(x + t - 2, w) : x;
                const int sy = horizontal ? y : clamp_index(y + t - 2, h);
                for (int c = 0; c < ch; ++c) {
                    if (adjoint) {
                        out.at(sy, sx, c) += kBinomial[t] * img.at(y, x, c);
                    } else {
                        out.at(y, x, c) += kBinomial[t] * img.at(sy, sx, c);
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace

Image binomial_blur(const Image& img) { return blur_pass(blur_pass(img, true, false), false, false); }

Image binomial_blur_adjoint(const Image& grad) {
    return blur_pass(blur_pass(grad, false, true), true, true);
}

Image decimate(const Image& img) {
    const int h = (img.height() + 1) / 2;
    const int w = (img.width() + 1) / 2;
    Image out(h, w, img.channels());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < img.channels(); ++c) {
                out.at(y, x, c) = img.at(2 * y, 2 * x, c);
            }
        }
    }
    return out;
}

Image decimate_adjoint(const Image& grad, int height, int width) {
    Image out(height, width, grad.channels());
    for (int y = 0; y < grad.height(); ++y) {
        for (int x = 0; x < grad.width(); ++x) {
            for (int c = 0; c < grad.channels(); ++c) {
                out.at(2 * y, 2 * x, c) = grad.at(y, x, c);
            }
        }
    }
    return out;
}

namespace {

struct UpTap {
    int i0, i1;
    double f;
};

UpTap up_tap(int fine, int coarse_n) {
    const double pos = std::min(fine * 0.5, static_cast<double>(coarse_n - 1));
    const int i0 = static_cast<int>(std::floor(pos));
    return {i0, std::min(i0 + 1, coarse_n - 1), pos - i0};
}

}  // namespace

Image upsample(const Image& coarse, int height, int width) {
    Image out(height, width, coarse.channels());
    for (int y = 0; y < height; ++y) {
        const UpTap ty = up_tap(y, coarse.height());
        for (int x = 0; x < width; ++x) {
            const UpTap tx = up_tap(x, coarse.width());
            for (int c = 0; c < coarse.channels(); ++c) {
                const double top = (1.0 - tx.f) * coarse.at(ty.i0, tx.i0, c) + tx.f * coarse.at(ty.i0, tx.i1, c);
                const double bot = (1.0 - tx.f) * coarse.at(ty.i1, tx.i0, c) + tx.f * coarse.at(ty.i1, tx.i1, c);
                out.at(y, x, c) = (1.0 - ty.f) * top + ty.f * bot;
            }
        }
    }
    return out;
}

Image upsample_adjoint(const Image& grad, int coarse_height, int coarse_width) {
    Image out(coarse_height, coarse_width, grad.channels());
    for (int y = 0; y < grad.height(); ++y) {
        const UpTap ty = up_tap(y, coarse_height);
        for (int x = 0; x < grad.width(); ++x) {
            const UpTap tx = up_tap(x, coarse_width);
            for (int c = 0; c < grad.channels(); ++c) {
                const double g = grad.at(y, x, c);
                out.at(ty.i0, tx.i0, c) += (1.0 - ty.f) * (1.0 - tx.f) * g;
                out.at(ty.i0, tx.i1, c) += (1.0 - ty.f) * tx.f * g;
                out.at(ty.i1, tx.i0, c) += ty.f * (1.0 - tx.f) * g;
                out.at(ty.i1, tx.i1, c) += ty.f * tx.f * g;
            }
        }
    }
    return out;
}

Image pyr_down(const Image& img) { return decimate(binomial_blur(img)); }

Image pyr_down_adjoint(const Image& grad, int height, int width) {
    return binomial_blur_adjoint(decimate_adjoint(grad, height, width));
}

int max_pyramid_levels(int height, int width) {
    int levels = 1;
    while (true) {
        height = (height + 1) / 2;
        width = (width + 1) / 2;
        if (height < 2 || width < 2) {
            return levels;
        }
        ++levels;
    }
}

LaplacianPyramid pyramid_decompose(const Image& img, int n_levels) {
    if (n_levels < 1) {
        throw InvalidArgument("pyramid_decompose: n_levels must be >= 1");
    }
    if (img.height() < 2 || img.width() < 2) {
        throw InvalidArgument("pyramid_decompose: image must be at least 2x2");
    }
    const int max_levels = max_pyramid_levels(img.height(), img.width());
    if (n_levels > max_levels) {
        throw InvalidArgument("pyramid_decompose: " + std::to_string(n_levels) + " levels requested but a " +
                              std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                              " image supports at most " + std::to_string(max_levels) +
                              " (coarsest level must stay >= 2x2)");
    }
    LaplacianPyramid pyr;
    Image current = img;
    std::vector<Image> bands;
    for (int l = 0; l + 1 < n_levels; ++l) {
        Image down = pyr_down(current);
        Image up = upsample(down, current.height(), current.width());
        Image band = current;
        for (std::size_t i = 0; i < band.size(); ++i) {
            band.values()[i] -= up.values()[i];
        }
        bands.push_back(std::move(band));
        current = std::move(down);
    }
    pyr.base = std::move(current);
    pyr.levels.assign(std::make_move_iterator(bands.rbegin()), std::make_move_iterator(bands.rend()));
    return pyr;
}

Image pyramid_reconstruct(const LaplacianPyramid& pyr) {
    Image img = pyr.base;
    for (const Image& band : pyr.levels) {
        Image up = upsample(img, band.height(), band.width());
        for (std::size_t i = 0; i < up.size(); ++i) {
            up.values()[i] += band.values()[i];
        }
        img = std::move(up);
    }
    return img;
}

LaplacianPyramid pyramid_reconstruct_adjoint(const Image& grad, const LaplacianPyramid& shape) {
    LaplacianPyramid out;
    out.levels.resize(shape.levels.size());
    Image g = grad;
    for (std::size_t i = shape.levels.size(); i-- > 0;) {
        out.levels[i] = g;
        const Image& coarser = i == 0 ? shape.base : shape.levels[i - 1];
        g = upsample_adjoint(g, coarser.height(), coarser.width());
    }
    out.base = std::move(g);
    return out;
}

}  // namespace dst
