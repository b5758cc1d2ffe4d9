#include "dst/image.hpp"

#include <algorithm>
#include <cmath>

namespace dst {

double norm(Vec2 v) { return std::hypot(v.x, v.y); }

Image::Image(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
    if (height < 1 || width < 1 || channels < 1) {
        throw InvalidArgument("image dimensions must be positive, got " + std::to_string(height) +
                              "x" + std::to_string(width) + "x" + std::to_string(channels));
    }
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

std::vector<double> Image::channel_mean() const {
    std::vector<double> mean(channels_, 0.0);
    for (std::size_t i = 0; i < data_.size(); ++i) {
        mean[i % channels_] += data_[i];
    }
    const double n = static_cast<double>(height_) * width_;
    for (auto& m : mean) {
        m /= n;
    }
    return mean;
}

bool Image::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

namespace {

struct Tap {
    int x0, x1, y0, y1;
    double fx, fy;
    bool clamped_x, clamped_y;
};

Tap make_tap(const Image& img, Vec2 p) {
    Tap t{};
    const double max_x = img.width() - 1;
    const double max_y = img.height() - 1;
    double x = p.x;
    double y = p.y;
    t.clamped_x = !(x > 0.0 && x < max_x);
    t.clamped_y = !(y > 0.0 && y < max_y);
    x = std::clamp(x, 0.0, max_x);
    y = std::clamp(y, 0.0, max_y);
    t.x0 = static_cast<int>(std::floor(x));
    t.y0 = static_cast<int>(std::floor(y));
    t.x1 = std::min(t.x0 + 1, img.width() - 1);
    t.y1 = std::min(t.y0 + 1, img.height() - 1);
    t.fx = x - t.x0;
    t.fy = y - t.y0;
    return t;
}

}  // namespace

std::vector<double> bilinear_sample(const Image& img, std::span<const Vec2> coords) {
    const int channels = img.channels();
    std::vector<double> out(coords.size() * channels);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const Tap t = make_tap(img, coords[i]);
        const double w00 = (1.0 - t.fx) * (1.0 - t.fy);
        const double w01 = t.fx * (1.0 - t.fy);
        const double w10 = (1.0 - t.fx) * t.fy;
        const double w11 = t.fx * t.fy;
        for (int c = 0; c < channels; ++c) {
            out[i * channels + c] = w00 * img.at(t.y0, t.x0, c) + w01 * img.at(t.y0, t.x1, c) +
                                    w10 * img.at(t.y1, t.x0, c) + w11 * img.at(t.y1, t.x1, c);
        }
    }
    return out;
}

void bilinear_sample_backward(const Image& img, std::span<const Vec2> coords,
                              std::span<const double> grad_out, Image* grad_img,
                              std::vector<Vec2>* grad_coords) {
    const int channels = img.channels();
    if (grad_out.size() != coords.size() * channels) {
        throw InvalidArgument("bilinear_sample_backward: gradient size mismatch");
    }
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const Tap t = make_tap(img, coords[i]);
        const double w00 = (1.0 - t.fx) * (1.0 - t.fy);
        const double w01 = t.fx * (1.0 - t.fy);
        const double w10 = (1.0 - t.fx) * t.fy;
        const double w11 = t.fx * t.fy;
        double gx = 0.0;
        double gy = 0.0;
        for (int c = 0; c < channels; ++c) {
            const double g = grad_out[i * channels + c];
            if (g == 0.0) {
                continue;
            }
            if (grad_img != nullptr) {
                grad_img->at(t.y0, t.x0, c) += w00 * g;
                grad_img->at(t.y0, t.x1, c) += w01 * g;
                grad_img->at(t.y1, t.x0, c) += w10 * g;
                grad_img->at(t.y1, t.x1, c) += w11 * g;
            }
            const double v00 = img.at(t.y0, t.x0, c);
            const double v01 = img.at(t.y0, t.x1, c);
            const double v10 = img.at(t.y1, t.x0, c);
            const double v11 = img.at(t.y1, t.x1, c);
            gx += g * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
            gy += g * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
        }
        if (grad_coords != nullptr) {
            // Clamped axes are flat.
            (*grad_coords)[i].x += t.clamped_x ? 0.0 : gx;
            (*grad_coords)[i].y += t.clamped_y ? 0.0 : gy;
        }
    }
}

Image resize_to(const Image& img, int height, int width) {
    if (height < 1 || width < 1) {
        throw InvalidArgument("resize: degenerate target size " + std::to_string(height) + "x" +
                              std::to_string(width));
    }
    if (height == img.height() && width == img.width()) {
        return img;
    }
    Image out(height, width, img.channels());
    const double sy = static_cast<double>(img.height()) / height;
    const double sx = static_cast<double>(img.width()) / width;
    std::vector<Vec2> coords;
    coords.reserve(static_cast<std::size_t>(width));
    for (int y = 0; y < height; ++y) {
        coords.clear();
        for (int x = 0; x < width; ++x) {
            coords.push_back({(x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5});
        }
        const auto row = bilinear_sample(img, coords);
        std::copy(row.begin(), row.end(), out.values().begin() + static_cast<std::ptrdiff_t>(y) * width * img.channels());
    }
    return out;
}

Image resize(const Image& img, int long_side) {
    if (long_side < 8) {
        throw InvalidArgument("resize: long_side must be >= 8, got " + std::to_string(long_side));
    }
    int height = 0;
    int width = 0;
    if (img.width() >= img.height()) {
        width = long_side;
        height = static_cast<int>(std::lround(static_cast<double>(img.height()) * long_side / img.width()));
    } else {
        height = long_side;
        width = static_cast<int>(std::lround(static_cast<double>(img.width()) * long_side / img.height()));
    }
    return resize_to(img, height, width);
}

Vec2 rescale_point(Vec2 p, int from_h, int from_w, int to_h, int to_w) {
    const double sx = static_cast<double>(to_w) / from_w;
    const double sy = static_cast<double>(to_h) / from_h;
    return {(p.x + 0.5) * sx - 0.5, (p.y + 0.5) * sy - 0.5};
}

}  // namespace dst
