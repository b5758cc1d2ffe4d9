#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dst {

/// Thrown for violated preconditions on user-facing inputs.
class InvalidArgument : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a numerical procedure cannot produce a finite answer.
/// Malformed DSTF / DSTW bytes; the message carries the byte offset.
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// 2-D point in pixel units: x = column, y = row, origin top-left,
/// pixel centres at integer coordinates.
struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
    friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
    friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
    friend bool operator==(Vec2 a, Vec2 b) = default;
};

double norm(Vec2 v);

/// Dense H x W x C raster of doubles, interleaved row-major:
/// value(y, x, c) lives at data[(y * width + x) * channels + c].
class Image {
  public:
    Image() = default;
    Image(int height, int width, int channels, double fill = 0.0);

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
    double at(int y, int x, int c) const { return data_[index(y, x, c)]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    bool same_shape(const Image& other) const {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }

    /// Per-channel mean.
    std::vector<double> channel_mean() const;

    bool all_finite() const;

    friend bool operator==(const Image&, const Image&) = default;

  private:
    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<double> data_;
};

/// Bilinear resize so that the longer side equals long_side. Half-pixel
/// centre convention: src = (dst + 0.5) * (src_size / dst_size) - 0.5.
Image resize(const Image& img, int long_side);

/// Resize to explicit dimensions, same convention as resize().
Image resize_to(const Image& img, int height, int width);

/// Maps a point between two frames related by resize_to().
Vec2 rescale_point(Vec2 p, int from_h, int from_w, int to_h, int to_w);

/// Bilinear sample with border clamp. Output is coords.size() x channels.
std::vector<double> bilinear_sample(const Image& img, std::span<const Vec2> coords);

/// Vector-Jacobian product of bilinear_sample. grad_out has
/// coords.size() * channels entries; results are accumulated into
/// grad_img (same shape as img) and grad_coords (same length as coords).
/// Either output may be null.
void bilinear_sample_backward(const Image& img, std::span<const Vec2> coords,
                              std::span<const double> grad_out, Image* grad_img,
                              std::vector<Vec2>* grad_coords);

}  // namespace dst
