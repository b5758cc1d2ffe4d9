#include "dst/overlay.hpp"

#include <algorithm>
#include <cmath>

namespace dst {

namespace {

void plot(Image& img, int x, int y, const std::array<double, 3>& color) {
    if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) {
        return;
    }
    for (int c = 0; c < std::min(img.channels(), 3); ++c) {
        img.at(y, x, c) = color[c];
    }
}

void draw_line(Image& img, Vec2 a, Vec2 b, const std::array<double, 3>& color) {
    const int n = static_cast<int>(std::ceil(std::max(std::abs(b.x - a.x), std::abs(b.y - a.y))));
    for (int i = 0; i <= n; ++i) {
        const double t = n == 0 ? 0.0 : static_cast<double>(i) / n;
        plot(img, static_cast<int>(std::lround(a.x + t * (b.x - a.x))),
             static_cast<int>(std::lround(a.y + t * (b.y - a.y))), color);
    }
}

void draw_circle(Image& img, Vec2 c, int r, const std::array<double, 3>& color) {
    const int steps = std::max(16, 8 * r);
    for (int i = 0; i < steps; ++i) {
        const double a = 2.0 * M_PI * i / steps;
        plot(img, static_cast<int>(std::lround(c.x + r * std::cos(a))),
             static_cast<int>(std::lround(c.y + r * std::sin(a))), color);
    }
}

void draw_square(Image& img, Vec2 c, int r, const std::array<double, 3>& color) {
    const int cx = static_cast<int>(std::lround(c.x));
    const int cy = static_cast<int>(std::lround(c.y));
    for (int d = -r; d <= r; ++d) {
        plot(img, cx + d, cy - r, color);
        plot(img, cx + d, cy + r, color);
        plot(img, cx - r, cy + d, color);
        plot(img, cx + r, cy + d, color);
    }
}

}  // namespace

Image render_overlay(const Image& img, const KeypointSet& kps, const OverlayStyle& style) {
    kps.validate();
    Image out = img;
    for (std::size_t i = 0; i < kps.size(); ++i) {
        draw_line(out, kps.source[i], kps.target[i], style.line_color);
    }
    for (std::size_t i = 0; i < kps.size(); ++i) {
        draw_circle(out, kps.source[i], style.marker_radius, style.source_color);
        draw_square(out, kps.target[i], style.marker_radius, style.target_color);
    }
    return out;
}

}  // namespace dst
