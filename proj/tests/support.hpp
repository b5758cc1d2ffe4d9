#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dst/image.hpp"
#include "dst/keypoints.hpp"

namespace dst::test {

inline Image random_image(int h, int w, int c, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(h, w, c);
    for (auto& v : img.values()) {
        v = u(rng);
    }
    return img;
}

/// Smooth random image: a few Gaussian blobs over a gradient, so features
/// are distinctive but differentiable.
inline Image blob_image(int h, int w, std::uint64_t seed, int n_blobs = 6) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(h, w, 3);
    struct Blob {
        double x, y, s, c[3];
    };
    std::vector<Blob> blobs;
    for (int i = 0; i < n_blobs; ++i) {
        blobs.push_back({u(rng) * w, u(rng) * h, (0.08 + 0.12 * u(rng)) * std::max(h, w), {u(rng), u(rng), u(rng)}});
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                double v = 0.2 + 0.3 * (c == 0 ? x / double(w) : c == 1 ? y / double(h) : 0.5);
                for (const auto& b : blobs) {
                    const double d2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y);
                    v += 0.5 * b.c[c] * std::exp(-d2 / (2.0 * b.s * b.s));
                }
                img.at(y, x, c) = std::min(1.0, v);
            }
        }
    }
    return img;
}

/// Image sampled at q - shift with clamping, i.e. content translated by
/// `shift` (integer shifts only).
inline Image translate(const Image& img, int dx, int dy) {
    Image out(img.height(), img.width(), img.channels());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const int sx = std::clamp(x - dx, 0, img.width() - 1);
            const int sy = std::clamp(y - dy, 0, img.height() - 1);
            for (int c = 0; c < img.channels(); ++c) {
                out.at(y, x, c) = img.at(sy, sx, c);
            }
        }
    }
    return out;
}

inline double max_abs_diff(const Image& a, const Image& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    }
    return m;
}

inline double rel_err(double a, double n, double floor = 1e-6) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Central difference of f along parameter *p.
inline double central_diff(const std::function<double()>& f, double* p, double h) {
    const double saved = *p;
    *p = saved + h;
    const double fp = f();
    *p = saved - h;
    const double fm = f();
    *p = saved;
    return (fp - fm) / (2.0 * h);
}

/// Fixed random weights defining a scalar probe sum_i r_i * values_i.
inline std::vector<double> probe_weights(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> r(n);
    for (auto& v : r) {
        v = u(rng);
    }
    return r;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("dst_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// k well-separated random points inside [margin, w - margin] x [margin, h - margin].
inline std::vector<Vec2> spread_points(int k, int h, int w, double margin, double min_dist, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(margin, w - 1 - margin);
    std::uniform_real_distribution<double> uy(margin, h - 1 - margin);
    std::vector<Vec2> pts;
    int guard = 0;
    while (static_cast<int>(pts.size()) < k && guard++ < 100000) {
        const Vec2 p{ux(rng), uy(rng)};
        bool ok = true;
        for (const auto& q : pts) {
            ok = ok && norm(p - q) >= min_dist;
        }
        if (ok) {
            pts.push_back(p);
        }
    }
    return pts;
}

}  // namespace dst::test
