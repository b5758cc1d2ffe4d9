#include "dst/features.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>

#include "binary_io.hpp"
#include "dst/pyramid.hpp"

namespace dst {

int FeaturePyramid::total_channels() const {
    int total = 0;
    for (const auto& level : levels) {
        total += level.channels();
    }
    return total;
}

bool FeaturePyramid::same_shape(const FeaturePyramid& other) const {
    if (levels.size() != other.levels.size()) {
        return false;
    }
    for (std::size_t l = 0; l < levels.size(); ++l) {
        if (!levels[l].map.same_shape(other.levels[l].map)) {
            return false;
        }
    }
    return true;
}

FeaturePyramid FeaturePyramid::zeros_like() const {
    FeaturePyramid out;
    out.source_height = source_height;
    out.source_width = source_width;
    for (const auto& level : levels) {
        out.levels.push_back({Image(level.height(), level.width(), level.channels()), level.scale_num, level.scale_den});
    }
    return out;
}

namespace {

// Smoothing for the local standard deviation: sqrt(var + eps^2) - eps.
constexpr double kStdEps = 1e-3;

int clampi(int v, int n) { return std::clamp(v, 0, n - 1); }

// 3x3 replicated-border neighbourhood of (y, x).
std::array<std::pair<int, int>, 9> window(int y, int x, int h, int w) {
    std::array<std::pair<int, int>, 9> out{};
    int i = 0;
    for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
            out[i++] = {clampi(y + dy, h), clampi(x + dx, w)};
        }
    }
    return out;
}

Image local_features(const Image& g) {
    const int h = g.height();
    const int w = g.width();
    const int ch = g.channels();
    Image out(h, w, kBuiltinFeaturesPerChannel * ch);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto win = window(y, x, h, w);
            for (int c = 0; c < ch; ++c) {
                out.at(y, x, c) = g.at(y, x, c);
                out.at(y, x, ch + c) = 0.5 * (g.at(y, clampi(x + 1, w), c) - g.at(y, clampi(x - 1, w), c));
                out.at(y, x, 2 * ch + c) = 0.5 * (g.at(clampi(y + 1, h), x, c) - g.at(clampi(y - 1, h), x, c));
                double var = 0.0;
                for (int a = 0; a < 9; ++a) {
                    const double va = g.at(win[a].first, win[a].second, c);
                    for (int b = a + 1; b < 9; ++b) {
                        const double d = va - g.at(win[b].first, win[b].second, c);
                        var += d * d;
                    }
                }
                var /= 81.0;
                // sqrt(var + eps^2) - eps, written so that var == 0 gives exactly 0.
                out.at(y, x, 3 * ch + c) = var / (std::sqrt(var + kStdEps * kStdEps) + kStdEps);
            }
        }
    }
    return out;
}

Image local_features_backward(const Image& g, const Image& grad) {
    const int h = g.height();
    const int w = g.width();
    const int ch = g.channels();
    Image out(h, w, ch);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto win = window(y, x, h, w);
            for (int c = 0; c < ch; ++c) {
                out.at(y, x, c) += grad.at(y, x, c);
                const double gdx = 0.5 * grad.at(y, x, ch + c);
                out.at(y, clampi(x + 1, w), c) += gdx;
                out.at(y, clampi(x - 1, w), c) -= gdx;
                const double gdy = 0.5 * grad.at(y, x, 2 * ch + c);
                out.at(clampi(y + 1, h), x, c) += gdy;
                out.at(clampi(y - 1, h), x, c) -= gdy;

                const double gstd = grad.at(y, x, 3 * ch + c);
                if (gstd == 0.0) {
                    continue;
                }
                double mean = 0.0;
                double var = 0.0;
                std::array<double, 9> v{};
                for (int a = 0; a < 9; ++a) {
                    v[a] = g.at(win[a].first, win[a].second, c);
                    mean += v[a];
                }
                mean /= 9.0;
                for (int a = 0; a < 9; ++a) {
                    for (int b = a + 1; b < 9; ++b) {
                        var += (v[a] - v[b]) * (v[a] - v[b]);
                    }
                }
                var /= 81.0;
                const double dvar = gstd / (2.0 * std::sqrt(var + kStdEps * kStdEps));
                for (int a = 0; a < 9; ++a) {
                    out.at(win[a].first, win[a].second, c) += dvar * (2.0 / 9.0) * (v[a] - mean);
                }
            }
        }
    }
    return out;
}

std::vector<Image> blur_chain(const Image& img, int n_levels) {
    if (n_levels < 1) {
        throw InvalidArgument("builtin_extract: n_levels must be >= 1");
    }
    const int max_levels = max_pyramid_levels(img.height(), img.width());
    if (n_levels > max_levels) {
        throw InvalidArgument("builtin_extract: image " + std::to_string(img.height()) + "x" +
                              std::to_string(img.width()) + " too small for " + std::to_string(n_levels) +
                              " levels (max " + std::to_string(max_levels) + ")");
    }
    std::vector<Image> chain{img};
    for (int l = 1; l < n_levels; ++l) {
        chain.push_back(pyr_down(chain.back()));
    }
    return chain;
}

}  // namespace

FeaturePyramid builtin_extract(const Image& img, int n_levels) {
    const auto chain = blur_chain(img, n_levels);
    FeaturePyramid pyr;
    pyr.source_height = img.height();
    pyr.source_width = img.width();
    for (int l = 0; l < n_levels; ++l) {
        pyr.levels.push_back({local_features(chain[l]), 1u, 1u << l});
    }
    return pyr;
}

Image builtin_extract_backward(const Image& img, const FeaturePyramid& grad) {
    const int n_levels = static_cast<int>(grad.levels.size());
    const auto chain = blur_chain(img, n_levels);
    // Walk coarse to fine, folding each level's gradient into the one below.
    Image carry;
    for (int l = n_levels - 1; l >= 0; --l) {
        Image g = local_features_backward(chain[l], grad.levels[l].map);
        if (!carry.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                g.values()[i] += carry.values()[i];
            }
        }
        if (l > 0) {
            carry = pyr_down_adjoint(g, chain[l - 1].height(), chain[l - 1].width());
        } else {
            carry = std::move(g);
        }
    }
    return carry;
}

Hypercolumns sample_hypercolumns(const FeaturePyramid& pyr, std::span<const Vec2> coords) {
    Hypercolumns cols(static_cast<Eigen::Index>(coords.size()), pyr.total_channels());
    std::vector<Vec2> scaled(coords.size());
    int offset = 0;
    for (const auto& level : pyr.levels) {
        const double s = level.scale();
        for (std::size_t i = 0; i < coords.size(); ++i) {
            scaled[i] = s * coords[i];
        }
        const auto values = bilinear_sample(level.map, scaled);
        const int ch = level.channels();
        for (std::size_t i = 0; i < coords.size(); ++i) {
            for (int c = 0; c < ch; ++c) {
                cols(static_cast<Eigen::Index>(i), offset + c) = values[i * ch + c];
            }
        }
        offset += ch;
    }
    return cols;
}

void sample_hypercolumns_backward(const FeaturePyramid& pyr, std::span<const Vec2> coords,
                                  const Hypercolumns& grad, FeaturePyramid& grad_pyr) {
    std::vector<Vec2> scaled(coords.size());
    int offset = 0;
    for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
        const auto& level = pyr.levels[l];
        const double s = level.scale();
        const int ch = level.channels();
        for (std::size_t i = 0; i < coords.size(); ++i) {
            scaled[i] = s * coords[i];
        }
        std::vector<double> g(coords.size() * ch);
        for (std::size_t i = 0; i < coords.size(); ++i) {
            for (int c = 0; c < ch; ++c) {
                g[i * ch + c] = grad(static_cast<Eigen::Index>(i), offset + c);
            }
        }
        bilinear_sample_backward(level.map, scaled, g, &grad_pyr.levels[l].map, nullptr);
        offset += ch;
    }
}

std::vector<std::uint8_t> serialize_features(const FeaturePyramid& pyr) {
    std::vector<std::uint8_t> out;
    detail::put_magic(out, "DSTF");
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(pyr.levels.size()));
    for (const auto& level : pyr.levels) {
        const int ch = level.channels();
        const int h = level.height();
        const int w = level.width();
        detail::put_u32(out, static_cast<std::uint32_t>(ch));
        detail::put_u32(out, static_cast<std::uint32_t>(h));
        detail::put_u32(out, static_cast<std::uint32_t>(w));
        detail::put_u32(out, level.scale_num);
        detail::put_u32(out, level.scale_den);
        for (int c = 0; c < ch; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    detail::put_f32(out, static_cast<float>(level.map.at(y, x, c)));
                }
            }
        }
    }
    return out;
}

FeaturePyramid parse_features(std::span<const std::uint8_t> bytes) {
    detail::Reader<FormatError> in(bytes);
    in.expect_magic("DSTF");
    const std::uint32_t version = in.u32("version");
    if (version != 1) {
        throw FormatError("unsupported DSTF version " + std::to_string(version) + " at offset 4");
    }
    const std::uint32_t n_levels = in.u32("level count");
    FeaturePyramid pyr;
    for (std::uint32_t l = 0; l < n_levels; ++l) {
        const std::string tag = "level " + std::to_string(l) + " of " + std::to_string(n_levels);
        if (in.remaining() == 0) {
            throw FormatError("missing " + tag + " at offset " + std::to_string(in.offset()));
        }
        const std::uint32_t ch = in.u32(tag + " channel count");
        const std::uint32_t h = in.u32(tag + " height");
        const std::uint32_t w = in.u32(tag + " width");
        const std::uint32_t num = in.u32(tag + " scale numerator");
        const std::uint32_t den = in.u32(tag + " scale denominator");
        if (ch == 0 || h == 0 || w == 0 || num == 0 || den == 0) {
            throw FormatError(tag + ": zero dimension or scale at offset " + std::to_string(in.offset() - 20));
        }
        const std::size_t count = static_cast<std::size_t>(ch) * h * w;
        in.need(count * 4, tag + " payload");
        FeatureMap level{Image(static_cast<int>(h), static_cast<int>(w), static_cast<int>(ch)), num, den};
        for (std::uint32_t c = 0; c < ch; ++c) {
            for (std::uint32_t y = 0; y < h; ++y) {
                for (std::uint32_t x = 0; x < w; ++x) {
                    const float v = in.f32(tag + " payload");
                    if (!std::isfinite(v)) {
                        throw FormatError(tag + ": non-finite value at offset " + std::to_string(in.offset() - 4));
                    }
                    level.map.at(static_cast<int>(y), static_cast<int>(x), static_cast<int>(c)) = v;
                }
            }
        }
        if (!pyr.levels.empty() && level.scale() >= pyr.levels.back().scale()) {
            throw FormatError(tag + ": scale must decrease from level to level");
        }
        pyr.levels.push_back(std::move(level));
    }
    if (!pyr.levels.empty()) {
        const auto& first = pyr.levels.front();
        pyr.source_height = static_cast<int>(std::lround(first.height() / first.scale()));
        pyr.source_width = static_cast<int>(std::lround(first.width() / first.scale()));
    }
    if (in.remaining() != 0) {
        throw FormatError("trailing " + std::to_string(in.remaining()) + " bytes at offset " +
                          std::to_string(in.offset()));
    }
    return pyr;
}

FeaturePyramid load_features(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open feature file " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return parse_features(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save_features(const std::filesystem::path& path, const FeaturePyramid& pyr) {
    const auto bytes = serialize_features(pyr);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot write feature file " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace dst
