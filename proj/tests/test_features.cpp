#include <doctest.h>

#include <cstring>
#include <fstream>

#include "dst/features.hpp"
#include "support.hpp"

using namespace dst;
using namespace dst::test;

namespace {

// Independent DSTF writer: builds the byte stream field by field.
struct ByteWriter {
    std::vector<std::uint8_t> bytes;
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            bytes.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
        }
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void raw(const char* s) { bytes.insert(bytes.end(), s, s + std::strlen(s)); }
};

}  // namespace

TEST_CASE("builtin features have four channels per colour channel") {
    const auto pyr = builtin_extract(random_image(32, 24, 3, 1), 3);
    REQUIRE(pyr.levels.size() == 3);
    CHECK(pyr.levels[0].channels() == 12);
    CHECK(pyr.levels[1].height() == 16);
    CHECK(pyr.levels[2].width() == 6);
    CHECK(pyr.levels[2].scale() == 0.25);
    CHECK(pyr.total_channels() == 36);
    CHECK(pyr.source_height == 32);
}

TEST_CASE("constant image has zero gradient and std channels") {
    const auto pyr = builtin_extract(Image(16, 16, 3, 0.7), 2);
    for (const auto& level : pyr.levels) {
        for (int y = 0; y < level.height(); ++y) {
            for (int x = 0; x < level.width(); ++x) {
                for (int c = 0; c < 3; ++c) {
                    CHECK(level.map.at(y, x, c) == doctest::Approx(0.7));
                }
                for (int c = 3; c < 12; ++c) {
                    CHECK(level.map.at(y, x, c) == 0.0);
                }
            }
        }
    }
}

TEST_CASE("vertical step edge excites only the x-gradient") {
    Image img(12, 12, 3);
    for (int y = 0; y < 12; ++y) {
        for (int x = 6; x < 12; ++x) {
            for (int c = 0; c < 3; ++c) {
                img.at(y, x, c) = 1.0;
            }
        }
    }
    const auto feats = builtin_extract(img, 1);
    const auto& f = feats.levels[0].map;
    for (int y = 0; y < 12; ++y) {
        CHECK(f.at(y, 5, 3) == 0.5);
        CHECK(f.at(y, 6, 3) == 0.5);
        CHECK(f.at(y, 2, 3) == 0.0);
        for (int x = 0; x < 12; ++x) {
            CHECK(f.at(y, x, 6) == 0.0);
        }
    }
}

TEST_CASE("builtin features are translation-equivariant in the interior") {
    const Image img = blob_image(40, 40, 2);
    const Image shifted = translate(img, 4, 2);
    const auto a = builtin_extract(img, 2);
    const auto b = builtin_extract(shifted, 2);
    // Level l sees the shift divided by 2^l; stay clear of the border.
    for (int l = 0; l < 2; ++l) {
        const int dx = 4 >> l;
        const int dy = 2 >> l;
        const auto& ma = a.levels[l].map;
        const auto& mb = b.levels[l].map;
        const int border = 4;
        double worst = 0.0;
        for (int y = border; y < ma.height() - border - dy; ++y) {
            for (int x = border; x < ma.width() - border - dx; ++x) {
                for (int c = 0; c < ma.channels(); ++c) {
                    worst = std::max(worst, std::abs(ma.at(y, x, c) - mb.at(y + dy, x + dx, c)));
                }
            }
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("builtin_extract backward matches central differences") {
    Image img = random_image(32, 32, 3, 3);
    const auto shape = builtin_extract(img, 3);
    FeaturePyramid probe = shape.zeros_like();
    std::uint64_t seed = 10;
    for (auto& level : probe.levels) {
        level.map.values() = probe_weights(level.map.size(), seed++);
    }
    auto f = [&] {
        const auto pyr = builtin_extract(img, 3);
        double s = 0.0;
        for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
            s += dot(pyr.levels[l].map.values(), probe.levels[l].map.values());
        }
        return s;
    };
    const Image grad = builtin_extract_backward(img, probe);
    double worst = 0.0;
    for (std::size_t i = 0; i < img.size(); i += 13) {
        worst = std::max(worst, rel_err(grad.values()[i], central_diff(f, &img.values()[i], 1e-5)));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("builtin_extract rejects images too small for the level count") {
    CHECK_THROWS_AS(builtin_extract(Image(4, 4, 3), 4), InvalidArgument);
    CHECK_THROWS_AS(builtin_extract(Image(4, 4, 3), 0), InvalidArgument);
}

TEST_CASE("hypercolumns on a single level at integer coordinates index directly") {
    FeaturePyramid pyr;
    pyr.levels.push_back({random_image(5, 6, 4, 4), 1, 1});
    const std::vector<Vec2> coords{{0, 0}, {5, 4}, {2, 3}};
    const auto cols = sample_hypercolumns(pyr, coords);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        for (int c = 0; c < 4; ++c) {
            CHECK(cols(static_cast<Eigen::Index>(i), c) ==
                  pyr.levels[0].map.at(static_cast<int>(coords[i].y), static_cast<int>(coords[i].x), c));
        }
    }
}

TEST_CASE("hypercolumns of a constant pyramid are identical") {
    const auto pyr = builtin_extract(Image(16, 16, 3, 0.2), 3);
    const std::vector<Vec2> coords{{0.3, 2.7}, {10.5, 11.25}, {15, 0}};
    const auto cols = sample_hypercolumns(pyr, coords);
    for (Eigen::Index i = 1; i < cols.rows(); ++i) {
        CHECK((cols.row(i) - cols.row(0)).cwiseAbs().maxCoeff() < 1e-15);
    }
}

TEST_CASE("two-level hypercolumns match a per-level bilinear oracle") {
    FeaturePyramid pyr;
    pyr.levels.push_back({random_image(8, 10, 2, 5), 1, 1});
    pyr.levels.push_back({random_image(4, 5, 3, 6), 1, 2});
    const std::vector<Vec2> coords{{3.3, 2.6}, {7.9, 6.1}, {0.2, 5.5}};
    const auto cols = sample_hypercolumns(pyr, coords);
    auto oracle = [](const Image& m, double x, double y, int c) {
        const int x0 = static_cast<int>(std::floor(x));
        const int y0 = static_cast<int>(std::floor(y));
        const double fx = x - x0;
        const double fy = y - y0;
        auto px = [&](int yy, int xx) {
            return m.at(std::clamp(yy, 0, m.height() - 1), std::clamp(xx, 0, m.width() - 1), c);
        };
        return (1 - fx) * (1 - fy) * px(y0, x0) + fx * (1 - fy) * px(y0, x0 + 1) + (1 - fx) * fy * px(y0 + 1, x0) +
               fx * fy * px(y0 + 1, x0 + 1);
    };
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        for (int c = 0; c < 2; ++c) {
            CHECK(cols(r, c) == doctest::Approx(oracle(pyr.levels[0].map, coords[i].x, coords[i].y, c)));
        }
        for (int c = 0; c < 3; ++c) {
            CHECK(cols(r, 2 + c) ==
                  doctest::Approx(oracle(pyr.levels[1].map, coords[i].x / 2, coords[i].y / 2, c)));
        }
    }
}

TEST_CASE("hypercolumn backward matches central differences") {
    auto pyr = builtin_extract(random_image(16, 16, 3, 7), 2);
    const std::vector<Vec2> coords{{3.3, 2.6}, {12.9, 6.1}, {8.4, 14.7}};
    const Eigen::MatrixXd r = Eigen::MatrixXd::Random(3, pyr.total_channels());
    auto f = [&] { return sample_hypercolumns(pyr, coords).cwiseProduct(r).sum(); };
    auto g = pyr.zeros_like();
    sample_hypercolumns_backward(pyr, coords, r, g);
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t i = 0; i < pyr.levels[l].map.size(); i += 11) {
            const double num = central_diff(f, &pyr.levels[l].map.values()[i], 1e-5);
            CHECK(std::abs(g.levels[l].map.values()[i] - num) < 1e-8);
        }
    }
}

TEST_CASE("DSTF parser reads an independently written file") {
    ByteWriter w;
    w.raw("DSTF");
    w.u32(1);
    w.u32(2);
    // Level 0: C=2, H=2, W=3, scale 1/1; level 1: C=1, H=1, W=2, scale 1/2.
    w.u32(2);
    w.u32(2);
    w.u32(3);
    w.u32(1);
    w.u32(1);
    for (int i = 0; i < 12; ++i) {
        w.f32(static_cast<float>(i) * 0.5f);
    }
    w.u32(1);
    w.u32(1);
    w.u32(2);
    w.u32(1);
    w.u32(2);
    w.f32(-1.25f);
    w.f32(3.0f);

    const auto pyr = parse_features(w.bytes);
    REQUIRE(pyr.levels.size() == 2);
    CHECK(pyr.source_height == 2);
    CHECK(pyr.source_width == 3);
    // Channel-major payload: value index = (c * H + y) * W + x.
    const auto& m = pyr.levels[0].map;
    CHECK(m.at(0, 0, 0) == 0.0);
    CHECK(m.at(0, 2, 0) == 1.0);
    CHECK(m.at(1, 0, 0) == 1.5);
    CHECK(m.at(0, 0, 1) == 3.0);
    CHECK(m.at(1, 2, 1) == 5.5);
    CHECK(pyr.levels[1].map.at(0, 0, 0) == -1.25);
    CHECK(pyr.levels[1].scale() == 0.5);

    // The serializer reproduces the same bytes.
    CHECK(serialize_features(pyr) == w.bytes);
}

TEST_CASE("DSTF save/load round trip is bit-exact") {
    const auto dir = temp_dir("dstf");
    auto pyr = builtin_extract(random_image(16, 12, 3, 8), 3);
    // Round values to float first so the comparison is exact.
    for (auto& level : pyr.levels) {
        for (auto& v : level.map.values()) {
            v = static_cast<float>(v);
        }
    }
    save_features(dir / "f.dstf", pyr);
    const auto back = load_features(dir / "f.dstf");
    REQUIRE(back.same_shape(pyr));
    for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
        CHECK(back.levels[l].map == pyr.levels[l].map);
        CHECK(back.levels[l].scale_den == pyr.levels[l].scale_den);
    }
    std::ifstream in(dir / "f.dstf", std::ios::binary);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(serialize_features(back) == bytes);
}

TEST_CASE("DSTF errors carry diagnostics") {
    ByteWriter w;
    w.raw("DSTF");
    w.u32(1);
    w.u32(2);
    w.u32(1);
    w.u32(1);
    w.u32(1);
    w.u32(1);
    w.u32(1);
    w.f32(1.0f);
    CHECK_THROWS_WITH_AS(parse_features(w.bytes), doctest::Contains("missing level 1 of 2"), FormatError);

    auto bad_magic = w.bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH_AS(parse_features(bad_magic), doctest::Contains("magic"), FormatError);

    auto bad_version = w.bytes;
    bad_version[4] = 2;
    CHECK_THROWS_WITH_AS(parse_features(bad_version), doctest::Contains("version"), FormatError);

    auto truncated = w.bytes;
    truncated[8] = 1;  // one level declared
    truncated.pop_back();
    CHECK_THROWS_WITH_AS(parse_features(truncated), doctest::Contains("offset"), FormatError);

    auto trailing = w.bytes;
    trailing[8] = 1;
    trailing.push_back(0);
    CHECK_THROWS_WITH_AS(parse_features(trailing), doctest::Contains("trailing"), FormatError);

    CHECK_THROWS_AS(load_features("/nonexistent/x.dstf"), FormatError);
}
