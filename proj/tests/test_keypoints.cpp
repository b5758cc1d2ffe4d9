#include <doctest.h>

#include <fstream>
#include <json.hpp>

#include "dst/features.hpp"
#include "dst/keypoints.hpp"
#include "support.hpp"

using namespace dst;
using namespace dst::test;

namespace {

Eigen::Matrix2d rotation(double deg) {
    const double a = deg * M_PI / 180.0;
    Eigen::Matrix2d r;
    r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    return r;
}

Vec2 apply(double s, const Eigen::Matrix2d& r, Vec2 t, Vec2 p) {
    return {s * (r(0, 0) * p.x + r(0, 1) * p.y) + t.x, s * (r(1, 0) * p.x + r(1, 1) * p.y) + t.y};
}

double residual(const SimilarityTransform& t, const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Vec2 d = t.apply(a[i]) - b[i];
        s += d.x * d.x + d.y * d.y;
    }
    return s;
}

// Least squares over proper rotations by exhaustive angle search with the
// closed-form scale and translation for each angle.
double grid_oracle_residual(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
    Vec2 ma;
    Vec2 mb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma = ma + a[i];
        mb = mb + b[i];
    }
    ma = (1.0 / a.size()) * ma;
    mb = (1.0 / b.size()) * mb;
    double best = 1e300;
    const int steps = 200000;
    for (int k = 0; k < steps; ++k) {
        const double ang = 2.0 * M_PI * k / steps;
        const double c = std::cos(ang);
        const double s = std::sin(ang);
        double num = 0.0;
        double den = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const Vec2 p = a[i] - ma;
            const Vec2 q = b[i] - mb;
            const Vec2 rp{c * p.x - s * p.y, s * p.x + c * p.y};
            num += rp.x * q.x + rp.y * q.y;
            den += p.x * p.x + p.y * p.y;
        }
        const double scale = std::max(0.0, num / den);
        double res = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const Vec2 p = a[i] - ma;
            const Vec2 q = b[i] - mb;
            const Vec2 d{scale * (c * p.x - s * p.y) - q.x, scale * (s * p.x + c * p.y) - q.y};
            res += d.x * d.x + d.y * d.y;
        }
        best = std::min(best, res);
    }
    return best;
}

int count_crossings(const KeypointSet& k) {
    int n = 0;
    for (std::size_t i = 0; i < k.size(); ++i) {
        for (std::size_t j = i + 1; j < k.size(); ++j) {
            n += segments_properly_intersect(k.source[i], k.target[i], k.source[j], k.target[j]) ? 1 : 0;
        }
    }
    return n;
}

// Orientation-based brute-force proper intersection, written independently.
bool crosses(Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
    auto cross = [](Vec2 o, Vec2 p, Vec2 q) { return (p.x - o.x) * (q.y - o.y) - (p.y - o.y) * (q.x - o.x); };
    const double d1 = cross(c, d, a);
    const double d2 = cross(c, d, b);
    const double d3 = cross(a, b, c);
    const double d4 = cross(a, b, d);
    return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

}  // namespace

TEST_CASE("match on identical images returns zero-offset pairs") {
    const Image img = blob_image(48, 48, 1);
    const auto feats = builtin_extract(img, 3);
    const auto pairs = match(feats, feats);
    REQUIRE(!pairs.empty());
    for (const auto& p : pairs) {
        CHECK(p.src == p.dst);
        CHECK(p.activation >= 0.0);
    }
}

TEST_CASE("match recovers a translation against a brute-force nearest-neighbour oracle") {
    const Image content = blob_image(64, 64, 5, 10);
    const int tx = 5;
    const int ty = -3;
    const Image style = translate(content, tx, ty);
    const auto cf = builtin_extract(content, 3);
    const auto sf = builtin_extract(style, 3);
    const auto pairs = match(cf, sf);
    REQUIRE(pairs.size() > 20);
    int interior = 0;
    int good = 0;
    for (const auto& p : pairs) {
        const bool inside = p.src.x >= 12 && p.src.x <= 51 && p.src.y >= 12 && p.src.y <= 51;
        if (!inside) {
            continue;
        }
        ++interior;
        good += norm(p.dst - (p.src + Vec2{double(tx), double(ty)})) <= 2.0 ? 1 : 0;
    }
    REQUIRE(interior > 0);
    // The oracle: an exhaustive nearest-neighbour search at the finest
    // level finds the translated location for these pixels as well.
    const auto cols_c = sample_hypercolumns(cf, std::vector<Vec2>{{30, 30}});
    double best = 1e300;
    Vec2 arg;
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            const auto col = sample_hypercolumns(sf, std::vector<Vec2>{{double(x), double(y)}});
            const double d = 1.0 - cols_c.row(0).normalized().dot(col.row(0).normalized());
            if (d < best) {
                best = d;
                arg = {double(x), double(y)};
            }
        }
    }
    CHECK(norm(arg - Vec2{30.0 + tx, 30.0 + ty}) <= 2.0);
    CHECK(good == interior);
}

TEST_CASE("match on uncorrelated noise does not crash") {
    const auto a = builtin_extract(random_image(32, 32, 3, 1), 3);
    const auto b = builtin_extract(random_image(32, 32, 3, 2), 3);
    const auto pairs = match(a, b);
    CHECK(pairs.size() < 32u * 32u);
    CHECK(match(FeaturePyramid{}, b).empty());
}

TEST_CASE("select drops everything below the activation threshold") {
    std::vector<Correspondence> c;
    for (int i = 0; i < 10; ++i) {
        c.push_back({{i * 20.0, 0}, {0, 0}, 0.5});
    }
    CHECK(select(c).empty());
}

TEST_CASE("select enforces the spacing rule") {
    const std::vector<Correspondence> c{{{0, 0}, {0, 0}, 2.0}, {{3, 4}, {0, 0}, 3.0}};
    const auto s = select(c);
    REQUIRE(s.size() == 1);
    CHECK(s[0].activation == 3.0);
}

TEST_CASE("select caps at 80 pairs") {
    std::vector<Correspondence> c;
    for (int i = 0; i < 100; ++i) {
        c.push_back({{(i % 10) * 11.0, (i / 10) * 11.0}, {0, 0}, 1.0 + i * 0.01});
    }
    const auto s = select(c);
    CHECK(s.size() == 80);
    // Highest activations first.
    CHECK(s.front().activation == doctest::Approx(1.99));
}

TEST_CASE("select output invariants on random candidates") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 200.0);
    std::uniform_real_distribution<double> a(0.0, 3.0);
    std::vector<Correspondence> c;
    for (int i = 0; i < 500; ++i) {
        c.push_back({{u(rng), u(rng)}, {u(rng), u(rng)}, a(rng)});
    }
    const SelectOptions opt;
    const auto s = select(c, opt);
    CHECK(s.size() <= 80);
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(s[i].activation >= 1.0);
        for (std::size_t j = i + 1; j < s.size(); ++j) {
            CHECK(norm(s[i].src - s[j].src) >= 10.0);
        }
    }
    CHECK_THROWS_AS(select(c, SelectOptions{80, 0.0, 1.0}), InvalidArgument);
}

TEST_CASE("umeyama identity") {
    const std::vector<Vec2> p{{0, 0}, {10, 0}, {3, 7}};
    const auto t = umeyama(p, p);
    CHECK(t.scale == doctest::Approx(1.0));
    CHECK(t.translation.x == doctest::Approx(0.0));
    CHECK(std::abs(t.rotation(0, 1)) < 1e-12);
}

TEST_CASE("umeyama recovers a known similarity transform") {
    const std::vector<Vec2> src{{0, 0}, {10, 0}, {3, 7}, {-4, 5}};
    const auto r = rotation(90.0);
    std::vector<Vec2> dst;
    for (const auto& p : src) {
        dst.push_back(apply(2.0, r, {5, -3}, p));
    }
    const auto t = umeyama(src, dst);
    CHECK(std::abs(t.scale - 2.0) < 1e-9);
    CHECK((t.rotation - r).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::abs(t.translation.x - 5.0) < 1e-9);
    CHECK(std::abs(t.translation.y + 3.0) < 1e-9);
    CHECK(residual(t, src, dst) < 1e-9);
    CHECK(t.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("umeyama on a mirrored set returns the best proper rotation") {
    const std::vector<Vec2> src{{0, 0}, {10, 1}, {3, 7}, {-4, 5}, {6, -2}};
    std::vector<Vec2> dst;
    for (const auto& p : src) {
        dst.push_back({-p.x + 1.0, p.y});
    }
    const auto t = umeyama(src, dst);
    CHECK(t.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    const double oracle = grid_oracle_residual(src, dst);
    const double got = residual(t, src, dst);
    CHECK(got <= oracle + 1e-9);
    CHECK(got >= oracle - 1e-3);
    // Never worse than doing nothing.
    CHECK(got <= residual(SimilarityTransform{}, src, dst));
}

TEST_CASE("umeyama rejects degenerate input") {
    const std::vector<Vec2> same{{1, 1}, {1, 1}};
    CHECK_THROWS_AS(umeyama(same, same), InvalidArgument);
    CHECK_THROWS_AS(umeyama(std::vector<Vec2>{{0, 0}}, std::vector<Vec2>{{1, 1}}), InvalidArgument);
}

TEST_CASE("align_targets maps style points onto sources") {
    SUBCASE("already aligned") {
        const std::vector<Correspondence> c{{{0, 0}, {0, 0}, 1}, {{5, 5}, {5, 5}, 2}};
        const auto k = align_targets(c);
        CHECK(k.target[1].x == doctest::Approx(5.0));
        CHECK(k.activations[1] == 2.0);
    }
    SUBCASE("scaled by one half") {
        std::vector<Correspondence> c;
        for (const Vec2 p : {Vec2{10, 4}, Vec2{30, 12}, Vec2{22, 40}}) {
            c.push_back({p, 0.5 * p, 1.0});
        }
        const auto k = align_targets(c);
        for (std::size_t i = 0; i < k.size(); ++i) {
            CHECK(norm(k.target[i] - k.source[i]) < 1e-6);
        }
    }
    SUBCASE("rotated by 30 degrees") {
        std::vector<Correspondence> c;
        const auto r = rotation(30.0);
        for (const Vec2 p : {Vec2{10, 4}, Vec2{30, 12}, Vec2{22, 40}}) {
            c.push_back({p, apply(1.0, r, {}, p), 1.0});
        }
        const auto k = align_targets(c);
        for (std::size_t i = 0; i < k.size(); ++i) {
            CHECK(norm(k.target[i] - k.source[i]) < 1e-6);
        }
    }
}

TEST_CASE("segment intersection predicate agrees with an independent test") {
    CHECK(segments_properly_intersect({0, 0}, {2, 2}, {0, 2}, {2, 0}));
    CHECK_FALSE(segments_properly_intersect({0, 0}, {2, 0}, {0, 1}, {2, 1}));
    CHECK_FALSE(segments_properly_intersect({0, 0}, {1, 1}, {1, 1}, {2, 0}));
    CHECK_FALSE(segments_properly_intersect({0, 0}, {2, 0}, {1, 0}, {3, 0}));
    CHECK_FALSE(segments_properly_intersect({1, 1}, {1, 1}, {0, 0}, {2, 2}));
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> u(0, 6);
    for (int i = 0; i < 5000; ++i) {
        const Vec2 a{double(u(rng)), double(u(rng))};
        const Vec2 b{double(u(rng)), double(u(rng))};
        const Vec2 c{double(u(rng)), double(u(rng))};
        const Vec2 d{double(u(rng)), double(u(rng))};
        CHECK(segments_properly_intersect(a, b, c, d) == crosses(a, b, c, d));
    }
}

TEST_CASE("remove_crossings keeps parallel segments") {
    KeypointSet k{{{0, 0}, {0, 5}}, {{10, 0}, {10, 5}}, {1, 1}};
    CHECK(remove_crossings(k).size() == 2);
}

TEST_CASE("remove_crossings drops the lower-activation pair of an X") {
    KeypointSet k{{{0, 0}, {0, 10}}, {{10, 10}, {10, 0}}, {2.0, 1.5}};
    const auto out = remove_crossings(k);
    REQUIRE(out.size() == 1);
    CHECK(out.activations[0] == 2.0);
}

TEST_CASE("remove_crossings ignores zero-length displacements") {
    KeypointSet k{{{0, 0}, {5, 5}, {2, 3}}, {{0, 0}, {5, 5}, {2, 3}}, {1, 1, 1}};
    CHECK(remove_crossings(k).size() == 3);
}

TEST_CASE("remove_crossings output passes the exhaustive check") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    for (int trial = 0; trial < 20; ++trial) {
        KeypointSet k;
        for (int i = 0; i < 40; ++i) {
            k.source.push_back({u(rng), u(rng)});
            k.target.push_back({u(rng), u(rng)});
            k.activations.push_back(u(rng));
        }
        const auto out = remove_crossings(k);
        CHECK(count_crossings(out) == 0);
        CHECK(out.size() >= 1);
    }
}

TEST_CASE("keypoint file round trip") {
    const auto dir = temp_dir("kp");
    KeypointSet k{{{1.5, 2}, {3, 4}}, {{5, 6}, {7.25, 8}}, {1.0, 2.5}};
    save_keypoints(dir / "k.json", k);
    const auto f = load_keypoints(dir / "k.json");
    CHECK(f.frame == KeypointFrame::content);
    CHECK(f.keypoints.source == k.source);
    CHECK(f.keypoints.target == k.target);
    CHECK(f.keypoints.activations == k.activations);
    const auto j = nlohmann::json::parse(serialize_keypoints(k, KeypointFrame::style));
    CHECK(j["frame"] == "style");
    CHECK(j["source"][1][0] == 3.0);
}

TEST_CASE("keypoint parse errors name the line or field") {
    CHECK_THROWS_WITH_AS(parse_keypoints("{\n\"source\": [[1, 2]],\n oops}"), doctest::Contains("line 3"),
                         KeypointFormatError);
    CHECK_THROWS_WITH_AS(parse_keypoints(R"({"source": [[1, 2]]})"), doctest::Contains("\"target\""),
                         KeypointFormatError);
    CHECK_THROWS_WITH_AS(parse_keypoints(R"({"source": [[1, 2]], "target": [[1]]})"),
                         doctest::Contains("\"target\"[0]"), KeypointFormatError);
    CHECK_THROWS_WITH_AS(parse_keypoints(R"({"source": [[1, 2]], "target": [[1, 2], [3, 4]]})"),
                         doctest::Contains("length"), KeypointFormatError);
    CHECK_THROWS_WITH_AS(parse_keypoints(R"({"source": [], "target": [], "frame": "other"})"),
                         doctest::Contains("frame"), KeypointFormatError);
    const auto f = parse_keypoints(R"({"source": [[1, 2]], "target": [[3, 4]]})");
    CHECK(f.keypoints.activations == std::vector<double>{1.0});
}

TEST_CASE("rescale_keypoints maps between resolutions") {
    KeypointSet k{{{0, 0}}, {{127, 63}}, {1}};
    const auto r = rescale_keypoints(k, 64, 128, 32, 64);
    CHECK(r.source[0].x == doctest::Approx(-0.25));
    CHECK(r.target[0].x == doctest::Approx(63.25));
    const auto back = rescale_keypoints(r, 32, 64, 64, 128);
    CHECK(back.target[0].x == doctest::Approx(127.0));
}
