#include "dst/tps.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "binary_io.hpp"

namespace dst {

double tps_kernel(double r2) { return r2 > 0.0 ? 0.5 * r2 * std::log(r2) : 0.0; }

namespace {

// d/dc phi(|c - o|) = (log r^2 + 1) (c - o); zero at r = 0.
Vec2 kernel_grad(Vec2 d) {
    const double r2 = d.x * d.x + d.y * d.y;
    if (r2 <= 0.0) {
        return {};
    }
    return (std::log(r2) + 1.0) * d;
}

bool is_degenerate(std::span<const Vec2> centers) {
    if (centers.size() < 3) {
        return true;
    }
    Vec2 mean;
    for (const auto& c : centers) {
        mean = mean + c;
    }
    mean = (1.0 / centers.size()) * mean;
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    for (const auto& c : centers) {
        const Eigen::Vector2d d(c.x - mean.x, c.y - mean.y);
        cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(cov);
    const double hi = eig.eigenvalues()(1);
    const double lo = eig.eigenvalues()(0);
    return hi <= 0.0 || lo <= 1e-10 * hi;
}

}  // namespace

Vec2 TpsSolution::evaluate(Vec2 q) const {
    Vec2 f{v(0, 0) * q.x + v(1, 0) * q.y + b.x, v(0, 1) * q.x + v(1, 1) * q.y + b.y};
    for (std::size_t i = 0; i < centers.size(); ++i) {
        const Vec2 d = q - centers[i];
        const double phi = tps_kernel(d.x * d.x + d.y * d.y);
        f.x += w[i].x * phi;
        f.y += w[i].y * phi;
    }
    return f;
}

TpsSolution tps_solve(std::span<const Vec2> sources, std::span<const Vec2> theta, const TpsOptions& options) {
    const std::size_t k = sources.size();
    if (k == 0) {
        throw InvalidArgument("tps_solve: at least one keypoint required");
    }
    if (theta.size() != k) {
        throw InvalidArgument("tps_solve: theta has " + std::to_string(theta.size()) + " entries for " +
                              std::to_string(k) + " keypoints");
    }
    TpsSolution sol;
    sol.centers.resize(k);
    bool zero_theta = true;
    for (std::size_t i = 0; i < k; ++i) {
        if (!std::isfinite(theta[i].x) || !std::isfinite(theta[i].y)) {
            throw NumericalError("tps_solve: non-finite displacement at index " + std::to_string(i));
        }
        sol.centers[i] = sources[i] + theta[i];
        zero_theta = zero_theta && theta[i].x == 0.0 && theta[i].y == 0.0;
    }
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            if (norm(sol.centers[i] - sol.centers[j]) < 1e-9) {
                throw InvalidArgument("tps_solve: centres " + std::to_string(i) + " and " + std::to_string(j) +
                                      " coincide");
            }
        }
    }
    sol.degenerate = is_degenerate(sol.centers);
    sol.affine_prior_ = sol.degenerate ? options.affine_prior : 0.0;

    const auto n = static_cast<Eigen::Index>(k + 3);
    const auto kk = static_cast<Eigen::Index>(k);
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, 2);
    for (Eigen::Index i = 0; i < kk; ++i) {
        const Vec2 ci = sol.centers[i];
        for (Eigen::Index j = 0; j < kk; ++j) {
            const Vec2 d = ci - sol.centers[j];
            m(i, j) = tps_kernel(d.x * d.x + d.y * d.y);
        }
        m(i, i) += options.ridge;
        m(i, kk) = m(kk, i) = ci.x;
        m(i, kk + 1) = m(kk + 1, i) = ci.y;
        m(i, kk + 2) = m(kk + 2, i) = 1.0;
        rhs(i, 0) = sources[i].x;
        rhs(i, 1) = sources[i].y;
    }
    if (sol.degenerate) {
        // Prior on the affine block: v -> I, b -> -mean(theta).
        Vec2 mean_theta;
        for (const auto& t : theta) {
            mean_theta = mean_theta + t;
        }
        mean_theta = (1.0 / k) * mean_theta;
        const double mu = sol.affine_prior_;
        for (int e = 0; e < 3; ++e) {
            m(kk + e, kk + e) = -mu;
        }
        rhs(kk, 0) = -mu;
        rhs(kk + 1, 1) = -mu;
        rhs(kk + 2, 0) = mu * mean_theta.x;
        rhs(kk + 2, 1) = mu * mean_theta.y;
    }

    auto lu = std::make_shared<Eigen::FullPivLU<Eigen::MatrixXd>>(m);
    if (!lu->isInvertible()) {
        throw NumericalError("tps_solve: singular system (rank " + std::to_string(lu->rank()) + " of " +
                             std::to_string(n) + ", k = " + std::to_string(k) +
                             (sol.degenerate ? ", degenerate centres" : "") + ")");
    }
    if (zero_theta) {
        // Exact identity; the solve would only add rounding noise.
        sol.z_ = Eigen::MatrixXd::Zero(n, 2);
        sol.z_(kk, 0) = 1.0;
        sol.z_(kk + 1, 1) = 1.0;
    } else {
        sol.z_ = lu->solve(rhs);
        if (!sol.z_.allFinite()) {
            throw NumericalError("tps_solve: non-finite solution (k = " + std::to_string(k) + ")");
        }
    }
    sol.lu_ = std::move(lu);
    sol.w.resize(k);
    for (Eigen::Index i = 0; i < kk; ++i) {
        sol.w[i] = {sol.z_(i, 0), sol.z_(i, 1)};
    }
    sol.v = sol.z_.block(kk, 0, 2, 2);
    sol.b = {sol.z_(kk + 2, 0), sol.z_(kk + 2, 1)};
    return sol;
}

std::vector<Vec2> tps_solve_backward(const TpsSolution& sol, const TpsSolutionGrad& grad) {
    const std::size_t k = sol.centers.size();
    const auto kk = static_cast<Eigen::Index>(k);
    const auto n = kk + 3;
    Eigen::MatrixXd dz(n, 2);
    for (Eigen::Index i = 0; i < kk; ++i) {
        dz(i, 0) = grad.w[i].x;
        dz(i, 1) = grad.w[i].y;
    }
    dz.block(kk, 0, 2, 2) = grad.v;
    dz(kk + 2, 0) = grad.b.x;
    dz(kk + 2, 1) = grad.b.y;

    // M z = r with M symmetric: dL/dr = M^-1 dz, dL/dM = -(M^-1 dz) z^T.
    const Eigen::MatrixXd g = sol.lu_->solve(dz);
    const Eigen::MatrixXd dm = -g * sol.z_.transpose();

    std::vector<Vec2> dtheta(k);
    for (Eigen::Index i = 0; i < kk; ++i) {
        Vec2 acc = grad.centers[i];
        for (Eigen::Index j = 0; j < kk; ++j) {
            if (i == j) {
                continue;
            }
            // K(i,j) and K(j,i) both equal phi(|c_i - c_j|).
            const Vec2 kg = kernel_grad(sol.centers[i] - sol.centers[j]);
            acc = acc + (dm(i, j) + dm(j, i)) * kg;
        }
        acc.x += dm(i, kk) + dm(kk, i);
        acc.y += dm(i, kk + 1) + dm(kk + 1, i);
        dtheta[i] = acc;
    }
    if (sol.degenerate) {
        // rhs(k+2, :) = mu * mean(theta).
        const double s = sol.affine_prior_ / static_cast<double>(k);
        for (auto& d : dtheta) {
            d.x += s * g(kk + 2, 0);
            d.y += s * g(kk + 2, 1);
        }
    }
    return dtheta;
}

WarpField WarpField::identity(int width, int height) {
    WarpField f(width, height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            f.at(y, x) = {static_cast<double>(x), static_cast<double>(y)};
        }
    }
    return f;
}

bool WarpField::all_finite() const {
    for (const auto& f : flow) {
        if (!std::isfinite(f.x) || !std::isfinite(f.y)) {
            return false;
        }
    }
    return true;
}

WarpField synth_field(const TpsSolution& sol, int width, int height) {
    if (width < 1 || height < 1) {
        throw InvalidArgument("synth_field: dimensions must be positive");
    }
    WarpField field(width, height);
    const std::size_t k = sol.centers.size();
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            Vec2 f{sol.v(0, 0) * x + sol.v(1, 0) * y + sol.b.x, sol.v(0, 1) * x + sol.v(1, 1) * y + sol.b.y};
            for (std::size_t i = 0; i < k; ++i) {
                if (sol.w[i].x == 0.0 && sol.w[i].y == 0.0) {
                    continue;
                }
                const double dx = x - sol.centers[i].x;
                const double dy = y - sol.centers[i].y;
                const double phi = tps_kernel(dx * dx + dy * dy);
                f.x += sol.w[i].x * phi;
                f.y += sol.w[i].y * phi;
            }
            field.at(y, x) = f;
        }
    }
    if (!field.all_finite()) {
        throw NumericalError("synth_field: non-finite flow");
    }
    return field;
}

TpsSolutionGrad synth_field_backward(const TpsSolution& sol, const WarpField& grad) {
    const std::size_t k = sol.centers.size();
    TpsSolutionGrad out(k);
    for (int y = 0; y < grad.height; ++y) {
        for (int x = 0; x < grad.width; ++x) {
            const Vec2 g = grad.at(y, x);
            if (g.x == 0.0 && g.y == 0.0) {
                continue;
            }
            out.v(0, 0) += x * g.x;
            out.v(1, 0) += y * g.x;
            out.v(0, 1) += x * g.y;
            out.v(1, 1) += y * g.y;
            out.b = out.b + g;
            for (std::size_t i = 0; i < k; ++i) {
                const Vec2 d{x - sol.centers[i].x, y - sol.centers[i].y};
                const double phi = tps_kernel(d.x * d.x + d.y * d.y);
                out.w[i] = out.w[i] + phi * g;
                const double wg = sol.w[i].x * g.x + sol.w[i].y * g.y;
                if (wg != 0.0) {
                    out.centers[i] = out.centers[i] - wg * kernel_grad(d);
                }
            }
        }
    }
    return out;
}

Image warp(const Image& img, const WarpField& field) {
    if (field.width != img.width() || field.height != img.height()) {
        throw InvalidArgument("warp: field is " + std::to_string(field.width) + "x" + std::to_string(field.height) +
                              " but image is " + std::to_string(img.width()) + "x" + std::to_string(img.height()));
    }
    Image out(img.height(), img.width(), img.channels());
    const auto values = bilinear_sample(img, field.flow);
    std::copy(values.begin(), values.end(), out.values().begin());
    return out;
}

void warp_backward(const Image& img, const WarpField& field, const Image& grad_out, Image* grad_img,
                   WarpField* grad_field) {
    if (field.width != img.width() || field.height != img.height() || !grad_out.same_shape(img)) {
        throw InvalidArgument("warp_backward: shape mismatch");
    }
    bilinear_sample_backward(img, field.flow, grad_out.values(), grad_img,
                             grad_field != nullptr ? &grad_field->flow : nullptr);
}

Image naive_warp(const Image& img, const KeypointSet& kps, WarpField* field_out, const TpsOptions& options) {
    kps.validate();
    ThetaParams theta(kps.size());
    for (std::size_t i = 0; i < kps.size(); ++i) {
        theta[i] = kps.target[i] - kps.source[i];
    }
    const TpsSolution sol = tps_solve(kps.source, theta, options);
    WarpField field = synth_field(sol, img.width(), img.height());
    Image out = warp(img, field);
    if (field_out != nullptr) {
        *field_out = std::move(field);
    }
    return out;
}

std::vector<std::uint8_t> serialize_field(const WarpField& field) {
    std::vector<std::uint8_t> out;
    detail::put_magic(out, "DSTW");
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(field.width));
    detail::put_u32(out, static_cast<std::uint32_t>(field.height));
    for (const auto& f : field.flow) {
        detail::put_f32(out, static_cast<float>(f.x));
        detail::put_f32(out, static_cast<float>(f.y));
    }
    return out;
}

WarpField parse_field(std::span<const std::uint8_t> bytes) {
    detail::Reader<FormatError> in(bytes);
    in.expect_magic("DSTW");
    const std::uint32_t version = in.u32("version");
    if (version != 1) {
        throw FormatError("unsupported DSTW version " + std::to_string(version));
    }
    const std::uint32_t w = in.u32("width");
    const std::uint32_t h = in.u32("height");
    if (w == 0 || h == 0) {
        throw FormatError("DSTW: zero dimension");
    }
    in.need(static_cast<std::size_t>(w) * h * 8, "flow payload");
    WarpField field(static_cast<int>(w), static_cast<int>(h));
    for (auto& f : field.flow) {
        f.x = in.f32("flow");
        f.y = in.f32("flow");
    }
    if (in.remaining() != 0) {
        throw FormatError("trailing " + std::to_string(in.remaining()) + " bytes at offset " +
                          std::to_string(in.offset()));
    }
    return field;
}

void save_field(const std::filesystem::path& path, const WarpField& field) {
    const auto bytes = serialize_field(field);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw InvalidArgument("cannot write warp field " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

WarpField load_field(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InvalidArgument("cannot open warp field " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_field(bytes);
}

}  // namespace dst
