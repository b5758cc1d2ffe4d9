#include "dst/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

namespace dst {

void ScheduleConfig::validate() const {
    if (n_scales < 1) {
        throw InvalidArgument("schedule: n_scales must be >= 1");
    }
    if (iters_per_scale < 1) {
        throw InvalidArgument("schedule: iters_per_scale must be >= 1");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw InvalidArgument("schedule: learning_rate must be > 0");
    }
    if (initial_long_side < 8) {
        throw InvalidArgument("schedule: initial_long_side must be >= 8");
    }
    if (momentum < 0.0 || momentum >= 1.0) {
        throw InvalidArgument("schedule: momentum must lie in [0, 1)");
    }
    if (!std::isfinite(alpha_initial) || alpha_initial < 0.0) {
        throw InvalidArgument("schedule: alpha_initial must be >= 0");
    }
    if (pyramid_levels < 1 || feature_levels < 1 || n_samples < 2 || snapshot_every < 0) {
        throw InvalidArgument("schedule: pyramid_levels, feature_levels >= 1, n_samples >= 2 required");
    }
}

int ScheduleConfig::long_side(int scale) const { return initial_long_side << scale; }

double ScheduleConfig::alpha(int scale) const {
    return alpha_halving ? alpha_initial / static_cast<double>(1 << scale) : alpha_initial;
}

std::optional<Regime> parse_regime(const std::string& name) {
    if (name == "low") {
        return Regime::low;
    }
    if (name == "medium") {
        return Regime::medium;
    }
    if (name == "high") {
        return Regime::high;
    }
    if (name == "custom") {
        return Regime::custom;
    }
    return std::nullopt;
}

std::string to_string(Regime regime) {
    switch (regime) {
        case Regime::low:
            return "low";
        case Regime::medium:
            return "medium";
        case Regime::high:
            return "high";
        case Regime::custom:
            break;
    }
    return "custom";
}

RegimePreset regime_preset(LossFamily family, Regime regime) {
    const bool gram = family == LossFamily::gram;
    switch (regime) {
        case Regime::low:
            return gram ? RegimePreset{regime, 3.0, 750.0} : RegimePreset{regime, 0.3, 75.0};
        case Regime::medium:
            return gram ? RegimePreset{regime, 7.0, 100.0} : RegimePreset{regime, 0.5, 50.0};
        case Regime::high:
            return gram ? RegimePreset{regime, 15.0, 100.0} : RegimePreset{regime, 0.7, 10.0};
        case Regime::custom:
            break;
    }
    throw InvalidArgument("regime_preset: custom regime has no preset");
}

Image init_output(const Image& content, const Image& style) {
    const Image low = upsample(pyr_down(content), content.height(), content.width());
    Image out = content;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.values()[i] -= low.values()[i];
    }
    const auto band_mean = out.channel_mean();
    const auto style_mean = style.channel_mean();
    if (style_mean.size() != band_mean.size()) {
        throw InvalidArgument("init_output: content and style channel counts differ");
    }
    const int ch = out.channels();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const int c = static_cast<int>(i % ch);
        out.values()[i] += style_mean[c] - band_mean[c];
    }
    return out;
}

void sgd_update(std::span<double> params, std::span<const double> grads, double learning_rate,
                std::span<double> velocity, double momentum) {
    if (params.size() != grads.size()) {
        throw InvalidArgument("sgd_update: gradient shape mismatch");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) {
            throw NumericalError("non-finite gradient at parameter " + std::to_string(i) + "; iteration aborted");
        }
    }
    const bool use_velocity = momentum != 0.0;
    if (use_velocity && velocity.size() != params.size()) {
        throw InvalidArgument("sgd_update: velocity shape mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        double g = grads[i];
        if (use_velocity) {
            velocity[i] = momentum * velocity[i] + g;
            g = velocity[i];
        }
        params[i] -= learning_rate * g;
    }
}

namespace {

std::span<double> as_span(std::vector<Vec2>& v) { return {&v.data()->x, v.size() * 2}; }
std::span<const double> as_span(std::span<const Vec2> v) { return {&v.data()->x, v.size() * 2}; }

LaplacianPyramid zeros_like(const LaplacianPyramid& p) {
    LaplacianPyramid z;
    z.base = Image(p.base.height(), p.base.width(), p.base.channels());
    for (const auto& l : p.levels) {
        z.levels.emplace_back(l.height(), l.width(), l.channels());
    }
    return z;
}

}  // namespace

void step(OptimizerState& state, const LaplacianPyramid& grad_x, std::span<const Vec2> grad_theta,
          double learning_rate, double momentum, double theta_grad_scale, bool update_theta) {
    if (grad_x.levels.size() != state.x.levels.size() || grad_theta.size() != state.theta.size()) {
        throw InvalidArgument("step: gradient shapes do not match the state");
    }
    const bool use_velocity = momentum != 0.0;
    if (use_velocity && state.x_velocity.base.empty()) {
        state.x_velocity = zeros_like(state.x);
        state.theta_velocity.assign(state.theta.size(), Vec2{});
    }
    auto velocity_of = [&](Image& v) { return use_velocity ? v.data() : std::span<double>{}; };
    // Check every group before touching any so a bad gradient leaves the
    // state unchanged.
    for (std::size_t l = 0; l < grad_x.levels.size(); ++l) {
        if (!grad_x.levels[l].all_finite()) {
            throw NumericalError("non-finite gradient in pyramid level " + std::to_string(l) + "; iteration aborted");
        }
    }
    if (!grad_x.base.all_finite()) {
        throw NumericalError("non-finite gradient in pyramid base; iteration aborted");
    }
    std::vector<Vec2> scaled(grad_theta.begin(), grad_theta.end());
    for (auto& g : scaled) {
        g = theta_grad_scale * g;
        if (!std::isfinite(g.x) || !std::isfinite(g.y)) {
            throw NumericalError("non-finite theta gradient; iteration aborted");
        }
    }
    for (std::size_t l = 0; l < state.x.levels.size(); ++l) {
        sgd_update(state.x.levels[l].data(), grad_x.levels[l].data(), learning_rate,
                   use_velocity ? velocity_of(state.x_velocity.levels[l]) : std::span<double>{}, momentum);
    }
    sgd_update(state.x.base.data(), grad_x.base.data(), learning_rate,
               use_velocity ? velocity_of(state.x_velocity.base) : std::span<double>{}, momentum);
    if (update_theta) {
        sgd_update(as_span(state.theta), as_span(std::span<const Vec2>(scaled)), learning_rate,
                   use_velocity ? as_span(state.theta_velocity) : std::span<double>{}, momentum);
    }
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, int scale, int iter) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(scale) * 1000003ULL + iter + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Vec2 frame_ratio(int from_h, int from_w, int to_h, int to_w) {
    return {static_cast<double>(to_w) / from_w, static_cast<double>(to_h) / from_h};
}

ThetaParams rescale_theta(std::span<const Vec2> theta, Vec2 ratio) {
    ThetaParams out(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        out[i] = {theta[i].x * ratio.x, theta[i].y * ratio.y};
    }
    return out;
}

int pyramid_levels_for(const Image& img, int requested) {
    return std::max(1, std::min(requested, max_pyramid_levels(img.height(), img.width())));
}

RunResult finish(const OptimizerState& state, const KeypointSet& kps, int ref_h, int ref_w, const TpsOptions& tps,
                 std::vector<TraceRecord> trace) {
    RunResult r;
    r.stylized = pyramid_reconstruct(state.x);
    const int h = r.stylized.height();
    const int w = r.stylized.width();
    const KeypointSet local = rescale_keypoints(kps, ref_h, ref_w, h, w);
    const ThetaParams theta = rescale_theta(state.theta, frame_ratio(ref_h, ref_w, h, w));
    const TpsSolution sol = tps_solve(local.source, theta, tps);
    r.field = synth_field(sol, r.stylized.width(), r.stylized.height());
    r.output = warp(r.stylized, r.field);
    r.keypoints = kps;
    r.theta = state.theta;
    r.trace = std::move(trace);
    return r;
}

}  // namespace

RunResult run(const Image& content, const Image& style, const KeypointSet& kps, const LossWeights& weights,
              const ScheduleConfig& schedule, const RunHooks& hooks, const ObjectiveOptions& objective_options) {
    schedule.validate();
    weights.validate();
    kps.validate();
    if (kps.empty()) {
        throw InvalidArgument("run: keypoint set is empty");
    }
    if (content.channels() != style.channels()) {
        throw InvalidArgument("run: content and style channel counts differ");
    }
    ObjectiveOptions options = objective_options;
    options.feature_levels = schedule.feature_levels;
    options.n_samples = schedule.n_samples;
    // theta lives in the full-resolution content frame throughout
    options.reference_height = content.height();
    options.reference_width = content.width();
    const int ref_h = content.height();
    const int ref_w = content.width();

    OptimizerState state;
    state.theta.assign(kps.size(), Vec2{});
    std::vector<TraceRecord> trace;
    Image prev_x;
    // last state whose objective evaluated cleanly
    std::optional<OptimizerState> good;

    for (int s = 0; s < schedule.n_scales; ++s) {
        const Image content_s = resize(content, schedule.long_side(s));
        const Image style_s = resize(style, schedule.long_side(s));
        const int h = content_s.height();
        const int w = content_s.width();
        state.theta_velocity.clear();
        state.x_velocity = {};

        const Image x0 = s == 0 ? init_output(content_s, style_s) : resize_to(prev_x, h, w);
        state.x = pyramid_decompose(x0, pyramid_levels_for(x0, schedule.pyramid_levels));

        LossWeights wts = weights;
        wts.alpha = schedule.alpha(s);
        const Objective objective(content_s, style_s, kps, wts, options);

        for (int it = 0; it < schedule.iters_per_scale; ++it) {
            const std::string where = " (scale " + std::to_string(s) + ", iteration " + std::to_string(it) + ")";
            auto abort = [&](const std::string& why) {
                if (!good) {
                    throw NumericalError(why + where);
                }
                throw OptimizationAborted(why + where, finish(*good, kps, ref_h, ref_w, options.tps, trace));
            };
            const Image x = pyramid_reconstruct(state.x);
            Objective::Result res;
            try {
                res = objective.evaluate(x, state.theta, mix_seed(schedule.seed, s, it));
            } catch (const NumericalError& e) {
                abort(e.what());
            }
            if (!std::isfinite(res.report.total)) {
                abort("non-finite objective");
            }
            good = state;
            TraceRecord rec{it, s, wts.alpha, res.report};
            trace.push_back(rec);
            if (hooks.on_record) {
                hooks.on_record(rec);
            }
            if (schedule.snapshot_every > 0 && it % schedule.snapshot_every == 0 && hooks.on_snapshot) {
                hooks.on_snapshot(Snapshot{s, it, x, state.theta, res.field});
            }
            const LaplacianPyramid grad_x = pyramid_reconstruct_adjoint(res.grad_output, state.x);
            try {
                step(state, grad_x, res.grad_theta, schedule.learning_rate, schedule.momentum,
                     wts.deformation_grad_scale, schedule.optimize_theta);
            } catch (const NumericalError& e) {
                abort(e.what());
            }
        }
        prev_x = pyramid_reconstruct(state.x);
    }
    return finish(state, kps, ref_h, ref_w, options.tps, std::move(trace));
}

}  // namespace dst
