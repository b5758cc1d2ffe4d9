#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dst/features.hpp"
#include "dst/image_io.hpp"
#include "dst/keypoints.hpp"
#include "dst/optimizer.hpp"
#include "dst/overlay.hpp"
#include "dst/pipeline.hpp"
#include "dst/tps.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitKeypoints = 3;
constexpr int kExitNumerical = 4;

constexpr int kSnapshotPeriod = 50;

struct Paths {
    std::string content;
    std::string style;
    std::string keypoints;
    std::string features_content;
    std::string features_style;
    std::string field;
    std::string out;
    std::string save_field;
};

struct TransferArgs {
    std::string family = "selfsim_remd";
    std::string regime = "medium";
    std::optional<double> alpha;
    std::optional<double> beta;
    std::optional<double> gamma;
    dst::ScheduleConfig schedule;
    bool debug_snapshots = false;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw dst::IoError("cannot write " + path.string());
    }
    f << text;
}

std::optional<dst::FeaturePyramid> load_optional(const std::string& path) {
    if (path.empty()) {
        return std::nullopt;
    }
    return dst::load_features(path);
}

dst::KeypointSet rescale_pairs_for_overlay(const std::vector<dst::Correspondence>& pairs, const dst::Image& content,
                                           const dst::Image& style) {
    dst::KeypointSet kps;
    for (const auto& p : pairs) {
        kps.source.push_back(p.src);
        kps.target.push_back(
            dst::rescale_point(p.dst, style.height(), style.width(), content.height(), content.width()));
        kps.activations.push_back(p.activation);
    }
    return kps;
}

dst::KeypointSet resolve_keypoints(const Paths& paths, const dst::Image& content, const dst::Image& style,
                                   const fs::path& out_dir) {
    if (!paths.keypoints.empty()) {
        return dst::prepare_keypoints(dst::load_keypoints(paths.keypoints));
    }
    const auto cf = load_optional(paths.features_content);
    const auto sf = load_optional(paths.features_style);
    const auto r = dst::auto_match(content, style, cf ? &*cf : nullptr, sf ? &*sf : nullptr);
    dst::save_keypoints(out_dir / "keypoints.json", r.cleaned);
    dst::save_image(out_dir / "overlay_matches.png", dst::render_overlay(content, rescale_pairs_for_overlay(r.candidates, content, style)));
    dst::save_image(out_dir / "overlay_selected.png", dst::render_overlay(content, rescale_pairs_for_overlay(r.selected, content, style)));
    dst::save_image(out_dir / "overlay_aligned.png", dst::render_overlay(content, r.aligned));
    dst::save_image(out_dir / "overlay_cleaned.png", dst::render_overlay(content, r.cleaned));
    return r.cleaned;
}

int cmd_match(const Paths& paths) {
    const fs::path out_dir = paths.out;
    fs::create_directories(out_dir);
    const auto content = dst::load_image(paths.content);
    const auto style = dst::load_image(paths.style);
    Paths p = paths;
    p.keypoints.clear();
    const auto kps = resolve_keypoints(p, content, style, out_dir);
    std::cout << "wrote " << kps.size() << " keypoint pairs to " << (out_dir / "keypoints.json").string() << "\n";
    return kExitOk;
}

int cmd_warp(const Paths& paths) {
    if (paths.keypoints.empty() == paths.field.empty()) {
        throw dst::InvalidArgument("warp: give exactly one of --keypoints or --field");
    }
    const auto img = dst::load_image(paths.content);
    dst::WarpField field;
    dst::Image out;
    if (!paths.keypoints.empty()) {
        const auto kps = dst::prepare_keypoints(dst::load_keypoints(paths.keypoints));
        out = dst::naive_warp(img, kps, &field);
    } else {
        field = dst::load_field(paths.field);
        out = dst::warp(img, field);
    }
    dst::save_image(paths.out, out);
    if (!paths.save_field.empty()) {
        dst::save_field(paths.save_field, field);
    }
    return kExitOk;
}

json schedule_json(const dst::ScheduleConfig& s) {
    return {{"n_scales", s.n_scales},
            {"iters_per_scale", s.iters_per_scale},
            {"learning_rate", s.learning_rate},
            {"initial_long_side", s.initial_long_side},
            {"alpha_initial", s.alpha_initial},
            {"alpha_halving", s.alpha_halving},
            {"seed", s.seed},
            {"momentum", s.momentum},
            {"pyramid_levels", s.pyramid_levels},
            {"optimize_theta", s.optimize_theta},
            {"n_samples", s.n_samples},
            {"feature_levels", s.feature_levels}};
}

json report_json(const dst::TraceRecord& r) {
    return {{"iter", r.iter},
            {"scale", r.scale},
            {"alpha", r.alpha},
            {"content", r.report.content},
            {"style_unwarped", r.report.style_unwarped},
            {"style_warped", r.report.style_warped},
            {"match", r.report.match},
            {"tv", r.report.tv},
            {"total", r.report.total}};
}

json theta_json(std::span<const dst::Vec2> theta) {
    json a = json::array();
    for (const auto& t : theta) {
        a.push_back({t.x, t.y});
    }
    return a;
}

void write_result(const fs::path& out_dir, const dst::RunResult& r, int content_h, int content_w) {
    dst::save_image(out_dir / "output.png", r.output);
    dst::save_image(out_dir / "stylized.png", r.stylized);
    dst::save_field(out_dir / "field.dstw", r.field);
    dst::save_keypoints(out_dir / "keypoints_final.json", r.keypoints);
    write_text(out_dir / "theta.json", json{{"frame", "content"}, {"theta", theta_json(r.theta)}}.dump() + "\n");
    // sources against where they actually landed, at output resolution
    dst::KeypointSet moved = r.keypoints;
    for (std::size_t i = 0; i < moved.size(); ++i) {
        moved.target[i] = moved.source[i] + r.theta[i];
    }
    moved = dst::rescale_keypoints(moved, content_h, content_w, r.output.height(), r.output.width());
    dst::save_image(out_dir / "overlay_output.png", dst::render_overlay(r.output, moved));
    dst::save_image(out_dir / "overlay_stylized.png",
                    dst::render_overlay(r.stylized, dst::rescale_keypoints(r.keypoints, content_h, content_w,
                                                                           r.stylized.height(), r.stylized.width())));
}

int cmd_transfer(const Paths& paths, TransferArgs args) {
    const auto family = dst::parse_family(args.family);
    if (!family) {
        throw dst::InvalidArgument("unknown --family '" + args.family + "' (gram, selfsim_remd)");
    }
    auto regime = dst::parse_regime(args.regime);
    if (!regime) {
        throw dst::InvalidArgument("unknown --regime '" + args.regime + "' (low, medium, high, custom)");
    }
    dst::LossWeights weights = dst::LossWeights::defaults(*family);
    if (*regime != dst::Regime::custom) {
        const auto preset = dst::regime_preset(*family, *regime);
        weights.beta = preset.beta;
        weights.gamma = preset.gamma;
    }
    if (args.beta || args.gamma) {
        regime = dst::Regime::custom;
    }
    if (args.beta) {
        weights.beta = *args.beta;
    }
    if (args.gamma) {
        weights.gamma = *args.gamma;
    }
    if (args.alpha) {
        args.schedule.alpha_initial = *args.alpha;
    }
    // Without the keypoint term nothing anchors the deformation.
    args.schedule.optimize_theta = weights.beta > 0.0;
    if (args.debug_snapshots) {
        args.schedule.snapshot_every = kSnapshotPeriod;
    }
    args.schedule.validate();
    weights.validate();

    const fs::path out_dir = paths.out;
    fs::create_directories(out_dir);
    const auto content = dst::load_image(paths.content);
    const auto style = dst::load_image(paths.style);
    const auto kps = resolve_keypoints(paths, content, style, out_dir);
    if (kps.size() < 2) {
        throw dst::InsufficientKeypoints("keypoint file holds " + std::to_string(kps.size()) +
                                         " pair(s); at least 2 are needed");
    }

    json config = {{"content", paths.content},
                   {"style", paths.style},
                   {"keypoints", paths.keypoints.empty() ? json(nullptr) : json(paths.keypoints)},
                   {"features_content", paths.features_content.empty() ? json(nullptr) : json(paths.features_content)},
                   {"features_style", paths.features_style.empty() ? json(nullptr) : json(paths.features_style)},
                   {"keypoint_pairs", kps.size()},
                   {"family", dst::to_string(*family)},
                   {"regime", dst::to_string(*regime)},
                   {"beta", weights.beta},
                   {"gamma", weights.gamma},
                   {"style", weights.style},
                   {"style_terms",
                    {{"remd", weights.style_terms.remd},
                     {"moment", weights.style_terms.moment},
                     {"color", weights.style_terms.color}}},
                   {"content_scale", weights.content_scale},
                   {"style_scale", weights.style_scale},
                   {"deformation_grad_scale", weights.deformation_grad_scale},
                   {"schedule", schedule_json(args.schedule)},
                   {"debug_snapshots", args.debug_snapshots}};
    write_text(out_dir / "config.json", config.dump(2) + "\n");

    std::ofstream trace(out_dir / "loss_trace.jsonl", std::ios::binary);
    if (!trace) {
        throw dst::IoError("cannot write " + (out_dir / "loss_trace.jsonl").string());
    }
    trace << json{{"config", config}}.dump() << "\n";

    dst::RunHooks hooks;
    hooks.on_record = [&](const dst::TraceRecord& r) { trace << report_json(r).dump() << "\n"; };
    if (args.debug_snapshots) {
        fs::create_directories(out_dir / "snapshots");
        hooks.on_snapshot = [&](const dst::Snapshot& s) {
            const std::string stem = "s" + std::to_string(s.scale) + "_i" + std::to_string(s.iter);
            dst::save_image(out_dir / "snapshots" / (stem + "_stylized.png"), s.stylized);
            dst::save_field(out_dir / "snapshots" / (stem + "_field.dstw"), s.field);
            write_text(out_dir / "snapshots" / (stem + "_theta.json"), theta_json(s.theta).dump() + "\n");
        };
    }

    try {
        const auto result = dst::run(content, style, kps, weights, args.schedule, hooks);
        write_result(out_dir, result, content.height(), content.width());
    } catch (const dst::OptimizationAborted& e) {
        trace.flush();
        write_result(out_dir, e.last_good(), content.height(), content.width());
        throw;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deformable one-shot style transfer"};
    app.require_subcommand(1);
    Paths paths;
    TransferArgs targs;

    auto* match = app.add_subcommand("match", "Extract and clean keypoint correspondences");
    match->add_option("--content", paths.content, "Content image")->required()->check(CLI::ExistingFile);
    match->add_option("--style", paths.style, "Style image")->required()->check(CLI::ExistingFile);
    match->add_option("--features-content", paths.features_content, "DSTF features of the content image")
        ->check(CLI::ExistingFile);
    match->add_option("--features-style", paths.features_style, "DSTF features of the style image")
        ->check(CLI::ExistingFile);
    match->add_option("--out", paths.out, "Output directory")->required();

    auto* warp = app.add_subcommand("warp", "Warp an image by a keypoint file or a saved field");
    warp->add_option("--content", paths.content, "Image to warp")->required()->check(CLI::ExistingFile);
    warp->add_option("--keypoints", paths.keypoints, "Keypoint JSON file")->check(CLI::ExistingFile);
    warp->add_option("--field", paths.field, "DSTW warp field to apply instead")->check(CLI::ExistingFile);
    warp->add_flag("--naive", "Move source points straight onto targets (the only keypoint mode)");
    warp->add_option("--out", paths.out, "Output image")->required();
    warp->add_option("--save-field", paths.save_field, "Also write the DSTW warp field");

    auto* transfer = app.add_subcommand("transfer", "Run the full deformable style transfer");
    transfer->add_option("--content", paths.content, "Content image")->required()->check(CLI::ExistingFile);
    transfer->add_option("--style", paths.style, "Style image")->required()->check(CLI::ExistingFile);
    transfer->add_option("--keypoints", paths.keypoints, "Keypoint JSON file (skips automatic matching)")
        ->check(CLI::ExistingFile);
    transfer->add_option("--features-content", paths.features_content, "DSTF features of the content image")
        ->check(CLI::ExistingFile);
    transfer->add_option("--features-style", paths.features_style, "DSTF features of the style image")
        ->check(CLI::ExistingFile);
    transfer->add_option("--family", targs.family, "Loss family: gram or selfsim_remd")->capture_default_str();
    transfer->add_option("--regime", targs.regime, "low, medium, high or custom")->capture_default_str();
    transfer->add_option("--alpha", targs.alpha, "Initial content weight");
    transfer->add_option("--beta", targs.beta, "Keypoint deformation weight (overrides the regime)");
    transfer->add_option("--gamma", targs.gamma, "Warp TV weight (overrides the regime)");
    transfer->add_option("--scales", targs.schedule.n_scales, "Number of scales")->capture_default_str();
    transfer->add_option("--iters", targs.schedule.iters_per_scale, "Iterations per scale")->capture_default_str();
    transfer->add_option("--lr", targs.schedule.learning_rate, "Learning rate")->capture_default_str();
    transfer->add_option("--momentum", targs.schedule.momentum, "SGD momentum")->capture_default_str();
    transfer->add_option("--long-side", targs.schedule.initial_long_side, "Long side at the first scale")
        ->capture_default_str();
    transfer->add_option("--samples", targs.schedule.n_samples, "Feature samples per evaluation")
        ->capture_default_str();
    transfer->add_option("--seed", targs.schedule.seed, "Random seed")->capture_default_str();
    transfer->add_option("--out", paths.out, "Output directory")->required();
    transfer->add_flag("--debug-snapshots", targs.debug_snapshots, "Write X, theta and the field every 50 iterations");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*match) {
            return cmd_match(paths);
        }
        if (*warp) {
            return cmd_warp(paths);
        }
        return cmd_transfer(paths, targs);
    } catch (const dst::InsufficientKeypoints& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitKeypoints;
    } catch (const dst::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}
