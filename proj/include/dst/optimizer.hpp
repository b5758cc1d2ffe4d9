#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dst/image.hpp"
#include "dst/keypoints.hpp"
#include "dst/losses.hpp"
#include "dst/pyramid.hpp"
#include "dst/tps.hpp"

namespace dst {

struct ScheduleConfig {
    int n_scales = 3;
    int iters_per_scale = 350;
    double learning_rate = 0.2;
    int initial_long_side = 64;
    double alpha_initial = 32.0;
    bool alpha_halving = true;
    std::uint64_t seed = 0;
    /// 0 gives plain SGD.
    double momentum = 0.0;
    /// Upper bound on Laplacian levels used to parameterise X.
    int pyramid_levels = 5;
    bool optimize_theta = true;
    int n_samples = 1024;
    int feature_levels = 3;
    /// Snapshot period in iterations; 0 disables snapshots.
    int snapshot_every = 0;

    void validate() const;
    /// Working long side at scale s: initial_long_side * 2^s.
    int long_side(int scale) const;
    /// Content weight at scale s.
    double alpha(int scale) const;
};

enum class Regime { low, medium, high, custom };

std::optional<Regime> parse_regime(const std::string& name);
std::string to_string(Regime regime);

struct RegimePreset {
    Regime regime;
    double beta;
    double gamma;
};

/// Published (beta, gamma) settings per loss family. Throws for custom.
RegimePreset regime_preset(LossFamily family, Regime regime);

/// Optimisation variables: X as Laplacian coefficients, theta in the
/// full-resolution content frame, plus momentum buffers.
struct OptimizerState {
    LaplacianPyramid x;
    ThetaParams theta;
    LaplacianPyramid x_velocity;
    std::vector<Vec2> theta_velocity;
};

/// Initial output at the coarsest scale: the finest Laplacian band of the
/// content image with its mean removed, plus the style image's mean colour.
Image init_output(const Image& content, const Image& style);

/// params -= lr * v with v = momentum * v + grad (v == grad when momentum
/// is 0). Throws NumericalError on a non-finite gradient.
void sgd_update(std::span<double> params, std::span<const double> grads, double learning_rate,
                std::span<double> velocity = {}, double momentum = 0.0);

/// One descent step on both parameter groups. theta gradients are
/// multiplied by theta_grad_scale first.
void step(OptimizerState& state, const LaplacianPyramid& grad_x, std::span<const Vec2> grad_theta,
          double learning_rate, double momentum = 0.0, double theta_grad_scale = 1.0, bool update_theta = true);

struct TraceRecord {
    int iter = 0;
    int scale = 0;
    double alpha = 0.0;
    LossReport report;
};

struct RunResult {
    /// W(X, theta) at the final working resolution.
    Image output;
    /// X, the unwarped stylised image.
    Image stylized;
    WarpField field;
    /// Keypoints and theta in the full-resolution content frame.
    KeypointSet keypoints;
    ThetaParams theta;
    std::vector<TraceRecord> trace;
};

struct Snapshot {
    int scale;
    int iter;
    const Image& stylized;
    std::span<const Vec2> theta;
    const WarpField& field;
};

struct RunHooks {
    std::function<void(const TraceRecord&)> on_record;
    std::function<void(const Snapshot&)> on_snapshot;
};

/// Raised when the objective stops being finite or a solve fails; carries
/// the state of the last cleanly evaluated iteration.
class OptimizationAborted : public NumericalError {
  public:
    OptimizationAborted(const std::string& what, RunResult last_good)
        : NumericalError(what), last_good_(std::move(last_good)) {}
    const RunResult& last_good() const { return last_good_; }

  private:
    RunResult last_good_;
};

/// Multi-scale joint optimisation of X and theta. `kps` is given in the
/// full-resolution content frame; every scale resizes both images to
/// schedule.long_side(s), runs iters_per_scale steps and hands X on
/// upsampled bilinearly. theta keeps the full-resolution frame, so the
/// traced match term is comparable across scales.
RunResult run(const Image& content, const Image& style, const KeypointSet& kps, const LossWeights& weights,
              const ScheduleConfig& schedule, const RunHooks& hooks = {}, const ObjectiveOptions& objective = {});

}  // namespace dst
