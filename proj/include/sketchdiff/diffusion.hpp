#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "sketchdiff/condition_pair.hpp"
#include "sketchdiff/image.hpp"
#include "sketchdiff/rng.hpp"

namespace sketchdiff {

/// Precomputed linear-beta tables for T steps. Step indices are 1-based.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
    double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
    double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t - 1)); }
};

NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

/// A schedule over a subset of the training timesteps, plus the training
/// timestep each respaced step corresponds to (what the network is fed).
struct RespacedSchedule {
    NoiseSchedule schedule;
    std::vector<int> model_timesteps;
};

/// Keeps `steps` evenly spaced timesteps of `base` (always including T) and
/// recomputes betas so the cumulative products match the base schedule.
RespacedSchedule respace(const NoiseSchedule& base, int steps);

/// Guidance scales and ILVR realism refinement parameters.
struct ControlSettings {
    double s_sketch = 1.0;
    double s_stroke = 1.0;
    int realism_N = 8;
    double realism_stop = 0.0;
    std::optional<ImageBuffer> reference;
};

/// Maps the single user-facing realism value r in [0, 1] to settings. r is
/// the fraction of the trajectory (from t = T down) that tracks the reference.
void apply_realism(ControlSettings& settings, double realism, int filter_factor = 8);

/// Noise predictor over assembled 7-channel inputs.
class Denoiser {
public:
    virtual ~Denoiser() = default;
    /// `t` is the timestep the predictor was trained on. Returns (h,w,3).
    virtual ImageBuffer predict(const ImageBuffer& x7, int t) const = 0;
};

/// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
ImageBuffer q_sample(const ImageBuffer& x0, int t, const ImageBuffer& eps,
                     const NoiseSchedule& sched);

/// Ancestral update with sigma_t^2 = beta_t. `z` must match x_t in shape and is ignored when t == 1.
ImageBuffer ddpm_step(const ImageBuffer& x_t, const ImageBuffer& eps_hat, int t,
                      const ImageBuffer& z, const NoiseSchedule& sched);

/// Two-scale classifier-free guidance composed uncond -> +sketch -> +stroke.
///
///   eps = e(0,0) + s_sketch (e(k,0) - e(0,0)) + s_stroke (e(k,s) - e(k,0))
///
/// When the sketch is absent e(k,0) is e(0,0). Evaluations are skipped when
/// a scale makes them irrelevant (s_stroke == 0, or both scales 0).
ImageBuffer cfg_epsilon(const Denoiser& denoiser, const ImageBuffer& x_t, int t,
                        const ConditionPair& cond, const ControlSettings& scales);

/// Box-average downsample by N, then bilinear upsample back.
///
/// The upsampler interpolates pre-filtered node values so that box-averaging
/// its output returns the low-resolution image exactly. This makes the
/// filter an idempotent projection that preserves the image mean.
ImageBuffer low_pass(const ImageBuffer& img, int N);

/// True when the refinement window covers step t.
bool refinement_active(int t, const ControlSettings& settings, const NoiseSchedule& sched);

/// ILVR with a caller-supplied reference noise draw.
ImageBuffer ilvr_refine_with_noise(const ImageBuffer& candidate, const ImageBuffer& reference,
                                   int t, const ControlSettings& settings,
                                   const NoiseSchedule& sched, const ImageBuffer& eps);

/// candidate + phi_N(q_sample(reference, t)) - phi_N(candidate) inside the
/// refinement window, otherwise the candidate unchanged. Draws noise from
/// `rng` only when the window is active.
ImageBuffer ilvr_refine(const ImageBuffer& candidate, const ImageBuffer& reference, int t,
                        const ControlSettings& settings, const NoiseSchedule& sched, Rng& rng);

using ProgressFn = std::function<void(int step, int total)>;

struct SamplerOptions {
    /// When false the refinement stage is compiled out of the loop entirely.
    bool enable_refinement = true;
    /// Network timestep per schedule step; empty means identity.
    std::vector<int> model_timesteps;
    ProgressFn progress;
};

/// Full reverse process from x_T ~ N(0, I). Output clipped to [-1, 1].
ImageBuffer sample_loop(const Denoiser& denoiser, int height, int width,
                        const ConditionPair& cond, const ControlSettings& settings,
                        const NoiseSchedule& sched, Rng& rng, const SamplerOptions& options = {});

}  // namespace sketchdiff
