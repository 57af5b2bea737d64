#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchdiff/checkpoint.hpp"
#include "sketchdiff/conditions.hpp"
#include "sketchdiff/diffusion.hpp"
#include "sketchdiff/network.hpp"
#include "sketchdiff/rng.hpp"

namespace sketchdiff {

struct MaskProbabilities {
    double drop_sketch = 0.0;
    double drop_stroke = 0.0;
    double drop_both = 0.0;
    double partial = 0.0;

    double total() const noexcept { return drop_sketch + drop_stroke + drop_both + partial; }
    /// Maps a uniform draw in [0, 1) to a mode; the remainder is MaskMode::none.
    MaskMode pick(double u) const noexcept;

    static MaskProbabilities stage2_defaults() { return {0.1, 0.1, 0.1, 0.2}; }
};

struct TrainConfig {
    int stage = 1;
    int steps = 1000;
    int batch_size = 8;
    double learning_rate = 2e-4;
    double ema_decay = 0.999;
    MaskProbabilities stage2_mask_probs;
    double partial_fraction = 0.5;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // 0 disables periodic checkpoints

    void validate() const;
    nlohmann::json to_json() const;
    /// Missing fields keep their defaults; stage 2 defaults its mask
    /// probabilities to MaskProbabilities::stage2_defaults().
    static TrainConfig from_json(const nlohmann::json& j);
};

struct AdamSettings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct TrainState {
    ParameterSet params;
    ParameterSet ema_params;
    ParameterSet adam_m;
    ParameterSet adam_v;
    std::int64_t step = 0;
    int stage = 0;  // last stage trained; 0 = fresh
    Rng rng;        // batches, timesteps, noise
    Rng mask_rng;   // stage-2 mask draws
};

/// Fresh state: seeded initialization, EMA equal to the weights, zero moments.
TrainState init_train_state(const UNet& net, std::uint64_t seed);

/// One noised training example.
struct NoisedExample {
    int t = 1;
    ImageBuffer eps;
    ImageBuffer x7;
};

/// Draws t ~ U{1..T} then eps ~ N(0, I) from `rng` and assembles the
/// network input for the noised image.
NoisedExample draw_noised_example(const TrainingTriplet& triplet, const NoiseSchedule& sched, Rng& rng);

/// Mean over batch and pixels of (prediction - eps)^2, for any predictor.
double training_loss(const Denoiser& denoiser, std::span<const TrainingTriplet> batch,
                     const NoiseSchedule& sched, Rng& rng);

/// Same draws and loss as training_loss, evaluated with `net` at precision T.
/// When `grad` is non-empty the parameter gradient is accumulated into it.
template <typename T>
T network_training_loss(const UNet& net, const BasicParameterSet<T>& params,
                        std::span<const TrainingTriplet> batch, const NoiseSchedule& sched, Rng& rng,
                        std::span<T> grad = {});

struct StepLog {
    std::int64_t step = 0;
    double loss = 0.0;
    double ema_loss = 0.0;  // bias-corrected exponential smoothing, decay 0.98
    double wallclock_s = 0.0;

    nlohmann::json to_json() const {
        return {{"step", step}, {"loss", loss}, {"ema_loss", ema_loss}, {"wallclock_s", wallclock_s}};
    }
};

struct TrainHooks {
    std::function<void(const StepLog&)> on_step;
    std::function<void(const TrainState&)> on_checkpoint;
    /// Directory for the dump written when the loss becomes non-finite.
    std::filesystem::path dump_dir = ".";
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(std::int64_t step, std::filesystem::path dump)
        : std::runtime_error("non-finite loss at step " + std::to_string(step) + "; state dumped to " +
                             dump.string()),
          step_(step),
          dump_(std::move(dump)) {}
    std::int64_t step() const noexcept { return step_; }
    const std::filesystem::path& dump_path() const noexcept { return dump_; }

private:
    std::int64_t step_;
    std::filesystem::path dump_;
};

/// Runs cfg.steps optimizer steps on `data` and returns the advanced state.
///
/// Batches are drawn uniformly with replacement. In stage 2 each example is
/// masked with a mode drawn from cfg.stage2_mask_probs using the separate
/// mask generator, so zero probabilities reproduce stage 1 exactly.
TrainState train_stage(TrainState state, const TrainConfig& cfg, std::span<const TrainingTriplet> data,
                       const NoiseSchedule& sched, const UNet& net, const TrainHooks& hooks = {},
                       const ModelSpec* spec = nullptr);

void save_checkpoint(const TrainState& state, const ModelSpec& spec, const std::filesystem::path& path);
/// Restores a full trainer state. `expected` as in read_checkpoint.
TrainState load_checkpoint(const std::filesystem::path& path, ModelSpec* spec_out = nullptr,
                           const NetworkConfig* expected = nullptr);

}  // namespace sketchdiff
