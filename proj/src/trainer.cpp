#include "sketchdiff/trainer.hpp"

#include <chrono>
#include <cmath>

namespace sketchdiff {

MaskMode MaskProbabilities::pick(double u) const noexcept {
    double acc = drop_sketch;
    if (u < acc) return MaskMode::drop_sketch;
    acc += drop_stroke;
    if (u < acc) return MaskMode::drop_stroke;
    acc += drop_both;
    if (u < acc) return MaskMode::drop_both;
    acc += partial;
    if (u < acc) return MaskMode::partial;
    return MaskMode::none;
}

void TrainConfig::validate() const {
    if (stage != 1 && stage != 2) throw std::invalid_argument("stage must be 1 or 2");
    if (steps < 0) throw std::invalid_argument("steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("ema_decay must be in [0, 1)");
    const auto& p = stage2_mask_probs;
    for (double v : {p.drop_sketch, p.drop_stroke, p.drop_both, p.partial}) {
        if (!(v >= 0.0)) throw std::invalid_argument("mask probabilities must be >= 0");
    }
    if (p.total() > 1.0 + 1e-12) throw std::invalid_argument("mask probabilities must sum to <= 1");
    if (stage == 1 && p.total() != 0.0) {
        throw std::invalid_argument("stage 1 trains on complete conditions; mask probabilities must be 0");
    }
    if (!(partial_fraction >= 0.0 && partial_fraction <= 1.0)) {
        throw std::invalid_argument("partial_fraction must be in [0, 1]");
    }
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"stage", stage},
            {"steps", steps},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"ema_decay", ema_decay},
            {"stage2_mask_probs",
             {{"drop_sketch", stage2_mask_probs.drop_sketch},
              {"drop_stroke", stage2_mask_probs.drop_stroke},
              {"drop_both", stage2_mask_probs.drop_both},
              {"partial", stage2_mask_probs.partial}}},
            {"partial_fraction", partial_fraction},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.stage = j.value("stage", c.stage);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.partial_fraction = j.value("partial_fraction", c.partial_fraction);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (c.stage == 2) c.stage2_mask_probs = MaskProbabilities::stage2_defaults();
    if (j.contains("stage2_mask_probs")) {
        const auto& p = j["stage2_mask_probs"];
        auto& m = c.stage2_mask_probs;
        m.drop_sketch = p.value("drop_sketch", m.drop_sketch);
        m.drop_stroke = p.value("drop_stroke", m.drop_stroke);
        m.drop_both = p.value("drop_both", m.drop_both);
        m.partial = p.value("partial", m.partial);
    }
    return c;
}

TrainState init_train_state(const UNet& net, std::uint64_t seed) {
    TrainState s;
    s.params = net.init_parameters(seed);
    s.ema_params = s.params;
    s.adam_m = ParameterSet(net.layout());
    s.adam_v = ParameterSet(net.layout());
    s.rng = Rng(seed ^ 0x5eed0001ULL);
    s.mask_rng = Rng(seed ^ 0x5eed0002ULL);
    return s;
}

NoisedExample draw_noised_example(const TrainingTriplet& triplet, const NoiseSchedule& sched, Rng& rng) {
    NoisedExample ex;
    ex.t = static_cast<int>(rng.uniform_int(1, sched.T));
    ex.eps = ImageBuffer(triplet.image.height(), triplet.image.width(), 3);
    rng.fill_normal(ex.eps.values());
    const ImageBuffer x_t = q_sample(triplet.image, ex.t, ex.eps, sched);
    ex.x7 = assemble_input(x_t, triplet.conditions());
    return ex;
}

namespace {

void check_batch(std::span<const TrainingTriplet> batch) {
    if (batch.empty()) throw std::invalid_argument("training batch is empty");
    for (const auto& t : batch) {
        if (!t.image.same_shape(batch[0].image)) {
            throw ShapeError("training batch mixes image shapes: " + t.image.shape_string() + " vs " +
                             batch[0].image.shape_string());
        }
    }
}

}  // namespace

double training_loss(const Denoiser& denoiser, std::span<const TrainingTriplet> batch,
                     const NoiseSchedule& sched, Rng& rng) {
    check_batch(batch);
    double total = 0.0;
    for (const auto& triplet : batch) {
        const NoisedExample ex = draw_noised_example(triplet, sched, rng);
        const ImageBuffer pred = denoiser.predict(ex.x7, ex.t);
        require_same_shape(pred, ex.eps, "training_loss");
        double sum = 0.0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double d = static_cast<double>(pred.values()[i]) - ex.eps.values()[i];
            sum += d * d;
        }
        total += sum / static_cast<double>(pred.size());
    }
    return total / static_cast<double>(batch.size());
}

template <typename T>
T network_training_loss(const UNet& net, const BasicParameterSet<T>& params,
                        std::span<const TrainingTriplet> batch, const NoiseSchedule& sched, Rng& rng,
                        std::span<T> grad) {
    check_batch(batch);
    const T weight = T(1) / static_cast<T>(batch.size());
    std::vector<T> scratch;
    if (grad.empty()) {
        scratch.assign(params.flat().size(), T{});
        grad = scratch;
    }
    T total{};
    for (const auto& triplet : batch) {
        const NoisedExample ex = draw_noised_example(triplet, sched, rng);
        total += net.mse_and_grad(params, ex.x7, ex.t, ex.eps, weight, grad);
    }
    return total * weight;
}

template float network_training_loss<float>(const UNet&, const BasicParameterSet<float>&,
                                            std::span<const TrainingTriplet>, const NoiseSchedule&, Rng&,
                                            std::span<float>);
template double network_training_loss<double>(const UNet&, const BasicParameterSet<double>&,
                                              std::span<const TrainingTriplet>, const NoiseSchedule&, Rng&,
                                              std::span<double>);

namespace {

nlohmann::json train_meta(const TrainState& s) {
    return {{"step", s.step}, {"stage", s.stage}, {"rng", s.rng.serialize()}, {"mask_rng", s.mask_rng.serialize()}};
}

}  // namespace

void save_checkpoint(const TrainState& state, const ModelSpec& spec, const std::filesystem::path& path) {
    CheckpointContents c;
    c.spec = spec;
    c.params = state.params;
    c.ema = state.ema_params;
    c.adam_m = state.adam_m;
    c.adam_v = state.adam_v;
    c.train_meta = train_meta(state);
    write_checkpoint(path, c);
}

TrainState load_checkpoint(const std::filesystem::path& path, ModelSpec* spec_out, const NetworkConfig* expected) {
    CheckpointContents c = read_checkpoint(path, expected);
    if (!c.ema || !c.adam_m || !c.adam_v || c.train_meta.is_null()) {
        throw CheckpointError(CheckpointError::Kind::malformed, path.string() + " holds no trainer state");
    }
    TrainState s;
    try {
        s.step = c.train_meta.at("step").get<std::int64_t>();
        s.stage = c.train_meta.at("stage").get<int>();
        s.rng = Rng::deserialize(c.train_meta.at("rng").get<std::string>());
        s.mask_rng = Rng::deserialize(c.train_meta.at("mask_rng").get<std::string>());
    } catch (const std::exception& e) {
        throw CheckpointError(CheckpointError::Kind::malformed, std::string("train_meta: ") + e.what());
    }
    s.params = std::move(c.params);
    s.ema_params = std::move(*c.ema);
    s.adam_m = std::move(*c.adam_m);
    s.adam_v = std::move(*c.adam_v);
    if (spec_out) *spec_out = c.spec;
    return s;
}

TrainState train_stage(TrainState state, const TrainConfig& cfg, std::span<const TrainingTriplet> data,
                       const NoiseSchedule& sched, const UNet& net, const TrainHooks& hooks,
                       const ModelSpec* spec) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train_stage: no training data");
    if (cfg.stage == 2 && (state.stage < 1 || state.step == 0)) {
        throw std::invalid_argument("stage 2 must start from a stage-1 checkpoint");
    }
    ModelSpec fallback;
    if (!spec) {
        fallback.network = net.config();
        fallback.T = sched.T;
        fallback.height = data[0].image.height();
        fallback.width = data[0].image.width();
        spec = &fallback;
    }

    const AdamSettings adam;
    const auto start = std::chrono::steady_clock::now();
    const std::size_t n = state.params.flat().size();
    std::vector<float> grad(n);
    std::vector<TrainingTriplet> batch;
    double smooth = 0.0;
    double smooth_weight = 0.0;
    state.stage = cfg.stage;

    for (int i = 0; i < cfg.steps; ++i) {
        batch.clear();
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto idx = static_cast<std::size_t>(state.rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
            if (cfg.stage == 2) {
                MaskSpec m;
                m.mode = cfg.stage2_mask_probs.pick(state.mask_rng.uniform());
                m.partial_fraction = cfg.partial_fraction;
                m.rng_seed = state.mask_rng.next_u64();
                batch.push_back(mask_condition(data[idx], m));
            } else {
                batch.push_back(data[idx]);
            }
        }

        std::fill(grad.begin(), grad.end(), 0.0f);
        const float loss = network_training_loss<float>(net, state.params, batch, sched, state.rng, grad);
        const std::int64_t step = state.step + 1;
        bool finite = std::isfinite(loss);
        for (std::size_t k = 0; finite && k < n; ++k) finite = std::isfinite(grad[k]);
        if (!finite) {
            const auto dump = hooks.dump_dir / ("diverged_step" + std::to_string(step) + ".ckpt");
            save_checkpoint(state, *spec, dump);
            throw TrainingDiverged(step, dump);
        }

        const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(step));
        auto p = state.params.flat();
        auto m = state.adam_m.flat();
        auto v = state.adam_v.flat();
        auto e = state.ema_params.flat();
        for (std::size_t k = 0; k < n; ++k) {
            const double g = grad[k];
            m[k] = static_cast<float>(adam.beta1 * m[k] + (1.0 - adam.beta1) * g);
            v[k] = static_cast<float>(adam.beta2 * v[k] + (1.0 - adam.beta2) * g * g);
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p[k] = static_cast<float>(p[k] - cfg.learning_rate * mhat / (std::sqrt(vhat) + adam.epsilon));
            e[k] = cfg.ema_decay == 0.0
                       ? p[k]
                       : static_cast<float>(cfg.ema_decay * e[k] + (1.0 - cfg.ema_decay) * p[k]);
        }
        state.step = step;

        smooth = 0.98 * smooth + 0.02 * loss;
        smooth_weight = 0.98 * smooth_weight + 0.02;
        if (hooks.on_step) {
            StepLog log;
            log.step = step;
            log.loss = loss;
            log.ema_loss = smooth / smooth_weight;
            log.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            hooks.on_step(log);
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && hooks.on_checkpoint) {
            hooks.on_checkpoint(state);
        }
    }
    return state;
}

}  // namespace sketchdiff
