#include "sketchdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace sketchdiff {

namespace {

void check_step(int t, const NoiseSchedule& sched, const char* what) {
    if (t < 1 || t > sched.T) {
        throw std::out_of_range(std::string(what) + ": step " + std::to_string(t) +
                                " outside [1, " + std::to_string(sched.T) + "]");
    }
}

}  // namespace

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be positive");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
        s.betas[i] = beta_start + (beta_end - beta_start) * frac;
        s.alphas[i] = 1.0 - s.betas[i];
        prod *= s.alphas[i];
        s.alpha_bars[i] = prod;
    }
    return s;
}

RespacedSchedule respace(const NoiseSchedule& base, int steps) {
    if (steps < 1 || steps > base.T) {
        throw std::invalid_argument("respace: steps must be in [1, " + std::to_string(base.T) + "]");
    }
    RespacedSchedule out;
    auto& ts = out.model_timesteps;
    if (steps == 1) {
        ts.push_back(base.T);
    } else {
        for (int i = 0; i < steps; ++i) {
            ts.push_back(1 + static_cast<int>(std::lround(static_cast<double>(i) * (base.T - 1) /
                                                          (steps - 1))));
        }
    }
    auto& s = out.schedule;
    s.T = steps;
    double prev = 1.0;
    for (int tau : ts) {
        const double abar = base.alpha_bar(tau);
        const double alpha = abar / prev;
        s.alphas.push_back(alpha);
        s.betas.push_back(1.0 - alpha);
        s.alpha_bars.push_back(abar);
        prev = abar;
    }
    return out;
}

void apply_realism(ControlSettings& settings, double realism, int filter_factor) {
    if (!(realism >= 0.0 && realism <= 1.0)) {
        throw std::invalid_argument("realism must be in [0, 1]");
    }
    settings.realism_stop = realism;
    settings.realism_N = filter_factor;
}

ImageBuffer q_sample(const ImageBuffer& x0, int t, const ImageBuffer& eps,
                     const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "q_sample");
    check_step(t, sched, "q_sample");
    const double a = std::sqrt(sched.alpha_bar(t));
    const double b = std::sqrt(1.0 - sched.alpha_bar(t));
    ImageBuffer out(x0.height(), x0.width(), x0.channels());
    auto xs = x0.values();
    auto es = eps.values();
    auto os = out.values();
    for (std::size_t i = 0; i < os.size(); ++i) {
        os[i] = static_cast<float>(a * xs[i] + b * es[i]);
    }
    return out;
}

ImageBuffer ddpm_step(const ImageBuffer& x_t, const ImageBuffer& eps_hat, int t,
                      const ImageBuffer& z, const NoiseSchedule& sched) {
    require_same_shape(x_t, eps_hat, "ddpm_step");
    check_step(t, sched, "ddpm_step");
    require_same_shape(x_t, z, "ddpm_step noise");
    const bool noisy = t > 1;
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
    const double eps_coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
    const double sigma = std::sqrt(sched.beta(t));
    ImageBuffer out(x_t.height(), x_t.width(), x_t.channels());
    auto xs = x_t.values();
    auto es = eps_hat.values();
    auto os = out.values();
    for (std::size_t i = 0; i < os.size(); ++i) {
        double v = inv_sqrt_alpha * (xs[i] - eps_coef * es[i]);
        if (noisy) v += sigma * z.values()[i];
        os[i] = static_cast<float>(v);
    }
    return out;
}

ImageBuffer cfg_epsilon(const Denoiser& denoiser, const ImageBuffer& x_t, int t,
                        const ConditionPair& cond, const ControlSettings& scales) {
    if (!(scales.s_sketch >= 0.0) || !(scales.s_stroke >= 0.0)) {
        throw std::invalid_argument("cfg_epsilon: guidance scales must be >= 0");
    }
    if (x_t.channels() != 3) throw ShapeError("cfg_epsilon: x_t must have 3 channels");

    const ConditionPair none{};
    const ImageBuffer uncond = denoiser.predict(assemble_input(x_t, none), t);
    require_same_shape(x_t, uncond, "cfg_epsilon prediction");
    if (scales.s_sketch == 0.0 && scales.s_stroke == 0.0) return uncond;
    if (!cond.has_sketch() && !cond.has_stroke()) return uncond;

    ConditionPair sketch_only{cond.sketch, std::nullopt};
    const ImageBuffer sketch_eps =
        cond.has_sketch() ? denoiser.predict(assemble_input(x_t, sketch_only), t) : uncond;

    std::optional<ImageBuffer> full_eps;
    // Without a stroke the full input equals the sketch-only input.
    if (scales.s_stroke != 0.0 && cond.has_stroke()) {
        full_eps = denoiser.predict(assemble_input(x_t, cond), t);
        require_same_shape(x_t, *full_eps, "cfg_epsilon prediction");
    }

    ImageBuffer out(x_t.height(), x_t.width(), 3);
    auto u = uncond.values();
    auto k = sketch_eps.values();
    auto o = out.values();
    for (std::size_t i = 0; i < o.size(); ++i) {
        double v = u[i] + scales.s_sketch * (static_cast<double>(k[i]) - u[i]);
        if (full_eps) v += scales.s_stroke * (static_cast<double>(full_eps->values()[i]) - k[i]);
        o[i] = static_cast<float>(v);
    }
    return out;
}

namespace {

using Matrix = Eigen::MatrixXd;

// n x (n*N) box-averaging operator.
Matrix box_down(int n, int N) {
    Matrix d = Matrix::Zero(n, static_cast<Eigen::Index>(n) * N);
    for (int i = 0; i < n; ++i) d.block(i, static_cast<Eigen::Index>(i) * N, 1, N).setConstant(1.0 / N);
    return d;
}

// (n*N) x n bilinear interpolation with half-pixel centers, clamped at edges.
Matrix bilinear_up(int n, int N) {
    const int m = n * N;
    Matrix u = Matrix::Zero(m, n);
    for (int i = 0; i < m; ++i) {
        const double src = std::clamp((i + 0.5) / N - 0.5, 0.0, n - 1.0);
        const int j0 = static_cast<int>(src);
        const int j1 = std::min(j0 + 1, n - 1);
        const double w = src - j0;
        u(i, j0) += 1.0 - w;
        u(i, j1) += w;
    }
    return u;
}

// Consistent upsampler P = U (D U)^{-1}, so that D P = I.
Matrix consistent_up(int n, int N) {
    const Matrix u = bilinear_up(n, N);
    const Matrix du = box_down(n, N) * u;
    return u * du.partialPivLu().inverse();
}

}  // namespace

ImageBuffer low_pass(const ImageBuffer& img, int N) {
    if (N < 1 || (N & (N - 1)) != 0) throw std::invalid_argument("low_pass: N must be a power of two");
    if (img.height() % N != 0 || img.width() % N != 0) {
        throw std::invalid_argument("low_pass: N=" + std::to_string(N) + " does not divide " +
                                    img.shape_string());
    }
    if (N == 1) return img;
    const int nh = img.height() / N;
    const int nw = img.width() / N;
    const Matrix dh = box_down(nh, N);
    const Matrix dw = box_down(nw, N);
    const Matrix ph = consistent_up(nh, N);
    const Matrix pw = consistent_up(nw, N);

    ImageBuffer out(img.height(), img.width(), img.channels());
    Matrix plane(img.height(), img.width());
    for (int c = 0; c < img.channels(); ++c) {
        for (int y = 0; y < img.height(); ++y)
            for (int x = 0; x < img.width(); ++x) plane(y, x) = img.at(y, x, c);
        const Matrix filtered = ph * (dh * plane * dw.transpose()) * pw.transpose();
        for (int y = 0; y < img.height(); ++y)
            for (int x = 0; x < img.width(); ++x) out.at(y, x, c) = static_cast<float>(filtered(y, x));
    }
    return out;
}

bool refinement_active(int t, const ControlSettings& settings, const NoiseSchedule& sched) {
    return static_cast<double>(t) > sched.T * (1.0 - settings.realism_stop);
}

ImageBuffer ilvr_refine_with_noise(const ImageBuffer& candidate, const ImageBuffer& reference,
                                   int t, const ControlSettings& settings,
                                   const NoiseSchedule& sched, const ImageBuffer& eps) {
    if (!refinement_active(t, settings, sched)) return candidate;
    require_same_shape(candidate, reference, "ilvr_refine");
    const ImageBuffer noised_ref = q_sample(reference, t, eps, sched);
    const ImageBuffer ref_low = low_pass(noised_ref, settings.realism_N);
    const ImageBuffer cand_low = low_pass(candidate, settings.realism_N);
    ImageBuffer out = candidate;
    auto o = out.values();
    auto r = ref_low.values();
    auto c = cand_low.values();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = static_cast<float>(static_cast<double>(o[i]) + r[i] - c[i]);
    }
    return out;
}

ImageBuffer ilvr_refine(const ImageBuffer& candidate, const ImageBuffer& reference, int t,
                        const ControlSettings& settings, const NoiseSchedule& sched, Rng& rng) {
    if (!refinement_active(t, settings, sched)) return candidate;
    require_same_shape(candidate, reference, "ilvr_refine");
    ImageBuffer eps(candidate.height(), candidate.width(), candidate.channels());
    rng.fill_normal(eps.values());
    return ilvr_refine_with_noise(candidate, reference, t, settings, sched, eps);
}

ImageBuffer sample_loop(const Denoiser& denoiser, int height, int width,
                        const ConditionPair& cond, const ControlSettings& settings,
                        const NoiseSchedule& sched, Rng& rng, const SamplerOptions& options) {
    if (!options.model_timesteps.empty() &&
        options.model_timesteps.size() != static_cast<std::size_t>(sched.T)) {
        throw std::invalid_argument("sample_loop: model_timesteps length must equal T");
    }
    const bool may_refine = options.enable_refinement && settings.realism_stop > 0.0;
    if (may_refine) {
        if (!settings.reference) {
            throw std::invalid_argument("sample_loop: realism refinement requires a reference image");
        }
        if (height % settings.realism_N != 0 || width % settings.realism_N != 0) {
            throw std::invalid_argument("sample_loop: realism_N must divide the image size");
        }
    }
    if (cond.sketch && (cond.sketch->height() != height || cond.sketch->width() != width)) {
        throw ShapeError("sample_loop: sketch size mismatch");
    }
    if (cond.stroke && (cond.stroke->height() != height || cond.stroke->width() != width)) {
        throw ShapeError("sample_loop: stroke size mismatch");
    }

    ImageBuffer x(height, width, 3);
    rng.fill_normal(x.values());
    ImageBuffer z(height, width, 3);
    for (int t = sched.T; t >= 1; --t) {
        const int model_t = options.model_timesteps.empty()
                                ? t
                                : options.model_timesteps[static_cast<std::size_t>(t - 1)];
        const ImageBuffer eps_hat = cfg_epsilon(denoiser, x, model_t, cond, settings);
        if (t > 1) rng.fill_normal(z.values());
        x = ddpm_step(x, eps_hat, t, z, sched);
        if (may_refine && t - 1 >= 1) {
            x = ilvr_refine(x, *settings.reference, t - 1, settings, sched, rng);
        }
        if (options.progress) options.progress(sched.T - t + 1, sched.T);
    }
    for (auto& v : x.values()) v = std::clamp(v, -1.0f, 1.0f);
    return x;
}

}  // namespace sketchdiff
