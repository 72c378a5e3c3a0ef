#include "flexdit/diffusion.hpp"

#include "flexdit/random.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace flexdit {

NoiseSchedule NoiseSchedule::linear(int steps) {
    if (steps < 1) throw ConfigError("diffusion steps must be >= 1");
    const double scale = 1000.0 / steps;
    // Very short chains would push the last beta past 1; cap it.
    const double lo = scale * 1e-4, hi = std::min(scale * 0.02, 0.999);
    Vec betas(steps);
    for (int i = 0; i < steps; ++i) betas(i) = steps == 1 ? lo : lo + (hi - lo) * i / (steps - 1);
    return from_betas(betas);
}

NoiseSchedule NoiseSchedule::from_betas(const Vec& betas) {
    NoiseSchedule s;
    s.steps = static_cast<int>(betas.size());
    if (s.steps < 1) throw ConfigError("empty beta schedule");
    for (Index i = 0; i < betas.size(); ++i) {
        if (!(betas(i) > 0.0 && betas(i) < 1.0)) throw ConfigError("betas must lie in (0, 1)");
    }
    s.beta = betas;
    s.alpha = (1.0 - betas.array()).matrix();
    s.alpha_bar.resize(s.steps);
    s.alpha_bar_prev.resize(s.steps);
    double prod = 1.0;
    for (int i = 0; i < s.steps; ++i) {
        s.alpha_bar_prev(i) = prod;
        prod *= s.alpha(i);
        s.alpha_bar(i) = prod;
    }
    s.posterior_var.resize(s.steps);
    for (int i = 0; i < s.steps; ++i) {
        s.posterior_var(i) = betas(i) * (1.0 - s.alpha_bar_prev(i)) / (1.0 - s.alpha_bar(i));
    }
    // The variance at t = 1 is zero; its log is clipped to the t = 2 value.
    s.posterior_log_var.resize(s.steps);
    for (int i = 0; i < s.steps; ++i) {
        const double v = (i == 0 && s.steps > 1) ? s.posterior_var(1) : s.posterior_var(i);
        s.posterior_log_var(i) = v > 0 ? std::log(v) : std::log(betas(i));
    }
    return s;
}

Index NoiseSchedule::index(int t) const {
    if (t < 1 || t > steps) throw ShapeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
    return t - 1;
}

Mat q_sample(const NoiseSchedule& s, const Mat& x0, std::span<const int> t, const Mat& noise) {
    if (noise.rows() != x0.rows() || noise.cols() != x0.cols()) throw ShapeError("q_sample: noise shape mismatch");
    if (static_cast<Index>(t.size()) != x0.rows()) throw ShapeError("q_sample: one timestep per row required");
    Mat out(x0.rows(), x0.cols());
    for (Index i = 0; i < x0.rows(); ++i) {
        const double ab = s.alpha_bar_at(t[static_cast<std::size_t>(i)]);
        out.row(i) = std::sqrt(ab) * x0.row(i) + std::sqrt(1.0 - ab) * noise.row(i);
    }
    return out;
}

Mat q_sample(const NoiseSchedule& s, const Mat& x0, int t, const Mat& noise) {
    std::vector<int> ts(static_cast<std::size_t>(x0.rows()), t);
    return q_sample(s, x0, ts, noise);
}

Mat q_step(const NoiseSchedule& s, const Mat& x_prev, int t, const Mat& noise) {
    const double b = s.beta_at(t);
    return std::sqrt(1.0 - b) * x_prev + std::sqrt(b) * noise;
}

Mat posterior_mean(const NoiseSchedule& s, const Mat& x_t, const Mat& eps, int t) {
    if (eps.rows() != x_t.rows() || eps.cols() != x_t.cols()) throw ShapeError("posterior_mean: shape mismatch");
    const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
    return (x_t - coef * eps) / std::sqrt(s.alpha_at(t));
}

ad::Var posterior_mean(const NoiseSchedule& s, const ad::Var& x_t, const ad::Var& eps, int t) {
    const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
    return ad::scale(ad::sub(x_t, ad::scale(eps, coef)), 1.0 / std::sqrt(s.alpha_at(t)));
}

Mat step_variance(const NoiseSchedule& s, int t, const Mat& var_logits, Index rows, Index cols) {
    const Index i = s.index(t);
    if (var_logits.size() == 0) return Mat::Constant(rows, cols, s.posterior_var(i));
    if (var_logits.rows() != rows || var_logits.cols() != cols) throw ShapeError("variance logits shape mismatch");
    const double min_log = s.posterior_log_var(i);
    const double max_log = std::log(s.beta(i));
    Mat out(rows, cols);
    for (Index k = 0; k < out.size(); ++k) {
        const double frac = (var_logits.data()[k] + 1.0) / 2.0;
        out.data()[k] = std::exp(frac * max_log + (1.0 - frac) * min_log);
    }
    return out;
}

Mat p_sample_step(const NoiseSchedule& s, const Mat& x_t, const StepPrediction& pred, int t, const Mat& z) {
    Mat mean = posterior_mean(s, x_t, pred.eps, t);
    if (t == 1) return mean;
    const Mat var = step_variance(s, t, pred.var_logits, x_t.rows(), x_t.cols());
    return mean + (var.array().sqrt() * z.array()).matrix();
}

Mat ddim_step(const NoiseSchedule& s, const Mat& x_t, const Mat& eps, int t) {
    const Index i = s.index(t);
    const double ab = s.alpha_bar(i), ab_prev = s.alpha_bar_prev(i);
    const Mat x0 = (x_t - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
}

Mat initial_noise(std::uint64_t seed, Index rows, Index dim, Index first_image) {
    Mat out(rows, dim);
    for (Index r = 0; r < rows; ++r) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(Stream::initial_noise),
                                   static_cast<std::uint64_t>(first_image + r)}));
        out.row(r) = rng.normal_matrix(1, dim);
    }
    return out;
}

Mat step_noise(std::uint64_t seed, int t, Index rows, Index dim, Index first_image) {
    Mat out(rows, dim);
    for (Index r = 0; r < rows; ++r) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(Stream::step_noise), static_cast<std::uint64_t>(t),
                                   static_cast<std::uint64_t>(first_image + r)}));
        out.row(r) = rng.normal_matrix(1, dim);
    }
    return out;
}

Mat sample_loop(const NoiseSchedule& s, const StepDenoiser& denoiser, Index rows, Index dim, std::uint64_t seed,
                const SampleOptions& opts, std::vector<TrajectoryStep>* log) {
    Mat x = initial_noise(seed, rows, dim, opts.first_image);
    for (int t = s.steps; t >= 1; --t) {
        StepPrediction pred = denoiser(x, t);
        if (pred.eps.rows() != rows || pred.eps.cols() != dim) throw ShapeError("denoiser returned a wrong shape");
        ad::ensure_finite(pred.eps, "denoiser");
        if (opts.prediction_hook) opts.prediction_hook(t, pred);
        if (opts.record && log != nullptr) log->push_back({t, x, pred.eps});
        Mat next = opts.sampler == Sampler::ddim ? ddim_step(s, x, pred.eps, t) : posterior_mean(s, x, pred.eps, t);
        if (opts.sampler == Sampler::ddpm && t > 1) {
            const Mat var = step_variance(s, t, pred.var_logits, rows, dim);
            next += (var.array().sqrt() * step_noise(seed, t, rows, dim, opts.first_image).array()).matrix();
        }
        x = std::move(next);
    }
    return x;
}

ad::Var eps_mse_loss(const ad::Var& eps_pred, const Mat& noise) {
    if (eps_pred.rows() != noise.rows() || eps_pred.cols() != noise.cols()) throw ShapeError("eps_mse_loss: shape mismatch");
    return ad::scale(ad::sum(ad::square(ad::sub(eps_pred, ad::Var::constant(noise)))),
                     1.0 / static_cast<double>(noise.rows()));
}

}  // namespace flexdit
