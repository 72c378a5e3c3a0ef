#pragma once

// Gaussian diffusion: forward corruption, the reverse DDPM step (fixed or
// learned variance), deterministic DDIM and a seeded sampling loop.
//
// Timesteps are 1-based, t in [1, T]. Images are rows of a [B, c*h*w] matrix.

#include "flexdit/autograd.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace flexdit {

struct NoiseSchedule {
    int steps = 0;
    Vec beta, alpha, alpha_bar, alpha_bar_prev, posterior_var, posterior_log_var;  // entry t-1 is step t

    // Linear beta schedule with the 1000-step endpoints 1e-4 and 0.02 rescaled
    // by 1000 / T, so the total noise is the same for any T. The last beta is
    // capped at 0.999 for very short chains.
    static NoiseSchedule linear(int steps);
    static NoiseSchedule from_betas(const Vec& betas);

    double beta_at(int t) const { return beta(index(t)); }
    double alpha_at(int t) const { return alpha(index(t)); }
    double alpha_bar_at(int t) const { return alpha_bar(index(t)); }
    Index index(int t) const;  // validates t
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, one t per row or one for all.
Mat q_sample(const NoiseSchedule& s, const Mat& x0, std::span<const int> t, const Mat& noise);
Mat q_sample(const NoiseSchedule& s, const Mat& x0, int t, const Mat& noise);
// One forward transition x_{t-1} -> x_t.
Mat q_step(const NoiseSchedule& s, const Mat& x_prev, int t, const Mat& noise);

struct StepPrediction {
    Mat eps;
    Mat var_logits;  // empty for fixed variance
};

// mu = (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)
Mat posterior_mean(const NoiseSchedule& s, const Mat& x_t, const Mat& eps, int t);
ad::Var posterior_mean(const NoiseSchedule& s, const ad::Var& x_t, const ad::Var& eps, int t);

// Per-element variance of p(x_{t-1} | x_t): the posterior variance, or the
// log-space interpolation between it and beta_t driven by var_logits in [-1, 1].
Mat step_variance(const NoiseSchedule& s, int t, const Mat& var_logits, Index rows, Index cols);

// x_{t-1} = mu + sqrt(var) z; no noise is added at t = 1.
Mat p_sample_step(const NoiseSchedule& s, const Mat& x_t, const StepPrediction& pred, int t, const Mat& z);
// Deterministic DDIM (eta = 0) step t -> t-1.
Mat ddim_step(const NoiseSchedule& s, const Mat& x_t, const Mat& eps, int t);

// Noise streams are keyed by (seed, image index[, t]) so a batch of images
// draws the same noise as the images sampled one by one.
Mat initial_noise(std::uint64_t seed, Index rows, Index dim, Index first_image = 0);
Mat step_noise(std::uint64_t seed, int t, Index rows, Index dim, Index first_image = 0);

enum class Sampler { ddpm, ddim };

struct TrajectoryStep {
    int t = 0;
    Mat x_t;
    Mat eps;
};

struct SampleOptions {
    Sampler sampler = Sampler::ddpm;
    bool record = false;
    Index first_image = 0;
    // Sees the prediction of every step before the update is formed and may
    // edit it in place. A hook that leaves it alone changes nothing.
    std::function<void(int t, StepPrediction& pred)> prediction_hook;
};

// Predicts eps (and optionally variance logits) for x_t at step t.
using StepDenoiser = std::function<StepPrediction(const Mat& x_t, int t)>;

// Runs t = T..1 from seeded Gaussian noise. `log` receives every step when
// opts.record is set.
Mat sample_loop(const NoiseSchedule& s, const StepDenoiser& denoiser, Index rows, Index dim, std::uint64_t seed,
                const SampleOptions& opts = {}, std::vector<TrajectoryStep>* log = nullptr);

// Mean over the batch of the squared L2 norm of eps_pred - noise.
ad::Var eps_mse_loss(const ad::Var& eps_pred, const Mat& noise);

}  // namespace flexdit
