#pragma once

// Pretraining and the two flexification regimes: shared-parameter training
// with random patch sizes plus the bootstrapped MMD loss, and LoRA
// distillation from the frozen powerful model.

#include "flexdit/backbone.hpp"
#include "flexdit/diffusion.hpp"
#include "flexdit/optim.hpp"
#include "flexdit/random.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace flexdit {

// Batch mean of ||powerful - weak||_2 (the norm, not its square). The
// powerful prediction must be a constant: passing a tensor that requires a
// gradient is an error.
ad::Var distill_loss(const ad::Var& powerful, const ad::Var& weak);

struct MmdOptions {
    bool unbiased = true;
    // Absolute RBF bandwidths; empty means median heuristic times `factors`.
    std::vector<double> bandwidths;
    std::vector<double> factors{0.5, 1.0, 2.0};
};

// Median of the pairwise distances of the pooled sample (distinct pairs).
double median_pairwise_distance(const Mat& x, const Mat& y);
std::vector<double> mmd_bandwidths(const Mat& x, const Mat& y, const MmdOptions& opts);

// Squared MMD with the kernel k(a, b) = mean_s exp(-||a - b||^2 / (2 s^2)).
ad::Var mmd2(const ad::Var& xs, const ad::Var& ys, const MmdOptions& opts = {});
double mmd2(const Mat& xs, const Mat& ys, const MmdOptions& opts = {});

// Stages in execution order: stage 0 runs at the noisiest steps. With
// target step t and stage lengths s_i, stage i denoises every step in
// (t + sum_{j>i} s_j, t + sum_{j>=i} s_j].
struct BootstrapSchedule {
    std::vector<int> patch_sizes;
    std::vector<int> steps;

    int length() const;
    void validate() const;
    std::pair<int, int> interval(std::size_t stage, int t_target) const;
    int patch_size_at(int t, int t_target) const;
    // (t, p) for every denoising step t -> t-1, from t_target + length down to t_target + 1.
    std::vector<std::pair<int, int>> chain(int t_target) const;

    // "4:2,2:1" = 2 steps at p=4, then 1 step at p=2.
    static BootstrapSchedule parse(const std::string& text);
    std::string to_string() const;
};

// t = ceil(T u^2), u ~ U(0, 1), limited to [1, T - chain_length].
int sample_bootstrap_target(int steps, int chain_length, Rng& rng);

// One reverse step x_t -> x_{t-1} at patch size p.
using ChainStep = std::function<ad::Var(const ad::Var& x_t, int t, int p)>;

// Runs the chain from x_start (at t_target + length) to t_target. Every step
// except the last runs without recording gradients.
ad::Var run_bootstrap_chain(const ad::Var& x_start, int t_target, const BootstrapSchedule& schedule,
                            const ChainStep& step);

struct BootstrapDraw {
    int t_target = 0;
    int t_start = 0;
};

// mmd2 between q_sample(x0_target, t) and the chain output started from
// q_sample(x0_chain, t + length). Shared-parameter models only.
ad::Var bootstrap_mmd_loss(const ModelParams& model, const NoiseSchedule& sched, const Mat& x0_target,
                           const Mat& x0_chain, const std::vector<int>& labels_chain,
                           const BootstrapSchedule& schedule, std::uint64_t seed, const MmdOptions& mmd = {},
                           BootstrapDraw* draw = nullptr);

enum class TrainMode { pretrain, shared, lora };
const char* to_string(TrainMode m);

struct TrainConfig {
    int steps = 1000;  // final step count (training resumes from TrainState::step)
    int batch = 32;
    AdamConfig adam;
    double ema_rate = 0.999;
    std::uint64_t seed = 0;
    double label_dropout = 0.1;  // probability of the null label, for guidance
    double mmd_weight = 0.0;     // shared mode only
    BootstrapSchedule bootstrap;
    MmdOptions mmd;
};

struct TrainState {
    std::int64_t step = 0;
    AdamState adam;
    std::vector<Mat> ema;  // one per trainable parameter
    std::int64_t flops = 0;  // cumulative training FLOPs (backward counted as 2x forward)
};

struct TrainMetrics {
    std::int64_t step = 0;
    double loss = 0;
    double mse = 0;
    double mmd = 0;
    double distill = 0;
    int p = 0;
    double grad_norm = 0;
    std::int64_t flops = 0;
    std::uint64_t ema_checksum = 0;

    std::string to_line() const;
};

using MetricsSink = std::function<void(const TrainMetrics&)>;

// Trains `model` in place from state.step up to cfg.steps. Deterministic
// given cfg.seed; a run resumed from a saved state continues exactly.
void train(ModelParams& model, const Mat& images, const std::vector<int>& labels, TrainMode mode,
           const TrainConfig& cfg, TrainState& state, const MetricsSink& sink = {});

// Copies an EMA shadow into the trainable parameters of `model`.
void load_shadow(ModelParams& model, const std::vector<Mat>& shadow);
std::uint64_t checksum(const std::vector<Mat>& tensors);

}  // namespace flexdit
