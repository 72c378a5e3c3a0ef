#pragma once

#include "flexdit/autograd.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace flexdit {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW)
    double grad_clip = 0.0;     // global-norm clip; 0 disables
};

struct AdamState {
    std::vector<Mat> m;
    std::vector<Mat> v;
    std::int64_t step = 0;
};

// One AdamW update over `params` using their accumulated gradients.
// Parameters without a gradient are left untouched. Returns the global
// gradient norm measured before clipping.
double adam_step(std::span<ad::Var> params, AdamState& state, const AdamConfig& cfg);

// shadow <- rate * shadow + (1 - rate) * param
void ema_update(std::span<const ad::Var> params, std::vector<Mat>& shadow, double rate);

struct GradCheckOptions {
    double step = 1e-4;
    double rtol = 1e-3;
    Index max_entries_per_param = 12;
    std::uint64_t seed = 0;
};

struct GradCheckEntry {
    std::string name;
    double analytic_norm = 0;
    double numeric_norm = 0;
    double rel_error = 0;
    bool passed = true;
};

struct GradCheckResult {
    std::vector<GradCheckEntry> groups;
    bool passed = true;
    double worst_rel_error = 0;
};

// Central finite differences against one reverse-mode pass. Entries are
// sampled per parameter; the error for a group is
// ||analytic - numeric|| / max(||analytic||, ||numeric||).
GradCheckResult finite_difference_gradient_check(const std::function<ad::Var()>& loss, std::span<ad::Var> params,
                                                 std::span<const std::string> names,
                                                 const GradCheckOptions& opts = {});

}  // namespace flexdit
