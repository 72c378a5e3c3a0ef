#pragma once

// Guided denoising with per-step patch sizes: the two branch forwards of a
// plan entry, batched by one of the packing strategies, and plan-driven
// sampling on top of sample_loop.

#include "flexdit/compute.hpp"
#include "flexdit/diffusion.hpp"

namespace flexdit {

// The conditioning of one image: class label or text tokens.
struct Condition {
    int label = 0;
    std::vector<Index> text;
};

struct NfeStats {
    std::int64_t weak = 0;      // per-image forwards at a non-powerful size
    std::int64_t powerful = 0;  // per-image forwards at p_powerful
    std::int64_t launches = 0;  // batched model_forward calls
};

// Packing strategy id 1..4, or 0 for the lowest latency proxy.
struct GuidedOptions {
    int packing = 2;
    LatencyModel latency;
};

// Runs items through model_forward following a packed layout; rows of the
// result follow `items`.
StepPrediction forward_packed(const ModelParams& model, const Mat& images, const std::vector<BatchItem>& items,
                              int strategy, const LatencyModel& latency = {}, NfeStats* stats = nullptr);

// Both branch forwards of a plan entry combined by cfg_combine; one
// conditional forward when the entry is unguided. Variance logits come from
// the conditional branch.
StepPrediction nfe_pair(const ModelParams& model, const Mat& x_t, int t, const std::vector<Condition>& cond,
                        const PlanEntry& entry, const GuidanceConfig& guidance, const GuidedOptions& opts = {},
                        NfeStats* stats = nullptr);

// Samples one image per condition following `plan`.
Mat sample_plan(const ModelParams& model, const NoiseSchedule& sched, const InferencePlan& plan,
                const std::vector<Condition>& cond, std::uint64_t seed, const SampleOptions& sample = {},
                const GuidedOptions& opts = {}, std::vector<TrajectoryStep>* log = nullptr, NfeStats* stats = nullptr);

std::vector<Condition> class_conditions(const std::vector<int>& labels);

}  // namespace flexdit
