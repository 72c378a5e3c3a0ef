#pragma once

// Analytic FLOPs (2 per multiply-add), plan compute fractions and the four
// ways of batching guidance branches whose sequence lengths differ.

#include "flexdit/backbone.hpp"
#include "flexdit/plan.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace flexdit {

// Components included in the per-step totals. Conditioning, weight
// projection and cross-attention are reported by the counter but not here.
inline constexpr std::array<const char*, 6> kFlopComponents = {
    "embed", "attention-linears", "attention-matmuls", "mlp", "de-embed", "lora-overhead"};

struct CostGeometry {
    int depth = 4;
    std::int64_t hidden = 80;
    std::int64_t mlp_ratio = 4;
    std::int64_t pixels_in = 256;   // c_in * h * w
    std::int64_t pixels_out = 256;  // c_out * h * w
    std::int64_t lora_rank = 0;

    static CostGeometry from(const ModelConfig& cfg);
};

struct FlopsReport {
    std::map<std::string, std::int64_t> components;
    std::int64_t total() const;
    FlopsReport& operator+=(const FlopsReport& o);
    FlopsReport scaled(std::int64_t k) const;
    // Sums the counted components of an instrumented FlopCounter tag map.
    static FlopsReport from_counter(const std::map<std::string, std::int64_t>& by_tag);
};

// One image with N tokens. Per block: qkv 6Nd^2, out 2Nd^2, attention 4N^2 d,
// MLP 4 r Nd^2; embed 2 d pixels_in, de-embed 2 d pixels_out. Unmerged
// adapters add 2N(d_in r + r d_out) per adapted layer.
FlopsReport flops_per_step(std::int64_t tokens, const CostGeometry& g, bool lora = false, bool merged = false);
// Blocks only, for padding tokens that attend among themselves.
FlopsReport padding_flops(std::int64_t tokens, const CostGeometry& g);

// Per-image forward cost at patch size p for a concrete model.
std::int64_t image_flops(const ModelParams& model, int p);

struct PlanFlops {
    std::vector<std::int64_t> per_step;  // t = T..1
    std::int64_t total = 0;
    std::int64_t baseline = 0;  // all-powerful plan with the same guidance
    double compute_fraction = 1.0;
    std::int64_t nfe_weak = 0, nfe_powerful = 0;
};

// Sums the branch costs of every step; a guided step costs both branches.
PlanFlops plan_flops(const InferencePlan& plan, const std::function<std::int64_t(int p)>& image_cost);
PlanFlops plan_flops(const InferencePlan& plan, const ModelParams& model);
// Cost proportional to token count (the regime where linear layers dominate).
PlanFlops plan_flops_linear(const InferencePlan& plan, const ImageShape& image);

// --- packing ---------------------------------------------------------------------

struct BranchRequest {
    std::int64_t tokens = 0;
    std::int64_t count = 0;
    bool lora = false;  // unmerged adapters run on these tokens
};

// Slot::item indexes the flattened requests: all copies of request 0, then request 1, ...
using PackRow = std::vector<Slot>;

struct Launch {
    std::vector<PackRow> rows;
};

struct LatencyModel {
    double launch = 1e8;      // FLOP-equivalents per batched forward
    double per_flop = 1.0;
};

struct PackingStrategy {
    int id = 0;
    std::string description;
    std::vector<Launch> launches;
    std::int64_t flops = 0;  // from the realized layout, as executed
    double latency_proxy = 0;

    Index launch_count() const { return static_cast<Index>(launches.size()); }
};

// 1: every sequence in its own row, padded to the longest length, one launch.
// 2: one launch per distinct length, no padding.
// 3: one launch; row i concatenates the i-th sequence of every length group,
//    rows padded to the longest row.
// 4: one launch; shorter sequences are concatenated ratio-many per row of the
//    longest length. Needs every shorter group to hold at least ratio sequences.
PackingStrategy pack(const std::vector<BranchRequest>& requests, int strategy, const CostGeometry& g,
                     const LatencyModel& latency = {});
bool pack_feasible(const std::vector<BranchRequest>& requests, int strategy);
// Feasible strategy with the lowest latency proxy (ties to the lower id).
int best_strategy(const std::vector<BranchRequest>& requests, const CostGeometry& g, const LatencyModel& latency = {});
const char* strategy_description(int strategy);

}  // namespace flexdit
