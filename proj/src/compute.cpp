#include "flexdit/compute.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace flexdit {

CostGeometry CostGeometry::from(const ModelConfig& cfg) {
    CostGeometry g;
    g.depth = cfg.depth;
    g.hidden = cfg.hidden;
    g.mlp_ratio = cfg.mlp_ratio;
    g.pixels_in = cfg.image.size();
    g.pixels_out = std::int64_t{cfg.c_out()} * cfg.image.h * cfg.image.w;
    g.lora_rank = cfg.lora_rank;
    return g;
}

std::int64_t FlopsReport::total() const {
    std::int64_t s = 0;
    for (const auto& [k, v] : components) s += v;
    return s;
}

FlopsReport& FlopsReport::operator+=(const FlopsReport& o) {
    for (const auto& [k, v] : o.components) components[k] += v;
    return *this;
}

FlopsReport FlopsReport::scaled(std::int64_t k) const {
    FlopsReport r;
    for (const auto& [name, v] : components) r.components[name] = v * k;
    return r;
}

FlopsReport FlopsReport::from_counter(const std::map<std::string, std::int64_t>& by_tag) {
    FlopsReport r;
    for (const char* c : kFlopComponents) {
        auto it = by_tag.find(c);
        r.components[c] = it == by_tag.end() ? 0 : it->second;
    }
    return r;
}

namespace {

FlopsReport block_flops(std::int64_t n, const CostGeometry& g) {
    const std::int64_t d = g.hidden, L = g.depth;
    FlopsReport r;
    r.components["attention-linears"] = L * 8 * n * d * d;
    r.components["attention-matmuls"] = L * 4 * n * n * d;
    r.components["mlp"] = L * 4 * g.mlp_ratio * n * d * d;
    return r;
}

}  // namespace

FlopsReport flops_per_step(std::int64_t tokens, const CostGeometry& g, bool lora, bool merged) {
    FlopsReport r = block_flops(tokens, g);
    const std::int64_t d = g.hidden, rk = g.lora_rank, h = g.mlp_ratio * d;
    r.components["embed"] = 2 * g.pixels_in * d;
    r.components["de-embed"] = 2 * g.pixels_out * d;
    std::int64_t lo = 0;
    if (lora && !merged && rk > 0) {
        // q, k, v, out: d -> d; fc1: d -> h; fc2: h -> d
        const std::int64_t per_block = 4 * 2 * tokens * (d * rk + rk * d) + 2 * tokens * (d * rk + rk * h) +
                                       2 * tokens * (h * rk + rk * d);
        lo = g.depth * per_block;
    }
    r.components["lora-overhead"] = lo;
    return r;
}

FlopsReport padding_flops(std::int64_t tokens, const CostGeometry& g) {
    FlopsReport r = block_flops(tokens, g);
    r.components["embed"] = 0;
    r.components["de-embed"] = 0;
    r.components["lora-overhead"] = 0;
    return r;
}

std::int64_t image_flops(const ModelParams& model, int p) {
    if (!model.has_patch_size(p)) throw ShapeError("patch size " + std::to_string(p) + " is not supported");
    auto g = CostGeometry::from(model.cfg);
    const bool lora = model.adapters.count(p) > 0 && model.merged_for != p;
    if (lora) g.lora_rank = model.adapters.at(p).begin()->second.down.cols();
    return flops_per_step(model.spec.tokens(model.cfg.image, p), g, lora).total();
}

PlanFlops plan_flops(const InferencePlan& plan, const std::function<std::int64_t(int p)>& image_cost) {
    plan.validate();
    PlanFlops out;
    for (const auto& e : plan.entries) {
        std::int64_t c = image_cost(e.p_cond);
        (e.p_cond == plan.p_powerful ? out.nfe_powerful : out.nfe_weak) += 1;
        if (e.guided) {
            c += image_cost(e.p_uncond);
            (e.p_uncond == plan.p_powerful ? out.nfe_powerful : out.nfe_weak) += 1;
        }
        out.per_step.push_back(c);
        out.total += c;
    }
    const std::int64_t pow = image_cost(plan.p_powerful);
    out.baseline = plan.steps * (plan.guidance.s_cfg1 != 1.0 ? 2 * pow : pow);
    out.compute_fraction = static_cast<double>(out.total) / static_cast<double>(out.baseline);
    return out;
}

PlanFlops plan_flops(const InferencePlan& plan, const ModelParams& model) {
    return plan_flops(plan, [&](int p) { return image_flops(model, p); });
}

PlanFlops plan_flops_linear(const InferencePlan& plan, const ImageShape& image) {
    return plan_flops(plan, [&](int p) {
        if (image.h % p != 0 || image.w % p != 0) throw ShapeError("patch size does not tile the image");
        return std::int64_t{image.h / p} * (image.w / p);
    });
}

// --- packing ------------------------------------------------------------------

const char* strategy_description(int strategy) {
    switch (strategy) {
        case 1: return "pad every sequence to the longest length, one launch";
        case 2: return "one homogeneous launch per sequence length";
        case 3: return "one launch, row i joins the i-th sequence of each length group, padded";
        case 4: return "one launch, shorter sequences concatenated to the longest length";
        default: return "unknown";
    }
}

namespace {

struct Seq {
    Index item;
    std::int64_t tokens;
};

// Flattened sequences grouped by length, longest first; groups keep request order.
std::vector<std::vector<Seq>> length_groups(const std::vector<BranchRequest>& requests) {
    std::map<std::int64_t, std::vector<Seq>, std::greater<>> by_len;
    Index item = 0;
    for (const auto& r : requests) {
        if (r.tokens <= 0 || r.count < 0) throw ConfigError("pack: requests need positive lengths and counts");
        for (std::int64_t c = 0; c < r.count; ++c) by_len[r.tokens].push_back({item++, r.tokens});
    }
    std::vector<std::vector<Seq>> out;
    for (auto& [len, seqs] : by_len) {
        if (!seqs.empty()) out.push_back(std::move(seqs));
    }
    return out;
}

std::int64_t row_length(const PackRow& row, const std::vector<std::int64_t>& item_tokens) {
    std::int64_t n = 0;
    for (const auto& s : row) n += s.item >= 0 ? item_tokens[static_cast<std::size_t>(s.item)] : s.pad;
    return n;
}

void pad_row(PackRow& row, std::int64_t target, const std::vector<std::int64_t>& item_tokens) {
    const std::int64_t n = row_length(row, item_tokens);
    if (n < target) row.push_back({-1, static_cast<Index>(target - n)});
}

}  // namespace

bool pack_feasible(const std::vector<BranchRequest>& requests, int strategy) {
    if (strategy < 1 || strategy > 4) return false;
    if (strategy != 4) return true;
    const auto groups = length_groups(requests);
    if (groups.empty()) return true;
    const std::int64_t longest = groups.front().front().tokens;
    for (std::size_t gi = 1; gi < groups.size(); ++gi) {
        const std::int64_t len = groups[gi].front().tokens;
        if (longest % len != 0) return false;
        if (static_cast<std::int64_t>(groups[gi].size()) < longest / len) return false;
    }
    return true;
}

PackingStrategy pack(const std::vector<BranchRequest>& requests, int strategy, const CostGeometry& g,
                     const LatencyModel& latency) {
    if (strategy < 1 || strategy > 4) throw ConfigError("packing strategy must be 1..4");
    if (!pack_feasible(requests, strategy)) {
        throw ConfigError("packing strategy 4 needs every shorter group to hold at least (longest / length) sequences");
    }
    const auto groups = length_groups(requests);
    std::vector<std::int64_t> item_tokens;
    std::vector<bool> item_lora;
    for (const auto& r : requests)
        for (std::int64_t c = 0; c < r.count; ++c) {
            item_tokens.push_back(r.tokens);
            item_lora.push_back(r.lora);
        }

    PackingStrategy out;
    out.id = strategy;
    out.description = strategy_description(strategy);
    const std::int64_t longest = groups.empty() ? 0 : groups.front().front().tokens;
    switch (strategy) {
        case 1: {
            Launch l;
            for (const auto& grp : groups)
                for (const auto& s : grp) {
                    PackRow row{{s.item, 0}};
                    pad_row(row, longest, item_tokens);
                    l.rows.push_back(row);
                }
            if (!l.rows.empty()) out.launches.push_back(l);
            break;
        }
        case 2:
            for (const auto& grp : groups) {
                Launch l;
                for (const auto& s : grp) l.rows.push_back({{s.item, 0}});
                out.launches.push_back(l);
            }
            break;
        case 3: {
            Launch l;
            std::size_t most = 0;
            for (const auto& grp : groups) most = std::max(most, grp.size());
            for (std::size_t i = 0; i < most; ++i) {
                PackRow row;
                for (const auto& grp : groups)
                    if (i < grp.size()) row.push_back({grp[i].item, 0});
                l.rows.push_back(row);
            }
            std::int64_t widest = 0;
            for (const auto& row : l.rows) widest = std::max(widest, row_length(row, item_tokens));
            for (auto& row : l.rows) pad_row(row, widest, item_tokens);
            if (!l.rows.empty()) out.launches.push_back(l);
            break;
        }
        case 4: {
            Launch l;
            for (const auto& grp : groups) {
                const std::int64_t per_row = longest / grp.front().tokens;
                for (std::size_t i = 0; i < grp.size(); i += static_cast<std::size_t>(per_row)) {
                    PackRow row;
                    for (std::size_t k = i; k < std::min(grp.size(), i + static_cast<std::size_t>(per_row)); ++k) {
                        row.push_back({grp[k].item, 0});
                    }
                    pad_row(row, longest, item_tokens);
                    l.rows.push_back(row);
                }
            }
            if (!l.rows.empty()) out.launches.push_back(l);
            break;
        }
    }

    // FLOPs as executed: attention stays within each segment, padding runs through the blocks.
    FlopsReport total;
    for (const auto& l : out.launches)
        for (const auto& row : l.rows)
            for (const auto& s : row) {
                if (s.item >= 0) {
                    const auto i = static_cast<std::size_t>(s.item);
                    total += flops_per_step(item_tokens[i], g, item_lora[i]);
                } else {
                    total += padding_flops(s.pad, g);
                }
            }
    out.flops = total.total();

    // Latency proxy: a dense kernel pays for the full row whatever the mask.
    out.latency_proxy = 0;
    for (const auto& l : out.launches) {
        std::int64_t widest = 0;
        for (const auto& row : l.rows) widest = std::max(widest, row_length(row, item_tokens));
        const double row_cost = static_cast<double>(block_flops(widest, g).total());
        out.latency_proxy += latency.launch + latency.per_flop * row_cost * static_cast<double>(l.rows.size());
    }
    return out;
}

int best_strategy(const std::vector<BranchRequest>& requests, const CostGeometry& g, const LatencyModel& latency) {
    int best = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    for (int s = 1; s <= 4; ++s) {
        if (!pack_feasible(requests, s)) continue;
        const double c = pack(requests, s, g, latency).latency_proxy;
        if (c < best_cost) {
            best_cost = c;
            best = s;
        }
    }
    return best;
}

}  // namespace flexdit
