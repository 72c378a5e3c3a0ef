#include "flexdit/guidance.hpp"

namespace flexdit {

std::vector<Condition> class_conditions(const std::vector<int>& labels) {
    std::vector<Condition> out;
    for (int l : labels) out.push_back({l, {}});
    return out;
}

StepPrediction forward_packed(const ModelParams& model, const Mat& images, const std::vector<BatchItem>& items,
                              int strategy, const LatencyModel& latency, NfeStats* stats) {
    const auto& cfg = model.cfg;
    // One request per maximal run of items sharing a patch size keeps the
    // flattened request order equal to the item order.
    std::vector<BranchRequest> requests;
    std::vector<int> request_p;
    for (const auto& it : items) {
        if (!model.has_patch_size(it.p)) throw ShapeError("patch size " + std::to_string(it.p) + " is not supported");
        if (!requests.empty() && request_p.back() == it.p) {
            ++requests.back().count;
            continue;
        }
        const bool lora = model.adapters.count(it.p) > 0 && model.merged_for != it.p;
        requests.push_back({model.spec.tokens(cfg.image, it.p), 1, lora});
        request_p.push_back(it.p);
    }
    const auto geom = CostGeometry::from(cfg);
    if (strategy == 0) strategy = best_strategy(requests, geom, latency);
    const auto packed = pack(requests, strategy, geom, latency);

    const Index n = static_cast<Index>(items.size());
    StepPrediction out;
    out.eps.resize(n, cfg.image.size());
    if (cfg.learned_variance) out.var_logits.resize(n, cfg.image.size());
    const ad::Var imgs = ad::Var::constant(images);
    ad::NoGradGuard guard;
    for (const auto& launch : packed.launches) {
        std::vector<BatchItem> sub;
        std::vector<Index> origin;
        std::vector<Slot> layout;
        for (const auto& row : launch.rows)
            for (const auto& s : row) {
                if (s.item < 0) {
                    layout.push_back(s);
                    continue;
                }
                layout.push_back({static_cast<Index>(sub.size()), 0});
                sub.push_back(items[static_cast<std::size_t>(s.item)]);
                origin.push_back(s.item);
            }
        ForwardOptions fo;
        fo.layout = layout;
        const auto res = model_forward(model, imgs, sub, fo);
        for (std::size_t k = 0; k < origin.size(); ++k) {
            out.eps.row(origin[k]) = res.eps.value().row(static_cast<Index>(k));
            if (cfg.learned_variance) out.var_logits.row(origin[k]) = res.var_logits.value().row(static_cast<Index>(k));
        }
        if (stats != nullptr) {
            ++stats->launches;
            for (const auto& it : sub) (it.p == cfg.p_powerful ? stats->powerful : stats->weak) += 1;
        }
    }
    return out;
}

StepPrediction nfe_pair(const ModelParams& model, const Mat& x_t, int t, const std::vector<Condition>& cond,
                        const PlanEntry& entry, const GuidanceConfig& guidance, const GuidedOptions& opts,
                        NfeStats* stats) {
    if (static_cast<Index>(cond.size()) != x_t.rows()) throw ShapeError("one condition per image required");
    if (entry.t != t) throw ConfigError("plan entry is for step " + std::to_string(entry.t));
    const Index n = x_t.rows();
    std::vector<BatchItem> items;
    for (Index i = 0; i < n; ++i) {
        const auto& c = cond[static_cast<std::size_t>(i)];
        items.push_back({i, entry.p_cond, t, c.label, c.text});
    }
    if (!entry.guided) return forward_packed(model, x_t, items, opts.packing, opts.latency, stats);

    if (entry.p_cond > entry.p_uncond) throw ConfigError("the conditional branch must not be weaker than its guidance");
    const bool same = entry.p_cond == entry.p_uncond;
    for (Index i = 0; i < n; ++i) {
        const auto& c = cond[static_cast<std::size_t>(i)];
        if (same) items.push_back({i, entry.p_uncond, t, model.cfg.null_label(), {}});
        else items.push_back({i, entry.p_uncond, t, c.label, c.text});
    }
    const auto both = forward_packed(model, x_t, items, opts.packing, opts.latency, stats);
    StepPrediction out;
    out.eps = cfg_combine(both.eps.topRows(n), both.eps.bottomRows(n), guidance, entry.p_cond, entry.p_uncond);
    if (model.cfg.learned_variance) out.var_logits = both.var_logits.topRows(n);
    return out;
}

Mat sample_plan(const ModelParams& model, const NoiseSchedule& sched, const InferencePlan& plan,
                const std::vector<Condition>& cond, std::uint64_t seed, const SampleOptions& sample,
                const GuidedOptions& opts, std::vector<TrajectoryStep>* log, NfeStats* stats) {
    plan.validate();
    if (plan.steps != sched.steps) {
        throw ConfigError("plan has " + std::to_string(plan.steps) + " steps but the schedule has " +
                          std::to_string(sched.steps));
    }
    StepDenoiser denoise = [&](const Mat& x, int t) {
        return nfe_pair(model, x, t, cond, plan.at(t), plan.guidance, opts, stats);
    };
    return sample_loop(sched, denoise, static_cast<Index>(cond.size()), model.cfg.image.size(), seed, sample, log);
}

}  // namespace flexdit
