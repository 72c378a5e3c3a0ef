#include "flexdit/optim.hpp"

#include "flexdit/random.hpp"

#include <algorithm>
#include <cmath>

namespace flexdit {

double adam_step(std::span<ad::Var> params, AdamState& state, const AdamConfig& cfg) {
    if (state.m.size() != params.size()) {
        state.m.clear();
        state.v.clear();
        for (const auto& p : params) {
            state.m.push_back(Mat::Zero(p.rows(), p.cols()));
            state.v.push_back(Mat::Zero(p.rows(), p.cols()));
        }
    }
    double sq = 0.0;
    for (const auto& p : params) {
        if (p.has_grad()) sq += p.grad().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.has_grad()) continue;
        const Mat g = p.grad() * clip;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseAbs2();
        Mat& w = p.mutable_value();
        if (cfg.weight_decay > 0.0) w *= 1.0 - cfg.lr * cfg.weight_decay;
        w.array() -= cfg.lr * (state.m[i].array() / bc1) / ((state.v[i].array() / bc2).sqrt() + cfg.eps);
        ad::ensure_finite(w, "adam_step");
    }
    return norm;
}

void ema_update(std::span<const ad::Var> params, std::vector<Mat>& shadow, double rate) {
    if (shadow.size() != params.size()) throw ShapeError("ema_update: shadow does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (rate == 1.0) continue;
        shadow[i] = rate * shadow[i] + (1.0 - rate) * params[i].value();
    }
}

GradCheckResult finite_difference_gradient_check(const std::function<ad::Var()>& loss, std::span<ad::Var> params,
                                                 std::span<const std::string> names, const GradCheckOptions& opts) {
    for (auto& p : params) p.zero_grad();
    ad::Var root = loss();
    root.backward();

    GradCheckResult result;
    Rng rng(derive_seed(opts.seed, {0x67c}));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        const Index size = p.value().size();
        std::vector<Index> entries;
        if (size <= opts.max_entries_per_param) {
            for (Index e = 0; e < size; ++e) entries.push_back(e);
        } else {
            for (Index e = 0; e < opts.max_entries_per_param; ++e) {
                entries.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(size))));
            }
        }
        Vec analytic(static_cast<Index>(entries.size()));
        Vec numeric(static_cast<Index>(entries.size()));
        for (std::size_t k = 0; k < entries.size(); ++k) {
            const Index e = entries[k];
            analytic(static_cast<Index>(k)) = p.has_grad() ? p.grad().data()[e] : 0.0;
            double& slot = p.mutable_value().data()[e];
            const double saved = slot;
            double plus = 0, minus = 0;
            {
                ad::NoGradGuard guard;
                slot = saved + opts.step;
                plus = loss().item();
                slot = saved - opts.step;
                minus = loss().item();
            }
            slot = saved;
            numeric(static_cast<Index>(k)) = (plus - minus) / (2.0 * opts.step);
        }
        GradCheckEntry entry;
        entry.name = i < names.size() ? names[i] : "param" + std::to_string(i);
        entry.analytic_norm = analytic.norm();
        entry.numeric_norm = numeric.norm();
        const double denom = std::max(entry.analytic_norm, entry.numeric_norm);
        entry.rel_error = denom > 1e-12 ? (analytic - numeric).norm() / denom : 0.0;
        entry.passed = entry.rel_error <= opts.rtol;
        result.passed = result.passed && entry.passed;
        result.worst_rel_error = std::max(result.worst_rel_error, entry.rel_error);
        result.groups.push_back(entry);
    }
    for (auto& p : params) p.zero_grad();
    return result;
}

}  // namespace flexdit
