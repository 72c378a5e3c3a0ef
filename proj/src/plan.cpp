#include "flexdit/plan.hpp"

#include <cmath>
#include <sstream>

namespace flexdit {

const char* to_string(PlanStyle s) {
    switch (s) {
        case PlanStyle::weak_first: return "weak-first";
        case PlanStyle::weak_last: return "weak-last";
        case PlanStyle::custom: return "custom";
    }
    return "?";
}

GuidanceConfig GuidanceConfig::from_scale(double s, double ratio) {
    if (!(ratio > 0) || !std::isfinite(ratio)) throw ConfigError("the guidance ratio must be positive");
    if (!std::isfinite(s)) throw ConfigError("the guidance scale must be finite");
    GuidanceConfig g;
    g.s_cfg1 = s;
    g.ratio = ratio;
    g.s_cfg2 = ratio == 1.0 ? s : 1.0 - (1.0 - s) / ratio;
    return g;
}

const PlanEntry& InferencePlan::at(int t) const {
    if (t < 1 || t > steps) throw ShapeError("step " + std::to_string(t) + " is outside the plan");
    return entries[static_cast<std::size_t>(steps - t)];
}

void InferencePlan::validate() const {
    if (steps < 1) throw ConfigError("a plan needs at least one step");
    if (static_cast<int>(entries.size()) != steps) throw ConfigError("plan has " + std::to_string(entries.size()) +
                                                                     " entries for " + std::to_string(steps) + " steps");
    if (t_weak + t_powerful != steps) throw ConfigError("T_weak + T_powerful must equal T");
    for (int i = 0; i < steps; ++i) {
        const auto& e = entries[static_cast<std::size_t>(i)];
        if (e.t != steps - i) throw ConfigError("plan entries must run t = T..1");
        if (e.p_cond < 1 || e.p_uncond < 1) throw ConfigError("plan patch sizes must be positive");
        if (e.guided && e.p_cond > e.p_uncond) {
            throw ConfigError("step " + std::to_string(e.t) + ": the conditional branch is weaker than its guidance");
        }
    }
}

namespace {

void finish_entry(PlanEntry& e, const GuidanceConfig& g) {
    e.scale = e.p_cond == e.p_uncond ? g.s_cfg1 : g.s_cfg2;
    e.guided = e.scale != 1.0;
    if (!e.guided) e.p_uncond = e.p_cond;
}

}  // namespace

InferencePlan make_plan(int steps, int t_weak, PlanStyle style, int p_weak, int p_powerful, int cond_powerful,
                        int uncond_powerful, const GuidanceConfig& guidance) {
    if (steps < 1) throw ConfigError("plan needs T >= 1");
    if (t_weak < 0 || t_weak > steps) throw ConfigError("T_weak must lie in [0, T]");
    if (style == PlanStyle::custom) throw ConfigError("use make_custom_plan for custom plans");
    if (p_weak < p_powerful) throw ConfigError("the weak patch size must not be smaller than the powerful one");
    const int t_pow = steps - t_weak;
    if (cond_powerful < 0) cond_powerful = t_pow;
    if (uncond_powerful < 0) uncond_powerful = t_pow;
    if (cond_powerful != t_pow) {
        throw ConfigError("inconsistent counts: guidance " + std::to_string(cond_powerful) + "/" +
                          std::to_string(uncond_powerful) + " but T_powerful = " + std::to_string(t_pow));
    }
    if (uncond_powerful > steps) throw ConfigError("guidance step count exceeds T");

    InferencePlan plan;
    plan.steps = steps;
    plan.t_weak = t_weak;
    plan.t_powerful = t_pow;
    plan.p_weak = p_weak;
    plan.p_powerful = p_powerful;
    plan.style = style;
    plan.guidance = guidance;
    for (int t = steps; t >= 1; --t) {
        PlanEntry e;
        e.t = t;
        if (style == PlanStyle::weak_first) {
            e.p_cond = t <= cond_powerful ? p_powerful : p_weak;
            e.p_uncond = t <= uncond_powerful ? p_powerful : p_weak;
        } else {
            e.p_cond = t > steps - cond_powerful ? p_powerful : p_weak;
            e.p_uncond = t > steps - uncond_powerful ? p_powerful : p_weak;
        }
        finish_entry(e, guidance);
        plan.entries.push_back(e);
    }
    plan.validate();
    return plan;
}

InferencePlan make_plan(const PlanSpec& spec, int p_weak, int p_powerful) {
    return make_plan(spec.steps(), spec.t_weak, spec.style, p_weak, p_powerful, spec.cond_powerful,
                     spec.uncond_powerful, GuidanceConfig::from_scale(spec.cfg, spec.ratio));
}

InferencePlan make_custom_plan(const std::vector<PlanEntry>& entries, int p_weak, int p_powerful,
                               const GuidanceConfig& guidance) {
    InferencePlan plan;
    plan.steps = static_cast<int>(entries.size());
    plan.p_weak = p_weak;
    plan.p_powerful = p_powerful;
    plan.style = PlanStyle::custom;
    plan.guidance = guidance;
    for (auto e : entries) {
        finish_entry(e, guidance);
        if (e.p_cond == p_powerful) ++plan.t_powerful;
        else ++plan.t_weak;
        plan.entries.push_back(e);
    }
    plan.validate();
    return plan;
}

// --- text form -------------------------------------------------------------------

namespace {

int parse_count(const std::string& text, const std::string& what) {
    std::size_t used = 0;
    int v = 0;
    try {
        v = std::stoi(text, &used);
    } catch (const std::logic_error&) {
        throw ConfigError("bad " + what + " '" + text + "' in plan");
    }
    if (used != text.size() || v < 0) throw ConfigError("bad " + what + " '" + text + "' in plan");
    return v;
}

double parse_real(const std::string& text, const std::string& what) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(text, &used);
    } catch (const std::logic_error&) {
        throw ConfigError("bad " + what + " '" + text + "' in plan");
    }
    if (used != text.size() || !std::isfinite(v)) throw ConfigError("bad " + what + " '" + text + "' in plan");
    return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, sep)) out.push_back(part);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

}  // namespace

PlanSpec PlanSpec::parse(const std::string& text) {
    PlanSpec spec;
    const auto fields = split(text, ';');
    if (fields.empty() || fields[0].empty()) throw ConfigError("empty plan");
    bool have_weak = false, have_powerful = false;
    for (const auto& part : split(fields[0], ',')) {
        const auto colon = part.find(':');
        if (colon == std::string::npos) throw ConfigError("plan counts look like weak:N,powerful:M, got '" + part + "'");
        const auto key = part.substr(0, colon);
        const int n = parse_count(part.substr(colon + 1), key + " count");
        if (key == "weak" && !have_weak) {
            spec.t_weak = n;
            have_weak = true;
        } else if (key == "powerful" && !have_powerful) {
            spec.t_powerful = n;
            have_powerful = true;
        } else {
            throw ConfigError("unexpected plan entry '" + part + "'");
        }
    }
    if (!have_weak && !have_powerful) throw ConfigError("plan has no step counts");
    for (std::size_t i = 1; i < fields.size(); ++i) {
        const auto& f = fields[i];
        const auto eq = f.find('=');
        if (eq == std::string::npos) throw ConfigError("plan field '" + f + "' is not key=value");
        const auto key = f.substr(0, eq), value = f.substr(eq + 1);
        if (key == "guidance") {
            const auto slash = value.find('/');
            if (slash == std::string::npos) throw ConfigError("guidance looks like x/y, got '" + value + "'");
            spec.cond_powerful = parse_count(value.substr(0, slash), "guidance count");
            spec.uncond_powerful = parse_count(value.substr(slash + 1), "guidance count");
        } else if (key == "cfg") {
            spec.cfg = parse_real(value, "cfg scale");
        } else if (key == "ratio") {
            spec.ratio = parse_real(value, "cfg ratio");
            if (spec.ratio <= 0) throw ConfigError("cfg ratio must be positive");
        } else if (key == "order") {
            if (value == "weak-first") spec.style = PlanStyle::weak_first;
            else if (value == "weak-last") spec.style = PlanStyle::weak_last;
            else throw ConfigError("unknown plan order '" + value + "'");
        } else {
            throw ConfigError("unknown plan field '" + key + "'");
        }
    }
    if (spec.steps() < 1) throw ConfigError("plan needs at least one step");
    const int x = spec.cond_powerful < 0 ? spec.t_powerful : spec.cond_powerful;
    const int y = spec.uncond_powerful < 0 ? spec.t_powerful : spec.uncond_powerful;
    if (x != spec.t_powerful) {
        throw ConfigError("inconsistent counts: guidance " + std::to_string(x) + "/" + std::to_string(y) +
                          " but powerful:" + std::to_string(spec.t_powerful));
    }
    if (y > spec.steps()) throw ConfigError("guidance step count exceeds T");
    spec.cond_powerful = x;
    spec.uncond_powerful = y;
    return spec;
}

std::string PlanSpec::to_string() const {
    const int x = cond_powerful < 0 ? t_powerful : cond_powerful;
    const int y = uncond_powerful < 0 ? t_powerful : uncond_powerful;
    std::string s = "weak:" + std::to_string(t_weak) + ",powerful:" + std::to_string(t_powerful) +
                    ";guidance=" + std::to_string(x) + "/" + std::to_string(y) + ";cfg=" + format_double(cfg);
    if (ratio != 2.5) s += ";ratio=" + format_double(ratio);
    if (style == PlanStyle::weak_last) s += ";order=weak-last";
    return s;
}

// --- guidance ------------------------------------------------------------------

Mat cfg_combine(const Mat& eps_cond, const Mat& eps_guide, const GuidanceConfig& cfg, int p_cond, int p_uncond) {
    if (eps_cond.rows() != eps_guide.rows() || eps_cond.cols() != eps_guide.cols()) {
        throw ShapeError("cfg_combine: branch predictions differ in shape");
    }
    if (p_cond > p_uncond) throw ConfigError("cfg_combine: the conditional branch must not be weaker than the guidance");
    const double s = p_cond == p_uncond ? cfg.s_cfg1 : cfg.s_cfg2;
    if (s == 1.0) return eps_cond;
    return eps_guide + s * (eps_cond - eps_guide);
}

}  // namespace flexdit
