#pragma once

// Inference plans (which patch size denoises each step, per guidance
// branch) and the mixed-patch-size classifier-free guidance rule.

#include "flexdit/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace flexdit {

enum class PlanStyle { weak_first, weak_last, custom };
const char* to_string(PlanStyle s);

struct GuidanceConfig {
    double s_cfg1 = 1.0;  // scale when both branches use the same patch size
    double s_cfg2 = 1.0;  // scale when the guidance branch is the weak conditional
    double ratio = 2.5;   // (1 - s_cfg1) / (1 - s_cfg2)

    // s_cfg1 = s, s_cfg2 from the ratio rule. ratio = 1 gives s_cfg2 == s_cfg1 exactly.
    static GuidanceConfig from_scale(double s, double ratio = 2.5);
    bool enabled() const { return s_cfg1 != 1.0 || s_cfg2 != 1.0; }
};

struct PlanEntry {
    int t = 0;
    int p_cond = 0;
    int p_uncond = 0;
    double scale = 1.0;  // effective guidance scale at this step
    bool guided = false; // false: a single conditional forward
};

struct InferencePlan {
    int steps = 0;                  // T
    int t_weak = 0, t_powerful = 0; // conditional-branch counts
    int p_weak = 0, p_powerful = 0;
    PlanStyle style = PlanStyle::weak_first;
    GuidanceConfig guidance;
    std::vector<PlanEntry> entries;  // t = T..1

    const PlanEntry& at(int t) const;
    void validate() const;
};

// Textual plan: "weak:180,powerful:70;guidance=70/70;cfg=4.0". guidance=x/y
// means the conditional branch uses the powerful model for the last x steps
// and the guidance branch for the last y; it defaults to T_powerful/T_powerful.
// Optional trailing fields: ratio=<r> (default 2.5) and order=weak-last.
struct PlanSpec {
    int t_weak = 0;
    int t_powerful = 0;
    int cond_powerful = -1;    // x; -1 means t_powerful
    int uncond_powerful = -1;  // y; -1 means t_powerful
    double cfg = 1.0;
    double ratio = 2.5;
    PlanStyle style = PlanStyle::weak_first;

    int steps() const { return t_weak + t_powerful; }
    static PlanSpec parse(const std::string& text);
    std::string to_string() const;
};

// The guidance pair (x, y) counts powerful steps on each branch.
InferencePlan make_plan(int steps, int t_weak, PlanStyle style, int p_weak, int p_powerful, int cond_powerful,
                        int uncond_powerful, const GuidanceConfig& guidance = {});
InferencePlan make_plan(const PlanSpec& spec, int p_weak, int p_powerful);
// Arbitrary per-step sizes (entries ordered t = T..1).
InferencePlan make_custom_plan(const std::vector<PlanEntry>& entries, int p_weak, int p_powerful,
                               const GuidanceConfig& guidance = {});

// Equal sizes: eps_u + s1 (eps_c - eps_u). p_cond < p_uncond: the guidance
// branch is the weak conditional and s2 is used. s = 1 returns eps_c as is.
Mat cfg_combine(const Mat& eps_cond, const Mat& eps_guide, const GuidanceConfig& cfg, int p_cond, int p_uncond);

}  // namespace flexdit
