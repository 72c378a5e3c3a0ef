#include "doctest.h"

#include "flexdit/flop_counter.hpp"
#include "flexdit/guidance.hpp"
#include "flexdit/random.hpp"

using namespace flexdit;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.image = {1, 8, 8};
    cfg.steps = 12;
    cfg.lora_rank = 4;
    return cfg;
}

void perturb(ModelParams& m, std::uint64_t seed, bool trainable_only) {
    Rng rng(seed);
    for (auto& np : m.named_parameters()) {
        if (trainable_only && np.frozen) continue;
        if (m.psize.frozen_zero != 0 && np.name == "psize.p" + std::to_string(m.psize.frozen_zero)) continue;
        np.var.mutable_value() += rng.normal_matrix(np.var.rows(), np.var.cols(), 0.1);
    }
}

double max_abs(const Mat& a) { return a.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("guidance scales") {
    const auto g = GuidanceConfig::from_scale(4.0);
    CHECK(g.s_cfg1 == 4.0);
    CHECK(g.s_cfg2 == doctest::Approx(2.2).epsilon(1e-15));
    CHECK((1 - g.s_cfg1) / (1 - g.s_cfg2) == doctest::Approx(2.5));
    for (double s : {0.1, 1.7, 3.3, 7.25}) CHECK(GuidanceConfig::from_scale(s, 1.0).s_cfg2 == s);
    CHECK_FALSE(GuidanceConfig::from_scale(1.0).enabled());
    CHECK_THROWS_AS(GuidanceConfig::from_scale(2.0, 0.0), ConfigError);
}

TEST_CASE("cfg_combine") {
    const auto g = GuidanceConfig::from_scale(4.0);
    Mat c(1, 3), u(1, 3);
    c << 1, 2, 3;
    u << 0.5, -1, 2;
    Mat equal(1, 3), mixed(1, 3);
    equal << 2.5, 11, 6;   // u + 4 (c - u)
    mixed << 1.6, 5.6, 4.2; // u + 2.2 (c - u)
    CHECK(max_abs(cfg_combine(c, u, g, 2, 2) - equal) < 1e-14);
    CHECK(max_abs(cfg_combine(c, u, g, 2, 4) - mixed) < 1e-14);

    const auto one = GuidanceConfig::from_scale(1.0);
    CHECK(cfg_combine(c, u, one, 2, 2) == c);
    CHECK(cfg_combine(c, u, one, 2, 4) == c);
    CHECK(cfg_combine(c, u, GuidanceConfig::from_scale(0.0), 2, 2) == u);
    CHECK_THROWS_AS(cfg_combine(c, u, g, 4, 2), ConfigError);
    CHECK_THROWS_AS(cfg_combine(c, Mat::Zero(1, 2), g, 2, 2), ShapeError);

    // affine: combine(a c + (1-a) c', a u + (1-a) u') = a combine(c, u) + (1-a) combine(c', u')
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const Mat c1 = rng.normal_matrix(2, 5), u1 = rng.normal_matrix(2, 5);
        const Mat c2 = rng.normal_matrix(2, 5), u2 = rng.normal_matrix(2, 5);
        const double a = rng.uniform() * 3 - 1;
        for (int pu : {2, 4}) {
            const Mat lhs = cfg_combine(a * c1 + (1 - a) * c2, a * u1 + (1 - a) * u2, g, 2, pu);
            const Mat rhs = a * cfg_combine(c1, u1, g, 2, pu) + (1 - a) * cfg_combine(c2, u2, g, 2, pu);
            CHECK(max_abs(lhs - rhs) < 1e-12);
        }
        const Mat k = rng.normal_matrix(1, 5).replicate(2, 1);
        CHECK(max_abs(cfg_combine(c1 + k, u1 + k, g, 2, 2) - cfg_combine(c1, u1, g, 2, 2) - k) < 1e-12);
    }
}

TEST_CASE("weak-first plans") {
    const auto g = GuidanceConfig::from_scale(4.0);
    auto plan = make_plan(250, 180, PlanStyle::weak_first, 4, 2, 70, 70, g);
    CHECK(plan.t_weak + plan.t_powerful == 250);
    CHECK(plan.entries.front().t == 250);
    CHECK(plan.entries.back().t == 1);
    for (const auto& e : plan.entries) {
        const int p = e.t <= 70 ? 2 : 4;
        CHECK(e.p_cond == p);
        CHECK(e.p_uncond == p);
        CHECK(e.scale == 4.0);
        CHECK(e.guided);
    }
    CHECK(plan.at(70).p_cond == 2);
    CHECK(plan.at(71).p_cond == 4);

    auto all_pow = make_plan(10, 0, PlanStyle::weak_first, 4, 2, -1, -1);
    for (const auto& e : all_pow.entries) CHECK((e.p_cond == 2 && !e.guided));
    auto all_weak = make_plan(10, 10, PlanStyle::weak_first, 4, 2, -1, -1);
    for (const auto& e : all_weak.entries) CHECK(e.p_cond == 4);

    auto asym = make_plan(250, 160, PlanStyle::weak_first, 4, 2, 90, 50, g);
    int mixed = 0;
    for (const auto& e : asym.entries) {
        if (e.p_cond != e.p_uncond) {
            ++mixed;
            CHECK(e.scale == g.s_cfg2);
            CHECK(e.p_cond == 2);
        }
    }
    CHECK(mixed == 40);

    auto last = make_plan(10, 6, PlanStyle::weak_last, 4, 2, -1, -1);
    for (const auto& e : last.entries) CHECK(e.p_cond == (e.t > 6 ? 2 : 4));

    CHECK_THROWS_AS(make_plan(10, 11, PlanStyle::weak_first, 4, 2, -1, -1), ConfigError);
    CHECK_THROWS_AS(make_plan(10, 4, PlanStyle::weak_first, 4, 2, 5, 5), ConfigError);
    CHECK_THROWS_AS(make_plan(10, 4, PlanStyle::weak_first, 4, 2, 6, 8, g), ConfigError);
    CHECK_THROWS_AS(all_pow.at(11), ShapeError);
}

TEST_CASE("plan text form") {
    const auto spec = PlanSpec::parse("weak:180,powerful:70;guidance=70/70;cfg=4.0");
    CHECK(spec.t_weak == 180);
    CHECK(spec.t_powerful == 70);
    CHECK(spec.cfg == 4.0);
    CHECK(spec.to_string() == "weak:180,powerful:70;guidance=70/70;cfg=4.0");
    CHECK(PlanSpec::parse("powerful:70,weak:180").to_string() == "weak:180,powerful:70;guidance=70/70;cfg=1.0");
    CHECK(PlanSpec::parse("weak:0,powerful:250").steps() == 250);
    const auto odd = PlanSpec::parse("weak:160,powerful:90;guidance=90/50;cfg=2.75;ratio=1.0;order=weak-last");
    CHECK(odd.uncond_powerful == 50);
    CHECK(odd.style == PlanStyle::weak_last);
    CHECK(PlanSpec::parse(odd.to_string()).to_string() == odd.to_string());

    for (const char* bad : {"", "weak:1,strong:2", "weak:x", "weak:1;cfg=abc", "weak:1;guidance=1", "weak:10,powerful:5;guidance=4/4",
                            "weak:1;mode=fast", "weak:-1,powerful:2", "weak:0,powerful:0", "weak:1,weak:2"}) {
        CHECK_THROWS_AS(PlanSpec::parse(bad), ConfigError);
    }
    const auto plan = make_plan(spec, 4, 2);
    CHECK(plan.guidance.s_cfg2 == doctest::Approx(2.2));
}

TEST_CASE("guided forwards") {
    auto base = init_model(tiny_config(), 1);
    perturb(base, 2, false);
    auto lora = flexify_lora(base, 4, 3);
    perturb(lora, 4, true);
    Rng rng(5);
    const Mat x = rng.normal_matrix(8, 64);
    std::vector<int> labels{0, 1, 2, 0, 1, 2, 3, 1};
    const auto cond = class_conditions(labels);
    const auto g = GuidanceConfig::from_scale(3.0);

    SUBCASE("unguided powerful step is the conditional forward") {
        PlanEntry e{5, 2, 2, 1.0, false};
        const auto out = nfe_pair(lora, x, 5, cond, e, GuidanceConfig::from_scale(1.0));
        ad::NoGradGuard guard;
        CHECK(out.eps == model_forward(lora, x, std::vector<int>(8, 5), labels, 2).eps.value());
    }

    SUBCASE("packing strategies agree with independent forwards") {
        for (PlanEntry e : {PlanEntry{5, 2, 4, g.s_cfg2, true}, PlanEntry{5, 2, 2, g.s_cfg1, true},
                            PlanEntry{5, 4, 4, g.s_cfg1, true}}) {
            // reference: every branch of every image on its own
            Mat ref(8, 64);
            for (Index i = 0; i < 8; ++i) {
                ad::NoGradGuard guard;
                const Mat xi = x.row(i);
                const int l = labels[static_cast<std::size_t>(i)];
                const Mat ec = model_forward(lora, xi, {5}, {l}, e.p_cond).eps.value();
                const int lu = e.p_cond == e.p_uncond ? lora.cfg.null_label() : l;
                const Mat eu = model_forward(lora, xi, {5}, {lu}, e.p_uncond).eps.value();
                ref.row(i) = cfg_combine(ec, eu, g, e.p_cond, e.p_uncond);
            }
            for (int s = 0; s <= 4; ++s) {
                NfeStats stats;
                GuidedOptions opts;
                opts.packing = s;
                const auto out = nfe_pair(lora, x, 5, cond, e, g, opts, &stats);
                CHECK(max_abs(out.eps - ref) < 1e-9);
                if (e.p_cond != e.p_uncond) {
                    CHECK(stats.powerful == 8);
                    CHECK(stats.weak == 8);
                }
            }
        }
    }

    SUBCASE("instrumented FLOPs of every packed layout match the layout model") {
        std::vector<BatchItem> items;
        for (Index i = 0; i < 8; ++i) items.push_back({i, 2, 5, labels[static_cast<std::size_t>(i)], {}});
        for (Index i = 0; i < 8; ++i) items.push_back({i, 4, 5, labels[static_cast<std::size_t>(i)], {}});
        const std::vector<BranchRequest> req{{16, 8, false}, {4, 8, true}};
        const auto geom = CostGeometry::from(lora.cfg);
        for (int s = 1; s <= 4; ++s) {
            FlopCounter fc;
            NfeStats stats;
            forward_packed(lora, x, items, s, {}, &stats);
            CHECK(FlopsReport::from_counter(fc.by_tag()).total() == pack(req, s, geom).flops);
            CHECK(stats.launches == pack(req, s, geom).launch_count());
        }
    }
}

TEST_CASE("all-powerful plans reproduce baseline sampling in LoRA mode") {
    auto base = init_model(tiny_config(), 6);
    perturb(base, 7, false);
    auto lora = flexify_lora(base, 4, 8);
    perturb(lora, 9, true);
    const auto sched = NoiseSchedule::linear(12);
    const auto cond = class_conditions({0, 1, 2});
    for (double s : {1.0, 3.0}) {
        const auto plan = make_plan(12, 0, PlanStyle::weak_first, 4, 2, -1, -1, GuidanceConfig::from_scale(s));
        const Mat a = sample_plan(lora, sched, plan, cond, 11);
        const Mat b = sample_plan(base, sched, plan, cond, 11);
        CHECK(a == b);
    }
    // unguided baseline written directly against sample_loop
    StepDenoiser plain = [&](const Mat& x, int t) {
        ad::NoGradGuard guard;
        return StepPrediction{model_forward(base, x, std::vector<int>(3, t), {0, 1, 2}, 2).eps.value(), {}};
    };
    const auto plan = make_plan(12, 0, PlanStyle::weak_first, 4, 2, -1, -1);
    CHECK(sample_plan(lora, sched, plan, cond, 11) == sample_loop(sched, plain, 3, 64, 11));

    // the weak steps do change the result
    const auto weak = make_plan(12, 6, PlanStyle::weak_first, 4, 2, -1, -1);
    CHECK(sample_plan(lora, sched, weak, cond, 11) != sample_plan(lora, sched, plan, cond, 11));
    CHECK_THROWS_AS(sample_plan(lora, NoiseSchedule::linear(10), plan, cond, 11), ConfigError);
}
