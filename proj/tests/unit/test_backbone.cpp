#include "doctest.h"

#include "flexdit/backbone.hpp"
#include "flexdit/flop_counter.hpp"
#include "flexdit/optim.hpp"
#include "flexdit/random.hpp"

#include <cmath>

using namespace flexdit;
using ad::Var;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.image = {1, 8, 8};
    cfg.steps = 20;
    cfg.lora_rank = 4;
    return cfg;
}

// Adds noise to every tensor so no gate or adapter stays at its zero init.
void perturb(ModelParams& m, std::uint64_t seed, double stddev = 0.1, bool trainable_only = false) {
    Rng rng(seed);
    for (auto& np : m.named_parameters()) {
        if (trainable_only && np.frozen) continue;
        if (m.psize.frozen_zero != 0 && np.name == "psize.p" + std::to_string(m.psize.frozen_zero)) continue;
        np.var.mutable_value() += rng.normal_matrix(np.var.rows(), np.var.cols(), stddev);
    }
}

double max_abs(const Mat& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

Mat run(const ModelParams& m, const Mat& images, int t, int label, int p) {
    ad::NoGradGuard guard;
    std::vector<int> ts(static_cast<std::size_t>(images.rows()), t), ls(static_cast<std::size_t>(images.rows()), label);
    return model_forward(m, images, ts, ls, p).eps.value();
}

// --- straight-line reference -------------------------------------------------

RowVec ln_row(const RowVec& x, const RowVec& g, const RowVec& b, double eps) {
    const double mean = x.mean();
    double var = 0;
    for (Index i = 0; i < x.size(); ++i) var += (x(i) - mean) * (x(i) - mean);
    var /= static_cast<double>(x.size());
    RowVec out(x.size());
    for (Index i = 0; i < x.size(); ++i) out(i) = (x(i) - mean) / std::sqrt(var + eps) * g(i) + b(i);
    return out;
}

double gelu_ref(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}
double silu_ref(double x) { return x / (1.0 + std::exp(-x)); }

Mat lin_ref(const Mat& x, const Linear& l) { return (x * l.w.value()).rowwise() + l.b.value().row(0); }

// One image, one patch size, dedicated tokenizer layers, no adapters.
Mat reference_forward(const ModelParams& m, const Mat& image, int t, int label, int p) {
    const auto& cfg = m.cfg;
    const int d = cfg.hidden, heads = cfg.heads, dh = d / heads;
    const int gh = cfg.image.h / p, gw = cfg.image.w / p, n = gh * gw;
    const double eps = cfg.ln_eps;

    Mat tok(n, p * p);
    for (int gi = 0; gi < gh; ++gi)
        for (int gj = 0; gj < gw; ++gj)
            for (int r = 0; r < p; ++r)
                for (int s = 0; s < p; ++s) tok(gi * gw + gj, r * p + s) = image(0, (gi * p + r) * cfg.image.w + gj * p + s);
    Mat x = lin_ref(tok, m.embed.at(p)) + positional_encoding(gh, gw, p, cfg.image.h, cfg.image.w, d);
    if (m.psize.table.count(p)) x.rowwise() += m.psize.table.at(p).value().row(0);

    RowVec temb(d);
    for (int k = 0; k < d / 2; ++k) {
        const double f = std::exp(-std::log(10000.0) * k / (d / 2));
        temb(k) = std::cos(t * f);
        temb(d / 2 + k) = std::sin(t * f);
    }
    Mat c = lin_ref(lin_ref(temb, m.t_fc1).unaryExpr(&silu_ref), m.t_fc2);
    c += m.class_table.value().row(label);
    const Mat sc = c.unaryExpr(&silu_ref);

    for (std::size_t bi = 0; bi < m.blocks.size(); ++bi) {
        const auto& b = m.blocks[bi];
        const auto& nm = m.norms.at(p)[bi];
        const Mat mod = lin_ref(sc, b.ada);
        auto chunk = [&](int k) { return RowVec(mod.block(0, k * d, 1, d)); };
        Mat h(n, d);
        for (int i = 0; i < n; ++i) {
            RowVec r = ln_row(x.row(i), nm.norm1.gamma.value().row(0), nm.norm1.beta.value().row(0), eps);
            h.row(i) = r.cwiseProduct((chunk(1).array() + 1.0).matrix()) + chunk(0);
        }
        const Mat q = lin_ref(h, b.q), k = lin_ref(h, b.k), v = lin_ref(h, b.v);
        Mat att = Mat::Zero(n, d);
        for (int hd = 0; hd < heads; ++hd) {
            for (int i = 0; i < n; ++i) {
                std::vector<double> s(static_cast<std::size_t>(n));
                double mx = -1e300;
                for (int j = 0; j < n; ++j) {
                    double dot = 0;
                    for (int e = 0; e < dh; ++e) dot += q(i, hd * dh + e) * k(j, hd * dh + e);
                    s[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[static_cast<std::size_t>(j)]);
                }
                double z = 0;
                for (auto& e : s) z += (e = std::exp(e - mx));
                for (int j = 0; j < n; ++j)
                    for (int e = 0; e < dh; ++e) att(i, hd * dh + e) += s[static_cast<std::size_t>(j)] / z * v(j, hd * dh + e);
            }
        }
        const Mat o = lin_ref(att, b.out);
        for (int i = 0; i < n; ++i) x.row(i) += chunk(2).cwiseProduct(o.row(i));
        Mat h2(n, d);
        for (int i = 0; i < n; ++i) {
            RowVec r = ln_row(x.row(i), nm.norm2.gamma.value().row(0), nm.norm2.beta.value().row(0), eps);
            h2.row(i) = r.cwiseProduct((chunk(4).array() + 1.0).matrix()) + chunk(3);
        }
        const Mat mlp = lin_ref(lin_ref(h2, b.fc1).unaryExpr(&gelu_ref), b.fc2);
        for (int i = 0; i < n; ++i) x.row(i) += chunk(5).cwiseProduct(mlp.row(i));
    }
    const Mat fm = lin_ref(sc, m.final_ada);
    const auto& fn = m.final_norm.at(p);
    Mat hf(n, d);
    for (int i = 0; i < n; ++i) {
        RowVec r = ln_row(x.row(i), fn.gamma.value().row(0), fn.beta.value().row(0), eps);
        hf.row(i) = r.cwiseProduct((fm.block(0, d, 1, d).array() + 1.0).matrix()) + fm.block(0, 0, 1, d);
    }
    const Mat y = lin_ref(hf, m.deembed.at(p));
    Mat out(1, cfg.image.h * cfg.image.w);
    for (int gi = 0; gi < gh; ++gi)
        for (int gj = 0; gj < gw; ++gj)
            for (int r = 0; r < p; ++r)
                for (int s = 0; s < p; ++s) out(0, (gi * p + r) * cfg.image.w + gj * p + s) = y(gi * gw + gj, r * p + s);
    return out;
}

}  // namespace

TEST_CASE("output is image shaped for every supported patch size") {
    auto cfg = tiny_config();
    auto base = init_model(cfg, 1);
    Rng rng(7);
    Mat imgs = rng.normal_matrix(3, cfg.image.size());
    CHECK(run(base, imgs, 5, 0, 2).rows() == 3);
    CHECK(run(base, imgs, 5, 0, 2).cols() == cfg.image.size());
    auto flex = flexify_shared(base);
    CHECK(run(flex, imgs, 5, 0, 4).cols() == cfg.image.size());
    CHECK_THROWS_AS(run(base, imgs, 5, 0, 4), ShapeError);
    CHECK_THROWS_AS(run(flex, imgs, 5, 0, 8), ShapeError);
    CHECK_THROWS_AS(run(flex, imgs, 0, 0, 2), ShapeError);
    CHECK_THROWS_AS(run(flex, imgs, cfg.steps + 1, 0, 2), ShapeError);

    cfg.learned_variance = true;
    auto lv = init_model(cfg, 1);
    auto out = model_forward(lv, imgs, {1, 2, 3}, {0, 1, 2}, 2);
    CHECK(out.eps.cols() == cfg.image.size());
    CHECK(out.var_logits.cols() == cfg.image.size());
}

TEST_CASE("config validation") {
    auto cfg = tiny_config();
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.depth = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.image = {1, 10, 10};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("adaLN-zero blocks start as the identity") {
    auto cfg = tiny_config();
    auto m = init_model(cfg, 2);
    Rng rng(3);
    Mat img = rng.normal_matrix(1, cfg.image.size());
    std::map<std::string, Mat> acts;
    ActivationTap tap = [&](const std::string& name, const Mat& a) { acts[name] = a; };
    ForwardOptions opts;
    opts.tap = &tap;
    ad::NoGradGuard guard;
    auto out = model_forward(m, Var::constant(img), {{0, 2, 7, 1, {}}}, opts);
    CHECK(acts.at("block0") == acts.at("embed"));
    CHECK(acts.at("block1") == acts.at("embed"));
    CHECK(out.eps.value().isZero(0.0));
}

TEST_CASE("forward matches a straight-line reference") {
    auto cfg = tiny_config();
    cfg.image = {1, 4, 4};
    cfg.p_powerful = 2;
    cfg.p_weak = 4;
    auto m = init_model(cfg, 4);
    perturb(m, 5, 0.2);
    Rng rng(6);
    Mat img = rng.normal_matrix(1, cfg.image.size());
    // N = 4 tokens at p = 2
    const Mat got = run(m, img, 9, 2, 2);
    const Mat want = reference_forward(m, img, 9, 2, 2);
    CHECK(max_abs(got - want) < 1e-10);
    CHECK(max_abs(want) > 1e-3);
}

TEST_CASE("packed layouts with padding reproduce per-item forwards") {
    auto cfg = tiny_config();
    auto m = flexify_lora(init_model(cfg, 8), 4, 9);
    perturb(m, 10);
    Rng rng(11);
    Mat imgs = rng.normal_matrix(2, cfg.image.size());
    std::vector<BatchItem> items{{0, 4, 3, 1, {}}, {1, 2, 12, 0, {}}, {0, 2, 3, 3, {}}};
    ForwardOptions opts;
    opts.layout = {{2, 0}, {-1, 5}, {0, 0}, {1, 0}, {-1, 16}};
    ad::NoGradGuard guard;
    const Mat packed = model_forward(m, Var::constant(imgs), items, opts).eps.value();
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        const Mat alone = run(m, imgs.row(it.image), it.t, it.label, it.p);
        CHECK(max_abs(packed.row(static_cast<Index>(i)) - alone) < 1e-10);
    }
    opts.layout = {{0, 0}, {1, 0}};
    CHECK_THROWS_AS(model_forward(m, Var::constant(imgs), items, opts), ShapeError);
}

TEST_CASE("LoRA mode at the powerful patch size is bit-identical to the pretrained model") {
    auto cfg = tiny_config();
    auto base = init_model(cfg, 12);
    perturb(base, 13);
    auto lora = flexify_lora(base, 4, 14);
    perturb(lora, 15, 0.1, true);  // adapters, new norms and embeddings all non-zero
    Rng rng(16);
    Mat imgs = rng.normal_matrix(2, cfg.image.size());
    CHECK(run(lora, imgs, 4, 1, 2) == run(base, imgs, 4, 1, 2));
    auto lora2 = flexify_lora(base, 4, 14);
    for (auto& [p, set] : lora2.adapters)
        for (auto& [k, a] : set) a.up.mutable_value().setConstant(0.3);
    CHECK(run(lora2, imgs, 4, 1, 2) == run(base, imgs, 4, 1, 2));
    CHECK(run(lora2, imgs, 4, 1, 4) != run(flexify_lora(base, 4, 14), imgs, 4, 1, 4));

    for (const auto& np : lora2.named_parameters()) {
        const bool added = np.name.rfind("lora.", 0) == 0 || np.name.find(".p4") != std::string::npos;
        CHECK_MESSAGE(np.frozen == !added, np.name);
    }
}

TEST_CASE("fresh adapters are a no-op") {
    auto cfg = tiny_config();
    auto base = init_model(cfg, 17);
    perturb(base, 18);
    auto lora = flexify_lora(base, 4, 19);
    auto detached = lora.clone();
    detached.adapters.clear();
    Rng rng(20);
    Mat imgs = rng.normal_matrix(2, cfg.image.size());
    CHECK(run(lora, imgs, 6, 2, 4) == run(detached, imgs, 6, 2, 4));
}

TEST_CASE("merging adapters") {
    auto cfg = tiny_config();
    auto base = init_model(cfg, 21);
    perturb(base, 22);
    auto lora = flexify_lora(base, 4, 23);
    Rng rng(24);
    Mat imgs = rng.normal_matrix(2, cfg.image.size());

    auto zero_merged = merge_loras(lora, 4);
    for (std::size_t i = 0; i < lora.blocks.size(); ++i) CHECK(zero_merged.blocks[i].q.w.value() == lora.blocks[i].q.w.value());

    for (auto& [p, set] : lora.adapters)
        for (auto& [k, a] : set) a.up.mutable_value() = rng.normal_matrix(a.up.rows(), a.up.cols(), 0.2);
    auto merged = merge_loras(lora, 4);
    CHECK(max_abs(run(merged, imgs, 6, 1, 4) - run(lora, imgs, 6, 1, 4)) < 1e-9);
    CHECK_THROWS_AS(merge_loras(merged, 4), Error);
    CHECK_THROWS_AS(run(merged, imgs, 6, 1, 2), Error);
    CHECK_THROWS_AS(merge_loras(lora, 2), Error);

    auto restored = unmerge_loras(merged);
    CHECK(restored.merged_for == 0);
    for (std::size_t i = 0; i < lora.blocks.size(); ++i) {
        CHECK(max_abs(restored.blocks[i].fc1.w.value() - lora.blocks[i].fc1.w.value()) < 1e-12);
    }
    CHECK_THROWS_AS(unmerge_loras(restored), Error);

    // Merged path saves exactly the adapter products: 2 FLOPs per multiply-add.
    std::int64_t f_merged = 0, f_lora = 0;
    {
        FlopCounter fc;
        run(merged, imgs.topRows(1), 6, 1, 4);
        f_merged = fc.total();
    }
    {
        FlopCounter fc;
        run(lora, imgs.topRows(1), 6, 1, 4);
        f_lora = fc.total();
    }
    const std::int64_t n = 4, d = cfg.hidden, r = 4, hidden_mlp = d * cfg.mlp_ratio;
    const std::int64_t per_block = 4 * 2 * n * (d * r + r * d) + 2 * n * (d * r + r * hidden_mlp) + 2 * n * (hidden_mlp * r + r * d);
    CHECK(f_lora - f_merged == cfg.depth * per_block);
}

TEST_CASE("shared-parameter flexification") {
    auto cfg = tiny_config();
    auto base = init_model(cfg, 25);
    perturb(base, 26);
    auto flex = flexify_shared(base);
    Rng rng(27);
    Mat imgs = rng.normal_matrix(2, cfg.image.size());
    CHECK(max_abs(run(flex, imgs, 3, 0, 2) - run(base, imgs, 3, 0, 2)) < 1e-9);
    for (const auto& np : flex.named_parameters()) CHECK_MESSAGE(!np.frozen, np.name);

    // Default desk configuration.
    ModelConfig desk;
    auto big = init_model(desk, 1);
    auto big_flex = flexify_shared(big);
    const auto counts = count_parameters(big_flex, &big);
    CHECK(counts.added > 0);
    const double fraction = static_cast<double>(counts.added) / static_cast<double>(counts.backbone);
    CHECK(fraction < 0.01);
    auto big_lora = flexify_lora(big, 32, 2);
    CHECK(count_parameters(big_lora, &big).added > counts.added);
}

TEST_CASE("clone shares no storage") {
    auto m = init_model(tiny_config(), 28);
    auto c = m.clone();
    c.blocks[0].q.w.mutable_value()(0, 0) += 1.0;
    CHECK(c.blocks[0].q.w.value()(0, 0) != m.blocks[0].q.w.value()(0, 0));
    CHECK(m.named_parameters().size() == c.named_parameters().size());
}

TEST_CASE("cross-attention conditioning") {
    auto cfg = tiny_config();
    cfg.conditioning = Conditioning::cross_attention;
    auto m = init_model(cfg, 29);
    perturb(m, 30);
    Rng rng(31);
    Mat img = rng.normal_matrix(1, cfg.image.size());
    ad::NoGradGuard guard;
    const Mat a = model_forward(m, Var::constant(img), {{0, 2, 5, 0, {1, 2, 3}}}).eps.value();
    const Mat b = model_forward(m, Var::constant(img), {{0, 2, 5, 0, {4}}}).eps.value();
    CHECK(max_abs(a - b) > 1e-6);
    auto lora = flexify_lora(m, 4, 32);
    for (const auto& [p, set] : lora.adapters)
        for (const auto& [k, ad] : set) CHECK(k.find("cross") == std::string::npos);
    // packed with a differently-conditioned neighbour
    const Mat both = model_forward(m, Var::constant(img), {{0, 2, 5, 0, {1, 2, 3}}, {0, 2, 5, 0, {4}}}).eps.value();
    CHECK(max_abs(both.row(0) - a) < 1e-10);
    CHECK(max_abs(both.row(1) - b) < 1e-10);
}

TEST_CASE("full-model gradient check") {
    auto cfg = tiny_config();
    cfg.learned_variance = true;
    auto base = init_model(cfg, 33);
    perturb(base, 34);
    Rng rng(35);
    Mat imgs = rng.normal_matrix(2, cfg.image.size());
    Mat target = rng.normal_matrix(2, cfg.image.size());
    std::vector<BatchItem> items{{0, 2, 4, 1, {}}, {1, 4, 9, 3, {}}};

    SUBCASE("lora") {
        auto lora = flexify_lora(base, 3, 36);
        perturb(lora, 37, 0.1, true);
        std::vector<Var> params;
        std::vector<std::string> names;
        for (auto& np : lora.named_parameters()) {
            if (np.frozen) continue;
            params.push_back(np.var);
            names.push_back(np.name);
        }
        auto loss = [&] {
            auto out = model_forward(lora, Var::constant(imgs), items);
            return ad::add(ad::mean(ad::square(ad::sub(out.eps, Var::constant(target)))),
                           ad::mean(ad::square(out.var_logits)));
        };
        auto res = finite_difference_gradient_check(loss, params, names, {1e-4, 1e-3, 6, 1});
        for (const auto& g : res.groups) CHECK_MESSAGE(g.passed, g.name << " rel " << g.rel_error);
        CHECK(res.groups.size() == params.size());
    }
    SUBCASE("shared") {
        auto flex = flexify_shared(base);
        perturb(flex, 38);
        std::vector<Var> params;
        std::vector<std::string> names;
        for (auto& np : flex.named_parameters()) {
            params.push_back(np.var);
            names.push_back(np.name);
        }
        auto loss = [&] {
            auto out = model_forward(flex, Var::constant(imgs), items);
            return ad::mean(ad::square(ad::sub(out.eps, Var::constant(target))));
        };
        auto res = finite_difference_gradient_check(loss, params, names, {1e-4, 1e-3, 4, 2});
        for (const auto& g : res.groups) {
            // Key biases shift every score of a query equally, so their true gradient is zero.
            if (std::max(g.analytic_norm, g.numeric_norm) < 1e-8) continue;
            CHECK_MESSAGE(g.passed, g.name << " rel " << g.rel_error);
        }
    }
}
