#include "doctest.h"

#include "flexdit/dataset.hpp"
#include "flexdit/flop_counter.hpp"
#include "flexdit/training.hpp"

#include <cmath>
#include <numeric>

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

Dataset tiny_data(Index count = 120) {
    SyntheticSpec spec;
    spec.shape = {1, 8, 8};
    spec.count = count;
    spec.seed = 3;
    return generate(spec);
}

double rbf(const RowVec& a, const RowVec& b, const std::vector<double>& bw) {
    double k = 0;
    for (double s : bw) k += std::exp(-(a - b).squaredNorm() / (2 * s * s));
    return k / static_cast<double>(bw.size());
}

double mmd_oracle(const Mat& x, const Mat& y, const std::vector<double>& bw, bool unbiased) {
    const auto n = x.rows(), m = y.rows();
    double sxx = 0, syy = 0, sxy = 0;
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
            if (!unbiased || i != j) sxx += rbf(x.row(i), x.row(j), bw);
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < m; ++j)
            if (!unbiased || i != j) syy += rbf(y.row(i), y.row(j), bw);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) sxy += rbf(x.row(i), y.row(j), bw);
    const double dn = static_cast<double>(n), dm = static_cast<double>(m);
    const double nx = unbiased ? dn * (dn - 1) : dn * dn;
    const double ny = unbiased ? dm * (dm - 1) : dm * dm;
    return sxx / nx + syy / ny - 2 * sxy / (dn * dm);
}

// Standard error of the paired U-statistic with h(z_i, z_j) =
// k(x_i,x_j) + k(y_i,y_j) - k(x_i,y_j) - k(x_j,y_i): sqrt(4/n Var_i[mean_j h]).
double mmd_standard_error(const Mat& x, const Mat& y, double bw) {
    const Index n = x.rows();
    Vec h1(n);
    for (Index i = 0; i < n; ++i) {
        double s = 0;
        for (Index j = 0; j < n; ++j) {
            if (i == j) continue;
            s += rbf(x.row(i), x.row(j), {bw}) + rbf(y.row(i), y.row(j), {bw}) - rbf(x.row(i), y.row(j), {bw}) -
                 rbf(x.row(j), y.row(i), {bw});
        }
        h1(i) = s / static_cast<double>(n - 1);
    }
    const double var = (h1.array() - h1.mean()).square().sum() / static_cast<double>(n - 1);
    return std::sqrt(4.0 * var / static_cast<double>(n));
}

}  // namespace

TEST_CASE("distillation loss") {
    Rng rng(1);
    const Mat a = rng.normal_matrix(5, 7);
    CHECK(distill_loss(Var::constant(a), Var::parameter(a)).item() == 0.0);

    Mat e = Mat::Zero(3, 4);
    for (Index i = 0; i < 3; ++i) e(i, i) = 1.0;
    CHECK(distill_loss(Var::constant(Mat::Zero(3, 4)), Var::constant(e)).item() == doctest::Approx(1.0));

    const Mat b = rng.normal_matrix(5, 7);
    double oracle = 0;
    for (Index i = 0; i < 5; ++i) {
        double s = 0;
        for (Index j = 0; j < 7; ++j) s += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j));
        oracle += std::sqrt(s);
    }
    oracle /= 5;
    Var w = Var::parameter(b);
    Var loss = distill_loss(Var::constant(a), w);
    CHECK(loss.item() == doctest::Approx(oracle).epsilon(1e-14));
    loss.backward();
    // d/dw mean_i ||w_i - a_i|| = (w_i - a_i) / (n ||w_i - a_i||)
    for (Index i = 0; i < 5; ++i) {
        const RowVec g = (b.row(i) - a.row(i)) / (5.0 * (b.row(i) - a.row(i)).norm());
        CHECK((w.grad().row(i) - g).norm() < 1e-12);
    }
    CHECK_THROWS_AS(distill_loss(Var::parameter(a), Var::constant(b)), Error);
    CHECK_THROWS_AS(distill_loss(Var::constant(a), Var::constant(Mat::Zero(5, 6))), ShapeError);
}

TEST_CASE("MMD matches a double-sum oracle") {
    Rng rng(2);
    for (Index n : {2, 5, 17, 64}) {
        const Mat x = rng.normal_matrix(n, 3);
        const Mat y = rng.normal_matrix(n + 3, 3, 1.5);
        for (bool unbiased : {true, false}) {
            MmdOptions fixed;
            fixed.unbiased = unbiased;
            fixed.bandwidths = {0.7, 2.0};
            CHECK(std::abs(mmd2(x, y, fixed) - mmd_oracle(x, y, fixed.bandwidths, unbiased)) < 1e-12);

            MmdOptions med;
            med.unbiased = unbiased;
            const auto bw = mmd_bandwidths(x, y, med);
            REQUIRE(bw.size() == 3);
            CHECK(std::abs(mmd2(x, y, med) - mmd_oracle(x, y, bw, unbiased)) < 1e-12);
        }
    }
    // median of distinct pairwise distances on a line: points 0, 1, 3 -> {1, 2, 3}
    Mat p(2, 1), q(1, 1);
    p << 0, 1;
    q << 3;
    CHECK(median_pairwise_distance(p, q) == 2.0);

    const Mat z = rng.normal_matrix(10, 2);
    MmdOptions biased;
    biased.unbiased = false;
    CHECK(std::abs(mmd2(z, z, biased)) < 1e-15);
    CHECK_THROWS_AS(mmd2(z.topRows(1), z), ShapeError);
    CHECK_THROWS_AS(mmd2(z, rng.normal_matrix(10, 3)), ShapeError);
}

TEST_CASE("MMD separates shifted Gaussians and not identical ones") {
    Rng rng(3);
    const Index n = 500;
    MmdOptions opts;
    opts.bandwidths = {1.0};
    const Mat x = rng.normal_matrix(n, 1);
    const Mat y = (rng.normal_matrix(n, 1).array() + 1.0).matrix();
    const double shifted = mmd2(x, y, opts);
    CHECK(shifted > 5 * mmd_standard_error(x, y, 1.0));

    const Mat x2 = rng.normal_matrix(n, 1);
    const double same = mmd2(x, x2, opts);
    CHECK(std::abs(same) < 3 * mmd_standard_error(x, x2, 1.0));
}

TEST_CASE("MMD gradient matches finite differences") {
    Rng rng(4);
    MmdOptions opts;
    opts.bandwidths = {1.0, 3.0};
    const Mat y = rng.normal_matrix(6, 2);
    Var x = Var::parameter(rng.normal_matrix(5, 2));
    mmd2(x, Var::constant(y), opts).backward();
    const double h = 1e-6;
    for (Index i = 0; i < x.value().size(); ++i) {
        Mat plus = x.value(), minus = x.value();
        plus.data()[i] += h;
        minus.data()[i] -= h;
        const double fd = (mmd2(plus, y, opts) - mmd2(minus, y, opts)) / (2 * h);
        CHECK(x.grad().data()[i] == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("bootstrap schedule intervals") {
    BootstrapSchedule s;
    s.patch_sizes = {4, 2};
    s.steps = {2, 1};
    CHECK(s.length() == 3);
    const auto chain = s.chain(10);
    REQUIRE(chain.size() == 3);
    CHECK(chain[0] == std::pair{13, 4});
    CHECK(chain[1] == std::pair{12, 4});
    CHECK(chain[2] == std::pair{11, 2});
    CHECK(s.interval(0, 10) == std::pair{11, 13});
    CHECK(s.interval(1, 10) == std::pair{10, 11});
    CHECK(BootstrapSchedule::parse("4:2,2:1").to_string() == "4:2,2:1");
    CHECK_THROWS_AS(BootstrapSchedule::parse("4-2"), ConfigError);
    CHECK_THROWS_AS(BootstrapSchedule::parse("4:0"), ConfigError);
    CHECK_THROWS_AS(s.patch_size_at(10, 10), ShapeError);

    // every step in (t, t + length] belongs to exactly one stage, stages in order
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        BootstrapSchedule r;
        const int stages = 1 + static_cast<int>(rng.below(4));
        for (int i = 0; i < stages; ++i) {
            r.patch_sizes.push_back(1 << (1 + i));
            r.steps.push_back(static_cast<int>(rng.below(4)));
        }
        if (r.length() == 0) r.steps[0] = 1;
        const int t = 1 + static_cast<int>(rng.below(50));
        const auto c = r.chain(t);
        REQUIRE(static_cast<int>(c.size()) == r.length());
        for (std::size_t k = 0; k < c.size(); ++k) {
            CHECK(c[k].first == t + r.length() - static_cast<int>(k));
            CHECK(r.patch_size_at(c[k].first, t) == c[k].second);
        }
        int covered = 0;
        for (std::size_t i = 0; i < r.steps.size(); ++i) {
            auto [lo, hi] = r.interval(i, t);
            CHECK(hi - lo == r.steps[i]);
            covered += hi - lo;
            if (i + 1 < r.steps.size()) CHECK(r.interval(i + 1, t).second == lo);
        }
        CHECK(covered == r.length());
    }
}

TEST_CASE("bootstrap target distribution") {
    Rng rng(6);
    int low = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const int t = sample_bootstrap_target(100, 3, rng);
        CHECK(t >= 1);
        CHECK(t <= 97);
        if (t <= 25) ++low;
    }
    // P(ceil(100 u^2) <= 25) = P(u <= 0.5) = 0.5
    CHECK(std::abs(low / static_cast<double>(n) - 0.5) < 0.02);
    CHECK_THROWS_AS(sample_bootstrap_target(10, 10, rng), ConfigError);
}

TEST_CASE("only the last chain step carries gradients") {
    BootstrapSchedule s;
    s.patch_sizes = {4, 2};
    s.steps = {3, 1};
    Var w = Var::parameter(Mat::Constant(1, 1, 0.5));
    const Mat x0 = Mat::Zero(2, 3);
    std::vector<std::pair<int, int>> seen;
    auto step = [&](const Var& x, int t, int p) {
        seen.emplace_back(t, p);
        Mat ones = Mat::Ones(x.rows(), 1);
        return ad::add(x, ad::matmul(Var::constant(ones), ad::matmul(w, Var::constant(Mat::Ones(1, x.cols())))));
    };
    Var out = run_bootstrap_chain(Var::constant(x0), 5, s, step);
    CHECK(seen == s.chain(5));
    CHECK((out.value().array() == 2.0).all());
    ad::sum(out).backward();
    CHECK(w.grad()(0, 0) == doctest::Approx(6.0));  // one step's worth: 2 x 3 entries
}

TEST_CASE("bootstrapped MMD loss") {
    auto base = init_model(tiny_config(), 1);
    const auto data = tiny_data(16);
    const Mat x0 = data.images();
    const auto sched = NoiseSchedule::linear(base.cfg.steps);
    BootstrapSchedule s = BootstrapSchedule::parse("4:2,2:1");
    CHECK_THROWS_AS(bootstrap_mmd_loss(base, sched, x0, x0, data.int_labels(), s, 1), ConfigError);

    auto shared = flexify_shared(base);
    const auto labels = data.int_labels();
    const std::vector<int> tail(labels.begin() + 8, labels.end());
    BootstrapDraw draw;
    Var loss = bootstrap_mmd_loss(shared, sched, x0.topRows(8), x0.bottomRows(8),
                                  tail, s, 7, {},
                                  &draw);
    CHECK(draw.t_target >= 1);
    CHECK(draw.t_start == draw.t_target + 3);
    CHECK(draw.t_start <= sched.steps);
    CHECK(std::isfinite(loss.item()));
    loss.backward();
    double gn = 0;
    for (const auto& p : shared.trainable_parameters())
        if (p.has_grad()) gn += p.grad().squaredNorm();
    CHECK(std::isfinite(gn));
    CHECK(gn > 0);

    Var again = bootstrap_mmd_loss(shared, sched, x0.topRows(8), x0.bottomRows(8),
                                   tail, s, 7);
    CHECK(again.item() == loss.item());
}

TEST_CASE("pretraining reduces the loss and counts FLOPs") {
    auto model = init_model(tiny_config(), 2);
    const auto data = tiny_data();
    TrainConfig cfg;
    cfg.steps = 150;
    cfg.batch = 16;
    cfg.adam.lr = 2e-3;
    cfg.seed = 9;
    TrainState state;
    std::vector<double> losses;
    train(model, data.images(), data.int_labels(), TrainMode::pretrain, cfg, state,
          [&](const TrainMetrics& m) {
              CHECK(m.p == 2);
              losses.push_back(m.loss);
          });
    REQUIRE(losses.size() == 150);
    const double first = std::accumulate(losses.begin(), losses.begin() + 20, 0.0) / 20;
    const double last = std::accumulate(losses.end() - 20, losses.end(), 0.0) / 20;
    CHECK(last < 0.8 * first);

    std::int64_t fwd = 0;
    {
        FlopCounter fc;
        ad::NoGradGuard guard;
        model_forward(model, data.images().topRows(16), std::vector<int>(16, 5), std::vector<int>(16, 0), 2);
        fwd = fc.total();
    }
    CHECK(state.flops == 150 * 3 * fwd);
}

TEST_CASE("resumed training continues exactly") {
    const auto data = tiny_data(40);
    TrainConfig cfg;
    cfg.steps = 8;
    cfg.batch = 4;
    cfg.seed = 4;
    auto a = init_model(tiny_config(), 3);
    auto b = a.clone();
    TrainState sa, sb;
    train(a, data.images(), data.int_labels(), TrainMode::pretrain, cfg, sa);

    TrainConfig half = cfg;
    half.steps = 3;
    train(b, data.images(), data.int_labels(), TrainMode::pretrain, half, sb);
    TrainState copy = sb;
    train(b, data.images(), data.int_labels(), TrainMode::pretrain, cfg, copy);

    CHECK(copy.step == 8);
    CHECK(checksum(copy.ema) == checksum(sa.ema));
    CHECK(copy.flops == sa.flops);
    std::vector<Mat> pa, pb;
    for (const auto& p : a.trainable_parameters()) pa.push_back(p.value());
    for (const auto& p : b.trainable_parameters()) pb.push_back(p.value());
    CHECK(checksum(pa) == checksum(pb));
}

TEST_CASE("EMA rates") {
    const auto data = tiny_data(40);
    TrainConfig cfg;
    cfg.steps = 3;
    cfg.batch = 4;
    auto model = init_model(tiny_config(), 4);
    std::vector<Mat> init;
    for (const auto& p : model.trainable_parameters()) init.push_back(p.value());

    cfg.ema_rate = 1.0;
    TrainState s1;
    auto m1 = model.clone();
    train(m1, data.images(), data.int_labels(), TrainMode::pretrain, cfg, s1);
    CHECK(checksum(s1.ema) == checksum(init));

    cfg.ema_rate = 0.0;
    TrainState s0;
    auto m0 = model.clone();
    train(m0, data.images(), data.int_labels(), TrainMode::pretrain, cfg, s0);
    std::vector<Mat> now;
    for (const auto& p : m0.trainable_parameters()) now.push_back(p.value());
    CHECK(checksum(s0.ema) == checksum(now));

    load_shadow(m1, s1.ema);
    std::vector<Mat> loaded;
    for (const auto& p : m1.trainable_parameters()) loaded.push_back(p.value());
    CHECK(checksum(loaded) == checksum(init));
    CHECK_THROWS_AS(load_shadow(m1, {}), ShapeError);
}

TEST_CASE("LoRA distillation leaves the pretrained weights untouched") {
    auto base = init_model(tiny_config(), 5);
    const auto data = tiny_data(40);
    TrainConfig pre;
    pre.steps = 20;
    pre.batch = 8;
    TrainState ps;
    train(base, data.images(), data.int_labels(), TrainMode::pretrain, pre, ps);

    auto model = flexify_lora(base, 4, 6);
    std::vector<Mat> frozen;
    for (const auto& np : model.named_parameters())
        if (np.frozen) frozen.push_back(np.var.value());

    TrainConfig cfg;
    cfg.steps = 30;
    cfg.batch = 8;
    cfg.adam.lr = 3e-3;
    TrainState state;
    std::vector<double> d;
    train(model, data.images(), data.int_labels(), TrainMode::lora, cfg, state, [&](const TrainMetrics& m) {
        CHECK(m.p == 4);
        d.push_back(m.distill);
    });
    std::vector<Mat> after;
    for (const auto& np : model.named_parameters())
        if (np.frozen) after.push_back(np.var.value());
    CHECK(checksum(after) == checksum(frozen));
    CHECK(d.back() < d.front());

    // the powerful path is still the pretrained model
    const Mat x = data.images().topRows(3);
    ad::NoGradGuard guard;
    const Mat a = model_forward(base, x, {3, 7, 11}, {0, 1, 2}, 2).eps.value();
    const Mat b = model_forward(model, x, {3, 7, 11}, {0, 1, 2}, 2).eps.value();
    CHECK(a == b);
}

TEST_CASE("shared training with the MMD term") {
    auto base = init_model(tiny_config(), 7);
    auto model = flexify_shared(base);
    const auto data = tiny_data(40);
    TrainConfig cfg;
    cfg.steps = 4;
    cfg.batch = 6;
    cfg.mmd_weight = 0.5;
    cfg.bootstrap = BootstrapSchedule::parse("4:2,2:1");
    TrainState state;
    std::vector<int> ps;
    train(model, data.images(), data.int_labels(), TrainMode::shared, cfg, state, [&](const TrainMetrics& m) {
        CHECK(std::isfinite(m.mmd));
        CHECK(m.loss == doctest::Approx(m.mse + 0.5 * m.mmd));
        ps.push_back(m.p);
    });
    CHECK(ps.size() == 4);

    TrainState bad;
    CHECK_THROWS_AS(train(base, data.images(), data.int_labels(), TrainMode::shared, cfg, bad), ConfigError);
    cfg.mmd_weight = 0.0;
    CHECK_THROWS_AS(train(model, data.images(), data.int_labels(), TrainMode::pretrain, cfg, bad), ConfigError);
    CHECK_THROWS_AS(train(model, Mat::Zero(0, 64), {}, TrainMode::shared, cfg, bad), DataError);
    CHECK_THROWS_AS(train(model, Mat::Zero(4, 10), {0, 0, 0, 0}, TrainMode::shared, cfg, bad), DataError);
}
