#include "doctest.h"

#include "flexdit/backbone.hpp"
#include "flexdit/diffusion.hpp"
#include "flexdit/optim.hpp"
#include "flexdit/random.hpp"

#include <cmath>

using namespace flexdit;
using ad::Var;

namespace {

struct Moments {
    double mean = 0, var = 0;
};

Moments moments(const Mat& m) {
    Moments r;
    r.mean = m.mean();
    r.var = (m.array() - r.mean).square().sum() / static_cast<double>(m.size() - 1);
    return r;
}

// Per-dimension Gaussian data N(mu, sigma^2); the Bayes-optimal eps
// prediction is E[eps | x_t], linear in x_t.
StepDenoiser gaussian_oracle(const NoiseSchedule& s, double mu, double sigma) {
    return [&s, mu, sigma](const Mat& x, int t) {
        const double ab = s.alpha_bar_at(t);
        const double var = ab * sigma * sigma + 1.0 - ab;
        return StepPrediction{(std::sqrt(1.0 - ab) / var) * (x.array() - std::sqrt(ab) * mu).matrix(), {}};
    };
}

}  // namespace

TEST_CASE("noise schedule") {
    Vec b = Vec::Constant(3, 0.02);
    auto c = NoiseSchedule::from_betas(b);
    CHECK(c.alpha_bar_at(3) == doctest::Approx(0.941192).epsilon(1e-15));
    CHECK(std::abs(c.alpha_bar_at(3) - 0.98 * 0.98 * 0.98) < 1e-15);

    auto k = NoiseSchedule::linear(1000);
    CHECK(k.beta_at(1) == doctest::Approx(1e-4));
    CHECK(k.beta_at(1000) == doctest::Approx(0.02));
    for (int T : {100, 250, 1000}) {
        auto s = NoiseSchedule::linear(T);
        for (int t = 2; t <= T; ++t) {
            CHECK(s.beta_at(t) > s.beta_at(t - 1));
            CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
        }
        CHECK(s.alpha_bar_at(T) < 1e-3);
        CHECK(s.posterior_var(0) == 0.0);
        CHECK(std::isfinite(s.posterior_log_var(0)));
    }
    CHECK_THROWS_AS(k.index(0), ShapeError);
    CHECK_THROWS_AS(k.index(1001), ShapeError);
    CHECK_THROWS_AS(NoiseSchedule::from_betas(Vec::Constant(2, 1.0)), ConfigError);
}

TEST_CASE("q_sample") {
    auto s = NoiseSchedule::linear(100);
    Rng rng(1);
    Mat x0 = rng.normal_matrix(4, 6);
    CHECK(q_sample(s, x0, 30, Mat::Zero(4, 6)) == std::sqrt(s.alpha_bar_at(30)) * x0);
    CHECK_THROWS_AS(q_sample(s, x0, 0, Mat::Zero(4, 6)), ShapeError);

    const Index n = 100000;
    Mat eps = rng.normal_matrix(n, 1);
    for (int t : {1, 10, 60, 100}) {
        auto m = moments(q_sample(s, Mat::Zero(n, 1), t, eps));
        CHECK(std::abs(m.var / (1.0 - s.alpha_bar_at(t)) - 1.0) < 0.02);
    }
}

TEST_CASE("iterated forward transitions match the closed-form marginal") {
    auto s = NoiseSchedule::linear(50);
    const Index n = 100000;
    Mat x0 = Mat::Constant(n, 1, 1.5);
    Rng rng(2);
    Mat x = x0;
    for (int t = 1; t <= 30; ++t) {
        x = q_step(s, x, t, rng.normal_matrix(n, 1));
        if (t == 5 || t == 17 || t == 30) {
            auto m = moments(x);
            const double want_mean = std::sqrt(s.alpha_bar_at(t)) * 1.5;
            const double want_var = 1.0 - s.alpha_bar_at(t);
            CHECK(std::abs(m.mean - want_mean) < 0.02 * std::max(1.0, std::abs(want_mean)));
            CHECK(std::abs(m.var / want_var - 1.0) < 0.02);
        }
    }
}

TEST_CASE("reverse step closed forms") {
    auto s = NoiseSchedule::linear(20);
    Rng rng(3);
    Mat x = rng.normal_matrix(2, 5);
    Mat z = rng.normal_matrix(2, 5);
    StepPrediction zero{Mat::Zero(2, 5), {}};
    CHECK((p_sample_step(s, x, zero, 1, z) - x / std::sqrt(s.alpha_at(1))).cwiseAbs().maxCoeff() == 0.0);
    CHECK((p_sample_step(s, x, zero, 7, Mat::Zero(2, 5)) - x / std::sqrt(s.alpha_at(7))).cwiseAbs().maxCoeff() == 0.0);
    // t = 1 ignores the noise
    CHECK(p_sample_step(s, x, zero, 1, z) == p_sample_step(s, x, zero, 1, 5.0 * z));

    // learned variance endpoints
    Mat lo = step_variance(s, 7, Mat::Constant(2, 5, -1.0), 2, 5);
    Mat hi = step_variance(s, 7, Mat::Constant(2, 5, 1.0), 2, 5);
    CHECK(lo(0, 0) == doctest::Approx(s.posterior_var(6)).epsilon(1e-12));
    CHECK(hi(1, 4) == doctest::Approx(s.beta_at(7)).epsilon(1e-12));
    CHECK(step_variance(s, 7, Mat(), 2, 5)(0, 0) == s.posterior_var(6));

    // DDIM with the true noise recovers x_{t-1} on the deterministic path
    Mat x0 = rng.normal_matrix(2, 5), e = rng.normal_matrix(2, 5);
    const int t = 9;
    Mat xt = q_sample(s, x0, t, e);
    Mat want = std::sqrt(s.alpha_bar_at(t - 1)) * x0 + std::sqrt(1 - s.alpha_bar_at(t - 1)) * e;
    CHECK((ddim_step(s, xt, e, t) - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("DDPM with the analytic Gaussian denoiser reproduces the data distribution") {
    auto s = NoiseSchedule::linear(1000);
    const double mu = 0.7, sigma = 0.5;
    const Index n = 10000;
    Mat out = sample_loop(s, gaussian_oracle(s, mu, sigma), n, 1, 42);
    auto m = moments(out);
    const double se = sigma / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(m.mean - mu) < 3 * se);
    CHECK(std::abs(m.var / (sigma * sigma) - 1.0) < 0.03);

    SampleOptions ddim;
    ddim.sampler = Sampler::ddim;
    Mat det = sample_loop(s, gaussian_oracle(s, mu, sigma), n, 1, 42, ddim);
    auto md = moments(det);
    CHECK(std::abs(md.mean - mu) < 3 * se);
    CHECK(std::abs(md.var / (sigma * sigma) - 1.0) < 0.03);
    CHECK(sample_loop(s, gaussian_oracle(s, mu, sigma), 16, 1, 43, ddim) ==
          sample_loop(s, gaussian_oracle(s, mu, sigma), 16, 1, 43, ddim));
}

TEST_CASE("sampling is seeded per image") {
    auto s = NoiseSchedule::linear(30);
    auto den = gaussian_oracle(s, 0.0, 1.0);
    Mat a = sample_loop(s, den, 4, 3, 7);
    CHECK(a == sample_loop(s, den, 4, 3, 7));
    CHECK(a != sample_loop(s, den, 4, 3, 8));
    SampleOptions third;
    third.first_image = 2;
    CHECK((sample_loop(s, den, 1, 3, 7, third) - a.row(2)).cwiseAbs().maxCoeff() < 1e-12);

    std::vector<TrajectoryStep> log;
    SampleOptions rec;
    rec.record = true;
    sample_loop(s, den, 2, 3, 7, rec, &log);
    REQUIRE(log.size() == 30);
    CHECK(log.front().t == 30);
    CHECK(log.back().t == 1);
    CHECK(log.front().x_t == initial_noise(7, 2, 3));

    // an identity hook changes nothing
    SampleOptions hook;
    hook.prediction_hook = [](int, StepPrediction&) {};
    CHECK(sample_loop(s, den, 4, 3, 7, hook) == a);
}

TEST_CASE("eps MSE loss") {
    Rng rng(5);
    const Index n = 10000, dim = 16;
    Mat eps = rng.normal_matrix(n, dim);
    CHECK(eps_mse_loss(Var::constant(eps), eps).item() == 0.0);
    CHECK(std::abs(eps_mse_loss(Var::constant(Mat::Zero(n, dim)), eps).item() / dim - 1.0) < 0.02);

    ModelConfig cfg;
    cfg.depth = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.image = {1, 8, 8};
    cfg.steps = 20;
    auto m = init_model(cfg, 6);
    Rng prng(9);
    for (auto& np : m.named_parameters()) np.var.mutable_value() += prng.normal_matrix(np.var.rows(), np.var.cols(), 0.1);
    auto sched = NoiseSchedule::linear(cfg.steps);
    Mat x0 = rng.normal_matrix(2, cfg.image.size());
    Mat noise = rng.normal_matrix(2, cfg.image.size());
    std::vector<int> ts{3, 15};
    Mat xt = q_sample(sched, x0, ts, noise);
    std::vector<Var> params;
    std::vector<std::string> names;
    for (auto& np : m.named_parameters()) {
        if (np.name.rfind("blocks.1.", 0) == 0 || np.name.rfind("embed", 0) == 0) {
            params.push_back(np.var);
            names.push_back(np.name);
        }
    }
    auto loss = [&] { return eps_mse_loss(model_forward(m, xt, ts, {0, 1}, 2).eps, noise); };
    auto res = finite_difference_gradient_check(loss, params, names, {1e-4, 1e-3, 6, 3});
    for (const auto& g : res.groups) {
        if (std::max(g.analytic_norm, g.numeric_norm) < 1e-8) continue;
        CHECK_MESSAGE(g.passed, g.name << " rel " << g.rel_error);
    }
}
