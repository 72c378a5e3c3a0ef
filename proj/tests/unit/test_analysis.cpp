#include "doctest.h"

#include "flexdit/analysis.hpp"
#include "flexdit/random.hpp"

#include <complex>
#include <numbers>

using namespace flexdit;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.image = {1, 8, 8};
    cfg.steps = 10;
    cfg.lora_rank = 4;
    return cfg;
}

void perturb(ModelParams& m, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& np : m.named_parameters()) {
        if (np.frozen) continue;
        if (m.psize.frozen_zero != 0 && np.name == "psize.p" + std::to_string(m.psize.frozen_zero)) continue;
        np.var.mutable_value() += rng.normal_matrix(np.var.rows(), np.var.cols(), 0.1);
    }
}

// Direct O(n^4) low-pass: keep DFT coefficients with radius <= cutoff.
Mat lowpass_oracle(const Mat& g, double cutoff) {
    const Index h = g.rows(), w = g.cols();
    using C = std::complex<double>;
    std::vector<C> F(static_cast<std::size_t>(h * w));
    for (Index ky = 0; ky < h; ++ky)
        for (Index kx = 0; kx < w; ++kx) {
            C s = 0;
            for (Index y = 0; y < h; ++y)
                for (Index x = 0; x < w; ++x)
                    s += g(y, x) * std::polar(1.0, -2 * std::numbers::pi * (double(ky * y) / h + double(kx * x) / w));
            const double fy = double(ky <= h / 2 ? ky : ky - h) / (h / 2.0);
            const double fx = double(kx <= w / 2 ? kx : kx - w) / (w / 2.0);
            F[static_cast<std::size_t>(ky * w + kx)] = std::sqrt(fy * fy + fx * fx) <= cutoff ? s : C(0);
        }
    Mat out(h, w);
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            C s = 0;
            for (Index ky = 0; ky < h; ++ky)
                for (Index kx = 0; kx < w; ++kx)
                    s += F[static_cast<std::size_t>(ky * w + kx)] *
                         std::polar(1.0, 2 * std::numbers::pi * (double(ky * y) / h + double(kx * x) / w));
            out(y, x) = s.real() / double(h * w);
        }
    return out;
}

double ssim_oracle(const Mat& a, const Mat& b, int win) {
    const double c1 = 0.0004, c2 = 0.0036;
    double total = 0;
    int count = 0;
    for (Index r = 0; r + win <= a.rows(); ++r)
        for (Index q = 0; q + win <= a.cols(); ++q) {
            double sa = 0, sb = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    sa += a(r + i, q + j);
                    sb += b(r + i, q + j);
                }
            const double n = win * win, ma = sa / n, mb = sb / n;
            double va = 0, vb = 0, cab = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    va += (a(r + i, q + j) - ma) * (a(r + i, q + j) - ma);
                    vb += (b(r + i, q + j) - mb) * (b(r + i, q + j) - mb);
                    cab += (a(r + i, q + j) - ma) * (b(r + i, q + j) - mb);
                }
            va /= n;
            vb /= n;
            cab /= n;
            total += (2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / count;
}

}  // namespace

TEST_CASE("band filters") {
    Rng rng(1);
    const ImageShape shape{2, 8, 16};
    const Mat x = rng.normal_matrix(3, shape.size());
    for (double cutoff : {0.1, 0.5, 0.9, 1.0}) {
        const Mat low = BandFilter{BandKind::low, cutoff}.apply(x, shape);
        const Mat high = BandFilter{BandKind::high, cutoff}.apply(x, shape);
        // complementary up to one rounding per element
        CHECK(((low + high) - x).cwiseAbs().maxCoeff() <= 4e-16 * (1 + x.cwiseAbs().maxCoeff()));
        const Mat plane = Eigen::Map<const Mat>(x.row(1).data() + 128, 8, 16);
        const Mat expect = lowpass_oracle(plane, cutoff);
        const Mat got = Eigen::Map<const Mat>(low.row(1).data() + 128, 8, 16);
        CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK(BandFilter{BandKind::all, 0.3}.apply(x, shape) == x);
    // the full disc of radius sqrt(2) would be needed to keep the corners
    CHECK((BandFilter{BandKind::low, 1.0}.apply(x, shape) - x).norm() > 1e-3);
    // constant images are pure DC
    const Mat flat = Mat::Constant(1, shape.size(), 0.7);
    CHECK(BandFilter{BandKind::high, 0.2}.apply(flat, shape).cwiseAbs().maxCoeff() < 1e-14);
    CHECK_THROWS_AS((BandFilter{BandKind::low, 0.0}.apply(x, shape)), ConfigError);
    CHECK_THROWS_AS((BandFilter{BandKind::low, 1.5}.validate()), ConfigError);
    CHECK_THROWS_AS(band_kind_from_string("band"), ConfigError);
    CHECK_THROWS_AS((BandFilter{BandKind::low, 0.5}.apply(rng.normal_matrix(1, 3 * 6 * 6), {3, 6, 6})), ShapeError);
}

TEST_CASE("filtered single-step generation") {
    auto base = init_model(tiny_config(), 2);
    perturb(base, 1);
    auto model = flexify_lora(base, 4, 3);
    perturb(model, 4);
    const auto sched = NoiseSchedule::linear(10);
    const auto plan = make_plan(10, 0, PlanStyle::weak_first, 4, 2, -1, -1);
    const auto cond = class_conditions({0, 1, 2});

    const auto all = filtered_step_generate(model, sched, plan, cond, 5, 7, {BandKind::all, 0.5});
    CHECK(all.filtered == all.baseline);
    for (double v : all.l2) CHECK(v == 0.0);
    for (double v : all.ssim) CHECK(v == doctest::Approx(1.0));

    // low and high filtered predictions add back to the unfiltered one at the filtered step
    Mat seen_low, seen_high, seen_full;
    auto capture = [&](BandKind kind, Mat& into) {
        SampleOptions so;
        so.prediction_hook = [&, kind](int t, StepPrediction& p) {
            if (t != 7) return;
            seen_full = p.eps;
            p.eps = BandFilter{kind, 0.5}.apply(p.eps, model.cfg.image);
            into = p.eps;
        };
        sample_plan(model, sched, plan, cond, 5, so);
    };
    capture(BandKind::low, seen_low);
    capture(BandKind::high, seen_high);
    CHECK(((seen_low + seen_high) - seen_full).cwiseAbs().maxCoeff() <= 4e-16 * (1 + seen_full.cwiseAbs().maxCoeff()));

    const auto hp = filtered_step_generate(model, sched, plan, cond, 5, 7, {BandKind::high, 0.5});
    CHECK(hp.mean_l2 > 0);
    CHECK(hp.baseline == all.baseline);
    CHECK_THROWS_AS(filtered_step_generate(model, sched, plan, cond, 5, 11, {BandKind::high, 0.5}), ConfigError);
    CHECK_THROWS_AS(filtered_step_generate(model, sched, plan, cond, 5, 0, {BandKind::high, 0.5}), ConfigError);
}

TEST_CASE("divergence curve") {
    auto model = flexify_lora(init_model(tiny_config(), 6), 4, 7);
    perturb(model, 8);
    const auto sched = NoiseSchedule::linear(10);
    Rng rng(9);
    const Mat probes = rng.normal_matrix(6, 64);
    const std::vector<int> labels{0, 1, 2, 0, 1, 2};
    const auto curve = divergence_curve(model, sched, probes, labels, {1, 4, 7, 10}, 4, 2, 3);
    REQUIRE(curve.mean_l2.size() == 4);
    for (double v : curve.mean_l2) CHECK(v > 0);
    const auto same = divergence_curve(model, sched, probes, labels, {1, 4, 7, 10}, 2, 2, 3);
    for (double v : same.mean_l2) CHECK(v == 0.0);
    CHECK(divergence_curve(model, sched, probes, labels, {4}, 4, 2, 3).mean_l2[0] == curve.mean_l2[1]);
    CHECK_THROWS_AS(divergence_curve(init_model(tiny_config(), 1), sched, probes, labels, {1}, 4, 2, 3), ConfigError);
}

TEST_CASE("spearman") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    // ties get average ranks: a = {1, 2, 2, 3} -> {1, 2.5, 2.5, 4}
    const double r = spearman({1, 2, 2, 3}, {1, 2, 3, 4});
    const double ra[] = {1, 2.5, 2.5, 4}, rb[] = {1, 2, 3, 4};
    double sab = 0, saa = 0, sbb = 0;
    for (int i = 0; i < 4; ++i) {
        sab += (ra[i] - 2.5) * (rb[i] - 2.5);
        saa += (ra[i] - 2.5) * (ra[i] - 2.5);
        sbb += (rb[i] - 2.5) * (rb[i] - 2.5);
    }
    CHECK(r == doctest::Approx(sab / std::sqrt(saa * sbb)));
    // no ties: 1 - 6 sum d^2 / (n (n^2 - 1))
    CHECK(spearman({3, 1, 4, 5, 9}, {2, 7, 1, 8, 3}) == doctest::Approx(1 - 6.0 * (0 + 9 + 4 + 1 + 4) / (5 * 24)));
    CHECK_THROWS_AS(spearman({1}, {1}), ShapeError);
}

TEST_CASE("activation distances") {
    auto model = init_model(tiny_config(), 10);
    perturb(model, 11);
    const auto sched = NoiseSchedule::linear(10);
    const auto cond = class_conditions({0, 2});
    const std::vector<std::string> taps{"embed", "block1", "final"};
    const auto dump = record_activations(model, sched, 2, cond, 12, taps);
    REQUIRE(dump.size() == 10);
    const Mat d = activation_distance(dump, taps, 2);
    CHECK(d.rows() == 3);
    CHECK(d.cols() == 9);
    // offline recomputation from the dump
    for (std::size_t i = 0; i < taps.size(); ++i)
        for (Index k = 0; k < 9; ++k) {
            const Mat& a = dump[static_cast<std::size_t>(k)].at(taps[i]);
            const Mat& b = dump[static_cast<std::size_t>(k + 1)].at(taps[i]);
            const Index per = a.rows() / 2;
            double s = 0;
            for (Index img = 0; img < 2; ++img) {
                double sq = 0;
                for (Index r = img * per; r < (img + 1) * per; ++r)
                    for (Index c = 0; c < a.cols(); ++c) sq += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
                s += std::sqrt(sq);
            }
            CHECK(std::abs(d(static_cast<Index>(i), k) - s / 2) < 1e-12);
        }
    // tap order only permutes rows
    const Mat rev = activation_distance(dump, {"final", "block1", "embed"}, 2);
    CHECK(rev.row(0) == d.row(2));
    CHECK(rev.row(2) == d.row(0));
    // a frozen trajectory has zero drift
    ActivationDump frozen(5, dump.front());
    CHECK(activation_distance(frozen, taps, 2).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(record_activations(model, sched, 2, cond, 12, {"block7"}), ConfigError);
    CHECK_THROWS_AS(activation_distance(dump, {"block0"}, 2), ConfigError);
}

TEST_CASE("ssim and diversity") {
    Rng rng(13);
    const ImageShape shape{1, 16, 16};
    const Mat a = rng.normal_matrix(1, 256, 0.4);
    const Mat b = rng.normal_matrix(1, 256, 0.4);
    CHECK(ssim(a, a, shape) == doctest::Approx(1.0));
    const Mat ga = Eigen::Map<const Mat>(a.data(), 16, 16), gb = Eigen::Map<const Mat>(b.data(), 16, 16);
    CHECK(std::abs(ssim(a, b, shape) - ssim_oracle(ga, gb, 8)) < 1e-9);
    CHECK(std::abs(ssim(a, b, shape, 4) - ssim_oracle(ga, gb, 4)) < 1e-9);
    // zero mean in every window: the luminance term is 1 and the structure term negative
    RowVec z(256);
    for (Index i = 0; i < 256; ++i) z(i) = ((i / 16 + i % 16) % 2 == 0 ? 0.3 : -0.3);
    CHECK(ssim(z, -z, shape) == doctest::Approx((0.0036 - 2 * 0.09) / (2 * 0.09 + 0.0036)));
    CHECK(ssim(a, b, shape) >= -1.0);
    CHECK(ssim(a, b, shape) <= 1.0);
    CHECK_THROWS_AS(ssim(a, b, {1, 8, 8}), ShapeError);
    CHECK_THROWS_AS(ssim(a, b, shape, 17), ShapeError);

    const ImageShape rgb{3, 8, 8};
    const Mat s = rng.normal_matrix(4, rgb.size());
    const auto div = diversity(s, rgb);
    CHECK(div.pairs == 6);
    double l2 = 0;
    for (Index i = 0; i < 4; ++i)
        for (Index j = i + 1; j < 4; ++j) l2 += (s.row(i) - s.row(j)).norm();
    CHECK(div.mean_l2 == doctest::Approx(l2 / 6));
    const auto same = diversity(s.topRows(1).replicate(3, 1), rgb);
    CHECK(same.mean_l2 == 0.0);
    CHECK(same.mean_ssim == doctest::Approx(1.0));
}
