#include "flexdit/analysis.hpp"

#include "flexdit/linalg.hpp"
#include "flexdit/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flexdit {

const char* to_string(BandKind k) {
    switch (k) {
        case BandKind::low: return "low";
        case BandKind::high: return "high";
        case BandKind::all: return "all";
    }
    return "?";
}

BandKind band_kind_from_string(const std::string& s) {
    if (s == "low") return BandKind::low;
    if (s == "high") return BandKind::high;
    if (s == "all") return BandKind::all;
    throw ConfigError("unknown filter '" + s + "' (low, high or all)");
}

void BandFilter::validate() const {
    if (!(cutoff > 0.0 && cutoff <= 1.0)) throw ConfigError("filter cutoff must lie in (0, 1]");
}

Mat radial_frequency(Index h, Index w) {
    Mat r(h, w);
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            const double fy = static_cast<double>(y <= h / 2 ? y : y - h) / (static_cast<double>(h) / 2);
            const double fx = static_cast<double>(x <= w / 2 ? x : x - w) / (static_cast<double>(w) / 2);
            r(y, x) = std::sqrt(fy * fy + fx * fx);
        }
    return r;
}

Mat BandFilter::apply(const Mat& rows, const ImageShape& shape) const {
    validate();
    if (rows.cols() != shape.size()) throw ShapeError("filter input does not match the image shape");
    if (kind == BandKind::all) return rows;
    const Mat radius = radial_frequency(shape.h, shape.w);
    Mat low(rows.rows(), rows.cols());
    const Index plane = Index{shape.h} * shape.w;
    for (Index i = 0; i < rows.rows(); ++i)
        for (Index c = 0; c < shape.c; ++c) {
            const Mat grid = Eigen::Map<const Mat>(rows.row(i).data() + c * plane, shape.h, shape.w);
            auto f = fft2(grid);
            for (Index k = 0; k < f.size(); ++k) {
                if (radius.data()[k] > cutoff) f.data()[k] = 0.0;
            }
            const Mat back = ifft2(f).real();
            std::copy(back.data(), back.data() + plane, low.row(i).data() + c * plane);
        }
    return kind == BandKind::low ? low : Mat(rows - low);
}

FilterComparison filtered_step_generate(const ModelParams& model, const NoiseSchedule& sched,
                                        const InferencePlan& plan, const std::vector<Condition>& cond,
                                        std::uint64_t seed, int step, const BandFilter& filter,
                                        const GuidedOptions& opts) {
    filter.validate();
    if (step < 1 || step > sched.steps) {
        throw ConfigError("filter step " + std::to_string(step) + " is outside [1, " + std::to_string(sched.steps) + "]");
    }
    const ImageShape shape = model.cfg.image;
    FilterComparison out;
    out.baseline = sample_plan(model, sched, plan, cond, seed, {}, opts);
    SampleOptions so;
    so.prediction_hook = [&](int t, StepPrediction& pred) {
        if (t == step && filter.kind != BandKind::all) pred.eps = filter.apply(pred.eps, shape);
    };
    out.filtered = sample_plan(model, sched, plan, cond, seed, so, opts);
    for (Index i = 0; i < out.baseline.rows(); ++i) {
        out.l2.push_back((out.filtered.row(i) - out.baseline.row(i)).norm());
        out.ssim.push_back(ssim(out.filtered.row(i), out.baseline.row(i), shape));
    }
    const auto n = static_cast<double>(out.l2.size());
    if (n > 0) {
        out.mean_l2 = std::accumulate(out.l2.begin(), out.l2.end(), 0.0) / n;
        out.mean_ssim = std::accumulate(out.ssim.begin(), out.ssim.end(), 0.0) / n;
    }
    return out;
}

DivergenceCurve divergence_curve(const ModelParams& model, const NoiseSchedule& sched, const Mat& probes,
                                 const std::vector<int>& labels, const std::vector<int>& ts, int p_weak,
                                 int p_powerful, std::uint64_t seed) {
    if (static_cast<Index>(labels.size()) != probes.rows()) throw ShapeError("one label per probe image required");
    if (!model.has_patch_size(p_weak) || !model.has_patch_size(p_powerful)) {
        throw ConfigError("divergence needs a model that supports both patch sizes");
    }
    DivergenceCurve out;
    out.samples = probes.rows();
    const Index n = probes.rows(), dim = probes.cols();
    ad::NoGradGuard guard;
    for (int t : ts) {
        Mat noise(n, dim);
        for (Index i = 0; i < n; ++i) {
            Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(Stream::probe), static_cast<std::uint64_t>(i),
                                       static_cast<std::uint64_t>(t)}));
            noise.row(i) = rng.normal_matrix(1, dim);
        }
        const Mat xt = q_sample(sched, probes, t, noise);
        const std::vector<int> tv(static_cast<std::size_t>(n), t);
        const Mat ew = model_forward(model, xt, tv, labels, p_weak).eps.value();
        const Mat ep = model_forward(model, xt, tv, labels, p_powerful).eps.value();
        out.ts.push_back(t);
        out.mean_l2.push_back(n == 0 ? 0.0 : (ew - ep).rowwise().norm().mean());
    }
    return out;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman needs two equal-length series of >= 2 values");
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0 || sbb == 0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

std::vector<std::string> model_taps(const ModelParams& model) {
    std::vector<std::string> taps{"embed"};
    for (std::size_t i = 0; i < model.blocks.size(); ++i) taps.push_back("block" + std::to_string(i));
    taps.emplace_back("final");
    return taps;
}

ActivationDump record_activations(const ModelParams& model, const NoiseSchedule& sched, int p,
                                  const std::vector<Condition>& cond, std::uint64_t seed,
                                  const std::vector<std::string>& taps) {
    const auto known = model_taps(model);
    for (const auto& t : taps) {
        if (std::find(known.begin(), known.end(), t) == known.end()) throw ConfigError("unknown activation tap '" + t + "'");
    }
    if (!model.has_patch_size(p)) throw ConfigError("patch size " + std::to_string(p) + " is not supported");
    ActivationDump dump;
    ActivationTap tap = [&](const std::string& name, const Mat& act) {
        if (std::find(taps.begin(), taps.end(), name) != taps.end()) dump.back()[name] = act;
    };
    StepDenoiser denoise = [&](const Mat& x, int t) {
        dump.emplace_back();
        std::vector<BatchItem> items;
        for (Index i = 0; i < x.rows(); ++i) {
            const auto& c = cond[static_cast<std::size_t>(i)];
            items.push_back({i, p, t, c.label, c.text});
        }
        ForwardOptions fo;
        fo.tap = &tap;
        ad::NoGradGuard guard;
        const auto out = model_forward(model, ad::Var::constant(x), items, fo);
        StepPrediction pred{out.eps.value(), {}};
        if (model.cfg.learned_variance) pred.var_logits = out.var_logits.value();
        return pred;
    };
    sample_loop(sched, denoise, static_cast<Index>(cond.size()), model.cfg.image.size(), seed);
    return dump;
}

Mat activation_distance(const ActivationDump& dump, const std::vector<std::string>& taps, Index images) {
    if (images < 1) throw ShapeError("activation distance needs at least one image");
    const Index steps = static_cast<Index>(dump.size());
    Mat out = Mat::Zero(static_cast<Index>(taps.size()), std::max<Index>(steps - 1, 0));
    for (std::size_t i = 0; i < taps.size(); ++i)
        for (Index k = 0; k + 1 < steps; ++k) {
            auto a = dump[static_cast<std::size_t>(k)].find(taps[i]);
            auto b = dump[static_cast<std::size_t>(k + 1)].find(taps[i]);
            if (a == dump[static_cast<std::size_t>(k)].end() || b == dump[static_cast<std::size_t>(k + 1)].end()) {
                throw ConfigError("activation tap '" + taps[i] + "' missing from the dump");
            }
            if (a->second.rows() != b->second.rows() || a->second.cols() != b->second.cols() ||
                a->second.rows() % images != 0) {
                throw ShapeError("activation shapes differ between steps");
            }
            const Index per = a->second.rows() / images;
            double sum = 0;
            for (Index img = 0; img < images; ++img) {
                sum += (a->second.middleRows(img * per, per) - b->second.middleRows(img * per, per)).norm();
            }
            out(static_cast<Index>(i), k) = sum / static_cast<double>(images);
        }
    return out;
}

double ssim(const RowVec& a, const RowVec& b, const ImageShape& shape, int window) {
    if (a.size() != shape.size() || b.size() != shape.size()) throw ShapeError("ssim: images do not match the shape");
    if (window < 1 || window > shape.h || window > shape.w) throw ShapeError("ssim: window larger than the image");
    const double L = 2.0, c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
    const Index plane = Index{shape.h} * shape.w;
    const double n = static_cast<double>(window) * window;
    double total = 0;
    Index count = 0;
    for (Index c = 0; c < shape.c; ++c) {
        const Eigen::Map<const Mat> x(a.data() + c * plane, shape.h, shape.w);
        const Eigen::Map<const Mat> y(b.data() + c * plane, shape.h, shape.w);
        for (Index r = 0; r + window <= shape.h; ++r)
            for (Index q = 0; q + window <= shape.w; ++q) {
                const auto wx = x.block(r, q, window, window);
                const auto wy = y.block(r, q, window, window);
                const double mx = wx.sum() / n, my = wy.sum() / n;
                const double vx = (wx.array() - mx).square().sum() / n;
                const double vy = (wy.array() - my).square().sum() / n;
                const double cxy = ((wx.array() - mx) * (wy.array() - my)).sum() / n;
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
    }
    return total / static_cast<double>(count);
}

DiversityReport diversity(const Mat& samples, const ImageShape& shape) {
    DiversityReport r;
    for (Index i = 0; i < samples.rows(); ++i)
        for (Index j = i + 1; j < samples.rows(); ++j) {
            r.mean_l2 += (samples.row(i) - samples.row(j)).norm();
            r.mean_ssim += ssim(samples.row(i), samples.row(j), shape);
            ++r.pairs;
        }
    if (r.pairs > 0) {
        r.mean_l2 /= static_cast<double>(r.pairs);
        r.mean_ssim /= static_cast<double>(r.pairs);
    }
    return r;
}

}  // namespace flexdit
