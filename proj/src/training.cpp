#include "flexdit/training.hpp"

#include "flexdit/flop_counter.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace flexdit {

ad::Var distill_loss(const ad::Var& powerful, const ad::Var& weak) {
    if (powerful.requires_grad()) throw Error("distill_loss: the powerful (teacher) prediction must not carry gradients");
    if (powerful.rows() != weak.rows() || powerful.cols() != weak.cols()) throw ShapeError("distill_loss: shape mismatch");
    ad::Var norms = ad::sqrt(ad::row_sum(ad::square(ad::sub(weak, powerful))));
    return ad::mean(norms);
}

double median_pairwise_distance(const Mat& x, const Mat& y) {
    Mat z(x.rows() + y.rows(), x.cols());
    z << x, y;
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(z.rows() * (z.rows() - 1) / 2));
    for (Index i = 0; i < z.rows(); ++i)
        for (Index j = i + 1; j < z.rows(); ++j) d.push_back((z.row(i) - z.row(j)).norm());
    if (d.empty()) return 1.0;
    const std::size_t mid = d.size() / 2;
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
    double med = d[mid];
    if (d.size() % 2 == 0) {
        med = 0.5 * (med + *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid)));
    }
    return med > 0 ? med : 1.0;
}

std::vector<double> mmd_bandwidths(const Mat& x, const Mat& y, const MmdOptions& opts) {
    if (!opts.bandwidths.empty()) return opts.bandwidths;
    const double med = median_pairwise_distance(x, y);
    std::vector<double> out;
    for (double f : opts.factors) out.push_back(f * med);
    return out;
}

namespace {

ad::Var rbf_mixture(const ad::Var& sqdist, const std::vector<double>& bandwidths) {
    ad::Var k;
    for (double s : bandwidths) {
        ad::Var term = ad::exp(ad::scale(sqdist, -1.0 / (2.0 * s * s)));
        k = k.defined() ? ad::add(k, term) : term;
    }
    return ad::scale(k, 1.0 / static_cast<double>(bandwidths.size()));
}

ad::Var within_term(const ad::Var& k, bool unbiased) {
    const auto n = static_cast<double>(k.rows());
    if (!unbiased) return ad::scale(ad::sum(k), 1.0 / (n * n));
    Mat mask = Mat::Ones(k.rows(), k.cols());
    mask.diagonal().setZero();
    return ad::scale(ad::sum(ad::mul(k, ad::Var::constant(mask))), 1.0 / (n * (n - 1.0)));
}

}  // namespace

ad::Var mmd2(const ad::Var& xs, const ad::Var& ys, const MmdOptions& opts) {
    if (xs.cols() != ys.cols()) throw ShapeError("mmd2: sample dimensions differ");
    if (opts.unbiased && (xs.rows() < 2 || ys.rows() < 2)) throw ShapeError("mmd2: unbiased estimate needs >= 2 samples per set");
    if (xs.rows() < 1 || ys.rows() < 1) throw ShapeError("mmd2: empty sample set");
    const auto bw = mmd_bandwidths(xs.value(), ys.value(), opts);
    if (bw.empty()) throw ConfigError("mmd2: no kernel bandwidths");
    for (double s : bw) {
        if (!(s > 0)) throw ConfigError("mmd2: bandwidths must be positive");
    }
    ad::Var kxx = rbf_mixture(ad::pairwise_sqdist(xs, xs), bw);
    ad::Var kyy = rbf_mixture(ad::pairwise_sqdist(ys, ys), bw);
    ad::Var kxy = rbf_mixture(ad::pairwise_sqdist(xs, ys), bw);
    const double cross = 2.0 / (static_cast<double>(xs.rows()) * static_cast<double>(ys.rows()));
    return ad::sub(ad::add(within_term(kxx, opts.unbiased), within_term(kyy, opts.unbiased)),
                   ad::scale(ad::sum(kxy), cross));
}

double mmd2(const Mat& xs, const Mat& ys, const MmdOptions& opts) {
    ad::NoGradGuard guard;
    return mmd2(ad::Var::constant(xs), ad::Var::constant(ys), opts).item();
}

// --- bootstrap schedule ------------------------------------------------------

int BootstrapSchedule::length() const {
    int n = 0;
    for (int s : steps) n += s;
    return n;
}

void BootstrapSchedule::validate() const {
    if (patch_sizes.empty() || patch_sizes.size() != steps.size()) {
        throw ConfigError("bootstrap schedule needs one step count per patch size");
    }
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (steps[i] < 0) throw ConfigError("bootstrap step counts must be >= 0");
        if (patch_sizes[i] < 1) throw ConfigError("bootstrap patch sizes must be positive");
    }
    if (length() < 1) throw ConfigError("bootstrap chain must have at least one step");
}

std::pair<int, int> BootstrapSchedule::interval(std::size_t stage, int t_target) const {
    if (stage >= steps.size()) throw ShapeError("bootstrap stage out of range");
    int after = 0;
    for (std::size_t j = stage + 1; j < steps.size(); ++j) after += steps[j];
    return {t_target + after, t_target + after + steps[stage]};
}

int BootstrapSchedule::patch_size_at(int t, int t_target) const {
    for (std::size_t i = 0; i < steps.size(); ++i) {
        auto [lo, hi] = interval(i, t_target);
        if (t > lo && t <= hi) return patch_sizes[i];
    }
    throw ShapeError("step " + std::to_string(t) + " is outside the bootstrap chain");
}

std::vector<std::pair<int, int>> BootstrapSchedule::chain(int t_target) const {
    validate();
    std::vector<std::pair<int, int>> out;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        auto [lo, hi] = interval(i, t_target);
        for (int t = hi; t > lo; --t) out.emplace_back(t, patch_sizes[i]);
    }
    return out;
}

BootstrapSchedule BootstrapSchedule::parse(const std::string& text) {
    BootstrapSchedule s;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        const auto colon = part.find(':');
        if (colon == std::string::npos) throw ConfigError("bootstrap schedule entries look like p:steps, got '" + part + "'");
        try {
            s.patch_sizes.push_back(std::stoi(part.substr(0, colon)));
            s.steps.push_back(std::stoi(part.substr(colon + 1)));
        } catch (const std::logic_error&) {
            throw ConfigError("bad bootstrap schedule entry '" + part + "'");
        }
    }
    s.validate();
    return s;
}

std::string BootstrapSchedule::to_string() const {
    std::string out;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(patch_sizes[i]) + ":" + std::to_string(steps[i]);
    }
    return out;
}

int sample_bootstrap_target(int steps, int chain_length, Rng& rng) {
    if (chain_length < 1 || chain_length >= steps) throw ConfigError("bootstrap chain must be shorter than the diffusion chain");
    const double u = rng.uniform();
    const int t = static_cast<int>(std::ceil(steps * u * u));
    return std::clamp(t, 1, steps - chain_length);
}

ad::Var run_bootstrap_chain(const ad::Var& x_start, int t_target, const BootstrapSchedule& schedule,
                            const ChainStep& step) {
    const auto chain = schedule.chain(t_target);
    ad::Var x = x_start;
    for (std::size_t k = 0; k < chain.size(); ++k) {
        const auto [t, p] = chain[k];
        if (k + 1 < chain.size()) {
            ad::NoGradGuard guard;
            x = step(x, t, p).detach();
        } else {
            x = step(x, t, p);
        }
    }
    return x;
}

ad::Var bootstrap_mmd_loss(const ModelParams& model, const NoiseSchedule& sched, const Mat& x0_target,
                           const Mat& x0_chain, const std::vector<int>& labels_chain,
                           const BootstrapSchedule& schedule, std::uint64_t seed, const MmdOptions& mmd,
                           BootstrapDraw* draw) {
    if (model.mode != FlexMode::shared) throw ConfigError("the bootstrapped MMD loss applies to shared-parameter models only");
    if (static_cast<Index>(labels_chain.size()) != x0_chain.rows()) throw ShapeError("one label per chain image required");
    schedule.validate();
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(Stream::bootstrap)}));
    const int t_target = sample_bootstrap_target(sched.steps, schedule.length(), rng);
    const int t_start = t_target + schedule.length();
    if (draw != nullptr) *draw = {t_target, t_start};
    const Mat target = q_sample(sched, x0_target, t_target, rng.normal_matrix(x0_target.rows(), x0_target.cols()));
    const Mat start = q_sample(sched, x0_chain, t_start, rng.normal_matrix(x0_chain.rows(), x0_chain.cols()));

    auto step = [&](const ad::Var& x, int t, int p) {
        std::vector<BatchItem> items;
        for (Index i = 0; i < x.rows(); ++i) items.push_back({i, p, t, labels_chain[static_cast<std::size_t>(i)], {}});
        ad::Var eps = model_forward(model, x, items).eps;
        ad::Var mean = posterior_mean(sched, x, eps, t);
        if (t == 1) return mean;
        Rng zr(derive_seed(seed, {static_cast<std::uint64_t>(Stream::bootstrap), static_cast<std::uint64_t>(t)}));
        const Mat z = zr.normal_matrix(x.rows(), x.cols());
        return ad::add(mean, ad::Var::constant(std::sqrt(sched.posterior_var(t - 1)) * z));
    };
    ad::Var pred = run_bootstrap_chain(ad::Var::constant(start), t_target, schedule, step);
    return mmd2(pred, ad::Var::constant(target), mmd);
}

// --- training ------------------------------------------------------------------

const char* to_string(TrainMode m) {
    switch (m) {
        case TrainMode::pretrain: return "pretrain";
        case TrainMode::shared: return "shared";
        case TrainMode::lora: return "lora";
    }
    return "?";
}

std::string TrainMetrics::to_line() const {
    std::ostringstream os;
    os.precision(17);
    os << "step=" << step << " loss=" << loss << " mse=" << mse << " mmd=" << mmd << " distill=" << distill
       << " p=" << p << " grad_norm=" << grad_norm << " flops=" << flops << " ema_checksum=" << std::hex
       << ema_checksum;
    return os.str();
}

std::uint64_t checksum(const std::vector<Mat>& tensors) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tensors) h = fnv1a(t.data(), static_cast<std::size_t>(t.size()) * sizeof(double), h);
    return h;
}

void load_shadow(ModelParams& model, const std::vector<Mat>& shadow) {
    auto params = model.trainable_parameters();
    if (params.size() != shadow.size()) throw ShapeError("EMA shadow does not match the trainable parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].rows() != shadow[i].rows() || params[i].cols() != shadow[i].cols()) {
            throw ShapeError("EMA shadow tensor shape mismatch");
        }
        params[i].mutable_value() = shadow[i];
    }
}

namespace {

std::uint64_t frozen_checksum(const ModelParams& model) {
    std::vector<Mat> frozen;
    for (const auto& np : model.named_parameters()) {
        if (np.frozen) frozen.push_back(np.var.value());
    }
    return checksum(frozen);
}

}  // namespace

void train(ModelParams& model, const Mat& images, const std::vector<int>& labels, TrainMode mode,
           const TrainConfig& cfg, TrainState& state, const MetricsSink& sink) {
    const auto& mc = model.cfg;
    switch (mode) {
        case TrainMode::pretrain:
            if (model.mode != FlexMode::base) throw ConfigError("pretraining expects a base model");
            break;
        case TrainMode::shared:
            if (model.mode != FlexMode::shared) throw ConfigError("shared training expects a shared-parameter model");
            break;
        case TrainMode::lora:
            if (model.mode != FlexMode::lora) throw ConfigError("LoRA training expects a LoRA model");
            break;
    }
    if (cfg.mmd_weight > 0 && mode != TrainMode::shared) throw ConfigError("the MMD loss is only valid in shared mode");
    if (cfg.batch < 1) throw ConfigError("batch must be >= 1");
    if (images.rows() == 0) throw DataError("training set is empty");
    if (images.cols() != mc.image.size()) throw DataError("training images do not match the model image shape");
    if (static_cast<Index>(labels.size()) != images.rows()) throw DataError("one label per training image required");
    if (cfg.mmd_weight > 0) cfg.bootstrap.validate();

    const auto sched = NoiseSchedule::linear(mc.steps);
    auto params = model.trainable_parameters();
    if (state.ema.empty()) {
        for (const auto& p : params) state.ema.push_back(p.value());
    }
    if (state.ema.size() != params.size()) throw ShapeError("training state does not match the model");
    const std::uint64_t frozen_before = frozen_checksum(model);

    std::vector<int> sizes;
    for (int p : model.spec.supported) {
        if (mode == TrainMode::pretrain && p != mc.p_powerful) continue;
        if (mode == TrainMode::lora && p == mc.p_powerful) continue;
        sizes.push_back(p);
    }
    if (sizes.empty()) throw ConfigError("no patch sizes to train");

    const bool class_mode = mc.conditioning == Conditioning::class_label;
    const Index B = cfg.batch, D = images.cols();
    for (; state.step < cfg.steps;) {
        const std::int64_t step = state.step;
        const auto key = static_cast<std::uint64_t>(step);
        Rng brng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(Stream::train_batch), key}));
        auto draw_batch = [&](Mat& x0, std::vector<int>& lab) {
            x0.resize(B, D);
            lab.resize(static_cast<std::size_t>(B));
            for (Index i = 0; i < B; ++i) {
                const auto idx = static_cast<Index>(brng.below(static_cast<std::uint64_t>(images.rows())));
                x0.row(i) = images.row(idx);
                int l = labels[static_cast<std::size_t>(idx)];
                if (class_mode && brng.uniform() < cfg.label_dropout) l = mc.null_label();
                lab[static_cast<std::size_t>(i)] = l;
            }
        };
        Mat x0;
        std::vector<int> lab;
        draw_batch(x0, lab);
        const int p = sizes[static_cast<std::size_t>(brng.below(sizes.size()))];

        Rng nrng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(Stream::train_noise), key}));
        const Mat noise = nrng.normal_matrix(B, D);
        Rng trng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(Stream::train_timestep), key}));
        std::vector<int> ts(static_cast<std::size_t>(B));
        for (auto& t : ts) t = 1 + static_cast<int>(trng.below(static_cast<std::uint64_t>(mc.steps)));
        const Mat xt = q_sample(sched, x0, ts, noise);

        std::vector<BatchItem> items;
        for (Index i = 0; i < B; ++i) {
            items.push_back({i, p, ts[static_cast<std::size_t>(i)], lab[static_cast<std::size_t>(i)], {}});
        }

        for (auto& prm : params) prm.zero_grad();
        TrainMetrics m;
        m.step = step + 1;
        m.p = p;
        std::int64_t grad_flops = 0, plain_flops = 0;
        ad::Var loss;
        if (mode == TrainMode::lora) {
            ad::Var teacher;
            {
                FlopCounter fc;
                ad::NoGradGuard guard;
                std::vector<BatchItem> titems = items;
                for (auto& it : titems) it.p = mc.p_powerful;
                teacher = model_forward(model, ad::Var::constant(xt), titems).eps;
                plain_flops += fc.total();
            }
            FlopCounter fc;
            ad::Var student = model_forward(model, ad::Var::constant(xt), items).eps;
            grad_flops += fc.total();
            loss = distill_loss(teacher, student);
            m.distill = loss.item();
        } else {
            FlopCounter fc;
            ad::Var eps = model_forward(model, ad::Var::constant(xt), items).eps;
            loss = eps_mse_loss(eps, noise);
            m.mse = loss.item();
            if (cfg.mmd_weight > 0) {
                Mat x0c;
                std::vector<int> labc;
                draw_batch(x0c, labc);
                const std::uint64_t bseed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(Stream::bootstrap), key});
                ad::Var mmd = bootstrap_mmd_loss(model, sched, x0, x0c, labc, cfg.bootstrap, bseed, cfg.mmd);
                m.mmd = mmd.item();
                loss = ad::add(loss, ad::scale(mmd, cfg.mmd_weight));
            }
            grad_flops += fc.total();
        }
        ad::ensure_finite(loss.value(), "training loss");
        loss.backward();
        m.loss = loss.item();
        m.grad_norm = adam_step(params, state.adam, cfg.adam);
        ema_update(params, state.ema, cfg.ema_rate);
        state.flops += plain_flops + 3 * grad_flops;
        ++state.step;
        m.flops = state.flops;
        m.ema_checksum = checksum(state.ema);
        if (sink) sink(m);
    }
    if (frozen_checksum(model) != frozen_before) throw Error("training modified a frozen tensor");
}

}  // namespace flexdit
