#include "flexdit/commands.hpp"

#include "flexdit/analysis.hpp"
#include "flexdit/checkpoint.hpp"
#include "flexdit/dataset.hpp"
#include "flexdit/flop_counter.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <ostream>
#include <sstream>

namespace fs = std::filesystem;

namespace flexdit::cli {

Config make_config() {
    return Config({
        {"run.out", "flexdit-out", "output directory", false},
        {"run.seed", "0", "master seed"},
        {"run.log_every", "50", "training progress interval in steps (0 = silent)", false},

        {"model.depth", "4", "transformer blocks"},
        {"model.hidden", "80", "hidden size"},
        {"model.heads", "4", "attention heads"},
        {"model.mlp_ratio", "4", "MLP expansion"},
        {"model.channels", "1", "image channels"},
        {"model.height", "16", "image height"},
        {"model.width", "16", "image width"},
        {"model.num_classes", "3", "class count (the null label is extra)"},
        {"model.learned_variance", "false", "predict variance logits"},
        {"model.p_powerful", "2", "pretrained patch size"},
        {"model.p_weak", "4", "weak patch size"},
        {"model.lora_rank", "32", "LoRA rank for flexify"},
        {"model.pos_mode", "sincos", "positional encoding: sincos or learned"},
        {"diffusion.steps", "250", "diffusion steps T"},

        {"data.path", "", "FXDT input"},
        {"dataset.family", "blobs", "synthetic family: blobs, stripes, checker"},
        {"dataset.count", "1024", "synthetic image count"},

        {"train.steps", "1000", "final optimizer step"},
        {"train.batch", "32", "batch size"},
        {"train.lr", "0.001", "Adam learning rate"},
        {"train.weight_decay", "0", "decoupled weight decay"},
        {"train.grad_clip", "0", "global gradient-norm clip (0 = off)"},
        {"train.ema_rate", "0.999", "EMA decay"},
        {"train.label_dropout", "0.1", "null-label probability"},
        {"train.resume", "", "checkpoint to resume from"},
        {"train.checkpoint_every", "0", "also save checkpoint_step<N>.fxck every N steps"},

        {"flexify.from", "", "pretrained checkpoint"},
        {"flexify.mode", "lora", "lora or shared"},
        {"flexify.use_ema", "true", "start from the pretrained EMA weights"},
        {"flexify.mmd_weight", "0", "bootstrapped MMD loss weight (shared mode)"},
        {"flexify.bootstrap", "4:2,2:1", "bootstrap chain, patch:steps pairs"},

        {"sample.checkpoint", "", "model checkpoint"},
        {"sample.plan", "", "inference plan, default all powerful"},
        {"sample.cfg_scale", "1.0", "guidance scale s_cfg1"},
        {"sample.cfg_ratio", "2.5", "(1 - s_cfg1) / (1 - s_cfg2)"},
        {"sample.count", "8", "images"},
        {"sample.labels", "", "comma-separated labels, default cycles the classes"},
        {"sample.packing", "2", "packing strategy 1..4 or auto"},
        {"sample.sampler", "ddpm", "ddpm or ddim"},
        {"sample.ema", "true", "sample with the EMA weights when present"},

        {"flops.cost_model", "linear", "linear (cost = tokens) or exact"},

        {"analyze.step", "0", "filter-step: the step whose prediction is filtered"},
        {"analyze.filter", "high", "filter-step: low, high or all"},
        {"analyze.cutoff", "0.5", "filter-step: radial cutoff as a fraction of Nyquist"},
        {"analyze.ts", "", "divergence: timesteps, default 10 evenly spaced"},
        {"analyze.p", "0", "activation-distance: patch size (0 = powerful)"},
        {"analyze.taps", "", "activation-distance: taps, default all"},
    });
}

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names{
        "train", "flexify", "sample", "flops", "pack-plan", "analyze filter-step", "analyze divergence",
        "analyze activation-distance", "analyze diversity", "dataset generate", "dataset inspect"};
    return names;
}

int exit_code(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const DataError*>(&e)) return 3;
    return 1;
}

namespace {

struct Ctx {
    const Config& cfg;
    fs::path dir;
    RunManifest& m;
    std::ostream& out;
    std::ostream& log;

    std::string path(const std::string& rel) const { return (dir / rel).string(); }
    void input(const std::string& p) { m.inputs[p] = file_hash(p); }
    void artifact(const std::string& rel) { m.artifacts[rel] = file_hash(path(rel)); }
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(' '), e = item.find_last_not_of(' ');
        if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

std::string index_name(const std::string& stem, Index i, const char* ext) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%03lld", static_cast<long long>(i));
    return stem + buf + ext;
}

int int_key(const Config& c, const std::string& key) {
    const auto v = c.integer(key);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
        throw ConfigError("'" + key + "' is out of range");
    }
    return static_cast<int>(v);
}

ModelConfig model_config_from(const Config& c) {
    ModelConfig mc;
    mc.depth = int_key(c, "model.depth");
    mc.hidden = int_key(c, "model.hidden");
    mc.heads = int_key(c, "model.heads");
    mc.mlp_ratio = int_key(c, "model.mlp_ratio");
    mc.image = {int_key(c, "model.channels"), int_key(c, "model.height"), int_key(c, "model.width")};
    mc.num_classes = int_key(c, "model.num_classes");
    mc.learned_variance = c.boolean("model.learned_variance");
    mc.p_powerful = int_key(c, "model.p_powerful");
    mc.p_weak = int_key(c, "model.p_weak");
    mc.lora_rank = int_key(c, "model.lora_rank");
    const auto& pos = c.str("model.pos_mode");
    if (pos == "sincos") mc.pos_mode = PosMode::sincos;
    else if (pos == "learned") mc.pos_mode = PosMode::learned;
    else throw ConfigError("model.pos_mode must be sincos or learned");
    mc.steps = int_key(c, "diffusion.steps");
    mc.validate();
    return mc;
}

// A checkpoint fixes the architecture; explicitly set model keys must agree with it.
void check_against_checkpoint(const Config& c, const ModelConfig& mc, bool allow_rank = false) {
    const ModelConfig want = [&] {
        ModelConfig w = mc;
        auto seti = [&](const char* key, int& field) {
            if (c.is_set(key)) field = int_key(c, key);
        };
        seti("model.depth", w.depth);
        seti("model.hidden", w.hidden);
        seti("model.heads", w.heads);
        seti("model.mlp_ratio", w.mlp_ratio);
        seti("model.channels", w.image.c);
        seti("model.height", w.image.h);
        seti("model.width", w.image.w);
        seti("model.num_classes", w.num_classes);
        seti("model.p_powerful", w.p_powerful);
        seti("model.p_weak", w.p_weak);
        seti("diffusion.steps", w.steps);
        if (!allow_rank) seti("model.lora_rank", w.lora_rank);
        if (c.is_set("model.learned_variance")) w.learned_variance = c.boolean("model.learned_variance");
        if (c.is_set("model.pos_mode")) w.pos_mode = c.str("model.pos_mode") == "learned" ? PosMode::learned : PosMode::sincos;
        return w;
    }();
    if (model_config_text(want) != model_config_text(mc)) {
        throw ConfigError("explicit model settings conflict with the checkpoint, which has:\n" + model_config_text(mc));
    }
}

std::uint64_t seed_key(const Config& c) { return c.u64("run.seed"); }

Checkpoint load_checkpoint_key(Ctx& ctx, const std::string& key) {
    const auto& p = ctx.cfg.str(key);
    if (p.empty()) throw ConfigError(key + " is required");
    if (!fs::exists(p)) throw DataError("checkpoint " + p + " does not exist");
    ctx.input(p);
    return load_checkpoint(p);
}

Dataset load_data(Ctx& ctx) {
    const auto& p = ctx.cfg.str("data.path");
    if (p.empty()) throw ConfigError("data.path is required");
    if (!fs::exists(p)) throw DataError("dataset " + p + " does not exist");
    ctx.input(p);
    return load_fxdt(p);
}

InferencePlan plan_from(const Config& c, int steps, int p_weak, int p_powerful) {
    PlanSpec spec;
    if (c.str("sample.plan").empty()) {
        spec.t_powerful = steps;
    } else {
        spec = PlanSpec::parse(c.str("sample.plan"));
    }
    if (c.is_set("sample.cfg_scale")) spec.cfg = c.real("sample.cfg_scale");
    if (c.is_set("sample.cfg_ratio")) spec.ratio = c.real("sample.cfg_ratio");
    if (spec.steps() != steps) {
        throw ConfigError("plan covers " + std::to_string(spec.steps()) + " steps but the diffusion has " +
                          std::to_string(steps));
    }
    return make_plan(spec, p_weak, p_powerful);
}

std::string plan_text(const InferencePlan& plan) {
    PlanSpec s;
    s.t_weak = plan.t_weak;
    s.t_powerful = plan.t_powerful;
    s.style = plan.style;
    s.cfg = plan.guidance.s_cfg1;
    s.ratio = plan.guidance.ratio;
    int uncond = 0;
    for (const auto& e : plan.entries) uncond += e.p_uncond == plan.p_powerful;
    s.cond_powerful = plan.t_powerful;
    s.uncond_powerful = uncond;
    return s.to_string();
}

std::vector<int> plan_sizes(const InferencePlan& plan) {
    std::vector<int> out;
    for (const auto& e : plan.entries) out.push_back(e.p_cond);
    return out;
}

void require_sizes(const ModelParams& model, const InferencePlan& plan) {
    for (const auto& e : plan.entries) {
        for (int p : {e.p_cond, e.p_uncond}) {
            if (!model.has_patch_size(p)) {
                throw ConfigError("the plan needs patch size " + std::to_string(p) + ", which this " +
                                  to_string(model.mode) + " model does not support");
            }
        }
    }
}

std::vector<int> labels_from(const Config& c, Index count, int num_classes) {
    auto labels = c.int_list("sample.labels");
    if (labels.empty()) {
        for (Index i = 0; i < count; ++i) labels.push_back(static_cast<int>(i % num_classes));
    }
    if (static_cast<Index>(labels.size()) != count) {
        throw ConfigError("sample.labels has " + std::to_string(labels.size()) + " entries for " + std::to_string(count) + " images");
    }
    for (int l : labels) {
        if (l < 0 || l >= num_classes) throw ConfigError("label " + std::to_string(l) + " is outside [0, " + std::to_string(num_classes) + ")");
    }
    return labels;
}

Index count_key(const Config& c, const char* key, Index min = 1) {
    const auto n = c.integer(key);
    if (n < min) throw ConfigError(std::string(key) + " must be >= " + std::to_string(min));
    return static_cast<Index>(n);
}

GuidedOptions guided_from(const Config& c) {
    GuidedOptions g;
    const auto& s = c.str("sample.packing");
    if (s == "auto") g.packing = 0;
    else {
        const auto v = c.integer("sample.packing");
        if (v < 1 || v > 4) throw ConfigError("sample.packing must be 1..4 or auto");
        g.packing = static_cast<int>(v);
    }
    return g;
}

SampleOptions sample_options_from(const Config& c) {
    SampleOptions so;
    const auto& s = c.str("sample.sampler");
    if (s == "ddpm") so.sampler = Sampler::ddpm;
    else if (s == "ddim") so.sampler = Sampler::ddim;
    else throw ConfigError("sample.sampler must be ddpm or ddim");
    return so;
}

// Loads sample.checkpoint and applies the EMA shadow when asked to.
ModelParams sampling_model(Ctx& ctx) {
    auto ck = load_checkpoint_key(ctx, "sample.checkpoint");
    check_against_checkpoint(ctx.cfg, ck.model.cfg);
    const bool ema = ctx.cfg.boolean("sample.ema") && ck.state && !ck.state->ema.empty();
    if (ema) load_shadow(ck.model, ck.state->ema);
    ctx.m.metrics["ema_weights"] = ema;
    return std::move(ck.model);
}

nlohmann::json plan_flops_json(const PlanFlops& f) {
    return {{"total", f.total},
            {"baseline", f.baseline},
            {"compute_fraction", f.compute_fraction},
            {"nfe_weak", f.nfe_weak},
            {"nfe_powerful", f.nfe_powerful}};
}

Dataset quantized(const Mat& images, const ImageShape& shape, const std::vector<int>& labels) {
    Dataset d;
    d.shape = shape;
    for (Index i = 0; i < images.rows(); ++i)
        for (Index k = 0; k < images.cols(); ++k) d.pixels.push_back(quantize_pixel(images(i, k)));
    for (int l : labels) d.labels.push_back(static_cast<std::uint32_t>(l));
    return d;
}

// --- training ---------------------------------------------------------------

TrainConfig train_config_from(const Config& c, std::uint64_t seed, bool mmd) {
    TrainConfig tc;
    tc.steps = int_key(c, "train.steps");
    tc.batch = int_key(c, "train.batch");
    tc.adam.lr = c.real("train.lr");
    tc.adam.weight_decay = c.real("train.weight_decay");
    tc.adam.grad_clip = c.real("train.grad_clip");
    tc.ema_rate = c.real("train.ema_rate");
    tc.label_dropout = c.real("train.label_dropout");
    tc.seed = seed;
    if (mmd) {
        tc.mmd_weight = c.real("flexify.mmd_weight");
        if (tc.mmd_weight < 0) throw ConfigError("flexify.mmd_weight must be >= 0");
        if (tc.mmd_weight > 0) tc.bootstrap = BootstrapSchedule::parse(c.str("flexify.bootstrap"));
    } else if (c.is_set("flexify.mmd_weight") && c.real("flexify.mmd_weight") != 0) {
        throw ConfigError("flexify.mmd_weight applies to `flexify --mode shared` only");
    }
    if (tc.steps < 0) throw ConfigError("train.steps must be >= 0");
    if (!(tc.label_dropout >= 0 && tc.label_dropout <= 1)) throw ConfigError("train.label_dropout must lie in [0, 1]");
    if (!(tc.ema_rate >= 0 && tc.ema_rate <= 1)) throw ConfigError("train.ema_rate must lie in [0, 1]");
    return tc;
}

void run_training(Ctx& ctx, Checkpoint& ck, TrainMode mode, const TrainConfig& tc, const Dataset& data) {
    if (!data.labeled() || data.count() == 0) throw DataError("training data must be labeled and non-empty");
    if (data.shape.c != ck.model.cfg.image.c || data.shape.h != ck.model.cfg.image.h || data.shape.w != ck.model.cfg.image.w) {
        throw DataError("dataset images do not match the model image shape");
    }
    for (auto l : data.labels) {
        if (static_cast<int>(l) >= ck.model.cfg.num_classes) throw DataError("dataset label " + std::to_string(l) + " exceeds the model's classes");
    }
    if (tc.steps < ck.state->step) {
        throw ConfigError("train.steps (" + std::to_string(tc.steps) + ") is below the checkpoint step " + std::to_string(ck.state->step));
    }
    const Mat images = data.images();
    const auto labels = data.int_labels();
    CsvWriter csv(ctx.path("metrics.csv"), {"step", "loss", "mse", "mmd", "distill", "p", "grad_norm", "flops", "ema_checksum"});
    const auto every = ctx.cfg.integer("run.log_every");
    std::vector<double> losses;
    auto sink = [&](const TrainMetrics& tm) {
        csv.row(std::vector<std::string>{std::to_string(tm.step), csv_cell(tm.loss), csv_cell(tm.mse), csv_cell(tm.mmd),
                                         csv_cell(tm.distill), std::to_string(tm.p), csv_cell(tm.grad_norm),
                                         std::to_string(tm.flops), hex64(tm.ema_checksum)});
        ctx.m.patch_sizes.push_back(tm.p);
        losses.push_back(tm.loss);
        if (every > 0 && tm.step % every == 0) ctx.log << tm.to_line() << std::endl;
    };
    const auto chunk = ctx.cfg.integer("train.checkpoint_every");
    if (chunk < 0) throw ConfigError("train.checkpoint_every must be >= 0");
    // Training is keyed by step, so running in chunks matches one long run.
    while (ck.state->step < tc.steps) {
        TrainConfig part = tc;
        if (chunk > 0) part.steps = static_cast<int>(std::min<std::int64_t>(tc.steps, (ck.state->step / chunk + 1) * chunk));
        train(ck.model, images, labels, mode, part, *ck.state, sink);
        if (chunk > 0 && part.steps < tc.steps) {
            const auto name = "checkpoint_step" + std::to_string(part.steps) + ".fxck";
            save_checkpoint(ctx.path(name), ck);
            ctx.artifact(name);
        }
    }
    csv.close();
    save_checkpoint(ctx.path("checkpoint.fxck"), ck);
    ctx.artifact("checkpoint.fxck");
    ctx.artifact("metrics.csv");

    const std::size_t tail = std::min<std::size_t>(losses.size(), 50);
    ctx.m.metrics["final_step"] = ck.state->step;
    ctx.m.metrics["steps_run"] = losses.size();
    if (!losses.empty()) {
        ctx.m.metrics["last_loss"] = losses.back();
        ctx.m.metrics["mean_loss_last50"] = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(tail), losses.end(), 0.0) / static_cast<double>(tail);
    }
    ctx.m.flops["training_total"] = ck.state->flops;
    ctx.out << "trained " << to_string(mode) << " to step " << ck.state->step << "; checkpoint " << ctx.path("checkpoint.fxck") << "\n";
}

void cmd_train(Ctx& ctx) {
    const auto& c = ctx.cfg;
    Checkpoint ck;
    if (!c.str("train.resume").empty()) {
        ck = load_checkpoint_key(ctx, "train.resume");
        if (ck.train_mode != "pretrain" || !ck.state) throw ConfigError("train.resume needs a pretraining checkpoint with training state");
        check_against_checkpoint(c, ck.model.cfg);
        if (c.is_set("run.seed") && seed_key(c) != ck.seed) throw ConfigError("run.seed differs from the resumed run's seed");
    } else {
        ck.model = init_model(model_config_from(c), seed_key(c));
        ck.state = TrainState{};
        ck.seed = seed_key(c);
        ck.train_mode = "pretrain";
    }
    ctx.m.seed = ck.seed;
    const auto data = load_data(ctx);
    run_training(ctx, ck, TrainMode::pretrain, train_config_from(c, ck.seed, false), data);
}

void cmd_flexify(Ctx& ctx) {
    const auto& c = ctx.cfg;
    Checkpoint ck;
    TrainMode mode;
    if (!c.str("train.resume").empty()) {
        ck = load_checkpoint_key(ctx, "train.resume");
        if ((ck.train_mode != "lora" && ck.train_mode != "shared") || !ck.state) {
            throw ConfigError("flexify resume needs a flexify checkpoint with training state");
        }
        if (c.is_set("flexify.mode") && c.str("flexify.mode") != ck.train_mode) throw ConfigError("flexify.mode differs from the resumed run");
        check_against_checkpoint(c, ck.model.cfg);
        if (c.is_set("run.seed") && seed_key(c) != ck.seed) throw ConfigError("run.seed differs from the resumed run's seed");
        mode = ck.train_mode == "lora" ? TrainMode::lora : TrainMode::shared;
    } else {
        auto base = load_checkpoint_key(ctx, "flexify.from");
        if (base.model.mode != FlexMode::base) throw ConfigError("flexify.from must be a pretrained (base) checkpoint");
        check_against_checkpoint(c, base.model.cfg, true);
        if (c.boolean("flexify.use_ema") && base.state && !base.state->ema.empty()) load_shadow(base.model, base.state->ema);
        const auto& m = c.str("flexify.mode");
        if (m == "lora") {
            mode = TrainMode::lora;
            ck.model = flexify_lora(base.model, int_key(c, "model.lora_rank"), seed_key(c));
        } else if (m == "shared") {
            mode = TrainMode::shared;
            ck.model = flexify_shared(base.model);
        } else {
            throw ConfigError("flexify.mode must be lora or shared");
        }
        ck.state = TrainState{};
        ck.seed = seed_key(c);
        ck.train_mode = m;
    }
    ctx.m.seed = ck.seed;
    const auto data = load_data(ctx);
    run_training(ctx, ck, mode, train_config_from(c, ck.seed, mode == TrainMode::shared), data);
}

// --- sampling and costs -------------------------------------------------------

void cmd_sample(Ctx& ctx) {
    const auto& c = ctx.cfg;
    const auto model = sampling_model(ctx);
    const auto sched = NoiseSchedule::linear(model.cfg.steps);
    const auto plan = plan_from(c, model.cfg.steps, model.cfg.p_weak, model.cfg.p_powerful);
    require_sizes(model, plan);
    const Index count = count_key(c, "sample.count");
    const auto labels = labels_from(c, count, model.cfg.num_classes);
    const auto opts = guided_from(c);
    const std::uint64_t seed = seed_key(c);

    NfeStats stats;
    FlopCounter counter;
    const Mat images = sample_plan(model, sched, plan, class_conditions(labels), seed, sample_options_from(c), opts,
                                   nullptr, &stats);
    const auto executed = counter.by_tag();

    const auto shape = model.cfg.image;
    for (Index i = 0; i < count; ++i) {
        const auto name = index_name("sample_", i, shape.c == 3 ? ".ppm" : ".pgm");
        write_image(ctx.path(name), images.row(i), shape);
        ctx.artifact(name);
    }
    write_fxdt(ctx.path("samples.fxdt"), quantized(images, shape, labels));
    ctx.artifact("samples.fxdt");

    const auto pf = plan_flops(plan, model);
    nlohmann::json report = {{"plan", plan_flops_json(pf)}, {"executed", executed}, {"images", count}};
    {
        std::ofstream f(ctx.path("flops.json"));
        f << report.dump(2) << "\n";
    }
    ctx.artifact("flops.json");

    ctx.m.seed = seed;
    ctx.m.plan = plan_text(plan);
    ctx.m.patch_sizes = plan_sizes(plan);
    ctx.m.flops = report;
    ctx.m.metrics["nfe_weak"] = stats.weak;
    ctx.m.metrics["nfe_powerful"] = stats.powerful;
    ctx.m.metrics["launches"] = stats.launches;
    ctx.m.metrics["samples_hash"] = hex64(checksum({images}));
    ctx.out << "plan " << ctx.m.plan << "\n"
            << "images " << count << " -> " << ctx.dir.string() << "\n"
            << "compute_fraction " << format_double(pf.compute_fraction) << "\n"
            << "nfe_weak " << stats.weak << "\nnfe_powerful " << stats.powerful << "\n";
}

void cmd_flops(Ctx& ctx) {
    const auto& c = ctx.cfg;
    auto mc = model_config_from(c);
    if (!c.str("sample.plan").empty() && !c.is_set("diffusion.steps")) mc.steps = PlanSpec::parse(c.str("sample.plan")).steps();
    const auto plan = plan_from(c, mc.steps, mc.p_weak, mc.p_powerful);
    const auto& cost_model = c.str("flops.cost_model");
    PlanFlops pf;
    if (cost_model == "linear") {
        pf = plan_flops_linear(plan, mc.image);
    } else if (cost_model == "exact") {
        const auto geom = CostGeometry::from(mc);
        pf = plan_flops(plan, [&](int p) { return flops_per_step(mc.patch_spec().tokens(mc.image, p), geom).total(); });
    } else {
        throw ConfigError("flops.cost_model must be linear or exact");
    }
    CsvWriter csv(ctx.path("flops.csv"), {"t", "p_cond", "p_uncond", "guided", "flops"});
    for (std::size_t i = 0; i < plan.entries.size(); ++i) {
        const auto& e = plan.entries[i];
        csv.row(std::vector<std::string>{std::to_string(e.t), std::to_string(e.p_cond), std::to_string(e.p_uncond),
                                         e.guided ? "1" : "0", std::to_string(pf.per_step[i])});
    }
    ctx.m.plan = plan_text(plan);
    ctx.m.patch_sizes = plan_sizes(plan);
    ctx.m.flops = plan_flops_json(pf);
    ctx.m.flops["cost_model"] = cost_model;
    ctx.out << "plan " << ctx.m.plan << "\n"
            << "cost_model " << cost_model << "\n"
            << "s_cfg1 " << format_double(plan.guidance.s_cfg1) << "\n"
            << "s_cfg2 " << format_double(plan.guidance.s_cfg2) << "\n"
            << "nfe_weak " << pf.nfe_weak << "\nnfe_powerful " << pf.nfe_powerful << "\n"
            << "total " << pf.total << "\nbaseline " << pf.baseline << "\n"
            << "compute_fraction " << format_double(pf.compute_fraction) << "\n";
    ctx.m.metrics["compute_fraction"] = pf.compute_fraction;
    ctx.m.metrics["s_cfg1"] = plan.guidance.s_cfg1;
    ctx.m.metrics["s_cfg2"] = plan.guidance.s_cfg2;
    csv.close();
    ctx.artifact("flops.csv");
}

void cmd_pack_plan(Ctx& ctx) {
    const auto& c = ctx.cfg;
    auto mc = model_config_from(c);
    if (!c.str("sample.plan").empty() && !c.is_set("diffusion.steps")) mc.steps = PlanSpec::parse(c.str("sample.plan")).steps();
    const auto plan = plan_from(c, mc.steps, mc.p_weak, mc.p_powerful);
    const Index count = count_key(c, "sample.count");
    const bool lora = c.str("flexify.mode") == "lora";
    const auto geom = CostGeometry::from(mc);
    const auto spec = mc.patch_spec();

    struct Totals {
        std::int64_t flops = 0, launches = 0;
        double latency = 0;
        int feasible_steps = 0;
    };
    std::array<Totals, 5> totals{};  // index 0: per-step best
    std::map<int, int> best_hist;
    for (const auto& e : plan.entries) {
        std::vector<BranchRequest> req;
        const auto add = [&](int p, std::int64_t n) {
            const std::int64_t tokens = spec.tokens(mc.image, p);
            for (auto& r : req) {
                if (r.tokens == tokens) {
                    r.count += n;
                    return;
                }
            }
            req.push_back({tokens, n, lora && p != mc.p_powerful});
        };
        add(e.p_cond, count);
        if (e.guided) add(e.p_uncond, count);
        for (int s = 1; s <= 4; ++s) {
            if (!pack_feasible(req, s)) continue;
            const auto ps = pack(req, s, geom);
            auto& t = totals[static_cast<std::size_t>(s)];
            t.flops += ps.flops;
            t.launches += ps.launch_count();
            t.latency += ps.latency_proxy;
            ++t.feasible_steps;
        }
        const int best = best_strategy(req, geom);
        ++best_hist[best];
        const auto ps = pack(req, best, geom);
        totals[0].flops += ps.flops;
        totals[0].launches += ps.launch_count();
        totals[0].latency += ps.latency_proxy;
        ++totals[0].feasible_steps;
    }
    CsvWriter csv(ctx.path("pack_plan.csv"), {"strategy", "feasible_steps", "launches", "flops", "latency_proxy"});
    const int steps = static_cast<int>(plan.entries.size());
    ctx.out << "plan " << plan_text(plan) << "\nimages " << count << "\n";
    for (std::size_t s = 0; s < totals.size(); ++s) {
        const auto& t = totals[s];
        const std::string id = s == 0 ? "auto" : std::to_string(s);
        csv.row(std::vector<std::string>{id, std::to_string(t.feasible_steps), std::to_string(t.launches),
                                         std::to_string(t.flops), csv_cell(t.latency)});
        ctx.out << "strategy " << id << ": ";
        if (t.feasible_steps < steps) {
            ctx.out << "infeasible at " << steps - t.feasible_steps << " steps\n";
        } else {
            ctx.out << "launches " << t.launches << " flops " << t.flops << " latency_proxy " << format_double(t.latency)
                    << "  (" << (s == 0 ? "lowest latency per step" : strategy_description(static_cast<int>(s))) << ")\n";
        }
        ctx.m.metrics["strategy_" + id] = {{"feasible_steps", t.feasible_steps}, {"launches", t.launches},
                                           {"flops", t.flops}, {"latency_proxy", t.latency}};
    }
    for (const auto& [s, n] : best_hist) ctx.m.metrics["auto_choice_" + std::to_string(s)] = n;
    csv.close();
    ctx.artifact("pack_plan.csv");
    ctx.m.plan = plan_text(plan);
    ctx.m.patch_sizes = plan_sizes(plan);
}

// --- analysis -----------------------------------------------------------------

void cmd_filter_step(Ctx& ctx) {
    const auto& c = ctx.cfg;
    const auto model = sampling_model(ctx);
    const auto sched = NoiseSchedule::linear(model.cfg.steps);
    const auto plan = plan_from(c, model.cfg.steps, model.cfg.p_weak, model.cfg.p_powerful);
    require_sizes(model, plan);
    const Index count = count_key(c, "sample.count");
    const auto labels = labels_from(c, count, model.cfg.num_classes);
    const int step = int_key(c, "analyze.step");
    if (step == 0) throw ConfigError("analyze.step is required for filter-step");
    BandFilter filter{band_kind_from_string(c.str("analyze.filter")), c.real("analyze.cutoff")};
    const auto r = filtered_step_generate(model, sched, plan, class_conditions(labels), seed_key(c), step, filter,
                                          guided_from(c));
    {
        CsvWriter csv(ctx.path("filter_step.csv"), {"image", "label", "l2", "ssim"});
        for (Index i = 0; i < count; ++i) {
            csv.row(std::vector<std::string>{std::to_string(i), std::to_string(labels[static_cast<std::size_t>(i)]),
                                             csv_cell(r.l2[static_cast<std::size_t>(i)]),
                                             csv_cell(r.ssim[static_cast<std::size_t>(i)])});
        }
    }
    ctx.artifact("filter_step.csv");
    for (Index i = 0; i < count; ++i) {
        const auto name = index_name("diff_", i, ".pgm");
        const ImageShape gray{1, model.cfg.image.h, model.cfg.image.w};
        const Index plane = gray.size();
        // channel-averaged difference so every image type gives a PGM
        RowVec a = RowVec::Zero(plane), b = RowVec::Zero(plane);
        for (int ch = 0; ch < model.cfg.image.c; ++ch) {
            a += r.filtered.row(i).segment(ch * plane, plane) / model.cfg.image.c;
            b += r.baseline.row(i).segment(ch * plane, plane) / model.cfg.image.c;
        }
        write_difference_image(ctx.path(name), a, b, gray);
        ctx.artifact(name);
    }
    ctx.m.seed = seed_key(c);
    ctx.m.plan = plan_text(plan);
    ctx.m.patch_sizes = plan_sizes(plan);
    ctx.m.metrics["step"] = step;
    ctx.m.metrics["filter"] = to_string(filter.kind);
    ctx.m.metrics["mean_l2"] = r.mean_l2;
    ctx.m.metrics["mean_ssim"] = r.mean_ssim;
    ctx.out << "filter " << to_string(filter.kind) << " cutoff " << format_double(filter.cutoff) << " at t=" << step << "\n"
            << "mean_l2 " << format_double(r.mean_l2) << "\nmean_ssim " << format_double(r.mean_ssim) << "\n";
}

void cmd_divergence(Ctx& ctx) {
    const auto& c = ctx.cfg;
    const auto model = sampling_model(ctx);
    const auto sched = NoiseSchedule::linear(model.cfg.steps);
    const auto data = load_data(ctx);
    const Index count = count_key(c, "sample.count");
    if (count > data.count()) throw DataError("the dataset has " + std::to_string(data.count()) + " images, " + std::to_string(count) + " requested");
    if (!data.labeled()) throw DataError("divergence probes need labels");
    if (data.shape.size() != model.cfg.image.size()) throw DataError("dataset images do not match the model");
    const Mat probes = data.images().topRows(count);
    auto all = data.int_labels();
    const std::vector<int> labels(all.begin(), all.begin() + count);
    auto ts = c.int_list("analyze.ts");
    const int T = model.cfg.steps;
    if (ts.empty()) {
        for (int k = 0; k < 10; ++k) ts.push_back(static_cast<int>(std::lround(1 + k * (T - 1) / 9.0)));
        ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    }
    for (int t : ts) {
        if (t < 1 || t > T) throw ConfigError("analyze.ts entry " + std::to_string(t) + " is outside [1, " + std::to_string(T) + "]");
    }
    const auto curve = divergence_curve(model, sched, probes, labels, ts, model.cfg.p_weak, model.cfg.p_powerful, seed_key(c));
    {
        CsvWriter csv(ctx.path("divergence.csv"), {"t", "mean_l2"});
        for (std::size_t i = 0; i < curve.ts.size(); ++i) csv.row(std::vector<std::string>{std::to_string(curve.ts[i]), csv_cell(curve.mean_l2[i])});
    }
    ctx.artifact("divergence.csv");
    ctx.m.seed = seed_key(c);
    std::vector<double> tv(curve.ts.begin(), curve.ts.end());
    const double rho = curve.ts.size() >= 2 ? spearman(tv, curve.mean_l2) : 0.0;
    ctx.m.metrics["spearman_t_divergence"] = rho;
    ctx.m.metrics["probes"] = count;
    ctx.out << "t,mean_l2\n";
    for (std::size_t i = 0; i < curve.ts.size(); ++i) ctx.out << curve.ts[i] << "," << format_double(curve.mean_l2[i]) << "\n";
    ctx.out << "spearman " << format_double(rho) << "\n";
}

void cmd_activation_distance(Ctx& ctx) {
    const auto& c = ctx.cfg;
    const auto model = sampling_model(ctx);
    const auto sched = NoiseSchedule::linear(model.cfg.steps);
    const Index count = count_key(c, "sample.count");
    const auto labels = labels_from(c, count, model.cfg.num_classes);
    int p = int_key(c, "analyze.p");
    if (p == 0) p = model.cfg.p_powerful;
    auto taps = split_list(c.str("analyze.taps"));
    if (taps.empty()) taps = model_taps(model);
    const auto dump = record_activations(model, sched, p, class_conditions(labels), seed_key(c), taps);
    const Mat d = activation_distance(dump, taps, count);
    {
        std::vector<std::string> header{"tap"};
        for (Index k = 0; k < d.cols(); ++k) header.push_back("t" + std::to_string(model.cfg.steps - k));
        CsvWriter csv(ctx.path("activation_distance.csv"), header);
        for (std::size_t i = 0; i < taps.size(); ++i) {
            std::vector<std::string> row{taps[i]};
            for (Index k = 0; k < d.cols(); ++k) row.push_back(csv_cell(d(static_cast<Index>(i), k)));
            csv.row(row);
        }
    }
    ctx.artifact("activation_distance.csv");
    ctx.m.seed = seed_key(c);
    ctx.m.patch_sizes.assign(static_cast<std::size_t>(model.cfg.steps), p);
    ctx.out << "tap,mean_distance\n";
    for (std::size_t i = 0; i < taps.size(); ++i) {
        const double mu = d.cols() ? d.row(static_cast<Index>(i)).mean() : 0.0;
        ctx.m.metrics["mean_" + taps[i]] = mu;
        ctx.out << taps[i] << "," << format_double(mu) << "\n";
    }
}

void cmd_diversity(Ctx& ctx) {
    const auto data = load_data(ctx);
    const Mat images = data.images();
    std::map<int, std::vector<Index>> groups;
    const auto labels = data.int_labels();
    for (Index i = 0; i < data.count(); ++i) groups[labels.empty() ? -1 : labels[static_cast<std::size_t>(i)]].push_back(i);
    CsvWriter csv(ctx.path("diversity.csv"), {"label", "images", "pairs", "mean_l2", "mean_ssim"});
    ctx.out << "label,images,pairs,mean_l2,mean_ssim\n";
    for (const auto& [label, idx] : groups) {
        Mat rows(static_cast<Index>(idx.size()), images.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) rows.row(static_cast<Index>(k)) = images.row(idx[k]);
        const auto r = diversity(rows, data.shape);
        csv.row(std::vector<std::string>{std::to_string(label), std::to_string(idx.size()), std::to_string(r.pairs),
                                         csv_cell(r.mean_l2), csv_cell(r.mean_ssim)});
        ctx.out << label << "," << idx.size() << "," << r.pairs << "," << format_double(r.mean_l2) << ","
                << format_double(r.mean_ssim) << "\n";
        ctx.m.metrics["label_" + std::to_string(label)] = {{"pairs", r.pairs}, {"mean_l2", r.mean_l2}, {"mean_ssim", r.mean_ssim}};
    }
    csv.close();
    ctx.artifact("diversity.csv");
}

// --- datasets -----------------------------------------------------------------

void cmd_dataset_generate(Ctx& ctx) {
    const auto& c = ctx.cfg;
    SyntheticSpec spec;
    spec.num_classes = int_key(c, "model.num_classes");
    spec.shape = {int_key(c, "model.channels"), int_key(c, "model.height"), int_key(c, "model.width")};
    spec.family = family_from_string(c.str("dataset.family"));
    spec.count = count_key(c, "dataset.count", 0);
    spec.seed = seed_key(c);
    const auto data = generate(spec);
    write_fxdt(ctx.path("dataset.fxdt"), data);
    ctx.artifact("dataset.fxdt");
    ctx.m.seed = spec.seed;
    ctx.m.metrics["count"] = data.count();
    if (data.count() > 0) {
        const double acc = linear_probe_accuracy(data.images(), data.int_labels(), spec.num_classes);
        ctx.m.metrics["probe_accuracy"] = acc;
        ctx.out << "probe_accuracy " << format_double(acc) << "\n";
    }
    ctx.out << "wrote " << data.count() << " " << to_string(spec.family) << " images to " << ctx.path("dataset.fxdt") << "\n";
}

void cmd_dataset_inspect(Ctx& ctx) {
    const auto& p = ctx.cfg.str("data.path");
    if (p.empty()) throw ConfigError("data.path is required");
    if (!fs::exists(p)) throw DataError("dataset " + p + " does not exist");
    ctx.input(p);
    FxdtReader reader(p);
    const auto& h = reader.header();
    std::map<int, std::int64_t> per_class;
    double sum = 0, sq = 0;
    std::int64_t n = 0;
    while (auto item = reader.next()) {
        ++per_class[item->second];
        sum += item->first.sum();
        sq += item->first.squaredNorm();
        n += item->first.size();
    }
    const double mu = n ? sum / static_cast<double>(n) : 0.0;
    const double sd = n ? std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mu * mu)) : 0.0;
    std::ostringstream report;
    report << "version " << h.version << "\ncount " << h.count << "\nshape " << h.c << "x" << h.h << "x" << h.w
           << "\nlabeled " << (h.labeled ? "yes" : "no") << "\npixel_mean " << format_double(mu) << "\npixel_std "
           << format_double(sd) << "\n";
    for (const auto& [label, k] : per_class) {
        report << "class " << label << " " << k << "\n";
        ctx.m.metrics["class_" + std::to_string(label)] = k;
    }
    {
        std::ofstream f(ctx.path("inspect.txt"));
        f << report.str();
    }
    ctx.artifact("inspect.txt");
    ctx.out << report.str();
    ctx.m.metrics["count"] = h.count;
    ctx.m.metrics["pixel_mean"] = mu;
    ctx.m.metrics["pixel_std"] = sd;
}

}  // namespace

RunManifest run_command(const std::string& command, const Config& cfg, std::ostream& out, std::ostream& log) {
    const auto& names = command_names();
    if (std::find(names.begin(), names.end(), command) == names.end()) throw ConfigError("unknown command '" + command + "'");
    const fs::path dir = cfg.str("run.out");
    if (dir.empty()) throw ConfigError("run.out must not be empty");
    OutputLock lock(dir);
    RunManifest m;
    m.command = command;
    m.config = cfg.to_json();
    m.config_hash = cfg.hash();
    m.seed = cfg.u64("run.seed");
    Ctx ctx{cfg, dir, m, out, log};
    if (command == "train") cmd_train(ctx);
    else if (command == "flexify") cmd_flexify(ctx);
    else if (command == "sample") cmd_sample(ctx);
    else if (command == "flops") cmd_flops(ctx);
    else if (command == "pack-plan") cmd_pack_plan(ctx);
    else if (command == "analyze filter-step") cmd_filter_step(ctx);
    else if (command == "analyze divergence") cmd_divergence(ctx);
    else if (command == "analyze activation-distance") cmd_activation_distance(ctx);
    else if (command == "analyze diversity") cmd_diversity(ctx);
    else if (command == "dataset generate") cmd_dataset_generate(ctx);
    else if (command == "dataset inspect") cmd_dataset_inspect(ctx);
    m.save(ctx.path("manifest.json"));
    return m;
}

ReplayReport replay(const std::string& manifest_path, const std::string& out_dir, std::ostream& out, std::ostream& log) {
    const auto recorded = RunManifest::load(manifest_path);
    for (const auto& [path, hash] : recorded.inputs) {
        if (!fs::exists(path)) throw DataError("replay input " + path + " is missing");
        if (file_hash(path) != hash) throw DataError("replay input " + path + " changed since the recorded run");
    }
    auto cfg = make_config();
    cfg.load_json(recorded.config);
    if (cfg.hash() != recorded.config_hash) throw DataError("recorded configuration does not match its hash");
    if (fs::weakly_canonical(out_dir) == fs::weakly_canonical(fs::path(manifest_path).parent_path())) {
        throw ConfigError("replay needs a fresh output directory, not the recorded run's");
    }
    cfg.set("run.out", out_dir, ConfigSource::flag);
    const auto fresh = run_command(recorded.command, cfg, out, log);

    ReplayReport report;
    for (const auto& [rel, hash] : recorded.artifacts) {
        auto it = fresh.artifacts.find(rel);
        if (it != fresh.artifacts.end() && it->second == hash) report.matched.push_back(rel);
        else report.mismatched.push_back(rel);
    }
    for (const auto& [rel, hash] : fresh.artifacts) {
        if (!recorded.artifacts.count(rel)) report.mismatched.push_back(rel);
    }
    report.metrics_match = nlohmann::json::parse(fresh.metrics.dump()) == recorded.metrics &&
                           fresh.patch_sizes == recorded.patch_sizes && fresh.plan == recorded.plan &&
                           nlohmann::json::parse(fresh.flops.dump()) == recorded.flops;
    return report;
}

}  // namespace flexdit::cli
