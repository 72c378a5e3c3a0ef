#include "flexdit/commands.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <list>

using namespace flexdit;

namespace {

struct Flag {
    const char* name;
    const char* key;
    const char* help;
};

struct Bound {
    std::string key;
    std::string value;
    CLI::Option* opt = nullptr;
};

struct Leaf {
    std::string command;
    CLI::App* app = nullptr;
    std::string config_file;
    std::vector<std::string> sets;
    std::list<Bound> bound;
};

const Flag kSeed{"--seed", "run.seed", "master seed"};
const Flag kOut{"--out", "run.out", "output directory"};
const Flag kSteps{"--steps", "diffusion.steps", "diffusion steps T (default 250)"};
const Flag kPlan{"--plan", "sample.plan", "plan, e.g. weak:180,powerful:70;guidance=70/70;cfg=4.0"};
const Flag kCfgScale{"--cfg-scale", "sample.cfg_scale", "guidance scale s_cfg1"};
const Flag kCfgRatio{"--cfg-ratio", "sample.cfg_ratio", "(1 - s_cfg1) / (1 - s_cfg2), default 2.5"};
const Flag kPacking{"--packing", "sample.packing", "packing strategy 1..4 or auto"};
const Flag kCheckpoint{"--checkpoint", "sample.checkpoint", "model checkpoint (.fxck)"};
const Flag kCount{"--count", "sample.count", "number of images"};
const Flag kLabels{"--labels", "sample.labels", "comma-separated class labels"};
const Flag kData{"--data", "data.path", "dataset (.fxdt)"};
const Flag kTrainSteps{"--train-steps", "train.steps", "final optimizer step"};
const Flag kBatch{"--batch", "train.batch", "batch size"};
const Flag kLr{"--lr", "train.lr", "learning rate"};
const Flag kResume{"--resume", "train.resume", "resume from a checkpoint"};
const Flag kEvery{"--checkpoint-every", "train.checkpoint_every", "intermediate checkpoint interval"};

void add_leaf(std::list<Leaf>& leaves, CLI::App* app, const std::string& command, std::vector<Flag> flags) {
    auto& leaf = leaves.emplace_back();
    leaf.command = command;
    leaf.app = app;
    app->add_option("--config", leaf.config_file, "config file (key = value, [section] headers)");
    app->add_option("--set", leaf.sets, "override any config key: section.key=value")->take_all();
    flags.insert(flags.begin(), {kSeed, kOut});
    for (const auto& f : flags) {
        auto& b = leaf.bound.emplace_back();
        b.key = f.key;
        b.opt = app->add_option(f.name, b.value, f.help);
    }
}

int run_leaf(const Leaf& leaf) {
    auto cfg = cli::make_config();
    if (!leaf.config_file.empty()) cfg.load_file(leaf.config_file);
    for (const auto& s : leaf.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        cfg.set(s.substr(0, eq), s.substr(eq + 1), ConfigSource::flag);
    }
    for (const auto& b : leaf.bound) {
        if (b.opt->count() > 0) cfg.set(b.key, b.value, ConfigSource::flag);
    }
    const auto m = cli::run_command(leaf.command, cfg, std::cout, std::cerr);
    std::cerr << "manifest " << (std::filesystem::path(cfg.str("run.out")) / "manifest.json").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Flexible-patch-size diffusion transformer toolkit"};
    app.require_subcommand(1);
    std::list<Leaf> leaves;

    add_leaf(leaves, app.add_subcommand("train", "pretrain a base model"), "train",
             {kData, kSteps, kTrainSteps, kBatch, kLr, kResume, kEvery});
    add_leaf(leaves, app.add_subcommand("flexify", "flexify a pretrained model (LoRA distillation or shared training)"),
             "flexify",
             {{"--from", "flexify.from", "pretrained checkpoint"},
              {"--mode", "flexify.mode", "lora or shared"},
              {"--rank", "model.lora_rank", "LoRA rank"},
              {"--mmd-weight", "flexify.mmd_weight", "bootstrapped MMD weight (shared mode)"},
              {"--bootstrap", "flexify.bootstrap", "bootstrap chain, e.g. 4:2,2:1"},
              kData, kTrainSteps, kBatch, kLr, kResume, kEvery});
    add_leaf(leaves, app.add_subcommand("sample", "generate images with an inference plan"), "sample",
             {kCheckpoint, kPlan, kCfgScale, kCfgRatio, kPacking, kCount, kLabels, kSteps,
              {"--sampler", "sample.sampler", "ddpm or ddim"}});
    add_leaf(leaves, app.add_subcommand("flops", "FLOPs and compute fraction of a plan"), "flops",
             {kPlan, kCfgScale, kCfgRatio, kSteps, {"--cost-model", "flops.cost_model", "linear or exact"}});
    add_leaf(leaves, app.add_subcommand("pack-plan", "compare packing strategies over a plan"), "pack-plan",
             {kPlan, kCfgScale, kCfgRatio, kSteps, kCount, {"--mode", "flexify.mode", "lora or shared cost"}});

    auto* analyze = app.add_subcommand("analyze", "diagnostics");
    analyze->require_subcommand(1);
    add_leaf(leaves, analyze->add_subcommand("filter-step", "filter the prediction of one denoising step"), "analyze filter-step",
             {kCheckpoint, kPlan, kCfgScale, kCfgRatio, kPacking, kCount, kLabels, kSteps,
              {"--step", "analyze.step", "step t whose prediction is filtered"},
              {"--filter", "analyze.filter", "low, high or all"},
              {"--cutoff", "analyze.cutoff", "radial cutoff as a fraction of Nyquist"}});
    add_leaf(leaves, analyze->add_subcommand("divergence", "weak vs powerful prediction gap over t"),
             "analyze divergence", {kCheckpoint, kData, kCount, kSteps, {"--ts", "analyze.ts", "timesteps"}});
    add_leaf(leaves, analyze->add_subcommand("activation-distance", "per-layer activation change between steps"),
             "analyze activation-distance",
             {kCheckpoint, kCount, kLabels, kSteps, {"--p", "analyze.p", "patch size"},
              {"--taps", "analyze.taps", "comma-separated taps"}});
    add_leaf(leaves, analyze->add_subcommand("diversity", "pairwise L2/SSIM within each label"), "analyze diversity",
             {kData});

    auto* dataset = app.add_subcommand("dataset", "synthetic datasets");
    dataset->require_subcommand(1);
    add_leaf(leaves, dataset->add_subcommand("generate", "write a synthetic FXDT dataset"), "dataset generate",
             {{"--count", "dataset.count", "images"},
              {"--family", "dataset.family", "blobs, stripes or checker"},
              {"--classes", "model.num_classes", "class count"}});
    add_leaf(leaves, dataset->add_subcommand("inspect", "describe an FXDT file"), "dataset inspect", {kData});

    auto* replay = app.add_subcommand("replay", "rerun a manifest and compare its artifacts");
    std::string manifest, replay_out;
    replay->add_option("manifest", manifest, "manifest.json of the recorded run")->required();
    replay->add_option("--out", replay_out, "fresh output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (replay->parsed()) {
            const auto r = cli::replay(manifest, replay_out, std::cout, std::cerr);
            for (const auto& a : r.matched) std::cout << "match " << a << "\n";
            for (const auto& a : r.mismatched) std::cout << "MISMATCH " << a << "\n";
            std::cout << (r.metrics_match ? "metrics match\n" : "metrics MISMATCH\n");
            return r.ok() ? 0 : 1;
        }
        for (const auto& leaf : leaves) {
            if (leaf.app->parsed()) return run_leaf(leaf);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::exit_code(e);
    }
    return 2;
}
