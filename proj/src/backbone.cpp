#include "flexdit/backbone.hpp"

#include "flexdit/flop_counter.hpp"
#include "flexdit/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flexdit {

const char* to_string(Conditioning c) { return c == Conditioning::class_label ? "class" : "cross"; }

const char* to_string(FlexMode m) {
    switch (m) {
        case FlexMode::base: return "base";
        case FlexMode::shared: return "shared";
        case FlexMode::lora: return "lora";
    }
    return "?";
}

const char* to_string(PosMode m) { return m == PosMode::sincos ? "sincos" : "learned"; }

void ModelConfig::validate() const {
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (heads < 1 || hidden % heads != 0) throw ConfigError("hidden size must be divisible by heads");
    if (hidden % 4 != 0) throw ConfigError("hidden size must be divisible by 4 for positional encodings");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    if (image.c < 1 || image.h < 1 || image.w < 1) throw ConfigError("image shape must be positive");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (vocab < 2) throw ConfigError("vocab must be >= 2");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (lora_rank < 0) throw ConfigError("lora_rank must be >= 0");
    patch_spec().validate(image);
    if (image.h < p_weak || image.w < p_weak) throw ConfigError("image smaller than the largest patch");
}

// --- parameter bookkeeping ------------------------------------------------

namespace {

std::string pname(int p) { return "p" + std::to_string(p); }

template <typename Model, typename F>
void visit_vars(Model& m, F&& f) {
    auto lin = [&](const std::string& name, auto& l) {
        f(name + ".w", l.w);
        f(name + ".b", l.b);
    };
    auto ln = [&](const std::string& name, auto& n) {
        f(name + ".gamma", n.gamma);
        f(name + ".beta", n.beta);
    };
    lin("t_embed.fc1", m.t_fc1);
    lin("t_embed.fc2", m.t_fc2);
    f("class_table", m.class_table);
    f("token_table", m.token_table);
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        auto& b = m.blocks[i];
        const std::string pre = "blocks." + std::to_string(i) + ".";
        lin(pre + "q", b.q);
        lin(pre + "k", b.k);
        lin(pre + "v", b.v);
        lin(pre + "out", b.out);
        lin(pre + "fc1", b.fc1);
        lin(pre + "fc2", b.fc2);
        lin(pre + "ada", b.ada);
        if (b.cross_q) {
            lin(pre + "cross_q", *b.cross_q);
            lin(pre + "cross_k", *b.cross_k);
            lin(pre + "cross_v", *b.cross_v);
            lin(pre + "cross_out", *b.cross_out);
        }
    }
    lin("final.ada", m.final_ada);
    for (auto& [p, list] : m.norms) {
        for (std::size_t i = 0; i < list.size(); ++i) {
            const std::string pre = "norms." + pname(p) + ".blocks." + std::to_string(i) + ".";
            ln(pre + "norm1", list[i].norm1);
            ln(pre + "norm2", list[i].norm2);
            ln(pre + "norm_cross", list[i].norm_cross);
        }
    }
    for (auto& [p, n] : m.final_norm) ln("norms." + pname(p) + ".final", n);
    for (auto& [p, l] : m.embed) lin("embed." + pname(p), l);
    for (auto& [p, l] : m.deembed) lin("deembed." + pname(p), l);
    if (m.flexi) {
        f("flexi.w_embed", m.flexi->w_embed);
        f("flexi.b_embed", m.flexi->b_embed);
        f("flexi.w_deembed", m.flexi->w_deembed);
        f("flexi.b_deembed", m.flexi->b_deembed);
    }
    for (auto& [p, v] : m.psize.table) f("psize." + pname(p), v);
    f("pos_table", m.pos_table);
    for (auto& [p, set] : m.adapters) {
        for (auto& [layer, a] : set) {
            const std::string pre = "lora." + pname(p) + "." + layer + ".";
            f(pre + "down", a.down);
            f(pre + "up", a.up);
        }
    }
}

Mat xavier(Rng& rng, Index in, Index out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    return rng.uniform_matrix(in, out, -limit, limit);
}

Linear make_linear(Rng& rng, Index in, Index out, bool zero = false) {
    Linear l;
    l.w = ad::Var::parameter(zero ? Mat(Mat::Zero(in, out)) : xavier(rng, in, out));
    l.b = ad::Var::parameter(Mat::Zero(1, out));
    return l;
}

LayerNormParams make_norm(Index d) {
    return {ad::Var::parameter(Mat::Ones(1, d)), ad::Var::parameter(Mat::Zero(1, d))};
}

LayerNormParams copy_norm(const LayerNormParams& n, bool trainable) {
    return {ad::Var(n.gamma.value(), trainable), ad::Var(n.beta.value(), trainable)};
}

}  // namespace

std::vector<NamedParam> ModelParams::named_parameters() const {
    std::vector<NamedParam> out;
    visit_vars(*this, [&](const std::string& name, const ad::Var& v) {
        if (v.defined()) out.push_back({name, v, !v.requires_grad()});
    });
    return out;
}

std::vector<ad::Var> ModelParams::trainable_parameters() const {
    std::vector<ad::Var> out;
    for (auto& np : named_parameters()) {
        if (!np.frozen) out.push_back(np.var);
    }
    return out;
}

ModelParams ModelParams::clone() const {
    ModelParams copy = *this;
    visit_vars(copy, [](const std::string&, ad::Var& v) {
        if (v.defined()) v = v.clone();
    });
    return copy;
}

bool ModelParams::has_patch_size(int p) const {
    if (!norms.count(p)) return false;
    return flexi ? flexi->projections->count(p) > 0 : embed.count(p) > 0;
}

ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(Stream::init_weights)}));
    const Index d = cfg.hidden;
    const Index p = cfg.p_powerful;
    ModelParams m;
    m.cfg = cfg;
    m.spec = PatchSpec::make(cfg.p_powerful, cfg.p_powerful);
    m.mode = FlexMode::base;

    m.t_fc1 = {ad::Var::parameter(rng.normal_matrix(d, d, 0.02)), ad::Var::parameter(Mat::Zero(1, d))};
    m.t_fc2 = {ad::Var::parameter(rng.normal_matrix(d, d, 0.02)), ad::Var::parameter(Mat::Zero(1, d))};
    m.class_table = ad::Var::parameter(rng.normal_matrix(cfg.num_classes + 1, d, 0.02));
    if (cfg.conditioning == Conditioning::cross_attention) {
        m.token_table = ad::Var::parameter(rng.normal_matrix(cfg.vocab, d, 0.02));
    }
    const Index hidden_mlp = d * cfg.mlp_ratio;
    for (int i = 0; i < cfg.depth; ++i) {
        BlockWeights b;
        b.q = make_linear(rng, d, d);
        b.k = make_linear(rng, d, d);
        b.v = make_linear(rng, d, d);
        b.out = make_linear(rng, d, d);
        b.fc1 = make_linear(rng, d, hidden_mlp);
        b.fc2 = make_linear(rng, hidden_mlp, d);
        b.ada = make_linear(rng, d, 6 * d, true);
        if (cfg.conditioning == Conditioning::cross_attention) {
            b.cross_q = make_linear(rng, d, d);
            b.cross_k = make_linear(rng, d, d);
            b.cross_v = make_linear(rng, d, d);
            b.cross_out = make_linear(rng, d, d, true);
        }
        m.blocks.push_back(std::move(b));
    }
    m.final_ada = make_linear(rng, d, 2 * d, true);

    auto& norms = m.norms[cfg.p_powerful];
    for (int i = 0; i < cfg.depth; ++i) {
        BlockNorms n{make_norm(d), make_norm(d), {}};
        if (cfg.conditioning == Conditioning::cross_attention) n.norm_cross = make_norm(d);
        norms.push_back(n);
    }
    m.final_norm[cfg.p_powerful] = make_norm(d);

    m.embed[cfg.p_powerful] = make_linear(rng, Index{cfg.c_in()} * p * p, d);
    m.deembed[cfg.p_powerful] = make_linear(rng, d, Index{cfg.c_out()} * p * p, true);

    if (cfg.pos_mode == PosMode::learned) {
        m.pos_table = ad::Var::parameter(positional_encoding(cfg.image.h / cfg.p_powerful, cfg.image.w / cfg.p_powerful,
                                                             cfg.p_powerful, cfg.image.h, cfg.image.w, cfg.hidden));
    }
    return m;
}

ModelParams flexify_shared(const ModelParams& pretrained) {
    if (pretrained.mode != FlexMode::base) throw ConfigError("flexify_shared expects a base model");
    const auto& cfg = pretrained.cfg;
    ModelParams m = pretrained.clone();
    m.mode = FlexMode::shared;
    m.spec = cfg.patch_spec();
    const int pp = cfg.p_powerful;
    const auto& e = pretrained.embed.at(pp);
    const auto& de = pretrained.deembed.at(pp);
    m.flexi = init_from_pretrained(e.w.value(), e.b.value(), de.w.value(), de.b.value(), m.spec, cfg.c_in(),
                                   cfg.c_out());
    m.embed.clear();
    m.deembed.clear();
    const auto base_norms = m.norms.at(pp);
    const auto base_final = m.final_norm.at(pp);
    for (int p : m.spec.supported) {
        if (p != pp) {
            std::vector<BlockNorms> copy;
            for (const auto& n : base_norms) {
                copy.push_back({copy_norm(n.norm1, true), copy_norm(n.norm2, true),
                                n.norm_cross.gamma.defined() ? copy_norm(n.norm_cross, true) : LayerNormParams{}});
            }
            m.norms[p] = std::move(copy);
            m.final_norm[p] = copy_norm(base_final, true);
        }
        m.psize.table[p] = ad::Var::parameter(Mat::Zero(1, cfg.hidden));
    }
    for (auto& np : m.named_parameters()) np.var.set_requires_grad(true);
    return m;
}

ModelParams flexify_lora(const ModelParams& pretrained, int rank, std::uint64_t seed) {
    if (pretrained.mode != FlexMode::base) throw ConfigError("flexify_lora expects a base model");
    if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
    const auto& cfg = pretrained.cfg;
    ModelParams m = pretrained.clone();
    for (auto& np : m.named_parameters()) np.var.set_requires_grad(false);
    m.mode = FlexMode::lora;
    m.cfg.lora_rank = rank;
    m.spec = cfg.patch_spec();
    const int pp = cfg.p_powerful;
    const Index d = cfg.hidden;

    // New tokenizer layers start from the pseudo-inverse projection of the
    // pretrained ones.
    const auto& e = pretrained.embed.at(pp);
    const auto& de = pretrained.deembed.at(pp);
    const auto fe = init_from_pretrained(e.w.value(), e.b.value(), de.w.value(), de.b.value(), m.spec, cfg.c_in(),
                                         cfg.c_out());
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(Stream::init_weights), 0x10a}));
    m.psize.table[pp] = ad::Var::constant(Mat::Zero(1, d));
    m.psize.frozen_zero = pp;
    for (int p : m.spec.supported) {
        if (p == pp) continue;
        const auto ew = instantiate_embed(fe, p);
        const auto dw = instantiate_deembed(fe, p);
        m.embed[p] = {ad::Var::parameter(ew.weight.value()), ad::Var::parameter(ew.bias.value())};
        m.deembed[p] = {ad::Var::parameter(dw.weight.value()), ad::Var::parameter(dw.bias.value())};
        std::vector<BlockNorms> copy;
        for (const auto& n : m.norms.at(pp)) {
            copy.push_back({copy_norm(n.norm1, true), copy_norm(n.norm2, true),
                            n.norm_cross.gamma.defined() ? copy_norm(n.norm_cross, true) : LayerNormParams{}});
        }
        m.norms[p] = std::move(copy);
        m.final_norm[p] = copy_norm(m.final_norm.at(pp), true);
        m.psize.table[p] = ad::Var::parameter(Mat::Zero(1, d));

        auto& set = m.adapters[p];
        for (std::size_t i = 0; i < m.blocks.size(); ++i) {
            const auto& b = m.blocks[i];
            const Linear* layers[] = {&b.q, &b.k, &b.v, &b.out, &b.fc1, &b.fc2};
            for (int l = 0; l < 6; ++l) {
                const Index in = layers[l]->w.rows(), out = layers[l]->w.cols();
                LoRAAdapter a;
                a.down = ad::Var::parameter(rng.normal_matrix(in, rank, 1.0 / std::sqrt(static_cast<double>(in))));
                a.up = ad::Var::parameter(Mat::Zero(rank, out));
                a.scale = cfg.lora_scale;
                set["block" + std::to_string(i) + "." + kAdaptedLayers[l]] = a;
            }
        }
    }
    return m;
}

namespace {
Linear& adapted_layer(BlockWeights& b, const std::string& name) {
    if (name == "q") return b.q;
    if (name == "k") return b.k;
    if (name == "v") return b.v;
    if (name == "out") return b.out;
    if (name == "fc1") return b.fc1;
    if (name == "fc2") return b.fc2;
    throw Error("unknown adapted layer " + name);
}

void fold_adapters(ModelParams& m, int p, double sign) {
    for (auto& [key, a] : m.adapters.at(p)) {
        const auto dot = key.find('.');
        const int block = std::stoi(key.substr(5, dot - 5));
        Linear& l = adapted_layer(m.blocks.at(static_cast<std::size_t>(block)), key.substr(dot + 1));
        l.w.mutable_value() += sign * a.scale * (a.down.value() * a.up.value());
    }
}
}  // namespace

ModelParams merge_loras(const ModelParams& model, int p) {
    if (model.merged_for != 0) throw Error("adapters are already merged for p=" + std::to_string(model.merged_for));
    if (!model.adapters.count(p)) throw Error("no adapters for p=" + std::to_string(p));
    ModelParams m = model.clone();
    fold_adapters(m, p, 1.0);
    m.merged_for = p;
    return m;
}

ModelParams unmerge_loras(const ModelParams& model) {
    if (model.merged_for == 0) throw Error("model has no merged adapters");
    ModelParams m = model.clone();
    fold_adapters(m, m.merged_for, -1.0);
    m.merged_for = 0;
    return m;
}

ParameterCount count_parameters(const ModelParams& model, const ModelParams* pretrained) {
    ParameterCount c;
    for (const auto& np : model.named_parameters()) {
        const auto n = static_cast<std::int64_t>(np.var.value().size());
        c.total += n;
        const bool core = np.name.rfind("blocks.", 0) == 0 || np.name.rfind("t_embed.", 0) == 0 ||
                          np.name == "class_table" || np.name == "token_table" || np.name.rfind("final.ada", 0) == 0;
        if (core) c.backbone += n;
    }
    if (pretrained != nullptr) {
        std::int64_t base = 0;
        for (const auto& np : pretrained->named_parameters()) base += static_cast<std::int64_t>(np.var.value().size());
        c.added = c.total - base;
    } else {
        c.added = c.total - c.backbone;
    }
    return c;
}

// --- forward ---------------------------------------------------------------

Mat timestep_embedding(const std::vector<int>& t, int dim) {
    const int half = dim / 2;
    Mat out = Mat::Zero(static_cast<Index>(t.size()), dim);
    for (std::size_t i = 0; i < t.size(); ++i) {
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * k / half);
            out(static_cast<Index>(i), k) = std::cos(t[i] * freq);
            out(static_cast<Index>(i), half + k) = std::sin(t[i] * freq);
        }
    }
    return out;
}

namespace {

struct PackedBatch {
    std::vector<Index> lengths;    // tokens per slot
    std::vector<int> slot_p;       // patch size per slot (pads use p_powerful)
    std::map<int, std::vector<Index>> rows_by_p;  // token rows of real slots per patch size
    Index rows = 0;
};

ad::Var linear(const Linear& l, const ad::Var& x, const char* tag) {
    FlopTag scope(tag);
    return ad::bias_add(ad::matmul(x, l.w), l.b);
}

class Forward {
  public:
    Forward(const ModelParams& m, const PackedBatch& pb) : m_(m), pb_(pb) {}

    ad::Var norm(const ad::Var& x, const std::function<const LayerNormParams&(int p)>& pick) const {
        // Uniform patch size: plain affine LayerNorm.
        const int first = pb_.slot_p.empty() ? m_.cfg.p_powerful : pb_.slot_p.front();
        const bool uniform = std::all_of(pb_.slot_p.begin(), pb_.slot_p.end(), [&](int p) { return p == first; });
        if (uniform) {
            const auto& n = pick(first);
            return ad::layer_norm(x, n.gamma, n.beta, m_.cfg.ln_eps);
        }
        std::vector<ad::Var> gammas, betas;
        for (int p : pb_.slot_p) {
            gammas.push_back(pick(p).gamma);
            betas.push_back(pick(p).beta);
        }
        ad::Var g = ad::broadcast_segments(ad::concat_rows(gammas), pb_.lengths);
        ad::Var b = ad::broadcast_segments(ad::concat_rows(betas), pb_.lengths);
        return ad::add(ad::mul(ad::layer_norm(x, m_.cfg.ln_eps), g), b);
    }

    ad::Var modulate(const ad::Var& x, const ad::Var& shift, const ad::Var& scale) const {
        return ad::add(ad::mul(x, ad::broadcast_segments(ad::add_scalar(scale, 1.0), pb_.lengths)),
                       ad::broadcast_segments(shift, pb_.lengths));
    }

    ad::Var adapted(std::size_t block, const char* layer, const Linear& l, const ad::Var& x, const char* tag) const {
        ad::Var y = linear(l, x, tag);
        for (const auto& [p, set] : m_.adapters) {
            if (p == m_.merged_for) continue;
            auto rows_it = pb_.rows_by_p.find(p);
            if (rows_it == pb_.rows_by_p.end() || rows_it->second.empty()) continue;
            const auto& a = set.at("block" + std::to_string(block) + "." + layer);
            const auto& rows = rows_it->second;
            FlopTag scope("lora-overhead");
            if (static_cast<Index>(rows.size()) == x.rows()) {
                y = ad::add(y, ad::scale(ad::matmul(ad::matmul(x, a.down), a.up), a.scale));
            } else {
                ad::Var xs = ad::gather_rows(x, rows);
                y = ad::scatter_add_rows(y, ad::scale(ad::matmul(ad::matmul(xs, a.down), a.up), a.scale), rows);
            }
        }
        return y;
    }

  private:
    const ModelParams& m_;
    const PackedBatch& pb_;
};

EmbedWeights embed_weights(const ModelParams& m, int p) {
    if (m.flexi) {
        FlopTag scope("weight-projection");
        return instantiate_embed(*m.flexi, p);
    }
    const auto& l = m.embed.at(p);
    return {l.w, l.b};
}

EmbedWeights deembed_weights(const ModelParams& m, int p) {
    if (m.flexi) {
        FlopTag scope("weight-projection");
        return instantiate_deembed(*m.flexi, p);
    }
    const auto& l = m.deembed.at(p);
    return {l.w, l.b};
}

ad::Var positions(const ModelParams& m, int p, Index copies) {
    const auto& cfg = m.cfg;
    const int gh = cfg.image.h / p, gw = cfg.image.w / p;
    const Index n = Index{gh} * gw;
    if (cfg.pos_mode == PosMode::sincos) {
        const Mat one = positional_encoding(gh, gw, p, cfg.image.h, cfg.image.w, cfg.hidden);
        return ad::Var::constant(one.replicate(copies, 1));
    }
    ad::Var table = m.pos_table;
    if (p != cfg.p_powerful) {
        FlopTag scope("weight-projection");
        const int g0h = cfg.image.h / cfg.p_powerful, g0w = cfg.image.w / cfg.p_powerful;
        table = ad::matmul(ad::Var::constant(build_grid_resize_matrix(g0h, g0w, gh, gw)), table);
    }
    std::vector<Index> idx;
    idx.reserve(static_cast<std::size_t>(copies * n));
    for (Index c = 0; c < copies; ++c)
        for (Index i = 0; i < n; ++i) idx.push_back(i);
    return ad::gather_rows(table, idx);
}

}  // namespace

ModelOutput model_forward(const ModelParams& m, const ad::Var& images, const std::vector<BatchItem>& items,
                          const ForwardOptions& opts) {
    const auto& cfg = m.cfg;
    const Index d = cfg.hidden;
    const ImageShape img = cfg.image;
    if (images.cols() != img.size()) throw ShapeError("model_forward: image rows do not match the model image shape");
    if (items.empty()) throw ShapeError("model_forward: no items");
    for (const auto& it : items) {
        if (!m.has_patch_size(it.p)) throw ShapeError("patch size " + std::to_string(it.p) + " is not supported");
        if (m.merged_for != 0 && it.p != m.merged_for) {
            throw Error("merged model only evaluates p=" + std::to_string(m.merged_for));
        }
        if (it.t < 1 || it.t > cfg.steps) throw ShapeError("timestep " + std::to_string(it.t) + " outside [1, T]");
        if (it.image < 0 || it.image >= images.rows()) throw ShapeError("item references a missing image");
        if (cfg.conditioning == Conditioning::class_label && (it.label < 0 || it.label > cfg.num_classes)) {
            throw ShapeError("class label out of range");
        }
    }

    std::vector<Slot> layout = opts.layout;
    if (layout.empty()) {
        for (std::size_t i = 0; i < items.size(); ++i) layout.push_back({static_cast<Index>(i), 0});
    }
    {
        std::vector<int> seen(items.size(), 0);
        for (const auto& s : layout) {
            if (s.item >= static_cast<Index>(items.size())) throw ShapeError("layout references a missing item");
            if (s.item >= 0) ++seen[static_cast<std::size_t>(s.item)];
            else if (s.pad <= 0) throw ShapeError("padding slot without tokens");
        }
        for (int c : seen) {
            if (c != 1) throw ShapeError("layout must place every item exactly once");
        }
    }

    // Group items by patch size (item order within a group).
    std::map<int, std::vector<Index>> group;
    std::vector<Index> pos_in_group(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& g = group[items[i].p];
        pos_in_group[i] = static_cast<Index>(g.size());
        g.push_back(static_cast<Index>(i));
    }

    // Tokenize.
    std::map<int, ad::Var> group_tokens;
    for (const auto& [p, idxs] : group) {
        std::vector<Index> rows;
        for (Index i : idxs) rows.push_back(items[static_cast<std::size_t>(i)].image);
        ad::Var patches = patchify(ad::gather_rows(images, rows), img, p);
        const auto ew = embed_weights(m, p);
        ad::Var x;
        {
            FlopTag scope("embed");
            x = ad::bias_add(ad::matmul(patches, ew.weight), ew.bias);
        }
        x = ad::add(x, positions(m, p, static_cast<Index>(idxs.size())));
        if (m.psize.table.count(p)) x = ad::bias_add(x, m.psize.lookup(p));
        group_tokens[p] = x;
    }

    PackedBatch pb;
    std::vector<ad::Var> pieces;
    std::vector<Index> cond_index;  // per slot, items.size() for padding
    for (const auto& s : layout) {
        if (s.item >= 0) {
            const auto& it = items[static_cast<std::size_t>(s.item)];
            const Index n = m.spec.tokens(img, it.p);
            pieces.push_back(ad::slice_rows(group_tokens.at(it.p), pos_in_group[static_cast<std::size_t>(s.item)] * n, n));
            auto& rows = pb.rows_by_p[it.p];
            for (Index r = 0; r < n; ++r) rows.push_back(pb.rows + r);
            pb.lengths.push_back(n);
            pb.slot_p.push_back(it.p);
            cond_index.push_back(s.item);
            pb.rows += n;
        } else {
            pieces.push_back(ad::Var::constant(Mat::Zero(s.pad, d)));
            pb.lengths.push_back(s.pad);
            pb.slot_p.push_back(cfg.p_powerful);
            cond_index.push_back(static_cast<Index>(items.size()));
            pb.rows += s.pad;
        }
    }
    ad::Var x = ad::concat_rows(pieces);
    if (opts.tap) (*opts.tap)("embed", x.value());

    // Conditioning vectors, one row per slot.
    ad::Var cond;
    {
        FlopTag scope("conditioning");
        std::vector<int> ts;
        for (const auto& it : items) ts.push_back(it.t);
        ad::Var temb = ad::Var::constant(timestep_embedding(ts, static_cast<int>(d)));
        ad::Var c = linear(m.t_fc2, ad::silu(linear(m.t_fc1, temb, "conditioning")), "conditioning");
        if (cfg.conditioning == Conditioning::class_label) {
            std::vector<Index> labels;
            for (const auto& it : items) labels.push_back(it.label);
            c = ad::add(c, ad::embedding_lookup(m.class_table, labels));
        }
        std::vector<ad::Var> parts{c, ad::Var::constant(Mat::Zero(1, d))};
        cond = ad::silu(ad::gather_rows(ad::concat_rows(parts), cond_index));
    }

    // Cross-attention context tokens.
    ad::Var context;
    std::vector<Index> context_lengths;
    if (cfg.conditioning == Conditioning::cross_attention) {
        std::vector<Index> ids;
        for (const auto& s : layout) {
            std::vector<Index> toks{0};
            if (s.item >= 0 && !items[static_cast<std::size_t>(s.item)].text.empty()) {
                toks = items[static_cast<std::size_t>(s.item)].text;
            }
            ids.insert(ids.end(), toks.begin(), toks.end());
            context_lengths.push_back(static_cast<Index>(toks.size()));
        }
        context = ad::embedding_lookup(m.token_table, ids);
    }

    Forward f(m, pb);
    for (std::size_t bi = 0; bi < m.blocks.size(); ++bi) {
        const auto& b = m.blocks[bi];
        ad::Var mod;
        {
            FlopTag scope("conditioning");
            mod = linear(b.ada, cond, "conditioning");
        }
        auto chunk = [&](int k) { return ad::slice_cols(mod, k * d, d); };

        ad::Var h = f.modulate(f.norm(x, [&](int p) -> const LayerNormParams& { return m.norms.at(p)[bi].norm1; }),
                               chunk(0), chunk(1));
        ad::Var q = f.adapted(bi, "q", b.q, h, "attention-linears");
        ad::Var k = f.adapted(bi, "k", b.k, h, "attention-linears");
        ad::Var v = f.adapted(bi, "v", b.v, h, "attention-linears");
        ad::Var a;
        {
            FlopTag scope("attention-matmuls");
            a = ad::softmax_attention(q, k, v, cfg.heads, pb.lengths, pb.lengths);
        }
        ad::Var o = f.adapted(bi, "out", b.out, a, "attention-linears");
        x = ad::add(x, ad::mul(ad::broadcast_segments(chunk(2), pb.lengths), o));

        if (b.cross_q) {
            ad::Var hc = f.norm(x, [&](int p) -> const LayerNormParams& { return m.norms.at(p)[bi].norm_cross; });
            ad::Var cq = linear(*b.cross_q, hc, "cross-attention");
            ad::Var ck = linear(*b.cross_k, context, "cross-attention");
            ad::Var cv = linear(*b.cross_v, context, "cross-attention");
            ad::Var ca;
            {
                FlopTag scope("cross-attention");
                ca = ad::softmax_attention(cq, ck, cv, cfg.heads, pb.lengths, context_lengths);
            }
            x = ad::add(x, linear(*b.cross_out, ca, "cross-attention"));
        }

        ad::Var h2 = f.modulate(f.norm(x, [&](int p) -> const LayerNormParams& { return m.norms.at(p)[bi].norm2; }),
                                chunk(3), chunk(4));
        ad::Var mlp = f.adapted(bi, "fc2", b.fc2, ad::gelu(f.adapted(bi, "fc1", b.fc1, h2, "mlp")), "mlp");
        x = ad::add(x, ad::mul(ad::broadcast_segments(chunk(5), pb.lengths), mlp));
        if (opts.tap) (*opts.tap)("block" + std::to_string(bi), x.value());
    }

    ad::Var fmod = linear(m.final_ada, cond, "conditioning");
    ad::Var hf = f.modulate(f.norm(x, [&](int p) -> const LayerNormParams& { return m.final_norm.at(p); }),
                            ad::slice_cols(fmod, 0, d), ad::slice_cols(fmod, d, d));
    if (opts.tap) (*opts.tap)("final", hf.value());

    // De-tokenize per patch size, then restore item order.
    ImageShape out_img = img;
    out_img.c = cfg.c_out();
    std::vector<Index> slot_offset;
    {
        Index r = 0;
        for (Index len : pb.lengths) {
            slot_offset.push_back(r);
            r += len;
        }
    }
    std::vector<Index> item_slot(items.size());
    for (std::size_t s = 0; s < layout.size(); ++s) {
        if (layout[s].item >= 0) item_slot[static_cast<std::size_t>(layout[s].item)] = static_cast<Index>(s);
    }
    std::vector<ad::Var> outs;
    std::vector<Index> order(items.size());
    Index produced = 0;
    for (const auto& [p, idxs] : group) {
        const Index n = m.spec.tokens(img, p);
        std::vector<Index> rows;
        for (Index i : idxs) {
            const Index off = slot_offset[static_cast<std::size_t>(item_slot[static_cast<std::size_t>(i)])];
            for (Index r = 0; r < n; ++r) rows.push_back(off + r);
            order[static_cast<std::size_t>(i)] = produced++;
        }
        const auto dw = deembed_weights(m, p);
        ad::Var y;
        {
            FlopTag scope("de-embed");
            y = ad::bias_add(ad::matmul(ad::gather_rows(hf, rows), dw.weight), dw.bias);
        }
        outs.push_back(unpatchify(y, out_img, p));
    }
    ad::Var all = outs.size() == 1 ? outs.front() : ad::concat_rows(outs);
    bool identity = true;
    for (std::size_t i = 0; i < order.size(); ++i) identity = identity && order[i] == static_cast<Index>(i);
    if (!identity) all = ad::gather_rows(all, order);

    ModelOutput out;
    const Index px = img.size();
    if (cfg.learned_variance) {
        out.eps = ad::slice_cols(all, 0, px);
        out.var_logits = ad::slice_cols(all, px, px);
    } else {
        out.eps = all;
    }
    return out;
}

ModelOutput model_forward(const ModelParams& model, const Mat& images, const std::vector<int>& t,
                          const std::vector<int>& labels, int p) {
    if (static_cast<Index>(t.size()) != images.rows() || static_cast<Index>(labels.size()) != images.rows()) {
        throw ShapeError("model_forward: one timestep and label per image required");
    }
    std::vector<BatchItem> items;
    for (Index i = 0; i < images.rows(); ++i) {
        items.push_back({i, p, t[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(i)], {}});
    }
    return model_forward(model, ad::Var::constant(images), items);
}

}  // namespace flexdit
