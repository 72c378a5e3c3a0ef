#pragma once

// DiT encoder with adaLN-zero conditioning, patch-size-specific LayerNorms,
// patch-size embeddings and per-patch-size LoRA adapters.
//
// A forward pass works on a packed token layout: every item (image, patch
// size, timestep, condition) becomes one attention segment, optionally
// separated by padding segments. Plain batched inference is the layout with
// one segment per item.

#include "flexdit/autograd.hpp"
#include "flexdit/tokenizer.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flexdit {

enum class Conditioning { class_label, cross_attention };
enum class FlexMode { base, shared, lora };
enum class PosMode { sincos, learned };

const char* to_string(Conditioning c);
const char* to_string(FlexMode m);
const char* to_string(PosMode m);

struct ModelConfig {
    int depth = 4;
    int hidden = 80;
    int heads = 4;
    int mlp_ratio = 4;
    ImageShape image{1, 16, 16};
    bool learned_variance = false;  // c_out = 2 * c_in
    Conditioning conditioning = Conditioning::class_label;
    int num_classes = 3;  // class id num_classes is the null label
    int vocab = 16;       // cross-attention token vocabulary; id 0 is the null token
    int steps = 100;      // diffusion steps T
    int p_powerful = 2;
    int p_weak = 4;
    PosMode pos_mode = PosMode::sincos;
    int lora_rank = 32;
    double lora_scale = 1.0;
    double ln_eps = 1e-6;

    int c_in() const { return image.c; }
    int c_out() const { return learned_variance ? 2 * image.c : image.c; }
    int null_label() const { return num_classes; }
    PatchSpec patch_spec() const { return PatchSpec::make(p_powerful, p_weak); }
    void validate() const;
};

struct Linear {
    ad::Var w;  // [in, out]
    ad::Var b;  // [1, out]
};

struct LoRAAdapter {
    ad::Var down;  // [in, rank]
    ad::Var up;    // [rank, out], zero at creation
    double scale = 1.0;
};

struct LayerNormParams {
    ad::Var gamma;  // [1, d]
    ad::Var beta;   // [1, d]
};

struct BlockWeights {
    Linear q, k, v, out, fc1, fc2;
    Linear ada;  // conditioning -> 6d modulation, zero-initialized
    std::optional<Linear> cross_q, cross_k, cross_v, cross_out;
};

struct BlockNorms {
    LayerNormParams norm1, norm2, norm_cross;
};

// Names of the adapted linear layers inside a block.
inline constexpr const char* kAdaptedLayers[] = {"q", "k", "v", "out", "fc1", "fc2"};

struct NamedParam {
    std::string name;
    ad::Var var;
    bool frozen = false;
};

struct ModelParams {
    ModelConfig cfg;
    PatchSpec spec;
    FlexMode mode = FlexMode::base;

    Linear t_fc1, t_fc2;
    ad::Var class_table;  // [num_classes + 1, d]
    ad::Var token_table;  // [vocab, d] (cross-attention mode)
    std::vector<BlockWeights> blocks;
    Linear final_ada;  // conditioning -> 2d

    std::map<int, std::vector<BlockNorms>> norms;
    std::map<int, LayerNormParams> final_norm;

    // Dedicated tokenizer layers (base and LoRA modes).
    std::map<int, Linear> embed, deembed;
    // Shared-parameter mode tokenizer.
    std::optional<FlexiEmbeddings> flexi;
    PatchSizeEmbedding psize;
    ad::Var pos_table;  // learned positional table at the powerful grid

    // adapters[p]["block{i}.{layer}"]
    std::map<int, std::map<std::string, LoRAAdapter>> adapters;
    int merged_for = 0;  // patch size whose adapters are folded into the base weights

    // Every tensor with a stable name, in a deterministic order.
    std::vector<NamedParam> named_parameters() const;
    std::vector<ad::Var> trainable_parameters() const;
    // Deep copy: no storage is shared with the source.
    ModelParams clone() const;
    bool has_patch_size(int p) const;
};

// Random initialization in the DiT style: xavier-uniform linears, zero adaLN
// and zero output projection.
ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed);

// Shared-parameter flexification: every parameter stays trainable, the
// tokenizer becomes a FlexiEmbeddings initialized from the pretrained layers,
// and norms / patch-size embeddings are added for every supported size.
ModelParams flexify_shared(const ModelParams& pretrained);

// LoRA flexification: pretrained weights are frozen; each new patch size gets
// its own tokenizer layers, norms, patch-size embedding and adapters.
ModelParams flexify_lora(const ModelParams& pretrained, int rank, std::uint64_t seed);

ModelParams merge_loras(const ModelParams& model, int p);
ModelParams unmerge_loras(const ModelParams& model);

struct ParameterCount {
    std::int64_t backbone = 0;  // blocks, conditioning, final layer
    std::int64_t added = 0;     // everything introduced by flexification
    std::int64_t total = 0;
};
ParameterCount count_parameters(const ModelParams& model, const ModelParams* pretrained = nullptr);

// --- forward ---------------------------------------------------------------

struct BatchItem {
    Index image = 0;  // row of the image matrix
    int p = 0;
    int t = 1;
    int label = 0;            // class mode
    std::vector<Index> text;  // cross mode; empty means the null token
};

// One attention segment of the packed layout.
struct Slot {
    Index item = -1;  // >= 0: the tokens of items[item]
    Index pad = 0;    // item < 0: this many padding tokens
};

using ActivationTap = std::function<void(const std::string& tap, const Mat& activation)>;

struct ForwardOptions {
    std::vector<Slot> layout;  // empty: one slot per item, in order
    const ActivationTap* tap = nullptr;
};

struct ModelOutput {
    ad::Var eps;         // [items, c_in*h*w]
    ad::Var var_logits;  // [items, c_in*h*w] when learned_variance
};

ModelOutput model_forward(const ModelParams& model, const ad::Var& images, const std::vector<BatchItem>& items,
                          const ForwardOptions& opts = {});

// Convenience: every image at the same patch size.
ModelOutput model_forward(const ModelParams& model, const Mat& images, const std::vector<int>& t,
                          const std::vector<int>& labels, int p);

Mat timestep_embedding(const std::vector<int>& t, int dim);

}  // namespace flexdit
