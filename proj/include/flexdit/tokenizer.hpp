#pragma once

// Patch tokenization at arbitrary patch sizes and the flexible embedding /
// de-embedding layers whose weights live at an underlying patch size p' and
// are projected to the requested size with pseudo-inverse bilinear maps.

#include "flexdit/autograd.hpp"
#include "flexdit/common.hpp"

#include <map>
#include <memory>
#include <vector>

namespace flexdit {

struct ImageShape {
    int c = 1;
    int h = 16;
    int w = 16;
    Index size() const { return Index{c} * h * w; }
    bool operator==(const ImageShape&) const = default;
};

struct PatchSpec {
    int p_powerful = 2;
    int p_weak = 4;
    int p_underlying = 4;
    std::vector<int> supported;  // ascending

    // p_weak defaults to 2 * p_powerful; p' = largest supported size.
    static PatchSpec make(int p_powerful, int p_weak = 0);

    bool supports(int p) const;
    void validate(const ImageShape& img) const;
    Index tokens(const ImageShape& img, int p) const { return Index{img.h / p} * (img.w / p); }
};

// Flat source index for every token entry, for `batch` images laid out as
// rows of [c*h*w]. Entry order within a token: channel, then row, then col.
std::vector<Index> patchify_index(const ImageShape& img, int p, Index batch);

// [B, c*h*w] -> [B*N, c*p*p]
Mat patchify(const Mat& images, const ImageShape& img, int p);
ad::Var patchify(const ad::Var& images, const ImageShape& img, int p);
// [B*N, c*p*p] -> [B, c*h*w]; img.c is the channel count of the tokens.
Mat unpatchify(const Mat& tokens, const ImageShape& img, int p);
ad::Var unpatchify(const ad::Var& tokens, const ImageShape& img, int p);

// 1-D bilinear resize a -> b (half-pixel centers, no corner alignment), [b, a].
Mat resize_matrix_1d(int a, int b);
// Square-patch resize a x a -> b x b acting on row-major flattened patches, [b*b, a*a].
Mat build_resize_matrix(int a, int b);
// Grid resize (gh, gw) -> (th, tw), [th*tw, gh*gw].
Mat build_grid_resize_matrix(int gh, int gw, int th, int tw);

// Q_embed(p) = pinv(resize p -> p'), [p*p, p'*p'].
Mat embed_projection(const PatchSpec& spec, int p);
// Q_deembed(p) = pinv(resize p' -> p), [p'*p', p*p].
Mat deembed_projection(const PatchSpec& spec, int p);
// kron(I_channels, q): applies q to every channel block independently.
Mat per_channel(const Mat& q, int channels);

struct EmbedWeights {
    ad::Var weight;  // embed: [c_in*p*p, d]; de-embed: [d, c_out*p*p]
    ad::Var bias;    // embed: [1, d];        de-embed: [1, c_out*p*p]
};

struct FlexiEmbeddings {
    struct Projections {
        Mat embed;    // per-channel Q_embed, [c_in*p*p, c_in*p'*p']
        Mat deembed;  // per-channel Q_deembed, [c_out*p'*p', c_out*p*p]
    };

    PatchSpec spec;
    int c_in = 1;
    int c_out = 1;
    int d = 0;
    ad::Var w_embed;    // [c_in*p'*p', d]
    ad::Var b_embed;    // [1, d]
    ad::Var w_deembed;  // [d, c_out*p'*p']
    ad::Var b_deembed;  // [1, c_out*p'*p']
    std::shared_ptr<const std::map<int, Projections>> projections;

    // Builds the projection cache for every supported patch size.
    void build_projections();
    const Projections& projection(int p) const;
};

EmbedWeights instantiate_embed(const FlexiEmbeddings& fe, int p);
EmbedWeights instantiate_deembed(const FlexiEmbeddings& fe, int p);

// Initializes flexible weights from layers trained at spec.p_powerful so the
// instantiation at p_powerful reproduces them.
FlexiEmbeddings init_from_pretrained(const Mat& w_embed, const Mat& b_embed, const Mat& w_deembed,
                                     const Mat& b_deembed, const PatchSpec& spec, int c_in, int c_out);

// Patch-center sin/cos encoding, [gh*gw, d]; coordinates are normalized by the
// image size so the encoding depends only on image position.
Mat positional_encoding(int gh, int gw, int p, int h, int w, int d);

struct PatchSizeEmbedding {
    std::map<int, ad::Var> table;  // [1, d] each
    int frozen_zero = 0;           // patch size pinned to zero (0 = none)

    ad::Var lookup(int p) const;
};

}  // namespace flexdit
