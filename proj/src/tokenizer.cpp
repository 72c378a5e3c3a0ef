#include "flexdit/tokenizer.hpp"

#include "flexdit/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace flexdit {

PatchSpec PatchSpec::make(int p_powerful, int p_weak) {
    PatchSpec s;
    s.p_powerful = p_powerful;
    s.p_weak = p_weak > 0 ? p_weak : 2 * p_powerful;
    if (s.p_powerful < 1 || s.p_weak < 1) throw ConfigError("patch sizes must be positive");
    s.supported = {s.p_powerful};
    if (s.p_weak != s.p_powerful) s.supported.push_back(s.p_weak);
    std::sort(s.supported.begin(), s.supported.end());
    s.p_underlying = s.supported.back();
    return s;
}

bool PatchSpec::supports(int p) const { return std::find(supported.begin(), supported.end(), p) != supported.end(); }

void PatchSpec::validate(const ImageShape& img) const {
    if (p_powerful > p_underlying || p_weak > p_underlying) {
        throw ConfigError("patch sizes must not exceed the underlying patch size");
    }
    for (int p : supported) {
        if (img.h % p != 0 || img.w % p != 0) {
            throw ConfigError("patch size " + std::to_string(p) + " does not divide the " + std::to_string(img.h) + "x" +
                              std::to_string(img.w) + " image");
        }
    }
}

namespace {
void check_divisible(const ImageShape& img, int p) {
    if (p < 1 || img.h % p != 0 || img.w % p != 0) {
        throw ShapeError("patch size " + std::to_string(p) + " does not divide " + std::to_string(img.h) + "x" +
                         std::to_string(img.w));
    }
}
}  // namespace

std::vector<Index> patchify_index(const ImageShape& img, int p, Index batch) {
    check_divisible(img, p);
    const Index gh = img.h / p, gw = img.w / p;
    const Index per_token = Index{img.c} * p * p;
    std::vector<Index> idx;
    idx.reserve(static_cast<std::size_t>(batch * gh * gw * per_token));
    for (Index b = 0; b < batch; ++b)
        for (Index gi = 0; gi < gh; ++gi)
            for (Index gj = 0; gj < gw; ++gj)
                for (Index c = 0; c < img.c; ++c)
                    for (Index r = 0; r < p; ++r)
                        for (Index s = 0; s < p; ++s)
                            idx.push_back(b * img.size() + (c * img.h + gi * p + r) * img.w + gj * p + s);
    return idx;
}

Mat patchify(const Mat& images, const ImageShape& img, int p) {
    return patchify(ad::Var::constant(images), img, p).value();
}

ad::Var patchify(const ad::Var& images, const ImageShape& img, int p) {
    if (images.cols() != img.size()) throw ShapeError("patchify: image rows do not match the image shape");
    const auto idx = patchify_index(img, p, images.rows());
    const Index n = Index{img.h / p} * (img.w / p);
    return ad::gather_flat(images, images.rows() * n, Index{img.c} * p * p, idx);
}

Mat unpatchify(const Mat& tokens, const ImageShape& img, int p) {
    return unpatchify(ad::Var::constant(tokens), img, p).value();
}

ad::Var unpatchify(const ad::Var& tokens, const ImageShape& img, int p) {
    check_divisible(img, p);
    const Index n = Index{img.h / p} * (img.w / p);
    if (tokens.cols() != Index{img.c} * p * p || tokens.rows() % n != 0) {
        throw ShapeError("unpatchify: token matrix does not match the image shape");
    }
    const Index batch = tokens.rows() / n;
    // Invert the patchify permutation.
    const auto fwd = patchify_index(img, p, batch);
    std::vector<Index> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[static_cast<std::size_t>(fwd[i])] = static_cast<Index>(i);
    return ad::gather_flat(tokens, batch, img.size(), inv);
}

Mat resize_matrix_1d(int a, int b) {
    if (a < 1 || b < 1) throw ShapeError("resize sizes must be positive");
    Mat r = Mat::Zero(b, a);
    const double ratio = static_cast<double>(a) / static_cast<double>(b);
    for (int i = 0; i < b; ++i) {
        double src = (i + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(a - 1));
        const int i0 = static_cast<int>(std::floor(src));
        const int i1 = std::min(i0 + 1, a - 1);
        const double frac = src - i0;
        r(i, i0) += 1.0 - frac;
        r(i, i1) += frac;
    }
    return r;
}

Mat build_resize_matrix(int a, int b) { return build_grid_resize_matrix(a, a, b, b); }

Mat build_grid_resize_matrix(int gh, int gw, int th, int tw) {
    const Mat rh = resize_matrix_1d(gh, th);
    const Mat rw = resize_matrix_1d(gw, tw);
    // Row-major flattening: out(y, x) = sum rh(y, i) rw(x, j) in(i, j).
    Mat k(Index{th} * tw, Index{gh} * gw);
    for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x)
            for (int i = 0; i < gh; ++i)
                for (int j = 0; j < gw; ++j) k(Index{y} * tw + x, Index{i} * gw + j) = rh(y, i) * rw(x, j);
    return k;
}

Mat embed_projection(const PatchSpec& spec, int p) {
    if (p > spec.p_underlying) throw ShapeError("embed projection needs p <= p'");
    Mat q = pseudo_inverse(build_resize_matrix(p, spec.p_underlying));
    if (numerical_rank(q) != Index{p} * p) throw NumericError("embed projection lost rank");
    return q;
}

Mat deembed_projection(const PatchSpec& spec, int p) {
    if (p > spec.p_underlying) throw ShapeError("de-embed projection needs p <= p'");
    Mat q = pseudo_inverse(build_resize_matrix(spec.p_underlying, p));
    if (numerical_rank(q) != Index{p} * p) throw NumericError("de-embed projection lost rank");
    return q;
}

Mat per_channel(const Mat& q, int channels) {
    Mat out = Mat::Zero(q.rows() * channels, q.cols() * channels);
    for (int c = 0; c < channels; ++c) out.block(c * q.rows(), c * q.cols(), q.rows(), q.cols()) = q;
    return out;
}

void FlexiEmbeddings::build_projections() {
    auto cache = std::make_shared<std::map<int, Projections>>();
    for (int p : spec.supported) {
        (*cache)[p] = Projections{per_channel(embed_projection(spec, p), c_in),
                                  per_channel(deembed_projection(spec, p), c_out)};
    }
    projections = std::move(cache);
}

const FlexiEmbeddings::Projections& FlexiEmbeddings::projection(int p) const {
    if (!projections) throw Error("flexible embeddings used before build_projections()");
    auto it = projections->find(p);
    if (it == projections->end()) throw ShapeError("patch size " + std::to_string(p) + " is not supported");
    return it->second;
}

EmbedWeights instantiate_embed(const FlexiEmbeddings& fe, int p) {
    const auto& proj = fe.projection(p);
    return {ad::matmul(ad::Var::constant(proj.embed), fe.w_embed), fe.b_embed};
}

EmbedWeights instantiate_deembed(const FlexiEmbeddings& fe, int p) {
    const auto& proj = fe.projection(p);
    ad::Var q = ad::Var::constant(proj.deembed);
    return {ad::matmul(fe.w_deembed, q), ad::matmul(fe.b_deembed, q)};
}

FlexiEmbeddings init_from_pretrained(const Mat& w_embed, const Mat& b_embed, const Mat& w_deembed,
                                     const Mat& b_deembed, const PatchSpec& spec, int c_in, int c_out) {
    const int p = spec.p_powerful;
    const Index d = w_embed.cols();
    if (w_embed.rows() != Index{c_in} * p * p || b_embed.rows() != 1 || b_embed.cols() != d ||
        w_deembed.rows() != d || w_deembed.cols() != Index{c_out} * p * p || b_deembed.rows() != 1 ||
        b_deembed.cols() != w_deembed.cols()) {
        throw ShapeError("pretrained embedding shapes do not match the pretrained patch size");
    }
    if (c_out != c_in && c_out != 2 * c_in) throw ShapeError("c_out must be c_in or 2*c_in");

    FlexiEmbeddings fe;
    fe.spec = spec;
    fe.c_in = c_in;
    fe.c_out = c_out;
    fe.d = static_cast<int>(d);
    fe.build_projections();
    const auto& proj = fe.projection(p);
    // w_flex = Q_embed^+ w ; w_flex_de = w_de Q_deembed^+
    const Mat embed_pinv = pseudo_inverse(proj.embed);
    const Mat deembed_pinv = pseudo_inverse(proj.deembed);
    fe.w_embed = ad::Var::parameter(embed_pinv * w_embed);
    fe.b_embed = ad::Var::parameter(b_embed);
    fe.w_deembed = ad::Var::parameter(w_deembed * deembed_pinv);
    fe.b_deembed = ad::Var::parameter(b_deembed * deembed_pinv);
    return fe;
}

Mat positional_encoding(int gh, int gw, int p, int h, int w, int d) {
    if (d % 4 != 0) throw ShapeError("positional encoding width must be divisible by 4");
    constexpr double kPositionScale = 32.0;
    const int quarter = d / 4;
    Mat out(Index{gh} * gw, d);
    for (int i = 0; i < gh; ++i) {
        for (int j = 0; j < gw; ++j) {
            const double y = (i + 0.5) * p / h * kPositionScale;
            const double x = (j + 0.5) * p / w * kPositionScale;
            auto row = out.row(Index{i} * gw + j);
            for (int k = 0; k < quarter; ++k) {
                const double omega = std::pow(10000.0, -static_cast<double>(k) / quarter);
                row(k) = std::sin(y * omega);
                row(quarter + k) = std::cos(y * omega);
                row(2 * quarter + k) = std::sin(x * omega);
                row(3 * quarter + k) = std::cos(x * omega);
            }
        }
    }
    return out;
}

ad::Var PatchSizeEmbedding::lookup(int p) const {
    auto it = table.find(p);
    if (it == table.end()) throw ShapeError("no patch-size embedding registered for p=" + std::to_string(p));
    return it->second;
}

}  // namespace flexdit
