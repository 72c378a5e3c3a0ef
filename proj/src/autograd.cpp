#include "flexdit/autograd.hpp"

#include "flexdit/flop_counter.hpp"

#include <cmath>
#include <string>
#include <unordered_set>

namespace flexdit::ad {
namespace {

thread_local bool grad_mode = true;

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

std::string dims(const Mat& m) {
    return "[" + std::to_string(m.rows()) + "," + std::to_string(m.cols()) + "]";
}

Index total(std::span<const Index> lengths) {
    Index n = 0;
    for (Index l : lengths) {
        require(l >= 0, "negative segment length");
        n += l;
    }
    return n;
}

}  // namespace

void Node::accumulate(const Mat& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

Var::Var(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

double Var::item() const {
    require(rows() == 1 && cols() == 1, "item() on non-scalar " + dims(value()));
    return value()(0, 0);
}

void Var::backward() const {
    require(rows() == 1 && cols() == 1, "backward() needs a scalar root, got " + dims(value()));
    backward(Mat::Ones(1, 1));
}

void Var::backward(const Mat& seed) const {
    require(seed.rows() == rows() && seed.cols() == cols(), "backward seed shape mismatch");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->accumulate(seed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() > 0) n->backward_fn(*n);
    }
    // Interior gradients are scratch; only leaves keep theirs.
    for (Node* n : order) {
        if (n->backward_fn) n->grad.resize(0, 0);
    }
}

bool grad_enabled() { return grad_mode; }

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }

NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

Var make_result(Mat value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
    Var out(std::move(value), false);
    if (!grad_mode) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (auto& in : inputs) out.node_->parents.push_back(in.node());
    out.node_->backward_fn = std::move(fn);
    return out;
}

void ensure_finite(const Mat& m, const char* op) {
    if (!m.allFinite()) throw NumericError(std::string("non-finite value produced by ") + op);
}

namespace {
// Parent accessors used inside backward closures.
inline Node& P(Node& n, std::size_t i) { return *n.parents[i]; }
inline bool wants(Node& n, std::size_t i) { return n.parents[i]->requires_grad; }
}  // namespace

Var matmul(const Var& a, const Var& b) {
    require(a.cols() == b.rows(), "matmul inner dims " + dims(a.value()) + " x " + dims(b.value()));
    FlopCounter::record(2 * a.rows() * a.cols() * b.cols());
    Mat out = a.value() * b.value();
    ensure_finite(out, "matmul");
    return make_result(std::move(out), {a, b}, [](Node& n) {
        if (wants(n, 0)) P(n, 0).accumulate(n.grad * P(n, 1).value.transpose());
        if (wants(n, 1)) P(n, 1).accumulate(P(n, 0).value.transpose() * n.grad);
    });
}

Var add(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add shape " + dims(a.value()) + " vs " + dims(b.value()));
    Mat out = a.value() + b.value();
    ensure_finite(out, "add");
    return make_result(std::move(out), {a, b}, [](Node& n) {
        if (wants(n, 0)) P(n, 0).accumulate(n.grad);
        if (wants(n, 1)) P(n, 1).accumulate(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "sub shape " + dims(a.value()) + " vs " + dims(b.value()));
    Mat out = a.value() - b.value();
    ensure_finite(out, "sub");
    return make_result(std::move(out), {a, b}, [](Node& n) {
        if (wants(n, 0)) P(n, 0).accumulate(n.grad);
        if (wants(n, 1)) P(n, 1).accumulate(-n.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "mul shape " + dims(a.value()) + " vs " + dims(b.value()));
    Mat out = a.value().cwiseProduct(b.value());
    ensure_finite(out, "mul");
    return make_result(std::move(out), {a, b}, [](Node& n) {
        if (wants(n, 0)) P(n, 0).accumulate(n.grad.cwiseProduct(P(n, 1).value));
        if (wants(n, 1)) P(n, 1).accumulate(n.grad.cwiseProduct(P(n, 0).value));
    });
}

Var scale(const Var& a, double s) {
    Mat out = a.value() * s;
    ensure_finite(out, "scale");
    return make_result(std::move(out), {a}, [s](Node& n) { P(n, 0).accumulate(n.grad * s); });
}

Var add_scalar(const Var& a, double s) {
    Mat out = a.value().array() + s;
    ensure_finite(out, "add_scalar");
    return make_result(std::move(out), {a}, [](Node& n) { P(n, 0).accumulate(n.grad); });
}

Var bias_add(const Var& x, const Var& bias) {
    require(bias.rows() == 1 && bias.cols() == x.cols(), "bias_add shape " + dims(x.value()) + " + " + dims(bias.value()));
    Mat out = x.value().rowwise() + bias.value().row(0);
    ensure_finite(out, "bias_add");
    return make_result(std::move(out), {x, bias}, [](Node& n) {
        if (wants(n, 0)) P(n, 0).accumulate(n.grad);
        if (wants(n, 1)) P(n, 1).accumulate(n.grad.colwise().sum());
    });
}

Var row_mul(const Var& x, const Var& row) {
    require(row.rows() == 1 && row.cols() == x.cols(), "row_mul shape " + dims(x.value()) + " * " + dims(row.value()));
    Mat out = x.value().array().rowwise() * row.value().row(0).array();
    ensure_finite(out, "row_mul");
    return make_result(std::move(out), {x, row}, [](Node& n) {
        if (wants(n, 0)) P(n, 0).accumulate(n.grad.array().rowwise() * P(n, 1).value.row(0).array());
        if (wants(n, 1)) P(n, 1).accumulate(n.grad.cwiseProduct(P(n, 0).value).colwise().sum());
    });
}

Var square(const Var& x) {
    Mat out = x.value().array().square();
    ensure_finite(out, "square");
    return make_result(std::move(out), {x}, [](Node& n) {
        P(n, 0).accumulate(2.0 * n.grad.cwiseProduct(P(n, 0).value));
    });
}

Var sqrt(const Var& x) {
    if ((x.value().array() < 0.0).any()) throw NumericError("sqrt of negative value");
    Mat out = x.value().array().sqrt();
    return make_result(out, {x}, [out](Node& n) {
        Mat g = n.grad;
        for (Index i = 0; i < g.size(); ++i) {
            const double r = out.data()[i];
            g.data()[i] = r > 0.0 ? g.data()[i] / (2.0 * r) : 0.0;
        }
        P(n, 0).accumulate(g);
    });
}

Var exp(const Var& x) {
    Mat out = x.value().array().exp();
    ensure_finite(out, "exp");
    return make_result(out, {x}, [out](Node& n) { P(n, 0).accumulate(n.grad.cwiseProduct(out)); });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;
}  // namespace

Var gelu(const Var& x) {
    constexpr double c = kGeluC;
    constexpr double k = kGeluK;
    const Mat& v = x.value();
    Mat th = (c * (v.array() + k * v.array().cube())).tanh();
    Mat out = 0.5 * v.array() * (1.0 + th.array());
    ensure_finite(out, "gelu");
    return make_result(std::move(out), {x}, [th = std::move(th)](Node& n) {
        const auto v = P(n, 0).value.array();
        auto d = 0.5 * (1.0 + th.array()) +
                 0.5 * v * (1.0 - th.array().square()) * kGeluC * (1.0 + 3.0 * kGeluK * v.square());
        P(n, 0).accumulate((n.grad.array() * d).matrix());
    });
}

Var silu(const Var& x) {
    Mat sig = (1.0 + (-x.value().array()).exp()).inverse();
    Mat out = x.value().array() * sig.array();
    ensure_finite(out, "silu");
    return make_result(std::move(out), {x}, [sig = std::move(sig)](Node& n) {
        const auto v = P(n, 0).value.array();
        auto d = sig.array() * (1.0 + v * (1.0 - sig.array()));
        P(n, 0).accumulate((n.grad.array() * d).matrix());
    });
}

Var sum(const Var& x) {
    Mat out(1, 1);
    out(0, 0) = x.value().sum();
    ensure_finite(out, "sum");
    return make_result(std::move(out), {x}, [](Node& n) {
        const Mat& v = P(n, 0).value;
        P(n, 0).accumulate(Mat::Constant(v.rows(), v.cols(), n.grad(0, 0)));
    });
}

Var mean(const Var& x) {
    require(x.value().size() > 0, "mean of empty value");
    return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var row_sum(const Var& x) {
    Mat out = x.value().rowwise().sum();
    ensure_finite(out, "row_sum");
    return make_result(std::move(out), {x}, [](Node& n) {
        const Mat& v = P(n, 0).value;
        Mat g(v.rows(), v.cols());
        for (Index r = 0; r < v.rows(); ++r) g.row(r).setConstant(n.grad(r, 0));
        P(n, 0).accumulate(g);
    });
}

Var reshape(const Var& x, Index rows, Index cols) {
    require(rows * cols == x.value().size(), "reshape size mismatch");
    Mat out = Eigen::Map<const Mat>(x.value().data(), rows, cols);
    return make_result(std::move(out), {x}, [](Node& n) {
        const Mat& v = P(n, 0).value;
        P(n, 0).accumulate(Eigen::Map<const Mat>(n.grad.data(), v.rows(), v.cols()));
    });
}

Var slice_rows(const Var& x, Index start, Index count) {
    require(start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows out of range");
    Mat out = x.value().middleRows(start, count);
    return make_result(std::move(out), {x}, [start, count](Node& n) {
        const Mat& v = P(n, 0).value;
        Mat g = Mat::Zero(v.rows(), v.cols());
        g.middleRows(start, count) = n.grad;
        P(n, 0).accumulate(g);
    });
}

Var slice_cols(const Var& x, Index start, Index count) {
    require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols out of range");
    Mat out = x.value().middleCols(start, count);
    return make_result(std::move(out), {x}, [start, count](Node& n) {
        const Mat& v = P(n, 0).value;
        Mat g = Mat::Zero(v.rows(), v.cols());
        g.middleCols(start, count) = n.grad;
        P(n, 0).accumulate(g);
    });
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows of nothing");
    Index rows = 0;
    const Index cols = parts[0].cols();
    for (const auto& p : parts) {
        require(p.cols() == cols, "concat_rows column mismatch");
        rows += p.rows();
    }
    Mat out(rows, cols);
    std::vector<Index> offsets;
    Index r = 0;
    for (const auto& p : parts) {
        offsets.push_back(r);
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return make_result(std::move(out), inputs, [offsets](Node& n) {
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
            if (!wants(n, i)) continue;
            P(n, i).accumulate(n.grad.middleRows(offsets[i], P(n, i).value.rows()));
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    require(!parts.empty(), "concat_cols of nothing");
    Index cols = 0;
    const Index rows = parts[0].rows();
    for (const auto& p : parts) {
        require(p.rows() == rows, "concat_cols row mismatch");
        cols += p.cols();
    }
    Mat out(rows, cols);
    std::vector<Index> offsets;
    Index c = 0;
    for (const auto& p : parts) {
        offsets.push_back(c);
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return make_result(std::move(out), inputs, [offsets](Node& n) {
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
            if (!wants(n, i)) continue;
            P(n, i).accumulate(n.grad.middleCols(offsets[i], P(n, i).value.cols()));
        }
    });
}

Var gather_rows(const Var& x, std::span<const Index> rows) {
    Mat out(static_cast<Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && rows[i] < x.rows(), "gather_rows index out of range");
        out.row(static_cast<Index>(i)) = x.value().row(rows[i]);
    }
    std::vector<Index> idx(rows.begin(), rows.end());
    return make_result(std::move(out), {x}, [idx](Node& n) {
        const Mat& v = P(n, 0).value;
        Mat g = Mat::Zero(v.rows(), v.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Index>(i));
        P(n, 0).accumulate(g);
    });
}

Var broadcast_segments(const Var& x, std::span<const Index> lengths) {
    require(static_cast<Index>(lengths.size()) == x.rows(), "broadcast_segments: one length per row required");
    const Index rows = total(lengths);
    Mat out(rows, x.cols());
    Index r = 0;
    for (std::size_t s = 0; s < lengths.size(); ++s) {
        for (Index i = 0; i < lengths[s]; ++i) out.row(r++) = x.value().row(static_cast<Index>(s));
    }
    std::vector<Index> lens(lengths.begin(), lengths.end());
    return make_result(std::move(out), {x}, [lens](Node& n) {
        Mat g(static_cast<Index>(lens.size()), n.grad.cols());
        Index r = 0;
        for (std::size_t s = 0; s < lens.size(); ++s) {
            g.row(static_cast<Index>(s)) = n.grad.middleRows(r, lens[s]).colwise().sum();
            r += lens[s];
        }
        P(n, 0).accumulate(g);
    });
}

Var gather_flat(const Var& x, Index rows, Index cols, std::span<const Index> source) {
    require(rows * cols == static_cast<Index>(source.size()), "gather_flat: index count mismatch");
    const Index n_in = x.value().size();
    Mat out(rows, cols);
    for (std::size_t i = 0; i < source.size(); ++i) {
        require(source[i] >= 0 && source[i] < n_in, "gather_flat index out of range");
        out.data()[i] = x.value().data()[source[i]];
    }
    std::vector<Index> src(source.begin(), source.end());
    return make_result(std::move(out), {x}, [src](Node& n) {
        const Mat& v = P(n, 0).value;
        Mat g = Mat::Zero(v.rows(), v.cols());
        for (std::size_t i = 0; i < src.size(); ++i) g.data()[src[i]] += n.grad.data()[i];
        P(n, 0).accumulate(g);
    });
}

Var scatter_add_rows(const Var& base, const Var& update, std::span<const Index> rows) {
    require(update.rows() == static_cast<Index>(rows.size()) && update.cols() == base.cols(),
            "scatter_add_rows shape mismatch");
    Mat out = base.value();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && rows[i] < base.rows(), "scatter_add_rows index out of range");
        out.row(rows[i]) += update.value().row(static_cast<Index>(i));
    }
    ensure_finite(out, "scatter_add_rows");
    std::vector<Index> idx(rows.begin(), rows.end());
    return make_result(std::move(out), {base, update}, [idx](Node& n) {
        if (wants(n, 0)) P(n, 0).accumulate(n.grad);
        if (wants(n, 1)) {
            Mat g(static_cast<Index>(idx.size()), n.grad.cols());
            for (std::size_t i = 0; i < idx.size(); ++i) g.row(static_cast<Index>(i)) = n.grad.row(idx[i]);
            P(n, 1).accumulate(g);
        }
    });
}

Var embedding_lookup(const Var& table, std::span<const Index> ids) {
    for (Index id : ids) {
        if (id < 0 || id >= table.rows()) {
            throw ShapeError("embedding id " + std::to_string(id) + " outside table of " +
                             std::to_string(table.rows()) + " rows");
        }
    }
    return gather_rows(table, ids);
}

Var layer_norm(const Var& x, double eps) {
    const Mat& v = x.value();
    const Index d = v.cols();
    require(d >= 1, "layer_norm over empty axis");
    Mat xhat(v.rows(), d);
    Vec inv_std(v.rows());
    for (Index r = 0; r < v.rows(); ++r) {
        const double mu = v.row(r).mean();
        const double var = (v.row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (v.row(r).array() - mu) * inv_std(r);
    }
    ensure_finite(xhat, "layer_norm");
    return make_result(xhat, {x}, [xhat, inv_std](Node& n) {
        const Index d = xhat.cols();
        Mat g(xhat.rows(), d);
        for (Index r = 0; r < xhat.rows(); ++r) {
            const auto dy = n.grad.row(r).array();
            const double m1 = dy.mean();
            const double m2 = (dy * xhat.row(r).array()).mean();
            g.row(r) = inv_std(r) * (dy - m1 - xhat.row(r).array() * m2);
        }
        P(n, 0).accumulate(g);
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    return bias_add(row_mul(layer_norm(x, eps), gamma), beta);
}

Var softmax_attention(const Var& q, const Var& k, const Var& v, Index heads,
                      std::span<const Index> q_lengths, std::span<const Index> kv_lengths) {
    require(heads >= 1 && q.cols() % heads == 0, "attention width not divisible by heads");
    require(k.cols() == q.cols() && v.cols() == q.cols(), "attention q/k/v width mismatch");
    require(k.rows() == v.rows(), "attention k/v length mismatch");
    require(q_lengths.size() == kv_lengths.size(), "attention mask: segment count mismatch");
    require(total(q_lengths) == q.rows(), "attention mask does not cover the query rows");
    require(total(kv_lengths) == k.rows(), "attention mask does not cover the key rows");

    const Index dh = q.cols() / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t nseg = q_lengths.size();

    Mat out = Mat::Zero(q.rows(), q.cols());
    // Attention weights per (segment, head), kept for the backward pass.
    auto weights = std::make_shared<std::vector<Mat>>(nseg * static_cast<std::size_t>(heads));
    Index qo = 0, ko = 0;
    for (std::size_t s = 0; s < nseg; ++s) {
        const Index nq = q_lengths[s], nk = kv_lengths[s];
        require(nq == 0 || nk > 0, "attention segment with queries but no keys");
        FlopCounter::record(4 * nq * nk * q.cols());
        for (Index h = 0; h < heads; ++h) {
            if (nq == 0) continue;
            Mat logits = q.value().block(qo, h * dh, nq, dh) * k.value().block(ko, h * dh, nk, dh).transpose();
            logits *= inv_sqrt;
            for (Index r = 0; r < nq; ++r) {
                const double mx = logits.row(r).maxCoeff();
                logits.row(r) = (logits.row(r).array() - mx).exp();
                logits.row(r) /= logits.row(r).sum();
            }
            out.block(qo, h * dh, nq, dh) = logits * v.value().block(ko, h * dh, nk, dh);
            (*weights)[s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] = std::move(logits);
        }
        qo += nq;
        ko += nk;
    }
    ensure_finite(out, "softmax_attention");

    std::vector<Index> ql(q_lengths.begin(), q_lengths.end());
    std::vector<Index> kl(kv_lengths.begin(), kv_lengths.end());
    return make_result(std::move(out), {q, k, v}, [=](Node& n) {
        const Mat& qv = P(n, 0).value;
        const Mat& kv = P(n, 1).value;
        const Mat& vv = P(n, 2).value;
        Mat gq = Mat::Zero(qv.rows(), qv.cols());
        Mat gk = Mat::Zero(kv.rows(), kv.cols());
        Mat gv = Mat::Zero(vv.rows(), vv.cols());
        Index qo = 0, ko = 0;
        for (std::size_t s = 0; s < ql.size(); ++s) {
            const Index nq = ql[s], nk = kl[s];
            for (Index h = 0; h < heads && nq > 0; ++h) {
                const Mat& a = (*weights)[s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
                const Mat dout = n.grad.block(qo, h * dh, nq, dh);
                gv.block(ko, h * dh, nk, dh) += a.transpose() * dout;
                Mat da = dout * vv.block(ko, h * dh, nk, dh).transpose();
                const Vec rowdot = (da.cwiseProduct(a)).rowwise().sum();
                Mat ds = a.cwiseProduct(da.colwise() - rowdot) * inv_sqrt;
                gq.block(qo, h * dh, nq, dh) += ds * kv.block(ko, h * dh, nk, dh);
                gk.block(ko, h * dh, nk, dh) += ds.transpose() * qv.block(qo, h * dh, nq, dh);
            }
            qo += nq;
            ko += nk;
        }
        if (wants(n, 0)) P(n, 0).accumulate(gq);
        if (wants(n, 1)) P(n, 1).accumulate(gk);
        if (wants(n, 2)) P(n, 2).accumulate(gv);
    });
}

Var pairwise_sqdist(const Var& x, const Var& y) {
    require(x.cols() == y.cols(), "pairwise_sqdist feature mismatch");
    const Mat& a = x.value();
    const Mat& b = y.value();
    Mat out(a.rows(), b.rows());
    for (Index i = 0; i < a.rows(); ++i) {
        for (Index j = 0; j < b.rows(); ++j) out(i, j) = (a.row(i) - b.row(j)).squaredNorm();
    }
    ensure_finite(out, "pairwise_sqdist");
    return make_result(std::move(out), {x, y}, [](Node& n) {
        const Mat& a = P(n, 0).value;
        const Mat& b = P(n, 1).value;
        // d/da_i = sum_j 2 g_ij (a_i - b_j)
        const Vec gr = n.grad.rowwise().sum();
        const RowVec gc = n.grad.colwise().sum();
        if (wants(n, 0)) P(n, 0).accumulate(2.0 * (gr.asDiagonal() * a - n.grad * b));
        if (wants(n, 1)) P(n, 1).accumulate(2.0 * (gc.transpose().asDiagonal() * b - n.grad.transpose() * a));
    });
}

}  // namespace flexdit::ad
