#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Var is a shared handle to a graph node. Ops record a backward closure
// only when grad mode is on and at least one input requires a gradient, so
// inference under NoGradGuard builds no tape.

#include "flexdit/common.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace flexdit::ad {

struct Node {
    Mat value;
    Mat grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Mat& g);
};

class Var {
  public:
    Var() = default;
    explicit Var(Mat value, bool requires_grad = false);

    static Var constant(Mat value) { return Var(std::move(value), false); }
    static Var parameter(Mat value) { return Var(std::move(value), true); }

    bool defined() const { return node_ != nullptr; }
    const Mat& value() const { return node_->value; }
    // For optimizers and initializers; never call on a non-leaf mid-graph.
    Mat& mutable_value() { return node_->value; }
    const Mat& grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() > 0; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    double item() const;

    void zero_grad() { node_->grad.resize(0, 0); }
    // Back-propagates from a 1x1 value with seed gradient 1.
    void backward() const;
    // Back-propagates an explicit seed of the same shape.
    void backward(const Mat& seed) const;

    Var detach() const { return Var(node_->value, false); }
    // Deep copy of the value into a fresh leaf with the same grad flag.
    Var clone() const { return Var(node_->value, node_->requires_grad); }

    const std::shared_ptr<Node>& node() const { return node_; }

  private:
    friend Var make_result(Mat value, std::vector<Var> inputs, std::function<void(Node&)> fn);
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

// Creates an op result; the closure is kept only if some input needs grad.
Var make_result(Mat value, std::vector<Var> inputs, std::function<void(Node&)> fn);

// Throws NumericError naming the op if any entry is NaN or infinite.
void ensure_finite(const Mat& m, const char* op);

// --- linear algebra -------------------------------------------------------
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// [R,C] + [1,C] broadcast over rows.
Var bias_add(const Var& x, const Var& bias);
// [R,C] * [1,C] broadcast over rows.
Var row_mul(const Var& x, const Var& row);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// --- elementwise -----------------------------------------------------------
Var square(const Var& x);
Var sqrt(const Var& x);  // subgradient 0 at 0
Var exp(const Var& x);
Var gelu(const Var& x);  // tanh approximation
Var silu(const Var& x);

// --- reductions ------------------------------------------------------------
Var sum(const Var& x);
Var mean(const Var& x);
Var row_sum(const Var& x);  // [R,C] -> [R,1]

// --- shape -----------------------------------------------------------------
Var reshape(const Var& x, Index rows, Index cols);
Var slice_rows(const Var& x, Index start, Index count);
Var slice_cols(const Var& x, Index start, Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& x, std::span<const Index> rows);
// Row s of `x` is replicated lengths[s] times.
Var broadcast_segments(const Var& x, std::span<const Index> lengths);
// out.flat[i] = x.flat[source[i]]; `source` is a permutation or selection.
Var gather_flat(const Var& x, Index rows, Index cols, std::span<const Index> source);
// out = base with rows[i] of base replaced by `update` row i (gradient split).
Var scatter_add_rows(const Var& base, const Var& update, std::span<const Index> rows);
Var embedding_lookup(const Var& table, std::span<const Index> ids);

// --- normalization / attention --------------------------------------------
// Last-axis normalization without affine parameters.
Var layer_norm(const Var& x, double eps);
// gamma, beta are [1,d].
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);

// Multi-head scaled dot-product attention over block-diagonal segments.
// q is [sum(q_lengths), heads*dh]; k and v are [sum(kv_lengths), heads*dh].
// Query segment s attends only to key segment s.
Var softmax_attention(const Var& q, const Var& k, const Var& v, Index heads,
                      std::span<const Index> q_lengths, std::span<const Index> kv_lengths);

// [n,d] x [m,d] -> [n,m] of squared euclidean distances.
Var pairwise_sqdist(const Var& x, const Var& y);

}  // namespace flexdit::ad
