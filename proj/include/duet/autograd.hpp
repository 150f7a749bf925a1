#pragma once
// Tape-free reverse-mode autodiff over duet::Tensor.
//
// A Var is a shared handle to a graph node. Parameters are leaf nodes with
// requires_grad set; freezing a parameter is clearing that flag, which makes
// it behave exactly like a constant (no gradient is ever accumulated into it).
// Ops only record parents when at least one input requires a gradient and
// recording is enabled (see NoGradGuard).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "duet/tensor.hpp"

namespace duet::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node& self)> backward_fn;

    Tensor& ensure_grad();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Tensor value);
    static Var parameter(Tensor value);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->ensure_grad(); }
    Tensor& mutable_grad() { return node_->ensure_grad(); }
    bool has_grad() const { return !node_->grad.data.empty(); }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    std::size_t size() const { return node_->value.size(); }
    double item() const { return node_->value.item(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad();

    // Seeds d(self)/d(self) = 1 for a single-element Var and propagates.
    void backward() const;

    const std::shared_ptr<Node>& node() const { return node_; }
    bool same_node(const Var& other) const { return node_ == other.node_; }

private:
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
    bool prev_;
};

// ---- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var abs(const Var& a);
Var sigmoid(const Var& a);
// x * sigmoid(1.702 x), the activation used by CLIP's transformers.
Var quick_gelu(const Var& a);

// ---- reductions ------------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);

// ---- linear algebra --------------------------------------------------------
// a: [n x k], b: [k x m] -> [n x m]
Var matmul(const Var& a, const Var& b);
// x: [n x k], w: [k x m], bias: [m] (optional) -> [n x m]
Var linear(const Var& x, const Var& w, const Var& bias = Var());
// a: [n x m] + bias: [m] broadcast across rows
Var add_rowwise(const Var& a, const Var& bias);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var softmax_rows(const Var& x);
// Mean over rows of -log softmax(logits)_i[labels_i]; returns shape [1].
Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels);

// Per-row scalars, shape [n].
Var row_dot(const Var& a, const Var& b);
Var row_norm(const Var& a);
// 1 - <a_i, b_i> / (|a_i| |b_i|). Throws std::domain_error on a zero row.
Var cosine_distance_rows(const Var& a, const Var& b);
// Scales every row to unit length.
Var normalize_rows(const Var& a);

// ---- shape -----------------------------------------------------------------
Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a);
Var gather_rows(const Var& a, std::vector<std::size_t> index);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);

// ---- attention -------------------------------------------------------------
// qkv: [N x 3w] packed per token as (q | k | v); tokens of consecutive
// sequences are stacked, lengths give the per-sequence token counts.
// Returns [N x w] of concatenated head outputs (pre output-projection).
Var multi_head_attention(const Var& qkv, const std::vector<std::size_t>& lengths,
                         std::size_t heads, bool causal);

// patches: [B*T x d], query: [B x d] -> [B x T] with entries <patch, query>
Var batched_patch_dot(const Var& patches, const Var& query, std::size_t tokens);
// weights: [B x T], patches: [B*T x d] -> [B x d]
Var batched_weighted_sum(const Var& weights, const Var& patches);

// ---- images ----------------------------------------------------------------
// x: [B x C x H x W], w: [Co x C x 3 x 3], b: [Co]; stride 1, zero padding 1.
Var conv3x3(const Var& x, const Var& w, const Var& b);
// x: [B x C x H x W] -> [B x C x 2H x 2W], nearest neighbour.
Var upsample2x(const Var& x);

}  // namespace duet::ag
