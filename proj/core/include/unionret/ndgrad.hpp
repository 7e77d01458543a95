#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Minimal dense f64 tensors (rank 1..3) with tape-based reverse-mode gradients.
//
// A Tensor is a shared handle onto a node that owns its value and (lazily) its
// gradient buffer. Operations take the Tape they record on as first argument.
// A Tape is confined to one thread; independent tapes may run concurrently over
// shared read-only leaves as long as none of them records.

namespace unionret::nd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;   // empty until first accumulation
    bool requires_grad = false;
    bool is_leaf = true;
    bool grad_live = false;     // intermediate received gradient during the current backward

    void accumulate(std::span<const double> g);
    std::span<double> grad_buffer(); // allocates zeros on first use
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<double> data() { return node_->value; }
    std::span<const double> data() const { return node_->value; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    // Gradient; empty span if nothing has flowed into this tensor yet.
    std::span<const double> grad() const { return node_->grad; }
    std::vector<double> grad_or_zeros() const;
    void zero_grad();

    TensorNode& node() const { return *node_; }
    const std::shared_ptr<TensorNode>& handle() const noexcept { return node_; }
    bool same(const Tensor& other) const noexcept { return node_ == other.node_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    friend class Tape;

    std::shared_ptr<TensorNode> node_;
};

/// Ordered record of differentiable operations.
///
/// Ops append in execution order, so the record is topological by
/// construction; backward() replays it in exact reverse. A non-recording tape
/// still computes values but keeps nothing and yields tensors with
/// requires_grad == false.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return ops_.size(); }

    // Allocates an op output. requires_grad is set when this tape records and
    // any input requires grad.
    Tensor make_output(Shape shape, std::span<const Tensor> inputs) const;

    // Registers the backward rule for `output`. No-op unless output.requires_grad().
    // The rule reads output.node().grad and accumulates into its inputs.
    void record(std::string_view name, const Tensor& output, std::vector<Tensor> inputs,
                std::function<void()> backward);

    // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse order.
    // Intermediate gradients are reset first; leaf gradients accumulate across calls.
    void backward(const Tensor& loss);

    void clear() { ops_.clear(); }

private:
    struct Op {
        std::string name;
        std::shared_ptr<TensorNode> output;
        std::vector<std::shared_ptr<TensorNode>> inputs;
        std::function<void()> backward;
    };

    bool recording_;
    std::vector<Op> ops_;
};

// Batched matrix product: a[..,M,K] x b[..,K,N]. Rank-2 operands (and batch
// size 1) broadcast across the other operand's batch.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

Tensor add(Tape& tape, const Tensor& x, const Tensor& y);
Tensor add(Tape& tape, const Tensor& x, double y);
Tensor sub(Tape& tape, const Tensor& x, const Tensor& y);
Tensor mul(Tape& tape, const Tensor& x, const Tensor& y);
Tensor scale(Tape& tape, const Tensor& x, double factor);
Tensor sigmoid(Tape& tape, const Tensor& x);
// Exact GELU: x * Phi(x) with Phi the standard normal CDF (via erf).
Tensor gelu(Tape& tape, const Tensor& x);

// x + y where y's shape equals a trailing suffix of x's shape (bias rows,
// per-token tables).
Tensor add_trailing(Tape& tape, const Tensor& x, const Tensor& y);

// Per-element std::lerp(from, to, weight); all three share one shape. The result
// lies between `from` and `to` whenever weight is in [0, 1], and equals `from`
// exactly when from == to.
Tensor lerp(Tape& tape, const Tensor& from, const Tensor& to, const Tensor& weight);

Tensor softmax_lastdim(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// Mean along `axis`; the axis is removed (a rank-1 input yields shape {1}).
Tensor reduce_mean(Tape& tape, const Tensor& x, std::size_t axis);
Tensor reduce_sum(Tape& tape, const Tensor& x);

Tensor transpose_last2(Tape& tape, const Tensor& x);
Tensor slice_lastdim(Tape& tape, const Tensor& x, std::size_t offset, std::size_t length);
Tensor concat_lastdim(Tape& tape, std::span<const Tensor> parts);

// rows[t] is [B,D]; result is [B,T,D].
Tensor stack_tokens(Tape& tape, std::span<const Tensor> rows);
// x[B,T,D] -> x[:, t, :] as [B,D].
Tensor select_token(Tape& tape, const Tensor& x, std::size_t t);

// Each row of x[..,D] divided by its L2 norm; zero rows are rejected.
Tensor l2_normalize_rows(Tape& tape, const Tensor& x);

// mean_i( logsumexp(logits_i) - logits_i[labels_i] ) for logits[B,C].
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels);

// Standard normal CDF.
double normal_cdf(double x);

} // namespace unionret::nd
