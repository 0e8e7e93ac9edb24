#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "segkc/common.hpp"

namespace segkc {

/// Dense n-dimensional array participating in reverse-mode differentiation.
/// Shape {} denotes a scalar (one value). Values are validated finite on
/// construction and after every operation.
struct TensorImpl {
    std::vector<int> shape;
    std::vector<real> values;
    std::vector<real> grad;  // empty until backward touches this tensor
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false);
    static Tensor full(const std::vector<int>& shape, real value, bool requires_grad = false);
    static Tensor from_values(const std::vector<int>& shape, std::vector<real> values,
                              bool requires_grad = false);
    static Tensor scalar(real value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return impl_->values.size(); }

    std::span<const real> values() const { return impl_->values; }
    /// In-place mutation of values; for parameter updates between tapes only.
    std::span<real> values_mut() { return impl_->values; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const real> grad() const;
    void zero_grad();

    /// Value of a single-element tensor.
    real item() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;

    friend Tensor wrap_impl(std::shared_ptr<TensorImpl>);
};

/// Integer per-pixel map (labels, argmax results). Same shape convention as Tensor.
struct IntMap {
    std::vector<int> shape;
    std::vector<std::int32_t> v;

    std::size_t size() const { return v.size(); }
};

/// Boolean per-pixel map (confidence masks).
struct BoolMap {
    std::vector<int> shape;
    std::vector<std::uint8_t> v;

    std::size_t size() const { return v.size(); }
    std::size_t count_true() const;
};

/// Ordered record of differentiable operations for one forward pass.
/// One tape per logical thread; constructing it activates it for the current
/// thread, destruction deactivates. Operations executed while a tape is active
/// and involving a requires_grad operand are recorded in execution order;
/// backward() replays them exactly once in reverse.
class GraphTape {
public:
    GraphTape();
    ~GraphTape();
    GraphTape(const GraphTape&) = delete;
    GraphTape& operator=(const GraphTape&) = delete;

    /// Seeds d(root)/d(root) = 1 and accumulates gradients into every
    /// requires_grad tensor recorded on the tape. root must be a scalar
    /// produced on this tape.
    void backward(const Tensor& root);

    std::size_t num_nodes() const { return nodes_.size(); }

    static GraphTape* active();

    // Used by op implementations.
    void record(std::shared_ptr<TensorImpl> result,
                std::vector<std::shared_ptr<TensorImpl>> rg_operands,
                std::function<void()> backward_fn);

private:
    struct Node {
        std::shared_ptr<TensorImpl> result;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
    std::vector<std::shared_ptr<TensorImpl>> touched_;
    bool backward_done_ = false;
};

/// Temporarily deactivates the current thread's tape (inference inside a
/// training step records nothing).
class TapePause {
public:
    TapePause();
    ~TapePause();
    TapePause(const TapePause&) = delete;
    TapePause& operator=(const TapePause&) = delete;

private:
    GraphTape* saved_;
};

/// backward on the active tape; see GraphTape::backward.
void backward(const Tensor& root);

// Elementwise (shapes must match exactly; no broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real c);
Tensor add_scalar(const Tensor& a, real c);
Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);

// Reductions. Axis-list variants remove the reduced axes from the shape;
// reducing every axis yields a scalar (shape {}).
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<int>& axes);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, const std::vector<int>& axes);

/// Argmax along `axis`; ties resolve to the lowest index. Not differentiable.
IntMap argmax_axis(const Tensor& a, int axis);

Tensor concat(const Tensor& a, const Tensor& b, int axis);

/// Same values, detached from the tape: gradients never flow through.
Tensor stop_gradient(const Tensor& a);

/// 2-D convolution, NCHW input [N,C,H,W] with kernel [O,C,kH,kW].
/// H' = floor((H + 2*padding - kH)/stride) + 1, analogously W'.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);

/// Adds a per-channel bias [C] to an NCHW tensor.
Tensor bias_add(const Tensor& x, const Tensor& bias);

/// Bilinear interpolation, align-corners-false convention.
Tensor bilinear_resize(const Tensor& input, int out_h, int out_w);

/// Temperature softmax along `axis`, computed with max-subtraction.
Tensor softmax_t(const Tensor& logits, real temperature, int axis);

/// log(softmax_t(...)) computed directly from shifted logits.
Tensor log_softmax_t(const Tensor& logits, real temperature, int axis);

/// Picks x[n, idx[n,h,w], h, w] from an NCHW tensor; idx shape [N,H,W].
Tensor select_class(const Tensor& x, const IntMap& idx);

}  // namespace segkc
