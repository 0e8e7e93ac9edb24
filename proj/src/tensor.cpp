#include "segkc/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>
#include <utility>

namespace segkc {

namespace {

thread_local GraphTape* g_active_tape = nullptr;

// All conv GEMMs run on column-major views (a row-major matrix seen
// column-major is its transpose); Eigen's packed kernels are fastest there.
using ColMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
using ColMap = Eigen::Map<ColMat>;
using ConstColMap = Eigen::Map<const ColMat>;

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("dimension sizes must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

void check_finite(std::span<const real> vals, const char* what) {
    for (real v : vals) {
        if (!std::isfinite(v)) {
            throw ValueError(std::string(what) + ": non-finite value");
        }
    }
}

std::shared_ptr<TensorImpl> new_impl(std::vector<int> shape, std::vector<real> values) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    return impl;
}

Tensor wrap(std::shared_ptr<TensorImpl> impl);

void ensure_grad(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.values.size(), real(0));
}

// Marks the result differentiable and records the node if a tape is active
// and any operand needs gradients.
void maybe_record(const Tensor& result, std::vector<std::shared_ptr<TensorImpl>> rg_operands,
                  std::function<void()> backward_fn) {
    GraphTape* tape = GraphTape::active();
    if (tape == nullptr) return;
    std::erase_if(rg_operands, [](const auto& p) { return !p->requires_grad; });
    if (rg_operands.empty()) return;
    result.impl()->requires_grad = true;
    tape->record(result.impl(), std::move(rg_operands), std::move(backward_fn));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": operand shapes differ");
    }
}

void check_axis(const Tensor& a, int axis, const char* what) {
    if (axis < 0 || axis >= a.ndim()) {
        throw ShapeError(std::string(what) + ": axis out of range");
    }
}

// Elementwise binary op skeleton.
template <typename Fwd, typename Bwd>
Tensor elementwise2(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    check_same_shape(a, b, name);
    std::vector<real> out(a.size());
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    check_finite(out, name);
    Tensor res = Tensor::from_values(a.shape(), std::move(out));
    auto ai = a.impl();
    auto bi = b.impl();
    auto ri = res.impl();
    maybe_record(res, {ai, bi}, [ai, bi, ri, bwd] {
        if (ri->grad.empty()) return;
        bwd(*ai, *bi, *ri);
    });
    return res;
}

// Elementwise unary op skeleton.
template <typename Fwd, typename Bwd>
Tensor elementwise1(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
    std::vector<real> out(a.size());
    const auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
    check_finite(out, name);
    Tensor res = Tensor::from_values(a.shape(), std::move(out));
    auto ai = a.impl();
    auto ri = res.impl();
    maybe_record(res, {ai}, [ai, ri, bwd] {
        if (ri->grad.empty()) return;
        ensure_grad(*ai);
        bwd(*ai, *ri);
    });
    return res;
}

struct AxisSplit {
    std::size_t outer, k, inner;
};

AxisSplit split_at(const std::vector<int>& shape, int axis) {
    AxisSplit s{1, static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]), 1};
    for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) {
        s.inner *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    }
    return s;
}

// im2col for one image: rows = C*kH*kW, cols = oh*ow, row-major buffer.
void im2col(const real* img, int c_in, int h, int w, int kh, int kw, int stride, int padding,
            int oh, int ow, real* col) {
    const std::size_t cols = static_cast<std::size_t>(oh) * static_cast<std::size_t>(ow);
    std::size_t row = 0;
    for (int c = 0; c < c_in; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj, ++row) {
                real* dst = col + row * cols;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ki - padding;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kj - padding;
                        real v = 0;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                            v = img[(static_cast<std::size_t>(c) * h + iy) * w + ix];
                        }
                        dst[static_cast<std::size_t>(oy) * ow + ox] = v;
                    }
                }
            }
        }
    }
}

// Transpose of im2col: scatter-adds column-space gradients back to the image.
void col2im_accum(const real* col, int c_in, int h, int w, int kh, int kw, int stride, int padding,
                  int oh, int ow, real* img_grad) {
    const std::size_t cols = static_cast<std::size_t>(oh) * static_cast<std::size_t>(ow);
    std::size_t row = 0;
    for (int c = 0; c < c_in; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj, ++row) {
                const real* src = col + row * cols;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ki - padding;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kj - padding;
                        if (ix < 0 || ix >= w) continue;
                        img_grad[(static_cast<std::size_t>(c) * h + iy) * w + ix] +=
                            src[static_cast<std::size_t>(oy) * ow + ox];
                    }
                }
            }
        }
    }
}

struct BilinearTap {
    int lo, hi;
    real frac;
};

BilinearTap bilinear_tap(int dst, int in_size, int out_size) {
    // align-corners-false source coordinate
    const real src = (static_cast<real>(dst) + real(0.5)) * static_cast<real>(in_size) /
                         static_cast<real>(out_size) -
                     real(0.5);
    const real floor_src = std::floor(src);
    int lo = static_cast<int>(floor_src);
    real frac = src - floor_src;
    int hi = lo + 1;
    lo = std::clamp(lo, 0, in_size - 1);
    hi = std::clamp(hi, 0, in_size - 1);
    return {lo, hi, frac};
}

}  // namespace

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

namespace {
Tensor wrap(std::shared_ptr<TensorImpl> impl) { return wrap_impl(std::move(impl)); }
}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(const std::vector<int>& shape, bool requires_grad) {
    auto impl = new_impl(shape, std::vector<real>(shape_numel(shape), real(0)));
    impl->requires_grad = requires_grad;
    return wrap_impl(std::move(impl));
}

Tensor Tensor::full(const std::vector<int>& shape, real value, bool requires_grad) {
    if (!std::isfinite(value)) throw ValueError("full: non-finite value");
    auto impl = new_impl(shape, std::vector<real>(shape_numel(shape), value));
    impl->requires_grad = requires_grad;
    return wrap_impl(std::move(impl));
}

Tensor Tensor::from_values(const std::vector<int>& shape, std::vector<real> values,
                           bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("from_values: product(shape) != number of values");
    }
    check_finite(values, "from_values");
    auto impl = new_impl(shape, std::move(values));
    impl->requires_grad = requires_grad;
    return wrap_impl(std::move(impl));
}

Tensor Tensor::scalar(real value, bool requires_grad) {
    return from_values({}, {value}, requires_grad);
}

std::span<const real> Tensor::grad() const {
    if (impl_->grad.empty()) throw ContractError("grad accessed before backward");
    return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->values.size(), real(0)); }

real Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a single-element tensor");
    return impl_->values[0];
}

std::size_t BoolMap::count_true() const {
    std::size_t n = 0;
    for (auto b : v) n += (b != 0);
    return n;
}

// ---------------------------------------------------------------------------
// GraphTape

GraphTape::GraphTape() {
    if (g_active_tape != nullptr) {
        throw ContractError("a GraphTape is already active on this thread");
    }
    g_active_tape = this;
}

GraphTape::~GraphTape() {
    if (g_active_tape == this) g_active_tape = nullptr;
}

GraphTape* GraphTape::active() { return g_active_tape; }

void GraphTape::record(std::shared_ptr<TensorImpl> result,
                       std::vector<std::shared_ptr<TensorImpl>> rg_operands,
                       std::function<void()> backward_fn) {
    for (auto& op : rg_operands) touched_.push_back(std::move(op));
    nodes_.push_back(Node{std::move(result), std::move(backward_fn)});
}

void GraphTape::backward(const Tensor& root) {
    if (backward_done_) throw ContractError("backward already ran on this tape");
    if (!root.defined() || root.size() != 1) {
        throw ContractError("backward root must be a scalar tensor");
    }
    bool on_tape = false;
    for (const auto& node : nodes_) {
        if (node.result == root.impl()) {
            on_tape = true;
            break;
        }
    }
    if (!on_tape) throw ContractError("backward root is not on the tape");

    ensure_grad(*root.impl());
    root.impl()->grad[0] = real(1);

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();

    // Every requires_grad tensor seen by the tape ends up with a grad buffer,
    // zero where the root does not depend on it.
    for (auto& t : touched_) ensure_grad(*t);
    backward_done_ = true;
}

void backward(const Tensor& root) {
    GraphTape* tape = GraphTape::active();
    if (tape == nullptr) throw ContractError("backward called with no active tape");
    tape->backward(root);
}

TapePause::TapePause() : saved_(g_active_tape) { g_active_tape = nullptr; }

TapePause::~TapePause() { g_active_tape = saved_; }

// ---------------------------------------------------------------------------
// Elementwise ops

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise2(
        a, b, "add", [](real x, real y) { return x + y; },
        [](TensorImpl& ai, TensorImpl& bi, TensorImpl& ri) {
            if (ai.requires_grad) {
                ensure_grad(ai);
                for (std::size_t i = 0; i < ri.grad.size(); ++i) ai.grad[i] += ri.grad[i];
            }
            if (bi.requires_grad) {
                ensure_grad(bi);
                for (std::size_t i = 0; i < ri.grad.size(); ++i) bi.grad[i] += ri.grad[i];
            }
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise2(
        a, b, "sub", [](real x, real y) { return x - y; },
        [](TensorImpl& ai, TensorImpl& bi, TensorImpl& ri) {
            if (ai.requires_grad) {
                ensure_grad(ai);
                for (std::size_t i = 0; i < ri.grad.size(); ++i) ai.grad[i] += ri.grad[i];
            }
            if (bi.requires_grad) {
                ensure_grad(bi);
                for (std::size_t i = 0; i < ri.grad.size(); ++i) bi.grad[i] -= ri.grad[i];
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise2(
        a, b, "mul", [](real x, real y) { return x * y; },
        [](TensorImpl& ai, TensorImpl& bi, TensorImpl& ri) {
            if (ai.requires_grad) {
                ensure_grad(ai);
                for (std::size_t i = 0; i < ri.grad.size(); ++i) {
                    ai.grad[i] += ri.grad[i] * bi.values[i];
                }
            }
            if (bi.requires_grad) {
                ensure_grad(bi);
                for (std::size_t i = 0; i < ri.grad.size(); ++i) {
                    bi.grad[i] += ri.grad[i] * ai.values[i];
                }
            }
        });
}

Tensor scale(const Tensor& a, real c) {
    if (!std::isfinite(c)) throw ValueError("scale: non-finite factor");
    return elementwise1(
        a, "scale", [c](real x) { return x * c; },
        [c](TensorImpl& ai, TensorImpl& ri) {
            for (std::size_t i = 0; i < ri.grad.size(); ++i) ai.grad[i] += ri.grad[i] * c;
        });
}

Tensor add_scalar(const Tensor& a, real c) {
    if (!std::isfinite(c)) throw ValueError("add_scalar: non-finite addend");
    return elementwise1(
        a, "add_scalar", [c](real x) { return x + c; },
        [](TensorImpl& ai, TensorImpl& ri) {
            for (std::size_t i = 0; i < ri.grad.size(); ++i) ai.grad[i] += ri.grad[i];
        });
}

Tensor relu(const Tensor& a) {
    return elementwise1(
        a, "relu", [](real x) { return x > 0 ? x : real(0); },
        [](TensorImpl& ai, TensorImpl& ri) {
            for (std::size_t i = 0; i < ri.grad.size(); ++i) {
                if (ai.values[i] > 0) ai.grad[i] += ri.grad[i];
            }
        });
}

Tensor log(const Tensor& a) {
    for (real v : a.values()) {
        if (v <= 0) throw ValueError("log: non-positive input");
    }
    std::vector<real> out(a.size());
    Eigen::Map<Eigen::Array<real, Eigen::Dynamic, 1>>(out.data(),
                                                      static_cast<Eigen::Index>(out.size())) =
        Eigen::Map<const Eigen::Array<real, Eigen::Dynamic, 1>>(
            a.values().data(), static_cast<Eigen::Index>(a.size()))
            .log();
    check_finite(out, "log");
    Tensor res = Tensor::from_values(a.shape(), std::move(out));
    auto ai = a.impl();
    auto ri = res.impl();
    maybe_record(res, {ai}, [ai, ri] {
        if (ri->grad.empty()) return;
        ensure_grad(*ai);
        for (std::size_t i = 0; i < ri->grad.size(); ++i) {
            ai->grad[i] += ri->grad[i] / ai->values[i];
        }
    });
    return res;
}

Tensor exp(const Tensor& a) {
    std::vector<real> out(a.size());
    Eigen::Map<Eigen::Array<real, Eigen::Dynamic, 1>>(out.data(),
                                                      static_cast<Eigen::Index>(out.size())) =
        Eigen::Map<const Eigen::Array<real, Eigen::Dynamic, 1>>(
            a.values().data(), static_cast<Eigen::Index>(a.size()))
            .exp();
    check_finite(out, "exp");
    Tensor res = Tensor::from_values(a.shape(), std::move(out));
    auto ai = a.impl();
    auto ri = res.impl();
    maybe_record(res, {ai}, [ai, ri] {
        if (ri->grad.empty()) return;
        ensure_grad(*ai);
        for (std::size_t i = 0; i < ri->grad.size(); ++i) {
            ai->grad[i] += ri->grad[i] * ri->values[i];
        }
    });
    return res;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
    real acc = 0;
    for (real v : a.values()) acc += v;
    if (!std::isfinite(acc)) throw ValueError("sum: non-finite result");
    Tensor res = Tensor::scalar(acc);
    auto ai = a.impl();
    auto ri = res.impl();
    maybe_record(res, {ai}, [ai, ri] {
        if (ri->grad.empty()) return;
        ensure_grad(*ai);
        const real g = ri->grad[0];
        for (auto& gv : ai->grad) gv += g;
    });
    return res;
}

Tensor sum(const Tensor& a, const std::vector<int>& axes) {
    if (axes.empty()) throw ShapeError("sum: empty axis list");
    std::vector<int> sorted = axes;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw ShapeError("sum: duplicate axis");
    }
    for (int ax : sorted) check_axis(a, ax, "sum");
    if (static_cast<int>(sorted.size()) == a.ndim()) return sum(a);

    const auto& shape = a.shape();
    const int nd = a.ndim();
    std::vector<bool> reduced(static_cast<std::size_t>(nd), false);
    for (int ax : sorted) reduced[static_cast<std::size_t>(ax)] = true;

    std::vector<int> out_shape;
    for (int i = 0; i < nd; ++i) {
        if (!reduced[static_cast<std::size_t>(i)]) out_shape.push_back(shape[static_cast<std::size_t>(i)]);
    }

    // For each input axis: its stride in the output index space (0 if reduced).
    std::vector<std::size_t> out_stride(static_cast<std::size_t>(nd), 0);
    std::size_t stride = 1;
    for (int i = nd - 1; i >= 0; --i) {
        if (!reduced[static_cast<std::size_t>(i)]) {
            out_stride[static_cast<std::size_t>(i)] = stride;
            stride *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
        }
    }

    std::vector<real> out(shape_numel(out_shape), real(0));
    const auto av = a.values();
    std::vector<int> idx(static_cast<std::size_t>(nd), 0);
    for (std::size_t flat = 0; flat < av.size(); ++flat) {
        std::size_t oflat = 0;
        for (int i = 0; i < nd; ++i) {
            oflat += static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) *
                     out_stride[static_cast<std::size_t>(i)];
        }
        out[oflat] += av[flat];
        for (int i = nd - 1; i >= 0; --i) {
            if (++idx[static_cast<std::size_t>(i)] < shape[static_cast<std::size_t>(i)]) break;
            idx[static_cast<std::size_t>(i)] = 0;
        }
    }
    check_finite(out, "sum");

    Tensor res = Tensor::from_values(out_shape, std::move(out));
    auto ai = a.impl();
    auto ri = res.impl();
    maybe_record(res, {ai}, [ai, ri, out_stride] {
        if (ri->grad.empty()) return;
        ensure_grad(*ai);
        const auto& shape = ai->shape;
        const int nd = static_cast<int>(shape.size());
        std::vector<int> idx(static_cast<std::size_t>(nd), 0);
        for (std::size_t flat = 0; flat < ai->values.size(); ++flat) {
            std::size_t oflat = 0;
            for (int i = 0; i < nd; ++i) {
                oflat += static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) *
                         out_stride[static_cast<std::size_t>(i)];
            }
            ai->grad[flat] += ri->grad[oflat];
            for (int i = nd - 1; i >= 0; --i) {
                if (++idx[static_cast<std::size_t>(i)] < shape[static_cast<std::size_t>(i)]) break;
                idx[static_cast<std::size_t>(i)] = 0;
            }
        }
    });
    return res;
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), real(1) / static_cast<real>(a.size()));
}

Tensor mean(const Tensor& a, const std::vector<int>& axes) {
    std::size_t m = 1;
    for (int ax : axes) {
        check_axis(a, ax, "mean");
        m *= static_cast<std::size_t>(a.dim(ax));
    }
    return scale(sum(a, axes), real(1) / static_cast<real>(m));
}

IntMap argmax_axis(const Tensor& a, int axis) {
    check_axis(a, axis, "argmax");
    const auto s = split_at(a.shape(), axis);
    IntMap out;
    for (int i = 0; i < a.ndim(); ++i) {
        if (i != axis) out.shape.push_back(a.dim(i));
    }
    out.v.resize(s.outer * s.inner);
    const auto av = a.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const real* base = av.data() + (o * s.k) * s.inner + i;
            std::int32_t best = 0;
            real best_v = base[0];
            for (std::size_t k = 1; k < s.k; ++k) {
                const real v = base[k * s.inner];
                if (v > best_v) {  // ties keep the lowest index
                    best_v = v;
                    best = static_cast<std::int32_t>(k);
                }
            }
            out.v[o * s.inner + i] = best;
        }
    }
    return out;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    check_axis(a, axis, "concat");
    if (a.ndim() != b.ndim()) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < a.ndim(); ++i) {
        if (i != axis && a.dim(i) != b.dim(i)) {
            throw ShapeError("concat: shapes differ outside the concat axis");
        }
    }
    const auto sa = split_at(a.shape(), axis);
    const auto sb = split_at(b.shape(), axis);

    std::vector<int> out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = static_cast<int>(sa.k + sb.k);

    std::vector<real> out(a.size() + b.size());
    const auto av = a.values();
    const auto bv = b.values();
    const std::size_t block_a = sa.k * sa.inner;
    const std::size_t block_b = sb.k * sb.inner;
    for (std::size_t o = 0; o < sa.outer; ++o) {
        real* dst = out.data() + o * (block_a + block_b);
        std::memcpy(dst, av.data() + o * block_a, block_a * sizeof(real));
        std::memcpy(dst + block_a, bv.data() + o * block_b, block_b * sizeof(real));
    }

    Tensor res = Tensor::from_values(out_shape, std::move(out));
    auto ai = a.impl();
    auto bi = b.impl();
    auto ri = res.impl();
    maybe_record(res, {ai, bi}, [ai, bi, ri, sa, block_a, block_b] {
        if (ri->grad.empty()) return;
        for (std::size_t o = 0; o < sa.outer; ++o) {
            const real* src = ri->grad.data() + o * (block_a + block_b);
            if (ai->requires_grad) {
                ensure_grad(*ai);
                real* dst = ai->grad.data() + o * block_a;
                for (std::size_t i = 0; i < block_a; ++i) dst[i] += src[i];
            }
            if (bi->requires_grad) {
                ensure_grad(*bi);
                real* dst = bi->grad.data() + o * block_b;
                for (std::size_t i = 0; i < block_b; ++i) dst[i] += src[block_a + i];
            }
        }
    });
    return res;
}

Tensor stop_gradient(const Tensor& a) {
    return Tensor::from_values(a.shape(), std::vector<real>(a.values().begin(), a.values().end()));
}

// ---------------------------------------------------------------------------
// Convolution and friends

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    if (input.ndim() != 4 || kernel.ndim() != 4) throw ShapeError("conv2d: inputs must be 4-D");
    if (stride < 1) throw ValueError("conv2d: stride must be positive");
    if (padding < 0) throw ValueError("conv2d: padding must be non-negative");
    const int n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int c_out = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kc != c_in) throw ShapeError("conv2d: channel mismatch between input and kernel");
    if (kh > h + 2 * padding || kw > w + 2 * padding) {
        throw ShapeError("conv2d: kernel larger than padded input");
    }
    const int oh = (h + 2 * padding - kh) / stride + 1;
    const int ow = (w + 2 * padding - kw) / stride + 1;

    const std::size_t rows = static_cast<std::size_t>(c_in) * kh * kw;
    const std::size_t cols = static_cast<std::size_t>(oh) * ow;
    const std::size_t img_sz = static_cast<std::size_t>(c_in) * h * w;
    const std::size_t out_sz = static_cast<std::size_t>(c_out) * cols;

    std::vector<real> out(static_cast<std::size_t>(n) * out_sz);
    std::vector<real> col(rows * cols);
    // kernel [co x rows] row-major == [rows x co] col-major view
    ConstColMap kmat_t(kernel.values().data(), static_cast<Eigen::Index>(rows), c_out);
    for (int b = 0; b < n; ++b) {
        im2col(input.values().data() + static_cast<std::size_t>(b) * img_sz, c_in, h, w, kh, kw,
               stride, padding, oh, ow, col.data());
        ConstColMap col_t(col.data(), static_cast<Eigen::Index>(cols),
                          static_cast<Eigen::Index>(rows));
        ColMap out_t(out.data() + static_cast<std::size_t>(b) * out_sz,
                     static_cast<Eigen::Index>(cols), c_out);
        out_t.noalias() = col_t * kmat_t;  // out = kernel x col
    }
    check_finite(out, "conv2d");

    Tensor res = Tensor::from_values({n, c_out, oh, ow}, std::move(out));
    auto ii = input.impl();
    auto ki = kernel.impl();
    auto ri = res.impl();
    maybe_record(res, {ii, ki}, [ii, ki, ri, n, c_in, h, w, c_out, kh, kw, stride, padding, oh,
                                 ow, rows, cols, img_sz, out_sz] {
        if (ri->grad.empty()) return;
        std::vector<real> col(rows * cols);
        ConstColMap kmat_t(ki->values.data(), static_cast<Eigen::Index>(rows), c_out);
        if (ki->requires_grad) ensure_grad(*ki);
        if (ii->requires_grad) ensure_grad(*ii);
        std::vector<real> col_grad(ii->requires_grad ? rows * cols : 0);
        for (int b = 0; b < n; ++b) {
            ConstColMap gout_t(ri->grad.data() + static_cast<std::size_t>(b) * out_sz,
                               static_cast<Eigen::Index>(cols), c_out);
            if (ki->requires_grad) {
                im2col(ii->values.data() + static_cast<std::size_t>(b) * img_sz, c_in, h, w, kh,
                       kw, stride, padding, oh, ow, col.data());
                ConstColMap col_t(col.data(), static_cast<Eigen::Index>(cols),
                                  static_cast<Eigen::Index>(rows));
                ColMap gk_t(ki->grad.data(), static_cast<Eigen::Index>(rows), c_out);
                gk_t.noalias() += col_t.transpose() * gout_t;  // gk += gout x col^T
            }
            if (ii->requires_grad) {
                ColMap gcol_t(col_grad.data(), static_cast<Eigen::Index>(cols),
                              static_cast<Eigen::Index>(rows));
                gcol_t.noalias() = gout_t * kmat_t.transpose();  // gcol = kernel^T x gout
                col2im_accum(col_grad.data(), c_in, h, w, kh, kw, stride, padding, oh, ow,
                             ii->grad.data() + static_cast<std::size_t>(b) * img_sz);
            }
        }
    });
    return res;
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
    if (x.ndim() != 4) throw ShapeError("bias_add: input must be 4-D");
    if (bias.ndim() != 1 || bias.dim(0) != x.dim(1)) {
        throw ShapeError("bias_add: bias must match the channel dimension");
    }
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    std::vector<real> out(x.size());
    const auto xv = x.values();
    const auto bv = bias.values();
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * plane;
            const real add = bv[static_cast<std::size_t>(ch)];
            for (std::size_t i = 0; i < plane; ++i) out[base + i] = xv[base + i] + add;
        }
    }
    check_finite(out, "bias_add");

    Tensor res = Tensor::from_values(x.shape(), std::move(out));
    auto xi = x.impl();
    auto bi = bias.impl();
    auto ri = res.impl();
    maybe_record(res, {xi, bi}, [xi, bi, ri, n, c, plane] {
        if (ri->grad.empty()) return;
        if (xi->requires_grad) {
            ensure_grad(*xi);
            for (std::size_t i = 0; i < ri->grad.size(); ++i) xi->grad[i] += ri->grad[i];
        }
        if (bi->requires_grad) {
            ensure_grad(*bi);
            for (int b = 0; b < n; ++b) {
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * plane;
                    real acc = 0;
                    for (std::size_t i = 0; i < plane; ++i) acc += ri->grad[base + i];
                    bi->grad[static_cast<std::size_t>(ch)] += acc;
                }
            }
        }
    });
    return res;
}

Tensor bilinear_resize(const Tensor& input, int out_h, int out_w) {
    if (input.ndim() != 4) throw ShapeError("bilinear_resize: input must be 4-D");
    if (out_h < 1 || out_w < 1) throw ValueError("bilinear_resize: output dims must be positive");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (out_h == h && out_w == w) {
        // exact identity
        Tensor res = Tensor::from_values(
            input.shape(), std::vector<real>(input.values().begin(), input.values().end()));
        auto ii = input.impl();
        auto ri = res.impl();
        maybe_record(res, {ii}, [ii, ri] {
            if (ri->grad.empty()) return;
            ensure_grad(*ii);
            for (std::size_t i = 0; i < ri->grad.size(); ++i) ii->grad[i] += ri->grad[i];
        });
        return res;
    }

    std::vector<BilinearTap> ty(static_cast<std::size_t>(out_h));
    std::vector<BilinearTap> tx(static_cast<std::size_t>(out_w));
    for (int y = 0; y < out_h; ++y) ty[static_cast<std::size_t>(y)] = bilinear_tap(y, h, out_h);
    for (int x = 0; x < out_w; ++x) tx[static_cast<std::size_t>(x)] = bilinear_tap(x, w, out_w);

    std::vector<real> out(static_cast<std::size_t>(n) * c * out_h * out_w);
    const auto iv = input.values();
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const real* plane = iv.data() + (static_cast<std::size_t>(b) * c + ch) *
                                                static_cast<std::size_t>(h) * w;
            real* oplane = out.data() + (static_cast<std::size_t>(b) * c + ch) *
                                            static_cast<std::size_t>(out_h) * out_w;
            for (int y = 0; y < out_h; ++y) {
                const auto& yy = ty[static_cast<std::size_t>(y)];
                const real* row0 = plane + static_cast<std::size_t>(yy.lo) * w;
                const real* row1 = plane + static_cast<std::size_t>(yy.hi) * w;
                for (int x = 0; x < out_w; ++x) {
                    const auto& xx = tx[static_cast<std::size_t>(x)];
                    // lerp form keeps constants exact
                    const real top = row0[xx.lo] + xx.frac * (row0[xx.hi] - row0[xx.lo]);
                    const real bot = row1[xx.lo] + xx.frac * (row1[xx.hi] - row1[xx.lo]);
                    oplane[static_cast<std::size_t>(y) * out_w + x] =
                        top + yy.frac * (bot - top);
                }
            }
        }
    }
    check_finite(out, "bilinear_resize");

    Tensor res = Tensor::from_values({n, c, out_h, out_w}, std::move(out));
    auto ii = input.impl();
    auto ri = res.impl();
    maybe_record(res, {ii}, [ii, ri, ty, tx, n, c, h, w, out_h, out_w] {
        if (ri->grad.empty()) return;
        ensure_grad(*ii);
        for (int b = 0; b < n; ++b) {
            for (int ch = 0; ch < c; ++ch) {
                real* gplane = ii->grad.data() + (static_cast<std::size_t>(b) * c + ch) *
                                                     static_cast<std::size_t>(h) * w;
                const real* goplane = ri->grad.data() + (static_cast<std::size_t>(b) * c + ch) *
                                                            static_cast<std::size_t>(out_h) *
                                                            out_w;
                for (int y = 0; y < out_h; ++y) {
                    const auto& yy = ty[static_cast<std::size_t>(y)];
                    for (int x = 0; x < out_w; ++x) {
                        const auto& xx = tx[static_cast<std::size_t>(x)];
                        const real g = goplane[static_cast<std::size_t>(y) * out_w + x];
                        const real wy1 = yy.frac, wy0 = real(1) - yy.frac;
                        const real wx1 = xx.frac, wx0 = real(1) - xx.frac;
                        gplane[static_cast<std::size_t>(yy.lo) * w + xx.lo] += g * wy0 * wx0;
                        gplane[static_cast<std::size_t>(yy.lo) * w + xx.hi] += g * wy0 * wx1;
                        gplane[static_cast<std::size_t>(yy.hi) * w + xx.lo] += g * wy1 * wx0;
                        gplane[static_cast<std::size_t>(yy.hi) * w + xx.hi] += g * wy1 * wx1;
                    }
                }
            }
        }
    });
    return res;
}

// ---------------------------------------------------------------------------
// Softmax family

namespace {

enum class SoftmaxKind { kProb, kLogProb };

using ArrMap = Eigen::Map<Eigen::Array<real, Eigen::Dynamic, 1>>;
using ConstArrMap = Eigen::Map<const Eigen::Array<real, Eigen::Dynamic, 1>>;

// Vectorized per-class passes over the contiguous inner axis.
Tensor softmax_impl(const Tensor& logits, real temperature, int axis, SoftmaxKind kind) {
    if (!(temperature > 0)) throw ValueError("softmax: temperature must be positive");
    check_axis(logits, axis, "softmax");
    const auto s = split_at(logits.shape(), axis);
    const auto inner = static_cast<Eigen::Index>(s.inner);
    std::vector<real> out(logits.size());
    const auto lv = logits.values();
    std::vector<real> mx(s.inner), acc(s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        const real* block = lv.data() + o * s.k * s.inner;
        real* oblock = out.data() + o * s.k * s.inner;
        ArrMap mx_v(mx.data(), inner);
        ArrMap acc_v(acc.data(), inner);
        mx_v = ConstArrMap(block, inner);
        for (std::size_t k = 1; k < s.k; ++k) {
            mx_v = mx_v.max(ConstArrMap(block + k * s.inner, inner));
        }
        for (std::size_t k = 0; k < s.k; ++k) {
            ArrMap dst(oblock + k * s.inner, inner);
            dst = ((ConstArrMap(block + k * s.inner, inner) - mx_v) / temperature).exp();
        }
        acc_v = ArrMap(oblock, inner);
        for (std::size_t k = 1; k < s.k; ++k) acc_v += ArrMap(oblock + k * s.inner, inner);
        if (kind == SoftmaxKind::kProb) {
            for (std::size_t k = 0; k < s.k; ++k) {
                ArrMap dst(oblock + k * s.inner, inner);
                dst /= acc_v;
            }
        } else {
            acc_v = acc_v.log();
            for (std::size_t k = 0; k < s.k; ++k) {
                ArrMap dst(oblock + k * s.inner, inner);
                dst = dst.log() - acc_v;
            }
        }
    }
    check_finite(out, kind == SoftmaxKind::kProb ? "softmax_t" : "log_softmax_t");

    Tensor res = Tensor::from_values(logits.shape(), std::move(out));
    auto li = logits.impl();
    auto ri = res.impl();
    maybe_record(res, {li}, [li, ri, s, inner, temperature, kind] {
        if (ri->grad.empty()) return;
        ensure_grad(*li);
        std::vector<real> acc(s.inner);
        for (std::size_t o = 0; o < s.outer; ++o) {
            const real* vblock = ri->values.data() + o * s.k * s.inner;
            const real* gblock = ri->grad.data() + o * s.k * s.inner;
            real* dblock = li->grad.data() + o * s.k * s.inner;
            ArrMap acc_v(acc.data(), inner);
            if (kind == SoftmaxKind::kProb) {
                // dx_k = p_k (g_k - sum_j g_j p_j) / T
                acc_v = ConstArrMap(gblock, inner) * ConstArrMap(vblock, inner);
                for (std::size_t k = 1; k < s.k; ++k) {
                    acc_v += ConstArrMap(gblock + k * s.inner, inner) *
                             ConstArrMap(vblock + k * s.inner, inner);
                }
                for (std::size_t k = 0; k < s.k; ++k) {
                    ArrMap dst(dblock + k * s.inner, inner);
                    dst += ConstArrMap(vblock + k * s.inner, inner) *
                           (ConstArrMap(gblock + k * s.inner, inner) - acc_v) / temperature;
                }
            } else {
                // dx_k = (g_k - exp(logp_k) sum_j g_j) / T
                acc_v = ConstArrMap(gblock, inner);
                for (std::size_t k = 1; k < s.k; ++k) {
                    acc_v += ConstArrMap(gblock + k * s.inner, inner);
                }
                for (std::size_t k = 0; k < s.k; ++k) {
                    ArrMap dst(dblock + k * s.inner, inner);
                    dst += (ConstArrMap(gblock + k * s.inner, inner) -
                            ConstArrMap(vblock + k * s.inner, inner).exp() * acc_v) /
                           temperature;
                }
            }
        }
    });
    return res;
}

}  // namespace

Tensor softmax_t(const Tensor& logits, real temperature, int axis) {
    return softmax_impl(logits, temperature, axis, SoftmaxKind::kProb);
}

Tensor log_softmax_t(const Tensor& logits, real temperature, int axis) {
    return softmax_impl(logits, temperature, axis, SoftmaxKind::kLogProb);
}

Tensor select_class(const Tensor& x, const IntMap& idx) {
    if (x.ndim() != 4) throw ShapeError("select_class: input must be 4-D");
    const int n = x.dim(0), k = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (idx.shape != std::vector<int>{n, h, w}) {
        throw ShapeError("select_class: index map shape must be [N,H,W]");
    }
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<real> out(static_cast<std::size_t>(n) * plane);
    const auto xv = x.values();
    for (std::size_t p = 0; p < out.size(); ++p) {
        const std::int32_t cls = idx.v[p];
        if (cls < 0 || cls >= k) throw DataError("select_class: class index out of range");
        const std::size_t b = p / plane, rest = p % plane;
        out[p] = xv[(b * k + static_cast<std::size_t>(cls)) * plane + rest];
    }

    Tensor res = Tensor::from_values({n, h, w}, std::move(out));
    auto xi = x.impl();
    auto ri = res.impl();
    const auto indices = idx.v;
    maybe_record(res, {xi}, [xi, ri, indices, k, plane] {
        if (ri->grad.empty()) return;
        ensure_grad(*xi);
        for (std::size_t p = 0; p < ri->grad.size(); ++p) {
            const std::size_t b = p / plane, rest = p % plane;
            xi->grad[(b * k + static_cast<std::size_t>(indices[p])) * plane + rest] +=
                ri->grad[p];
        }
    });
    return res;
}

}  // namespace segkc
