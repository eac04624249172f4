#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation on an
// explicit tape. Two instantiations are used throughout: float for training,
// double for gradient verification.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mvc/errors.hpp"

namespace mvc {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

enum class Primitive {
    kMatmul,
    kTranspose,
    kReshape,
    kAdd,
    kSub,
    kMul,
    kScale,
    kAddRowVector,
    kRelu,
    kGelu,
    kLog,
    kClampMin,
    kPick,
    kSoftmax,
    kSumAll,
    kMeanAll,
    kSumAxis,
    kLayerNorm,
    kSliceCols,
    kConcatCols,
};

inline const char* primitive_name(Primitive op) {
    switch (op) {
        case Primitive::kMatmul: return "matmul";
        case Primitive::kTranspose: return "transpose";
        case Primitive::kReshape: return "reshape";
        case Primitive::kAdd: return "add";
        case Primitive::kSub: return "sub";
        case Primitive::kMul: return "mul";
        case Primitive::kScale: return "scale";
        case Primitive::kAddRowVector: return "add_row_vector";
        case Primitive::kRelu: return "relu";
        case Primitive::kGelu: return "gelu";
        case Primitive::kLog: return "log";
        case Primitive::kClampMin: return "clamp_min";
        case Primitive::kPick: return "pick";
        case Primitive::kSoftmax: return "softmax";
        case Primitive::kSumAll: return "sum_all";
        case Primitive::kMeanAll: return "mean_all";
        case Primitive::kSumAxis: return "sum_axis";
        case Primitive::kLayerNorm: return "layer_norm";
        case Primitive::kSliceCols: return "slice_cols";
        case Primitive::kConcatCols: return "concat_cols";
    }
    throw ConfigError("unknown primitive identifier");
}

inline std::optional<Primitive> primitive_from_name(const std::string& name) {
    static const Primitive all[] = {
        Primitive::kMatmul,  Primitive::kTranspose, Primitive::kReshape,
        Primitive::kAdd,     Primitive::kSub,       Primitive::kMul,
        Primitive::kScale,   Primitive::kAddRowVector, Primitive::kRelu,
        Primitive::kGelu,    Primitive::kLog,       Primitive::kClampMin,
        Primitive::kPick,    Primitive::kSoftmax,   Primitive::kSumAll,
        Primitive::kMeanAll, Primitive::kSumAxis,   Primitive::kLayerNorm,
        Primitive::kSliceCols, Primitive::kConcatCols,
    };
    for (Primitive p : all)
        if (name == primitive_name(p)) return p;
    return std::nullopt;
}

// Per-application parameters. Only the fields a primitive reads are meaningful.
struct OpAttrs {
    std::size_t axis = 0;    // softmax, sum_axis
    std::size_t index = 0;   // pick
    std::size_t offset = 0;  // slice_cols
    std::size_t count = 0;   // slice_cols
    double scalar = 0.0;     // scale factor, clamp floor, layer_norm epsilon
    Shape shape;             // reshape target
};

namespace detail {

template <typename S>
struct TensorImpl {
    Shape shape;
    std::vector<S> values;
    bool requires_grad = false;
    std::vector<S> grad;  // empty until first needed

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), S(0));
    }
};

// C(I x J) += A(I x K) * B(K x J)
template <typename S>
void gemm_accum(const S* a, const S* b, S* c, std::size_t I, std::size_t K, std::size_t J) {
    for (std::size_t i = 0; i < I; ++i) {
        const S* arow = a + i * K;
        S* crow = c + i * J;
        for (std::size_t k = 0; k < K; ++k) {
            const S av = arow[k];
            if (av == S(0)) continue;
            const S* brow = b + k * J;
            for (std::size_t j = 0; j < J; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(I x K) += A(I x J) * B^T, with B stored as (K x J)
template <typename S>
void gemm_nt_accum(const S* a, const S* b, S* c, std::size_t I, std::size_t J, std::size_t K) {
    for (std::size_t i = 0; i < I; ++i) {
        const S* arow = a + i * J;
        S* crow = c + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const S* brow = b + k * J;
            S acc = S(0);
            for (std::size_t j = 0; j < J; ++j) acc += arow[j] * brow[j];
            crow[k] += acc;
        }
    }
}

// C(K x J) += A^T * B, with A stored as (I x K) and B as (I x J)
template <typename S>
void gemm_tn_accum(const S* a, const S* b, S* c, std::size_t I, std::size_t K, std::size_t J) {
    for (std::size_t i = 0; i < I; ++i) {
        const S* arow = a + i * K;
        const S* brow = b + i * J;
        for (std::size_t k = 0; k < K; ++k) {
            const S av = arow[k];
            if (av == S(0)) continue;
            S* crow = c + k * J;
            for (std::size_t j = 0; j < J; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

template <typename S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(0), requires_grad);
    }

    static Tensor full(Shape shape, S value, bool requires_grad = false) {
        auto impl = std::make_shared<detail::TensorImpl<S>>();
        impl->values.assign(numel(shape), value);
        impl->shape = std::move(shape);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor from_values(Shape shape, std::vector<S> values, bool requires_grad = false) {
        if (numel(shape) != values.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        auto impl = std::make_shared<detail::TensorImpl<S>>();
        impl->shape = std::move(shape);
        impl->values = std::move(values);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor scalar(S value) { return from_values({1}, {value}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->values.size(); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t rows() const { return impl_->shape.at(0); }
    std::size_t cols() const { return impl_->shape.at(1); }

    std::vector<S>& values() { return impl_->values; }
    const std::vector<S>& values() const { return impl_->values; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    std::vector<S>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<S>& grad() const {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.assign(impl_->values.size(), S(0)); }

    S item() const {
        if (size() != 1)
            throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return impl_->values[0];
    }

    S at(std::size_t i) const { return impl_->values.at(i); }
    S at(std::size_t i, std::size_t j) const {
        return impl_->values.at(i * cols() + j);
    }
    S& at(std::size_t i) { return impl_->values.at(i); }
    S& at(std::size_t i, std::size_t j) { return impl_->values.at(i * cols() + j); }

    std::shared_ptr<detail::TensorImpl<S>> impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl<S>> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl<S>> impl_;

    template <typename T>
    friend Tensor<T> apply_primitive(Primitive, const std::vector<Tensor<T>>&, const OpAttrs&);
};

namespace detail {

template <typename S>
void check(bool ok, Primitive op, const std::string& what) {
    if (!ok) throw ShapeError(std::string(primitive_name(op)) + ": " + what);
}

template <typename S>
std::string two_shapes(const TensorImpl<S>& a, const TensorImpl<S>& b) {
    return shape_str(a.shape) + " and " + shape_str(b.shape);
}

// Forward evaluation of one primitive; pure function of operand values.
template <typename S>
void eval_primitive(Primitive op, const OpAttrs& attrs,
                    const std::vector<const TensorImpl<S>*>& in,
                    Shape& out_shape, std::vector<S>& out) {
    auto expect_arity = [&](std::size_t n) {
        check<S>(in.size() == n, op, "expected " + std::to_string(n) + " operands, got " +
                                         std::to_string(in.size()));
    };
    switch (op) {
        case Primitive::kMatmul: {
            expect_arity(2);
            const auto& a = *in[0];
            const auto& b = *in[1];
            check<S>(a.shape.size() == 2 && b.shape.size() == 2 && a.shape[1] == b.shape[0], op,
                     "incompatible shapes " + two_shapes(a, b));
            const std::size_t I = a.shape[0], K = a.shape[1], J = b.shape[1];
            out_shape = {I, J};
            out.assign(I * J, S(0));
            gemm_accum(a.values.data(), b.values.data(), out.data(), I, K, J);
            break;
        }
        case Primitive::kTranspose: {
            expect_arity(1);
            const auto& a = *in[0];
            check<S>(a.shape.size() == 2, op, "needs a rank-2 tensor, got " + shape_str(a.shape));
            const std::size_t R = a.shape[0], C = a.shape[1];
            out_shape = {C, R};
            out.resize(R * C);
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < C; ++j) out[j * R + i] = a.values[i * C + j];
            break;
        }
        case Primitive::kReshape: {
            expect_arity(1);
            const auto& a = *in[0];
            check<S>(numel(attrs.shape) == a.values.size(), op,
                     "cannot reshape " + shape_str(a.shape) + " to " + shape_str(attrs.shape));
            out_shape = attrs.shape;
            out = a.values;
            break;
        }
        case Primitive::kAdd:
        case Primitive::kSub:
        case Primitive::kMul: {
            expect_arity(2);
            const auto& a = *in[0];
            const auto& b = *in[1];
            check<S>(a.shape == b.shape, op, "operand shapes differ: " + two_shapes(a, b));
            out_shape = a.shape;
            out.resize(a.values.size());
            if (op == Primitive::kAdd)
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] + b.values[i];
            else if (op == Primitive::kSub)
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] - b.values[i];
            else
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] * b.values[i];
            break;
        }
        case Primitive::kScale: {
            expect_arity(1);
            const auto& a = *in[0];
            const S c = static_cast<S>(attrs.scalar);
            out_shape = a.shape;
            out.resize(a.values.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] * c;
            break;
        }
        case Primitive::kAddRowVector: {
            expect_arity(2);
            const auto& a = *in[0];
            const auto& v = *in[1];
            check<S>(a.shape.size() == 2 && v.shape.size() == 1 && v.shape[0] == a.shape[1], op,
                     "matrix+vector shapes differ: " + two_shapes(a, v));
            const std::size_t R = a.shape[0], C = a.shape[1];
            out_shape = a.shape;
            out.resize(R * C);
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < C; ++j)
                    out[i * C + j] = a.values[i * C + j] + v.values[j];
            break;
        }
        case Primitive::kRelu: {
            expect_arity(1);
            const auto& a = *in[0];
            out_shape = a.shape;
            out.resize(a.values.size());
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = a.values[i] > S(0) ? a.values[i] : S(0);
            break;
        }
        case Primitive::kGelu: {
            expect_arity(1);
            const auto& a = *in[0];
            out_shape = a.shape;
            out.resize(a.values.size());
            const S inv_sqrt2 = S(0.7071067811865475244);
            for (std::size_t i = 0; i < out.size(); ++i) {
                const S x = a.values[i];
                out[i] = S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
            }
            break;
        }
        case Primitive::kLog: {
            expect_arity(1);
            const auto& a = *in[0];
            out_shape = a.shape;
            out.resize(a.values.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.values[i]);
            break;
        }
        case Primitive::kClampMin: {
            expect_arity(1);
            const auto& a = *in[0];
            const S floor = static_cast<S>(attrs.scalar);
            out_shape = a.shape;
            out.resize(a.values.size());
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = a.values[i] > floor ? a.values[i] : floor;
            break;
        }
        case Primitive::kPick: {
            expect_arity(1);
            const auto& a = *in[0];
            check<S>(attrs.index < a.values.size(), op,
                     "index " + std::to_string(attrs.index) + " out of range for " +
                         shape_str(a.shape));
            out_shape = {1};
            out = {a.values[attrs.index]};
            break;
        }
        case Primitive::kSoftmax: {
            expect_arity(1);
            const auto& a = *in[0];
            check<S>(a.shape.size() == 1 || a.shape.size() == 2, op,
                     "needs rank 1 or 2, got " + shape_str(a.shape));
            check<S>(attrs.axis < a.shape.size(), op,
                     "axis " + std::to_string(attrs.axis) + " invalid for " + shape_str(a.shape));
            out_shape = a.shape;
            out.resize(a.values.size());
            std::size_t slices, len, stride, slice_step;
            if (a.shape.size() == 1) {
                slices = 1; len = a.shape[0]; stride = 1; slice_step = 0;
            } else if (attrs.axis == 1) {
                slices = a.shape[0]; len = a.shape[1]; stride = 1; slice_step = a.shape[1];
            } else {
                slices = a.shape[1]; len = a.shape[0]; stride = a.shape[1]; slice_step = 1;
            }
            // exp(x - max) with an underflow floor keeps outputs strictly positive
            const S tiny = std::numeric_limits<S>::denorm_min();
            for (std::size_t s = 0; s < slices; ++s) {
                const S* src = a.values.data() + s * slice_step;
                S* dst = out.data() + s * slice_step;
                S mx = src[0];
                for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, src[k * stride]);
                S denom = S(0);
                for (std::size_t k = 0; k < len; ++k) {
                    S e = std::exp(src[k * stride] - mx);
                    if (e < tiny) e = tiny;
                    dst[k * stride] = e;
                    denom += e;
                }
                for (std::size_t k = 0; k < len; ++k) dst[k * stride] /= denom;
            }
            break;
        }
        case Primitive::kSumAll:
        case Primitive::kMeanAll: {
            expect_arity(1);
            const auto& a = *in[0];
            S acc = S(0);
            for (S v : a.values) acc += v;
            if (op == Primitive::kMeanAll) acc /= static_cast<S>(a.values.size());
            out_shape = {1};
            out = {acc};
            break;
        }
        case Primitive::kSumAxis: {
            expect_arity(1);
            const auto& a = *in[0];
            check<S>(a.shape.size() == 2, op, "needs a rank-2 tensor, got " + shape_str(a.shape));
            check<S>(attrs.axis < 2, op, "axis " + std::to_string(attrs.axis) + " invalid");
            const std::size_t R = a.shape[0], C = a.shape[1];
            if (attrs.axis == 1) {
                out_shape = {R};
                out.assign(R, S(0));
                for (std::size_t i = 0; i < R; ++i)
                    for (std::size_t j = 0; j < C; ++j) out[i] += a.values[i * C + j];
            } else {
                out_shape = {C};
                out.assign(C, S(0));
                for (std::size_t i = 0; i < R; ++i)
                    for (std::size_t j = 0; j < C; ++j) out[j] += a.values[i * C + j];
            }
            break;
        }
        case Primitive::kLayerNorm: {
            expect_arity(3);
            const auto& a = *in[0];
            const auto& g = *in[1];
            const auto& b = *in[2];
            check<S>(a.shape.size() == 2, op, "needs a rank-2 input, got " + shape_str(a.shape));
            check<S>(g.shape.size() == 1 && g.shape[0] == a.shape[1] && g.shape == b.shape, op,
                     "scale/offset must be vectors of width " + std::to_string(a.shape[1]));
            const std::size_t R = a.shape[0], C = a.shape[1];
            const S eps = static_cast<S>(attrs.scalar);
            out_shape = a.shape;
            out.resize(R * C);
            for (std::size_t i = 0; i < R; ++i) {
                const S* row = a.values.data() + i * C;
                S mu = S(0);
                for (std::size_t j = 0; j < C; ++j) mu += row[j];
                mu /= static_cast<S>(C);
                S var = S(0);
                for (std::size_t j = 0; j < C; ++j) {
                    const S d = row[j] - mu;
                    var += d * d;
                }
                var /= static_cast<S>(C);
                const S inv_sigma = S(1) / std::sqrt(var + eps);
                for (std::size_t j = 0; j < C; ++j)
                    out[i * C + j] = (row[j] - mu) * inv_sigma * g.values[j] + b.values[j];
            }
            break;
        }
        case Primitive::kSliceCols: {
            expect_arity(1);
            const auto& a = *in[0];
            check<S>(a.shape.size() == 2, op, "needs a rank-2 tensor, got " + shape_str(a.shape));
            check<S>(attrs.offset + attrs.count <= a.shape[1] && attrs.count > 0, op,
                     "column range [" + std::to_string(attrs.offset) + ", " +
                         std::to_string(attrs.offset + attrs.count) + ") invalid for " +
                         shape_str(a.shape));
            const std::size_t R = a.shape[0], C = a.shape[1];
            out_shape = {R, attrs.count};
            out.resize(R * attrs.count);
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < attrs.count; ++j)
                    out[i * attrs.count + j] = a.values[i * C + attrs.offset + j];
            break;
        }
        case Primitive::kConcatCols: {
            check<S>(!in.empty(), op, "needs at least one operand");
            const std::size_t R = in[0]->shape.size() == 2 ? in[0]->shape[0] : 0;
            std::size_t total = 0;
            for (const auto* t : in) {
                check<S>(t->shape.size() == 2 && t->shape[0] == R, op,
                         "operands must share a row count");
                total += t->shape[1];
            }
            out_shape = {R, total};
            out.resize(R * total);
            std::size_t off = 0;
            for (const auto* t : in) {
                const std::size_t C = t->shape[1];
                for (std::size_t i = 0; i < R; ++i)
                    for (std::size_t j = 0; j < C; ++j)
                        out[i * total + off + j] = t->values[i * C + j];
                off += C;
            }
            break;
        }
        default:
            throw ConfigError("unknown primitive identifier");
    }
}

}  // namespace detail

template <typename S>
class Tape;

namespace detail {
template <typename S>
inline thread_local Tape<S>* g_active_tape = nullptr;
}

// Records primitive applications in topological order for reverse-mode
// differentiation. One tape and its tensors belong to one thread.
template <typename S>
class Tape {
public:
    struct Node {
        Primitive op;
        OpAttrs attrs;
        std::vector<std::shared_ptr<detail::TensorImpl<S>>> inputs;
        std::shared_ptr<detail::TensorImpl<S>> output;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }
    const std::vector<Node>& nodes() const { return nodes_; }

    // Fault injection for negative-control tests: the backward rule of `op`
    // sees its incoming adjoint scaled by (1 + relative_error).
    void corrupt_backward(Primitive op, double relative_error) {
        corrupt_op_ = op;
        corrupt_scale_ = relative_error;
    }

    // Re-evaluates every node from its stored inputs and compares with the
    // stored outputs; the tape invariant is exact reproduction.
    bool replay_reproduces_forward() const {
        for (const Node& n : nodes_) {
            std::vector<const detail::TensorImpl<S>*> in;
            in.reserve(n.inputs.size());
            for (const auto& p : n.inputs) in.push_back(p.get());
            Shape shape;
            std::vector<S> values;
            detail::eval_primitive<S>(n.op, n.attrs, in, shape, values);
            if (shape != n.output->shape || values != n.output->values) return false;
        }
        return true;
    }

    void record(Primitive op, OpAttrs attrs,
                std::vector<std::shared_ptr<detail::TensorImpl<S>>> inputs,
                std::shared_ptr<detail::TensorImpl<S>> output) {
        nodes_.push_back(Node{op, std::move(attrs), std::move(inputs), std::move(output)});
    }

    std::optional<Primitive> corrupted_op() const { return corrupt_op_; }
    double corrupt_scale() const { return corrupt_scale_; }

private:
    std::vector<Node> nodes_;
    std::optional<Primitive> corrupt_op_;
    double corrupt_scale_ = 0.0;
};

// RAII scope making `tape` the active recording target on this thread.
template <typename S>
class TapeScope {
public:
    explicit TapeScope(Tape<S>& tape) : prev_(detail::g_active_tape<S>) {
        detail::g_active_tape<S> = &tape;
    }
    ~TapeScope() { detail::g_active_tape<S> = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<S>* prev_;
};

template <typename S>
Tape<S>* active_tape() {
    return detail::g_active_tape<S>;
}

// Applies one primitive. If a tape is active and any operand requires
// gradients, the application is recorded for the backward pass.
template <typename S>
Tensor<S> apply_primitive(Primitive op, const std::vector<Tensor<S>>& operands,
                          const OpAttrs& attrs = {}) {
    std::vector<const detail::TensorImpl<S>*> in;
    in.reserve(operands.size());
    bool any_grad = false;
    for (const auto& t : operands) {
        in.push_back(t.impl().get());
        any_grad = any_grad || t.requires_grad();
    }
    auto result = std::make_shared<detail::TensorImpl<S>>();
    detail::eval_primitive<S>(op, attrs, in, result->shape, result->values);

    Tape<S>* tape = active_tape<S>();
    if (tape && any_grad) {
        result->requires_grad = true;
        std::vector<std::shared_ptr<detail::TensorImpl<S>>> inputs;
        inputs.reserve(operands.size());
        for (const auto& t : operands) inputs.push_back(t.impl());
        tape->record(op, attrs, std::move(inputs), result);
    }
    return Tensor<S>(std::move(result));
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    return apply_primitive(Primitive::kMatmul, {a, b});
}
template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
    return apply_primitive(Primitive::kTranspose, {a});
}
template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape target) {
    OpAttrs attrs;
    attrs.shape = std::move(target);
    return apply_primitive(Primitive::kReshape, {a}, attrs);
}
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return apply_primitive(Primitive::kAdd, {a, b});
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return apply_primitive(Primitive::kSub, {a, b});
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return apply_primitive(Primitive::kMul, {a, b});
}
template <typename S>
Tensor<S> scale(const Tensor<S>& a, double c) {
    OpAttrs attrs;
    attrs.scalar = c;
    return apply_primitive(Primitive::kScale, {a}, attrs);
}
template <typename S>
Tensor<S> add_row_vector(const Tensor<S>& m, const Tensor<S>& v) {
    return apply_primitive(Primitive::kAddRowVector, {m, v});
}
template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    return apply_primitive(Primitive::kRelu, {a});
}
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
    return apply_primitive(Primitive::kGelu, {a});
}
template <typename S>
Tensor<S> log(const Tensor<S>& a) {
    return apply_primitive(Primitive::kLog, {a});
}
template <typename S>
Tensor<S> clamp_min(const Tensor<S>& a, double floor) {
    OpAttrs attrs;
    attrs.scalar = floor;
    return apply_primitive(Primitive::kClampMin, {a}, attrs);
}
template <typename S>
Tensor<S> pick(const Tensor<S>& a, std::size_t index) {
    OpAttrs attrs;
    attrs.index = index;
    return apply_primitive(Primitive::kPick, {a}, attrs);
}
template <typename S>
Tensor<S> softmax(const Tensor<S>& a, std::size_t axis = 0) {
    OpAttrs attrs;
    attrs.axis = axis;
    return apply_primitive(Primitive::kSoftmax, {a}, attrs);
}
template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
    return apply_primitive(Primitive::kSumAll, {a});
}
template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
    return apply_primitive(Primitive::kMeanAll, {a});
}
template <typename S>
Tensor<S> sum_axis(const Tensor<S>& a, std::size_t axis) {
    OpAttrs attrs;
    attrs.axis = axis;
    return apply_primitive(Primitive::kSumAxis, {a}, attrs);
}
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-5) {
    OpAttrs attrs;
    attrs.scalar = eps;
    return apply_primitive(Primitive::kLayerNorm, {x, gamma, beta}, attrs);
}
template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, std::size_t offset, std::size_t count) {
    OpAttrs attrs;
    attrs.offset = offset;
    attrs.count = count;
    return apply_primitive(Primitive::kSliceCols, {a}, attrs);
}
template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    return apply_primitive(Primitive::kConcatCols, parts);
}

namespace detail {

template <typename S>
void backward_node(const typename Tape<S>::Node& n, const std::vector<S>& gout) {
    auto needs = [](const std::shared_ptr<TensorImpl<S>>& t) { return t->requires_grad; };
    auto& ins = n.inputs;
    const OpAttrs& attrs = n.attrs;
    switch (n.op) {
        case Primitive::kMatmul: {
            const auto& a = *ins[0];
            const auto& b = *ins[1];
            const std::size_t I = a.shape[0], K = a.shape[1], J = b.shape[1];
            if (needs(ins[0])) {
                ins[0]->ensure_grad();
                gemm_nt_accum(gout.data(), b.values.data(), ins[0]->grad.data(), I, J, K);
            }
            if (needs(ins[1])) {
                ins[1]->ensure_grad();
                gemm_tn_accum(a.values.data(), gout.data(), ins[1]->grad.data(), I, K, J);
            }
            break;
        }
        case Primitive::kTranspose: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            const std::size_t R = ins[0]->shape[0], C = ins[0]->shape[1];
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < C; ++j) ins[0]->grad[i * C + j] += gout[j * R + i];
            break;
        }
        case Primitive::kReshape: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            for (std::size_t i = 0; i < gout.size(); ++i) ins[0]->grad[i] += gout[i];
            break;
        }
        case Primitive::kAdd: {
            for (int k = 0; k < 2; ++k) {
                if (!needs(ins[k])) continue;
                ins[k]->ensure_grad();
                for (std::size_t i = 0; i < gout.size(); ++i) ins[k]->grad[i] += gout[i];
            }
            break;
        }
        case Primitive::kSub: {
            if (needs(ins[0])) {
                ins[0]->ensure_grad();
                for (std::size_t i = 0; i < gout.size(); ++i) ins[0]->grad[i] += gout[i];
            }
            if (needs(ins[1])) {
                ins[1]->ensure_grad();
                for (std::size_t i = 0; i < gout.size(); ++i) ins[1]->grad[i] -= gout[i];
            }
            break;
        }
        case Primitive::kMul: {
            if (needs(ins[0])) {
                ins[0]->ensure_grad();
                for (std::size_t i = 0; i < gout.size(); ++i)
                    ins[0]->grad[i] += gout[i] * ins[1]->values[i];
            }
            if (needs(ins[1])) {
                ins[1]->ensure_grad();
                for (std::size_t i = 0; i < gout.size(); ++i)
                    ins[1]->grad[i] += gout[i] * ins[0]->values[i];
            }
            break;
        }
        case Primitive::kScale: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            const S c = static_cast<S>(attrs.scalar);
            for (std::size_t i = 0; i < gout.size(); ++i) ins[0]->grad[i] += gout[i] * c;
            break;
        }
        case Primitive::kAddRowVector: {
            const std::size_t R = ins[0]->shape[0], C = ins[0]->shape[1];
            if (needs(ins[0])) {
                ins[0]->ensure_grad();
                for (std::size_t i = 0; i < gout.size(); ++i) ins[0]->grad[i] += gout[i];
            }
            if (needs(ins[1])) {
                ins[1]->ensure_grad();
                for (std::size_t i = 0; i < R; ++i)
                    for (std::size_t j = 0; j < C; ++j) ins[1]->grad[j] += gout[i * C + j];
            }
            break;
        }
        case Primitive::kRelu: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            // subgradient at 0 is 0
            for (std::size_t i = 0; i < gout.size(); ++i)
                if (ins[0]->values[i] > S(0)) ins[0]->grad[i] += gout[i];
            break;
        }
        case Primitive::kGelu: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            const S inv_sqrt2 = S(0.7071067811865475244);
            const S inv_sqrt2pi = S(0.3989422804014326779);
            for (std::size_t i = 0; i < gout.size(); ++i) {
                const S x = ins[0]->values[i];
                const S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
                const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
                ins[0]->grad[i] += gout[i] * (cdf + x * pdf);
            }
            break;
        }
        case Primitive::kLog: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            for (std::size_t i = 0; i < gout.size(); ++i)
                ins[0]->grad[i] += gout[i] / ins[0]->values[i];
            break;
        }
        case Primitive::kClampMin: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            const S floor = static_cast<S>(attrs.scalar);
            for (std::size_t i = 0; i < gout.size(); ++i)
                if (ins[0]->values[i] > floor) ins[0]->grad[i] += gout[i];
            break;
        }
        case Primitive::kPick: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            ins[0]->grad[attrs.index] += gout[0];
            break;
        }
        case Primitive::kSoftmax: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            const auto& shp = ins[0]->shape;
            const std::vector<S>& y = n.output->values;
            std::size_t slices, len, stride, slice_step;
            if (shp.size() == 1) {
                slices = 1; len = shp[0]; stride = 1; slice_step = 0;
            } else if (attrs.axis == 1) {
                slices = shp[0]; len = shp[1]; stride = 1; slice_step = shp[1];
            } else {
                slices = shp[1]; len = shp[0]; stride = shp[1]; slice_step = 1;
            }
            for (std::size_t s = 0; s < slices; ++s) {
                const S* ys = y.data() + s * slice_step;
                const S* gs = gout.data() + s * slice_step;
                S dot = S(0);
                for (std::size_t k = 0; k < len; ++k) dot += gs[k * stride] * ys[k * stride];
                S* gx = ins[0]->grad.data() + s * slice_step;
                for (std::size_t k = 0; k < len; ++k)
                    gx[k * stride] += ys[k * stride] * (gs[k * stride] - dot);
            }
            break;
        }
        case Primitive::kSumAll: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            for (auto& g : ins[0]->grad) g += gout[0];
            break;
        }
        case Primitive::kMeanAll: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            const S g = gout[0] / static_cast<S>(ins[0]->values.size());
            for (auto& gi : ins[0]->grad) gi += g;
            break;
        }
        case Primitive::kSumAxis: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            const std::size_t R = ins[0]->shape[0], C = ins[0]->shape[1];
            if (attrs.axis == 1) {
                for (std::size_t i = 0; i < R; ++i)
                    for (std::size_t j = 0; j < C; ++j) ins[0]->grad[i * C + j] += gout[i];
            } else {
                for (std::size_t i = 0; i < R; ++i)
                    for (std::size_t j = 0; j < C; ++j) ins[0]->grad[i * C + j] += gout[j];
            }
            break;
        }
        case Primitive::kLayerNorm: {
            const auto& x = *ins[0];
            const auto& g = *ins[1];
            const std::size_t R = x.shape[0], C = x.shape[1];
            const S eps = static_cast<S>(attrs.scalar);
            const bool need_x = needs(ins[0]), need_g = needs(ins[1]), need_b = needs(ins[2]);
            if (need_x) ins[0]->ensure_grad();
            if (need_g) ins[1]->ensure_grad();
            if (need_b) ins[2]->ensure_grad();
            std::vector<S> xhat(C), dxhat(C);
            for (std::size_t i = 0; i < R; ++i) {
                const S* row = x.values.data() + i * C;
                const S* grow = gout.data() + i * C;
                S mu = S(0);
                for (std::size_t j = 0; j < C; ++j) mu += row[j];
                mu /= static_cast<S>(C);
                S var = S(0);
                for (std::size_t j = 0; j < C; ++j) {
                    const S d = row[j] - mu;
                    var += d * d;
                }
                var /= static_cast<S>(C);
                const S inv_sigma = S(1) / std::sqrt(var + eps);
                for (std::size_t j = 0; j < C; ++j) xhat[j] = (row[j] - mu) * inv_sigma;
                if (need_g)
                    for (std::size_t j = 0; j < C; ++j) ins[1]->grad[j] += grow[j] * xhat[j];
                if (need_b)
                    for (std::size_t j = 0; j < C; ++j) ins[2]->grad[j] += grow[j];
                if (need_x) {
                    S m1 = S(0), m2 = S(0);
                    for (std::size_t j = 0; j < C; ++j) {
                        dxhat[j] = grow[j] * g.values[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= static_cast<S>(C);
                    m2 /= static_cast<S>(C);
                    for (std::size_t j = 0; j < C; ++j)
                        ins[0]->grad[i * C + j] += (dxhat[j] - m1 - xhat[j] * m2) * inv_sigma;
                }
            }
            break;
        }
        case Primitive::kSliceCols: {
            if (!needs(ins[0])) break;
            ins[0]->ensure_grad();
            const std::size_t R = ins[0]->shape[0], C = ins[0]->shape[1];
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < attrs.count; ++j)
                    ins[0]->grad[i * C + attrs.offset + j] += gout[i * attrs.count + j];
            break;
        }
        case Primitive::kConcatCols: {
            const std::size_t R = n.output->shape[0], total = n.output->shape[1];
            std::size_t off = 0;
            for (auto& inp : ins) {
                const std::size_t C = inp->shape[1];
                if (needs(inp)) {
                    inp->ensure_grad();
                    for (std::size_t i = 0; i < R; ++i)
                        for (std::size_t j = 0; j < C; ++j)
                            inp->grad[i * C + j] += gout[i * total + off + j];
                }
                off += C;
            }
            break;
        }
        default:
            throw ConfigError("unknown primitive identifier");
    }
}

}  // namespace detail

// Reverse pass: seeds d(loss)/d(loss)=1 and accumulates d(loss)/d(leaf) into
// every requires_grad leaf. Leaf gradients add across calls; intermediate
// gradients are reset here.
template <typename S>
void backward(Tape<S>& tape, const Tensor<S>& loss) {
    if (loss.size() != 1)
        throw TapeError("backward: loss must be a scalar tensor, got shape " +
                        shape_str(loss.shape()));
    const auto& nodes = tape.nodes();
    if (nodes.empty() || nodes.back().output != loss.impl()) {
        for (const auto& n : nodes)
            if (n.output == loss.impl())
                throw TapeError("backward: loss must be the final node of the tape");
        throw TapeError("backward: loss not on tape");
    }
    for (const auto& n : nodes) {
        n.output->grad.assign(n.output->values.size(), S(0));
        for (const auto& in : n.inputs)
            if (in->requires_grad) in->ensure_grad();
    }
    loss.impl()->grad[0] = S(1);

    const auto corrupted = tape.corrupted_op();
    std::vector<S> tampered;
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        const std::vector<S>* gout = &it->output->grad;
        if (corrupted && *corrupted == it->op) {
            tampered = *gout;
            const S f = S(1) + static_cast<S>(tape.corrupt_scale());
            for (auto& g : tampered) g *= f;
            gout = &tampered;
        }
        detail::backward_node<S>(*it, *gout);
    }
}

template <typename S>
std::size_t argmax(const std::vector<S>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;  // first index wins ties
    return best;
}

}  // namespace mvc
