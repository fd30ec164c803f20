#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "poisonlab/errors.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {

// 64-bit reals throughout; reductions also accumulate in 64-bit.
// Checkpoints narrow to float32 on disk (see checkpoint.hpp).
using Real = double;

class Tape;

namespace detail {
struct TensorImpl {
    std::vector<int> shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // persistent gradient, lazily allocated (leaves)
    bool requires_grad = false;
    bool is_leaf = true;       // false once produced by a recorded op
    const Tape* producer = nullptr;
};
}  // namespace detail

// Dense row-major tensor handle with value-semantics sharing: copies share
// storage, deep copies are explicit. Gradients accumulate additively into
// leaf tensors when a Tape is active.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, Real value, bool requires_grad = false);
    static Tensor from_values(std::vector<int> shape, std::vector<Real> values, bool requires_grad = false);
    static Tensor scalar(Real value, bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, Real stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

    std::span<Real> values() { return impl_->data; }
    std::span<const Real> values() const { return impl_->data; }
    Real item() const;  // scalar tensors only

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }
    bool is_leaf() const { return impl_->is_leaf; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<Real> grad();             // allocates zeros on first use
    std::span<const Real> grad() const; // empty span when absent
    void zero_grad();

    Tensor detached_copy() const;  // deep copy, no grad, leaf

    detail::TensorImpl* impl() const { return impl_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
    friend class Tape;
};

// Per-backward-pass gradient routing. Non-leaf gradients live in pass-local
// buffers; leaf gradients accumulate into the tensor's persistent buffer, so
// running backward twice doubles leaf gradients exactly.
class GradStore {
public:
    // Gradient flowing into `t` during this pass; nullptr if none arrived.
    const Real* read(const Tensor& t) const;
    // Accumulation target for `t` (allocates zeros on demand).
    Real* accum(const Tensor& t);
    void seed(const Tensor& loss);

private:
    std::unordered_map<const detail::TensorImpl*, std::vector<Real>> local_;
};

using BackwardStep = std::function<void(GradStore&)>;

// Ordered record of executed differentiable ops. Construction activates the
// tape for the current thread (RAII); ops record themselves while one is
// active and any input requires grad. Replaying in reverse visits each node
// after all of its consumers by construction.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(const Tensor& output, BackwardStep step);
    size_t size() const { return steps_.size(); }

    static Tape* active();

private:
    friend void backward(const Tensor&, Tape&);
    std::vector<std::pair<Tensor, BackwardStep>> steps_;
};

// Masks the active tape (inference inside a training scope).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Reverse pass from a scalar loss recorded on `tape`. Leaf gradients
// accumulate additively across calls.
void backward(const Tensor& loss, Tape& tape);

// ---- differentiable operations ----
// Binary elementwise ops broadcast `b` across leading batch dimensions of
// `a` when b.shape is a trailing suffix of a.shape; anything else is a
// dimension error (reshape explicitly).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real c);
Tensor affine(const Tensor& a, Real mul, Real add);  // mul*a + add

Tensor matmul(const Tensor& a, const Tensor& b);  // [m×k]·[k×n] → [m×n]
Tensor transpose(const Tensor& a);                // 2-D
Tensor reshape(const Tensor& a, std::vector<int> shape);

Tensor softmax(const Tensor& x, int axis);
// Mean over rows of −log softmax(logits_row)[target]; targets in [0, V).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
// Per-row log softmax picked at targets; row r uses logits row (row_offset+r).
Tensor token_log_probs(const Tensor& logits, const std::vector<int>& targets, int row_offset = 0);

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);
// Multi-head causal scaled-dot-product attention over q,k,v of shape [n×d].
Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads);

Tensor gelu(const Tensor& x);
Tensor tanh_act(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp_elem(const Tensor& x);
Tensor min_elem(const Tensor& a, const Tensor& b);
Tensor clamp(const Tensor& x, Real lo, Real hi);

Tensor sum(const Tensor& x);   // → scalar
Tensor mean(const Tensor& x);  // → scalar
Tensor mean_rows(const Tensor& x);  // [n×d] → [1×d]

// Stable mean binary cross-entropy on raw logits; labels in {0,1}.
Tensor bce_with_logits(const Tensor& logits, const std::vector<Real>& labels);

// ---- optimizer ----

struct AdamConfig {
    Real lr = 1e-3;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
};

struct AdamState {
    int64_t step = 0;
    std::vector<std::vector<Real>> m;
    std::vector<std::vector<Real>> v;
};

// Standard bias-corrected Adam over the parameter group; gradients are read
// from each tensor's grad buffer (absent buffer = zero gradient).
void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg);

void zero_grads(std::vector<Tensor>& params);

}  // namespace poisonlab
