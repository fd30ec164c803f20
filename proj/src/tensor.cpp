#include "poisonlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace poisonlab {

namespace {

int64_t shape_product(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

void check_finite(const Tensor& t, const char* op) {
    for (Real v : t.values()) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

thread_local std::vector<Tape*> g_tape_stack;
thread_local int g_no_grad_depth = 0;

// Records `step` if grad tracking applies; marks the output as a tape node.
void record_op(std::initializer_list<Tensor> inputs, Tensor& out, BackwardStep step) {
    Tape* tape = Tape::active();
    if (tape == nullptr) return;
    bool any = false;
    for (const Tensor& in : inputs) any = any || in.requires_grad();
    if (!any) return;
    out.set_requires_grad(true);
    tape->record(out, std::move(step));
}

// Leading-batch broadcast: b.shape must equal a trailing suffix of a.shape.
// Returns the number of copies of b laid end to end across a.
int64_t broadcast_reps(const Tensor& a, const Tensor& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sb.size() > sa.size()) {
        throw DimensionError(std::string(op) + ": shape " + shape_str(sb) + " does not broadcast onto " + shape_str(sa));
    }
    size_t off = sa.size() - sb.size();
    for (size_t i = 0; i < sb.size(); ++i) {
        if (sa[off + i] != sb[i]) {
            throw DimensionError(std::string(op) + ": shape " + shape_str(sb) + " does not broadcast onto " +
                                 shape_str(sa));
        }
    }
    return a.size() / std::max<int64_t>(b.size(), 1);
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto impl = std::make_shared<detail::TensorImpl>();
    int64_t n = shape_product(shape);
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<size_t>(n), 0.0);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, Real value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<Real> values, bool requires_grad) {
    auto impl = std::make_shared<detail::TensorImpl>();
    int64_t n = shape_product(shape);
    if (n != static_cast<int64_t>(values.size())) {
        throw DimensionError("from_values: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    }
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
    return from_values({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, Real stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (Real& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
}

Real Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

std::span<Real> Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

std::span<const Real> Tensor::grad() const {
    return impl_->grad;
}

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detached_copy() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

// ---- GradStore ----

const Real* GradStore::read(const Tensor& t) const {
    auto it = local_.find(t.impl());
    if (it == local_.end()) return nullptr;
    return it->second.data();
}

Real* GradStore::accum(const Tensor& t) {
    detail::TensorImpl* impl = t.impl();
    if (impl->is_leaf) {
        if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
        return impl->grad.data();
    }
    auto& buf = local_[impl];
    if (buf.empty()) buf.assign(impl->data.size(), 0.0);
    return buf.data();
}

void GradStore::seed(const Tensor& loss) {
    local_[loss.impl()].assign(1, 1.0);
}

// ---- Tape ----

Tape::Tape() {
    g_tape_stack.push_back(this);
}

Tape::~Tape() {
    if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() {
    if (g_no_grad_depth > 0 || g_tape_stack.empty()) return nullptr;
    return g_tape_stack.back();
}

void Tape::record(const Tensor& output, BackwardStep step) {
    output.impl()->is_leaf = false;
    output.impl()->producer = this;
    steps_.emplace_back(output, std::move(step));
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

void backward(const Tensor& loss, Tape& tape) {
    if (loss.size() != 1) throw ContractError("backward requires a scalar loss");
    if (loss.impl()->producer != &tape) throw ContractError("backward: loss was not recorded on this tape");
    GradStore store;
    store.seed(loss);
    for (auto it = tape.steps_.rbegin(); it != tape.steps_.rend(); ++it) {
        if (store.read(it->first) == nullptr) continue;  // no gradient flowed here
        it->second(store);
    }
}

// ---- elementwise ----

namespace {

// Elementwise binary op with leading-broadcast of b; fwd/bwd given as lambdas
// on (a_val, b_val) → out and (go, a, b) → (da, db).
template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    broadcast_reps(a, b, name);
    Tensor out = Tensor::zeros(a.shape());
    const int64_t bn = b.size();
    {
        std::span<const Real> av = a.values(), bv = b.values();
        std::span<Real> ov = out.values();
        for (int64_t i = 0; i < static_cast<int64_t>(ov.size()); ++i) {
            ov[i] = fwd(av[i], bv[i % bn]);
        }
    }
    check_finite(out, name);
    record_op({a, b}, out, [a, b, out, bwd](GradStore& gs) {
        const Real* go = gs.read(out);
        std::span<const Real> av = a.impl()->data, bv = b.impl()->data;
        const int64_t bn2 = static_cast<int64_t>(bv.size());
        Real* da = a.requires_grad() ? gs.accum(a) : nullptr;
        Real* db = b.requires_grad() ? gs.accum(b) : nullptr;
        for (int64_t i = 0; i < static_cast<int64_t>(av.size()); ++i) {
            auto [ga, gb] = bwd(go[i], av[i], bv[i % bn2]);
            if (da) da[i] += ga;
            if (db) db[i % bn2] += gb;
        }
    });
    return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
    Tensor out = Tensor::zeros(x.shape());
    {
        std::span<const Real> xv = x.values();
        std::span<Real> ov = out.values();
        for (int64_t i = 0; i < static_cast<int64_t>(xv.size()); ++i) ov[i] = fwd(xv[i]);
    }
    check_finite(out, name);
    record_op({x}, out, [x, out, bwd](GradStore& gs) {
        const Real* go = gs.read(out);
        std::span<const Real> xv = x.impl()->data;
        std::span<const Real> ov = out.impl()->data;
        Real* dx = gs.accum(x);
        for (int64_t i = 0; i < static_cast<int64_t>(xv.size()); ++i) dx[i] += bwd(go[i], xv[i], ov[i]);
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](Real x, Real y) { return x + y; },
        [](Real go, Real, Real) { return std::pair<Real, Real>(go, go); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](Real x, Real y) { return x - y; },
        [](Real go, Real, Real) { return std::pair<Real, Real>(go, -go); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](Real x, Real y) { return x * y; },
        [](Real go, Real x, Real y) { return std::pair<Real, Real>(go * y, go * x); });
}

Tensor scale(const Tensor& a, Real c) {
    return affine(a, c, 0.0);
}

Tensor affine(const Tensor& a, Real m, Real c) {
    return unary_op(
        a, "affine", [m, c](Real x) { return m * x + c; }, [m](Real go, Real, Real) { return m * go; });
}

Tensor gelu(const Tensor& x) {
    constexpr Real kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr Real kA = 0.044715;
    return unary_op(
        x, "gelu",
        [](Real v) {
            Real u = kC * (v + kA * v * v * v);
            return 0.5 * v * (1.0 + std::tanh(u));
        },
        [](Real go, Real v, Real) {
            Real u = kC * (v + kA * v * v * v);
            Real t = std::tanh(u);
            Real du = kC * (1.0 + 3.0 * kA * v * v);
            return go * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        });
}

Tensor tanh_act(const Tensor& x) {
    return unary_op(
        x, "tanh", [](Real v) { return std::tanh(v); },
        [](Real go, Real, Real y) { return go * (1.0 - y * y); });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x, "sigmoid",
        [](Real v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](Real go, Real, Real y) { return go * y * (1.0 - y); });
}

Tensor exp_elem(const Tensor& x) {
    return unary_op(
        x, "exp", [](Real v) { return std::exp(v); }, [](Real go, Real, Real y) { return go * y; });
}

Tensor min_elem(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "min",
        [](Real x, Real y) { return x <= y ? x : y; },
        [](Real go, Real x, Real y) {
            // ties route gradient through the first argument
            return x <= y ? std::pair<Real, Real>(go, 0.0) : std::pair<Real, Real>(0.0, go);
        });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
    if (lo > hi) throw ContractError("clamp: lo > hi");
    return unary_op(
        x, "clamp", [lo, hi](Real v) { return std::min(hi, std::max(lo, v)); },
        [lo, hi](Real go, Real v, Real) { return (v > lo && v < hi) ? go : 0.0; });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    {
        const Real* pa = a.values().data();
        const Real* pb = b.values().data();
        Real* po = out.values().data();
        for (int i = 0; i < m; ++i) {
            const Real* arow = pa + static_cast<int64_t>(i) * k;
            Real* orow = po + static_cast<int64_t>(i) * n;
            for (int kk = 0; kk < k; ++kk) {
                const Real av = arow[kk];
                const Real* brow = pb + static_cast<int64_t>(kk) * n;
                for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }
    check_finite(out, "matmul");
    record_op({a, b}, out, [a, b, out, m, k, n](GradStore& gs) {
        const Real* go = gs.read(out);
        const Real* pa = a.impl()->data.data();
        const Real* pb = b.impl()->data.data();
        if (a.requires_grad()) {
            Real* da = gs.accum(a);  // da = go · b^T
            for (int i = 0; i < m; ++i) {
                const Real* grow = go + static_cast<int64_t>(i) * n;
                Real* darow = da + static_cast<int64_t>(i) * k;
                for (int kk = 0; kk < k; ++kk) {
                    const Real* brow = pb + static_cast<int64_t>(kk) * n;
                    Real acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    darow[kk] += acc;
                }
            }
        }
        if (b.requires_grad()) {
            Real* db = gs.accum(b);  // db = a^T · go
            for (int i = 0; i < m; ++i) {
                const Real* arow = pa + static_cast<int64_t>(i) * k;
                const Real* grow = go + static_cast<int64_t>(i) * n;
                for (int kk = 0; kk < k; ++kk) {
                    const Real av = arow[kk];
                    Real* dbrow = db + static_cast<int64_t>(kk) * n;
                    for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                }
            }
        }
    });
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("transpose: expected 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    {
        const Real* pa = a.values().data();
        Real* po = out.values().data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) po[static_cast<int64_t>(j) * m + i] = pa[static_cast<int64_t>(i) * n + j];
    }
    record_op({a}, out, [a, out, m, n](GradStore& gs) {
        const Real* go = gs.read(out);
        Real* da = gs.accum(a);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) da[static_cast<int64_t>(i) * n + j] += go[static_cast<int64_t>(j) * m + i];
    });
    return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_product(shape) != a.size()) {
        throw DimensionError("reshape: size mismatch for " + shape_str(shape));
    }
    Tensor out = Tensor::from_values(std::move(shape), {a.values().begin(), a.values().end()});
    record_op({a}, out, [a, out](GradStore& gs) {
        const Real* go = gs.read(out);
        Real* da = gs.accum(a);
        for (int64_t i = 0; i < a.size(); ++i) da[i] += go[i];
    });
    return out;
}

// ---- reductions / probability ----

Tensor sum(const Tensor& x) {
    Real acc = 0.0;
    for (Real v : x.values()) acc += v;
    Tensor out = Tensor::scalar(acc);
    check_finite(out, "sum");
    record_op({x}, out, [x, out](GradStore& gs) {
        const Real go = gs.read(out)[0];
        Real* dx = gs.accum(x);
        for (int64_t i = 0; i < x.size(); ++i) dx[i] += go;
    });
    return out;
}

Tensor mean(const Tensor& x) {
    const Real inv = 1.0 / static_cast<Real>(x.size());
    Real acc = 0.0;
    for (Real v : x.values()) acc += v;
    Tensor out = Tensor::scalar(acc * inv);
    check_finite(out, "mean");
    record_op({x}, out, [x, out, inv](GradStore& gs) {
        const Real go = gs.read(out)[0] * inv;
        Real* dx = gs.accum(x);
        for (int64_t i = 0; i < x.size(); ++i) dx[i] += go;
    });
    return out;
}

Tensor mean_rows(const Tensor& x) {
    if (x.ndim() != 2) throw DimensionError("mean_rows: expected 2-D tensor");
    const int n = x.dim(0), d = x.dim(1);
    const Real inv = 1.0 / static_cast<Real>(n);
    Tensor out = Tensor::zeros({1, d});
    {
        const Real* px = x.values().data();
        Real* po = out.values().data();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) po[j] += px[static_cast<int64_t>(i) * d + j] * inv;
    }
    check_finite(out, "mean_rows");
    record_op({x}, out, [x, out, n, d, inv](GradStore& gs) {
        const Real* go = gs.read(out);
        Real* dx = gs.accum(x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) dx[static_cast<int64_t>(i) * d + j] += go[j] * inv;
    });
    return out;
}

Tensor softmax(const Tensor& x, int axis) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw DimensionError("softmax: axis out of range");
    const auto& shape = x.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < nd; ++i) inner *= shape[static_cast<size_t>(i)];
    const int64_t n = shape[static_cast<size_t>(axis)];

    Tensor out = Tensor::zeros(shape);
    {
        const Real* px = x.values().data();
        Real* po = out.values().data();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * n * inner + in;
                Real mx = -std::numeric_limits<Real>::infinity();
                for (int64_t i = 0; i < n; ++i) mx = std::max(mx, px[base + i * inner]);
                Real denom = 0.0;
                for (int64_t i = 0; i < n; ++i) {
                    Real e = std::exp(px[base + i * inner] - mx);
                    po[base + i * inner] = e;
                    denom += e;
                }
                const Real inv = 1.0 / denom;
                for (int64_t i = 0; i < n; ++i) po[base + i * inner] *= inv;
            }
        }
    }
    check_finite(out, "softmax");
    record_op({x}, out, [x, out, outer, inner, n](GradStore& gs) {
        const Real* go = gs.read(out);
        const Real* py = out.impl()->data.data();
        Real* dx = gs.accum(x);
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * n * inner + in;
                Real dot = 0.0;
                for (int64_t i = 0; i < n; ++i) dot += go[base + i * inner] * py[base + i * inner];
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t k = base + i * inner;
                    dx[k] += py[k] * (go[k] - dot);
                }
            }
        }
    });
    return out;
}

namespace {

// Row-wise log softmax into `out` (n×V), returns per-row max-shifted logZ.
void log_softmax_rows(const Real* logits, Real* out, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const Real* row = logits + static_cast<int64_t>(r) * cols;
        Real* orow = out + static_cast<int64_t>(r) * cols;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (int c = 0; c < cols; ++c) mx = std::max(mx, row[c]);
        Real denom = 0.0;
        for (int c = 0; c < cols; ++c) denom += std::exp(row[c] - mx);
        const Real logz = mx + std::log(denom);
        for (int c = 0; c < cols; ++c) orow[c] = row[c] - logz;
    }
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2) throw DimensionError("cross_entropy: logits must be 2-D");
    const int n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != n) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                             " rows");
    }
    for (int t : targets) {
        if (t < 0 || t >= v) throw InputError("cross_entropy: target id " + std::to_string(t) + " out of range");
    }
    std::vector<Real> logp(static_cast<size_t>(n) * v);
    log_softmax_rows(logits.values().data(), logp.data(), n, v);
    Real acc = 0.0;
    for (int r = 0; r < n; ++r) acc -= logp[static_cast<int64_t>(r) * v + targets[static_cast<size_t>(r)]];
    Tensor out = Tensor::scalar(acc / n);
    check_finite(out, "cross_entropy");
    record_op({logits}, out, [logits, out, targets, n, v](GradStore& gs) {
        const Real go = gs.read(out)[0];
        Real* dl = gs.accum(logits);
        const Real* pl = logits.impl()->data.data();
        const Real invn = 1.0 / static_cast<Real>(n);
        for (int r = 0; r < n; ++r) {
            const Real* row = pl + static_cast<int64_t>(r) * v;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (int c = 0; c < v; ++c) mx = std::max(mx, row[c]);
            Real denom = 0.0;
            for (int c = 0; c < v; ++c) denom += std::exp(row[c] - mx);
            const Real inv = 1.0 / denom;
            Real* drow = dl + static_cast<int64_t>(r) * v;
            for (int c = 0; c < v; ++c) drow[c] += go * invn * std::exp(row[c] - mx) * inv;
            drow[targets[static_cast<size_t>(r)]] -= go * invn;
        }
    });
    return out;
}

Tensor token_log_probs(const Tensor& logits, const std::vector<int>& targets, int row_offset) {
    if (logits.ndim() != 2) throw DimensionError("token_log_probs: logits must be 2-D");
    const int n = static_cast<int>(targets.size());
    const int rows = logits.dim(0), v = logits.dim(1);
    if (row_offset < 0 || row_offset + n > rows) {
        throw DimensionError("token_log_probs: rows [" + std::to_string(row_offset) + ", " +
                             std::to_string(row_offset + n) + ") out of range for " + std::to_string(rows));
    }
    for (int t : targets) {
        if (t < 0 || t >= v) throw InputError("token_log_probs: target id out of range");
    }
    if (n == 0) throw ContractError("token_log_probs: empty target sequence");
    Tensor out = Tensor::zeros({n, 1});
    {
        const Real* pl = logits.values().data();
        Real* po = out.values().data();
        for (int r = 0; r < n; ++r) {
            const Real* row = pl + static_cast<int64_t>(row_offset + r) * v;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (int c = 0; c < v; ++c) mx = std::max(mx, row[c]);
            Real denom = 0.0;
            for (int c = 0; c < v; ++c) denom += std::exp(row[c] - mx);
            po[r] = row[targets[static_cast<size_t>(r)]] - mx - std::log(denom);
        }
    }
    check_finite(out, "token_log_probs");
    record_op({logits}, out, [logits, out, targets, row_offset, n, v](GradStore& gs) {
        const Real* go = gs.read(out);
        Real* dl = gs.accum(logits);
        const Real* pl = logits.impl()->data.data();
        for (int r = 0; r < n; ++r) {
            const Real g = go[r];
            if (g == 0.0) continue;
            const Real* row = pl + static_cast<int64_t>(row_offset + r) * v;
            Real* drow = dl + static_cast<int64_t>(row_offset + r) * v;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (int c = 0; c < v; ++c) mx = std::max(mx, row[c]);
            Real denom = 0.0;
            for (int c = 0; c < v; ++c) denom += std::exp(row[c] - mx);
            const Real inv = 1.0 / denom;
            for (int c = 0; c < v; ++c) drow[c] -= g * std::exp(row[c] - mx) * inv;
            drow[targets[static_cast<size_t>(r)]] += g;
        }
    });
    return out;
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw DimensionError("embedding_rows: table must be 2-D");
    const int v = table.dim(0), d = table.dim(1);
    const int n = static_cast<int>(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= v) throw InputError("embedding_rows: id " + std::to_string(id) + " out of range");
    }
    Tensor out = Tensor::zeros({n, d});
    {
        const Real* pt = table.values().data();
        Real* po = out.values().data();
        for (int r = 0; r < n; ++r) {
            const Real* src = pt + static_cast<int64_t>(ids[static_cast<size_t>(r)]) * d;
            std::copy(src, src + d, po + static_cast<int64_t>(r) * d);
        }
    }
    record_op({table}, out, [table, out, ids, d](GradStore& gs) {
        const Real* go = gs.read(out);
        Real* dt = gs.accum(table);
        for (size_t r = 0; r < ids.size(); ++r) {
            Real* dst = dt + static_cast<int64_t>(ids[r]) * d;
            const Real* src = go + static_cast<int64_t>(r) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
    if (x.ndim() != 2) throw DimensionError("layer_norm: expected 2-D input");
    const int n = x.dim(0), d = x.dim(1);
    if (gamma.size() != d || beta.size() != d) throw DimensionError("layer_norm: gamma/beta size mismatch");
    Tensor out = Tensor::zeros({n, d});
    // cached per-row (mean, inv_std) for backward
    auto stats = std::make_shared<std::vector<Real>>(static_cast<size_t>(n) * 2);
    {
        const Real* px = x.values().data();
        const Real* pg = gamma.values().data();
        const Real* pb = beta.values().data();
        Real* po = out.values().data();
        for (int r = 0; r < n; ++r) {
            const Real* row = px + static_cast<int64_t>(r) * d;
            Real mu = 0.0;
            for (int j = 0; j < d; ++j) mu += row[j];
            mu /= d;
            Real var = 0.0;
            for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= d;
            const Real inv = 1.0 / std::sqrt(var + eps);
            (*stats)[static_cast<size_t>(r) * 2] = mu;
            (*stats)[static_cast<size_t>(r) * 2 + 1] = inv;
            Real* orow = po + static_cast<int64_t>(r) * d;
            for (int j = 0; j < d; ++j) orow[j] = (row[j] - mu) * inv * pg[j] + pb[j];
        }
    }
    check_finite(out, "layer_norm");
    record_op({x, gamma, beta}, out, [x, gamma, beta, out, stats, n, d](GradStore& gs) {
        const Real* go = gs.read(out);
        const Real* px = x.impl()->data.data();
        const Real* pg = gamma.impl()->data.data();
        Real* dx = x.requires_grad() ? gs.accum(x) : nullptr;
        Real* dg = gamma.requires_grad() ? gs.accum(gamma) : nullptr;
        Real* db = beta.requires_grad() ? gs.accum(beta) : nullptr;
        for (int r = 0; r < n; ++r) {
            const Real mu = (*stats)[static_cast<size_t>(r) * 2];
            const Real inv = (*stats)[static_cast<size_t>(r) * 2 + 1];
            const Real* row = px + static_cast<int64_t>(r) * d;
            const Real* grow = go + static_cast<int64_t>(r) * d;
            Real mean_gh = 0.0, mean_ghx = 0.0;
            for (int j = 0; j < d; ++j) {
                const Real gh = grow[j] * pg[j];
                const Real xc = (row[j] - mu) * inv;
                mean_gh += gh;
                mean_ghx += gh * xc;
            }
            mean_gh /= d;
            mean_ghx /= d;
            for (int j = 0; j < d; ++j) {
                const Real xc = (row[j] - mu) * inv;
                if (dx) dx[static_cast<int64_t>(r) * d + j] += inv * (grow[j] * pg[j] - mean_gh - xc * mean_ghx);
                if (dg) dg[j] += grow[j] * xc;
                if (db) db[j] += grow[j];
            }
        }
    });
    return out;
}

Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2) throw DimensionError("attention: inputs must be 2-D");
    const int n = q.dim(0), d = q.dim(1);
    if (k.dim(0) != n || v.dim(0) != n || k.dim(1) != d || v.dim(1) != d) {
        throw DimensionError("attention: q/k/v shape mismatch");
    }
    if (n_heads <= 0 || d % n_heads != 0) throw DimensionError("attention: d_model not divisible by n_heads");
    const int hd = d / n_heads;
    const Real scl = 1.0 / std::sqrt(static_cast<Real>(hd));

    Tensor out = Tensor::zeros({n, d});
    // attention probabilities cached per head for backward: [h][t][j<=t]
    auto probs = std::make_shared<std::vector<Real>>(static_cast<size_t>(n_heads) * n * n, 0.0);
    {
        const Real* pq = q.values().data();
        const Real* pk = k.values().data();
        const Real* pv = v.values().data();
        Real* po = out.values().data();
        std::vector<Real> scores(static_cast<size_t>(n));
        for (int h = 0; h < n_heads; ++h) {
            const int off = h * hd;
            for (int t = 0; t < n; ++t) {
                const Real* qt = pq + static_cast<int64_t>(t) * d + off;
                Real mx = -std::numeric_limits<Real>::infinity();
                for (int j = 0; j <= t; ++j) {
                    const Real* kj = pk + static_cast<int64_t>(j) * d + off;
                    Real s = 0.0;
                    for (int c = 0; c < hd; ++c) s += qt[c] * kj[c];
                    s *= scl;
                    scores[static_cast<size_t>(j)] = s;
                    mx = std::max(mx, s);
                }
                Real denom = 0.0;
                for (int j = 0; j <= t; ++j) {
                    const Real e = std::exp(scores[static_cast<size_t>(j)] - mx);
                    scores[static_cast<size_t>(j)] = e;
                    denom += e;
                }
                const Real invd = 1.0 / denom;
                Real* prow = probs->data() + (static_cast<int64_t>(h) * n + t) * n;
                Real* orow = po + static_cast<int64_t>(t) * d + off;
                for (int j = 0; j <= t; ++j) {
                    const Real p = scores[static_cast<size_t>(j)] * invd;
                    prow[j] = p;
                    const Real* vj = pv + static_cast<int64_t>(j) * d + off;
                    for (int c = 0; c < hd; ++c) orow[c] += p * vj[c];
                }
            }
        }
    }
    check_finite(out, "attention");
    record_op({q, k, v}, out, [q, k, v, out, probs, n, d, n_heads, hd, scl](GradStore& gs) {
        const Real* go = gs.read(out);
        const Real* pq = q.impl()->data.data();
        const Real* pk = k.impl()->data.data();
        const Real* pv = v.impl()->data.data();
        Real* dq = q.requires_grad() ? gs.accum(q) : nullptr;
        Real* dk = k.requires_grad() ? gs.accum(k) : nullptr;
        Real* dv = v.requires_grad() ? gs.accum(v) : nullptr;
        std::vector<Real> dp(static_cast<size_t>(n));
        for (int h = 0; h < n_heads; ++h) {
            const int off = h * hd;
            for (int t = 0; t < n; ++t) {
                const Real* prow = probs->data() + (static_cast<int64_t>(h) * n + t) * n;
                const Real* grow = go + static_cast<int64_t>(t) * d + off;
                // dp_j = g · v_j ; dv_j += p_j g
                Real dot = 0.0;
                for (int j = 0; j <= t; ++j) {
                    const Real* vj = pv + static_cast<int64_t>(j) * d + off;
                    Real s = 0.0;
                    for (int c = 0; c < hd; ++c) s += grow[c] * vj[c];
                    dp[static_cast<size_t>(j)] = s;
                    dot += s * prow[j];
                    if (dv) {
                        Real* dvj = dv + static_cast<int64_t>(j) * d + off;
                        for (int c = 0; c < hd; ++c) dvj[c] += prow[j] * grow[c];
                    }
                }
                // softmax backward then score → q,k
                for (int j = 0; j <= t; ++j) {
                    const Real ds = prow[j] * (dp[static_cast<size_t>(j)] - dot) * scl;
                    if (ds == 0.0) continue;
                    const Real* kj = pk + static_cast<int64_t>(j) * d + off;
                    const Real* qt = pq + static_cast<int64_t>(t) * d + off;
                    if (dq) {
                        Real* dqt = dq + static_cast<int64_t>(t) * d + off;
                        for (int c = 0; c < hd; ++c) dqt[c] += ds * kj[c];
                    }
                    if (dk) {
                        Real* dkj = dk + static_cast<int64_t>(j) * d + off;
                        for (int c = 0; c < hd; ++c) dkj[c] += ds * qt[c];
                    }
                }
            }
        }
    });
    return out;
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<Real>& labels) {
    const int n = static_cast<int>(logits.size());
    if (static_cast<int>(labels.size()) != n) throw DimensionError("bce_with_logits: label count mismatch");
    for (Real y : labels) {
        if (y != 0.0 && y != 1.0) throw InputError("bce_with_logits: labels must be 0 or 1");
    }
    Real acc = 0.0;
    {
        std::span<const Real> z = logits.values();
        for (int i = 0; i < n; ++i) {
            const Real zi = z[static_cast<size_t>(i)];
            // max(z,0) - z*y + log(1 + exp(-|z|))
            acc += std::max(zi, 0.0) - zi * labels[static_cast<size_t>(i)] + std::log1p(std::exp(-std::abs(zi)));
        }
    }
    Tensor out = Tensor::scalar(acc / n);
    check_finite(out, "bce_with_logits");
    record_op({logits}, out, [logits, out, labels, n](GradStore& gs) {
        const Real go = gs.read(out)[0] / n;
        Real* dz = gs.accum(logits);
        const Real* z = logits.impl()->data.data();
        for (int i = 0; i < n; ++i) {
            const Real s = z[i] >= 0 ? 1.0 / (1.0 + std::exp(-z[i])) : std::exp(z[i]) / (1.0 + std::exp(z[i]));
            dz[i] += go * (s - labels[static_cast<size_t>(i)]);
        }
    });
    return out;
}

// ---- Adam ----

void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(static_cast<size_t>(params[i].size()), 0.0);
            state.v[i].assign(static_cast<size_t>(params[i].size()), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw DimensionError("adam_step: state/param group size mismatch");
    state.step += 1;
    const Real bc1 = 1.0 - std::pow(cfg.beta1, static_cast<Real>(state.step));
    const Real bc2 = 1.0 - std::pow(cfg.beta2, static_cast<Real>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (state.m[i].size() != static_cast<size_t>(p.size())) {
            throw DimensionError("adam_step: state shape mismatch at param " + std::to_string(i));
        }
        std::span<Real> vals = p.values();
        std::span<const Real> g = p.grad();
        if (g.empty()) continue;  // no gradient accumulated: parameter untouched
        Real* m = state.m[i].data();
        Real* v = state.v[i].data();
        for (size_t j = 0; j < vals.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const Real mhat = m[j] / bc1;
            const Real vhat = v[j] / bc2;
            vals[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            if (!std::isfinite(vals[j])) throw NumericError("adam_step produced a non-finite parameter");
        }
    }
}

void zero_grads(std::vector<Tensor>& params) {
    for (Tensor& p : params) p.zero_grad();
}

}  // namespace poisonlab
