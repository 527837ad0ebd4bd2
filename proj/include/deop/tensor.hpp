#pragma once

// Dense double-precision tensors with reverse-mode differentiation.
//
// Tensors are shared handles: copying a Tensor aliases its storage. Ops are
// free functions; when a GradTape is active (TapeScope) and any input requires
// grad, the op records a backward closure. Replaying the tape visits closures
// in exact reverse application order. No broadcasting beyond scalar-tensor;
// batch handling is explicit loops in the modules above.

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_map>
#include <vector>

#include "deop/common.hpp"
#include "deop/rng.hpp"

namespace deop {

struct TensorData {
    Shape shape;
    std::vector<double> v;
    bool requires_grad = false;
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values) {
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        Tensor t;
        t.d_ = std::make_shared<TensorData>();
        t.d_->shape = std::move(shape);
        t.d_->v = std::move(values);
        return t;
    }

    static Tensor zeros(Shape shape) {
        size_t n = static_cast<size_t>(shape_numel(shape));
        return from(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(Shape shape, double value) {
        size_t n = static_cast<size_t>(shape_numel(shape));
        return from(std::move(shape), std::vector<double>(n, value));
    }

    static Tensor scalar(double value) { return from({1}, {value}); }

    static Tensor eye(int n) {
        Tensor t = zeros({n, n});
        for (int i = 0; i < n; ++i) t.d_->v[static_cast<size_t>(i) * n + i] = 1.0;
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
        size_t n = static_cast<size_t>(shape_numel(shape));
        std::vector<double> v(n);
        for (auto& x : v) x = rng.normal(mean, stddev);
        return from(std::move(shape), std::move(v));
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(d_->v.size()); }

    int rows() const { return d_->shape[0]; }
    int cols() const { return d_->shape[d_->shape.size() - 1]; }

    std::vector<double>& vals() { return d_->v; }
    const std::vector<double>& vals() const { return d_->v; }

    double& at(int i) { return d_->v[static_cast<size_t>(i)]; }
    double at(int i) const { return d_->v[static_cast<size_t>(i)]; }
    double& at(int i, int j) { return d_->v[static_cast<size_t>(i) * cols_2d() + j]; }
    double at(int i, int j) const { return d_->v[static_cast<size_t>(i) * cols_2d() + j]; }

    double item() const {
        if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
        return d_->v[0];
    }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    void set_requires_grad(bool b) { d_->requires_grad = b; }

    TensorData* node() const { return d_.get(); }

    // Deep copy with untracked storage.
    Tensor clone() const {
        Tensor t = from(d_->shape, d_->v);
        t.d_->requires_grad = d_->requires_grad;
        return t;
    }

  private:
    size_t cols_2d() const { return static_cast<size_t>(d_->shape[d_->shape.size() - 1]); }
    std::shared_ptr<TensorData> d_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

inline void check_finite(const char* op, const Tensor& t) {
    for (double x : t.vals())
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value in result");
}

// ---------------------------------------------------------------------------
// Gradient tape

class GradTape {
  public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

    // Seeds d(loss)/d(loss)=1 and replays recorded ops in reverse order.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        grads_.clear();
        grads_[loss.node()] = {1.0};
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    // Accumulated gradient; exact zeros for tensors that do not influence the loss.
    Tensor grad(const Tensor& t) const {
        auto it = grads_.find(t.node());
        if (it == grads_.end()) return Tensor::zeros(t.shape());
        return Tensor::from(t.shape(), it->second);
    }

    bool has_grad(const Tensor& t) const { return grads_.count(t.node()) > 0; }

    std::vector<double>* find_grad(const TensorData* node) {
        auto it = grads_.find(node);
        return it == grads_.end() ? nullptr : &it->second;
    }

    std::vector<double>& accum(const Tensor& t) {
        auto it = grads_.find(t.node());
        if (it == grads_.end())
            it = grads_.emplace(t.node(), std::vector<double>(static_cast<size_t>(t.numel()), 0.0)).first;
        return it->second;
    }

    void clear() {
        ops_.clear();
        grads_.clear();
    }

    size_t num_ops() const { return ops_.size(); }

  private:
    std::vector<std::function<void()>> ops_;
    std::unordered_map<const TensorData*, std::vector<double>> grads_;
};

inline GradTape*& tape_slot() {
    thread_local GradTape* tape = nullptr;
    return tape;
}

inline GradTape* active_tape() { return tape_slot(); }

class TapeScope {
  public:
    explicit TapeScope(GradTape& tape) : prev_(tape_slot()) { tape_slot() = &tape; }
    ~TapeScope() { tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    GradTape* prev_;
};

// Temporarily disables recording (forward-only sections inside a tape scope).
class NoTapeScope {
  public:
    NoTapeScope() : prev_(tape_slot()) { tape_slot() = nullptr; }
    ~NoTapeScope() { tape_slot() = prev_; }

  private:
    GradTape* prev_;
};

namespace detail {

inline GradTape* tape_for(std::initializer_list<const Tensor*> inputs) {
    GradTape* tape = active_tape();
    if (!tape) return nullptr;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return tape;
    return nullptr;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.vals().data();
    const double* pb = b.vals().data();
    double* po = out.vals().data();
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
            const double aik = pa[i * k + kk];
            const double* brow = pb + static_cast<size_t>(kk) * n;
            double* orow = po + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    check_finite("matmul", out);
    if (GradTape* tape = detail::tape_for({&a, &b})) {
        out.set_requires_grad(true);
        tape->record([tape, a, b, out, m, k, n]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            if (a.requires_grad()) {
                auto& ga = tape->accum(a);
                const double* pb = b.vals().data();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const double g = (*go)[static_cast<size_t>(i) * n + j];
                        for (int kk = 0; kk < k; ++kk) ga[static_cast<size_t>(i) * k + kk] += g * pb[static_cast<size_t>(kk) * n + j];
                    }
            }
            if (b.requires_grad()) {
                auto& gb = tape->accum(b);
                const double* pa = a.vals().data();
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        const double aik = pa[static_cast<size_t>(i) * k + kk];
                        for (int j = 0; j < n; ++j) gb[static_cast<size_t>(kk) * n + j] += aik * (*go)[static_cast<size_t>(i) * n + j];
                    }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected 2-d tensor, got " + shape_str(a.shape()));
    const int r = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::zeros({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    if (GradTape* tape = detail::tape_for({&a})) {
        out.set_requires_grad(true);
        tape->record([tape, a, out, r, c]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            auto& ga = tape->accum(a);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) ga[static_cast<size_t>(i) * c + j] += (*go)[static_cast<size_t>(j) * r + i];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor out = Tensor::from(std::move(shape), a.vals());
    if (GradTape* tape = detail::tape_for({&a})) {
        out.set_requires_grad(true);
        tape->record([tape, a, out]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            auto& ga = tape->accum(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i];
        });
    }
    return out;
}

namespace detail {

template <typename F, typename DF>
Tensor unary_op(const char* name, const Tensor& a, F f, DF df) {
    Tensor out = Tensor::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out.at(static_cast<int>(i)) = f(a.at(static_cast<int>(i)));
    check_finite(name, out);
    if (GradTape* tape = tape_for({&a})) {
        out.set_requires_grad(true);
        tape->record([tape, a, out, df]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            auto& ga = tape->accum(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i] * df(a.vals()[i], out.vals()[i]);
        });
    }
    return out;
}

template <typename F, typename DFA, typename DFB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DFA dfa, DFB dfb) {
    if (!same_shape(a, b))
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
        out.at(static_cast<int>(i)) = f(a.at(static_cast<int>(i)), b.at(static_cast<int>(i)));
    check_finite(name, out);
    if (GradTape* tape = tape_for({&a, &b})) {
        out.set_requires_grad(true);
        tape->record([tape, a, b, out, dfa, dfb]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            if (a.requires_grad()) {
                auto& ga = tape->accum(a);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i] * dfa(a.vals()[i], b.vals()[i]);
            }
            if (b.requires_grad()) {
                auto& gb = tape->accum(b);
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*go)[i] * dfb(a.vals()[i], b.vals()[i]);
            }
        });
    }
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "divide", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double c) {
    return detail::unary_op(
        "scale", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    return detail::unary_op(
        "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    for (double x : a.vals())
        if (!(x > 0.0)) throw ContractError("log: non-positive input");
    return detail::unary_op(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
    for (double x : a.vals())
        if (x < 0.0) throw ContractError("sqrt: negative input");
    return detail::unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / (y > 0 ? y : 1e-300); });
}

inline Tensor pow_scalar(const Tensor& a, double p) {
    for (double x : a.vals())
        if (x < 0.0) throw ContractError("pow_scalar: negative base");
    return detail::unary_op(
        "pow_scalar", a, [p](double x) { return std::pow(x, p); },
        [p](double x, double) { return x > 0 ? p * std::pow(x, p - 1.0) : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        "sigmoid", a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        "relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return detail::unary_op(
        "clamp", a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// Softmax along `axis` of a 1-d or 2-d tensor, computed with max subtraction.
inline Tensor softmax(const Tensor& a, int axis) {
    if (a.rank() < 1 || a.rank() > 2 || axis < 0 || axis >= a.rank())
        throw ContractError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(a.shape()));
    for (double x : a.vals())
        if (!std::isfinite(x)) throw NumericError("softmax: non-finite input");

    const int lines = a.rank() == 1 ? 1 : (axis == 1 ? a.dim(0) : a.dim(1));
    const int len = a.rank() == 1 ? a.dim(0) : (axis == 1 ? a.dim(1) : a.dim(0));
    const int stride = (a.rank() == 2 && axis == 0) ? a.dim(1) : 1;
    const int line_stride = (a.rank() == 2 && axis == 0) ? 1 : len;

    Tensor out = Tensor::zeros(a.shape());
    for (int l = 0; l < lines; ++l) {
        const size_t base = static_cast<size_t>(l) * line_stride;
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < len; ++i) mx = std::max(mx, a.vals()[base + static_cast<size_t>(i) * stride]);
        double sum = 0.0;
        for (int i = 0; i < len; ++i) {
            double e = std::exp(a.vals()[base + static_cast<size_t>(i) * stride] - mx);
            out.vals()[base + static_cast<size_t>(i) * stride] = e;
            sum += e;
        }
        for (int i = 0; i < len; ++i) out.vals()[base + static_cast<size_t>(i) * stride] /= sum;
    }
    if (GradTape* tape = detail::tape_for({&a})) {
        out.set_requires_grad(true);
        tape->record([tape, a, out, lines, len, stride, line_stride]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            auto& ga = tape->accum(a);
            for (int l = 0; l < lines; ++l) {
                const size_t base = static_cast<size_t>(l) * line_stride;
                double dot = 0.0;
                for (int i = 0; i < len; ++i) {
                    const size_t idx = base + static_cast<size_t>(i) * stride;
                    dot += (*go)[idx] * out.vals()[idx];
                }
                for (int i = 0; i < len; ++i) {
                    const size_t idx = base + static_cast<size_t>(i) * stride;
                    ga[idx] += out.vals()[idx] * ((*go)[idx] - dot);
                }
            }
        });
    }
    return out;
}

// Row-wise layer normalization of a 2-d tensor; gamma/beta have length cols.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (x.rank() != 2) throw ShapeError("layer_norm: expected 2-d input, got " + shape_str(x.shape()));
    const int n = x.dim(0), d = x.dim(1);
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layer_norm: gamma/beta length must be " + std::to_string(d));
    Tensor out = Tensor::zeros({n, d});
    std::vector<double> istd(static_cast<size_t>(n)), means(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        double mu = 0;
        for (int j = 0; j < d; ++j) mu += x.at(i, j);
        mu /= d;
        double var = 0;
        for (int j = 0; j < d; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        means[static_cast<size_t>(i)] = mu;
        istd[static_cast<size_t>(i)] = is;
        for (int j = 0; j < d; ++j) out.at(i, j) = (x.at(i, j) - mu) * is * gamma.at(j) + beta.at(j);
    }
    check_finite("layer_norm", out);
    if (GradTape* tape = detail::tape_for({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        tape->record([tape, x, gamma, beta, out, n, d, istd, means]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            for (int i = 0; i < n; ++i) {
                const double mu = means[static_cast<size_t>(i)], is = istd[static_cast<size_t>(i)];
                // xhat and dxhat per row
                double m1 = 0, m2 = 0;
                std::vector<double> xh(static_cast<size_t>(d)), dxh(static_cast<size_t>(d));
                for (int j = 0; j < d; ++j) {
                    xh[static_cast<size_t>(j)] = (x.at(i, j) - mu) * is;
                    dxh[static_cast<size_t>(j)] = (*go)[static_cast<size_t>(i) * d + j] * gamma.at(j);
                    m1 += dxh[static_cast<size_t>(j)];
                    m2 += dxh[static_cast<size_t>(j)] * xh[static_cast<size_t>(j)];
                }
                m1 /= d;
                m2 /= d;
                if (x.requires_grad()) {
                    auto& gx = tape->accum(x);
                    for (int j = 0; j < d; ++j)
                        gx[static_cast<size_t>(i) * d + j] += is * (dxh[static_cast<size_t>(j)] - m1 - xh[static_cast<size_t>(j)] * m2);
                }
                if (gamma.requires_grad()) {
                    auto& gg = tape->accum(gamma);
                    for (int j = 0; j < d; ++j)
                        gg[static_cast<size_t>(j)] += (*go)[static_cast<size_t>(i) * d + j] * xh[static_cast<size_t>(j)];
                }
                if (beta.requires_grad()) {
                    auto& gb = tape->accum(beta);
                    for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += (*go)[static_cast<size_t>(i) * d + j];
                }
            }
        });
    }
    return out;
}

inline Tensor reduce_sum(const Tensor& a) {
    double s = 0;
    for (double x : a.vals()) s += x;
    Tensor out = Tensor::scalar(s);
    check_finite("reduce_sum", out);
    if (GradTape* tape = detail::tape_for({&a})) {
        out.set_requires_grad(true);
        tape->record([tape, a, out]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            auto& ga = tape->accum(a);
            for (auto& g : ga) g += (*go)[0];
        });
    }
    return out;
}

inline Tensor reduce_mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    return scale(reduce_sum(a), inv);
}

// Per-row sums of a 2-d tensor -> [rows].
inline Tensor row_sums(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("row_sums: expected 2-d tensor, got " + shape_str(a.shape()));
    const int r = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::zeros({r});
    for (int i = 0; i < r; ++i) {
        double s = 0;
        for (int j = 0; j < c; ++j) s += a.at(i, j);
        out.at(i) = s;
    }
    check_finite("row_sums", out);
    if (GradTape* tape = detail::tape_for({&a})) {
        out.set_requires_grad(true);
        tape->record([tape, a, out, r, c]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            auto& ga = tape->accum(a);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) ga[static_cast<size_t>(i) * c + j] += (*go)[static_cast<size_t>(i)];
        });
    }
    return out;
}

// Multiplies every element by a one-element tensor (scalar-tensor broadcast).
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("scale_by: scalar operand has shape " + shape_str(s.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const double sv = s.at(0);
    for (int64_t i = 0; i < a.numel(); ++i) out.at(static_cast<int>(i)) = a.at(static_cast<int>(i)) * sv;
    check_finite("scale_by", out);
    if (GradTape* tape = detail::tape_for({&a, &s})) {
        out.set_requires_grad(true);
        tape->record([tape, a, s, out]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            if (a.requires_grad()) {
                auto& ga = tape->accum(a);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i] * s.at(0);
            }
            if (s.requires_grad()) {
                auto& gs = tape->accum(s);
                double acc = 0;
                for (size_t i = 0; i < a.vals().size(); ++i) acc += (*go)[i] * a.vals()[i];
                gs[0] += acc;
            }
        });
    }
    return out;
}

inline Tensor div_by(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("div_by: scalar operand has shape " + shape_str(s.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const double sv = s.at(0);
    for (int64_t i = 0; i < a.numel(); ++i) out.at(static_cast<int>(i)) = a.at(static_cast<int>(i)) / sv;
    check_finite("div_by", out);
    if (GradTape* tape = detail::tape_for({&a, &s})) {
        out.set_requires_grad(true);
        tape->record([tape, a, s, out]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            const double sv = s.at(0);
            if (a.requires_grad()) {
                auto& ga = tape->accum(a);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i] / sv;
            }
            if (s.requires_grad()) {
                auto& gs = tape->accum(s);
                double acc = 0;
                for (size_t i = 0; i < a.vals().size(); ++i) acc += (*go)[i] * a.vals()[i];
                gs[0] += -acc / (sv * sv);
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& a, int start, int count) {
    if (a.rank() != 2) throw ShapeError("slice_rows: expected 2-d tensor, got " + shape_str(a.shape()));
    if (start < 0 || count < 0 || start + count > a.dim(0))
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of " + std::to_string(a.dim(0)) + " rows");
    const int c = a.dim(1);
    Tensor out = Tensor::zeros({count, c});
    std::copy_n(a.vals().begin() + static_cast<size_t>(start) * c, static_cast<size_t>(count) * c, out.vals().begin());
    if (GradTape* tape = detail::tape_for({&a})) {
        out.set_requires_grad(true);
        tape->record([tape, a, out, start, count, c]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            auto& ga = tape->accum(a);
            for (size_t i = 0; i < static_cast<size_t>(count) * c; ++i) ga[static_cast<size_t>(start) * c + i] += (*go)[i];
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty input");
    const int c = parts[0].dim(1);
    int r = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(1) != c)
            throw ShapeError("concat_rows: inconsistent shape " + shape_str(p.shape()));
        r += p.dim(0);
    }
    Tensor out = Tensor::zeros({r, c});
    size_t off = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        std::copy(p.vals().begin(), p.vals().end(), out.vals().begin() + static_cast<long>(off));
        off += p.vals().size();
        any_grad = any_grad || p.requires_grad();
    }
    GradTape* tape = active_tape();
    if (tape && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tensor> held = parts;
        tape->record([tape, held, out]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            size_t off = 0;
            for (const Tensor& p : held) {
                if (p.requires_grad()) {
                    auto& gp = tape->accum(p);
                    for (size_t i = 0; i < gp.size(); ++i) gp[i] += (*go)[off + i];
                }
                off += p.vals().size();
            }
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& a, int start, int count) {
    if (a.rank() != 2) throw ShapeError("slice_cols: expected 2-d tensor, got " + shape_str(a.shape()));
    if (start < 0 || count < 0 || start + count > a.dim(1))
        throw ShapeError("slice_cols: range out of " + std::to_string(a.dim(1)) + " cols");
    const int r = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::zeros({r, count});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < count; ++j) out.at(i, j) = a.at(i, start + j);
    if (GradTape* tape = detail::tape_for({&a})) {
        out.set_requires_grad(true);
        tape->record([tape, a, out, start, count, r, c]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            auto& ga = tape->accum(a);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < count; ++j) ga[static_cast<size_t>(i) * c + start + j] += (*go)[static_cast<size_t>(i) * count + j];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    const int r = parts[0].dim(0);
    int c = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != r)
            throw ShapeError("concat_cols: inconsistent shape " + shape_str(p.shape()));
        c += p.dim(1);
    }
    Tensor out = Tensor::zeros({r, c});
    int off = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < p.dim(1); ++j) out.at(i, off + j) = p.at(i, j);
        off += p.dim(1);
        any_grad = any_grad || p.requires_grad();
    }
    GradTape* tape = active_tape();
    if (tape && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tensor> held = parts;
        tape->record([tape, held, out, r, c]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            int off = 0;
            for (const Tensor& p : held) {
                const int pc = p.dim(1);
                if (p.requires_grad()) {
                    auto& gp = tape->accum(p);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < pc; ++j) gp[static_cast<size_t>(i) * pc + j] += (*go)[static_cast<size_t>(i) * c + off + j];
                }
                off += pc;
            }
        });
    }
    return out;
}

namespace detail {

struct BilinearTap {
    int y0, y1, x0, x1;
    double wy, wx;
};

inline BilinearTap bilinear_tap(int out_idx_y, int out_idx_x, int h, int w, int h2, int w2) {
    // pixel-center alignment, replicated borders
    const double fy = (out_idx_y + 0.5) * static_cast<double>(h) / h2 - 0.5;
    const double fx = (out_idx_x + 0.5) * static_cast<double>(w) / w2 - 0.5;
    BilinearTap t;
    const double cy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
    const double cx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
    t.y0 = static_cast<int>(std::floor(cy));
    t.x0 = static_cast<int>(std::floor(cx));
    t.y1 = std::min(t.y0 + 1, h - 1);
    t.x1 = std::min(t.x0 + 1, w - 1);
    t.wy = cy - t.y0;
    t.wx = cx - t.x0;
    return t;
}

}  // namespace detail

// Bilinear resampling of a 2-d map to [h2, w2].
inline Tensor resize_bilinear(const Tensor& a, int h2, int w2) {
    if (a.rank() != 2) throw ShapeError("resize_bilinear: expected 2-d tensor, got " + shape_str(a.shape()));
    const int h = a.dim(0), w = a.dim(1);
    Tensor out = Tensor::zeros({h2, w2});
    for (int y = 0; y < h2; ++y)
        for (int x = 0; x < w2; ++x) {
            auto t = detail::bilinear_tap(y, x, h, w, h2, w2);
            out.at(y, x) = (1 - t.wy) * (1 - t.wx) * a.at(t.y0, t.x0) + (1 - t.wy) * t.wx * a.at(t.y0, t.x1) +
                           t.wy * (1 - t.wx) * a.at(t.y1, t.x0) + t.wy * t.wx * a.at(t.y1, t.x1);
        }
    if (GradTape* tape = detail::tape_for({&a})) {
        out.set_requires_grad(true);
        tape->record([tape, a, out, h, w, h2, w2]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            auto& ga = tape->accum(a);
            for (int y = 0; y < h2; ++y)
                for (int x = 0; x < w2; ++x) {
                    auto t = detail::bilinear_tap(y, x, h, w, h2, w2);
                    const double g = (*go)[static_cast<size_t>(y) * w2 + x];
                    ga[static_cast<size_t>(t.y0) * w + t.x0] += g * (1 - t.wy) * (1 - t.wx);
                    ga[static_cast<size_t>(t.y0) * w + t.x1] += g * (1 - t.wy) * t.wx;
                    ga[static_cast<size_t>(t.y1) * w + t.x0] += g * t.wy * (1 - t.wx);
                    ga[static_cast<size_t>(t.y1) * w + t.x1] += g * t.wy * t.wx;
                }
        });
    }
    return out;
}

// Unfolds [C,H,W] into [C*k*k, Ho*Wo] patch columns (zero padding).
inline Tensor im2col(const Tensor& x, int k, int stride, int pad) {
    if (x.rank() != 3) throw ShapeError("im2col: expected 3-d tensor, got " + shape_str(x.shape()));
    const int ch = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (w + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("im2col: kernel larger than padded input");
    Tensor out = Tensor::zeros({ch * k * k, ho * wo});
    const double* px = x.vals().data();
    double* po = out.vals().data();
    const size_t ncols = static_cast<size_t>(ho) * wo;
    for (int c = 0; c < ch; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const size_t row = (static_cast<size_t>(c) * k + ki) * k + kj;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        double v = 0.0;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                            v = px[(static_cast<size_t>(c) * h + iy) * w + ix];
                        po[row * ncols + static_cast<size_t>(oy) * wo + ox] = v;
                    }
                }
            }
    if (GradTape* tape = detail::tape_for({&x})) {
        out.set_requires_grad(true);
        tape->record([tape, x, out, ch, h, w, k, stride, pad, ho, wo]() {
            auto* go = tape->find_grad(out.node());
            if (!go) return;
            auto& gx = tape->accum(x);
            const size_t ncols = static_cast<size_t>(ho) * wo;
            for (int c = 0; c < ch; ++c)
                for (int ki = 0; ki < k; ++ki)
                    for (int kj = 0; kj < k; ++kj) {
                        const size_t row = (static_cast<size_t>(c) * k + ki) * k + kj;
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride - pad + ki;
                            if (iy < 0 || iy >= h) continue;
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * stride - pad + kj;
                                if (ix < 0 || ix >= w) continue;
                                gx[(static_cast<size_t>(c) * h + iy) * w + ix] +=
                                    (*go)[row * ncols + static_cast<size_t>(oy) * wo + ox];
                            }
                        }
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle.
//
// Central differences against the tape gradient; per-coordinate error is
// |g_fd - g_ad| / max(1, |g_fd|, |g_ad|) and the max over coordinates is
// returned. The max(1, .) guard avoids blow-up near zero gradients.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
    if (!(eps > 0)) throw ContractError("grad_check: eps must be positive");
    const bool prev_rg = x.requires_grad();
    x.set_requires_grad(true);
    GradTape tape;
    Tensor g_ad;
    {
        TapeScope scope(tape);
        Tensor y = f(x);
        if (y.numel() != 1) throw ContractError("grad_check: f must return a scalar, got " + shape_str(y.shape()));
        tape.backward(y);
        g_ad = tape.grad(x);
    }
    x.set_requires_grad(prev_rg);

    double worst = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double saved = x.at(static_cast<int>(i));
        x.at(static_cast<int>(i)) = saved + eps;
        const double fp = f(x).item();
        x.at(static_cast<int>(i)) = saved - eps;
        const double fm = f(x).item();
        x.at(static_cast<int>(i)) = saved;
        const double g_fd = (fp - fm) / (2 * eps);
        const double g = g_ad.at(static_cast<int>(i));
        const double rel = std::abs(g_fd - g) / std::max({1.0, std::abs(g_fd), std::abs(g)});
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace deop
