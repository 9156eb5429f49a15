#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sundial/error.hpp"
#include "sundial/instrumentation.hpp"
#include "sundial/rng.hpp"

namespace sundial {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        if (d < 0) throw ShapeError("negative dimension in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// ---- autograd mode ----

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- tensor ----

template <typename S>
struct TensorImplT {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = nullptr;
    std::vector<std::shared_ptr<TensorImplT>> parents;
    std::function<void(TensorImplT*)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    std::vector<S>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), S(0));
        return grad;
    }
};

// Reverse-mode autodiff tensor. Copies share the underlying node, so a value
// can feed several ops and gradients from all uses accumulate additively.
template <typename S>
class TensorT {
public:
    using Impl = TensorImplT<S>;

    TensorT() : impl_(std::make_shared<Impl>()) {}

    static TensorT zeros(Shape shape) { return full(std::move(shape), S(0)); }

    static TensorT full(Shape shape, S value) {
        TensorT t;
        std::int64_t n = shape_numel(shape);
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(static_cast<std::size_t>(n), value);
        return t;
    }

    static TensorT from_data(Shape shape, std::vector<S> data) {
        std::int64_t n = shape_numel(shape);
        if (n != static_cast<std::int64_t>(data.size()))
            throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
        TensorT t;
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        return t;
    }

    static TensorT scalar(S value) { return from_data({}, {value}); }

    static TensorT randn(Shape shape, Rng& rng) {
        TensorT t = zeros(std::move(shape));
        for (auto& x : t.impl_->data) x = static_cast<S>(rng.normal());
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::int64_t numel() const { return impl_->numel(); }

    const std::vector<S>& data() const { return impl_->data; }
    std::vector<S>& mutable_data() { return impl_->data; }
    const std::vector<S>& grad() const { return impl_->grad; }

    bool requires_grad() const { return impl_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    void zero_grad() { impl_->grad.clear(); }

    S item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return impl_->data[0];
    }

    S at(const Shape& index) const {
        return impl_->data[static_cast<std::size_t>(flat_index(index))];
    }

    std::int64_t flat_index(const Shape& index) const {
        if (index.size() != rank())
            throw ShapeError("index rank " + std::to_string(index.size()) + " vs tensor " +
                             shape_str(shape()));
        std::int64_t flat = 0;
        for (std::size_t i = 0; i < index.size(); ++i) {
            if (index[i] < 0 || index[i] >= impl_->shape[i])
                throw ShapeError("index out of range at axis " + std::to_string(i));
            flat = flat * impl_->shape[i] + index[i];
        }
        return flat;
    }

    std::shared_ptr<Impl> impl() const { return impl_; }

    bool same_node(const TensorT& other) const { return impl_ == other.impl_; }

    template <typename T>
    TensorT<T> astype() const {
        TensorT<T> out = TensorT<T>::zeros(shape());
        auto& od = out.mutable_data();
        for (std::size_t i = 0; i < impl_->data.size(); ++i) od[i] = static_cast<T>(impl_->data[i]);
        return out;
    }

private:
    std::shared_ptr<Impl> impl_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// ---- op plumbing ----

namespace detail {

template <typename S>
void check_finite(const char* op, const std::vector<S>& v) {
    if (!debug_checks_enabled()) return;
    for (S x : v)
        if (!std::isfinite(static_cast<double>(x)))
            throw NumericError(std::string(op) + " produced a non-finite value");
}

// Builds the result node. The backward closure receives the result impl (for
// its grad) and must add into each parent's grad buffer. Parents and the
// closure are wired only when grad mode is on and some input needs gradients.
template <typename S>
TensorT<S> make_result(const char* op, Shape shape, std::vector<S> data,
                       const std::vector<TensorT<S>>& inputs,
                       std::function<void(TensorImplT<S>*)> backward) {
    check_finite(op, data);
    TensorT<S> out = TensorT<S>::from_data(std::move(shape), std::move(data));
    auto impl = out.impl();
    impl->op = op;
    bool needs = false;
    if (grad_enabled())
        for (const auto& in : inputs)
            if (in.requires_grad()) needs = true;
    if (needs) {
        impl->requires_grad = true;
        for (const auto& in : inputs) impl->parents.push_back(in.impl());
        impl->backward_fn = std::move(backward);
    }
    return out;
}

// Row-major strides aligned to an output rank, with 0 where the axis is
// broadcast (extent 1 or missing).
inline std::vector<std::int64_t> aligned_strides(const Shape& shape, const Shape& out_shape) {
    std::size_t ro = out_shape.size(), rx = shape.size();
    std::vector<std::int64_t> strides(ro, 0);
    std::int64_t acc = 1;
    for (std::size_t i = rx; i-- > 0;) {
        std::size_t oi = i + (ro - rx);
        strides[oi] = (shape[i] == 1) ? 0 : acc;
        acc *= shape[i];
    }
    return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Sums `src` (shape src_shape) down to dst_shape, accumulating in double,
// and adds the result into dst.
template <typename S>
void reduce_into(const std::vector<S>& src, const Shape& src_shape, const Shape& dst_shape,
                 std::vector<S>& dst) {
    if (src_shape == dst_shape) {
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        return;
    }
    std::vector<double> acc(static_cast<std::size_t>(shape_numel(dst_shape)), 0.0);
    auto dstr = aligned_strides(dst_shape, src_shape);
    std::size_t r = src_shape.size();
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t doff = 0;
    for (std::size_t flat = 0; flat < src.size(); ++flat) {
        acc[static_cast<std::size_t>(doff)] += static_cast<double>(src[flat]);
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            doff += dstr[ax];
            if (idx[ax] < src_shape[ax]) break;
            idx[ax] = 0;
            doff -= dstr[ax] * src_shape[ax];
        }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] += static_cast<S>(acc[i]);
}

template <typename S, typename FwdFn>
std::vector<S> broadcast_eval(const TensorT<S>& a, const TensorT<S>& b, const Shape& out_shape,
                              FwdFn&& f) {
    std::int64_t n = shape_numel(out_shape);
    std::vector<S> out(static_cast<std::size_t>(n));
    if (a.shape() == b.shape()) {
        const auto& ad = a.data();
        const auto& bd = b.data();
        for (std::int64_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[i]);
        return out;
    }
    auto astr = aligned_strides(a.shape(), out_shape);
    auto bstr = aligned_strides(b.shape(), out_shape);
    std::size_t r = out_shape.size();
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t ao = 0, bo = 0;
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::int64_t flat = 0; flat < n; ++flat) {
        out[static_cast<std::size_t>(flat)] = f(ad[ao], bd[bo]);
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            ao += astr[ax];
            bo += bstr[ax];
            if (idx[ax] < out_shape[ax]) break;
            idx[ax] = 0;
            ao -= astr[ax] * out_shape[ax];
            bo -= bstr[ax] * out_shape[ax];
        }
    }
    return out;
}

// Evaluates grad_out * partial(a, b) elementwise over the broadcast domain
// and reduces the product into the parent's grad buffer.
template <typename S, typename PartialFn>
void broadcast_backprop(const TensorT<S>& parent, const TensorT<S>& a, const TensorT<S>& b,
                        const Shape& out_shape, const std::vector<S>& gout, PartialFn&& partial) {
    std::vector<S> local(gout.size());
    auto astr = aligned_strides(a.shape(), out_shape);
    auto bstr = aligned_strides(b.shape(), out_shape);
    std::size_t r = out_shape.size();
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t ao = 0, bo = 0;
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t flat = 0; flat < gout.size(); ++flat) {
        local[flat] = gout[flat] * partial(ad[ao], bd[bo]);
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            ao += astr[ax];
            bo += bstr[ax];
            if (idx[ax] < out_shape[ax]) break;
            idx[ax] = 0;
            ao -= astr[ax] * out_shape[ax];
            bo -= bstr[ax] * out_shape[ax];
        }
    }
    reduce_into(local, out_shape, parent.shape(), parent.impl()->grad_buffer());
}

template <typename S, typename FwdFn, typename DaFn, typename DbFn>
TensorT<S> binary_op(const char* op, const TensorT<S>& a, const TensorT<S>& b, FwdFn f, DaFn da,
                     DbFn db) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
    auto data = broadcast_eval(a, b, out_shape, f);
    TensorT<S> a_cap = a, b_cap = b;
    return make_result<S>(op, out_shape, std::move(data), {a, b},
                          [a_cap, b_cap, out_shape, da, db](TensorImplT<S>* self) {
                              const auto& g = self->grad;
                              if (g.empty()) return;
                              if (a_cap.requires_grad())
                                  broadcast_backprop(a_cap, a_cap, b_cap, out_shape, g, da);
                              if (b_cap.requires_grad())
                                  broadcast_backprop(b_cap, a_cap, b_cap, out_shape, g, db);
                          });
}

template <typename S, typename FwdFn, typename DFn>
TensorT<S> unary_op(const char* op, const TensorT<S>& a, FwdFn f, DFn dfdx) {
    std::vector<S> data(a.data().size());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = f(ad[i]);
    TensorT<S> a_cap = a;
    return make_result<S>(op, a.shape(), std::move(data), {a},
                          [a_cap, dfdx](TensorImplT<S>* self) {
                              const auto& g = self->grad;
                              if (g.empty() || !a_cap.requires_grad()) return;
                              auto& ga = a_cap.impl()->grad_buffer();
                              const auto& ad2 = a_cap.data();
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(ad2[i]);
                          });
}

}  // namespace detail

// ---- elementwise binary ops ----

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op(
        "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
        [](S, S) { return S(1); });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op(
        "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
        [](S, S) { return S(-1); });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op(
        "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
        [](S x, S) { return x; });
}

template <typename S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op(
        "div", a, b, [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
        [](S x, S y) { return -x / (y * y); });
}

// ---- elementwise unary ops ----

namespace detail {
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028653558798921198687637;
inline constexpr double kGeluCubic = 0.044715;
}  // namespace detail

template <typename S>
TensorT<S> neg(const TensorT<S>& a) {
    return detail::unary_op(
        "neg", a, [](S x) { return -x; }, [](S) { return S(-1); });
}

template <typename S>
TensorT<S> exp(const TensorT<S>& a) {
    return detail::unary_op(
        "exp", a, [](S x) { return std::exp(x); }, [](S x) { return std::exp(x); });
}

template <typename S>
TensorT<S> sqrt(const TensorT<S>& a) {
    return detail::unary_op(
        "sqrt", a, [](S x) { return std::sqrt(x); }, [](S x) { return S(0.5) / std::sqrt(x); });
}

template <typename S>
TensorT<S> tanh(const TensorT<S>& a) {
    return detail::unary_op(
        "tanh", a, [](S x) { return std::tanh(x); },
        [](S x) {
            S t = std::tanh(x);
            return S(1) - t * t;
        });
}

// tanh approximation of the Gaussian error linear unit.
template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
    return detail::unary_op(
        "gelu", a,
        [](S x) {
            double xd = static_cast<double>(x);
            double u = detail::kGeluSqrt2OverPi * (xd + detail::kGeluCubic * xd * xd * xd);
            return static_cast<S>(0.5 * xd * (1.0 + std::tanh(u)));
        },
        [](S x) {
            double xd = static_cast<double>(x);
            double u = detail::kGeluSqrt2OverPi * (xd + detail::kGeluCubic * xd * xd * xd);
            double t = std::tanh(u);
            double du = detail::kGeluSqrt2OverPi * (1.0 + 3.0 * detail::kGeluCubic * xd * xd);
            return static_cast<S>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du);
        });
}

template <typename S>
TensorT<S> silu(const TensorT<S>& a) {
    return detail::unary_op(
        "silu", a,
        [](S x) {
            double xd = static_cast<double>(x);
            return static_cast<S>(xd / (1.0 + std::exp(-xd)));
        },
        [](S x) {
            double xd = static_cast<double>(x);
            double s = 1.0 / (1.0 + std::exp(-xd));
            return static_cast<S>(s * (1.0 + xd * (1.0 - s)));
        });
}

template <typename S>
TensorT<S> add_scalar(const TensorT<S>& a, double c) {
    return detail::unary_op(
        "add_scalar", a, [c](S x) { return static_cast<S>(x + c); }, [](S) { return S(1); });
}

template <typename S>
TensorT<S> mul_scalar(const TensorT<S>& a, double c) {
    return detail::unary_op(
        "mul_scalar", a, [c](S x) { return static_cast<S>(x * c); },
        [c](S) { return static_cast<S>(c); });
}

template <typename S>
TensorT<S> operator+(const TensorT<S>& a, const TensorT<S>& b) { return add(a, b); }
template <typename S>
TensorT<S> operator-(const TensorT<S>& a, const TensorT<S>& b) { return sub(a, b); }
template <typename S>
TensorT<S> operator*(const TensorT<S>& a, const TensorT<S>& b) { return mul(a, b); }
template <typename S>
TensorT<S> operator/(const TensorT<S>& a, const TensorT<S>& b) { return div(a, b); }

// ---- reductions ----

template <typename S>
TensorT<S> sum_all(const TensorT<S>& a) {
    double acc = 0.0;
    for (S x : a.data()) acc += static_cast<double>(x);
    TensorT<S> a_cap = a;
    return detail::make_result<S>("sum_all", Shape{}, {static_cast<S>(acc)}, {a},
                                  [a_cap](TensorImplT<S>* self) {
                                      const auto& g = self->grad;
                                      if (g.empty() || !a_cap.requires_grad()) return;
                                      auto& ga = a_cap.impl()->grad_buffer();
                                      for (auto& v : ga) v += g[0];
                                  });
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& a) {
    if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
    double acc = 0.0;
    for (S x : a.data()) acc += static_cast<double>(x);
    double inv_n = 1.0 / static_cast<double>(a.numel());
    TensorT<S> a_cap = a;
    return detail::make_result<S>(
        "mean_all", Shape{}, {static_cast<S>(acc * inv_n)}, {a},
        [a_cap, inv_n](TensorImplT<S>* self) {
            const auto& g = self->grad;
            if (g.empty() || !a_cap.requires_grad()) return;
            auto& ga = a_cap.impl()->grad_buffer();
            S gs = static_cast<S>(static_cast<double>(g[0]) * inv_n);
            for (auto& v : ga) v += gs;
        });
}

// Sums over the last axis, dropping it.
template <typename S>
TensorT<S> sum_last(const TensorT<S>& a) {
    if (a.rank() == 0) throw ShapeError("sum_last: rank-0 tensor has no last axis");
    std::int64_t n = a.shape().back();
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    std::int64_t rows = shape_numel(out_shape);
    std::vector<S> data(static_cast<std::size_t>(rows));
    const auto& ad = a.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < n; ++j) acc += static_cast<double>(ad[r * n + j]);
        data[static_cast<std::size_t>(r)] = static_cast<S>(acc);
    }
    TensorT<S> a_cap = a;
    return detail::make_result<S>(
        "sum_last", std::move(out_shape), std::move(data), {a},
        [a_cap, rows, n](TensorImplT<S>* self) {
            const auto& g = self->grad;
            if (g.empty() || !a_cap.requires_grad()) return;
            auto& ga = a_cap.impl()->grad_buffer();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < n; ++j) ga[r * n + j] += g[static_cast<std::size_t>(r)];
        });
}

// ---- softmax ----

namespace detail {

// valid_count(row) returns how many leading entries of that row participate;
// the rest are exactly zero in the output. -1 means the whole row.
template <typename S>
TensorT<S> softmax_impl(const char* op, const TensorT<S>& a,
                        std::function<std::int64_t(std::int64_t)> valid_count) {
    if (a.rank() == 0) throw ShapeError("softmax: rank-0 tensor");
    std::int64_t n = a.shape().back();
    std::int64_t rows = a.numel() / n;
    std::vector<S> data(a.data().size());
    const auto& ad = a.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::int64_t v = valid_count(r);
        if (v < 0 || v > n) v = n;
        if (v == 0) throw ShapeError("softmax: empty row");
        const S* x = ad.data() + r * n;
        S* y = data.data() + r * n;
        S m = x[0];
        for (std::int64_t j = 1; j < v; ++j) m = std::max(m, x[j]);
        double denom = 0.0;
        for (std::int64_t j = 0; j < v; ++j) {
            double e = std::exp(static_cast<double>(x[j] - m));
            y[j] = static_cast<S>(e);
            denom += e;
        }
        double inv = 1.0 / denom;
        for (std::int64_t j = 0; j < v; ++j) y[j] = static_cast<S>(static_cast<double>(y[j]) * inv);
        for (std::int64_t j = v; j < n; ++j) y[j] = S(0);
    }
    TensorT<S> a_cap = a;
    return make_result<S>(
        op, a.shape(), std::move(data), {a},
        [a_cap, rows, n](TensorImplT<S>* self) {
            const auto& g = self->grad;
            if (g.empty() || !a_cap.requires_grad()) return;
            auto& ga = a_cap.impl()->grad_buffer();
            const auto& p = self->data;
            for (std::int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::int64_t j = 0; j < n; ++j)
                    dot += static_cast<double>(p[r * n + j]) * static_cast<double>(g[r * n + j]);
                for (std::int64_t j = 0; j < n; ++j)
                    ga[r * n + j] += static_cast<S>(static_cast<double>(p[r * n + j]) *
                                                    (static_cast<double>(g[r * n + j]) - dot));
            }
        });
}

}  // namespace detail

template <typename S>
TensorT<S> softmax_last(const TensorT<S>& a) {
    return detail::softmax_impl("softmax_last", a, [](std::int64_t) { return std::int64_t(-1); });
}

// Softmax over the last axis where, within each [Q, N] block of the last two
// axes, query i only attends to keys j <= i + (N - Q); the rest are exactly 0.
// With Q == N this is the standard causal mask.
template <typename S>
TensorT<S> causal_softmax(const TensorT<S>& a) {
    if (a.rank() < 2) throw ShapeError("causal_softmax: needs rank >= 2, got " + shape_str(a.shape()));
    std::int64_t n = a.shape().back();
    std::int64_t q = a.shape()[a.rank() - 2];
    if (q > n) throw ShapeError("causal_softmax: more queries than keys " + shape_str(a.shape()));
    std::int64_t offset = n - q;
    return detail::softmax_impl("causal_softmax", a,
                                [q, offset](std::int64_t r) { return (r % q) + offset + 1; });
}

// ---- matmul ----

// Batched matrix product with broadcasting over the leading (batch) axes.
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: both operands need rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    std::int64_t m = a.shape()[a.rank() - 2];
    std::int64_t k = a.shape()[a.rank() - 1];
    std::int64_t k2 = b.shape()[b.rank() - 2];
    std::int64_t n = b.shape()[b.rank() - 1];
    if (k != k2)
        throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    Shape obatch = detail::broadcast_shape(abatch, bbatch, "matmul");
    std::int64_t nb = shape_numel(obatch);

    Shape out_shape = obatch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    auto astr = detail::aligned_strides(abatch, obatch);
    auto bstr = detail::aligned_strides(bbatch, obatch);
    std::vector<std::int64_t> aoffs(static_cast<std::size_t>(nb)), boffs(static_cast<std::size_t>(nb));
    for (std::int64_t batch = 0; batch < nb; ++batch) {
        std::int64_t ao = 0, bo = 0, rem = batch;
        for (std::size_t ax = obatch.size(); ax-- > 0;) {
            std::int64_t ix = rem % obatch[ax];
            rem /= obatch[ax];
            ao += ix * astr[ax];
            bo += ix * bstr[ax];
        }
        aoffs[static_cast<std::size_t>(batch)] = ao * m * k;
        boffs[static_cast<std::size_t>(batch)] = bo * k2 * n;
    }

    std::vector<S> data(static_cast<std::size_t>(nb * m * n), S(0));
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::int64_t batch = 0; batch < nb; ++batch) {
        S* c = data.data() + batch * m * n;
        const S* A = ad.data() + aoffs[static_cast<std::size_t>(batch)];
        const S* B = bd.data() + boffs[static_cast<std::size_t>(batch)];
        for (std::int64_t i = 0; i < m; ++i) {
            S* crow = c + i * n;
            for (std::int64_t kk = 0; kk < k; ++kk) {
                S av = A[i * k + kk];
                const S* brow = B + kk * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    add_multiplies(static_cast<std::uint64_t>(nb) * static_cast<std::uint64_t>(m) *
                   static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(k));

    TensorT<S> a_cap = a, b_cap = b;
    return detail::make_result<S>(
        "matmul", std::move(out_shape), std::move(data), {a, b},
        [a_cap, b_cap, m, n, k, nb, aoffs, boffs](TensorImplT<S>* self) {
            const auto& g = self->grad;
            if (g.empty()) return;
            const auto& ad2 = a_cap.data();
            const auto& bd2 = b_cap.data();
            std::vector<S>* ga = a_cap.requires_grad() ? &a_cap.impl()->grad_buffer() : nullptr;
            std::vector<S>* gb = b_cap.requires_grad() ? &b_cap.impl()->grad_buffer() : nullptr;
            for (std::int64_t batch = 0; batch < nb; ++batch) {
                const S* G = g.data() + batch * m * n;
                const S* A = ad2.data() + aoffs[static_cast<std::size_t>(batch)];
                const S* B = bd2.data() + boffs[static_cast<std::size_t>(batch)];
                if (ga) {
                    S* dst = ga->data() + aoffs[static_cast<std::size_t>(batch)];
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t kk = 0; kk < k; ++kk) {
                            double acc = 0.0;
                            const S* grow = G + i * n;
                            const S* brow = B + kk * n;
                            for (std::int64_t j = 0; j < n; ++j)
                                acc += static_cast<double>(grow[j]) * static_cast<double>(brow[j]);
                            dst[i * k + kk] += static_cast<S>(acc);
                        }
                }
                if (gb) {
                    S* dst = gb->data() + boffs[static_cast<std::size_t>(batch)];
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t kk = 0; kk < k; ++kk) {
                            S av = A[i * k + kk];
                            const S* grow = G + i * n;
                            S* drow = dst + kk * n;
                            for (std::int64_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                        }
                }
            }
        });
}

// ---- shape ops ----

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(new_shape) +
                         " changes element count");
    TensorT<S> a_cap = a;
    return detail::make_result<S>("reshape", std::move(new_shape), std::vector<S>(a.data()), {a},
                                  [a_cap](TensorImplT<S>* self) {
                                      const auto& g = self->grad;
                                      if (g.empty() || !a_cap.requires_grad()) return;
                                      auto& ga = a_cap.impl()->grad_buffer();
                                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                                  });
}

template <typename S>
TensorT<S> permute(const TensorT<S>& a, const std::vector<std::size_t>& perm) {
    if (perm.size() != a.rank()) throw ShapeError("permute: axis list does not match rank");
    std::vector<bool> seen(perm.size(), false);
    for (auto p : perm) {
        if (p >= perm.size() || seen[p]) throw ShapeError("permute: invalid axis permutation");
        seen[p] = true;
    }
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.shape()[perm[i]];

    std::vector<std::int64_t> in_strides(a.rank(), 1);
    if (a.rank() >= 2)
        for (std::size_t i = a.rank() - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * a.shape()[i + 1];
    std::vector<std::int64_t> gather_strides(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) gather_strides[i] = in_strides[perm[i]];

    std::int64_t n = a.numel();
    std::vector<S> data(static_cast<std::size_t>(n));
    std::vector<std::int64_t> src_index(static_cast<std::size_t>(n));
    const auto& ad = a.data();
    std::vector<std::int64_t> idx(perm.size(), 0);
    std::int64_t off = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        data[static_cast<std::size_t>(flat)] = ad[off];
        src_index[static_cast<std::size_t>(flat)] = off;
        for (std::size_t ax = perm.size(); ax-- > 0;) {
            ++idx[ax];
            off += gather_strides[ax];
            if (idx[ax] < out_shape[ax]) break;
            idx[ax] = 0;
            off -= gather_strides[ax] * out_shape[ax];
        }
    }
    TensorT<S> a_cap = a;
    return detail::make_result<S>(
        "permute", std::move(out_shape), std::move(data), {a},
        [a_cap, src_index](TensorImplT<S>* self) {
            const auto& g = self->grad;
            if (g.empty() || !a_cap.requires_grad()) return;
            auto& ga = a_cap.impl()->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[src_index[i]] += g[i];
        });
}

template <typename S>
TensorT<S> transpose_last(const TensorT<S>& a) {
    if (a.rank() < 2) throw ShapeError("transpose_last: needs rank >= 2");
    std::vector<std::size_t> perm(a.rank());
    for (std::size_t i = 0; i < a.rank(); ++i) perm[i] = i;
    std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
    return permute(a, perm);
}

// Concatenates along axis 0; trailing dims must match.
template <typename S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    if (parts[0].rank() == 0) throw ShapeError("concat_rows: rank-0 input");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() == 0) throw ShapeError("concat_rows: rank-0 input");
        Shape t(p.shape().begin() + 1, p.shape().end());
        if (t != tail) throw ShapeError("concat_rows: trailing dims differ");
        rows += p.shape()[0];
    }
    Shape out_shape = tail;
    out_shape.insert(out_shape.begin(), rows);
    std::vector<S> data;
    data.reserve(static_cast<std::size_t>(shape_numel(out_shape)));
    for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());

    std::vector<TensorT<S>> caps = parts;
    return detail::make_result<S>(
        "concat_rows", std::move(out_shape), std::move(data), parts,
        [caps](TensorImplT<S>* self) {
            const auto& g = self->grad;
            if (g.empty()) return;
            std::size_t off = 0;
            for (const auto& p : caps) {
                std::size_t count = p.data().size();
                if (p.requires_grad()) {
                    auto& gp = p.impl()->grad_buffer();
                    for (std::size_t i = 0; i < count; ++i) gp[i] += g[off + i];
                }
                off += count;
            }
        });
}

// Gathers rows (axis 0) by index; indices may repeat.
template <typename S>
TensorT<S> take_rows(const TensorT<S>& a, const std::vector<std::int64_t>& indices) {
    if (a.rank() == 0) throw ShapeError("take_rows: rank-0 input");
    std::int64_t rows = a.shape()[0];
    std::int64_t row_elems = rows > 0 ? a.numel() / rows : 0;
    for (auto ix : indices)
        if (ix < 0 || ix >= rows)
            throw ShapeError("take_rows: index " + std::to_string(ix) + " out of range [0," +
                             std::to_string(rows) + ")");
    Shape out_shape = a.shape();
    out_shape[0] = static_cast<std::int64_t>(indices.size());
    std::vector<S> data(static_cast<std::size_t>(out_shape[0] * row_elems));
    const auto& ad = a.data();
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy(ad.begin() + indices[r] * row_elems, ad.begin() + (indices[r] + 1) * row_elems,
                  data.begin() + static_cast<std::int64_t>(r) * row_elems);

    TensorT<S> a_cap = a;
    return detail::make_result<S>(
        "take_rows", std::move(out_shape), std::move(data), {a},
        [a_cap, indices, row_elems](TensorImplT<S>* self) {
            const auto& g = self->grad;
            if (g.empty() || !a_cap.requires_grad()) return;
            auto& ga = a_cap.impl()->grad_buffer();
            for (std::size_t r = 0; r < indices.size(); ++r)
                for (std::int64_t j = 0; j < row_elems; ++j)
                    ga[indices[r] * row_elems + j] += g[static_cast<std::int64_t>(r) * row_elems + j];
        });
}

// Rows [lo, hi) along axis 0.
template <typename S>
TensorT<S> slice_rows(const TensorT<S>& a, std::int64_t lo, std::int64_t hi) {
    if (a.rank() == 0) throw ShapeError("slice_rows: rank-0 input");
    std::int64_t rows = a.shape()[0];
    if (lo < 0 || hi > rows || lo > hi) throw ShapeError("slice_rows: bad range");
    std::int64_t row_elems = rows > 0 ? a.numel() / rows : 0;
    Shape out_shape = a.shape();
    out_shape[0] = hi - lo;
    std::vector<S> data(a.data().begin() + lo * row_elems, a.data().begin() + hi * row_elems);
    TensorT<S> a_cap = a;
    return detail::make_result<S>(
        "slice_rows", std::move(out_shape), std::move(data), {a},
        [a_cap, lo, row_elems](TensorImplT<S>* self) {
            const auto& g = self->grad;
            if (g.empty() || !a_cap.requires_grad()) return;
            auto& ga = a_cap.impl()->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[lo * row_elems + i] += g[i];
        });
}

// ---- layer norm ----

// Normalizes the last axis with population statistics (f64 accumulation).
// Pass empty gamma/beta for the non-affine variant.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      double eps = 1e-5) {
    if (x.rank() == 0) throw ShapeError("layer_norm: rank-0 input");
    std::int64_t n = x.shape().back();
    std::int64_t rows = x.numel() / n;
    bool affine = gamma.numel() > 0;
    if (affine && (gamma.numel() != n || beta.numel() != n))
        throw ShapeError("layer_norm: affine params must have " + std::to_string(n) + " elements");

    std::vector<S> data(x.data().size());
    std::vector<double> inv_sigma(static_cast<std::size_t>(rows));
    std::vector<S> xhat(x.data().size());
    const auto& xd = x.data();
    const S* gm = affine ? gamma.data().data() : nullptr;
    const S* bt = affine ? beta.data().data() : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = xd.data() + r * n;
        double mean = 0.0;
        for (std::int64_t j = 0; j < n; ++j) mean += static_cast<double>(row[j]);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            double d = static_cast<double>(row[j]) - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < n; ++j) {
            double h = (static_cast<double>(row[j]) - mean) * is;
            xhat[r * n + j] = static_cast<S>(h);
            data[r * n + j] = affine
                                  ? static_cast<S>(h * static_cast<double>(gm[j]) +
                                                   static_cast<double>(bt[j]))
                                  : static_cast<S>(h);
        }
    }

    TensorT<S> x_cap = x, g_cap = gamma, b_cap = beta;
    std::vector<TensorT<S>> inputs =
        affine ? std::vector<TensorT<S>>{x, gamma, beta} : std::vector<TensorT<S>>{x};
    return detail::make_result<S>(
        "layer_norm", x.shape(), std::move(data), inputs,
        [x_cap, g_cap, b_cap, affine, rows, n, inv_sigma, xhat](TensorImplT<S>* self) {
            const auto& g = self->grad;
            if (g.empty()) return;
            const S* gm2 = affine ? g_cap.data().data() : nullptr;
            std::vector<S>* gx = x_cap.requires_grad() ? &x_cap.impl()->grad_buffer() : nullptr;
            std::vector<S>* gg = affine && g_cap.requires_grad() ? &g_cap.impl()->grad_buffer() : nullptr;
            std::vector<S>* gb = affine && b_cap.requires_grad() ? &b_cap.impl()->grad_buffer() : nullptr;
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* grow = g.data() + r * n;
                const S* hrow = xhat.data() + r * n;
                if (gg)
                    for (std::int64_t j = 0; j < n; ++j)
                        (*gg)[j] += static_cast<S>(static_cast<double>(grow[j]) *
                                                   static_cast<double>(hrow[j]));
                if (gb)
                    for (std::int64_t j = 0; j < n; ++j) (*gb)[j] += grow[j];
                if (gx) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) {
                        double dxh = static_cast<double>(grow[j]) *
                                     (affine ? static_cast<double>(gm2[j]) : 1.0);
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * static_cast<double>(hrow[j]);
                    }
                    mean_dxhat /= static_cast<double>(n);
                    mean_dxhat_xhat /= static_cast<double>(n);
                    double is = inv_sigma[static_cast<std::size_t>(r)];
                    for (std::int64_t j = 0; j < n; ++j) {
                        double dxh = static_cast<double>(grow[j]) *
                                     (affine ? static_cast<double>(gm2[j]) : 1.0);
                        (*gx)[r * n + j] += static_cast<S>(
                            is * (dxh - mean_dxhat - static_cast<double>(hrow[j]) * mean_dxhat_xhat));
                    }
                }
            }
        });
}

template <typename S>
TensorT<S> layer_norm_noaffine(const TensorT<S>& x, double eps = 1e-5) {
    TensorT<S> empty = TensorT<S>::from_data({0}, {});
    return layer_norm(x, empty, empty, eps);
}

// ---- rotary position embedding ----

// Rotates x of shape [heads, N, d] (d even) by absolute position: the pair
// (2m, 2m+1) turns by angle pos * base^(-2m/d).
template <typename S>
TensorT<S> rope_apply(const TensorT<S>& x, const std::vector<std::int64_t>& positions,
                      double theta_base) {
    if (x.rank() != 3)
        throw ShapeError("rope_apply: expected [heads, N, d], got " + shape_str(x.shape()));
    std::int64_t heads = x.shape()[0], N = x.shape()[1], d = x.shape()[2];
    if (d % 2 != 0) throw ShapeError("rope_apply: head dim must be even, got " + std::to_string(d));
    if (static_cast<std::int64_t>(positions.size()) != N)
        throw ShapeError("rope_apply: positions length " + std::to_string(positions.size()) +
                         " vs N=" + std::to_string(N));

    std::int64_t half = d / 2;
    std::vector<double> cs(static_cast<std::size_t>(N * half)), sn(static_cast<std::size_t>(N * half));
    for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t m = 0; m < half; ++m) {
            double theta = static_cast<double>(positions[i]) *
                           std::pow(theta_base, -2.0 * static_cast<double>(m) / static_cast<double>(d));
            cs[i * half + m] = std::cos(theta);
            sn[i * half + m] = std::sin(theta);
        }

    std::vector<S> data(x.data().size());
    const auto& xd = x.data();
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t i = 0; i < N; ++i) {
            const S* row = xd.data() + (h * N + i) * d;
            S* out = data.data() + (h * N + i) * d;
            for (std::int64_t m = 0; m < half; ++m) {
                double c = cs[i * half + m], s = sn[i * half + m];
                double x0 = static_cast<double>(row[2 * m]), x1 = static_cast<double>(row[2 * m + 1]);
                out[2 * m] = static_cast<S>(c * x0 - s * x1);
                out[2 * m + 1] = static_cast<S>(s * x0 + c * x1);
            }
        }

    TensorT<S> x_cap = x;
    return detail::make_result<S>(
        "rope_apply", x.shape(), std::move(data), {x},
        [x_cap, heads, N, d, half, cs, sn](TensorImplT<S>* self) {
            const auto& g = self->grad;
            if (g.empty() || !x_cap.requires_grad()) return;
            auto& gx = x_cap.impl()->grad_buffer();
            for (std::int64_t h = 0; h < heads; ++h)
                for (std::int64_t i = 0; i < N; ++i) {
                    const S* grow = g.data() + (h * N + i) * d;
                    S* dst = gx.data() + (h * N + i) * d;
                    for (std::int64_t m = 0; m < half; ++m) {
                        double c = cs[i * half + m], s = sn[i * half + m];
                        double g0 = static_cast<double>(grow[2 * m]),
                               g1 = static_cast<double>(grow[2 * m + 1]);
                        dst[2 * m] += static_cast<S>(c * g0 + s * g1);
                        dst[2 * m + 1] += static_cast<S>(-s * g0 + c * g1);
                    }
                }
        });
}

// ---- backward ----

// Reverse sweep from a scalar loss. Seeds d(loss)/d(loss) = 1, walks the
// graph in reverse topological order accumulating into .grad additively, and
// frees the graph (closures and parent links) afterwards.
template <typename S>
void backward(const TensorT<S>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));

    using Impl = TensorImplT<S>;
    std::vector<std::shared_ptr<Impl>> order;
    std::unordered_set<Impl*> visited;
    std::vector<std::pair<std::shared_ptr<Impl>, std::size_t>> stack;
    stack.emplace_back(loss.impl(), 0);
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            auto next = node->parents[child++];
            if (visited.insert(next.get()).second) stack.emplace_back(next, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.impl()->grad_buffer()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto& node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(node.get());
    }
    for (auto& node : order) {
        node->backward_fn = nullptr;
        node->parents.clear();
    }
}

}  // namespace sundial
