#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cpdae/error.hpp"
#include "cpdae/rng.hpp"

// Dense row-major tensors with a reverse-mode tape. All reductions run in a
// fixed serial order; the only parallelism is row partitioning inside matmul
// kernels, where every output element is still accumulated by exactly one
// thread in ascending-k order, so results are bit-identical for any thread
// count.

namespace cpdae {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

// When on, every op output is scanned for NaN/Inf and reported with the op
// name and flat index.
inline std::atomic<bool>& checked_mode_flag() {
    static std::atomic<bool> f{false};
    return f;
}
inline void set_checked_mode(bool on) { checked_mode_flag().store(on); }
inline bool checked_mode() { return checked_mode_flag().load(std::memory_order_relaxed); }

inline std::atomic<int>& num_threads_flag() {
    static std::atomic<int> n{1};
    return n;
}
inline void set_num_threads(int n) { num_threads_flag().store(n < 1 ? 1 : n); }
inline int num_threads() { return num_threads_flag().load(std::memory_order_relaxed); }

// Splits [0, rows) into contiguous chunks, one per worker. Each output row is
// owned by a single thread.
template <typename Fn>
void parallel_rows(std::size_t rows, std::size_t flops, Fn&& fn) {
    int nt = num_threads();
    if (nt <= 1 || rows < 2 || flops < (1u << 19)) {
        fn(std::size_t{0}, rows);
        return;
    }
    std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(nt), rows);
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    std::size_t chunk = (rows + workers - 1) / workers;
    for (std::size_t w = 1; w < workers; ++w) {
        std::size_t lo = w * chunk;
        std::size_t hi = std::min(rows, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    fn(std::size_t{0}, std::min(rows, chunk));
    for (auto& t : pool) t.join();
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until needed; same length as values once allocated
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::string name;
};

template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make(std::move(shape), {}, requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.impl_->values) v = value;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->values = std::move(values);
        t.impl_->requires_grad = requires_grad;
        t.impl_->id = next_id();
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.impl_->values) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->values.size(); }
    std::size_t rows() const { return impl_->shape.empty() ? 1 : impl_->shape[0]; }
    std::size_t cols() const {
        return impl_->shape.size() < 2 ? (impl_->shape.empty() ? 1 : impl_->shape[0])
                                       : impl_->shape[1];
    }

    T* data() { return impl_->values.data(); }
    const T* data() const { return impl_->values.data(); }
    std::vector<T>& values() { return impl_->values; }
    const std::vector<T>& values() const { return impl_->values; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) {
        impl_->requires_grad = rg;
        if (rg) ensure_grad();
    }

    std::uint64_t id() const { return impl_->id; }
    const std::string& name() const { return impl_->name; }
    Tensor& set_name(std::string n) {
        impl_->name = std::move(n);
        return *this;
    }

    T item() const {
        if (numel() != 1)
            throw ContractError("item: tensor " + shape_str(shape()) + " is not scalar");
        return impl_->values[0];
    }

    void ensure_grad() const {
        if (impl_->grad.size() != impl_->values.size())
            impl_->grad.assign(impl_->values.size(), T(0));
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<T>& grad() const { return impl_->grad; }
    void zero_grad() {
        for (auto& g : impl_->grad) g = T(0);
    }

    void check_finite(const std::string& what) const {
        const auto& v = impl_->values;
        for (std::size_t i = 0; i < v.size(); ++i)
            if (!std::isfinite(v[i]))
                throw NumericalError(what + ": non-finite value at index " + std::to_string(i) +
                                     (impl_->name.empty() ? "" : " in tensor " + impl_->name));
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

  private:
    static Tensor make(Shape shape, std::vector<T> values, bool requires_grad) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->values.assign(shape_numel(shape), T(0));
        if (!values.empty()) t.impl_->values = std::move(values);
        t.impl_->shape = std::move(shape);
        t.impl_->requires_grad = requires_grad;
        t.impl_->id = next_id();
        return t;
    }

    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    std::shared_ptr<TensorImpl<T>> impl_;
};

// Recorded reverse-mode tape. Operations append in forward order (so inputs
// always precede their consumers) and backward() replays each entry exactly
// once in reverse. Gradients accumulate additively, which handles nodes used
// more than once.
template <typename T>
class Tape {
  public:
    struct Entry {
        const char* op;
        std::vector<std::uint64_t> inputs;
        std::uint64_t output;
        std::function<void()> backward;
    };

    // Records an op if any input requires grad; fixes the output's
    // requires_grad flag either way.
    void record(const char* op, std::initializer_list<Tensor<T>> inputs, Tensor<T>& out,
                std::function<void()> backward) {
        record(op, std::vector<Tensor<T>>(inputs), out, std::move(backward));
    }

    void record(const char* op, const std::vector<Tensor<T>>& inputs, Tensor<T>& out,
                std::function<void()> backward) {
        bool rg = false;
        for (const auto& in : inputs) rg = rg || in.requires_grad();
        out.impl()->requires_grad = rg;
        if (checked_mode()) out.check_finite(op);
        if (!rg) return;
        out.ensure_grad();
        for (const auto& in : inputs)
            if (in.requires_grad()) in.ensure_grad();
        Entry e;
        e.op = op;
        for (const auto& in : inputs) e.inputs.push_back(in.id());
        e.output = out.id();
        e.backward = std::move(backward);
        entries_.push_back(std::move(e));
    }

    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (entries_.empty()) throw ContractError("backward: tape is empty");
        loss.ensure_grad();
        loss.grad()[0] = T(1);
        last_visit_count_ = 0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            it->backward();
            ++last_visit_count_;
        }
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t last_visit_count() const { return last_visit_count_; }
    void clear() { entries_.clear(); }

  private:
    std::vector<Entry> entries_;
    std::size_t last_visit_count_ = 0;
};

namespace detail {

// C[i,:] = sum_k A[i,k] * B[k,:]; ascending k, unit-stride inner loop.
template <typename T>
void matmul_nn_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                      std::size_t i_lo, std::size_t i_hi) {
    for (std::size_t i = i_lo; i < i_hi; ++i) {
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            const T* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C[i,j] += sum_t A[i,t] * B[j,t] (i.e. A * B^T). Serial four-way unrolled dot
// with a fixed combine order.
template <typename T>
void matmul_nt_acc_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t t,
                          std::size_t n, std::size_t i_lo, std::size_t i_hi) {
    (void)m;
    for (std::size_t i = i_lo; i < i_hi; ++i) {
        const T* arow = a + i * t;
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * t;
            T s0 = T(0), s1 = T(0), s2 = T(0), s3 = T(0);
            std::size_t kk = 0;
            for (; kk + 4 <= t; kk += 4) {
                s0 += arow[kk + 0] * brow[kk + 0];
                s1 += arow[kk + 1] * brow[kk + 1];
                s2 += arow[kk + 2] * brow[kk + 2];
                s3 += arow[kk + 3] * brow[kk + 3];
            }
            T s = (s0 + s1) + (s2 + s3);
            for (; kk < t; ++kk) s += arow[kk] * brow[kk];
            crow[j] += s;
        }
    }
}

// C[k,:] += sum_i A[i,k] * B[i,:] (i.e. A^T * B). k-partitioned so each output
// row is owned by one thread; i ascends serially.
template <typename T>
void matmul_tn_acc_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                          std::size_t n, std::size_t k_lo, std::size_t k_hi) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (std::size_t kk = k_lo; kk < k_hi; ++kk) {
            const T aik = arow[kk];
            if (aik == T(0)) continue;
            T* crow = c + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core ops. Every op takes the tape as first argument; pass nullptr for pure
// inference.
// ---------------------------------------------------------------------------

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
    if (t.shape().size() != 2)
        throw DimensionError(std::string(op) + ": expected 2-D tensor, got " +
                             shape_str(t.shape()));
}

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    parallel_rows(m, m * k * n, [&](std::size_t lo, std::size_t hi) {
        detail::matmul_nn_kernel(a.data(), b.data(), out.data(), m, k, n, lo, hi);
    });
    if (!tape) return out;
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape->record("matmul", {a, b}, out, [ai, bi, oi, m, k, n] {
        const T* g = oi->grad.data();
        if (ai->requires_grad) {
            T* da = ai->grad.data();
            parallel_rows(m, m * k * n, [&](std::size_t lo, std::size_t hi) {
                detail::matmul_nt_acc_kernel(g, bi->values.data(), da, m, n, k, lo, hi);
            });
        }
        if (bi->requires_grad) {
            T* db = bi->grad.data();
            parallel_rows(k, m * k * n, [&](std::size_t lo, std::size_t hi) {
                detail::matmul_tn_acc_kernel(ai->values.data(), g, db, m, k, n, lo, hi);
            });
        }
    });
    return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>* tape, const Tensor<T>& x) {
    require_2d(x, "transpose");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor<T> out = Tensor<T>::zeros({c, r});
    const T* xv = x.data();
    T* ov = out.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ov[j * r + i] = xv[i * c + j];
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("transpose", {x}, out, [xi, oi, r, c] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        T* dx = xi->grad.data();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += g[j * r + i];
    });
    return out;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes disagree: " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (!tape) return out;
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape->record("add", {a, b}, out, [ai, bi, oi, n] {
        const T* g = oi->grad.data();
        if (ai->requires_grad)
            for (std::size_t i = 0; i < n; ++i) ai->grad[i] += g[i];
        if (bi->requires_grad)
            for (std::size_t i = 0; i < n; ++i) bi->grad[i] += g[i];
    });
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (!tape) return out;
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape->record("mul", {a, b}, out, [ai, bi, oi, n] {
        const T* g = oi->grad.data();
        if (ai->requires_grad)
            for (std::size_t i = 0; i < n; ++i) ai->grad[i] += g[i] * bi->values[i];
        if (bi->requires_grad)
            for (std::size_t i = 0; i < n; ++i) bi->grad[i] += g[i] * ai->values[i];
    });
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T c) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("scale", {x}, out, [xi, oi, c, n] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        for (std::size_t i = 0; i < n; ++i) xi->grad[i] += g[i] * c;
    });
    return out;
}

template <typename T>
Tensor<T> add_scalar(Tape<T>* tape, const Tensor<T>& x, T c) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] + c;
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("add_scalar", {x}, out, [xi, oi, n] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        for (std::size_t i = 0; i < n; ++i) xi->grad[i] += g[i];
    });
    return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const T v = x.data()[i];
        out.data()[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                                  : std::exp(v) / (T(1) + std::exp(v));
    }
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("sigmoid", {x}, out, [xi, oi, n] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        const T* y = oi->values.data();
        for (std::size_t i = 0; i < n; ++i) xi->grad[i] += g[i] * y[i] * (T(1) - y[i]);
    });
    return out;
}

// Gelu, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x) {
    constexpr T kAlpha = T(0.7978845608028653558798921198687);  // sqrt(2/pi)
    constexpr T kCubic = T(0.044715);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const T v = x.data()[i];
        const T u = kAlpha * (v + kCubic * v * v * v);
        out.data()[i] = T(0.5) * v * (T(1) + std::tanh(u));
    }
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("gelu", {x}, out, [xi, oi, n] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        for (std::size_t i = 0; i < n; ++i) {
            const T v = xi->values[i];
            const T u = kAlpha * (v + kCubic * v * v * v);
            const T t = std::tanh(u);
            const T du = kAlpha * (T(1) + T(3) * kCubic * v * v);
            const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
            xi->grad[i] += g[i] * d;
        }
    });
    return out;
}

// Per-row standardization over the last (= column) dimension, then affine.
template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
    require_2d(x, "layer_norm");
    const std::size_t r = x.rows(), h = x.cols();
    if (gain.numel() != h || bias.numel() != h)
        throw DimensionError("layer_norm: gain/bias length " + std::to_string(gain.numel()) +
                             "/" + std::to_string(bias.numel()) + " does not match width " +
                             std::to_string(h));
    if (eps <= T(0)) throw ContractError("layer_norm: eps must be positive");
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(r * h);
    auto inv_std = std::make_shared<std::vector<T>>(r);
    for (std::size_t i = 0; i < r; ++i) {
        const T* row = x.data() + i * h;
        T mean = T(0);
        for (std::size_t j = 0; j < h; ++j) mean += row[j];
        mean /= static_cast<T>(h);
        T var = T(0);
        for (std::size_t j = 0; j < h; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(h);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        T* orow = out.data() + i * h;
        for (std::size_t j = 0; j < h; ++j) {
            const T xh = (row[j] - mean) * is;
            (*xhat)[i * h + j] = xh;
            orow[j] = xh * gain.data()[j] + bias.data()[j];
        }
    }
    if (!tape) return out;
    auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
    tape->record("layer_norm", {x, gain, bias}, out, [xi, gi, bi, oi, xhat, inv_std, r, h] {
        const T* g = oi->grad.data();
        for (std::size_t i = 0; i < r; ++i) {
            const T* grow = g + i * h;
            const T* xh = xhat->data() + i * h;
            if (gi->requires_grad)
                for (std::size_t j = 0; j < h; ++j) gi->grad[j] += grow[j] * xh[j];
            if (bi->requires_grad)
                for (std::size_t j = 0; j < h; ++j) bi->grad[j] += grow[j];
            if (xi->requires_grad) {
                T sum_dy = T(0), sum_dyxh = T(0);
                for (std::size_t j = 0; j < h; ++j) {
                    const T dy = grow[j] * gi->values[j];
                    sum_dy += dy;
                    sum_dyxh += dy * xh[j];
                }
                const T inv_h = T(1) / static_cast<T>(h);
                const T is = (*inv_std)[i];
                for (std::size_t j = 0; j < h; ++j) {
                    const T dy = grow[j] * gi->values[j];
                    xi->grad[i * h + j] += is * (dy - inv_h * sum_dy - xh[j] * inv_h * sum_dyxh);
                }
            }
        }
    });
    return out;
}

// Softmax over the first `valid` columns of each row; columns beyond `valid`
// get probability zero. Used for attention with [PAD] keys masked out.
template <typename T>
Tensor<T> softmax_rows(Tape<T>* tape, const Tensor<T>& x, std::size_t valid) {
    require_2d(x, "softmax_rows");
    const std::size_t r = x.rows(), c = x.cols();
    if (valid == 0 || valid > c)
        throw ContractError("softmax_rows: valid count " + std::to_string(valid) +
                            " outside [1, " + std::to_string(c) + "]");
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const T* row = x.data() + i * c;
        T* orow = out.data() + i * c;
        T mx = row[0];
        for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::size_t j = 0; j < valid; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        const T inv = T(1) / denom;
        for (std::size_t j = 0; j < valid; ++j) orow[j] *= inv;
    }
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("softmax_rows", {x}, out, [xi, oi, r, c, valid] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        const T* p = oi->values.data();
        for (std::size_t i = 0; i < r; ++i) {
            const T* grow = g + i * c;
            const T* prow = p + i * c;
            T dot = T(0);
            for (std::size_t j = 0; j < valid; ++j) dot += grow[j] * prow[j];
            for (std::size_t j = 0; j < valid; ++j)
                xi->grad[i * c + j] += prow[j] * (grow[j] - dot);
        }
    });
    return out;
}

// Row gather: out[i,:] = table[ids[i],:]. Backward scatter-adds in ascending
// row order.
template <typename T>
Tensor<T> gather_rows(Tape<T>* tape, const Tensor<T>& table, const std::vector<int>& ids) {
    require_2d(table, "gather_rows");
    const std::size_t r = table.rows(), w = table.cols();
    Tensor<T> out = Tensor<T>::zeros({ids.size(), w});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= r)
            throw ContractError("gather_rows: id " + std::to_string(ids[i]) +
                                " out of range [0, " + std::to_string(r) + ") at position " +
                                std::to_string(i));
        const T* src = table.data() + static_cast<std::size_t>(ids[i]) * w;
        T* dst = out.data() + i * w;
        for (std::size_t j = 0; j < w; ++j) dst[j] = src[j];
    }
    if (!tape) return out;
    auto ti = table.impl(), oi = out.impl();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    tape->record("gather_rows", {table}, out, [ti, oi, ids_copy, w] {
        if (!ti->requires_grad) return;
        const T* g = oi->grad.data();
        for (std::size_t i = 0; i < ids_copy->size(); ++i) {
            T* dst = ti->grad.data() + static_cast<std::size_t>((*ids_copy)[i]) * w;
            const T* src = g + i * w;
            for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
    return out;
}

// Submatrix copy: rows [r0, r0+nr), cols [c0, c0+nc).
template <typename T>
Tensor<T> block(Tape<T>* tape, const Tensor<T>& x, std::size_t r0, std::size_t nr,
                std::size_t c0, std::size_t nc) {
    require_2d(x, "block");
    const std::size_t r = x.rows(), c = x.cols();
    if (r0 + nr > r || c0 + nc > c)
        throw DimensionError("block: region [" + std::to_string(r0) + "+" + std::to_string(nr) +
                             ", " + std::to_string(c0) + "+" + std::to_string(nc) +
                             ") exceeds " + shape_str(x.shape()));
    Tensor<T> out = Tensor<T>::zeros({nr, nc});
    for (std::size_t i = 0; i < nr; ++i) {
        const T* src = x.data() + (r0 + i) * c + c0;
        T* dst = out.data() + i * nc;
        for (std::size_t j = 0; j < nc; ++j) dst[j] = src[j];
    }
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("block", {x}, out, [xi, oi, r0, nr, c0, nc, c] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        for (std::size_t i = 0; i < nr; ++i) {
            T* dst = xi->grad.data() + (r0 + i) * c + c0;
            const T* src = g + i * nc;
            for (std::size_t j = 0; j < nc; ++j) dst[j] += src[j];
        }
    });
    return out;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p.rows() != r) throw DimensionError("concat_cols: row counts disagree");
        total += p.cols();
    }
    Tensor<T> out = Tensor<T>::zeros({r, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t c = p.cols();
        for (std::size_t i = 0; i < r; ++i) {
            const T* src = p.data() + i * c;
            T* dst = out.data() + i * total + off;
            for (std::size_t j = 0; j < c; ++j) dst[j] = src[j];
        }
        off += c;
    }
    if (!tape) return out;
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    auto oi = out.impl();
    tape->record("concat_cols", parts, out, [impls, oi, r, total] {
        const T* g = oi->grad.data();
        std::size_t off = 0;
        for (auto& pi : impls) {
            const std::size_t c = pi->shape[1];
            if (pi->requires_grad) {
                for (std::size_t i = 0; i < r; ++i) {
                    T* dst = pi->grad.data() + i * c;
                    const T* src = g + i * total + off;
                    for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                }
            }
            off += c;
        }
    });
    return out;
}

template <typename T>
Tensor<T> concat_rows(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_rows");
        if (p.cols() != c) throw DimensionError("concat_rows: column counts disagree");
        total += p.rows();
    }
    Tensor<T> out = Tensor<T>::zeros({total, c});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + off * c);
        off += p.rows();
    }
    if (!tape) return out;
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    auto oi = out.impl();
    tape->record("concat_rows", parts, out, [impls, oi, c] {
        const T* g = oi->grad.data();
        std::size_t off = 0;
        for (auto& pi : impls) {
            const std::size_t nr = pi->shape[0];
            if (pi->requires_grad) {
                for (std::size_t i = 0; i < nr * c; ++i) pi->grad[i] += g[off * c + i];
            }
            off += nr;
        }
    });
    return out;
}

// Broadcast bias add: out[i,j] = x[i,j] + v[j].
template <typename T>
Tensor<T> add_rowvec(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& v) {
    require_2d(x, "add_rowvec");
    const std::size_t r = x.rows(), c = x.cols();
    if (v.numel() != c)
        throw DimensionError("add_rowvec: vector length " + std::to_string(v.numel()) +
                             " does not match width " + std::to_string(c));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] + v.data()[j];
    if (!tape) return out;
    auto xi = x.impl(), vi = v.impl(), oi = out.impl();
    tape->record("add_rowvec", {x, v}, out, [xi, vi, oi, r, c] {
        const T* g = oi->grad.data();
        if (xi->requires_grad)
            for (std::size_t i = 0; i < r * c; ++i) xi->grad[i] += g[i];
        if (vi->requires_grad)
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) vi->grad[j] += g[i * c + j];
    });
    return out;
}

// Per-row division by a positive scalar vector s: out[i,j] = x[i,j] / s[i].
template <typename T>
Tensor<T> div_rows(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& s) {
    require_2d(x, "div_rows");
    const std::size_t r = x.rows(), c = x.cols();
    if (s.numel() != r)
        throw DimensionError("div_rows: divisor length " + std::to_string(s.numel()) +
                             " does not match rows " + std::to_string(r));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const T inv = T(1) / s.data()[i];
        for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] * inv;
    }
    if (!tape) return out;
    auto xi = x.impl(), si = s.impl(), oi = out.impl();
    tape->record("div_rows", {x, s}, out, [xi, si, oi, r, c] {
        const T* g = oi->grad.data();
        const T* y = oi->values.data();
        for (std::size_t i = 0; i < r; ++i) {
            const T inv = T(1) / si->values[i];
            if (xi->requires_grad)
                for (std::size_t j = 0; j < c; ++j) xi->grad[i * c + j] += g[i * c + j] * inv;
            if (si->requires_grad) {
                T acc = T(0);
                for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * y[i * c + j];
                si->grad[i] -= acc * inv;
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> row_sum(Tape<T>* tape, const Tensor<T>& x) {
    require_2d(x, "row_sum");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor<T> out = Tensor<T>::zeros({r});
    for (std::size_t i = 0; i < r; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < c; ++j) acc += x.data()[i * c + j];
        out.data()[i] = acc;
    }
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("row_sum", {x}, out, [xi, oi, r, c] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) xi->grad[i * c + j] += g[i];
    });
    return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros({1});
    T acc = T(0);
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) acc += x.data()[i];
    out.data()[0] = acc;
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("sum_all", {x}, out, [xi, oi, n] {
        if (!xi->requires_grad) return;
        const T g = oi->grad[0];
        for (std::size_t i = 0; i < n; ++i) xi->grad[i] += g;
    });
    return out;
}

template <typename T>
Tensor<T> mean_all(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> s = sum_all(tape, x);
    return scale(tape, s, T(1) / static_cast<T>(x.numel()));
}

// Per-row L2 normalization. Rows must have nonzero norm.
template <typename T>
Tensor<T> l2_normalize_rows(Tape<T>* tape, const Tensor<T>& x) {
    require_2d(x, "l2_normalize_rows");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto norms = std::make_shared<std::vector<T>>(r);
    for (std::size_t i = 0; i < r; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < c; ++j) acc += x.data()[i * c + j] * x.data()[i * c + j];
        const T nrm = std::sqrt(acc);
        if (nrm == T(0))
            throw ContractError("l2_normalize_rows: zero-norm vector at row " + std::to_string(i));
        (*norms)[i] = nrm;
        const T inv = T(1) / nrm;
        for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] * inv;
    }
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("l2_normalize_rows", {x}, out, [xi, oi, norms, r, c] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        const T* y = oi->values.data();
        for (std::size_t i = 0; i < r; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
            const T inv = T(1) / (*norms)[i];
            for (std::size_t j = 0; j < c; ++j)
                xi->grad[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) * inv;
        }
    });
    return out;
}

// Copy with the main diagonal replaced by a constant; gradient does not flow
// through the replaced entries. Used to exclude self-similarity logits.
template <typename T>
Tensor<T> fill_diagonal(Tape<T>* tape, const Tensor<T>& x, T value) {
    require_2d(x, "fill_diagonal");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::copy(x.data(), x.data() + x.numel(), out.data());
    for (std::size_t i = 0; i < std::min(r, c); ++i) out.data()[i * c + i] = value;
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("fill_diagonal", {x}, out, [xi, oi, r, c] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                if (i != j) xi->grad[i * c + j] += g[i * c + j];
    });
    return out;
}

// Inverted dropout; mask drawn from the given stream, scaled by 1/(1-rate).
template <typename T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
    const std::size_t n = x.numel();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto mask = std::make_shared<std::vector<T>>(n);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < n; ++i) {
        const bool keep = rng.uniform_real() >= rate;
        (*mask)[i] = keep ? keep_scale : T(0);
        out.data()[i] = x.data()[i] * (*mask)[i];
    }
    if (!tape) return out;
    auto xi = x.impl(), oi = out.impl();
    tape->record("dropout", {x}, out, [xi, oi, mask, n] {
        if (!xi->requires_grad) return;
        const T* g = oi->grad.data();
        for (std::size_t i = 0; i < n; ++i) xi->grad[i] += g[i] * (*mask)[i];
    });
    return out;
}

// Mean softmax cross-entropy over the given rows (all rows when `anchors` is
// empty). Labels index columns.
template <typename T>
Tensor<T> cross_entropy_rows(Tape<T>* tape, const Tensor<T>& logits, const std::vector<int>& labels,
                             const std::vector<int>& anchors = {}) {
    require_2d(logits, "cross_entropy_rows");
    const std::size_t r = logits.rows(), c = logits.cols();
    if (labels.size() != r)
        throw DimensionError("cross_entropy_rows: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(r) + " rows");
    std::vector<int> rows_used = anchors;
    if (rows_used.empty()) {
        rows_used.resize(r);
        for (std::size_t i = 0; i < r; ++i) rows_used[i] = static_cast<int>(i);
    }
    for (int i : rows_used)
        if (i < 0 || static_cast<std::size_t>(i) >= r)
            throw ContractError("cross_entropy_rows: anchor row " + std::to_string(i) +
                                " out of range");
    for (int i : rows_used)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
            throw ContractError("cross_entropy_rows: label " + std::to_string(labels[i]) +
                                " out of range at row " + std::to_string(i));
    Tensor<T> out = Tensor<T>::zeros({1});
    T acc = T(0);
    for (int i : rows_used) {
        const T* row = logits.data() + static_cast<std::size_t>(i) * c;
        T mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        acc += (std::log(denom) + mx) - row[labels[i]];
    }
    const T inv_n = T(1) / static_cast<T>(rows_used.size());
    out.data()[0] = acc * inv_n;
    if (!tape) return out;
    auto li = logits.impl(), oi = out.impl();
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    auto rows_copy = std::make_shared<std::vector<int>>(std::move(rows_used));
    tape->record("cross_entropy_rows", {logits}, out, [li, oi, labels_copy, rows_copy, c, inv_n] {
        if (!li->requires_grad) return;
        const T g = oi->grad[0] * inv_n;
        for (int i : *rows_copy) {
            const T* row = li->values.data() + static_cast<std::size_t>(i) * c;
            T* drow = li->grad.data() + static_cast<std::size_t>(i) * c;
            T mx = row[0];
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            T denom = T(0);
            for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
            const T inv_denom = T(1) / denom;
            for (std::size_t j = 0; j < c; ++j)
                drow[j] += g * std::exp(row[j] - mx) * inv_denom;
            drow[(*labels_copy)[i]] -= g;
        }
    });
    return out;
}

}  // namespace cpdae
