#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "adapterlab/errors.hpp"
#include "adapterlab/rng.hpp"

namespace adapterlab {

// Dense row-major tensor. Training runs in float; the gradient-check oracle
// instantiates the same code in double (central differences are unreliable
// in 32-bit).
template <typename Real>
struct TensorT {
    std::vector<size_t> shape;
    std::vector<Real> data;

    TensorT() = default;
    explicit TensorT(std::vector<size_t> s) : shape(std::move(s)), data(numel_of(shape), Real(0)) {}
    TensorT(std::vector<size_t> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != data.size()) throw DimensionError("tensor data length does not match shape " + shape_str());
    }

    static size_t numel_of(const std::vector<size_t>& s) {
        size_t n = 1;
        for (size_t d : s) n *= d;
        return s.empty() ? 0 : n;
    }

    size_t numel() const { return data.size(); }
    size_t ndim() const { return shape.size(); }
    // 2-D views: rows = product of leading dims, cols = last dim.
    size_t rows() const { return shape.empty() ? 0 : numel() / shape.back(); }
    size_t cols() const { return shape.empty() ? 0 : shape.back(); }

    Real& at(size_t r, size_t c) { return data[r * cols() + c]; }
    Real at(size_t r, size_t c) const { return data[r * cols() + c]; }

    void fill(Real v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }

    bool all_finite() const {
        for (Real v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    static TensorT zeros(std::vector<size_t> s) { return TensorT(std::move(s)); }

    static TensorT full(std::vector<size_t> s, Real v) {
        TensorT t(std::move(s));
        t.fill(v);
        return t;
    }

    static TensorT randn(std::vector<size_t> s, Rng& rng, Real stddev) {
        TensorT t(std::move(s));
        for (Real& v : t.data) v = static_cast<Real>(rng.normal(0.0, 1.0)) * stddev;
        return t;
    }
};

// Trainable flag realizes the frozen backbone: grad is allocated only for
// trainable parameters, and backward never writes a frozen one.
template <typename Real>
struct ParameterT {
    TensorT<Real> value;
    TensorT<Real> grad;  // meaningful only when trainable; kept shape-synced lazily
    bool has_grad = false;
    bool trainable = false;
    std::string name;

    ParameterT() = default;
    ParameterT(TensorT<Real> v, std::string n, bool train = false)
        : value(std::move(v)), trainable(train), name(std::move(n)) {}

    void set_trainable(bool t) {
        trainable = t;
        if (!t) {
            has_grad = false;
            grad = TensorT<Real>{};
        }
    }

    void ensure_grad() {
        if (!trainable) throw ContractError("grad requested on frozen parameter " + name);
        if (!has_grad || !grad.same_shape(value)) {
            grad = TensorT<Real>::zeros(value.shape);
            has_grad = true;
        }
    }

    void zero_grad() {
        if (has_grad) grad.fill(Real(0));
    }
};

using Tensor = TensorT<float>;
using Parameter = ParameterT<float>;

// ---------------------------------------------------------------------------
// Kernels. Accumulation over the contraction index is sequential ascending,
// per output element, so results are bit-reproducible across runs; the inner
// j loop is a parallel map the compiler may vectorize freely.
// ---------------------------------------------------------------------------

// c[m x n] = a[m x k] * b[k x n], c must be zero- (or bias-) initialized by caller.
template <typename Real>
inline void matmul_accumulate(const Real* a, const Real* b, Real* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            const Real aik = arow[p];
            const Real* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// c[m x n] = a[m x k] * b[n x k]^T  (dot-product form; used for score matrices)
template <typename Real>
inline void matmul_nt_accumulate(const Real* a, const Real* b, Real* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        for (size_t j = 0; j < n; ++j) {
            const Real* brow = b + j * k;
            Real acc = 0;
            for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * g[m x n]   (weight-gradient kernel)
template <typename Real>
inline void matmul_tn_accumulate(const Real* a, const Real* g, Real* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        const Real* grow = g + i * n;
        for (size_t p = 0; p < k; ++p) {
            const Real aik = arow[p];
            Real* crow = c + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += aik * grow[j];
        }
    }
}

template <typename Real>
inline TensorT<Real> transposed(const TensorT<Real>& x) {
    size_t r = x.rows(), c = x.cols();
    TensorT<Real> t({c, r});
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) t.data[j * r + i] = x.data[i * c + j];
    return t;
}

}  // namespace adapterlab
