#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Dense double-precision matrix primitives, batch statistics, whitening,
// cosine similarity and stable log-softmax. Everything downstream (autodiff,
// losses, evaluation) is built on top of this layer. All functions are pure.

namespace ucr {

// Row-major dense matrix. Rows index the batch, columns the feature dim.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rs) {
        Matrix m;
        m.rows = rs.size();
        m.cols = rs.begin() == rs.end() ? 0 : rs.begin()->size();
        m.data.reserve(m.rows * m.cols);
        for (const auto& r : rs) {
            if (r.size() != m.cols) throw std::invalid_argument("ragged row list");
            m.data.insert(m.data.end(), r.begin(), r.end());
        }
        return m;
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    std::size_t size() const { return rows * cols; }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool operator==(const Matrix& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }
};

inline bool all_finite(const Matrix& m) {
    return std::all_of(m.data.begin(), m.data.end(),
                       [](double v) { return std::isfinite(v); });
}

inline void require_finite(const Matrix& m, const std::string& what) {
    if (!all_finite(m)) throw std::domain_error("non-finite feature: " + what);
}

inline void require_shape(const Matrix& m, std::size_t r, std::size_t c,
                          const std::string& what) {
    if (m.rows != r || m.cols != c)
        throw std::invalid_argument("dimension mismatch: " + what + " is " +
                                    std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                                    ", expected " + std::to_string(r) + "x" +
                                    std::to_string(c));
}

// ---------------------------------------------------------------------------
// elementwise / BLAS-ish kernels

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dims differ");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

// a @ b^T without materializing the transpose
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: inner dims differ");
    Matrix out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.rows; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(j, k);
            out(i, j) = s;
        }
    return out;
}

// a^T @ b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) throw std::invalid_argument("matmul_tn: inner dims differ");
    Matrix out(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k)
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aki * b(k, j);
        }
    return out;
}

template <class F>
inline Matrix map(const Matrix& a, F f) {
    Matrix out = a;
    for (double& v : out.data) v = f(v);
    return out;
}

template <class F>
inline Matrix zip(const Matrix& a, const Matrix& b, F f) {
    if (!a.same_shape(b)) throw std::invalid_argument("elementwise op: shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) { return zip(a, b, std::plus<>{}); }
inline Matrix sub(const Matrix& a, const Matrix& b) { return zip(a, b, std::minus<>{}); }
inline Matrix hadamard(const Matrix& a, const Matrix& b) { return zip(a, b, std::multiplies<>{}); }
inline Matrix scale(const Matrix& a, double s) { return map(a, [s](double v) { return v * s; }); }

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// ---------------------------------------------------------------------------
// batch statistics and whitening

// Collapsed dimensions get their std floored here so downstream divisions
// stay bounded.
inline constexpr double kSigmaFloor = 1e-6;

struct BatchStats {
    std::vector<double> mu;     // per-dimension mean
    std::vector<double> sigma;  // per-dimension population std, floored
    double sigma_scalar = 0.0;  // mean over dimensions of sigma
};

// Population (divide-by-B) statistics per column. Requires B >= 2.
inline BatchStats compute_stats(const Matrix& batch) {
    if (batch.rows < 2) throw std::invalid_argument("degenerate batch: need B >= 2");
    require_finite(batch, "compute_stats input");
    const std::size_t b = batch.rows, d = batch.cols;
    BatchStats st;
    st.mu.assign(d, 0.0);
    st.sigma.assign(d, 0.0);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < d; ++j) st.mu[j] += batch(i, j);
    for (double& m : st.mu) m /= static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double c = batch(i, j) - st.mu[j];
            st.sigma[j] += c * c;
        }
    double acc = 0.0;
    for (double& s : st.sigma) {
        // max(std, floor) computed as sqrt(max(var, floor^2)); identical value,
        // and the autodiff path uses the same formula.
        s = std::sqrt(std::max(s / static_cast<double>(b), kSigmaFloor * kSigmaFloor));
        acc += s;
    }
    st.sigma_scalar = acc / static_cast<double>(d);
    return st;
}

inline Matrix whiten(const Matrix& batch, const BatchStats& st) {
    if (st.mu.size() != batch.cols)
        throw std::invalid_argument("whiten: stats dimension mismatch");
    Matrix out = batch;
    for (std::size_t i = 0; i < batch.rows; ++i)
        for (std::size_t j = 0; j < batch.cols; ++j)
            out(i, j) = (batch(i, j) - st.mu[j]) / st.sigma[j];
    return out;
}

// ---------------------------------------------------------------------------
// similarity and stable softmax

inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: length mismatch");
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw std::domain_error("zero-norm embedding");
    return dot(a, b) / (na * nb);
}

inline double log_sum_exp(std::span<const double> scores) {
    const double mx = *std::max_element(scores.begin(), scores.end());
    double s = 0.0;
    for (double v : scores) s += std::exp(v - mx);
    return mx + std::log(s);
}

inline std::vector<double> log_softmax_row(std::span<const double> scores) {
    if (scores.empty()) throw std::invalid_argument("log_softmax_row: empty input");
    for (double v : scores)
        if (!std::isfinite(v)) throw std::domain_error("non-finite feature: log_softmax input");
    const double lse = log_sum_exp(scores);
    std::vector<double> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] - lse;
    return out;
}

inline std::vector<double> log_softmax_row(const std::vector<double>& scores) {
    return log_softmax_row(std::span<const double>(scores));
}

}  // namespace ucr
