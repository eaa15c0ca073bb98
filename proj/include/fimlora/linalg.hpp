#ifndef FIMLORA_LINALG_HPP
#define FIMLORA_LINALG_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fimlora/errors.hpp"

namespace fimlora {

/// Dense row-major double matrix. Column vectors are matrices with cols() == 1.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {
        if (rows == 0 || cols == 0) {
            throw ShapeError("Matrix: dimensions must be positive, got " + shape_string(rows, cols));
        }
    }

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (rows == 0 || cols == 0) {
            throw ShapeError("Matrix: dimensions must be positive, got " + shape_string(rows, cols));
        }
        if (data_.size() != rows * cols) {
            throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                             " does not match " + shape_string(rows, cols));
        }
    }

    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        if (rows_ == 0 || cols_ == 0) {
            throw ShapeError("Matrix: empty initializer");
        }
        data_.reserve(rows_ * cols_);
        for (const auto& row : rows) {
            if (row.size() != cols_) {
                throw ShapeError("Matrix: ragged initializer");
            }
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix column(std::span<const double> values) {
        return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
    }

    static Matrix column(std::initializer_list<double> values) {
        return Matrix(values.size(), 1, std::vector<double>(values));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool is_column() const noexcept { return cols_ == 1; }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    double& operator[](std::size_t k) noexcept { return data_[k]; }
    double operator[](std::size_t k) const noexcept { return data_[k]; }

    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }

    [[nodiscard]] std::string shape() const { return shape_string(rows_, cols_); }

    /// Bitwise-exact comparison of shape and every entry.
    friend bool operator==(const Matrix& a, const Matrix& b) noexcept {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

    static std::string shape_string(std::size_t r, std::size_t c) {
        std::ostringstream os;
        os << '(' << r << 'x' << c << ')';
        return os.str();
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
}

inline void require_column(const Matrix& v, const char* op) {
    if (!v.is_column()) {
        throw ShapeError(std::string(op) + ": expected a column vector, got " + v.shape());
    }
}

}  // namespace detail

[[nodiscard]] inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + a.shape() + " x " + b.shape());
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out(i, j) += aik * b(k, j);
            }
        }
    }
    return out;
}

/// aᵀ·b without materializing the transpose.
[[nodiscard]] inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: row counts differ, " + a.shape() + "^T x " + b.shape());
    }
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out(i, j) += aki * b(k, j);
            }
        }
    }
    return out;
}

[[nodiscard]] inline Matrix outer(const Matrix& u, const Matrix& v) {
    detail::require_column(u, "outer");
    detail::require_column(v, "outer");
    Matrix out(u.rows(), v.rows());
    for (std::size_t i = 0; i < u.rows(); ++i) {
        for (std::size_t j = 0; j < v.rows(); ++j) {
            out(i, j) = u[i] * v[j];
        }
    }
    return out;
}

[[nodiscard]] inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out(j, i) = m(i, j);
        }
    }
    return out;
}

[[nodiscard]] inline Matrix scaled(const Matrix& m, double alpha) {
    Matrix out = m;
    for (double& x : out.data()) {
        x *= alpha;
    }
    return out;
}

inline void add_inplace(Matrix& acc, const Matrix& m) {
    detail::require_same_shape(acc, m, "add");
    for (std::size_t k = 0; k < acc.size(); ++k) {
        acc[k] += m[k];
    }
}

/// acc += alpha * m
inline void axpy(Matrix& acc, double alpha, const Matrix& m) {
    detail::require_same_shape(acc, m, "axpy");
    for (std::size_t k = 0; k < acc.size(); ++k) {
        acc[k] += alpha * m[k];
    }
}

[[nodiscard]] inline Matrix operator+(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    add_inplace(out, b);
    return out;
}

[[nodiscard]] inline Matrix operator-(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "subtract");
    Matrix out = a;
    for (std::size_t k = 0; k < out.size(); ++k) {
        out[k] -= b[k];
    }
    return out;
}

[[nodiscard]] inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "hadamard");
    Matrix out = a;
    for (std::size_t k = 0; k < out.size(); ++k) {
        out[k] *= b[k];
    }
    return out;
}

[[nodiscard]] inline double sum(const Matrix& m) noexcept {
    double s = 0.0;
    for (double x : m.data()) {
        s += x;
    }
    return s;
}

[[nodiscard]] inline double frobenius_norm(const Matrix& m) noexcept {
    double s = 0.0;
    for (double x : m.data()) {
        s += x * x;
    }
    return std::sqrt(s);
}

[[nodiscard]] inline bool all_finite(const Matrix& m) noexcept {
    for (double x : m.data()) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

[[nodiscard]] inline bool all_zero(const Matrix& m) noexcept {
    for (double x : m.data()) {
        if (x != 0.0) {
            return false;
        }
    }
    return true;
}

/// Deterministic generator: std::mt19937_64 (bit sequence fixed by the C++
/// standard) with hand-written conversions so that draws do not depend on a
/// particular standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on the open interval (0, 1), 53-bit resolution.
    double uniform_open() {
        return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on (lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_open(); }

    /// Standard normal via Box-Muller; the second variate of each pair is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform_open();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(theta);
        has_spare_ = true;
        return radius * std::cos(theta);
    }

    /// Independent child stream seeded from this one.
    Rng fork() { return Rng(splitmix(next_u64())); }

    /// Stable seed derivation: the same (seed, stream) pair always yields the same child seed.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        return splitmix(seed ^ splitmix(stream + 0x9E3779B97F4A7C15ULL));
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Kaiming-uniform: entries ~ U(-b, b) with b = sqrt(6 / cols) (fan-in = cols).
[[nodiscard]] inline Matrix kaiming_init(std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix m(rows, cols);
    const double bound = std::sqrt(6.0 / static_cast<double>(cols));
    for (double& x : m.data()) {
        x = rng.uniform(-bound, bound);
    }
    return m;
}

[[nodiscard]] inline Matrix gaussian_init(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (double& x : m.data()) {
        x = stddev * rng.normal();
    }
    return m;
}

/// Random (semi-)orthogonal matrix scaled by `gain`: Gaussian draws followed by
/// modified Gram-Schmidt over the shorter dimension, so rows are orthonormal
/// when rows <= cols and columns are orthonormal otherwise.
[[nodiscard]] inline Matrix orthogonal_init(std::size_t rows, std::size_t cols, Rng& rng, double gain = 1.0) {
    const bool by_rows = rows <= cols;
    const std::size_t count = by_rows ? rows : cols;
    const std::size_t length = by_rows ? cols : rows;
    // Draw more vectors than strictly needed so that a (numerically) dependent
    // draw can be skipped rather than producing a zero basis vector.
    std::vector<std::vector<double>> basis;
    basis.reserve(count);
    while (basis.size() < count) {
        std::vector<double> v(length);
        for (double& x : v) {
            x = rng.normal();
        }
        for (const auto& q : basis) {
            double dot = 0.0;
            for (std::size_t k = 0; k < length; ++k) {
                dot += q[k] * v[k];
            }
            for (std::size_t k = 0; k < length; ++k) {
                v[k] -= dot * q[k];
            }
        }
        double norm = 0.0;
        for (double x : v) {
            norm += x * x;
        }
        norm = std::sqrt(norm);
        if (norm < 1e-8) {
            continue;
        }
        for (double& x : v) {
            x /= norm;
        }
        basis.push_back(std::move(v));
    }
    Matrix m(rows, cols);
    for (std::size_t a = 0; a < count; ++a) {
        for (std::size_t k = 0; k < length; ++k) {
            if (by_rows) {
                m(a, k) = gain * basis[a][k];
            } else {
                m(k, a) = gain * basis[a][k];
            }
        }
    }
    return m;
}

}  // namespace fimlora

#endif  // FIMLORA_LINALG_HPP
