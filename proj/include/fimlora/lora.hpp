#ifndef FIMLORA_LORA_HPP
#define FIMLORA_LORA_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

#include "fimlora/errors.hpp"
#include "fimlora/linalg.hpp"

namespace fimlora {

/// Low-rank correction s * B * A attached to one frozen linear map, with
/// scaling s = alpha / r. A is r x d_in, B is d_out x r.
class LoraAdapter {
public:
    LoraAdapter(std::string module_id, Matrix a, Matrix b, double alpha)
        : LoraAdapter(std::move(module_id), std::move(a), std::move(b), alpha, 0.0) {}

    /// Explicit scaling, used by resize to carry base_alpha / base_rank over
    /// bitwise; for some (ratio, rank) pairs no double alpha has alpha / rank
    /// equal to the ratio.
    LoraAdapter(std::string module_id, Matrix a, Matrix b, double alpha, double scaling)
        : module_id_(std::move(module_id)), a_(std::move(a)), b_(std::move(b)), alpha_(alpha), scaling_(scaling) {
        if (a_.rows() != b_.cols()) {
            throw ShapeError("LoraAdapter '" + module_id_ + "': A " + a_.shape() + " and B " + b_.shape() +
                             " disagree on rank");
        }
        if (!(alpha_ > 0.0) || !std::isfinite(alpha_)) {
            throw ConfigError("LoraAdapter '" + module_id_ + "': alpha must be positive and finite");
        }
        if (a_.rows() == 0) {
            throw ConfigError("LoraAdapter '" + module_id_ + "': rank must be >= 1");
        }
        if (scaling_ == 0.0) {
            scaling_ = alpha_ / static_cast<double>(a_.rows());
        }
        if (!(scaling_ > 0.0) || !std::isfinite(scaling_)) {
            throw ConfigError("LoraAdapter '" + module_id_ + "': scaling must be positive and finite");
        }
    }

    /// Fresh adapter: A Kaiming-uniform (fan-in d_in), B zero.
    static LoraAdapter create(std::string module_id, std::size_t d_in, std::size_t d_out, std::size_t rank,
                              double alpha, Rng& rng) {
        if (rank == 0) {
            throw ConfigError("LoraAdapter: rank must be >= 1");
        }
        Matrix a = kaiming_init(rank, d_in, rng);
        return LoraAdapter(std::move(module_id), std::move(a), Matrix(d_out, rank), alpha);
    }

    [[nodiscard]] const std::string& module_id() const noexcept { return module_id_; }
    [[nodiscard]] const Matrix& a() const noexcept { return a_; }
    [[nodiscard]] const Matrix& b() const noexcept { return b_; }
    [[nodiscard]] Matrix& a() noexcept { return a_; }
    [[nodiscard]] Matrix& b() noexcept { return b_; }
    [[nodiscard]] double alpha() const noexcept { return alpha_; }
    [[nodiscard]] std::size_t rank() const noexcept { return a_.rows(); }
    [[nodiscard]] std::size_t d_in() const noexcept { return a_.cols(); }
    [[nodiscard]] std::size_t d_out() const noexcept { return b_.rows(); }
    [[nodiscard]] double scaling() const noexcept { return scaling_; }

    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;

private:
    std::string module_id_;
    Matrix a_;
    Matrix b_;
    double alpha_;
    double scaling_;
};

struct AdapterGradients {
    Matrix grad_a;  // r x d_in
    Matrix grad_b;  // d_out x r
};

struct DeltaOutput {
    Matrix delta;  // (alpha/r) B A x
    Matrix ax;     // A x, kept for the B gradient
};

[[nodiscard]] inline DeltaOutput forward_delta(const LoraAdapter& adapter, const Matrix& x) {
    if (!x.is_column() || x.rows() != adapter.d_in()) {
        throw ShapeError("forward_delta '" + adapter.module_id() + "': expected input (" +
                         std::to_string(adapter.d_in()) + "x1), got " + x.shape());
    }
    Matrix ax = matmul(adapter.a(), x);
    Matrix delta = scaled(matmul(adapter.b(), ax), adapter.scaling());
    return {std::move(delta), std::move(ax)};
}

/// Gradients of a loss at A and B given dL/dh for h = W x + (alpha/r) B A x:
///   dL/dA = (alpha/r) Bᵀ upstream xᵀ,   dL/dB = (alpha/r) upstream (A x)ᵀ.
[[nodiscard]] inline AdapterGradients adapter_gradients(const LoraAdapter& adapter, const Matrix& x,
                                                        const Matrix& ax, const Matrix& upstream) {
    if (!x.is_column() || x.rows() != adapter.d_in()) {
        throw ShapeError("adapter_gradients '" + adapter.module_id() + "': input " + x.shape() +
                         ", expected (" + std::to_string(adapter.d_in()) + "x1)");
    }
    if (!upstream.is_column() || upstream.rows() != adapter.d_out()) {
        throw ShapeError("adapter_gradients '" + adapter.module_id() + "': upstream " + upstream.shape() +
                         ", expected (" + std::to_string(adapter.d_out()) + "x1)");
    }
    if (!ax.is_column() || ax.rows() != adapter.rank()) {
        throw ShapeError("adapter_gradients '" + adapter.module_id() + "': Ax " + ax.shape() + ", expected (" +
                         std::to_string(adapter.rank()) + "x1)");
    }
    const double s = adapter.scaling();
    Matrix bt_up = scaled(matmul_tn(adapter.b(), upstream), s);
    return {outer(bt_up, x), scaled(outer(upstream, ax), s)};
}

[[nodiscard]] inline AdapterGradients adapter_gradients(const LoraAdapter& adapter, const Matrix& x,
                                                        const Matrix& upstream) {
    if (!x.is_column() || x.rows() != adapter.d_in()) {
        throw ShapeError("adapter_gradients '" + adapter.module_id() + "': input " + x.shape() +
                         ", expected (" + std::to_string(adapter.d_in()) + "x1)");
    }
    return adapter_gradients(adapter, x, matmul(adapter.a(), x), upstream);
}

/// alpha_new such that alpha_new / rank == base_alpha / base_rank holds bitwise
/// in double arithmetic. The naive product is occasionally one ulp off; the
/// neighbouring doubles are searched in that case. When no double satisfies
/// the quotient exactly, the correctly rounded product is returned.
[[nodiscard]] inline double alpha_for_rank(double base_alpha, std::size_t base_rank, std::size_t rank) {
    const double ratio = base_alpha / static_cast<double>(base_rank);
    const double r = static_cast<double>(rank);
    double candidate = ratio * r;
    if (candidate / r == ratio) {
        return candidate;
    }
    double up = candidate;
    double down = candidate;
    for (int step = 0; step < 8; ++step) {
        up = std::nextafter(up, INFINITY);
        if (up / r == ratio) {
            return up;
        }
        down = std::nextafter(down, 0.0);
        if (down / r == ratio) {
            return down;
        }
    }
    return candidate;
}

/// Resize to r_new: leading min(r_old, r_new) rows of A and columns of B are
/// kept, new A rows are Kaiming-initialized (fan-in d_in) from `rng`, new B
/// columns are zero. alpha is rescaled by alpha_for_rank and the scaling is
/// set to base_alpha / base_rank exactly.
[[nodiscard]] inline LoraAdapter resize(const LoraAdapter& adapter, std::size_t r_new, double base_alpha,
                                        std::size_t base_rank, Rng& rng) {
    if (r_new == 0) {
        throw ConfigError("resize '" + adapter.module_id() + "': new rank must be >= 1");
    }
    if (base_rank == 0 || !(base_alpha > 0.0)) {
        throw ConfigError("resize '" + adapter.module_id() + "': base rank and alpha must be positive");
    }
    const std::size_t r_old = adapter.rank();
    const std::size_t keep = std::min(r_old, r_new);
    const std::size_t d_in = adapter.d_in();
    const std::size_t d_out = adapter.d_out();

    Matrix a(r_new, d_in);
    for (std::size_t i = 0; i < keep; ++i) {
        for (std::size_t j = 0; j < d_in; ++j) {
            a(i, j) = adapter.a()(i, j);
        }
    }
    if (r_new > r_old) {
        const Matrix fresh = kaiming_init(r_new - r_old, d_in, rng);
        for (std::size_t i = 0; i < fresh.rows(); ++i) {
            for (std::size_t j = 0; j < d_in; ++j) {
                a(r_old + i, j) = fresh(i, j);
            }
        }
    }
    Matrix b(d_out, r_new);
    for (std::size_t i = 0; i < d_out; ++i) {
        for (std::size_t j = 0; j < keep; ++j) {
            b(i, j) = adapter.b()(i, j);
        }
    }
    const double ratio = base_alpha / static_cast<double>(base_rank);
    const double alpha = r_new == r_old && adapter.scaling() == ratio ? adapter.alpha()
                                                                      : alpha_for_rank(base_alpha, base_rank, r_new);
    return LoraAdapter(adapter.module_id(), std::move(a), std::move(b), alpha, ratio);
}

}  // namespace fimlora

#endif  // FIMLORA_LORA_HPP
