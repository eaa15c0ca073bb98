#ifndef FIMLORA_EFIM_HPP
#define FIMLORA_EFIM_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fimlora/errors.hpp"
#include "fimlora/exact_sum.hpp"
#include "fimlora/linalg.hpp"
#include "fimlora/lora.hpp"
#include "fimlora/model.hpp"

namespace fimlora {

/// Default number of calibration batches.
inline constexpr std::size_t kDefaultCalibrationBatches = 8;

enum class Aggregation { mean, max, l2 };

inline std::string to_string(Aggregation a) {
    switch (a) {
        case Aggregation::mean: return "mean";
        case Aggregation::max: return "max";
        case Aggregation::l2: return "l2";
    }
    return "mean";
}

inline Aggregation parse_aggregation(std::string_view s) {
    if (s == "mean") return Aggregation::mean;
    if (s == "max") return Aggregation::max;
    if (s == "l2") return Aggregation::l2;
    throw ConfigError("unknown aggregation '" + std::string(s) + "' (expected mean|max|l2)");
}

struct ModuleScore {
    std::string module_id;
    double value = 0.0;

    friend bool operator==(const ModuleScore&, const ModuleScore&) = default;
};

/// One non-negative informativeness score per module, in module order.
class ScoreVector {
public:
    ScoreVector() = default;

    ScoreVector(std::vector<ModuleScore> entries, Aggregation aggregation)
        : entries_(std::move(entries)), aggregation_(aggregation) {
        std::set<std::string> seen;
        for (const auto& e : entries_) {
            if (!(e.value >= 0.0) || !std::isfinite(e.value)) {
                throw ConfigError("ScoreVector: score for '" + e.module_id + "' must be finite and >= 0");
            }
            if (!seen.insert(e.module_id).second) {
                throw ConfigError("ScoreVector: duplicate module id '" + e.module_id + "'");
            }
        }
    }

    static ScoreVector from_values(const std::vector<std::string>& ids, const std::vector<double>& values,
                                   Aggregation aggregation = Aggregation::mean) {
        if (ids.size() != values.size()) {
            throw ShapeError("ScoreVector: " + std::to_string(ids.size()) + " ids for " +
                             std::to_string(values.size()) + " values");
        }
        std::vector<ModuleScore> entries;
        entries.reserve(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            entries.push_back({ids[i], values[i]});
        }
        return ScoreVector(std::move(entries), aggregation);
    }

    /// Scores with generated ids "m0", "m1", ...
    static ScoreVector from_values(const std::vector<double>& values, Aggregation aggregation = Aggregation::mean) {
        std::vector<std::string> ids;
        ids.reserve(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            ids.push_back("m" + std::to_string(i));
        }
        return from_values(ids, values, aggregation);
    }

    [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }
    [[nodiscard]] bool empty() const noexcept { return entries_.empty(); }
    [[nodiscard]] const std::vector<ModuleScore>& entries() const noexcept { return entries_; }
    [[nodiscard]] const ModuleScore& operator[](std::size_t i) const { return entries_.at(i); }
    [[nodiscard]] Aggregation aggregation() const noexcept { return aggregation_; }

    [[nodiscard]] std::vector<double> values() const {
        std::vector<double> v;
        v.reserve(entries_.size());
        for (const auto& e : entries_) {
            v.push_back(e.value);
        }
        return v;
    }

    [[nodiscard]] std::vector<std::string> module_ids() const {
        std::vector<std::string> ids;
        ids.reserve(entries_.size());
        for (const auto& e : entries_) {
            ids.push_back(e.module_id);
        }
        return ids;
    }

    friend bool operator==(const ScoreVector&, const ScoreVector&) = default;

private:
    std::vector<ModuleScore> entries_;
    Aggregation aggregation_ = Aggregation::mean;
};

struct ModuleShape {
    std::string module_id;
    std::size_t d_out = 0;
    std::size_t rank = 0;
};

struct NamedGradients {
    std::string module_id;
    AdapterGradients grads;
};

struct FisherMatrix {
    std::string module_id;
    Matrix f;
};

/// Running sums of squared adapter-B gradients, one exact accumulator per entry.
/// Gradients at A never enter: at initialization they are identically zero.
class EfimAccumulator {
public:
    explicit EfimAccumulator(std::vector<ModuleShape> shapes) : shapes_(std::move(shapes)) {
        std::set<std::string> seen;
        sums_.reserve(shapes_.size());
        for (const auto& s : shapes_) {
            if (s.d_out == 0 || s.rank == 0) {
                throw ShapeError("EfimAccumulator: module '" + s.module_id + "' has an empty B shape");
            }
            if (!seen.insert(s.module_id).second) {
                throw ShapeError("EfimAccumulator: duplicate module id '" + s.module_id + "'");
            }
            sums_.emplace_back(s.d_out * s.rank);
        }
    }

    static EfimAccumulator for_model(const CalibModel& model) {
        std::vector<ModuleShape> shapes;
        for (const auto& layer : model.layers()) {
            const auto& ad = layer.adapter();
            shapes.push_back({ad.module_id(), ad.d_out(), ad.rank()});
        }
        return EfimAccumulator(std::move(shapes));
    }

    [[nodiscard]] std::size_t batches() const noexcept { return t_; }
    [[nodiscard]] const std::vector<ModuleShape>& shapes() const noexcept { return shapes_; }

    /// Folds one mini-batch gradient in: sum_sq += grad_b ⊙ grad_b, t += 1.
    void accumulate(const std::vector<NamedGradients>& grads) {
        if (grads.size() != shapes_.size()) {
            throw ShapeError("EfimAccumulator::accumulate: got " + std::to_string(grads.size()) +
                             " modules, expected " + std::to_string(shapes_.size()));
        }
        for (std::size_t m = 0; m < shapes_.size(); ++m) {
            const auto& s = shapes_[m];
            const auto& g = grads[m];
            if (g.module_id != s.module_id) {
                throw ShapeError("EfimAccumulator::accumulate: module '" + g.module_id + "' where '" +
                                 s.module_id + "' expected");
            }
            if (g.grads.grad_b.rows() != s.d_out || g.grads.grad_b.cols() != s.rank) {
                throw ShapeError("EfimAccumulator::accumulate: grad_b " + g.grads.grad_b.shape() + " for '" +
                                 s.module_id + "', expected " + Matrix::shape_string(s.d_out, s.rank));
            }
            if (!all_finite(g.grads.grad_b)) {
                throw NumericError("EfimAccumulator::accumulate: non-finite gradient at '" + s.module_id + "'");
            }
        }
        for (std::size_t m = 0; m < shapes_.size(); ++m) {
            const Matrix& gb = grads[m].grads.grad_b;
            auto& cells = sums_[m];
            for (std::size_t k = 0; k < cells.size(); ++k) {
                cells[k].add(gb[k] * gb[k]);
            }
        }
        ++t_;
    }

    /// Elementwise sum of the accumulated squares and of the batch counts.
    void merge_from(const EfimAccumulator& other) {
        require_compatible(other);
        for (std::size_t m = 0; m < sums_.size(); ++m) {
            for (std::size_t k = 0; k < sums_[m].size(); ++k) {
                sums_[m][k].add(other.sums_[m][k]);
            }
        }
        t_ += other.t_;
    }

    /// Current sum of squares for module `m`, rounded to double.
    [[nodiscard]] Matrix sum_sq(std::size_t m) const {
        const auto& s = shapes_.at(m);
        Matrix out(s.d_out, s.rank);
        for (std::size_t k = 0; k < out.size(); ++k) {
            out[k] = sums_[m][k].value();
        }
        return out;
    }

    /// F = sum_sq / T per module.
    [[nodiscard]] std::vector<FisherMatrix> finalize() const {
        if (t_ == 0) {
            throw EmptyCalibrationError("EfimAccumulator::finalize: no calibration batches accumulated");
        }
        std::vector<FisherMatrix> out;
        out.reserve(shapes_.size());
        const double t = static_cast<double>(t_);
        for (std::size_t m = 0; m < shapes_.size(); ++m) {
            Matrix f = sum_sq(m);
            for (double& v : f.data()) {
                v /= t;
            }
            out.push_back({shapes_[m].module_id, std::move(f)});
        }
        return out;
    }

    friend bool operator==(const EfimAccumulator& a, const EfimAccumulator& b) {
        if (a.t_ != b.t_ || a.shapes_.size() != b.shapes_.size()) {
            return false;
        }
        for (std::size_t m = 0; m < a.shapes_.size(); ++m) {
            const auto& x = a.shapes_[m];
            const auto& y = b.shapes_[m];
            if (x.module_id != y.module_id || x.d_out != y.d_out || x.rank != y.rank) {
                return false;
            }
        }
        return a.sums_ == b.sums_;
    }

private:
    void require_compatible(const EfimAccumulator& other) const {
        if (other.shapes_.size() != shapes_.size()) {
            throw ShapeError("EfimAccumulator::merge: module count mismatch");
        }
        for (std::size_t m = 0; m < shapes_.size(); ++m) {
            const auto& x = shapes_[m];
            const auto& y = other.shapes_[m];
            if (x.module_id != y.module_id || x.d_out != y.d_out || x.rank != y.rank) {
                throw ShapeError("EfimAccumulator::merge: module '" + x.module_id + "' " +
                                 Matrix::shape_string(x.d_out, x.rank) + " vs '" + y.module_id + "' " +
                                 Matrix::shape_string(y.d_out, y.rank));
            }
        }
    }

    std::vector<ModuleShape> shapes_;
    std::vector<std::vector<ExactSum>> sums_;
    std::size_t t_ = 0;
};

[[nodiscard]] inline EfimAccumulator merge(const EfimAccumulator& a, const EfimAccumulator& b) {
    EfimAccumulator out = a;
    out.merge_from(b);
    return out;
}

[[nodiscard]] inline std::vector<NamedGradients> named_gradients(const CalibModel& model, const BackwardResult& r) {
    if (r.grads.size() != model.num_layers()) {
        throw ShapeError("named_gradients: result does not match model depth");
    }
    std::vector<NamedGradients> out;
    out.reserve(r.grads.size());
    for (std::size_t i = 0; i < r.grads.size(); ++i) {
        out.push_back({model.layer(i).adapter().module_id(), r.grads[i]});
    }
    return out;
}

/// Scalar informativeness of one eFIM matrix.
///   mean: (1 / (d_out * r)) * sum F;  max: largest entry;  l2: sqrt(sum F^2).
[[nodiscard]] inline double aggregate(const Matrix& f, Aggregation aggregation) {
    switch (aggregation) {
        case Aggregation::mean:
            return sum(f) / static_cast<double>(f.size());
        case Aggregation::max: {
            double top = 0.0;
            for (double v : f.data()) {
                top = std::max(top, v);
            }
            return top;
        }
        case Aggregation::l2:
            return frobenius_norm(f);
    }
    return 0.0;
}

[[nodiscard]] inline ScoreVector score(const std::vector<FisherMatrix>& fisher, Aggregation aggregation) {
    std::vector<ModuleScore> entries;
    entries.reserve(fisher.size());
    for (const auto& fm : fisher) {
        entries.push_back({fm.module_id, aggregate(fm.f, aggregation)});
    }
    return ScoreVector(std::move(entries), aggregation);
}

struct FisherSummary {
    std::string module_id;
    double min = 0.0;
    double mean = 0.0;
    double max = 0.0;
};

[[nodiscard]] inline std::vector<FisherSummary> summarize(const std::vector<FisherMatrix>& fisher) {
    std::vector<FisherSummary> out;
    out.reserve(fisher.size());
    for (const auto& fm : fisher) {
        const auto data = fm.f.data();
        const auto [lo, hi] = std::minmax_element(data.begin(), data.end());
        out.push_back({fm.module_id, *lo, sum(fm.f) / static_cast<double>(fm.f.size()), *hi});
    }
    return out;
}

/// T forward/backward passes over consecutive task batches, then finalize.
[[nodiscard]] inline EfimAccumulator calibrate(const CalibModel& model, SyntheticTask& task, std::size_t n_batches) {
    EfimAccumulator acc = EfimAccumulator::for_model(model);
    for (std::size_t t = 0; t < n_batches; ++t) {
        const Batch batch = task.next_batch();
        const BackwardResult r = backward(model, forward(model, batch));
        acc.accumulate(named_gradients(model, r));
    }
    return acc;
}

}  // namespace fimlora

#endif  // FIMLORA_EFIM_HPP
