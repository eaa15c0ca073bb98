#ifndef FIMLORA_ALLOCATOR_HPP
#define FIMLORA_ALLOCATOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fimlora/efim.hpp"
#include "fimlora/errors.hpp"
#include "fimlora/linalg.hpp"

namespace fimlora {

enum class Provenance { fim, random, uniform };

inline std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::fim: return "fim";
        case Provenance::random: return "random";
        case Provenance::uniform: return "uniform";
    }
    return "fim";
}

inline Provenance parse_provenance(std::string_view s) {
    if (s == "fim") return Provenance::fim;
    if (s == "random") return Provenance::random;
    if (s == "uniform") return Provenance::uniform;
    throw ConfigError("unknown provenance '" + std::string(s) + "'");
}

/// Scores plus rank constraints; the total budget is base_rank * L.
class AllocationProblem {
public:
    AllocationProblem(ScoreVector scores, std::size_t base_rank, std::size_t r_min, std::size_t r_max)
        : scores_(std::move(scores)), base_rank_(base_rank), r_min_(r_min), r_max_(r_max) {
        if (scores_.empty()) {
            throw ConstraintError("AllocationProblem: at least one module required");
        }
        if (r_min_ < 1) {
            throw ConstraintError("AllocationProblem: r_min must be >= 1");
        }
        if (r_min_ > base_rank_ || base_rank_ > r_max_) {
            throw ConstraintError("AllocationProblem: need r_min <= base_rank <= r_max, got " +
                                  std::to_string(r_min_) + " / " + std::to_string(base_rank_) + " / " +
                                  std::to_string(r_max_));
        }
    }

    [[nodiscard]] const ScoreVector& scores() const noexcept { return scores_; }
    [[nodiscard]] std::size_t size() const noexcept { return scores_.size(); }
    [[nodiscard]] std::size_t base_rank() const noexcept { return base_rank_; }
    [[nodiscard]] std::size_t r_min() const noexcept { return r_min_; }
    [[nodiscard]] std::size_t r_max() const noexcept { return r_max_; }
    [[nodiscard]] std::int64_t budget() const noexcept {
        return static_cast<std::int64_t>(base_rank_ * scores_.size());
    }

private:
    ScoreVector scores_;
    std::size_t base_rank_;
    std::size_t r_min_;
    std::size_t r_max_;
};

struct ModuleRank {
    std::string module_id;
    std::size_t rank = 0;

    friend bool operator==(const ModuleRank&, const ModuleRank&) = default;
};

struct RankPattern {
    std::vector<ModuleRank> entries;
    std::int64_t budget = 0;
    Provenance provenance = Provenance::fim;

    [[nodiscard]] std::vector<std::size_t> ranks() const {
        std::vector<std::size_t> r;
        r.reserve(entries.size());
        for (const auto& e : entries) {
            r.push_back(e.rank);
        }
        return r;
    }

    [[nodiscard]] std::int64_t total() const {
        std::int64_t t = 0;
        for (const auto& e : entries) {
            t += static_cast<std::int64_t>(e.rank);
        }
        return t;
    }

    friend bool operator==(const RankPattern&, const RankPattern&) = default;
};

struct Phase1Iteration {
    std::vector<std::size_t> free_set;
    std::vector<double> shares;  // aligned with free_set
    std::vector<std::size_t> saturated;
    std::int64_t budget_before = 0;
    std::int64_t budget_after = 0;
    bool zero_mass = false;  // free scores summed to zero; shares split the budget evenly

    friend bool operator==(const Phase1Iteration&, const Phase1Iteration&) = default;
};

struct RoundingStep {
    std::vector<std::size_t> free_set;
    std::vector<std::int64_t> floors;  // aligned with free_set
    std::vector<double> remainders;    // aligned with free_set
    std::int64_t leftover = 0;
    std::vector<std::size_t> bonus;  // modules receiving one extra unit, in award order

    friend bool operator==(const RoundingStep&, const RoundingStep&) = default;
};

struct FloorStep {
    std::vector<std::size_t> raised;  // modules lifted to r_min
    std::int64_t deficit = 0;
    std::vector<std::size_t> donors;  // one entry per unit taken, in order

    friend bool operator==(const FloorStep&, const FloorStep&) = default;
};

struct AllocationTrace {
    bool uniform_fallback = false;
    std::size_t r_min = 0;
    std::size_t r_max = 0;
    std::vector<Phase1Iteration> phase1;
    RoundingStep rounding;
    FloorStep floor;

    friend bool operator==(const AllocationTrace&, const AllocationTrace&) = default;
};

struct Allocation {
    RankPattern pattern;
    AllocationTrace trace;
};

namespace detail {

// Ascending-order sum, so permuting the inputs cannot change the total.
inline double order_free_sum(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    double s = 0.0;
    for (double v : values) {
        s += v;
    }
    return s;
}

inline void check_pattern_bounds(const std::vector<std::int64_t>& ranks, std::size_t r_min, std::size_t r_max,
                                 std::int64_t budget) {
    std::int64_t total = 0;
    for (auto r : ranks) {
        if (r < static_cast<std::int64_t>(r_min) || r > static_cast<std::int64_t>(r_max)) {
            throw std::logic_error("allocate: internal bound violation");
        }
        total += r;
    }
    if (total != budget) {
        throw std::logic_error("allocate: internal budget violation");
    }
}

}  // namespace detail

/// Two-phase water-filling allocation.
///
/// Phase 1 repeatedly shares the remaining budget over the free modules in
/// proportion to their scores and fixes every module whose share floors to at
/// least r_max. Phase 2 integerizes the last shares by largest remainder
/// (ties: higher score, then lower index). Modules left below r_min are then
/// raised, and each missing unit is taken from the lowest-scoring module still
/// above r_min (ties: higher current rank, then lower index).
/// All-zero scores yield the uniform pattern with provenance `uniform`.
[[nodiscard]] inline Allocation allocate(const AllocationProblem& problem,
                                         Provenance provenance = Provenance::fim) {
    const std::size_t n = problem.size();
    const auto scores = problem.scores().values();
    const auto r_min = static_cast<std::int64_t>(problem.r_min());
    const auto r_max = static_cast<std::int64_t>(problem.r_max());

    Allocation out;
    out.trace.r_min = problem.r_min();
    out.trace.r_max = problem.r_max();
    out.pattern.budget = problem.budget();
    out.pattern.provenance = provenance;

    const auto ids = problem.scores().module_ids();
    if (std::all_of(scores.begin(), scores.end(), [](double s) { return s == 0.0; })) {
        out.trace.uniform_fallback = true;
        out.pattern.provenance = Provenance::uniform;
        for (const auto& id : ids) {
            out.pattern.entries.push_back({id, problem.base_rank()});
        }
        return out;
    }

    std::vector<std::int64_t> ranks(n, 0);
    std::vector<double> shares(n, 0.0);
    std::vector<std::size_t> free_set(n);
    std::iota(free_set.begin(), free_set.end(), std::size_t{0});
    std::int64_t budget = problem.budget();

    // Phase 1
    while (!free_set.empty()) {
        Phase1Iteration it;
        it.free_set = free_set;
        it.budget_before = budget;
        std::vector<double> free_scores;
        free_scores.reserve(free_set.size());
        for (auto i : free_set) {
            free_scores.push_back(scores[i]);
        }
        const double mass = detail::order_free_sum(free_scores);
        it.zero_mass = mass == 0.0;
        const auto b = static_cast<double>(budget);
        for (auto i : free_set) {
            shares[i] = it.zero_mass ? b / static_cast<double>(free_set.size()) : scores[i] / mass * b;
            it.shares.push_back(shares[i]);
        }
        std::vector<std::size_t> still_free;
        for (auto i : free_set) {
            if (std::floor(shares[i]) >= static_cast<double>(r_max)) {
                it.saturated.push_back(i);
                ranks[i] = r_max;
            } else {
                still_free.push_back(i);
            }
        }
        budget -= static_cast<std::int64_t>(it.saturated.size()) * r_max;
        it.budget_after = budget;
        const bool done = it.saturated.empty();
        out.trace.phase1.push_back(std::move(it));
        free_set = std::move(still_free);
        if (done) {
            break;
        }
    }

    // Phase 2
    RoundingStep& rs = out.trace.rounding;
    rs.free_set = free_set;
    std::int64_t floor_total = 0;
    for (auto i : free_set) {
        const double f = std::floor(shares[i]);
        ranks[i] = static_cast<std::int64_t>(f);
        rs.floors.push_back(ranks[i]);
        rs.remainders.push_back(shares[i] - f);
        floor_total += ranks[i];
    }
    rs.leftover = budget - floor_total;
    std::vector<std::size_t> order(free_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        if (rs.remainders[x] != rs.remainders[y]) return rs.remainders[x] > rs.remainders[y];
        const auto ix = free_set[x];
        const auto iy = free_set[y];
        if (scores[ix] != scores[iy]) return scores[ix] > scores[iy];
        return ix < iy;
    });
    for (std::int64_t k = 0; k < rs.leftover && !order.empty(); ++k) {
        const auto i = free_set[order[static_cast<std::size_t>(k) % order.size()]];
        ++ranks[i];
        rs.bonus.push_back(i);
    }

    // Floor enforcement
    FloorStep& fs = out.trace.floor;
    for (std::size_t i = 0; i < n; ++i) {
        if (ranks[i] < r_min) {
            fs.deficit += r_min - ranks[i];
            ranks[i] = r_min;
            fs.raised.push_back(i);
        }
    }
    for (std::int64_t k = 0; k < fs.deficit; ++k) {
        std::size_t donor = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (ranks[i] <= r_min) continue;
            if (donor == n || scores[i] < scores[donor] || (scores[i] == scores[donor] && ranks[i] > ranks[donor])) {
                donor = i;
            }
        }
        if (donor == n) {
            throw ConstraintError("allocate: no donor above r_min (infeasible budget)");
        }
        --ranks[donor];
        fs.donors.push_back(donor);
    }

    detail::check_pattern_bounds(ranks, problem.r_min(), problem.r_max(), problem.budget());
    for (std::size_t i = 0; i < n; ++i) {
        out.pattern.entries.push_back({ids[i], static_cast<std::size_t>(ranks[i])});
    }
    return out;
}

/// Rebuilds the integer ranks from a trace alone.
[[nodiscard]] inline std::vector<std::size_t> replay(const AllocationTrace& trace, std::size_t n,
                                                     std::size_t base_rank) {
    if (trace.uniform_fallback) {
        return std::vector<std::size_t>(n, base_rank);
    }
    std::vector<std::int64_t> ranks(n, 0);
    for (const auto& it : trace.phase1) {
        for (auto i : it.saturated) {
            ranks.at(i) = static_cast<std::int64_t>(trace.r_max);
        }
    }
    for (std::size_t k = 0; k < trace.rounding.free_set.size(); ++k) {
        ranks.at(trace.rounding.free_set[k]) = trace.rounding.floors.at(k);
    }
    for (auto i : trace.rounding.bonus) {
        ++ranks.at(i);
    }
    for (auto i : trace.floor.raised) {
        ranks.at(i) = static_cast<std::int64_t>(trace.r_min);
    }
    for (auto i : trace.floor.donors) {
        --ranks.at(i);
    }
    std::vector<std::size_t> out;
    out.reserve(n);
    for (auto r : ranks) {
        out.push_back(static_cast<std::size_t>(r));
    }
    return out;
}

/// I.i.d. uniform(0, 1) scores for the random-rank baseline.
[[nodiscard]] inline ScoreVector random_scores(const std::vector<std::string>& module_ids, Rng& rng) {
    if (module_ids.empty()) {
        throw ConfigError("random_scores: at least one module required");
    }
    std::vector<double> values;
    values.reserve(module_ids.size());
    for (std::size_t i = 0; i < module_ids.size(); ++i) {
        values.push_back(rng.uniform());
    }
    return ScoreVector::from_values(module_ids, values, Aggregation::mean);
}

[[nodiscard]] inline ScoreVector random_scores(std::size_t count, Rng& rng) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < count; ++i) {
        ids.push_back("m" + std::to_string(i));
    }
    return random_scores(ids, rng);
}

[[nodiscard]] inline RankPattern uniform_pattern(const std::vector<std::string>& module_ids, std::size_t rank) {
    RankPattern p;
    p.provenance = Provenance::uniform;
    for (const auto& id : module_ids) {
        p.entries.push_back({id, rank});
    }
    p.budget = p.total();
    return p;
}

struct RankStats {
    double fraction_at_max = 0.0;
    double fraction_le2 = 0.0;
    double fraction_between = 0.0;  // strictly between 2 and r_max
    double entropy = 0.0;           // Shannon entropy (nats) of the budget shares r_l / sum r
    std::size_t min_rank = 0;
    std::size_t max_rank = 0;
};

[[nodiscard]] inline RankStats rank_stats(const std::vector<std::size_t>& ranks, std::size_t r_max) {
    RankStats s;
    if (ranks.empty()) {
        return s;
    }
    const auto n = static_cast<double>(ranks.size());
    double total = 0.0;
    std::size_t at_max = 0;
    std::size_t le2 = 0;
    for (auto r : ranks) {
        total += static_cast<double>(r);
        at_max += r == r_max ? 1 : 0;
        le2 += r <= 2 ? 1 : 0;
    }
    s.fraction_at_max = static_cast<double>(at_max) / n;
    s.fraction_le2 = static_cast<double>(le2) / n;
    // r_max <= 2 makes the two groups overlap; count each module once.
    std::size_t between = 0;
    for (auto r : ranks) {
        between += (r > 2 && r < r_max) ? 1 : 0;
    }
    s.fraction_between = static_cast<double>(between) / n;
    for (auto r : ranks) {
        if (r > 0) {
            const double p = static_cast<double>(r) / total;
            s.entropy -= p * std::log(p);
        }
    }
    const auto [lo, hi] = std::minmax_element(ranks.begin(), ranks.end());
    s.min_rank = *lo;
    s.max_rank = *hi;
    return s;
}

}  // namespace fimlora

#endif  // FIMLORA_ALLOCATOR_HPP
