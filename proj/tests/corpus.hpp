#ifndef FIMLORA_TESTS_CORPUS_HPP
#define FIMLORA_TESTS_CORPUS_HPP

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fimlora/allocator.hpp"
#include "fimlora/linalg.hpp"

namespace corpus {

enum class Dist { uniform, lognormal, sparse, constant };

inline const char* name(Dist d) {
    switch (d) {
        case Dist::uniform: return "uniform";
        case Dist::lognormal: return "lognormal";
        case Dist::sparse: return "sparse";
        case Dist::constant: return "constant";
    }
    return "?";
}

struct Problem {
    Dist dist = Dist::uniform;
    std::vector<double> scores;
    std::size_t base_rank = 1;
    std::size_t r_min = 1;
    std::size_t r_max = 1;

    [[nodiscard]] fimlora::AllocationProblem make() const {
        return {fimlora::ScoreVector::from_values(scores), base_rank, r_min, r_max};
    }
};

inline std::size_t pick(fimlora::Rng& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng.uniform() * static_cast<double>(hi - lo + 1));
}

inline std::vector<double> lognormal_scores(fimlora::Rng& rng, std::size_t n, double sigma) {
    std::vector<double> s(n);
    for (auto& v : s) {
        v = std::exp(sigma * rng.normal());
    }
    return s;
}

/// Randomized allocation problems: L in [1, 512], one of four score
/// distributions, feasible bounds r_min <= r <= r_max.
inline std::vector<Problem> make(std::size_t count, std::uint64_t seed) {
    fimlora::Rng rng(seed);
    std::vector<Problem> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Problem p;
        p.dist = static_cast<Dist>(i % 4);
        const std::size_t n = rng.uniform() < 0.1 ? pick(rng, 1, 4) : pick(rng, 1, 512);
        switch (p.dist) {
            case Dist::uniform:
                for (std::size_t k = 0; k < n; ++k) p.scores.push_back(rng.uniform());
                break;
            case Dist::lognormal:
                p.scores = lognormal_scores(rng, n, 0.5 + 2.0 * rng.uniform());
                break;
            case Dist::sparse: {
                const double density = rng.uniform() * 0.3;
                for (std::size_t k = 0; k < n; ++k) {
                    p.scores.push_back(rng.uniform() < density ? std::exp(2.0 * rng.normal()) : 0.0);
                }
                break;
            }
            case Dist::constant:
                p.scores.assign(n, rng.uniform() < 0.2 ? 0.0 : std::ldexp(rng.uniform_open(), pick(rng, 0, 20) - 10));
                break;
        }
        p.base_rank = pick(rng, 1, 16);
        p.r_min = pick(rng, 1, p.base_rank);
        p.r_max = pick(rng, p.base_rank, 4 * p.base_rank);
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace corpus

#endif  // FIMLORA_TESTS_CORPUS_HPP
