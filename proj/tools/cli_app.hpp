#ifndef FIMLORA_TOOLS_CLI_APP_HPP
#define FIMLORA_TOOLS_CLI_APP_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fimlora/efim.hpp"
#include "fimlora/model.hpp"

namespace fimlora::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

struct FinetuneConfig {
    std::size_t steps = 40;
    double lr = 0.05;
    std::size_t eval_examples = 256;
};

struct SweepConfig {
    std::vector<std::size_t> r_min{1, 2};
    std::vector<std::size_t> n_batches{8, 32};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    bool finetune = true;
};

struct RunConfig {
    std::uint64_t seed = 0;
    PlantedTaskSpec task{};
    std::size_t n_batches = kDefaultCalibrationBatches;
    Aggregation aggregation = Aggregation::mean;
    std::size_t r_min = 1;
    std::size_t r_max = 0;  // 0: twice the base rank
    FinetuneConfig finetune{};
    SweepConfig sweep{};
    std::filesystem::path out = "out";

    [[nodiscard]] std::size_t base_rank() const noexcept { return task.model.base_rank; }
    [[nodiscard]] std::size_t effective_r_max() const noexcept { return r_max == 0 ? 2 * base_rank() : r_max; }
};

/// Parses a JSON config document; unknown keys and bad values raise ConfigError.
[[nodiscard]] RunConfig parse_config(const std::string& text);
[[nodiscard]] RunConfig load_config(const std::filesystem::path& path);

/// Runs one command line (without the program name). Progress and warnings go
/// to `err`; artifacts go to files under the output directory.
int run_cli(const std::vector<std::string>& args, std::ostream& err);

}  // namespace fimlora::cli

#endif  // FIMLORA_TOOLS_CLI_APP_HPP
