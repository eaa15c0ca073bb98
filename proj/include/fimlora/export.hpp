#ifndef FIMLORA_EXPORT_HPP
#define FIMLORA_EXPORT_HPP

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimlora/allocator.hpp"
#include "fimlora/efim.hpp"
#include "fimlora/lora.hpp"

namespace fimlora {

inline constexpr int kPatternSchemaVersion = 1;
inline constexpr int kScoresSchemaVersion = 1;

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Base of every pattern-file rejection. kind() names the violated invariant.
class PatternFormatError : public std::runtime_error {
public:
    PatternFormatError(std::string kind, const std::string& message)
        : std::runtime_error(kind + ": " + message), kind_(std::move(kind)) {}
    [[nodiscard]] const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct MalformedFileError : PatternFormatError {
    explicit MalformedFileError(const std::string& m) : PatternFormatError("malformed", m) {}
};
struct UnknownSchemaError : PatternFormatError {
    explicit UnknownSchemaError(const std::string& m) : PatternFormatError("unknown_schema", m) {}
};
struct BudgetMismatchError : PatternFormatError {
    explicit BudgetMismatchError(const std::string& m) : PatternFormatError("budget_mismatch", m) {}
};
struct RatioMismatchError : PatternFormatError {
    explicit RatioMismatchError(const std::string& m) : PatternFormatError("ratio_mismatch", m) {}
};
struct RankBoundsError : PatternFormatError {
    explicit RankBoundsError(const std::string& m) : PatternFormatError("rank_bounds", m) {}
};
struct ModuleSetError : PatternFormatError {
    explicit ModuleSetError(const std::string& m) : PatternFormatError("module_set", m) {}
};

/// Shortest decimal string that reads back to the same double.
[[nodiscard]] inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

struct CalibrationInfo {
    std::size_t n_batches = kDefaultCalibrationBatches;
    std::string aggregation = "mean";
    std::uint64_t seed = 0;
    std::size_t r_min = 1;
    std::size_t r_max = 1;

    friend bool operator==(const CalibrationInfo&, const CalibrationInfo&) = default;
};

struct PatternMetadata {
    std::size_t base_rank = 1;
    double base_alpha = 1.0;
    CalibrationInfo calibration{};

    friend bool operator==(const PatternMetadata&, const PatternMetadata&) = default;
};

struct ModuleAlpha {
    std::string module_id;
    double alpha = 0.0;

    friend bool operator==(const ModuleAlpha&, const ModuleAlpha&) = default;
};

struct PatternFile {
    RankPattern pattern;
    std::vector<ModuleAlpha> alphas;
    PatternMetadata metadata;

    friend bool operator==(const PatternFile&, const PatternFile&) = default;
};

/// Per-module alpha from alpha_for_rank: alpha / rank equals base_alpha /
/// base_rank bitwise whenever some double achieves that.
[[nodiscard]] inline std::vector<ModuleAlpha> alpha_pattern(const RankPattern& pattern, double base_alpha,
                                                            std::size_t base_rank) {
    std::vector<ModuleAlpha> out;
    out.reserve(pattern.entries.size());
    for (const auto& e : pattern.entries) {
        out.push_back({e.module_id, alpha_for_rank(base_alpha, base_rank, e.rank)});
    }
    return out;
}

namespace detail {

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    os << text;
    os.flush();
    if (!os) {
        throw IoError("write to '" + path.string() + "' failed");
    }
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Canonical rendering: keys sorted (std::map-backed objects), two-space indent,
// shortest round-trip reals, trailing newline.
inline std::string canonical_dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

template <class T>
T field(const nlohmann::json& j, const char* key, const char* where) {
    if (!j.is_object() || !j.contains(key)) {
        throw MalformedFileError(std::string(where) + ": missing field '" + key + "'");
    }
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw MalformedFileError(std::string(where) + ": field '" + key + "' has the wrong type");
    }
}

inline std::size_t positive_size(const nlohmann::json& j, const char* key, const char* where) {
    const nlohmann::json& v = j.contains(key) ? j.at(key) : nlohmann::json();
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw MalformedFileError(std::string(where) + ": field '" + key + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
}

}  // namespace detail

[[nodiscard]] inline nlohmann::json pattern_to_json(const RankPattern& pattern, const std::vector<ModuleAlpha>& alphas,
                                                    const PatternMetadata& meta) {
    if (alphas.size() != pattern.entries.size()) {
        throw ShapeError("write_pattern: alpha count does not match the rank pattern");
    }
    nlohmann::json ranks = nlohmann::json::object();
    nlohmann::json alpha = nlohmann::json::object();
    nlohmann::json order = nlohmann::json::array();
    for (std::size_t i = 0; i < pattern.entries.size(); ++i) {
        const auto& e = pattern.entries[i];
        if (alphas[i].module_id != e.module_id) {
            throw ShapeError("write_pattern: alpha entry '" + alphas[i].module_id + "' out of order");
        }
        ranks[e.module_id] = e.rank;
        alpha[e.module_id] = alphas[i].alpha;
        order.push_back(e.module_id);
    }
    nlohmann::json j;
    j["schema_version"] = kPatternSchemaVersion;
    j["base_rank"] = meta.base_rank;
    j["base_alpha"] = meta.base_alpha;
    j["budget"] = pattern.budget;
    j["provenance"] = to_string(pattern.provenance);
    j["module_order"] = std::move(order);
    j["rank_pattern"] = std::move(ranks);
    j["alpha_pattern"] = std::move(alpha);
    j["calibration"] = {{"n_batches", meta.calibration.n_batches},
                        {"aggregation", meta.calibration.aggregation},
                        {"seed", meta.calibration.seed},
                        {"r_min", meta.calibration.r_min},
                        {"r_max", meta.calibration.r_max}};
    return j;
}

[[nodiscard]] inline std::string pattern_to_string(const RankPattern& pattern, const std::vector<ModuleAlpha>& alphas,
                                                   const PatternMetadata& meta) {
    return detail::canonical_dump(pattern_to_json(pattern, alphas, meta));
}

inline void write_pattern(const RankPattern& pattern, const std::vector<ModuleAlpha>& alphas,
                          const PatternMetadata& meta, const std::filesystem::path& path) {
    detail::write_text_file(path, pattern_to_string(pattern, alphas, meta));
}

/// Parses and validates a pattern document. Checks run in a fixed order:
/// JSON syntax and field types, schema version, module sets, rank bounds,
/// budget, alpha ratio.
[[nodiscard]] inline PatternFile parse_pattern(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw MalformedFileError(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw MalformedFileError("top level must be an object");
    }
    if (!j.contains("schema_version") || !j.at("schema_version").is_number_integer()) {
        throw MalformedFileError("missing integer 'schema_version'");
    }
    const auto version = j.at("schema_version").get<std::int64_t>();
    if (version != kPatternSchemaVersion) {
        throw UnknownSchemaError("schema_version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kPatternSchemaVersion) + ")");
    }
    constexpr const char* where = "pattern";
    PatternFile out;
    out.metadata.base_rank = detail::positive_size(j, "base_rank", where);
    if (!j.contains("base_alpha") || !j.at("base_alpha").is_number()) {
        throw MalformedFileError("pattern: field 'base_alpha' must be a number");
    }
    out.metadata.base_alpha = j.at("base_alpha").get<double>();
    if (!j.contains("budget") || !j.at("budget").is_number_integer()) {
        throw MalformedFileError("pattern: field 'budget' must be an integer");
    }
    out.pattern.budget = j.at("budget").get<std::int64_t>();
    try {
        out.pattern.provenance = parse_provenance(detail::field<std::string>(j, "provenance", where));
    } catch (const ConfigError& e) {
        throw MalformedFileError(std::string("pattern: ") + e.what());
    }
    if (!j.contains("calibration") || !j.at("calibration").is_object()) {
        throw MalformedFileError("pattern: missing object 'calibration'");
    }
    const auto& cal = j.at("calibration");
    constexpr const char* cwhere = "pattern.calibration";
    out.metadata.calibration.n_batches = detail::positive_size(cal, "n_batches", cwhere);
    out.metadata.calibration.aggregation = detail::field<std::string>(cal, "aggregation", cwhere);
    if (!cal.contains("seed") || !cal.at("seed").is_number_unsigned()) {
        throw MalformedFileError("pattern.calibration: field 'seed' must be an unsigned integer");
    }
    out.metadata.calibration.seed = cal.at("seed").get<std::uint64_t>();
    out.metadata.calibration.r_min = detail::positive_size(cal, "r_min", cwhere);
    out.metadata.calibration.r_max = detail::positive_size(cal, "r_max", cwhere);

    if (!j.contains("module_order") || !j.at("module_order").is_array()) {
        throw MalformedFileError("pattern: missing array 'module_order'");
    }
    for (const char* key : {"rank_pattern", "alpha_pattern"}) {
        if (!j.contains(key) || !j.at(key).is_object()) {
            throw MalformedFileError(std::string("pattern: missing object '") + key + "'");
        }
    }
    const auto& order = j.at("module_order");
    const auto& ranks = j.at("rank_pattern");
    const auto& alphas = j.at("alpha_pattern");

    std::set<std::string> ids;
    for (const auto& id : order) {
        if (!id.is_string()) {
            throw MalformedFileError("pattern: module_order entries must be strings");
        }
        if (!ids.insert(id.get<std::string>()).second) {
            throw ModuleSetError("module '" + id.get<std::string>() + "' listed twice in module_order");
        }
    }
    for (const auto* obj : {&ranks, &alphas}) {
        std::set<std::string> keys;
        for (auto it = obj->begin(); it != obj->end(); ++it) {
            keys.insert(it.key());
        }
        if (keys != ids) {
            throw ModuleSetError(std::string(obj == &ranks ? "rank_pattern" : "alpha_pattern") +
                                 " keys do not match module_order");
        }
    }
    if (ids.empty()) {
        throw ModuleSetError("pattern lists no modules");
    }
    for (const auto& idj : order) {
        const auto id = idj.get<std::string>();
        const auto& rv = ranks.at(id);
        const auto& av = alphas.at(id);
        if (!rv.is_number_integer()) {
            throw MalformedFileError("pattern: rank for '" + id + "' must be an integer");
        }
        if (!av.is_number()) {
            throw MalformedFileError("pattern: alpha for '" + id + "' must be a number");
        }
        const auto r = rv.get<std::int64_t>();
        const auto& c = out.metadata.calibration;
        if (r < 1 || r < static_cast<std::int64_t>(c.r_min) || r > static_cast<std::int64_t>(c.r_max)) {
            throw RankBoundsError("rank " + std::to_string(r) + " for '" + id + "' outside [" +
                                  std::to_string(c.r_min) + ", " + std::to_string(c.r_max) + "]");
        }
        out.pattern.entries.push_back({id, static_cast<std::size_t>(r)});
        out.alphas.push_back({id, av.get<double>()});
    }
    if (out.pattern.total() != out.pattern.budget) {
        throw BudgetMismatchError("ranks sum to " + std::to_string(out.pattern.total()) + ", budget is " +
                                  std::to_string(out.pattern.budget));
    }
    if (out.metadata.base_rank == 0 || !(out.metadata.base_alpha > 0.0)) {
        throw RatioMismatchError("base_rank and base_alpha must be positive");
    }
    const double ratio = out.metadata.base_alpha / static_cast<double>(out.metadata.base_rank);
    for (std::size_t i = 0; i < out.alphas.size(); ++i) {
        const std::size_t rank = out.pattern.entries[i].rank;
        const double got = out.alphas[i].alpha / static_cast<double>(rank);
        if (got != ratio &&
            out.alphas[i].alpha != alpha_for_rank(out.metadata.base_alpha, out.metadata.base_rank, rank)) {
            throw RatioMismatchError("alpha/rank for '" + out.alphas[i].module_id + "' is " + format_double(got) +
                                     ", expected " + format_double(ratio));
        }
    }
    return out;
}

[[nodiscard]] inline PatternFile read_pattern(const std::filesystem::path& path) {
    return parse_pattern(detail::read_text_file(path));
}

struct ScoresFile {
    ScoreVector scores;
    std::vector<FisherSummary> fisher;  // empty for baseline scores
    std::size_t n_batches = 0;
    std::uint64_t seed = 0;
    bool zero_signal = false;
};

[[nodiscard]] inline std::string scores_to_string(const ScoresFile& file) {
    nlohmann::json j;
    j["schema_version"] = kScoresSchemaVersion;
    j["aggregation"] = to_string(file.scores.aggregation());
    j["n_batches"] = file.n_batches;
    j["seed"] = file.seed;
    j["zero_signal"] = file.zero_signal;
    nlohmann::json order = nlohmann::json::array();
    nlohmann::json values = nlohmann::json::object();
    for (const auto& e : file.scores.entries()) {
        order.push_back(e.module_id);
        values[e.module_id] = e.value;
    }
    j["module_order"] = std::move(order);
    j["scores"] = std::move(values);
    nlohmann::json fisher = nlohmann::json::object();
    for (const auto& f : file.fisher) {
        fisher[f.module_id] = {{"min", f.min}, {"mean", f.mean}, {"max", f.max}};
    }
    j["fisher_summary"] = std::move(fisher);
    return detail::canonical_dump(j);
}

inline void write_scores(const ScoresFile& file, const std::filesystem::path& path) {
    detail::write_text_file(path, scores_to_string(file));
}

[[nodiscard]] inline ScoresFile parse_scores(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw MalformedFileError(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("schema_version") || !j.at("schema_version").is_number_integer()) {
        throw MalformedFileError("scores: missing integer 'schema_version'");
    }
    if (j.at("schema_version").get<std::int64_t>() != kScoresSchemaVersion) {
        throw UnknownSchemaError("scores: unsupported schema_version");
    }
    constexpr const char* where = "scores";
    ScoresFile out;
    Aggregation agg = Aggregation::mean;
    try {
        agg = parse_aggregation(detail::field<std::string>(j, "aggregation", where));
    } catch (const ConfigError& e) {
        throw MalformedFileError(std::string("scores: ") + e.what());
    }
    out.n_batches = detail::positive_size(j, "n_batches", where);
    out.seed = detail::field<std::uint64_t>(j, "seed", where);
    out.zero_signal = detail::field<bool>(j, "zero_signal", where);
    if (!j.contains("module_order") || !j.at("module_order").is_array() || !j.contains("scores") ||
        !j.at("scores").is_object()) {
        throw MalformedFileError("scores: need 'module_order' array and 'scores' object");
    }
    std::vector<std::string> ids;
    std::vector<double> values;
    for (const auto& idj : j.at("module_order")) {
        if (!idj.is_string()) {
            throw MalformedFileError("scores: module_order entries must be strings");
        }
        const auto id = idj.get<std::string>();
        if (!j.at("scores").contains(id) || !j.at("scores").at(id).is_number()) {
            throw ModuleSetError("scores: no numeric score for '" + id + "'");
        }
        ids.push_back(id);
        values.push_back(j.at("scores").at(id).get<double>());
    }
    if (j.at("scores").size() != ids.size()) {
        throw ModuleSetError("scores: 'scores' keys do not match module_order");
    }
    try {
        out.scores = ScoreVector::from_values(ids, values, agg);
    } catch (const ConfigError& e) {
        throw MalformedFileError(std::string("scores: ") + e.what());
    }
    if (j.contains("fisher_summary") && j.at("fisher_summary").is_object()) {
        const auto& fs = j.at("fisher_summary");
        for (const auto& id : ids) {
            if (fs.contains(id)) {
                const auto& f = fs.at(id);
                out.fisher.push_back({id, detail::field<double>(f, "min", where), detail::field<double>(f, "mean", where),
                                      detail::field<double>(f, "max", where)});
            }
        }
    }
    return out;
}

[[nodiscard]] inline ScoresFile read_scores(const std::filesystem::path& path) {
    return parse_scores(detail::read_text_file(path));
}

/// Human-readable allocation trace; deterministic for a given allocation.
[[nodiscard]] inline std::string trace_to_string(const Allocation& alloc) {
    const auto& t = alloc.trace;
    const auto& entries = alloc.pattern.entries;
    std::ostringstream os;
    auto name = [&](std::size_t i) { return entries.at(i).module_id; };
    os << "allocation trace\n";
    os << "modules " << entries.size() << " budget " << alloc.pattern.budget << " r_min " << t.r_min << " r_max "
       << t.r_max << " provenance " << to_string(alloc.pattern.provenance) << "\n";
    if (t.uniform_fallback) {
        os << "all scores zero: uniform fallback\n";
    }
    for (std::size_t k = 0; k < t.phase1.size(); ++k) {
        const auto& it = t.phase1[k];
        os << "phase1 iter " << k << " budget " << it.budget_before << " free " << it.free_set.size()
           << (it.zero_mass ? " zero-mass(uniform split)" : "") << "\n";
        for (std::size_t m = 0; m < it.free_set.size(); ++m) {
            os << "  share " << name(it.free_set[m]) << " " << format_double(it.shares[m]) << "\n";
        }
        for (auto i : it.saturated) {
            os << "  saturated " << name(i) << " -> " << t.r_max << "\n";
        }
        os << "  budget after " << it.budget_after << "\n";
    }
    if (!t.uniform_fallback) {
        os << "phase2 leftover " << t.rounding.leftover << "\n";
        for (std::size_t m = 0; m < t.rounding.free_set.size(); ++m) {
            os << "  floor " << name(t.rounding.free_set[m]) << " " << t.rounding.floors[m] << " remainder "
               << format_double(t.rounding.remainders[m]) << "\n";
        }
        for (auto i : t.rounding.bonus) {
            os << "  +1 " << name(i) << "\n";
        }
        os << "floor deficit " << t.floor.deficit << "\n";
        for (auto i : t.floor.raised) {
            os << "  raised " << name(i) << " -> " << t.r_min << "\n";
        }
        for (auto i : t.floor.donors) {
            os << "  donor " << name(i) << " -1\n";
        }
    }
    os << "result\n";
    for (const auto& e : entries) {
        os << "  " << e.module_id << " " << e.rank << "\n";
    }
    return os.str();
}

inline void write_trace(const Allocation& alloc, const std::filesystem::path& path) {
    detail::write_text_file(path, trace_to_string(alloc));
}

/// Placement of modules on the (layer, role) grid of a rank map.
struct RankMapLayout {
    std::vector<std::size_t> layers;  // row labels, ascending
    std::vector<std::string> roles;   // column labels, first-seen order
    std::map<std::string, std::pair<std::size_t, std::size_t>> cell;  // module id -> (row, col)
};

/// Layout for ids of the form "layers.<n>.<role>".
[[nodiscard]] inline RankMapLayout layout_from_module_ids(const std::vector<std::string>& ids) {
    std::vector<std::pair<std::size_t, std::string>> parsed;
    std::set<std::size_t> layer_set;
    std::vector<std::string> roles;
    for (const auto& id : ids) {
        const std::string prefix = "layers.";
        const auto dot = id.find('.', prefix.size());
        if (id.rfind(prefix, 0) != 0 || dot == std::string::npos || dot == prefix.size() || dot + 1 >= id.size()) {
            throw ConfigError("rank map: module id '" + id + "' is not of the form layers.<n>.<role>");
        }
        std::size_t layer = 0;
        const auto digits = id.substr(prefix.size(), dot - prefix.size());
        const auto res = std::from_chars(digits.data(), digits.data() + digits.size(), layer);
        if (res.ec != std::errc() || res.ptr != digits.data() + digits.size()) {
            throw ConfigError("rank map: module id '" + id + "' has a non-numeric layer");
        }
        const auto role = id.substr(dot + 1);
        if (std::find(roles.begin(), roles.end(), role) == roles.end()) {
            roles.push_back(role);
        }
        layer_set.insert(layer);
        parsed.emplace_back(layer, role);
    }
    RankMapLayout layout;
    layout.layers.assign(layer_set.begin(), layer_set.end());
    layout.roles = roles;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto row = static_cast<std::size_t>(
            std::find(layout.layers.begin(), layout.layers.end(), parsed[i].first) - layout.layers.begin());
        const auto col = static_cast<std::size_t>(
            std::find(layout.roles.begin(), layout.roles.end(), parsed[i].second) - layout.roles.begin());
        if (!layout.cell.emplace(ids[i], std::make_pair(row, col)).second) {
            throw ConfigError("rank map: duplicate module id '" + ids[i] + "'");
        }
    }
    if (layout.cell.size() != layout.layers.size() * layout.roles.size()) {
        throw ConfigError("rank map: modules do not fill the layer x role grid");
    }
    return layout;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string csv_row(const std::vector<std::string>& fields) {
    std::string line;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i > 0) line += ',';
        line += csv_field(fields[i]);
    }
    return line + "\r\n";
}

}  // namespace detail

/// Mean rank per (layer, role) across patterns, then per-role means and
/// per-layer-band means (layers split into up to four contiguous bands).
[[nodiscard]] inline std::string rank_map_csv(const std::vector<RankPattern>& patterns, const RankMapLayout& layout) {
    if (patterns.empty()) {
        throw ConfigError("rank map: no patterns");
    }
    const std::size_t rows = layout.layers.size();
    const std::size_t cols = layout.roles.size();
    std::set<std::string> reference;
    for (const auto& e : patterns.front().entries) {
        reference.insert(e.module_id);
    }
    std::vector<std::vector<double>> grid(rows, std::vector<double>(cols, 0.0));
    for (const auto& p : patterns) {
        std::set<std::string> ids;
        for (const auto& e : p.entries) {
            ids.insert(e.module_id);
        }
        if (ids != reference || ids.size() != layout.cell.size()) {
            throw ModuleSetError("rank map: patterns do not share one module set");
        }
        for (const auto& e : p.entries) {
            const auto it = layout.cell.find(e.module_id);
            if (it == layout.cell.end()) {
                throw ModuleSetError("rank map: module '" + e.module_id + "' missing from layout");
            }
            grid[it->second.first][it->second.second] += static_cast<double>(e.rank);
        }
    }
    const auto seeds = static_cast<double>(patterns.size());
    for (auto& row : grid) {
        for (double& v : row) {
            v /= seeds;
        }
    }
    std::string out;
    std::vector<std::string> header{"layer"};
    header.insert(header.end(), layout.roles.begin(), layout.roles.end());
    out += detail::csv_row(header);
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<std::string> f{std::to_string(layout.layers[r])};
        for (std::size_t c = 0; c < cols; ++c) {
            f.push_back(format_double(grid[r][c]));
        }
        out += detail::csv_row(f);
    }
    std::vector<std::string> role_mean{"role_mean"};
    for (std::size_t c = 0; c < cols; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            s += grid[r][c];
        }
        role_mean.push_back(format_double(s / static_cast<double>(rows)));
    }
    out += detail::csv_row(role_mean);
    const std::size_t bands = std::min<std::size_t>(4, rows);
    for (std::size_t b = 0; b < bands; ++b) {
        const std::size_t lo = b * rows / bands;
        const std::size_t hi = (b + 1) * rows / bands;  // exclusive
        std::vector<std::string> f{"band_" + std::to_string(layout.layers[lo]) + "-" +
                                   std::to_string(layout.layers[hi - 1])};
        for (std::size_t c = 0; c < cols; ++c) {
            double s = 0.0;
            for (std::size_t r = lo; r < hi; ++r) {
                s += grid[r][c];
            }
            f.push_back(format_double(s / static_cast<double>(hi - lo)));
        }
        out += detail::csv_row(f);
    }
    return out;
}

inline void write_rank_map(const std::vector<RankPattern>& patterns, const RankMapLayout& layout,
                           const std::filesystem::path& path) {
    detail::write_text_file(path, rank_map_csv(patterns, layout));
}

struct SweepRow {
    std::size_t r_min = 0;
    std::size_t n_batches = 0;
    std::uint64_t seed = 0;
    bool ok = true;
    std::string error;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    RankStats stats{};
    double planted_spearman = 0.0;
};

[[nodiscard]] inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = detail::csv_row({"r_min", "n_batches", "seed", "status", "initial_loss", "final_loss",
                                       "frac_at_rmax", "frac_le2", "entropy", "min_rank", "max_rank",
                                       "planted_spearman", "error"});
    for (const auto& r : rows) {
        out += detail::csv_row({std::to_string(r.r_min), std::to_string(r.n_batches), std::to_string(r.seed),
                                r.ok ? "ok" : "failed", r.ok ? format_double(r.initial_loss) : "",
                                r.ok ? format_double(r.final_loss) : "", r.ok ? format_double(r.stats.fraction_at_max) : "",
                                r.ok ? format_double(r.stats.fraction_le2) : "", r.ok ? format_double(r.stats.entropy) : "",
                                r.ok ? std::to_string(r.stats.min_rank) : "", r.ok ? std::to_string(r.stats.max_rank) : "",
                                r.ok ? format_double(r.planted_spearman) : "", r.error});
    }
    return out;
}

inline void write_sweep(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
    detail::write_text_file(path, sweep_csv(rows));
}

}  // namespace fimlora

#endif  // FIMLORA_EXPORT_HPP
