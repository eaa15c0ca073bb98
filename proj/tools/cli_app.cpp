#include "cli_app.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fimlora/allocator.hpp"
#include "fimlora/efim.hpp"
#include "fimlora/errors.hpp"
#include "fimlora/export.hpp"
#include "fimlora/lora.hpp"
#include "fimlora/model.hpp"
#include "fimlora/stats.hpp"

namespace fimlora::cli {

namespace {

using nlohmann::json;

// Derived RNG streams; the model, plant and calibration data all come from the
// top-level seed itself.
constexpr std::uint64_t kBaselineStream = 2;
constexpr std::uint64_t kResizeStream = 3;
constexpr std::uint64_t kTrainStream = 4;
constexpr std::uint64_t kEvalStream = 5;
constexpr std::uint64_t kProbeStream = 6;

constexpr std::size_t kProbeInputs = 64;

void reject_unknown(const json& obj, const char* where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) {
        throw ConfigError(std::string("config: '") + where + "' must be an object");
    }
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; })) {
            throw ConfigError(std::string("config: unknown key '") + it.key() + "' in '" + where + "'");
        }
    }
}

template <class T>
void read_opt(const json& obj, const char* key, T& out, const char* where) {
    if (!obj.contains(key)) {
        return;
    }
    try {
        const auto& v = obj.at(key);
        if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
            if (!v.is_number_unsigned()) {
                throw ConfigError("");
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) {
                throw ConfigError("");
            }
        }
        out = v.get<T>();
    } catch (const std::exception&) {
        throw ConfigError(std::string("config: bad value for '") + where + "." + key + "'");
    }
}

Rng stream(std::uint64_t seed, std::uint64_t id) { return Rng(Rng::derive(seed, id)); }

PlantedTask build_task(const RunConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return make_planted_task(cfg.task, rng);
}

ScoresFile run_calibration(const RunConfig& cfg, std::uint64_t seed, std::size_t n_batches, std::ostream& err) {
    if (n_batches == 0) {
        throw ConfigError("calibration needs n_batches >= 1");
    }
    PlantedTask pt = build_task(cfg, seed);
    err << "calibrate: " << pt.student.num_layers() << " modules, T=" << n_batches << ", seed " << seed << "\n";
    const EfimAccumulator acc = calibrate(pt.student, pt.task, n_batches);
    const auto fisher = acc.finalize();
    ScoresFile out;
    out.scores = score(fisher, cfg.aggregation);
    out.fisher = summarize(fisher);
    out.n_batches = n_batches;
    out.seed = seed;
    const auto v = out.scores.values();
    out.zero_signal = std::all_of(v.begin(), v.end(), [](double s) { return s == 0.0; });
    return out;
}

Allocation run_allocation(const ScoreVector& scores, const RunConfig& cfg, Provenance provenance) {
    const AllocationProblem problem(scores, cfg.base_rank(), cfg.r_min, cfg.effective_r_max());
    return allocate(problem, provenance);
}

PatternMetadata metadata_for(const RunConfig& cfg, std::size_t n_batches, std::string aggregation,
                             std::uint64_t seed) {
    PatternMetadata meta;
    meta.base_rank = cfg.base_rank();
    meta.base_alpha = cfg.task.model.base_alpha;
    meta.calibration = {n_batches, std::move(aggregation), seed, cfg.r_min, cfg.effective_r_max()};
    return meta;
}

void warn_zero_signal(std::ostream& err) {
    err << "warning: every score is zero (no calibration signal); allocation falls back to uniform ranks\n";
}

void write_allocation(const Allocation& alloc, const PatternMetadata& meta, const std::filesystem::path& pattern_path,
                      const std::filesystem::path& trace_path) {
    const auto alphas = alpha_pattern(alloc.pattern, meta.base_alpha, meta.base_rank);
    write_pattern(alloc.pattern, alphas, meta, pattern_path);
    write_trace(alloc, trace_path);
}

struct ResizeOutcome {
    std::string summary;
    bool preserved = true;
    bool ratio_ok = true;
};

/// Resizes every adapter of `model` to the pattern and checks that the
/// network still computes the frozen function on probe inputs.
ResizeOutcome apply_pattern(CalibModel& model, const PatternFile& file, Rng& resize_rng, Rng& probe_rng) {
    const auto ids = model.module_ids();
    std::set<std::string> model_ids(ids.begin(), ids.end());
    std::set<std::string> pattern_ids;
    for (const auto& e : file.pattern.entries) {
        pattern_ids.insert(e.module_id);
    }
    if (model_ids != pattern_ids) {
        throw ModuleSetError("pattern modules do not match the model's modules");
    }
    if (file.metadata.base_rank != model.layer(0).adapter().rank()) {
        throw ConfigError("pattern base_rank " + std::to_string(file.metadata.base_rank) +
                          " differs from the model's base rank " + std::to_string(model.layer(0).adapter().rank()));
    }
    const double ratio = file.metadata.base_alpha / static_cast<double>(file.metadata.base_rank);
    ResizeOutcome out;
    std::ostringstream os;
    os << "module old_rank new_rank old_alpha new_alpha\n";
    for (std::size_t i = 0; i < model.num_layers(); ++i) {
        auto& layer = model.layer(i);
        const LoraAdapter& old = layer.adapter();
        const auto it = std::find_if(file.pattern.entries.begin(), file.pattern.entries.end(),
                                     [&](const ModuleRank& m) { return m.module_id == old.module_id(); });
        LoraAdapter resized = resize(old, it->rank, file.metadata.base_alpha, file.metadata.base_rank, resize_rng);
        os << old.module_id() << " " << old.rank() << " " << resized.rank() << " " << format_double(old.alpha())
           << " " << format_double(resized.alpha()) << "\n";
        out.ratio_ok = out.ratio_ok && resized.scaling() == ratio &&
                      resized.alpha() == alpha_for_rank(file.metadata.base_alpha, file.metadata.base_rank, it->rank);
        layer.set_adapter(std::move(resized));
    }
    for (std::size_t k = 0; k < kProbeInputs; ++k) {
        const Matrix x = gaussian_init(model.input_dim(), 1, probe_rng);
        out.preserved = out.preserved && model_output(model, x) == frozen_forward(model, x);
    }
    os << "function_preserved " << (out.preserved ? "yes" : "no") << "\n";
    os << "ratio_preserved " << (out.ratio_ok ? "yes" : "no") << "\n";
    out.summary = os.str();
    return out;
}

int classify(const std::exception_ptr& ep, std::ostream& err) {
    try {
        std::rethrow_exception(ep);
    } catch (const NumericError& e) {
        err << "error: numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}

struct Overrides {
    std::string config;
    std::size_t n_batches = kDefaultCalibrationBatches;
    std::size_t r_min = 1;
    std::size_t r_max = 0;
    std::size_t base_rank = 0;
    std::string agg = "mean";
    std::uint64_t seed = 0;
    std::string out;
    std::vector<CLI::Option*> opts;

    void attach(CLI::App& app) {
        app.add_option("--config", config, "JSON run config")->check(CLI::ExistingFile);
        opts = {app.add_option("--n-batches", n_batches, "calibration batches T (default 8)"),
                app.add_option("--r-min", r_min, "rank floor (default 1)"),
                app.add_option("--r-max", r_max, "rank ceiling (default 2 x base rank)"),
                app.add_option("--base-rank", base_rank, "uniform base rank r"),
                app.add_option("--agg", agg, "score aggregation")->check(CLI::IsMember({"mean", "max", "l2"})),
                app.add_option("--seed", seed, "top-level seed"),
                app.add_option("--out", out, "output directory")};
    }

    [[nodiscard]] RunConfig resolve() const {
        RunConfig cfg = config.empty() ? RunConfig{} : load_config(config);
        if (opts[0]->count() > 0) cfg.n_batches = n_batches;
        if (opts[1]->count() > 0) cfg.r_min = r_min;
        if (opts[2]->count() > 0) cfg.r_max = r_max;
        if (opts[3]->count() > 0) {
            const double ratio = cfg.task.model.base_alpha / static_cast<double>(cfg.task.model.base_rank);
            cfg.task.model.base_rank = base_rank;
            cfg.task.model.base_alpha = ratio * static_cast<double>(base_rank);
        }
        if (opts[4]->count() > 0) cfg.aggregation = parse_aggregation(agg);
        if (opts[5]->count() > 0) cfg.seed = seed;
        if (opts[6]->count() > 0) cfg.out = out;
        return cfg;
    }
};

void ensure_out_dir(const RunConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out, ec);
    if (ec) {
        throw IoError("cannot create output directory '" + cfg.out.string() + "': " + ec.message());
    }
}

int cmd_calibrate(const RunConfig& cfg, std::ostream& err) {
    ensure_out_dir(cfg);
    const ScoresFile scores = run_calibration(cfg, cfg.seed, cfg.n_batches, err);
    if (scores.zero_signal) {
        warn_zero_signal(err);
    }
    write_scores(scores, cfg.out / "scores.json");
    for (const auto& s : scores.scores.entries()) {
        err << "  " << s.module_id << " " << format_double(s.value) << "\n";
    }
    err << "wrote " << (cfg.out / "scores.json").string() << "\n";
    return kExitOk;
}

int cmd_allocate(const RunConfig& cfg, const std::filesystem::path& scores_path, std::ostream& err) {
    ensure_out_dir(cfg);
    const ScoresFile scores = read_scores(scores_path);
    if (scores.zero_signal) {
        warn_zero_signal(err);
    }
    const Allocation alloc = run_allocation(scores.scores, cfg, Provenance::fim);
    const auto meta = metadata_for(cfg, scores.n_batches, to_string(scores.scores.aggregation()), scores.seed);
    write_allocation(alloc, meta, cfg.out / "pattern.json", cfg.out / "trace.txt");
    err << "allocate: budget " << alloc.pattern.budget << ", ranks";
    for (auto r : alloc.pattern.ranks()) {
        err << " " << r;
    }
    err << "\nwrote " << (cfg.out / "pattern.json").string() << " and " << (cfg.out / "trace.txt").string() << "\n";
    return kExitOk;
}

int cmd_resize(const RunConfig& cfg, const std::filesystem::path& pattern_path, std::ostream& err) {
    ensure_out_dir(cfg);
    const PatternFile file = read_pattern(pattern_path);
    PlantedTask pt = build_task(cfg, cfg.seed);
    Rng resize_rng = stream(cfg.seed, kResizeStream);
    Rng probe_rng = stream(cfg.seed, kProbeStream);
    const ResizeOutcome res = apply_pattern(pt.student, file, resize_rng, probe_rng);
    detail::write_text_file(cfg.out / "resize.txt", res.summary);
    err << res.summary;
    if (!res.preserved || !res.ratio_ok) {
        err << "error: resized model violates function or ratio preservation\n";
        return kExitNumeric;
    }
    return kExitOk;
}

int cmd_report(const RunConfig& cfg, const std::vector<std::string>& pattern_paths, std::ostream& err) {
    ensure_out_dir(cfg);
    std::vector<RankPattern> patterns;
    for (const auto& p : pattern_paths) {
        patterns.push_back(read_pattern(p).pattern);
    }
    std::vector<std::string> ids;
    for (const auto& e : patterns.front().entries) {
        ids.push_back(e.module_id);
    }
    const RankMapLayout layout = layout_from_module_ids(ids);
    write_rank_map(patterns, layout, cfg.out / "rank_map.csv");
    err << "report: " << patterns.size() << " pattern(s), wrote " << (cfg.out / "rank_map.csv").string() << "\n";
    return kExitOk;
}

int cmd_baseline(const RunConfig& cfg, std::ostream& err) {
    ensure_out_dir(cfg);
    const PlantedTask pt = build_task(cfg, cfg.seed);
    Rng rng = stream(cfg.seed, kBaselineStream);
    const ScoreVector scores = random_scores(pt.student.module_ids(), rng);
    const Allocation alloc = run_allocation(scores, cfg, Provenance::random);
    const auto meta = metadata_for(cfg, cfg.n_batches, to_string(cfg.aggregation), cfg.seed);
    write_allocation(alloc, meta, cfg.out / "baseline_pattern.json", cfg.out / "baseline_trace.txt");
    err << "baseline: budget " << alloc.pattern.budget << ", wrote " << (cfg.out / "baseline_pattern.json").string()
        << "\n";
    return kExitOk;
}

SweepRow run_sweep_cell(const RunConfig& base, std::size_t r_min, std::size_t n_batches, std::uint64_t seed,
                        std::ostream& err) {
    SweepRow row;
    row.r_min = r_min;
    row.n_batches = n_batches;
    row.seed = seed;
    RunConfig cfg = base;
    cfg.r_min = r_min;
    const ScoresFile scores = run_calibration(cfg, seed, n_batches, err);
    if (scores.zero_signal) {
        warn_zero_signal(err);
    }
    const Allocation alloc = run_allocation(scores.scores, cfg, Provenance::fim);
    PlantedTask pt = build_task(cfg, seed);
    row.planted_spearman = spearman(pt.task.planted_importance(), scores.scores.values());
    row.stats = rank_stats(alloc.pattern.ranks(), cfg.effective_r_max());
    if (cfg.sweep.finetune) {
        const auto meta = metadata_for(cfg, n_batches, to_string(cfg.aggregation), seed);
        PatternFile file{alloc.pattern, alpha_pattern(alloc.pattern, meta.base_alpha, meta.base_rank), meta};
        Rng resize_rng = stream(seed, kResizeStream);
        Rng probe_rng = stream(seed, kProbeStream);
        const ResizeOutcome res = apply_pattern(pt.student, file, resize_rng, probe_rng);
        if (!res.preserved || !res.ratio_ok) {
            throw NumericError("resize broke function or ratio preservation");
        }
        Rng train_rng = stream(seed, kTrainStream);
        Rng eval_rng = stream(seed, kEvalStream);
        const FinetuneReport ft = finetune(pt.student, pt.task, cfg.finetune.steps, cfg.finetune.lr, train_rng,
                                           eval_rng, cfg.finetune.eval_examples);
        if (!std::isfinite(ft.final_loss)) {
            throw NumericError("fine-tuning diverged");
        }
        row.initial_loss = ft.initial_loss;
        row.final_loss = ft.final_loss;
    }
    return row;
}

int cmd_sweep(const RunConfig& cfg, std::ostream& err) {
    const auto& grid = cfg.sweep;
    if (grid.r_min.empty() || grid.n_batches.empty() || grid.seeds.empty()) {
        throw ConfigError("sweep: r_min, n_batches and seeds lists must be non-empty");
    }
    ensure_out_dir(cfg);
    std::vector<SweepRow> rows;
    int worst = kExitOk;
    for (auto r_min : grid.r_min) {
        for (auto t : grid.n_batches) {
            for (auto seed : grid.seeds) {
                try {
                    rows.push_back(run_sweep_cell(cfg, r_min, t, seed, err));
                } catch (const std::exception&) {
                    std::ostringstream msg;
                    const int code = classify(std::current_exception(), msg);
                    worst = std::max(worst, code);
                    SweepRow failed;
                    failed.r_min = r_min;
                    failed.n_batches = t;
                    failed.seed = seed;
                    failed.ok = false;
                    failed.error = msg.str().substr(0, msg.str().size() - 1);
                    err << "sweep cell r_min=" << r_min << " T=" << t << " seed=" << seed << ": " << failed.error
                        << "\n";
                    rows.push_back(std::move(failed));
                }
            }
        }
    }
    write_sweep(rows, cfg.out / "sweep.csv");
    err << "sweep: " << rows.size() << " rows, wrote " << (cfg.out / "sweep.csv").string() << "\n";
    return worst;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    reject_unknown(j, "<root>", {"seed", "model", "task", "calibration", "allocation", "finetune", "sweep", "output"});
    RunConfig cfg;
    read_opt(j, "seed", cfg.seed, "<root>");
    if (j.contains("model")) {
        const auto& m = j.at("model");
        reject_unknown(m, "model", {"num_layers", "width", "dims", "activation", "loss", "weight_init", "weight_gain",
                                    "base_rank", "base_alpha"});
        auto& spec = cfg.task.model;
        std::size_t layers = spec.num_layers();
        std::size_t width = spec.dims.front();
        read_opt(m, "num_layers", layers, "model");
        read_opt(m, "width", width, "model");
        spec.dims = ModelSpec::uniform_dims(layers, width);
        read_opt(m, "dims", spec.dims, "model");
        std::string s;
        if (m.contains("activation")) {
            read_opt(m, "activation", s, "model");
            spec.activation = parse_activation(s);
        }
        if (m.contains("loss")) {
            read_opt(m, "loss", s, "model");
            spec.loss = parse_loss(s);
        }
        if (m.contains("weight_init")) {
            read_opt(m, "weight_init", s, "model");
            spec.weight_init = parse_weight_init(s);
        }
        read_opt(m, "weight_gain", spec.weight_gain, "model");
        read_opt(m, "base_rank", spec.base_rank, "model");
        read_opt(m, "base_alpha", spec.base_alpha, "model");
    }
    if (j.contains("task")) {
        const auto& t = j.at("task");
        reject_unknown(t, "task", {"perturbed_layers", "magnitude", "batch_size"});
        read_opt(t, "perturbed_layers", cfg.task.perturbed_layers, "task");
        read_opt(t, "magnitude", cfg.task.magnitude, "task");
        read_opt(t, "batch_size", cfg.task.batch_size, "task");
    }
    if (j.contains("calibration")) {
        const auto& c = j.at("calibration");
        reject_unknown(c, "calibration", {"n_batches", "aggregation"});
        read_opt(c, "n_batches", cfg.n_batches, "calibration");
        if (c.contains("aggregation")) {
            std::string s;
            read_opt(c, "aggregation", s, "calibration");
            cfg.aggregation = parse_aggregation(s);
        }
    }
    if (j.contains("allocation")) {
        const auto& a = j.at("allocation");
        reject_unknown(a, "allocation", {"r_min", "r_max"});
        read_opt(a, "r_min", cfg.r_min, "allocation");
        read_opt(a, "r_max", cfg.r_max, "allocation");
    }
    if (j.contains("finetune")) {
        const auto& f = j.at("finetune");
        reject_unknown(f, "finetune", {"steps", "lr", "eval_examples"});
        read_opt(f, "steps", cfg.finetune.steps, "finetune");
        read_opt(f, "lr", cfg.finetune.lr, "finetune");
        read_opt(f, "eval_examples", cfg.finetune.eval_examples, "finetune");
    }
    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        reject_unknown(s, "sweep", {"r_min", "n_batches", "seeds", "finetune"});
        read_opt(s, "r_min", cfg.sweep.r_min, "sweep");
        read_opt(s, "n_batches", cfg.sweep.n_batches, "sweep");
        read_opt(s, "seeds", cfg.sweep.seeds, "sweep");
        read_opt(s, "finetune", cfg.sweep.finetune, "sweep");
    }
    if (j.contains("output")) {
        const auto& o = j.at("output");
        reject_unknown(o, "output", {"dir"});
        std::string dir;
        read_opt(o, "dir", dir, "output");
        if (!dir.empty()) {
            cfg.out = dir;
        }
    }
    if (cfg.finetune.eval_examples == 0) {
        throw ConfigError("config: finetune.eval_examples must be positive");
    }
    if (!(cfg.finetune.lr > 0.0) || !std::isfinite(cfg.finetune.lr)) {
        throw ConfigError("config: finetune.lr must be positive and finite");
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("cannot read config '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

int run_cli(const std::vector<std::string>& args, std::ostream& err) {
    CLI::App app{"Fisher-guided LoRA rank allocation on a planted teacher-student task", "fimlora-cli"};
    app.require_subcommand(1);

    Overrides calib_o, alloc_o, resize_o, report_o, base_o, sweep_o;
    std::string scores_path;
    std::string pattern_path;
    std::vector<std::string> report_patterns;
    std::vector<std::size_t> grid_r_min;
    std::vector<std::size_t> grid_t;
    std::vector<std::uint64_t> grid_seeds;
    bool no_finetune = false;

    auto* calib = app.add_subcommand("calibrate", "estimate eFIM scores and write scores.json");
    calib_o.attach(*calib);
    auto* alloc = app.add_subcommand("allocate", "allocate ranks from a scores file");
    alloc_o.attach(*alloc);
    alloc->add_option("--scores", scores_path, "scores file (default <out>/scores.json)");
    auto* rsz = app.add_subcommand("resize", "resize the model's adapters to a pattern and verify");
    resize_o.attach(*rsz);
    rsz->add_option("--pattern", pattern_path, "pattern file (default <out>/pattern.json)");
    auto* report = app.add_subcommand("report", "write a layer x role rank map from pattern files");
    report_o.attach(*report);
    report->add_option("--pattern", report_patterns, "pattern file(s) (default <out>/pattern.json)");
    auto* base = app.add_subcommand("baseline", "random-score allocation at the same budget");
    base_o.attach(*base);
    auto* sweep = app.add_subcommand("sweep", "r_min x n_batches grid over seeds");
    sweep_o.attach(*sweep);
    auto* g_r = sweep->add_option("--grid-r-min", grid_r_min, "r_min values")->delimiter(',');
    auto* g_t = sweep->add_option("--grid-n-batches", grid_t, "n_batches values")->delimiter(',');
    auto* g_s = sweep->add_option("--seeds", grid_seeds, "seeds")->delimiter(',');
    sweep->add_flag("--no-finetune", no_finetune, "skip the toy fine-tuning step");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        err << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        err << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (calib->parsed()) {
            return cmd_calibrate(calib_o.resolve(), err);
        }
        if (alloc->parsed()) {
            const RunConfig cfg = alloc_o.resolve();
            return cmd_allocate(cfg, scores_path.empty() ? cfg.out / "scores.json" : std::filesystem::path(scores_path), err);
        }
        if (rsz->parsed()) {
            const RunConfig cfg = resize_o.resolve();
            return cmd_resize(cfg, pattern_path.empty() ? cfg.out / "pattern.json" : std::filesystem::path(pattern_path), err);
        }
        if (report->parsed()) {
            const RunConfig cfg = report_o.resolve();
            if (report_patterns.empty()) {
                report_patterns.push_back((cfg.out / "pattern.json").string());
            }
            return cmd_report(cfg, report_patterns, err);
        }
        if (base->parsed()) {
            return cmd_baseline(base_o.resolve(), err);
        }
        RunConfig cfg = sweep_o.resolve();
        if (g_r->count() > 0) cfg.sweep.r_min = grid_r_min;
        if (g_t->count() > 0) cfg.sweep.n_batches = grid_t;
        if (g_s->count() > 0) cfg.sweep.seeds = grid_seeds;
        if (no_finetune) cfg.sweep.finetune = false;
        return cmd_sweep(cfg, err);
    } catch (const std::exception&) {
        return classify(std::current_exception(), err);
    }
}

}  // namespace fimlora::cli
