#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fimlora/allocator.hpp"
#include "fimlora/export.hpp"

namespace fs = std::filesystem;
using fimlora::PatternMetadata;
using fimlora::RankPattern;
using fimlora::Rng;

namespace {

struct Sample {
    RankPattern pattern;
    PatternMetadata meta;
};

Sample example_pattern() {
    Sample s;
    s.pattern.entries = {{"layers.0.proj", 8}, {"layers.1.proj", 4}, {"layers.2.proj", 2}, {"layers.3.proj", 2}};
    s.pattern.budget = 16;
    s.meta.base_rank = 4;
    s.meta.base_alpha = 8.0;
    s.meta.calibration = {8, "mean", 0, 1, 8};
    return s;
}

Sample random_pattern(Rng& rng) {
    auto pick = [&](std::size_t lo, std::size_t hi) {
        return lo + static_cast<std::size_t>(rng.uniform() * static_cast<double>(hi - lo + 1));
    };
    const std::size_t n = pick(1, 64);
    const std::size_t r = pick(1, 16);
    const std::size_t lo = pick(1, r);
    const std::size_t hi = pick(r, 4 * r);
    std::vector<double> scores;
    for (std::size_t i = 0; i < n; ++i) scores.push_back(std::exp(2.0 * rng.normal()));
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) {
        ids.push_back("blocks." + std::to_string(i) + (rng.uniform() < 0.5 ? ".attn.v" : ".mlp, \"odd\""));
    }
    const auto prov = static_cast<fimlora::Provenance>(pick(0, 2));
    Sample s;
    s.pattern = fimlora::allocate({fimlora::ScoreVector::from_values(ids, scores), r, lo, hi}, prov).pattern;
    s.meta.base_rank = r;
    s.meta.base_alpha = static_cast<double>(r) * (0.1 + 4.0 * rng.uniform());
    s.meta.calibration = {pick(1, 64), rng.uniform() < 0.5 ? "mean" : "l2", rng.next_u64(), lo, hi};
    return s;
}

std::string text_of(const Sample& s) {
    return fimlora::pattern_to_string(s.pattern, fimlora::alpha_pattern(s.pattern, s.meta.base_alpha, s.meta.base_rank),
                                      s.meta);
}

nlohmann::json json_of(const Sample& s) { return nlohmann::json::parse(text_of(s)); }

class TempDir : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("fimlora_export_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    fs::path dir_;
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST(AlphaPattern, RatioAppliedPerModule) {
    const auto s = example_pattern();
    const auto alphas = fimlora::alpha_pattern(s.pattern, 8.0, 4);
    std::vector<double> values;
    for (const auto& a : alphas) values.push_back(a.alpha);
    EXPECT_EQ(values, (std::vector<double>{16, 8, 4, 4}));
}

TEST_F(TempDir, WriteThenReadExamplePattern) {
    const auto s = example_pattern();
    const auto alphas = fimlora::alpha_pattern(s.pattern, 8.0, 4);
    fimlora::write_pattern(s.pattern, alphas, s.meta, dir_ / "p.json");
    const auto back = fimlora::read_pattern(dir_ / "p.json");
    EXPECT_EQ(back.pattern, s.pattern);
    EXPECT_EQ(back.alphas, alphas);
    EXPECT_EQ(back.metadata, s.meta);
}

TEST_F(TempDir, TwoWritesAreByteIdentical) {
    const auto s = example_pattern();
    const auto alphas = fimlora::alpha_pattern(s.pattern, 8.0, 4);
    fimlora::write_pattern(s.pattern, alphas, s.meta, dir_ / "a.json");
    fimlora::write_pattern(s.pattern, alphas, s.meta, dir_ / "b.json");
    EXPECT_EQ(slurp(dir_ / "a.json"), slurp(dir_ / "b.json"));
}

TEST_F(TempDir, UnwritablePathIsIoError) {
    const auto s = example_pattern();
    EXPECT_THROW(fimlora::write_pattern(s.pattern, fimlora::alpha_pattern(s.pattern, 8.0, 4), s.meta,
                                        dir_ / "missing" / "p.json"),
                 fimlora::IoError);
    EXPECT_THROW((void)fimlora::read_pattern(dir_ / "nope.json"), fimlora::IoError);
}

TEST(PatternCanonical, KeysSortedAndSchemaVersioned) {
    const std::string text = text_of(example_pattern());
    const auto j = nlohmann::json::parse(text);
    EXPECT_EQ(j.at("schema_version"), 1);
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
    EXPECT_EQ(text.back(), '\n');
    EXPECT_NE(text.find("\"base_alpha\": 8.0"), std::string::npos) << text;
}

TEST(PatternRoundTrip, FiveHundredRandomPatterns) {
    Rng rng(2025);
    for (int i = 0; i < 600; ++i) {
        const Sample s = random_pattern(rng);
        const std::string text = text_of(s);
        const auto back = fimlora::parse_pattern(text);
        ASSERT_EQ(back.pattern, s.pattern) << i;
        ASSERT_EQ(back.metadata, s.meta) << i;
        ASSERT_EQ(back.alphas, fimlora::alpha_pattern(s.pattern, s.meta.base_alpha, s.meta.base_rank)) << i;
        ASSERT_EQ(fimlora::pattern_to_string(back.pattern, back.alphas, back.metadata), text) << i;
    }
}

TEST(PatternRoundTrip, RatioWithoutExactAlphaIsAccepted) {
    Sample s;
    s.pattern.entries = {{"layers.0.proj", 25}, {"layers.1.proj", 1}};
    s.pattern.budget = 26;
    s.meta.base_rank = 13;
    s.meta.base_alpha = 13.0 / 3.0;
    s.meta.calibration = {8, "mean", 0, 1, 26};
    const auto back = fimlora::parse_pattern(text_of(s));
    EXPECT_EQ(back.alphas[0].alpha, fimlora::alpha_for_rank(13.0 / 3.0, 13, 25));
}

TEST(PatternRejection, MalformedJson) {
    EXPECT_THROW((void)fimlora::parse_pattern("{ not json"), fimlora::MalformedFileError);
    EXPECT_THROW((void)fimlora::parse_pattern("[1, 2]"), fimlora::MalformedFileError);
    auto j = json_of(example_pattern());
    j["base_rank"] = "four";
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::MalformedFileError);
    j = json_of(example_pattern());
    j.erase("calibration");
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::MalformedFileError);
    j = json_of(example_pattern());
    j["rank_pattern"]["layers.0.proj"] = 8.5;
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::MalformedFileError);
}

TEST(PatternRejection, UnknownSchema) {
    auto j = json_of(example_pattern());
    j["schema_version"] = 2;
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::UnknownSchemaError);
}

TEST(PatternRejection, BudgetMismatch) {
    auto j = json_of(example_pattern());
    j["budget"] = 17;
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::BudgetMismatchError);
    j = json_of(example_pattern());
    j["rank_pattern"]["layers.1.proj"] = 5;
    j["alpha_pattern"]["layers.1.proj"] = 10.0;
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::BudgetMismatchError);
}

TEST(PatternRejection, RatioMismatch) {
    auto j = json_of(example_pattern());
    j["alpha_pattern"]["layers.2.proj"] = 4.000000000000001;
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::RatioMismatchError);
}

TEST(PatternRejection, RankOutsideBounds) {
    auto j = json_of(example_pattern());
    j["calibration"]["r_min"] = 3;
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::RankBoundsError);
    j = json_of(example_pattern());
    j["calibration"]["r_max"] = 7;
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::RankBoundsError);
    j = json_of(example_pattern());
    j["rank_pattern"]["layers.2.proj"] = 0;
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::RankBoundsError);
}

TEST(PatternRejection, ModuleSetMismatch) {
    auto j = json_of(example_pattern());
    j["alpha_pattern"].erase("layers.3.proj");
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::ModuleSetError);
    j = json_of(example_pattern());
    j["module_order"].push_back("layers.0.proj");
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::ModuleSetError);
    j = json_of(example_pattern());
    j["rank_pattern"]["extra"] = 1;
    EXPECT_THROW((void)fimlora::parse_pattern(j.dump()), fimlora::ModuleSetError);
}

TEST(PatternRejection, EveryErrorIsAPatternFormatError) {
    auto j = json_of(example_pattern());
    j["budget"] = 3;
    try {
        (void)fimlora::parse_pattern(j.dump());
        FAIL();
    } catch (const fimlora::PatternFormatError& e) {
        EXPECT_EQ(e.kind(), "budget_mismatch");
    }
}

TEST(ScoresFileTest, RoundTripAndCanonical) {
    fimlora::ScoresFile f;
    f.scores = fimlora::ScoreVector::from_values({"layers.0.proj", "layers.1.proj"}, {0.1, 1e-7},
                                                 fimlora::Aggregation::max);
    f.fisher = {{"layers.0.proj", 0.0, 0.05, 0.1}, {"layers.1.proj", 1e-9, 5e-8, 1e-7}};
    f.n_batches = 8;
    f.seed = 18446744073709551615ULL;
    const std::string text = fimlora::scores_to_string(f);
    const auto back = fimlora::parse_scores(text);
    EXPECT_EQ(back.scores, f.scores);
    EXPECT_EQ(back.n_batches, 8U);
    EXPECT_EQ(back.seed, f.seed);
    EXPECT_FALSE(back.zero_signal);
    ASSERT_EQ(back.fisher.size(), 2U);
    EXPECT_EQ(back.fisher[1].max, 1e-7);
    EXPECT_EQ(fimlora::scores_to_string(back), text);
}

TEST(ScoresFileTest, RejectsBadScores) {
    EXPECT_THROW((void)fimlora::parse_scores("{}"), fimlora::MalformedFileError);
    const std::string negative =
        R"({"aggregation":"mean","module_order":["a"],"n_batches":1,"schema_version":1,"scores":{"a":-1.0},"seed":0,"zero_signal":false})";
    EXPECT_THROW((void)fimlora::parse_scores(negative), fimlora::MalformedFileError);
    const std::string missing =
        R"({"aggregation":"mean","module_order":["a","b"],"n_batches":1,"schema_version":1,"scores":{"a":1.0},"seed":0,"zero_signal":false})";
    EXPECT_THROW((void)fimlora::parse_scores(missing), fimlora::ModuleSetError);
}

TEST(FormatDouble, ShortestRoundTrip) {
    EXPECT_EQ(fimlora::format_double(0.1), "0.1");
    EXPECT_EQ(fimlora::format_double(2.0), "2");
    Rng rng(4);
    for (int i = 0; i < 1000; ++i) {
        const double v = std::ldexp(rng.uniform_open(), static_cast<int>(rng.uniform() * 100) - 50);
        EXPECT_EQ(std::stod(fimlora::format_double(v)), v);
    }
}

TEST(TraceText, DeterministicAndMentionsEveryStage) {
    const auto a = fimlora::allocate({fimlora::ScoreVector::from_values({100, 100, 1, 1}), 4, 2, 8});
    const std::string t = fimlora::trace_to_string(a);
    EXPECT_EQ(t, fimlora::trace_to_string(a));
    EXPECT_NE(t.find("phase1 iter 0"), std::string::npos);
    EXPECT_NE(t.find("phase2 leftover 2"), std::string::npos);
    EXPECT_NE(t.find("floor deficit 4"), std::string::npos);
    EXPECT_NE(t.find("donor m1 -1"), std::string::npos);
}

TEST(RankMap, SinglePatternSingleRoleEqualsPatternColumn) {
    const auto s = example_pattern();
    const auto layout = fimlora::layout_from_module_ids({"layers.0.proj", "layers.1.proj", "layers.2.proj",
                                                         "layers.3.proj"});
    const std::string csv = fimlora::rank_map_csv({s.pattern}, layout);
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "layer,proj\r");
    for (const auto& [layer, rank] : std::vector<std::pair<int, int>>{{0, 8}, {1, 4}, {2, 2}, {3, 2}}) {
        std::getline(is, line);
        EXPECT_EQ(line, std::to_string(layer) + "," + std::to_string(rank) + "\r");
    }
    std::getline(is, line);
    EXPECT_EQ(line, "role_mean,4\r");
    std::getline(is, line);
    EXPECT_EQ(line, "band_0-0,8\r");
}

TEST(RankMap, MeansAcrossSeedsAndRoles) {
    RankPattern a;
    a.entries = {{"layers.0.q", 1}, {"layers.0.v", 3}, {"layers.1.q", 2}, {"layers.1.v", 2}};
    RankPattern b;
    b.entries = {{"layers.0.q", 2}, {"layers.0.v", 2}, {"layers.1.q", 1}, {"layers.1.v", 3}};
    std::vector<std::string> ids{"layers.0.q", "layers.0.v", "layers.1.q", "layers.1.v"};
    const std::string csv = fimlora::rank_map_csv({a, b}, fimlora::layout_from_module_ids(ids));
    EXPECT_EQ(csv,
              "layer,q,v\r\n0,1.5,2.5\r\n1,1.5,2.5\r\nrole_mean,1.5,2.5\r\nband_0-0,1.5,2.5\r\nband_1-1,1.5,2.5\r\n");
}

TEST(RankMap, ModuleSetMismatchAcrossSeedsRejected) {
    RankPattern a;
    a.entries = {{"layers.0.proj", 1}, {"layers.1.proj", 1}};
    RankPattern b;
    b.entries = {{"layers.0.proj", 1}, {"layers.2.proj", 1}};
    const auto layout = fimlora::layout_from_module_ids({"layers.0.proj", "layers.1.proj"});
    EXPECT_THROW((void)fimlora::rank_map_csv({a, b}, layout), fimlora::ModuleSetError);
}

TEST(RankMap, LayoutRejectsUnstructuredIds) {
    EXPECT_THROW((void)fimlora::layout_from_module_ids({"m0"}), fimlora::ConfigError);
    EXPECT_THROW((void)fimlora::layout_from_module_ids({"layers.x.proj"}), fimlora::ConfigError);
    EXPECT_THROW((void)fimlora::layout_from_module_ids({"layers.0.q", "layers.1.v"}), fimlora::ConfigError);
}

TEST(SweepCsv, QuotesAndFailedRows) {
    fimlora::SweepRow ok;
    ok.r_min = 1;
    ok.n_batches = 8;
    ok.final_loss = 0.5;
    fimlora::SweepRow bad;
    bad.ok = false;
    bad.error = "bad, \"quoted\"";
    const std::string csv = fimlora::sweep_csv({ok, bad});
    EXPECT_NE(csv.find("\"bad, \"\"quoted\"\"\""), std::string::npos) << csv;
    EXPECT_NE(csv.find(",failed,"), std::string::npos);
}
