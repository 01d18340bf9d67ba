#include "anchor/cli.hpp"
#include "anchor/config.hpp"
#include "anchor/experiments.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

using namespace anchor;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out, err;
    nlohmann::json error() const { return nlohmann::json::parse(err).at("error"); }
};

CliResult cli(std::vector<std::string> args) {
    args.insert(args.begin(), "anchorlab");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

// Tiny but complete configuration rooted in a fresh directory.
fs::path tiny_project(const std::string& name) {
    const fs::path root = fs::temp_directory_path() / ("anchor_e2e_" + name);
    fs::remove_all(root);
    fs::create_directories(root);
    const nlohmann::json cfg = {
        {"seed", 7},
        {"data_dir", (root / "world").string()},
        {"work_dir", (root / "work").string()},
        {"output_dir", (root / "results").string()},
        {"checkpoints", {{"standard", (root / "work/std.ck").string()}, {"annotated", (root / "work/ann.ck").string()}}},
        {"world", {{"pretrain_docs", 400}, {"shard_size", 150}}},
        {"model", {{"layers", 1}, {"dim", 16}, {"heads", 2}, {"ff_mult", 2}, {"context", 256}}},
        {"pretrain", {{"token_budget", 20000}, {"batch_size", 8}}},
        {"posttrain", {{"examples", 48}, {"batch_size", 8}, {"lr_candidates", {1e-3}}}},
        {"sample", {{"n", 12}, {"max_new_tokens", 40}}},
        {"eval", {{"bootstrap", 50}}},
        {"studies", {{"topic_levels", {5, 48}}, {"persona_levels", {8, 23}}, {"likelihood_sizes", {16, 32}},
                     {"validation_examples", 16}, {"temperatures", {0.7, 1.0}}}}};
    std::ofstream(root / "config.json") << cfg.dump(2);
    return root;
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughJson) {
    const ExperimentConfig c = load_config(std::nullopt);
    const auto j = to_json(c);
    const ExperimentConfig back = parse_config(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(to_json(back).dump(), j.dump());
    EXPECT_EQ(c.model.dim, 128u);
    EXPECT_EQ(c.sample.n, 256u);
    EXPECT_FALSE(c.judge.has_value());
}

TEST(Config, ErrorsNameTheOffendingField) {
    auto path_of = [](const nlohmann::json& j) {
        try {
            parse_config(j);
        } catch (const ConfigError& e) {
            return e.path();
        }
        return std::string("<no error>");
    };
    EXPECT_EQ(path_of({{"model", {{"dmi", 3}}}}), "model.dmi");
    EXPECT_EQ(path_of({{"model", {{"dim", "big"}}}}), "model.dim");
    EXPECT_EQ(path_of({{"model", {{"dim", 30}, {"heads", 4}}}}), "model.dim");
    EXPECT_EQ(path_of({{"posttrain", {{"lr_candidates", {1e-3, -1.0}}}}}), "posttrain.lr_candidates[1]");
    EXPECT_EQ(path_of({{"posttrain", {{"regime", "pretrain-standard"}}}}), "posttrain.regime");
    EXPECT_EQ(path_of({{"sample", {{"top_p", 0}}}}), "sample.top_p");
    EXPECT_EQ(path_of({{"seed", -1}}), "seed");
    EXPECT_EQ(path_of({{"bogus", 1}}), "bogus");
}

TEST(Config, OverridesApplyInOrder) {
    const auto c = load_config(std::nullopt, {"model.dim=64", "sample.mode=plain", "posttrain.lr_candidates=[1e-4,3e-4]",
                                              "data_dir=/tmp/w", "model.dim=32"});
    EXPECT_EQ(c.model.dim, 32u);
    EXPECT_EQ(c.sample.mode, SampleMode::Plain);
    EXPECT_EQ(c.posttrain.lr_candidates, (std::vector<double>{1e-4, 3e-4}));
    EXPECT_EQ(c.data_dir, "/tmp/w");
    EXPECT_THROW(load_config(std::nullopt, {"nonsense"}), ConfigError);
}

TEST(Config, RestrictionAcceptsPrefixOrNames) {
    const auto c = load_config(std::nullopt, {R"(posttrain.restriction={"topic":3,"persona":["a poet","a father"]})"});
    const auto r = c.posttrain.restriction.resolve(default_world_spec());
    EXPECT_EQ(r.support(default_world_spec(), Attribute::Topic), 3u);
    EXPECT_EQ(r.support(default_world_spec(), Attribute::Persona), 2u);
    EXPECT_EQ(r.support(default_world_spec(), Attribute::Entity), 32u);
}

TEST(Config, EnvironmentInterpolation) {
    ::setenv("ANCHOR_TEST_URL", "http://judge:9000/v1", 1);
    const auto c = parse_config(
        {{"judge", {{"base_url", "${ANCHOR_TEST_URL}"}, {"model", "m"}, {"prompt_template", "rate {response}"}}}});
    ASSERT_TRUE(c.judge.has_value());
    EXPECT_EQ(c.judge->endpoint.base_url, "http://judge:9000/v1");
    ::unsetenv("ANCHOR_TEST_URL");
    try {
        parse_config({{"annotator", {{"base_url", "${ANCHOR_TEST_URL}"}}}});
        FAIL() << "missing variable accepted";
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.path(), "annotator.base_url");
    }
}

TEST(Cli, HelpListsSubcommands) {
    const auto r = cli({"--help"});
    EXPECT_EQ(r.code, 0);
    for (const char* s : {"gen-world", "annotate", "pretrain", "posttrain", "sample", "eval", "study"}) {
        EXPECT_NE(r.out.find(s), std::string::npos) << s;
    }
}

TEST(Cli, UsageAndConfigErrorsAreStructured) {
    auto r = cli({"frobnicate"});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_EQ(r.error().at("kind"), "usage");
    r = cli({"study", "nonsense"});
    EXPECT_EQ(r.code, kExitUsage);
    r = cli({"gen-world", "--set", "model.dim=abc"});
    EXPECT_EQ(r.code, kExitConfig);
    EXPECT_EQ(r.error().at("path"), "model.dim");
    r = cli({"gen-world", "--config", "/nonexistent/config.json"});
    EXPECT_EQ(r.code, kExitConfig);
}

TEST(Cli, MissingLineageIsReported) {
    const auto root = tiny_project("missing");
    const std::string cfg = (root / "config.json").string();
    ASSERT_EQ(cli({"gen-world", "--config", cfg}).code, 0);
    const auto r = cli({"study", "ablation", "--config", cfg});
    EXPECT_EQ(r.code, kExitFailure);
    EXPECT_EQ(r.error().at("kind"), "missing-lineage");
    EXPECT_NE(r.error().at("message").get<std::string>().find("pretrain"), std::string::npos);
    fs::remove_all(root);
}

TEST(EndToEnd, TinyPipelineProducesSixRowAblation) {
    const auto root = tiny_project("pipeline");
    const std::string cfg = (root / "config.json").string();
    ASSERT_EQ(cli({"gen-world", "--config", cfg}).code, 0);
    auto r = cli({"pretrain", "--config", cfg, "--set", "pretrain.regime=pretrain-standard"});
    ASSERT_EQ(r.code, 0) << r.err;
    r = cli({"pretrain", "--config", cfg, "--set", "pretrain.regime=pretrain-annotated"});
    ASSERT_EQ(r.code, 0) << r.err;
    r = cli({"posttrain", "--config", cfg});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(nlohmann::json::parse(r.out).at("checkpoint").get<std::string>()));

    r = cli({"study", "ablation", "--config", cfg});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto summary = nlohmann::json::parse(r.out);
    EXPECT_EQ(summary.at("rows"), 6);
    const fs::path dir = summary.at("directory").get<std::string>();
    const std::string csv = read_file(dir / "metrics.csv");
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n';
    EXPECT_EQ(lines, 7u);
    EXPECT_EQ(csv.substr(0, csv.find(',')), "study");
    for (const char* cond : {"base-standard", "base-annotated", "sft-standard", "anchored",
                             "anchored-from-standard-pretraining", "anchored-without-inference-annotations"}) {
        EXPECT_NE(csv.find(std::string(",") + cond + ","), std::string::npos) << cond;
    }
    const auto report = nlohmann::json::parse(read_file(dir / "report.json"));
    EXPECT_EQ(report.at("rows").size(), 6u);
    EXPECT_TRUE(report.at("summary").contains("anchored_vs"));

    // same inputs, fresh work dir (no SFT cache): byte-identical metrics
    const std::string again_out = (root / "results2").string();
    r = cli({"study", "ablation", "--config", cfg, "--set", "work_dir=" + (root / "work2").string(), "--out", again_out});
    ASSERT_EQ(r.code, 0) << r.err;
    const fs::path dir2 = nlohmann::json::parse(r.out).at("directory").get<std::string>();
    EXPECT_EQ(dir2.filename(), dir.filename());
    EXPECT_EQ(read_file(dir2 / "metrics.csv"), csv);

    // sample then eval on the posttrained checkpoint
    const std::string ck = (root / "work" / "posttrain-sft-anchored.ck").string();
    r = cli({"sample", "--config", cfg, "--set", "sample.checkpoint=" + ck});
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string gens = nlohmann::json::parse(r.out).at("output");
    r = cli({"eval", "--config", cfg, "--set", "eval.generations=" + gens});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto ev = nlohmann::json::parse(r.out);
    EXPECT_TRUE(ev.contains("entropy"));
    fs::remove_all(root);
}

TEST(EndToEnd, OtherStudiesRunOnTinyWorld) {
    const auto root = tiny_project("studies");
    const std::string cfg = (root / "config.json").string();
    ASSERT_EQ(cli({"gen-world", "--config", cfg}).code, 0);
    ASSERT_EQ(cli({"pretrain", "--config", cfg, "--set", "pretrain.regime=pretrain-standard"}).code, 0);
    ASSERT_EQ(cli({"pretrain", "--config", cfg, "--set", "pretrain.regime=pretrain-annotated"}).code, 0);
    for (const auto& [study, rows] : std::vector<std::pair<std::string, int>>{{"controlled", 8}, {"likelihood", 4}, {"temperature", 4}}) {
        const auto r = cli({"study", study, "--config", cfg});
        ASSERT_EQ(r.code, 0) << study << ": " << r.err;
        const auto s = nlohmann::json::parse(r.out);
        EXPECT_EQ(s.at("rows"), rows) << study;
    }
    fs::remove_all(root);
}
