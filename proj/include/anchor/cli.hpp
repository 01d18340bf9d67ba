#pragma once

// `anchorlab` command line. Every subcommand reads one config file plus
// --set overrides and prints a JSON summary on stdout. Failures print one
// JSON error record on stderr and exit nonzero:
//   2 invalid config, 64 usage error, 1 anything else.

#include "anchor/annotation.hpp"
#include "anchor/annotator.hpp"
#include "anchor/config.hpp"
#include "anchor/experiments.hpp"
#include "anchor/http_transport.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace anchor {

inline constexpr int kExitConfig = 2;
inline constexpr int kExitUsage = 64;
inline constexpr int kExitFailure = 1;

inline void print_error(std::ostream& err, std::string_view kind, const std::string& message,
                        const std::string& path = "") {
    nlohmann::ordered_json e{{"kind", kind}, {"message", message}};
    if (!path.empty()) e["path"] = path;
    err << nlohmann::ordered_json{{"error", e}}.dump() << '\n';
}

struct CommonOptions {
    std::optional<std::string> config;
    std::vector<std::string> set;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config, "JSON config file");
        cmd->add_option("--set", set, "override a config field, key=value (repeatable)")->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        cmd->add_option("--seed", seed, "master seed (overrides the config)");
        cmd->add_option("--out", out, "output path");
    }

    ExperimentConfig load() const {
        std::vector<std::string> overrides = set;
        if (seed) overrides.push_back("seed=" + std::to_string(*seed));
        return load_config(config ? std::optional<std::filesystem::path>(*config) : std::nullopt, overrides);
    }
};

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"anchorlab: annotation-anchored training experiments on a synthetic story world", "anchorlab"};
    app.require_subcommand(1);
    app.footer(
        "Subcommands: gen-world, annotate, pretrain, posttrain, sample, eval, study {controlled|ablation|likelihood|"
        "temperature}");

    CommonOptions opts;

    auto* gen = app.add_subcommand("gen-world", "write the world spec, vocabulary and pretraining shards");
    opts.attach(gen);

    auto* annotate = app.add_subcommand("annotate", "annotate text through the configured endpoint");
    opts.attach(annotate);
    std::string annotate_input;
    bool annotate_responses = false;
    annotate->add_option("--input", annotate_input, "JSONL with a \"text\" field per line")->required();
    annotate->add_flag("--responses", annotate_responses, "treat each text as one response instead of a chunked document");

    auto* pretrain = app.add_subcommand("pretrain", "train one pretraining lineage from scratch");
    opts.attach(pretrain);

    auto* posttrain = app.add_subcommand("posttrain", "post-train a lineage checkpoint");
    opts.attach(posttrain);

    auto* sample = app.add_subcommand("sample", "sample generations from a checkpoint");
    opts.attach(sample);

    auto* eval = app.add_subcommand("eval", "semantic entropy and dissimilarity of a generations file");
    opts.attach(eval);

    auto* study = app.add_subcommand("study", "run a study and write results/<study>/<hash>/");
    opts.attach(study);
    std::string study_name;
    study->add_option("name", study_name, "controlled | ablation | likelihood | temperature")
        ->required()
        ->check(CLI::IsMember({"controlled", "ablation", "likelihood", "temperature"}));

    if (argc > 1 && argv[1][0] != '-') {
        const std::string name = argv[1];
        bool known = false;
        for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == name;
        if (!known) {
            print_error(err, "usage", "unknown subcommand '" + name + "'");
            return kExitUsage;
        }
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        print_error(err, "usage", e.what());
        return kExitUsage;
    }

    auto emit = [&](const nlohmann::ordered_json& j, const std::optional<std::string>& path) {
        if (path) write_file_atomic(*path, j.dump(2) + "\n");
        out << j.dump() << '\n';
    };

    try {
        ExperimentConfig cfg = opts.load();
        if (*gen) {
            if (opts.out) cfg.data_dir = *opts.out;
            const auto s = generate_world(cfg);
            emit({{"data_dir", cfg.data_dir}, {"documents", s.documents}, {"shards", s.shards}, {"vocab_size", s.vocab_size}},
                 std::nullopt);
        } else if (*annotate) {
            AnnotatorClient client(cfg.annotator, std::make_shared<HttplibTransport>());
            std::ifstream in(annotate_input);
            if (!in) throw std::runtime_error("cannot read " + annotate_input);
            std::vector<std::string> texts;
            std::string line;
            while (std::getline(in, line)) {
                if (!line.empty()) texts.push_back(nlohmann::json::parse(line).at("text").get<std::string>());
            }
            // documents are split into chunks and each chunk is annotated
            std::vector<std::string> units;
            std::vector<std::size_t> owner;
            for (std::size_t i = 0; i < texts.size(); ++i) {
                if (annotate_responses) {
                    units.push_back(texts[i]);
                    owner.push_back(i);
                } else {
                    for (auto& c : chunk_document(texts[i])) {
                        units.push_back(std::move(c));
                        owner.push_back(i);
                    }
                }
            }
            const auto results = client.annotate_batch(units, annotate_responses);
            std::vector<nlohmann::ordered_json> records(texts.size());
            for (std::size_t i = 0; i < texts.size(); ++i) records[i] = {{"index", i}, {"chunks", nlohmann::ordered_json::array()}};
            std::size_t failures = 0;
            for (std::size_t u = 0; u < units.size(); ++u) {
                nlohmann::ordered_json tags = nlohmann::ordered_json::array();
                for (const auto& t : results[u].first.tags) tags.push_back({{"key", t.key}, {"value", t.value}});
                nlohmann::ordered_json c{{"text", units[u]}, {"tags", tags}, {"dropped", results[u].first.dropped}};
                if (!results[u].second.empty()) {
                    c["error"] = results[u].second;
                    ++failures;
                }
                records[owner[u]]["chunks"].push_back(c);
            }
            std::string body;
            for (const auto& r : records) body += r.dump() + '\n';
            const std::string path = opts.out.value_or(annotate_input + ".annotated.jsonl");
            write_file_atomic(path, body);
            emit({{"output", path},
                  {"texts", texts.size()},
                  {"requests", units.size()},
                  {"failures", failures},
                  {"cache_hits", client.stats().cache_hits.load()},
                  {"dropped_items", client.stats().dropped_items.load()}},
                 std::nullopt);
            return failures ? kExitFailure : 0;
        } else if (*pretrain) {
            Workspace ws(cfg);
            const std::string lineage = cfg.pretrain.regime == Regime::PretrainAnnotated ? "annotated" : "standard";
            const std::string path = opts.out.value_or(cfg.checkpoint_for(lineage));
            const auto s = run_pretrain(ws, path);
            emit({{"checkpoint", path},
                  {"regime", to_string(cfg.pretrain.regime)},
                  {"documents", s.documents},
                  {"steps", s.steps},
                  {"tokens", s.tokens},
                  {"final_loss", s.final_loss},
                  {"parameter_hash", s.parameter_hash}},
                 std::nullopt);
        } else if (*posttrain) {
            Workspace ws(cfg);
            const Lineage init = ws.load_lineage(cfg.posttrain.init);
            SftModel m = train_sft(ws, init, cfg.posttrain.regime, cfg.posttrain.restriction, cfg.posttrain.examples);
            const std::string path = opts.out.value_or(
                (std::filesystem::path(cfg.work_dir) / ("posttrain-" + std::string(to_string(cfg.posttrain.regime)) + ".ck"))
                    .string());
            CheckpointMeta meta;
            meta.regime = std::string(to_string(m.regime));
            meta.lineage = "pretrain-" + m.lineage;
            meta.config_hash = ws.config_hash({&init});
            meta.metrics["chosen_lr"] = m.chosen_lr;
            save_checkpoint(path, m.model, ws.vocab(), meta);
            emit({{"checkpoint", path},
                  {"regime", meta.regime},
                  {"lineage", meta.lineage},
                  {"examples", m.examples},
                  {"chosen_lr", m.chosen_lr},
                  {"parameter_hash", m.hash}},
                 std::nullopt);
        } else if (*sample) {
            Workspace ws(cfg);
            if (cfg.sample.checkpoint.empty()) throw ConfigError("sample.checkpoint", "no checkpoint given");
            const auto ck = load_checkpoint<float>(cfg.sample.checkpoint, &ws.vocab());
            SampleConfig sc;
            sc.temperature = cfg.sample.temperature;
            sc.top_p = cfg.sample.top_p;
            sc.max_new_tokens = cfg.sample.max_new_tokens;
            sc.mode = cfg.sample.mode;
            sc.seed = derive_seed(cfg.seed, seeds::kSampling);
            const auto gens = batch_generate(ck.model, ws.vocab(), ws.prompts(cfg.sample.n), sc);
            std::string body;
            std::size_t ff = 0;
            for (const auto& g : gens) {
                body += to_json(g).dump() + '\n';
                ff += g.format_failure;
            }
            const std::string path = opts.out.value_or((std::filesystem::path(cfg.work_dir) / "generations.jsonl").string());
            write_file_atomic(path, body);
            emit({{"output", path}, {"generations", gens.size()}, {"format_failures", ff}}, std::nullopt);
        } else if (*eval) {
            Workspace ws(cfg);
            if (cfg.eval.generations.empty()) throw ConfigError("eval.generations", "no generations file given");
            emit(evaluate_generations(ws, read_generations(cfg.eval.generations)), opts.out);
        } else if (*study) {
            if (opts.out) cfg.output_dir = *opts.out;
            Workspace ws(cfg);
            if (cfg.judge) ws.set_judge_transport(std::make_shared<HttplibTransport>());
            const StudyResult r = run_study(ws, study_name);
            emit({{"study", r.study},
                  {"directory", r.dir.string()},
                  {"rows", r.rows.size()},
                  {"config_hash", r.config_hash},
                  {"summary", r.summary}},
                 std::nullopt);
        }
    } catch (const ConfigError& e) {
        print_error(err, "config", e.what(), e.path());
        return kExitConfig;
    } catch (const LineageMissing& e) {
        print_error(err, "missing-lineage", e.what(), e.lineage());
        return kExitFailure;
    } catch (const std::exception& e) {
        print_error(err, "runtime", e.what());
        return kExitFailure;
    }
    return 0;
}

}  // namespace anchor
