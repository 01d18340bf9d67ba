#pragma once

// Experiment harness: world generation, the two pretraining lineages, SFT
// runs, and the four studies (controlled, ablation, likelihood, temperature).
// Each study writes results/<study>/<hash>/{metrics.csv, generations.jsonl,
// report.json}, where <hash> covers the config, the world files and the
// contents of the lineage checkpoints.

#include "anchor/annotator.hpp"
#include "anchor/config.hpp"
#include "anchor/evaluation.hpp"
#include "anchor/hash.hpp"
#include "anchor/sampler.hpp"
#include "anchor/trainer.hpp"
#include "anchor/world.hpp"

#include <json.hpp>

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

namespace anchor {

namespace fs = std::filesystem;

class LineageMissing : public std::runtime_error {
public:
    LineageMissing(const std::string& lineage, const std::string& path)
        : std::runtime_error("missing " + lineage + " lineage: checkpoint " + path +
                             " not found (run `anchorlab pretrain --set pretrain.regime=pretrain-" + lineage +
                             " --out " + path + "`)"),
          lineage_(lineage) {}
    const std::string& lineage() const noexcept { return lineage_; }

private:
    std::string lineage_;
};

// Master-seed streams.
namespace seeds {
inline constexpr std::uint64_t kCorpus = 1, kInit = 2, kPretrain = 3, kSftData = 4, kSftTrain = 5, kSampling = 6,
                               kBootstrap = 7, kValidation = 8;
}

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

/// Writes through a temporary file and a rename.
inline void write_file_atomic(const fs::path& p, const std::string& content) {
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out << content;
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
    }
    fs::rename(tmp, p);
}

/// SHA-256 over the float32 image of every parameter, in declared order.
template <class T>
std::string parameter_hash(const Transformer<T>& model) {
    std::string bytes;
    for (const auto& p : model.parameters()) {
        for (T v : p.values()) {
            const float f = static_cast<float>(v);
            bytes.append(reinterpret_cast<const char*>(&f), sizeof f);
        }
    }
    return short_hash(bytes, 16);
}

inline std::string fixed(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// ---------------------------------------------------------------------------
// World files: <data_dir>/world.json, vocab.txt, pretrain/shard-*.jsonl

struct WorldSummary {
    std::size_t documents = 0;
    std::size_t shards = 0;
    std::size_t vocab_size = 0;
};

inline WorldSpec configured_world(const ExperimentConfig& cfg) {
    return cfg.world.spec_file.empty() ? default_world_spec() : load_world_spec(cfg.world.spec_file);
}

inline WorldSummary generate_world(const ExperimentConfig& cfg) {
    const WorldSpec spec = configured_world(cfg);
    const Vocab vocab = build_world_vocab(spec);
    const fs::path dir = cfg.data_dir;
    fs::create_directories(dir);
    write_file_atomic(dir / "world.json", to_json(spec).dump(2) + "\n");
    vocab.save(dir / "vocab.txt");
    const auto docs = build_pretraining_corpus(spec, cfg.world.pretrain_docs, derive_seed(cfg.seed, seeds::kCorpus),
                                               cfg.world.instruction_fraction);
    const fs::path shards = dir / "pretrain";
    if (fs::exists(shards)) fs::remove_all(shards);
    const auto files = write_shards(shards, docs, cfg.world.shard_size);
    return {docs.size(), files.size(), vocab.size()};
}

struct Lineage {
    std::string name;  // standard | annotated
    Transformer<float> model;
    std::string hash;
};

/// Everything a study needs besides the lineages.
class Workspace {
public:
    explicit Workspace(ExperimentConfig cfg, std::ostream* progress = &std::clog) : cfg_(std::move(cfg)), progress_(progress) {
        const fs::path dir = cfg_.data_dir;
        if (!fs::exists(dir / "world.json") || !fs::exists(dir / "vocab.txt")) {
            throw std::runtime_error("world files missing under " + dir.string() + " (run `anchorlab gen-world` first)");
        }
        const std::string world_text = read_file(dir / "world.json");
        world_ = world_spec_from_json(nlohmann::json::parse(world_text));
        vocab_ = Vocab::load(dir / "vocab.txt");
        world_hash_ = short_hash(world_text + "\n" + vocab_hash(vocab_), 16);
        labeler_.emplace(world_.catalogs);
    }

    const ExperimentConfig& config() const noexcept { return cfg_; }
    const WorldSpec& world() const noexcept { return world_; }
    const Vocab& vocab() const noexcept { return vocab_; }
    const ExactLabeler& labeler() const { return *labeler_; }
    const std::string& world_hash() const noexcept { return world_hash_; }
    void set_judge_transport(std::shared_ptr<Transport> t) { judge_transport_ = std::move(t); }
    const std::shared_ptr<Transport>& judge_transport() const noexcept { return judge_transport_; }

    void log(const std::string& msg) const {
        if (!progress_) return;
        const auto t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        *progress_ << "[" << fixed(t, 1) << "s] " << msg << std::endl;
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.vocab_size = vocab_.size();
        m.context = cfg_.model.context;
        m.layers = cfg_.model.layers;
        m.dim = cfg_.model.dim;
        m.heads = cfg_.model.heads;
        m.ff_mult = cfg_.model.ff_mult;
        m.init_scale = cfg_.model.init_scale;
        m.seed = derive_seed(cfg_.seed, seeds::kInit);
        return m;
    }

    Lineage load_lineage(const std::string& name) const {
        const std::string& path = cfg_.checkpoint_for(name);
        if (!fs::exists(path)) throw LineageMissing(name, path);
        auto ck = load_checkpoint<float>(path, &vocab_);
        const std::string expected = "pretrain-" + name;
        if (ck.meta.regime != expected) {
            throw std::runtime_error("checkpoint " + path + " holds regime " + ck.meta.regime + ", expected " + expected);
        }
        std::string h = parameter_hash(ck.model);
        return {name, std::move(ck.model), std::move(h)};
    }

    /// Prompts cycled up to n, from the prompts file or the world's templates.
    std::vector<std::string> prompts(std::size_t n) const {
        std::vector<std::string> base;
        if (!cfg_.sample.prompts_file.empty()) {
            std::ifstream in(cfg_.sample.prompts_file);
            if (!in) throw ConfigError("sample.prompts_file", "cannot read " + cfg_.sample.prompts_file);
            std::string line;
            while (std::getline(in, line)) {
                if (!line.empty()) base.push_back(line);
            }
            if (base.empty()) throw ConfigError("sample.prompts_file", "no prompts in " + cfg_.sample.prompts_file);
        } else {
            base = world_.prompt_templates;
        }
        std::vector<std::string> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) out.push_back(base[i % base.size()]);
        return out;
    }

    /// Hash of the scientific content of a run: config without paths, the
    /// world files and the lineage weights.
    std::string config_hash(const std::vector<const Lineage*>& lineages) const {
        auto j = to_json(cfg_);
        for (const char* k : {"data_dir", "work_dir", "output_dir", "checkpoints", "annotator"}) j.erase(k);
        j["sample"].erase("checkpoint");
        j["eval"].erase("generations");
        if (!j["judge"].is_null()) j["judge"].erase("cache_dir");
        j["world_hash"] = world_hash_;
        for (const Lineage* l : lineages) j["lineages"][l->name] = l->hash;
        return short_hash(j.dump(), 16);
    }

private:
    ExperimentConfig cfg_;
    std::ostream* progress_;
    WorldSpec world_;
    Vocab vocab_;
    std::string world_hash_;
    std::optional<ExactLabeler> labeler_;
    std::shared_ptr<Transport> judge_transport_;
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// Training entry points.

inline TrainConfig pretrain_config(const ExperimentConfig& cfg) {
    TrainConfig t;
    t.regime = cfg.pretrain.regime;
    t.lr_candidates = {cfg.pretrain.lr};
    t.batch_size = cfg.pretrain.batch_size;
    t.token_budget = cfg.pretrain.token_budget;
    t.warmup_ratio = cfg.pretrain.warmup_ratio;
    t.adamw = cfg.pretrain.adamw;
    t.seed = derive_seed(cfg.seed, seeds::kPretrain);
    return t;
}

inline TrainConfig posttrain_config(const ExperimentConfig& cfg, Regime regime) {
    const auto& p = cfg.posttrain;
    TrainConfig t;
    t.regime = regime;
    t.lr_candidates = p.lr_candidates;
    t.batch_size = p.batch_size;
    t.epochs = p.epochs;
    t.warmup_ratio = p.warmup_ratio;
    t.partial_unmask_prob = p.partial_unmask_prob;
    t.validation_fraction = p.validation_fraction;
    t.adamw = p.adamw;
    t.seed = derive_seed(cfg.seed, seeds::kSftTrain);
    return t;
}

struct PretrainSummary {
    std::size_t documents = 0;
    std::size_t steps = 0;
    std::size_t tokens = 0;
    double final_loss = 0.0;
    std::string parameter_hash;
};

/// Trains one lineage from scratch on the corpus shards and saves it.
/// The training log goes to <out>.log.jsonl.
inline PretrainSummary run_pretrain(const Workspace& ws, const fs::path& out) {
    const auto& cfg = ws.config();
    const Regime regime = cfg.pretrain.regime;
    const auto docs = read_shards(fs::path(cfg.data_dir) / "pretrain");
    if (docs.empty()) throw std::runtime_error("no pretraining shards under " + cfg.data_dir);
    auto examples = pretraining_examples(docs, ws.vocab(), regime, cfg.pretrain.token_budget);
    std::size_t used = 0;
    for (const auto& e : examples) used += e.ids.size();
    if (examples.size() == docs.size() && used < cfg.pretrain.token_budget) {
        ws.log("warning: corpus exhausted at " + std::to_string(used) + " of " +
               std::to_string(cfg.pretrain.token_budget) + " tokens; raise world.pretrain_docs");
    }
    ws.log("pretraining " + std::string(to_string(regime)) + " on " + std::to_string(examples.size()) + " documents (" +
           std::to_string(used) + " tokens)");
    Transformer<float> model(ws.model_config());
    const TrainConfig tc = pretrain_config(cfg);
    if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
    std::ofstream log(out.string() + ".log.jsonl");
    const auto outcome = train_epochs(model, examples, tc, cfg.pretrain.lr, &log);
    CheckpointMeta meta;
    meta.regime = std::string(to_string(regime));
    meta.lineage = meta.regime;
    meta.step = outcome.steps;
    meta.tokens = outcome.tokens;
    meta.config_hash = ws.config_hash({});
    const double final_loss = outcome.log.empty() ? 0.0 : outcome.log.back().loss;
    meta.metrics["final_loss"] = final_loss;
    save_checkpoint(out, model, ws.vocab(), meta);
    ws.log("saved " + out.string());
    return {examples.size(), outcome.steps, outcome.tokens, final_loss, parameter_hash(model)};
}

struct SftModel {
    Transformer<float> model;
    std::string hash;
    double chosen_lr = 0.0;
    std::string lineage;
    Regime regime = Regime::SftStandard;
    std::size_t examples = 0;
};

inline SftDataset sft_dataset(const Workspace& ws, const RestrictionSpec& r, std::size_t n) {
    return build_posttraining_subset(ws.world(), n, r.resolve(ws.world()),
                                     derive_seed(ws.config().seed, seeds::kSftData));
}

/// Post-trains a copy of the lineage. Results are cached under
/// <work_dir>/sft-cache keyed by everything that determines the weights.
inline SftModel train_sft(const Workspace& ws, const Lineage& init, Regime regime, const RestrictionSpec& restriction,
                          std::size_t n_examples) {
    const auto& cfg = ws.config();
    auto key_json = to_json(cfg)["posttrain"];
    key_json.erase("init");
    key_json["regime"] = to_string(regime);
    key_json["examples"] = n_examples;
    key_json["restriction"] = config_detail::restriction_json(restriction);
    key_json["init_hash"] = init.hash;
    key_json["world_hash"] = ws.world_hash();
    key_json["seed"] = cfg.seed;
    const std::string key = short_hash(key_json.dump(), 20);
    const fs::path cache = fs::path(cfg.work_dir) / "sft-cache" / (key + ".ck");
    const std::string label = std::string(to_string(regime)) + " from " + init.name + " (" +
                              key_json["restriction"].dump() + ", " + std::to_string(n_examples) + " examples)";
    if (fs::exists(cache)) {
        auto ck = load_checkpoint<float>(cache, &ws.vocab());
        ws.log("cached " + label);
        SftModel m{std::move(ck.model), "", ck.meta.metrics.at("chosen_lr"), init.name, regime, n_examples};
        m.hash = parameter_hash(m.model);
        return m;
    }
    ws.log("training " + label);
    const auto data = sft_dataset(ws, restriction, n_examples);
    auto all = sft_examples(data.examples, ws.vocab(), regime);
    TrainConfig tc = posttrain_config(cfg, regime);
    std::vector<Example> train, val;
    if (tc.lr_candidates.size() > 1) {
        const auto [ti, vi] = split_validation(all.size(), tc.validation_fraction, tc.seed);
        for (auto i : ti) train.push_back(all[i]);
        for (auto i : vi) val.push_back(all[i]);
    } else {
        train = std::move(all);
    }
    auto res = posttrain(init.model, train, val, tc);
    CheckpointMeta meta;
    meta.regime = std::string(to_string(regime));
    meta.lineage = "pretrain-" + init.name;
    meta.step = res.outcome.steps;
    meta.tokens = res.outcome.tokens;
    meta.config_hash = key;
    meta.metrics["chosen_lr"] = res.chosen_lr;
    save_checkpoint(cache, res.model, ws.vocab(), meta);
    SftModel m{std::move(res.model), "", res.chosen_lr, init.name, regime, n_examples};
    m.hash = parameter_hash(m.model);
    return m;
}

// ---------------------------------------------------------------------------
// Evaluation of one condition.

struct MetricRow {
    std::string study;
    std::string condition;
    std::string regime;
    std::string lineage;
    std::string sample_mode;
    std::size_t sft_examples = 0;
    double temperature = 1.0;
    std::optional<DatasetEntropy> dataset;
    EntropyReport entropy;
    std::optional<double> dissimilarity;
    std::optional<double> validation_ll;
    std::optional<double> quality;
    std::size_t format_failures = 0;
    std::size_t errors = 0;
    std::optional<double> chosen_lr;
    std::string checkpoint_hash;
};

inline const std::vector<std::string>& metrics_columns() {
    static const std::vector<std::string> cols = {
        "study",           "condition",       "regime",        "lineage",        "sample_mode",
        "sft_examples",    "temperature",     "dataset_topic_bits", "dataset_persona_bits", "samples",
        "mean_entropy_bits", "ci95_low",      "ci95_high",     "topic_bits",     "persona_bits",
        "entity_bits",     "location_bits",   "dissimilarity", "validation_ll",  "quality",
        "format_failures", "errors",          "chosen_lr",     "checkpoint_hash", "config_hash",
        "seed"};
    return cols;
}

inline std::string csv_row(const MetricRow& r, const std::string& config_hash, std::uint64_t seed) {
    auto opt = [](const std::optional<double>& v) { return v ? fixed(*v) : std::string(); };
    std::optional<double> dt, dp;
    if (r.dataset) {
        dt = r.dataset->bits[index_of(Attribute::Topic)];
        dp = r.dataset->bits[index_of(Attribute::Persona)];
    }
    std::vector<std::string> f = {r.study,
                                  r.condition,
                                  r.regime,
                                  r.lineage,
                                  r.sample_mode,
                                  std::to_string(r.sft_examples),
                                  fixed(r.temperature, 2),
                                  opt(dt),
                                  opt(dp),
                                  std::to_string(r.entropy.samples),
                                  fixed(r.entropy.mean),
                                  fixed(r.entropy.ci_low),
                                  fixed(r.entropy.ci_high),
                                  fixed(r.entropy.category("topic")),
                                  fixed(r.entropy.category("persona")),
                                  fixed(r.entropy.category("entity")),
                                  fixed(r.entropy.category("location")),
                                  opt(r.dissimilarity),
                                  opt(r.validation_ll),
                                  opt(r.quality),
                                  std::to_string(r.format_failures),
                                  std::to_string(r.errors),
                                  opt(r.chosen_lr),
                                  r.checkpoint_hash,
                                  config_hash,
                                  std::to_string(seed)};
    std::string line;
    for (std::size_t i = 0; i < f.size(); ++i) {
        if (i) line += ',';
        line += f[i];
    }
    return line;
}

inline nlohmann::ordered_json to_json(const MetricRow& r) {
    nlohmann::ordered_json j{{"condition", r.condition},   {"regime", r.regime},
                             {"lineage", r.lineage},       {"sample_mode", r.sample_mode},
                             {"sft_examples", r.sft_examples}, {"temperature", r.temperature},
                             {"entropy", to_json(r.entropy)}};
    j["dissimilarity"] = r.dissimilarity ? nlohmann::ordered_json(*r.dissimilarity) : nlohmann::ordered_json(nullptr);
    j["validation_ll"] = r.validation_ll ? nlohmann::ordered_json(*r.validation_ll) : nlohmann::ordered_json(nullptr);
    j["quality"] = r.quality ? nlohmann::ordered_json(*r.quality) : nlohmann::ordered_json(nullptr);
    j["format_failures"] = r.format_failures;
    j["errors"] = r.errors;
    j["checkpoint_hash"] = r.checkpoint_hash;
    return j;
}

/// Mean judge score over the generations, or nullopt without a judge.
inline std::optional<double> judge_quality(const Workspace& ws, const std::vector<Generation>& gens) {
    const auto& judge = ws.config().judge;
    if (!judge) return std::nullopt;
    if (!ws.judge_transport()) throw std::runtime_error("judge configured but no transport available");
    AnnotatorClient client(judge->endpoint, ws.judge_transport());
    static const std::regex number(R"([-+]?[0-9]+(\.[0-9]+)?)");
    std::vector<std::string> prompts;
    for (const auto& g : gens) {
        std::string p = judge->prompt_template;
        if (p.find("{prompt}") != std::string::npos) p = substitute(p, "prompt", g.prompt);
        prompts.push_back(substitute(p, "response", g.response));
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : prompts) {
        const std::string reply = client.complete(p);
        std::smatch m;
        if (std::regex_search(reply, m, number)) {
            sum += std::stod(m.str());
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

struct ConditionSpec {
    std::string condition;
    std::string regime;
    std::string lineage;
    SampleMode mode = SampleMode::Anchored;
    std::size_t sft_examples = 0;
    double temperature = 1.0;
    std::optional<DatasetEntropy> dataset;
    std::optional<double> chosen_lr;
};

struct StudyResult {
    std::string study;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::vector<MetricRow> rows;
    nlohmann::ordered_json summary = nlohmann::ordered_json::object();
    std::vector<nlohmann::ordered_json> generations;
    fs::path dir;
};

/// Samples N generations, labels them exactly and records one row.
inline MetricRow evaluate_condition(const Workspace& ws, const Transformer<float>& model, const std::string& model_hash,
                                    const ConditionSpec& c, StudyResult& result, bool with_quality = false) {
    const auto& cfg = ws.config();
    SampleConfig sc;
    sc.temperature = c.temperature;
    sc.top_p = cfg.sample.top_p;
    sc.max_new_tokens = cfg.sample.max_new_tokens;
    sc.mode = c.mode;
    sc.seed = derive_seed(cfg.seed, seeds::kSampling);
    const auto gens = batch_generate(model, ws.vocab(), ws.prompts(cfg.sample.n), sc);
    MetricRow row;
    row.study = result.study;
    row.condition = c.condition;
    row.regime = c.regime;
    row.lineage = c.lineage;
    row.sample_mode = std::string(to_string(c.mode));
    row.sft_examples = c.sft_examples;
    row.temperature = c.temperature;
    row.dataset = c.dataset;
    row.chosen_lr = c.chosen_lr;
    row.checkpoint_hash = model_hash;
    row.entropy = semantic_entropy(label_with_exact(gens, ws.labeler()), attribute_categories(),
                                   {cfg.eval.bootstrap, cfg.eval.confidence, derive_seed(cfg.seed, seeds::kBootstrap)});
    row.entropy.dataset = c.dataset;
    if (auto d = response_dissimilarity(gens, ws.vocab())) row.dissimilarity = d->value;
    for (const auto& g : gens) {
        row.format_failures += g.format_failure;
        row.errors += !g.error.empty();
        auto j = to_json(g);
        j["condition"] = c.condition;
        j["config_hash"] = result.config_hash;
        j["master_seed"] = result.seed;
        result.generations.push_back(std::move(j));
    }
    if (with_quality) row.quality = judge_quality(ws, gens);
    ws.log(result.study + "/" + c.condition + ": mean entropy " + fixed(row.entropy.mean, 3) + " bits [" +
           fixed(row.entropy.ci_low, 3) + ", " + fixed(row.entropy.ci_high, 3) + "], format failures " +
           std::to_string(row.format_failures));
    return row;
}

// ---------------------------------------------------------------------------
// Output.

class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& dir) {
        fs::create_directories(dir);
        const auto path = dir / ".lock";
        fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ < 0) throw std::runtime_error("cannot open " + path.string());
        if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(fd_);
            throw std::runtime_error("study directory " + dir.string() + " is in use by another process");
        }
    }
    ~DirectoryLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    int fd_ = -1;
};

inline std::string metrics_csv(const StudyResult& r) {
    std::string out;
    const auto& cols = metrics_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (i) out += ',';
        out += cols[i];
    }
    out += '\n';
    for (const auto& row : r.rows) out += csv_row(row, r.config_hash, r.seed) + '\n';
    return out;
}

inline void write_study(const StudyResult& r, const ExperimentConfig& cfg) {
    std::string gens;
    for (const auto& g : r.generations) gens += g.dump() + '\n';
    nlohmann::ordered_json report;
    report["study"] = r.study;
    report["config_hash"] = r.config_hash;
    report["master_seed"] = r.seed;
    report["summary"] = r.summary;
    report["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : r.rows) report["rows"].push_back(to_json(row));
    report["config"] = to_json(cfg);
    write_file_atomic(r.dir / "metrics.csv", metrics_csv(r));
    write_file_atomic(r.dir / "generations.jsonl", gens);
    write_file_atomic(r.dir / "report.json", report.dump(2) + "\n");
}

inline StudyResult begin_study(const Workspace& ws, const std::string& study, const std::vector<const Lineage*>& lineages) {
    StudyResult r;
    r.study = study;
    r.seed = ws.config().seed;
    r.config_hash = ws.config_hash(lineages);
    r.dir = fs::path(ws.config().output_dir) / study / r.config_hash;
    return r;
}

// ---------------------------------------------------------------------------
// Studies.

inline ConditionSpec sft_condition(const std::string& name, const SftModel& m, SampleMode mode,
                                   const DatasetEntropy& dataset, double temperature) {
    return {name, std::string(to_string(m.regime)), "pretrain-" + m.lineage, mode, m.examples, temperature, dataset,
            m.chosen_lr};
}

/// Output entropy against dataset entropy: each restriction level of the
/// topic and persona families, for standard and anchored SFT.
inline StudyResult run_controlled_study(const Workspace& ws) {
    const auto& cfg = ws.config();
    const Lineage standard = ws.load_lineage("standard");
    const Lineage annotated = ws.load_lineage("annotated");
    StudyResult r = begin_study(ws, "controlled", {&standard, &annotated});
    DirectoryLock lock(r.dir);
    struct Family {
        Attribute attr;
        const std::vector<std::size_t>* levels;
    };
    nlohmann::ordered_json slopes, gaps, table;
    for (const Family& fam : {Family{Attribute::Topic, &cfg.studies.topic_levels},
                              Family{Attribute::Persona, &cfg.studies.persona_levels}}) {
        const std::string fname(name_of(fam.attr));
        std::vector<double> x, y_std, y_anc;
        for (std::size_t k : *fam.levels) {
            const auto rs = RestrictionSpec::only(fam.attr, k);
            const DatasetEntropy de = dataset_entropy(ws.world(), rs.resolve(ws.world()));
            const std::string cond = fname + "-" + std::to_string(k);
            const SftModel s = train_sft(ws, standard, Regime::SftStandard, rs, cfg.posttrain.examples);
            r.rows.push_back(evaluate_condition(ws, s.model, s.hash, sft_condition(cond, s, SampleMode::Plain, de, 1.0), r));
            const SftModel a = train_sft(ws, annotated, Regime::SftAnchored, rs, cfg.posttrain.examples);
            r.rows.push_back(evaluate_condition(ws, a.model, a.hash, sft_condition(cond, a, SampleMode::Anchored, de, 1.0), r));
            x.push_back(de.bits[index_of(fam.attr)]);
            y_std.push_back(r.rows[r.rows.size() - 2].entropy.category(fname));
            y_anc.push_back(r.rows.back().entropy.category(fname));
            table[fname].push_back({{"level", k},
                                    {"dataset_bits", x.back()},
                                    {"sft-standard", y_std.back()},
                                    {"anchored", y_anc.back()}});
        }
        slopes[fname] = {{"sft-standard", ols_slope(x, y_std)}, {"anchored", ols_slope(x, y_anc)}};
        const std::size_t lo = static_cast<std::size_t>(std::min_element(x.begin(), x.end()) - x.begin());
        gaps[fname] = y_anc[lo] - y_std[lo];
    }
    r.summary["output_vs_dataset_entropy"] = table;
    r.summary["slopes"] = slopes;
    r.summary["gap_at_lowest_dataset_entropy"] = gaps;
    write_study(r, cfg);
    return r;
}

/// The six-row ablation: both base models, standard SFT, anchored SFT,
/// anchored SFT from the standard lineage, and anchored SFT sampled with an
/// empty annotation.
inline StudyResult run_ablation_grid(const Workspace& ws) {
    const auto& cfg = ws.config();
    const Lineage standard = ws.load_lineage("standard");
    const Lineage annotated = ws.load_lineage("annotated");
    StudyResult r = begin_study(ws, "ablation", {&standard, &annotated});
    DirectoryLock lock(r.dir);
    const auto& rs = cfg.posttrain.restriction;
    const DatasetEntropy de = dataset_entropy(ws.world(), rs.resolve(ws.world()));
    const double T = cfg.sample.temperature;

    r.rows.push_back(evaluate_condition(
        ws, standard.model, standard.hash,
        {"base-standard", "pretrain-standard", "pretrain-standard", SampleMode::Plain, 0, T, std::nullopt, std::nullopt}, r));
    r.rows.push_back(evaluate_condition(ws, annotated.model, annotated.hash,
                                        {"base-annotated", "pretrain-annotated", "pretrain-annotated",
                                         SampleMode::Anchored, 0, T, std::nullopt, std::nullopt},
                                        r));
    const SftModel s = train_sft(ws, standard, Regime::SftStandard, rs, cfg.posttrain.examples);
    r.rows.push_back(evaluate_condition(ws, s.model, s.hash, sft_condition("sft-standard", s, SampleMode::Plain, de, T), r));
    const SftModel a = train_sft(ws, annotated, Regime::SftAnchored, rs, cfg.posttrain.examples);
    r.rows.push_back(evaluate_condition(ws, a.model, a.hash, sft_condition("anchored", a, SampleMode::Anchored, de, T), r));
    const SftModel af = train_sft(ws, standard, Regime::SftAnchoredUnmasked, rs, cfg.posttrain.examples);
    r.rows.push_back(evaluate_condition(
        ws, af.model, af.hash, sft_condition("anchored-from-standard-pretraining", af, SampleMode::Anchored, de, T), r));
    r.rows.push_back(evaluate_condition(
        ws, a.model, a.hash,
        sft_condition("anchored-without-inference-annotations", a, SampleMode::NoAnnotation, de, T), r));

    const MetricRow& anc = r.rows[3];
    nlohmann::ordered_json cmp;
    for (std::size_t i : {std::size_t{2}, std::size_t{4}, std::size_t{5}}) {
        const MetricRow& o = r.rows[i];
        cmp[o.condition] = {{"margin_bits", anc.entropy.mean - o.entropy.mean},
                            {"intervals_disjoint", anc.entropy.ci_low > o.entropy.ci_high}};
    }
    r.summary["anchored_vs"] = cmp;
    write_study(r, cfg);
    return r;
}

/// SFT dataset size sweep for both regimes: validation likelihood of the
/// response and output entropy, with rank correlations per regime.
inline StudyResult run_likelihood_vs_diversity(const Workspace& ws) {
    const auto& cfg = ws.config();
    const Lineage standard = ws.load_lineage("standard");
    const Lineage annotated = ws.load_lineage("annotated");
    StudyResult r = begin_study(ws, "likelihood", {&standard, &annotated});
    DirectoryLock lock(r.dir);
    const auto& rs = cfg.posttrain.restriction;
    const DatasetEntropy de = dataset_entropy(ws.world(), rs.resolve(ws.world()));
    const auto val_data = build_posttraining_subset(ws.world(), cfg.studies.validation_examples, rs.resolve(ws.world()),
                                                    derive_seed(cfg.seed, seeds::kValidation));
    struct Arm {
        Regime regime;
        const Lineage* init;
        SampleMode mode;
        std::string name;
    };
    nlohmann::ordered_json corr;
    for (const Arm& arm : {Arm{Regime::SftStandard, &standard, SampleMode::Plain, "sft-standard"},
                           Arm{Regime::SftAnchored, &annotated, SampleMode::Anchored, "anchored"}}) {
        const auto val = sft_examples(val_data.examples, ws.vocab(), arm.regime);
        std::vector<double> sizes, ent, ll;
        for (std::size_t n : cfg.studies.likelihood_sizes) {
            const SftModel m = train_sft(ws, *arm.init, arm.regime, rs, n);
            MetricRow row = evaluate_condition(
                ws, m.model, m.hash,
                sft_condition(arm.name + "-" + std::to_string(n), m, arm.mode, de, cfg.sample.temperature), r);
            row.validation_ll = validation_likelihood(m.model, val);
            sizes.push_back(static_cast<double>(n));
            ent.push_back(row.entropy.mean);
            ll.push_back(*row.validation_ll);
            r.rows.push_back(std::move(row));
        }
        corr[arm.name] = {{"spearman_size_entropy", spearman(sizes, ent)},
                          {"spearman_likelihood_entropy", spearman(ll, ent)},
                          {"spearman_size_likelihood", spearman(sizes, ll)}};
    }
    r.summary["correlations"] = corr;
    write_study(r, cfg);
    return r;
}

/// Entropy and dissimilarity of standard and anchored SFT across sampling
/// temperatures. Quality is filled only when a judge is configured.
inline StudyResult run_temperature_sweep(const Workspace& ws) {
    const auto& cfg = ws.config();
    const Lineage standard = ws.load_lineage("standard");
    const Lineage annotated = ws.load_lineage("annotated");
    StudyResult r = begin_study(ws, "temperature", {&standard, &annotated});
    DirectoryLock lock(r.dir);
    const auto& rs = cfg.posttrain.restriction;
    const DatasetEntropy de = dataset_entropy(ws.world(), rs.resolve(ws.world()));
    const SftModel s = train_sft(ws, standard, Regime::SftStandard, rs, cfg.posttrain.examples);
    const SftModel a = train_sft(ws, annotated, Regime::SftAnchored, rs, cfg.posttrain.examples);
    nlohmann::ordered_json mono;
    for (const auto& [m, mode, name] : {std::tuple{&s, SampleMode::Plain, std::string("sft-standard")},
                                        std::tuple{&a, SampleMode::Anchored, std::string("anchored")}}) {
        std::vector<double> temps, ent;
        for (double T : cfg.studies.temperatures) {
            r.rows.push_back(evaluate_condition(ws, m->model, m->hash,
                                                sft_condition(name + "@" + fixed(T, 2), *m, mode, de, T), r, true));
            temps.push_back(T);
            ent.push_back(r.rows.back().entropy.mean);
        }
        const auto lo = std::min_element(temps.begin(), temps.end()) - temps.begin();
        const auto hi = std::max_element(temps.begin(), temps.end()) - temps.begin();
        mono[name] = ent[hi] >= ent[lo];
    }
    r.summary["entropy_rises_with_temperature"] = mono;
    r.summary["judge"] = cfg.judge ? nlohmann::ordered_json(cfg.judge->endpoint.model) : nlohmann::ordered_json(nullptr);
    write_study(r, cfg);
    return r;
}

inline StudyResult run_study(const Workspace& ws, const std::string& name) {
    if (name == "controlled") return run_controlled_study(ws);
    if (name == "ablation") return run_ablation_grid(ws);
    if (name == "likelihood") return run_likelihood_vs_diversity(ws);
    if (name == "temperature") return run_temperature_sweep(ws);
    throw std::invalid_argument("unknown study '" + name + "' (expected controlled, ablation, likelihood or temperature)");
}

// ---------------------------------------------------------------------------
// Generation files for the sample and eval subcommands.

inline Generation generation_from_json(const nlohmann::json& j) {
    Generation g;
    g.prompt = j.value("prompt", "");
    g.annotation = j.value("annotation", "");
    g.response = j.value("response", "");
    g.temperature = j.value("temperature", 1.0);
    g.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("flags")) {
        for (const auto& f : j.at("flags")) {
            if (f == "format-failure") g.format_failure = true;
            if (f == "truncated") g.truncated = true;
        }
    }
    g.error = j.value("error", "");
    return g;
}

inline std::vector<Generation> read_generations(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<Generation> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(generation_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

/// Entropy and dissimilarity of a generation file, labeled exactly.
inline nlohmann::ordered_json evaluate_generations(const Workspace& ws, const std::vector<Generation>& gens) {
    const auto& cfg = ws.config();
    const auto rep = semantic_entropy(label_with_exact(gens, ws.labeler()), attribute_categories(),
                                      {cfg.eval.bootstrap, cfg.eval.confidence, derive_seed(cfg.seed, seeds::kBootstrap)});
    nlohmann::ordered_json j{{"entropy", to_json(rep)}};
    const auto d = response_dissimilarity(gens, ws.vocab());
    j["dissimilarity"] = d ? nlohmann::ordered_json(d->value) : nlohmann::ordered_json(nullptr);
    std::size_t ff = 0;
    for (const auto& g : gens) ff += g.format_failure;
    j["format_failures"] = ff;
    return j;
}

}  // namespace anchor
