#pragma once

// Experiment configuration: a JSON tree with a fixed schema. Unknown keys,
// wrong types and out-of-range values are rejected with the dotted path of
// the offending field. Strings may reference environment variables as
// ${NAME}; `--set a.b=value` overrides are applied before validation.

#include "anchor/annotator.hpp"
#include "anchor/hash.hpp"
#include "anchor/sampler.hpp"
#include "anchor/trainer.hpp"
#include "anchor/world.hpp"

#include <json.hpp>

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace anchor {

class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string path, const std::string& message)
        : std::invalid_argument(path.empty() ? message : path + ": " + message), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// Per attribute: the first `prefix` catalog values, or an explicit list of
/// value names. Neither set means unrestricted.
struct RestrictionSpec {
    std::array<std::size_t, kAttributeCount> prefix{};
    std::array<std::vector<std::string>, kAttributeCount> names;

    Restriction resolve(const WorldSpec& spec) const {
        Restriction r;
        for (Attribute a : kAttributes) {
            const auto i = index_of(a);
            if (!names[i].empty()) r.values(spec, a, names[i]);
            else if (prefix[i] > 0) {
                if (prefix[i] > spec.catalogs[a].size()) {
                    throw ConfigError("restriction." + std::string(name_of(a)),
                                      "asks for " + std::to_string(prefix[i]) + " values but the catalog has " +
                                          std::to_string(spec.catalogs[a].size()));
                }
                r.prefix(a, prefix[i]);
            }
        }
        return r;
    }

    static RestrictionSpec only(Attribute a, std::size_t k) {
        RestrictionSpec r;
        r.prefix[index_of(a)] = k;
        return r;
    }
};

struct WorldSettings {
    std::size_t pretrain_docs = 125000;
    double instruction_fraction = 0.3;
    std::size_t shard_size = 20000;
    std::string spec_file;  // empty: built-in world
};

struct ModelSettings {
    std::size_t layers = 2;
    std::size_t dim = 128;
    std::size_t heads = 4;
    std::size_t ff_mult = 4;
    std::size_t context = 256;
    double init_scale = 0.02;
};

struct PretrainSettings {
    Regime regime = Regime::PretrainAnnotated;
    std::size_t token_budget = 5'000'000;
    double lr = 2e-3;
    std::size_t batch_size = 16;
    double warmup_ratio = 0.02;
    AdamWConfig adamw{};
};

struct PosttrainSettings {
    Regime regime = Regime::SftAnchored;
    std::string init = "annotated";  // lineage: standard | annotated
    std::size_t examples = 8000;
    std::vector<double> lr_candidates{3e-4};
    std::size_t batch_size = 16;
    std::size_t epochs = 1;
    double warmup_ratio = 0.1;
    double partial_unmask_prob = 0.003;
    double validation_fraction = 0.02;
    RestrictionSpec restriction = [] {
        RestrictionSpec r;
        r.prefix[index_of(Attribute::Topic)] = 5;
        r.prefix[index_of(Attribute::Persona)] = 8;
        return r;
    }();
    AdamWConfig adamw{};
};

struct SampleSettings {
    std::size_t n = 256;
    double temperature = 1.0;
    double top_p = 1.0;
    std::size_t max_new_tokens = 200;
    SampleMode mode = SampleMode::Anchored;
    std::string prompts_file;  // one prompt per line; empty: the world's prompts
    std::string checkpoint;
};

struct EvalSettings {
    std::size_t bootstrap = 1000;
    double confidence = 0.95;
    std::string generations;
};

struct StudySettings {
    std::vector<std::size_t> topic_levels{5, 14, 48};
    std::vector<std::size_t> persona_levels{8, 12, 23};
    std::vector<std::size_t> likelihood_sizes{1000, 2000, 4000, 8000, 16000};
    std::size_t validation_examples = 256;
    std::vector<double> temperatures{0.6, 0.9, 1.0, 1.05, 1.1};
};

struct JudgeSettings {
    EndpointConfig endpoint;
    std::string prompt_template;  // {prompt} and {response}; the first number in the reply is the score
};

struct ExperimentConfig {
    std::uint64_t seed = 1234;
    std::string data_dir = "runs/world";
    std::string work_dir = "runs";
    std::string output_dir = "results";
    std::string standard_checkpoint = "runs/pretrain-standard.ck";
    std::string annotated_checkpoint = "runs/pretrain-annotated.ck";
    WorldSettings world;
    ModelSettings model;
    PretrainSettings pretrain;
    PosttrainSettings posttrain;
    SampleSettings sample;
    EvalSettings eval;
    StudySettings studies;
    EndpointConfig annotator;
    std::optional<JudgeSettings> judge;

    const std::string& checkpoint_for(const std::string& lineage) const {
        if (lineage == "standard") return standard_checkpoint;
        if (lineage == "annotated") return annotated_checkpoint;
        throw ConfigError("posttrain.init", "unknown lineage '" + lineage + "' (expected standard or annotated)");
    }
};

namespace config_detail {

using json = nlohmann::json;

inline std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
}

inline void expect_object(const json& j, const std::string& path) {
    if (!j.is_object()) throw ConfigError(path, "expected an object");
}

inline void only_keys(const json& j, const std::string& path, std::initializer_list<std::string_view> keys) {
    expect_object(j, path);
    for (const auto& [k, _] : j.items()) {
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError(join(path, k), "unknown field");
    }
}

inline void read(const json& v, const std::string& path, std::size_t& out) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError(path, "expected a non-negative integer");
    }
    out = v.get<std::size_t>();
}
inline void read(const json& v, const std::string& path, double& out) {
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    out = v.get<double>();
    if (!std::isfinite(out)) throw ConfigError(path, "expected a finite number");
}
inline void read(const json& v, const std::string& path, std::string& out) {
    if (!v.is_string()) throw ConfigError(path, "expected a string");
    out = v.get<std::string>();
}
template <class T>
void read(const json& v, const std::string& path, std::vector<T>& out) {
    if (!v.is_array()) throw ConfigError(path, "expected an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
        T x{};
        read(v[i], path + "[" + std::to_string(i) + "]", x);
        out.push_back(std::move(x));
    }
}

template <class T>
void field(const json& obj, const std::string& path, std::string_view key, T& out) {
    const auto it = obj.find(std::string(key));
    if (it != obj.end()) read(*it, join(path, key), out);
}

inline void check(bool ok, const std::string& path, const std::string& message) {
    if (!ok) throw ConfigError(path, message);
}

inline void read_adamw(const json& j, const std::string& path, AdamWConfig& a) {
    only_keys(j, path, {"beta1", "beta2", "eps", "weight_decay", "max_grad_norm"});
    field(j, path, "beta1", a.beta1);
    field(j, path, "beta2", a.beta2);
    field(j, path, "eps", a.eps);
    field(j, path, "weight_decay", a.weight_decay);
    field(j, path, "max_grad_norm", a.max_grad_norm);
    check(a.beta1 >= 0.0 && a.beta1 < 1.0, join(path, "beta1"), "must lie in [0,1)");
    check(a.beta2 >= 0.0 && a.beta2 < 1.0, join(path, "beta2"), "must lie in [0,1)");
    check(a.eps > 0.0, join(path, "eps"), "must be positive");
    check(a.weight_decay >= 0.0, join(path, "weight_decay"), "must be non-negative");
}

inline void read_restriction(const json& j, const std::string& path, RestrictionSpec& r) {
    only_keys(j, path, {"topic", "persona", "entity", "location"});
    r = RestrictionSpec{};
    for (Attribute a : kAttributes) {
        const std::string key(name_of(a));
        const auto it = j.find(key);
        if (it == j.end() || it->is_null()) continue;
        const std::string p = join(path, key);
        if (it->is_array()) {
            read(*it, p, r.names[index_of(a)]);
            check(!r.names[index_of(a)].empty(), p, "must name at least one value");
        } else {
            read(*it, p, r.prefix[index_of(a)]);
            check(r.prefix[index_of(a)] > 0, p, "must be at least 1");
        }
    }
}

inline void read_endpoint(const json& j, const std::string& path, EndpointConfig& e, bool allow_template = false) {
    if (allow_template) {
        only_keys(j, path, {"base_url", "model", "api_key_env", "timeout_seconds", "max_parallel", "attempts",
                            "backoff_seconds", "temperature", "cache_dir", "prompt_template"});
    } else {
        only_keys(j, path, {"base_url", "model", "api_key_env", "timeout_seconds", "max_parallel", "attempts",
                            "backoff_seconds", "temperature", "cache_dir"});
    }
    field(j, path, "base_url", e.base_url);
    field(j, path, "model", e.model);
    field(j, path, "api_key_env", e.api_key_env);
    field(j, path, "timeout_seconds", e.timeout_seconds);
    field(j, path, "max_parallel", e.max_parallel);
    field(j, path, "attempts", e.attempts);
    field(j, path, "backoff_seconds", e.backoff_seconds);
    field(j, path, "temperature", e.temperature);
    field(j, path, "cache_dir", e.cache_dir);
    try {
        e.validate();
    } catch (const std::invalid_argument& ex) {
        throw ConfigError(path, ex.what());
    }
}

template <class E, class Parse>
void read_enum(const json& obj, const std::string& path, std::string_view key, E& out, Parse parse) {
    const auto it = obj.find(std::string(key));
    if (it == obj.end()) return;
    std::string s;
    read(*it, join(path, key), s);
    try {
        out = parse(s);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(join(path, key), e.what());
    }
}

/// Replaces ${NAME} with the environment value in every string.
inline void interpolate(json& j, const std::string& path) {
    if (j.is_object()) {
        for (auto& [k, v] : j.items()) interpolate(v, join(path, k));
    } else if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) interpolate(j[i], path + "[" + std::to_string(i) + "]");
    } else if (j.is_string()) {
        std::string s = j.get<std::string>();
        std::size_t pos = 0;
        while ((pos = s.find("${", pos)) != std::string::npos) {
            const auto end = s.find('}', pos);
            if (end == std::string::npos) throw ConfigError(path, "unterminated ${ in string");
            const std::string name = s.substr(pos + 2, end - pos - 2);
            const char* value = std::getenv(name.c_str());
            if (!value) throw ConfigError(path, "environment variable " + name + " is not set");
            s.replace(pos, end - pos + 1, value);
            pos += std::strlen(value);
        }
        j = s;
    }
}

}  // namespace config_detail

/// Applies "a.b.c=value". The value is parsed as JSON when possible and
/// taken as a plain string otherwise.
inline void apply_override(nlohmann::json& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("", "override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
        value = raw;
    }
    nlohmann::json* node = &root;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError(key, "empty path component");
        if (!node->is_object()) {
            if (!node->is_null()) throw ConfigError(key.substr(0, start ? start - 1 : 0), "is not an object");
            *node = nlohmann::json::object();
        }
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

inline ExperimentConfig parse_config(nlohmann::json j) {
    using namespace config_detail;
    if (j.is_null()) j = json::object();
    interpolate(j, "");
    only_keys(j, "", {"seed", "data_dir", "work_dir", "output_dir", "checkpoints", "world", "model", "pretrain",
                      "posttrain", "sample", "eval", "studies", "annotator", "judge"});
    ExperimentConfig c;
    field(j, "", "seed", c.seed);
    field(j, "", "data_dir", c.data_dir);
    field(j, "", "work_dir", c.work_dir);
    field(j, "", "output_dir", c.output_dir);
    if (auto it = j.find("checkpoints"); it != j.end()) {
        only_keys(*it, "checkpoints", {"standard", "annotated"});
        field(*it, "checkpoints", "standard", c.standard_checkpoint);
        field(*it, "checkpoints", "annotated", c.annotated_checkpoint);
    }
    if (auto it = j.find("world"); it != j.end()) {
        const std::string p = "world";
        only_keys(*it, p, {"pretrain_docs", "instruction_fraction", "shard_size", "spec_file"});
        field(*it, p, "pretrain_docs", c.world.pretrain_docs);
        field(*it, p, "instruction_fraction", c.world.instruction_fraction);
        field(*it, p, "shard_size", c.world.shard_size);
        field(*it, p, "spec_file", c.world.spec_file);
        check(c.world.pretrain_docs > 0, p + ".pretrain_docs", "must be positive");
        check(c.world.instruction_fraction >= 0.0 && c.world.instruction_fraction <= 1.0,
              p + ".instruction_fraction", "must lie in [0,1]");
        check(c.world.shard_size > 0, p + ".shard_size", "must be positive");
    }
    if (auto it = j.find("model"); it != j.end()) {
        const std::string p = "model";
        only_keys(*it, p, {"layers", "dim", "heads", "ff_mult", "context", "init_scale"});
        auto& m = c.model;
        field(*it, p, "layers", m.layers);
        field(*it, p, "dim", m.dim);
        field(*it, p, "heads", m.heads);
        field(*it, p, "ff_mult", m.ff_mult);
        field(*it, p, "context", m.context);
        field(*it, p, "init_scale", m.init_scale);
        check(m.layers > 0, p + ".layers", "must be positive");
        check(m.heads > 0, p + ".heads", "must be positive");
        check(m.dim > 0 && m.dim % m.heads == 0, p + ".dim", "must be a positive multiple of heads");
        check(m.ff_mult > 0, p + ".ff_mult", "must be positive");
        check(m.context >= 16, p + ".context", "must be at least 16");
        check(m.init_scale > 0.0, p + ".init_scale", "must be positive");
    }
    if (auto it = j.find("pretrain"); it != j.end()) {
        const std::string p = "pretrain";
        only_keys(*it, p, {"regime", "token_budget", "lr", "batch_size", "warmup_ratio", "adamw"});
        auto& t = c.pretrain;
        read_enum(*it, p, "regime", t.regime, parse_regime);
        check(is_pretraining(t.regime), p + ".regime", "must be pretrain-standard or pretrain-annotated");
        field(*it, p, "token_budget", t.token_budget);
        field(*it, p, "lr", t.lr);
        field(*it, p, "batch_size", t.batch_size);
        field(*it, p, "warmup_ratio", t.warmup_ratio);
        if (auto a = it->find("adamw"); a != it->end()) read_adamw(*a, p + ".adamw", t.adamw);
        check(t.token_budget > 0, p + ".token_budget", "must be positive");
        check(t.lr > 0.0, p + ".lr", "must be positive");
        check(t.batch_size > 0, p + ".batch_size", "must be positive");
        check(t.warmup_ratio >= 0.0 && t.warmup_ratio < 1.0, p + ".warmup_ratio", "must lie in [0,1)");
    }
    if (auto it = j.find("posttrain"); it != j.end()) {
        const std::string p = "posttrain";
        only_keys(*it, p, {"regime", "init", "examples", "lr_candidates", "batch_size", "epochs", "warmup_ratio",
                           "partial_unmask_prob", "validation_fraction", "restriction", "adamw"});
        auto& t = c.posttrain;
        read_enum(*it, p, "regime", t.regime, parse_regime);
        check(!is_pretraining(t.regime), p + ".regime", "must be an SFT regime");
        field(*it, p, "init", t.init);
        check(t.init == "standard" || t.init == "annotated", p + ".init", "must be standard or annotated");
        field(*it, p, "examples", t.examples);
        field(*it, p, "lr_candidates", t.lr_candidates);
        field(*it, p, "batch_size", t.batch_size);
        field(*it, p, "epochs", t.epochs);
        field(*it, p, "warmup_ratio", t.warmup_ratio);
        field(*it, p, "partial_unmask_prob", t.partial_unmask_prob);
        field(*it, p, "validation_fraction", t.validation_fraction);
        if (auto r = it->find("restriction"); r != it->end()) read_restriction(*r, p + ".restriction", t.restriction);
        if (auto a = it->find("adamw"); a != it->end()) read_adamw(*a, p + ".adamw", t.adamw);
        check(t.examples > 0, p + ".examples", "must be positive");
        check(!t.lr_candidates.empty(), p + ".lr_candidates", "must be non-empty");
        for (std::size_t i = 0; i < t.lr_candidates.size(); ++i) {
            check(t.lr_candidates[i] > 0.0, p + ".lr_candidates[" + std::to_string(i) + "]", "must be positive");
        }
        check(t.batch_size > 0, p + ".batch_size", "must be positive");
        check(t.epochs > 0, p + ".epochs", "must be positive");
        check(t.warmup_ratio >= 0.0 && t.warmup_ratio < 1.0, p + ".warmup_ratio", "must lie in [0,1)");
        check(t.partial_unmask_prob >= 0.0 && t.partial_unmask_prob <= 1.0, p + ".partial_unmask_prob",
              "must lie in [0,1]");
        check(t.validation_fraction >= 0.0 && t.validation_fraction < 1.0, p + ".validation_fraction",
              "must lie in [0,1)");
    }
    if (auto it = j.find("sample"); it != j.end()) {
        const std::string p = "sample";
        only_keys(*it, p, {"n", "temperature", "top_p", "max_new_tokens", "mode", "prompts_file", "checkpoint"});
        auto& s = c.sample;
        field(*it, p, "n", s.n);
        field(*it, p, "temperature", s.temperature);
        field(*it, p, "top_p", s.top_p);
        field(*it, p, "max_new_tokens", s.max_new_tokens);
        read_enum(*it, p, "mode", s.mode, parse_sample_mode);
        field(*it, p, "prompts_file", s.prompts_file);
        field(*it, p, "checkpoint", s.checkpoint);
        check(s.n >= 2, p + ".n", "must be at least 2");
        check(s.temperature > 0.0, p + ".temperature", "must be positive");
        check(s.top_p > 0.0 && s.top_p <= 1.0, p + ".top_p", "must lie in (0,1]");
        check(s.max_new_tokens > 0, p + ".max_new_tokens", "must be positive");
    }
    if (auto it = j.find("eval"); it != j.end()) {
        const std::string p = "eval";
        only_keys(*it, p, {"bootstrap", "confidence", "generations"});
        field(*it, p, "bootstrap", c.eval.bootstrap);
        field(*it, p, "confidence", c.eval.confidence);
        field(*it, p, "generations", c.eval.generations);
        check(c.eval.confidence > 0.0 && c.eval.confidence < 1.0, p + ".confidence", "must lie in (0,1)");
    }
    if (auto it = j.find("studies"); it != j.end()) {
        const std::string p = "studies";
        only_keys(*it, p, {"topic_levels", "persona_levels", "likelihood_sizes", "validation_examples", "temperatures"});
        auto& s = c.studies;
        field(*it, p, "topic_levels", s.topic_levels);
        field(*it, p, "persona_levels", s.persona_levels);
        field(*it, p, "likelihood_sizes", s.likelihood_sizes);
        field(*it, p, "validation_examples", s.validation_examples);
        field(*it, p, "temperatures", s.temperatures);
        check(s.topic_levels.size() >= 2, p + ".topic_levels", "needs at least two levels");
        check(s.persona_levels.size() >= 2, p + ".persona_levels", "needs at least two levels");
        check(s.likelihood_sizes.size() >= 2, p + ".likelihood_sizes", "needs at least two sizes");
        for (std::size_t i = 0; i < s.likelihood_sizes.size(); ++i) {
            check(s.likelihood_sizes[i] > 0, p + ".likelihood_sizes[" + std::to_string(i) + "]", "must be positive");
        }
        for (std::size_t i = 0; i < s.topic_levels.size(); ++i) {
            check(s.topic_levels[i] > 0, p + ".topic_levels[" + std::to_string(i) + "]", "must be positive");
        }
        for (std::size_t i = 0; i < s.persona_levels.size(); ++i) {
            check(s.persona_levels[i] > 0, p + ".persona_levels[" + std::to_string(i) + "]", "must be positive");
        }
        check(s.validation_examples > 0, p + ".validation_examples", "must be positive");
        check(!s.temperatures.empty(), p + ".temperatures", "must be non-empty");
        for (std::size_t i = 0; i < s.temperatures.size(); ++i) {
            check(s.temperatures[i] > 0.0, p + ".temperatures[" + std::to_string(i) + "]", "must be positive");
        }
    }
    if (auto it = j.find("annotator"); it != j.end()) read_endpoint(*it, "annotator", c.annotator);
    if (auto it = j.find("judge"); it != j.end() && !it->is_null()) {
        JudgeSettings js;
        read_endpoint(*it, "judge", js.endpoint, true);
        field(*it, "judge", "prompt_template", js.prompt_template);
        check(js.prompt_template.find("{response}") != std::string::npos, "judge.prompt_template",
              "must contain {response}");
        c.judge = js;
    }
    return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot read config file " + path.string());
    try {
        return nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("", path.string() + ": " + e.what());
    }
}

/// Loads the file (if any), applies overrides in order, then validates.
inline ExperimentConfig load_config(const std::optional<std::filesystem::path>& file,
                                    const std::vector<std::string>& overrides = {}) {
    nlohmann::json j = file ? read_json_file(*file) : nlohmann::json::object();
    for (const auto& o : overrides) apply_override(j, o);
    return parse_config(std::move(j));
}

namespace config_detail {
inline nlohmann::ordered_json restriction_json(const RestrictionSpec& r) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (Attribute a : kAttributes) {
        const auto i = index_of(a);
        if (!r.names[i].empty()) j[std::string(name_of(a))] = r.names[i];
        else if (r.prefix[i] > 0) j[std::string(name_of(a))] = r.prefix[i];
    }
    return j;
}
inline nlohmann::ordered_json adamw_json(const AdamWConfig& a) {
    return {{"beta1", a.beta1},
            {"beta2", a.beta2},
            {"eps", a.eps},
            {"weight_decay", a.weight_decay},
            {"max_grad_norm", a.max_grad_norm}};
}
inline nlohmann::ordered_json endpoint_json(const EndpointConfig& e) {
    return {{"base_url", e.base_url},           {"model", e.model},
            {"api_key_env", e.api_key_env},     {"timeout_seconds", e.timeout_seconds},
            {"max_parallel", e.max_parallel},   {"attempts", e.attempts},
            {"backoff_seconds", e.backoff_seconds}, {"temperature", e.temperature},
            {"cache_dir", e.cache_dir}};
}
}  // namespace config_detail

/// Fully populated config tree; parse_config(to_json(c)) reproduces c.
inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
    using namespace config_detail;
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["data_dir"] = c.data_dir;
    j["work_dir"] = c.work_dir;
    j["output_dir"] = c.output_dir;
    j["checkpoints"] = {{"standard", c.standard_checkpoint}, {"annotated", c.annotated_checkpoint}};
    j["world"] = {{"pretrain_docs", c.world.pretrain_docs},
                  {"instruction_fraction", c.world.instruction_fraction},
                  {"shard_size", c.world.shard_size},
                  {"spec_file", c.world.spec_file}};
    j["model"] = {{"layers", c.model.layers},   {"dim", c.model.dim},         {"heads", c.model.heads},
                  {"ff_mult", c.model.ff_mult}, {"context", c.model.context}, {"init_scale", c.model.init_scale}};
    j["pretrain"] = {{"regime", to_string(c.pretrain.regime)},
                     {"token_budget", c.pretrain.token_budget},
                     {"lr", c.pretrain.lr},
                     {"batch_size", c.pretrain.batch_size},
                     {"warmup_ratio", c.pretrain.warmup_ratio},
                     {"adamw", adamw_json(c.pretrain.adamw)}};
    j["posttrain"] = {{"regime", to_string(c.posttrain.regime)},
                      {"init", c.posttrain.init},
                      {"examples", c.posttrain.examples},
                      {"lr_candidates", c.posttrain.lr_candidates},
                      {"batch_size", c.posttrain.batch_size},
                      {"epochs", c.posttrain.epochs},
                      {"warmup_ratio", c.posttrain.warmup_ratio},
                      {"partial_unmask_prob", c.posttrain.partial_unmask_prob},
                      {"validation_fraction", c.posttrain.validation_fraction},
                      {"restriction", restriction_json(c.posttrain.restriction)},
                      {"adamw", adamw_json(c.posttrain.adamw)}};
    j["sample"] = {{"n", c.sample.n},
                   {"temperature", c.sample.temperature},
                   {"top_p", c.sample.top_p},
                   {"max_new_tokens", c.sample.max_new_tokens},
                   {"mode", to_string(c.sample.mode)},
                   {"prompts_file", c.sample.prompts_file},
                   {"checkpoint", c.sample.checkpoint}};
    j["eval"] = {{"bootstrap", c.eval.bootstrap}, {"confidence", c.eval.confidence}, {"generations", c.eval.generations}};
    j["studies"] = {{"topic_levels", c.studies.topic_levels},
                    {"persona_levels", c.studies.persona_levels},
                    {"likelihood_sizes", c.studies.likelihood_sizes},
                    {"validation_examples", c.studies.validation_examples},
                    {"temperatures", c.studies.temperatures}};
    j["annotator"] = endpoint_json(c.annotator);
    if (c.judge) {
        auto jj = endpoint_json(c.judge->endpoint);
        jj["prompt_template"] = c.judge->prompt_template;
        j["judge"] = jj;
    } else {
        j["judge"] = nullptr;
    }
    return j;
}

inline WorldSpec load_world_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("world.spec_file", "cannot read " + path.string());
    try {
        return world_spec_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("world.spec_file", path.string() + ": " + e.what());
    }
}

}  // namespace anchor
