#pragma once

// Decoding. The sequence is seeded with BOS prompt PROMPT_END; in anchored
// mode the model then writes its own annotation before the response. The
// no-annotation mode injects an empty annotation block instead.

#include "anchor/annotation.hpp"
#include "anchor/hash.hpp"
#include "anchor/model.hpp"
#include "anchor/rng.hpp"
#include "anchor/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace anchor {

enum class SampleMode { Anchored, Plain, NoAnnotation };

inline std::string_view to_string(SampleMode m) {
    switch (m) {
        case SampleMode::Anchored: return "anchored";
        case SampleMode::Plain: return "plain";
        case SampleMode::NoAnnotation: return "no-annotation";
    }
    return "?";
}

inline SampleMode parse_sample_mode(std::string_view s) {
    for (SampleMode m : {SampleMode::Anchored, SampleMode::Plain, SampleMode::NoAnnotation}) {
        if (to_string(m) == s) return m;
    }
    throw std::invalid_argument("unknown sample mode '" + std::string(s) + "'");
}

struct SampleConfig {
    double temperature = 1.0;  // below 1e-3 decodes greedily
    double top_p = 1.0;
    std::size_t max_new_tokens = 512;
    SampleMode mode = SampleMode::Anchored;
    std::size_t n_samples = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(temperature > 0.0)) throw std::invalid_argument("sample: temperature must be positive");
        if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("sample: top_p must lie in (0,1]");
        if (max_new_tokens == 0) throw std::invalid_argument("sample: max_new_tokens must be positive");
        if (n_samples == 0) throw std::invalid_argument("sample: n_samples must be positive");
    }
};

struct Generation {
    std::string prompt;
    std::string annotation;
    std::string response;
    std::vector<TokenId> ids;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    bool format_failure = false;
    bool truncated = false;  // stopped without EOS
    std::string error;
};

/// Draws a token from logits with temperature and nucleus truncation.
/// Reserved tokens that never follow the prompt (BOS, PROMPT_END, UNK) are
/// excluded.
template <class T>
TokenId sample_token(std::span<const T> logits, double temperature, double top_p, Rng& rng) {
    const std::size_t V = logits.size();
    auto allowed = [](std::size_t i) {
        const auto t = static_cast<TokenId>(i);
        return t != tok::BOS && t != tok::PROMPT_END && t != tok::UNK;
    };
    if (temperature < 1e-3) {
        std::size_t best = V;
        for (std::size_t i = 0; i < V; ++i) {
            if (allowed(i) && (best == V || logits[i] > logits[best])) best = i;
        }
        return static_cast<TokenId>(best);
    }
    double mx = -INFINITY;
    for (std::size_t i = 0; i < V; ++i) {
        if (allowed(i)) mx = std::max(mx, static_cast<double>(logits[i]));
    }
    std::vector<double> p(V, 0.0);
    double z = 0.0;
    for (std::size_t i = 0; i < V; ++i) {
        if (!allowed(i)) continue;
        p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
        z += p[i];
    }
    for (double& v : p) v /= z;
    std::vector<std::size_t> support;
    if (top_p < 1.0) {
        std::vector<std::size_t> order(V);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
        double mass = 0.0;
        for (std::size_t i : order) {
            if (p[i] <= 0.0) break;
            support.push_back(i);
            mass += p[i];
            if (mass >= top_p) break;
        }
        double kept = 0.0;
        for (std::size_t i : support) kept += p[i];
        double u = rng.uniform() * kept;
        for (std::size_t i : support) {
            u -= p[i];
            if (u < 0.0) return static_cast<TokenId>(i);
        }
        return static_cast<TokenId>(support.back());
    }
    double u = rng.uniform();
    std::size_t last = 0;
    for (std::size_t i = 0; i < V; ++i) {
        if (p[i] <= 0.0) continue;
        last = i;
        u -= p[i];
        if (u < 0.0) return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(last);
}

/// Splits generated ids into annotation text and response text. The
/// response never contains reserved tokens. Malformed structure sets the
/// failure flag; the response is then salvaged from after the last ANN_END.
inline void extract(Generation& g, std::span<const TokenId> ids, std::size_t prompt_end, const Vocab& vocab) {
    std::vector<TokenId> response;
    try {
        const auto labels = span_classify(ids);
        std::size_t i = prompt_end + 1;
        if (i < ids.size() && ids[i] == tok::ANN_START) {
            std::size_t j = i + 1;
            while (ids[j] != tok::ANN_END) ++j;
            const auto tags = decode_annotation(ids.subspan(i + 1, j - i - 1), vocab);
            g.annotation = tags.empty() ? std::string() : serialize_tags(tags);
        }
        for (std::size_t t = prompt_end + 1; t < ids.size(); ++t) {
            if (labels[t] == SpanLabel::Response && !tok::is_reserved(ids[t])) response.push_back(ids[t]);
        }
    } catch (const std::exception&) {
        g.format_failure = true;
        std::size_t start = prompt_end + 1;
        for (std::size_t t = prompt_end + 1; t < ids.size(); ++t) {
            if (ids[t] == tok::ANN_END) start = t + 1;
        }
        for (std::size_t t = start; t < ids.size(); ++t) {
            if (!tok::is_reserved(ids[t])) response.push_back(ids[t]);
        }
    }
    // a dangling paragraph token would not survive a text round trip
    while (!response.empty() && response.back() == vocab.paragraph()) response.pop_back();
    while (!response.empty() && response.front() == vocab.paragraph()) response.erase(response.begin());
    g.response = vocab.decode(response);
}

template <class T>
Generation generate(const Transformer<T>& model, const Vocab& vocab, const std::string& prompt, const SampleConfig& cfg,
                    std::uint64_t seed) {
    cfg.validate();
    Generation g;
    g.prompt = prompt;
    g.temperature = cfg.temperature;
    g.seed = seed;
    std::vector<TokenId> ids{tok::BOS};
    const auto p = vocab.encode(prompt);
    ids.insert(ids.end(), p.begin(), p.end());
    ids.push_back(tok::PROMPT_END);
    const std::size_t prompt_end = ids.size() - 1;
    if (cfg.mode == SampleMode::NoAnnotation) {
        ids.push_back(tok::ANN_START);
        ids.push_back(tok::ANN_END);
    }
    const std::size_t context = model.config().context;
    if (ids.size() >= context) throw SequenceTooLong("generate: prompt does not fit the context");
    typename Transformer<T>::Decoder dec(model);
    std::vector<T> logits;
    for (TokenId t : ids) logits = dec.step(t);
    Rng rng(seed);
    g.truncated = true;
    for (std::size_t n = 0; n < cfg.max_new_tokens; ++n) {
        const TokenId next = sample_token<T>(logits, cfg.temperature, cfg.top_p, rng);
        ids.push_back(next);
        if (next == tok::EOS) {
            g.truncated = false;
            break;
        }
        if (ids.size() >= context) break;
        logits = dec.step(next);
    }
    g.ids = ids;
    extract(g, ids, prompt_end, vocab);
    if (cfg.mode == SampleMode::NoAnnotation) g.annotation.clear();
    return g;
}

template <class T>
Generation generate_no_annotation(const Transformer<T>& model, const Vocab& vocab, const std::string& prompt,
                                  SampleConfig cfg, std::uint64_t seed) {
    cfg.mode = SampleMode::NoAnnotation;
    return generate(model, vocab, prompt, cfg, seed);
}

/// Per-sample seed from the master seed, the prompt text, how many equal
/// prompts came before it, and the sample index. Results do not depend on
/// batch composition beyond that.
inline std::uint64_t sample_seed(std::uint64_t seed, const std::string& prompt, std::size_t occurrence,
                                 std::size_t sample) {
    const std::string h = sha256_hex(prompt);
    std::uint64_t key = std::stoull(h.substr(0, 16), nullptr, 16);
    key = derive_seed(key, occurrence);
    key = derive_seed(key, sample);
    return derive_seed(seed, key);
}

/// cfg.n_samples generations per prompt, ordered by prompt then sample.
/// A failing item records its error and the batch continues.
template <class T>
std::vector<Generation> batch_generate(const Transformer<T>& model, const Vocab& vocab,
                                       const std::vector<std::string>& prompts, const SampleConfig& cfg) {
    cfg.validate();
    if (prompts.empty()) throw std::invalid_argument("batch_generate: no prompts");
    std::vector<Generation> out;
    out.reserve(prompts.size() * cfg.n_samples);
    std::map<std::string, std::size_t> seen;
    for (const auto& prompt : prompts) {
        const std::size_t occurrence = seen[prompt]++;
        for (std::size_t s = 0; s < cfg.n_samples; ++s) {
            const std::uint64_t seed = sample_seed(cfg.seed, prompt, occurrence, s);
            try {
                out.push_back(generate(model, vocab, prompt, cfg, seed));
            } catch (const std::exception& e) {
                Generation g;
                g.prompt = prompt;
                g.temperature = cfg.temperature;
                g.seed = seed;
                g.error = e.what();
                out.push_back(std::move(g));
            }
        }
    }
    return out;
}

inline nlohmann::ordered_json to_json(const Generation& g) {
    nlohmann::ordered_json flags = nlohmann::ordered_json::array();
    if (g.format_failure) flags.push_back("format-failure");
    if (g.truncated) flags.push_back("truncated");
    if (!g.error.empty()) flags.push_back("error");
    nlohmann::ordered_json j{{"prompt", g.prompt},           {"annotation", g.annotation}, {"response", g.response},
                             {"temperature", g.temperature}, {"seed", g.seed},             {"flags", flags}};
    if (!g.error.empty()) j["error"] = g.error;
    return j;
}

}  // namespace anchor
