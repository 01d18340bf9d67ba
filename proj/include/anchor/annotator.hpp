#pragma once

// Client for an OpenAI-compatible chat-completion endpoint, used to annotate
// external text or to call a judge model. Responses are cached on disk under
// the SHA-256 of the request, so a repeated pass makes no network calls.

#include "anchor/hash.hpp"
#include "anchor/types.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace anchor {

struct EndpointConfig {
    std::string base_url = "http://127.0.0.1:8000/v1";
    std::string model = "Qwen3-30B-A3B-Instruct";
    std::string api_key_env = "ANNOTATOR_API_KEY";
    double timeout_seconds = 60.0;
    std::size_t max_parallel = 4;
    std::size_t attempts = 3;
    double backoff_seconds = 1.0;  // doubled after each failed attempt
    double temperature = 0.0;
    std::string cache_dir = ".annotator_cache";

    void validate() const {
        if (base_url.empty()) throw std::invalid_argument("endpoint: base_url is empty");
        if (model.empty()) throw std::invalid_argument("endpoint: model is empty");
        if (max_parallel < 1) throw std::invalid_argument("endpoint: max_parallel must be >= 1");
        if (attempts < 1) throw std::invalid_argument("endpoint: attempts must be >= 1");
        if (timeout_seconds <= 0.0) throw std::invalid_argument("endpoint: timeout must be positive");
    }
};

inline const std::string kPretrainingAnnotationTemplate =
    "You are an expert annotator. Read the following document and write a short set of informative tags in the "
    "following format: tag_type:tag_value tag_type:tag_value ...\n\n"
    "The tag_type should be one or more of the following that is most relevant to the document: topic, domain, "
    "language, style, sentiment, action, entity, location, time, etc.\n\n"
    "Document:\n\"\"\"{text}\"\"\"\n\n"
    "Do not write any text other than the annotations.\n\n"
    "Annotation:";

inline const std::string kResponseAnnotationTemplate =
    "You are an expert annotator. Read the following document and write a short set of informative tags in the "
    "following format: tag_type:tag_value tag_type:tag_value ...\n\n"
    "The tag_type should be one or more of the following that is most relevant to the document: topic, domain, "
    "language, style, sentiment, action, entity, location, time, etc.\n\n"
    "Document:\n\"\"\"{last_message}\"\"\"\n\n"
    "Do not write any text other than the annotations.\n\n"
    "Annotation:";

inline std::string substitute(std::string tpl, std::string_view field, std::string_view value) {
    const std::string ph = "{" + std::string(field) + "}";
    const auto pos = tpl.find(ph);
    if (pos == std::string::npos) throw std::invalid_argument("template has no {" + std::string(field) + "}");
    tpl.replace(pos, ph.size(), value);
    return tpl;
}

struct ParsedTags {
    TagList tags;
    std::size_t dropped = 0;
};

/// Lenient parser for "key:value key:value" output. A word of the form
/// `key:` or `key:value` (key = letters, digits, '_' or '-') starts a tag;
/// following words without such a prefix extend its value. Words before the
/// first key and tags with an empty value are dropped and counted.
inline ParsedTags parse_annotation_output(std::string_view text) {
    ParsedTags out;
    std::istringstream in{std::string(text)};
    std::string word;
    std::optional<AnnotationTag> cur;
    auto trim_value = [](std::string v) {
        while (!v.empty() && (v.back() == ',' || v.back() == ' ')) v.pop_back();
        return v;
    };
    auto flush = [&] {
        if (!cur) return;
        cur->value = trim_value(cur->value);
        if (cur->value.empty()) ++out.dropped;
        else out.tags.push_back(std::move(*cur));
        cur.reset();
    };
    auto key_prefix = [](const std::string& w) -> std::optional<std::size_t> {
        const auto colon = w.find(':');
        if (colon == std::string::npos || colon == 0) return std::nullopt;
        for (std::size_t i = 0; i < colon; ++i) {
            const char c = w[i];
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return std::nullopt;
        }
        return colon;
    };
    while (in >> word) {
        if (const auto colon = key_prefix(word)) {
            flush();
            cur = AnnotationTag{word.substr(0, *colon), word.substr(*colon + 1)};
        } else if (cur) {
            if (!cur->value.empty()) cur->value += ' ';
            cur->value += word;
        } else {
            ++out.dropped;
        }
    }
    flush();
    return out;
}

struct HttpResponse {
    int status = 0;
    std::string body;
    std::string error;  // transport-level failure
};

using Headers = std::vector<std::pair<std::string, std::string>>;

class Transport {
public:
    virtual ~Transport() = default;
    /// POST `body` to base_url + path.
    virtual HttpResponse post(const std::string& base_url, const std::string& path, const std::string& body,
                              const Headers& headers, double timeout_seconds) = 0;
};

class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Disk cache: one file per request hash holding the raw response text.
class ResponseCache {
public:
    explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

    std::optional<std::string> get(const std::string& key) const {
        std::ifstream in(dir_ / (key + ".txt"), std::ios::binary);
        if (!in) return std::nullopt;
        std::ostringstream os;
        os << in.rdbuf();
        return os.str();
    }

    /// Write to a unique temporary file, then rename over the final name.
    void put(const std::string& key, const std::string& value) const {
        std::filesystem::create_directories(dir_);
        static std::atomic<std::uint64_t> counter{0};
        std::ostringstream tmpname;
        tmpname << key << ".tmp." << std::hash<std::thread::id>{}(std::this_thread::get_id()) << '.' << counter++;
        const auto tmp = dir_ / tmpname.str();
        {
            std::ofstream out(tmp, std::ios::binary);
            out << value;
            if (!out) throw std::runtime_error("cache write failed: " + tmp.string());
        }
        std::filesystem::rename(tmp, dir_ / (key + ".txt"));
    }

private:
    std::filesystem::path dir_;
};

struct ClientStats {
    std::atomic<std::size_t> cache_hits{0};
    std::atomic<std::size_t> network_calls{0};
    std::atomic<std::size_t> dropped_items{0};
};

class AnnotatorClient {
public:
    AnnotatorClient(EndpointConfig cfg, std::shared_ptr<Transport> transport)
        : cfg_(std::move(cfg)), transport_(std::move(transport)), cache_(cfg_.cache_dir) {
        cfg_.validate();
        if (!transport_) throw std::invalid_argument("AnnotatorClient: null transport");
    }

    const EndpointConfig& config() const noexcept { return cfg_; }
    const ClientStats& stats() const noexcept { return stats_; }

    std::string cache_key(const std::string& prompt) const {
        nlohmann::ordered_json j{{"model", cfg_.model}, {"temperature", cfg_.temperature}, {"prompt", prompt}};
        return sha256_hex(j.dump());
    }

    /// Sends one user message and returns the assistant text.
    std::string complete(const std::string& prompt) {
        const std::string key = cache_key(prompt);
        if (auto hit = cache_.get(key)) {
            ++stats_.cache_hits;
            return *hit;
        }
        nlohmann::ordered_json body{{"model", cfg_.model},
                                    {"messages", nlohmann::ordered_json::array({{{"role", "user"}, {"content", prompt}}})},
                                    {"temperature", cfg_.temperature}};
        Headers headers{{"Content-Type", "application/json"}};
        if (const char* k = std::getenv(cfg_.api_key_env.c_str()); k && *k) {
            headers.emplace_back("Authorization", std::string("Bearer ") + k);
        }
        std::string last_error;
        double backoff = cfg_.backoff_seconds;
        for (std::size_t attempt = 0; attempt < cfg_.attempts; ++attempt) {
            if (attempt > 0 && backoff > 0.0) {
                std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
                backoff *= 2.0;
            }
            ++stats_.network_calls;
            const HttpResponse r = transport_->post(cfg_.base_url, "/chat/completions", body.dump(), headers,
                                                    cfg_.timeout_seconds);
            if (!r.error.empty()) {
                last_error = r.error;
                continue;
            }
            if (r.status == 429 || r.status >= 500) {
                last_error = "HTTP " + std::to_string(r.status);
                continue;
            }
            if (r.status != 200) {
                throw TransportError("endpoint returned HTTP " + std::to_string(r.status) + ": " + r.body.substr(0, 200));
            }
            std::string text;
            try {
                text = nlohmann::json::parse(r.body).at("choices").at(0).at("message").at("content").get<std::string>();
            } catch (const std::exception& e) {
                throw TransportError(std::string("malformed completion response: ") + e.what());
            }
            cache_.put(key, text);
            return text;
        }
        throw TransportError("request failed after " + std::to_string(cfg_.attempts) + " attempts: " + last_error);
    }

    ParsedTags annotate_text(const std::string& text) {
        if (text.empty()) throw std::invalid_argument("annotate_text: empty text");
        return parse(complete(substitute(kPretrainingAnnotationTemplate, "text", text)));
    }

    ParsedTags annotate_response(const std::string& last_message) {
        if (last_message.empty()) throw std::invalid_argument("annotate_response: empty message");
        return parse(complete(substitute(kResponseAnnotationTemplate, "last_message", last_message)));
    }

    /// Annotates many texts with at most max_parallel requests in flight.
    /// Results keep input order; a failed item carries its error message.
    std::vector<std::pair<ParsedTags, std::string>> annotate_batch(const std::vector<std::string>& texts,
                                                                   bool responses = false) {
        std::vector<std::pair<ParsedTags, std::string>> out(texts.size());
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next++; i < texts.size(); i = next++) {
                try {
                    out[i].first = responses ? annotate_response(texts[i]) : annotate_text(texts[i]);
                } catch (const std::exception& e) {
                    out[i].second = e.what();
                }
            }
        };
        const std::size_t n = std::min(cfg_.max_parallel, texts.size());
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
        return out;
    }

private:
    ParsedTags parse(const std::string& raw) {
        ParsedTags p = parse_annotation_output(raw);
        stats_.dropped_items += p.dropped;
        return p;
    }

    EndpointConfig cfg_;
    std::shared_ptr<Transport> transport_;
    ResponseCache cache_;
    ClientStats stats_;
};

}  // namespace anchor
