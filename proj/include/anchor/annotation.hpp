#pragma once

// Chunking, tag serialization and training-sequence layouts.
//
//   pretraining, annotated:  BOS [prompt PROMPT_END] <z1> x1 PAR <z2> x2 ... EOS
//   pretraining, standard:   BOS [prompt PROMPT_END] x1 PAR x2 ... EOS
//   sft, anchored:           BOS prompt PROMPT_END <z> y EOS
//   sft, standard:           BOS prompt PROMPT_END y EOS
//
// where <z> is ANN_START key KV_SEP value [TAG_SEP key KV_SEP value ...] ANN_END.

#include "anchor/tokenizer.hpp"
#include "anchor/types.hpp"
#include "anchor/world.hpp"

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace anchor {

/// Splits on blank lines. Chunks keep their inner single newlines and lose
/// surrounding whitespace; empty fragments are dropped.
inline std::vector<std::string> chunk_document(std::string_view text) {
    std::vector<std::string> chunks;
    std::string current;
    auto flush = [&] {
        const auto b = current.find_first_not_of(" \t\r\n");
        if (b != std::string::npos) {
            const auto e = current.find_last_not_of(" \t\r\n");
            chunks.push_back(current.substr(b, e - b + 1));
        }
        current.clear();
    };
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        const std::string_view line = text.substr(pos, nl - pos);
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
            flush();
        } else {
            if (!current.empty()) current += '\n';
            current += line;
        }
        pos = nl + 1;
    }
    flush();
    if (chunks.empty()) throw std::invalid_argument("chunk_document: text is empty or whitespace only");
    return chunks;
}

inline std::string join_chunks(const std::vector<std::string>& chunks) {
    std::string out;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        if (i) out += tok::kParagraph;
        out += chunks[i];
    }
    return out;
}

inline constexpr std::string_view kTagSeparatorText = " <tag> ";

/// "key:value" items joined by the tag separator.
inline std::string serialize_tags(const TagList& tags) {
    if (tags.empty()) throw std::invalid_argument("serialize_tags: empty tag list");
    std::string out;
    for (std::size_t i = 0; i < tags.size(); ++i) {
        if (tags[i].key.empty()) throw std::invalid_argument("serialize_tags: empty key");
        if (tags[i].key.find(':') != std::string::npos) {
            throw std::invalid_argument("serialize_tags: key contains ':'");
        }
        if (i) out += kTagSeparatorText;
        out += tags[i].key;
        out += ':';
        out += tags[i].value;
    }
    return out;
}

/// Inverse of serialize_tags. Items without ':' or with an empty key throw.
inline TagList parse_tags(std::string_view text) {
    TagList tags;
    std::size_t pos = 0;
    while (true) {
        const auto next = text.find(kTagSeparatorText, pos);
        const std::string_view item = text.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos);
        const auto colon = item.find(':');
        if (colon == std::string_view::npos || colon == 0) {
            throw std::invalid_argument("parse_tags: malformed item '" + std::string(item) + "'");
        }
        tags.push_back({std::string(item.substr(0, colon)), std::string(item.substr(colon + 1))});
        if (next == std::string_view::npos) break;
        pos = next + kTagSeparatorText.size();
    }
    return tags;
}

/// Token form of a tag list, including the ANN_START/ANN_END delimiters.
inline std::vector<TokenId> encode_annotation(const TagList& tags, const Vocab& vocab) {
    if (tags.empty()) throw std::invalid_argument("encode_annotation: empty tag list");
    std::vector<TokenId> ids{tok::ANN_START};
    for (std::size_t i = 0; i < tags.size(); ++i) {
        if (i) ids.push_back(tok::TAG_SEP);
        const auto key = vocab.encode(tags[i].key);
        const auto value = vocab.encode(tags[i].value);
        if (key.empty()) throw std::invalid_argument("encode_annotation: empty key");
        ids.insert(ids.end(), key.begin(), key.end());
        ids.push_back(tok::KV_SEP);
        ids.insert(ids.end(), value.begin(), value.end());
    }
    ids.push_back(tok::ANN_END);
    return ids;
}

/// Tags from the tokens strictly between ANN_START and ANN_END.
inline TagList decode_annotation(std::span<const TokenId> inner, const Vocab& vocab) {
    TagList tags;
    std::vector<TokenId> key, value;
    bool in_value = false;
    auto flush = [&] {
        if (!key.empty() || in_value) tags.push_back({vocab.decode(key), vocab.decode(value)});
        key.clear();
        value.clear();
        in_value = false;
    };
    for (TokenId t : inner) {
        if (t == tok::TAG_SEP) {
            flush();
        } else if (t == tok::KV_SEP) {
            in_value = true;
        } else if (in_value) {
            value.push_back(t);
        } else {
            key.push_back(t);
        }
    }
    flush();
    return tags;
}

struct AnnotatedDocument {
    std::vector<std::string> chunks;
    std::vector<TagList> tags;
    std::optional<SemanticLatent> latent;
    std::optional<std::string> prompt;

    static AnnotatedDocument from(const DocumentSample& d) { return {d.chunks, d.annotations, d.latent, d.prompt}; }

    void validate() const {
        if (chunks.empty()) throw std::invalid_argument("annotated document has no chunks");
        if (tags.size() != chunks.size()) {
            throw std::invalid_argument("annotated document: " + std::to_string(tags.size()) + " tag lists for " +
                                        std::to_string(chunks.size()) + " chunks");
        }
        for (const auto& c : chunks) {
            if (split_words(c).empty()) throw std::invalid_argument("annotated document has an empty chunk");
        }
    }
};

namespace detail {
inline void append_prompt(std::vector<TokenId>& ids, const std::optional<std::string>& prompt, const Vocab& vocab) {
    if (!prompt) return;
    const auto p = vocab.encode(*prompt);
    ids.insert(ids.end(), p.begin(), p.end());
    ids.push_back(tok::PROMPT_END);
}
}  // namespace detail

inline std::vector<TokenId> interleave(const AnnotatedDocument& doc, const Vocab& vocab) {
    doc.validate();
    std::vector<TokenId> ids{tok::BOS};
    detail::append_prompt(ids, doc.prompt, vocab);
    for (std::size_t i = 0; i < doc.chunks.size(); ++i) {
        if (i) ids.push_back(vocab.paragraph());
        const auto ann = encode_annotation(doc.tags[i], vocab);
        ids.insert(ids.end(), ann.begin(), ann.end());
        const auto words = vocab.encode(doc.chunks[i]);
        ids.insert(ids.end(), words.begin(), words.end());
    }
    ids.push_back(tok::EOS);
    return ids;
}

inline std::vector<TokenId> plain_sequence(const AnnotatedDocument& doc, const Vocab& vocab) {
    doc.validate();
    std::vector<TokenId> ids{tok::BOS};
    detail::append_prompt(ids, doc.prompt, vocab);
    const auto words = vocab.encode(join_chunks(doc.chunks));
    ids.insert(ids.end(), words.begin(), words.end());
    ids.push_back(tok::EOS);
    return ids;
}

/// Removes every ANN_START ... ANN_END block (delimiters included).
inline std::vector<TokenId> strip_annotations(std::span<const TokenId> ids) {
    std::vector<TokenId> out;
    bool inside = false;
    for (TokenId t : ids) {
        if (t == tok::ANN_START) inside = true;
        else if (t == tok::ANN_END) inside = false;
        else if (!inside) out.push_back(t);
    }
    return out;
}

/// Content tokens of a sequence: no BOS/EOS, no prompt, no annotations.
inline std::vector<TokenId> content_tokens(std::span<const TokenId> ids) {
    std::size_t start = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == tok::PROMPT_END) start = i + 1;
    }
    std::vector<TokenId> out;
    for (TokenId t : strip_annotations(ids.subspan(start))) {
        if (t != tok::BOS && t != tok::EOS) out.push_back(t);
    }
    return out;
}

struct LabeledSequence {
    std::vector<TokenId> ids;
    std::vector<SpanLabel> labels;
};

/// Anchored layout when `anchored`, otherwise the annotation block is omitted.
inline LabeledSequence build_sft_sequence(std::string_view prompt, const TagList& tags, std::string_view response,
                                          const Vocab& vocab, bool anchored = true) {
    const auto p = vocab.encode(prompt);
    const auto r = vocab.encode(response);
    if (p.empty()) throw std::invalid_argument("build_sft_sequence: empty prompt");
    if (r.empty()) throw std::invalid_argument("build_sft_sequence: empty response");
    if (anchored && tags.empty()) throw std::invalid_argument("build_sft_sequence: anchored layout needs tags");
    LabeledSequence seq;
    seq.ids.push_back(tok::BOS);
    seq.ids.insert(seq.ids.end(), p.begin(), p.end());
    seq.ids.push_back(tok::PROMPT_END);
    if (anchored) {
        const auto ann = encode_annotation(tags, vocab);
        seq.ids.insert(seq.ids.end(), ann.begin(), ann.end());
    }
    seq.ids.insert(seq.ids.end(), r.begin(), r.end());
    seq.ids.push_back(tok::EOS);
    seq.labels = span_classify(seq.ids);
    return seq;
}

struct BudgetMatch {
    std::size_t standard_docs = 0;
    std::size_t annotated_docs = 0;
    std::size_t standard_tokens = 0;
    std::size_t annotated_tokens = 0;
};

/// Longest document prefix of each stream whose total length fits `budget`.
/// Both streams must hold at least `budget` tokens.
inline BudgetMatch token_budget_match(const std::vector<std::vector<TokenId>>& standard,
                                      const std::vector<std::vector<TokenId>>& annotated, std::size_t budget) {
    if (budget == 0) throw std::invalid_argument("token_budget_match: budget must be positive");
    auto total = [](const auto& s) {
        std::size_t n = 0;
        for (const auto& d : s) n += d.size();
        return n;
    };
    if (budget > total(standard) || budget > total(annotated)) {
        throw std::invalid_argument("token_budget_match: budget " + std::to_string(budget) + " exceeds stream length");
    }
    auto fit = [budget](const auto& s, std::size_t& docs, std::size_t& tokens) {
        for (const auto& d : s) {
            if (tokens + d.size() > budget) break;
            tokens += d.size();
            ++docs;
        }
    };
    BudgetMatch m;
    fit(standard, m.standard_docs, m.standard_tokens);
    fit(annotated, m.annotated_docs, m.annotated_tokens);
    return m;
}

}  // namespace anchor
