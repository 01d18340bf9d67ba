#pragma once

// Word-level tokenizer. Text is split on whitespace; a whitespace run that
// contains a blank line becomes the paragraph token, so chunk boundaries
// survive a round trip. Eight reserved tokens come first.

#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace anchor {

using TokenId = std::int32_t;

namespace tok {
inline constexpr TokenId BOS = 0;
inline constexpr TokenId EOS = 1;
inline constexpr TokenId ANN_START = 2;
inline constexpr TokenId ANN_END = 3;
inline constexpr TokenId TAG_SEP = 4;
inline constexpr TokenId KV_SEP = 5;
inline constexpr TokenId PROMPT_END = 6;
inline constexpr TokenId UNK = 7;
inline constexpr std::size_t kReserved = 8;

inline constexpr std::string_view kReservedText[kReserved] = {
    "<bos>", "<eos>", "<ann>", "</ann>", "<tag>", "<kv>", "<prompt_end>", "<unk>"};

/// Surface form of the paragraph break.
inline constexpr std::string_view kParagraph = "\n\n";

inline bool is_reserved(TokenId id) { return id >= 0 && static_cast<std::size_t>(id) < kReserved; }
}  // namespace tok

/// Splits text into word strings. Runs of whitespace containing two or more
/// newlines yield a paragraph word.
inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::size_t i = 0;
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (i < text.size()) {
        if (is_space(text[i])) {
            int newlines = 0;
            while (i < text.size() && is_space(text[i])) {
                newlines += text[i] == '\n';
                ++i;
            }
            if (newlines >= 2 && !words.empty() && i < text.size()) {
                words.emplace_back(tok::kParagraph);
            }
            continue;
        }
        const std::size_t start = i;
        while (i < text.size() && !is_space(text[i])) ++i;
        words.emplace_back(text.substr(start, i - start));
    }
    return words;
}

class Vocab {
public:
    Vocab() {
        for (std::string_view s : tok::kReservedText) insert(std::string(s));
    }

    /// Ids follow first-occurrence order; reserved tokens first.
    template <class Range>
    static Vocab build(const Range& texts) {
        Vocab v;
        for (const auto& text : texts) v.add_text(text);
        return v;
    }

    void add_text(std::string_view text) {
        for (auto& w : split_words(text)) {
            if (!index_.contains(w)) insert(std::move(w));
        }
    }

    void add_word(std::string word) {
        if (!index_.contains(word)) insert(std::move(word));
    }

    std::size_t size() const noexcept { return words_.size(); }
    bool contains(std::string_view word) const { return index_.contains(std::string(word)); }

    TokenId id(std::string_view word) const {
        const auto it = index_.find(std::string(word));
        return it == index_.end() ? tok::UNK : it->second;
    }

    const std::string& word(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
            throw std::out_of_range("Vocab::word: id " + std::to_string(id));
        }
        return words_[static_cast<std::size_t>(id)];
    }

    TokenId paragraph() const { return id(tok::kParagraph); }

    std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> ids;
        for (const auto& w : split_words(text)) ids.push_back(id(w));
        return ids;
    }

    /// Words joined by single spaces; the paragraph token joins without spaces.
    std::string decode(std::span<const TokenId> ids) const {
        std::string out;
        bool glue = true;
        for (TokenId t : ids) {
            const std::string& w = word(t);
            if (w == tok::kParagraph) {
                out += w;
                glue = true;
                continue;
            }
            if (!glue) out += ' ';
            out += w;
            glue = false;
        }
        return out;
    }

    const std::vector<std::string>& words() const noexcept { return words_; }

    /// One token per line, line number = id. Newlines and backslashes escaped.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write vocab file " + path);
        for (const auto& w : words_) {
            for (char c : w) {
                if (c == '\\') out << "\\\\";
                else if (c == '\n') out << "\\n";
                else out << c;
            }
            out << '\n';
        }
        if (!out) throw std::runtime_error("write failed for vocab file " + path);
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot read vocab file " + path);
        std::vector<std::string> lines;
        std::string line;
        while (std::getline(in, line)) {
            std::string w;
            for (std::size_t i = 0; i < line.size(); ++i) {
                if (line[i] == '\\' && i + 1 < line.size()) {
                    ++i;
                    w += line[i] == 'n' ? '\n' : line[i];
                } else {
                    w += line[i];
                }
            }
            lines.push_back(std::move(w));
        }
        if (lines.size() < tok::kReserved) throw std::runtime_error("vocab file " + path + " is truncated");
        for (std::size_t i = 0; i < tok::kReserved; ++i) {
            if (lines[i] != tok::kReservedText[i]) {
                throw std::runtime_error("vocab file " + path + ": reserved token mismatch at line " + std::to_string(i + 1));
            }
        }
        Vocab v;
        for (std::size_t i = tok::kReserved; i < lines.size(); ++i) {
            if (v.index_.contains(lines[i])) {
                throw std::runtime_error("vocab file " + path + ": duplicate token at line " + std::to_string(i + 1));
            }
            v.insert(std::move(lines[i]));
        }
        return v;
    }

    bool operator==(const Vocab& other) const { return words_ == other.words_; }

private:
    void insert(std::string w) {
        index_.emplace(w, static_cast<TokenId>(words_.size()));
        words_.push_back(std::move(w));
    }

    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> index_;
};

enum class SpanLabel : std::uint8_t { Prompt, AnnotationKey, AnnotationValue, Response, Structural };

inline std::string_view to_string(SpanLabel l) {
    switch (l) {
        case SpanLabel::Prompt: return "prompt";
        case SpanLabel::AnnotationKey: return "ann-key";
        case SpanLabel::AnnotationValue: return "ann-value";
        case SpanLabel::Response: return "response";
        case SpanLabel::Structural: return "structural";
    }
    return "?";
}

class StructuralError : public std::runtime_error {
public:
    StructuralError(const std::string& what, std::size_t index)
        : std::runtime_error(what + " at token " + std::to_string(index)), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// Labels every token. BOS, prompt words and PROMPT_END are prompt; EOS and
/// content words are response; annotation delimiters are structural; inside
/// an annotation, words before KV_SEP are keys and words after it are values.
inline std::vector<SpanLabel> span_classify(std::span<const TokenId> ids) {
    std::vector<SpanLabel> labels(ids.size(), SpanLabel::Response);
    std::size_t prompt_end = ids.size();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == tok::PROMPT_END) {
            if (prompt_end != ids.size()) throw StructuralError("second PROMPT_END", i);
            prompt_end = i;
        }
    }
    enum class State { Outside, Key, Value } state = State::Outside;
    std::size_t open = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const TokenId t = ids[i];
        const bool in_prompt = prompt_end != ids.size() && i <= prompt_end;
        switch (t) {
            case tok::BOS:
                if (i != 0) throw StructuralError("BOS not at sequence start", i);
                labels[i] = SpanLabel::Prompt;
                break;
            case tok::PROMPT_END:
                if (state != State::Outside) throw StructuralError("PROMPT_END inside annotation", i);
                labels[i] = SpanLabel::Prompt;
                break;
            case tok::EOS:
                if (state != State::Outside) throw StructuralError("EOS inside annotation", i);
                if (i + 1 != ids.size()) throw StructuralError("EOS before sequence end", i);
                labels[i] = SpanLabel::Response;
                break;
            case tok::ANN_START:
                if (state != State::Outside) throw StructuralError("nested ANN_START", i);
                if (in_prompt) throw StructuralError("annotation inside prompt", i);
                state = State::Key;
                open = i;
                labels[i] = SpanLabel::Structural;
                break;
            case tok::ANN_END:
                if (state == State::Outside) throw StructuralError("ANN_END without ANN_START", i);
                state = State::Outside;
                labels[i] = SpanLabel::Structural;
                break;
            case tok::KV_SEP:
                if (state != State::Key) throw StructuralError("KV_SEP outside a tag key", i);
                state = State::Value;
                labels[i] = SpanLabel::Structural;
                break;
            case tok::TAG_SEP:
                if (state == State::Outside) throw StructuralError("TAG_SEP outside annotation", i);
                state = State::Key;
                labels[i] = SpanLabel::Structural;
                break;
            default:
                if (state == State::Key) labels[i] = SpanLabel::AnnotationKey;
                else if (state == State::Value) labels[i] = SpanLabel::AnnotationValue;
                else labels[i] = in_prompt ? SpanLabel::Prompt : SpanLabel::Response;
        }
    }
    if (state != State::Outside) throw StructuralError("unterminated annotation opened", open);
    return labels;
}

}  // namespace anchor
