#include "anchor/rng.hpp"
#include "anchor/tokenizer.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace anchor;

TEST(Tokenizer, ReservedIdsComeFirst) {
    Vocab v;
    ASSERT_EQ(v.size(), tok::kReserved);
    for (std::size_t i = 0; i < tok::kReserved; ++i) {
        EXPECT_EQ(v.id(tok::kReservedText[i]), static_cast<TokenId>(i));
    }
    EXPECT_EQ(v.id("never-seen"), tok::UNK);
}

TEST(Tokenizer, BuildFollowsFirstOccurrence) {
    const std::vector<std::string> texts{"the fox ran", "a fox sat"};
    const Vocab v = Vocab::build(texts);
    EXPECT_EQ(v.id("the"), 8);
    EXPECT_EQ(v.id("fox"), 9);
    EXPECT_EQ(v.id("ran"), 10);
    EXPECT_EQ(v.id("a"), 11);
    EXPECT_EQ(v.id("sat"), 12);
}

TEST(Tokenizer, ParagraphsSurviveRoundTrip) {
    const std::string text = "one two.\n\nthree four.";
    const Vocab v = Vocab::build(std::vector<std::string>{text});
    const auto ids = v.encode(text);
    ASSERT_EQ(ids.size(), 5u);
    EXPECT_EQ(ids[2], v.paragraph());
    EXPECT_EQ(v.decode(ids), text);
}

TEST(Tokenizer, WhitespaceNormalises) {
    EXPECT_EQ(split_words("  a \t b\n c  "), (std::vector<std::string>{"a", "b", "c"}));
    // leading and trailing blank lines produce no paragraph word
    EXPECT_EQ(split_words("\n\na\n\n"), (std::vector<std::string>{"a"}));
}

TEST(Tokenizer, RandomEncodeDecodeRoundTrip) {
    Rng rng(11);
    std::vector<std::string> pool;
    for (int i = 0; i < 50; ++i) pool.push_back("w" + std::to_string(i));
    auto corpus = pool;
    corpus.push_back("w0\n\nw1");  // so the paragraph word exists
    const Vocab v = Vocab::build(corpus);
    for (int c = 0; c < 2000; ++c) {
        std::string text;
        const std::size_t n = 1 + rng.index(20);
        for (std::size_t i = 0; i < n; ++i) {
            if (i) text += rng.bernoulli(0.1) ? "\n\n" : " ";
            text += pool[rng.index(pool.size())];
        }
        EXPECT_EQ(v.decode(v.encode(text)), text);
    }
}

TEST(Tokenizer, SaveLoadRoundTrip) {
    const auto path = (std::filesystem::temp_directory_path() / "anchor_vocab_test.txt").string();
    Vocab v = Vocab::build(std::vector<std::string>{"alpha beta\n\ngamma back\\slash"});
    v.save(path);
    const Vocab back = Vocab::load(path);
    EXPECT_TRUE(back == v);
    EXPECT_EQ(back.paragraph(), v.paragraph());
    std::filesystem::remove(path);
}

TEST(Tokenizer, LoadRejectsCorruptFile) {
    const auto path = (std::filesystem::temp_directory_path() / "anchor_vocab_bad.txt").string();
    {
        std::ofstream out(path);
        out << "<bos>\n";
    }
    EXPECT_THROW(Vocab::load(path), std::runtime_error);
    std::filesystem::remove(path);
}

TEST(SpanClassify, LabelsEveryRegion) {
    Vocab v = Vocab::build(std::vector<std::string>{"ask topic sea story text"});
    const TokenId ask = v.id("ask"), key = v.id("topic"), val = v.id("sea"), w = v.id("story");
    const std::vector<TokenId> ids{tok::BOS, ask, tok::PROMPT_END, tok::ANN_START, key, tok::KV_SEP, val,
                                   tok::ANN_END, w, tok::EOS};
    const auto l = span_classify(ids);
    const std::vector<SpanLabel> want{SpanLabel::Prompt,     SpanLabel::Prompt,         SpanLabel::Prompt,
                                      SpanLabel::Structural, SpanLabel::AnnotationKey,  SpanLabel::Structural,
                                      SpanLabel::AnnotationValue, SpanLabel::Structural, SpanLabel::Response,
                                      SpanLabel::Response};
    EXPECT_EQ(l, want);
}

TEST(SpanClassify, RejectsMalformedSequences) {
    using V = std::vector<TokenId>;
    EXPECT_THROW(span_classify(V{tok::ANN_START, 9}), StructuralError);
    EXPECT_THROW(span_classify(V{tok::ANN_END}), StructuralError);
    EXPECT_THROW(span_classify(V{9, tok::BOS}), StructuralError);
    EXPECT_THROW(span_classify(V{tok::EOS, 9}), StructuralError);
    EXPECT_THROW(span_classify(V{tok::ANN_START, tok::ANN_START}), StructuralError);
    EXPECT_THROW(span_classify(V{tok::KV_SEP}), StructuralError);
    EXPECT_THROW(span_classify(V{tok::PROMPT_END, tok::PROMPT_END}), StructuralError);
    EXPECT_THROW(span_classify(V{tok::ANN_START, 9, tok::ANN_END, tok::PROMPT_END}), StructuralError);
}
