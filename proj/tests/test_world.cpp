#include "anchor/world.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

using namespace anchor;

namespace {

// Test-side plug-in entropy, independent of evaluation.hpp.
double counted_entropy(const std::map<std::string, std::size_t>& counts) {
    double n = 0.0;
    for (const auto& [_, c] : counts) n += static_cast<double>(c);
    double h = 0.0;
    for (const auto& [_, c] : counts) {
        const double p = static_cast<double>(c) / n;
        h -= p * std::log(p) / std::log(2.0);
    }
    return h;
}

Restriction only(Attribute a, std::size_t k) { return Restriction{}.prefix(a, k); }

}  // namespace

TEST(World, DefaultCatalogSizes) {
    const auto w = default_world_spec();
    EXPECT_EQ(w.catalogs[Attribute::Topic].size(), 48u);
    EXPECT_EQ(w.catalogs[Attribute::Persona].size(), 23u);
    EXPECT_NO_THROW(validate(w));
}

TEST(World, DatasetEntropyMetadataMatchesPublishedLevels) {
    const auto w = default_world_spec();
    const std::vector<std::pair<std::size_t, double>> topics{{5, 2.32}, {14, 3.81}, {48, 5.58}};
    const std::vector<std::pair<std::size_t, double>> personas{{8, 3.0}, {12, 3.58}, {23, 4.52}};
    for (auto [k, bits] : topics) {
        const auto e = dataset_entropy(w, only(Attribute::Topic, k));
        EXPECT_NEAR(e.bits[index_of(Attribute::Topic)], bits, 0.005);
        EXPECT_TRUE(e.restricted[index_of(Attribute::Topic)]);
        EXPECT_FALSE(e.restricted[index_of(Attribute::Persona)]);
    }
    for (auto [k, bits] : personas) {
        const auto e = dataset_entropy(w, only(Attribute::Persona, k));
        EXPECT_NEAR(e.bits[index_of(Attribute::Persona)], bits, 0.005);
    }
}

TEST(World, EmpiricalEntropyConvergesToMetadata) {
    const auto w = default_world_spec();
    const ExactLabeler labeler(w.catalogs);
    for (Attribute a : {Attribute::Topic, Attribute::Persona}) {
        for (std::size_t k : a == Attribute::Topic ? std::vector<std::size_t>{5, 14, 48} : std::vector<std::size_t>{8, 12, 23}) {
            const auto ds = build_posttraining_subset(w, 50000, only(a, k), 99 + k);
            std::map<std::string, std::size_t> counts;
            for (const auto& ex : ds.examples) ++counts[labeler.label(ex.text())[a]];
            EXPECT_NEAR(counted_entropy(counts), ds.entropy.bits[index_of(a)], 0.05) << name_of(a) << " k=" << k;
        }
    }
}

TEST(World, LabelerRecoversLatentExactly) {
    const auto w = default_world_spec();
    const ExactLabeler labeler(w.catalogs);
    const auto docs = build_pretraining_corpus(w, 3000, 5);
    for (const auto& d : docs) EXPECT_EQ(labeler.label(d.text()), d.latent) << d.text();
}

TEST(World, LabelerPrefersLongerPhraseAndReportsOther) {
    Catalogs c;
    c[Attribute::Topic] = {"space", "space exploration"};
    c[Attribute::Persona] = {"a child"};
    c[Attribute::Entity] = {"ada"};
    c[Attribute::Location] = {"ashford"};
    const ExactLabeler l(c);
    const auto z = l.label("we love space exploration and ada");
    EXPECT_EQ(z[Attribute::Topic], "space exploration");
    EXPECT_EQ(z[Attribute::Entity], "ada");
    EXPECT_EQ(z[Attribute::Persona], kOther);
    EXPECT_EQ(z[Attribute::Location], kOther);
}

TEST(World, AnnotationsListOnlyMentionedAttributes) {
    const auto w = default_world_spec();
    const auto docs = build_pretraining_corpus(w, 500, 17);
    const ExactLabeler labeler(w.catalogs);
    for (const auto& d : docs) {
        ASSERT_EQ(d.chunks.size(), d.annotations.size());
        EXPECT_GE(d.chunks.size(), w.min_chunks);
        EXPECT_LE(d.chunks.size(), w.max_chunks);
        // opening chunk mentions every attribute
        EXPECT_EQ(d.annotations[0].size(), kAttributeCount);
        for (std::size_t i = 0; i < d.chunks.size(); ++i) {
            const auto z = labeler.label(d.chunks[i]);
            for (const auto& t : d.annotations[i]) {
                bool found = false;
                for (Attribute a : kAttributes) found = found || (t.key == name_of(a) && z[a] == t.value);
                EXPECT_TRUE(found) << t.key << "=" << t.value << " not in " << d.chunks[i];
            }
        }
    }
}

TEST(World, RestrictionsHonoured) {
    const auto w = default_world_spec();
    const auto r = Restriction{}.values(w, Attribute::Persona, {"a father", "a poet"});
    const auto ds = build_posttraining_subset(w, 400, r, 3);
    for (const auto& ex : ds.examples) {
        const auto& p = ex.latent[Attribute::Persona];
        EXPECT_TRUE(p == "a father" || p == "a poet");
        EXPECT_EQ(ex.chunks.back(), w.closing);
        ASSERT_TRUE(ex.prompt.has_value());
    }
    EXPECT_THROW(Restriction{}.values(w, Attribute::Topic, {"not a topic"}), std::invalid_argument);
    EXPECT_THROW(Restriction{}.prefix(Attribute::Topic, 0), std::invalid_argument);
}

TEST(World, CorpusIsDeterministicPerSeed) {
    const auto w = default_world_spec();
    const auto a = build_pretraining_corpus(w, 200, 42, 0.3);
    const auto b = build_pretraining_corpus(w, 200, 42, 0.3);
    const auto c = build_pretraining_corpus(w, 200, 43, 0.3);
    std::size_t prompts = 0, diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(to_json(a[i]), to_json(b[i]));
        prompts += a[i].prompt.has_value();
        diff += a[i].text() != c[i].text();
    }
    EXPECT_GT(prompts, 30u);
    EXPECT_LT(prompts, 100u);
    EXPECT_GT(diff, 150u);
}

TEST(World, ShardsRoundTrip) {
    const auto w = default_world_spec();
    const auto docs = build_pretraining_corpus(w, 250, 8, 0.5);
    const auto dir = std::filesystem::temp_directory_path() / "anchor_shard_test";
    std::filesystem::remove_all(dir);
    const auto paths = write_shards(dir, docs, 100);
    EXPECT_EQ(paths.size(), 3u);
    const auto back = read_shards(dir);
    ASSERT_EQ(back.size(), docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i) EXPECT_EQ(to_json(back[i]), to_json(docs[i]));
    std::filesystem::remove_all(dir);
}

TEST(World, SpecJsonRoundTrip) {
    const auto w = default_world_spec();
    const auto back = world_spec_from_json(nlohmann::json::parse(to_json(w).dump()));
    EXPECT_EQ(to_json(back), to_json(w));
    auto bad = nlohmann::json::parse(to_json(w).dump());
    bad["min_chunks"] = 9;
    EXPECT_THROW(world_spec_from_json(bad), std::invalid_argument);
}

TEST(World, VocabularyCoversEveryRenderedWord) {
    const auto w = default_world_spec();
    const Vocab v = build_world_vocab(w);
    for (const auto& d : build_pretraining_corpus(w, 500, 21, 0.5)) {
        for (TokenId t : v.encode(d.text())) EXPECT_NE(t, tok::UNK);
        if (d.prompt) {
            for (TokenId t : v.encode(*d.prompt)) EXPECT_NE(t, tok::UNK);
        }
    }
}
