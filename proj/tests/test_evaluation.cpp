#include "anchor/evaluation.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

using namespace anchor;

namespace {

// Oracle: entropy straight from the definition, probabilities given exactly.
double formula_entropy(const std::vector<double>& p) {
    double h = 0;
    for (double x : p) {
        if (x > 0) h += x * (std::log(1.0 / x) / std::log(2.0));
    }
    return h;
}

LabelTable column(const std::vector<std::string>& labels) {
    LabelTable t;
    for (const auto& l : labels) t.push_back({l});
    return t;
}

// Oracle for D: explicit double loop over ordered pairs i != j.
double pair_loop_dissimilarity(const std::vector<Embedding>& e) {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < e.size(); ++i) {
        for (std::size_t j = 0; j < e.size(); ++j) {
            if (i == j) continue;
            double dot = 0, a = 0, b = 0;
            for (std::size_t k = 0; k < e[i].size(); ++k) {
                dot += e[i][k] * e[j][k];
                a += e[i][k] * e[i][k];
                b += e[j][k] * e[j][k];
            }
            s += dot / std::sqrt(a * b);
            ++n;
        }
    }
    return 1.0 - s / static_cast<double>(n);
}

}  // namespace

TEST(Entropy, MatchesFormulaOnKnownCounts) {
    const auto r = semantic_entropy(column({"a", "a", "a", "b", "b", "c"}), {"x"}, {0});
    EXPECT_NEAR(r.mean, formula_entropy({3.0 / 6, 2.0 / 6, 1.0 / 6}), 1e-12);
    EXPECT_NEAR(r.mean, 1.459147917027245, 1e-12);
}

TEST(Entropy, UniformOverKIsLog2K) {
    for (std::size_t k : {2u, 3u, 5u, 14u, 48u}) {
        std::vector<std::string> labels;
        for (std::size_t rep = 0; rep < 7; ++rep) {
            for (std::size_t i = 0; i < k; ++i) labels.push_back("v" + std::to_string(i));
        }
        EXPECT_NEAR(semantic_entropy(column(labels), {"x"}, {0}).mean, std::log2(double(k)), 1e-12);
    }
    EXPECT_EQ(semantic_entropy(column({"a", "a", "a"}), {"x"}, {0}).mean, 0.0);
}

TEST(Entropy, RandomTablesAgreeWithOracle) {
    Rng rng(21);
    for (int c = 0; c < 200; ++c) {
        const std::size_t cats = 1 + rng.index(4), n = 2 + rng.index(300), k = 1 + rng.index(12);
        LabelTable t(n, std::vector<std::string>(cats));
        std::vector<std::map<std::string, double>> counts(cats);
        for (auto& row : t) {
            for (std::size_t j = 0; j < cats; ++j) {
                row[j] = "L" + std::to_string(rng.index(k));
                counts[j][row[j]] += 1;
            }
        }
        std::vector<std::string> names;
        for (std::size_t j = 0; j < cats; ++j) names.push_back("c" + std::to_string(j));
        const auto r = semantic_entropy(t, names, {0});
        double mean = 0;
        for (std::size_t j = 0; j < cats; ++j) {
            std::vector<double> p;
            for (const auto& [_, v] : counts[j]) p.push_back(v / double(n));
            const double h = formula_entropy(p);
            EXPECT_NEAR(r.entropy[j], h, 1e-12);
            mean += h / double(cats);
        }
        EXPECT_NEAR(r.mean, mean, 1e-12);
    }
}

TEST(Entropy, PooledEqualsFlattenThenCount) {
    Rng rng(22);
    for (int c = 0; c < 100; ++c) {
        std::vector<LabelTable> groups(1 + rng.index(5));
        LabelTable flat;
        for (auto& g : groups) {
            const std::size_t n = 1 + rng.index(40);
            for (std::size_t i = 0; i < n; ++i) {
                g.push_back({"v" + std::to_string(rng.index(6)), "w" + std::to_string(rng.index(3))});
                flat.push_back(g.back());
            }
        }
        if (flat.size() < 2) continue;
        const auto pooled = pooled_entropy(groups, {"a", "b"}, {0});
        const auto direct = semantic_entropy(flat, {"a", "b"}, {0});
        EXPECT_EQ(pooled.mean, direct.mean);
        EXPECT_EQ(pooled.entropy, direct.entropy);
    }
}

TEST(Entropy, BootstrapIntervalIsSeededAndOrdered) {
    Rng rng(23);
    LabelTable t;
    for (int i = 0; i < 256; ++i) t.push_back({"v" + std::to_string(rng.index(10))});
    const auto a = semantic_entropy(t, {"x"}, {500, 0.95, 7});
    const auto b = semantic_entropy(t, {"x"}, {500, 0.95, 7});
    EXPECT_EQ(a.ci_low, b.ci_low);
    EXPECT_EQ(a.ci_high, b.ci_high);
    EXPECT_LT(a.ci_low, a.ci_high);
    EXPECT_GT(a.ci_high, a.mean - 0.5);
    EXPECT_LT(a.ci_low, a.mean + 0.5);
}

TEST(Entropy, RejectsDegenerateInput) {
    EXPECT_THROW(semantic_entropy(column({"a"}), {"x"}), std::invalid_argument);
    EXPECT_THROW(semantic_entropy({{"a"}, {"b", "c"}}, {"x"}), std::invalid_argument);
    EXPECT_THROW(semantic_entropy(column({"a", "b"}), {}), std::invalid_argument);
}

TEST(Dissimilarity, MatchesPairLoopOracle) {
    Rng rng(31);
    for (int c = 0; c < 100; ++c) {
        const std::size_t n = 2 + rng.index(12), d = 1 + rng.index(8);
        std::vector<Embedding> e(n, Embedding(d));
        for (auto& v : e) {
            for (auto& x : v) x = rng.normal();
        }
        EXPECT_NEAR(pairwise_dissimilarity(e).value, pair_loop_dissimilarity(e), 1e-12);
    }
}

TEST(Dissimilarity, IdenticalIsZeroOrthogonalIsOne) {
    EXPECT_NEAR(pairwise_dissimilarity({{1, 2}, {2, 4}, {0.5, 1}}).value, 0.0, 1e-12);
    EXPECT_NEAR(pairwise_dissimilarity({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}).value, 1.0, 1e-12);
    EXPECT_THROW(pairwise_dissimilarity({{1, 0}}), std::invalid_argument);
    EXPECT_THROW(pairwise_dissimilarity({{1, 0}, {0, 0}}), std::invalid_argument);
}

TEST(Dissimilarity, BagOfFeaturesIgnoresStopWords) {
    const Vocab v = build_world_vocab(default_world_spec());
    const auto a = bag_of_features_embed("the ada walked across ashford", v);
    const auto b = bag_of_features_embed("ashford , ada walked across .", v);
    EXPECT_NEAR(cosine(a, b), 1.0, 1e-12);
    EXPECT_THROW(bag_of_features_embed("the a of", v), std::invalid_argument);
}

TEST(Statistics, OlsSlopeRecoversLine) {
    EXPECT_NEAR(ols_slope({1, 2, 3, 4}, {3, 5, 7, 9}), 2.0, 1e-12);
    EXPECT_NEAR(ols_slope({2.32, 3.81, 5.58}, {1, 1, 1}), 0.0, 1e-12);
    EXPECT_THROW(ols_slope({1, 1}, {2, 3}), std::invalid_argument);
}

TEST(Statistics, SpearmanRanks) {
    EXPECT_NEAR(spearman({1, 2, 3, 4, 5}, {10, 20, 25, 40, 100}), 1.0, 1e-12);
    EXPECT_NEAR(spearman({1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}), -1.0, 1e-12);
    // with ties: ranks {1.5,1.5,3} vs {1,2,3}
    const double r = spearman({1, 1, 2}, {1, 2, 3});
    EXPECT_NEAR(r, 0.8660254037844386, 1e-12);
    // without ties equals the classic 1 - 6 sum d^2 / (n (n^2 - 1))
    Rng rng(3);
    for (int c = 0; c < 50; ++c) {
        const std::size_t n = 3 + rng.index(10);
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = double(i);
            y[i] = double(i);
        }
        rng.shuffle(std::span<double>(y));
        double d2 = 0;
        for (std::size_t i = 0; i < n; ++i) d2 += (x[i] - y[i]) * (x[i] - y[i]);
        EXPECT_NEAR(spearman(x, y), 1.0 - 6.0 * d2 / (double(n) * (double(n * n) - 1.0)), 1e-12);
    }
}
