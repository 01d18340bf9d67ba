#include "anchor/model.hpp"
#include "anchor/optim.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace anchor;
using namespace testing_support;

namespace {

ModelConfig tiny(std::size_t vocab = 12, std::uint64_t seed = 3) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.context = 16;
    c.layers = 2;
    c.dim = 8;
    c.heads = 2;
    c.ff_mult = 2;
    c.init_scale = 0.3;
    c.seed = seed;
    return c;
}

}  // namespace

TEST(Model, ConfigValidation) {
    auto c = tiny();
    c.heads = 3;
    EXPECT_THROW(Transformer<double>{c}, std::invalid_argument);
    c = tiny();
    c.vocab_size = 0;
    EXPECT_THROW(Transformer<double>{c}, std::invalid_argument);
}

TEST(Model, SameSeedSameWeights) {
    const Transformer<double> a(tiny()), b(tiny()), c(tiny(12, 4));
    ASSERT_EQ(a.parameters().size(), b.parameters().size());
    bool differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        const auto x = a.parameters()[i].values(), y = b.parameters()[i].values(), z = c.parameters()[i].values();
        EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
        differs = differs || !std::equal(x.begin(), x.end(), z.begin());
    }
    EXPECT_TRUE(differs);
}

TEST(Model, ForwardIsCausal) {
    const Transformer<double> m(tiny());
    const std::vector<std::int32_t> a{0, 5, 6, 7, 8}, b{0, 5, 6, 9, 10};
    const auto la = m.forward_logits(a), lb = m.forward_logits(b);
    const std::size_t V = la.dim(1);
    for (std::size_t i = 0; i < 3 * V; ++i) EXPECT_EQ(la.values()[i], lb.values()[i]);
    bool later = false;
    for (std::size_t i = 3 * V; i < 5 * V; ++i) later = later || la.values()[i] != lb.values()[i];
    EXPECT_TRUE(later);
}

TEST(Model, DecoderMatchesFullForward) {
    Rng rng(5);
    const Transformer<double> m(tiny());
    for (int c = 0; c < 10; ++c) {
        std::vector<std::int32_t> ids(1 + rng.index(15));
        for (auto& t : ids) t = static_cast<std::int32_t>(rng.index(12));
        const auto full = m.forward_logits(ids);
        Transformer<double>::Decoder dec(m);
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const auto step = dec.step(ids[t]);
            for (std::size_t v = 0; v < 12; ++v) EXPECT_NEAR(step[v], full.at(t, v), 1e-10);
        }
        EXPECT_EQ(dec.position(), ids.size());
    }
}

TEST(Model, ContextLimitEnforced) {
    const Transformer<float> m(tiny());
    std::vector<std::int32_t> ids(17, 3);
    EXPECT_THROW(m.forward_logits(ids), SequenceTooLong);
    Transformer<float>::Decoder dec(m);
    for (int i = 0; i < 16; ++i) dec.step(3);
    EXPECT_THROW(dec.step(3), SequenceTooLong);
    EXPECT_THROW(Transformer<float>::Decoder(m).step(99), std::out_of_range);
}

TEST(Model, CloneIsDeep) {
    const Transformer<double> m(tiny());
    Transformer<double> c = m.clone();
    c.parameters()[0].mutable_values()[0] += 1.0;
    EXPECT_NE(c.parameters()[0].values()[0], m.parameters()[0].values()[0]);
}

TEST(Model, WholeModelGradientCheck) {
    auto cfg = tiny(7);
    cfg.layers = 1;
    cfg.dim = 4;
    cfg.context = 6;
    const Transformer<double> m(cfg);
    const std::vector<std::int32_t> ids{0, 3, 4, 5, 6, 1};
    const std::vector<std::uint8_t> w{0, 0, 1, 1, 0, 1};
    std::vector<T64> params(m.parameters().begin(), m.parameters().end());
    // the loss closure reads the shared parameter storage that gradient_error perturbs
    EXPECT_LT(gradient_error([&](auto&) { return m.sequence_loss(ids, w).loss; }, params), 1e-5);
}

TEST(Model, OverfitsTinySequence) {
    Transformer<float> m(tiny());
    const std::vector<std::int32_t> ids{0, 5, 6, 7, 8, 9, 10, 1};
    const std::vector<std::uint8_t> w(ids.size(), 1);
    auto state = make_optimizer_state<float>(m.parameters(), AdamWConfig{}, m.decay_mask());
    double first = 0, last = 0;
    for (int s = 0; s < 150; ++s) {
        m.zero_grad();
        auto ce = m.sequence_loss(ids, w);
        last = ce.loss.item();
        if (s == 0) first = last;
        ce.loss.backward();
        adamw_step<float>(m.parameters(), state, 1e-2);
    }
    EXPECT_LT(last, 0.1 * first);
}
