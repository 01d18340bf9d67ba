#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include "anchor/annotation.hpp"
#include "anchor/rng.hpp"
#include "anchor/tensor.hpp"
#include "anchor/tokenizer.hpp"
#include "anchor/world.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace testing_support {

using anchor::Rng;
using anchor::Tensor;
using T64 = Tensor<double>;

inline T64 random_tensor(anchor::Shape shape, Rng& rng, double scale = 1.0, bool grad = true) {
    std::vector<double> v(anchor::element_count(shape));
    for (auto& x : v) x = rng.normal() * scale;
    return T64::from(std::move(shape), std::move(v), grad);
}

/// Values bounded away from zero, for ops with a kink at 0.
inline T64 random_away_from_zero(anchor::Shape shape, Rng& rng) {
    std::vector<double> v(anchor::element_count(shape));
    for (auto& x : v) {
        const double m = 0.05 + rng.uniform();
        x = rng.bernoulli(0.5) ? m : -m;
    }
    return T64::from(std::move(shape), std::move(v), true);
}

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over every
/// element of every input. `loss` rebuilds the scalar from the inputs.
inline double gradient_error(const std::function<T64(std::vector<T64>&)>& loss, std::vector<T64>& inputs,
                             double h = 1e-6, double floor = 1e-3) {
    for (auto& t : inputs) t.zero_grad();
    T64 out = loss(inputs);
    out.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        if (t.has_grad()) analytic.emplace_back(t.grad().begin(), t.grad().end());
        else analytic.emplace_back(t.size(), 0.0);
    }
    double worst = 0.0;
    anchor::NoGradGuard guard;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        auto vals = inputs[k].mutable_values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + h;
            const double up = loss(inputs).item();
            vals[i] = saved - h;
            const double down = loss(inputs).item();
            vals[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[k][i];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

/// Projects a tensor onto fixed random weights so that every output
/// element carries a distinct gradient.
inline T64 project(const T64& y, const std::vector<double>& weights) {
    return anchor::sum(anchor::mul(y, T64::from(y.shape(), weights)));
}

inline std::vector<double> random_weights(std::size_t n, Rng& rng) {
    std::vector<double> w(n);
    for (auto& x : w) x = rng.normal();
    return w;
}

/// Random content word from the vocabulary (never reserved or the paragraph).
inline std::string random_word(const anchor::Vocab& v, Rng& rng) {
    while (true) {
        const auto id = static_cast<anchor::TokenId>(anchor::tok::kReserved + rng.index(v.size() - anchor::tok::kReserved));
        if (id != v.paragraph()) return v.word(id);
    }
}

inline std::string random_phrase(const anchor::Vocab& v, Rng& rng, std::size_t lo, std::size_t hi) {
    const std::size_t n = lo + rng.index(hi - lo + 1);
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) s += ' ';
        s += random_word(v, rng);
    }
    return s;
}

inline anchor::TagList random_tags(const anchor::Vocab& v, Rng& rng) {
    anchor::TagList tags;
    const std::size_t n = 1 + rng.index(4);
    for (std::size_t i = 0; i < n; ++i) {
        std::string key = random_word(v, rng);
        // keys never hold ':' in the text form
        while (key.find(':') != std::string::npos) key = random_word(v, rng);
        tags.push_back({key, random_phrase(v, rng, 0, 4)});
    }
    return tags;
}

inline anchor::AnnotatedDocument random_document(const anchor::Vocab& v, Rng& rng, bool with_prompt) {
    anchor::AnnotatedDocument d;
    const std::size_t n = 1 + rng.index(5);
    for (std::size_t i = 0; i < n; ++i) {
        d.chunks.push_back(random_phrase(v, rng, 1, 12));
        d.tags.push_back(random_tags(v, rng));
    }
    if (with_prompt) d.prompt = random_phrase(v, rng, 1, 6);
    return d;
}

}  // namespace testing_support
