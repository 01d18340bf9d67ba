#pragma once

// Diversity metrics: plug-in semantic entropy in bits (mean over categories),
// pooled entropy, pairwise cosine dissimilarity, a bag-of-words embedder and
// a few summary statistics used by the studies.

#include "anchor/rng.hpp"
#include "anchor/sampler.hpp"
#include "anchor/tokenizer.hpp"
#include "anchor/types.hpp"
#include "anchor/world.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace anchor {

struct LabelDistribution {
    std::string category;
    std::map<std::string, std::size_t> counts;
    std::size_t total = 0;

    void add(const std::string& label) {
        ++counts[label];
        ++total;
    }
};

/// Plug-in entropy in bits of a count vector.
inline double entropy_bits(const std::vector<std::size_t>& counts) {
    std::size_t total = 0;
    for (auto c : counts) total += c;
    if (total == 0) throw std::invalid_argument("entropy_bits: empty distribution");
    const double n = static_cast<double>(total);
    double h = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / n;
        h -= p * std::log2(p);
    }
    return h;
}

inline double entropy_bits(const LabelDistribution& d) {
    std::vector<std::size_t> c;
    for (const auto& [_, k] : d.counts) c.push_back(k);
    return entropy_bits(c);
}

struct EntropyReport {
    std::vector<std::string> categories;
    std::vector<double> entropy;  // bits, per category
    double mean = 0.0;
    std::size_t samples = 0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::optional<DatasetEntropy> dataset;

    double category(std::string_view name) const {
        for (std::size_t i = 0; i < categories.size(); ++i) {
            if (categories[i] == name) return entropy[i];
        }
        throw std::out_of_range("EntropyReport: no category " + std::string(name));
    }
};

/// Labels are rows of category values; `categories` names the columns.
using LabelTable = std::vector<std::vector<std::string>>;

struct EntropyOptions {
    std::size_t bootstrap = 1000;  // 0 disables the interval
    double confidence = 0.95;
    std::uint64_t seed = 0;
};

namespace detail {
/// Mean over categories of plug-in entropies for the rows selected by idx.
inline double mean_entropy(const LabelTable& rows, std::size_t n_cat, const std::vector<std::size_t>& idx,
                           std::vector<double>* per_cat = nullptr) {
    double sum = 0.0;
    for (std::size_t c = 0; c < n_cat; ++c) {
        std::map<std::string_view, std::size_t> counts;
        for (std::size_t i : idx) ++counts[rows[i][c]];
        std::vector<std::size_t> v;
        for (const auto& [_, k] : counts) v.push_back(k);
        const double h = entropy_bits(v);
        if (per_cat) per_cat->push_back(h);
        sum += h;
    }
    return sum / static_cast<double>(n_cat);
}

inline double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}
}  // namespace detail

/// Per-category plug-in entropy, their mean, and a percentile bootstrap
/// interval for the mean (samples resampled with replacement).
inline EntropyReport semantic_entropy(const LabelTable& rows, const std::vector<std::string>& categories,
                                      const EntropyOptions& opt = {}) {
    if (categories.empty()) throw std::invalid_argument("semantic_entropy: no categories");
    if (rows.size() < 2) throw std::invalid_argument("semantic_entropy: need at least two samples");
    for (const auto& r : rows) {
        if (r.size() != categories.size()) throw std::invalid_argument("semantic_entropy: ragged label table");
    }
    EntropyReport rep;
    rep.categories = categories;
    rep.samples = rows.size();
    std::vector<std::size_t> all(rows.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    rep.mean = detail::mean_entropy(rows, categories.size(), all, &rep.entropy);
    rep.ci_low = rep.ci_high = rep.mean;
    if (opt.bootstrap > 0) {
        Rng rng(derive_seed(opt.seed, 0xB007));
        std::vector<double> means;
        means.reserve(opt.bootstrap);
        std::vector<std::size_t> idx(rows.size());
        for (std::size_t b = 0; b < opt.bootstrap; ++b) {
            for (auto& i : idx) i = rng.index(rows.size());
            means.push_back(detail::mean_entropy(rows, categories.size(), idx));
        }
        const double alpha = (1.0 - opt.confidence) / 2.0;
        rep.ci_low = detail::percentile(means, alpha);
        rep.ci_high = detail::percentile(means, 1.0 - alpha);
    }
    return rep;
}

/// Entropy over the concatenation of all groups.
inline EntropyReport pooled_entropy(const std::vector<LabelTable>& groups, const std::vector<std::string>& categories,
                                    const EntropyOptions& opt = {}) {
    if (groups.empty()) throw std::invalid_argument("pooled_entropy: no groups");
    LabelTable flat;
    for (const auto& g : groups) flat.insert(flat.end(), g.begin(), g.end());
    return semantic_entropy(flat, categories, opt);
}

inline std::vector<std::string> attribute_categories() {
    return {kAttributeNames.begin(), kAttributeNames.end()};
}

inline std::vector<std::string> to_row(const SemanticLatent& z) { return {z.values.begin(), z.values.end()}; }

/// Exact labels of every response, in generation order.
inline LabelTable label_with_exact(const std::vector<Generation>& gens, const ExactLabeler& labeler) {
    LabelTable rows;
    rows.reserve(gens.size());
    for (const auto& g : gens) rows.push_back(to_row(labeler.label(g.response)));
    return rows;
}

// --- Embeddings --------------------------------------------------------------

using Embedding = std::vector<double>;

inline const std::unordered_set<std::string>& default_stop_words() {
    static const std::unordered_set<std::string> words = {
        "a", "an", "the", "of", "in", "and", "or", "to", "was", "is", "it", "as", "with", "about",
        "who", "there", ",", ".", "?", "!", ":", ";", std::string(tok::kParagraph)};
    return words;
}

/// L2-normalised term counts over content words (reserved tokens and stop
/// words excluded), one dimension per vocabulary entry.
inline Embedding bag_of_features_embed(std::string_view text, const Vocab& vocab,
                                       const std::unordered_set<std::string>& stop = default_stop_words()) {
    Embedding e(vocab.size(), 0.0);
    bool any = false;
    for (const auto& w : split_words(text)) {
        if (stop.contains(w)) continue;
        const TokenId id = vocab.id(w);
        if (tok::is_reserved(id)) continue;
        e[static_cast<std::size_t>(id)] += 1.0;
        any = true;
    }
    if (!any) throw std::invalid_argument("bag_of_features_embed: no content words");
    double n = 0.0;
    for (double v : e) n += v * v;
    n = std::sqrt(n);
    for (double& v : e) v /= n;
    return e;
}

inline double cosine(const Embedding& a, const Embedding& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (!(na > 0.0) || !(nb > 0.0)) throw std::invalid_argument("cosine: zero embedding");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct Dissimilarity {
    double value = 0.0;  // 1 - mean pairwise cosine
    double min_cosine = 0.0;
    double max_cosine = 0.0;
    std::size_t pairs = 0;
};

inline Dissimilarity pairwise_dissimilarity(const std::vector<Embedding>& emb) {
    const std::size_t n = emb.size();
    if (n < 2) throw std::invalid_argument("pairwise_dissimilarity: need at least two embeddings");
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (double v : emb[i]) {
            if (!std::isfinite(v)) throw std::invalid_argument("pairwise_dissimilarity: non-finite embedding");
            s += v * v;
        }
        if (!(s > 0.0)) throw std::invalid_argument("pairwise_dissimilarity: zero embedding at " + std::to_string(i));
        norms[i] = std::sqrt(s);
    }
    Dissimilarity d;
    d.min_cosine = 1.0;
    d.max_cosine = -1.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (emb[j].size() != emb[i].size()) throw std::invalid_argument("pairwise_dissimilarity: dimension mismatch");
            double dot = 0.0;
            for (std::size_t k = 0; k < emb[i].size(); ++k) dot += emb[i][k] * emb[j][k];
            const double c = dot / (norms[i] * norms[j]);
            sum += c;
            d.min_cosine = std::min(d.min_cosine, c);
            d.max_cosine = std::max(d.max_cosine, c);
            ++d.pairs;
        }
    }
    d.value = 1.0 - 2.0 / (static_cast<double>(n) * static_cast<double>(n - 1)) * sum;
    return d;
}

/// Embeds every response that has content words; others are skipped.
inline std::optional<Dissimilarity> response_dissimilarity(const std::vector<Generation>& gens, const Vocab& vocab) {
    std::vector<Embedding> emb;
    for (const auto& g : gens) {
        try {
            emb.push_back(bag_of_features_embed(g.response, vocab));
        } catch (const std::invalid_argument&) {
        }
    }
    if (emb.size() < 2) return std::nullopt;
    return pairwise_dissimilarity(emb);
}

// --- Summary statistics ------------------------------------------------------

/// Ordinary least-squares slope of y on x.
inline double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("ols_slope: need two or more paired points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if (sxx == 0.0) throw std::invalid_argument("ols_slope: x has no spread");
    return sxy / sxx;
}

/// Ranks starting at 1; ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

/// Pearson correlation of the average ranks.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two or more paired points");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

inline nlohmann::ordered_json to_json(const EntropyReport& r) {
    nlohmann::ordered_json per;
    for (std::size_t i = 0; i < r.categories.size(); ++i) per[r.categories[i]] = r.entropy[i];
    nlohmann::ordered_json j{{"per_category_bits", per}, {"mean_bits", r.mean},  {"samples", r.samples},
                             {"ci95_low", r.ci_low},     {"ci95_high", r.ci_high}};
    if (r.dataset) {
        nlohmann::ordered_json d;
        for (Attribute a : kAttributes) {
            d[std::string(name_of(a))] = {{"bits", r.dataset->bits[index_of(a)]},
                                          {"restricted", static_cast<bool>(r.dataset->restricted[index_of(a)])}};
        }
        j["dataset_entropy"] = d;
    }
    return j;
}

}  // namespace anchor
