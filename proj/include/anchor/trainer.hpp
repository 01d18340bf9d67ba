#pragma once

// Training regimes, loss masks, the optimisation loop, learning-rate
// selection, validation likelihood and the checkpoint container.

#include "anchor/annotation.hpp"
#include "anchor/hash.hpp"
#include "anchor/model.hpp"
#include "anchor/optim.hpp"
#include "anchor/rng.hpp"
#include "anchor/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace anchor {

enum class Regime { PretrainStandard, PretrainAnnotated, SftStandard, SftAnchored, SftAnchoredUnmasked };

inline std::string_view to_string(Regime r) {
    switch (r) {
        case Regime::PretrainStandard: return "pretrain-standard";
        case Regime::PretrainAnnotated: return "pretrain-annotated";
        case Regime::SftStandard: return "sft-standard";
        case Regime::SftAnchored: return "sft-anchored";
        case Regime::SftAnchoredUnmasked: return "sft-anchored-unmasked";
    }
    return "?";
}

inline Regime parse_regime(std::string_view s) {
    for (Regime r : {Regime::PretrainStandard, Regime::PretrainAnnotated, Regime::SftStandard, Regime::SftAnchored,
                     Regime::SftAnchoredUnmasked}) {
        if (to_string(r) == s) return r;
    }
    throw std::invalid_argument("unknown regime '" + std::string(s) + "'");
}

inline bool is_pretraining(Regime r) { return r == Regime::PretrainStandard || r == Regime::PretrainAnnotated; }
inline bool uses_annotations(Regime r) { return r != Regime::PretrainStandard && r != Regime::SftStandard; }

struct LossMask {
    std::vector<std::uint8_t> weights;
    std::vector<SpanLabel> labels;
    bool partial_unmask = false;
};

/// Pretraining counts every token. SFT always masks the prompt. The anchored
/// regime also masks the annotation, except in the partial-unmask branch
/// where keys and delimiters count and values stay masked. The unmasked
/// ablation counts the whole annotation.
inline LossMask build_loss_mask(std::span<const SpanLabel> labels, Regime regime, bool partial_unmask) {
    LossMask m;
    m.labels.assign(labels.begin(), labels.end());
    m.weights.resize(labels.size());
    m.partial_unmask = partial_unmask && regime == Regime::SftAnchored;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const SpanLabel l = labels[i];
        bool on = false;
        switch (regime) {
            case Regime::PretrainStandard:
            case Regime::PretrainAnnotated: on = true; break;
            case Regime::SftStandard: on = l == SpanLabel::Response; break;
            case Regime::SftAnchored:
                on = l == SpanLabel::Response ||
                     (m.partial_unmask && (l == SpanLabel::AnnotationKey || l == SpanLabel::Structural));
                break;
            case Regime::SftAnchoredUnmasked: on = l != SpanLabel::Prompt; break;
        }
        m.weights[i] = on ? 1 : 0;
    }
    return m;
}

/// Draws the per-example partial-unmask branch (anchored regime only).
inline LossMask build_loss_mask(std::span<const SpanLabel> labels, Regime regime, Rng& rng,
                                double partial_unmask_prob = 0.003) {
    const bool partial = regime == Regime::SftAnchored && rng.bernoulli(partial_unmask_prob);
    return build_loss_mask(labels, regime, partial);
}

struct Example {
    std::vector<TokenId> ids;
    std::vector<SpanLabel> labels;
};

inline Example make_example(std::vector<TokenId> ids) {
    Example e;
    e.labels = span_classify(ids);
    e.ids = std::move(ids);
    return e;
}

/// Training sequences for a pretraining regime, taking documents in order
/// while the running token count stays within the budget (0 = no limit).
inline std::vector<Example> pretraining_examples(const std::vector<DocumentSample>& docs, const Vocab& vocab,
                                                 Regime regime, std::size_t token_budget = 0) {
    if (!is_pretraining(regime)) throw std::invalid_argument("pretraining_examples: not a pretraining regime");
    std::vector<Example> out;
    std::size_t used = 0;
    for (const auto& d : docs) {
        const auto doc = AnnotatedDocument::from(d);
        auto ids = regime == Regime::PretrainAnnotated ? interleave(doc, vocab) : plain_sequence(doc, vocab);
        if (token_budget && used + ids.size() > token_budget) break;
        used += ids.size();
        out.push_back(make_example(std::move(ids)));
    }
    if (token_budget && used == 0) throw std::invalid_argument("pretraining_examples: budget below one document");
    return out;
}

/// SFT sequences: anchored layout for the annotation regimes, standard otherwise.
inline std::vector<Example> sft_examples(const std::vector<DocumentSample>& data, const Vocab& vocab, Regime regime) {
    if (is_pretraining(regime)) throw std::invalid_argument("sft_examples: not an SFT regime");
    std::vector<Example> out;
    out.reserve(data.size());
    for (const auto& d : data) {
        if (!d.prompt) throw std::invalid_argument("sft_examples: record " + d.doc_id + " has no prompt");
        auto seq = build_sft_sequence(*d.prompt, tags_for(d.latent), join_chunks(d.chunks), vocab, uses_annotations(regime));
        out.push_back({std::move(seq.ids), std::move(seq.labels)});
    }
    return out;
}

struct TrainConfig {
    Regime regime = Regime::PretrainStandard;
    std::vector<double> lr_candidates{1e-3};
    std::size_t batch_size = 16;
    std::size_t epochs = 1;
    std::size_t token_budget = 0;  // pretraining; 0 = whole corpus
    double warmup_ratio = 0.1;
    AdamWConfig adamw{};
    double partial_unmask_prob = 0.003;
    double validation_fraction = 0.02;
    std::uint64_t seed = 0;

    void validate() const {
        if (lr_candidates.empty()) throw std::invalid_argument("train: lr_candidates must be non-empty");
        for (double lr : lr_candidates) {
            if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train: learning rates must be positive");
        }
        if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
        if (epochs == 0) throw std::invalid_argument("train: epochs must be positive");
        if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) throw std::invalid_argument("train: warmup_ratio outside [0,1)");
        if (partial_unmask_prob < 0.0 || partial_unmask_prob > 1.0) {
            throw std::invalid_argument("train: partial_unmask_prob outside [0,1]");
        }
        if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
            throw std::invalid_argument("train: validation_fraction outside [0,1)");
        }
    }
};

struct LogRecord {
    std::size_t step = 0;
    std::size_t tokens = 0;
    double loss = 0.0;
    double lr = 0.0;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
    std::string regime;
    std::string lineage;  // pretraining regime that produced the weights
    std::size_t step = 0;
    std::size_t tokens = 0;
    std::string config_hash;
    std::map<std::string, double> metrics;
};

struct TrainOutcome {
    std::vector<LogRecord> log;
    std::size_t steps = 0;
    std::size_t tokens = 0;       // tokens in the sequences processed
    std::size_t target_tokens = 0;  // unmasked loss targets
    std::size_t partial_unmasks = 0;
};

/// Called after every backward pass with the batch index and the example.
template <class T>
using StepHook = std::function<void(std::size_t step, const Example&, const LossMask&, const Transformer<T>&)>;

/// One pass over `data` per epoch with shuffled order, AdamW and the
/// warmup-cosine schedule. The batch loss is the sum of token losses over
/// the batch divided by its number of unmasked targets.
template <class T>
TrainOutcome train_epochs(Transformer<T>& model, const std::vector<Example>& data, const TrainConfig& cfg, double lr,
                          std::ostream* log_stream = nullptr, const StepHook<T>& hook = {}) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = per_epoch * cfg.epochs;
    const LrSchedule schedule = LrSchedule::with_ratio(lr, cfg.warmup_ratio, total);
    AdamWConfig opt = cfg.adamw;
    auto state = make_optimizer_state<T>(model.parameters(), opt, model.decay_mask());
    Rng order_rng(derive_seed(cfg.seed, 1));
    Rng mask_rng(derive_seed(cfg.seed, 2));
    std::vector<std::size_t> order(data.size());
    TrainOutcome out;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
            const std::size_t begin = b * cfg.batch_size, end = std::min(order.size(), begin + cfg.batch_size);
            std::vector<LossMask> masks;
            double counted = 0.0;
            for (std::size_t i = begin; i < end; ++i) {
                const Example& ex = data[order[i]];
                masks.push_back(build_loss_mask(ex.labels, cfg.regime, mask_rng, cfg.partial_unmask_prob));
                out.partial_unmasks += masks.back().partial_unmask;
                for (std::size_t t = 1; t < ex.ids.size(); ++t) counted += masks.back().weights[t];
            }
            model.zero_grad();
            double batch_loss = 0.0;
            if (counted > 0.0) {
                for (std::size_t i = begin; i < end; ++i) {
                    const Example& ex = data[order[i]];
                    auto ce = model.sequence_loss(ex.ids, masks[i - begin].weights, counted);
                    if (ce.empty()) continue;
                    const double v = static_cast<double>(ce.loss.item());
                    if (!std::isfinite(v)) {
                        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (example " +
                                            std::to_string(order[i]) + ")");
                    }
                    batch_loss += v;
                    ce.loss.backward();
                    if (hook) hook(step, ex, masks[i - begin], model);
                }
            }
            for (std::size_t i = begin; i < end; ++i) out.tokens += data[order[i]].ids.size();
            out.target_tokens += static_cast<std::size_t>(counted);
            const double cur = lr_at(schedule, step);
            const StepReport rep = adamw_step<T>(model.parameters(), state, cur);
            if (!rep.applied) throw TrainingError("optimizer step " + std::to_string(step) + " aborted: " + rep.error);
            LogRecord rec{step, out.tokens, batch_loss, cur};
            out.log.push_back(rec);
            if (log_stream) {
                *log_stream << nlohmann::json{{"step", rec.step}, {"tokens", rec.tokens}, {"loss", rec.loss}, {"lr", rec.lr}}
                                   .dump()
                            << '\n';
            }
        }
    }
    out.steps = step;
    return out;
}

/// Mean log-likelihood (nats) per response-span target token.
template <class T>
double validation_likelihood(const Transformer<T>& model, const std::vector<Example>& data) {
    NoGradGuard guard;
    double total = 0.0;
    std::size_t count = 0;
    for (const Example& ex : data) {
        if (ex.ids.size() < 2) continue;
        const auto logits = model.forward_logits(std::span<const TokenId>(ex.ids).first(ex.ids.size() - 1));
        const std::size_t V = logits.dim(1);
        const auto lv = logits.values();
        for (std::size_t t = 1; t < ex.ids.size(); ++t) {
            if (ex.labels[t] != SpanLabel::Response) continue;
            const T* row = lv.data() + (t - 1) * V;
            const double mx = static_cast<double>(*std::max_element(row, row + V));
            double z = 0.0;
            for (std::size_t c = 0; c < V; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
            total += static_cast<double>(row[ex.ids[t]]) - mx - std::log(z);
            ++count;
        }
    }
    if (count == 0) throw std::invalid_argument("validation_likelihood: no response tokens");
    return total / static_cast<double>(count);
}

/// Deterministic split: returns (train indices, validation indices).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(std::size_t n, double fraction,
                                                                                      std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, 0x5E1EC7));
    rng.shuffle(std::span<std::size_t>(idx));
    std::size_t n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
    if (fraction > 0.0 && n >= 2) n_val = std::max<std::size_t>(n_val, 1);
    std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    return {train, val};
}

struct LrTrial {
    double lr = 0.0;
    double validation_ll = 0.0;  // mean nats per response token
    double perplexity = 0.0;
};

template <class T>
struct PosttrainResult {
    Transformer<T> model;
    double chosen_lr = 0.0;
    std::vector<LrTrial> trials;
    TrainOutcome outcome;
};

/// Index of the lowest perplexity; ties go to the smaller learning rate.
inline std::size_t select_lr(const std::vector<LrTrial>& trials) {
    if (trials.empty()) throw std::invalid_argument("select_lr: no trials");
    std::size_t best = 0;
    for (std::size_t i = 1; i < trials.size(); ++i) {
        const auto& a = trials[i];
        const auto& b = trials[best];
        if (a.perplexity < b.perplexity || (a.perplexity == b.perplexity && a.lr < b.lr)) best = i;
    }
    return best;
}

/// One run per learning-rate candidate from the same initial weights; the
/// run with the lowest validation perplexity is kept.
template <class T>
PosttrainResult<T> posttrain(const Transformer<T>& init, const std::vector<Example>& train,
                             const std::vector<Example>& validation, const TrainConfig& cfg,
                             std::ostream* log_stream = nullptr) {
    cfg.validate();
    if (is_pretraining(cfg.regime)) throw std::invalid_argument("posttrain: regime must be an SFT regime");
    if (train.empty()) throw std::invalid_argument("posttrain: empty dataset");
    std::vector<LrTrial> trials;
    std::optional<Transformer<T>> best_model;
    TrainOutcome best_outcome;
    std::size_t best = 0;
    for (double lr : cfg.lr_candidates) {
        Transformer<T> m = init.clone();
        TrainOutcome outcome = train_epochs(m, train, cfg, lr, log_stream);
        LrTrial trial{lr, 0.0, 0.0};
        if (!validation.empty()) {
            trial.validation_ll = validation_likelihood(m, validation);
            trial.perplexity = std::exp(-trial.validation_ll);
        }
        trials.push_back(trial);
        const std::size_t idx = select_lr(trials);
        if (idx == trials.size() - 1 || !best_model) {
            best = idx;
            best_model.emplace(std::move(m));
            best_outcome = std::move(outcome);
        }
    }
    return {std::move(*best_model), trials[best].lr, trials, std::move(best_outcome)};
}

// ---------------------------------------------------------------------------
// Checkpoints.
//
//   "ANCHORCK" | u32 version | str config_hash | str vocab_hash | str meta_json
//   | u32 n_params | n x (str name | u32 rank | rank x u64 dim | f32 values)
//
// Strings are u64 length + bytes. All integers and floats little-endian.

inline constexpr char kCheckpointMagic[8] = {'A', 'N', 'C', 'H', 'O', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"context", c.context}, {"layers", c.layers},       {"dim", c.dim},
            {"heads", c.heads},           {"ff_mult", c.ff_mult}, {"init_scale", c.init_scale}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.context = j.at("context").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ff_mult = j.at("ff_mult").get<std::size_t>();
    c.init_scale = j.at("init_scale").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

inline std::string vocab_hash(const Vocab& v) {
    std::string all;
    for (const auto& w : v.words()) {
        all += w;
        all += '\0';
    }
    return sha256_hex(all);
}

namespace detail {
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class I>
void put(std::ostream& out, I v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(I));
}
inline void put_str(std::ostream& out, const std::string& s) {
    put<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
template <class I>
I get(std::istream& in) {
    I v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(I));
    if (!in) throw CheckpointError("checkpoint truncated");
    return v;
}
inline std::string get_str(std::istream& in) {
    const auto n = get<std::uint64_t>(in);
    if (n > (1ull << 32)) throw CheckpointError("checkpoint string length corrupt");
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw CheckpointError("checkpoint truncated");
    return s;
}
}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Transformer<T>& model, const Vocab& vocab,
                     const CheckpointMeta& meta) {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw CheckpointError("cannot write " + tmp);
        out.write(kCheckpointMagic, sizeof kCheckpointMagic);
        detail::put<std::uint32_t>(out, kCheckpointVersion);
        detail::put_str(out, meta.config_hash);
        detail::put_str(out, vocab_hash(vocab));
        nlohmann::ordered_json mj;
        mj["model"] = to_json(model.config());
        mj["regime"] = meta.regime;
        mj["lineage"] = meta.lineage;
        mj["step"] = meta.step;
        mj["tokens"] = meta.tokens;
        mj["metrics"] = meta.metrics;
        detail::put_str(out, mj.dump());
        const auto params = model.parameters();
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
        for (std::size_t i = 0; i < params.size(); ++i) {
            detail::put_str(out, model.parameter_names()[i]);
            detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params[i].rank()));
            for (std::size_t d : params[i].shape()) detail::put<std::uint64_t>(out, d);
            for (T v : params[i].values()) detail::put<float>(out, static_cast<float>(v));
        }
        if (!out) throw CheckpointError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

template <class T>
struct LoadedCheckpoint {
    Transformer<T> model;
    CheckpointMeta meta;
};

/// Verifies the container and, when given, that the vocabulary matches.
template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path, const Vocab* vocab = nullptr,
                                    const std::string* expected_config_hash = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
        throw CheckpointError(path.string() + " is not a checkpoint");
    }
    const auto version = detail::get<std::uint32_t>(in);
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported");
    }
    CheckpointMeta meta;
    meta.config_hash = detail::get_str(in);
    const std::string vhash = detail::get_str(in);
    if (expected_config_hash && *expected_config_hash != meta.config_hash) {
        throw CheckpointError("checkpoint config hash " + meta.config_hash + " does not match " + *expected_config_hash);
    }
    const auto mj = nlohmann::json::parse(detail::get_str(in));
    const ModelConfig mc = model_config_from_json(mj.at("model"));
    if (vocab) {
        if (mc.vocab_size != vocab->size()) {
            throw CheckpointError("checkpoint vocab size " + std::to_string(mc.vocab_size) + " != vocab size " +
                                  std::to_string(vocab->size()));
        }
        if (vhash != vocab_hash(*vocab)) throw CheckpointError("checkpoint was trained with a different vocabulary");
    }
    meta.regime = mj.at("regime").get<std::string>();
    meta.lineage = mj.at("lineage").get<std::string>();
    meta.step = mj.at("step").get<std::size_t>();
    meta.tokens = mj.at("tokens").get<std::size_t>();
    meta.metrics = mj.at("metrics").get<std::map<std::string, double>>();
    Transformer<T> model(mc);
    const auto n = detail::get<std::uint32_t>(in);
    auto params = model.parameters();
    if (n != params.size()) throw CheckpointError("checkpoint holds " + std::to_string(n) + " parameters, model has " +
                                                  std::to_string(params.size()));
    for (std::size_t i = 0; i < n; ++i) {
        const std::string name = detail::get_str(in);
        if (name != model.parameter_names()[i]) throw CheckpointError("checkpoint parameter " + name + " out of order");
        const auto rank = detail::get<std::uint32_t>(in);
        Shape shape;
        for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::get<std::uint64_t>(in));
        if (shape != params[i].shape()) throw CheckpointError("checkpoint parameter " + name + " has wrong shape");
        for (T& v : params[i].mutable_values()) v = static_cast<T>(detail::get<float>(in));
    }
    return {std::move(model), std::move(meta)};
}

}  // namespace anchor
