#pragma once

// Decoder-only transformer: learned token and position embeddings,
// pre-norm blocks (RMS norm, causal multi-head attention, GELU MLP) and an
// untied output projection.

#include "anchor/rng.hpp"
#include "anchor/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace anchor {

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t context = 512;
    std::size_t layers = 4;
    std::size_t dim = 128;
    std::size_t heads = 4;
    std::size_t ff_mult = 4;
    double init_scale = 0.02;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_size == 0) throw std::invalid_argument("model: vocab_size must be positive");
        if (dim == 0 || heads == 0 || dim % heads != 0)
            throw std::invalid_argument("model: dim " + std::to_string(dim) + " not divisible by heads " +
                                        std::to_string(heads));
        if (layers == 0 || context == 0 || ff_mult == 0)
            throw std::invalid_argument("model: layers, context and ff_mult must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

class SequenceTooLong : public std::length_error {
public:
    using std::length_error::length_error;
};

template <std::floating_point T>
class Transformer {
public:
    struct Block {
        std::size_t attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down;
    };

    explicit Transformer(ModelConfig config) : config_(config) {
        config_.validate();
        Rng rng(config_.seed);
        const std::size_t d = config_.dim, f = config_.dim * config_.ff_mult;
        const double s = config_.init_scale;
        const double s_out = s / std::sqrt(2.0 * static_cast<double>(config_.layers));
        tok_emb_ = add_param("tok_emb", {config_.vocab_size, d}, s, rng, true);
        pos_emb_ = add_param("pos_emb", {config_.context, d}, s, rng, true);
        for (std::size_t l = 0; l < config_.layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            Block b{};
            b.attn_norm = add_ones(p + "attn_norm", d);
            b.wq = add_param(p + "wq", {d, d}, s, rng, true);
            b.wk = add_param(p + "wk", {d, d}, s, rng, true);
            b.wv = add_param(p + "wv", {d, d}, s, rng, true);
            b.wo = add_param(p + "wo", {d, d}, s_out, rng, true);
            b.mlp_norm = add_ones(p + "mlp_norm", d);
            b.w_up = add_param(p + "w_up", {d, f}, s, rng, true);
            b.w_down = add_param(p + "w_down", {f, d}, s_out, rng, true);
            blocks_.push_back(b);
        }
        final_norm_ = add_ones("final_norm", d);
        lm_head_ = add_param("lm_head", {d, config_.vocab_size}, s, rng, true);
    }

    const ModelConfig& config() const noexcept { return config_; }
    std::span<Tensor<T>> parameters() noexcept { return params_; }
    std::span<const Tensor<T>> parameters() const noexcept { return params_; }
    const std::vector<std::string>& parameter_names() const noexcept { return names_; }
    const std::vector<bool>& decay_mask() const noexcept { return decay_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    /// Deep copy; copying a Transformer object shares parameter storage.
    Transformer clone() const {
        Transformer copy(config_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const auto src = params_[i].values();
            std::copy(src.begin(), src.end(), copy.params_[i].mutable_values().begin());
        }
        return copy;
    }

    /// Logits [T x vocab]; row t depends only on ids[0..t].
    Tensor<T> forward_logits(std::span<const std::int32_t> ids) const {
        if (ids.empty()) {
            throw std::invalid_argument("forward_logits: empty sequence");
        }
        if (ids.size() > config_.context) {
            throw SequenceTooLong("forward_logits: " + std::to_string(ids.size()) +
                                  " tokens exceed context " + std::to_string(config_.context));
        }
        std::vector<std::int32_t> positions(ids.size());
        for (std::size_t t = 0; t < ids.size(); ++t) positions[t] = static_cast<std::int32_t>(t);
        Tensor<T> x = add(embedding(params_[tok_emb_], ids), embedding(params_[pos_emb_], positions));
        for (const Block& b : blocks_) {
            const Tensor<T> h = rms_norm(x, params_[b.attn_norm]);
            const Tensor<T> att = causal_attention(matmul(h, params_[b.wq]), matmul(h, params_[b.wk]),
                                                   matmul(h, params_[b.wv]), config_.heads);
            x = add(x, matmul(att, params_[b.wo]));
            const Tensor<T> h2 = rms_norm(x, params_[b.mlp_norm]);
            x = add(x, matmul(gelu(matmul(h2, params_[b.w_up])), params_[b.w_down]));
        }
        return matmul(rms_norm(x, params_[final_norm_]), params_[lm_head_]);
    }

    /// Next-token loss: target t+1 is counted when weights[t+1] is nonzero.
    CrossEntropy<T> sequence_loss(std::span<const std::int32_t> ids, std::span<const std::uint8_t> weights,
                                  double normalizer = 0.0) const {
        if (ids.size() < 2) {
            throw std::invalid_argument("sequence_loss: need at least two tokens");
        }
        if (weights.size() != ids.size()) {
            throw ShapeError("sequence_loss: mask length " + std::to_string(weights.size()) +
                             " != sequence length " + std::to_string(ids.size()));
        }
        const Tensor<T> logits = forward_logits(ids.first(ids.size() - 1));
        return masked_cross_entropy(logits, ids.subspan(1), weights.subspan(1), normalizer);
    }

    /// Incremental decoding with a key/value cache; no graph is recorded.
    class Decoder {
    public:
        explicit Decoder(const Transformer& model) : model_(&model) {
            const auto& c = model.config();
            keys_.assign(c.layers, std::vector<T>{});
            vals_.assign(c.layers, std::vector<T>{});
            for (std::size_t l = 0; l < c.layers; ++l) {
                keys_[l].reserve(c.context * c.dim);
                vals_[l].reserve(c.context * c.dim);
            }
        }

        std::size_t position() const noexcept { return pos_; }

        /// Feeds one token and returns the next-token logits.
        std::vector<T> step(std::int32_t token) {
            using namespace detail;
            using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
            const auto& c = model_->config();
            const auto& P = model_->params_;
            if (pos_ >= c.context) {
                throw SequenceTooLong("Decoder: context of " + std::to_string(c.context) + " exhausted");
            }
            if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) {
                throw std::out_of_range("Decoder: token id " + std::to_string(token));
            }
            const std::size_t d = c.dim, f = d * c.ff_mult, dh = d / c.heads;
            const T inv_sqrt = T(1) / std::sqrt(T(dh));
            RowVec x = ConstMatMap<T>(P[model_->tok_emb_].values().data(), c.vocab_size, d).row(token) +
                       ConstMatMap<T>(P[model_->pos_emb_].values().data(), c.context, d).row(pos_);
            RowVec h(d), q(d), kv(d), att(d), up(f);
            std::vector<T> scores(pos_ + 1);
            for (std::size_t l = 0; l < c.layers; ++l) {
                const Block& b = model_->blocks_[l];
                norm_into(x, P[b.attn_norm].values(), h);
                q.noalias() = h * ConstMatMap<T>(P[b.wq].values().data(), d, d);
                kv.noalias() = h * ConstMatMap<T>(P[b.wk].values().data(), d, d);
                keys_[l].insert(keys_[l].end(), kv.data(), kv.data() + d);
                kv.noalias() = h * ConstMatMap<T>(P[b.wv].values().data(), d, d);
                vals_[l].insert(vals_[l].end(), kv.data(), kv.data() + d);
                const std::size_t n = pos_ + 1;
                ConstMatMap<T> km(keys_[l].data(), n, d);
                ConstMatMap<T> vm(vals_[l].data(), n, d);
                for (std::size_t hd = 0; hd < c.heads; ++hd) {
                    T mx = -std::numeric_limits<T>::infinity();
                    for (std::size_t j = 0; j < n; ++j) {
                        scores[j] = q.segment(hd * dh, dh).dot(km.row(j).segment(hd * dh, dh)) * inv_sqrt;
                        mx = std::max(mx, scores[j]);
                    }
                    T total = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        scores[j] = std::exp(scores[j] - mx);
                        total += scores[j];
                    }
                    auto out = att.segment(hd * dh, dh);
                    out.setZero();
                    for (std::size_t j = 0; j < n; ++j) {
                        out += (scores[j] / total) * vm.row(j).segment(hd * dh, dh);
                    }
                }
                x.noalias() += att * ConstMatMap<T>(P[b.wo].values().data(), d, d);
                norm_into(x, P[b.mlp_norm].values(), h);
                up.noalias() = h * ConstMatMap<T>(P[b.w_up].values().data(), d, f);
                for (Eigen::Index i = 0; i < up.size(); ++i) {
                    const T z = up[i];
                    up[i] = T(0.5) * z * (T(1) + std::tanh(T(0.7978845608028654) * (z + T(0.044715) * z * z * z)));
                }
                x.noalias() += up * ConstMatMap<T>(P[b.w_down].values().data(), f, d);
            }
            norm_into(x, P[model_->final_norm_].values(), h);
            std::vector<T> logits(c.vocab_size);
            Eigen::Map<RowVec>(logits.data(), c.vocab_size).noalias() =
                h * ConstMatMap<T>(P[model_->lm_head_].values().data(), d, c.vocab_size);
            ++pos_;
            return logits;
        }

    private:
        template <class V>
        static void norm_into(const V& x, std::span<const T> gain, V& out) {
            T ms = 0;
            for (Eigen::Index i = 0; i < x.size(); ++i) ms += x[i] * x[i];
            const T inv = T(1) / std::sqrt(ms / T(x.size()) + T(1e-5));
            for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[static_cast<std::size_t>(i)];
        }

        const Transformer* model_;
        std::vector<std::vector<T>> keys_, vals_;
        std::size_t pos_ = 0;
    };

private:
    std::size_t add_param(const std::string& name, Shape shape, double stddev, Rng& rng, bool decay) {
        std::vector<T> values(element_count(shape));
        for (auto& v : values) v = static_cast<T>(rng.normal() * stddev);
        params_.push_back(Tensor<T>::from(std::move(shape), std::move(values), true));
        names_.push_back(name);
        decay_.push_back(decay);
        return params_.size() - 1;
    }

    std::size_t add_ones(const std::string& name, std::size_t width) {
        params_.push_back(Tensor<T>::from({width}, std::vector<T>(width, T{1}), true));
        names_.push_back(name);
        decay_.push_back(false);
        return params_.size() - 1;
    }

    ModelConfig config_;
    std::vector<Tensor<T>> params_;
    std::vector<std::string> names_;
    std::vector<bool> decay_;
    std::vector<Block> blocks_;
    std::size_t tok_emb_ = 0, pos_emb_ = 0, final_norm_ = 0, lm_head_ = 0;
};

}  // namespace anchor
