#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Every op that sees an input
// requiring a gradient records a backward closure on its output node; calling
// backward() on a result walks the recorded graph in reverse topological
// order and then releases the closures, so each graph is used exactly once.
// Leaves (parameters) keep their accumulated gradient until zero_grad().
//
// GEMM-shaped work is delegated to Eigen. Everything else is plain loops so
// the reduction order is fixed and results are reproducible bit for bit.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace anchor {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

inline thread_local bool grad_enabled = true;
inline std::atomic<std::uint64_t> next_node_id{1};

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::uint64_t id = next_node_id.fetch_add(1, std::memory_order_relaxed);
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.empty()) {
            grad.assign(value.size(), T{0});
        }
    }
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <std::floating_point T>
class Tensor {
public:
    using value_type = T;
    using NodeT = detail::Node<T>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> values(element_count(shape), T{0});
        return from(std::move(shape), std::move(values), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (element_count(shape) != values.size()) {
            throw ShapeError("Tensor: shape " + to_string(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        }
        auto node = std::make_shared<NodeT>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }
    std::uint64_t node_id() const { return node_->id; }

    std::span<const T> values() const { return node_->value; }
    std::span<T> mutable_values() { return node_->value; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool requires_grad() const { return node_->requires_grad; }

    T item() const {
        if (size() != 1) {
            throw ShapeError("Tensor::item on tensor of shape " + to_string(shape()));
        }
        return node_->value[0];
    }

    T at(std::size_t r, std::size_t c) const { return node_->value[r * dim(1) + c]; }

    void zero_grad() { node_->grad.clear(); }

    /// Reverse pass seeded with ones. Releases the recorded graph afterwards.
    void backward() {
        std::vector<NodeT*> order;
        std::unordered_set<NodeT*> seen;
        std::vector<std::pair<NodeT*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                NodeT* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second) {
                    stack.emplace_back(parent, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), T{1});
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            NodeT* node = *it;
            if (node->backward && !node->grad.empty()) {
                node->backward(*node);
            }
        }
        for (NodeT* node : order) {
            if (node->backward) {
                node->backward = nullptr;
                node->parents.clear();
            }
        }
    }

    NodeT* node() const { return node_.get(); }
    const std::shared_ptr<NodeT>& handle() const { return node_; }

    explicit Tensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<NodeT> node_;
};

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    bool needs = false;
    if (grad_enabled) {
        for (const auto& in : inputs) {
            needs = needs || in.requires_grad();
        }
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& in : inputs) {
            node->parents.push_back(in.handle());
        }
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

template <class T>
void require_matrix(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + to_string(t.shape()));
    }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
}

template <class T>
Node<T>* grad_target(Node<T>& out, std::size_t i) {
    Node<T>* p = out.parents[i].get();
    if (!p->requires_grad) {
        return nullptr;
    }
    p->ensure_grad();
    return p;
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions disagree " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
    }
    std::vector<T> out(m * n);
    using namespace detail;
    MatMap<T>(out.data(), m, n).noalias() =
        ConstMatMap<T>(a.values().data(), m, k) * ConstMatMap<T>(b.values().data(), k, n);
    return make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& o) {
        ConstMatMap<T> dout(o.grad.data(), m, n);
        Node<T>* pa = o.parents[0].get();
        Node<T>* pb = o.parents[1].get();
        if (auto* ga = grad_target(o, 0)) {
            MatMap<T>(ga->grad.data(), m, k).noalias() +=
                dout * ConstMatMap<T>(pb->value.data(), k, n).transpose();
        }
        if (auto* gb = grad_target(o, 1)) {
            MatMap<T>(gb->grad.data(), k, n).noalias() +=
                ConstMatMap<T>(pa->value.data(), m, k).transpose() * dout;
        }
    });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.size());
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& o) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (auto* g = detail::grad_target(o, p)) {
                for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    g->grad[i] += o.grad[i];
                }
            }
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.size());
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * bv[i];
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& o) {
        const auto& av = o.parents[0]->value;
        const auto& bv = o.parents[1]->value;
        if (auto* ga = detail::grad_target(o, 0)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                ga->grad[i] += o.grad[i] * bv[i];
            }
        }
        if (auto* gb = detail::grad_target(o, 1)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                gb->grad[i] += o.grad[i] * av[i];
            }
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.values().begin(), a.values().end());
    for (auto& v : out) {
        v *= factor;
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [factor](detail::Node<T>& o) {
        if (auto* g = detail::grad_target(o, 0)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g->grad[i] += o.grad[i] * factor;
            }
        }
    });
}

/// Sum of all elements, as a scalar.
template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    double total = 0.0;
    for (T v : a.values()) {
        total += v;
    }
    return detail::make_result<T>({}, {static_cast<T>(total)}, {a}, [](detail::Node<T>& o) {
        if (auto* g = detail::grad_target(o, 0)) {
            for (auto& v : g->grad) {
                v += o.grad[0];
            }
        }
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    const auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] > T{0} ? av[i] : T{0};
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& o) {
        const auto& av = o.parents[0]->value;
        if (auto* g = detail::grad_target(o, 0)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                if (av[i] > T{0}) {
                    g->grad[i] += o.grad[i];
                }
            }
        }
    });
}

/// GELU, tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = T(0.044715);
    std::vector<T> out(a.size());
    const auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = av[i];
        out[i] = T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& o) {
        const auto& av = o.parents[0]->value;
        if (auto* g = detail::grad_target(o, 0)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                const T x = av[i];
                const T u = c * (x + k * x * x * x);
                const T t = std::tanh(u);
                const T du = c * (T(1) + T(3) * k * x * x);
                const T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
                g->grad[i] += o.grad[i] * d;
            }
        }
    });
}

/// Row-wise softmax over the last axis of a matrix.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    detail::require_matrix(a, "softmax_rows");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    std::vector<T> out(a.size());
    const auto av = a.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = av.data() + r * cols;
        T* y = out.data() + r * cols;
        const T mx = *std::max_element(x, x + cols);
        T total = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            total += y[c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            y[c] /= total;
        }
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [rows, cols](detail::Node<T>& o) {
        if (auto* g = detail::grad_target(o, 0)) {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = o.value.data() + r * cols;
                const T* dy = o.grad.data() + r * cols;
                T dot = 0;
                for (std::size_t c = 0; c < cols; ++c) {
                    dot += dy[c] * y[c];
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    g->grad[r * cols + c] += y[c] * (dy[c] - dot);
                }
            }
        }
    });
}

/// RMS normalization of each row, scaled by a learned per-column gain.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-5)) {
    detail::require_matrix(x, "rms_norm");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (gain.size() != cols) {
        throw ShapeError("rms_norm: gain has " + std::to_string(gain.size()) + " entries, rows have " +
                         std::to_string(cols));
    }
    std::vector<T> out(x.size());
    std::vector<T> inv(rows);
    const auto xv = x.values();
    const auto gv = gain.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * cols;
        T ms = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            ms += xr[c] * xr[c];
        }
        inv[r] = T(1) / std::sqrt(ms / T(cols) + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = xr[c] * inv[r] * gv[c];
        }
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), {x, gain}, [rows, cols, inv = std::move(inv)](detail::Node<T>& o) {
            const auto& xv = o.parents[0]->value;
            const auto& gv = o.parents[1]->value;
            auto* gx = detail::grad_target(o, 0);
            auto* gg = detail::grad_target(o, 1);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = xv.data() + r * cols;
                const T* dy = o.grad.data() + r * cols;
                if (gg) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        gg->grad[c] += dy[c] * xr[c] * inv[r];
                    }
                }
                if (gx) {
                    T dot = 0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        dot += dy[c] * gv[c] * xr[c];
                    }
                    const T k = inv[r] * inv[r] * inv[r] / T(cols) * dot;
                    for (std::size_t c = 0; c < cols; ++c) {
                        gx->grad[r * cols + c] += inv[r] * dy[c] * gv[c] - k * xr[c];
                    }
                }
            }
        });
}

/// Layer normalization of each row with learned gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    detail::require_matrix(x, "layer_norm");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (gain.size() != cols || bias.size() != cols) {
        throw ShapeError("layer_norm: gain/bias size does not match row width");
    }
    std::vector<T> out(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> inv(rows);
    const auto xv = x.values();
    const auto gv = gain.values();
    const auto bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * cols;
        T mean = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            mean += xr[c];
        }
        mean /= T(cols);
        T var = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            var += (xr[c] - mean) * (xr[c] - mean);
        }
        inv[r] = T(1) / std::sqrt(var / T(cols) + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            xhat[r * cols + c] = (xr[c] - mean) * inv[r];
            out[r * cols + c] = xhat[r * cols + c] * gv[c] + bv[c];
        }
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), {x, gain, bias},
        [rows, cols, inv = std::move(inv), xhat = std::move(xhat)](detail::Node<T>& o) {
            const auto& gv = o.parents[1]->value;
            auto* gx = detail::grad_target(o, 0);
            auto* gg = detail::grad_target(o, 1);
            auto* gb = detail::grad_target(o, 2);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* dy = o.grad.data() + r * cols;
                const T* xh = xhat.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    if (gg) gg->grad[c] += dy[c] * xh[c];
                    if (gb) gb->grad[c] += dy[c];
                }
                if (gx) {
                    T sum_d = 0, sum_dx = 0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const T d = dy[c] * gv[c];
                        sum_d += d;
                        sum_dx += d * xh[c];
                    }
                    for (std::size_t c = 0; c < cols; ++c) {
                        const T d = dy[c] * gv[c];
                        gx->grad[r * cols + c] +=
                            inv[r] / T(cols) * (T(cols) * d - sum_d - xh[c] * sum_dx);
                    }
                }
            }
        });
}

/// Gathers rows of `table` for each id; the backward pass scatter-adds.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
    detail::require_matrix(table, "embedding");
    const std::size_t vocab = table.dim(0), width = table.dim(1);
    std::vector<T> out(ids.size() * width);
    const auto tv = table.values();
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
            throw std::out_of_range("embedding: id " + std::to_string(ids[t]) + " outside table of " +
                                    std::to_string(vocab) + " rows");
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[t]) * width, width, out.data() + t * width);
    }
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return detail::make_result<T>({ids.size(), width}, std::move(out), {table},
                                  [width, saved = std::move(saved)](detail::Node<T>& o) {
                                      if (auto* g = detail::grad_target(o, 0)) {
                                          for (std::size_t t = 0; t < saved.size(); ++t) {
                                              T* row = g->grad.data() + static_cast<std::size_t>(saved[t]) * width;
                                              const T* d = o.grad.data() + t * width;
                                              for (std::size_t c = 0; c < width; ++c) {
                                                  row[c] += d[c];
                                              }
                                          }
                                      }
                                  });
}

/// Multi-head causal self-attention core: softmax(QK^T/sqrt(dh) + causal) V,
/// heads laid out as contiguous column groups of width d/heads.
template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
    detail::require_matrix(q, "causal_attention");
    detail::require_same_shape(q, k, "causal_attention");
    detail::require_same_shape(q, v, "causal_attention");
    const std::size_t steps = q.dim(0), width = q.dim(1);
    if (heads == 0 || width % heads != 0) {
        throw ShapeError("causal_attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    using namespace detail;
    const std::size_t dh = width / heads;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    std::vector<T> out(steps * width);
    std::vector<RowMat<T>> probs(heads);
    ConstMatMap<T> qm(q.values().data(), steps, width);
    ConstMatMap<T> km(k.values().data(), steps, width);
    ConstMatMap<T> vm(v.values().data(), steps, width);
    MatMap<T> om(out.data(), steps, width);
    for (std::size_t h = 0; h < heads; ++h) {
        RowMat<T>& p = probs[h];
        p.noalias() = qm.middleCols(h * dh, dh) * km.middleCols(h * dh, dh).transpose();
        for (std::size_t i = 0; i < steps; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                p(i, j) *= inv_sqrt;
                mx = std::max(mx, p(i, j));
            }
            T total = 0;
            for (std::size_t j = 0; j <= i; ++j) {
                p(i, j) = std::exp(p(i, j) - mx);
                total += p(i, j);
            }
            for (std::size_t j = 0; j <= i; ++j) {
                p(i, j) /= total;
            }
            for (std::size_t j = i + 1; j < steps; ++j) {
                p(i, j) = T{0};
            }
        }
        om.middleCols(h * dh, dh).noalias() = p * vm.middleCols(h * dh, dh);
    }
    return make_result<T>(
        q.shape(), std::move(out), {q, k, v},
        [steps, width, heads, dh, inv_sqrt, probs = std::move(probs)](Node<T>& o) {
            ConstMatMap<T> dout(o.grad.data(), steps, width);
            ConstMatMap<T> qm(o.parents[0]->value.data(), steps, width);
            ConstMatMap<T> km(o.parents[1]->value.data(), steps, width);
            ConstMatMap<T> vm(o.parents[2]->value.data(), steps, width);
            auto* gq = grad_target(o, 0);
            auto* gk = grad_target(o, 1);
            auto* gv = grad_target(o, 2);
            RowMat<T> dp(steps, steps);
            for (std::size_t h = 0; h < heads; ++h) {
                const RowMat<T>& p = probs[h];
                const auto dOh = dout.middleCols(h * dh, dh);
                if (gv) {
                    MatMap<T>(gv->grad.data(), steps, width).middleCols(h * dh, dh).noalias() +=
                        p.transpose() * dOh;
                }
                if (!gq && !gk) {
                    continue;
                }
                dp.noalias() = dOh * vm.middleCols(h * dh, dh).transpose();
                for (std::size_t i = 0; i < steps; ++i) {
                    T dot = 0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        dot += p(i, j) * dp(i, j);
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        dp(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
                    }
                    for (std::size_t j = i + 1; j < steps; ++j) {
                        dp(i, j) = T{0};
                    }
                }
                if (gq) {
                    MatMap<T>(gq->grad.data(), steps, width).middleCols(h * dh, dh).noalias() +=
                        dp * km.middleCols(h * dh, dh);
                }
                if (gk) {
                    MatMap<T>(gk->grad.data(), steps, width).middleCols(h * dh, dh).noalias() +=
                        dp.transpose() * qm.middleCols(h * dh, dh);
                }
            }
        });
}

template <class T>
struct CrossEntropy {
    Tensor<T> loss;
    std::size_t counted = 0;

    /// True when every position was masked; the loss is then 0 with zero gradient.
    bool empty() const noexcept { return counted == 0; }
};

/// Negative log-likelihood of `targets` under row-wise softmax(logits),
/// summed over rows whose mask weight is nonzero and divided by `normalizer`
/// (default: the number of counted rows). Masked rows are never read in the
/// backward pass, so their logit gradient is exactly zero.
template <class T>
CrossEntropy<T> masked_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                     std::span<const std::uint8_t> mask, double normalizer = 0.0) {
    detail::require_matrix(logits, "masked_cross_entropy");
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (targets.size() != rows || mask.size() != rows) {
        throw ShapeError("masked_cross_entropy: " + std::to_string(rows) + " rows but " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                         " mask entries");
    }
    std::vector<std::size_t> kept;
    for (std::size_t r = 0; r < rows; ++r) {
        if (mask[r] != 0) {
            if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
                throw std::out_of_range("masked_cross_entropy: target " + std::to_string(targets[r]) +
                                        " outside [0," + std::to_string(cols) + ")");
            }
            kept.push_back(r);
        }
    }
    CrossEntropy<T> result;
    result.counted = kept.size();
    const double denom = normalizer > 0.0 ? normalizer : static_cast<double>(kept.size());
    const auto lv = logits.values();
    std::vector<T> probs(kept.size() * cols);
    double total = 0.0;
    for (std::size_t i = 0; i < kept.size(); ++i) {
        const std::size_t r = kept[i];
        const T* x = lv.data() + r * cols;
        T* p = probs.data() + i * cols;
        const T mx = *std::max_element(x, x + cols);
        T z = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            p[c] = std::exp(x[c] - mx);
            z += p[c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            p[c] /= z;
        }
        total += static_cast<double>(std::log(z) + mx - x[targets[r]]);
    }
    const T value = kept.empty() ? T{0} : static_cast<T>(total / denom);
    std::vector<std::int32_t> tgt;
    tgt.reserve(kept.size());
    for (std::size_t r : kept) {
        tgt.push_back(targets[r]);
    }
    result.loss = detail::make_result<T>(
        {}, {value}, {logits},
        [cols, denom, kept = std::move(kept), probs = std::move(probs), tgt = std::move(tgt)](detail::Node<T>& o) {
            auto* g = detail::grad_target(o, 0);
            if (!g || kept.empty()) {
                return;
            }
            const T up = static_cast<T>(o.grad[0] / denom);
            for (std::size_t i = 0; i < kept.size(); ++i) {
                T* d = g->grad.data() + kept[i] * cols;
                const T* p = probs.data() + i * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    d[c] += up * p[c];
                }
                d[tgt[i]] -= up;
            }
        });
    return result;
}

}  // namespace anchor
