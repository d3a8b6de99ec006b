#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ltrec/errors.hpp"
#include "ltrec/tensor.hpp"

namespace ltrec {

// Reverse-mode tape over small dense tensors. One Graph per training batch:
// nodes are appended in topological order (parents always precede children)
// and the whole tape is discarded after the optimizer step.
//
// Gradient storage is lazy. A node that is unreachable from the loss, or
// reachable only through stop_gradient, never allocates a grad buffer, so
// its reported gradient is exactly zero.

enum class Op : uint8_t {
    kLeaf,
    kAdd,
    kSub,
    kMul,          // elementwise
    kDiv,          // elementwise
    kScale,        // k0 * x + k1, elementwise constants
    kDot,          // sum(a * b) -> scalar
    kAffine,       // W x + b
    kSigmoid,
    kTanh,
    kLog,
    kExp,
    kSoftmax,      // vector, max-subtracted
    kLogSumExp,    // vector -> scalar
    kSum,          // vector -> scalar
    kConcat,       // n-ary vector stack
    kPick,         // x[k0] -> scalar
    kStopGrad,
    kScalarMulVec, // parents: scalar s, vector v -> s * v
    kNorm,         // max(||x||_2, k0) -> scalar
    kNormalize,    // x / max(||x||_2, k0)
    kDotRows,      // parents: q, h_0..h_{L-1} -> vector of dots
    kWeightedSum,  // parents: w, h_0..h_{L-1} -> sum_j w_j h_j
    kSortDesc,     // descending value sort; permutation kept for backward
    kBceWithLogit, // parent: logit scalar; k0 = label
};

class Graph;

// Lightweight handle into a Graph. Copyable, only valid while the graph is
// alive.
class Value {
public:
    Value() = default;
    Value(Graph* g, int idx) : g_(g), idx_(idx) {}

    Graph* graph() const { return g_; }
    int index() const { return idx_; }
    bool valid() const { return g_ != nullptr; }

    const Tensor& data() const;
    // Accumulated gradient; all-zeros tensor if this node was never reached
    // by a backward pass.
    Tensor grad() const;
    bool requires_grad() const;

    double scalar() const {
        const Tensor& t = data();
        if (!t.is_scalar())
            throw DomainError("Value::scalar: node is " + t.shape_str() + ", not 1x1");
        return t.v[0];
    }

private:
    Graph* g_ = nullptr;
    int idx_ = -1;
};

class Graph {
public:
    struct Node {
        Op op = Op::kLeaf;
        bool requires_grad = false;
        double k0 = 0.0;
        double k1 = 0.0;
        Tensor data;
        Tensor grad;          // empty until touched by backward
        std::vector<int> parents;
        std::vector<int> aux; // permutation for kSortDesc
        bool has_grad = false;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    size_t size() const { return nodes_.size(); }
    void reserve(size_t n) { nodes_.reserve(n); }

    Value input(Tensor t) { return make_leaf(std::move(t), true); }
    Value constant(Tensor t) { return make_leaf(std::move(t), false); }
    Value constant(const std::vector<double>& xs) { return make_leaf(Tensor::vec(xs), false); }
    Value scalar_constant(double x) { return make_leaf(Tensor::scalar(x), false); }

    const Node& node(int idx) const { return nodes_[static_cast<size_t>(idx)]; }
    Node& node(int idx) { return nodes_[static_cast<size_t>(idx)]; }

    // Propagates d(loss)/d(node) to every requires-grad node reachable from
    // `loss`. Repeated calls without a fresh graph accumulate into existing
    // gradients.
    void backward(Value loss) {
        if (loss.graph() != this)
            throw DomainError("backward: loss belongs to a different graph");
        Node& ln = node(loss.index());
        if (!ln.data.is_scalar())
            throw DomainError("backward: loss must be scalar, got " + ln.data.shape_str());
        // Each call propagates its own unit seed; grads from earlier calls are
        // set aside first and folded back in afterwards, so repeated backward
        // passes accumulate d(loss)/d(node) per call instead of compounding.
        std::vector<std::pair<int, Tensor>> saved;
        for (int i = 0; i <= loss.index(); ++i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.has_grad) {
                saved.emplace_back(i, std::move(n.grad));
                n.grad = Tensor::zeros(n.data.rows, n.data.cols);
            }
        }
        ensure_grad(loss.index());
        ln.grad.v[0] += 1.0;
        for (int i = loss.index(); i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.has_grad || n.parents.empty()) continue;
            backprop_node(i);
        }
        for (auto& [idx, old] : saved) {
            Node& n = nodes_[static_cast<size_t>(idx)];
            for (int k = 0; k < old.size(); ++k) n.grad.v[k] += old.v[k];
        }
    }

    Tensor grad_of(int idx) const {
        const Node& n = nodes_[static_cast<size_t>(idx)];
        if (n.has_grad) return n.grad;
        return Tensor::zeros(n.data.rows, n.data.cols);
    }

private:
    friend class Value;
    std::vector<Node> nodes_;

    Value make_leaf(Tensor t, bool needs_grad) {
        Node n;
        n.op = Op::kLeaf;
        n.requires_grad = needs_grad;
        n.data = std::move(t);
        nodes_.push_back(std::move(n));
        return Value(this, static_cast<int>(nodes_.size()) - 1);
    }

    void ensure_grad(int idx) {
        Node& n = nodes_[static_cast<size_t>(idx)];
        if (!n.has_grad) {
            n.grad = Tensor::zeros(n.data.rows, n.data.cols);
            n.has_grad = true;
        }
    }

    // Adds into parent grad only when the parent participates in training;
    // everything else stays untouched (and therefore exactly zero).
    Tensor* parent_grad(int pidx) {
        Node& p = nodes_[static_cast<size_t>(pidx)];
        if (!p.requires_grad) return nullptr;
        ensure_grad(pidx);
        return &p.grad;
    }

    void backprop_node(int idx);

    friend Value make_op(Graph* g, Op op, std::vector<int> parents, Tensor data,
                         double k0, double k1, std::vector<int> aux);
};

inline const Tensor& Value::data() const { return g_->node(idx_).data; }
inline Tensor Value::grad() const { return g_->grad_of(idx_); }
inline bool Value::requires_grad() const { return g_->node(idx_).requires_grad; }

inline Value make_op(Graph* g, Op op, std::vector<int> parents, Tensor data,
                     double k0 = 0.0, double k1 = 0.0, std::vector<int> aux = {}) {
    Graph::Node n;
    n.op = op;
    n.k0 = k0;
    n.k1 = k1;
    n.data = std::move(data);
    n.parents = std::move(parents);
    n.aux = std::move(aux);
    bool req = false;
    if (op != Op::kStopGrad) {
        for (int p : n.parents)
            if (g->node(p).requires_grad) { req = true; break; }
    }
    n.requires_grad = req;
    g->nodes_.push_back(std::move(n));
    return Value(g, static_cast<int>(g->nodes_.size()) - 1);
}

namespace detail {

inline Graph* common_graph(Value a, Value b, const char* op) {
    if (a.graph() != b.graph())
        throw DomainError(std::string(op) + ": operands from different graphs");
    return a.graph();
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

// ---- elementwise and scalar ops -------------------------------------------

inline Value add(Value a, Value b) {
    Graph* g = detail::common_graph(a, b, "add");
    require_same_shape(a.data(), b.data(), "add");
    Tensor out = a.data();
    for (int i = 0; i < out.size(); ++i) out.v[i] += b.data().v[i];
    return make_op(g, Op::kAdd, {a.index(), b.index()}, std::move(out));
}

inline Value sub(Value a, Value b) {
    Graph* g = detail::common_graph(a, b, "sub");
    require_same_shape(a.data(), b.data(), "sub");
    Tensor out = a.data();
    for (int i = 0; i < out.size(); ++i) out.v[i] -= b.data().v[i];
    return make_op(g, Op::kSub, {a.index(), b.index()}, std::move(out));
}

inline Value mul(Value a, Value b) {
    Graph* g = detail::common_graph(a, b, "mul");
    require_same_shape(a.data(), b.data(), "mul");
    Tensor out = a.data();
    for (int i = 0; i < out.size(); ++i) out.v[i] *= b.data().v[i];
    return make_op(g, Op::kMul, {a.index(), b.index()}, std::move(out));
}

inline Value div(Value a, Value b) {
    Graph* g = detail::common_graph(a, b, "div");
    require_same_shape(a.data(), b.data(), "div");
    Tensor out = a.data();
    for (int i = 0; i < out.size(); ++i) out.v[i] /= b.data().v[i];
    return make_op(g, Op::kDiv, {a.index(), b.index()}, std::move(out));
}

// k0 * x + k1 with compile-time constants folded into the node.
inline Value scale(Value x, double k0, double k1 = 0.0) {
    Tensor out = x.data();
    for (auto& v : out.v) v = k0 * v + k1;
    return make_op(x.graph(), Op::kScale, {x.index()}, std::move(out), k0, k1);
}

inline Value sigmoid(Value x) {
    Tensor out = x.data();
    for (auto& v : out.v) v = detail::stable_sigmoid(v);
    return make_op(x.graph(), Op::kSigmoid, {x.index()}, std::move(out));
}

inline Value tanh_v(Value x) {
    Tensor out = x.data();
    for (auto& v : out.v) v = std::tanh(v);
    return make_op(x.graph(), Op::kTanh, {x.index()}, std::move(out));
}

inline Value log_v(Value x) {
    Tensor out = x.data();
    for (auto& v : out.v) v = std::log(v);
    return make_op(x.graph(), Op::kLog, {x.index()}, std::move(out));
}

inline Value exp_v(Value x) {
    Tensor out = x.data();
    for (auto& v : out.v) v = std::exp(v);
    return make_op(x.graph(), Op::kExp, {x.index()}, std::move(out));
}

// ---- reductions -----------------------------------------------------------

inline Value dot(Value a, Value b) {
    Graph* g = detail::common_graph(a, b, "dot");
    require_same_shape(a.data(), b.data(), "dot");
    double s = 0.0;
    for (int i = 0; i < a.data().size(); ++i) s += a.data().v[i] * b.data().v[i];
    return make_op(g, Op::kDot, {a.index(), b.index()}, Tensor::scalar(s));
}

inline Value sum(Value x) {
    double s = 0.0;
    for (double v : x.data().v) s += v;
    return make_op(x.graph(), Op::kSum, {x.index()}, Tensor::scalar(s));
}

inline Value mean(Value x) {
    int n = x.data().size();
    if (n == 0) throw DomainError("mean: empty input");
    return scale(sum(x), 1.0 / n);
}

// ---- structured ops -------------------------------------------------------

// W x + b with gradient flow to all three operands.
inline Value dense_affine(Value x, Value W, Value b) {
    Graph* g = detail::common_graph(x, W, "dense_affine");
    detail::common_graph(x, b, "dense_affine");
    const Tensor& xt = x.data();
    const Tensor& Wt = W.data();
    const Tensor& bt = b.data();
    if (!xt.is_vector() || Wt.cols != xt.rows || !bt.is_vector() || bt.rows != Wt.rows)
        throw ShapeError("dense_affine: W is " + Wt.shape_str() + " but x is " +
                         xt.shape_str() + " and b is " + bt.shape_str());
    Tensor out(Wt.rows, 1);
    for (int i = 0; i < Wt.rows; ++i) {
        double s = bt.v[i];
        const double* wrow = &Wt.v[static_cast<size_t>(i) * Wt.cols];
        for (int j = 0; j < Wt.cols; ++j) s += wrow[j] * xt.v[j];
        out.v[i] = s;
    }
    return make_op(g, Op::kAffine, {W.index(), x.index(), b.index()}, std::move(out));
}

inline Value softmax_vector(Value logits) {
    const Tensor& t = logits.data();
    if (t.size() == 0) throw DomainError("softmax_vector: empty input");
    if (!t.is_vector()) throw ShapeError("softmax_vector: expected vector, got " + t.shape_str());
    double m = *std::max_element(t.v.begin(), t.v.end());
    Tensor out(t.rows, 1);
    double denom = 0.0;
    for (int i = 0; i < t.rows; ++i) {
        out.v[i] = std::exp(t.v[i] - m);
        denom += out.v[i];
    }
    for (auto& v : out.v) v /= denom;
    return make_op(logits.graph(), Op::kSoftmax, {logits.index()}, std::move(out));
}

inline Value log_sum_exp(Value logits) {
    const Tensor& t = logits.data();
    if (t.size() == 0) throw DomainError("log_sum_exp: empty input");
    double m = *std::max_element(t.v.begin(), t.v.end());
    double s = 0.0;
    for (double v : t.v) s += std::exp(v - m);
    return make_op(logits.graph(), Op::kLogSumExp, {logits.index()},
                   Tensor::scalar(m + std::log(s)));
}

inline Value concat(std::span<const Value> parts) {
    if (parts.empty()) throw DomainError("concat: no inputs");
    Graph* g = parts[0].graph();
    int total = 0;
    std::vector<int> parents;
    parents.reserve(parts.size());
    for (const Value& p : parts) {
        detail::common_graph(parts[0], p, "concat");
        if (!p.data().is_vector())
            throw ShapeError("concat: expected vectors, got " + p.data().shape_str());
        total += p.data().rows;
        parents.push_back(p.index());
    }
    Tensor out(total, 1);
    int off = 0;
    for (const Value& p : parts) {
        const Tensor& t = p.data();
        std::copy(t.v.begin(), t.v.end(), out.v.begin() + off);
        off += t.rows;
    }
    return make_op(g, Op::kConcat, std::move(parents), std::move(out));
}

inline Value concat(std::initializer_list<Value> parts) {
    std::vector<Value> tmp(parts);
    return concat(std::span<const Value>(tmp));
}

inline Value pick(Value x, int i) {
    const Tensor& t = x.data();
    if (i < 0 || i >= t.size())
        throw DomainError("pick: index " + std::to_string(i) + " out of range for " +
                          t.shape_str());
    return make_op(x.graph(), Op::kPick, {x.index()}, Tensor::scalar(t.v[i]),
                   static_cast<double>(i));
}

// Forward identity whose backward contributes exactly zero to the input and
// all of its ancestors.
inline Value stop_gradient(Value x) {
    return make_op(x.graph(), Op::kStopGrad, {x.index()}, x.data());
}

inline Value scalar_mul_vec(Value s, Value v) {
    Graph* g = detail::common_graph(s, v, "scalar_mul_vec");
    if (!s.data().is_scalar())
        throw ShapeError("scalar_mul_vec: scalar operand is " + s.data().shape_str());
    Tensor out = v.data();
    double k = s.data().v[0];
    for (auto& x : out.v) x *= k;
    return make_op(g, Op::kScalarMulVec, {s.index(), v.index()}, std::move(out));
}

// max(||x||, eps) as a scalar node; the epsilon floor keeps downstream
// divisions finite for zero-initialized rows.
inline Value norm_l2(Value x, double eps = 0.0) {
    double n = std::sqrt(x.data().squared_norm());
    return make_op(x.graph(), Op::kNorm, {x.index()},
                   Tensor::scalar(std::max(n, eps)), eps);
}

inline Value normalize_l2(Value x, double eps = 1e-12) {
    double n = std::sqrt(x.data().squared_norm());
    double ng = std::max(n, eps);
    Tensor out = x.data();
    for (auto& v : out.v) v /= ng;
    return make_op(x.graph(), Op::kNormalize, {x.index()}, std::move(out), eps);
}

// Vector of q . h_j for a row collection; one node instead of L dot nodes.
inline Value dot_rows(Value q, std::span<const Value> rows) {
    if (rows.empty()) throw DomainError("dot_rows: empty row collection");
    Graph* g = q.graph();
    std::vector<int> parents;
    parents.reserve(rows.size() + 1);
    parents.push_back(q.index());
    Tensor out(static_cast<int>(rows.size()), 1);
    for (size_t j = 0; j < rows.size(); ++j) {
        detail::common_graph(q, rows[j], "dot_rows");
        require_same_shape(q.data(), rows[j].data(), "dot_rows");
        double s = 0.0;
        for (int i = 0; i < q.data().size(); ++i)
            s += q.data().v[i] * rows[j].data().v[i];
        out.v[static_cast<size_t>(j)] = s;
        parents.push_back(rows[j].index());
    }
    return make_op(g, Op::kDotRows, std::move(parents), std::move(out));
}

// sum_j w_j h_j where w is a vector node over the same row collection.
inline Value weighted_sum(Value w, std::span<const Value> rows) {
    if (rows.empty()) throw DomainError("weighted_sum: empty row collection");
    Graph* g = w.graph();
    if (w.data().rows != static_cast<int>(rows.size()) || !w.data().is_vector())
        throw ShapeError("weighted_sum: weight shape " + w.data().shape_str() +
                         " does not match " + std::to_string(rows.size()) + " rows");
    std::vector<int> parents;
    parents.reserve(rows.size() + 1);
    parents.push_back(w.index());
    Tensor out = Tensor::zeros(rows[0].data().rows, 1);
    for (size_t j = 0; j < rows.size(); ++j) {
        detail::common_graph(w, rows[j], "weighted_sum");
        require_same_shape(rows[0].data(), rows[j].data(), "weighted_sum");
        double wj = w.data().v[j];
        for (int i = 0; i < out.size(); ++i) out.v[i] += wj * rows[j].data().v[i];
        parents.push_back(rows[j].index());
    }
    return make_op(g, Op::kWeightedSum, std::move(parents), std::move(out));
}

// Descending sort by value. Used to give reductions over unordered sets a
// canonical summation order; backward scatters through the permutation.
inline Value sort_desc(Value x) {
    const Tensor& t = x.data();
    if (!t.is_vector()) throw ShapeError("sort_desc: expected vector, got " + t.shape_str());
    std::vector<int> perm(static_cast<size_t>(t.rows));
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(),
                     [&](int a, int b) { return t.v[a] > t.v[b]; });
    Tensor out(t.rows, 1);
    for (int i = 0; i < t.rows; ++i) out.v[i] = t.v[perm[i]];
    return make_op(x.graph(), Op::kSortDesc, {x.index()}, std::move(out), 0.0, 0.0,
                   std::move(perm));
}

// Binary cross-entropy straight from the logit; saturation-safe in both
// directions. k0 carries the label.
inline Value bce_with_logit(Value logit, double label) {
    if (!logit.data().is_scalar())
        throw ShapeError("bce_with_logit: logit is " + logit.data().shape_str());
    double z = logit.data().v[0];
    double loss = std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z)));
    return make_op(logit.graph(), Op::kBceWithLogit, {logit.index()},
                   Tensor::scalar(loss), label);
}

// a . b / (||a|| ||b||). Degenerate inputs are rejected up front rather than
// epsilon-patched: callers that need a guard use ortho_loss-style wrappers.
inline Value cosine_similarity(Value a, Value b) {
    detail::common_graph(a, b, "cosine_similarity");
    require_same_shape(a.data(), b.data(), "cosine_similarity");
    if (!(a.data().squared_norm() > 0.0) || !(b.data().squared_norm() > 0.0))
        throw DomainError("cosine_similarity: degenerate zero-norm vector");
    Value na = norm_l2(a);
    Value nb = norm_l2(b);
    return div(dot(a, b), mul(na, nb));
}

// ---- backward rules -------------------------------------------------------

inline void Graph::backprop_node(int idx) {
    // Copies of the output grad/data; parent_grad() may not reallocate nodes_
    // but keeping references across ensure_grad calls is still fragile.
    const Tensor g = nodes_[static_cast<size_t>(idx)].grad;
    const Tensor& out = nodes_[static_cast<size_t>(idx)].data;
    const Op op = nodes_[static_cast<size_t>(idx)].op;
    const double k0 = nodes_[static_cast<size_t>(idx)].k0;
    const std::vector<int> parents = nodes_[static_cast<size_t>(idx)].parents;

    switch (op) {
    case Op::kLeaf:
        break;
    case Op::kAdd: {
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < g.size(); ++i) pa->v[i] += g.v[i];
        if (Tensor* pb = parent_grad(parents[1]))
            for (int i = 0; i < g.size(); ++i) pb->v[i] += g.v[i];
        break;
    }
    case Op::kSub: {
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < g.size(); ++i) pa->v[i] += g.v[i];
        if (Tensor* pb = parent_grad(parents[1]))
            for (int i = 0; i < g.size(); ++i) pb->v[i] -= g.v[i];
        break;
    }
    case Op::kMul: {
        const Tensor& a = nodes_[static_cast<size_t>(parents[0])].data;
        const Tensor& b = nodes_[static_cast<size_t>(parents[1])].data;
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < g.size(); ++i) pa->v[i] += g.v[i] * b.v[i];
        if (Tensor* pb = parent_grad(parents[1]))
            for (int i = 0; i < g.size(); ++i) pb->v[i] += g.v[i] * a.v[i];
        break;
    }
    case Op::kDiv: {
        const Tensor& a = nodes_[static_cast<size_t>(parents[0])].data;
        const Tensor& b = nodes_[static_cast<size_t>(parents[1])].data;
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < g.size(); ++i) pa->v[i] += g.v[i] / b.v[i];
        if (Tensor* pb = parent_grad(parents[1]))
            for (int i = 0; i < g.size(); ++i)
                pb->v[i] -= g.v[i] * a.v[i] / (b.v[i] * b.v[i]);
        break;
    }
    case Op::kScale: {
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < g.size(); ++i) pa->v[i] += k0 * g.v[i];
        break;
    }
    case Op::kDot: {
        const Tensor& a = nodes_[static_cast<size_t>(parents[0])].data;
        const Tensor& b = nodes_[static_cast<size_t>(parents[1])].data;
        double gs = g.v[0];
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < a.size(); ++i) pa->v[i] += gs * b.v[i];
        if (Tensor* pb = parent_grad(parents[1]))
            for (int i = 0; i < b.size(); ++i) pb->v[i] += gs * a.v[i];
        break;
    }
    case Op::kAffine: {
        const Tensor& W = nodes_[static_cast<size_t>(parents[0])].data;
        const Tensor& x = nodes_[static_cast<size_t>(parents[1])].data;
        if (Tensor* pW = parent_grad(parents[0])) {
            for (int i = 0; i < W.rows; ++i) {
                double gi = g.v[i];
                double* wrow = &pW->v[static_cast<size_t>(i) * W.cols];
                for (int j = 0; j < W.cols; ++j) wrow[j] += gi * x.v[j];
            }
        }
        if (Tensor* px = parent_grad(parents[1])) {
            for (int i = 0; i < W.rows; ++i) {
                double gi = g.v[i];
                const double* wrow = &W.v[static_cast<size_t>(i) * W.cols];
                for (int j = 0; j < W.cols; ++j) px->v[j] += gi * wrow[j];
            }
        }
        if (Tensor* pb = parent_grad(parents[2]))
            for (int i = 0; i < g.size(); ++i) pb->v[i] += g.v[i];
        break;
    }
    case Op::kSigmoid: {
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < g.size(); ++i)
                pa->v[i] += g.v[i] * out.v[i] * (1.0 - out.v[i]);
        break;
    }
    case Op::kTanh: {
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < g.size(); ++i)
                pa->v[i] += g.v[i] * (1.0 - out.v[i] * out.v[i]);
        break;
    }
    case Op::kLog: {
        const Tensor& a = nodes_[static_cast<size_t>(parents[0])].data;
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < g.size(); ++i) pa->v[i] += g.v[i] / a.v[i];
        break;
    }
    case Op::kExp: {
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < g.size(); ++i) pa->v[i] += g.v[i] * out.v[i];
        break;
    }
    case Op::kSoftmax: {
        if (Tensor* pa = parent_grad(parents[0])) {
            double sg = 0.0;
            for (int i = 0; i < g.size(); ++i) sg += out.v[i] * g.v[i];
            for (int i = 0; i < g.size(); ++i)
                pa->v[i] += out.v[i] * (g.v[i] - sg);
        }
        break;
    }
    case Op::kLogSumExp: {
        const Tensor& a = nodes_[static_cast<size_t>(parents[0])].data;
        if (Tensor* pa = parent_grad(parents[0])) {
            double gs = g.v[0];
            double lse = out.v[0];
            for (int i = 0; i < a.size(); ++i)
                pa->v[i] += gs * std::exp(a.v[i] - lse);
        }
        break;
    }
    case Op::kSum: {
        if (Tensor* pa = parent_grad(parents[0])) {
            double gs = g.v[0];
            for (int i = 0; i < pa->size(); ++i) pa->v[i] += gs;
        }
        break;
    }
    case Op::kConcat: {
        int off = 0;
        for (int pidx : parents) {
            const Tensor& p = nodes_[static_cast<size_t>(pidx)].data;
            if (Tensor* pg = parent_grad(pidx))
                for (int i = 0; i < p.rows; ++i) pg->v[i] += g.v[off + i];
            off += p.rows;
        }
        break;
    }
    case Op::kPick: {
        if (Tensor* pa = parent_grad(parents[0]))
            pa->v[static_cast<int>(k0)] += g.v[0];
        break;
    }
    case Op::kStopGrad:
        break;
    case Op::kScalarMulVec: {
        const Tensor& s = nodes_[static_cast<size_t>(parents[0])].data;
        const Tensor& vv = nodes_[static_cast<size_t>(parents[1])].data;
        if (Tensor* ps = parent_grad(parents[0])) {
            double acc = 0.0;
            for (int i = 0; i < g.size(); ++i) acc += g.v[i] * vv.v[i];
            ps->v[0] += acc;
        }
        if (Tensor* pv = parent_grad(parents[1])) {
            double k = s.v[0];
            for (int i = 0; i < g.size(); ++i) pv->v[i] += k * g.v[i];
        }
        break;
    }
    case Op::kNorm: {
        const Tensor& a = nodes_[static_cast<size_t>(parents[0])].data;
        double n = std::sqrt(a.squared_norm());
        if (n >= k0 && n > 0.0) {
            if (Tensor* pa = parent_grad(parents[0])) {
                double gs = g.v[0] / n;
                for (int i = 0; i < a.size(); ++i) pa->v[i] += gs * a.v[i];
            }
        }
        // below the floor the output is the constant eps: zero gradient
        break;
    }
    case Op::kNormalize: {
        const Tensor& a = nodes_[static_cast<size_t>(parents[0])].data;
        double n = std::sqrt(a.squared_norm());
        if (Tensor* pa = parent_grad(parents[0])) {
            if (n >= k0 && n > 0.0) {
                double yg = 0.0;
                for (int i = 0; i < g.size(); ++i) yg += out.v[i] * g.v[i];
                for (int i = 0; i < g.size(); ++i)
                    pa->v[i] += (g.v[i] - out.v[i] * yg) / n;
            } else {
                // linear region: y = x / eps
                for (int i = 0; i < g.size(); ++i) pa->v[i] += g.v[i] / k0;
            }
        }
        break;
    }
    case Op::kDotRows: {
        const Tensor& q = nodes_[static_cast<size_t>(parents[0])].data;
        Tensor* pq = parent_grad(parents[0]);
        for (size_t j = 1; j < parents.size(); ++j) {
            const Tensor& h = nodes_[static_cast<size_t>(parents[j])].data;
            double gj = g.v[static_cast<int>(j) - 1];
            if (pq)
                for (int i = 0; i < q.size(); ++i) pq->v[i] += gj * h.v[i];
            if (Tensor* ph = parent_grad(parents[j]))
                for (int i = 0; i < q.size(); ++i) ph->v[i] += gj * q.v[i];
        }
        break;
    }
    case Op::kWeightedSum: {
        const Tensor& w = nodes_[static_cast<size_t>(parents[0])].data;
        Tensor* pw = parent_grad(parents[0]);
        for (size_t j = 1; j < parents.size(); ++j) {
            const Tensor& h = nodes_[static_cast<size_t>(parents[j])].data;
            if (pw) {
                double acc = 0.0;
                for (int i = 0; i < g.size(); ++i) acc += g.v[i] * h.v[i];
                pw->v[static_cast<int>(j) - 1] += acc;
            }
            if (Tensor* ph = parent_grad(parents[j])) {
                double wj = w.v[static_cast<int>(j) - 1];
                for (int i = 0; i < g.size(); ++i) ph->v[i] += wj * g.v[i];
            }
        }
        break;
    }
    case Op::kSortDesc: {
        const std::vector<int>& perm = nodes_[static_cast<size_t>(idx)].aux;
        if (Tensor* pa = parent_grad(parents[0]))
            for (int i = 0; i < g.size(); ++i) pa->v[perm[i]] += g.v[i];
        break;
    }
    case Op::kBceWithLogit: {
        const Tensor& z = nodes_[static_cast<size_t>(parents[0])].data;
        if (Tensor* pz = parent_grad(parents[0]))
            pz->v[0] += g.v[0] * (detail::stable_sigmoid(z.v[0]) - k0);
        break;
    }
    }
}

}  // namespace ltrec
