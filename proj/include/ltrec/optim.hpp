#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ltrec/autodiff.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/rng.hpp"
#include "ltrec/tensor.hpp"

namespace ltrec {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Tensor m;
    Tensor v;
    int64_t step = 0;
};

// One Adam update with bias correction. If the gradient contains a non-finite
// entry the step is skipped entirely — parameters and moments stay untouched
// and the function reports false so callers can count skips.
inline bool adam_step(Tensor& param, const Tensor& grad, AdamState& st,
                      const AdamConfig& cfg) {
    require_same_shape(param, grad, "adam_step");
    if (!grad.all_finite()) return false;
    if (st.m.size() != param.size()) {
        st.m = Tensor::zeros(param.rows, param.cols);
        st.v = Tensor::zeros(param.rows, param.cols);
        st.step = 0;
    }
    st.step += 1;
    double b1t = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    double b2t = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (int i = 0; i < param.size(); ++i) {
        double gi = grad.v[i];
        st.m.v[i] = cfg.beta1 * st.m.v[i] + (1.0 - cfg.beta1) * gi;
        st.v.v[i] = cfg.beta2 * st.v.v[i] + (1.0 - cfg.beta2) * gi * gi;
        double mhat = st.m.v[i] / b1t;
        double vhat = st.v.v[i] / b2t;
        param.v[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    return true;
}

// Named dense parameter (MLP weight, bias, gate matrix, ...) with its own
// optimizer state.
struct ParamBlock {
    std::string name;
    Tensor value;
    AdamState state;

    ParamBlock() = default;
    ParamBlock(std::string n, Tensor t) : name(std::move(n)), value(std::move(t)) {}
};

// Per-graph leaf cache. Each ParamBlock becomes at most one trainable leaf in
// the graph, so its gradient accumulates across every use in the batch; after
// backward, apply() walks the blocks in first-use order and steps each once.
class ParamContext {
public:
    explicit ParamContext(Graph& g) : g_(&g) {}

    Value use(ParamBlock& block) {
        for (const auto& [blk, val] : used_)
            if (blk == &block) return val;
        Value v = g_->input(block.value);
        used_.emplace_back(&block, v);
        return v;
    }

    // Returns the number of blocks whose update was skipped for non-finite
    // gradients.
    int apply(const AdamConfig& cfg) {
        int skipped = 0;
        for (auto& [blk, val] : used_)
            if (!adam_step(blk->value, val.grad(), blk->state, cfg)) ++skipped;
        return skipped;
    }

    size_t used_count() const { return used_.size(); }

private:
    Graph* g_;
    std::vector<std::pair<ParamBlock*, Value>> used_;
};

// Row-addressable embedding matrix with per-row Adam moments, stored flat so
// checkpoints can stream it directly.
class EmbeddingTable {
public:
    EmbeddingTable() = default;

    EmbeddingTable(int rows, int dim, double init_std, Rng& rng)
        : rows_(rows), dim_(dim),
          data_(static_cast<size_t>(rows) * dim),
          m_(static_cast<size_t>(rows) * dim, 0.0),
          v_(static_cast<size_t>(rows) * dim, 0.0),
          steps_(static_cast<size_t>(rows), 0) {
        if (rows <= 0 || dim <= 0)
            throw DomainError("EmbeddingTable: rows and dim must be positive");
        for (auto& x : data_) x = rng.gaussian(0.0, init_std);
    }

    int rows() const { return rows_; }
    int dim() const { return dim_; }

    Tensor row(int i) const {
        check_row(i);
        Tensor t(dim_, 1);
        const double* src = &data_[static_cast<size_t>(i) * dim_];
        std::copy(src, src + dim_, t.v.begin());
        return t;
    }

    void set_row(int i, const Tensor& t) {
        check_row(i);
        if (t.size() != dim_)
            throw ShapeError("EmbeddingTable::set_row: got " + t.shape_str() +
                             " for dim " + std::to_string(dim_));
        std::copy(t.v.begin(), t.v.end(), data_.begin() + static_cast<size_t>(i) * dim_);
    }

    bool apply_row_grad(int i, const Tensor& grad, const AdamConfig& cfg) {
        check_row(i);
        if (grad.size() != dim_)
            throw ShapeError("EmbeddingTable::apply_row_grad: got " + grad.shape_str() +
                             " for dim " + std::to_string(dim_));
        if (!grad.all_finite()) return false;
        size_t base = static_cast<size_t>(i) * dim_;
        steps_[static_cast<size_t>(i)] += 1;
        double t = static_cast<double>(steps_[static_cast<size_t>(i)]);
        double b1t = 1.0 - std::pow(cfg.beta1, t);
        double b2t = 1.0 - std::pow(cfg.beta2, t);
        for (int d = 0; d < dim_; ++d) {
            double gi = grad.v[d];
            m_[base + d] = cfg.beta1 * m_[base + d] + (1.0 - cfg.beta1) * gi;
            v_[base + d] = cfg.beta2 * v_[base + d] + (1.0 - cfg.beta2) * gi * gi;
            double mhat = m_[base + d] / b1t;
            double vhat = v_[base + d] / b2t;
            data_[base + d] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        return true;
    }

    const std::vector<double>& values() const { return data_; }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& adam_m() const { return m_; }
    std::vector<double>& adam_m() { return m_; }
    const std::vector<double>& adam_v() const { return v_; }
    std::vector<double>& adam_v() { return v_; }
    const std::vector<int64_t>& adam_steps() const { return steps_; }
    std::vector<int64_t>& adam_steps() { return steps_; }

private:
    int rows_ = 0;
    int dim_ = 0;
    std::vector<double> data_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::vector<int64_t> steps_;

    void check_row(int i) const {
        if (i < 0 || i >= rows_)
            throw LookupError("EmbeddingTable: row " + std::to_string(i) +
                              " out of range [0," + std::to_string(rows_) + ")");
    }
};

}  // namespace ltrec
