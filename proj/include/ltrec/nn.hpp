#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ltrec/autodiff.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/optim.hpp"
#include "ltrec/rng.hpp"
#include "ltrec/tensor.hpp"

namespace ltrec {

enum class Activation { kNone, kTanh, kSigmoid };

// Small fully-connected stack. Hidden layers use a smooth activation (kinked
// activations would foil finite-difference verification); the final affine is
// returned raw so callers can pick sigmoid, BCE-from-logit, etc.
//
// `zero_final` zero-initializes the last layer: gates then start at exactly
// 0.5 and the ranker at exactly logit 0.
class Mlp {
public:
    Mlp() = default;

    Mlp(const std::string& name, const std::vector<int>& dims, Rng& rng,
        bool zero_final = false) {
        if (dims.size() < 2)
            throw ConfigError("Mlp " + name + ": need at least input and output dims");
        for (size_t l = 0; l + 1 < dims.size(); ++l) {
            int in = dims[l], out = dims[l + 1];
            if (in <= 0 || out <= 0)
                throw ConfigError("Mlp " + name + ": non-positive layer dim");
            bool last = (l + 2 == dims.size());
            Tensor W = Tensor::zeros(out, in);
            Tensor b = Tensor::zeros(out, 1);
            if (!(last && zero_final)) {
                double std = std::sqrt(1.0 / in);
                for (auto& w : W.v) w = rng.gaussian(0.0, std);
            }
            weights_.emplace_back(name + ".W" + std::to_string(l), std::move(W));
            biases_.emplace_back(name + ".b" + std::to_string(l), std::move(b));
        }
    }

    // Raw output of the final affine layer (no activation applied to it).
    Value forward(ParamContext& ctx, Value x, Activation hidden = Activation::kTanh) const {
        Value h = x;
        for (size_t l = 0; l < weights_.size(); ++l) {
            Value W = ctx.use(const_cast<ParamBlock&>(weights_[l]));
            Value b = ctx.use(const_cast<ParamBlock&>(biases_[l]));
            h = dense_affine(h, W, b);
            if (l + 1 < weights_.size()) h = apply_activation(h, hidden);
        }
        return h;
    }

    // Graph-free forward for evaluation-time scoring.
    Tensor forward_plain(const Tensor& x, Activation hidden = Activation::kTanh) const {
        Tensor h = x;
        for (size_t l = 0; l < weights_.size(); ++l) {
            const Tensor& W = weights_[l].value;
            const Tensor& b = biases_[l].value;
            if (W.cols != h.rows)
                throw ShapeError("Mlp::forward_plain: layer expects " +
                                 std::to_string(W.cols) + " inputs, got " + h.shape_str());
            Tensor out(W.rows, 1);
            for (int i = 0; i < W.rows; ++i) {
                double s = b.v[i];
                const double* wrow = &W.v[static_cast<size_t>(i) * W.cols];
                for (int j = 0; j < W.cols; ++j) s += wrow[j] * h.v[j];
                out.v[i] = s;
            }
            if (l + 1 < weights_.size())
                for (auto& v : out.v)
                    v = (hidden == Activation::kTanh) ? std::tanh(v)
                        : (hidden == Activation::kSigmoid)
                            ? (v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                      : std::exp(v) / (1.0 + std::exp(v)))
                            : v;
            h = std::move(out);
        }
        return h;
    }

    std::vector<ParamBlock*> blocks() {
        std::vector<ParamBlock*> out;
        for (size_t l = 0; l < weights_.size(); ++l) {
            out.push_back(&weights_[l]);
            out.push_back(&biases_[l]);
        }
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& w : weights_) n += w.value.size();
        for (const auto& b : biases_) n += b.value.size();
        return n;
    }

    size_t num_layers() const { return weights_.size(); }
    ParamBlock& weight(size_t l) { return weights_[l]; }
    ParamBlock& bias(size_t l) { return biases_[l]; }
    const ParamBlock& weight(size_t l) const { return weights_[l]; }
    const ParamBlock& bias(size_t l) const { return biases_[l]; }

private:
    std::vector<ParamBlock> weights_;
    std::vector<ParamBlock> biases_;

    static Value apply_activation(Value v, Activation a) {
        switch (a) {
        case Activation::kTanh: return tanh_v(v);
        case Activation::kSigmoid: return sigmoid(v);
        case Activation::kNone: return v;
        }
        return v;
    }
};

}  // namespace ltrec
