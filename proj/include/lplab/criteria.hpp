#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lplab/errors.hpp"
#include "lplab/lora.hpp"
#include "lplab/rng.hpp"
#include "lplab/tensor.hpp"

namespace lplab {

enum class CriterionId { lora, magnitude, movement, random, taylor_exact };

inline std::string to_string(CriterionId c) {
    switch (c) {
        case CriterionId::lora: return "lora";
        case CriterionId::magnitude: return "magnitude";
        case CriterionId::movement: return "movement";
        case CriterionId::random: return "random";
        default: return "taylor_exact";
    }
}

inline CriterionId criterion_from(const std::string& s) {
    if (s == "lora") return CriterionId::lora;
    if (s == "magnitude") return CriterionId::magnitude;
    if (s == "movement") return CriterionId::movement;
    if (s == "random") return CriterionId::random;
    if (s == "taylor_exact") return CriterionId::taylor_exact;
    throw ConfigError("unknown criterion '" + s + "'");
}

// Whether the smoothing recursion feeds back the smoothed value (the usual
// moving average) or only the previous instantaneous score. Both stay
// selectable so the difference is measurable.
enum class EmaMode { recursive, literal };

inline std::string to_string(EmaMode m) {
    return m == EmaMode::recursive ? "recursive" : "literal";
}
inline EmaMode ema_mode_from(const std::string& s) {
    if (s == "recursive") return EmaMode::recursive;
    if (s == "literal") return EmaMode::literal;
    throw ConfigError("unknown ema mode '" + s + "'");
}

// Sequential scoring: "literal" multiplies the d x d product-gradient
// estimate elementwise with w0 and the composite (square modules only);
// "chain" pushes the estimate through the frozen right factor first and
// works for any d x k.
enum class SeqVariant { chain, literal };

inline std::string to_string(SeqVariant v) {
    return v == SeqVariant::chain ? "chain" : "literal";
}
inline SeqVariant seq_variant_from(const std::string& s) {
    if (s == "chain") return SeqVariant::chain;
    if (s == "literal") return SeqVariant::literal;
    throw ConfigError("unknown sequential variant '" + s + "'");
}

// Per-layer importance tracking for one pruning run.
struct ImportanceState {
    struct Layer {
        std::size_t layer_index = 0;
        Shape shape;                     // scored / mask shape
        std::vector<double> inst;        // instantaneous score
        std::vector<double> smooth;      // moving-average score used for ranking
        std::vector<double> prev_inst;   // literal-mode history
        std::vector<double> mvp_acc;     // movement accumulator
        bool seeded = false;             // smooth valid from the first update on
    };

    std::vector<Layer> layers;
    long step = -1;  // index of the last completed update
    double lambda = 0.9;

    Layer& by_index(std::size_t layer_index) {
        for (auto& l : layers)
            if (l.layer_index == layer_index) return l;
        throw UsageError("no importance slot for layer " + std::to_string(layer_index));
    }
};

inline ImportanceState make_importance_state(const std::vector<std::size_t>& layer_indices,
                                             const std::vector<Shape>& shapes, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) {
        throw ConfigError("lambda " + std::to_string(lambda) + " outside [0, 1]");
    }
    ImportanceState st;
    st.lambda = lambda;
    for (std::size_t i = 0; i < layer_indices.size(); ++i) {
        ImportanceState::Layer l;
        l.layer_index = layer_indices[i];
        l.shape = shapes[i];
        l.inst.assign(l.shape.count(), 0.0);
        l.smooth.assign(l.shape.count(), 0.0);
        l.prev_inst.assign(l.shape.count(), 0.0);
        l.mvp_acc.assign(l.shape.count(), 0.0);
        st.layers.push_back(std::move(l));
    }
    return st;
}

// Product-gradient reconstruction from the factor gradients:
//   G^_ij = (gB A)_ij + (B gA)_ij - (gB gA)_ij
// computed as three rank-r products; the dense d x k gradient of the
// product is never taken off the tape.
inline TensorPtr estimate_product_gradient(const Tensor& a, const Tensor& b,
                                           const Tensor& grad_a, const Tensor& grad_b) {
    if (!(grad_a.shape == a.shape) || !(grad_b.shape == b.shape) ||
        b.cols() != a.rows()) {
        throw DimensionError("estimate_product_gradient: A " + a.shape.str() + " gA " +
                             grad_a.shape.str() + " B " + b.shape.str() + " gB " +
                             grad_b.shape.str());
    }
    const std::size_t d = b.rows();
    const std::size_t r = b.cols();
    const std::size_t k = a.cols();
    auto out = tensor(d, k);
    detail::matmul_acc(grad_b.data, a.data, out->data, d, r, k);
    detail::matmul_acc(b.data, grad_a.data, out->data, d, r, k);
    auto cross = tensor(d, k);
    detail::matmul_acc(grad_b.data, grad_a.data, cross->data, d, r, k);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] -= cross->data[i];
    return out;
}

// Convenience form reading the gradients accumulated on the adapter.
inline TensorPtr estimate_product_gradient(const Adapter& ad) {
    if (!ad.a->has_grad() || !ad.b->has_grad()) {
        throw UsageError("estimate_product_gradient: adapter gradients not populated");
    }
    Tensor ga;
    ga.shape = ad.a->shape;
    ga.data = ad.a->grad;
    Tensor gb;
    gb.shape = ad.b->shape;
    gb.data = ad.b->grad;
    return estimate_product_gradient(*ad.a, *ad.b, ga, gb);
}

// Parallel importance: I^_ij = (G^_ij ((BA)_ij + w0_ij))^2. The dense BA
// is materialized for scoring only.
inline std::vector<double> importance_parallel(const LoraLinear& m, const Tensor& ghat) {
    const Adapter& ad = m.adapter();
    if (ad.mode != AdapterMode::parallel) {
        throw UsageError("importance_parallel on sequential layer '" + m.name + "'");
    }
    if (!(ghat.shape == m.weight->shape)) {
        throw DimensionError("importance_parallel: estimate " + ghat.shape.str() +
                             " for weight " + m.weight->shape.str());
    }
    const std::size_t d = m.in_dim(), k = m.out_dim();
    auto ba = tensor(d, k);
    detail::matmul_acc(ad.b->data, ad.a->data, ba->data,
                       d, static_cast<std::size_t>(ad.rank), k);
    std::vector<double> out(d * k);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = ghat.data[i] * (ba->data[i] + m.weight->data[i]);
        out[i] = v * v;
    }
    return out;
}

// Sequential importance over the composite W = (BA+I)W0.
inline std::vector<double> importance_sequential(const LoraLinear& m, const Tensor& ghat,
                                                 SeqVariant variant) {
    const Adapter& ad = m.adapter();
    if (ad.mode != AdapterMode::sequential) {
        throw UsageError("importance_sequential on parallel layer '" + m.name + "'");
    }
    const std::size_t d = m.in_dim(), k = m.out_dim();
    if (ghat.rows() != d || ghat.cols() != d) {
        throw DimensionError("importance_sequential: estimate " + ghat.shape.str() +
                             " for product shape " + Shape{d, d}.str());
    }
    auto w = m.composite();
    std::vector<double> out(d * k);
    if (variant == SeqVariant::literal) {
        if (d != k) {
            throw ConfigError("literal sequential scoring needs a square module, got " +
                              m.weight->shape.str());
        }
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double v = ghat.data[i] * m.weight->data[i] * w->data[i];
            out[i] = v * v;
        }
    } else {
        auto gw = tensor(d, k);
        detail::matmul_acc(ghat.data, m.weight->data, gw->data, d, d, k);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double v = gw->data[i] * w->data[i];
            out[i] = v * v;
        }
    }
    return out;
}

// First-order Taylor score from an exact weight gradient: (g_ij w_ij)^2.
inline std::vector<double> importance_taylor_exact(const Tensor& w, const Tensor& grad_w) {
    if (!(w.shape == grad_w.shape)) {
        throw DimensionError("importance_taylor_exact: " + w.shape.str() + " vs " +
                             grad_w.shape.str());
    }
    std::vector<double> out(w.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = grad_w.data[i] * w.data[i];
        out[i] = v * v;
    }
    return out;
}

inline std::vector<double> importance_magnitude(const Tensor& w) {
    std::vector<double> out(w.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(w.data[i]);
    return out;
}

// Movement accumulator: acc <- acc - g ⊙ w; weights drifting toward zero
// score low.
inline void importance_movement_update(std::vector<double>& acc, const Tensor& w,
                                       const Tensor& grad_w) {
    if (!(w.shape == grad_w.shape) || acc.size() != w.size()) {
        throw DimensionError("importance_movement_update: " + w.shape.str() + " vs " +
                             grad_w.shape.str());
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] -= grad_w.data[i] * w.data[i];
}

inline std::vector<double> importance_random(Shape shape, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x72616e64ULL));
    std::vector<double> out(shape.count());
    for (auto& v : out) v = rng.uniform();
    return out;
}

// Moving-average update; at the first step the history is the score itself.
inline void ema_update(ImportanceState::Layer& layer, const std::vector<double>& inst,
                       EmaMode mode, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) {
        throw ConfigError("lambda " + std::to_string(lambda) + " outside [0, 1]");
    }
    if (inst.size() != layer.shape.count()) {
        throw DimensionError("ema_update: " + std::to_string(inst.size()) +
                             " scores for shape " + layer.shape.str());
    }
    if (!layer.seeded) {
        layer.smooth = inst;
        layer.seeded = true;
    } else if (mode == EmaMode::recursive) {
        for (std::size_t i = 0; i < inst.size(); ++i)
            layer.smooth[i] = lambda * layer.smooth[i] + (1.0 - lambda) * inst[i];
    } else {
        for (std::size_t i = 0; i < inst.size(); ++i)
            layer.smooth[i] = lambda * layer.prev_inst[i] + (1.0 - lambda) * inst[i];
    }
    layer.prev_inst = inst;
    layer.inst = inst;
}

} // namespace lplab
