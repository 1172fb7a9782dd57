#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <vector>

#include "lplab/errors.hpp"
#include "lplab/model.hpp"
#include "lplab/rng.hpp"
#include "lplab/tensor.hpp"

namespace lplab {

constexpr double kFiniteDiffStep = 1e-5;

// Central differences (f(x+h e) - f(x-h e)) / 2h per coordinate. The
// tensor is perturbed in place and restored; f is re-evaluated from it.
inline std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor& theta,
                                            double h = kFiniteDiffStep) {
    if (h <= 0.0) throw UsageError("finite_diff_grad: h must be positive");
    std::vector<double> out(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double saved = theta.data[i];
        theta.data[i] = saved + h;
        const double fp = f();
        theta.data[i] = saved - h;
        const double fm = f();
        theta.data[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("finite_diff_grad: non-finite objective");
        }
        out[i] = (fp - fm) / (2.0 * h);
    }
    return out;
}

// dL/dW of the full composite weight of each adapter-carrying layer,
// obtained by swapping a gradient-carrying leaf into the forward pass.
// For parallel adapters this equals dL/d(BA); model weights stay put.
struct ExactGrads {
    std::vector<std::size_t> layer_indices;
    std::vector<TensorPtr> grads;       // one d x k gradient per layer
    std::vector<TensorPtr> composites;  // the leaf values used (pre-mask)
    double loss = 0.0;

    const TensorPtr& grad_for(std::size_t layer_index) const {
        for (std::size_t i = 0; i < layer_indices.size(); ++i)
            if (layer_indices[i] == layer_index) return grads[i];
        throw UsageError("no exact gradient for layer " + std::to_string(layer_index));
    }
};

inline ExactGrads exact_composite_grad(const Model& model, const TensorPtr& x,
                                       const std::vector<int>& labels) {
    ExactGrads res;
    OverrideMap ov;
    for (auto idx : model.lora_layers()) {
        auto leaf = model.layers()[idx].composite();
        leaf->requires_grad = true;
        ov.emplace(idx, WeightOverride{leaf, /*masked=*/true});
        res.layer_indices.push_back(idx);
        res.composites.push_back(leaf);
    }
    Tape tape;
    auto loss = model.loss(tape, x, labels, &ov);
    res.loss = loss->scalar();
    tape.backward(loss);
    for (const auto& leaf : res.composites) {
        leaf->ensure_grad();  // zero gradient if the layer never fed the loss
        auto g = tensor(leaf->rows(), leaf->cols());
        g->data = leaf->grad;
        res.grads.push_back(g);
    }
    return res;
}

// Exact leave-one-out importance: I_ij = (L(W) - L(W | w_ij = 0))^2,
// measured by zeroing merged composite entries one at a time and
// re-running the forward pass.
struct LooScores {
    std::vector<std::size_t> coords;  // row-major positions that were scored
    std::vector<double> scores;       // matching (delta loss)^2 values
};

constexpr std::size_t kLooDefaultBudget = 512;

inline LooScores leave_one_out_importance(const Model& model, const TensorPtr& x,
                                          const std::vector<int>& labels,
                                          std::size_t layer_index,
                                          std::size_t budget = kLooDefaultBudget,
                                          std::uint64_t seed = 0) {
    if (layer_index >= model.layers().size()) {
        throw UsageError("leave_one_out_importance: layer " + std::to_string(layer_index));
    }
    Model merged = model.merged_copy();
    TensorPtr target = merged.layers()[layer_index].weight;

    auto loss_of = [&]() {
        Tape tape;
        return merged.loss(tape, x, labels)->scalar();
    };
    const double base_loss = loss_of();

    LooScores res;
    const std::size_t total = target->size();
    res.coords.resize(total);
    std::iota(res.coords.begin(), res.coords.end(), 0);
    if (budget < total) {
        Rng rng(derive_seed(seed, 0x6c6f6fULL));
        rng.shuffle(res.coords);
        res.coords.resize(budget);
        std::sort(res.coords.begin(), res.coords.end());
    }
    res.scores.resize(res.coords.size());
    for (std::size_t i = 0; i < res.coords.size(); ++i) {
        const std::size_t c = res.coords[i];
        const double saved = target->data[c];
        if (saved == 0.0) {
            res.scores[i] = 0.0;  // zeroing a zero changes nothing
            continue;
        }
        target->data[c] = 0.0;
        const double perturbed = loss_of();
        target->data[c] = saved;
        const double delta = base_loss - perturbed;
        res.scores[i] = delta * delta;
    }
    return res;
}

// Spearman correlation plus top-k set overlap between two score arrays.
struct RankStats {
    double spearman = 0.0;
    std::map<double, double> topk_overlap;  // k-fraction -> overlap fraction
};

namespace detail {

// average ranks over ties
inline std::vector<double> ranks_of(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (v[a] != v[b]) return v[a] < v[b];
        return a < b;
    });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline std::vector<std::size_t> topk_indices(const std::vector<double>& v, std::size_t k) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;
    });
    order.resize(k);
    return order;
}

} // namespace detail

inline RankStats rank_stats(const std::vector<double>& a, const std::vector<double>& b,
                            const std::vector<double>& k_fractions = {0.5}) {
    if (a.size() != b.size()) {
        throw UsageError("rank_stats: size mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    if (a.size() < 2) throw UsageError("rank_stats: need at least 2 entries");
    RankStats rs;

    const auto ra = detail::ranks_of(a);
    const auto rb = detail::ranks_of(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    rs.spearman = (va <= 0.0 || vb <= 0.0) ? 0.0 : cov / std::sqrt(va * vb);

    for (double frac : k_fractions) {
        const std::size_t k = std::max<std::size_t>(
            1, static_cast<std::size_t>(frac * static_cast<double>(a.size())));
        auto ta = detail::topk_indices(a, k);
        auto tb = detail::topk_indices(b, k);
        std::sort(ta.begin(), ta.end());
        std::sort(tb.begin(), tb.end());
        std::vector<std::size_t> inter;
        std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(),
                              std::back_inserter(inter));
        rs.topk_overlap[frac] =
            static_cast<double>(inter.size()) / static_cast<double>(k);
    }
    return rs;
}

} // namespace lplab
