#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lplab/errors.hpp"
#include "lplab/rng.hpp"
#include "lplab/tensor.hpp"

namespace lplab {

enum class AdapterMode { parallel, sequential };

inline std::string to_string(AdapterMode m) {
    return m == AdapterMode::parallel ? "parallel" : "sequential";
}

inline AdapterMode adapter_mode_from(const std::string& s) {
    if (s == "parallel") return AdapterMode::parallel;
    if (s == "sequential") return AdapterMode::sequential;
    throw ConfigError("unknown adapter mode '" + s + "'");
}

// Trainable low-rank factor pair beside (parallel) or before (sequential)
// a frozen weight. Parallel: W = W0 + B*A with A r x k, B d x r.
// Sequential: W = (B*A + I) * W0 with A r x d, B d x r.
struct Adapter {
    AdapterMode mode = AdapterMode::parallel;
    int rank = 0;
    TensorPtr a;
    TensorPtr b;
};

constexpr double kLoraInitStd = 0.02;

// Replacement weight passed into LoraLinear::forward. `masked` selects
// whether the layer's binary mask is still applied on top (grad probes
// override the raw composite, merged-weight evaluation overrides the
// already-masked product).
struct WeightOverride {
    TensorPtr weight;
    bool masked = true;
};

// One linear target module: a dense weight, an optional bias, and an
// optional attached adapter with its pruning mask. The mask covers the
// composite weight (d x k in both modes).
class LoraLinear {
public:
    std::string name;
    TensorPtr weight;  // d x k; frozen for good once an adapter is attached
    TensorPtr bias;    // optional 1 x k

    LoraLinear() = default;
    LoraLinear(std::string layer_name, TensorPtr w, TensorPtr b = nullptr)
        : name(std::move(layer_name)), weight(std::move(w)), bias(std::move(b)) {}

    std::size_t in_dim() const { return weight->rows(); }
    std::size_t out_dim() const { return weight->cols(); }

    bool has_lora() const { return adapter_.has_value(); }
    bool has_mask() const { return !mask_.empty(); }
    const Adapter& adapter() const {
        if (!adapter_) throw UsageError("layer '" + name + "' has no adapter");
        return *adapter_;
    }
    Adapter& adapter_mutable() {
        if (!adapter_) throw UsageError("layer '" + name + "' has no adapter");
        return *adapter_;
    }
    const std::vector<std::uint8_t>& mask() const { return mask_; }

    // B starts at zero so the adapted forward equals the frozen forward;
    // A is Gaussian so gradients reach B immediately.
    void attach_lora(int rank, AdapterMode mode, Rng& rng) {
        const std::size_t d = in_dim();
        const std::size_t k = out_dim();
        const std::size_t limit = std::min(d, k);
        if (rank < 1 || static_cast<std::size_t>(rank) >= limit) {
            throw ConfigError("layer '" + name + "': rank " + std::to_string(rank) +
                              " outside [1, " + std::to_string(limit) + ") for weight " +
                              weight->shape.str());
        }
        Adapter ad;
        ad.mode = mode;
        ad.rank = rank;
        const std::size_t a_cols = (mode == AdapterMode::parallel) ? k : d;
        ad.a = randn(static_cast<std::size_t>(rank), a_cols, rng, kLoraInitStd, true);
        ad.b = zeros(d, static_cast<std::size_t>(rank), true);
        adapter_ = std::move(ad);
        weight->requires_grad = false;
        if (bias) bias->requires_grad = false;
        mask_.assign(d * k, 1);
        rebuild_mask_tensor();
    }

    // Install an already-built adapter (clone/checkpoint paths); the
    // weight freezes exactly as in attach_lora.
    void install_adapter(Adapter ad) {
        const std::size_t d = in_dim();
        const std::size_t k = out_dim();
        const std::size_t a_cols = (ad.mode == AdapterMode::parallel) ? k : d;
        if (ad.a->rows() != static_cast<std::size_t>(ad.rank) || ad.a->cols() != a_cols ||
            ad.b->rows() != d || ad.b->cols() != static_cast<std::size_t>(ad.rank)) {
            throw DimensionError("layer '" + name + "': adapter factors " +
                                 ad.a->shape.str() + ", " + ad.b->shape.str() +
                                 " for weight " + weight->shape.str());
        }
        adapter_ = std::move(ad);
        weight->requires_grad = false;
        if (bias) bias->requires_grad = false;
        if (mask_.empty()) {
            mask_.assign(d * k, 1);
            rebuild_mask_tensor();
        }
    }

    // z = x * (W ⊙ mask) (+ bias). The composite W is built on-tape so
    // backward reaches A and B; the frozen weight never takes gradient.
    TensorPtr forward(Tape& tape, const TensorPtr& x,
                      const WeightOverride* override_w = nullptr) const {
        if (x->cols() != in_dim()) {
            throw DimensionError("layer '" + name + "': input " + x->shape.str() +
                                 " for weight " + weight->shape.str());
        }
        TensorPtr w_eff;
        if (override_w != nullptr) {
            if (!(override_w->weight->shape == weight->shape)) {
                throw DimensionError("layer '" + name + "': override " +
                                     override_w->weight->shape.str() + " for weight " +
                                     weight->shape.str());
            }
            w_eff = override_w->weight;
            if (override_w->masked && has_mask()) {
                w_eff = tape.hadamard(w_eff, mask_tensor_);
            }
        } else if (adapter_) {
            TensorPtr composite;
            if (adapter_->mode == AdapterMode::parallel) {
                auto ba = tape.matmul(adapter_->b, adapter_->a);
                composite = tape.add(weight, ba);
            } else {
                auto ba = tape.matmul(adapter_->b, adapter_->a);
                auto m = tape.add(ba, identity_cache());
                composite = tape.matmul(m, weight);
            }
            w_eff = has_mask() ? tape.hadamard(composite, mask_tensor_) : composite;
        } else {
            w_eff = weight;
        }
        auto z = tape.matmul(x, w_eff);
        if (bias) z = tape.add_row_bias(z, bias);
        return z;
    }

    // Dense composite weight before masking (W0 + BA or (BA+I)W0), off-tape.
    // Mirrors the on-tape operation order so both routes agree bitwise.
    TensorPtr composite() const {
        if (!adapter_) return clone(*weight);
        const std::size_t d = in_dim();
        const std::size_t k = out_dim();
        const std::size_t r = static_cast<std::size_t>(adapter_->rank);
        auto out = tensor(d, k);
        if (adapter_->mode == AdapterMode::parallel) {
            detail::matmul_acc(adapter_->b->data, adapter_->a->data, out->data, d, r, k);
            for (std::size_t i = 0; i < out->size(); ++i) out->data[i] += weight->data[i];
        } else {
            auto m = tensor(d, d);
            detail::matmul_acc(adapter_->b->data, adapter_->a->data, m->data, d, r, d);
            for (std::size_t i = 0; i < d; ++i) m->at(i, i) += 1.0;
            detail::matmul_acc(m->data, weight->data, out->data, d, d, k);
        }
        return out;
    }

    // Dense product actually used by the forward pass: composite ⊙ mask.
    // A model rebuilt from merged weights reproduces forward() exactly.
    TensorPtr merge() const {
        auto w = composite();
        if (has_mask()) {
            for (std::size_t i = 0; i < w->size(); ++i)
                w->data[i] *= static_cast<double>(mask_[i]);
        }
        w->requires_grad = false;
        return w;
    }

    // Pruning is monotone: a zeroed mask entry never returns to one.
    void apply_mask(const std::vector<std::uint8_t>& new_mask) {
        if (!has_mask()) {
            throw UsageError("layer '" + name + "': no mask attached");
        }
        if (new_mask.size() != mask_.size()) {
            throw DimensionError("layer '" + name + "': mask size " +
                                 std::to_string(new_mask.size()) + " != " +
                                 std::to_string(mask_.size()));
        }
        for (std::size_t i = 0; i < new_mask.size(); ++i) {
            if (new_mask[i] != 0 && new_mask[i] != 1) {
                throw InvariantError("layer '" + name + "': mask entry " +
                                     std::to_string(new_mask[i]) + " not binary");
            }
            if (mask_[i] == 0 && new_mask[i] == 1) {
                throw InvariantError("layer '" + name + "': mask entry " +
                                     std::to_string(i) + " would be revived");
            }
        }
        mask_ = new_mask;
        rebuild_mask_tensor();
    }

    // Used by checkpoint loading, where monotonicity against the fresh
    // all-ones mask trivially holds but entry validation still applies.
    void set_mask_unchecked(std::vector<std::uint8_t> m) {
        if (m.size() != weight->size()) {
            throw DimensionError("layer '" + name + "': mask size " +
                                 std::to_string(m.size()));
        }
        mask_ = std::move(m);
        rebuild_mask_tensor();
    }

    std::size_t mask_zeros() const {
        std::size_t z = 0;
        for (auto v : mask_)
            if (v == 0) ++z;
        return z;
    }

    // Fraction of pruned (zero) entries, 0.0 when no mask is attached.
    double sparsity() const {
        if (mask_.empty()) return 0.0;
        return static_cast<double>(mask_zeros()) / static_cast<double>(mask_.size());
    }

    std::vector<TensorPtr> trainable_params() const {
        std::vector<TensorPtr> out;
        if (adapter_) {
            out.push_back(adapter_->a);
            out.push_back(adapter_->b);
        } else {
            if (weight->requires_grad) out.push_back(weight);
            if (bias && bias->requires_grad) out.push_back(bias);
        }
        return out;
    }

private:
    std::optional<Adapter> adapter_;
    std::vector<std::uint8_t> mask_;
    mutable TensorPtr mask_tensor_;
    mutable TensorPtr identity_;

    void rebuild_mask_tensor() {
        mask_tensor_ = tensor(weight->rows(), weight->cols());
        for (std::size_t i = 0; i < mask_.size(); ++i)
            mask_tensor_->data[i] = static_cast<double>(mask_[i]);
    }

    TensorPtr identity_cache() const {
        const std::size_t d = in_dim();
        if (!identity_ || identity_->rows() != d) identity_ = identity(d);
        return identity_;
    }
};

} // namespace lplab
