#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lplab/errors.hpp"
#include "lplab/lora.hpp"
#include "lplab/rng.hpp"
#include "lplab/tensor.hpp"

namespace lplab {

enum class ModelKind { mlp, transformer };
enum class Activation { relu, gelu };
enum class LayerRole { attention, ffn, head };

inline std::string to_string(ModelKind k) {
    return k == ModelKind::mlp ? "mlp" : "transformer";
}
inline ModelKind model_kind_from(const std::string& s) {
    if (s == "mlp") return ModelKind::mlp;
    if (s == "transformer") return ModelKind::transformer;
    throw ConfigError("unknown model kind '" + s + "'");
}
inline std::string to_string(Activation a) {
    return a == Activation::relu ? "relu" : "gelu";
}
inline Activation activation_from(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "gelu") return Activation::gelu;
    throw ConfigError("unknown activation '" + s + "'");
}
inline std::string to_string(LayerRole r) {
    switch (r) {
        case LayerRole::attention: return "attention";
        case LayerRole::ffn: return "ffn";
        default: return "head";
    }
}
inline LayerRole layer_role_from(const std::string& s) {
    if (s == "attention") return LayerRole::attention;
    if (s == "ffn") return LayerRole::ffn;
    if (s == "head") return LayerRole::head;
    throw ConfigError("unknown layer role '" + s + "'");
}

// Which layers get adapters and masks: every eligible layer, or the
// attention / feed-forward subset of a transformer block.
enum class PrunableSet { all, ffn, attention };

inline std::string to_string(PrunableSet p) {
    switch (p) {
        case PrunableSet::all: return "all";
        case PrunableSet::ffn: return "ffn";
        default: return "attention";
    }
}
inline PrunableSet prunable_set_from(const std::string& s) {
    if (s == "all") return PrunableSet::all;
    if (s == "ffn") return PrunableSet::ffn;
    if (s == "attention") return PrunableSet::attention;
    throw ConfigError("unknown prunable subset '" + s + "'");
}

struct ModelSpec {
    ModelKind kind = ModelKind::mlp;
    std::size_t input_dim = 2;
    std::size_t classes = 2;
    std::vector<std::size_t> hidden;  // mlp hidden widths
    Activation activation = Activation::relu;
    // transformer block geometry: input_dim = tokens * embed
    std::size_t tokens = 4;
    std::size_t ffn_dim = 16;
    std::uint64_t seed = 0;

    std::size_t embed() const {
        if (kind != ModelKind::transformer) return 0;
        if (tokens == 0 || input_dim % tokens != 0) {
            throw ConfigError("transformer: input_dim " + std::to_string(input_dim) +
                              " not divisible by tokens " + std::to_string(tokens));
        }
        return input_dim / tokens;
    }

    void validate() const {
        if (input_dim == 0) throw ConfigError("input_dim must be positive");
        if (classes < 2) throw ConfigError("classes must be at least 2");
        for (auto h : hidden)
            if (h == 0) throw ConfigError("hidden width must be positive");
        if (kind == ModelKind::transformer) {
            (void)embed();
            if (ffn_dim == 0) throw ConfigError("ffn_dim must be positive");
        }
    }
};

// Per-layer weight replacement used by gradient probes and merged-weight
// evaluation; keyed by position in Model::layers().
using OverrideMap = std::map<std::size_t, WeightOverride>;

// A small classifier: either an MLP over the raw feature vector, or a
// single-head transformer block over the features split into tokens.
// Every weight matrix is a LoraLinear so adapters and masks can attach
// uniformly.
class Model {
public:
    Model() = default;

    static Model build(const ModelSpec& spec) {
        spec.validate();
        Model m;
        m.spec_ = spec;
        Rng rng(derive_seed(spec.seed, 0x6d6f64656cULL));
        if (spec.kind == ModelKind::mlp) {
            std::vector<std::size_t> dims;
            dims.push_back(spec.input_dim);
            for (auto h : spec.hidden) dims.push_back(h);
            dims.push_back(spec.classes);
            for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
                const bool last = (i + 2 == dims.size());
                m.add_layer(last ? "head" : "fc" + std::to_string(i),
                            last ? LayerRole::head : LayerRole::ffn, dims[i], dims[i + 1],
                            /*with_bias=*/true, rng);
            }
        } else {
            const std::size_t e = spec.embed();
            m.add_layer("attn.wq", LayerRole::attention, e, e, false, rng);
            m.add_layer("attn.wk", LayerRole::attention, e, e, false, rng);
            m.add_layer("attn.wv", LayerRole::attention, e, e, false, rng);
            m.add_layer("attn.wo", LayerRole::attention, e, e, false, rng);
            m.add_layer("ffn.w1", LayerRole::ffn, e, spec.ffn_dim, true, rng);
            m.add_layer("ffn.w2", LayerRole::ffn, spec.ffn_dim, e, true, rng);
            m.add_layer("head", LayerRole::head, e, spec.classes, true, rng);
        }
        return m;
    }

    const ModelSpec& spec() const { return spec_; }
    std::vector<LoraLinear>& layers() { return layers_; }
    const std::vector<LoraLinear>& layers() const { return layers_; }
    const std::vector<LayerRole>& roles() const { return roles_; }

    // Logits for a batch of feature rows.
    TensorPtr forward(Tape& tape, const TensorPtr& x, const OverrideMap* ov = nullptr) const {
        if (x->cols() != spec_.input_dim) {
            throw DimensionError("model input " + x->shape.str() + ", expected cols " +
                                 std::to_string(spec_.input_dim));
        }
        if (spec_.kind == ModelKind::mlp) return forward_mlp(tape, x, ov);
        return forward_transformer(tape, x, ov);
    }

    TensorPtr loss(Tape& tape, const TensorPtr& x, const std::vector<int>& labels,
                   const OverrideMap* ov = nullptr) const {
        return tape.softmax_cross_entropy(forward(tape, x, ov), labels);
    }

    // Indices of layers eligible for adapters under a subset selection.
    std::vector<std::size_t> select_layers(PrunableSet subset) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            switch (subset) {
                case PrunableSet::all:
                    out.push_back(i);
                    break;
                case PrunableSet::ffn:
                    if (roles_[i] == LayerRole::ffn) out.push_back(i);
                    break;
                case PrunableSet::attention:
                    if (roles_[i] == LayerRole::attention) out.push_back(i);
                    break;
            }
        }
        return out;
    }

    // Freeze everything, then attach adapters to the chosen subset.
    std::vector<std::size_t> attach_lora(int rank, AdapterMode mode, PrunableSet subset,
                                         std::uint64_t seed) {
        auto targets = select_layers(subset);
        if (targets.empty()) {
            throw ConfigError("prunable subset '" + to_string(subset) +
                              "' selects no layers in this model");
        }
        set_trainable(false);
        Rng rng(derive_seed(seed, 0x6c6f7261ULL));
        for (auto i : targets) layers_[i].attach_lora(rank, mode, rng);
        return targets;
    }

    std::vector<std::size_t> lora_layers() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i].has_lora()) out.push_back(i);
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto& l : layers_) {
            if (l.has_lora()) continue;  // frozen base stays frozen
            l.weight->requires_grad = trainable;
            if (l.bias) l.bias->requires_grad = trainable;
        }
    }

    std::vector<TensorPtr> trainable_params() const {
        std::vector<TensorPtr> out;
        for (const auto& l : layers_) {
            auto p = l.trainable_params();
            out.insert(out.end(), p.begin(), p.end());
        }
        return out;
    }

    void zero_grad() const {
        for (const auto& p : trainable_params()) p->zero_grad();
    }

    // Independent tensors, identical values; adapters and masks included.
    Model clone_detached() const {
        Model m;
        m.spec_ = spec_;
        m.roles_ = roles_;
        for (const auto& l : layers_) {
            LoraLinear copy(l.name, clone(*l.weight), l.bias ? clone(*l.bias) : nullptr);
            copy.weight->requires_grad = l.weight->requires_grad;
            if (copy.bias) copy.bias->requires_grad = l.bias->requires_grad;
            if (l.has_lora()) {
                const Adapter& ad = l.adapter();
                Adapter ad2;
                ad2.mode = ad.mode;
                ad2.rank = ad.rank;
                ad2.a = clone(*ad.a);
                ad2.a->requires_grad = ad.a->requires_grad;
                ad2.b = clone(*ad.b);
                ad2.b->requires_grad = ad.b->requires_grad;
                copy.install_adapter(std::move(ad2));
                copy.set_mask_unchecked(l.mask());
            }
            m.layers_.push_back(std::move(copy));
        }
        return m;
    }

    // Fold adapters and masks into plain dense weights.
    Model merged_copy() const {
        Model m;
        m.spec_ = spec_;
        m.roles_ = roles_;
        for (const auto& l : layers_) {
            TensorPtr w = l.has_lora() ? l.merge() : clone(*l.weight);
            w->requires_grad = false;
            LoraLinear copy(l.name, w, l.bias ? clone(*l.bias) : nullptr);
            if (copy.bias) copy.bias->requires_grad = false;
            m.layers_.push_back(std::move(copy));
        }
        return m;
    }

    // Average sparsity over adapter-carrying layers, element-weighted.
    double sparsity() const {
        std::size_t zeros = 0, total = 0;
        for (const auto& l : layers_) {
            if (!l.has_mask()) continue;
            zeros += l.mask_zeros();
            total += l.mask().size();
        }
        return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
    }

private:
    ModelSpec spec_;
    std::vector<LoraLinear> layers_;
    std::vector<LayerRole> roles_;

    void add_layer(const std::string& name, LayerRole role, std::size_t d, std::size_t k,
                   bool with_bias, Rng& rng) {
        const double std_dev = 1.0 / std::sqrt(static_cast<double>(d));
        auto w = randn(d, k, rng, std_dev, true);
        TensorPtr b = with_bias ? zeros(1, k, true) : nullptr;
        layers_.emplace_back(name, w, b);
        roles_.push_back(role);
    }

    const WeightOverride* find_override(const OverrideMap* ov, std::size_t idx) const {
        if (ov == nullptr) return nullptr;
        auto it = ov->find(idx);
        return it == ov->end() ? nullptr : &it->second;
    }

    TensorPtr forward_mlp(Tape& tape, const TensorPtr& x, const OverrideMap* ov) const {
        TensorPtr h = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            h = layers_[i].forward(tape, h, find_override(ov, i));
            if (i + 1 < layers_.size()) h = activate(tape, h);
        }
        return h;
    }

    // Pre-norm single-head block per sample, mean-pooled into the head.
    TensorPtr forward_transformer(Tape& tape, const TensorPtr& x, const OverrideMap* ov) const {
        const std::size_t e = spec_.embed();
        const std::size_t L = spec_.tokens;
        const double inv_sqrt_e = 1.0 / std::sqrt(static_cast<double>(e));
        auto pool_row = ones(1, L);
        for (auto& v : pool_row->data) v /= static_cast<double>(L);

        std::vector<TensorPtr> logits_rows;
        logits_rows.reserve(x->rows());
        for (std::size_t s = 0; s < x->rows(); ++s) {
            auto tokens = tensor(L, e);
            std::copy(x->data.begin() + s * spec_.input_dim,
                      x->data.begin() + (s + 1) * spec_.input_dim, tokens->data.begin());

            auto t1 = tape.layer_norm(tokens);
            auto q = layers_[0].forward(tape, t1, find_override(ov, 0));
            auto k = layers_[1].forward(tape, t1, find_override(ov, 1));
            auto v = layers_[2].forward(tape, t1, find_override(ov, 2));
            auto scores = tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_e);
            auto attn = tape.matmul(tape.softmax_rows(scores), v);
            auto proj = layers_[3].forward(tape, attn, find_override(ov, 3));
            auto z1 = tape.add(tokens, proj);

            auto t2 = tape.layer_norm(z1);
            auto f1 = activate(tape, layers_[4].forward(tape, t2, find_override(ov, 4)));
            auto f2 = layers_[5].forward(tape, f1, find_override(ov, 5));
            auto z2 = tape.add(z1, f2);

            auto pooled = tape.matmul(pool_row, z2);
            logits_rows.push_back(layers_[6].forward(tape, pooled, find_override(ov, 6)));
        }
        return tape.concat_rows(logits_rows);
    }

    TensorPtr activate(Tape& tape, const TensorPtr& h) const {
        return spec_.activation == Activation::relu ? tape.relu(h) : tape.gelu(h);
    }
};

inline std::vector<int> argmax_rows(const Tensor& logits) {
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c)
            if (logits.at(r, c) > logits.at(r, best)) best = c;
        out[r] = static_cast<int>(best);
    }
    return out;
}

constexpr double kMergeEquivalenceTol = 1e-12;

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    double max_merge_gap = 0.0;
};

// Classification accuracy through merged dense weights. Every evaluation
// double-checks that the merged route and the masked adapter route agree.
inline EvalResult evaluate(const Model& model, const TensorPtr& x,
                           const std::vector<int>& labels, bool check_merge = true) {
    Model merged = model.merged_copy();
    Tape tape;
    auto logits = merged.forward(tape, x);
    EvalResult res;
    if (check_merge) {
        Tape scratch;
        auto masked = model.forward(scratch, x);
        for (std::size_t i = 0; i < logits->size(); ++i) {
            res.max_merge_gap =
                std::max(res.max_merge_gap, std::abs(masked->data[i] - logits->data[i]));
        }
        if (res.max_merge_gap > kMergeEquivalenceTol) {
            throw InvariantError("merged forward deviates from masked forward by " +
                                 std::to_string(res.max_merge_gap));
        }
    }
    res.mean_loss = tape.softmax_cross_entropy(logits, labels)->scalar();
    auto pred = argmax_rows(*logits);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == labels[i]) ++hits;
    res.accuracy = pred.empty() ? 0.0 : static_cast<double>(hits) / pred.size();
    return res;
}

} // namespace lplab
