#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "lplab/criteria.hpp"
#include "lplab/dataset.hpp"
#include "lplab/errors.hpp"
#include "lplab/model.hpp"
#include "lplab/oracle.hpp"
#include "lplab/report.hpp"
#include "lplab/tensor.hpp"

namespace lplab {

enum class PruneScope { per_layer, global };

inline std::string to_string(PruneScope s) {
    return s == PruneScope::per_layer ? "per-layer" : "global";
}
inline PruneScope prune_scope_from(const std::string& s) {
    if (s == "per-layer") return PruneScope::per_layer;
    if (s == "global") return PruneScope::global;
    throw ConfigError("unknown prune scope '" + s + "'");
}

struct PruneConfig {
    double target_sparsity = 0.5;  // s in [0, 1)
    double lambda = 0.9;
    long total_iterations = 0;     // T
    double prune_start_frac = 0.10;
    double prune_end_frac = 0.70;  // last 30% of iterations never prune
    long prune_interval = 0;       // iterations between mask updates; 0 = one epoch
    CriterionId criterion = CriterionId::lora;
    EmaMode ema_mode = EmaMode::recursive;
    SeqVariant seq_variant = SeqVariant::chain;
    PruneScope scope = PruneScope::per_layer;
    std::uint64_t seed = 0;
    double lr = 1e-2;
    std::size_t batch_size = 32;
    bool train_adapters = true;

    void validate() const {
        if (target_sparsity < 0.0 || target_sparsity >= 1.0)
            throw ConfigError("target_sparsity " + std::to_string(target_sparsity) +
                              " outside [0, 1)");
        if (lambda < 0.0 || lambda > 1.0)
            throw ConfigError("lambda " + std::to_string(lambda) + " outside [0, 1]");
        if (total_iterations < 1) throw ConfigError("total_iterations must be at least 1");
        if (prune_start_frac < 0.0 || prune_start_frac >= prune_end_frac ||
            prune_end_frac > 1.0)
            throw ConfigError("prune window fractions must satisfy 0 <= start < end <= 1");
        if (prune_interval < 0) throw ConfigError("prune_interval must be >= 0");
        if (lr < 0.0) throw ConfigError("lr must be non-negative");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    }
};

// Iteration bounds and the cubic ease-out target derived from a config.
struct Schedule {
    long t_start = 0;
    long t_end = 0;
    double final_sparsity = 0.0;

    static Schedule from(const PruneConfig& cfg) {
        Schedule s;
        s.t_start = std::lround(cfg.prune_start_frac * static_cast<double>(cfg.total_iterations));
        s.t_end = std::lround(cfg.prune_end_frac * static_cast<double>(cfg.total_iterations));
        s.final_sparsity = cfg.target_sparsity;
        return s;
    }

    double target_at(long t) const {
        if (t < t_start) return 0.0;
        if (t >= t_end) return final_sparsity;
        const double frac = static_cast<double>(t - t_start) /
                            static_cast<double>(t_end - t_start);
        const double r = 1.0 - frac;
        return final_sparsity * (1.0 - r * r * r);
    }
};

// Cubic sparsity ramp: 0 until the window opens, s from the window close
// onward, s * (1 - (1 - u)^3) in between.
inline double sparsity_target(long t, const PruneConfig& cfg) {
    if (t < 0 || t > cfg.total_iterations) {
        throw UsageError("sparsity_target: iteration " + std::to_string(t) +
                         " outside [0, " + std::to_string(cfg.total_iterations) + "]");
    }
    return Schedule::from(cfg).target_at(t);
}

namespace detail {

struct Candidate {
    double score;
    std::size_t layer_pos;  // position within the state's layer list
    std::size_t index;      // row-major position within the layer
};

inline bool candidate_less(const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.layer_pos != b.layer_pos) return a.layer_pos < b.layer_pos;
    return a.index < b.index;
}

} // namespace detail

// Zero out exactly enough additional mask entries (smallest smoothed
// importance first, pruned entries excluded) so each layer (per-layer) or
// the whole prunable pool (global) holds floor(target * n) zeros. Ties
// break on (layer, row, col) ascending. Returns the number of entries
// newly pruned.
inline long prune_step(Model& model, ImportanceState& state, double target,
                       PruneScope scope) {
    if (target < 0.0 || target > 1.0) {
        throw UsageError("prune_step: target " + std::to_string(target));
    }

    auto gather = [&](std::size_t layer_pos, std::vector<detail::Candidate>& out) {
        const auto& sl = state.layers[layer_pos];
        const auto& mask = model.layers()[sl.layer_index].mask();
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (mask[i] == 1) out.push_back({sl.smooth[i], layer_pos, i});
        }
    };

    auto zero_entries = [&](const std::vector<detail::Candidate>& chosen) -> long {
        std::vector<std::vector<std::size_t>> per_layer(state.layers.size());
        for (const auto& c : chosen) per_layer[c.layer_pos].push_back(c.index);
        long removed = 0;
        for (std::size_t lp = 0; lp < per_layer.size(); ++lp) {
            if (per_layer[lp].empty()) continue;
            auto& layer = model.layers()[state.layers[lp].layer_index];
            auto mask = layer.mask();
            for (auto idx : per_layer[lp]) {
                mask[idx] = 0;
                ++removed;
            }
            layer.apply_mask(mask);
        }
        return removed;
    };

    auto select = [&](std::vector<detail::Candidate>& cands, std::size_t need) {
        std::sort(cands.begin(), cands.end(), detail::candidate_less);
        cands.resize(need);
    };

    long newly = 0;
    if (scope == PruneScope::per_layer) {
        for (std::size_t lp = 0; lp < state.layers.size(); ++lp) {
            const auto& sl = state.layers[lp];
            auto& layer = model.layers()[sl.layer_index];
            const std::size_t n = layer.mask().size();
            const std::size_t want =
                static_cast<std::size_t>(target * static_cast<double>(n));
            const std::size_t cur = layer.mask_zeros();
            if (want < cur) {
                throw InvariantError("prune_step: target sparsity " + std::to_string(target) +
                                     " below current on layer '" + layer.name + "'");
            }
            if (want == cur) continue;
            if (!sl.seeded) {
                throw UsageError("prune_step: importance never updated for layer '" +
                                 layer.name + "'");
            }
            std::vector<detail::Candidate> cands;
            gather(lp, cands);
            select(cands, want - cur);
            newly += zero_entries(cands);
        }
    } else {
        std::size_t n_total = 0, cur = 0;
        for (const auto& sl : state.layers) {
            const auto& layer = model.layers()[sl.layer_index];
            n_total += layer.mask().size();
            cur += layer.mask_zeros();
        }
        const std::size_t want =
            static_cast<std::size_t>(target * static_cast<double>(n_total));
        if (want < cur) {
            throw InvariantError("prune_step: global target sparsity " +
                                 std::to_string(target) + " below current");
        }
        if (want > cur) {
            for (const auto& sl : state.layers) {
                if (!sl.seeded) {
                    throw UsageError("prune_step: importance never updated for layer " +
                                     std::to_string(sl.layer_index));
                }
            }
            std::vector<detail::Candidate> cands;
            for (std::size_t lp = 0; lp < state.layers.size(); ++lp) gather(lp, cands);
            select(cands, want - cur);
            newly += zero_entries(cands);
        }
    }
    return newly;
}

// Single jump straight to the final sparsity; the ablation baseline.
inline long one_shot_prune(Model& model, ImportanceState& state, double s,
                           PruneScope scope = PruneScope::per_layer) {
    return prune_step(model, state, s, scope);
}

// Optional probe called once per iteration after the importance update and
// before the optimizer step (weights still match the gradients).
struct RunHooks {
    std::function<void(long iteration, Model& model, ImportanceState& state,
                       const TensorPtr& batch_x, const std::vector<int>& batch_y)>
        after_importance;
};

struct RunResult {
    RunReport report;
    ImportanceState state;
};

namespace detail {

inline void update_importance(Model& model, ImportanceState& state, const PruneConfig& cfg,
                              const TensorPtr& batch_x, const std::vector<int>& batch_y) {
    // exact composite gradients are only materialized for the criteria
    // that genuinely consume them
    ExactGrads exact;
    const bool needs_exact = cfg.criterion == CriterionId::movement ||
                             cfg.criterion == CriterionId::taylor_exact;
    if (needs_exact) exact = exact_composite_grad(model, batch_x, batch_y);

    for (auto& sl : state.layers) {
        auto& layer = model.layers()[sl.layer_index];
        std::vector<double> inst;
        switch (cfg.criterion) {
            case CriterionId::lora: {
                auto ghat = estimate_product_gradient(layer.adapter());
                inst = (layer.adapter().mode == AdapterMode::parallel)
                           ? importance_parallel(layer, *ghat)
                           : importance_sequential(layer, *ghat, cfg.seq_variant);
                break;
            }
            case CriterionId::magnitude:
                inst = importance_magnitude(*layer.composite());
                break;
            case CriterionId::movement:
                importance_movement_update(sl.mvp_acc, *layer.composite(),
                                           *exact.grad_for(sl.layer_index));
                inst = sl.mvp_acc;
                break;
            case CriterionId::taylor_exact:
                inst = importance_taylor_exact(*layer.composite(),
                                               *exact.grad_for(sl.layer_index));
                break;
            case CriterionId::random:
                inst = importance_random(sl.shape,
                                         derive_seed(cfg.seed, 0xab00 + sl.layer_index));
                break;
        }
        ema_update(sl, inst, cfg.ema_mode, cfg.lambda);
    }
    state.step += 1;
}

} // namespace detail

// Progressive prune-while-tuning loop: every iteration runs forward and
// backward through the masked composite, refreshes the smoothed importance,
// then (inside the prune window, every `interval` iterations and at the
// window close) removes the lowest-scored weights toward the cubic target.
inline RunResult run(Model& model, const Dataset& data, const PruneConfig& cfg,
                     const RunHooks* hooks = nullptr) {
    cfg.validate();
    const auto lora_layers = model.lora_layers();
    if (lora_layers.empty()) {
        throw UsageError("run: model has no adapters attached");
    }
    if (cfg.criterion == CriterionId::lora && cfg.seq_variant == SeqVariant::literal) {
        for (auto idx : lora_layers) {
            const auto& l = model.layers()[idx];
            if (l.adapter().mode == AdapterMode::sequential && l.in_dim() != l.out_dim()) {
                throw ConfigError("literal sequential scoring needs square modules; layer '" +
                                  l.name + "' is " + l.weight->shape.str());
            }
        }
    }

    std::vector<Shape> shapes;
    for (auto idx : lora_layers) shapes.push_back(model.layers()[idx].weight->shape);
    RunResult res{.report = {}, .state = make_importance_state(lora_layers, shapes, cfg.lambda)};

    const std::size_t n_train = data.train_idx.size();
    if (n_train == 0) throw UsageError("run: empty training split");
    const long iters_per_epoch =
        static_cast<long>((n_train + cfg.batch_size - 1) / cfg.batch_size);
    const long interval = cfg.prune_interval > 0 ? cfg.prune_interval : iters_per_epoch;
    const Schedule sched = Schedule::from(cfg);

    auto params = model.trainable_params();
    Rng batch_rng(derive_seed(cfg.seed, 0x626174ULL));
    std::vector<std::size_t> order = data.train_idx;
    std::size_t cursor = order.size();  // forces a shuffle on first use

    for (long t = 1; t <= cfg.total_iterations; ++t) {
        std::vector<std::size_t> batch_idx;
        batch_idx.reserve(cfg.batch_size);
        while (batch_idx.size() < cfg.batch_size) {
            if (cursor == order.size()) {
                batch_rng.shuffle(order);
                cursor = 0;
            }
            batch_idx.push_back(order[cursor++]);
        }
        auto batch_x = data.gather_features(batch_idx);
        auto batch_y = data.gather_labels(batch_idx);

        double loss_value;
        try {
            model.zero_grad();
            Tape tape;
            auto loss = model.loss(tape, batch_x, batch_y);
            loss_value = loss->scalar();
            tape.backward(loss);

            detail::update_importance(model, res.state, cfg, batch_x, batch_y);
            if (hooks && hooks->after_importance) {
                hooks->after_importance(t, model, res.state, batch_x, batch_y);
            }
            if (cfg.train_adapters && !params.empty()) sgd_step(params, cfg.lr);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at iteration " + std::to_string(t) +
                               " (last loss " +
                               (res.report.rows.empty()
                                    ? std::string("n/a")
                                    : std::to_string(res.report.rows.back().loss)) +
                               ")");
        }

        if (cfg.target_sparsity > 0.0 && t >= sched.t_start && t <= sched.t_end &&
            ((t - sched.t_start) % interval == 0 || t == sched.t_end)) {
            prune_step(model, res.state, sched.target_at(t), cfg.scope);
        }

        res.report.rows.push_back({t, loss_value, model.sparsity(), cfg.lr});
    }

    // terminal sparsity must be exact (floor quantization) per scope
    if (cfg.target_sparsity > 0.0) {
        if (cfg.scope == PruneScope::per_layer) {
            for (auto idx : lora_layers) {
                const auto& l = model.layers()[idx];
                const std::size_t want = static_cast<std::size_t>(
                    cfg.target_sparsity * static_cast<double>(l.mask().size()));
                if (l.mask_zeros() != want) {
                    throw InvariantError("run: layer '" + l.name + "' ended with " +
                                         std::to_string(l.mask_zeros()) + " zeros, expected " +
                                         std::to_string(want));
                }
            }
        } else {
            std::size_t zeros = 0, total = 0;
            for (auto idx : lora_layers) {
                zeros += model.layers()[idx].mask_zeros();
                total += model.layers()[idx].mask().size();
            }
            const std::size_t want = static_cast<std::size_t>(
                cfg.target_sparsity * static_cast<double>(total));
            if (zeros != want) {
                throw InvariantError("run: pool ended with " + std::to_string(zeros) +
                                     " zeros, expected " + std::to_string(want));
            }
        }
    }

    res.report.summary.criterion = to_string(cfg.criterion);
    res.report.summary.seed = cfg.seed;
    res.report.summary.target_sparsity = cfg.target_sparsity;
    res.report.summary.final_sparsity = model.sparsity();
    res.report.summary.final_loss =
        res.report.rows.empty() ? 0.0 : res.report.rows.back().loss;
    if (!lora_layers.empty()) {
        res.report.summary.adapter_mode =
            to_string(model.layers()[lora_layers[0]].adapter().mode);
    }
    return res;
}

} // namespace lplab
