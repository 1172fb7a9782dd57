#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lplab/criteria.hpp"
#include "lplab/dataset.hpp"
#include "lplab/lora.hpp"
#include "lplab/model.hpp"
#include "lplab/oracle.hpp"
#include "lplab/tensor.hpp"

namespace lplab {

struct CheckResult {
    std::string name;
    bool pass = false;
    double measured = 0.0;
    double threshold = 0.0;
    bool at_least = false;  // pass condition is measured >= threshold
    std::string detail;
};

inline std::uint64_t fnv_mix(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct OracleSuiteOptions {
    int gradcheck_seeds = 100;
    double gradcheck_tol = 1e-6;
    int sgd_instances = 50;
    double sgd_tol = 1e-10;
    double chain_tol = 1e-10;
    int merge_cases = 100;
    double merge_tol = 1e-12;
    double loo_spearman_min = 0.5;
    std::uint64_t seed = 7;
    bool inject_gradient_fault = false;  // negative control for the SGD identity
};

namespace oracle_detail {

// |a-b| scaled by max(1, |a|, |b|): relative for large values, absolute
// near zero.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

struct OpCase {
    std::vector<TensorPtr> leaves;
    std::function<TensorPtr(Tape&)> loss;
};

inline TensorPtr rand_leaf(Rng& rng, std::size_t r, std::size_t c, bool grad = true) {
    auto t = randn(r, c, rng, 1.0, grad);
    return t;
}

// values bounded away from relu's kink so central differences stay clean
inline TensorPtr rand_leaf_offzero(Rng& rng, std::size_t r, std::size_t c) {
    auto t = tensor(r, c, true);
    for (auto& v : t->data) {
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        v = sign * (0.2 + std::abs(rng.normal()));
    }
    return t;
}

inline TensorPtr rand_weights(Rng& rng, std::size_t r, std::size_t c) {
    auto t = tensor(r, c);
    for (auto& v : t->data) v = rng.uniform(0.5, 1.5);
    return t;
}

// scalarize a matrix output with fixed random positive coefficients
inline TensorPtr weigh(Tape& tape, const TensorPtr& out, const TensorPtr& coeffs) {
    return tape.reduce_sum(tape.hadamard(out, coeffs));
}

inline std::vector<std::pair<std::string, std::function<OpCase(Rng&)>>> gradcheck_ops() {
    using Maker = std::function<OpCase(Rng&)>;
    std::vector<std::pair<std::string, Maker>> ops;

    ops.emplace_back("matmul", [](Rng& rng) {
        auto a = rand_leaf(rng, 3, 4);
        auto b = rand_leaf(rng, 4, 2);
        auto w = rand_weights(rng, 3, 2);
        return OpCase{{a, b}, [=](Tape& t) { return weigh(t, t.matmul(a, b), w); }};
    });
    ops.emplace_back("transpose", [](Rng& rng) {
        auto a = rand_leaf(rng, 3, 5);
        auto w = rand_weights(rng, 5, 3);
        return OpCase{{a}, [=](Tape& t) { return weigh(t, t.transpose(a), w); }};
    });
    ops.emplace_back("add", [](Rng& rng) {
        auto a = rand_leaf(rng, 3, 4);
        auto b = rand_leaf(rng, 3, 4);
        auto w = rand_weights(rng, 3, 4);
        return OpCase{{a, b}, [=](Tape& t) { return weigh(t, t.add(a, b), w); }};
    });
    ops.emplace_back("sub", [](Rng& rng) {
        auto a = rand_leaf(rng, 3, 4);
        auto b = rand_leaf(rng, 3, 4);
        auto w = rand_weights(rng, 3, 4);
        return OpCase{{a, b}, [=](Tape& t) { return weigh(t, t.sub(a, b), w); }};
    });
    ops.emplace_back("scale", [](Rng& rng) {
        auto a = rand_leaf(rng, 2, 6);
        auto w = rand_weights(rng, 2, 6);
        const double c = rng.uniform(-2.0, 2.0);
        return OpCase{{a}, [=](Tape& t) { return weigh(t, t.scale(a, c), w); }};
    });
    ops.emplace_back("hadamard", [](Rng& rng) {
        auto a = rand_leaf(rng, 4, 3);
        auto b = rand_leaf(rng, 4, 3);
        auto w = rand_weights(rng, 4, 3);
        return OpCase{{a, b}, [=](Tape& t) { return weigh(t, t.hadamard(a, b), w); }};
    });
    ops.emplace_back("add_row_bias", [](Rng& rng) {
        auto x = rand_leaf(rng, 4, 3);
        auto b = rand_leaf(rng, 1, 3);
        auto w = rand_weights(rng, 4, 3);
        return OpCase{{x, b}, [=](Tape& t) { return weigh(t, t.add_row_bias(x, b), w); }};
    });
    ops.emplace_back("relu", [](Rng& rng) {
        auto a = rand_leaf_offzero(rng, 3, 4);
        auto w = rand_weights(rng, 3, 4);
        return OpCase{{a}, [=](Tape& t) { return weigh(t, t.relu(a), w); }};
    });
    ops.emplace_back("gelu", [](Rng& rng) {
        auto a = rand_leaf(rng, 3, 4);
        auto w = rand_weights(rng, 3, 4);
        return OpCase{{a}, [=](Tape& t) { return weigh(t, t.gelu(a), w); }};
    });
    ops.emplace_back("softmax_rows", [](Rng& rng) {
        auto a = rand_leaf(rng, 3, 5);
        auto w = rand_weights(rng, 3, 5);
        return OpCase{{a}, [=](Tape& t) { return weigh(t, t.softmax_rows(a), w); }};
    });
    ops.emplace_back("layer_norm", [](Rng& rng) {
        auto a = tensor(3, 6, true);
        for (std::size_t i = 0; i < a->size(); ++i)
            a->data[i] = rng.normal() + 0.5 * static_cast<double>(i % 6);
        auto w = rand_weights(rng, 3, 6);
        return OpCase{{a}, [=](Tape& t) { return weigh(t, t.layer_norm(a), w); }};
    });
    ops.emplace_back("reduce_sum", [](Rng& rng) {
        auto a = rand_leaf(rng, 3, 4);
        return OpCase{{a}, [=](Tape& t) { return t.reduce_sum(a); }};
    });
    ops.emplace_back("reduce_mean", [](Rng& rng) {
        auto a = rand_leaf(rng, 3, 4);
        return OpCase{{a}, [=](Tape& t) { return t.reduce_mean(a); }};
    });
    ops.emplace_back("reshape", [](Rng& rng) {
        auto a = rand_leaf(rng, 2, 6);
        auto w = rand_weights(rng, 3, 4);
        return OpCase{{a}, [=](Tape& t) { return weigh(t, t.reshape(a, 3, 4), w); }};
    });
    ops.emplace_back("concat_rows", [](Rng& rng) {
        auto a = rand_leaf(rng, 2, 3);
        auto b = rand_leaf(rng, 1, 3);
        auto c = rand_leaf(rng, 2, 3);
        auto w = rand_weights(rng, 5, 3);
        return OpCase{{a, b, c},
                      [=](Tape& t) { return weigh(t, t.concat_rows({a, b, c}), w); }};
    });
    ops.emplace_back("mse_loss", [](Rng& rng) {
        auto p = rand_leaf(rng, 3, 4);
        auto y = rand_leaf(rng, 3, 4);
        return OpCase{{p, y}, [=](Tape& t) { return t.mse_loss(p, y); }};
    });
    ops.emplace_back("softmax_cross_entropy", [](Rng& rng) {
        auto logits = rand_leaf(rng, 4, 3);
        std::vector<int> labels(4);
        for (auto& y : labels) y = static_cast<int>(rng.below(3));
        return OpCase{{logits},
                      [=](Tape& t) { return t.softmax_cross_entropy(logits, labels); }};
    });
    return ops;
}

} // namespace oracle_detail

// Every differentiable op against central finite differences.
inline CheckResult check_gradcheck(const OracleSuiteOptions& opts) {
    CheckResult res{"gradcheck", false, 0.0, opts.gradcheck_tol, false, ""};
    for (const auto& [name, make] : oracle_detail::gradcheck_ops()) {
        for (int s = 0; s < opts.gradcheck_seeds; ++s) {
            Rng rng(derive_seed(opts.seed, fnv_mix(name) + static_cast<std::uint64_t>(s)));
            auto cs = make(rng);
            Tape tape;
            auto loss = cs.loss(tape);
            tape.backward(loss);
            std::vector<std::vector<double>> analytic;
            for (auto& leaf : cs.leaves) {
                leaf->ensure_grad();
                analytic.push_back(leaf->grad);
            }
            auto f = [&]() {
                Tape t2;
                return cs.loss(t2)->scalar();
            };
            for (std::size_t li = 0; li < cs.leaves.size(); ++li) {
                auto fd = finite_diff_grad(f, *cs.leaves[li]);
                for (std::size_t i = 0; i < fd.size(); ++i) {
                    const double e = oracle_detail::rel_err(analytic[li][i], fd[i]);
                    if (e > res.measured) {
                        res.measured = e;
                        res.detail = name + " seed " + std::to_string(s);
                    }
                }
            }
        }
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

// One vanilla SGD step on both factors changes the product by exactly
// eta(gB A + B gA) - eta^2 gB gA, which is the reconstruction formula with
// gradients scaled by eta.
inline CheckResult check_sgd_identity(const OracleSuiteOptions& opts) {
    CheckResult res{"sgd_step_identity", false, 0.0, opts.sgd_tol, false, ""};
    for (int inst = 0; inst < opts.sgd_instances; ++inst) {
        Rng rng(derive_seed(opts.seed, 0x5347440000ULL + static_cast<std::uint64_t>(inst)));
        const std::size_t d = 2 + rng.below(31);  // <= 32
        const std::size_t k = 2 + rng.below(31);
        const std::size_t r = 1 + rng.below(std::min<std::uint64_t>(4, std::min(d, k) - 1));
        auto w0 = randn(d, k, rng, 1.0);
        auto a = randn(r, k, rng, 0.5, true);
        auto b = randn(d, r, rng, 0.5, true);
        auto x = randn(4, d, rng, 1.0);
        auto coeffs = oracle_detail::rand_weights(rng, 4, k);

        Tape tape;
        auto composite = tape.add(w0, tape.matmul(b, a));
        auto loss = tape.reduce_sum(tape.hadamard(tape.matmul(x, composite), coeffs));
        tape.backward(loss);

        const double eta = rng.uniform(0.01, 0.2);
        Tensor ga;
        ga.shape = a->shape;
        ga.data = a->grad;
        Tensor gb;
        gb.shape = b->shape;
        gb.data = b->grad;
        if (opts.inject_gradient_fault) {
            for (auto& v : gb.data) v *= 1.001;  // corrupt on purpose
        }
        Tensor ga_eta = ga, gb_eta = gb;
        for (auto& v : ga_eta.data) v *= eta;
        for (auto& v : gb_eta.data) v *= eta;
        auto estimate = estimate_product_gradient(*a, *b, ga_eta, gb_eta);

        auto prod0 = tensor(d, k);
        detail::matmul_acc(b->data, a->data, prod0->data, d, r, k);
        auto a1 = clone(*a);
        auto b1 = clone(*b);
        for (std::size_t i = 0; i < a1->size(); ++i) a1->data[i] -= eta * a->grad[i];
        for (std::size_t i = 0; i < b1->size(); ++i) b1->data[i] -= eta * b->grad[i];
        auto prod1 = tensor(d, k);
        detail::matmul_acc(b1->data, a1->data, prod1->data, d, r, k);

        for (std::size_t i = 0; i < prod0->size(); ++i) {
            const double change = prod0->data[i] - prod1->data[i];
            const double err = std::abs(change - estimate->data[i]);
            if (err > res.measured) {
                res.measured = err;
                res.detail = "instance " + std::to_string(inst);
            }
        }
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

// Tape gradients of the factors must satisfy gB = G A^T and gA = B^T G
// where G is the exact product gradient.
inline CheckResult check_chain_rule(const OracleSuiteOptions& opts) {
    CheckResult res{"chain_rule_identity", false, 0.0, opts.chain_tol, false, ""};
    for (int inst = 0; inst < 20; ++inst) {
        Rng rng(derive_seed(opts.seed, 0xC4A10000ULL + static_cast<std::uint64_t>(inst)));
        const std::size_t d = 6, k = 5, r = 2;
        LoraLinear layer("probe", randn(d, k, rng, 1.0));
        layer.attach_lora(static_cast<int>(r), AdapterMode::parallel, rng);
        auto& ad = layer.adapter_mutable();
        for (auto& v : ad.b->data) v = rng.normal(0.0, 0.3);

        auto x = randn(3, d, rng, 1.0);
        std::vector<int> labels = {0, 2, 1};
        Tape tape;
        auto loss = tape.softmax_cross_entropy(layer.forward(tape, x), labels);
        tape.backward(loss);

        // exact product gradient: leaf on the composite, same forward
        auto leaf = layer.composite();
        leaf->requires_grad = true;
        Tape tape2;
        WeightOverride ov{leaf, true};
        auto loss2 = tape2.softmax_cross_entropy(layer.forward(tape2, x, &ov), labels);
        tape2.backward(loss2);
        leaf->ensure_grad();

        auto gb_expected = tensor(d, r);
        detail::matmul_nt_acc(leaf->grad, ad.a->data, gb_expected->data, d, k, r);
        auto ga_expected = tensor(r, k);
        detail::matmul_tn_acc(ad.b->data, leaf->grad, ga_expected->data, d, r, k);
        for (std::size_t i = 0; i < gb_expected->size(); ++i)
            res.measured =
                std::max(res.measured, std::abs(gb_expected->data[i] - ad.b->grad[i]));
        for (std::size_t i = 0; i < ga_expected->size(); ++i)
            res.measured =
                std::max(res.measured, std::abs(ga_expected->data[i] - ad.a->grad[i]));
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

// Masked adapter forward against the dense merged product, both modes,
// random masks included.
inline CheckResult check_merge_equivalence(const OracleSuiteOptions& opts) {
    CheckResult res{"merge_equivalence", false, 0.0, opts.merge_tol, false, ""};
    for (int inst = 0; inst < opts.merge_cases; ++inst) {
        Rng rng(derive_seed(opts.seed, 0x4d4552ULL + static_cast<std::uint64_t>(inst)));
        const bool square = inst % 2 == 1;
        const std::size_t d = 3 + rng.below(8);
        const std::size_t k = square ? d : 2 + rng.below(8);
        const auto mode = (inst % 2 == 0) ? AdapterMode::parallel : AdapterMode::sequential;
        const int rank = 1 + static_cast<int>(rng.below(std::min(d, k) - 1));

        LoraLinear layer("probe", randn(d, k, rng, 1.0));
        layer.attach_lora(rank, mode, rng);
        auto& ad = layer.adapter_mutable();
        for (auto& v : ad.b->data) v = rng.normal(0.0, 0.4);
        std::vector<std::uint8_t> mask(d * k, 1);
        for (auto& m : mask) m = rng.uniform() < 0.3 ? 0 : 1;
        layer.apply_mask(mask);

        auto x = randn(4, d, rng, 1.0);
        Tape tape;
        auto via_adapter = layer.forward(tape, x);
        auto merged = layer.merge();
        auto direct = tensor(4, k);
        detail::matmul_acc(x->data, merged->data, direct->data, 4, d, k);
        for (std::size_t i = 0; i < direct->size(); ++i) {
            const double err = std::abs(via_adapter->data[i] - direct->data[i]);
            if (err > res.measured) {
                res.measured = err;
                res.detail = std::string(mode == AdapterMode::parallel ? "parallel"
                                                                       : "sequential") +
                             " instance " + std::to_string(inst);
            }
        }
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

// Taylor scores against the brute-force leave-one-out loss change on a
// 16 x 8 layer of a small classifier trained partway on blobs.
inline CheckResult check_loo_vs_taylor(const OracleSuiteOptions& opts) {
    CheckResult res{"loo_vs_taylor_spearman", false, 1.0, opts.loo_spearman_min, true, ""};
    double worst = 2.0;
    for (std::uint64_t seed : {opts.seed, opts.seed + 1}) {
        DatasetParams dp;
        dp.kind = DatasetKind::blobs;
        dp.n = 512;
        dp.d = 16;
        dp.classes = 4;
        dp.seed = seed;
        dp.noise = 1.2;
        dp.radius = 2.0;
        auto data = gen_dataset(dp);

        ModelSpec ms;
        ms.kind = ModelKind::mlp;
        ms.input_dim = 16;
        ms.hidden = {8};
        ms.classes = 4;
        ms.seed = seed;
        Model model = Model::build(ms);
        model.set_trainable(true);

        // a few epochs only: scores are compared away from convergence
        auto params = model.trainable_params();
        Rng batch_rng(derive_seed(seed, 0x747261696eULL));
        auto order = data.train_idx;
        const std::size_t bs = 32;
        for (int epoch = 0; epoch < 4; ++epoch) {
            batch_rng.shuffle(order);
            for (std::size_t at = 0; at + bs <= order.size(); at += bs) {
                std::vector<std::size_t> idx(order.begin() + at, order.begin() + at + bs);
                auto bx = data.gather_features(idx);
                auto by = data.gather_labels(idx);
                model.zero_grad();
                Tape tape;
                auto loss = model.loss(tape, bx, by);
                tape.backward(loss);
                sgd_step(params, 0.05);
            }
        }

        auto px = data.gather_features(data.train_idx);
        auto py = data.gather_labels(data.train_idx);
        model.zero_grad();
        Tape tape;
        auto loss = model.loss(tape, px, py);
        tape.backward(loss);
        const auto& w = model.layers()[0].weight;
        Tensor gw;
        gw.shape = w->shape;
        gw.data = w->grad;
        auto taylor = importance_taylor_exact(*w, gw);

        auto loo = leave_one_out_importance(model, px, py, 0, w->size(), seed);
        auto stats = rank_stats(taylor, loo.scores, {0.5});
        if (stats.spearman < worst) {
            worst = stats.spearman;
            res.detail = "seed " + std::to_string(seed);
        }
    }
    res.measured = worst;
    res.pass = res.measured >= res.threshold;
    return res;
}

// End-to-end gradients of a whole classifier against finite differences.
inline CheckResult check_model_gradcheck(ModelKind kind, const OracleSuiteOptions& opts) {
    CheckResult res{"model_gradcheck_" + to_string(kind), false, 0.0, opts.gradcheck_tol,
                    false, ""};
    for (int s = 0; s < 3; ++s) {
        Rng rng(derive_seed(opts.seed, 0x6d670000ULL + static_cast<std::uint64_t>(s)));
        ModelSpec ms;
        ms.kind = kind;
        ms.seed = derive_seed(opts.seed, 0xbb00 + static_cast<std::uint64_t>(s));
        if (kind == ModelKind::mlp) {
            ms.input_dim = 6;
            ms.hidden = {5};
            ms.classes = 3;
            ms.activation = Activation::gelu;
        } else {
            ms.tokens = 3;
            ms.input_dim = 12;  // 3 tokens x 4 dims
            ms.ffn_dim = 6;
            ms.classes = 3;
            ms.activation = Activation::gelu;
        }
        Model model = Model::build(ms);
        model.set_trainable(true);
        auto x = randn(4, ms.input_dim, rng, 1.0);
        std::vector<int> labels(4);
        for (auto& y : labels) y = static_cast<int>(rng.below(ms.classes));

        model.zero_grad();
        Tape tape;
        auto loss = model.loss(tape, x, labels);
        tape.backward(loss);

        auto f = [&]() {
            Tape t2;
            return model.loss(t2, x, labels)->scalar();
        };
        for (const auto& p : model.trainable_params()) {
            p->ensure_grad();
            const auto analytic = p->grad;
            auto fd = finite_diff_grad(f, *p);
            for (std::size_t i = 0; i < fd.size(); ++i) {
                const double e = oracle_detail::rel_err(analytic[i], fd[i]);
                if (e > res.measured) {
                    res.measured = e;
                    res.detail = "seed " + std::to_string(s);
                }
            }
        }
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

inline std::vector<CheckResult> oracle_suite(const OracleSuiteOptions& opts) {
    std::vector<CheckResult> out;
    out.push_back(check_gradcheck(opts));
    out.push_back(check_sgd_identity(opts));
    out.push_back(check_chain_rule(opts));
    out.push_back(check_merge_equivalence(opts));
    out.push_back(check_loo_vs_taylor(opts));
    return out;
}

} // namespace lplab
