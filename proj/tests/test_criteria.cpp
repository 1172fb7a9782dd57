#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <iostream>

#include "helpers.hpp"
#include "lplab/criteria.hpp"
#include "lplab/errors.hpp"
#include "lplab/oracle.hpp"

using namespace lplab;

namespace {

Tensor grad_view(const TensorPtr& t) {
    Tensor g;
    g.shape = t->shape;
    g.data = t->grad;
    return g;
}

} // namespace

TEST_CASE("product-gradient reconstruction") {
    Rng rng(21);
    SECTION("zero gradients give a zero estimate") {
        auto a = randn(2, 5, rng);
        auto b = randn(4, 2, rng);
        auto ghat = estimate_product_gradient(*a, *b, *zeros(2, 5), *zeros(4, 2));
        for (double v : ghat->data) CHECK(v == 0.0);
    }
    SECTION("rank-1 scalar expansion") {
        // B d x 1, A 1 x k: G^_ij = gb_i a_j + b_i ga_j - gb_i ga_j
        const std::size_t d = 3, k = 4;
        auto a = randn(1, k, rng);
        auto b = randn(d, 1, rng);
        auto ga = randn(1, k, rng);
        auto gb = randn(d, 1, rng);
        auto ghat = estimate_product_gradient(*a, *b, *ga, *gb);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                const double expected = gb->data[i] * a->data[j] +
                                        b->data[i] * ga->data[j] -
                                        gb->data[i] * ga->data[j];
                CHECK(ghat->at(i, j) == Catch::Approx(expected).margin(1e-15));
            }
        }
    }
    SECTION("one-step SGD identity") {
        for (int inst = 0; inst < 10; ++inst) {
            Rng r2(900 + inst);
            const std::size_t d = 4, k = 5, r = 2;
            auto w0 = randn(d, k, r2);
            auto a = randn(r, k, r2, 0.5, true);
            auto b = randn(d, r, r2, 0.5, true);
            auto x = randn(3, d, r2);
            auto coeffs = randn(3, k, r2);

            Tape tape;
            auto loss =
                tape.reduce_sum(tape.hadamard(tape.matmul(x, tape.add(w0, tape.matmul(b, a))),
                                              coeffs));
            tape.backward(loss);

            const double eta = 0.07;
            auto ga = grad_view(a);
            auto gb = grad_view(b);
            for (auto& v : ga.data) v *= eta;
            for (auto& v : gb.data) v *= eta;
            auto estimate = estimate_product_gradient(*a, *b, ga, gb);

            auto before = tensor(d, k);
            detail::matmul_acc(b->data, a->data, before->data, d, r, k);
            sgd_step({a, b}, eta);
            auto after = tensor(d, k);
            detail::matmul_acc(b->data, a->data, after->data, d, r, k);

            for (std::size_t i = 0; i < before->size(); ++i) {
                CHECK(std::abs((before->data[i] - after->data[i]) - estimate->data[i]) <=
                      1e-10);
            }
        }
    }
    SECTION("missing adapter gradients are a usage error") {
        LoraLinear layer("probe", randn(4, 3, rng, 1.0));
        layer.attach_lora(2, AdapterMode::parallel, rng);
        CHECK_THROWS_AS(estimate_product_gradient(layer.adapter()), UsageError);
    }
}

TEST_CASE("parallel importance") {
    Rng rng(22);
    SECTION("direct substitution") {
        // G^_00 = 0.1, (BA)_00 = 0.5, w0_00 = 1.5 -> (0.1 * 2.0)^2 = 0.04
        LoraLinear layer("probe", tensor_of(2, 2, {1.5, 0, 0, 0}));
        layer.attach_lora(1, AdapterMode::parallel, rng);
        layer.adapter_mutable().b->data = {1.0, 0.0};
        layer.adapter_mutable().a->data = {0.5, 0.0};
        auto ghat = tensor_of(2, 2, {0.1, 0, 0, 0});
        auto scores = importance_parallel(layer, *ghat);
        CHECK(scores[0] == Catch::Approx(0.04).margin(1e-15));
        CHECK(scores[1] == 0.0);
    }
    SECTION("zero estimate zeroes every score") {
        LoraLinear layer("probe", randn(3, 4, rng, 1.0));
        layer.attach_lora(2, AdapterMode::parallel, rng);
        auto scores = importance_parallel(layer, *zeros(3, 4));
        for (double v : scores) CHECK(v == 0.0);
    }
    SECTION("mode mismatch is a usage error") {
        LoraLinear layer("probe", randn(3, 3, rng, 1.0));
        layer.attach_lora(1, AdapterMode::sequential, rng);
        CHECK_THROWS_AS(importance_parallel(layer, *zeros(3, 3)), UsageError);
    }
    SECTION("with the exact gradient it reproduces the composite Taylor score") {
        auto model = testutil::tiny_mlp(51);
        model.attach_lora(2, AdapterMode::parallel, PrunableSet::all, 3);
        // move the adapters off the zero init
        Rng r2(4);
        for (auto idx : model.lora_layers()) {
            for (auto& v : model.layers()[idx].adapter_mutable().b->data)
                v = r2.normal(0.0, 0.2);
        }
        auto x = randn(6, 6, r2);
        std::vector<int> labels = {0, 1, 2, 0, 1, 2};
        auto exact = exact_composite_grad(model, x, labels);

        model.zero_grad();
        Tape tape;
        auto loss = model.loss(tape, x, labels);
        tape.backward(loss);

        const auto& layer = model.layers()[0];
        auto from_parallel = importance_parallel(layer, *exact.grad_for(0));
        auto from_taylor = importance_taylor_exact(*layer.composite(), *exact.grad_for(0));
        CHECK(testutil::max_abs_diff(from_parallel, from_taylor) <= 1e-15);

        // reconstructed vs exact ranking, recorded for reference
        auto ghat = estimate_product_gradient(layer.adapter());
        auto approx_scores = importance_parallel(layer, *ghat);
        auto stats = rank_stats(approx_scores, from_taylor, {0.5});
        CHECK(stats.spearman >= -1.0);
        CHECK(stats.spearman <= 1.0);
        std::cout << "parallel estimate vs exact spearman: " << stats.spearman << "\n";
    }
}

TEST_CASE("sequential importance") {
    Rng rng(23);
    SECTION("zero estimate zeroes every score, both variants") {
        LoraLinear layer("probe", randn(4, 4, rng, 1.0));
        layer.attach_lora(2, AdapterMode::sequential, rng);
        for (auto variant : {SeqVariant::chain, SeqVariant::literal}) {
            auto scores = importance_sequential(layer, *zeros(4, 4), variant);
            for (double v : scores) CHECK(v == 0.0);
        }
    }
    SECTION("identity frozen weight collapses chain and literal") {
        LoraLinear layer("probe", identity(4));
        Rng r2(24);
        layer.attach_lora(2, AdapterMode::sequential, r2);
        auto ghat = randn(4, 4, r2);
        auto chain = importance_sequential(layer, *ghat, SeqVariant::chain);
        auto literal = importance_sequential(layer, *ghat, SeqVariant::literal);
        CHECK(testutil::max_abs_diff(chain, literal) <= 1e-15);
    }
    SECTION("literal on a non-square module is a config error") {
        LoraLinear layer("probe", randn(4, 3, rng, 1.0));
        layer.attach_lora(2, AdapterMode::sequential, rng);
        CHECK_THROWS_AS(importance_sequential(layer, *zeros(4, 4), SeqVariant::literal),
                        ConfigError);
        CHECK_NOTHROW(importance_sequential(layer, *zeros(4, 4), SeqVariant::chain));
    }
    SECTION("chain ranking vs exact gradient, recorded") {
        ModelSpec ms;
        ms.kind = ModelKind::mlp;
        ms.input_dim = 6;
        ms.hidden = {6};
        ms.classes = 3;
        ms.seed = 5;
        auto model = Model::build(ms);
        model.attach_lora(2, AdapterMode::sequential, PrunableSet::all, 6);
        Rng r2(7);
        for (auto idx : model.lora_layers()) {
            for (auto& v : model.layers()[idx].adapter_mutable().b->data)
                v = r2.normal(0.0, 0.2);
        }
        auto x = randn(6, 6, r2);
        std::vector<int> labels = {0, 1, 2, 0, 1, 2};
        auto exact = exact_composite_grad(model, x, labels);

        model.zero_grad();
        Tape tape;
        auto loss = model.loss(tape, x, labels);
        tape.backward(loss);

        const auto& layer = model.layers()[0];
        auto ghat = estimate_product_gradient(layer.adapter());
        auto approx_scores = importance_sequential(layer, *ghat, SeqVariant::chain);
        auto exact_scores = importance_taylor_exact(*layer.composite(), *exact.grad_for(0));
        auto stats = rank_stats(approx_scores, exact_scores, {0.5});
        CHECK(stats.spearman >= -1.0);
        CHECK(stats.spearman <= 1.0);
        std::cout << "sequential chain estimate vs exact spearman: " << stats.spearman
                  << "\n";
    }
}

TEST_CASE("exact Taylor importance") {
    SECTION("direct substitution") {
        auto scores = importance_taylor_exact(*tensor_of(1, 1, {2}), *tensor_of(1, 1, {3}));
        CHECK(scores[0] == 36.0);
    }
    SECTION("zero gradient, zero score") {
        Rng rng(25);
        auto w = randn(3, 3, rng);
        auto scores = importance_taylor_exact(*w, *zeros(3, 3));
        for (double v : scores) CHECK(v == 0.0);
    }
    SECTION("two-parameter model ranks like the exact loss change") {
        // squared loss on one sample: L(w) = (w . x - y)^2, w = (0.8, -0.3)
        const double w1 = 0.8, w2 = -0.3, x1 = 1.0, x2 = 2.0, y = 1.5;
        const double pred = w1 * x1 + w2 * x2;
        const double base = (pred - y) * (pred - y);
        auto w = tensor_of(1, 2, {w1, w2});
        auto g = tensor_of(1, 2, {2 * (pred - y) * x1, 2 * (pred - y) * x2});
        auto taylor = importance_taylor_exact(*w, *g);

        const double loo1 = [&] {
            const double p = w2 * x2;
            const double l = (p - y) * (p - y);
            return (base - l) * (base - l);
        }();
        const double loo2 = [&] {
            const double p = w1 * x1;
            const double l = (p - y) * (p - y);
            return (base - l) * (base - l);
        }();
        CHECK((taylor[0] > taylor[1]) == (loo1 > loo2));
    }
}

TEST_CASE("magnitude importance") {
    CHECK(importance_magnitude(*tensor_of(1, 1, {-3}))[0] == 3.0);
    auto z = importance_magnitude(*zeros(2, 2));
    for (double v : z) CHECK(v == 0.0);

    Rng rng(26);
    auto w = randn(4, 5, rng);
    auto scores = importance_magnitude(*w);
    // ranking equals an independent sort by |w|
    std::vector<std::size_t> by_score(scores.size()), by_abs(scores.size());
    std::iota(by_score.begin(), by_score.end(), 0);
    by_abs = by_score;
    std::sort(by_score.begin(), by_score.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] != scores[b] ? scores[a] < scores[b] : a < b;
    });
    std::sort(by_abs.begin(), by_abs.end(), [&](std::size_t a, std::size_t b) {
        const double va = std::abs(w->data[a]), vb = std::abs(w->data[b]);
        return va != vb ? va < vb : a < b;
    });
    CHECK(by_score == by_abs);
}

TEST_CASE("movement accumulator") {
    std::vector<double> acc(1, 0.0);
    importance_movement_update(acc, *tensor_of(1, 1, {1}), *tensor_of(1, 1, {-2}));
    CHECK(acc[0] == 2.0);
    importance_movement_update(acc, *tensor_of(1, 1, {1}), *tensor_of(1, 1, {0}));
    CHECK(acc[0] == 2.0);

    // two-step accumulation equals the sum of the per-step terms
    Rng rng(27);
    auto w1 = randn(2, 3, rng);
    auto g1 = randn(2, 3, rng);
    auto w2 = randn(2, 3, rng);
    auto g2 = randn(2, 3, rng);
    std::vector<double> two(6, 0.0);
    importance_movement_update(two, *w1, *g1);
    importance_movement_update(two, *w2, *g2);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(two[i] == Catch::Approx(-g1->data[i] * w1->data[i] -
                                      g2->data[i] * w2->data[i]).margin(1e-15));
    }
}

TEST_CASE("random importance") {
    auto a = importance_random(Shape{8, 8}, 404);
    auto b = importance_random(Shape{8, 8}, 404);
    CHECK(a == b);
    auto c = importance_random(Shape{8, 8}, 405);
    CHECK(a != c);

    auto big = importance_random(Shape{100, 1000}, 9);
    double mean = 0.0;
    for (double v : big) mean += v;
    mean /= static_cast<double>(big.size());
    CHECK(std::abs(mean - 0.5) <= 0.02);
}

TEST_CASE("ema smoothing") {
    auto state = make_importance_state({0}, {Shape{1, 2}}, 0.9);
    auto& layer = state.layers[0];

    SECTION("lambda zero tracks the instantaneous score") {
        ema_update(layer, {1.0, 2.0}, EmaMode::recursive, 0.0);
        ema_update(layer, {5.0, 7.0}, EmaMode::recursive, 0.0);
        CHECK(layer.smooth == std::vector<double>{5.0, 7.0});
    }
    SECTION("recursive example") {
        ema_update(layer, {1.0, 1.0}, EmaMode::recursive, 0.9);
        ema_update(layer, {2.0, 2.0}, EmaMode::recursive, 0.9);
        CHECK(layer.smooth[0] == Catch::Approx(1.1).margin(1e-15));
    }
    SECTION("constant scores are a fixed point in both modes") {
        for (auto mode : {EmaMode::recursive, EmaMode::literal}) {
            auto st = make_importance_state({0}, {Shape{1, 2}}, 0.7);
            for (int t = 0; t < 5; ++t) ema_update(st.layers[0], {3.0, 3.0}, mode, 0.7);
            CHECK(st.layers[0].smooth == std::vector<double>{3.0, 3.0});
        }
    }
    SECTION("literal mode uses the previous instantaneous score") {
        ema_update(layer, {1.0, 0.0}, EmaMode::literal, 0.9);
        ema_update(layer, {2.0, 0.0}, EmaMode::literal, 0.9);
        ema_update(layer, {3.0, 0.0}, EmaMode::literal, 0.9);
        // 0.9 * 2 + 0.1 * 3, not 0.9 * smooth_prev + 0.1 * 3
        CHECK(layer.smooth[0] == Catch::Approx(2.1).margin(1e-15));
    }
    SECTION("smoothed values stay inside the history envelope") {
        Rng rng(28);
        for (auto mode : {EmaMode::recursive, EmaMode::literal}) {
            auto st = make_importance_state({0}, {Shape{2, 3}}, 0.8);
            std::vector<double> lo(6, 1e300), hi(6, -1e300);
            for (int t = 0; t < 50; ++t) {
                std::vector<double> inst(6);
                for (auto& v : inst) v = rng.uniform(-5.0, 5.0);
                for (std::size_t i = 0; i < 6; ++i) {
                    lo[i] = std::min(lo[i], inst[i]);
                    hi[i] = std::max(hi[i], inst[i]);
                }
                ema_update(st.layers[0], inst, mode, 0.8);
                for (std::size_t i = 0; i < 6; ++i) {
                    CHECK(st.layers[0].smooth[i] >= lo[i] - 1e-12);
                    CHECK(st.layers[0].smooth[i] <= hi[i] + 1e-12);
                }
            }
        }
    }
    SECTION("lambda outside [0,1] is a config error") {
        CHECK_THROWS_AS(ema_update(layer, {0.0, 0.0}, EmaMode::recursive, 1.5), ConfigError);
        CHECK_THROWS_AS(make_importance_state({0}, {Shape{1, 1}}, -0.1), ConfigError);
    }
}

TEST_CASE("squared criteria never go negative") {
    Rng rng(29);
    for (int inst = 0; inst < 20; ++inst) {
        LoraLinear layer("probe", randn(4, 4, rng, 1.0));
        layer.attach_lora(2, inst % 2 ? AdapterMode::sequential : AdapterMode::parallel, rng);
        auto ghat = randn(4, 4, rng);
        auto scores = inst % 2
                          ? importance_sequential(layer, *ghat, SeqVariant::chain)
                          : importance_parallel(layer, *ghat);
        for (double v : scores) CHECK(v >= 0.0);
    }
}
