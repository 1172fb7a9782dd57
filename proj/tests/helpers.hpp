#pragma once

#include <cmath>
#include <vector>

#include "lplab/model.hpp"
#include "lplab/rng.hpp"
#include "lplab/tensor.hpp"

namespace testutil {

using namespace lplab;

// independent triple-loop product, deliberately the dumbest possible form
inline std::vector<double> naive_matmul(const std::vector<double>& a,
                                        const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p)
                out[i * n + j] += a[i * k + p] * b[p * n + j];
    return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline Model tiny_mlp(std::uint64_t seed, std::size_t d = 6, std::size_t h = 5,
                      std::size_t c = 3) {
    ModelSpec ms;
    ms.kind = ModelKind::mlp;
    ms.input_dim = d;
    ms.hidden = {h};
    ms.classes = c;
    ms.activation = Activation::gelu;
    ms.seed = seed;
    return Model::build(ms);
}

inline Model tiny_transformer(std::uint64_t seed) {
    ModelSpec ms;
    ms.kind = ModelKind::transformer;
    ms.tokens = 3;
    ms.input_dim = 12;
    ms.ffn_dim = 6;
    ms.classes = 3;
    ms.activation = Activation::gelu;
    ms.seed = seed;
    return Model::build(ms);
}

} // namespace testutil
