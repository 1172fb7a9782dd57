#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "lplab/errors.hpp"
#include "lplab/rng.hpp"
#include "lplab/tensor.hpp"

namespace lplab {

enum class DatasetKind { blobs, spirals, lowrank_teacher };

inline std::string to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::blobs: return "blobs";
        case DatasetKind::spirals: return "spirals";
        default: return "lowrank-teacher";
    }
}

inline DatasetKind dataset_kind_from(const std::string& s) {
    if (s == "blobs") return DatasetKind::blobs;
    if (s == "spirals") return DatasetKind::spirals;
    if (s == "lowrank-teacher") return DatasetKind::lowrank_teacher;
    throw ConfigError("unknown dataset kind '" + s + "'");
}

struct DatasetParams {
    DatasetKind kind = DatasetKind::blobs;
    std::size_t n = 512;
    std::size_t d = 8;
    std::size_t classes = 2;
    std::uint64_t seed = 0;
    double noise = 0.6;          // blob scatter / spiral jitter
    double radius = 3.0;         // blob mean radius
    int teacher_rank = 2;        // rank of the teacher's low-rank delta
    double teacher_delta_scale = 0.5;  // ||delta|| / ||base|| for the teacher
    double train_frac = 0.70;
    double val_frac = 0.15;

    void validate() const {
        if (n == 0) throw ConfigError("dataset: n must be positive");
        if (d == 0) throw ConfigError("dataset: d must be positive");
        if (classes < 2) throw ConfigError("dataset: classes must be at least 2");
        if (kind == DatasetKind::spirals && d < 2)
            throw ConfigError("dataset: spirals need d >= 2");
        if (train_frac <= 0.0 || val_frac < 0.0 || train_frac + val_frac >= 1.0)
            throw ConfigError("dataset: split fractions must satisfy 0 < train, 0 <= val, train+val < 1");
        if (kind == DatasetKind::lowrank_teacher) {
            if (teacher_rank < 1 || static_cast<std::size_t>(teacher_rank) >= std::min(d, classes))
                throw ConfigError("dataset: teacher_rank outside [1, min(d, classes))");
        }
    }
};

struct Dataset {
    std::string name;
    TensorPtr features;  // n x d, no grad
    std::vector<int> labels;
    std::vector<std::size_t> train_idx, val_idx, test_idx;
    std::uint64_t seed = 0;

    std::size_t n() const { return labels.size(); }
    std::size_t dim() const { return features->cols(); }
    int num_classes() const {
        int c = 0;
        for (int y : labels) c = std::max(c, y + 1);
        return c;
    }

    TensorPtr gather_features(const std::vector<std::size_t>& idx) const {
        auto out = tensor(idx.size(), dim());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy(features->data.begin() + idx[i] * dim(),
                      features->data.begin() + (idx[i] + 1) * dim(),
                      out->data.begin() + i * dim());
        }
        return out;
    }

    std::vector<int> gather_labels(const std::vector<std::size_t>& idx) const {
        std::vector<int> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
        return out;
    }
};

inline int argmax_row(const Tensor& row) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
        if (row.data[c] > row.data[best]) best = c;
    return static_cast<int>(best);
}

namespace detail {

inline void split_indices(Dataset& ds, const DatasetParams& p, Rng& rng) {
    std::vector<std::size_t> order(p.n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    const std::size_t n_train = static_cast<std::size_t>(p.train_frac * p.n);
    const std::size_t n_val = static_cast<std::size_t>(p.val_frac * p.n);
    ds.train_idx.assign(order.begin(), order.begin() + n_train);
    ds.val_idx.assign(order.begin() + n_train, order.begin() + n_train + n_val);
    ds.test_idx.assign(order.begin() + n_train + n_val, order.end());
}

} // namespace detail

// Deterministic synthetic classification sets. blobs: Gaussian clusters.
// spirals: interleaved arms in the first two dims, noise elsewhere.
// lowrank-teacher: labels from argmax of x * (W_base + B~A~), a teacher
// whose task-specific part is exactly a low-rank delta.
inline Dataset gen_dataset(const DatasetParams& p) {
    p.validate();
    Dataset ds;
    ds.name = to_string(p.kind);
    ds.seed = p.seed;
    ds.features = tensor(p.n, p.d);
    ds.labels.resize(p.n);
    Rng rng(derive_seed(p.seed, 0x64617461ULL));

    switch (p.kind) {
        case DatasetKind::blobs: {
            auto means = tensor(p.classes, p.d);
            for (auto& v : means->data) v = rng.normal(0.0, p.radius);
            for (std::size_t i = 0; i < p.n; ++i) {
                const int y = static_cast<int>(i % p.classes);
                ds.labels[i] = y;
                for (std::size_t j = 0; j < p.d; ++j)
                    ds.features->at(i, j) = means->at(y, j) + rng.normal(0.0, p.noise);
            }
            break;
        }
        case DatasetKind::spirals: {
            constexpr double kTurns = 1.75;
            for (std::size_t i = 0; i < p.n; ++i) {
                const int y = static_cast<int>(i % p.classes);
                ds.labels[i] = y;
                const double t = 0.25 + 0.75 * rng.uniform();
                const double angle = kTurns * 2.0 * M_PI * t +
                                     2.0 * M_PI * y / static_cast<double>(p.classes) +
                                     p.noise * 0.15 * rng.normal();
                const double r = p.radius * t;
                ds.features->at(i, 0) = r * std::cos(angle);
                ds.features->at(i, 1) = r * std::sin(angle);
                for (std::size_t j = 2; j < p.d; ++j)
                    ds.features->at(i, j) = 0.1 * p.noise * rng.normal();
            }
            break;
        }
        case DatasetKind::lowrank_teacher: {
            const std::size_t r = static_cast<std::size_t>(p.teacher_rank);
            auto base = randn(p.d, p.classes, rng, 1.0 / std::sqrt(double(p.d)));
            auto bt = randn(p.d, r, rng, 1.0 / std::sqrt(double(p.d)));
            auto at = randn(r, p.classes, rng, 1.0);
            auto delta = tensor(p.d, p.classes);
            detail::matmul_acc(bt->data, at->data, delta->data, p.d, r, p.classes);
            double nb = 0.0, nd = 0.0;
            for (double v : base->data) nb += v * v;
            for (double v : delta->data) nd += v * v;
            const double gain = p.teacher_delta_scale * std::sqrt(nb / std::max(nd, 1e-30));
            auto teacher = tensor(p.d, p.classes);
            for (std::size_t i = 0; i < teacher->size(); ++i)
                teacher->data[i] = base->data[i] + gain * delta->data[i];
            for (std::size_t i = 0; i < p.n; ++i) {
                for (std::size_t j = 0; j < p.d; ++j)
                    ds.features->at(i, j) = rng.normal();
                auto row = tensor(1, p.classes);
                detail::matmul_acc(
                    std::vector<double>(ds.features->data.begin() + i * p.d,
                                        ds.features->data.begin() + (i + 1) * p.d),
                    teacher->data, row->data, 1, p.d, p.classes);
                ds.labels[i] = argmax_row(*row);
            }
            break;
        }
    }
    detail::split_indices(ds, p, rng);
    return ds;
}

} // namespace lplab
