#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "helpers.hpp"
#include "lplab/dataset.hpp"
#include "lplab/errors.hpp"

using namespace lplab;

namespace {

DatasetParams blob_params() {
    DatasetParams p;
    p.kind = DatasetKind::blobs;
    p.n = 400;
    p.d = 8;
    p.classes = 4;
    p.seed = 5;
    p.noise = 0.4;
    p.radius = 3.0;
    return p;
}

} // namespace

TEST_CASE("generation is deterministic per seed") {
    for (auto kind :
         {DatasetKind::blobs, DatasetKind::spirals, DatasetKind::lowrank_teacher}) {
        auto p = blob_params();
        p.kind = kind;
        auto a = gen_dataset(p);
        auto b = gen_dataset(p);
        CHECK(a.features->data == b.features->data);
        CHECK(a.labels == b.labels);
        CHECK(a.train_idx == b.train_idx);
        CHECK(a.test_idx == b.test_idx);
        p.seed += 1;
        auto c = gen_dataset(p);
        CHECK(a.features->data != c.features->data);
    }
}

TEST_CASE("splits are disjoint and exhaustive") {
    auto p = blob_params();
    p.kind = DatasetKind::spirals;
    auto ds = gen_dataset(p);
    std::set<std::size_t> seen;
    for (auto i : ds.train_idx) seen.insert(i);
    for (auto i : ds.val_idx) seen.insert(i);
    for (auto i : ds.test_idx) seen.insert(i);
    CHECK(seen.size() == p.n);
    CHECK(ds.train_idx.size() + ds.val_idx.size() + ds.test_idx.size() == p.n);
    CHECK(*seen.rbegin() == p.n - 1);
}

TEST_CASE("well-separated blobs pass a nearest-mean probe") {
    auto ds = gen_dataset(blob_params());
    // closed-form probe: classify by the nearest class mean estimated on
    // the training split
    const std::size_t d = ds.dim();
    std::vector<std::vector<double>> means(4, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(4, 0);
    for (auto i : ds.train_idx) {
        const int y = ds.labels[i];
        ++counts[y];
        for (std::size_t j = 0; j < d; ++j) means[y][j] += ds.features->at(i, j);
    }
    for (int c = 0; c < 4; ++c)
        for (std::size_t j = 0; j < d; ++j) means[c][j] /= static_cast<double>(counts[c]);

    std::size_t hits = 0;
    for (auto i : ds.test_idx) {
        double best = 1e300;
        int arg = -1;
        for (int c = 0; c < 4; ++c) {
            double dist = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double delta = ds.features->at(i, j) - means[c][j];
                dist += delta * delta;
            }
            if (dist < best) {
                best = dist;
                arg = c;
            }
        }
        if (arg == ds.labels[i]) ++hits;
    }
    const double acc = static_cast<double>(hits) / ds.test_idx.size();
    CHECK(acc > 0.95);
}

TEST_CASE("spirals occupy the first two feature dimensions") {
    auto p = blob_params();
    p.kind = DatasetKind::spirals;
    p.classes = 2;
    p.noise = 0.2;
    auto ds = gen_dataset(p);
    double lead = 0.0, rest = 0.0;
    for (std::size_t i = 0; i < p.n; ++i) {
        lead += std::abs(ds.features->at(i, 0)) + std::abs(ds.features->at(i, 1));
        for (std::size_t j = 2; j < p.d; ++j) rest += std::abs(ds.features->at(i, j));
    }
    CHECK(lead / (2 * p.n) > 10.0 * rest / ((p.d - 2) * p.n));
    int c0 = 0;
    for (int y : ds.labels) c0 += (y == 0);
    CHECK(c0 == static_cast<int>(p.n) / 2);  // balanced arms
}

TEST_CASE("lowrank-teacher labels are linearly recoverable") {
    DatasetParams p;
    p.kind = DatasetKind::lowrank_teacher;
    p.n = 600;
    p.d = 16;
    p.classes = 4;
    p.seed = 13;
    p.teacher_rank = 2;
    p.teacher_delta_scale = 0.5;
    auto ds = gen_dataset(p);

    // all classes present and reasonably balanced
    std::vector<int> counts(4, 0);
    for (int y : ds.labels) ++counts[y];
    for (int c = 0; c < 4; ++c) CHECK(counts[c] > 40);

    // a least-squares-free sanity probe: class-mean directions separate
    // teacher argmax labels far better than chance
    std::vector<std::vector<double>> means(4, std::vector<double>(p.d, 0.0));
    for (auto i : ds.train_idx) {
        for (std::size_t j = 0; j < p.d; ++j)
            means[ds.labels[i]][j] += ds.features->at(i, j);
    }
    std::size_t hits = 0;
    for (auto i : ds.test_idx) {
        double best = -1e300;
        int arg = -1;
        for (int c = 0; c < 4; ++c) {
            double dot = 0.0;
            for (std::size_t j = 0; j < p.d; ++j) dot += means[c][j] * ds.features->at(i, j);
            if (dot > best) {
                best = dot;
                arg = c;
            }
        }
        hits += (arg == ds.labels[i]);
    }
    CHECK(static_cast<double>(hits) / ds.test_idx.size() > 0.5);  // chance is 0.25
}

TEST_CASE("parameter validation") {
    auto p = blob_params();
    SECTION("empty set") {
        p.n = 0;
        CHECK_THROWS_AS(gen_dataset(p), ConfigError);
    }
    SECTION("one class") {
        p.classes = 1;
        CHECK_THROWS_AS(gen_dataset(p), ConfigError);
    }
    SECTION("spirals need two dims") {
        p.kind = DatasetKind::spirals;
        p.d = 1;
        CHECK_THROWS_AS(gen_dataset(p), ConfigError);
    }
    SECTION("teacher rank bound") {
        p.kind = DatasetKind::lowrank_teacher;
        p.teacher_rank = 4;  // min(d, classes) = 4, must be strictly below
        CHECK_THROWS_AS(gen_dataset(p), ConfigError);
    }
    SECTION("unknown kind string") {
        CHECK_THROWS_AS(dataset_kind_from("moons"), ConfigError);
    }
    SECTION("split fractions") {
        p.train_frac = 0.9;
        p.val_frac = 0.2;
        CHECK_THROWS_AS(gen_dataset(p), ConfigError);
    }
}
