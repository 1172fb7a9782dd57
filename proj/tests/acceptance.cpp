// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Tolerances are pinned in code next to each check.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lplab/checkpoint.hpp"
#include "lplab/harness.hpp"
#include "lplab/oracle_suite.hpp"
#include "lplab/pruner.hpp"

using namespace lplab;

namespace {

struct Line {
    bool pass = false;
    std::string detail;
};

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

Model train_base(const Dataset& data, ModelSpec ms, double lr, long epochs,
                 std::size_t batch, std::uint64_t seed) {
    ms.seed = seed;
    Model model = Model::build(ms);
    model.set_trainable(true);
    auto params = model.trainable_params();
    Rng rng(derive_seed(seed, 0x62617365ULL));
    auto order = data.train_idx;
    for (long e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += batch) {
            const auto end = std::min(order.size(), at + batch);
            std::vector<std::size_t> idx(order.begin() + at, order.begin() + end);
            auto bx = data.gather_features(idx);
            auto by = data.gather_labels(idx);
            model.zero_grad();
            Tape tape;
            auto loss = model.loss(tape, bx, by);
            tape.backward(loss);
            sgd_step(params, lr);
        }
    }
    return model;
}

struct BlobsBench {
    Dataset data;
    Model base;
    harness_detail::PruneSettings settings;
};

// the blobs task used by the criterion-ordering and ablation checks:
// hard enough that random pruning visibly hurts at 50% sparsity
BlobsBench blobs_bench() {
    DatasetParams dp;
    dp.kind = DatasetKind::blobs;
    dp.n = 1024;
    dp.d = 16;
    dp.classes = 8;
    dp.seed = 11;
    dp.noise = 2.4;
    dp.radius = 2.0;
    BlobsBench b{gen_dataset(dp), Model(), {}};

    ModelSpec ms;
    ms.kind = ModelKind::mlp;
    ms.input_dim = dp.d;
    ms.classes = dp.classes;
    ms.hidden = {12};
    ms.activation = Activation::relu;
    b.base = train_base(b.data, ms, 0.05, 15, 32, 11);

    b.settings.mode = AdapterMode::parallel;
    b.settings.rank = 2;
    b.settings.subset = PrunableSet::all;
    b.settings.rank_check = false;
    b.settings.pcfg.lambda = 0.9;
    b.settings.pcfg.lr = 0.05;
    b.settings.pcfg.batch_size = 32;
    const long ipe = static_cast<long>((b.data.train_idx.size() + 31) / 32);
    b.settings.pcfg.total_iterations = 12 * ipe;
    return b;
}

std::vector<std::uint64_t> arm_seeds(std::uint64_t master, int n) {
    std::vector<std::uint64_t> out;
    for (int i = 0; i < n; ++i) out.push_back(derive_seed(master, i));
    return out;
}

Line from_check(const CheckResult& r) {
    Line l;
    l.pass = r.pass;
    l.detail = "measured=" + fmt(r.measured) + (r.at_least ? " >= " : " <= ") +
               fmt(r.threshold) + (r.detail.empty() ? "" : " (" + r.detail + ")");
    return l;
}

// 1. per-op gradcheck, 100 seeds
Line criterion_gradcheck() {
    OracleSuiteOptions opts;
    opts.gradcheck_seeds = 100;
    auto r = check_gradcheck(opts);
    auto m = check_model_gradcheck(ModelKind::mlp, opts);
    auto t = check_model_gradcheck(ModelKind::transformer, opts);
    Line l = from_check(r);
    l.pass = r.pass && m.pass && t.pass;
    l.detail += ", mlp=" + fmt(m.measured) + ", transformer=" + fmt(t.measured);
    return l;
}

// 2. the product change of one SGD step equals the scaled reconstruction
Line criterion_sgd_identity() {
    OracleSuiteOptions opts;
    opts.sgd_instances = 50;
    return from_check(check_sgd_identity(opts));
}

// 3. masked adapter forward vs merged dense forward
Line criterion_merge_equivalence() {
    OracleSuiteOptions opts;
    opts.merge_cases = 100;
    return from_check(check_merge_equivalence(opts));
}

// 4. Taylor scores vs brute-force leave-one-out on a 16x8 layer
Line criterion_taylor_vs_exact() {
    OracleSuiteOptions opts;
    return from_check(check_loo_vs_taylor(opts));
}

// 5. reconstructed-gradient criterion vs exact-gradient criterion on the
// low-rank teacher task: accuracy gap <= 2 points, overlap reported.
// The base is pre-trained on the unshifted teacher; the pruning runs then
// adapt to the low-rank-shifted teacher, so the adapters have a real
// update to learn while pruning.
Line criterion_lora_vs_exact() {
    DatasetParams dp;
    dp.kind = DatasetKind::lowrank_teacher;
    dp.n = 1024;
    dp.d = 16;
    dp.classes = 4;
    dp.seed = 29;
    dp.teacher_rank = 2;
    dp.teacher_delta_scale = 1.0;
    auto data = gen_dataset(dp);

    DatasetParams dp0 = dp;
    dp0.teacher_delta_scale = 0.0;  // pre-training task: same teacher, no delta
    auto pretrain_data = gen_dataset(dp0);

    ModelSpec ms;
    ms.kind = ModelKind::mlp;
    ms.input_dim = dp.d;
    ms.classes = dp.classes;
    ms.hidden = {32};
    ms.activation = Activation::relu;
    Model base = train_base(pretrain_data, ms, 0.05, 24, 32, 29);

    harness_detail::PruneSettings settings;
    settings.mode = AdapterMode::parallel;
    settings.rank = 4;
    settings.subset = PrunableSet::ffn;
    settings.rank_check = true;
    settings.pcfg.lambda = 0.9;
    settings.pcfg.lr = 0.10;
    settings.pcfg.batch_size = 32;
    settings.pcfg.prune_interval = 1;
    const long ipe = static_cast<long>((data.train_idx.size() + 31) / 32);
    settings.pcfg.total_iterations = 20 * ipe;

    const auto approx_arm = harness_detail::arm_from("lora_par");
    const auto exact_arm = harness_detail::arm_from("taylor_exact");

    Line l;
    l.pass = true;
    for (double s : {0.3, 0.5}) {
        std::vector<double> acc_approx, acc_exact, overlaps;
        for (auto seed : arm_seeds(401, 5)) {
            auto a = run_prune_cell(base, data, settings, approx_arm, s, seed);
            auto b = run_prune_cell(base, data, settings, exact_arm, s, seed);
            acc_approx.push_back(a.test_accuracy);
            acc_exact.push_back(b.test_accuracy);
            if (a.report.summary.rank_vs_exact) {
                overlaps.push_back(a.report.summary.rank_vs_exact->topk_overlap.at(0.5));
            }
        }
        const double gap = std::abs(mean_of(acc_approx) - mean_of(acc_exact));
        l.pass = l.pass && gap <= 0.02;
        l.detail += "s=" + fmt(s) + ": approx=" + fmt(mean_of(acc_approx)) +
                    " exact=" + fmt(mean_of(acc_exact)) + " gap=" + fmt(gap) +
                    " top50_overlap=" + fmt(mean_of(overlaps)) + "; ";
    }
    l.detail += "(gap tolerance 0.02)";
    return l;
}

// 6. the reconstructed-gradient criterion beats random pruning by more
// than the random arm's seed noise
Line criterion_ordering() {
    auto bench = blobs_bench();
    const auto lora_arm = harness_detail::arm_from("lora_par");
    const auto random_arm = harness_detail::arm_from("random");

    std::vector<double> acc_lora, acc_random;
    for (auto seed : arm_seeds(601, 5)) {
        acc_lora.push_back(
            run_prune_cell(bench.base, bench.data, bench.settings, lora_arm, 0.5, seed)
                .test_accuracy);
        acc_random.push_back(
            run_prune_cell(bench.base, bench.data, bench.settings, random_arm, 0.5, seed)
                .test_accuracy);
    }
    const double gap = mean_of(acc_lora) - mean_of(acc_random);
    const double noise = stddev_of(acc_random);
    Line l;
    l.pass = mean_of(acc_lora) > mean_of(acc_random) && gap > noise;
    l.detail = "lora=" + fmt(mean_of(acc_lora)) + " random=" + fmt(mean_of(acc_random)) +
               " gap=" + fmt(gap) + " random_std=" + fmt(noise);
    return l;
}

// 7. cubic schedule tracking, monotone masks, window compliance, exact
// terminal counts
Line criterion_schedule_properties() {
    DatasetParams dp;
    dp.kind = DatasetKind::blobs;
    dp.n = 512;
    dp.d = 8;
    dp.classes = 3;
    dp.seed = 7;
    dp.noise = 1.0;
    dp.radius = 2.5;
    auto data = gen_dataset(dp);

    ModelSpec ms;
    ms.kind = ModelKind::mlp;
    ms.input_dim = 8;
    ms.classes = 3;
    ms.hidden = {8};
    Model model = train_base(data, ms, 0.05, 4, 32, 7);
    model.attach_lora(2, AdapterMode::parallel, PrunableSet::all, 8);

    PruneConfig cfg;
    cfg.target_sparsity = 0.5;
    cfg.total_iterations = 100;
    cfg.prune_interval = 3;
    cfg.lr = 0.05;
    cfg.batch_size = 32;
    cfg.seed = 9;

    std::vector<std::vector<std::uint8_t>> mask_history;
    RunHooks hooks;
    hooks.after_importance = [&](long, Model& m, ImportanceState&, const TensorPtr&,
                                 const std::vector<int>&) {
        std::vector<std::uint8_t> flat;
        for (auto i : m.lora_layers()) {
            const auto& mask = m.layers()[i].mask();
            flat.insert(flat.end(), mask.begin(), mask.end());
        }
        mask_history.push_back(std::move(flat));
    };
    auto rr = run(model, data, cfg, &hooks);
    const Schedule sched = Schedule::from(cfg);

    std::vector<std::size_t> sizes;
    for (auto i : model.lora_layers()) sizes.push_back(model.layers()[i].mask().size());

    bool track_ok = true, window_ok = true, monotone_ok = true, terminal_ok = true;
    double max_quant_gap = 0.0;
    double prev = 0.0;
    for (const auto& row : rr.report.rows) {
        if (row.sparsity < prev) monotone_ok = false;
        if (row.sparsity != prev &&
            (row.iteration < sched.t_start || row.iteration > sched.t_end)) {
            window_ok = false;
        }
        prev = row.sparsity;
        const bool prune_iter = row.iteration >= sched.t_start &&
                                row.iteration <= sched.t_end &&
                                ((row.iteration - sched.t_start) % 3 == 0 ||
                                 row.iteration == sched.t_end);
        if (prune_iter) {
            const double target = sched.target_at(row.iteration);
            std::size_t want = 0, total = 0;
            for (auto n : sizes) {
                want += static_cast<std::size_t>(target * static_cast<double>(n));
                total += n;
            }
            const double realized = static_cast<double>(want) / static_cast<double>(total);
            max_quant_gap = std::max(max_quant_gap, std::abs(row.sparsity - realized));
            if (row.sparsity != realized) track_ok = false;
            if (std::abs(realized - target) > 1.0 / static_cast<double>(*std::min_element(
                                                          sizes.begin(), sizes.end()))) {
                track_ok = false;  // floor quantization must stay within one element
            }
        }
    }
    for (std::size_t t = 1; t < mask_history.size(); ++t) {
        for (std::size_t i = 0; i < mask_history[t].size(); ++i) {
            if (mask_history[t - 1][i] == 0 && mask_history[t][i] == 1) monotone_ok = false;
        }
    }
    for (auto i : model.lora_layers()) {
        const auto& l = model.layers()[i];
        if (l.mask_zeros() !=
            static_cast<std::size_t>(0.5 * static_cast<double>(l.mask().size()))) {
            terminal_ok = false;
        }
    }

    Line l;
    l.pass = track_ok && window_ok && monotone_ok && terminal_ok;
    l.detail = std::string("target_tracking=") + (track_ok ? "ok" : "BROKEN") +
               " window=" + (window_ok ? "ok" : "BROKEN") +
               " monotone=" + (monotone_ok ? "ok" : "BROKEN") +
               " terminal=" + (terminal_ok ? "ok" : "BROKEN") +
               " max_step_gap=" + fmt(max_quant_gap);
    return l;
}

// 8. progressive schedule vs one-shot pruning at the same final sparsity
Line criterion_progressive_vs_oneshot() {
    auto bench = blobs_bench();
    const auto arm = harness_detail::arm_from("lora_par");

    auto oneshot = bench.settings;
    oneshot.one_shot = true;

    std::vector<double> acc_prog, acc_once;
    for (auto seed : arm_seeds(801, 5)) {
        acc_prog.push_back(
            run_prune_cell(bench.base, bench.data, bench.settings, arm, 0.5, seed)
                .test_accuracy);
        acc_once.push_back(
            run_prune_cell(bench.base, bench.data, oneshot, arm, 0.5, seed).test_accuracy);
    }
    Line l;
    l.pass = mean_of(acc_prog) >= mean_of(acc_once);
    l.detail = "progressive=" + fmt(mean_of(acc_prog)) +
               " one_shot=" + fmt(mean_of(acc_once));
    return l;
}

// 9. bit-identical reruns and lossless checkpoints
Line criterion_determinism() {
    DatasetParams dp;
    dp.kind = DatasetKind::blobs;
    dp.n = 512;
    dp.d = 8;
    dp.classes = 3;
    dp.seed = 5;
    dp.noise = 1.0;
    dp.radius = 2.5;
    auto data = gen_dataset(dp);

    ModelSpec ms;
    ms.kind = ModelKind::mlp;
    ms.input_dim = 8;
    ms.classes = 3;
    ms.hidden = {8};
    Model base = train_base(data, ms, 0.05, 6, 32, 5);

    harness_detail::PruneSettings settings;
    settings.rank = 2;
    settings.pcfg.lr = 0.05;
    settings.pcfg.batch_size = 32;
    settings.pcfg.total_iterations = 60;
    const auto arm = harness_detail::arm_from("lora_par");

    auto a = run_prune_cell(base, data, settings, arm, 0.5, 12345);
    auto b = run_prune_cell(base, data, settings, arm, 0.5, 12345);

    bool masks_ok = true, rows_ok = true;
    for (auto i : a.model.lora_layers()) {
        if (a.model.layers()[i].mask() != b.model.layers()[i].mask()) masks_ok = false;
    }
    if (a.report.rows.size() != b.report.rows.size()) {
        rows_ok = false;
    } else {
        for (std::size_t i = 0; i < a.report.rows.size(); ++i) {
            const auto &ra = a.report.rows[i], &rb = b.report.rows[i];
            if (std::memcmp(&ra.loss, &rb.loss, sizeof(double)) != 0 ||
                ra.sparsity != rb.sparsity) {
                rows_ok = false;
            }
        }
    }
    if (a.test_accuracy != b.test_accuracy) rows_ok = false;

    // lossless checkpoint round trip, twice
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "lplab_acceptance";
    fs::create_directories(dir);
    const auto p1 = (dir / "a.lplab").string();
    const auto p2 = (dir / "b.lplab").string();
    checkpoint_save(p1, a.model);
    auto loaded = checkpoint_load(p1);
    checkpoint_save(p2, loaded);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    const std::string c1((std::istreambuf_iterator<char>(f1)), {});
    const std::string c2((std::istreambuf_iterator<char>(f2)), {});
    const bool ckpt_ok = !c1.empty() && c1 == c2;
    fs::remove_all(dir);

    Line l;
    l.pass = masks_ok && rows_ok && ckpt_ok;
    l.detail = std::string("masks=") + (masks_ok ? "identical" : "DIFFER") +
               " rows=" + (rows_ok ? "identical" : "DIFFER") +
               " checkpoint_roundtrip=" + (ckpt_ok ? "lossless" : "LOSSY");
    return l;
}

} // namespace

int main() {
    struct Entry {
        const char* name;
        std::function<Line()> fn;
    };
    const std::vector<Entry> criteria = {
        {"gradcheck", criterion_gradcheck},
        {"sgd_step_identity", criterion_sgd_identity},
        {"merge_equivalence", criterion_merge_equivalence},
        {"taylor_vs_leave_one_out", criterion_taylor_vs_exact},
        {"lora_vs_exact_gradient", criterion_lora_vs_exact},
        {"criterion_ordering", criterion_ordering},
        {"schedule_and_masks", criterion_schedule_properties},
        {"progressive_vs_one_shot", criterion_progressive_vs_oneshot},
        {"determinism_and_roundtrip", criterion_determinism},
    };

    bool all_pass = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto start = std::chrono::steady_clock::now();
        Line line;
        try {
            line = criteria[i].fn();
        } catch (const std::exception& e) {
            line.pass = false;
            line.detail = std::string("exception: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        all_pass = all_pass && line.pass;
        std::printf("[%s] %zu %-26s %s [%.1fs]\n", line.pass ? "PASS" : "FAIL", i + 1,
                    criteria[i].name, line.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%s\n", all_pass ? "acceptance: all criteria passed"
                                 : "acceptance: FAILURES present");
    return all_pass ? 0 : 1;
}
