#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "lplab/checkpoint.hpp"
#include "lplab/config.hpp"
#include "lplab/criteria.hpp"
#include "lplab/dataset.hpp"
#include "lplab/errors.hpp"
#include "lplab/model.hpp"
#include "lplab/oracle.hpp"
#include "lplab/oracle_suite.hpp"
#include "lplab/pruner.hpp"
#include "lplab/report.hpp"

namespace lplab {

struct HarnessOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed_override;
    int jobs = 1;
    std::string out_dir = ".";
};

namespace harness_detail {

using nlohmann::json;

inline DatasetParams dataset_params_from(const Config& cfg) {
    DatasetParams p;
    p.kind = dataset_kind_from(cfg.get_str("dataset.kind"));
    p.n = static_cast<std::size_t>(cfg.get_long("dataset.n"));
    p.d = static_cast<std::size_t>(cfg.get_long("dataset.d"));
    p.classes = static_cast<std::size_t>(cfg.get_long("dataset.classes", 2));
    p.seed = cfg.get_u64("dataset.seed", 0);
    p.noise = cfg.get_double("dataset.noise", p.noise);
    p.radius = cfg.get_double("dataset.radius", p.radius);
    p.teacher_rank = static_cast<int>(cfg.get_long("dataset.teacher_rank", p.teacher_rank));
    p.teacher_delta_scale =
        cfg.get_double("dataset.teacher_delta_scale", p.teacher_delta_scale);
    p.train_frac = cfg.get_double("dataset.train_frac", p.train_frac);
    p.val_frac = cfg.get_double("dataset.val_frac", p.val_frac);
    p.validate();
    return p;
}

inline ModelSpec model_spec_from(const Config& cfg, const DatasetParams& dp,
                                 std::uint64_t seed) {
    ModelSpec ms;
    ms.kind = model_kind_from(cfg.get_str("model.kind", "mlp"));
    ms.input_dim = dp.d;
    ms.classes = dp.classes;
    ms.activation = activation_from(cfg.get_str("model.activation", "relu"));
    ms.seed = seed;
    if (cfg.has("model.hidden") && !cfg.get_str("model.hidden").empty()) {
        for (long v : cfg.get_long_list("model.hidden")) {
            if (v < 1) throw ConfigError("model.hidden entries must be positive");
            ms.hidden.push_back(static_cast<std::size_t>(v));
        }
    }
    ms.tokens = static_cast<std::size_t>(cfg.get_long("model.tokens", 4));
    ms.ffn_dim = static_cast<std::size_t>(cfg.get_long("model.ffn_dim", 16));
    ms.validate();
    return ms;
}

// One comparison arm: a criterion plus how the adapters behave during the
// run. Arm names follow the harness conventions, e.g. lora_par fine-tunes
// a parallel adapter and scores with the reconstructed product gradient.
struct Arm {
    std::string name;
    CriterionId criterion = CriterionId::lora;
    std::optional<AdapterMode> forced_mode;
    bool train_adapters = true;
};

inline Arm arm_from(const std::string& name) {
    Arm a;
    a.name = name;
    if (name == "lora_par") {
        a.criterion = CriterionId::lora;
        a.forced_mode = AdapterMode::parallel;
    } else if (name == "lora_seq") {
        a.criterion = CriterionId::lora;
        a.forced_mode = AdapterMode::sequential;
    } else if (name == "magnitude") {
        a.criterion = CriterionId::magnitude;
        a.train_adapters = false;  // prune the frozen model, no tuning
    } else if (name == "magnitude_lora") {
        a.criterion = CriterionId::magnitude;
    } else if (name == "movement") {
        a.criterion = CriterionId::movement;
    } else if (name == "random") {
        a.criterion = CriterionId::random;
    } else if (name == "taylor_exact") {
        a.criterion = CriterionId::taylor_exact;
    } else {
        throw ConfigError("unknown comparison arm '" + name + "'");
    }
    return a;
}

struct PruneSettings {
    PruneConfig pcfg;
    AdapterMode mode = AdapterMode::parallel;
    int rank = 4;
    PrunableSet subset = PrunableSet::all;
    long epochs = 10;
    bool one_shot = false;
    bool rank_check = false;
};

inline PruneSettings prune_settings_from(const Config& cfg, const Dataset& data) {
    PruneSettings s;
    s.mode = adapter_mode_from(cfg.get_str("prune.mode", "parallel"));
    s.rank = static_cast<int>(cfg.get_long("prune.rank", 4));
    s.subset = prunable_set_from(cfg.get_str("prune.subset", "all"));
    s.epochs = cfg.get_long("prune.epochs", 10);
    if (s.epochs < 1) throw ConfigError("prune.epochs must be at least 1");
    const std::string timing = cfg.get_str("prune.timing", "progressive");
    if (timing == "one-shot") {
        s.one_shot = true;
    } else if (timing != "progressive") {
        throw ConfigError("unknown prune.timing '" + timing + "'");
    }
    s.rank_check = cfg.get_bool("prune.rank_check", false);

    PruneConfig& p = s.pcfg;
    p.target_sparsity = cfg.get_double("prune.target_sparsity", 0.5);
    p.lambda = cfg.get_double("prune.lambda", 0.9);
    p.prune_start_frac = cfg.get_double("prune.prune_start_frac", 0.10);
    p.prune_end_frac = cfg.get_double("prune.prune_end_frac", 0.70);
    p.prune_interval = cfg.get_long("prune.prune_interval", 0);
    p.criterion = criterion_from(cfg.get_str("prune.criterion", "lora"));
    p.ema_mode = ema_mode_from(cfg.get_str("prune.ema_mode", "recursive"));
    p.seq_variant = seq_variant_from(cfg.get_str("prune.seq_variant", "chain"));
    p.scope = prune_scope_from(cfg.get_str("prune.scope", "per-layer"));
    p.seed = cfg.get_u64("prune.seed", 0);
    p.lr = cfg.get_double("prune.lr", 1e-2);
    p.batch_size = static_cast<std::size_t>(cfg.get_long("prune.batch_size", 32));
    p.train_adapters = cfg.get_bool("prune.train_adapters", true);

    const long ipe = static_cast<long>(
        (data.train_idx.size() + p.batch_size - 1) / p.batch_size);
    p.total_iterations = s.epochs * std::max(1L, ipe);
    p.validate();
    return s;
}

struct CellOutcome {
    std::string arm_name;
    std::string adapter_mode;
    double sparsity_target = 0.0;
    std::uint64_t seed = 0;
    RunReport report;
    Model model;  // the pruned model the metrics describe
    double test_accuracy = 0.0;
    double val_accuracy = 0.0;
    double wall_time_s = 0.0;
};

// A full prune-and-evaluate cycle on a private copy of the base model.
inline CellOutcome run_prune_cell(const Model& base, const Dataset& data,
                                  PruneSettings settings, const Arm& arm,
                                  double sparsity, std::uint64_t seed) {
    const auto start = std::chrono::steady_clock::now();
    CellOutcome out;
    out.arm_name = arm.name;
    out.sparsity_target = sparsity;
    out.seed = seed;

    PruneConfig pcfg = settings.pcfg;
    pcfg.criterion = arm.criterion;
    pcfg.target_sparsity = sparsity;
    pcfg.seed = seed;
    pcfg.train_adapters = settings.pcfg.train_adapters && arm.train_adapters;
    const AdapterMode mode = arm.forced_mode.value_or(settings.mode);
    out.adapter_mode = to_string(mode);

    Model model = base.clone_detached();
    model.attach_lora(settings.rank, mode, settings.subset, seed);

    // probe comparing the reconstructed-gradient ranking against the exact
    // composite-gradient ranking on the same batch, at the window opening
    std::optional<RankStats> probe_result;
    RunHooks hooks;
    const Schedule sched = Schedule::from(pcfg);
    const long probe_t = std::max(1L, sched.t_start);
    if (settings.rank_check && arm.criterion == CriterionId::lora) {
        hooks.after_importance = [&](long t, Model& m, ImportanceState& st,
                                     const TensorPtr& bx, const std::vector<int>& by) {
            if (t != probe_t || probe_result.has_value()) return;
            auto exact = exact_composite_grad(m, bx, by);
            std::vector<double> approx_scores, exact_scores;
            for (auto& sl : st.layers) {
                const auto& layer = m.layers()[sl.layer_index];
                auto taylor = importance_taylor_exact(*layer.composite(),
                                                      *exact.grad_for(sl.layer_index));
                approx_scores.insert(approx_scores.end(), sl.inst.begin(), sl.inst.end());
                exact_scores.insert(exact_scores.end(), taylor.begin(), taylor.end());
            }
            probe_result = rank_stats(approx_scores, exact_scores, {0.5});
        };
    }

    if (settings.one_shot) {
        PruneConfig warm = pcfg;
        warm.target_sparsity = 0.0;
        auto rr = run(model, data, warm, &hooks);
        one_shot_prune(model, rr.state, sparsity, pcfg.scope);
        out.report = std::move(rr.report);
        out.report.summary.target_sparsity = sparsity;
        out.report.summary.final_sparsity = model.sparsity();
    } else {
        auto rr = run(model, data, pcfg, &hooks);
        out.report = std::move(rr.report);
    }
    out.report.summary.criterion = arm.name;
    out.report.summary.rank_vs_exact = probe_result;

    auto test_x = data.gather_features(data.test_idx);
    auto test_y = data.gather_labels(data.test_idx);
    out.test_accuracy = evaluate(model, test_x, test_y).accuracy;
    if (!data.val_idx.empty()) {
        auto val_x = data.gather_features(data.val_idx);
        auto val_y = data.gather_labels(data.val_idx);
        out.val_accuracy = evaluate(model, val_x, val_y).accuracy;
    }
    out.report.summary.final_accuracy = out.test_accuracy;
    out.report.summary.final_val_accuracy = out.val_accuracy;
    out.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.report.summary.wall_time_s = out.wall_time_s;
    out.model = std::move(model);
    return out;
}

inline json summary_to_json(const RunSummary& s) {
    json j;
    j["criterion"] = s.criterion;
    j["adapter_mode"] = s.adapter_mode;
    j["seed"] = s.seed;
    j["final_loss"] = s.final_loss;
    j["final_accuracy"] = s.final_accuracy;
    j["final_val_accuracy"] = s.final_val_accuracy;
    j["final_sparsity"] = s.final_sparsity;
    j["target_sparsity"] = s.target_sparsity;
    if (s.rank_vs_exact.has_value()) {
        j["rank_spearman"] = s.rank_vs_exact->spearman;
        json overlaps;
        for (const auto& [frac, ov] : s.rank_vs_exact->topk_overlap) {
            overlaps[fmt_double(frac)] = ov;
        }
        j["rank_topk_overlap"] = overlaps;
    }
    j["wall_time_s"] = s.wall_time_s;
    return j;
}

inline void write_json(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
}

inline std::filesystem::path ensure_out_dir(const HarnessOptions& opts) {
    std::filesystem::path dir(opts.out_dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline Model load_base_model(const Config& cfg, const DatasetParams& dp) {
    const std::string path = cfg.get_str("prune.checkpoint");
    Model model = checkpoint_load(path);
    if (model.spec().input_dim != dp.d || model.spec().classes != dp.classes) {
        throw ConfigError("checkpoint '" + path + "' is " +
                          std::to_string(model.spec().input_dim) + "d/" +
                          std::to_string(model.spec().classes) + "c but the dataset is " +
                          std::to_string(dp.d) + "d/" + std::to_string(dp.classes) + "c");
    }
    return model;
}

} // namespace harness_detail

// Full fine-tuning on a synthetic task; the checkpoint it saves is the
// frozen base weight set for every pruning run.
inline int cmd_train(const HarnessOptions& opts) {
    using namespace harness_detail;
    const auto start = std::chrono::steady_clock::now();
    Config cfg = Config::parse_file(opts.config_path);
    const std::string hash = config_hash(cfg.raw_text());
    auto dir = ensure_out_dir(opts);

    DatasetParams dp = dataset_params_from(cfg);
    Dataset data = gen_dataset(dp);

    const std::uint64_t seed = opts.seed_override.value_or(cfg.get_u64("train.seed", 0));
    ModelSpec ms = model_spec_from(cfg, dp, seed);
    Model model = Model::build(ms);
    model.set_trainable(true);

    const double lr = cfg.get_double("train.lr", 0.05);
    const long epochs = cfg.get_long("train.epochs", 10);
    const std::size_t batch = static_cast<std::size_t>(cfg.get_long("train.batch_size", 32));
    if (epochs < 1 || batch < 1) throw ConfigError("train.epochs and train.batch_size must be positive");

    auto params = model.trainable_params();
    Rng batch_rng(derive_seed(seed, 0x747262ULL));
    auto order = data.train_idx;
    RunReport report;
    long iter = 0;
    for (long e = 0; e < epochs; ++e) {
        batch_rng.shuffle(order);
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
            report.rows.push_back({++iter, loss->scalar(), 0.0, lr});
        }
    }

    auto test_x = data.gather_features(data.test_idx);
    auto test_y = data.gather_labels(data.test_idx);
    auto eval = evaluate(model, test_x, test_y);
    report.summary.criterion = "full_finetune";
    report.summary.adapter_mode = "none";
    report.summary.seed = seed;
    report.summary.final_loss = report.rows.empty() ? 0.0 : report.rows.back().loss;
    report.summary.final_accuracy = eval.accuracy;
    if (!data.val_idx.empty()) {
        auto val_x = data.gather_features(data.val_idx);
        auto val_y = data.gather_labels(data.val_idx);
        report.summary.final_val_accuracy = evaluate(model, val_x, val_y).accuracy;
    }
    report.summary.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    checkpoint_save((dir / "checkpoint.lplab").string(), model);
    write_run_csv((dir / "train.csv").string(), report, hash);
    json j;
    j["format_version"] = kReportFormatVersion;
    j["config_hash"] = hash;
    j["command"] = "train";
    j["summary"] = summary_to_json(report.summary);
    write_json((dir / "train_summary.json").string(), j);

    std::cout << "train: " << data.name << " test_accuracy=" << eval.accuracy
              << " final_loss=" << report.summary.final_loss << "\n";
    return 0;
}

// Load the frozen base, attach adapters, run the progressive pruning loop,
// save the pruned (adapters + masks) and merged checkpoints plus reports.
inline int cmd_prune(const HarnessOptions& opts) {
    using namespace harness_detail;
    Config cfg = Config::parse_file(opts.config_path);
    const std::string hash = config_hash(cfg.raw_text());
    auto dir = ensure_out_dir(opts);

    DatasetParams dp = dataset_params_from(cfg);
    Dataset data = gen_dataset(dp);
    Model base = load_base_model(cfg, dp);

    PruneSettings settings = prune_settings_from(cfg, data);
    if (opts.seed_override) settings.pcfg.seed = *opts.seed_override;

    Arm arm = arm_from(cfg.get_str("prune.arm", "lora_par"));
    if (cfg.has("prune.criterion")) {
        // explicit criterion wins over the arm shorthand
        arm.criterion = criterion_from(cfg.get_str("prune.criterion"));
        arm.name = to_string(arm.criterion);
        arm.forced_mode.reset();
        arm.train_adapters = true;
    }

    auto out = run_prune_cell(base, data, settings, arm, settings.pcfg.target_sparsity,
                              settings.pcfg.seed);

    checkpoint_save((dir / "pruned.lplab").string(), out.model);
    checkpoint_save((dir / "merged.lplab").string(), out.model.merged_copy());
    write_run_csv((dir / "prune.csv").string(), out.report, hash);
    json j;
    j["format_version"] = kReportFormatVersion;
    j["config_hash"] = hash;
    j["command"] = "prune";
    j["summary"] = summary_to_json(out.report.summary);
    write_json((dir / "prune_summary.json").string(), j);

    std::cout << "prune: arm=" << out.arm_name << " sparsity=" << out.report.summary.final_sparsity
              << " test_accuracy=" << out.test_accuracy << "\n";
    return 0;
}

// Criterion x sparsity x seed grid with isolated cells; cells may run in
// parallel, the report order never depends on scheduling.
inline int cmd_compare(const HarnessOptions& opts) {
    using namespace harness_detail;
    Config cfg = Config::parse_file(opts.config_path);
    const std::string hash = config_hash(cfg.raw_text());
    auto dir = ensure_out_dir(opts);

    DatasetParams dp = dataset_params_from(cfg);
    Dataset data = gen_dataset(dp);
    Model base = load_base_model(cfg, dp);
    PruneSettings settings = prune_settings_from(cfg, data);
    settings.rank_check = cfg.get_bool("prune.rank_check", true);

    std::vector<Arm> arms;
    for (const auto& name : cfg.get_list("compare.criteria")) arms.push_back(arm_from(name));
    if (arms.empty()) throw ConfigError("compare.criteria is empty");
    std::vector<double> sparsities = cfg.get_double_list("compare.sparsities");
    if (sparsities.empty()) throw ConfigError("compare.sparsities is empty");
    const long n_seeds = cfg.get_long("compare.seeds", 1);
    if (n_seeds < 1) throw ConfigError("compare.seeds must be at least 1");
    const std::uint64_t master_seed =
        opts.seed_override.value_or(cfg.get_u64("prune.seed", 0));

    struct Cell {
        std::size_t index;
        Arm arm;
        double sparsity;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    std::size_t idx = 0;
    for (const auto& arm : arms) {
        for (double s : sparsities) {
            for (long k = 0; k < n_seeds; ++k) {
                cells.push_back({idx, arm, s, derive_seed(master_seed, idx)});
                ++idx;
            }
        }
    }

    std::vector<CellOutcome> outcomes(cells.size());
    std::atomic<std::size_t> next{0};
    struct CellError {
        std::string message;
        bool is_config = false;
    };
    std::vector<CellError> errors(cells.size());
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            try {
                outcomes[i] = run_prune_cell(base, data, settings, cells[i].arm,
                                             cells[i].sparsity, cells[i].seed);
            } catch (const ConfigError& e) {
                errors[i] = {e.what(), true};
            } catch (const std::exception& e) {
                errors[i] = {e.what(), false};
            }
        }
    };
    const int jobs = std::max(1, std::min<int>(opts.jobs, static_cast<int>(cells.size())));
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (errors[i].message.empty()) continue;
        const std::string what = "compare cell " + std::to_string(i) + " (" +
                                 cells[i].arm.name + "): " + errors[i].message;
        if (errors[i].is_config) throw ConfigError(what);
        throw Error(what);
    }

    json cells_json = json::array();
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        json c = summary_to_json(outcomes[i].report.summary);
        c["cell_index"] = i;
        cells_json.push_back(c);
        char suffix[128];
        std::snprintf(suffix, sizeof(suffix), "compare_cell_%03zu.csv", i);
        write_run_csv((dir / suffix).string(), outcomes[i].report, hash);
    }
    json j;
    j["format_version"] = kReportFormatVersion;
    j["config_hash"] = hash;
    j["command"] = "compare";
    j["cell_count"] = cells.size();
    j["cells"] = cells_json;
    write_json((dir / "compare_summary.json").string(), j);

    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        const auto& o = outcomes[i];
        std::cout << "cell " << i << ": " << o.arm_name << " s=" << o.sparsity_target
                  << " seed=" << o.seed << " test_accuracy=" << o.test_accuracy << "\n";
    }
    return 0;
}

// Accuracy of a saved checkpoint on the configured dataset.
inline int cmd_eval(const HarnessOptions& opts) {
    using namespace harness_detail;
    Config cfg = Config::parse_file(opts.config_path);
    auto dir = ensure_out_dir(opts);

    DatasetParams dp = dataset_params_from(cfg);
    Dataset data = gen_dataset(dp);
    Model model = checkpoint_load(cfg.get_str("eval.checkpoint"));
    if (model.spec().input_dim != dp.d || model.spec().classes != dp.classes) {
        throw ConfigError("eval checkpoint does not match the dataset dimensions");
    }

    auto test_x = data.gather_features(data.test_idx);
    auto test_y = data.gather_labels(data.test_idx);
    auto eval = evaluate(model, test_x, test_y);

    json j;
    j["format_version"] = kReportFormatVersion;
    j["config_hash"] = config_hash(cfg.raw_text());
    j["command"] = "eval";
    j["test_accuracy"] = eval.accuracy;
    j["test_loss"] = eval.mean_loss;
    j["sparsity"] = model.sparsity();
    write_json((dir / "eval_summary.json").string(), j);

    std::cout << "eval: test_accuracy=" << eval.accuracy << " sparsity=" << model.sparsity()
              << "\n";
    return 0;
}

// Ground-truth property suite; exit code 1 when any property fails.
inline int cmd_oracle_check(const HarnessOptions& opts) {
    using namespace harness_detail;
    Config cfg = Config::parse_file(opts.config_path);

    auto model_list = cfg.get_list("oracle.models");
    if (model_list.empty()) throw ConfigError("oracle.models is empty");
    for (const auto& m : model_list) (void)model_kind_from(m);

    OracleSuiteOptions so;
    so.gradcheck_seeds = static_cast<int>(cfg.get_long("oracle.gradcheck_seeds", 100));
    so.seed = cfg.get_u64("oracle.seed", 7);
    if (opts.seed_override) so.seed = *opts.seed_override;
    so.inject_gradient_fault = cfg.get_bool("oracle.inject_gradient_fault", false);

    auto results = oracle_suite(so);
    for (const auto& m : model_list) {
        results.push_back(check_model_gradcheck(model_kind_from(m), so));
    }

    bool all_pass = true;
    for (const auto& r : results) {
        all_pass = all_pass && r.pass;
        std::printf("[%s] %-24s measured=%.3e %s %.3e%s%s\n", r.pass ? "PASS" : "FAIL",
                    r.name.c_str(), r.measured, r.at_least ? ">=" : "<=", r.threshold,
                    r.detail.empty() ? "" : "  ", r.detail.c_str());
    }
    return all_pass ? 0 : 1;
}

} // namespace lplab
