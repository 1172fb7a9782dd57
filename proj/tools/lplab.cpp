// Command-line harness: synthetic-data training, LoRA pruning runs,
// criterion comparison grids, oracle checks, and checkpoint evaluation.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "lplab/errors.hpp"
#include "lplab/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitPropertyFailure = 1;
constexpr int kExitConfigError = 2;

struct SubArgs {
    lplab::HarnessOptions opts;
    std::uint64_t seed_value = 0;
    bool seed_set = false;
};

void add_common(CLI::App* sub, SubArgs& args) {
    sub->add_option("--config", args.opts.config_path, "path to the run config")->required();
    sub->add_option("--seed", args.seed_value, "override the config seed")
        ->each([&args](const std::string&) { args.seed_set = true; });
    sub->add_option("--jobs", args.opts.jobs, "parallel cells for compare")
        ->check(CLI::PositiveNumber);
    sub->add_option("--out", args.opts.out_dir, "output directory");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"LoRA pruning laboratory"};
    app.require_subcommand(1);

    SubArgs train_args, prune_args, compare_args, oracle_args, eval_args;
    auto* train = app.add_subcommand("train", "full fine-tune; produces the base checkpoint");
    add_common(train, train_args);
    auto* prune = app.add_subcommand("prune", "attach adapters and run progressive pruning");
    add_common(prune, prune_args);
    auto* compare = app.add_subcommand("compare", "criterion x sparsity x seed grid");
    add_common(compare, compare_args);
    auto* oracle = app.add_subcommand("oracle-check", "run the ground-truth property suite");
    add_common(oracle, oracle_args);
    auto* eval = app.add_subcommand("eval", "evaluate a saved checkpoint");
    add_common(eval, eval_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfigError;
    }

    auto finish = [](SubArgs& args) {
        if (args.seed_set) args.opts.seed_override = args.seed_value;
        return args.opts;
    };

    try {
        if (train->parsed()) return lplab::cmd_train(finish(train_args));
        if (prune->parsed()) return lplab::cmd_prune(finish(prune_args));
        if (compare->parsed()) return lplab::cmd_compare(finish(compare_args));
        if (oracle->parsed()) return lplab::cmd_oracle_check(finish(oracle_args));
        if (eval->parsed()) return lplab::cmd_eval(finish(eval_args));
    } catch (const lplab::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfigError;
    } catch (const lplab::FormatError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitPropertyFailure;
    }
    return kExitOk;
}
