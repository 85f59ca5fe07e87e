// Command-line front end for the state-adversarial MDP laboratory: trains
// victims, generates demonstrations, trains attacks and defenses, evaluates
// them, runs the exact verification suites, and sweeps parameters.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "samlab/harness.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir;
    std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "Path to the experiment config (JSON)");
    cmd->add_option("--set", opts.sets, "Override config entries, key.path=value (repeatable)");
    cmd->add_option("--out", opts.out_dir, "Output directory (overrides out_dir)");
    cmd->add_option("--seed", opts.seed, "Run a single seed instead of the config's seed list");
}

samlab::json load_raw_config(const CommonOpts& opts) {
    samlab::json j = samlab::json::object();
    if (!opts.config_path.empty()) {
        std::ifstream is(opts.config_path);
        if (!is) throw std::runtime_error("config: cannot open " + opts.config_path);
        try {
            j = samlab::json::parse(is);
        } catch (const samlab::json::parse_error& e) {
            throw std::runtime_error("config: parse error in " + opts.config_path + ": " + e.what());
        }
    }
    for (const std::string& s : opts.sets) samlab::apply_override(j, s);
    return j;
}

samlab::ExperimentConfig resolve_config(const CommonOpts& opts) {
    samlab::ExperimentConfig cfg = samlab::parse_experiment_config(load_raw_config(opts));
    if (!opts.out_dir.empty()) {
        cfg.out_dir = opts.out_dir;
    } else if (const char* root = std::getenv("SAMLAB_OUT_ROOT"); root && *root && cfg.out_dir == "runs") {
        cfg.out_dir = std::string(root) + "/runs";
    }
    if (opts.seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(opts.seed)};
    return cfg;
}

template <typename Phase>
int run_per_seed(const CommonOpts& opts, Phase&& phase) {
    samlab::ExperimentConfig cfg = resolve_config(opts);
    for (std::uint64_t seed : cfg.seeds) std::cout << phase(cfg, seed) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"state-adversarial MDP laboratory"};
    app.require_subcommand(1);

    CommonOpts victim_o, demos_o, attack_o, defense_o, eval_o, verify_o, sweep_o;
    std::string sweep_axis;
    std::vector<std::string> sweep_values;

    add_common(app.add_subcommand("train-victim", "Train the fixed victim policy"), victim_o);
    add_common(app.add_subcommand("gen-demos", "Record target-behavior demonstrations"), demos_o);
    add_common(app.add_subcommand("train-attack", "Train or instantiate the configured attack"), attack_o);
    add_common(app.add_subcommand("train-defense", "Train the smoothness-regularized victim"), defense_o);
    add_common(app.add_subcommand("evaluate", "Score the attack against the victim"), eval_o);
    add_common(app.add_subcommand("verify", "Run the exact tabular verification suites"), verify_o);
    CLI::App* sweep = app.add_subcommand("sweep", "Run the pipeline across one parameter axis");
    add_common(sweep, sweep_o);
    sweep->add_option("--axis", sweep_axis, "Config path to sweep, e.g. attack.epsilon")->required();
    sweep->add_option("--values", sweep_values, "Values for the axis (repeatable or comma-separated)")
        ->required()
        ->delimiter(',');

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("train-victim")) return run_per_seed(victim_o, samlab::run_train_victim);
        if (app.got_subcommand("gen-demos")) return run_per_seed(demos_o, samlab::run_gen_demos);
        if (app.got_subcommand("train-attack")) return run_per_seed(attack_o, samlab::run_train_attack);
        if (app.got_subcommand("train-defense")) return run_per_seed(defense_o, samlab::run_train_defense);
        if (app.got_subcommand("evaluate")) return run_per_seed(eval_o, samlab::run_evaluate);
        if (app.got_subcommand("verify")) {
            samlab::ExperimentConfig cfg = resolve_config(verify_o);
            samlab::VerifySummary sum = samlab::run_verify_suites(cfg.verify.lemma1_instances,
                                                                  cfg.verify.theorem2_instances);
            std::cout << "verify: attack-equivalence " << sum.lemma1_passed << "/" << sum.lemma1_total
                      << " passed, sensitivity bound " << sum.theorem2_passed << "/" << sum.theorem2_total
                      << " passed (tight constant " << sum.theorem2_tight << "/" << sum.theorem2_total << ")"
                      << (sum.pass() ? "" : " FAIL") << "\n";
            return sum.pass() ? 0 : 1;
        }
        if (app.got_subcommand("sweep")) {
            samlab::json j = load_raw_config(sweep_o);
            if (!sweep_o.out_dir.empty()) j["out_dir"] = sweep_o.out_dir;
            if (sweep_o.seed >= 0) j["seeds"] = std::vector<std::uint64_t>{static_cast<std::uint64_t>(sweep_o.seed)};
            std::cout << samlab::run_sweep(j, sweep_axis, sweep_values, &std::cout) << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
