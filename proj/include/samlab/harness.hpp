#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "samlab/attacks.hpp"
#include "samlab/defense.hpp"
#include "samlab/envs.hpp"
#include "samlab/oracle.hpp"
#include "samlab/ppo.hpp"
#include "samlab/trajectory_io.hpp"

namespace samlab {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration. Strict schema: unknown keys are fatal, named in the error.

namespace detail {

inline void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& context) {
    if (!j.is_object()) throw std::runtime_error("config: " + context + " must be an object");
    for (const auto& [key, unused] : j.items()) {
        bool ok = false;
        for (const auto& a : allowed) ok = ok || key == a;
        if (!ok) throw std::runtime_error("config: unknown key '" + context + "." + key + "'");
    }
}

template <typename T>
void get_if_present(const json& j, const std::string& key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

struct EnvBlock {
    std::string name = "gridworld";  // gridworld | pointmass
    int max_steps = 100;

    void validate() const {
        if (name != "gridworld" && name != "pointmass") throw std::runtime_error("config: env.name must be gridworld or pointmass");
        if (max_steps < 1) throw std::runtime_error("config: env.max_steps must be >= 1");
    }
};

struct VictimBlock {
    PpoConfig ppo;
    std::vector<int> hidden{64, 64};
};

struct AttackBlock {
    std::string kind = "bia_ilfd";  // bia_ilfd | bia_ilfo | reward_max | targeted_pgd | random
    double epsilon = 0.3;
    int demo_count = 20;
    std::string demo_path;  // defaults to <run dir>/demos.jsonl
    PpoConfig ppo;
    double disc_lr = 0.01;
    int disc_steps = 10;
    int pgd_iters = 30;
    std::vector<int> hidden{32, 32};

    void validate() const {
        static const std::vector<std::string> kinds{"bia_ilfd", "bia_ilfo", "reward_max", "targeted_pgd", "random"};
        bool ok = false;
        for (const auto& k : kinds) ok = ok || kind == k;
        if (!ok) throw std::runtime_error("config: unknown attack.kind '" + kind + "'");
        if (epsilon < 0.0) throw std::runtime_error("config: attack.epsilon must be >= 0");
        if (demo_count < 1) throw std::runtime_error("config: attack.demo_count must be >= 1");
    }
};

struct DefenseBlock {
    double lambda = 0.3;
    double gamma_reg = 0.99;
    double epsilon = 0.3;
    int pgd_steps = 5;
    bool time_discounted = true;

    DefenseConfig to_defense_config() const {
        DefenseConfig cfg;
        cfg.lambda_reg = lambda;
        cfg.discount_reg = gamma_reg;
        cfg.epsilon = epsilon;
        cfg.pgd_steps = pgd_steps;
        cfg.time_discounted = time_discounted;
        cfg.validate();
        return cfg;
    }
};

struct EvalBlock {
    int n_episodes = 50;
    std::string victim = "victim";  // victim | defended
    bool allow_hash_mismatch = false;

    void validate() const {
        if (n_episodes < 1) throw std::runtime_error("config: eval.n_episodes must be >= 1");
        if (victim != "victim" && victim != "defended") throw std::runtime_error("config: eval.victim must be victim or defended");
    }
};

struct VerifyBlock {
    int lemma1_instances = 200;
    int theorem2_instances = 500;
};

struct ExperimentConfig {
    EnvBlock env;
    VictimBlock victim;
    AttackBlock attack;
    DefenseBlock defense;
    EvalBlock eval;
    VerifyBlock verify;
    std::vector<std::uint64_t> seeds{1};
    std::string out_dir = "runs";

    std::string config_hash;  // filled by the parser from the canonical dump

    void validate() const {
        env.validate();
        victim.ppo.validate();
        attack.validate();
        attack.ppo.validate();
        defense.to_defense_config();
        eval.validate();
        if (seeds.empty()) throw std::runtime_error("config: seeds must be non-empty");
        if (out_dir.empty()) throw std::runtime_error("config: out_dir must be set");
    }
};

namespace detail {

inline void parse_ppo_block(const json& j, const std::string& context, PpoConfig& ppo, std::vector<int>* hidden) {
    std::vector<std::string> allowed{"iters",         "rollout_steps",       "lr_policy",  "lr_value",
                                     "discount",      "clip_eps",            "epochs_per_iter", "minibatch_size",
                                     "entropy_coef",  "normalize_advantages", "adam"};
    if (hidden) allowed.push_back("hidden");
    check_keys(j, allowed, context);
    get_if_present(j, "iters", ppo.iters);
    get_if_present(j, "rollout_steps", ppo.rollout_steps);
    get_if_present(j, "lr_policy", ppo.lr_policy);
    get_if_present(j, "lr_value", ppo.lr_value);
    get_if_present(j, "discount", ppo.discount);
    get_if_present(j, "clip_eps", ppo.clip_eps);
    get_if_present(j, "epochs_per_iter", ppo.epochs_per_iter);
    get_if_present(j, "minibatch_size", ppo.minibatch_size);
    get_if_present(j, "entropy_coef", ppo.entropy_coef);
    get_if_present(j, "normalize_advantages", ppo.normalize_advantages);
    get_if_present(j, "adam", ppo.adam);
    if (hidden) get_if_present(j, "hidden", *hidden);
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const json& j) {
    detail::check_keys(j, {"env", "victim", "attack", "defense", "eval", "verify", "seeds", "out_dir"}, "<root>");
    ExperimentConfig cfg;
    if (j.contains("env")) {
        detail::check_keys(j.at("env"), {"name", "max_steps"}, "env");
        detail::get_if_present(j.at("env"), "name", cfg.env.name);
        detail::get_if_present(j.at("env"), "max_steps", cfg.env.max_steps);
    }
    if (j.contains("victim")) detail::parse_ppo_block(j.at("victim"), "victim", cfg.victim.ppo, &cfg.victim.hidden);
    if (j.contains("attack")) {
        const json& a = j.at("attack");
        detail::check_keys(a, {"kind", "epsilon", "demo_count", "demo_path", "disc_lr", "disc_steps", "pgd_iters",
                               "hidden", "ppo"},
                           "attack");
        detail::get_if_present(a, "kind", cfg.attack.kind);
        detail::get_if_present(a, "epsilon", cfg.attack.epsilon);
        detail::get_if_present(a, "demo_count", cfg.attack.demo_count);
        detail::get_if_present(a, "demo_path", cfg.attack.demo_path);
        detail::get_if_present(a, "disc_lr", cfg.attack.disc_lr);
        detail::get_if_present(a, "disc_steps", cfg.attack.disc_steps);
        detail::get_if_present(a, "pgd_iters", cfg.attack.pgd_iters);
        detail::get_if_present(a, "hidden", cfg.attack.hidden);
        if (a.contains("ppo")) detail::parse_ppo_block(a.at("ppo"), "attack.ppo", cfg.attack.ppo, nullptr);
    }
    if (j.contains("defense")) {
        const json& d = j.at("defense");
        detail::check_keys(d, {"lambda", "gamma_reg", "epsilon", "pgd_steps", "time_discounted"}, "defense");
        detail::get_if_present(d, "lambda", cfg.defense.lambda);
        detail::get_if_present(d, "gamma_reg", cfg.defense.gamma_reg);
        detail::get_if_present(d, "epsilon", cfg.defense.epsilon);
        detail::get_if_present(d, "pgd_steps", cfg.defense.pgd_steps);
        detail::get_if_present(d, "time_discounted", cfg.defense.time_discounted);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        detail::check_keys(e, {"n_episodes", "victim", "allow_hash_mismatch"}, "eval");
        detail::get_if_present(e, "n_episodes", cfg.eval.n_episodes);
        detail::get_if_present(e, "victim", cfg.eval.victim);
        detail::get_if_present(e, "allow_hash_mismatch", cfg.eval.allow_hash_mismatch);
    }
    if (j.contains("verify")) {
        const json& v = j.at("verify");
        detail::check_keys(v, {"lemma1_instances", "theorem2_instances"}, "verify");
        detail::get_if_present(v, "lemma1_instances", cfg.verify.lemma1_instances);
        detail::get_if_present(v, "theorem2_instances", cfg.verify.theorem2_instances);
    }
    detail::get_if_present(j, "seeds", cfg.seeds);
    detail::get_if_present(j, "out_dir", cfg.out_dir);
    cfg.validate();

    std::string canon = j.dump();  // nlohmann objects iterate in sorted key order
    cfg.config_hash = hex64(fnv1a(canon.data(), canon.size()));
    return cfg;
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
    return parse_experiment_config(json::parse(text));
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config: parse error in " + path + ": " + e.what());
    }
    return parse_experiment_config(j);
}

/// Applies one `--set path.to.key=value` override onto the raw config tree.
/// The value is parsed as JSON when possible, as a bare string otherwise.
inline void apply_override(json& j, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) throw std::runtime_error("override '" + assignment + "' is not key=value");
    std::string path = assignment.substr(0, eq);
    std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    json* node = &j;
    std::size_t pos = 0;
    while (true) {
        auto dot = path.find('.', pos);
        std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        if (key.empty()) throw std::runtime_error("override '" + assignment + "' has an empty path segment");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        pos = dot + 1;
    }
}

// ---------------------------------------------------------------------------
// Metrics persistence: CSV is the only sink. Wall-clock timings go to a
// sidecar file so the metrics CSV itself stays byte-deterministic.

struct MetricsRow {
    std::string run_id;
    std::string phase;
    int iteration = 0;
    std::string metric;
    double value = 0.0;
};

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

class MetricsSink {
  public:
    explicit MetricsSink(const std::string& path) : path_(path) {}

    void append(const std::vector<MetricsRow>& rows) const {
        bool fresh = !std::filesystem::exists(path_);
        std::ofstream os(path_, std::ios::app);
        if (!os) throw std::runtime_error("metrics: cannot open " + path_);
        if (fresh) os << "run_id,phase,iteration,metric,value\n";
        for (const auto& r : rows)
            os << r.run_id << ',' << r.phase << ',' << r.iteration << ',' << r.metric << ',' << format_double(r.value)
               << "\n";
    }

  private:
    std::string path_;
};

/// Appends one wall-clock entry per phase to a sidecar next to the metrics.
inline void record_timing(const std::string& run_dir, const std::string& phase, double seconds) {
    std::ofstream os(run_dir + "/timing.txt", std::ios::app);
    if (os) os << phase << ' ' << std::setprecision(6) << seconds << "\n";
}

// ---------------------------------------------------------------------------
// Plot data: group a long-format CSV by one column, aggregate another.

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

/// Emits axis,mean,std,n with the sample standard deviation over the grouped
/// values. Empty input (header only or nothing) yields a header-only output.
inline void emit_plotdata(std::istream& in, const std::string& axis_col, const std::string& value_col,
                          std::ostream& out) {
    std::string header;
    out << "axis,mean,std,n\n";
    if (!std::getline(in, header)) return;
    std::vector<std::string> cols = split_csv_line(header);
    int axis_i = -1, value_i = -1;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (cols[i] == axis_col) axis_i = static_cast<int>(i);
        if (cols[i] == value_col) value_i = static_cast<int>(i);
    }
    if (axis_i < 0) throw std::runtime_error("emit_plotdata: missing column '" + axis_col + "'");
    if (value_i < 0) throw std::runtime_error("emit_plotdata: missing column '" + value_col + "'");

    std::map<std::string, Vec> groups;
    std::vector<std::string> order;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f = split_csv_line(line);
        if (f.size() != cols.size()) throw std::runtime_error("emit_plotdata: ragged row '" + line + "'");
        const std::string& key = f[static_cast<std::size_t>(axis_i)];
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(std::stod(f[static_cast<std::size_t>(value_i)]));
    }

    // numeric sort when every key parses as a number, else input order
    bool numeric = !order.empty();
    for (const auto& k : order) {
        try {
            std::size_t used = 0;
            std::stod(k, &used);
            numeric = numeric && used == k.size();
        } catch (...) {
            numeric = false;
        }
    }
    if (numeric)
        std::sort(order.begin(), order.end(), [](const std::string& a, const std::string& b) { return std::stod(a) < std::stod(b); });

    for (const auto& key : order) {
        const Vec& xs = groups.at(key);
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        double var = 0.0;
        for (double x : xs) var += (x - mean) * (x - mean);
        double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
        out << key << ',' << format_double(mean) << ',' << format_double(sd) << ',' << xs.size() << "\n";
    }
}

// ---------------------------------------------------------------------------
// Victim artifact: policy + value net + the producing config hash.

inline void save_victim(const NetPolicy& policy, const Network& value, const std::string& config_hash,
                        const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_victim: cannot open " + path);
    os << "samlab-victim v1\n";
    os << "config_hash " << (config_hash.empty() ? "-" : config_hash) << "\n";
    save_policy(policy, os);
    save_network(value, os);
}

struct VictimArtifact {
    NetPolicy policy;
    Network value;
    std::string config_hash;
};

inline VictimArtifact load_victim(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_victim: cannot open " + path);
    std::string magic, version, key;
    is >> magic >> version;
    if (magic != "samlab-victim" || version != "v1") throw std::runtime_error("load_victim: bad header in " + path);
    VictimArtifact art;
    is >> key >> art.config_hash;
    if (key != "config_hash") throw std::runtime_error("load_victim: expected config_hash in " + path);
    if (art.config_hash == "-") art.config_hash.clear();
    art.policy = load_policy(is);
    art.value = load_network(is);
    return art;
}

// ---------------------------------------------------------------------------
// Pipeline phases. Each phase owns files inside <out_dir>/seed_<s>/ and
// appends to that run's metrics.csv; a one-line summary string is returned
// for the CLI to print.

namespace detail {

inline std::string run_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
    return cfg.out_dir + "/seed_" + std::to_string(seed);
}

inline std::string run_id(const ExperimentConfig& cfg, std::uint64_t seed) {
    return cfg.config_hash + "-s" + std::to_string(seed);
}

inline GridWorld make_gridworld(const ExperimentConfig& cfg) {
    GridWorld gw;
    gw.max_steps = cfg.env.max_steps;
    gw.validate();
    return gw;
}

inline PointMass make_pointmass(const ExperimentConfig& cfg) {
    PointMass pm;
    pm.max_steps = cfg.env.max_steps;
    return pm;
}

/// Scripted walker toward the adversary goal; the demonstrated target
/// behavior the imitation attack tries to reproduce through the victim.
struct GridTargetActor {
    GridWorld gw;
    int act(const Vec& obs, Rng&) const {
        auto c = gw.cell_of(obs);
        if (c.first > gw.goal_adversary.first) return GridWorld::kLeft;
        if (c.first < gw.goal_adversary.first) return GridWorld::kRight;
        if (c.second > gw.goal_adversary.second) return GridWorld::kDown;
        return GridWorld::kUp;
    }
};

struct PointTargetActor {
    PointMass pm;
    Vec act(const Vec& obs, Rng&) const {
        Vec f(2);
        for (int d = 0; d < 2; ++d) {
            double err = pm.goal_adversary[static_cast<std::size_t>(d)] - obs[static_cast<std::size_t>(d)];
            f[static_cast<std::size_t>(d)] = std::clamp(4.0 * err - 1.0 * obs[static_cast<std::size_t>(d) + 2], -1.0, 1.0);
        }
        return f;
    }
};

inline void append_history(MetricsSink& sink, const std::string& rid, const std::string& phase,
                           const std::vector<IterRecord>& history) {
    std::vector<MetricsRow> rows;
    for (const auto& rec : history) {
        rows.push_back({rid, phase, rec.iter, "mean_return", rec.mean_return});
        rows.push_back({rid, phase, rec.iter, "surrogate", rec.surrogate});
        rows.push_back({rid, phase, rec.iter, "grad_norm", rec.grad_norm});
        rows.push_back({rid, phase, rec.iter, "mean_kl", rec.mean_kl});
    }
    sink.append(rows);
}

class PhaseTimer {
  public:
    PhaseTimer(std::string dir, std::string phase) : dir_(std::move(dir)), phase_(std::move(phase)), t0_(std::chrono::steady_clock::now()) {}
    ~PhaseTimer() {
        double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
        record_timing(dir_, phase_, s);
    }

  private:
    std::string dir_;
    std::string phase_;
    std::chrono::steady_clock::time_point t0_;
};

inline Demonstration load_demos(const ExperimentConfig& cfg, std::uint64_t seed, bool with_actions) {
    std::string path = cfg.attack.demo_path.empty() ? run_dir(cfg, seed) + "/demos.jsonl" : cfg.attack.demo_path;
    if (!std::filesystem::exists(path))
        throw std::runtime_error("dependency error: missing demonstrations at " + path + " (run gen-demos first)");
    Demonstration demos;
    demos.episodes = read_vec_trajectories_jsonl(path, cfg.victim.ppo.discount);
    demos.actions_present = true;
    if (!with_actions) {
        for (auto& ep : demos.episodes)
            for (auto& st : ep.steps) st.action.reset();
        demos.actions_present = false;
    }
    demos.validate();
    return demos;
}

inline VictimArtifact load_victim_checked(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& which) {
    std::string path = run_dir(cfg, seed) + "/" + which + ".policy";
    if (!std::filesystem::exists(path))
        throw std::runtime_error("dependency error: missing " + which + " artifact at " + path + " (run " +
                                 (which == "defended" ? std::string("train-defense") : std::string("train-victim")) +
                                 " first)");
    return load_victim(path);
}

}  // namespace detail

inline std::string run_train_victim(const ExperimentConfig& cfg, std::uint64_t seed) {
    std::string dir = detail::run_dir(cfg, seed);
    std::filesystem::create_directories(dir);
    detail::PhaseTimer timer(dir, "train-victim");

    PpoConfig ppo = cfg.victim.ppo;
    ppo.seed = seed;
    TrainResult res;
    if (cfg.env.name == "gridworld") {
        GridWorld env = detail::make_gridworld(cfg);
        res = ppo_train(env, ppo, true, 2, 4, nullptr, cfg.victim.hidden);
    } else {
        PointMass env = detail::make_pointmass(cfg);
        res = ppo_train(env, ppo, false, 4, 4, nullptr, cfg.victim.hidden);
    }
    save_victim(res.policy, res.value, cfg.config_hash, dir + "/victim.policy");
    MetricsSink sink(dir + "/metrics.csv");
    detail::append_history(sink, detail::run_id(cfg, seed), "train-victim", res.history);

    std::ostringstream os;
    os << "train-victim seed " << seed << ": " << ppo.iters << " iters, final mean return "
       << res.history.back().mean_return;
    return os.str();
}

inline std::string run_gen_demos(const ExperimentConfig& cfg, std::uint64_t seed) {
    std::string dir = detail::run_dir(cfg, seed);
    std::filesystem::create_directories(dir);
    detail::PhaseTimer timer(dir, "gen-demos");

    Demonstration demos;
    if (cfg.env.name == "gridworld") {
        GridWorld env = detail::make_gridworld(cfg);
        detail::GridTargetActor actor{env};
        demos = record_demonstrations(env, actor, cfg.attack.demo_count, true, seed, cfg.victim.ppo.discount);
    } else {
        PointMass env = detail::make_pointmass(cfg);
        detail::PointTargetActor actor{env};
        demos = record_demonstrations(env, actor, cfg.attack.demo_count, true, seed, cfg.victim.ppo.discount);
    }
    std::string path = cfg.attack.demo_path.empty() ? dir + "/demos.jsonl" : cfg.attack.demo_path;
    write_trajectories_jsonl(demos.episodes, path);

    std::ostringstream os;
    os << "gen-demos seed " << seed << ": " << demos.episodes.size() << " episodes -> " << path;
    return os.str();
}

inline std::string run_train_attack(const ExperimentConfig& cfg, std::uint64_t seed) {
    std::string dir = detail::run_dir(cfg, seed);
    std::filesystem::create_directories(dir);
    detail::PhaseTimer timer(dir, "train-attack");

    const std::string& kind = cfg.attack.kind;
    AttackArtifact art;
    if (kind == "random") {
        art.kind = "random";
        art.epsilon = cfg.attack.epsilon;
        art.seed = seed;
    } else if (kind == "targeted_pgd") {
        // trains the target policy on the swapped-goal task; evaluation
        // builds the white-box attack from it on the fly
        PpoConfig ppo = cfg.attack.ppo;
        ppo.seed = seed;
        TrainResult res;
        if (cfg.env.name == "gridworld") {
            GridWorld env = detail::make_gridworld(cfg).swapped_goals();
            res = ppo_train(env, ppo, true, 2, 4, nullptr, cfg.attack.hidden);
        } else {
            PointMass env = detail::make_pointmass(cfg).swapped_goals();
            res = ppo_train(env, ppo, false, 4, 4, nullptr, cfg.attack.hidden);
        }
        art.kind = "targeted_pgd";
        art.epsilon = cfg.attack.epsilon;
        art.seed = seed;
        art.adversary = res.policy;  // the target policy, not a falsifier
        art.has_adversary = true;
        art.history = res.history;
    } else {
        VictimArtifact victim = detail::load_victim_checked(cfg, seed, "victim");
        PpoConfig ppo = cfg.attack.ppo;
        ppo.seed = seed;
        if (kind == "reward_max") {
            BlackBoxVictim bb(victim.policy);
            if (cfg.env.name == "gridworld") {
                art = reward_max_train(detail::make_gridworld(cfg), bb, cfg.attack.epsilon, ppo, 2, cfg.attack.hidden);
            } else {
                art = reward_max_train(detail::make_pointmass(cfg), bb, cfg.attack.epsilon, ppo, 4, cfg.attack.hidden);
            }
        } else {
            bool ilfd = kind == "bia_ilfd";
            Demonstration demos = detail::load_demos(cfg, seed, ilfd);
            BiaConfig bia;
            bia.ppo = ppo;
            bia.disc_lr = cfg.attack.disc_lr;
            bia.disc_steps_per_iter = cfg.attack.disc_steps;
            bia.adversary_hidden = cfg.attack.hidden;
            NoBoxVictim nobox(victim.policy);
            BlackBoxVictim blackbox(victim.policy);
            if (cfg.env.name == "gridworld") {
                art = bia_train(detail::make_gridworld(cfg), &nobox, ilfd ? &blackbox : nullptr, demos,
                                cfg.attack.epsilon, bia, ilfd, 4);
            } else {
                art = bia_train(detail::make_pointmass(cfg), &nobox, ilfd ? &blackbox : nullptr, demos,
                                cfg.attack.epsilon, bia, ilfd, 2);
            }
        }
    }
    art.config_hash = cfg.config_hash;

    std::ofstream os_file(dir + "/attack.artifact");
    if (!os_file) throw std::runtime_error("train-attack: cannot open " + dir + "/attack.artifact");
    save_attack_artifact(art, os_file);
    MetricsSink sink(dir + "/metrics.csv");
    detail::append_history(sink, detail::run_id(cfg, seed), "train-attack", art.history);

    std::ostringstream os;
    os << "train-attack seed " << seed << ": kind " << art.kind;
    if (!art.history.empty()) os << ", final mean return " << art.history.back().mean_return;
    return os.str();
}

inline std::string run_train_defense(const ExperimentConfig& cfg, std::uint64_t seed) {
    std::string dir = detail::run_dir(cfg, seed);
    std::filesystem::create_directories(dir);
    detail::PhaseTimer timer(dir, "train-defense");

    PpoConfig ppo = cfg.victim.ppo;
    ppo.seed = seed;
    DefenseConfig def = cfg.defense.to_defense_config();
    TrainResult res;
    if (cfg.env.name == "gridworld") {
        GridWorld env = detail::make_gridworld(cfg);
        res = tdrt_train(env, ppo, def, true, 2, 4, cfg.victim.hidden);
    } else {
        PointMass env = detail::make_pointmass(cfg);
        res = tdrt_train(env, ppo, def, false, 4, 4, cfg.victim.hidden);
    }
    save_victim(res.policy, res.value, cfg.config_hash, dir + "/defended.policy");
    MetricsSink sink(dir + "/metrics.csv");
    detail::append_history(sink, detail::run_id(cfg, seed), "train-defense", res.history);

    std::ostringstream os;
    os << "train-defense seed " << seed << ": lambda " << cfg.defense.lambda << ", final mean return "
       << res.history.back().mean_return;
    return os.str();
}

namespace detail {

inline AdversaryFn adversary_from_artifact(const AttackArtifact& art, const NetPolicy& victim_policy,
                                           const AttackBlock& attack) {
    if (art.kind == "random") return random_adversary(art.epsilon);
    if (art.kind == "targeted_pgd") {
        auto victim = std::make_shared<WhiteBoxVictim>(WhiteBoxVictim{victim_policy});
        NetPolicy target = art.adversary;
        double eps = art.epsilon;
        int T = attack.pgd_iters;
        return [victim, target, eps, T](const Vec& s, Rng& rng) {
            return targeted_pgd_step(*victim, target, s, eps, T, rng);
        };
    }
    return artifact_adversary(art);
}

}  // namespace detail

/// Loads the victim (or defended policy) and attack artifact for one seed and
/// scores the attack; rows land in the run's metrics CSV.
inline AttackEval evaluate_run(const ExperimentConfig& cfg, std::uint64_t seed) {
    std::string dir = detail::run_dir(cfg, seed);
    detail::PhaseTimer timer(dir, "evaluate");
    VictimArtifact victim = detail::load_victim_checked(cfg, seed, cfg.eval.victim);

    std::string art_path = dir + "/attack.artifact";
    if (!std::filesystem::exists(art_path))
        throw std::runtime_error("dependency error: missing attack artifact at " + art_path +
                                 " (run train-attack first)");
    std::ifstream is(art_path);
    AttackArtifact art = load_attack_artifact(is);

    if (!cfg.eval.allow_hash_mismatch && !victim.config_hash.empty() && !art.config_hash.empty() &&
        victim.config_hash != art.config_hash)
        throw std::runtime_error("evaluate: config hash mismatch between victim (" + victim.config_hash +
                                 ") and attack (" + art.config_hash + "); pass eval.allow_hash_mismatch to override");

    AdversaryFn adv = detail::adversary_from_artifact(art, victim.policy, cfg.attack);
    AttackEval ev;
    if (cfg.env.name == "gridworld") {
        ev = evaluate_attack(detail::make_gridworld(cfg), victim.policy, adv, cfg.eval.n_episodes, seed,
                             art.epsilon);
    } else {
        ev = evaluate_attack(detail::make_pointmass(cfg), victim.policy, adv, cfg.eval.n_episodes, seed,
                             art.epsilon);
    }

    MetricsSink sink(dir + "/metrics.csv");
    std::string rid = detail::run_id(cfg, seed);
    sink.append({{rid, "evaluate", 0, "attack_reward_mean", ev.attack_reward_mean},
                 {rid, "evaluate", 0, "attack_reward_std", ev.attack_reward_std},
                 {rid, "evaluate", 0, "victim_reward_mean", ev.victim_reward_mean},
                 {rid, "evaluate", 0, "victim_reward_std", ev.victim_reward_std},
                 {rid, "evaluate", 0, "clean_reward_mean", ev.clean_reward_mean},
                 {rid, "evaluate", 0, "clean_reward_std", ev.clean_reward_std},
                 {rid, "evaluate", 0, "success_rate", ev.success_rate},
                 {rid, "evaluate", 0, "clean_success_rate", ev.clean_success_rate},
                 {rid, "evaluate", 0, "max_budget_violation", ev.max_budget_violation}});
    return ev;
}

inline std::string run_evaluate(const ExperimentConfig& cfg, std::uint64_t seed) {
    AttackEval ev = evaluate_run(cfg, seed);
    std::ostringstream os;
    os << "evaluate seed " << seed << ": attack reward " << ev.attack_reward_mean << " +- " << ev.attack_reward_std
       << ", success " << ev.success_rate << ", clean " << ev.clean_reward_mean << " +- " << ev.clean_reward_std;
    return os.str();
}

/// Random-instance verification suites behind the `verify` subcommand.
struct VerifySummary {
    int lemma1_total = 0;
    int lemma1_passed = 0;
    int theorem2_total = 0;  // applicable instances
    int theorem2_passed = 0;
    int theorem2_tight = 0;

    bool pass() const { return lemma1_passed == lemma1_total && theorem2_passed == theorem2_total; }
};

inline VerifySummary run_verify_suites(int lemma1_instances, int theorem2_instances, std::uint64_t seed_base = 0) {
    VerifySummary sum;
    Rng meta(seed_base ^ 0x5851f42d4c957f2dull);

    for (int i = 0; i < lemma1_instances; ++i) {
        RandomMdpSpec spec;
        spec.n_states = 2 + static_cast<int>(static_cast<std::uint64_t>(meta.uniform_int(0, 2)));  // <= 4
        spec.n_actions = 1 + static_cast<int>(static_cast<std::uint64_t>(meta.uniform_int(0, 2)));
        spec.budget_cap = 3;
        spec.seed = static_cast<std::uint64_t>(meta.uniform_int(0, 1 << 30));
        SaMdp sa = generate_random_samdp(spec);
        TabularPolicy pi;
        std::vector<Vec> r_bar;
        for (int s = 0; s < spec.n_states; ++s) {
            Vec row(static_cast<std::size_t>(spec.n_actions));
            double tot = 0.0;
            for (double& p : row) tot += (p = meta.uniform(0.05, 1.0));
            for (double& p : row) p /= tot;
            pi.probs.push_back(row);
        }
        for (int sa = 0; sa < spec.n_states * spec.n_actions; ++sa) {
            Vec rrow(static_cast<std::size_t>(spec.n_states));
            for (double& r : rrow) r = meta.uniform(-1, 1);
            r_bar.push_back(rrow);
        }
        ++sum.lemma1_total;
        if (verify_lemma1(sa, pi, r_bar, 1e-10).pass()) ++sum.lemma1_passed;
    }

    for (int i = 0; i < theorem2_instances; ++i) {
        RandomMdpSpec spec;
        spec.n_states = 2 + static_cast<int>(static_cast<std::uint64_t>(meta.uniform_int(0, 3)));
        spec.n_actions = 2 + static_cast<int>(static_cast<std::uint64_t>(meta.uniform_int(0, 1)));
        spec.budget_cap = 3;
        spec.seed = static_cast<std::uint64_t>(meta.uniform_int(0, 1 << 30));
        SaMdp sa = generate_random_samdp(spec);
        TabularPolicy pi;
        std::vector<Vec> r_tgt;
        for (int s = 0; s < spec.n_states; ++s) {
            Vec row(static_cast<std::size_t>(spec.n_actions));
            double tot = 0.0;
            for (double& p : row) tot += (p = meta.uniform(0.05, 1.0));
            for (double& p : row) p /= tot;
            pi.probs.push_back(row);
            Vec rrow(static_cast<std::size_t>(spec.n_actions));
            for (double& r : rrow) r = meta.uniform(-1, 1);
            r_tgt.push_back(rrow);
        }
        auto advs = enumerate_deterministic_adversaries(sa);
        const TabularAdversary& nu = advs[static_cast<std::size_t>(meta.uniform_int(0, static_cast<int>(advs.size()) - 1))];
        Theorem2Report rep = verify_theorem2(sa, pi, nu, r_tgt, 1.0, 1e-6);
        if (!rep.applicable) continue;
        ++sum.theorem2_total;
        if (rep.holds) ++sum.theorem2_passed;
        if (rep.holds_tight) ++sum.theorem2_tight;
    }
    return sum;
}

inline std::string run_verify(const ExperimentConfig& cfg) {
    VerifySummary sum = run_verify_suites(cfg.verify.lemma1_instances, cfg.verify.theorem2_instances);
    std::ostringstream os;
    os << "verify: attack-equivalence " << sum.lemma1_passed << "/" << sum.lemma1_total << " passed, "
       << "sensitivity bound " << sum.theorem2_passed << "/" << sum.theorem2_total << " passed (tight constant "
       << sum.theorem2_tight << "/" << sum.theorem2_total << ")";
    if (!sum.pass()) os << " FAIL";
    return os.str();
}

/// Runs train-victim -> (gen-demos) -> train-attack -> evaluate per sweep
/// value per seed and appends long-format rows to <out_dir>/sweep.csv.
inline std::string run_sweep(const json& base_config, const std::string& axis, const std::vector<std::string>& values,
                             std::ostream* log = nullptr) {
    if (values.empty()) throw std::runtime_error("sweep: empty values list");
    ExperimentConfig base = parse_experiment_config(base_config);
    std::filesystem::create_directories(base.out_dir);
    std::string csv_path = base.out_dir + "/sweep.csv";
    bool fresh = !std::filesystem::exists(csv_path);
    std::ofstream csv(csv_path, std::ios::app);
    if (!csv) throw std::runtime_error("sweep: cannot open " + csv_path);
    if (fresh) csv << "axis,value,seed,metric,metric_value\n";

    int rows = 0;
    for (const std::string& v : values) {
        json j = base_config;
        apply_override(j, axis + "=" + v);
        ExperimentConfig cfg = parse_experiment_config(j);
        cfg.out_dir = base.out_dir + "/" + axis + "_" + v;
        for (std::uint64_t seed : cfg.seeds) {
            auto note = [&](const std::string& line) {
                if (log) *log << line << "\n";
            };
            note(run_train_victim(cfg, seed));
            if (cfg.attack.kind == "bia_ilfd" || cfg.attack.kind == "bia_ilfo") note(run_gen_demos(cfg, seed));
            note(run_train_attack(cfg, seed));
            AttackEval ev = evaluate_run(cfg, seed);
            auto emit = [&](const std::string& metric, double value) {
                csv << axis << ',' << v << ',' << seed << ',' << metric << ',' << format_double(value) << "\n";
                ++rows;
            };
            emit("attack_reward_mean", ev.attack_reward_mean);
            emit("victim_reward_mean", ev.victim_reward_mean);
            emit("clean_reward_mean", ev.clean_reward_mean);
            emit("success_rate", ev.success_rate);
        }
    }
    std::ostringstream os;
    os << "sweep " << axis << ": " << values.size() << " values x " << base.seeds.size() << " seeds, " << rows
       << " rows -> " << csv_path;
    return os.str();
}

}  // namespace samlab
