#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <utility>
#include <stdexcept>
#include <string>
#include <vector>

#include "samlab/envs.hpp"
#include "samlab/mdp.hpp"
#include "samlab/net.hpp"
#include "samlab/ppo.hpp"
#include "samlab/rng.hpp"
#include "samlab/trajectory_io.hpp"

namespace samlab {

enum class AccessTier { white_box, black_box, no_box };

// ---------------------------------------------------------------------------
// Victim handles. Access tiers are enforced by construction: a no-box handle
// has no action accessor at all (the rollout plumbing reaches the policy
// through a private friend), a black-box handle exposes sampled actions but
// not the network, and only the white-box handle exposes the policy itself.

struct WhiteBoxVictim {
    NetPolicy policy;
};

class BlackBoxVictim {
  public:
    explicit BlackBoxVictim(NetPolicy pol) : pol_(std::move(pol)) {}

    int sample_discrete(const Vec& obs, Rng& rng) const { return pol_.sample_discrete(obs, rng); }
    Vec sample_continuous(const Vec& obs, Rng& rng) const { return pol_.sample_continuous(obs, rng); }
    bool discrete() const { return pol_.head == HeadKind::categorical; }
    int n_actions() const { return pol_.action_dim(); }

  private:
    NetPolicy pol_;
};

namespace detail {
struct VictimStepper;
}

class NoBoxVictim {
  public:
    explicit NoBoxVictim(NetPolicy pol) : pol_(std::move(pol)) {}
    bool discrete() const { return pol_.head == HeadKind::categorical; }

  private:
    friend struct detail::VictimStepper;
    NetPolicy pol_;
};

namespace detail {
/// Internal plumbing that can step an environment with a no-box victim. It
/// returns only the resulting EnvStep; the chosen action never escapes.
struct VictimStepper {
    template <typename Env>
    static EnvStep step(Env& env, const NoBoxVictim& victim, const Vec& falsified_obs, Rng& rng) {
        if constexpr (requires(Env& e, Rng& r) { e.step(0, r); }) {
            return env.step(victim.pol_.sample_discrete(falsified_obs, rng), rng);
        } else {
            return env.step(victim.pol_.sample_continuous(falsified_obs, rng), rng);
        }
    }
};
}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive attacks

/// Uniform noise within the L-inf ball, the weakest baseline.
inline Vec random_attack(const Vec& s, double eps, Rng& rng) {
    if (eps < 0.0) throw std::invalid_argument("random_attack: negative budget");
    Vec out = s;
    for (double& x : out) x += rng.uniform(-eps, eps);
    return out;
}

/// Targeted sign-gradient attack: drive the victim's action at the falsified
/// state toward an action drawn once from the target policy at the clean
/// state. T iterations of step eps/T, clamped to the budget box.
inline Vec targeted_pgd_step(const WhiteBoxVictim& victim, const NetPolicy& target_policy, const Vec& s,
                             double eps, int T, Rng& rng) {
    if (T < 1) throw std::invalid_argument("targeted_pgd_step: T must be >= 1");
    if (eps < 0.0) throw std::invalid_argument("targeted_pgd_step: negative budget");
    double step = eps / static_cast<double>(T);

    const bool discrete = victim.policy.head == HeadKind::categorical;
    int a_tgt_idx = 0;
    Vec a_tgt_vec;
    if (discrete) {
        a_tgt_idx = target_policy.sample_discrete(s, rng);
    } else {
        a_tgt_vec = target_policy.sample_continuous(s, rng);
    }

    Vec s_hat = s;
    for (double& x : s_hat) x += rng.uniform(-step, step);
    s_hat = project_to_budget(s, s_hat, eps);

    for (int it = 0; it < T; ++it) {
        Vec out = victim.policy.net.forward(s_hat);
        Vec upstream(out.size(), 0.0);
        if (discrete) {
            // L = sum_i (p_i - y_i)^2 through the softmax
            Vec p = softmax(out);
            Vec g(p.size());
            double dot = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                double y = (static_cast<int>(i) == a_tgt_idx) ? 1.0 : 0.0;
                g[i] = 2.0 * (p[i] - y);
                dot += g[i] * p[i];
            }
            for (std::size_t i = 0; i < p.size(); ++i) upstream[i] = p[i] * (g[i] - dot);
        } else {
            // L = ||mean(s_hat) - a_tgt||^2
            GaussianHead h = gaussian_head(out);
            for (std::size_t i = 0; i < h.dim(); ++i) upstream[i] = 2.0 * (h.mean[i] - a_tgt_vec[i]);
        }
        GradientTape tape = victim.policy.net.backward(upstream);
        for (std::size_t i = 0; i < s_hat.size(); ++i) {
            double g = tape.input_grad[i];
            s_hat[i] -= step * (g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
        }
        s_hat = project_to_budget(s, s_hat, eps);
    }
    return s_hat;
}

// ---------------------------------------------------------------------------
// Adversary parameterization: the network emits a raw offset; the falsified
// state is s + eps*tanh(raw), re-clamped to the budget box afterwards.

inline Vec adversary_falsify(const NetPolicy& nu, const Vec& s, double eps) {
    Vec raw = nu.head == HeadKind::gaussian ? nu.gaussian(s).mean : nu.net.forward(s);
    Vec s_hat = s;
    for (std::size_t i = 0; i < s.size(); ++i) s_hat[i] = s[i] + eps * std::tanh(raw[i]);
    return project_to_budget(s, s_hat, eps);
}

inline Vec adversary_falsify_sampled(const NetPolicy& nu, const Vec& s, double eps, Rng& rng) {
    Vec raw = nu.sample_continuous(s, rng);
    Vec s_hat = s;
    for (std::size_t i = 0; i < s.size(); ++i) s_hat[i] = s[i] + eps * std::tanh(raw[i]);
    return project_to_budget(s, s_hat, eps);
}

// ---------------------------------------------------------------------------
// Artifact

struct AttackArtifact {
    std::string kind;  // bia_ilfd | bia_ilfo | targeted_pgd | random | reward_max
    NetPolicy adversary;
    bool has_adversary = false;
    double epsilon = 0.0;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<IterRecord> history;
};

inline void save_attack_artifact(const AttackArtifact& art, std::ostream& os) {
    os << "samlab-attack v1\n";
    os << "kind " << art.kind << "\n";
    os << "epsilon " << art.epsilon << "\n";
    os << "seed " << art.seed << "\n";
    os << "config_hash " << (art.config_hash.empty() ? "-" : art.config_hash) << "\n";
    os << "has_adversary " << (art.has_adversary ? 1 : 0) << "\n";
    if (art.has_adversary) save_policy(art.adversary, os);
}

inline AttackArtifact load_attack_artifact(std::istream& is) {
    std::string magic, version, key;
    is >> magic >> version;
    if (magic != "samlab-attack" || version != "v1") throw std::runtime_error("load_attack_artifact: bad header");
    AttackArtifact art;
    int has = 0;
    is >> key >> art.kind;
    if (key != "kind") throw std::runtime_error("load_attack_artifact: expected kind");
    is >> key >> art.epsilon;
    is >> key >> art.seed;
    is >> key >> art.config_hash;
    if (art.config_hash == "-") art.config_hash.clear();
    is >> key >> has;
    art.has_adversary = has != 0;
    if (art.has_adversary) art.adversary = load_policy(is);
    return art;
}

// ---------------------------------------------------------------------------
// Adversary-training environments. Each wraps a base environment plus a
// victim handle; the PPO "action" is the adversary's raw offset vector and
// the PPO reward is the attack objective.

/// BIA rollout environment: reward is -log D(pair) for the current
/// discriminator. Works with a no-box victim (ILfO) or black-box (ILfD);
/// the falsified state is budget-projected before the victim sees it.
template <typename Env>
class BiaEnv {
  public:
    BiaEnv(Env base, const NoBoxVictim* nobox, const BlackBoxVictim* blackbox, const Network* disc,
           double eps, bool ilfd, int victim_n_actions, int horizon = 0)
        : base_(std::move(base)), nobox_(nobox), blackbox_(blackbox), disc_(disc), eps_(eps), ilfd_(ilfd),
          victim_n_actions_(victim_n_actions), horizon_(horizon) {
        if (ilfd_ && !blackbox_) throw std::invalid_argument("BiaEnv: ILfD needs a black-box victim");
        if (!ilfd_ && !nobox_) throw std::invalid_argument("BiaEnv: ILfO needs a no-box victim");
    }

    Vec reset(Rng& rng) {
        obs_ = base_.reset(rng);
        t_ = 0;
        absorbed_ = false;
        return obs_;
    }

    EnvStep step(const Vec& raw, Rng& rng) {
        if (absorbed_) {
            // absorbing phase: the underlying episode is over; hold the
            // terminal state and keep emitting its absorbing pair so episode
            // length stops mattering to the discriminator
            Vec pair = obs_;
            if (ilfd_)
                pair.insert(pair.end(), static_cast<std::size_t>(victim_n_actions_), 0.0);
            else
                pair.insert(pair.end(), obs_.begin(), obs_.end());
            agent_pairs_.push_back(pair);
            EnvStep out;
            out.next_obs = obs_;
            out.reward = -std::log(std::max(discriminator_output(*disc_, pair), 1e-300));
            out.done = ++t_ >= horizon_;
            return out;
        }
        Vec s = obs_;
        Vec s_hat = s;
        for (std::size_t i = 0; i < s.size(); ++i) s_hat[i] = s[i] + eps_ * std::tanh(raw[i]);
        s_hat = project_to_budget(s, s_hat, eps_);

        EnvStep base_step;
        Vec pair;
        if (ilfd_) {
            if constexpr (requires(Env& e, Rng& r) { e.step(0, r); }) {
                int a = blackbox_->sample_discrete(s_hat, rng);
                base_step = base_.step(a, rng);
                pair = s;
                for (int i = 0; i < victim_n_actions_; ++i) pair.push_back(i == a ? 1.0 : 0.0);
            } else {
                Vec a = blackbox_->sample_continuous(s_hat, rng);
                base_step = base_.step(a, rng);
                pair = s;
                pair.insert(pair.end(), a.begin(), a.end());
            }
        } else {
            base_step = detail::VictimStepper::step(base_, *nobox_, s_hat, rng);
            pair = s;
            pair.insert(pair.end(), base_step.next_obs.begin(), base_step.next_obs.end());
        }
        agent_pairs_.push_back(pair);

        EnvStep out = base_step;
        out.reward = -std::log(std::max(discriminator_output(*disc_, pair), 1e-300));
        obs_ = base_step.next_obs;
        ++t_;
        if (horizon_ > 0) {
            if (base_step.done && t_ < horizon_) {
                absorbed_ = true;
                out.done = false;
            } else {
                out.done = base_step.done || t_ >= horizon_;
            }
        }
        return out;
    }

    std::vector<Vec> take_agent_pairs() { return std::exchange(agent_pairs_, {}); }
    int pair_dim(int obs_dim) const { return ilfd_ ? obs_dim + victim_n_actions_ : 2 * obs_dim; }

  private:
    Env base_;
    const NoBoxVictim* nobox_;
    const BlackBoxVictim* blackbox_;
    const Network* disc_;
    double eps_;
    bool ilfd_;
    int victim_n_actions_;
    int horizon_ = 0;
    int t_ = 0;
    bool absorbed_ = false;
    Vec obs_;
    std::vector<Vec> agent_pairs_;
};

/// Reward-maximization rollout environment: the PPO reward is the base
/// environment's adversary-task channel.
template <typename Env>
class RewardMaxEnv {
  public:
    RewardMaxEnv(Env base, const BlackBoxVictim* victim, double eps)
        : base_(std::move(base)), victim_(victim), eps_(eps) {}

    Vec reset(Rng& rng) {
        obs_ = base_.reset(rng);
        return obs_;
    }

    EnvStep step(const Vec& raw, Rng& rng) {
        Vec s = obs_;
        Vec s_hat = s;
        for (std::size_t i = 0; i < s.size(); ++i) s_hat[i] = s[i] + eps_ * std::tanh(raw[i]);
        s_hat = project_to_budget(s, s_hat, eps_);
        EnvStep out;
        if constexpr (requires(Env& e, Rng& r) { e.step(0, r); }) {
            out = base_.step(victim_->sample_discrete(s_hat, rng), rng);
        } else {
            out = base_.step(victim_->sample_continuous(s_hat, rng), rng);
        }
        out.reward = out.adversary_reward;
        obs_ = out.next_obs;
        return out;
    }

  private:
    Env base_;
    const BlackBoxVictim* victim_;
    double eps_;
    Vec obs_;
};

// ---------------------------------------------------------------------------
// BIA training (adversarial imitation of the demonstrated behavior)

struct BiaConfig {
    PpoConfig ppo;
    double disc_lr = 0.01;
    int disc_steps_per_iter = 10;
    std::vector<int> disc_hidden{32, 32};
    std::vector<int> adversary_hidden{32, 32};
};

/// Flattens demos into discriminator pairs. With pad_to_horizon > 0, episodes
/// shorter than the horizon are padded with absorbing pairs anchored at their
/// terminal state (state-state for ILfO, state plus a zero action block for
/// ILfD); the rollout side emits the same encoding once its episode ends, so
/// finishing where the demos finish is not penalized by the shorter episode.
inline std::vector<Vec> demo_pairs(const Demonstration& demos, bool ilfd, int victim_n_actions,
                                   int pad_to_horizon = 0) {
    std::vector<Vec> out;
    for (const auto& ep : demos.episodes) {
        for (const auto& st : ep.steps) {
            Vec pair = st.state;
            if (ilfd) {
                if (!st.action) throw std::invalid_argument("demo_pairs: ILfD demo step missing action");
                int a = static_cast<int>(std::lround((*st.action)[0]));
                for (int i = 0; i < victim_n_actions; ++i) pair.push_back(i == a ? 1.0 : 0.0);
            } else {
                pair.insert(pair.end(), st.next_state.begin(), st.next_state.end());
            }
            out.push_back(std::move(pair));
        }
        int len = static_cast<int>(ep.steps.size());
        if (pad_to_horizon > len) {
            const Vec& g = ep.steps.back().next_state;
            Vec pad = g;
            if (ilfd)
                pad.insert(pad.end(), static_cast<std::size_t>(victim_n_actions), 0.0);
            else
                pad.insert(pad.end(), g.begin(), g.end());
            out.insert(out.end(), static_cast<std::size_t>(pad_to_horizon - len), pad);
        }
    }
    return out;
}

/// Alternating loop: roll the adversary through the victim, fit the
/// discriminator on fresh agent pairs vs the demonstrations, PPO-update the
/// adversary on reward -log D. The ILfD path needs action observations
/// (black-box); the ILfO path works from states alone (no-box).
template <typename Env>
AttackArtifact bia_train(Env env, const NoBoxVictim* nobox, const BlackBoxVictim* blackbox,
                         const Demonstration& demos, double eps, const BiaConfig& cfg, bool ilfd,
                         int victim_n_actions) {
    demos.validate();
    if (ilfd && !demos.actions_present) throw std::invalid_argument("bia_train: ILfD needs demos with actions");
    if (!ilfd && demos.actions_present) throw std::invalid_argument("bia_train: ILfO demos must not carry actions");

    Rng rng(cfg.ppo.seed);
    Rng init_rng = rng.derive(1);
    Rng rollout_rng = rng.derive(2);
    Rng update_rng = rng.derive(3);

    int obs_dim = static_cast<int>(demos.episodes.front().steps.front().state.size());
    int pair_dim = ilfd ? obs_dim + victim_n_actions : 2 * obs_dim;

    std::vector<int> disc_sizes{pair_dim};
    disc_sizes.insert(disc_sizes.end(), cfg.disc_hidden.begin(), cfg.disc_hidden.end());
    disc_sizes.push_back(1);
    Network disc(disc_sizes, Activation::tanh, init_rng);

    std::vector<int> nu_sizes{obs_dim};
    nu_sizes.insert(nu_sizes.end(), cfg.adversary_hidden.begin(), cfg.adversary_hidden.end());
    nu_sizes.push_back(2 * obs_dim);  // gaussian head over raw offsets
    NetPolicy nu;
    nu.head = HeadKind::gaussian;
    nu.net = Network(nu_sizes, Activation::tanh, init_rng, 0.01);

    std::vector<int> val_sizes{obs_dim};
    val_sizes.insert(val_sizes.end(), cfg.adversary_hidden.begin(), cfg.adversary_hidden.end());
    val_sizes.push_back(1);
    Network value(val_sizes, Activation::tanh, init_rng);

    int horizon = 0;
    if constexpr (requires { env.max_steps; }) horizon = env.max_steps;
    std::vector<Vec> target_pairs = demo_pairs(demos, ilfd, victim_n_actions, horizon);

    BiaEnv<Env> wrapper(std::move(env), nobox, blackbox, &disc, eps, ilfd, victim_n_actions, horizon);

    AttackArtifact art;
    art.kind = ilfd ? "bia_ilfd" : "bia_ilfo";
    art.epsilon = eps;
    art.seed = cfg.ppo.seed;

    detail::AdamState ap, av, ad;
    for (int it = 0; it < cfg.ppo.iters; ++it) {
        RolloutBatch batch = collect_rollouts(wrapper, nu, value, cfg.ppo.rollout_steps, cfg.ppo.discount, rollout_rng);
        std::vector<Vec> agent_pairs = wrapper.take_agent_pairs();
        Vec curve = train_discriminator(disc, agent_pairs, target_pairs, cfg.disc_lr, cfg.disc_steps_per_iter,
                                        cfg.ppo.adam ? &ad : nullptr);
        UpdateStats st = ppo_update(nu, value, batch, cfg.ppo, update_rng, nullptr,
                                    cfg.ppo.adam ? &ap : nullptr, cfg.ppo.adam ? &av : nullptr);
        IterRecord rec;
        rec.iter = it;
        rec.mean_return = batch.mean_episode_return;
        rec.surrogate = st.surrogate;
        rec.value_loss = curve.back();  // discriminator objective this iter
        rec.grad_norm = st.policy_grad_norm;
        rec.mean_kl = st.mean_kl_old_new;
        art.history.push_back(rec);
    }
    art.adversary = nu;
    art.has_adversary = true;
    return art;
}

/// Reward-maximization attack: trains the adversary by PPO directly on the
/// opposing-task reward with the frozen victim folded into the dynamics.
template <typename Env>
AttackArtifact reward_max_train(Env env, const BlackBoxVictim& victim, double eps, const PpoConfig& ppo_cfg,
                                int obs_dim, std::vector<int> hidden = {32, 32}) {
    RewardMaxEnv<Env> wrapper(std::move(env), &victim, eps);
    PpoConfig cfg = ppo_cfg;
    TrainResult res = ppo_train(wrapper, cfg, /*discrete=*/false, obs_dim, 2 * obs_dim, nullptr, hidden);
    AttackArtifact art;
    art.kind = "reward_max";
    art.epsilon = eps;
    art.seed = cfg.seed;
    art.adversary = res.policy;
    art.has_adversary = true;
    art.history = res.history;
    return art;
}

// ---------------------------------------------------------------------------
// Tabular reward-maximization (for exact-oracle cross-checks): the adversary
// picks a slot into B(s), so every emitted perturbation is in budget by
// construction. Observations are one-hot true states.

class TabularAttackEnv {
  public:
    TabularAttackEnv(SaMdp sa, TabularPolicy pi, int horizon)
        : sa_(std::move(sa)), pi_(std::move(pi)), horizon_(horizon) {
        max_budget_ = 0;
        for (const auto& nb : sa_.perturbation.neighbors) max_budget_ = std::max(max_budget_, static_cast<int>(nb.size()));
    }

    int n_slots() const { return max_budget_; }
    int obs_dim() const { return sa_.mdp.n_states; }
    const SaMdp& samdp() const { return sa_; }

    Vec reset(Rng& rng) {
        s_ = rng.categorical(sa_.mdp.initial);
        t_ = 0;
        return onehot(s_);
    }

    EnvStep step(int slot, Rng& rng) {
        const auto& nb = sa_.perturbation.neighbors[static_cast<std::size_t>(s_)];
        int s_hat = nb[static_cast<std::size_t>(slot) % nb.size()];
        int a = rng.categorical(pi_.probs[static_cast<std::size_t>(s_hat)]);
        int sp = rng.categorical(sa_.mdp.trans(s_, a));
        EnvStep out;
        out.reward = sa_.mdp.rew(s_, a, sp);
        out.adversary_reward = out.reward;
        s_ = sp;
        ++t_;
        out.next_obs = onehot(s_);
        out.done = t_ >= horizon_;
        return out;
    }

    /// Greedy deterministic adversary from a trained slot policy.
    TabularAdversary extract(const NetPolicy& nu) const {
        std::vector<int> choice(static_cast<std::size_t>(sa_.mdp.n_states));
        for (int s = 0; s < sa_.mdp.n_states; ++s) {
            Vec probs = nu.action_probs(onehot(s));
            const auto& nb = sa_.perturbation.neighbors[static_cast<std::size_t>(s)];
            Vec mass(nb.size(), 0.0);
            for (std::size_t slot = 0; slot < probs.size(); ++slot) mass[slot % nb.size()] += probs[slot];
            std::size_t best = 0;
            for (std::size_t i = 1; i < mass.size(); ++i)
                if (mass[i] > mass[best]) best = i;
            choice[static_cast<std::size_t>(s)] = nb[best];
        }
        return TabularAdversary::deterministic(choice);
    }

  private:
    Vec onehot(int s) const {
        Vec v(static_cast<std::size_t>(sa_.mdp.n_states), 0.0);
        v[static_cast<std::size_t>(s)] = 1.0;
        return v;
    }

    SaMdp sa_;
    TabularPolicy pi_;
    int horizon_;
    int max_budget_ = 0;
    int s_ = 0;
    int t_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

/// State falsifier used at evaluation time.
using AdversaryFn = std::function<Vec(const Vec& s, Rng& rng)>;

inline AdversaryFn identity_adversary() {
    return [](const Vec& s, Rng&) { return s; };
}

inline AdversaryFn artifact_adversary(const AttackArtifact& art) {
    if (!art.has_adversary) throw std::invalid_argument("artifact_adversary: artifact carries no network");
    NetPolicy nu = art.adversary;
    double eps = art.epsilon;
    return [nu = std::move(nu), eps](const Vec& s, Rng&) { return adversary_falsify(nu, s, eps); };
}

inline AdversaryFn random_adversary(double eps) {
    return [eps](const Vec& s, Rng& rng) { return random_attack(s, eps, rng); };
}

inline AdversaryFn pgd_adversary(const WhiteBoxVictim& victim, const NetPolicy& target, double eps, int T) {
    return [&victim, target, eps, T](const Vec& s, Rng& rng) {
        return targeted_pgd_step(victim, target, s, eps, T, rng);
    };
}

struct AttackEval {
    double attack_reward_mean = 0.0;  // adversary-task return under attack
    double attack_reward_std = 0.0;
    double victim_reward_mean = 0.0;  // victim-task return under attack
    double victim_reward_std = 0.0;
    double clean_reward_mean = 0.0;  // victim-task return, no attack
    double clean_reward_std = 0.0;
    double success_rate = 0.0;        // adversary goal reached, under attack
    double clean_success_rate = 0.0;  // victim goal reached, no attack
    double empirical_tv = 0.0;        // visitation TV: attacked victim vs target rollouts
    int n_episodes = 0;
    double max_budget_violation = 0.0;
};

namespace detail {

inline std::size_t discretize(const Vec& s, double lo, double hi, int bins_per_dim) {
    std::size_t idx = 0;
    for (double x : s) {
        int b = static_cast<int>((std::clamp(x, lo, hi) - lo) / (hi - lo) * bins_per_dim);
        b = std::min(b, bins_per_dim - 1);
        idx = idx * static_cast<std::size_t>(bins_per_dim) + static_cast<std::size_t>(b);
    }
    return idx;
}

inline void mean_std(const Vec& xs, double& mean, double& sd) {
    mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
}

}  // namespace detail

/// Runs n_episodes of the attacked victim and the clean victim with paired
/// seeds; also rolls the target policy (when given) to measure visitation TV
/// over discretized states.
template <typename Env>
AttackEval evaluate_attack(Env env, const NetPolicy& victim, const AdversaryFn& adversary, int n_episodes,
                           std::uint64_t seed, double eps_check, const NetPolicy* target_policy = nullptr,
                           int tv_bins = 7) {
    if (n_episodes < 1) throw std::invalid_argument("evaluate_attack: n_episodes must be >= 1");
    AttackEval ev;
    ev.n_episodes = n_episodes;
    Vec adv_rewards, vic_rewards, clean_rewards;
    std::map<std::size_t, double> hist_attacked, hist_target;
    double attacked_states = 0.0, target_states = 0.0;
    int successes = 0, clean_successes = 0;

    auto run = [&](bool attacked, std::uint64_t ep_seed, double& adv_ret, double& vic_ret, bool& adv_goal,
                   bool& vic_goal, std::map<std::size_t, double>* hist, double* hist_n) {
        Rng rng(ep_seed);
        Env e = env;
        Vec obs = e.reset(rng);
        adv_ret = vic_ret = 0.0;
        adv_goal = vic_goal = false;
        while (true) {
            Vec s_hat = attacked ? adversary(obs, rng) : obs;
            if (attacked) {
                for (std::size_t i = 0; i < obs.size(); ++i)
                    ev.max_budget_violation = std::max(ev.max_budget_violation, std::abs(s_hat[i] - obs[i]) - eps_check);
            }
            if (hist) {
                (*hist)[detail::discretize(obs, 0.0, 1.0, tv_bins)] += 1.0;
                *hist_n += 1.0;
            }
            EnvStep res;
            if constexpr (requires(Env& en, Rng& r) { en.step(0, r); }) {
                res = e.step(victim.sample_discrete(s_hat, rng), rng);
            } else {
                res = e.step(victim.sample_continuous(s_hat, rng), rng);
            }
            adv_ret += res.adversary_reward;
            vic_ret += res.reward;
            adv_goal = adv_goal || res.reached_adversary_goal;
            vic_goal = vic_goal || res.reached_victim_goal;
            obs = res.next_obs;
            if (res.done) break;
        }
    };

    for (int e = 0; e < n_episodes; ++e) {
        std::uint64_t ep_seed = seed + static_cast<std::uint64_t>(e);
        double adv_ret, vic_ret;
        bool adv_goal, vic_goal;
        run(true, ep_seed, adv_ret, vic_ret, adv_goal, vic_goal, &hist_attacked, &attacked_states);
        adv_rewards.push_back(adv_ret);
        vic_rewards.push_back(vic_ret);
        if (adv_goal) ++successes;

        run(false, ep_seed, adv_ret, vic_ret, adv_goal, vic_goal, nullptr, nullptr);
        clean_rewards.push_back(vic_ret);
        if (vic_goal) ++clean_successes;

        if (target_policy) {
            Rng rng(ep_seed ^ 0x9e3779b97f4a7c15ull);
            Env te = env;
            Vec obs = te.reset(rng);
            while (true) {
                hist_target[detail::discretize(obs, 0.0, 1.0, tv_bins)] += 1.0;
                target_states += 1.0;
                EnvStep res;
                if constexpr (requires(Env& en, Rng& r) { en.step(0, r); }) {
                    res = te.step(target_policy->sample_discrete(obs, rng), rng);
                } else {
                    res = te.step(target_policy->sample_continuous(obs, rng), rng);
                }
                obs = res.next_obs;
                if (res.done) break;
            }
        }
    }

    detail::mean_std(adv_rewards, ev.attack_reward_mean, ev.attack_reward_std);
    detail::mean_std(vic_rewards, ev.victim_reward_mean, ev.victim_reward_std);
    detail::mean_std(clean_rewards, ev.clean_reward_mean, ev.clean_reward_std);
    ev.success_rate = static_cast<double>(successes) / n_episodes;
    ev.clean_success_rate = static_cast<double>(clean_successes) / n_episodes;
    if (target_policy && attacked_states > 0.0 && target_states > 0.0) {
        double tv = 0.0;
        std::map<std::size_t, double> keys = hist_attacked;
        for (const auto& [k, v] : hist_target) keys.try_emplace(k, 0.0);
        for (const auto& [k, unused] : keys) {
            double pa = (hist_attacked.count(k) ? hist_attacked.at(k) : 0.0) / attacked_states;
            double pt = (hist_target.count(k) ? hist_target.at(k) : 0.0) / target_states;
            tv += std::abs(pa - pt);
        }
        ev.empirical_tv = 0.5 * tv;
    }
    return ev;
}

}  // namespace samlab
