#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "samlab/common.hpp"
#include "samlab/rng.hpp"

namespace samlab {

/// Tabular MDP with dense integer state/action ids. Rewards are stored as
/// R(s, a, s'); next-state-independent rewards are just constant slices.
struct FiniteMdp {
    int n_states = 0;
    int n_actions = 0;
    std::vector<Vec> transition;  // [s * n_actions + a] -> prob vector over s'
    std::vector<Vec> reward;      // [s * n_actions + a] -> reward per s'
    double discount = 0.0;
    Vec initial;

    const Vec& trans(int s, int a) const { return transition[static_cast<std::size_t>(s * n_actions + a)]; }
    Vec& trans(int s, int a) { return transition[static_cast<std::size_t>(s * n_actions + a)]; }
    double rew(int s, int a, int sp) const { return reward[static_cast<std::size_t>(s * n_actions + a)][static_cast<std::size_t>(sp)]; }
    double& rew(int s, int a, int sp) { return reward[static_cast<std::size_t>(s * n_actions + a)][static_cast<std::size_t>(sp)]; }

    void validate() const {
        if (n_states <= 0 || n_actions <= 0) throw std::invalid_argument("FiniteMdp: counts must be positive");
        if (discount <= 0.0 || discount >= 1.0) throw std::invalid_argument("FiniteMdp: discount must be in (0,1)");
        if (transition.size() != static_cast<std::size_t>(n_states * n_actions) ||
            reward.size() != static_cast<std::size_t>(n_states * n_actions))
            throw std::invalid_argument("FiniteMdp: table shape mismatch");
        for (const auto& row : transition) check_prob_row(row, n_states, "transition");
        for (const auto& row : reward)
            if (row.size() != static_cast<std::size_t>(n_states)) throw std::invalid_argument("FiniteMdp: reward row shape");
        check_prob_row(initial, n_states, "initial");
    }

    static void check_prob_row(const Vec& row, int n, const char* what) {
        if (row.size() != static_cast<std::size_t>(n)) throw std::invalid_argument(std::string(what) + ": row length mismatch");
        double sum = 0.0;
        for (double p : row) {
            if (p < 0.0) throw std::invalid_argument(std::string(what) + ": negative probability");
            sum += p;
        }
        if (std::abs(sum - 1.0) > kProbTol) throw std::invalid_argument(std::string(what) + ": row does not sum to 1");
    }
};

/// Admissible falsified-state sets. Discrete neighbor lists for tabular
/// states, an L-infinity ball for vector states.
struct DiscreteNeighbors {
    std::vector<std::vector<int>> neighbors;  // per state, must contain the state itself

    void validate(int n_states) const {
        if (neighbors.size() != static_cast<std::size_t>(n_states)) throw std::invalid_argument("DiscreteNeighbors: size mismatch");
        for (int s = 0; s < n_states; ++s) {
            const auto& bs = neighbors[static_cast<std::size_t>(s)];
            if (bs.empty()) throw std::invalid_argument("DiscreteNeighbors: empty neighbor set");
            bool has_self = false;
            for (int t : bs) {
                if (t < 0 || t >= n_states) throw std::invalid_argument("DiscreteNeighbors: state id out of range");
                if (t == s) has_self = true;
            }
            if (!has_self) throw std::invalid_argument("DiscreteNeighbors: set must contain the state itself");
        }
    }

    bool contains(int s, int s_hat) const {
        const auto& bs = neighbors[static_cast<std::size_t>(s)];
        return std::find(bs.begin(), bs.end(), s_hat) != bs.end();
    }

    static DiscreteNeighbors identity(int n_states) {
        DiscreteNeighbors nb;
        nb.neighbors.resize(static_cast<std::size_t>(n_states));
        for (int s = 0; s < n_states; ++s) nb.neighbors[static_cast<std::size_t>(s)] = {s};
        return nb;
    }
};

struct LinfBall {
    double epsilon = 0.0;

    void validate() const {
        if (epsilon < 0.0) throw std::invalid_argument("LinfBall: epsilon must be nonnegative");
    }
};

using PerturbationSet = std::variant<DiscreteNeighbors, LinfBall>;

/// SA-MDP over a finite base MDP (tabular route; vector environments carry
/// their LinfBall budget directly).
struct SaMdp {
    FiniteMdp mdp;
    DiscreteNeighbors perturbation;

    void validate() const {
        mdp.validate();
        perturbation.validate(mdp.n_states);
    }
};

struct TabularPolicy {
    std::vector<Vec> probs;  // per state, distribution over actions

    int n_states() const { return static_cast<int>(probs.size()); }
    const Vec& row(int s) const { return probs[static_cast<std::size_t>(s)]; }

    void validate(int n_states_expected, int n_actions) const {
        if (n_states() != n_states_expected) throw std::invalid_argument("TabularPolicy: state count mismatch");
        for (const auto& r : probs) FiniteMdp::check_prob_row(r, n_actions, "policy");
    }
};

/// Stochastic state-falsification policy nu: state -> distribution over
/// falsified states. Support must stay inside the budget set.
struct TabularAdversary {
    std::vector<Vec> probs;  // per state, distribution over falsified states

    int n_states() const { return static_cast<int>(probs.size()); }
    const Vec& row(int s) const { return probs[static_cast<std::size_t>(s)]; }

    void validate(const DiscreteNeighbors& budget) const {
        int n = static_cast<int>(probs.size());
        for (int s = 0; s < n; ++s) {
            FiniteMdp::check_prob_row(probs[static_cast<std::size_t>(s)], n, "adversary");
            for (int t = 0; t < n; ++t)
                if (probs[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)] > 0.0 && !budget.contains(s, t))
                    throw std::invalid_argument("TabularAdversary: probability mass outside budget set");
        }
    }

    static TabularAdversary identity(int n_states) {
        TabularAdversary nu;
        nu.probs.assign(static_cast<std::size_t>(n_states), Vec(static_cast<std::size_t>(n_states), 0.0));
        for (int s = 0; s < n_states; ++s) nu.probs[static_cast<std::size_t>(s)][static_cast<std::size_t>(s)] = 1.0;
        return nu;
    }

    /// Deterministic map s -> choice[s].
    static TabularAdversary deterministic(const std::vector<int>& choice) {
        TabularAdversary nu;
        auto n = choice.size();
        nu.probs.assign(n, Vec(n, 0.0));
        for (std::size_t s = 0; s < n; ++s) nu.probs[s][static_cast<std::size_t>(choice[s])] = 1.0;
        return nu;
    }
};

struct Step {
    int t = 0;
    int state = 0;
    std::optional<int> falsified_state;
    int action = 0;
    double reward = 0.0;
    int next_state = 0;
};

struct Trajectory {
    std::vector<Step> steps;
    double episode_return = 0.0;
};

// ---------------------------------------------------------------------------
// Operations

inline double discounted_return(const Vec& rewards, double discount) {
    if (discount <= 0.0 || discount >= 1.0) throw std::invalid_argument("discounted_return: discount must be in (0,1)");
    double acc = 0.0;
    double w = 1.0;
    for (double r : rewards) {
        acc += w * r;
        w *= discount;
    }
    return acc;
}

/// Composite behavior policy (pi . nu)(a|s) = sum_shat nu(shat|s) pi(a|shat).
inline TabularPolicy compose_policy(const TabularPolicy& pi, const TabularAdversary& nu) {
    int n_states = nu.n_states();
    if (pi.n_states() != n_states) throw std::invalid_argument("compose_policy: dimension mismatch");
    int n_actions = n_states > 0 ? static_cast<int>(pi.probs[0].size()) : 0;
    TabularPolicy out;
    out.probs.assign(static_cast<std::size_t>(n_states), Vec(static_cast<std::size_t>(n_actions), 0.0));
    for (int s = 0; s < n_states; ++s) {
        for (int sh = 0; sh < n_states; ++sh) {
            double w = nu.row(s)[static_cast<std::size_t>(sh)];
            if (w == 0.0) continue;
            const Vec& pr = pi.row(sh);
            if (static_cast<int>(pr.size()) != n_actions) throw std::invalid_argument("compose_policy: ragged policy");
            for (int a = 0; a < n_actions; ++a) out.probs[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] += w * pr[static_cast<std::size_t>(a)];
        }
    }
    return out;
}

/// Budget-checked variant.
inline TabularPolicy compose_policy(const SaMdp& samdp, const TabularPolicy& pi, const TabularAdversary& nu) {
    nu.validate(samdp.perturbation);
    return compose_policy(pi, nu);
}

/// Componentwise clamp of s_hat into the L-infinity ball around s.
inline Vec project_to_budget(const Vec& s, const Vec& s_hat, double eps) {
    if (eps < 0.0) throw std::invalid_argument("project_to_budget: eps must be nonnegative");
    if (s.size() != s_hat.size()) throw std::invalid_argument("project_to_budget: dimension mismatch");
    Vec out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = std::clamp(s_hat[i], s[i] - eps, s[i] + eps);
    return out;
}

/// One episode of the SA-MDP loop: falsify, act on the falsified state,
/// transition on the true state. Deterministic given the rng state.
inline Trajectory sample_episode(const SaMdp& samdp, const TabularPolicy& pi, const TabularAdversary* nu,
                                 int horizon, Rng& rng) {
    if (horizon < 1) throw std::invalid_argument("sample_episode: horizon must be >= 1");
    const FiniteMdp& m = samdp.mdp;
    Trajectory tr;
    Vec rewards;
    int s = rng.categorical(m.initial);
    for (int t = 0; t < horizon; ++t) {
        Step st;
        st.t = t;
        st.state = s;
        int obs = s;
        if (nu != nullptr) {
            // deterministic rows take no randomness, so an identity adversary
            // replays the exact no-attack trajectory under the same seed
            const Vec& row = nu->row(s);
            auto it = std::find(row.begin(), row.end(), 1.0);
            obs = it != row.end() ? static_cast<int>(it - row.begin()) : rng.categorical(row);
            st.falsified_state = obs;
        }
        st.action = rng.categorical(pi.row(obs));
        int sp = rng.categorical(m.trans(s, st.action));
        st.reward = m.rew(s, st.action, sp);
        st.next_state = sp;
        rewards.push_back(st.reward);
        tr.steps.push_back(st);
        s = sp;
    }
    tr.episode_return = discounted_return(rewards, m.discount);
    return tr;
}

inline Trajectory sample_episode(const SaMdp& samdp, const TabularPolicy& pi, const TabularAdversary* nu,
                                 int horizon, std::uint64_t seed) {
    Rng rng(seed);
    return sample_episode(samdp, pi, nu, horizon, rng);
}

// ---------------------------------------------------------------------------
// Serialization

/// Versioned field-named text format for finite MDPs. Probability tables are
/// flattened row-major.
inline void save_mdp(const FiniteMdp& m, std::ostream& os) {
    os.precision(17);
    os << "samlab-mdp v1\n";
    os << "n_states " << m.n_states << "\n";
    os << "n_actions " << m.n_actions << "\n";
    os << "discount " << m.discount << "\n";
    os << "initial";
    for (double p : m.initial) os << ' ' << p;
    os << "\ntransition";
    for (const auto& row : m.transition)
        for (double p : row) os << ' ' << p;
    os << "\nreward";
    for (const auto& row : m.reward)
        for (double r : row) os << ' ' << r;
    os << "\n";
}

inline void save_mdp(const FiniteMdp& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_mdp: cannot open " + path);
    save_mdp(m, os);
}

inline FiniteMdp load_mdp(std::istream& is) {
    std::string magic, version;
    is >> magic >> version;
    if (magic != "samlab-mdp" || version != "v1") throw std::runtime_error("load_mdp: bad header");
    FiniteMdp m;
    std::string key;
    auto expect = [&](const char* want) {
        is >> key;
        if (key != want) throw std::runtime_error(std::string("load_mdp: expected field ") + want);
    };
    expect("n_states");
    is >> m.n_states;
    expect("n_actions");
    is >> m.n_actions;
    expect("discount");
    is >> m.discount;
    expect("initial");
    m.initial.resize(static_cast<std::size_t>(m.n_states));
    for (auto& p : m.initial) is >> p;
    expect("transition");
    m.transition.assign(static_cast<std::size_t>(m.n_states * m.n_actions), Vec(static_cast<std::size_t>(m.n_states)));
    for (auto& row : m.transition)
        for (auto& p : row) is >> p;
    expect("reward");
    m.reward.assign(static_cast<std::size_t>(m.n_states * m.n_actions), Vec(static_cast<std::size_t>(m.n_states)));
    for (auto& row : m.reward)
        for (auto& r : row) is >> r;
    if (!is) throw std::runtime_error("load_mdp: truncated file");
    m.validate();
    return m;
}

inline FiniteMdp load_mdp(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_mdp: cannot open " + path);
    return load_mdp(is);
}

}  // namespace samlab
