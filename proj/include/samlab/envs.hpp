#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "samlab/mdp.hpp"
#include "samlab/rng.hpp"
#include "samlab/trajectory_io.hpp"

namespace samlab {

/// Per-step outcome with both task reward channels: the victim's task and the
/// opposing adversary task share the dynamics but not the goal.
struct EnvStep {
    Vec next_obs;
    double reward = 0.0;            // victim-task channel
    double adversary_reward = 0.0;  // opposing-task channel
    bool done = false;
    bool reached_victim_goal = false;
    bool reached_adversary_goal = false;
};

// ---------------------------------------------------------------------------
// GridWorld

/// Coordinate-state gridworld with two opposing goal cells. Observations are
/// normalized (x,y) in [0,1]^2 so L-inf budgets and input gradients make
/// sense; an exact tabular view is available for oracle cross-checks.
class GridWorld {
  public:
    static constexpr int kUp = 0, kDown = 1, kLeft = 2, kRight = 3;

    int width = 7;
    int height = 7;
    std::set<std::pair<int, int>> walls;
    std::pair<int, int> goal_victim{6, 6};
    std::pair<int, int> goal_adversary{0, 0};
    std::pair<int, int> start{3, 3};
    double step_reward = -0.01;
    double goal_reward = 1.0;
    int max_steps = 100;

    void validate() const {
        if (width < 2 || height < 2) throw std::invalid_argument("GridWorld: degenerate grid");
        if (goal_victim == goal_adversary) throw std::invalid_argument("GridWorld: goals must be distinct");
        for (auto g : {goal_victim, goal_adversary, start}) {
            if (!in_bounds(g)) throw std::invalid_argument("GridWorld: cell out of bounds");
            if (walls.count(g)) throw std::invalid_argument("GridWorld: goal or start inside a wall");
        }
    }

    bool in_bounds(std::pair<int, int> c) const {
        return c.first >= 0 && c.first < width && c.second >= 0 && c.second < height;
    }

    int n_actions() const { return 4; }
    int obs_dim() const { return 2; }
    bool discrete_actions() const { return true; }

    Vec obs_of(std::pair<int, int> c) const {
        return {static_cast<double>(c.first) / (width - 1), static_cast<double>(c.second) / (height - 1)};
    }

    std::pair<int, int> cell_of(const Vec& obs) const {
        int x = static_cast<int>(std::lround(std::clamp(obs[0], 0.0, 1.0) * (width - 1)));
        int y = static_cast<int>(std::lround(std::clamp(obs[1], 0.0, 1.0) * (height - 1)));
        return {x, y};
    }

    Vec reset(Rng&) {
        cell_ = start;
        t_ = 0;
        return obs_of(cell_);
    }

    std::pair<int, int> apply_move(std::pair<int, int> c, int action) const {
        auto n = c;
        switch (action) {
            case kUp: n.second += 1; break;
            case kDown: n.second -= 1; break;
            case kLeft: n.first -= 1; break;
            case kRight: n.first += 1; break;
            default: throw std::invalid_argument("GridWorld: bad action");
        }
        if (!in_bounds(n) || walls.count(n)) return c;  // blocked
        return n;
    }

    EnvStep step(int action, Rng&) {
        cell_ = apply_move(cell_, action);
        ++t_;
        EnvStep out;
        out.next_obs = obs_of(cell_);
        out.reached_victim_goal = cell_ == goal_victim;
        out.reached_adversary_goal = cell_ == goal_adversary;
        out.reward = step_reward + (out.reached_victim_goal ? goal_reward : 0.0);
        out.adversary_reward = step_reward + (out.reached_adversary_goal ? goal_reward : 0.0);
        out.done = out.reached_victim_goal || out.reached_adversary_goal || t_ >= max_steps;
        return out;
    }

    /// The same grid with the task goals exchanged; used to train a target
    /// policy for the opposing task.
    GridWorld swapped_goals() const {
        GridWorld g = *this;
        std::swap(g.goal_victim, g.goal_adversary);
        return g;
    }

    int state_index(std::pair<int, int> c) const { return c.second * width + c.first; }
    std::pair<int, int> cell_of_index(int s) const { return {s % width, s / width}; }

    /// Exact tabular view of the victim task under a fixed discount. Goal
    /// cells are absorbing with zero reward, mirroring episode termination.
    /// Budget: cells within Chebyshev distance `budget_radius` (self included).
    SaMdp tabular_view(double discount, int budget_radius = 1) const {
        int n = width * height;
        FiniteMdp m;
        m.n_states = n;
        m.n_actions = 4;
        m.discount = discount;
        m.initial.assign(static_cast<std::size_t>(n), 0.0);
        m.initial[static_cast<std::size_t>(state_index(start))] = 1.0;
        m.transition.assign(static_cast<std::size_t>(n) * 4, Vec(static_cast<std::size_t>(n), 0.0));
        m.reward.assign(static_cast<std::size_t>(n) * 4, Vec(static_cast<std::size_t>(n), 0.0));
        for (int s = 0; s < n; ++s) {
            auto c = cell_of_index(s);
            bool terminal = c == goal_victim || c == goal_adversary || walls.count(c);
            for (int a = 0; a < 4; ++a) {
                auto& row = m.transition[static_cast<std::size_t>(s) * 4 + static_cast<std::size_t>(a)];
                auto& rew = m.reward[static_cast<std::size_t>(s) * 4 + static_cast<std::size_t>(a)];
                if (terminal) {
                    row[static_cast<std::size_t>(s)] = 1.0;
                    continue;
                }
                auto nc = apply_move(c, a);
                int sp = state_index(nc);
                row[static_cast<std::size_t>(sp)] = 1.0;
                rew[static_cast<std::size_t>(sp)] = step_reward + (nc == goal_victim ? goal_reward : 0.0);
            }
        }
        m.validate();
        SaMdp sa;
        sa.mdp = std::move(m);
        sa.perturbation.neighbors.resize(static_cast<std::size_t>(n));
        for (int s = 0; s < n; ++s) {
            auto c = cell_of_index(s);
            for (int dy = -budget_radius; dy <= budget_radius; ++dy)
                for (int dx = -budget_radius; dx <= budget_radius; ++dx) {
                    std::pair<int, int> nb{c.first + dx, c.second + dy};
                    if (in_bounds(nb)) sa.perturbation.neighbors[static_cast<std::size_t>(s)].push_back(state_index(nb));
                }
        }
        sa.perturbation.validate(n);
        return sa;
    }

  private:
    std::pair<int, int> cell_{0, 0};
    int t_ = 0;
};

// ---------------------------------------------------------------------------
// PointMass

/// Deterministic 2-D point mass under Euler integration. State is
/// [px, py, vx, vy]; force action clipped to [-1,1]^2; reward is progress
/// toward the goal (decrease in distance) plus a bonus on goal-radius entry.
class PointMass {
  public:
    Vec goal_victim{0.8, 0.8};
    Vec goal_adversary{-0.8, -0.8};
    Vec start{0.0, 0.0};
    double dt = 0.1;
    double damping = 0.9;
    double goal_radius = 0.1;
    double goal_bonus = 1.0;
    int max_steps = 100;

    int obs_dim() const { return 4; }
    int action_dim() const { return 2; }
    bool discrete_actions() const { return false; }

    Vec reset(Rng&) {
        pos_ = start;
        vel_ = {0.0, 0.0};
        t_ = 0;
        return obs();
    }

    EnvStep step(const Vec& force, Rng&) {
        if (force.size() != 2) throw std::invalid_argument("PointMass: force must be 2-d");
        double d_v0 = dist(pos_, goal_victim);
        double d_a0 = dist(pos_, goal_adversary);
        for (int i = 0; i < 2; ++i) {
            double f = std::clamp(force[static_cast<std::size_t>(i)], -1.0, 1.0);
            vel_[static_cast<std::size_t>(i)] = damping * vel_[static_cast<std::size_t>(i)] + dt * f;
            pos_[static_cast<std::size_t>(i)] += dt * vel_[static_cast<std::size_t>(i)];
        }
        ++t_;
        EnvStep out;
        out.next_obs = obs();
        out.reached_victim_goal = dist(pos_, goal_victim) < goal_radius;
        out.reached_adversary_goal = dist(pos_, goal_adversary) < goal_radius;
        out.reward = (d_v0 - dist(pos_, goal_victim)) + (out.reached_victim_goal ? goal_bonus : 0.0);
        out.adversary_reward = (d_a0 - dist(pos_, goal_adversary)) + (out.reached_adversary_goal ? goal_bonus : 0.0);
        out.done = out.reached_victim_goal || out.reached_adversary_goal || t_ >= max_steps;
        return out;
    }

    PointMass swapped_goals() const {
        PointMass p = *this;
        std::swap(p.goal_victim, p.goal_adversary);
        return p;
    }

  private:
    static double dist(const Vec& a, const Vec& b) {
        return std::hypot(a[0] - b[0], a[1] - b[1]);
    }
    Vec obs() const { return {pos_[0], pos_[1], vel_[0], vel_[1]}; }

    Vec pos_{0.0, 0.0};
    Vec vel_{0.0, 0.0};
    int t_ = 0;
};

// ---------------------------------------------------------------------------
// Random tabular SA-MDP generator

struct RandomMdpSpec {
    int n_states = 4;
    int n_actions = 2;
    int budget_cap = 3;  // |B(s)| <= budget_cap
    double discount = 0.9;
    double reward_lo = 0.0;
    double reward_hi = 1.0;
    double sparsity = 0.0;  // chance of zeroing a transition entry before renormalizing
    std::uint64_t seed = 0;

    void validate() const {
        if (n_states < 1 || n_states > 6) throw std::invalid_argument("RandomMdpSpec: n_states out of [1,6]");
        if (n_actions < 1 || n_actions > 3) throw std::invalid_argument("RandomMdpSpec: n_actions out of [1,3]");
        if (budget_cap < 1 || budget_cap > 3) throw std::invalid_argument("RandomMdpSpec: budget cap out of [1,3]");
        if (discount <= 0.0 || discount >= 1.0) throw std::invalid_argument("RandomMdpSpec: discount out of (0,1)");
        if (reward_hi < reward_lo) throw std::invalid_argument("RandomMdpSpec: empty reward range");
        if (sparsity < 0.0 || sparsity >= 1.0) throw std::invalid_argument("RandomMdpSpec: sparsity out of [0,1)");
    }
};

inline SaMdp generate_random_samdp(const RandomMdpSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    FiniteMdp m;
    m.n_states = spec.n_states;
    m.n_actions = spec.n_actions;
    m.discount = spec.discount;
    std::size_t ns = static_cast<std::size_t>(spec.n_states);

    m.initial.assign(ns, 0.0);
    double norm = 0.0;
    for (double& p : m.initial) {
        p = -std::log(1.0 - rng.uniform());  // unit exponential -> Dirichlet(1)
        norm += p;
    }
    for (double& p : m.initial) p /= norm;

    m.transition.assign(ns * static_cast<std::size_t>(spec.n_actions), Vec(ns, 0.0));
    m.reward.assign(ns * static_cast<std::size_t>(spec.n_actions), Vec(ns, 0.0));
    for (auto& row : m.transition) {
        double sum = 0.0;
        for (double& p : row) {
            p = -std::log(1.0 - rng.uniform());
            if (spec.sparsity > 0.0 && rng.uniform() < spec.sparsity) p = 0.0;
            sum += p;
        }
        if (sum <= 0.0) {
            row[static_cast<std::size_t>(rng.uniform_int(0, spec.n_states - 1))] = 1.0;
            sum = 1.0;
        }
        for (double& p : row) p /= sum;
    }
    for (auto& row : m.reward)
        for (double& r : row) r = rng.uniform(spec.reward_lo, spec.reward_hi);
    m.validate();

    SaMdp sa;
    sa.mdp = std::move(m);
    sa.perturbation.neighbors.resize(ns);
    for (int s = 0; s < spec.n_states; ++s) {
        auto& nb = sa.perturbation.neighbors[static_cast<std::size_t>(s)];
        nb.push_back(s);
        int extra = rng.uniform_int(0, std::min(spec.budget_cap, spec.n_states) - 1);
        while (static_cast<int>(nb.size()) < 1 + extra) {
            int cand = rng.uniform_int(0, spec.n_states - 1);
            if (std::find(nb.begin(), nb.end(), cand) == nb.end()) nb.push_back(cand);
        }
        std::sort(nb.begin(), nb.end());
    }
    sa.perturbation.validate(spec.n_states);
    return sa;
}

// ---------------------------------------------------------------------------
// Demonstration recorder

/// Rolls out `actor` in `env` and records trajectories. The actor concept:
/// `Vec act(const Vec& obs, Rng&)` for continuous-action envs, or
/// `int act(...)` for discrete ones; NetPolicy adapters in attacks.hpp fit.
/// When with_actions is false the recorded steps carry no actions (ILfO).
template <typename Env, typename Actor>
Demonstration record_demonstrations(Env env, Actor&& actor, int n_episodes, bool with_actions,
                                    std::uint64_t seed, double discount) {
    if (n_episodes < 1) throw std::invalid_argument("record_demonstrations: n_episodes must be >= 1");
    Demonstration demo;
    demo.actions_present = with_actions;
    Rng rng(seed);
    for (int e = 0; e < n_episodes; ++e) {
        VecTrajectory ep;
        Vec obs = env.reset(rng);
        double w = 1.0;
        for (int t = 0;; ++t) {
            VecStep st;
            st.t = t;
            st.state = obs;
            EnvStep res;
            if constexpr (requires(Env& en, Rng& r) { en.step(0, r); }) {
                int a = actor.act(obs, rng);
                res = env.step(a, rng);
                if (with_actions) st.action = Vec{static_cast<double>(a)};
            } else {
                Vec a = actor.act(obs, rng);
                res = env.step(a, rng);
                if (with_actions) st.action = a;
            }
            st.reward = res.reward;
            st.next_state = res.next_obs;
            ep.episode_return += w * res.reward;
            ep.undiscounted_return += res.reward;
            w *= discount;
            obs = res.next_obs;
            ep.steps.push_back(std::move(st));
            if (res.done) break;
        }
        demo.episodes.push_back(std::move(ep));
    }
    demo.validate();
    return demo;
}

}  // namespace samlab
