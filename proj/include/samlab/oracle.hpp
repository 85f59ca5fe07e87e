#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "samlab/common.hpp"
#include "samlab/mdp.hpp"

namespace samlab {

// ---------------------------------------------------------------------------
// Policy evaluation and distributions

inline Eigen::MatrixXd policy_transition_matrix(const FiniteMdp& m, const TabularPolicy& pi) {
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(m.n_states, m.n_states);
    for (int s = 0; s < m.n_states; ++s)
        for (int a = 0; a < m.n_actions; ++a) {
            double pa = pi.row(s)[static_cast<std::size_t>(a)];
            if (pa == 0.0) continue;
            const Vec& row = m.trans(s, a);
            for (int sp = 0; sp < m.n_states; ++sp) P(s, sp) += pa * row[static_cast<std::size_t>(sp)];
        }
    return P;
}

inline Eigen::VectorXd policy_reward_vector(const FiniteMdp& m, const TabularPolicy& pi) {
    Eigen::VectorXd r = Eigen::VectorXd::Zero(m.n_states);
    for (int s = 0; s < m.n_states; ++s)
        for (int a = 0; a < m.n_actions; ++a) {
            double pa = pi.row(s)[static_cast<std::size_t>(a)];
            if (pa == 0.0) continue;
            const Vec& pr = m.trans(s, a);
            for (int sp = 0; sp < m.n_states; ++sp) r(s) += pa * pr[static_cast<std::size_t>(sp)] * m.rew(s, a, sp);
        }
    return r;
}

/// Exact solve of V = R_pi + gamma P_pi V.
inline Vec policy_evaluation(const FiniteMdp& m, const TabularPolicy& pi) {
    Eigen::MatrixXd P = policy_transition_matrix(m, pi);
    Eigen::VectorXd r = policy_reward_vector(m, pi);
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(m.n_states, m.n_states) - m.discount * P;
    Eigen::VectorXd v = A.partialPivLu().solve(r);
    double residual = (A * v - r).lpNorm<Eigen::Infinity>();
    if (!std::isfinite(residual) || residual > 1e-10)
        throw std::runtime_error("policy_evaluation: linear solve residual too large");
    return Vec(v.data(), v.data() + v.size());
}

inline double expected_return(const FiniteMdp& m, const TabularPolicy& pi) {
    Vec v = policy_evaluation(m, pi);
    double j = 0.0;
    for (int s = 0; s < m.n_states; ++s) j += m.initial[static_cast<std::size_t>(s)] * v[static_cast<std::size_t>(s)];
    return j;
}

/// d_pi^t = p0 (P_pi)^t.
inline Vec state_distribution_t(const FiniteMdp& m, const TabularPolicy& pi, int t) {
    if (t < 0) throw std::invalid_argument("state_distribution_t: t must be >= 0");
    Eigen::MatrixXd P = policy_transition_matrix(m, pi);
    Eigen::RowVectorXd d = Eigen::Map<const Eigen::RowVectorXd>(m.initial.data(), m.n_states);
    for (int k = 0; k < t; ++k) d = d * P;
    return Vec(d.data(), d.data() + d.size());
}

struct OccupancyMeasure {
    std::vector<Vec> values;  // [s][a]
    bool normalized = true;
    double tail_bound = 0.0;

    double total() const {
        double acc = 0.0;
        for (const auto& row : values)
            for (double v : row) acc += v;
        return acc;
    }
};

/// Discounted state-action visitation, truncated where the geometric tail
/// drops below horizon_tol.
inline OccupancyMeasure occupancy_measure(const FiniteMdp& m, const TabularPolicy& pi, double horizon_tol,
                                          bool normalized = true) {
    if (horizon_tol <= 0.0) throw std::invalid_argument("occupancy_measure: horizon_tol must be positive");
    Eigen::MatrixXd P = policy_transition_matrix(m, pi);
    Eigen::RowVectorXd d = Eigen::Map<const Eigen::RowVectorXd>(m.initial.data(), m.n_states);
    OccupancyMeasure occ;
    occ.normalized = normalized;
    occ.values.assign(static_cast<std::size_t>(m.n_states), Vec(static_cast<std::size_t>(m.n_actions), 0.0));
    double gamma = m.discount;
    double w = 1.0;
    while (w / (1.0 - gamma) > horizon_tol) {
        for (int s = 0; s < m.n_states; ++s)
            for (int a = 0; a < m.n_actions; ++a)
                occ.values[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] += w * d(s) * pi.row(s)[static_cast<std::size_t>(a)];
        d = d * P;
        w *= gamma;
    }
    occ.tail_bound = w / (1.0 - gamma);
    if (normalized)
        for (auto& row : occ.values)
            for (double& v : row) v *= (1.0 - gamma);
    return occ;
}

/// Closed-form (1-gamma)-normalized occupancy via the resolvent solve; used
/// where exactness matters more than the truncation diagnostics.
inline std::vector<Vec> occupancy_exact_normalized(const FiniteMdp& m, const TabularPolicy& pi) {
    Eigen::MatrixXd P = policy_transition_matrix(m, pi);
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(m.n_states, m.n_states) - m.discount * P.transpose();
    Eigen::VectorXd p0 = Eigen::Map<const Eigen::VectorXd>(m.initial.data(), m.n_states);
    Eigen::VectorXd d = A.partialPivLu().solve(p0) * (1.0 - m.discount);
    std::vector<Vec> occ(static_cast<std::size_t>(m.n_states), Vec(static_cast<std::size_t>(m.n_actions), 0.0));
    for (int s = 0; s < m.n_states; ++s)
        for (int a = 0; a < m.n_actions; ++a)
            occ[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] = d(s) * pi.row(s)[static_cast<std::size_t>(a)];
    return occ;
}

// ---------------------------------------------------------------------------
// Divergences

/// KL(p || q) in nats. Requires absolute continuity.
inline double kl_divergence(const Vec& p, const Vec& q) {
    if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] == 0.0) throw std::domain_error("kl_divergence: support violation");
        acc += p[i] * std::log(p[i] / q[i]);
    }
    return acc;
}

inline double total_variation(const Vec& p, const Vec& q) {
    if (p.size() != q.size()) throw std::invalid_argument("total_variation: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
    return 0.5 * acc;
}

// ---------------------------------------------------------------------------
// Attack-MDP construction

/// The constructed decision process whose action space is the falsified-state
/// space and whose dynamics fold in the frozen victim policy.
struct AttackMdp {
    int n_states = 0;
    std::vector<Vec> transition_hat;  // [s * n_states + s_hat] -> prob over s'
    std::vector<Vec> reward_hat;      // [s * n_states + s_hat] -> reward per s'
    double discount = 0.0;
    Vec initial;
    double penalty_C = 0.0;

    /// Reinterpret as a plain finite MDP (actions = falsified states), so an
    /// adversary evaluates exactly like a tabular policy.
    FiniteMdp as_finite() const {
        FiniteMdp m;
        m.n_states = n_states;
        m.n_actions = n_states;
        m.transition = transition_hat;
        m.reward = reward_hat;
        m.discount = discount;
        m.initial = initial;
        return m;
    }
};

/// C below min{min R, min R/(1-g) - g max R/(1-g)} makes every out-of-budget
/// choice strictly suboptimal.
inline double default_penalty_c(const std::vector<Vec>& r_bar, double gamma) {
    double lo = r_bar[0][0], hi = r_bar[0][0];
    for (const auto& row : r_bar)
        for (double r : row) {
            lo = std::min(lo, r);
            hi = std::max(hi, r);
        }
    return lo - (hi - lo) * gamma / (1.0 - gamma) - 1.0;
}

/// Folds the victim policy into dynamics and rewards:
///   p_hat(s'|s,shat) = sum_a pi(a|shat) p(s'|s,a)
///   R_hat(s,shat,s') = sum_a pi(a|shat) p(s'|s,a) rbar(s,a,s') / p_hat(s'|s,shat)
/// with penalty_C outside the budget set and 0 on unreachable triples.
inline AttackMdp build_attack_mdp(const SaMdp& samdp, const TabularPolicy& pi, const std::vector<Vec>& r_bar,
                                  double penalty_C) {
    const FiniteMdp& m = samdp.mdp;
    pi.validate(m.n_states, m.n_actions);
    if (r_bar.size() != static_cast<std::size_t>(m.n_states * m.n_actions))
        throw std::invalid_argument("build_attack_mdp: r_bar shape mismatch");
    AttackMdp hat;
    hat.n_states = m.n_states;
    hat.discount = m.discount;
    hat.initial = m.initial;
    hat.penalty_C = penalty_C;
    hat.transition_hat.assign(static_cast<std::size_t>(m.n_states * m.n_states), Vec(static_cast<std::size_t>(m.n_states), 0.0));
    hat.reward_hat.assign(static_cast<std::size_t>(m.n_states * m.n_states), Vec(static_cast<std::size_t>(m.n_states), 0.0));
    for (int s = 0; s < m.n_states; ++s) {
        for (int sh = 0; sh < m.n_states; ++sh) {
            Vec& trow = hat.transition_hat[static_cast<std::size_t>(s * m.n_states + sh)];
            Vec& rrow = hat.reward_hat[static_cast<std::size_t>(s * m.n_states + sh)];
            Vec num(static_cast<std::size_t>(m.n_states), 0.0);
            for (int a = 0; a < m.n_actions; ++a) {
                double pa = pi.row(sh)[static_cast<std::size_t>(a)];
                if (pa == 0.0) continue;
                const Vec& pr = m.trans(s, a);
                for (int sp = 0; sp < m.n_states; ++sp) {
                    double w = pa * pr[static_cast<std::size_t>(sp)];
                    trow[static_cast<std::size_t>(sp)] += w;
                    num[static_cast<std::size_t>(sp)] +=
                        w * r_bar[static_cast<std::size_t>(s * m.n_actions + a)][static_cast<std::size_t>(sp)];
                }
            }
            bool in_budget = samdp.perturbation.contains(s, sh);
            for (int sp = 0; sp < m.n_states; ++sp) {
                if (!in_budget) {
                    rrow[static_cast<std::size_t>(sp)] = penalty_C;
                } else if (trow[static_cast<std::size_t>(sp)] > 0.0) {
                    rrow[static_cast<std::size_t>(sp)] = num[static_cast<std::size_t>(sp)] / trow[static_cast<std::size_t>(sp)];
                }  // unreachable triples keep reward 0
            }
        }
    }
    return hat;
}

// ---------------------------------------------------------------------------
// Brute-force adversary enumeration

inline constexpr std::uint64_t kEnumerationCap = 1000000;

/// All deterministic in-budget maps s -> shat in B(s), as index choices into
/// the neighbor lists expanded to state ids.
inline std::vector<std::vector<int>> enumerate_deterministic_choices(const SaMdp& samdp,
                                                                     std::uint64_t cap = kEnumerationCap) {
    const auto& B = samdp.perturbation.neighbors;
    std::uint64_t count = 1;
    for (const auto& bs : B) {
        count *= bs.size();
        if (count > cap) throw std::runtime_error("enumerate_deterministic_adversaries: enumeration cap exceeded");
    }
    int n = static_cast<int>(B.size());
    std::vector<std::vector<int>> out;
    out.reserve(count);
    std::vector<std::size_t> idx(static_cast<std::size_t>(n), 0);
    while (true) {
        std::vector<int> choice(static_cast<std::size_t>(n));
        for (int s = 0; s < n; ++s) choice[static_cast<std::size_t>(s)] = B[static_cast<std::size_t>(s)][idx[static_cast<std::size_t>(s)]];
        out.push_back(std::move(choice));
        int s = 0;
        for (; s < n; ++s) {
            if (++idx[static_cast<std::size_t>(s)] < B[static_cast<std::size_t>(s)].size()) break;
            idx[static_cast<std::size_t>(s)] = 0;
        }
        if (s == n) break;
    }
    return out;
}

inline std::vector<TabularAdversary> enumerate_deterministic_adversaries(const SaMdp& samdp,
                                                                         std::uint64_t cap = kEnumerationCap) {
    std::vector<TabularAdversary> out;
    for (const auto& choice : enumerate_deterministic_choices(samdp, cap))
        out.push_back(TabularAdversary::deterministic(choice));
    return out;
}

// ---------------------------------------------------------------------------
// Constructive checks

struct Lemma1Report {
    std::uint64_t instance_hash = 0;
    int n_adversaries = 0;
    double max_residual = 0.0;
    bool values_match = false;
    bool argmax_agree = false;
    std::string counterexample;  // empty on pass

    bool pass() const { return values_match && argmax_agree; }
};

namespace detail {
inline std::uint64_t hash_mdp(const FiniteMdp& m) {
    std::uint64_t h = fnv1a(&m.n_states, sizeof m.n_states);
    h = fnv1a(&m.n_actions, sizeof m.n_actions, h);
    h = fnv1a(&m.discount, sizeof m.discount, h);
    for (const auto& row : m.transition) h = fnv1a(row.data(), row.size() * sizeof(double), h);
    for (const auto& row : m.reward) h = fnv1a(row.data(), row.size() * sizeof(double), h);
    h = fnv1a(m.initial.data(), m.initial.size() * sizeof(double), h);
    return h;
}
}  // namespace detail

/// Checks, for every deterministic in-budget adversary, that the value of nu
/// in the constructed attack MDP equals the value of the composite policy in
/// the base MDP under the adversary-specified reward, and that the argmax
/// sets over the two objectives coincide.
inline Lemma1Report verify_lemma1(const SaMdp& samdp, const TabularPolicy& pi, const std::vector<Vec>& r_bar,
                                  double tol) {
    Lemma1Report rep;
    rep.instance_hash = detail::hash_mdp(samdp.mdp);

    FiniteMdp m_bar = samdp.mdp;  // base MDP rewarded by r_bar
    m_bar.reward = r_bar;
    AttackMdp hat = build_attack_mdp(samdp, pi, r_bar, default_penalty_c(r_bar, samdp.mdp.discount));
    FiniteMdp hat_m = hat.as_finite();

    auto choices = enumerate_deterministic_choices(samdp);
    rep.n_adversaries = static_cast<int>(choices.size());
    std::vector<double> vals_hat, vals_m;
    for (const auto& choice : choices) {
        TabularAdversary nu = TabularAdversary::deterministic(choice);
        TabularPolicy nu_as_policy{nu.probs};
        double v_hat = expected_return(hat_m, nu_as_policy);
        double v_m = expected_return(m_bar, compose_policy(pi, nu));
        vals_hat.push_back(v_hat);
        vals_m.push_back(v_m);
        double resid = std::abs(v_hat - v_m);
        rep.max_residual = std::max(rep.max_residual, resid);
        if (resid > tol && rep.counterexample.empty()) {
            std::ostringstream os;
            os << "value mismatch " << resid << " for adversary map";
            for (int c : choice) os << ' ' << c;
            os << "\n";
            std::ostringstream dump;
            save_mdp(samdp.mdp, dump);
            os << dump.str();
            rep.counterexample = os.str();
        }
    }
    rep.values_match = rep.max_residual <= tol;

    double best_hat = *std::max_element(vals_hat.begin(), vals_hat.end());
    double best_m = *std::max_element(vals_m.begin(), vals_m.end());
    const double tie_tol = 1e-9;
    rep.argmax_agree = true;
    for (std::size_t i = 0; i < vals_hat.size(); ++i) {
        bool in_hat = vals_hat[i] >= best_hat - tie_tol;
        bool in_m = vals_m[i] >= best_m - tie_tol;
        if (in_hat != in_m) {
            rep.argmax_agree = false;
            if (rep.counterexample.empty()) {
                std::ostringstream os;
                os << "argmax disagreement at adversary index " << i << " (v_hat=" << vals_hat[i]
                   << ", v_m=" << vals_m[i] << ")\n";
                rep.counterexample = os.str();
            }
        }
    }
    return rep;
}

struct Theorem2Report {
    std::uint64_t instance_hash = 0;
    bool applicable = true;  // false when absolute continuity fails
    double lhs = 0.0;
    double rhs = 0.0;        // statement constant: sum_t gamma^t/(1-gamma) E[KL]
    double rhs_tight = 0.0;  // appendix constant: 1/(1-gamma^2) sum_t gamma^t E[KL]
    bool holds = false;
    bool holds_tight = false;

    bool pass() const { return !applicable || holds; }
};

/// Checks the time-discounted sensitivity bound. LHS expectations are taken
/// under (1-gamma)-normalized occupancy measures; RHS truncates the time sum
/// once the geometric tail is below horizon_tol.
inline Theorem2Report verify_theorem2(const SaMdp& samdp, const TabularPolicy& pi, const TabularAdversary& nu,
                                      const std::vector<Vec>& r_tgt, double r_bar_tgt, double horizon_tol) {
    const FiniteMdp& m = samdp.mdp;
    if (r_tgt.size() != static_cast<std::size_t>(m.n_states))
        throw std::invalid_argument("verify_theorem2: r_tgt must be indexed [state][action]");
    for (const auto& row : r_tgt)
        for (double r : row)
            if (std::abs(r) > r_bar_tgt) throw std::invalid_argument("verify_theorem2: |r_tgt| exceeds r_bar_tgt");
    if (r_bar_tgt <= 0.0) throw std::invalid_argument("verify_theorem2: r_bar_tgt must be positive");

    Theorem2Report rep;
    rep.instance_hash = detail::hash_mdp(m);
    TabularPolicy comp = compose_policy(samdp, pi, nu);

    // Absolute continuity of pi wrt pi.nu at every state (KL(pi || pi.nu)).
    for (int s = 0; s < m.n_states; ++s)
        for (int a = 0; a < m.n_actions; ++a)
            if (comp.row(s)[static_cast<std::size_t>(a)] == 0.0 && pi.row(s)[static_cast<std::size_t>(a)] > 0.0) {
                rep.applicable = false;
                return rep;
            }

    auto expect_rtgt = [&](const TabularPolicy& pol) {
        auto occ = occupancy_exact_normalized(m, pol);
        double acc = 0.0;
        for (int s = 0; s < m.n_states; ++s)
            for (int a = 0; a < m.n_actions; ++a)
                acc += occ[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] * r_tgt[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
        return acc;
    };
    double gain = expect_rtgt(comp) - expect_rtgt(pi);
    rep.lhs = (gain / (std::sqrt(2.0) * r_bar_tgt)) * (gain / (std::sqrt(2.0) * r_bar_tgt));

    // Per-state KL, then the time sum over d_pi^t.
    Vec kl_per_state(static_cast<std::size_t>(m.n_states), 0.0);
    double max_kl = 0.0;
    for (int s = 0; s < m.n_states; ++s) {
        kl_per_state[static_cast<std::size_t>(s)] = kl_divergence(pi.row(s), comp.row(s));
        max_kl = std::max(max_kl, kl_per_state[static_cast<std::size_t>(s)]);
    }
    double gamma = m.discount;
    Eigen::MatrixXd P = policy_transition_matrix(m, pi);
    Eigen::RowVectorXd d = Eigen::Map<const Eigen::RowVectorXd>(m.initial.data(), m.n_states);
    double series = 0.0;  // sum_t gamma^t E_{d_pi^t}[KL]
    double w = 1.0;
    double tail_scale = std::max(max_kl, 1e-300);
    while (w / ((1.0 - gamma) * (1.0 - gamma)) * tail_scale > horizon_tol) {
        double e_kl = 0.0;
        for (int s = 0; s < m.n_states; ++s) e_kl += d(s) * kl_per_state[static_cast<std::size_t>(s)];
        series += w * e_kl;
        d = d * P;
        w *= gamma;
    }
    rep.rhs = series / (1.0 - gamma);
    rep.rhs_tight = series / (1.0 - gamma * gamma);
    rep.holds = rep.lhs <= rep.rhs + 1e-9;
    rep.holds_tight = rep.lhs <= rep.rhs_tight + 1e-9;
    return rep;
}

// ---------------------------------------------------------------------------
// Report serialization (consumed by the CLI `verify` subcommand)

inline std::string to_text(const Lemma1Report& r) {
    std::ostringstream os;
    os << "lemma1-report v1\n";
    os << "instance " << hex64(r.instance_hash) << "\n";
    os << "adversaries " << r.n_adversaries << "\n";
    os << "max_residual " << r.max_residual << "\n";
    os << "argmax_agree " << (r.argmax_agree ? 1 : 0) << "\n";
    os << "result " << (r.pass() ? "pass" : "fail") << "\n";
    if (!r.counterexample.empty()) os << "counterexample\n" << r.counterexample;
    return os.str();
}

inline std::string to_text(const Theorem2Report& r) {
    std::ostringstream os;
    os << "theorem2-report v1\n";
    os << "instance " << hex64(r.instance_hash) << "\n";
    os << "applicable " << (r.applicable ? 1 : 0) << "\n";
    os << "lhs " << r.lhs << "\n";
    os << "rhs " << r.rhs << "\n";
    os << "rhs_tight " << r.rhs_tight << "\n";
    os << "result " << (r.pass() ? "pass" : "fail") << "\n";
    return os.str();
}

}  // namespace samlab
