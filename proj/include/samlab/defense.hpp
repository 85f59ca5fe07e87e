#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "samlab/attacks.hpp"
#include "samlab/net.hpp"
#include "samlab/oracle.hpp"
#include "samlab/ppo.hpp"

namespace samlab {

struct DefenseConfig {
    double lambda_reg = 0.3;
    double discount_reg = 0.99;  // defaults to the task discount unless set apart
    double epsilon = 0.3;        // L-inf budget of the anticipated adversary
    int pgd_steps = 5;           // inner maximization: K sign steps of eps/K
    bool time_discounted = true; // false gives the uniform-smoothing baseline
    // When set, the inner max runs exhaustively over these candidates instead
    // of PGD (discrete perturbation sets).
    std::function<std::vector<Vec>(const Vec&)> candidates;
    // Discounted weights below this threshold skip the inner max entirely.
    double weight_floor = 1e-6;

    void validate() const {
        if (lambda_reg < 0.0) throw std::invalid_argument("DefenseConfig: lambda_reg must be >= 0");
        if (discount_reg <= 0.0 || discount_reg >= 1.0) throw std::invalid_argument("DefenseConfig: discount_reg out of (0,1)");
        if (epsilon < 0.0) throw std::invalid_argument("DefenseConfig: negative budget");
        if (pgd_steps < 1) throw std::invalid_argument("DefenseConfig: pgd_steps must be >= 1");
    }
};

namespace detail {

struct InnerMaxResult {
    Vec s_hat;
    double kl = 0.0;
};

/// KL(p_clean || policy(s_hat)) with the clean branch held constant, plus the
/// gradient of that KL wrt the raw network output at s_hat.
inline double kl_at(const NetPolicy& policy, const Vec& p_clean_probs, const GaussianHead* clean_head,
                    const Vec& s_hat, Vec* dkl_dout) {
    Vec out = policy.net.forward(s_hat);
    if (policy.head == HeadKind::categorical) {
        Vec q = softmax(out);
        if (dkl_dout) *dkl_dout = kl_categorical_grad_q_logits(p_clean_probs, q);
        return kl_categorical(p_clean_probs, q);
    }
    GaussianHead q = gaussian_head(out);
    if (dkl_dout) *dkl_dout = kl_gaussian_grad_b_raw(*clean_head, q);
    return kl_gaussian(*clean_head, q);
}

/// Inner maximization of the smoothness KL over the budget around s.
inline InnerMaxResult inner_max(const NetPolicy& policy, const Vec& s, const DefenseConfig& cfg, Rng& rng) {
    Vec p_clean;
    GaussianHead clean_head;
    if (policy.head == HeadKind::categorical) {
        p_clean = policy.action_probs(s);
    } else {
        clean_head = policy.gaussian(s);
    }

    InnerMaxResult best;
    best.s_hat = s;
    best.kl = 0.0;

    if (cfg.candidates) {
        for (const Vec& cand : cfg.candidates(s)) {
            double kl = kl_at(policy, p_clean, &clean_head, cand, nullptr);
            if (kl > best.kl) {
                best.kl = kl;
                best.s_hat = cand;
            }
        }
        return best;
    }

    if (cfg.epsilon == 0.0) return best;
    double step = cfg.epsilon / static_cast<double>(cfg.pgd_steps);
    Vec s_hat = s;
    for (double& x : s_hat) x += rng.uniform(-cfg.epsilon, cfg.epsilon);
    for (int k = 0; k < cfg.pgd_steps; ++k) {
        Vec dkl_dout;
        kl_at(policy, p_clean, &clean_head, s_hat, &dkl_dout);
        GradientTape tape = policy.net.backward(dkl_dout);
        for (std::size_t i = 0; i < s_hat.size(); ++i) {
            double g = tape.input_grad[i];
            s_hat[i] += step * (g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
        }
        s_hat = project_to_budget(s, s_hat, cfg.epsilon);
    }
    best.s_hat = s_hat;
    best.kl = kl_at(policy, p_clean, &clean_head, s_hat, nullptr);
    if (best.kl < 0.0) best.kl = 0.0;
    return best;
}

}  // namespace detail

/// Smoothness penalty for one state-time pair: weight(t) * max KL over the
/// budget; returns the value and accumulates the parameter gradient (clean
/// branch gradient-stopped) into grad.
inline double tdrt_state_penalty(const NetPolicy& policy, const Vec& s, int t, const DefenseConfig& cfg,
                                 Rng& rng, Vec* grad, double scale = 1.0) {
    cfg.validate();
    double w = cfg.time_discounted ? std::pow(cfg.discount_reg, static_cast<double>(t)) : 1.0;
    if (w < cfg.weight_floor) return 0.0;
    detail::InnerMaxResult im = detail::inner_max(policy, s, cfg, rng);
    if (grad && im.kl > 0.0) {
        Vec p_clean;
        GaussianHead clean_head;
        if (policy.head == HeadKind::categorical) {
            p_clean = policy.action_probs(s);
        } else {
            clean_head = policy.gaussian(s);
        }
        Vec dkl_dout;
        detail::kl_at(policy, p_clean, &clean_head, im.s_hat, &dkl_dout);
        for (double& g : dkl_dout) g *= w * scale;
        GradientTape tape = policy.net.backward(dkl_dout);
        for (std::size_t i = 0; i < grad->size(); ++i) (*grad)[i] += tape.param_grad[i];
    }
    return w * im.kl;
}

/// Regularizer hook for ppo_update: mean over the minibatch of the per-state
/// penalties, scaled by lambda. ppo_update subtracts it from the ascent
/// objective, realizing the defended objective surrogate - lambda * reg.
inline Regularizer make_tdrt_regularizer(DefenseConfig cfg, std::uint64_t seed) {
    cfg.validate();
    auto rng = std::make_shared<Rng>(seed);
    return [cfg, rng](const NetPolicy& policy, const std::vector<const RolloutSample*>& mb, Vec& grad) {
        if (mb.empty()) return 0.0;
        double inv = 1.0 / static_cast<double>(mb.size());
        double total = 0.0;
        for (const RolloutSample* s : mb)
            total += tdrt_state_penalty(policy, s->state, s->t, cfg, *rng, &grad, cfg.lambda_reg * inv);
        return cfg.lambda_reg * total * inv;
    };
}

/// PPO with the time-discounted smoothness regularizer (Algorithm 2 shape).
/// lambda 0 runs vanilla PPO bit-identically.
template <typename Env>
TrainResult tdrt_train(Env& env, const PpoConfig& ppo_cfg, const DefenseConfig& defense_cfg, bool discrete,
                       int obs_dim, int action_out_dim, std::vector<int> hidden = {64, 64}) {
    defense_cfg.validate();
    Regularizer reg = nullptr;
    if (defense_cfg.lambda_reg > 0.0) reg = make_tdrt_regularizer(defense_cfg, ppo_cfg.seed ^ 0xd1b54a32d192ed03ull);
    return ppo_train(env, ppo_cfg, discrete, obs_dim, action_out_dim, reg, hidden);
}

/// Monte-Carlo estimate of the adversary's objective gain
/// E_{attacked}[R_tgt] - E_{clean}[R_tgt], paired episode seeds.
template <typename Env>
double adversary_gain(Env env, const NetPolicy& victim, const AdversaryFn& adversary, int n_episodes,
                      std::uint64_t seed, double discount) {
    if (n_episodes < 1) throw std::invalid_argument("adversary_gain: n_episodes must be >= 1");
    auto rollout = [&](bool attacked, std::uint64_t ep_seed) {
        Rng rng(ep_seed);
        Env e = env;
        Vec obs = e.reset(rng);
        double ret = 0.0, w = 1.0;
        while (true) {
            Vec s_hat = attacked ? adversary(obs, rng) : obs;
            EnvStep res;
            if constexpr (requires(Env& en, Rng& r) { en.step(0, r); }) {
                res = e.step(victim.sample_discrete(s_hat, rng), rng);
            } else {
                res = e.step(victim.sample_continuous(s_hat, rng), rng);
            }
            ret += w * res.adversary_reward;
            w *= discount;
            obs = res.next_obs;
            if (res.done) break;
        }
        return ret;
    };
    double gain = 0.0;
    for (int e = 0; e < n_episodes; ++e) {
        std::uint64_t ep_seed = seed + static_cast<std::uint64_t>(e);
        gain += rollout(true, ep_seed) - rollout(false, ep_seed);
    }
    return gain / n_episodes;
}

}  // namespace samlab
