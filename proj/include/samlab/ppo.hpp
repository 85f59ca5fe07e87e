#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "samlab/net.hpp"
#include "samlab/rng.hpp"

namespace samlab {

struct PpoConfig {
    double clip_eps = 0.2;
    int epochs_per_iter = 4;
    int minibatch_size = 64;
    double lr_policy = 3e-3;
    double lr_value = 1e-2;
    double discount = 0.99;
    double entropy_coef = 0.01;
    int iters = 100;
    int rollout_steps = 1024;
    // Deviation switch: per-batch advantage normalization (mean 0, std 1).
    bool normalize_advantages = true;
    bool adam = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (clip_eps <= 0.0 || clip_eps >= 1.0) throw std::invalid_argument("PpoConfig: clip_eps out of (0,1)");
        if (epochs_per_iter < 1 || minibatch_size < 1 || iters < 1 || rollout_steps < 1)
            throw std::invalid_argument("PpoConfig: counts must be positive");
        if (lr_policy <= 0.0 || lr_value <= 0.0) throw std::invalid_argument("PpoConfig: learning rates must be positive");
        if (discount <= 0.0 || discount >= 1.0) throw std::invalid_argument("PpoConfig: discount out of (0,1)");
        if (entropy_coef < 0.0) throw std::invalid_argument("PpoConfig: entropy_coef must be nonnegative");
    }
};

struct RolloutSample {
    Vec state;
    int action = 0;       // discrete envs
    Vec action_cont;      // continuous envs
    double log_prob_old = 0.0;
    double reward = 0.0;
    Vec next_state;
    double return_hat = 0.0;
    double advantage = 0.0;
    int t = 0;  // time index within the episode, needed by time-discounted regularizers
};

struct RolloutBatch {
    std::vector<RolloutSample> samples;
    bool discrete = true;
    double mean_episode_return = 0.0;      // undiscounted, per finished episode
    double mean_discounted_return = 0.0;
    int n_episodes = 0;

    void check_return_recursion(double gamma, double tol = 1e-9) const {
        for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
            if (samples[i + 1].t != samples[i].t + 1) continue;  // episode boundary
            double lhs = samples[i].return_hat;
            double rhs = samples[i].reward + gamma * samples[i + 1].return_hat;
            if (std::abs(lhs - rhs) > tol) throw std::logic_error("RolloutBatch: return recursion violated");
        }
    }
};

/// Collects at least n_steps of experience, always finishing the episode in
/// flight. Monte-Carlo discounted returns; advantages = return - V(s).
template <typename Env>
RolloutBatch collect_rollouts(Env& env, const NetPolicy& policy, const Network& value, int n_steps,
                              double discount, Rng& rng) {
    if (n_steps < 1) throw std::invalid_argument("collect_rollouts: n_steps must be >= 1");
    RolloutBatch batch;
    batch.discrete = policy.head == HeadKind::categorical;
    double ep_return_sum = 0.0;
    double ep_disc_sum = 0.0;
    while (static_cast<int>(batch.samples.size()) < n_steps) {
        std::size_t ep_begin = batch.samples.size();
        Vec obs = env.reset(rng);
        double undisc = 0.0;
        for (int t = 0;; ++t) {
            RolloutSample s;
            s.state = obs;
            s.t = t;
            EnvStep res;
            if constexpr (requires(Env& e, Rng& r) { e.step(0, r); }) {
                if (!batch.discrete) throw std::invalid_argument("collect_rollouts: discrete env needs categorical head");
                Vec probs = policy.action_probs(obs);
                s.action = rng.categorical(probs);
                s.log_prob_old = categorical_log_prob(probs, s.action);
                res = env.step(s.action, rng);
            } else {
                if (batch.discrete) throw std::invalid_argument("collect_rollouts: continuous env needs gaussian head");
                GaussianHead h = policy.gaussian(obs);
                s.action_cont.resize(h.dim());
                for (std::size_t i = 0; i < h.dim(); ++i)
                    s.action_cont[i] = h.mean[i] + std::exp(h.log_std[i]) * rng.normal();
                s.log_prob_old = gaussian_log_prob(h, s.action_cont);
                res = env.step(s.action_cont, rng);
            }
            s.reward = res.reward;
            s.next_state = res.next_obs;
            undisc += res.reward;
            obs = res.next_obs;
            batch.samples.push_back(std::move(s));
            if (res.done) break;
        }
        double ret = 0.0;
        for (std::size_t i = batch.samples.size(); i > ep_begin; --i) {
            auto& s = batch.samples[i - 1];
            ret = s.reward + discount * ret;
            s.return_hat = ret;
            s.advantage = ret - value.forward(s.state)[0];
        }
        ep_return_sum += undisc;
        ep_disc_sum += batch.samples[ep_begin].return_hat;
        ++batch.n_episodes;
    }
    batch.mean_episode_return = ep_return_sum / batch.n_episodes;
    batch.mean_discounted_return = ep_disc_sum / batch.n_episodes;
    return batch;
}

struct UpdateStats {
    double surrogate = 0.0;
    double value_loss = 0.0;
    double policy_grad_norm = 0.0;
    double mean_kl_old_new = 0.0;
    double reg_value = 0.0;
};

/// Regularizer hook: given the policy and a minibatch, returns the penalty
/// value and accumulates its parameter gradient into grad (param-aligned).
/// ppo_update subtracts the penalty from the ascent objective.
using Regularizer =
    std::function<double(const NetPolicy&, const std::vector<const RolloutSample*>&, Vec& grad)>;

namespace detail {

struct AdamState {
    Vec m, v;
    long t = 0;
    void ensure(std::size_t n) {
        if (m.size() != n) {
            m.assign(n, 0.0);
            v.assign(n, 0.0);
            t = 0;
        }
    }
    // ascent step: params += lr * corrected direction
    void apply(Vec& params, const Vec& grad, double lr) {
        ensure(params.size());
        ++t;
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
        double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] += lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

inline double vec_norm(const Vec& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

}  // namespace detail

/// One PPO update over the batch: ascends the clipped surrogate plus entropy
/// bonus minus the optional regularizer; the value net descends squared error
/// to the Monte-Carlo returns.
inline UpdateStats ppo_update(NetPolicy& policy, Network& value, RolloutBatch& batch, const PpoConfig& cfg,
                              Rng& rng, const Regularizer& reg = nullptr,
                              detail::AdamState* adam_policy = nullptr, detail::AdamState* adam_value = nullptr) {
    cfg.validate();
    if (batch.samples.empty()) throw std::invalid_argument("ppo_update: empty batch");
    if (cfg.normalize_advantages && batch.samples.size() > 1) {
        double mean = 0.0;
        for (const auto& s : batch.samples) mean += s.advantage;
        mean /= static_cast<double>(batch.samples.size());
        double var = 0.0;
        for (const auto& s : batch.samples) var += (s.advantage - mean) * (s.advantage - mean);
        double sd = std::sqrt(var / static_cast<double>(batch.samples.size()));
        if (sd > 1e-8)
            for (auto& s : batch.samples) s.advantage = (s.advantage - mean) / sd;
    }

    UpdateStats stats;
    std::vector<std::size_t> order(batch.samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    double last_surrogate = 0.0, last_reg = 0.0, last_gnorm = 0.0, last_vloss = 0.0;
    for (int epoch = 0; epoch < cfg.epochs_per_iter; ++epoch) {
        // Fisher-Yates with our own rng for cross-platform determinism
        for (std::size_t i = order.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.minibatch_size)) {
            std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch_size));
            double inv = 1.0 / static_cast<double>(end - start);
            Vec pgrad(policy.net.parameter_count(), 0.0);
            Vec vgrad(value.parameter_count(), 0.0);
            double surrogate = 0.0, vloss = 0.0;
            std::vector<const RolloutSample*> mb;
            mb.reserve(end - start);
            for (std::size_t k = start; k < end; ++k) {
                const RolloutSample& s = batch.samples[order[k]];
                mb.push_back(&s);
                Vec out = policy.net.forward(s.state);
                double logp;
                Vec dlogp_dout, dent_dout;
                double entropy;
                if (batch.discrete) {
                    Vec probs = softmax(out);
                    logp = categorical_log_prob(probs, s.action);
                    dlogp_dout = categorical_log_prob_grad(probs, s.action);
                    entropy = categorical_entropy(probs);
                    dent_dout = categorical_entropy_grad(probs);
                } else {
                    GaussianHead h = gaussian_head(out);
                    logp = gaussian_log_prob(h, s.action_cont);
                    dlogp_dout = gaussian_log_prob_grad(h, s.action_cont);
                    entropy = gaussian_entropy(h);
                    dent_dout.assign(out.size(), 0.0);
                    for (std::size_t i = 0; i < h.dim(); ++i)
                        if (!h.clamped[i]) dent_dout[h.dim() + i] = 1.0;
                }
                if (!std::isfinite(logp)) throw std::runtime_error("ppo_update: non-finite log-prob");
                double ratio = std::exp(logp - s.log_prob_old);
                double adv = s.advantage;
                double clipped = std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                surrogate += std::min(ratio * adv, clipped * adv) * inv;
                bool clip_active = (adv >= 0.0 && ratio > 1.0 + cfg.clip_eps) || (adv < 0.0 && ratio < 1.0 - cfg.clip_eps);
                Vec upstream(out.size(), 0.0);
                double coef = clip_active ? 0.0 : ratio * adv;
                for (std::size_t i = 0; i < out.size(); ++i)
                    upstream[i] = coef * dlogp_dout[i] * inv + cfg.entropy_coef * dent_dout[i] * inv;
                GradientTape tape = policy.net.backward(upstream);
                for (std::size_t i = 0; i < pgrad.size(); ++i) pgrad[i] += tape.param_grad[i];

                double v = value.forward(s.state)[0];
                double err = v - s.return_hat;
                vloss += err * err * inv;
                GradientTape vt = value.backward(Vec{2.0 * err * inv});
                for (std::size_t i = 0; i < vgrad.size(); ++i) vgrad[i] -= vt.param_grad[i];  // descent
            }
            double reg_value = 0.0;
            if (reg) {
                Vec rgrad(policy.net.parameter_count(), 0.0);
                reg_value = reg(policy, mb, rgrad);
                if (!std::isfinite(reg_value)) throw std::runtime_error("ppo_update: non-finite regularizer");
                for (std::size_t i = 0; i < pgrad.size(); ++i) pgrad[i] -= rgrad[i];
            }
            if (!std::isfinite(surrogate) || !std::isfinite(vloss))
                throw std::runtime_error("ppo_update: non-finite loss");
            if (adam_policy && cfg.adam) {
                adam_policy->apply(policy.net.params(), pgrad, cfg.lr_policy);
            } else {
                policy.net.apply_gradient(pgrad, cfg.lr_policy);
            }
            if (adam_value && cfg.adam) {
                adam_value->apply(value.params(), vgrad, cfg.lr_value);
            } else {
                value.apply_gradient(vgrad, cfg.lr_value);
            }
            last_surrogate = surrogate;
            last_reg = reg_value;
            last_gnorm = detail::vec_norm(pgrad);
            last_vloss = vloss;
        }
    }
    stats.surrogate = last_surrogate;
    stats.value_loss = last_vloss;
    stats.policy_grad_norm = last_gnorm;
    stats.reg_value = last_reg;
    double kl = 0.0;
    for (const auto& s : batch.samples) {
        double logp;
        if (batch.discrete) {
            logp = categorical_log_prob(policy.action_probs(s.state), s.action);
        } else {
            logp = gaussian_log_prob(policy.gaussian(s.state), s.action_cont);
        }
        kl += s.log_prob_old - logp;
    }
    stats.mean_kl_old_new = kl / static_cast<double>(batch.samples.size());
    return stats;
}

// ---------------------------------------------------------------------------
// Training loop

struct IterRecord {
    int iter = 0;
    double mean_return = 0.0;  // undiscounted episode return
    double surrogate = 0.0;
    double value_loss = 0.0;
    double grad_norm = 0.0;
    double reg_value = 0.0;
    double mean_kl = 0.0;
};

struct TrainResult {
    NetPolicy policy;
    Network value;
    std::vector<IterRecord> history;
};

template <typename Env>
TrainResult ppo_train(Env& env, const PpoConfig& cfg, bool discrete, int obs_dim, int action_out_dim,
                      const Regularizer& reg = nullptr, std::vector<int> hidden = {64, 64}) {
    cfg.validate();
    Rng rng(cfg.seed);
    Rng init_rng = rng.derive(1);
    Rng rollout_rng = rng.derive(2);
    Rng update_rng = rng.derive(3);

    std::vector<int> pol_sizes{obs_dim};
    pol_sizes.insert(pol_sizes.end(), hidden.begin(), hidden.end());
    pol_sizes.push_back(action_out_dim);
    std::vector<int> val_sizes{obs_dim};
    val_sizes.insert(val_sizes.end(), hidden.begin(), hidden.end());
    val_sizes.push_back(1);

    TrainResult res;
    res.policy.head = discrete ? HeadKind::categorical : HeadKind::gaussian;
    res.policy.net = Network(pol_sizes, Activation::tanh, init_rng, 0.01);
    res.value = Network(val_sizes, Activation::tanh, init_rng);

    detail::AdamState ap, av;
    for (int it = 0; it < cfg.iters; ++it) {
        RolloutBatch batch = collect_rollouts(env, res.policy, res.value, cfg.rollout_steps, cfg.discount, rollout_rng);
        UpdateStats st = ppo_update(res.policy, res.value, batch, cfg, update_rng, reg, &ap, &av);
        IterRecord rec;
        rec.iter = it;
        rec.mean_return = batch.mean_episode_return;
        rec.surrogate = st.surrogate;
        rec.value_loss = st.value_loss;
        rec.grad_norm = st.policy_grad_norm;
        rec.reg_value = st.reg_value;
        rec.mean_kl = st.mean_kl_old_new;
        res.history.push_back(rec);
    }
    return res;
}

// ---------------------------------------------------------------------------
// GAIL discriminator

inline constexpr double kDiscLogitClamp = 20.0;

inline double discriminator_output(const Network& disc, const Vec& pair) {
    double logit = std::clamp(disc.forward(pair)[0], -kDiscLogitClamp, kDiscLogitClamp);
    return 1.0 / (1.0 + std::exp(-logit));
}

/// Full-batch gradient ascent on E_agent[log D] + E_target[log(1-D)].
/// Returns the per-step objective curve.
inline Vec train_discriminator(Network& disc, const std::vector<Vec>& agent_pairs,
                               const std::vector<Vec>& target_pairs, double lr, int steps,
                               detail::AdamState* adam = nullptr) {
    if (agent_pairs.empty() || target_pairs.empty())
        throw std::invalid_argument("train_discriminator: both sample sets must be nonempty");
    Vec curve;
    curve.reserve(static_cast<std::size_t>(steps));
    for (int step = 0; step < steps; ++step) {
        Vec grad(disc.parameter_count(), 0.0);
        double obj = 0.0;
        double wa = 1.0 / static_cast<double>(agent_pairs.size());
        for (const Vec& x : agent_pairs) {
            double raw = disc.forward(x)[0];
            double logit = std::clamp(raw, -kDiscLogitClamp, kDiscLogitClamp);
            double d = 1.0 / (1.0 + std::exp(-logit));
            obj += std::log(std::max(d, 1e-300)) * wa;
            double up = (raw == logit) ? (1.0 - d) * wa : 0.0;
            GradientTape t = disc.backward(Vec{up});
            for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += t.param_grad[i];
        }
        double wt = 1.0 / static_cast<double>(target_pairs.size());
        for (const Vec& x : target_pairs) {
            double raw = disc.forward(x)[0];
            double logit = std::clamp(raw, -kDiscLogitClamp, kDiscLogitClamp);
            double d = 1.0 / (1.0 + std::exp(-logit));
            obj += std::log(std::max(1.0 - d, 1e-300)) * wt;
            double up = (raw == logit) ? -d * wt : 0.0;
            GradientTape t = disc.backward(Vec{up});
            for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += t.param_grad[i];
        }
        if (!std::isfinite(obj)) throw std::runtime_error("train_discriminator: non-finite objective");
        if (adam) {
            adam->apply(disc.params(), grad, lr);
        } else {
            disc.apply_gradient(grad, lr);
        }
        curve.push_back(obj);
    }
    return curve;
}

}  // namespace samlab
