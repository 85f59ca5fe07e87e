#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "samlab/defense.hpp"

using namespace samlab;

namespace {

NetPolicy small_policy(std::uint64_t seed, int obs = 2, int n_actions = 4, double gain = 1.5) {
    Rng rng(seed);
    NetPolicy pol;
    pol.head = HeadKind::categorical;
    pol.net = Network({obs, 8, n_actions}, Activation::tanh, rng, gain);
    return pol;
}

/// One-step two-action environment where the clean observation makes the
/// victim take the victim-task action and the sign-flipped one the opposite.
class FlipEnv {
  public:
    Vec reset(Rng&) { return {0.6}; }
    EnvStep step(int a, Rng&) {
        EnvStep out;
        out.reward = a == 0 ? 1.0 : 0.0;
        out.adversary_reward = a == 1 ? 1.0 : 0.0;
        out.next_obs = {0.6};
        out.done = true;
        return out;
    }
};

}  // namespace

TEST_CASE("smoothness penalty basics") {
    NetPolicy pol = small_policy(1);
    Vec s{0.3, -0.4};
    Rng rng(2);

    SUBCASE("zero budget gives zero penalty and leaves the gradient alone") {
        DefenseConfig cfg;
        cfg.epsilon = 0.0;
        Vec grad(pol.net.params().size(), 0.25);
        double p = tdrt_state_penalty(pol, s, 0, cfg, rng, &grad);
        CHECK(p == 0.0);
        for (double g : grad) CHECK(g == 0.25);
    }

    SUBCASE("invalid configurations are rejected") {
        DefenseConfig bad;
        bad.lambda_reg = -0.1;
        CHECK_THROWS(bad.validate());
        bad = DefenseConfig{};
        bad.discount_reg = 1.0;
        CHECK_THROWS(bad.validate());
        bad = DefenseConfig{};
        bad.pgd_steps = 0;
        CHECK_THROWS(bad.validate());
    }

    SUBCASE("penalty is never negative") {
        DefenseConfig cfg;
        cfg.epsilon = 0.2;
        Rng frng(3);
        for (int i = 0; i < 200; ++i) {
            Vec x{frng.uniform(-1, 1), frng.uniform(-1, 1)};
            CHECK(tdrt_state_penalty(pol, x, i % 7, cfg, frng, nullptr) >= 0.0);
        }
    }
}

TEST_CASE("time-discounted weighting") {
    NetPolicy pol = small_policy(4);
    Vec s{0.1, 0.2};
    Vec s_hat{0.35, -0.05};
    DefenseConfig cfg;
    cfg.candidates = [&](const Vec&) { return std::vector<Vec>{s_hat}; };

    double k = kl_categorical(pol.action_probs(s), pol.action_probs(s_hat));
    REQUIRE(k > 0.0);
    Rng rng(5);

    SUBCASE("weights follow the discount powers exactly") {
        double p0 = tdrt_state_penalty(pol, s, 0, cfg, rng, nullptr);
        double p1 = tdrt_state_penalty(pol, s, 1, cfg, rng, nullptr);
        double p2 = tdrt_state_penalty(pol, s, 2, cfg, rng, nullptr);
        CHECK(p0 == doctest::Approx(k).epsilon(1e-12));
        CHECK(p1 == doctest::Approx(0.99 * k).epsilon(1e-12));
        CHECK(p2 == doctest::Approx(0.9801 * k).epsilon(1e-12));
        CHECK(p0 + p1 + p2 == doctest::Approx(2.9701 * k).epsilon(1e-12));
        CHECK(p1 < p0);  // monotone in t
        CHECK(p2 < p1);
    }

    SUBCASE("the uniform baseline ignores the timestep") {
        cfg.time_discounted = false;
        double p0 = tdrt_state_penalty(pol, s, 0, cfg, rng, nullptr);
        double p9 = tdrt_state_penalty(pol, s, 9, cfg, rng, nullptr);
        CHECK(p0 == p9);
        CHECK(p0 == doctest::Approx(k).epsilon(1e-12));
    }

    SUBCASE("weights below the floor skip the state entirely") {
        cfg.discount_reg = 0.5;
        Vec grad(pol.net.params().size(), 0.0);
        double p = tdrt_state_penalty(pol, s, 50, cfg, rng, &grad);  // 0.5^50 << 1e-6
        CHECK(p == 0.0);
        for (double g : grad) CHECK(g == 0.0);
    }
}

TEST_CASE("inner maximization") {
    SUBCASE("exhaustive candidates pick the argmax of the divergence") {
        NetPolicy pol = small_policy(6);
        Vec s{0.0, 0.0};
        std::vector<Vec> cands{{0.2, 0.0}, {-0.2, 0.1}, {0.1, -0.2}, {0.0, 0.2}};
        DefenseConfig cfg;
        cfg.candidates = [&](const Vec&) { return cands; };
        Vec p = pol.action_probs(s);
        double expect = 0.0;
        for (const Vec& c : cands) expect = std::max(expect, kl_categorical(p, pol.action_probs(c)));
        Rng rng(7);
        CHECK(tdrt_state_penalty(pol, s, 0, cfg, rng, nullptr) == doctest::Approx(expect).epsilon(1e-12));
    }

    SUBCASE("sign-ascent stays below the fine-grid maximum on a 1-d slice") {
        Rng prng(8);
        for (int trial = 0; trial < 20; ++trial) {
            NetPolicy pol = small_policy(100 + static_cast<std::uint64_t>(trial), 1, 3, 2.0);
            Vec s{prng.uniform(-0.5, 0.5)};
            DefenseConfig cfg;
            cfg.epsilon = 0.3;
            Rng rng(9 + static_cast<std::uint64_t>(trial));
            double pgd = tdrt_state_penalty(pol, s, 0, cfg, rng, nullptr);

            Vec p = pol.action_probs(s);
            double grid = 0.0;
            for (int i = 0; i <= 4000; ++i) {
                Vec c{s[0] - cfg.epsilon + 2 * cfg.epsilon * i / 4000.0};
                grid = std::max(grid, kl_categorical(p, pol.action_probs(c)));
            }
            CHECK(pgd <= grid + 1e-6);
            CHECK(pgd >= 0.0);
        }
    }
}

TEST_CASE("clean branch is gradient-stopped") {
    NetPolicy pol = small_policy(10);
    Vec s{0.25, -0.15};
    Vec s_hat{0.45, 0.05};
    DefenseConfig cfg;
    cfg.candidates = [&](const Vec&) { return std::vector<Vec>{s_hat}; };
    Rng rng(11);

    Vec analytic(pol.net.params().size(), 0.0);
    double val = tdrt_state_penalty(pol, s, 0, cfg, rng, &analytic);
    REQUIRE(val > 0.0);

    // finite differences of the stop-gradient objective: the clean action
    // distribution is frozen at the base parameters
    Vec p_frozen = pol.action_probs(s);
    double h = 1e-6;
    Vec& params = pol.net.params();
    double diff_full = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        double keep = params[i];
        params[i] = keep + h;
        double up_stop = kl_categorical(p_frozen, pol.action_probs(s_hat));
        double up_full = kl_categorical(pol.action_probs(s), pol.action_probs(s_hat));
        params[i] = keep - h;
        double dn_stop = kl_categorical(p_frozen, pol.action_probs(s_hat));
        double dn_full = kl_categorical(pol.action_probs(s), pol.action_probs(s_hat));
        params[i] = keep;
        double fd_stop = (up_stop - dn_stop) / (2 * h);
        double fd_full = (up_full - dn_full) / (2 * h);
        CHECK(analytic[i] == doctest::Approx(fd_stop).epsilon(1e-4).scale(1.0));
        diff_full = std::max(diff_full, std::abs(analytic[i] - fd_full));
    }
    CHECK(diff_full > 1e-3);  // the full gradient genuinely differs
}

TEST_CASE("regularizer hook matches the hand-computed minibatch mean") {
    NetPolicy pol = small_policy(12);
    Vec s_hat{0.4, 0.4};
    DefenseConfig cfg;
    cfg.lambda_reg = 0.3;
    cfg.candidates = [&](const Vec&) { return std::vector<Vec>{s_hat}; };

    std::vector<RolloutSample> samples(3);
    samples[0].state = {0.1, 0.1};
    samples[0].t = 0;
    samples[1].state = {-0.3, 0.2};
    samples[1].t = 1;
    samples[2].state = {0.5, -0.5};
    samples[2].t = 4;
    std::vector<const RolloutSample*> mb{&samples[0], &samples[1], &samples[2]};

    double expect = 0.0;
    for (const auto& sm : samples)
        expect += std::pow(0.99, sm.t) * kl_categorical(pol.action_probs(sm.state), pol.action_probs(s_hat));
    expect *= 0.3 / 3.0;

    Regularizer reg = make_tdrt_regularizer(cfg, 13);
    Vec grad(pol.net.params().size(), 0.0);
    double got = reg(pol, mb, grad);
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    CHECK(gnorm > 0.0);
}

TEST_CASE("lambda zero reproduces undefended training bit for bit") {
    GridWorld gw;
    gw.max_steps = 25;
    gw.validate();
    PpoConfig ppo;
    ppo.iters = 3;
    ppo.rollout_steps = 150;
    ppo.seed = 14;

    DefenseConfig off;
    off.lambda_reg = 0.0;
    GridWorld e1 = gw, e2 = gw;
    TrainResult defended = tdrt_train(e1, ppo, off, true, 2, 4, {16});
    TrainResult vanilla = ppo_train(e2, ppo, true, 2, 4, nullptr, {16});
    CHECK(defended.policy.net.params() == vanilla.policy.net.params());
    CHECK(defended.value.params() == vanilla.value.params());
    for (std::size_t i = 0; i < defended.history.size(); ++i)
        CHECK(defended.history[i].mean_return == vanilla.history[i].mean_return);
}

TEST_CASE("defended training shrinks the worst-case divergence") {
    GridWorld gw;
    gw.max_steps = 25;
    gw.validate();
    PpoConfig ppo;
    ppo.iters = 15;
    ppo.rollout_steps = 300;
    ppo.seed = 15;

    DefenseConfig strong;
    strong.lambda_reg = 3.0;
    strong.epsilon = 0.25;
    DefenseConfig off;
    off.lambda_reg = 0.0;

    GridWorld e1 = gw, e2 = gw;
    TrainResult defended = tdrt_train(e1, ppo, strong, true, 2, 4, {16});
    TrainResult vanilla = tdrt_train(e2, ppo, off, true, 2, 4, {16});

    // measure max-KL smoothness of both policies over a probe set
    DefenseConfig probe;
    probe.epsilon = 0.25;
    auto roughness = [&](const NetPolicy& pol) {
        Rng rng(16);
        double total = 0.0;
        Rng srng(17);
        for (int i = 0; i < 60; ++i) {
            Vec x{srng.uniform(0, 1), srng.uniform(0, 1)};
            total += tdrt_state_penalty(pol, x, 0, probe, rng, nullptr);
        }
        return total / 60.0;
    };
    CHECK(roughness(defended.policy) < roughness(vanilla.policy));
}

TEST_CASE("adversary gain") {
    SUBCASE("the identity falsifier gains nothing") {
        GridWorld gw;
        gw.max_steps = 30;
        gw.validate();
        NetPolicy victim = small_policy(18);
        CHECK(adversary_gain(gw, victim, identity_adversary(), 25, 19, 0.99) == 0.0);
    }

    SUBCASE("a flip attack on a deterministic victim gains exactly one") {
        FlipEnv env;
        NetPolicy victim;
        victim.head = HeadKind::categorical;
        Rng rng(20);
        victim.net = Network({1, 2}, Activation::tanh, rng);
        victim.net.params() = {800.0, -800.0, 0.0, 0.0};  // logits (800s, -800s)
        AdversaryFn flip = [](const Vec& s, Rng&) { return Vec{-s[0]}; };
        CHECK(adversary_gain(env, victim, flip, 10, 21, 0.99) == doctest::Approx(1.0));
        CHECK(adversary_gain(env, victim, identity_adversary(), 10, 21, 0.99) == 0.0);
    }
}
