#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "samlab/envs.hpp"
#include "samlab/oracle.hpp"

using namespace samlab;

namespace {

TabularPolicy random_policy(int ns, int na, Rng& rng) {
    TabularPolicy pi;
    pi.probs.assign(static_cast<std::size_t>(ns), Vec(static_cast<std::size_t>(na)));
    for (auto& row : pi.probs) {
        double sum = 0.0;
        for (double& x : row) {
            x = 0.05 - std::log(1.0 - rng.uniform());  // strictly positive rows
            sum += x;
        }
        for (double& x : row) x /= sum;
    }
    return pi;
}

}  // namespace

TEST_CASE("policy evaluation closed forms") {
    FiniteMdp m;
    m.n_states = 1;
    m.n_actions = 1;
    m.discount = 0.5;
    m.initial = {1.0};
    m.transition = {{1.0}};
    m.reward = {{1.0}};
    m.validate();
    TabularPolicy pi;
    pi.probs = {{1.0}};
    CHECK(policy_evaluation(m, pi)[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(expected_return(m, pi) == doctest::Approx(2.0).epsilon(1e-12));

    m.reward = {{0.0}};
    CHECK(policy_evaluation(m, pi)[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("policy evaluation matches Monte Carlo on a random 3-state MDP") {
    RandomMdpSpec spec;
    spec.n_states = 3;
    spec.n_actions = 2;
    spec.discount = 0.8;
    spec.seed = 42;
    SaMdp sa = generate_random_samdp(spec);
    Rng rng(99);
    TabularPolicy pi = random_policy(3, 2, rng);
    double exact = expected_return(sa.mdp, pi);

    // ~10^5 sampled steps: 4000 episodes of horizon 25 (gamma^25 < 0.4%).
    int n_eps = 4000, horizon = 25;
    Vec returns;
    Rng sim(7);
    for (int e = 0; e < n_eps; ++e) returns.push_back(sample_episode(sa, pi, nullptr, horizon, sim).episode_return);
    double mean = 0.0;
    for (double r : returns) mean += r;
    mean /= n_eps;
    double var = 0.0;
    for (double r : returns) var += (r - mean) * (r - mean);
    double se = std::sqrt(var / (n_eps - 1)) / std::sqrt(static_cast<double>(n_eps));
    double truncation = std::pow(spec.discount, horizon) / (1.0 - spec.discount);
    CHECK(std::abs(mean - exact) <= 3.0 * se + truncation);
}

TEST_CASE("state_distribution_t") {
    FiniteMdp m;
    m.n_states = 3;
    m.n_actions = 1;
    m.discount = 0.9;
    m.initial = {1, 0, 0};
    m.transition = {{0, 1, 0}, {0, 0, 1}, {0, 0, 1}};
    m.reward.assign(3, Vec(3, 0.0));
    m.validate();
    TabularPolicy pi;
    pi.probs = {{1.0}, {1.0}, {1.0}};

    Vec d0 = state_distribution_t(m, pi, 0);
    CHECK(d0[0] == doctest::Approx(1.0));
    Vec d2 = state_distribution_t(m, pi, 2);
    CHECK(d2[2] == doctest::Approx(1.0).epsilon(1e-12));

    SUBCASE("rows stay stochastic for many t") {
        RandomMdpSpec spec;
        spec.seed = 5;
        SaMdp sa = generate_random_samdp(spec);
        Rng rng(3);
        TabularPolicy rp = random_policy(spec.n_states, spec.n_actions, rng);
        for (int t = 0; t < 40; ++t) {
            Vec d = state_distribution_t(sa.mdp, rp, t);
            double sum = 0.0;
            for (double p : d) {
                CHECK(p >= -1e-15);
                sum += p;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("state_distribution_t matches Monte-Carlo frequencies") {
    RandomMdpSpec spec;
    spec.n_states = 4;
    spec.n_actions = 2;
    spec.seed = 17;
    SaMdp sa = generate_random_samdp(spec);
    Rng rng(21);
    TabularPolicy pi = random_policy(4, 2, rng);
    Vec exact = state_distribution_t(sa.mdp, pi, 5);

    int n = 100000;
    Vec counts(4, 0.0);
    Rng sim(2);
    for (int i = 0; i < n; ++i) {
        Trajectory tr = sample_episode(sa, pi, nullptr, 6, sim);
        counts[static_cast<std::size_t>(tr.steps[5].state)] += 1.0;
    }
    for (int s = 0; s < 4; ++s) {
        double p = exact[static_cast<std::size_t>(s)];
        double freq = counts[static_cast<std::size_t>(s)] / n;
        double se = std::sqrt(std::max(p * (1 - p), 1e-12) / n);
        CHECK(std::abs(freq - p) <= 3.5 * se + 1e-9);
    }
}

TEST_CASE("occupancy measures") {
    SUBCASE("single state and action") {
        FiniteMdp m;
        m.n_states = 1;
        m.n_actions = 1;
        m.discount = 0.9;
        m.initial = {1.0};
        m.transition = {{1.0}};
        m.reward = {{0.0}};
        TabularPolicy pi;
        pi.probs = {{1.0}};
        OccupancyMeasure occ = occupancy_measure(m, pi, 1e-10);
        CHECK(occ.values[0][0] == doctest::Approx(1.0).epsilon(1e-8));
        CHECK(occ.normalized);
    }

    SUBCASE("uniform policy on action-independent dynamics factorizes") {
        RandomMdpSpec spec;
        spec.n_states = 3;
        spec.n_actions = 1;
        spec.seed = 8;
        SaMdp sa = generate_random_samdp(spec);
        FiniteMdp m = sa.mdp;
        m.n_actions = 2;  // duplicate the single action
        m.transition = {m.transition[0], m.transition[0], m.transition[1], m.transition[1],
                        m.transition[2], m.transition[2]};
        m.reward = {m.reward[0], m.reward[0], m.reward[1], m.reward[1], m.reward[2], m.reward[2]};
        m.validate();
        TabularPolicy uni;
        uni.probs.assign(3, Vec{0.5, 0.5});
        OccupancyMeasure occ = occupancy_measure(m, uni, 1e-12);
        for (int s = 0; s < 3; ++s) {
            double ds = occ.values[static_cast<std::size_t>(s)][0] + occ.values[static_cast<std::size_t>(s)][1];
            CHECK(occ.values[static_cast<std::size_t>(s)][0] == doctest::Approx(ds / 2).epsilon(1e-10));
        }
    }

    SUBCASE("truncated sum agrees with the linear-solve closed form") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            RandomMdpSpec spec;
            spec.n_states = 4;
            spec.n_actions = 3;
            spec.seed = seed;
            SaMdp sa = generate_random_samdp(spec);
            Rng rng(seed + 100);
            TabularPolicy pi = random_policy(4, 3, rng);
            OccupancyMeasure occ = occupancy_measure(sa.mdp, pi, 1e-12);
            auto exact = occupancy_exact_normalized(sa.mdp, pi);
            double total = 0.0;
            for (int s = 0; s < 4; ++s)
                for (int a = 0; a < 3; ++a) {
                    CHECK(std::abs(occ.values[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] -
                                   exact[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)]) <= 1e-8);
                    total += occ.values[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
                }
            CHECK(std::abs(total - 1.0) <= 1e-10);
        }
    }
}

TEST_CASE("divergence hand values") {
    CHECK(kl_divergence({0.5, 0.5}, {0.5, 0.5}) == 0.0);
    CHECK(kl_divergence({0.5, 0.5}, {0.25, 0.75}) ==
          doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)).epsilon(1e-12));
    CHECK(kl_divergence({0.5, 0.5}, {0.25, 0.75}) == doctest::Approx(0.14384).epsilon(1e-4));
    CHECK(kl_divergence({1.0, 0.0}, {0.5, 0.5}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(kl_divergence({0.5, 0.5}, {1.0, 0.0}), std::domain_error);

    CHECK(total_variation({0.3, 0.7}, {0.3, 0.7}) == 0.0);
    CHECK(total_variation({1.0, 0.0}, {0.0, 1.0}) == doctest::Approx(1.0));
    CHECK(total_variation({0.5, 0.5}, {0.25, 0.75}) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("Pinsker consistency over random pairs") {
    Rng rng(13);
    for (int i = 0; i < 10000; ++i) {
        int n = rng.uniform_int(2, 6);
        Vec p(static_cast<std::size_t>(n)), q(static_cast<std::size_t>(n));
        double sp = 0.0, sq = 0.0;
        for (int k = 0; k < n; ++k) {
            p[static_cast<std::size_t>(k)] = 0.01 - std::log(1.0 - rng.uniform());
            q[static_cast<std::size_t>(k)] = 0.01 - std::log(1.0 - rng.uniform());
            sp += p[static_cast<std::size_t>(k)];
            sq += q[static_cast<std::size_t>(k)];
        }
        for (int k = 0; k < n; ++k) {
            p[static_cast<std::size_t>(k)] /= sp;
            q[static_cast<std::size_t>(k)] /= sq;
        }
        CHECK(std::sqrt(kl_divergence(p, q) / 2.0) >= total_variation(p, q) - 1e-12);
    }
}

TEST_CASE("attack MDP construction") {
    RandomMdpSpec spec;
    spec.n_states = 3;
    spec.n_actions = 2;
    spec.seed = 33;
    SaMdp sa = generate_random_samdp(spec);
    const FiniteMdp& m = sa.mdp;

    SUBCASE("deterministic victim collapses the ratio") {
        TabularPolicy det;
        det.probs = {{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}};
        AttackMdp hat = build_attack_mdp(sa, det, m.reward, default_penalty_c(m.reward, m.discount));
        std::vector<int> astar = {0, 1, 0};
        for (int s = 0; s < 3; ++s)
            for (int sh = 0; sh < 3; ++sh) {
                int a = astar[static_cast<std::size_t>(sh)];
                for (int sp = 0; sp < 3; ++sp) {
                    double p = hat.transition_hat[static_cast<std::size_t>(s * 3 + sh)][static_cast<std::size_t>(sp)];
                    CHECK(p == doctest::Approx(m.trans(s, a)[static_cast<std::size_t>(sp)]).epsilon(1e-14));
                    if (sa.perturbation.contains(s, sh) && p > 0.0) {
                        CHECK(hat.reward_hat[static_cast<std::size_t>(s * 3 + sh)][static_cast<std::size_t>(sp)] ==
                              doctest::Approx(m.rew(s, a, sp)).epsilon(1e-12));
                    }
                }
            }
    }

    SUBCASE("uniform victim over identical transition rows averages rewards") {
        FiniteMdp m2 = m;
        for (int s = 0; s < 3; ++s) m2.trans(s, 1) = m2.trans(s, 0);
        m2.validate();
        SaMdp sa2{m2, sa.perturbation};
        TabularPolicy uni;
        uni.probs.assign(3, Vec{0.5, 0.5});
        AttackMdp hat = build_attack_mdp(sa2, uni, m2.reward, default_penalty_c(m2.reward, m2.discount));
        for (int s = 0; s < 3; ++s)
            for (int sh = 0; sh < 3; ++sh) {
                if (!sa2.perturbation.contains(s, sh)) continue;
                for (int sp = 0; sp < 3; ++sp) {
                    if (m2.trans(s, 0)[static_cast<std::size_t>(sp)] == 0.0) continue;
                    double want = 0.5 * (m2.rew(s, 0, sp) + m2.rew(s, 1, sp));
                    CHECK(hat.reward_hat[static_cast<std::size_t>(s * 3 + sh)][static_cast<std::size_t>(sp)] ==
                          doctest::Approx(want).epsilon(1e-12));
                }
            }
    }

    SUBCASE("random instance reproduces the ratio from an independent summation") {
        Rng rng(3);
        TabularPolicy pi = random_policy(3, 2, rng);
        AttackMdp hat = build_attack_mdp(sa, pi, m.reward, default_penalty_c(m.reward, m.discount));
        for (int s = 0; s < 3; ++s)
            for (int sh = 0; sh < 3; ++sh) {
                bool in_budget = sa.perturbation.contains(s, sh);
                for (int sp = 0; sp < 3; ++sp) {
                    double denom = 0.0, numer = 0.0;
                    for (int a = 0; a < 2; ++a) {
                        double w = pi.row(sh)[static_cast<std::size_t>(a)] * m.trans(s, a)[static_cast<std::size_t>(sp)];
                        denom += w;
                        numer += w * m.rew(s, a, sp);
                    }
                    double got_p = hat.transition_hat[static_cast<std::size_t>(s * 3 + sh)][static_cast<std::size_t>(sp)];
                    double got_r = hat.reward_hat[static_cast<std::size_t>(s * 3 + sh)][static_cast<std::size_t>(sp)];
                    CHECK(std::abs(got_p - denom) <= 1e-12);
                    if (!in_budget) {
                        CHECK(got_r == hat.penalty_C);
                    } else if (denom > 0.0) {
                        CHECK(std::abs(got_r - numer / denom) <= 1e-12);
                    } else {
                        CHECK(got_r == 0.0);
                    }
                }
            }
        // transition rows of the attack MDP remain stochastic
        for (const auto& row : hat.transition_hat) FiniteMdp::check_prob_row(row, 3, "transition_hat");
    }
}

TEST_CASE("deterministic adversary enumeration counts") {
    SaMdp sa;
    sa.mdp.n_states = 3;
    sa.perturbation.neighbors = {{0}, {1}, {2}};
    CHECK(enumerate_deterministic_adversaries(sa).size() == 1);

    sa.mdp.n_states = 2;
    sa.perturbation.neighbors = {{0, 1}, {0, 1}};
    CHECK(enumerate_deterministic_adversaries(sa).size() == 4);

    sa.mdp.n_states = 3;
    sa.perturbation.neighbors = {{0, 1}, {0, 1, 2}, {1, 2}};
    auto advs = enumerate_deterministic_adversaries(sa);
    CHECK(advs.size() == 12);
    for (std::size_t i = 0; i < advs.size(); ++i)
        for (std::size_t j = i + 1; j < advs.size(); ++j) CHECK(advs[i].probs != advs[j].probs);

    SUBCASE("cap enforced") {
        SaMdp big;
        big.mdp.n_states = 4;
        big.perturbation.neighbors = {{0, 1}, {0, 1}, {0, 1, 2}, {0, 1, 2, 3}};
        CHECK_THROWS(enumerate_deterministic_choices(big, 10));
    }
}

TEST_CASE("attack-MDP value identity holds on random instances") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        RandomMdpSpec spec;
        spec.n_states = 4;
        spec.n_actions = 3;
        spec.seed = seed;
        SaMdp sa = generate_random_samdp(spec);
        Rng rng(seed * 7 + 1);
        TabularPolicy pi = random_policy(4, 3, rng);
        Lemma1Report rep = verify_lemma1(sa, pi, sa.mdp.reward, 1e-10);
        CHECK(rep.values_match);
        CHECK(rep.argmax_agree);
        CHECK(rep.pass());
        CHECK(rep.counterexample.empty());
    }
}

TEST_CASE("identity-only budget makes the attack-MDP check trivial") {
    RandomMdpSpec spec;
    spec.n_states = 3;
    spec.n_actions = 2;
    spec.budget_cap = 1;
    spec.seed = 4;
    SaMdp sa = generate_random_samdp(spec);
    for (auto& nb : sa.perturbation.neighbors) REQUIRE(nb.size() == 1);
    Rng rng(5);
    Lemma1Report rep = verify_lemma1(sa, random_policy(3, 2, rng), sa.mdp.reward, 1e-10);
    CHECK(rep.n_adversaries == 1);
    CHECK(rep.pass());
}

TEST_CASE("time-discounted sensitivity bound") {
    RandomMdpSpec spec;
    spec.n_states = 4;
    spec.n_actions = 2;
    spec.seed = 11;
    SaMdp sa = generate_random_samdp(spec);
    Rng rng(12);
    TabularPolicy pi = random_policy(4, 2, rng);
    std::vector<Vec> r_tgt(4, Vec(2));
    for (auto& row : r_tgt)
        for (double& r : row) r = rng.uniform(-1, 1);

    SUBCASE("identity adversary gives a tight zero bound") {
        TabularAdversary id = TabularAdversary::identity(4);
        Theorem2Report rep = verify_theorem2(sa, pi, id, r_tgt, 1.0, 1e-10);
        CHECK(rep.applicable);
        CHECK(rep.lhs == doctest::Approx(0.0).epsilon(1e-15));
        CHECK(rep.rhs == doctest::Approx(0.0).epsilon(1e-15));
        CHECK(rep.holds);
    }

    SUBCASE("state-constant policy zeroes the KL") {
        TabularPolicy flat;
        flat.probs.assign(4, Vec{0.4, 0.6});
        auto advs = enumerate_deterministic_adversaries(sa);
        Theorem2Report rep = verify_theorem2(sa, flat, advs.back(), r_tgt, 1.0, 1e-10);
        CHECK(rep.applicable);
        CHECK(rep.rhs == doctest::Approx(0.0).epsilon(1e-15));
        CHECK(rep.lhs <= 1e-18);
    }

    SUBCASE("random adversaries never violate the bound") {
        int checked = 0;
        for (std::uint64_t seed = 0; seed < 40; ++seed) {
            RandomMdpSpec sp2;
            sp2.n_states = 4;
            sp2.n_actions = 2;
            sp2.seed = seed + 500;
            SaMdp inst = generate_random_samdp(sp2);
            Rng r2(seed);
            TabularPolicy p2 = random_policy(4, 2, r2);
            std::vector<Vec> rt(4, Vec(2));
            for (auto& row : rt)
                for (double& v : row) v = r2.uniform(-1, 1);
            for (const auto& nu : enumerate_deterministic_adversaries(inst)) {
                Theorem2Report rep = verify_theorem2(inst, p2, nu, rt, 1.0, 1e-9);
                if (!rep.applicable) continue;
                CHECK(rep.holds);
                ++checked;
            }
        }
        CHECK(checked > 100);
    }
}

TEST_CASE("report serialization shapes") {
    RandomMdpSpec spec;
    spec.seed = 2;
    SaMdp sa = generate_random_samdp(spec);
    Rng rng(1);
    TabularPolicy pi = random_policy(spec.n_states, spec.n_actions, rng);
    Lemma1Report rep = verify_lemma1(sa, pi, sa.mdp.reward, 1e-10);
    std::string txt = to_text(rep);
    CHECK(txt.find("lemma1-report v1") == 0);
    CHECK(txt.find("result pass") != std::string::npos);

    TabularAdversary id = TabularAdversary::identity(spec.n_states);
    std::vector<Vec> rt(static_cast<std::size_t>(spec.n_states), Vec(static_cast<std::size_t>(spec.n_actions), 0.5));
    Theorem2Report t2 = verify_theorem2(sa, pi, id, rt, 1.0, 1e-9);
    std::string txt2 = to_text(t2);
    CHECK(txt2.find("theorem2-report v1") == 0);
    CHECK(txt2.find("result pass") != std::string::npos);
}
