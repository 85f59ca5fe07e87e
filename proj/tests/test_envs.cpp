#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "samlab/envs.hpp"
#include "samlab/oracle.hpp"

using namespace samlab;

namespace {

/// Hand policy that walks toward a goal cell.
struct GoalSeeker {
    const GridWorld* gw;
    std::pair<int, int> goal;

    int act(const Vec& obs, Rng&) const {
        auto c = gw->cell_of(obs);
        if (c.first < goal.first) return GridWorld::kRight;
        if (c.first > goal.first) return GridWorld::kLeft;
        if (c.second < goal.second) return GridWorld::kUp;
        return GridWorld::kDown;
    }
};

}  // namespace

TEST_CASE("gridworld stepping") {
    GridWorld gw;
    gw.validate();
    Rng rng(1);

    SUBCASE("bounds and walls block movement, step penalty still applies") {
        gw.start = {0, 0};
        gw.walls.insert({1, 0});
        gw.validate();
        Vec obs = gw.reset(rng);
        CHECK(obs[0] == 0.0);
        EnvStep into_wall = gw.step(GridWorld::kRight, rng);
        CHECK(into_wall.next_obs == obs);
        CHECK(into_wall.reward == doctest::Approx(gw.step_reward));
        EnvStep off_grid = gw.step(GridWorld::kDown, rng);
        CHECK(off_grid.next_obs == obs);
        CHECK(off_grid.reward == doctest::Approx(gw.step_reward));
    }

    SUBCASE("reaching the victim goal pays and terminates") {
        gw.walls.clear();
        gw.start = {5, 6};
        gw.validate();
        gw.reset(rng);
        EnvStep res = gw.step(GridWorld::kRight, rng);  // onto (6,6)
        CHECK(res.reached_victim_goal);
        CHECK(res.done);
        CHECK(res.reward == doctest::Approx(gw.step_reward + gw.goal_reward));
        CHECK(res.adversary_reward == doctest::Approx(gw.step_reward));
    }

    SUBCASE("adversary goal terminates with the opposing reward") {
        gw.start = {1, 0};
        gw.reset(rng);
        EnvStep res = gw.step(GridWorld::kLeft, rng);  // onto (0,0)
        CHECK(res.reached_adversary_goal);
        CHECK(res.done);
        CHECK(res.adversary_reward == doctest::Approx(gw.step_reward + gw.goal_reward));
        CHECK(res.reward == doctest::Approx(gw.step_reward));
    }

    SUBCASE("episode return is bounded") {
        GoalSeeker seeker{&gw, gw.goal_victim};
        Demonstration demo = record_demonstrations(gw, seeker, 5, true, 9, 0.99);
        double bound = gw.goal_reward + gw.max_steps * std::abs(gw.step_reward);
        for (const auto& ep : demo.episodes) CHECK(std::abs(ep.undiscounted_return) <= bound + 1e-12);
    }

    SUBCASE("timeout ends the episode") {
        gw.max_steps = 3;
        gw.reset(rng);
        gw.step(GridWorld::kUp, rng);
        gw.step(GridWorld::kDown, rng);
        EnvStep last = gw.step(GridWorld::kUp, rng);
        CHECK(last.done);
    }

    SUBCASE("invalid configurations are rejected") {
        GridWorld bad;
        bad.goal_adversary = bad.goal_victim;
        CHECK_THROWS(bad.validate());
        GridWorld walled;
        walled.walls.insert(walled.start);
        CHECK_THROWS(walled.validate());
    }
}

TEST_CASE("opposing tasks really oppose") {
    GridWorld gw;
    gw.validate();
    GoalSeeker to_victim{&gw, gw.goal_victim};
    Demonstration d1 = record_demonstrations(gw, to_victim, 10, true, 3, 0.99);
    double victim_task = 0.0;
    for (const auto& ep : d1.episodes) victim_task += ep.undiscounted_return;
    victim_task /= 10.0;
    CHECK(victim_task > 0.8);  // reaches the goal quickly

    // same walker scored on the swapped task: never reaches goal B
    GridWorld swapped = gw.swapped_goals();
    GoalSeeker still_victim{&swapped, swapped.goal_adversary};  // original victim goal
    Demonstration d2 = record_demonstrations(swapped, still_victim, 10, true, 3, 0.99);
    double adversary_task = 0.0;
    for (const auto& ep : d2.episodes) adversary_task += ep.undiscounted_return;
    adversary_task /= 10.0;
    CHECK(adversary_task < 0.0);
}

TEST_CASE("gridworld tabular view agrees with the simulator") {
    GridWorld gw;
    gw.validate();
    SaMdp sa = gw.tabular_view(0.95);
    sa.validate();

    SUBCASE("budget is the Chebyshev-1 neighborhood") {
        int corner = gw.state_index({0, 0});
        CHECK(sa.perturbation.neighbors[static_cast<std::size_t>(corner)].size() == 4);
        int center = gw.state_index({3, 3});
        CHECK(sa.perturbation.neighbors[static_cast<std::size_t>(center)].size() == 9);
    }

    SUBCASE("exact return matches a long Monte-Carlo average") {
        GoalSeeker seeker{&gw, gw.goal_victim};
        TabularPolicy pi;
        pi.probs.assign(static_cast<std::size_t>(gw.width * gw.height), Vec(4, 0.0));
        Rng dummy(0);
        for (int s = 0; s < gw.width * gw.height; ++s) {
            int a = seeker.act(gw.obs_of(gw.cell_of_index(s)), dummy);
            pi.probs[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] = 1.0;
        }
        double exact = expected_return(sa.mdp, pi);
        // deterministic walk: one rollout suffices
        Rng rng(5);
        Vec obs = gw.reset(rng);
        double got = 0.0, w = 1.0;
        while (true) {
            EnvStep res = gw.step(seeker.act(obs, rng), rng);
            got += w * res.reward;
            w *= 0.95;
            obs = res.next_obs;
            if (res.done) break;
        }
        CHECK(got == doctest::Approx(exact).epsilon(1e-6));
    }
}

TEST_CASE("pointmass dynamics") {
    PointMass pm;
    Rng rng(2);
    Vec obs = pm.reset(rng);
    REQUIRE(obs.size() == 4);

    SUBCASE("zero force from rest leaves the position unchanged") {
        EnvStep res = pm.step({0.0, 0.0}, rng);
        CHECK(res.next_obs[0] == 0.0);
        CHECK(res.next_obs[1] == 0.0);
        CHECK(res.reward == doctest::Approx(0.0));
    }

    SUBCASE("deterministic given the action sequence") {
        PointMass a, b;
        Rng r1(3), r2(3);
        a.reset(r1);
        b.reset(r2);
        Vec force{0.3, -0.8};
        for (int i = 0; i < 20; ++i) {
            EnvStep s1 = a.step(force, r1);
            EnvStep s2 = b.step(force, r2);
            CHECK(s1.next_obs == s2.next_obs);
            CHECK(s1.reward == s2.reward);
        }
    }

    SUBCASE("driving toward the goal pays positive progress and terminates") {
        double total = 0.0;
        bool done = false;
        for (int i = 0; i < pm.max_steps && !done; ++i) {
            EnvStep res = pm.step({1.0, 1.0}, rng);
            total += res.reward;
            done = res.done && res.reached_victim_goal;
        }
        CHECK(done);
        CHECK(total > 0.5);
    }
}

TEST_CASE("random SA-MDP generator") {
    SUBCASE("seed repeat gives an identical instance") {
        RandomMdpSpec spec;
        spec.seed = 123;
        SaMdp a = generate_random_samdp(spec);
        SaMdp b = generate_random_samdp(spec);
        CHECK(a.mdp.transition == b.mdp.transition);
        CHECK(a.mdp.reward == b.mdp.reward);
        CHECK(a.mdp.initial == b.mdp.initial);
        CHECK(a.perturbation.neighbors == b.perturbation.neighbors);
    }

    SUBCASE("budget cap one forces the identity-only budget") {
        RandomMdpSpec spec;
        spec.budget_cap = 1;
        spec.seed = 9;
        SaMdp sa = generate_random_samdp(spec);
        for (int s = 0; s < spec.n_states; ++s) {
            REQUIRE(sa.perturbation.neighbors[static_cast<std::size_t>(s)].size() == 1);
            CHECK(sa.perturbation.neighbors[static_cast<std::size_t>(s)][0] == s);
        }
    }

    SUBCASE("1000 instances all satisfy the MDP invariants") {
        for (std::uint64_t seed = 0; seed < 1000; ++seed) {
            RandomMdpSpec spec;
            spec.n_states = 2 + static_cast<int>(seed % 5);
            spec.n_actions = 1 + static_cast<int>(seed % 3);
            spec.sparsity = (seed % 4) * 0.2;
            spec.seed = seed;
            SaMdp sa = generate_random_samdp(spec);
            CHECK_NOTHROW(sa.validate());
        }
    }

    SUBCASE("caps are enforced") {
        RandomMdpSpec spec;
        spec.n_states = 9;
        CHECK_THROWS(generate_random_samdp(spec));
        RandomMdpSpec bad;
        bad.discount = 1.0;
        CHECK_THROWS(generate_random_samdp(bad));
    }
}

TEST_CASE("demonstration recording") {
    GridWorld gw;
    gw.validate();
    GoalSeeker seeker{&gw, gw.goal_adversary};

    SUBCASE("paper-default count with actions") {
        Demonstration demo = record_demonstrations(gw, seeker, 20, true, 4, 0.99);
        CHECK(demo.episodes.size() == 20);
        CHECK(demo.actions_present);
        for (const auto& ep : demo.episodes)
            for (const auto& st : ep.steps) CHECK(st.action.has_value());
    }

    SUBCASE("action stripping for the observation-only mode") {
        Demonstration demo = record_demonstrations(gw, seeker, 5, false, 4, 0.99);
        CHECK(!demo.actions_present);
        for (const auto& ep : demo.episodes)
            for (const auto& st : ep.steps) CHECK(!st.action.has_value());
        CHECK_NOTHROW(demo.validate());
    }

    SUBCASE("fixed seed gives byte-identical serialized output") {
        Demonstration d1 = record_demonstrations(gw, seeker, 8, true, 77, 0.99);
        Demonstration d2 = record_demonstrations(gw, seeker, 8, true, 77, 0.99);
        std::stringstream s1, s2;
        write_trajectories_jsonl(d1.episodes, s1);
        write_trajectories_jsonl(d2.episodes, s2);
        CHECK(s1.str() == s2.str());
        CHECK(!s1.str().empty());
    }
}
