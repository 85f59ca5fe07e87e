#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "samlab/common.hpp"
#include "samlab/mdp.hpp"

namespace samlab {

/// One step of a vector-state environment. Actions are optional so the same
/// record serves action-free (ILfO) demonstrations.
struct VecStep {
    int t = 0;
    Vec state;
    std::optional<Vec> falsified_state;
    std::optional<Vec> action;
    double reward = 0.0;
    Vec next_state;
};

struct VecTrajectory {
    std::vector<VecStep> steps;
    double episode_return = 0.0;  // discounted
    double undiscounted_return = 0.0;
};

/// Target-policy rollouts handed to the attacker. ILfD demos carry actions on
/// every step; ILfO demos carry none.
struct Demonstration {
    std::vector<VecTrajectory> episodes;
    bool actions_present = false;

    void validate() const {
        if (episodes.empty()) throw std::invalid_argument("Demonstration: needs at least one episode");
        for (const auto& ep : episodes)
            for (const auto& st : ep.steps)
                if (st.action.has_value() != actions_present)
                    throw std::invalid_argument("Demonstration: action presence inconsistent with mode");
    }
};

// ---------------------------------------------------------------------------
// JSON-lines trajectory format: one step per line with keys
// t, s, s_hat, a, r, s_next, episode_id.

inline void write_trajectories_jsonl(const std::vector<Trajectory>& eps, std::ostream& os) {
    for (std::size_t e = 0; e < eps.size(); ++e) {
        for (const auto& st : eps[e].steps) {
            nlohmann::json j;
            j["t"] = st.t;
            j["s"] = st.state;
            if (st.falsified_state) j["s_hat"] = *st.falsified_state; else j["s_hat"] = nullptr;
            j["a"] = st.action;
            j["r"] = st.reward;
            j["s_next"] = st.next_state;
            j["episode_id"] = e;
            os << j.dump() << "\n";
        }
    }
}

inline void write_trajectories_jsonl(const std::vector<VecTrajectory>& eps, std::ostream& os) {
    for (std::size_t e = 0; e < eps.size(); ++e) {
        for (const auto& st : eps[e].steps) {
            nlohmann::json j;
            j["t"] = st.t;
            j["s"] = st.state;
            if (st.falsified_state) j["s_hat"] = *st.falsified_state; else j["s_hat"] = nullptr;
            if (st.action) j["a"] = *st.action; else j["a"] = nullptr;
            j["r"] = st.reward;
            j["s_next"] = st.next_state;
            j["episode_id"] = e;
            os << j.dump() << "\n";
        }
    }
}

template <typename Episodes>
void write_trajectories_jsonl(const Episodes& eps, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_trajectories_jsonl: cannot open " + path);
    write_trajectories_jsonl(eps, os);
}

/// Reads vector-state trajectories grouped by episode_id (ids must be grouped
/// in file order, which is what the writer produces).
inline std::vector<VecTrajectory> read_vec_trajectories_jsonl(std::istream& is, double discount) {
    std::vector<VecTrajectory> out;
    std::string line;
    long long cur_id = -1;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        long long id = j.at("episode_id").get<long long>();
        if (id != cur_id) {
            out.emplace_back();
            cur_id = id;
        }
        VecStep st;
        st.t = j.at("t").get<int>();
        st.state = j.at("s").get<Vec>();
        if (!j.at("s_hat").is_null()) st.falsified_state = j.at("s_hat").get<Vec>();
        if (!j.at("a").is_null()) st.action = j.at("a").get<Vec>();
        st.reward = j.at("r").get<double>();
        st.next_state = j.at("s_next").get<Vec>();
        out.back().steps.push_back(std::move(st));
    }
    for (auto& ep : out) {
        double w = 1.0;
        for (const auto& st : ep.steps) {
            ep.episode_return += w * st.reward;
            ep.undiscounted_return += st.reward;
            w *= discount;
        }
    }
    return out;
}

inline std::vector<VecTrajectory> read_vec_trajectories_jsonl(const std::string& path, double discount) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_vec_trajectories_jsonl: cannot open " + path);
    return read_vec_trajectories_jsonl(is, discount);
}

}  // namespace samlab
