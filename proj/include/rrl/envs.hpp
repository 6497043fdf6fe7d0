#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rrl/mdp.hpp"
#include "rrl/rng.hpp"

namespace rrl {

// Grid actions, in the order destinations are resolved.
inline constexpr int kLeft = 0;
inline constexpr int kDown = 1;
inline constexpr int kRight = 2;
inline constexpr int kUp = 3;

enum class SlipModel { deterministic, slippery3 };

// Frozen-lake style grid. Cells: S start, F frozen, H hole, G goal.
// Holes and the goal feed an absorbing sink appended after the grid cells.
// Rewards are folded into expected per-(state, action) costs: leaving a live
// cell costs step_cost, plus hole_cost (minus goal_reward) weighted by the
// probability of landing in a hole (on the goal).
struct GridWorldSpec {
  std::vector<std::string> map;
  SlipModel slip = SlipModel::slippery3;
  double step_cost = 0.0;
  double hole_cost = 0.0;
  double goal_reward = 1.0;
  double discount = 0.95;
};

// Chain of length N. FORWARD (action 0) advances one cell and pays
// forward_reward only from the last cell (which self-loops); BACKWARD
// (action 1) returns to cell 0 and pays backward_reward. With probability
// slip the opposite action executes; costs are the expected negated rewards
// under that slip, so the tabular model is exact in law.
struct ChainSpec {
  int length = 5;
  double slip = 0.2;
  double forward_reward = 10.0;
  double backward_reward = 2.0;
  double discount = 0.95;
};

inline constexpr int kForward = 0;
inline constexpr int kBackward = 1;

// Reads a grid map from a plain-text file, one row per line. Blank lines and
// trailing carriage returns are dropped; content is validated by the builder.
inline std::vector<std::string> load_map_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("grid map: cannot open '" + path + "'");
  std::vector<std::string> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) rows.push_back(line);
  }
  return rows;
}

namespace detail {

inline void check_grid_map(const std::vector<std::string>& map) {
  if (map.empty()) throw std::invalid_argument("grid map: no rows");
  const std::size_t cols = map[0].size();
  if (cols == 0) throw std::invalid_argument("grid map: row 0 is empty");
  int starts = 0;
  int goals = 0;
  for (std::size_t r = 0; r < map.size(); ++r) {
    if (map[r].size() != cols)
      throw std::invalid_argument("grid map: not rectangular, row " + std::to_string(r) +
                                  " has " + std::to_string(map[r].size()) + " cells, expected " +
                                  std::to_string(cols));
    for (std::size_t c = 0; c < cols; ++c) {
      const char ch = map[r][c];
      if (ch != 'S' && ch != 'F' && ch != 'H' && ch != 'G')
        throw std::invalid_argument(std::string("grid map: invalid cell '") + ch + "' at row " +
                                    std::to_string(r) + ", col " + std::to_string(c));
      starts += ch == 'S';
      goals += ch == 'G';
    }
  }
  if (starts != 1)
    throw std::invalid_argument("grid map: expected exactly one start cell, found " +
                                std::to_string(starts));
  if (goals == 0) throw std::invalid_argument("grid map: no goal cell");
}

}  // namespace detail

// States are row-major grid indices, plus an absorbing sink at index
// rows*cols. Moves off the edge bounce back; under slippery3 the intended
// direction and its two perpendiculars each realize with probability 1/3,
// and coinciding destinations accumulate mass.
inline TabularMdp make_gridworld(const GridWorldSpec& spec) {
  detail::check_grid_map(spec.map);
  const int rows = static_cast<int>(spec.map.size());
  const int cols = static_cast<int>(spec.map[0].size());
  const int sink = rows * cols;
  const int n = sink + 1;

  TabularMdp mdp;
  mdp.n_states = n;
  mdp.n_actions = 4;
  mdp.discount = spec.discount;
  mdp.cost = Mat::Zero(n, 4);
  mdp.transitions.assign(4, Mat::Zero(n, n));

  constexpr int dr[4] = {0, 1, 0, -1};
  constexpr int dc[4] = {-1, 0, 1, 0};
  const auto resolve = [&](int r, int c, int dir) {
    const int nr = r + dr[dir];
    const int nc = c + dc[dir];
    if (nr < 0 || nr >= rows || nc < 0 || nc >= cols) return r * cols + c;
    return nr * cols + nc;
  };

  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int i = r * cols + c;
      const char cell = spec.map[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      if (cell == 'H' || cell == 'G') {
        for (int a = 0; a < 4; ++a) mdp.transitions[static_cast<std::size_t>(a)](i, sink) = 1.0;
        continue;
      }
      for (int a = 0; a < 4; ++a) {
        std::vector<int> realized;
        if (spec.slip == SlipModel::deterministic)
          realized = {a};
        else
          realized = {a, (a + 3) % 4, (a + 1) % 4};
        const double den = static_cast<double>(realized.size());
        std::vector<int> hits(static_cast<std::size_t>(n), 0);
        for (int dir : realized) ++hits[static_cast<std::size_t>(resolve(r, c, dir))];
        double expected = spec.step_cost;
        for (int j = 0; j < sink; ++j) {
          if (hits[static_cast<std::size_t>(j)] == 0) continue;
          const double pj = static_cast<double>(hits[static_cast<std::size_t>(j)]) / den;
          mdp.transitions[static_cast<std::size_t>(a)](i, j) = pj;
          const char dest = spec.map[static_cast<std::size_t>(j / cols)][static_cast<std::size_t>(j % cols)];
          if (dest == 'H') expected += pj * spec.hole_cost;
          if (dest == 'G') expected -= pj * spec.goal_reward;
        }
        mdp.cost(i, a) = expected;
      }
    }
  }
  for (int a = 0; a < 4; ++a) mdp.transitions[static_cast<std::size_t>(a)](sink, sink) = 1.0;
  mdp.validate();
  return mdp;
}

// Index of the start cell in the MDP built from this spec.
inline int gridworld_start_state(const GridWorldSpec& spec) {
  detail::check_grid_map(spec.map);
  const int cols = static_cast<int>(spec.map[0].size());
  for (std::size_t r = 0; r < spec.map.size(); ++r) {
    const auto c = spec.map[r].find('S');
    if (c != std::string::npos) return static_cast<int>(r) * cols + static_cast<int>(c);
  }
  throw std::logic_error("grid map: start cell vanished after validation");
}

inline TabularMdp make_nchain(const ChainSpec& spec) {
  if (spec.length < 2) throw std::invalid_argument("chain: length must be at least 2");
  if (!(spec.slip >= 0.0 && spec.slip <= 1.0))
    throw std::invalid_argument("chain: slip must lie in [0,1]");
  const int n = spec.length;

  TabularMdp mdp;
  mdp.n_states = n;
  mdp.n_actions = 2;
  mdp.discount = spec.discount;
  mdp.cost = Mat::Zero(n, 2);
  mdp.transitions.assign(2, Mat::Zero(n, n));

  for (int i = 0; i < n; ++i) {
    const int ahead = std::min(i + 1, n - 1);
    // Reward for the realized move, not the commanded one.
    const double fwd_reward = (i == n - 1) ? spec.forward_reward : 0.0;
    mdp.transitions[kForward](i, ahead) += 1.0 - spec.slip;
    mdp.transitions[kForward](i, 0) += spec.slip;
    mdp.transitions[kBackward](i, 0) += 1.0 - spec.slip;
    mdp.transitions[kBackward](i, ahead) += spec.slip;
    mdp.cost(i, kForward) = -((1.0 - spec.slip) * fwd_reward + spec.slip * spec.backward_reward);
    mdp.cost(i, kBackward) = -((1.0 - spec.slip) * spec.backward_reward + spec.slip * fwd_reward);
  }
  mdp.validate();
  return mdp;
}

// Blends every transition row toward the uniform distribution:
// p_new = (1-p)*p_old + p/n. Costs and discount are untouched. p = 0 is the
// identity transform, exactly.
inline TabularMdp perturb(const TabularMdp& mdp, double p) {
  if (!(p >= 0.0 && p <= 1.0))
    throw std::invalid_argument("perturb: probability must lie in [0,1]");
  TabularMdp out = mdp;
  const double u = p / static_cast<double>(mdp.n_states);
  for (auto& P : out.transitions) P = ((1.0 - p) * P.array() + u).matrix();
  return out;
}

// Sampling-time equivalent of perturb: with probability p jump to a uniform
// state, otherwise draw from the unperturbed row. Same law as sampling the
// perturbed tensor.
inline int sample_transition_perturbed(const TabularMdp& mdp, double p, int i, int a, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0))
    throw std::invalid_argument("perturb: probability must lie in [0,1]");
  if (rng.uniform01() < p) return rng.uniform_int(mdp.n_states);
  return sample_transition(mdp, i, a, rng);
}

// Random test fixture: each row gets `branching` distinct successors with
// Dirichlet(1,...,1) weights, costs uniform in [0,1]. Same seed, same MDP.
inline TabularMdp random_mdp(int n_states, int n_actions, int branching, std::uint64_t seed,
                             double discount = 0.9) {
  if (n_states <= 0 || n_actions <= 0)
    throw std::invalid_argument("random_mdp: state and action counts must be positive");
  if (branching < 1 || branching > n_states)
    throw std::invalid_argument("random_mdp: branching must lie in [1, n_states]");

  Rng rng(seed);
  TabularMdp mdp;
  mdp.n_states = n_states;
  mdp.n_actions = n_actions;
  mdp.discount = discount;
  mdp.cost = Mat::Zero(n_states, n_actions);
  mdp.transitions.assign(static_cast<std::size_t>(n_actions), Mat::Zero(n_states, n_states));

  std::vector<int> pool(static_cast<std::size_t>(n_states));
  for (int a = 0; a < n_actions; ++a) {
    for (int i = 0; i < n_states; ++i) {
      std::iota(pool.begin(), pool.end(), 0);
      // Partial Fisher-Yates picks `branching` distinct destinations.
      for (int k = 0; k < branching; ++k)
        std::swap(pool[static_cast<std::size_t>(k)],
                  pool[static_cast<std::size_t>(k + rng.uniform_int(n_states - k))]);
      double total = 0.0;
      std::vector<double> w(static_cast<std::size_t>(branching));
      for (auto& wk : w) {
        double u = rng.uniform01();
        while (u <= 0.0) u = rng.uniform01();
        wk = -std::log(u);
        total += wk;
      }
      for (int k = 0; k < branching; ++k)
        mdp.transitions[static_cast<std::size_t>(a)](i, pool[static_cast<std::size_t>(k)]) =
            w[static_cast<std::size_t>(k)] / total;
      mdp.cost(i, a) = rng.uniform01();
    }
  }
  mdp.validate();
  return mdp;
}

inline nlohmann::json gridworld_spec_to_json(const GridWorldSpec& spec) {
  nlohmann::json j;
  j["type"] = "gridworld";
  j["map"] = spec.map;
  j["slip"] = spec.slip == SlipModel::slippery3 ? "slippery" : "deterministic";
  j["step_cost"] = spec.step_cost;
  j["hole_cost"] = spec.hole_cost;
  j["goal_reward"] = spec.goal_reward;
  j["discount"] = spec.discount;
  return j;
}

inline nlohmann::json chain_spec_to_json(const ChainSpec& spec) {
  nlohmann::json j;
  j["type"] = "chain";
  j["length"] = spec.length;
  j["slip"] = spec.slip;
  j["forward_reward"] = spec.forward_reward;
  j["backward_reward"] = spec.backward_reward;
  j["discount"] = spec.discount;
  return j;
}

inline GridWorldSpec gridworld_spec_from_json(const nlohmann::json& j,
                                              const std::string& base_dir = "") {
  GridWorldSpec spec;
  try {
    if (j.contains("map_file")) {
      std::filesystem::path path = j.at("map_file").get<std::string>();
      if (path.is_relative() && !base_dir.empty()) path = std::filesystem::path(base_dir) / path;
      spec.map = load_map_rows(path.string());
    } else {
      spec.map = j.at("map").get<std::vector<std::string>>();
    }
    if (j.contains("slip")) {
      const auto s = j.at("slip").get<std::string>();
      if (s == "slippery")
        spec.slip = SlipModel::slippery3;
      else if (s == "deterministic")
        spec.slip = SlipModel::deterministic;
      else
        throw std::invalid_argument("gridworld json: unknown slip model '" + s + "'");
    }
    spec.step_cost = j.value("step_cost", spec.step_cost);
    spec.hole_cost = j.value("hole_cost", spec.hole_cost);
    spec.goal_reward = j.value("goal_reward", spec.goal_reward);
    spec.discount = j.value("discount", spec.discount);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("gridworld json: ") + e.what());
  }
  return spec;
}

inline ChainSpec chain_spec_from_json(const nlohmann::json& j) {
  ChainSpec spec;
  try {
    spec.length = j.value("length", spec.length);
    spec.slip = j.value("slip", spec.slip);
    spec.forward_reward = j.value("forward_reward", spec.forward_reward);
    spec.backward_reward = j.value("backward_reward", spec.backward_reward);
    spec.discount = j.value("discount", spec.discount);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("chain json: ") + e.what());
  }
  return spec;
}

// Environment block of a harness config: {"type": "gridworld" | "chain" |
// "random" | "mdp", ...}. Relative map_file paths resolve against base_dir.
inline TabularMdp env_from_json(const nlohmann::json& j, const std::string& base_dir = "") {
  if (!j.contains("type")) throw std::invalid_argument("env json: missing 'type'");
  const auto type = j.at("type").get<std::string>();
  if (type == "gridworld") return make_gridworld(gridworld_spec_from_json(j, base_dir));
  if (type == "chain") return make_nchain(chain_spec_from_json(j));
  if (type == "random") {
    try {
      return random_mdp(j.at("n_states").get<int>(), j.at("n_actions").get<int>(),
                        j.at("branching").get<int>(), j.at("seed").get<std::uint64_t>(),
                        j.value("discount", 0.9));
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(std::string("env json: ") + e.what());
    }
  }
  if (type == "mdp") return mdp_from_json(j);
  throw std::invalid_argument("env json: unknown type '" + type + "'");
}

}  // namespace rrl
