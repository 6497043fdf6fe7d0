#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rrl/rng.hpp"

namespace rrl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// State-value table v(i) and action-value table q(i,a).
using ValueTable = Eigen::VectorXd;
using QTable = Eigen::MatrixXd;

constexpr double kRowSumTol = 1e-9;

// Finite MDP with costs c(i,a), transition rows p[a](i,j), discount in (0,1).
// The agent minimizes expected discounted cost; environments that speak in
// rewards negate at the boundary.
struct TabularMdp {
  int n_states = 0;
  int n_actions = 0;
  double discount = 0.0;
  Mat cost;                      // n_states x n_actions
  std::vector<Mat> transitions;  // one n_states x n_states row-stochastic matrix per action

  const Mat& p(int a) const { return transitions[static_cast<std::size_t>(a)]; }

  void validate() const {
    if (n_states <= 0) throw std::invalid_argument("mdp: n_states must be positive");
    if (n_actions <= 0) throw std::invalid_argument("mdp: n_actions must be positive");
    if (!(discount > 0.0) || !(discount < 1.0))
      throw std::invalid_argument("mdp: discount must lie in (0,1)");
    if (cost.rows() != n_states || cost.cols() != n_actions)
      throw std::invalid_argument("mdp: cost table shape mismatch");
    if (!cost.allFinite()) throw std::invalid_argument("mdp: costs must be finite");
    if (static_cast<int>(transitions.size()) != n_actions)
      throw std::invalid_argument("mdp: one transition matrix per action required");
    for (int a = 0; a < n_actions; ++a) {
      const Mat& P = transitions[static_cast<std::size_t>(a)];
      if (P.rows() != n_states || P.cols() != n_states)
        throw std::invalid_argument("mdp: transitions[" + std::to_string(a) + "] shape mismatch");
      for (int i = 0; i < n_states; ++i) {
        double s = 0.0;
        for (int j = 0; j < n_states; ++j) {
          const double pij = P(i, j);
          if (!(pij >= 0.0) || !(pij <= 1.0))
            throw std::invalid_argument("mdp: transitions[" + std::to_string(a) + "][" +
                                        std::to_string(i) + "] has entry outside [0,1]");
          s += pij;
        }
        if (std::abs(s - 1.0) > kRowSumTol)
          throw std::invalid_argument("mdp: transitions[" + std::to_string(a) + "][" +
                                      std::to_string(i) + "] row sums to " + std::to_string(s));
      }
    }
  }
};

// True when state i self-loops under every action (episodic sink).
inline bool is_absorbing(const TabularMdp& mdp, int i) {
  for (int a = 0; a < mdp.n_actions; ++a)
    if (mdp.p(a)(i, i) < 1.0 - kRowSumTol) return false;
  return true;
}

inline bool has_absorbing_state(const TabularMdp& mdp) {
  for (int i = 0; i < mdp.n_states; ++i)
    if (is_absorbing(mdp, i)) return true;
  return false;
}

// Deterministic state->action map, or a delta-greedy wrapper around a frozen
// Q snapshot: with probability delta act uniformly, otherwise take the
// cost-minimizing action (lowest index on ties).
struct Policy {
  enum class Kind { deterministic, epsilon_greedy };

  Kind kind = Kind::deterministic;
  std::vector<int> actions;  // deterministic table
  QTable q;                  // epsilon-greedy base
  double delta = 0.0;

  static Policy deterministic(std::vector<int> actions) {
    Policy p;
    p.kind = Kind::deterministic;
    p.actions = std::move(actions);
    return p;
  }

  static Policy epsilon_greedy(QTable q, double delta) {
    if (!(delta >= 0.0 && delta <= 1.0))
      throw std::invalid_argument("policy: delta must lie in [0,1]");
    Policy p;
    p.kind = Kind::epsilon_greedy;
    p.q = std::move(q);
    p.delta = delta;
    return p;
  }

  void validate(int n_states, int n_actions) const {
    if (kind == Kind::deterministic) {
      if (static_cast<int>(actions.size()) != n_states)
        throw std::invalid_argument("policy: action table must cover every state");
      for (int a : actions)
        if (a < 0 || a >= n_actions)
          throw std::invalid_argument("policy: action index out of range");
    } else {
      if (q.rows() != n_states || q.cols() != n_actions)
        throw std::invalid_argument("policy: q table shape mismatch");
    }
  }

  int greedy_action(int i) const {
    if (kind == Kind::deterministic) return actions[static_cast<std::size_t>(i)];
    int best = 0;
    for (int a = 1; a < q.cols(); ++a)
      if (q(i, a) < q(i, best)) best = a;
    return best;
  }

  int act(int i, Rng& rng) const {
    if (kind == Kind::deterministic) return actions[static_cast<std::size_t>(i)];
    if (delta > 0.0 && rng.uniform01() < delta)
      return rng.uniform_int(static_cast<int>(q.cols()));
    return greedy_action(i);
  }

  // Probability of taking action a in state i.
  double prob(int i, int a, int n_actions) const {
    if (kind == Kind::deterministic)
      return actions[static_cast<std::size_t>(i)] == a ? 1.0 : 0.0;
    double p = delta / n_actions;
    if (greedy_action(i) == a) p += 1.0 - delta;
    return p;
  }
};

struct TransitionRecord {
  int state;
  int action;
  double cost;
  int next_state;
};

struct Trajectory {
  std::vector<TransitionRecord> steps;
  bool terminated = false;  // ended by entering an absorbing state

  std::size_t length() const { return steps.size(); }
};

// Power-law step size gamma_t = a / (b + t)^e. With e in (0.5, 1] the
// Robbins-Monro conditions hold: sum gamma = inf, sum gamma^2 < inf.
struct StepSchedule {
  double a = 1.0;
  double b = 1.0;
  double e = 1.0;

  double operator()(long t) const { return a / std::pow(b + static_cast<double>(t), e); }
};

inline bool validate_schedule(const StepSchedule& s, std::string* diagnostic = nullptr) {
  std::string why;
  if (!(s.a > 0.0)) why = "coefficient a must be positive";
  else if (!(s.b >= 1.0)) why = "offset b must be at least 1";
  else if (!(s.e > 0.5)) why = "exponent e must exceed 0.5 (sum of squared steps diverges)";
  else if (!(s.e <= 1.0)) why = "exponent e must not exceed 1 (step sum becomes finite)";
  if (diagnostic) *diagnostic = why;
  return why.empty();
}

// Two-timescale pairing: the slow iterate's steps must vanish relative to the
// fast iterate's, which for power laws means a strictly larger exponent.
inline bool validate_two_timescale(const StepSchedule& slow, const StepSchedule& fast,
                                   std::string* diagnostic = nullptr) {
  std::string why;
  if (!validate_schedule(slow, &why)) {
    if (diagnostic) *diagnostic = "slow schedule: " + why;
    return false;
  }
  if (!validate_schedule(fast, &why)) {
    if (diagnostic) *diagnostic = "fast schedule: " + why;
    return false;
  }
  if (!(slow.e > fast.e)) {
    if (diagnostic) *diagnostic = "slow exponent must strictly exceed fast exponent";
    return false;
  }
  if (diagnostic) diagnostic->clear();
  return true;
}

// Draws the successor state for (i,a) by an inverse-CDF walk over the row.
inline int sample_transition(const TabularMdp& mdp, int i, int a, Rng& rng) {
  if (i < 0 || i >= mdp.n_states) throw std::out_of_range("sample_transition: state out of range");
  if (a < 0 || a >= mdp.n_actions)
    throw std::out_of_range("sample_transition: action out of range");
  const Mat& P = mdp.p(a);
  double u = rng.uniform01();
  int last_positive = i;
  for (int j = 0; j < mdp.n_states; ++j) {
    const double pij = P(i, j);
    if (pij <= 0.0) continue;
    last_positive = j;
    u -= pij;
    if (u < 0.0) return j;
  }
  return last_positive;  // rounding slack on the row sum
}

struct StoppingRule {
  enum class Kind { horizon, absorbing, geometric };

  Kind kind = Kind::horizon;
  long limit = 0;   // horizon length, or hard cap for the other rules
  double q = 0.0;   // per-step stop probability (geometric rule)

  static StoppingRule horizon(long n) {
    if (n < 0) throw std::invalid_argument("stopping rule: horizon must be nonnegative");
    StoppingRule r;
    r.kind = Kind::horizon;
    r.limit = n;
    return r;
  }

  static StoppingRule absorbing(long cap) {
    if (cap <= 0) throw std::invalid_argument("stopping rule: cap must be positive");
    StoppingRule r;
    r.kind = Kind::absorbing;
    r.limit = cap;
    return r;
  }

  static StoppingRule geometric(double q, long cap) {
    if (!(q > 0.0 && q < 1.0))
      throw std::invalid_argument("stopping rule: geometric parameter must lie in (0,1)");
    if (cap <= 0) throw std::invalid_argument("stopping rule: cap must be positive");
    StoppingRule r;
    r.kind = Kind::geometric;
    r.limit = cap;
    r.q = q;
    return r;
  }
};

// Simulates the policy from `start` until the stopping rule fires. Entering
// an absorbing state always ends the episode (and sets the terminal flag);
// the absorbing rule additionally demands that such a state exists, since the
// episode could otherwise run forever against its cap.
inline Trajectory rollout(const TabularMdp& mdp, const Policy& policy, int start,
                          const StoppingRule& stop, Rng& rng) {
  if (start < 0 || start >= mdp.n_states)
    throw std::out_of_range("rollout: start state out of range");
  policy.validate(mdp.n_states, mdp.n_actions);
  if (stop.kind == StoppingRule::Kind::absorbing && !has_absorbing_state(mdp))
    throw std::invalid_argument("rollout: absorbing stopping rule on an mdp with no absorbing state");

  Trajectory traj;
  int i = start;
  if (is_absorbing(mdp, i)) {
    traj.terminated = true;
    return traj;
  }
  long steps = 0;
  while (steps < stop.limit) {
    const int a = policy.act(i, rng);
    const int j = sample_transition(mdp, i, a, rng);
    traj.steps.push_back({i, a, mdp.cost(i, a), j});
    ++steps;
    i = j;
    if (is_absorbing(mdp, i)) {
      traj.terminated = true;
      break;
    }
    if (stop.kind == StoppingRule::Kind::geometric && rng.uniform01() < stop.q) break;
  }
  return traj;
}

// Single-step transition matrix of the Markov chain induced by the policy.
inline Mat policy_transition_matrix(const TabularMdp& mdp, const Policy& policy) {
  policy.validate(mdp.n_states, mdp.n_actions);
  Mat P = Mat::Zero(mdp.n_states, mdp.n_states);
  for (int i = 0; i < mdp.n_states; ++i)
    for (int a = 0; a < mdp.n_actions; ++a) {
      const double w = policy.prob(i, a, mdp.n_actions);
      if (w > 0.0) P.row(i) += w * mdp.p(a).row(i);
    }
  return P;
}

// Expected immediate cost per state under the policy.
inline Vec policy_cost_vector(const TabularMdp& mdp, const Policy& policy) {
  Vec c = Vec::Zero(mdp.n_states);
  for (int i = 0; i < mdp.n_states; ++i)
    for (int a = 0; a < mdp.n_actions; ++a) {
      const double w = policy.prob(i, a, mdp.n_actions);
      if (w > 0.0) c(i) += w * mdp.cost(i, a);
    }
  return c;
}

namespace detail {

// Strong connectivity over the positive-entry adjacency of P.
inline bool strongly_connected(const Mat& P) {
  const int n = static_cast<int>(P.rows());
  auto reaches_all = [&](bool forward) {
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    int count = 1;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (int w = 0; w < n; ++w) {
        const double edge = forward ? P(u, w) : P(w, u);
        if (edge > 0.0 && !seen[static_cast<std::size_t>(w)]) {
          seen[static_cast<std::size_t>(w)] = 1;
          ++count;
          stack.push_back(w);
        }
      }
    }
    return count == n;
  };
  return reaches_all(true) && reaches_all(false);
}

}  // namespace detail

// Stationary distribution of an irreducible aperiodic chain by power
// iteration to an l1 fixed-point residual of 1e-10 (cap 1e6 sweeps).
// Irreducibility is checked as strong connectivity; aperiodicity by the
// conservative self-loop heuristic, so borderline chains are rejected.
inline Vec steady_state_distribution(const Mat& P) {
  const int n = static_cast<int>(P.rows());
  if (n <= 0 || P.cols() != n)
    throw std::invalid_argument("steady_state_distribution: matrix must be square");
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      if (!(P(i, j) >= 0.0))
        throw std::invalid_argument("steady_state_distribution: negative entry in row " +
                                    std::to_string(i));
      s += P(i, j);
    }
    if (std::abs(s - 1.0) > kRowSumTol)
      throw std::invalid_argument("steady_state_distribution: row " + std::to_string(i) +
                                  " is not stochastic");
  }
  if (!detail::strongly_connected(P))
    throw std::invalid_argument("steady_state_distribution: chain is reducible");
  bool has_self_loop = false;
  for (int i = 0; i < n; ++i)
    if (P(i, i) > 0.0) has_self_loop = true;
  if (!has_self_loop)
    throw std::invalid_argument(
        "steady_state_distribution: chain may be periodic (no self-loop found)");

  Vec xi = Vec::Constant(n, 1.0 / n);
  constexpr long kMaxIters = 1000000;
  constexpr double kResidual = 1e-10;
  for (long it = 0; it < kMaxIters; ++it) {
    Vec next = P.transpose() * xi;
    next /= next.sum();
    const double res = (next - xi).cwiseAbs().sum();
    xi = next;
    if (res <= kResidual) return xi;
  }
  throw std::runtime_error("steady_state_distribution: power iteration did not converge");
}

// JSON layout: {"n_states", "n_actions", "discount", "cost" (row-major i then
// a), "transitions" (a-major, then i, then j)}.
inline nlohmann::json mdp_to_json(const TabularMdp& mdp) {
  nlohmann::json j;
  j["n_states"] = mdp.n_states;
  j["n_actions"] = mdp.n_actions;
  j["discount"] = mdp.discount;
  std::vector<double> cost;
  cost.reserve(static_cast<std::size_t>(mdp.n_states) * mdp.n_actions);
  for (int i = 0; i < mdp.n_states; ++i)
    for (int a = 0; a < mdp.n_actions; ++a) cost.push_back(mdp.cost(i, a));
  j["cost"] = cost;
  std::vector<double> trans;
  trans.reserve(static_cast<std::size_t>(mdp.n_actions) * mdp.n_states * mdp.n_states);
  for (int a = 0; a < mdp.n_actions; ++a)
    for (int i = 0; i < mdp.n_states; ++i)
      for (int k = 0; k < mdp.n_states; ++k) trans.push_back(mdp.p(a)(i, k));
  j["transitions"] = trans;
  return j;
}

inline TabularMdp mdp_from_json(const nlohmann::json& j) {
  TabularMdp mdp;
  try {
    mdp.n_states = j.at("n_states").get<int>();
    mdp.n_actions = j.at("n_actions").get<int>();
    mdp.discount = j.at("discount").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("mdp json: bad scalar field: ") + e.what());
  }
  if (mdp.n_states <= 0 || mdp.n_actions <= 0)
    throw std::invalid_argument("mdp json: n_states/n_actions must be positive");
  const auto need = [&](const char* key, std::size_t len) {
    if (!j.contains(key) || !j.at(key).is_array() || j.at(key).size() != len)
      throw std::invalid_argument(std::string("mdp json: field '") + key + "' must be an array of " +
                                  std::to_string(len) + " numbers");
  };
  const std::size_t n = static_cast<std::size_t>(mdp.n_states);
  const std::size_t m = static_cast<std::size_t>(mdp.n_actions);
  need("cost", n * m);
  need("transitions", m * n * n);
  mdp.cost = Mat(mdp.n_states, mdp.n_actions);
  const auto& cj = j.at("cost");
  for (int i = 0; i < mdp.n_states; ++i)
    for (int a = 0; a < mdp.n_actions; ++a)
      mdp.cost(i, a) = cj.at(static_cast<std::size_t>(i) * m + a).get<double>();
  const auto& tj = j.at("transitions");
  mdp.transitions.assign(m, Mat(mdp.n_states, mdp.n_states));
  for (int a = 0; a < mdp.n_actions; ++a)
    for (int i = 0; i < mdp.n_states; ++i)
      for (int k = 0; k < mdp.n_states; ++k)
        mdp.transitions[static_cast<std::size_t>(a)](i, k) =
            tj.at((static_cast<std::size_t>(a) * n + i) * n + k).get<double>();
  mdp.validate();
  return mdp;
}

}  // namespace rrl
