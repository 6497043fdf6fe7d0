#pragma once

#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rrl/mdp.hpp"
#include "rrl/uncertainty.hpp"

namespace rrl {

// Confidence regions for every (state, action) pair: either one region shared
// by all pairs, or an explicit table indexed [state][action].
class RegionTable {
public:
  static RegionTable shared(ConfidenceRegion region) {
    RegionTable t;
    t.shared_.push_back(std::move(region));
    return t;
  }

  static RegionTable per_state_action(std::vector<std::vector<ConfidenceRegion>> table) {
    if (table.empty()) throw std::invalid_argument("region table: empty");
    RegionTable t;
    t.table_ = std::move(table);
    return t;
  }

  const ConfidenceRegion& at(int i, int a) const {
    if (!shared_.empty()) return shared_.front();
    return table_[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)];
  }

  bool is_shared() const { return !shared_.empty(); }

  void validate(int n_states, int n_actions) const {
    if (!shared_.empty()) {
      if (shared_.front().dim() != n_states)
        throw std::invalid_argument("region table: region dimension " +
                                    std::to_string(shared_.front().dim()) + " != state count " +
                                    std::to_string(n_states));
      return;
    }
    if (static_cast<int>(table_.size()) != n_states)
      throw std::invalid_argument("region table: row count != state count");
    for (const auto& row : table_) {
      if (static_cast<int>(row.size()) != n_actions)
        throw std::invalid_argument("region table: column count != action count");
      for (const auto& region : row)
        if (region.dim() != n_states)
          throw std::invalid_argument("region table: region dimension != state count");
    }
  }

private:
  RegionTable() = default;
  std::vector<ConfidenceRegion> shared_;
  std::vector<std::vector<ConfidenceRegion>> table_;
};

// Worst-case expected value of v over the transition row: the nominal row
// plus an adversarial shift from the region. Constrained keeps the shifted
// row on the simplex (the true uncertainty set); unconstrained is the proxy
// set the sample-based learners price, which may leave the simplex.
inline double adversarial_expectation(const ConfidenceRegion& region, const Vec& p_row,
                                      const Vec& v, bool constrained) {
  if (constrained) return support_simplex_constrained(region, p_row, v);
  return p_row.dot(v) + support(region, v).value;
}

// Q(i,a) = c(i,a) + discount * worst-case expectation of v.
inline QTable robust_q_from_value(const TabularMdp& mdp, const RegionTable& regions,
                                  const ValueTable& v, bool constrained) {
  if (v.size() != mdp.n_states) throw std::invalid_argument("robust q: value table size mismatch");
  regions.validate(mdp.n_states, mdp.n_actions);
  QTable q(mdp.n_states, mdp.n_actions);
  for (int i = 0; i < mdp.n_states; ++i)
    for (int a = 0; a < mdp.n_actions; ++a)
      q(i, a) = mdp.cost(i, a) +
                mdp.discount *
                    adversarial_expectation(regions.at(i, a), mdp.p(a).row(i).transpose(), v,
                                            constrained);
  return q;
}

namespace detail {

// Sup-norm fixed-point iteration of v <- backup(v). The threshold
// tol*(1-discount)/discount turns the observed step size into the honest
// bound ||v - v_fix||_inf <= tol.
template <typename Backup>
ValueTable iterate_to_fixed_point(int n, double discount, double tol, Backup&& backup) {
  if (!(tol > 0.0)) throw std::invalid_argument("robust dp: tol must be positive");
  const double threshold = tol * (1.0 - discount) / discount;
  ValueTable v = ValueTable::Zero(n);
  for (long iter = 0; iter < 1000000; ++iter) {
    ValueTable next = backup(v);
    const double step = (next - v).cwiseAbs().maxCoeff();
    v = std::move(next);
    if (step <= threshold) return v;
  }
  throw std::runtime_error("robust dp: fixed-point iteration did not converge");
}

}  // namespace detail

// Robust value iteration: v(i) <- min_a [c(i,a) + discount * S_ia(v)].
// Returns the value table and the greedy (lowest index on ties) policy.
inline std::pair<ValueTable, Policy> robust_value_iteration(const TabularMdp& mdp,
                                                            const RegionTable& regions,
                                                            bool constrained, double tol) {
  mdp.validate();
  regions.validate(mdp.n_states, mdp.n_actions);
  ValueTable v = detail::iterate_to_fixed_point(
      mdp.n_states, mdp.discount, tol, [&](const ValueTable& cur) {
        const QTable q = robust_q_from_value(mdp, regions, cur, constrained);
        return ValueTable(q.rowwise().minCoeff());
      });
  const QTable q = robust_q_from_value(mdp, regions, v, constrained);
  std::vector<int> actions(static_cast<std::size_t>(mdp.n_states));
  for (int i = 0; i < mdp.n_states; ++i) {
    int best = 0;
    for (int a = 1; a < mdp.n_actions; ++a)
      if (q(i, a) < q(i, best)) best = a;
    actions[static_cast<std::size_t>(i)] = best;
  }
  return {std::move(v), Policy::deterministic(std::move(actions))};
}

// Robust value of a fixed policy: v(i) <- sum_a pi(a|i)[c(i,a) + discount * S_ia(v)].
inline ValueTable robust_policy_evaluation(const TabularMdp& mdp, const RegionTable& regions,
                                           const Policy& pi, bool constrained, double tol) {
  mdp.validate();
  regions.validate(mdp.n_states, mdp.n_actions);
  pi.validate(mdp.n_states, mdp.n_actions);
  // Only actions the policy can take are backed up; the worst-case
  // expectation is the expensive part of each sweep.
  return detail::iterate_to_fixed_point(
      mdp.n_states, mdp.discount, tol, [&](const ValueTable& cur) {
        ValueTable next = ValueTable::Zero(mdp.n_states);
        for (int i = 0; i < mdp.n_states; ++i)
          for (int a = 0; a < mdp.n_actions; ++a) {
            const double w = pi.prob(i, a, mdp.n_actions);
            if (w > 0.0)
              next(i) += w * (mdp.cost(i, a) +
                              mdp.discount * adversarial_expectation(
                                                 regions.at(i, a), mdp.p(a).row(i).transpose(),
                                                 cur, constrained));
          }
        return next;
      });
}

// Golden-file payload for oracle outputs.
inline nlohmann::json oracle_to_json(const ValueTable& v, const QTable& q, const Policy& pi) {
  nlohmann::json j;
  j["value"] = std::vector<double>(v.data(), v.data() + v.size());
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(q.rows()));
  for (int i = 0; i < q.rows(); ++i) {
    rows[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(q.cols()));
    for (int a = 0; a < q.cols(); ++a) rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] = q(i, a);
  }
  j["q_table"] = rows;
  j["policy"] = pi.actions;
  return j;
}

struct OracleResult {
  ValueTable value;
  QTable q;
  Policy policy = Policy::deterministic({});
};

inline OracleResult oracle_from_json(const nlohmann::json& j) {
  OracleResult out;
  try {
    const auto v = j.at("value").get<std::vector<double>>();
    out.value = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    const auto rows = j.at("q_table").get<std::vector<std::vector<double>>>();
    if (rows.empty()) throw std::invalid_argument("oracle json: empty q_table");
    out.q.resize(static_cast<Eigen::Index>(rows.size()),
                 static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.front().size())
        throw std::invalid_argument("oracle json: ragged q_table");
      for (std::size_t a = 0; a < rows[i].size(); ++a)
        out.q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = rows[i][a];
    }
    out.policy = Policy::deterministic(j.at("policy").get<std::vector<int>>());
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("oracle json: ") + e.what());
  }
  return out;
}

}  // namespace rrl
