#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rrl/mdp.hpp"
#include "rrl/robust_dp.hpp"
#include "rrl/rng.hpp"
#include "rrl/uncertainty.hpp"

namespace rrl {

// Eligibility traces z >= 0. Every-visit adds one per visit; restart clamps
// the visited state back to one. Both decay every step by discount*lambda.
struct EligibilityTraces {
  enum class Variant { every_visit, restart };

  Vec z;
  Variant variant = Variant::every_visit;
  double discount = 0.0;
  double lambda = 0.0;

  static EligibilityTraces fresh(int n, Variant variant, double discount, double lambda) {
    if (n <= 0) throw std::invalid_argument("traces: state count must be positive");
    if (!(discount > 0.0 && discount < 1.0))
      throw std::invalid_argument("traces: discount must lie in (0,1)");
    // lambda = 0 is plain TD(0); only the upper end breaks the decay bound.
    if (!(lambda >= 0.0 && lambda < 1.0))
      throw std::invalid_argument("traces: lambda must lie in [0,1)");
    EligibilityTraces tr;
    tr.z = Vec::Zero(n);
    tr.variant = variant;
    tr.discount = discount;
    tr.lambda = lambda;
    return tr;
  }
};

inline EligibilityTraces trace_update(EligibilityTraces tr, int visited) {
  if (visited < 0 || visited >= tr.z.size())
    throw std::out_of_range("trace_update: visited state out of range");
  tr.z *= tr.discount * tr.lambda;
  if (tr.variant == EligibilityTraces::Variant::every_visit)
    tr.z(visited) += 1.0;
  else
    tr.z(visited) = 1.0;
  return tr;
}

// Sample-based robust backup: the adversarial support prices the current
// value vector v(k) = min_a q(k,a) alongside the sampled successor.
inline QTable robust_q_update(QTable q, int i, int a, int j, double cost, double gamma,
                              const ConfidenceRegion& region, double vartheta) {
  if (i < 0 || i >= q.rows() || j < 0 || j >= q.rows() || a < 0 || a >= q.cols())
    throw std::out_of_range("robust_q_update: index out of range");
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw std::invalid_argument("robust_q_update: step size must lie in (0,1]");
  if (region.dim() != q.rows())
    throw std::invalid_argument("robust_q_update: region dimension must match state count");
  const Vec v = q.rowwise().minCoeff();
  const double sigma = support(region, v).value;
  q(i, a) = (1.0 - gamma) * q(i, a) + gamma * (cost + vartheta * sigma + vartheta * v(j));
  return q;
}

// On-policy variant: the caller supplies the successor action a2 drawn from
// its behavior rule; the support term still prices v(k) = min_a q(k,a).
inline QTable robust_sarsa_update(QTable q, int i, int a, int j, int a2, double cost, double gamma,
                                  const ConfidenceRegion& region, double vartheta) {
  if (i < 0 || i >= q.rows() || j < 0 || j >= q.rows() || a < 0 || a >= q.cols() || a2 < 0 ||
      a2 >= q.cols())
    throw std::out_of_range("robust_sarsa_update: index out of range");
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw std::invalid_argument("robust_sarsa_update: step size must lie in (0,1]");
  if (region.dim() != q.rows())
    throw std::invalid_argument("robust_sarsa_update: region dimension must match state count");
  const Vec v = q.rowwise().minCoeff();
  const double sigma = support(region, v).value;
  q(i, a) = (1.0 - gamma) * q(i, a) + gamma * (cost + vartheta * sigma + vartheta * q(j, a2));
  return q;
}

namespace detail {

inline double td_error_given_sigma(const ValueTable& v, int i, int j, double cost, double vartheta,
                                   double sigma) {
  return cost + vartheta * v(j) - v(i) + vartheta * sigma;
}

}  // namespace detail

inline double robust_td_error(const ValueTable& v, int i, int j, double cost, double vartheta,
                              const ConfidenceRegion& region) {
  if (i < 0 || i >= v.size() || j < 0 || j >= v.size())
    throw std::out_of_range("robust_td_error: index out of range");
  if (region.dim() != v.size())
    throw std::invalid_argument("robust_td_error: region dimension must match state count");
  return detail::td_error_given_sigma(v, i, j, cost, vartheta, support(region, v).value);
}

struct TabularLearnerConfig {
  StepSchedule schedule;
  double exploration = 0.1;  // delta-greedy behavior
  // No regions means the nominal learner: the support term is identically 0.
  std::optional<RegionTable> regions;
  // NaN inherits the environment's discount.
  double discount = std::numeric_limits<double>::quiet_NaN();

  long total_steps = 100000;  // Q-learning / SARSA
  long episodes = 10000;      // TD(lambda)
  EligibilityTraces::Variant trace_variant = EligibilityTraces::Variant::every_visit;
  double lambda = 0.0;
  // Absent: stop at an absorbing state, hard cap 10n steps; plain 10n horizon
  // for continuing environments.
  std::optional<StoppingRule> stop;
  // Ablation: update v within the episode instead of freezing it.
  bool online_updates = false;

  bool exploring_starts = true;
  int start_state = 0;

  long checkpoint_every = 0;  // 0 = no checkpoints
  QTable oracle_q;            // size 0 = no oracle distance
  ValueTable oracle_v;
  double stop_at_distance = 0.0;  // early exit threshold on oracle distance, 0 = off
  int beta_samples = 50;          // sampled precondition check, 0 = skip

  std::function<void(long step, const QTable& q, double distance)> on_checkpoint_q;
  std::function<void(long episode, const ValueTable& v, double distance)> on_checkpoint_v;
};

struct LearnerCheckpoint {
  long step = 0;
  double distance = std::numeric_limits<double>::quiet_NaN();
};

struct LearnerDiagnostics {
  std::vector<LearnerCheckpoint> checkpoints;
  double beta_hat = 0.0;
  bool precondition_ok = true;
  std::vector<std::string> warnings;
  long steps_run = 0;
  double final_distance = std::numeric_limits<double>::quiet_NaN();
  double trace_mass_max = 0.0;  // TD: max_i sum_m z_m(i), worst simulation
};

inline nlohmann::json checkpoint_to_json(long step, const QTable& q, double distance) {
  nlohmann::json j;
  j["step"] = step;
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(q.rows()));
  for (int i = 0; i < q.rows(); ++i)
    for (int a = 0; a < q.cols(); ++a) rows[static_cast<std::size_t>(i)].push_back(q(i, a));
  j["q_table"] = rows;
  j["distance_to_oracle"] = distance;
  return j;
}

inline nlohmann::json checkpoint_to_json(long step, const ValueTable& v, double distance) {
  nlohmann::json j;
  j["step"] = step;
  j["value_table"] = std::vector<double>(v.data(), v.data() + v.size());
  j["distance_to_oracle"] = distance;
  return j;
}

namespace detail {

inline double resolve_discount(const TabularMdp& env, const TabularLearnerConfig& cfg) {
  if (std::isnan(cfg.discount)) return env.discount;
  if (!(cfg.discount > 0.0 && cfg.discount < 1.0))
    throw std::invalid_argument("learner: discount must lie in (0,1)");
  return cfg.discount;
}

inline void check_learner_config(const TabularMdp& env, const TabularLearnerConfig& cfg) {
  std::string why;
  if (!validate_schedule(cfg.schedule, &why))
    throw std::invalid_argument("learner: bad schedule: " + why);
  if (!(cfg.exploration >= 0.0 && cfg.exploration <= 1.0))
    throw std::invalid_argument("learner: exploration must lie in [0,1]");
  if (cfg.regions) cfg.regions->validate(env.n_states, env.n_actions);
  if (cfg.start_state < 0 || cfg.start_state >= env.n_states)
    throw std::out_of_range("learner: start state out of range");
}

// The nominal learner prices no adversary: a radius-0 ball keeps every code
// path identical while the support term vanishes.
inline ConfidenceRegion nominal_region(int n) { return ConfidenceRegion::l2_ball(n, 0.0); }

// Sampled beta over the rows the learner can visit. The theorem needs
// discount*(1+beta) < 1; the run proceeds either way and records a warning.
inline void check_precondition(const TabularMdp& env, const RegionTable& regions, double vartheta,
                               int samples, const Rng& rng, LearnerDiagnostics* diag) {
  if (samples <= 0) return;
  double beta = 0.0;
  Rng probe = rng.split(0x5eed);
  for (int a = 0; a < env.n_actions; ++a)
    for (int i = 0; i < env.n_states; ++i)
      beta = std::max(beta, beta_estimate(regions.at(i, a), env.p(a).row(i).transpose(), samples,
                                          probe));
  diag->beta_hat = beta;
  if (vartheta * (1.0 + beta) >= 1.0) {
    diag->precondition_ok = false;
    diag->warnings.push_back("discount precondition violated: discount*(1+beta_hat) = " +
                             std::to_string(vartheta * (1.0 + beta)) + " >= 1");
  }
}

inline int draw_start(const TabularMdp& env, const TabularLearnerConfig& cfg, Rng& rng) {
  if (!cfg.exploring_starts) return cfg.start_state;
  for (int attempt = 0; attempt < 64 * env.n_states; ++attempt) {
    const int s = rng.uniform_int(env.n_states);
    if (!is_absorbing(env, s)) return s;
  }
  throw std::runtime_error("learner: could not draw a non-absorbing start state");
}

inline int delta_greedy(const QTable& q, int i, double delta, Rng& rng) {
  if (delta > 0.0 && rng.uniform01() < delta) return rng.uniform_int(static_cast<int>(q.cols()));
  int best = 0;
  for (int a = 1; a < q.cols(); ++a)
    if (q(i, a) < q(i, best)) best = a;
  return best;
}

}  // namespace detail

// Off-policy robust Q-learning with delta-greedy behavior and per-(i,a)
// visit-count step sizes.
inline std::pair<QTable, LearnerDiagnostics> robust_q_learning(const TabularMdp& env,
                                                               const TabularLearnerConfig& cfg,
                                                               Rng& rng) {
  env.validate();
  detail::check_learner_config(env, cfg);
  const double vartheta = detail::resolve_discount(env, cfg);
  const RegionTable regions =
      cfg.regions ? *cfg.regions : RegionTable::shared(detail::nominal_region(env.n_states));

  LearnerDiagnostics diag;
  if (cfg.regions) detail::check_precondition(env, regions, vartheta, cfg.beta_samples, rng, &diag);

  QTable q = QTable::Zero(env.n_states, env.n_actions);
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(env.n_states, env.n_actions);
  int state = detail::draw_start(env, cfg, rng);

  for (long step = 1; step <= cfg.total_steps; ++step) {
    if (is_absorbing(env, state)) state = detail::draw_start(env, cfg, rng);
    const int a = detail::delta_greedy(q, state, cfg.exploration, rng);
    const int j = sample_transition(env, state, a, rng);
    const double gamma = cfg.schedule(static_cast<long>(++counts(state, a)));
    q = robust_q_update(std::move(q), state, a, j, env.cost(state, a), gamma,
                        regions.at(state, a), vartheta);
    state = j;
    diag.steps_run = step;

    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
      double dist = std::numeric_limits<double>::quiet_NaN();
      if (cfg.oracle_q.size() > 0) dist = (q - cfg.oracle_q).cwiseAbs().maxCoeff();
      diag.checkpoints.push_back({step, dist});
      if (cfg.on_checkpoint_q) cfg.on_checkpoint_q(step, q, dist);
      if (cfg.stop_at_distance > 0.0 && dist <= cfg.stop_at_distance) break;
    }
  }
  if (cfg.oracle_q.size() > 0) diag.final_distance = (q - cfg.oracle_q).cwiseAbs().maxCoeff();
  return {std::move(q), std::move(diag)};
}

// On-policy robust SARSA: the successor action comes from the same
// delta-greedy behavior rule that drives exploration.
inline std::pair<QTable, LearnerDiagnostics> robust_sarsa(const TabularMdp& env,
                                                          const TabularLearnerConfig& cfg,
                                                          Rng& rng) {
  env.validate();
  detail::check_learner_config(env, cfg);
  const double vartheta = detail::resolve_discount(env, cfg);
  const RegionTable regions =
      cfg.regions ? *cfg.regions : RegionTable::shared(detail::nominal_region(env.n_states));

  LearnerDiagnostics diag;
  if (cfg.regions) detail::check_precondition(env, regions, vartheta, cfg.beta_samples, rng, &diag);

  QTable q = QTable::Zero(env.n_states, env.n_actions);
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(env.n_states, env.n_actions);
  int state = detail::draw_start(env, cfg, rng);
  int action = detail::delta_greedy(q, state, cfg.exploration, rng);

  for (long step = 1; step <= cfg.total_steps; ++step) {
    if (is_absorbing(env, state)) {
      state = detail::draw_start(env, cfg, rng);
      action = detail::delta_greedy(q, state, cfg.exploration, rng);
    }
    const int j = sample_transition(env, state, action, rng);
    const int a2 = detail::delta_greedy(q, j, cfg.exploration, rng);
    const double gamma = cfg.schedule(static_cast<long>(++counts(state, action)));
    q = robust_sarsa_update(std::move(q), state, action, j, a2, env.cost(state, action), gamma,
                            regions.at(state, action), vartheta);
    state = j;
    action = a2;
    diag.steps_run = step;

    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
      double dist = std::numeric_limits<double>::quiet_NaN();
      if (cfg.oracle_q.size() > 0) dist = (q - cfg.oracle_q).cwiseAbs().maxCoeff();
      diag.checkpoints.push_back({step, dist});
      if (cfg.on_checkpoint_q) cfg.on_checkpoint_q(step, q, dist);
      if (cfg.stop_at_distance > 0.0 && dist <= cfg.stop_at_distance) break;
    }
  }
  if (cfg.oracle_q.size() > 0) diag.final_distance = (q - cfg.oracle_q).cwiseAbs().maxCoeff();
  return {std::move(q), std::move(diag)};
}

// Robust TD(lambda) policy evaluation over whole simulations. The value
// vector (and with it the support term) stays frozen within a simulation;
// the online flag is the within-episode ablation.
inline std::pair<ValueTable, LearnerDiagnostics> robust_td_lambda(const TabularMdp& env,
                                                                  const Policy& pi,
                                                                  const TabularLearnerConfig& cfg,
                                                                  Rng& rng) {
  env.validate();
  detail::check_learner_config(env, cfg);
  pi.validate(env.n_states, env.n_actions);
  if (pi.kind != Policy::Kind::deterministic)
    throw std::invalid_argument("robust_td_lambda: policy under evaluation must be deterministic");
  const double vartheta = detail::resolve_discount(env, cfg);
  const RegionTable regions =
      cfg.regions ? *cfg.regions : RegionTable::shared(detail::nominal_region(env.n_states));

  LearnerDiagnostics diag;
  if (cfg.regions) {
    // Only the rows the policy can reach matter for the precondition.
    if (cfg.beta_samples > 0) {
      double beta = 0.0;
      Rng probe = rng.split(0x5eed);
      for (int i = 0; i < env.n_states; ++i) {
        const int a = pi.greedy_action(i);
        beta = std::max(beta, beta_estimate(regions.at(i, a), env.p(a).row(i).transpose(),
                                            cfg.beta_samples, probe));
      }
      diag.beta_hat = beta;
      if (vartheta * (1.0 + beta) >= 1.0) {
        diag.precondition_ok = false;
        diag.warnings.push_back("discount precondition violated: discount*(1+beta_hat) = " +
                                std::to_string(vartheta * (1.0 + beta)) + " >= 1");
      }
    }
  }

  const StoppingRule stop = cfg.stop.value_or(
      has_absorbing_state(env) ? StoppingRule::absorbing(10L * env.n_states)
                               : StoppingRule::horizon(10L * env.n_states));

  ValueTable v = ValueTable::Zero(env.n_states);
  for (long t = 1; t <= cfg.episodes; ++t) {
    const int start = detail::draw_start(env, cfg, rng);
    const Trajectory traj = rollout(env, pi, start, stop, rng);
    const double gamma = cfg.schedule(t);

    EligibilityTraces tr = EligibilityTraces::fresh(env.n_states, cfg.trace_variant, vartheta,
                                                    cfg.lambda);
    Vec acc = Vec::Zero(env.n_states);
    Vec trace_mass = Vec::Zero(env.n_states);
    // v is frozen for the whole simulation, so each row's support value is
    // too; one value covers everything when the region is shared.
    double shared_sigma = 0.0;
    std::vector<double> sigma_by_state;
    if (!cfg.online_updates) {
      if (regions.is_shared())
        shared_sigma = support(regions.at(0, 0), v).value;
      else
        sigma_by_state.assign(static_cast<std::size_t>(env.n_states),
                              std::numeric_limits<double>::quiet_NaN());
    }
    for (const TransitionRecord& stepr : traj.steps) {
      tr = trace_update(std::move(tr), stepr.state);
      if (cfg.online_updates) {
        const double d = robust_td_error(v, stepr.state, stepr.next_state, stepr.cost, vartheta,
                                         regions.at(stepr.state, stepr.action));
        v += gamma * d * tr.z;
      } else {
        double sigma = shared_sigma;
        if (!regions.is_shared()) {
          double& slot = sigma_by_state[static_cast<std::size_t>(stepr.state)];
          if (std::isnan(slot))
            slot = support(regions.at(stepr.state, stepr.action), v).value;
          sigma = slot;
        }
        const double d = detail::td_error_given_sigma(v, stepr.state, stepr.next_state, stepr.cost,
                                                      vartheta, sigma);
        acc += d * tr.z;
      }
      trace_mass += tr.z;
    }
    if (!cfg.online_updates) v += gamma * acc;
    if (traj.steps.size() > 0)
      diag.trace_mass_max = std::max(diag.trace_mass_max, trace_mass.maxCoeff());
    diag.steps_run = t;

    if (cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0) {
      double dist = std::numeric_limits<double>::quiet_NaN();
      if (cfg.oracle_v.size() > 0) dist = (v - cfg.oracle_v).cwiseAbs().maxCoeff();
      diag.checkpoints.push_back({t, dist});
      if (cfg.on_checkpoint_v) cfg.on_checkpoint_v(t, v, dist);
      if (cfg.stop_at_distance > 0.0 && dist <= cfg.stop_at_distance) break;
    }
  }
  if (cfg.oracle_v.size() > 0) diag.final_distance = (v - cfg.oracle_v).cwiseAbs().maxCoeff();
  return {std::move(v), std::move(diag)};
}

}  // namespace rrl
