#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rrl/envs.hpp"
#include "rrl/fa_linear.hpp"
#include "rrl/fa_nonlinear.hpp"
#include "rrl/mdp.hpp"
#include "rrl/robust_dp.hpp"
#include "rrl/robust_tabular.hpp"
#include "rrl/uncertainty.hpp"

namespace rrl {

enum class Algorithm {
  robust_q,
  nominal_q,
  robust_sarsa,
  nominal_sarsa,
  robust_td,
  nominal_td,
  robust_gtd2,
  robust_tdc,
  robust_nl_gtd2,
  robust_nl_tdc,
};

inline const std::vector<std::pair<Algorithm, std::string>>& algorithm_names() {
  static const std::vector<std::pair<Algorithm, std::string>> names = {
      {Algorithm::robust_q, "robust-q"},
      {Algorithm::nominal_q, "nominal-q"},
      {Algorithm::robust_sarsa, "robust-sarsa"},
      {Algorithm::nominal_sarsa, "nominal-sarsa"},
      {Algorithm::robust_td, "robust-td"},
      {Algorithm::nominal_td, "nominal-td"},
      {Algorithm::robust_gtd2, "robust-gtd2"},
      {Algorithm::robust_tdc, "robust-tdc"},
      {Algorithm::robust_nl_gtd2, "robust-nl-gtd2"},
      {Algorithm::robust_nl_tdc, "robust-nl-tdc"},
  };
  return names;
}

inline std::string algorithm_to_string(Algorithm a) {
  for (const auto& [alg, name] : algorithm_names())
    if (alg == a) return name;
  throw std::logic_error("algorithm_to_string: unmapped value");
}

inline Algorithm algorithm_from_string(const std::string& s) {
  for (const auto& [alg, name] : algorithm_names())
    if (name == s) return alg;
  throw std::invalid_argument("unknown algorithm '" + s + "'");
}

// Robust algorithms price the adversary through the configured region; the
// nominal twins run the same code with a radius-0 region.
inline bool algorithm_is_robust(Algorithm a) {
  return a != Algorithm::nominal_q && a != Algorithm::nominal_sarsa && a != Algorithm::nominal_td;
}

inline bool algorithm_is_q_based(Algorithm a) {
  return a == Algorithm::robust_q || a == Algorithm::nominal_q || a == Algorithm::robust_sarsa ||
         a == Algorithm::nominal_sarsa;
}

// Scalar-radius region families available to config files. The matrix
// families need a full matrix and stay a library-level construction.
inline ConfidenceRegion make_scalar_region(const std::string& kind, int n, double radius) {
  if (kind == "l2") return ConfidenceRegion::l2_ball(n, radius);
  if (kind == "l1") return ConfidenceRegion::l1_ball(n, radius);
  throw std::invalid_argument("region kind '" + kind + "' is not a scalar-radius family");
}

struct LearnerSpec {
  StepSchedule step{1.0, 1.0, 0.6};  // tabular learners and TD(lambda)
  StepSchedule slow{1.0, 1.0, 0.9};  // gradient learners, parameter timescale
  StepSchedule fast{1.0, 1.0, 0.6};  // gradient learners, weight timescale
  double exploration = 0.1;
  double lambda = 0.0;
  EligibilityTraces::Variant trace = EligibilityTraces::Variant::every_visit;
  double curvature = 0.0;  // nonlinear value model knob
};

namespace detail {

inline nlohmann::json schedule_to_json(const StepSchedule& s) {
  return nlohmann::json{{"a", s.a}, {"b", s.b}, {"e", s.e}};
}

inline StepSchedule schedule_from_json(const nlohmann::json& j, const std::string& path) {
  StepSchedule s;
  if (!j.is_object()) throw std::invalid_argument("config json: " + path + ": must be an object");
  try {
    s.a = j.value("a", s.a);
    s.b = j.value("b", s.b);
    s.e = j.value("e", s.e);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config json: " + path + ": " + e.what());
  }
  return s;
}

}  // namespace detail

// Everything a reproducible run needs. The env block is kept as JSON and
// instantiated on demand; base_dir anchors relative file references.
struct ExperimentConfig {
  int schema_version = 1;
  nlohmann::json env;
  double perturbation = 0.0;
  Algorithm algorithm = Algorithm::robust_q;
  std::string region_kind = "l2";
  double radius = 0.0;
  std::vector<double> radius_grid;  // non-empty selects by cross validation
  LearnerSpec learner;
  std::vector<std::uint64_t> seeds;
  long train_steps = 0;  // episodes for the episodic TD learner
  int eval_episodes = 0;
  long episode_horizon = 0;  // 0 defaults to 10 * n_states
  double transient_fraction = 0.2;
  int start_state = 0;
  std::string output_dir;
  std::string base_dir;  // not serialized

  void validate() const {
    if (schema_version != 1)
      throw std::invalid_argument("config: $.schema_version: unsupported value " +
                                  std::to_string(schema_version));
    if (env.is_null()) throw std::invalid_argument("config: $.env: missing");
    if (!(perturbation >= 0.0 && perturbation <= 1.0))
      throw std::invalid_argument("config: $.perturbation: must lie in [0,1]");
    if (seeds.empty()) throw std::invalid_argument("config: $.seeds: must be non-empty");
    if (!(radius >= 0.0))
      throw std::invalid_argument("config: $.region.radius: must be nonnegative");
    for (std::size_t k = 0; k < radius_grid.size(); ++k) {
      if (!(radius_grid[k] >= 0.0))
        throw std::invalid_argument("config: $.region.radius_grid: entries must be nonnegative");
      if (k > 0 && !(radius_grid[k] > radius_grid[k - 1]))
        throw std::invalid_argument("config: $.region.radius_grid: must be strictly increasing");
    }
    if (train_steps <= 0)
      throw std::invalid_argument("config: $.train_steps: must be positive");
    if (eval_episodes <= 0)
      throw std::invalid_argument("config: $.eval_episodes: must be positive");
    if (episode_horizon < 0)
      throw std::invalid_argument("config: $.episode_horizon: must be nonnegative");
    if (!(transient_fraction >= 0.0 && transient_fraction <= 1.0))
      throw std::invalid_argument("config: $.transient_fraction: must lie in [0,1]");
    if (start_state < 0)
      throw std::invalid_argument("config: $.start_state: must be nonnegative");
    try {
      make_scalar_region(region_kind, 2, 0.0);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string("config: $.region.kind: ") + e.what());
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema_version"] = schema_version;
    j["env"] = env;
    j["perturbation"] = perturbation;
    j["algorithm"] = algorithm_to_string(algorithm);
    nlohmann::json region;
    region["kind"] = region_kind;
    if (radius_grid.empty())
      region["radius"] = radius;
    else
      region["radius_grid"] = radius_grid;
    j["region"] = region;
    nlohmann::json lj;
    lj["step"] = detail::schedule_to_json(learner.step);
    lj["slow"] = detail::schedule_to_json(learner.slow);
    lj["fast"] = detail::schedule_to_json(learner.fast);
    lj["exploration"] = learner.exploration;
    lj["lambda"] = learner.lambda;
    lj["trace"] =
        learner.trace == EligibilityTraces::Variant::every_visit ? "every_visit" : "restart";
    lj["curvature"] = learner.curvature;
    j["learner"] = lj;
    j["seeds"] = seeds;
    j["train_steps"] = train_steps;
    j["eval_episodes"] = eval_episodes;
    j["episode_horizon"] = episode_horizon;
    j["transient_fraction"] = transient_fraction;
    j["start_state"] = start_state;
    j["output_dir"] = output_dir;
    return j;
  }

  static ExperimentConfig from_json(const nlohmann::json& j, const std::string& base_dir = "") {
    ExperimentConfig cfg;
    cfg.base_dir = base_dir;
    const auto fail = [](const std::string& path, const std::string& what) {
      throw std::invalid_argument("config json: " + path + ": " + what);
    };
    if (!j.is_object()) fail("$", "must be an object");
    if (!j.contains("schema_version") || !j.at("schema_version").is_number_integer())
      fail("$.schema_version", "required integer");
    cfg.schema_version = j.at("schema_version").get<int>();
    if (!j.contains("env")) fail("$.env", "required object");
    cfg.env = j.at("env");
    if (!j.contains("algorithm") || !j.at("algorithm").is_string())
      fail("$.algorithm", "required string");
    try {
      cfg.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
    } catch (const std::invalid_argument& e) {
      fail("$.algorithm", e.what());
    }
    try {
      cfg.perturbation = j.value("perturbation", cfg.perturbation);
    } catch (const nlohmann::json::exception& e) {
      fail("$.perturbation", e.what());
    }
    if (j.contains("region")) {
      const auto& r = j.at("region");
      if (!r.is_object()) fail("$.region", "must be an object");
      try {
        cfg.region_kind = r.value("kind", cfg.region_kind);
      } catch (const nlohmann::json::exception& e) {
        fail("$.region.kind", e.what());
      }
      if (r.contains("radius") && r.contains("radius_grid"))
        fail("$.region", "give either radius or radius_grid, not both");
      if (r.contains("radius")) {
        if (!r.at("radius").is_number()) fail("$.region.radius", "must be a number");
        cfg.radius = r.at("radius").get<double>();
      }
      if (r.contains("radius_grid")) {
        if (!r.at("radius_grid").is_array()) fail("$.region.radius_grid", "must be an array");
        try {
          cfg.radius_grid = r.at("radius_grid").get<std::vector<double>>();
        } catch (const nlohmann::json::exception& e) {
          fail("$.region.radius_grid", e.what());
        }
      }
    }
    if (j.contains("learner")) {
      const auto& l = j.at("learner");
      if (!l.is_object()) fail("$.learner", "must be an object");
      if (l.contains("step"))
        cfg.learner.step = detail::schedule_from_json(l.at("step"), "$.learner.step");
      if (l.contains("slow"))
        cfg.learner.slow = detail::schedule_from_json(l.at("slow"), "$.learner.slow");
      if (l.contains("fast"))
        cfg.learner.fast = detail::schedule_from_json(l.at("fast"), "$.learner.fast");
      try {
        cfg.learner.exploration = l.value("exploration", cfg.learner.exploration);
        cfg.learner.lambda = l.value("lambda", cfg.learner.lambda);
        cfg.learner.curvature = l.value("curvature", cfg.learner.curvature);
      } catch (const nlohmann::json::exception& e) {
        fail("$.learner", e.what());
      }
      if (l.contains("trace")) {
        const auto t = l.at("trace").get<std::string>();
        if (t == "every_visit")
          cfg.learner.trace = EligibilityTraces::Variant::every_visit;
        else if (t == "restart")
          cfg.learner.trace = EligibilityTraces::Variant::restart;
        else
          fail("$.learner.trace", "must be 'every_visit' or 'restart'");
      }
    }
    if (!j.contains("seeds") || !j.at("seeds").is_array()) fail("$.seeds", "required array");
    try {
      cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    } catch (const nlohmann::json::exception& e) {
      fail("$.seeds", e.what());
    }
    if (!j.contains("train_steps") || !j.at("train_steps").is_number_integer())
      fail("$.train_steps", "required integer");
    cfg.train_steps = j.at("train_steps").get<long>();
    if (!j.contains("eval_episodes") || !j.at("eval_episodes").is_number_integer())
      fail("$.eval_episodes", "required integer");
    cfg.eval_episodes = j.at("eval_episodes").get<int>();
    try {
      cfg.episode_horizon = j.value("episode_horizon", cfg.episode_horizon);
      cfg.transient_fraction = j.value("transient_fraction", cfg.transient_fraction);
      cfg.start_state = j.value("start_state", cfg.start_state);
      cfg.output_dir = j.value("output_dir", cfg.output_dir);
    } catch (const nlohmann::json::exception& e) {
      fail("$", e.what());
    }
    cfg.validate();
    return cfg;
  }
};

// Empirical complementary CDF of the rewards at each threshold; thresholds
// default to the sorted unique reward values.
inline std::vector<std::pair<double, double>> tail_distribution(
    const std::vector<double>& rewards, std::vector<double> thresholds = {}) {
  if (rewards.empty()) throw std::invalid_argument("tail_distribution: no rewards");
  if (thresholds.empty()) thresholds = rewards;
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::vector<double> sorted = rewards;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::pair<double, double>> out;
  out.reserve(thresholds.size());
  for (const double a : thresholds) {
    const auto first = std::lower_bound(sorted.begin(), sorted.end(), a);
    out.emplace_back(a, static_cast<double>(sorted.end() - first) /
                            static_cast<double>(sorted.size()));
  }
  return out;
}

// Lowest index wins ties, matching the greedy rule inside the learners.
inline Policy greedy_policy_from_q(const QTable& q) {
  std::vector<int> actions(static_cast<std::size_t>(q.rows()));
  for (int i = 0; i < q.rows(); ++i) {
    int best = 0;
    for (int a = 1; a < q.cols(); ++a)
      if (q(i, a) < q(i, best)) best = a;
    actions[static_cast<std::size_t>(i)] = best;
  }
  return Policy::deterministic(std::move(actions));
}

struct SeedSummary {
  std::uint64_t seed = 0;
  std::vector<double> transient;
  std::vector<double> stationary;
};

struct EvalReport {
  nlohmann::json config_echo;
  std::vector<SeedSummary> per_seed;
  std::vector<std::pair<double, double>> tail;
  bool radius_chosen = false;
  double chosen_radius = 0.0;
  std::vector<std::string> warnings;
};

namespace detail {

inline double mean_of(const std::vector<double>& xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

}  // namespace detail

inline nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config"] = report.config_echo;
  j["chosen_radius"] =
      report.radius_chosen ? nlohmann::json(report.chosen_radius) : nlohmann::json(nullptr);
  j["warnings"] = report.warnings;
  nlohmann::json tail = nlohmann::json::array();
  for (const auto& [a, p] : report.tail) tail.push_back(nlohmann::json::array({a, p}));
  j["tail"] = tail;
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : report.per_seed) {
    nlohmann::json sj;
    sj["seed"] = s.seed;
    sj["transient_rewards"] = s.transient;
    sj["stationary_rewards"] = s.stationary;
    sj["transient_mean"] =
        s.transient.empty() ? nlohmann::json(nullptr) : nlohmann::json(detail::mean_of(s.transient));
    sj["stationary_mean"] = s.stationary.empty() ? nlohmann::json(nullptr)
                                                 : nlohmann::json(detail::mean_of(s.stationary));
    seeds.push_back(sj);
  }
  j["seeds"] = seeds;
  return j;
}

// Report invariants every emitted report must satisfy.
inline void verify_report_invariants(const EvalReport& report, int eval_episodes) {
  for (std::size_t k = 0; k < report.tail.size(); ++k) {
    const auto& [a, p] = report.tail[k];
    if (!(p >= 0.0 && p <= 1.0))
      throw std::logic_error("report: tail probability out of [0,1]");
    if (k > 0) {
      if (!(a > report.tail[k - 1].first))
        throw std::logic_error("report: tail thresholds not increasing");
      if (p > report.tail[k - 1].second + 1e-15)
        throw std::logic_error("report: tail function not nonincreasing");
    }
  }
  for (const auto& s : report.per_seed)
    if (static_cast<int>(s.transient.size() + s.stationary.size()) != eval_episodes)
      throw std::logic_error("report: phase split drops episodes for seed " +
                             std::to_string(s.seed));
}

namespace detail {

// One learned artifact. Q-based algorithms carry the Q table; the value
// learners carry the state values (and the raw parameters when they differ).
struct Trained {
  bool q_based = false;
  QTable q;
  ValueTable v;
  Vec theta;
  std::vector<std::string> warnings;
};

inline std::uint64_t mix_seeds(const std::vector<std::uint64_t>& seeds) {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (const std::uint64_t s : seeds) {
    h ^= s + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h *= 0xbf58476d1ce4e5b9ULL;
  }
  return h;
}

// Deterministic base policy for the policy-evaluation learners: the greedy
// policy of the classical (radius-0) solution on the training model.
inline Policy evaluation_target_policy(const TabularMdp& train_env) {
  const auto zero = RegionTable::shared(ConfidenceRegion::l2_ball(train_env.n_states, 0.0));
  return robust_value_iteration(train_env, zero, true, 1e-10).second;
}

inline void append_precondition_warning(const TabularMdp& env, const ConfidenceRegion& region,
                                        const Policy& pi, double vartheta, std::uint64_t seed,
                                        std::vector<std::string>* warnings) {
  Rng probe = Rng(seed).split(0xb37aULL);
  double beta = 0.0;
  for (int i = 0; i < env.n_states; ++i) {
    const int a = pi.greedy_action(i);
    beta = std::max(beta, beta_estimate(region, env.p(a).row(i).transpose(), 25, probe));
  }
  if (vartheta * (1.0 + beta) >= 1.0)
    warnings->push_back("discount precondition violated: discount*(1+beta_hat) = " +
                        std::to_string(vartheta * (1.0 + beta)) + " >= 1");
}

inline Trained train_one(const TabularMdp& train_env, const ExperimentConfig& cfg, double radius,
                         std::uint64_t seed) {
  Rng rng(seed);
  const int n = train_env.n_states;
  const bool robust = algorithm_is_robust(cfg.algorithm);
  const double effective_radius = robust ? radius : 0.0;
  Trained out;

  if (algorithm_is_q_based(cfg.algorithm)) {
    TabularLearnerConfig lc;
    lc.schedule = cfg.learner.step;
    lc.exploration = cfg.learner.exploration;
    lc.total_steps = cfg.train_steps;
    if (robust) lc.regions = RegionTable::shared(make_scalar_region(cfg.region_kind, n, radius));
    const bool q_learning =
        cfg.algorithm == Algorithm::robust_q || cfg.algorithm == Algorithm::nominal_q;
    auto [q, diag] = q_learning ? robust_q_learning(train_env, lc, rng)
                                : robust_sarsa(train_env, lc, rng);
    out.q_based = true;
    out.q = std::move(q);
    out.warnings = std::move(diag.warnings);
    return out;
  }

  const Policy pi = evaluation_target_policy(train_env);
  if (cfg.algorithm == Algorithm::robust_td || cfg.algorithm == Algorithm::nominal_td) {
    TabularLearnerConfig lc;
    lc.schedule = cfg.learner.step;
    lc.exploration = cfg.learner.exploration;
    lc.episodes = cfg.train_steps;
    lc.lambda = cfg.learner.lambda;
    lc.trace_variant = cfg.learner.trace;
    if (robust) lc.regions = RegionTable::shared(make_scalar_region(cfg.region_kind, n, radius));
    auto [v, diag] = robust_td_lambda(train_env, pi, lc, rng);
    out.v = std::move(v);
    out.warnings = std::move(diag.warnings);
    return out;
  }

  // Gradient learners: identity features over a uniform sampling
  // distribution (training chains may be absorbing, so no stationary law).
  const ConfidenceRegion region = make_scalar_region(cfg.region_kind, n, effective_radius);
  const Vec xi = Vec::Constant(n, 1.0 / n);
  GradLearnerConfig gc;
  gc.slow = cfg.learner.slow;
  gc.fast = cfg.learner.fast;
  gc.total_steps = cfg.train_steps;
  gc.evaluate_every = cfg.train_steps;  // single diagnostic point
  if (effective_radius > 0.0)
    append_precondition_warning(train_env, region, pi, train_env.discount, seed, &out.warnings);

  if (cfg.algorithm == Algorithm::robust_gtd2 || cfg.algorithm == Algorithm::robust_tdc) {
    const auto fmap = FeatureMap::identity(n);
    const GradKind kind =
        cfg.algorithm == Algorithm::robust_gtd2 ? GradKind::gtd2 : GradKind::tdc;
    auto [model, curve] =
        run_robust_gradient(train_env, fmap, xi, pi, region, train_env.discount, gc, kind, rng);
    out.theta = model.theta;
    out.v = fmap.phi * model.theta;
    return out;
  }

  const QuadraticValueModel model(Mat::Identity(n, n), cfg.learner.curvature);
  const Vec theta0 = Vec::Zero(n);
  const GradKind kind =
      cfg.algorithm == Algorithm::robust_nl_gtd2 ? GradKind::gtd2 : GradKind::tdc;
  const auto run = run_robust_nonlinear(train_env, model, xi, pi, region, train_env.discount, gc,
                                        CompactSet::around(theta0), theta0, kind, rng);
  out.theta = run.theta;
  out.v = model.values(run.theta);
  return out;
}

// The executed policy: greedy on the learned Q table, or a one-step greedy
// lookahead through the learned values on the training model, with the
// support term priced at the algorithm's radius.
inline Policy policy_for_model(const TabularMdp& train_env, const ExperimentConfig& cfg,
                               double radius, const Trained& trained) {
  if (trained.q_based) return greedy_policy_from_q(trained.q);
  const double effective_radius = algorithm_is_robust(cfg.algorithm) ? radius : 0.0;
  const auto regions = RegionTable::shared(
      make_scalar_region(cfg.region_kind, train_env.n_states, effective_radius));
  return greedy_policy_from_q(robust_q_from_value(train_env, regions, trained.v, false));
}

inline long resolve_horizon(const ExperimentConfig& cfg, const TabularMdp& env) {
  return cfg.episode_horizon > 0 ? cfg.episode_horizon : 10L * env.n_states;
}

// Fixed-start evaluation episodes on the true environment; reward is the
// negated undiscounted cost along the episode.
inline std::vector<double> episode_rewards(const TabularMdp& env, const Policy& pi, int start,
                                           int episodes, long horizon, Rng& rng) {
  const StoppingRule stop = has_absorbing_state(env) ? StoppingRule::absorbing(horizon)
                                                     : StoppingRule::horizon(horizon);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(episodes));
  for (int e = 0; e < episodes; ++e) {
    const Trajectory traj = rollout(env, pi, start, stop, rng);
    double cost = 0.0;
    for (const auto& step : traj.steps) cost += step.cost;
    out.push_back(-cost);
  }
  return out;
}

inline int transient_count(const ExperimentConfig& cfg) {
  return static_cast<int>(cfg.transient_fraction * cfg.eval_episodes + 0.5);
}

inline SeedSummary split_phases(const ExperimentConfig& cfg, std::uint64_t seed,
                                const std::vector<double>& rewards) {
  SeedSummary s;
  s.seed = seed;
  const int cut = std::min<int>(transient_count(cfg), static_cast<int>(rewards.size()));
  s.transient.assign(rewards.begin(), rewards.begin() + cut);
  s.stationary.assign(rewards.begin() + cut, rewards.end());
  return s;
}

inline double stationary_mean_for_seed(const ExperimentConfig& cfg, const TabularMdp& true_env,
                                       const Policy& pi, std::uint64_t seed) {
  Rng eval_rng = Rng(seed).split(0xe7a1ULL);
  const auto rewards = episode_rewards(true_env, pi, cfg.start_state, cfg.eval_episodes,
                                       resolve_horizon(cfg, true_env), eval_rng);
  const auto summary = split_phases(cfg, seed, rewards);
  return summary.stationary.empty() ? mean_of(rewards) : mean_of(summary.stationary);
}

}  // namespace detail

// Selection rule shared by the sweep: highest score wins, ties go to the
// smaller radius. The grid is scanned in increasing order.
inline double pick_radius(const std::vector<double>& grid, const std::vector<double>& scores) {
  if (grid.empty() || grid.size() != scores.size())
    throw std::invalid_argument("pick_radius: grid and scores must align and be non-empty");
  std::size_t best = 0;
  for (std::size_t k = 1; k < grid.size(); ++k)
    if (scores[k] > scores[best]) best = k;
  return grid[best];
}

struct CvResult {
  double chosen = 0.0;
  // One (radius, mean validation score) pair per grid point.
  std::vector<std::pair<double, double>> scores;
};

// 10-fold cross-validated line search over the radius grid. Seeds are padded
// to a multiple of 10 and chunked into contiguous folds; each fold trains one
// model on the perturbed environment (seeded by a deterministic mix of the
// fold-train seeds) and scores it on the true environment once per
// fold-validation seed.
inline CvResult cv_line_search(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.radius_grid.empty())
    throw std::invalid_argument("cv_line_search: radius grid must be non-empty");
  CvResult out;
  if (cfg.radius_grid.size() == 1) {
    out.chosen = cfg.radius_grid.front();
    return out;
  }

  const TabularMdp true_env = env_from_json(cfg.env, cfg.base_dir);
  if (cfg.start_state >= true_env.n_states)
    throw std::invalid_argument("config: start_state out of range");
  const TabularMdp train_env = perturb(true_env, cfg.perturbation);

  std::vector<std::uint64_t> padded = cfg.seeds;
  while (padded.size() % 10 != 0) padded.push_back(cfg.seeds[padded.size() % cfg.seeds.size()]);
  const std::size_t fold_size = padded.size() / 10;

  std::vector<double> means;
  for (const double radius : cfg.radius_grid) {
    double total = 0.0;
    for (int fold = 0; fold < 10; ++fold) {
      std::vector<std::uint64_t> train_seeds, val_seeds;
      for (std::size_t k = 0; k < padded.size(); ++k)
        (k / fold_size == static_cast<std::size_t>(fold) ? val_seeds : train_seeds)
            .push_back(padded[k]);
      const auto trained =
          detail::train_one(train_env, cfg, radius, detail::mix_seeds(train_seeds));
      const Policy pi = detail::policy_for_model(train_env, cfg, radius, trained);
      double fold_score = 0.0;
      for (const std::uint64_t vs : val_seeds)
        fold_score += detail::stationary_mean_for_seed(cfg, true_env, pi, vs);
      total += fold_score / static_cast<double>(val_seeds.size());
    }
    means.push_back(total / 10.0);
  }
  for (std::size_t k = 0; k < cfg.radius_grid.size(); ++k)
    out.scores.emplace_back(cfg.radius_grid[k], means[k]);
  out.chosen = pick_radius(cfg.radius_grid, means);
  return out;
}

namespace detail {

inline void write_episodes_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("episodes csv: cannot open " + path);
  out.precision(17);
  out << "seed,episode,phase,cumulative_reward\n";
  for (const auto& s : report.per_seed) {
    int episode = 0;
    for (const double r : s.transient) out << s.seed << ',' << episode++ << ",transient," << r << '\n';
    for (const double r : s.stationary)
      out << s.seed << ',' << episode++ << ",stationary," << r << '\n';
  }
}

inline nlohmann::json model_to_json(const Trained& t, std::uint64_t seed) {
  nlohmann::json j;
  j["seed"] = seed;
  if (t.q_based) {
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(t.q.rows()));
    for (int i = 0; i < t.q.rows(); ++i)
      for (int a = 0; a < t.q.cols(); ++a) rows[static_cast<std::size_t>(i)].push_back(t.q(i, a));
    j["q_table"] = rows;
  } else {
    j["value"] = std::vector<double>(t.v.data(), t.v.data() + t.v.size());
    if (t.theta.size() > 0)
      j["theta"] = std::vector<double>(t.theta.data(), t.theta.data() + t.theta.size());
  }
  return j;
}

inline Trained model_from_json(const nlohmann::json& j, bool q_based) {
  Trained t;
  t.q_based = q_based;
  try {
    if (q_based) {
      const auto rows = j.at("q_table").get<std::vector<std::vector<double>>>();
      if (rows.empty() || rows.front().empty())
        throw std::invalid_argument("models json: empty q_table");
      t.q.resize(static_cast<Eigen::Index>(rows.size()),
                 static_cast<Eigen::Index>(rows.front().size()));
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows.front().size())
          throw std::invalid_argument("models json: ragged q_table");
        for (std::size_t a = 0; a < rows[i].size(); ++a)
          t.q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = rows[i][a];
      }
    } else {
      const auto v = j.at("value").get<std::vector<double>>();
      t.v = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("models json: ") + e.what());
  }
  return t;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << content;
}

}  // namespace detail

// Full experiment: per seed, train on the perturbed environment and evaluate
// the resulting policy on the true one. With a radius grid the radius is
// first chosen by cross validation. Files land in cfg.output_dir when set:
// report.json, episodes.csv, models.json (and sweep.json after a grid run).
inline EvalReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const TabularMdp true_env = env_from_json(cfg.env, cfg.base_dir);
  if (cfg.start_state >= true_env.n_states)
    throw std::invalid_argument("config: start_state out of range");
  const TabularMdp train_env = perturb(true_env, cfg.perturbation);

  EvalReport report;
  report.config_echo = cfg.to_json();
  double radius = cfg.radius;
  CvResult cv;
  if (!cfg.radius_grid.empty()) {
    cv = cv_line_search(cfg);
    radius = cv.chosen;
    report.radius_chosen = true;
    report.chosen_radius = cv.chosen;
  }

  std::vector<detail::Trained> models;
  std::vector<double> pooled_stationary;
  for (const std::uint64_t seed : cfg.seeds) {
    detail::Trained trained = detail::train_one(train_env, cfg, radius, seed);
    const Policy pi = detail::policy_for_model(train_env, cfg, radius, trained);
    Rng eval_rng = Rng(seed).split(0xe7a1ULL);
    const auto rewards =
        detail::episode_rewards(true_env, pi, cfg.start_state, cfg.eval_episodes,
                                detail::resolve_horizon(cfg, true_env), eval_rng);
    SeedSummary summary = detail::split_phases(cfg, seed, rewards);
    pooled_stationary.insert(pooled_stationary.end(), summary.stationary.begin(),
                             summary.stationary.end());
    for (const auto& w : trained.warnings)
      report.warnings.push_back("seed " + std::to_string(seed) + ": " + w);
    report.per_seed.push_back(std::move(summary));
    models.push_back(std::move(trained));
  }
  if (pooled_stationary.empty())
    for (const auto& s : report.per_seed)
      pooled_stationary.insert(pooled_stationary.end(), s.transient.begin(), s.transient.end());
  report.tail = tail_distribution(pooled_stationary);
  verify_report_invariants(report, cfg.eval_episodes);

  if (!cfg.output_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.output_dir, ec);
    if (ec)
      throw std::runtime_error("output directory '" + cfg.output_dir +
                               "' is not writable: " + ec.message());
    const std::filesystem::path dir(cfg.output_dir);
    detail::write_text_file((dir / "report.json").string(),
                            report_to_json(report).dump(2) + "\n");
    detail::write_episodes_csv((dir / "episodes.csv").string(), report);
    nlohmann::json mj;
    mj["schema_version"] = 1;
    mj["algorithm"] = algorithm_to_string(cfg.algorithm);
    mj["radius"] = radius;
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t k = 0; k < models.size(); ++k)
      arr.push_back(detail::model_to_json(models[k], cfg.seeds[k]));
    mj["models"] = arr;
    detail::write_text_file((dir / "models.json").string(), mj.dump(2) + "\n");
    if (report.radius_chosen) {
      nlohmann::json sj;
      sj["schema_version"] = 1;
      sj["chosen_radius"] = cv.chosen;
      nlohmann::json scores = nlohmann::json::array();
      for (const auto& [r, m] : cv.scores) scores.push_back(nlohmann::json::array({r, m}));
      sj["scores"] = scores;
      detail::write_text_file((dir / "sweep.json").string(), sj.dump(2) + "\n");
    }
  }
  return report;
}

// Evaluation-only replay: rebuild the policies from a saved models.json and
// rerun the evaluation episodes. Produces the same report as the original
// run, since evaluation randomness depends only on the seeds.
inline EvalReport evaluate_saved(const ExperimentConfig& cfg, const nlohmann::json& models_json) {
  cfg.validate();
  if (!cfg.radius_grid.empty())
    throw std::invalid_argument("evaluate: radius grids require a sweep run, not a replay");
  const TabularMdp true_env = env_from_json(cfg.env, cfg.base_dir);
  if (cfg.start_state >= true_env.n_states)
    throw std::invalid_argument("config: start_state out of range");
  const TabularMdp train_env = perturb(true_env, cfg.perturbation);

  std::vector<nlohmann::json> entries;
  try {
    if (models_json.at("algorithm").get<std::string>() != algorithm_to_string(cfg.algorithm))
      throw std::invalid_argument("models json: algorithm does not match the config");
    for (const auto& e : models_json.at("models")) entries.push_back(e);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("models json: ") + e.what());
  }

  EvalReport report;
  report.config_echo = cfg.to_json();
  std::vector<double> pooled_stationary;
  for (const std::uint64_t seed : cfg.seeds) {
    const auto entry = std::find_if(entries.begin(), entries.end(), [&](const nlohmann::json& e) {
      return e.value("seed", std::uint64_t{0}) == seed;
    });
    if (entry == entries.end())
      throw std::invalid_argument("models json: no model for seed " + std::to_string(seed));
    const detail::Trained trained =
        detail::model_from_json(*entry, algorithm_is_q_based(cfg.algorithm));
    const Policy pi = detail::policy_for_model(train_env, cfg, cfg.radius, trained);
    Rng eval_rng = Rng(seed).split(0xe7a1ULL);
    const auto rewards =
        detail::episode_rewards(true_env, pi, cfg.start_state, cfg.eval_episodes,
                                detail::resolve_horizon(cfg, true_env), eval_rng);
    SeedSummary summary = detail::split_phases(cfg, seed, rewards);
    pooled_stationary.insert(pooled_stationary.end(), summary.stationary.begin(),
                             summary.stationary.end());
    report.per_seed.push_back(std::move(summary));
  }
  if (pooled_stationary.empty())
    for (const auto& s : report.per_seed)
      pooled_stationary.insert(pooled_stationary.end(), s.transient.begin(), s.transient.end());
  report.tail = tail_distribution(pooled_stationary);
  verify_report_invariants(report, cfg.eval_episodes);
  return report;
}

namespace detail {

// Continued-fraction regularized incomplete beta, the classical evaluation.
inline double incbeta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-14) break;
  }
  return h;
}

inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                    b * std::log1p(-x);
  const double front = std::exp(ln);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * incbeta_cf(a, b, x) / a;
  return 1.0 - front * incbeta_cf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// P(T > t) for Student's t with the given degrees of freedom.
inline double student_t_sf(double t, int dof) {
  if (dof < 1) throw std::invalid_argument("student_t_sf: dof must be positive");
  const double x = dof / (dof + t * t);
  const double half = 0.5 * detail::incomplete_beta(0.5 * dof, 0.5, x);
  return t >= 0.0 ? half : 1.0 - half;
}

struct PairedTResult {
  double t = 0.0;
  int dof = 0;
  double p_greater = 1.0;    // P(mean(a) <= mean(b)) rejected when small
  double p_two_sided = 1.0;
};

// Paired t-test on matched samples. Zero-variance differences degenerate to
// certainty: equal means give p = 1, unequal give p = 0.
inline PairedTResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("paired_t_test: need at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> diff(n);
  for (std::size_t k = 0; k < n; ++k) diff[k] = a[k] - b[k];
  const double mean = detail::mean_of(diff);
  double ss = 0.0;
  for (const double d : diff) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  PairedTResult out;
  out.dof = static_cast<int>(n) - 1;
  if (sd < 1e-300) {
    out.t = mean == 0.0 ? 0.0
                        : std::copysign(std::numeric_limits<double>::infinity(), mean);
    out.p_greater = mean > 0.0 ? 0.0 : (mean < 0.0 ? 1.0 : 0.5);
    out.p_two_sided = mean == 0.0 ? 1.0 : 0.0;
    return out;
  }
  out.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  out.p_greater = student_t_sf(out.t, out.dof);
  out.p_two_sided = 2.0 * student_t_sf(std::fabs(out.t), out.dof);
  return out;
}

}  // namespace rrl
