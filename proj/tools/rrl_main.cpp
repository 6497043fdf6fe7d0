#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rrl/harness.hpp"

namespace {

namespace fs = std::filesystem;

nlohmann::json load_json_file(const std::string& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument(what + ": cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(what + ": " + e.what());
  }
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

rrl::ExperimentConfig load_config(const std::string& path,
                                  const std::optional<std::uint64_t>& seed,
                                  const std::string& out) {
  const auto j = load_json_file(path, "config json");
  auto cfg = rrl::ExperimentConfig::from_json(j, fs::path(path).parent_path().string());
  if (seed) cfg.seeds = {*seed};
  if (!out.empty()) cfg.output_dir = out;
  return cfg;
}

void print_report(const rrl::ExperimentConfig& cfg, const rrl::EvalReport& report, bool quiet) {
  if (quiet) return;
  std::cout << rrl::algorithm_to_string(cfg.algorithm) << ": " << cfg.seeds.size()
            << " seed(s), " << cfg.eval_episodes << " evaluation episodes each\n";
  if (report.radius_chosen) std::cout << "chosen radius: " << report.chosen_radius << "\n";
  for (const auto& s : report.per_seed) {
    std::cout << "seed " << s.seed << ":";
    if (!s.transient.empty())
      std::cout << " transient mean " << rrl::detail::mean_of(s.transient);
    if (!s.stationary.empty())
      std::cout << " stationary mean " << rrl::detail::mean_of(s.stationary);
    std::cout << "\n";
  }
  for (const auto& w : report.warnings) std::cout << "warning: " << w << "\n";
  if (!cfg.output_dir.empty()) std::cout << "wrote artifacts to " << cfg.output_dir << "\n";
}

int run_train(const rrl::ExperimentConfig& cfg, bool quiet) {
  const auto report = rrl::run_experiment(cfg);
  print_report(cfg, report, quiet);
  return 0;
}

int run_sweep(const rrl::ExperimentConfig& cfg, bool quiet) {
  if (cfg.radius_grid.empty())
    throw std::invalid_argument("config: $.region.radius_grid: sweep needs a radius grid");
  const auto report = rrl::run_experiment(cfg);
  print_report(cfg, report, quiet);
  return 0;
}

int run_evaluate(const rrl::ExperimentConfig& cfg, bool quiet) {
  if (!cfg.radius_grid.empty())
    throw std::invalid_argument(
        "config: $.region.radius_grid: evaluate replays a fixed radius; run sweep instead");
  if (cfg.output_dir.empty())
    throw std::invalid_argument(
        "config: $.output_dir: evaluate needs the directory holding models.json");
  const fs::path dir(cfg.output_dir);
  const auto models = load_json_file((dir / "models.json").string(), "models json");
  const auto report = rrl::evaluate_saved(cfg, models);
  std::ofstream out(dir / "replay.json");
  if (!out) throw std::runtime_error("cannot open " + (dir / "replay.json").string());
  out << rrl::report_to_json(report).dump(2) << "\n";
  print_report(cfg, report, quiet);
  return 0;
}

int run_oracle(const std::string& path, const std::string& out) {
  const auto j = load_json_file(path, "oracle input");
  const rrl::TabularMdp mdp = rrl::mdp_from_json(j);
  rrl::ConfidenceRegion region = rrl::ConfidenceRegion::l2_ball(mdp.n_states, 0.0);
  if (j.contains("region")) region = rrl::region_from_json(j.at("region"), mdp.n_states);
  const bool constrained = j.value("constrained", true);
  const auto regions = rrl::RegionTable::shared(region);
  const auto [v, pi] = rrl::robust_value_iteration(mdp, regions, constrained, 1e-12);
  const rrl::QTable q = rrl::robust_q_from_value(mdp, regions, v, constrained);
  const auto dump = rrl::oracle_to_json(v, q, pi).dump(2) + "\n";
  if (out.empty()) {
    std::cout << dump;
  } else {
    std::ofstream file(out);
    if (!file) throw std::runtime_error("cannot open " + out);
    file << dump;
  }
  return 0;
}

int run_check(bool quiet) {
  using namespace rrl;
  int failures = 0;
  const auto line = [&](const std::string& name, const std::function<void()>& body) {
    try {
      body();
      if (!quiet) std::cout << "ok: " << name << "\n";
    } catch (const std::exception& e) {
      ++failures;
      std::cout << "FAIL: " << name << ": " << e.what() << "\n";
    }
  };
  const auto demand = [](bool cond, const std::string& why) {
    if (!cond) throw std::runtime_error(why);
  };
  const auto certified_radius = [](const TabularMdp& mdp) {
    double minp = 1.0;
    for (int a = 0; a < mdp.n_actions; ++a) minp = std::min(minp, mdp.p(a).minCoeff());
    return 0.9 * minp / std::sqrt(1.0 - 1.0 / mdp.n_states);
  };

  line("support values dominate sampled adversaries", [&] {
    const Vec anchor = (Vec(3) << 1.0, 0.0, -1.0).finished();
    demand(std::fabs(support(ConfidenceRegion::l2_ball(3, 1.0), anchor).value - std::sqrt(2.0)) <
               1e-9,
           "l2 hand value is off");
    demand(std::fabs(support(ConfidenceRegion::l1_ball(3, 1.0), anchor).value - 1.0) < 1e-9,
           "l1 hand value is off");
    Rng rng(0xc0ffeeULL);
    Mat g(6, 6);
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c) g(r, c) = rng.normal();
    std::vector<ConfidenceRegion> regions;
    regions.push_back(ConfidenceRegion::l2_ball(6, 0.7));
    regions.push_back(ConfidenceRegion::l1_ball(6, 0.9));
    regions.push_back(ConfidenceRegion::ellipsoid(Mat(g.transpose() * g / 6.0 +
                                                      Mat::Identity(6, 6))));
    regions.push_back(ConfidenceRegion::parallelepiped(Mat(g / 6.0 + Mat::Identity(6, 6))));
    for (const auto& region : regions) {
      Vec v(6);
      for (int k = 0; k < 6; ++k) v(k) = rng.uniform(-2.0, 2.0);
      const double sigma = support(region, v).value;
      for (int t = 0; t < 100; ++t) {
        Vec u(6);
        for (int k = 0; k < 6; ++k) u(k) = rng.normal();
        // The maximizer for any direction is a feasible point of the set.
        const Vec x = support(region, u).maximizer;
        demand(x.dot(v) <= sigma + 1e-9, "a sampled feasible point beats the support value");
      }
    }
  });

  line("radius-0 dynamic programming matches the classical solution", [&] {
    const auto mdp = random_mdp(5, 3, 3, 7);
    const auto regions = RegionTable::shared(ConfidenceRegion::l2_ball(5, 0.0));
    const auto [v, pi] = robust_value_iteration(mdp, regions, true, 1e-12);
    Vec w = Vec::Zero(5);
    for (int it = 0; it < 4000; ++it) {
      Vec next(5);
      for (int i = 0; i < 5; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int a = 0; a < 3; ++a)
          best = std::min(best, mdp.cost(i, a) + mdp.discount * mdp.p(a).row(i).dot(w));
        next(i) = best;
      }
      w = next;
    }
    demand((v - w).cwiseAbs().maxCoeff() <= 1e-8, "radius-0 value differs from classical");
    (void)pi;
  });

  line("the exact operator contracts at the certified rate", [&] {
    const auto mdp = random_mdp(4, 2, 4, 9);
    const auto regions =
        RegionTable::shared(ConfidenceRegion::l2_ball(4, certified_radius(mdp)));
    const auto H = [&](const Vec& v) {
      return Vec(robust_q_from_value(mdp, regions, v, false).rowwise().minCoeff());
    };
    Rng rng(31);
    for (int t = 0; t < 40; ++t) {
      Vec va(4), vb(4);
      for (int k = 0; k < 4; ++k) {
        va(k) = rng.uniform(-3.0, 3.0);
        vb(k) = rng.uniform(-3.0, 3.0);
      }
      const double num = (H(va) - H(vb)).cwiseAbs().maxCoeff();
      const double den = (va - vb).cwiseAbs().maxCoeff();
      demand(num <= mdp.discount * den + 1e-9, "sup-norm ratio exceeds the certified factor");
    }
  });

  line("the projected evaluation operator contracts", [&] {
    const auto mdp = random_mdp(5, 2, 5, 21);
    const auto region = ConfidenceRegion::l2_ball(5, 0.5 * certified_radius(mdp));
    const auto zero = RegionTable::shared(ConfidenceRegion::l2_ball(5, 0.0));
    const Policy pi = robust_value_iteration(mdp, zero, true, 1e-10).second;
    const Vec xi = stationary_distribution(policy_transition_matrix(mdp, pi));
    const auto rep = projected_contraction_check(mdp, FeatureMap::identity(5), xi, pi, region,
                                                 mdp.discount, 60);
    demand(rep.contraction,
           "squared-norm ratio reached " + std::to_string(rep.max_ratio));
  });

  line("the linear loss gradient matches finite differences", [&] {
    const auto mdp = random_mdp(4, 2, 4, 11, 0.3);
    Rng rng(55);
    Mat phi(4, 2);
    for (int i = 0; i < 4; ++i)
      for (int k = 0; k < 2; ++k) phi(i, k) = rng.normal();
    const auto fmap = FeatureMap::make(phi);
    const Vec xi = Vec::Constant(4, 0.25);
    const auto zero = RegionTable::shared(ConfidenceRegion::l2_ball(4, 0.0));
    const Policy pi = robust_value_iteration(mdp, zero, true, 1e-10).second;
    const auto region = ConfidenceRegion::l2_ball(4, 0.2);
    for (int t = 0; t < 3; ++t) {
      Vec theta(2);
      for (int k = 0; k < 2; ++k) theta(k) = rng.uniform(-1.0, 1.0);
      const Vec grad = msrpbe_gradient_exact(theta, mdp, xi, pi, fmap, region, mdp.discount);
      Vec fd(2);
      const double h = 1e-5;
      for (int k = 0; k < 2; ++k) {
        Vec up = theta, dn = theta;
        up(k) += h;
        dn(k) -= h;
        fd(k) = (msrpbe_exact(up, mdp, xi, pi, fmap, region, mdp.discount) -
                 msrpbe_exact(dn, mdp, xi, pi, fmap, region, mdp.discount)) /
                (2.0 * h);
      }
      demand((grad - fd).cwiseAbs().maxCoeff() <= 1e-4 * std::max(1.0, fd.norm()),
             "analytic gradient disagrees with finite differences");
    }
  });

  EvalReport replay_report;
  line("experiment replay is byte-identical", [&] {
    ExperimentConfig cfg;
    cfg.env = nlohmann::json{{"type", "chain"}, {"length", 4}, {"slip", 0.2}};
    cfg.perturbation = 0.1;
    cfg.algorithm = Algorithm::robust_q;
    cfg.radius = 0.05;
    cfg.seeds = {3};
    cfg.train_steps = 600;
    cfg.eval_episodes = 5;
    const fs::path dir = fs::temp_directory_path() / "rrl_check_replay";
    fs::remove_all(dir);
    cfg.output_dir = dir.string();
    replay_report = run_experiment(cfg);
    const std::string report1 = slurp(dir / "report.json");
    const std::string episodes1 = slurp(dir / "episodes.csv");
    run_experiment(cfg);
    const bool same =
        slurp(dir / "report.json") == report1 && slurp(dir / "episodes.csv") == episodes1;
    fs::remove_all(dir);
    demand(same, "artifacts differ between identical runs");
  });

  line("evaluation reports satisfy their invariants", [&] {
    demand(!replay_report.per_seed.empty(), "no report produced by the replay check");
    verify_report_invariants(replay_report, 5);
    demand(replay_report.tail.front().second == 1.0,
           "tail function does not start at probability 1");
  });

  if (failures == 0) {
    if (!quiet) std::cout << "all checks passed\n";
    return 0;
  }
  std::cout << failures << " check(s) failed\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"robust reinforcement-learning toolkit"};
  app.require_subcommand(1);

  std::string train_config, sweep_config, eval_config, oracle_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;

  auto* train = app.add_subcommand("train", "train per the config and evaluate on the true env");
  train->add_option("config", train_config, "experiment config json")->required();
  auto* evaluate = app.add_subcommand("evaluate", "replay the evaluation from saved models");
  evaluate->add_option("config", eval_config, "experiment config json")->required();
  auto* sweep = app.add_subcommand("sweep", "cross-validated radius selection, then train");
  sweep->add_option("config", sweep_config, "experiment config json with a radius grid")
      ->required();
  auto* oracle = app.add_subcommand("oracle", "exact robust dynamic-programming solution");
  oracle->add_option("mdp", oracle_path, "mdp json, optionally with region/constrained fields")
      ->required();
  auto* check = app.add_subcommand("check", "run the invariant suite");

  for (auto* cmd : {train, evaluate, sweep})
    cmd->add_option("--seed", seed, "replace the config's seed list with this one seed");
  for (auto* cmd : {train, evaluate, sweep})
    cmd->add_option("--out", out, "override the config's output directory");
  oracle->add_option("--out", out, "write the solution here instead of stdout");
  for (auto* cmd : {train, evaluate, sweep, oracle, check})
    cmd->add_flag("--quiet", quiet, "suppress summaries");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (train->parsed()) return run_train(load_config(train_config, seed, out), quiet);
    if (evaluate->parsed()) return run_evaluate(load_config(eval_config, seed, out), quiet);
    if (sweep->parsed()) return run_sweep(load_config(sweep_config, seed, out), quiet);
    if (oracle->parsed()) return run_oracle(oracle_path, out);
    if (check->parsed()) return run_check(quiet);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
