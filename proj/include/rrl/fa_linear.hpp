#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "rrl/mdp.hpp"
#include "rrl/robust_dp.hpp"
#include "rrl/robust_tabular.hpp"
#include "rrl/rng.hpp"
#include "rrl/uncertainty.hpp"

namespace rrl {

// Feature matrix, one row per state. The full_rank flag records that the
// xi-weighted Gram matrix passed the eigenvalue check at construction.
struct FeatureMap {
  Mat phi;
  bool full_rank = false;

  static FeatureMap make(Mat phi) {
    if (phi.rows() < 1 || phi.cols() < 1)
      throw std::invalid_argument("feature map: matrix must be nonempty");
    for (int i = 0; i < phi.rows(); ++i)
      if (phi.row(i).cwiseAbs().maxCoeff() == 0.0)
        throw std::invalid_argument("feature map: state " + std::to_string(i) +
                                    " has an all-zero feature row");
    FeatureMap f;
    f.phi = std::move(phi);
    return f;
  }

  static FeatureMap checked(Mat phi, const Vec& xi) {
    FeatureMap f = make(std::move(phi));
    const Mat gram = f.phi.transpose() * xi.asDiagonal() * f.phi;
    const Eigen::SelfAdjointEigenSolver<Mat> eig(gram);
    if (eig.eigenvalues().minCoeff() <= 1e-10)
      throw std::invalid_argument("feature map: weighted Gram matrix is rank deficient");
    f.full_rank = true;
    return f;
  }

  static FeatureMap identity(int n) { return make(Mat::Identity(n, n)); }

  int n_states() const { return static_cast<int>(phi.rows()); }
  int dim() const { return static_cast<int>(phi.cols()); }
};

struct LinearModel {
  Vec theta;
  Vec w;

  static LinearModel zero(int d) {
    if (d <= 0) throw std::invalid_argument("linear model: dimension must be positive");
    LinearModel m;
    m.theta = Vec::Zero(d);
    m.w = Vec::Zero(d);
    return m;
  }
};

// One observed transition in feature space.
struct FaSample {
  Vec phi;
  Vec phi_next;
  double cost = 0.0;
};

// Row-stochastic mixture of the action matrices under the given policy.
inline Mat behavior_matrix(const TabularMdp& mdp, const Policy& pi) {
  Mat P = Mat::Zero(mdp.n_states, mdp.n_states);
  for (int a = 0; a < mdp.n_actions; ++a) {
    for (int i = 0; i < mdp.n_states; ++i) {
      const double pr = pi.prob(i, a, mdp.n_actions);
      if (pr > 0.0) P.row(i) += pr * mdp.p(a).row(i);
    }
  }
  return P;
}

// A stationary distribution of the chain, found as the least-squares solution
// of xi'P = xi' with xi summing to one. Unique for unichain transition
// matrices; the residual check rejects inputs where the solve degenerates.
inline Vec stationary_distribution(const Mat& P) {
  const int n = static_cast<int>(P.rows());
  if (P.cols() != n || n < 1) throw std::invalid_argument("stationary: matrix must be square");
  Mat A(n + 1, n);
  A.topRows(n) = P.transpose() - Mat::Identity(n, n);
  A.bottomRows(1).setOnes();
  Vec b = Vec::Zero(n + 1);
  b(n) = 1.0;
  Vec xi = A.colPivHouseholderQr().solve(b);
  if ((A * xi - b).cwiseAbs().maxCoeff() > 1e-9)
    throw std::runtime_error("stationary: no distribution solves xi'P = xi'");
  xi = xi.cwiseMax(0.0);
  xi /= xi.sum();
  return xi;
}

namespace detail {

inline void check_state_distribution(const Vec& xi, int n, const char* who) {
  if (xi.size() != n) throw std::invalid_argument(std::string(who) + ": xi has wrong length");
  if (xi.minCoeff() < 0.0)
    throw std::invalid_argument(std::string(who) + ": xi has a negative entry");
  if (std::abs(xi.sum() - 1.0) > 1e-9)
    throw std::invalid_argument(std::string(who) + ": xi does not sum to 1");
}

}  // namespace detail

// Robust TD error in feature space. Shares the arithmetic of the tabular
// robust_td_error so the identity embedding agrees exactly.
inline double robust_linear_td_error(const LinearModel& model, const FeatureMap& fmap, int i,
                                     int j, double cost, double vartheta,
                                     const ConfidenceRegion& region) {
  const int n = fmap.n_states();
  if (i < 0 || i >= n || j < 0 || j >= n)
    throw std::out_of_range("robust_linear_td_error: state out of range");
  if (model.theta.size() != fmap.dim())
    throw std::invalid_argument("robust_linear_td_error: theta dimension mismatch");
  if (region.dim() != n)
    throw std::invalid_argument("robust_linear_td_error: region dimension must match state count");
  const Vec v = fmap.phi * model.theta;
  return detail::td_error_given_sigma(v, i, j, cost, vartheta, support(region, v).value);
}

// Image of v under the proxy robust evaluation operator for a deterministic
// policy: c(i, pi(i)) + vartheta (p_i'v + sigma(v)).
inline Vec robust_bellman_image(const TabularMdp& mdp, const Policy& pi,
                                const ConfidenceRegion& region, double vartheta, const Vec& v) {
  mdp.validate();
  if (pi.kind != Policy::Kind::deterministic)
    throw std::invalid_argument("robust_bellman_image: policy must be deterministic");
  if (region.dim() != mdp.n_states || v.size() != mdp.n_states)
    throw std::invalid_argument("robust_bellman_image: dimension mismatch");
  const double sigma = support(region, v).value;
  Vec out(mdp.n_states);
  for (int i = 0; i < mdp.n_states; ++i) {
    const int a = pi.greedy_action(i);
    out(i) = mdp.cost(i, a) + vartheta * (mdp.p(a).row(i).dot(v) + sigma);
  }
  return out;
}

namespace detail {

struct MsrpbeParts {
  Vec v;          // Phi theta
  double sigma = 0.0;
  Vec maximizer;  // support argmax at v
  Vec g;          // E[d phi]
  Mat gram;       // E[phi phi']
  Vec w;          // gram^{-1} g
};

inline MsrpbeParts msrpbe_parts(const Vec& theta, const TabularMdp& mdp, const Vec& xi,
                                const Policy& pi, const FeatureMap& fmap,
                                const ConfidenceRegion& region, double vartheta) {
  mdp.validate();
  if (pi.kind != Policy::Kind::deterministic)
    throw std::invalid_argument("msrpbe: policy must be deterministic");
  if (fmap.n_states() != mdp.n_states) throw std::invalid_argument("msrpbe: feature row count");
  if (theta.size() != fmap.dim()) throw std::invalid_argument("msrpbe: theta dimension mismatch");
  if (region.dim() != mdp.n_states) throw std::invalid_argument("msrpbe: region dimension");
  check_state_distribution(xi, mdp.n_states, "msrpbe");

  MsrpbeParts parts;
  parts.v = fmap.phi * theta;
  const SupportResult sup = support(region, parts.v);
  parts.sigma = sup.value;
  parts.maximizer = sup.maximizer;

  // Expected robust TD error per state: the successor average replaces the
  // sampled phi', the sigma term is deterministic given theta.
  Vec dbar(mdp.n_states);
  for (int i = 0; i < mdp.n_states; ++i) {
    const int a = pi.greedy_action(i);
    dbar(i) = mdp.cost(i, a) + vartheta * (mdp.p(a).row(i).dot(parts.v) + parts.sigma) -
              parts.v(i);
  }
  parts.g = fmap.phi.transpose() * (xi.asDiagonal() * dbar);
  parts.gram = fmap.phi.transpose() * xi.asDiagonal() * fmap.phi;

  const Eigen::SelfAdjointEigenSolver<Mat> eig(parts.gram);
  if (eig.eigenvalues().minCoeff() <= 1e-10)
    throw std::invalid_argument(
        "msrpbe: E[phi phi'] is rank deficient under xi (min eigenvalue " +
        std::to_string(eig.eigenvalues().minCoeff()) + ")");
  parts.w = eig.eigenvectors() *
            (eig.eigenvectors().transpose() * parts.g).cwiseQuotient(eig.eigenvalues());
  return parts;
}

}  // namespace detail

// Mean squared robust projected Bellman error, enumerated exactly:
// E[d phi]' E[phi phi']^{-1} E[d phi] with i ~ xi, a = pi(i), i' ~ p^a_i.
inline double msrpbe_exact(const Vec& theta, const TabularMdp& mdp, const Vec& xi,
                           const Policy& pi, const FeatureMap& fmap,
                           const ConfidenceRegion& region, double vartheta) {
  const auto parts = detail::msrpbe_parts(theta, mdp, xi, pi, fmap, region, vartheta);
  return parts.g.dot(parts.w);
}

// Exact gradient of msrpbe_exact. The Gram matrix is constant in theta, so
// the chain rule touches only E[d phi] through dbar and the support term.
inline Vec msrpbe_gradient_exact(const Vec& theta, const TabularMdp& mdp, const Vec& xi,
                                 const Policy& pi, const FeatureMap& fmap,
                                 const ConfidenceRegion& region, double vartheta) {
  const auto parts = detail::msrpbe_parts(theta, mdp, xi, pi, fmap, region, vartheta);
  const Vec mu = fmap.phi.transpose() * parts.maximizer;

  // U row i = phi_i - vartheta mu - vartheta E[phi' | i].
  Mat U = fmap.phi;
  for (int i = 0; i < mdp.n_states; ++i) {
    const int a = pi.greedy_action(i);
    U.row(i) -= vartheta * (mu.transpose() + mdp.p(a).row(i) * fmap.phi);
  }
  return -2.0 * (U.transpose() * (xi.asDiagonal() * fmap.phi)) * parts.w;
}

namespace detail {

inline void check_fa_step(const LinearModel& model, const FaSample& sample,
                          const FeatureMap& fmap, const ConfidenceRegion& region, double alpha,
                          double beta_step, const char* who) {
  const auto d = fmap.dim();
  if (model.theta.size() != d || model.w.size() != d || sample.phi.size() != d ||
      sample.phi_next.size() != d)
    throw std::invalid_argument(std::string(who) + ": dimension mismatch");
  if (region.dim() != fmap.n_states())
    throw std::invalid_argument(std::string(who) + ": region dimension must match state count");
  if (!(alpha > 0.0) || !(beta_step > 0.0))
    throw std::invalid_argument(std::string(who) + ": step sizes must be positive");
}

}  // namespace detail

// One robust-GTD2 update. The weights move on the fast step, the parameters
// descend the exact-gradient direction with the discount on both the
// successor features and the support gradient.
inline LinearModel robust_gtd2_step(LinearModel model, const FaSample& sample, double alpha,
                                    double beta_step, const ConfidenceRegion& region,
                                    const FeatureMap& fmap, double vartheta) {
  detail::check_fa_step(model, sample, fmap, region, alpha, beta_step, "robust_gtd2_step");
  const Vec v = fmap.phi * model.theta;
  const auto sup = support(region, v);
  const Vec mu = fmap.phi.transpose() * sup.maximizer;
  const double d = sample.cost + vartheta * sample.phi_next.dot(model.theta) -
                   sample.phi.dot(model.theta) + vartheta * sup.value;
  const double phi_w = sample.phi.dot(model.w);
  model.theta += alpha * phi_w * (sample.phi - vartheta * mu - vartheta * sample.phi_next);
  model.w += beta_step * (d - phi_w) * sample.phi;
  return model;
}

// One robust-TDC update: the TD-error term plus the discounted correction
// through the successor features and the support gradient.
inline LinearModel robust_tdc_step(LinearModel model, const FaSample& sample, double alpha,
                                   double beta_step, const ConfidenceRegion& region,
                                   const FeatureMap& fmap, double vartheta) {
  detail::check_fa_step(model, sample, fmap, region, alpha, beta_step, "robust_tdc_step");
  const Vec v = fmap.phi * model.theta;
  const auto sup = support(region, v);
  const Vec mu = fmap.phi.transpose() * sup.maximizer;
  const double d = sample.cost + vartheta * sample.phi_next.dot(model.theta) -
                   sample.phi.dot(model.theta) + vartheta * sup.value;
  const double phi_w = sample.phi.dot(model.w);
  model.theta += alpha * d * sample.phi - vartheta * alpha * phi_w * (sample.phi_next + mu);
  model.w += beta_step * (d - phi_w) * sample.phi;
  return model;
}

// Contraction precondition on the discount: vartheta p_j <= alpha Phat_ij
// must hold for every row of every uncertainty set with one alpha < 1.
struct ContractionViolation {
  int state = 0;
  int action = 0;
  int successor = 0;
};

struct ContractionReport {
  bool ok = false;
  double alpha = 0.0;
  std::vector<ContractionViolation> violations;
};

inline ContractionReport check_assumption_contraction(const TabularMdp& mdp,
                                                      const RegionTable& regions,
                                                      const Policy& behavior, double vartheta) {
  mdp.validate();
  regions.validate(mdp.n_states, mdp.n_actions);
  const Mat phat = behavior_matrix(mdp, behavior);
  ContractionReport report;
  Vec basis = Vec::Zero(mdp.n_states);
  for (int a = 0; a < mdp.n_actions; ++a) {
    for (int i = 0; i < mdp.n_states; ++i) {
      for (int j = 0; j < mdp.n_states; ++j) {
        basis(j) = 1.0;
        const double reach = support(regions.at(i, a), basis).value;
        basis(j) = 0.0;
        const double p_max =
            std::min(1.0, std::max(0.0, mdp.p(a)(i, j) + reach));
        if (p_max <= 0.0) continue;
        if (phat(i, j) <= 0.0) {
          report.violations.push_back({i, a, j});
          continue;
        }
        report.alpha = std::max(report.alpha, vartheta * p_max / phat(i, j));
      }
    }
  }
  report.ok = report.violations.empty() && report.alpha < 1.0;
  return report;
}

// Empirical xi-norm contraction factor of the proxy evaluation operator over
// random parameter pairs. max_ratio is the squared-norm ratio, matching the
// squared form of the contraction bound.
struct ProjectedContractionReport {
  double max_ratio = 0.0;
  bool contraction = false;
};

inline ProjectedContractionReport projected_contraction_check(const TabularMdp& mdp,
                                                              const FeatureMap& fmap,
                                                              const Vec& xi, const Policy& pi,
                                                              const ConfidenceRegion& region,
                                                              double vartheta, int trials) {
  if (trials <= 0) throw std::invalid_argument("projected_contraction_check: trials");
  detail::check_state_distribution(xi, mdp.n_states, "projected_contraction_check");
  if (fmap.n_states() != mdp.n_states)
    throw std::invalid_argument("projected_contraction_check: feature row count");
  Rng rng(0x5ca1ab1eULL);
  const int d = fmap.dim();
  ProjectedContractionReport report;
  for (int t = 0; t < trials; ++t) {
    Vec ta(d), tb(d);
    for (int k = 0; k < d; ++k) {
      ta(k) = rng.normal();
      tb(k) = rng.normal();
    }
    const Vec va = fmap.phi * ta;
    const Vec vb = fmap.phi * tb;
    const Vec ia = robust_bellman_image(mdp, pi, region, vartheta, va);
    const Vec ib = robust_bellman_image(mdp, pi, region, vartheta, vb);
    const double denom = (va - vb).cwiseAbs2().dot(xi);
    if (denom <= 1e-18) continue;
    report.max_ratio = std::max(report.max_ratio, (ia - ib).cwiseAbs2().dot(xi) / denom);
  }
  report.contraction = report.max_ratio < 1.0;
  return report;
}

// Damped iteration on the projected proxy Bellman equation
// Phi theta = Pi T(Phi theta); converges when the projected operator
// contracts in the xi norm.
inline Vec projected_fixed_point(const TabularMdp& mdp, const FeatureMap& fmap, const Vec& xi,
                                 const Policy& pi, const ConfidenceRegion& region,
                                 double vartheta, double damping = 0.5, long max_iters = 200000,
                                 double tol = 1e-13) {
  if (!(damping > 0.0 && damping <= 1.0))
    throw std::invalid_argument("projected_fixed_point: damping must lie in (0,1]");
  detail::check_state_distribution(xi, mdp.n_states, "projected_fixed_point");
  const Mat gram = fmap.phi.transpose() * xi.asDiagonal() * fmap.phi;
  if (Eigen::SelfAdjointEigenSolver<Mat>(gram).eigenvalues().minCoeff() <= 1e-10)
    throw std::invalid_argument("projected_fixed_point: weighted Gram matrix is rank deficient");
  const Eigen::LDLT<Mat> solver(gram);
  Vec theta = Vec::Zero(fmap.dim());
  for (long it = 0; it < max_iters; ++it) {
    const Vec image = robust_bellman_image(mdp, pi, region, vartheta, fmap.phi * theta);
    const Vec target = solver.solve(fmap.phi.transpose() * (xi.asDiagonal() * image));
    const Vec next = theta + damping * (target - theta);
    const double gap = (next - theta).cwiseAbs().maxCoeff();
    theta = next;
    if (gap <= tol) return theta;
  }
  throw std::runtime_error("projected_fixed_point: no convergence; operator may not contract");
}

// Two-timescale learner configuration. The slow exponent must strictly
// exceed the fast one so alpha_k / beta_k -> 0.
struct GradLearnerConfig {
  StepSchedule slow = {1.0, 1.0, 0.9};
  StepSchedule fast = {1.0, 1.0, 0.6};
  long total_steps = 500000;
  long evaluate_every = 5000;
};

struct CurvePoint {
  long step = 0;
  double msrpbe = 0.0;
  double theta_norm = 0.0;
  double w_norm = 0.0;
};

enum class GradKind { gtd2, tdc };

// Runs robust-GTD2 or robust-TDC with states drawn i.i.d. from xi and
// successors from the target policy's rows, matching the enumerated loss.
inline std::pair<LinearModel, std::vector<CurvePoint>> run_robust_gradient(
    const TabularMdp& mdp, const FeatureMap& fmap, const Vec& xi, const Policy& pi,
    const ConfidenceRegion& region, double vartheta, const GradLearnerConfig& cfg, GradKind kind,
    Rng& rng) {
  std::string why;
  if (!validate_two_timescale(cfg.slow, cfg.fast, &why))
    throw std::invalid_argument("run_robust_gradient: bad schedules: " + why);
  if (cfg.total_steps <= 0 || cfg.evaluate_every <= 0)
    throw std::invalid_argument("run_robust_gradient: step counts must be positive");
  detail::check_state_distribution(xi, mdp.n_states, "run_robust_gradient");

  LinearModel model = LinearModel::zero(fmap.dim());
  std::vector<CurvePoint> curve;
  for (long k = 1; k <= cfg.total_steps; ++k) {
    // Inverse-CDF draw of the state under xi.
    double u = rng.uniform01();
    int i = mdp.n_states - 1;
    for (int s = 0; s < mdp.n_states; ++s) {
      u -= xi(s);
      if (u < 0.0) {
        i = s;
        break;
      }
    }
    const int a = pi.greedy_action(i);
    const int j = sample_transition(mdp, i, a, rng);
    FaSample sample;
    sample.phi = fmap.phi.row(i).transpose();
    sample.phi_next = fmap.phi.row(j).transpose();
    sample.cost = mdp.cost(i, a);
    const double alpha = cfg.slow(k);
    const double beta_step = cfg.fast(k);
    model = kind == GradKind::gtd2
                ? robust_gtd2_step(std::move(model), sample, alpha, beta_step, region, fmap,
                                   vartheta)
                : robust_tdc_step(std::move(model), sample, alpha, beta_step, region, fmap,
                                  vartheta);
    if (k % cfg.evaluate_every == 0) {
      curve.push_back({k, msrpbe_exact(model.theta, mdp, xi, pi, fmap, region, vartheta),
                       model.theta.norm(), model.w.norm()});
    }
  }
  return {std::move(model), std::move(curve)};
}

inline void write_learning_curve_csv(const std::string& path,
                                     const std::vector<CurvePoint>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("learning curve: cannot open " + path);
  out << "step,msrpbe_exact,theta_norm,w_norm\n";
  out.precision(17);
  for (const auto& p : curve)
    out << p.step << ',' << p.msrpbe << ',' << p.theta_norm << ',' << p.w_norm << '\n';
}

}  // namespace rrl
