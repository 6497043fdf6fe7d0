#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "rrl/fa_linear.hpp"
#include "rrl/mdp.hpp"
#include "rrl/rng.hpp"
#include "rrl/uncertainty.hpp"

namespace rrl {

// Twice-differentiable value model over a finite state space. Derivatives are
// hand-coded by each instance; the tests hold them to finite differences.
struct SmoothValueModel {
  virtual ~SmoothValueModel() = default;
  virtual int n_states() const = 0;
  virtual int dim() const = 0;
  virtual double value(int i, const Vec& theta) const = 0;
  virtual Vec gradient(int i, const Vec& theta) const = 0;
  virtual Vec hessian_vec(int i, const Vec& theta, const Vec& u) const = 0;

  Vec values(const Vec& theta) const {
    Vec out(n_states());
    for (int i = 0; i < n_states(); ++i) out(i) = value(i, theta);
    return out;
  }

  // Tangent features: row i is the gradient of v_theta(i).
  Mat gradients(const Vec& theta) const {
    Mat out(n_states(), dim());
    for (int i = 0; i < n_states(); ++i) out.row(i) = gradient(i, theta).transpose();
    return out;
  }
};

// Polynomial-of-features model v(i) = s + curvature/2 s^2 with s = phi_i'theta.
// Curvature zero makes it exactly linear, which the reduction tests use.
struct QuadraticValueModel final : SmoothValueModel {
  Mat phi;
  double curvature = 0.0;

  QuadraticValueModel(Mat features, double curv) : phi(std::move(features)), curvature(curv) {
    if (phi.rows() < 1 || phi.cols() < 1)
      throw std::invalid_argument("quadratic model: features must be nonempty");
  }

  int n_states() const override { return static_cast<int>(phi.rows()); }
  int dim() const override { return static_cast<int>(phi.cols()); }

  double value(int i, const Vec& theta) const override {
    check(i, theta);
    const double s = phi.row(i).dot(theta);
    return s + 0.5 * curvature * s * s;
  }
  Vec gradient(int i, const Vec& theta) const override {
    check(i, theta);
    const double s = phi.row(i).dot(theta);
    return (1.0 + curvature * s) * phi.row(i).transpose();
  }
  Vec hessian_vec(int i, const Vec& theta, const Vec& u) const override {
    check(i, theta);
    if (u.size() != dim()) throw std::invalid_argument("quadratic model: direction dimension");
    return curvature * phi.row(i).dot(u) * phi.row(i).transpose();
  }

 private:
  void check(int i, const Vec& theta) const {
    if (i < 0 || i >= n_states()) throw std::out_of_range("quadratic model: state out of range");
    if (theta.size() != dim()) throw std::invalid_argument("quadratic model: theta dimension");
  }
};

// One hidden layer of tanh units: v(i) = a' tanh(W x_i + b). Parameters are
// packed [W row-major, b, a], so d = hidden * (inputs + 2).
struct TanhNetworkModel final : SmoothValueModel {
  Mat x;
  int hidden = 0;

  TanhNetworkModel(Mat inputs, int width) : x(std::move(inputs)), hidden(width) {
    if (x.rows() < 1 || x.cols() < 1)
      throw std::invalid_argument("tanh model: inputs must be nonempty");
    if (hidden < 1) throw std::invalid_argument("tanh model: width must be positive");
  }

  int n_states() const override { return static_cast<int>(x.rows()); }
  int dim() const override { return hidden * (static_cast<int>(x.cols()) + 2); }

  double value(int i, const Vec& theta) const override {
    check(i, theta);
    double out = 0.0;
    for (int r = 0; r < hidden; ++r) out += a(theta, r) * std::tanh(pre(theta, i, r));
    return out;
  }

  Vec gradient(int i, const Vec& theta) const override {
    check(i, theta);
    const int m = static_cast<int>(x.cols());
    Vec out(dim());
    for (int r = 0; r < hidden; ++r) {
      const double t = std::tanh(pre(theta, i, r));
      const double dt = 1.0 - t * t;
      for (int c = 0; c < m; ++c) out(r * m + c) = a(theta, r) * dt * x(i, c);
      out(hidden * m + r) = a(theta, r) * dt;
      out(hidden * m + hidden + r) = t;
    }
    return out;
  }

  Vec hessian_vec(int i, const Vec& theta, const Vec& u) const override {
    check(i, theta);
    if (u.size() != dim()) throw std::invalid_argument("tanh model: direction dimension");
    const int m = static_cast<int>(x.cols());
    Vec out(dim());
    for (int r = 0; r < hidden; ++r) {
      const double t = std::tanh(pre(theta, i, r));
      const double dt = 1.0 - t * t;
      const double ddt = -2.0 * t * dt;
      // Directional change of the pre-activation under u.
      double ds = u(hidden * m + r);
      for (int c = 0; c < m; ++c) ds += u(r * m + c) * x(i, c);
      const double ua = u(hidden * m + hidden + r);
      const double common = ua * dt + a(theta, r) * ddt * ds;
      for (int c = 0; c < m; ++c) out(r * m + c) = common * x(i, c);
      out(hidden * m + r) = common;
      out(hidden * m + hidden + r) = dt * ds;
    }
    return out;
  }

 private:
  double pre(const Vec& theta, int i, int r) const {
    const int m = static_cast<int>(x.cols());
    double s = theta(hidden * m + r);
    for (int c = 0; c < m; ++c) s += theta(r * m + c) * x(i, c);
    return s;
  }
  double a(const Vec& theta, int r) const {
    return theta(hidden * static_cast<int>(x.cols()) + hidden + r);
  }
  void check(int i, const Vec& theta) const {
    if (i < 0 || i >= n_states()) throw std::out_of_range("tanh model: state out of range");
    if (theta.size() != dim()) throw std::invalid_argument("tanh model: theta dimension");
  }
};

// Origin-centered l2 ball the iterates are projected into.
struct CompactSet {
  double radius = 0.0;

  static CompactSet ball(double r) {
    if (!(r > 0.0)) throw std::invalid_argument("compact set: radius must be positive");
    CompactSet c;
    c.radius = r;
    return c;
  }

  // Large enough to contain every plausible solution, so the projection is
  // a safeguard rather than part of the dynamics.
  static CompactSet around(const Vec& theta0) { return ball(10.0 * theta0.norm() + 10.0); }
};

inline Vec gamma_projection(const Vec& theta, const CompactSet& c) {
  if (!(c.radius > 0.0)) throw std::invalid_argument("gamma projection: radius must be positive");
  const double norm = theta.norm();
  if (norm <= c.radius) return theta;
  return (c.radius / norm) * theta;
}

// Curvature correction of the gradient: (d - phi'w) * hessian_vec, where
// hessian_vec is the model Hessian at the sampled state applied to w.
inline Vec h_term(double d, const Vec& phi, const Vec& w, const Vec& hess_vec) {
  if (phi.size() != w.size() || phi.size() != hess_vec.size())
    throw std::invalid_argument("h_term: dimension mismatch");
  return (d - phi.dot(w)) * hess_vec;
}

// One observed transition by state index; features come from the model.
struct NlSample {
  int state = 0;
  int next_state = 0;
  double cost = 0.0;
};

struct NlStepResult {
  Vec theta;
  Vec w;
  bool gamma_active = false;
};

namespace detail {

struct NlStepParts {
  double d = 0.0;       // robust TD error
  double phi_w = 0.0;   // phi' w
  Vec phi;
  Vec phi_next;
  Vec mu;
  Vec correction;       // h_k
};

inline NlStepParts nl_step_parts(const SmoothValueModel& model, const Vec& theta, const Vec& w,
                                 const NlSample& sample, const ConfidenceRegion& region,
                                 double vartheta) {
  const int n = model.n_states();
  if (sample.state < 0 || sample.state >= n || sample.next_state < 0 || sample.next_state >= n)
    throw std::out_of_range("nonlinear step: state out of range");
  if (theta.size() != model.dim() || w.size() != model.dim())
    throw std::invalid_argument("nonlinear step: parameter dimension mismatch");
  if (region.dim() != n)
    throw std::invalid_argument("nonlinear step: region dimension must match state count");
  const Vec v = model.values(theta);
  const SupportResult sup = support(region, v);
  const Mat tangent = model.gradients(theta);
  NlStepParts parts;
  parts.phi = tangent.row(sample.state).transpose();
  parts.phi_next = tangent.row(sample.next_state).transpose();
  parts.mu = tangent.transpose() * sup.maximizer;
  parts.d = sample.cost + vartheta * v(sample.next_state) - v(sample.state) +
            vartheta * sup.value;
  parts.phi_w = parts.phi.dot(w);
  parts.correction =
      h_term(parts.d, parts.phi, w, model.hessian_vec(sample.state, theta, w));
  return parts;
}

}  // namespace detail

inline NlStepResult robust_nonlinear_gtd2_step(const SmoothValueModel& model, Vec theta, Vec w,
                                               const NlSample& sample, double alpha,
                                               double beta_step, const ConfidenceRegion& region,
                                               const CompactSet& compact, double vartheta) {
  if (!(alpha > 0.0) || !(beta_step > 0.0))
    throw std::invalid_argument("robust_nonlinear_gtd2_step: step sizes must be positive");
  const auto p = detail::nl_step_parts(model, theta, w, sample, region, vartheta);
  NlStepResult out;
  const Vec raw =
      theta + alpha * (p.phi_w * (p.phi - vartheta * p.phi_next - vartheta * p.mu) -
                       p.correction);
  out.gamma_active = raw.norm() > compact.radius;
  out.theta = out.gamma_active ? gamma_projection(raw, compact) : raw;
  out.w = std::move(w);
  out.w += beta_step * (p.d - p.phi_w) * p.phi;
  return out;
}

inline NlStepResult robust_nonlinear_tdc_step(const SmoothValueModel& model, Vec theta, Vec w,
                                              const NlSample& sample, double alpha,
                                              double beta_step, const ConfidenceRegion& region,
                                              const CompactSet& compact, double vartheta) {
  if (!(alpha > 0.0) || !(beta_step > 0.0))
    throw std::invalid_argument("robust_nonlinear_tdc_step: step sizes must be positive");
  const auto p = detail::nl_step_parts(model, theta, w, sample, region, vartheta);
  NlStepResult out;
  const Vec raw =
      theta + alpha * (p.d * p.phi - vartheta * p.phi_w * (p.phi_next + p.mu) - p.correction);
  out.gamma_active = raw.norm() > compact.radius;
  out.theta = out.gamma_active ? gamma_projection(raw, compact) : raw;
  out.w = std::move(w);
  out.w += beta_step * (p.d - p.phi_w) * p.phi;
  return out;
}

// Loss in the tangent-space metric: E[d grad]' E[grad grad']^{-1} E[d grad],
// enumerated exactly with i ~ xi, a = pi(i), i' ~ p^a_i.
inline double msrpbe_nonlinear_exact(const Vec& theta, const TabularMdp& mdp, const Vec& xi,
                                     const Policy& pi, const SmoothValueModel& model,
                                     const ConfidenceRegion& region, double vartheta) {
  mdp.validate();
  if (pi.kind != Policy::Kind::deterministic)
    throw std::invalid_argument("msrpbe: policy must be deterministic");
  if (model.n_states() != mdp.n_states)
    throw std::invalid_argument("msrpbe: model state count mismatch");
  if (theta.size() != model.dim()) throw std::invalid_argument("msrpbe: theta dimension");
  if (region.dim() != mdp.n_states) throw std::invalid_argument("msrpbe: region dimension");
  detail::check_state_distribution(xi, mdp.n_states, "msrpbe");

  const Vec v = model.values(theta);
  const double sigma = support(region, v).value;
  const Mat tangent = model.gradients(theta);
  Vec dbar(mdp.n_states);
  for (int i = 0; i < mdp.n_states; ++i) {
    const int a = pi.greedy_action(i);
    dbar(i) = mdp.cost(i, a) + vartheta * (mdp.p(a).row(i).dot(v) + sigma) - v(i);
  }
  const Vec g = tangent.transpose() * (xi.asDiagonal() * dbar);
  const Mat gram = tangent.transpose() * xi.asDiagonal() * tangent;
  const Eigen::SelfAdjointEigenSolver<Mat> eig(gram);
  if (eig.eigenvalues().minCoeff() <= 1e-10) {
    std::ostringstream msg;
    msg << "msrpbe: tangent Gram matrix is singular under xi; near-null direction [";
    const Vec dir = eig.eigenvectors().col(0);
    for (int k = 0; k < dir.size(); ++k) msg << (k ? ", " : "") << dir(k);
    msg << "]";
    throw std::invalid_argument(msg.str());
  }
  const Vec w =
      eig.eigenvectors() * (eig.eigenvectors().transpose() * g).cwiseQuotient(eig.eigenvalues());
  return g.dot(w);
}

struct NlCurvePoint {
  long step = 0;
  double msrpbe = 0.0;
  double theta_norm = 0.0;
  double w_norm = 0.0;
  double gamma_active = 0.0;  // fraction of steps in the window ending here
};

struct NlRunResult {
  Vec theta;
  Vec w;
  std::vector<NlCurvePoint> curve;
  double gamma_active_fraction = 0.0;
};

// Two-timescale nonlinear learner with the same iid sampling law as the
// linear driver; tracks how often the projection actually clips.
inline NlRunResult run_robust_nonlinear(const TabularMdp& mdp, const SmoothValueModel& model,
                                        const Vec& xi, const Policy& pi,
                                        const ConfidenceRegion& region, double vartheta,
                                        const GradLearnerConfig& cfg, const CompactSet& compact,
                                        const Vec& theta0, GradKind kind, Rng& rng) {
  std::string why;
  if (!validate_two_timescale(cfg.slow, cfg.fast, &why))
    throw std::invalid_argument("run_robust_nonlinear: bad schedules: " + why);
  if (cfg.total_steps <= 0 || cfg.evaluate_every <= 0)
    throw std::invalid_argument("run_robust_nonlinear: step counts must be positive");
  detail::check_state_distribution(xi, mdp.n_states, "run_robust_nonlinear");
  if (theta0.size() != model.dim())
    throw std::invalid_argument("run_robust_nonlinear: theta0 dimension mismatch");

  NlRunResult out;
  out.theta = theta0;
  out.w = Vec::Zero(model.dim());
  long active_total = 0;
  long active_window = 0;
  for (long k = 1; k <= cfg.total_steps; ++k) {
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
    NlSample sample;
    sample.state = i;
    sample.next_state = sample_transition(mdp, i, a, rng);
    sample.cost = mdp.cost(i, a);
    NlStepResult step =
        kind == GradKind::gtd2
            ? robust_nonlinear_gtd2_step(model, std::move(out.theta), std::move(out.w), sample,
                                         cfg.slow(k), cfg.fast(k), region, compact, vartheta)
            : robust_nonlinear_tdc_step(model, std::move(out.theta), std::move(out.w), sample,
                                        cfg.slow(k), cfg.fast(k), region, compact, vartheta);
    out.theta = std::move(step.theta);
    out.w = std::move(step.w);
    if (step.gamma_active) {
      ++active_total;
      ++active_window;
    }
    if (k % cfg.evaluate_every == 0) {
      NlCurvePoint point;
      point.step = k;
      point.msrpbe = msrpbe_nonlinear_exact(out.theta, mdp, xi, pi, model, region, vartheta);
      point.theta_norm = out.theta.norm();
      point.w_norm = out.w.norm();
      point.gamma_active =
          static_cast<double>(active_window) / static_cast<double>(cfg.evaluate_every);
      active_window = 0;
      out.curve.push_back(point);
    }
  }
  out.gamma_active_fraction =
      static_cast<double>(active_total) / static_cast<double>(cfg.total_steps);
  return out;
}

inline void write_learning_curve_csv(const std::string& path,
                                     const std::vector<NlCurvePoint>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("learning curve: cannot open " + path);
  out << "step,msrpbe_exact,theta_norm,w_norm,gamma_active\n";
  out.precision(17);
  for (const auto& p : curve)
    out << p.step << ',' << p.msrpbe << ',' << p.theta_norm << ',' << p.w_norm << ','
        << p.gamma_active << '\n';
}

}  // namespace rrl
