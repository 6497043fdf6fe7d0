#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rrl/detail/geometry.hpp"
#include "rrl/detail/lp.hpp"
#include "rrl/mdp.hpp"
#include "rrl/rng.hpp"

namespace rrl {

// Convex uncertainty region for a transition-row increment x, centered at 0.
// Every variant carries the zero-sum constraint sum_j x_j = 0 by default, so
// that p + x keeps unit mass; the flag can be dropped for ablations.
//
// Variants and their constraints:
//   l2 ball          ||x||_2 <= r
//   l1 ball          ||x||_1 <= r
//   ellipsoid        x'Ax <= 1, A symmetric positive definite
//   parallelepiped   ||Bx||_1 <= 1, B invertible
//
// Radius convention: the ball variants take the radius directly; an ellipsoid
// with A = r^-2 I reproduces the l2 ball of radius r. Radius 0 is the
// degenerate point region {0} (needed so "robust with radius 0" collapses to
// the nominal method bit-for-bit).
class ConfidenceRegion {
public:
  enum class Kind { l2_ball, l1_ball, ellipsoid, parallelepiped };

  static ConfidenceRegion l2_ball(int n, double radius, bool zero_sum = true) {
    check_ball_(n, radius);
    ConfidenceRegion r;
    r.kind_ = Kind::l2_ball;
    r.n_ = n;
    r.radius_ = radius;
    r.zero_sum_ = zero_sum;
    return r;
  }

  static ConfidenceRegion l1_ball(int n, double radius, bool zero_sum = true) {
    check_ball_(n, radius);
    ConfidenceRegion r;
    r.kind_ = Kind::l1_ball;
    r.n_ = n;
    r.radius_ = radius;
    r.zero_sum_ = zero_sum;
    return r;
  }

  static ConfidenceRegion ellipsoid(Mat A, bool zero_sum = true) {
    const int n = static_cast<int>(A.rows());
    if (n <= 0 || A.cols() != n) throw std::invalid_argument("region: A must be square");
    if (!A.isApprox(A.transpose(), 1e-10)) throw std::invalid_argument("region: A must be symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> eig(A);
    if (eig.eigenvalues().minCoeff() <= 0.0)
      throw std::invalid_argument("region: A must be positive definite");
    ConfidenceRegion r;
    r.kind_ = Kind::ellipsoid;
    r.n_ = n;
    r.zero_sum_ = zero_sum;
    r.A_ = std::move(A);
    r.M_ = eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() *
           eig.eigenvectors().transpose();
    return r;
  }

  static ConfidenceRegion parallelepiped(Mat B, bool zero_sum = true) {
    const int n = static_cast<int>(B.rows());
    if (n <= 0 || B.cols() != n) throw std::invalid_argument("region: B must be square");
    Eigen::FullPivLU<Mat> lu(B);
    if (!lu.isInvertible()) throw std::invalid_argument("region: B must be invertible");
    ConfidenceRegion r;
    r.kind_ = Kind::parallelepiped;
    r.n_ = n;
    r.zero_sum_ = zero_sum;
    r.B_ = std::move(B);
    r.C_ = lu.inverse();
    return r;
  }

  Kind kind() const { return kind_; }
  int dim() const { return n_; }
  double radius() const { return radius_; }
  bool zero_sum() const { return zero_sum_; }
  const Mat& A() const { return A_; }
  const Mat& A_inverse() const { return M_; }
  const Mat& B() const { return B_; }
  const Mat& B_inverse() const { return C_; }

  bool is_ball() const { return kind_ == Kind::l2_ball || kind_ == Kind::l1_ball; }
  // Point region {0}: support vanishes identically.
  bool degenerate() const { return is_ball() && radius_ == 0.0; }
  bool is_polytope() const { return kind_ == Kind::l1_ball || kind_ == Kind::parallelepiped; }

  bool contains(const Vec& x, double tol = 1e-12) const {
    if (x.size() != n_) throw std::invalid_argument("region: dimension mismatch");
    if (zero_sum_ && std::abs(x.sum()) > tol) return false;
    switch (kind_) {
      case Kind::l2_ball:
        return x.norm() <= radius_ + tol;
      case Kind::l1_ball:
        return x.cwiseAbs().sum() <= radius_ + tol;
      case Kind::ellipsoid:
        return x.dot(A_ * x) <= 1.0 + tol;
      case Kind::parallelepiped:
        return (B_ * x).cwiseAbs().sum() <= 1.0 + tol;
    }
    return false;
  }

  // max_{y in region} ||y||_2; scale factor for step sizes and the Lipschitz
  // diagnostics of the nonlinear module.
  double max_norm2() const {
    if (n_ == 1) return 0.0;
    switch (kind_) {
      case Kind::l2_ball:
        return radius_;
      case Kind::l1_ball:
        return zero_sum_ ? radius_ / std::sqrt(2.0) : radius_;
      case Kind::ellipsoid: {
        if (!zero_sum_) {
          Eigen::SelfAdjointEigenSolver<Mat> eig(A_);
          return 1.0 / std::sqrt(eig.eigenvalues().minCoeff());
        }
        const Mat V = zero_sum_basis_(n_);
        Eigen::SelfAdjointEigenSolver<Mat> eig(V.transpose() * A_ * V);
        return 1.0 / std::sqrt(eig.eigenvalues().minCoeff());
      }
      case Kind::parallelepiped: {
        double best = 0.0;
        for (const Vec& u : cross_polytope_vertices_())
          best = std::max(best, (C_ * u).norm());
        return best;
      }
    }
    return 0.0;
  }

  // Extreme points of {||u||_1 <= 1} cut by the zero-sum hyperplane in
  // u-coordinates (g'u = 0 with g = B^-T 1); the full vertex list of the
  // parallelepiped's feasible set at desk scale.
  std::vector<Vec> cross_polytope_vertices_() const {
    std::vector<Vec> out;
    if (!zero_sum_) {
      for (int i = 0; i < n_; ++i)
        for (double s : {1.0, -1.0}) {
          Vec u = Vec::Zero(n_);
          u(i) = s;
          out.push_back(u);
        }
      return out;
    }
    const Vec g = C_.transpose() * Vec::Ones(n_);
    for (int i = 0; i < n_; ++i) {
      if (std::abs(g(i)) < 1e-14) {
        for (double s : {1.0, -1.0}) {
          Vec u = Vec::Zero(n_);
          u(i) = s;
          out.push_back(u);
        }
      }
    }
    for (int i = 0; i < n_; ++i)
      for (int j = i + 1; j < n_; ++j)
        for (double si : {1.0, -1.0})
          for (double sj : {1.0, -1.0}) {
            const double gi = si * g(i), gj = sj * g(j);
            const double den = gi - gj;
            if (std::abs(den) < 1e-14) continue;
            const double mu = gi / den;
            if (mu <= 0.0 || mu >= 1.0) continue;
            Vec u = Vec::Zero(n_);
            u(i) = (1.0 - mu) * si;
            u(j) = mu * sj;
            out.push_back(u);
          }
    return out;
  }

private:
  static void check_ball_(int n, double radius) {
    if (n <= 0) throw std::invalid_argument("region: dimension must be positive");
    if (!(radius >= 0.0) || !std::isfinite(radius))
      throw std::invalid_argument("region: radius must be finite and nonnegative");
  }

  static Mat zero_sum_basis_(int n) {
    // Orthonormal basis of the hyperplane {1'x = 0}.
    Mat ones = Mat::Ones(n, 1);
    Eigen::HouseholderQR<Mat> qr(ones);
    Mat Q = qr.householderQ();
    return Q.rightCols(n - 1);
  }

  Kind kind_ = Kind::l2_ball;
  int n_ = 0;
  double radius_ = 0.0;
  bool zero_sum_ = true;
  Mat A_, M_;  // ellipsoid matrix and its inverse
  Mat B_, C_;  // parallelepiped matrix and its inverse
};

// Support function value sigma = sup_{y in region} y'v and a maximizer.
struct SupportResult {
  double value = 0.0;
  Vec maximizer;
};

namespace detail {

inline SupportResult zero_support(int n) {
  SupportResult r;
  r.value = 0.0;
  r.maximizer = Vec::Zero(n);
  return r;
}

inline SupportResult parallelepiped_support_lp(const ConfidenceRegion& region, const Vec& v) {
  // Substitute u = Bx; maximize (B^-T v)'u over ||u||_1 <= 1 (and g'u = 0
  // when zero-sum) with u = a - b, a,b >= 0.
  const int n = region.dim();
  const Mat& C = region.B_inverse();
  const Vec cu = C.transpose() * v;
  BoundedLp lp;
  lp.c = VectorXd(2 * n);
  lp.c << cu, -cu;
  lp.Aub = MatrixXd::Ones(1, 2 * n);
  lp.bub = VectorXd::Constant(1, 1.0);
  if (region.zero_sum()) {
    const Vec g = C.transpose() * Vec::Ones(n);
    lp.Aeq = MatrixXd(1, 2 * n);
    lp.Aeq << g.transpose(), -g.transpose();
    lp.beq = VectorXd::Zero(1);
  } else {
    lp.Aeq = MatrixXd(0, 2 * n);
    lp.beq = VectorXd(0);
  }
  lp.lo = VectorXd::Zero(2 * n);
  lp.hi = VectorXd::Constant(2 * n, std::numeric_limits<double>::infinity());
  const LpSolution sol = lp_maximize(lp);
  if (sol.status != LpStatus::optimal)
    throw std::runtime_error("support: parallelepiped LP did not solve");
  const Vec u = sol.x.head(n) - sol.x.tail(n);
  SupportResult r;
  r.maximizer = C * u;
  r.value = v.dot(r.maximizer);
  return r;
}

}  // namespace detail

// Support function of the region: closed forms for the ball and ellipsoid
// variants, an exact LP vertex solve for the parallelepiped. The maximizer at
// the kink (centered v = 0) is pinned to y = 0; l1 argmax/argmin ties break
// to the lowest index.
inline SupportResult support(const ConfidenceRegion& region, const Vec& v) {
  const int n = region.dim();
  if (v.size() != n) throw std::invalid_argument("support: dimension mismatch");
  if (region.degenerate()) return detail::zero_support(n);
  if (n == 1 && region.zero_sum()) return detail::zero_support(n);

  switch (region.kind()) {
    case ConfidenceRegion::Kind::l2_ball: {
      const Vec vb = region.zero_sum() ? Vec(v.array() - v.mean()) : v;
      const double nb = vb.norm();
      if (nb <= 0.0) return detail::zero_support(n);
      SupportResult r;
      r.value = region.radius() * nb;
      r.maximizer = (region.radius() / nb) * vb;
      return r;
    }
    case ConfidenceRegion::Kind::l1_ball: {
      SupportResult r;
      if (region.zero_sum()) {
        int imax = 0, imin = 0;
        for (int j = 1; j < n; ++j) {
          if (v(j) > v(imax)) imax = j;
          if (v(j) < v(imin)) imin = j;
        }
        const double spread = v(imax) - v(imin);
        if (spread <= 0.0) return detail::zero_support(n);
        r.value = 0.5 * region.radius() * spread;
        r.maximizer = Vec::Zero(n);
        r.maximizer(imax) = 0.5 * region.radius();
        r.maximizer(imin) = -0.5 * region.radius();
      } else {
        int imax = 0;
        for (int j = 1; j < n; ++j)
          if (std::abs(v(j)) > std::abs(v(imax))) imax = j;
        if (v(imax) == 0.0) return detail::zero_support(n);
        r.value = region.radius() * std::abs(v(imax));
        r.maximizer = Vec::Zero(n);
        r.maximizer(imax) = v(imax) > 0.0 ? region.radius() : -region.radius();
      }
      return r;
    }
    case ConfidenceRegion::Kind::ellipsoid: {
      const Mat& M = region.A_inverse();
      Vec w = v;
      if (region.zero_sum()) {
        const Vec M1 = M * Vec::Ones(n);
        const double lambda = M1.dot(v) / M1.sum();
        w = v.array() - lambda;
      }
      const double s2 = w.dot(M * w);
      if (s2 <= 0.0) return detail::zero_support(n);
      SupportResult r;
      r.value = std::sqrt(s2);
      r.maximizer = (M * w) / r.value;
      return r;
    }
    case ConfidenceRegion::Kind::parallelepiped:
      return detail::parallelepiped_support_lp(region, v);
  }
  return detail::zero_support(n);
}

namespace detail {

inline void check_distribution(const Vec& p, const char* who) {
  for (int j = 0; j < p.size(); ++j)
    if (!(p(j) >= -1e-12) || !(p(j) <= 1.0 + 1e-12))
      throw std::invalid_argument(std::string(who) + ": nominal row entry outside [0,1]");
  if (std::abs(p.sum() - 1.0) > 1e-9)
    throw std::invalid_argument(std::string(who) + ": nominal row does not sum to 1");
}

// Exact projection onto the region in the diagonally weighted metric w.
inline VectorXd project_region_weighted(const ConfidenceRegion& region, const VectorXd& z,
                                        const VectorXd& w) {
  switch (region.kind()) {
    case ConfidenceRegion::Kind::l2_ball:
      return project_l2_ball_weighted(z, region.radius(), w);
    case ConfidenceRegion::Kind::l1_ball:
      return project_l1_ball_weighted(z, region.radius(), w);
    case ConfidenceRegion::Kind::ellipsoid:
      return project_quadratic_weighted(z, region.A(), w);
    case ConfidenceRegion::Kind::parallelepiped:
      return project_parallelepiped_weighted(z, region.B(), region.B_inverse(), w);
  }
  return z;
}

// Projection of z onto region ∩ {box, zero-sum} via Dykstra alternation in
// the weighted metric. The intersection always contains 0.
inline VectorXd project_feasible_set(const ConfidenceRegion& region, const VectorXd& z,
                                     const VectorXd& lo, const VectorXd& hi, const VectorXd& w,
                                     double tol = 1e-9) {
  const int n = static_cast<int>(z.size());
  const VectorXd ones = VectorXd::Ones(n);
  if (region.kind() == ConfidenceRegion::Kind::l2_ball)
    return project_ball_box_hyperplane(z, region.radius(), lo, hi, ones, 0.0, w);
  std::vector<std::function<VectorXd(const VectorXd&)>> projs;
  projs.push_back([&](const VectorXd& y) { return project_region_weighted(region, y, w); });
  projs.push_back(
      [&](const VectorXd& y) { return project_box_hyperplane(y, lo, hi, ones, 0.0, w); });
  return dykstra_project(z, projs, tol * 0.01, 50000);
}

// Exact slice solve used to polish the smooth constrained support: maximize
// v'x over {x'Qx <= 1, 1'x = s0, x_S fixed at bounds}, quadratic constraint
// active. Returns false when the restricted problem is empty or degenerate.
inline bool quadratic_slice_max(const Mat& Q, const Vec& v, const std::vector<int>& free_idx,
                                const Vec& x_fixed, double s0, Vec* out) {
  const int nf = static_cast<int>(free_idx.size());
  const int n = static_cast<int>(x_fixed.size());
  std::vector<int> fixed_idx;
  for (int j = 0, f = 0; j < n; ++j) {
    if (f < nf && free_idx[static_cast<std::size_t>(f)] == j)
      ++f;
    else
      fixed_idx.push_back(j);
  }
  Vec xs(fixed_idx.size());
  for (std::size_t k = 0; k < fixed_idx.size(); ++k) xs(static_cast<int>(k)) = x_fixed(fixed_idx[k]);

  if (nf == 0) {
    *out = x_fixed;
    return std::abs(x_fixed.sum() - s0) <= 1e-9;
  }
  Mat Qff(nf, nf);
  Vec vf(nf);
  for (int a = 0; a < nf; ++a) {
    vf(a) = v(free_idx[static_cast<std::size_t>(a)]);
    for (int b = 0; b < nf; ++b)
      Qff(a, b) = Q(free_idx[static_cast<std::size_t>(a)], free_idx[static_cast<std::size_t>(b)]);
  }
  Vec bq = Vec::Zero(nf);
  double kappa0 = 0.0;
  for (std::size_t s = 0; s < fixed_idx.size(); ++s) {
    for (int a = 0; a < nf; ++a)
      bq(a) += Q(free_idx[static_cast<std::size_t>(a)], fixed_idx[s]) * xs(static_cast<int>(s));
    for (std::size_t t = 0; t < fixed_idx.size(); ++t)
      kappa0 += xs(static_cast<int>(s)) * Q(fixed_idx[s], fixed_idx[t]) * xs(static_cast<int>(t));
  }
  Eigen::LLT<Mat> llt(Qff);
  if (llt.info() != Eigen::Success) return false;
  const Vec mu0 = -llt.solve(bq);
  const double R2 = 1.0 - kappa0 + bq.dot(llt.solve(bq));
  if (R2 <= 0.0) return false;
  double s_fixed = 0.0;
  for (std::size_t s = 0; s < fixed_idx.size(); ++s) s_fixed += xs(static_cast<int>(s));
  const double s1 = (s0 - s_fixed) - mu0.sum();

  const Vec Mv = llt.solve(vf);
  const Vec M1 = llt.solve(Vec::Ones(nf));
  const double a1 = M1.dot(vf);
  const double a2 = M1.sum();
  if (a2 <= 0.0) return false;
  const double slack = R2 - s1 * s1 / a2;
  if (slack <= 0.0) return false;
  const double c1 = std::max(vf.dot(Mv) - a1 * a1 / a2, 0.0);

  Vec y(nf);
  if (c1 <= 1e-16) {
    y = (s1 / a2) * M1;
  } else {
    const double kappa = 0.5 * std::sqrt(c1 / slack);
    const double lambda = (a1 - 2.0 * kappa * s1) / a2;
    y = (Mv - lambda * M1) / (2.0 * kappa);
  }
  Vec x = x_fixed;
  for (int a = 0; a < nf; ++a) x(free_idx[static_cast<std::size_t>(a)]) = y(a) + mu0(a);
  *out = x;
  return true;
}

}  // namespace detail

// sup{ q'v : q = p + x, x in region, 0 <= q <= 1 } — the support of the true
// (simplex-clipped) uncertainty set around the nominal row p. Polytope
// variants solve the LP exactly; smooth variants run projected-gradient
// ascent with Dykstra projections plus an exact active-set polish. Two exact
// shortcuts cover the common cases: a proxy maximizer that already satisfies
// the box, and a box-only greedy optimum that already satisfies the region.
inline double support_simplex_constrained(const ConfidenceRegion& region, const Vec& p_nominal,
                                          const Vec& v) {
  const int n = region.dim();
  if (v.size() != n || p_nominal.size() != n)
    throw std::invalid_argument("support_simplex_constrained: dimension mismatch");
  if (!region.zero_sum())
    throw std::invalid_argument("support_simplex_constrained: region must be zero-sum");
  detail::check_distribution(p_nominal, "support_simplex_constrained");
  const double base = p_nominal.dot(v);
  if (region.degenerate() || n == 1) return base;

  const Vec lo = -p_nominal;
  const Vec hi = Vec::Ones(n) - p_nominal;
  const auto in_box = [&](const Vec& x, double tol) {
    for (int j = 0; j < n; ++j)
      if (x(j) < lo(j) - tol || x(j) > hi(j) + tol) return false;
    return true;
  };

  const SupportResult proxy = support(region, v);
  if (in_box(proxy.maximizer, 1e-12)) return base + proxy.value;

  if (region.is_polytope()) {
    detail::BoundedLp lp;
    if (region.kind() == ConfidenceRegion::Kind::l1_ball) {
      // Variables [x+, x-] >= 0, x = x+ - x-.
      lp.c = Vec(2 * n);
      lp.c << v, -v;
      lp.Aeq = Mat(1, 2 * n);
      lp.Aeq << Eigen::RowVectorXd::Ones(n), -Eigen::RowVectorXd::Ones(n);
      lp.beq = Vec::Zero(1);
      lp.Aub = Mat(1 + 2 * n, 2 * n);
      lp.bub = Vec(1 + 2 * n);
      lp.Aub.row(0).setOnes();
      lp.bub(0) = region.radius();
      lp.Aub.block(1, 0, n, n) = Mat::Identity(n, n);
      lp.Aub.block(1, n, n, n) = -Mat::Identity(n, n);
      lp.bub.segment(1, n) = hi;
      lp.Aub.block(1 + n, 0, n, n) = -Mat::Identity(n, n);
      lp.Aub.block(1 + n, n, n, n) = Mat::Identity(n, n);
      lp.bub.segment(1 + n, n) = -lo;
      lp.lo = Vec::Zero(2 * n);
      lp.hi = Vec::Constant(2 * n, std::numeric_limits<double>::infinity());
    } else {
      // Variables [a, b] >= 0, u = a - b, x = B^-1 u.
      const Mat& C = region.B_inverse();
      const Vec g = C.transpose() * Vec::Ones(n);
      const Vec cu = C.transpose() * v;
      lp.c = Vec(2 * n);
      lp.c << cu, -cu;
      lp.Aeq = Mat(1, 2 * n);
      lp.Aeq << g.transpose(), -g.transpose();
      lp.beq = Vec::Zero(1);
      lp.Aub = Mat(1 + 2 * n, 2 * n);
      lp.bub = Vec(1 + 2 * n);
      lp.Aub.row(0).setOnes();
      lp.bub(0) = 1.0;
      lp.Aub.block(1, 0, n, n) = C;
      lp.Aub.block(1, n, n, n) = -C;
      lp.bub.segment(1, n) = hi;
      lp.Aub.block(1 + n, 0, n, n) = -C;
      lp.Aub.block(1 + n, n, n, n) = C;
      lp.bub.segment(1 + n, n) = -lo;
      lp.lo = Vec::Zero(2 * n);
      lp.hi = Vec::Constant(2 * n, std::numeric_limits<double>::infinity());
    }
    const detail::LpSolution sol = detail::lp_maximize(lp);
    if (sol.status != detail::LpStatus::optimal)
      throw std::runtime_error("support_simplex_constrained: LP did not solve");
    return base + sol.value;
  }

  // Smooth variants. Box-only greedy optimum feasible in the region => exact.
  const Vec vbar = Vec(v.array() - v.mean());
  const Vec xg = detail::greedy_zero_sum_box_max(v, lo, hi);
  if (region.contains(xg, 1e-11)) return base + v.dot(xg);

  const Mat Q = region.kind() == ConfidenceRegion::Kind::l2_ball
                    ? Mat(Mat::Identity(n, n) / (region.radius() * region.radius()))
                    : region.A();
  const Vec w = Vec::Ones(n);
  const double scale = std::max(region.max_norm2(), 1e-12);
  const double vnorm = std::max(vbar.norm(), 1e-300);

  Vec x = detail::project_feasible_set(region, proxy.maximizer, lo, hi, w);
  double best = v.dot(x);
  Vec best_x = x;
  int stall = 0;
  // The gradient ascent only needs to identify the active constraints; the
  // exact slice solve below recovers the remaining digits.
  constexpr int kMaxIters = 2000;
  for (int t = 1; t <= kMaxIters; ++t) {
    const double eta = scale / (vnorm * std::sqrt(static_cast<double>(t)));
    const Vec next = detail::project_feasible_set(region, x + eta * vbar, lo, hi, w);
    const double val = v.dot(next);
    if (val > best + 1e-13 * std::max(1.0, std::abs(best))) {
      best = val;
      best_x = next;
      stall = 0;
    } else {
      ++stall;
    }
    const double move = (next - x).norm();
    x = next;
    if (stall > 60 || move <= 1e-12 * scale) break;
  }
  best_x = detail::project_feasible_set(region, best_x, lo, hi, w);
  best = v.dot(best_x);

  // Active-set polish: fix coordinates that sit on the box, solve the
  // remaining quadratic slice exactly, and accept feasible improvements.
  Vec x_aspoint = best_x;
  for (int round = 0; round < n; ++round) {
    std::vector<int> free_idx;
    Vec x_fixed = Vec::Zero(n);
    const double near = 1e-7 * std::max(1.0, scale);
    for (int j = 0; j < n; ++j) {
      if (x_aspoint(j) <= lo(j) + near)
        x_fixed(j) = lo(j);
      else if (x_aspoint(j) >= hi(j) - near)
        x_fixed(j) = hi(j);
      else
        free_idx.push_back(j);
    }
    Vec cand;
    if (!detail::quadratic_slice_max(Q, v, free_idx, x_fixed, 0.0, &cand)) break;
    bool box_ok = in_box(cand, 1e-9);
    if (box_ok && cand.dot(Q * cand) <= 1.0 + 1e-9) {
      const double val = v.dot(cand);
      if (val > best) {
        best = val;
        best_x = cand;
      }
      break;
    }
    if (!box_ok) {
      x_aspoint = cand.cwiseMax(lo).cwiseMin(hi);  // clamp and re-derive the active set
      continue;
    }
    break;
  }
  return base + best;
}

// mu = Phi' y where y maximizes the support at v = Phi theta; equals the
// gradient of theta -> sigma(Phi theta) wherever that map is differentiable,
// with the kink at centered v = 0 pinned to 0 via the maximizer convention.
inline Vec support_gradient_mu(const ConfidenceRegion& region, const Mat& features,
                               const Vec& theta) {
  if (features.rows() != region.dim())
    throw std::invalid_argument("support_gradient_mu: feature rows must match region dimension");
  if (features.cols() != theta.size())
    throw std::invalid_argument("support_gradient_mu: theta length must match feature columns");
  const SupportResult s = support(region, features * theta);
  return features.transpose() * s.maximizer;
}

// Norm selector for beta_estimate: plain l1 distance, or the xi-weighted
// Euclidean distance divided by min(xi) used by the projected-contraction
// diagnostics.
struct BetaNorm {
  enum class Kind { l1, xi_weighted };
  Kind kind = Kind::l1;
  Vec xi;

  static BetaNorm l1() { return BetaNorm{}; }
  static BetaNorm xi_weighted(Vec xi) {
    BetaNorm b;
    b.kind = Kind::xi_weighted;
    b.xi = std::move(xi);
    return b;
  }
};

namespace detail {

// Exact min ||y - x||_1 over region ∩ box ∩ zero-sum for polytope regions:
// one LP in [x, t, auxiliary region variables].
inline double l1_distance_lp(const ConfidenceRegion& region, const Vec& p, const Vec& y) {
  const int n = region.dim();
  const Vec lo = -p;
  const Vec hi = Vec::Ones(n) - p;
  const double inf = std::numeric_limits<double>::infinity();
  const bool l1 = region.kind() == ConfidenceRegion::Kind::l1_ball;
  // Variables: x (n, boxed), t (n, >= 0), s (n, >= 0): s majorizes |x| for
  // the l1 region, or u-split pair (a,b >= 0) with Bx = a - b for the
  // parallelepiped.
  const int nv = l1 ? 3 * n : 4 * n;
  BoundedLp lp;
  lp.c = VectorXd::Zero(nv);
  lp.c.segment(n, n).setConstant(-1.0);  // maximize -sum t
  lp.lo = VectorXd::Constant(nv, 0.0);
  lp.lo.head(n) = lo;
  lp.hi = VectorXd::Constant(nv, inf);
  lp.hi.head(n) = hi;

  std::vector<Eigen::RowVectorXd> ub_rows;
  std::vector<double> ub_b;
  const auto add_ub = [&](const Eigen::RowVectorXd& r, double b) {
    ub_rows.push_back(r);
    ub_b.push_back(b);
  };
  // |x - y| <= t.
  for (int j = 0; j < n; ++j) {
    Eigen::RowVectorXd r1 = Eigen::RowVectorXd::Zero(nv);
    r1(j) = 1.0;
    r1(n + j) = -1.0;
    add_ub(r1, y(j));
    Eigen::RowVectorXd r2 = Eigen::RowVectorXd::Zero(nv);
    r2(j) = -1.0;
    r2(n + j) = -1.0;
    add_ub(r2, -y(j));
  }
  std::vector<Eigen::RowVectorXd> eq_rows;
  std::vector<double> eq_b;
  Eigen::RowVectorXd sum_row = Eigen::RowVectorXd::Zero(nv);
  sum_row.head(n).setOnes();
  eq_rows.push_back(sum_row);
  eq_b.push_back(0.0);

  if (l1) {
    // -s <= x <= s, sum s <= r.
    for (int j = 0; j < n; ++j) {
      Eigen::RowVectorXd r1 = Eigen::RowVectorXd::Zero(nv);
      r1(j) = 1.0;
      r1(2 * n + j) = -1.0;
      add_ub(r1, 0.0);
      Eigen::RowVectorXd r2 = Eigen::RowVectorXd::Zero(nv);
      r2(j) = -1.0;
      r2(2 * n + j) = -1.0;
      add_ub(r2, 0.0);
    }
    Eigen::RowVectorXd rs = Eigen::RowVectorXd::Zero(nv);
    rs.segment(2 * n, n).setOnes();
    add_ub(rs, region.radius());
  } else {
    // Bx = a - b, sum(a + b) <= 1.
    const Mat& B = region.B();
    for (int i = 0; i < n; ++i) {
      Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(nv);
      r.head(n) = B.row(i);
      r(2 * n + i) = -1.0;
      r(3 * n + i) = 1.0;
      eq_rows.push_back(r);
      eq_b.push_back(0.0);
    }
    Eigen::RowVectorXd rs = Eigen::RowVectorXd::Zero(nv);
    rs.segment(2 * n, 2 * n).setOnes();
    add_ub(rs, 1.0);
  }

  lp.Aub = MatrixXd(static_cast<int>(ub_rows.size()), nv);
  lp.bub = VectorXd(static_cast<int>(ub_rows.size()));
  for (std::size_t r = 0; r < ub_rows.size(); ++r) {
    lp.Aub.row(static_cast<int>(r)) = ub_rows[r];
    lp.bub(static_cast<int>(r)) = ub_b[r];
  }
  lp.Aeq = MatrixXd(static_cast<int>(eq_rows.size()), nv);
  lp.beq = VectorXd(static_cast<int>(eq_rows.size()));
  for (std::size_t r = 0; r < eq_rows.size(); ++r) {
    lp.Aeq.row(static_cast<int>(r)) = eq_rows[r];
    lp.beq(static_cast<int>(r)) = eq_b[r];
  }
  const LpSolution sol = lp_maximize(lp);
  if (sol.status != LpStatus::optimal)
    throw std::runtime_error("beta_estimate: inner distance LP did not solve");
  return -sol.value;
}

}  // namespace detail

// Sampling estimate of beta = max_{y in proxy} min_{x in true set} ||y - x||:
// candidate boundary points of the proxy (exact vertex lists for the polytope
// variants at desk scale, support maximizers of random zero-sum directions
// otherwise), inner minimum by exact LP (l1 norm, polytope region) or
// projection onto the intersection (Dykstra, tol 1e-9). Returns exactly 0
// when coordinate-wise support values certify that the proxy set already
// satisfies the box, i.e. the true and proxy sets coincide. The sampled value
// never exceeds the true max over the candidate set; it is a lower-bounding
// diagnostic, not part of any update rule.
inline double beta_estimate(const ConfidenceRegion& region, const Vec& p_nominal, int samples,
                            Rng& rng, const BetaNorm& norm = BetaNorm::l1()) {
  const int n = region.dim();
  if (p_nominal.size() != n) throw std::invalid_argument("beta_estimate: dimension mismatch");
  if (!region.zero_sum()) throw std::invalid_argument("beta_estimate: region must be zero-sum");
  detail::check_distribution(p_nominal, "beta_estimate");
  if (region.degenerate() || n == 1) return 0.0;
  Vec w = Vec::Ones(n);
  double norm_div = 1.0;
  if (norm.kind == BetaNorm::Kind::xi_weighted) {
    if (norm.xi.size() != n) throw std::invalid_argument("beta_estimate: xi dimension mismatch");
    if (norm.xi.minCoeff() <= 0.0)
      throw std::invalid_argument("beta_estimate: xi must be strictly positive");
    w = norm.xi;
    norm_div = norm.xi.minCoeff();
  }

  // Inclusion certificate: by central symmetry, max/min of x_j over the proxy
  // are +-support(e_j).
  bool included = true;
  for (int j = 0; j < n && included; ++j) {
    Vec ej = Vec::Zero(n);
    ej(j) = 1.0;
    const double sj = support(region, ej).value;
    if (sj > p_nominal(j) + 1e-12 || sj > 1.0 - p_nominal(j) + 1e-12) included = false;
  }
  if (included) return 0.0;

  std::vector<Vec> candidates;
  if (region.kind() == ConfidenceRegion::Kind::l1_ball && n <= 64) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        Vec y = Vec::Zero(n);
        y(i) = 0.5 * region.radius();
        y(j) = -0.5 * region.radius();
        candidates.push_back(y);
      }
  } else if (region.kind() == ConfidenceRegion::Kind::parallelepiped && n <= 64) {
    for (const Vec& u : region.cross_polytope_vertices_())
      candidates.push_back(region.B_inverse() * u);
  } else {
    for (int k = 0; k < samples; ++k) {
      Vec d(n);
      for (int j = 0; j < n; ++j) d(j) = rng.normal();
      d.array() -= d.mean();
      if (d.norm() <= 1e-12) continue;
      candidates.push_back(support(region, d).maximizer);
    }
  }

  const Vec lo = -p_nominal;
  const Vec hi = Vec::Ones(n) - p_nominal;
  double beta = 0.0;
  for (const Vec& y : candidates) {
    double dist;
    if (norm.kind == BetaNorm::Kind::l1 && region.is_polytope()) {
      dist = detail::l1_distance_lp(region, p_nominal, y);
    } else {
      const Vec x = detail::project_feasible_set(region, y, lo, hi, w, 1e-9);
      if (norm.kind == BetaNorm::Kind::l1)
        dist = (y - x).cwiseAbs().sum();
      else
        dist = std::sqrt((y - x).array().square().matrix().dot(w)) / norm_div;
    }
    beta = std::max(beta, dist);
  }
  return beta;
}

// Suboptimality bound for proxy-set robust Q-iteration: eps = tb/(1-t(1+b)).
inline double epsilon_bound_q(double discount, double beta) {
  if (!(beta >= 0.0)) throw std::invalid_argument("epsilon_bound_q: beta must be nonnegative");
  if (!(discount * (1.0 + beta) < 1.0))
    throw std::invalid_argument("epsilon_bound_q: discount too large for this beta");
  return discount * beta / (1.0 - discount * (1.0 + beta));
}

// Trace-mass constant for regular TD(lambda): rho = tl/(1-tl).
inline double rho_regular_td(double discount, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("rho_regular_td: lambda must lie in [0,1]");
  const double tl = discount * lambda;
  if (!(tl < 1.0)) throw std::invalid_argument("rho_regular_td: discount*lambda must be below 1");
  return tl / (1.0 - tl);
}

// Suboptimality bound for proxy-set robust TD(lambda).
inline double epsilon_bound_td(double discount, double beta, double rho) {
  if (!(beta >= 0.0)) throw std::invalid_argument("epsilon_bound_td: beta must be nonnegative");
  if (!(rho >= 0.0)) throw std::invalid_argument("epsilon_bound_td: rho must be nonnegative");
  if (!(discount * (1.0 + rho * beta) < 1.0))
    throw std::invalid_argument("epsilon_bound_td: discount too large for this beta");
  return discount * beta / (1.0 - discount * (1.0 + rho * beta));
}

inline nlohmann::json region_to_json(const ConfidenceRegion& region) {
  nlohmann::json j;
  switch (region.kind()) {
    case ConfidenceRegion::Kind::l2_ball:
      j["kind"] = "l2";
      j["radius"] = region.radius();
      break;
    case ConfidenceRegion::Kind::l1_ball:
      j["kind"] = "l1";
      j["radius"] = region.radius();
      break;
    case ConfidenceRegion::Kind::ellipsoid: {
      j["kind"] = "ellipsoid";
      std::vector<double> m;
      for (int r = 0; r < region.dim(); ++r)
        for (int c = 0; c < region.dim(); ++c) m.push_back(region.A()(r, c));
      j["matrix"] = m;
      break;
    }
    case ConfidenceRegion::Kind::parallelepiped: {
      j["kind"] = "parallelepiped";
      std::vector<double> m;
      for (int r = 0; r < region.dim(); ++r)
        for (int c = 0; c < region.dim(); ++c) m.push_back(region.B()(r, c));
      j["matrix"] = m;
      break;
    }
  }
  return j;
}

inline ConfidenceRegion region_from_json(const nlohmann::json& j, int dim) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "l2" || kind == "l1") {
    if (!j.contains("radius") || !j.at("radius").is_number())
      throw std::invalid_argument("region json: 'radius' required for ball kinds");
    const double r = j.at("radius").get<double>();
    return kind == "l2" ? ConfidenceRegion::l2_ball(dim, r) : ConfidenceRegion::l1_ball(dim, r);
  }
  if (kind == "ellipsoid" || kind == "parallelepiped") {
    if (!j.contains("matrix") || !j.at("matrix").is_array() ||
        j.at("matrix").size() != static_cast<std::size_t>(dim) * dim)
      throw std::invalid_argument("region json: 'matrix' must hold dim*dim row-major numbers");
    Mat M(dim, dim);
    for (int r = 0; r < dim; ++r)
      for (int c = 0; c < dim; ++c)
        M(r, c) = j.at("matrix").at(static_cast<std::size_t>(r) * dim + c).get<double>();
    return kind == "ellipsoid" ? ConfidenceRegion::ellipsoid(M)
                               : ConfidenceRegion::parallelepiped(M);
  }
  throw std::invalid_argument("region json: unknown kind '" + kind + "'");
}

}  // namespace rrl
