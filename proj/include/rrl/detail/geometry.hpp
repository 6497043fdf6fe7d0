#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

// Exact projections onto the building-block sets of the uncertainty module
// (optionally in a diagonally weighted metric), a Dykstra combiner for
// intersections, and the greedy transport solve for linear objectives over
// {box, zero-sum}. All deterministic.

namespace rrl::detail {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// argmin_x sum_j w_j (x_j - z_j)^2  s.t.  g'x = t, lo <= x <= hi.
// Water-filling: x(lam) = clip(z - lam g / w), with g'x(lam) nonincreasing.
inline VectorXd project_box_hyperplane(const VectorXd& z, const VectorXd& lo, const VectorXd& hi,
                                       const VectorXd& g, double t, const VectorXd& w) {
  const int n = static_cast<int>(z.size());
  const auto x_of = [&](double lam) {
    VectorXd x(n);
    for (int j = 0; j < n; ++j)
      x(j) = std::clamp(z(j) - lam * g(j) / w(j), lo(j), hi(j));
    return x;
  };
  const auto dot_of = [&](double lam) { return g.dot(x_of(lam)); };

  double lam_lo = -1.0, lam_hi = 1.0;
  for (int k = 0; k < 200 && dot_of(lam_lo) < t; ++k) lam_lo *= 2.0;
  for (int k = 0; k < 200 && dot_of(lam_hi) > t; ++k) lam_hi *= 2.0;
  if (dot_of(lam_lo) < t || dot_of(lam_hi) > t)
    throw std::invalid_argument("project_box_hyperplane: target outside the feasible range");
  for (int k = 0; k < 200; ++k) {
    const double mid = 0.5 * (lam_lo + lam_hi);
    if (dot_of(mid) >= t)
      lam_lo = mid;
    else
      lam_hi = mid;
  }
  return x_of(0.5 * (lam_lo + lam_hi));
}

// Projection onto {||x||_2 <= r} ∩ [lo, hi] ∩ {g'x = t} in the w-metric.
// With the ball multiplier m fixed, the remaining problem is a plain
// box-hyperplane projection of (w.*z)/(w+m) in the (w+m)-metric; m is
// bisected to complementarity. Requires a point with g'x = t inside the box
// (our boxes always admit x = 0). The returned iterate sits on the ball's
// feasible side of the bracket.
inline VectorXd project_ball_box_hyperplane(const VectorXd& z, double r, const VectorXd& lo,
                                            const VectorXd& hi, const VectorXd& g, double t,
                                            const VectorXd& w) {
  const auto solve = [&](double m) {
    const VectorXd wm = VectorXd(w.array() + m);
    const VectorXd ym = VectorXd(w.array() * z.array() / wm.array());
    return project_box_hyperplane(ym, lo, hi, g, t, wm);
  };
  VectorXd x = solve(0.0);
  if (x.norm() <= r) return x;
  double m_lo = 0.0;
  double m_hi = 1.0;
  for (int k = 0; k < 200 && solve(m_hi).norm() > r; ++k) {
    m_lo = m_hi;
    m_hi *= 2.0;
  }
  for (int k = 0; k < 80; ++k) {
    const double mid = 0.5 * (m_lo + m_hi);
    if (solve(mid).norm() > r)
      m_lo = mid;
    else
      m_hi = mid;
  }
  return solve(m_hi);
}

// argmin_x sum_j w_j (x_j - z_j)^2  s.t.  ||x||_2 <= r.
inline VectorXd project_l2_ball_weighted(const VectorXd& z, double r, const VectorXd& w) {
  if (z.norm() <= r) return z;
  if (r == 0.0) return VectorXd::Zero(z.size());
  const auto norm_of = [&](double k) {
    double s = 0.0;
    for (int j = 0; j < z.size(); ++j) {
      const double xj = w(j) * z(j) / (w(j) + k);
      s += xj * xj;
    }
    return std::sqrt(s);
  };
  double k_lo = 0.0, k_hi = 1.0;
  for (int it = 0; it < 200 && norm_of(k_hi) > r; ++it) k_hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (k_lo + k_hi);
    if (norm_of(mid) > r)
      k_lo = mid;
    else
      k_hi = mid;
  }
  const double k = 0.5 * (k_lo + k_hi);
  VectorXd x(z.size());
  for (int j = 0; j < z.size(); ++j) x(j) = w(j) * z(j) / (w(j) + k);
  return x;
}

// argmin_x sum_j w_j (x_j - z_j)^2  s.t.  ||x||_1 <= r. Soft-threshold water-filling.
inline VectorXd project_l1_ball_weighted(const VectorXd& z, double r, const VectorXd& w) {
  if (z.cwiseAbs().sum() <= r) return z;
  if (r == 0.0) return VectorXd::Zero(z.size());
  const auto mass_of = [&](double tau) {
    double s = 0.0;
    for (int j = 0; j < z.size(); ++j) s += std::max(std::abs(z(j)) - tau / (2.0 * w(j)), 0.0);
    return s;
  };
  double t_lo = 0.0, t_hi = 1.0;
  for (int it = 0; it < 200 && mass_of(t_hi) > r; ++it) t_hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (t_lo + t_hi);
    if (mass_of(mid) > r)
      t_lo = mid;
    else
      t_hi = mid;
  }
  const double tau = 0.5 * (t_lo + t_hi);
  VectorXd x(z.size());
  for (int j = 0; j < z.size(); ++j) {
    const double m = std::max(std::abs(z(j)) - tau / (2.0 * w(j)), 0.0);
    x(j) = z(j) >= 0.0 ? m : -m;
  }
  return x;
}

// argmin_x sum_j w_j (x_j - z_j)^2  s.t.  x'Qx <= 1, for SPD Q. Secular
// equation on the shift k, solved in the eigenbasis of the scaled matrix.
inline VectorXd project_quadratic_weighted(const VectorXd& z, const MatrixXd& Q, const VectorXd& w) {
  if (z.dot(Q * z) <= 1.0) return z;
  const int n = static_cast<int>(z.size());
  const VectorXd ws = w.cwiseSqrt();
  MatrixXd Qt(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) Qt(i, j) = Q(i, j) / (ws(i) * ws(j));
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(Qt);
  const VectorXd lam = eig.eigenvalues();
  const VectorXd zt = eig.eigenvectors().transpose() * z.cwiseProduct(ws);
  const auto quad_of = [&](double k) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      const double num = zt(j) / (1.0 + k * lam(j));
      s += lam(j) * num * num;
    }
    return s;
  };
  double k_lo = 0.0, k_hi = 1.0;
  for (int it = 0; it < 400 && quad_of(k_hi) > 1.0; ++it) k_hi *= 2.0;
  for (int it = 0; it < 300; ++it) {
    const double mid = 0.5 * (k_lo + k_hi);
    if (quad_of(mid) > 1.0)
      k_lo = mid;
    else
      k_hi = mid;
  }
  const double k = 0.5 * (k_lo + k_hi);
  VectorXd xt(n);
  for (int j = 0; j < n; ++j) xt(j) = zt(j) / (1.0 + k * lam(j));
  return (eig.eigenvectors() * xt).cwiseQuotient(ws);
}

// argmin_x sum_j w_j (x_j - z_j)^2  s.t.  ||B x||_1 <= 1, via projected
// gradient on u = Bx (strongly convex, exact l1 projection each step).
inline VectorXd project_parallelepiped_weighted(const VectorXd& z, const MatrixXd& B,
                                                const MatrixXd& B_inv, const VectorXd& w) {
  VectorXd u = B * z;
  if (u.cwiseAbs().sum() <= 1.0) return z;
  const MatrixXd C = B_inv;
  const MatrixXd H = 2.0 * C.transpose() * w.asDiagonal() * C;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(H);
  const double L = eig.eigenvalues().maxCoeff();
  const double step = 1.0 / L;
  const VectorXd ones = VectorXd::Ones(z.size());
  u = project_l1_ball_weighted(u, 1.0, ones);
  for (int it = 0; it < 50000; ++it) {
    const VectorXd grad = H * u - 2.0 * C.transpose() * w.cwiseProduct(z);
    const VectorXd next = project_l1_ball_weighted(u - step * grad, 1.0, ones);
    const double move = (next - u).norm();
    u = next;
    if (move <= 1e-13 * std::max(1.0, u.norm())) break;
  }
  return C * u;
}

// Dykstra's alternating projections onto the intersection of the given sets.
// Each callback must be an exact projection in the same weighted metric.
inline VectorXd dykstra_project(const VectorXd& z,
                                const std::vector<std::function<VectorXd(const VectorXd&)>>& projs,
                                double tol = 1e-10, int max_cycles = 20000) {
  VectorXd x = z;
  std::vector<VectorXd> corr(projs.size(), VectorXd::Zero(z.size()));
  for (int cycle = 0; cycle < max_cycles; ++cycle) {
    const VectorXd before = x;
    for (std::size_t s = 0; s < projs.size(); ++s) {
      const VectorXd y = projs[s](x + corr[s]);
      corr[s] = x + corr[s] - y;
      x = y;
    }
    if ((x - before).norm() <= tol) break;
  }
  return x;
}

// argmax v'x  s.t.  sum x = 0, lo <= x <= hi (with lo <= 0 <= hi): greedy
// transport from low-value donors to high-value recipients, exact LP optimum.
inline VectorXd greedy_zero_sum_box_max(const VectorXd& v, const VectorXd& lo, const VectorXd& hi) {
  const int n = static_cast<int>(v.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (v(a) != v(b)) return v(a) > v(b);
    return a < b;
  });
  VectorXd x = VectorXd::Zero(n);
  int r = 0, d = n - 1;
  double r_cap = hi(order[static_cast<std::size_t>(r)]);
  double d_cap = -lo(order[static_cast<std::size_t>(d)]);
  while (r < d) {
    const int ri = order[static_cast<std::size_t>(r)];
    const int di = order[static_cast<std::size_t>(d)];
    if (!(v(ri) > v(di))) break;
    const double m = std::min(r_cap, d_cap);
    x(ri) += m;
    x(di) -= m;
    r_cap -= m;
    d_cap -= m;
    if (r_cap <= 0.0) {
      ++r;
      if (r < n) r_cap = hi(order[static_cast<std::size_t>(r)]);
    }
    if (d_cap <= 0.0) {
      --d;
      if (d >= 0) d_cap = -lo(order[static_cast<std::size_t>(d)]);
    }
  }
  return x;
}

}  // namespace rrl::detail
