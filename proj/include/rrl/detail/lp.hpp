#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

// Dense two-phase primal simplex, sized for the desk-scale linear programs
// that back the polytope support functions (tens of variables). Bland's rule
// keeps it finite under degeneracy; everything is deterministic.

namespace rrl::detail {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class LpStatus { optimal, infeasible, unbounded };

struct LpSolution {
  LpStatus status = LpStatus::infeasible;
  double value = 0.0;
  VectorXd x;
};

// min c'z  s.t.  A z = b, z >= 0, via full-tableau two-phase simplex.
inline LpSolution simplex_standard(MatrixXd A, VectorXd b, VectorXd c) {
  const int m = static_cast<int>(A.rows());
  const int n = static_cast<int>(A.cols());
  constexpr double kTol = 1e-9;

  for (int i = 0; i < m; ++i)
    if (b(i) < 0.0) {
      A.row(i) = -A.row(i);
      b(i) = -b(i);
    }

  // Tableau holds [B^-1 A | B^-1 artificials | B^-1 b]; artificials seed the basis.
  MatrixXd T(m, n + m + 1);
  T.leftCols(n) = A;
  T.block(0, n, m, m) = MatrixXd::Identity(m, m);
  T.col(n + m) = b;
  std::vector<int> basis(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) basis[static_cast<std::size_t>(i)] = n + i;

  const auto pivot = [&](int row, int col) {
    T.row(row) /= T(row, col);
    for (int i = 0; i < m; ++i) {
      if (i == row) continue;
      const double f = T(i, col);
      if (f != 0.0) T.row(i) -= f * T.row(row);
    }
    basis[static_cast<std::size_t>(row)] = col;
  };

  // One simplex phase over the objective `obj` (length n+m), columns < limit.
  const auto run_phase = [&](const VectorXd& obj, int limit) -> bool {
    const long max_iters = 2000L * (m + n + 4);
    for (long it = 0; it < max_iters; ++it) {
      int enter = -1;
      for (int j = 0; j < limit; ++j) {  // Bland: first improving column
        double r = obj(j);
        for (int i = 0; i < m; ++i) r -= obj(basis[static_cast<std::size_t>(i)]) * T(i, j);
        if (r < -kTol) {
          enter = j;
          break;
        }
      }
      if (enter < 0) return true;  // optimal for this phase
      int leave = -1;
      double best_ratio = std::numeric_limits<double>::infinity();
      for (int i = 0; i < m; ++i) {
        if (T(i, enter) > kTol) {
          const double ratio = T(i, n + m) / T(i, enter);
          if (ratio < best_ratio - 1e-12 ||
              (ratio < best_ratio + 1e-12 &&
               (leave < 0 || basis[static_cast<std::size_t>(i)] <
                                 basis[static_cast<std::size_t>(leave)]))) {
            best_ratio = ratio;
            leave = i;
          }
        }
      }
      if (leave < 0) return false;  // unbounded direction
      pivot(leave, enter);
    }
    throw std::runtime_error("simplex: iteration cap hit");
  };

  // Phase 1: minimize the artificial mass.
  VectorXd obj1 = VectorXd::Zero(n + m);
  obj1.tail(m).setOnes();
  if (!run_phase(obj1, n + m)) throw std::runtime_error("simplex: phase 1 unbounded");
  double art_mass = 0.0;
  for (int i = 0; i < m; ++i)
    if (basis[static_cast<std::size_t>(i)] >= n) art_mass += T(i, n + m);
  if (art_mass > 1e-7) {
    LpSolution sol;
    sol.status = LpStatus::infeasible;
    return sol;
  }
  // Drive leftover artificials out of the basis where possible.
  for (int i = 0; i < m; ++i) {
    if (basis[static_cast<std::size_t>(i)] < n) continue;
    int col = -1;
    for (int j = 0; j < n; ++j)
      if (std::abs(T(i, j)) > kTol) {
        col = j;
        break;
      }
    if (col >= 0) pivot(i, col);
    // else: redundant row; the artificial stays basic at level ~0, harmless.
  }

  // Phase 2 over the real objective; artificial columns are frozen out.
  VectorXd obj2 = VectorXd::Zero(n + m);
  obj2.head(n) = c;
  if (!run_phase(obj2, n)) {
    LpSolution sol;
    sol.status = LpStatus::unbounded;
    return sol;
  }

  LpSolution sol;
  sol.status = LpStatus::optimal;
  sol.x = VectorXd::Zero(n);
  for (int i = 0; i < m; ++i)
    if (basis[static_cast<std::size_t>(i)] < n) sol.x(basis[static_cast<std::size_t>(i)]) = T(i, n + m);
  sol.value = c.dot(sol.x);
  return sol;
}

// General-form wrapper:  max c'x  s.t.  Aeq x = beq, Aub x <= bub, lo <= x <= hi.
// Bound entries may be +-infinity. Empty constraint blocks are allowed.
struct BoundedLp {
  VectorXd c;
  MatrixXd Aeq;  // may have 0 rows
  VectorXd beq;
  MatrixXd Aub;  // may have 0 rows
  VectorXd bub;
  VectorXd lo;
  VectorXd hi;
};

inline LpSolution lp_maximize(const BoundedLp& p) {
  const int n = static_cast<int>(p.c.size());
  const double inf = std::numeric_limits<double>::infinity();

  // Shift/split variables to nonnegative ones. col(j) gives the transformed
  // column(s) of x_j: x = off + sign * z_col (and a second negated column for
  // free variables).
  struct VarMap {
    int col = -1;
    int neg_col = -1;  // for free variables, x = z_col - z_neg
    double offset = 0.0;
    double sign = 1.0;
  };
  std::vector<VarMap> vmap(static_cast<std::size_t>(n));
  int cols = 0;
  std::vector<std::pair<int, double>> upper_rows;  // z_col <= bound
  for (int j = 0; j < n; ++j) {
    VarMap& vm = vmap[static_cast<std::size_t>(j)];
    const double lo = p.lo(j), hi = p.hi(j);
    if (lo > hi) {
      LpSolution sol;
      sol.status = LpStatus::infeasible;
      return sol;
    }
    if (lo > -inf) {
      vm.col = cols++;
      vm.offset = lo;
      vm.sign = 1.0;
      if (hi < inf) upper_rows.push_back({vm.col, hi - lo});
    } else if (hi < inf) {
      vm.col = cols++;
      vm.offset = hi;
      vm.sign = -1.0;
    } else {
      vm.col = cols++;
      vm.neg_col = cols++;
    }
  }

  const int meq = static_cast<int>(p.Aeq.rows());
  const int mub = static_cast<int>(p.Aub.rows());
  const int mbox = static_cast<int>(upper_rows.size());
  const int rows = meq + mub + mbox;
  const int slacks = mub + mbox;
  MatrixXd A = MatrixXd::Zero(rows, cols + slacks);
  VectorXd b = VectorXd::Zero(rows);
  VectorXd cost = VectorXd::Zero(cols + slacks);

  const auto scatter = [&](int row, const Eigen::RowVectorXd& arow, double rhs) {
    double shift = rhs;
    for (int j = 0; j < n; ++j) {
      const VarMap& vm = vmap[static_cast<std::size_t>(j)];
      const double aj = arow(j);
      if (aj == 0.0) continue;
      shift -= aj * vm.offset;
      A(row, vm.col) += aj * vm.sign;
      if (vm.neg_col >= 0) A(row, vm.neg_col) -= aj;
    }
    b(row) = shift;
  };

  for (int r = 0; r < meq; ++r) scatter(r, p.Aeq.row(r), p.beq(r));
  for (int r = 0; r < mub; ++r) {
    scatter(meq + r, p.Aub.row(r), p.bub(r));
    A(meq + r, cols + r) = 1.0;
  }
  for (int r = 0; r < mbox; ++r) {
    const int row = meq + mub + r;
    A(row, upper_rows[static_cast<std::size_t>(r)].first) = 1.0;
    A(row, cols + mub + r) = 1.0;
    b(row) = upper_rows[static_cast<std::size_t>(r)].second;
  }
  for (int j = 0; j < n; ++j) {
    const VarMap& vm = vmap[static_cast<std::size_t>(j)];
    cost(vm.col) -= p.c(j) * vm.sign;  // minimize -c'x
    if (vm.neg_col >= 0) cost(vm.neg_col) += p.c(j);
  }

  LpSolution inner = simplex_standard(A, b, cost);
  if (inner.status != LpStatus::optimal) return inner;

  LpSolution sol;
  sol.status = LpStatus::optimal;
  sol.x = VectorXd::Zero(n);
  for (int j = 0; j < n; ++j) {
    const VarMap& vm = vmap[static_cast<std::size_t>(j)];
    double z = inner.x(vm.col) * vm.sign + vm.offset;
    if (vm.neg_col >= 0) z -= inner.x(vm.neg_col);
    sol.x(j) = z;
  }
  sol.value = p.c.dot(sol.x);
  return sol;
}

}  // namespace rrl::detail
