#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "rrl/detail/lp.hpp"
#include "rrl/rng.hpp"

using namespace rrl::detail;
using rrl::Rng;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Exact oracle for 2-d problems: enumerate all pairwise intersections of the
// constraint lines (box faces and inequality rows), keep feasible points,
// take the best objective. Valid for bounded nondegenerate instances.
struct Line {
  double a0, a1, b;  // a0 x + a1 y <= b
};

double oracle_max_2d(const Eigen::Vector2d& c, const std::vector<Line>& lines, bool* feasible) {
  const auto ok = [&](double x, double y) {
    for (const Line& l : lines)
      if (l.a0 * x + l.a1 * y > l.b + 1e-9) return false;
    return true;
  };
  double best = -kInf;
  for (std::size_t i = 0; i < lines.size(); ++i)
    for (std::size_t j = i + 1; j < lines.size(); ++j) {
      const double det = lines[i].a0 * lines[j].a1 - lines[i].a1 * lines[j].a0;
      if (std::abs(det) < 1e-12) continue;
      const double x = (lines[i].b * lines[j].a1 - lines[i].a1 * lines[j].b) / det;
      const double y = (lines[i].a0 * lines[j].b - lines[i].b * lines[j].a0) / det;
      if (ok(x, y)) best = std::max(best, c(0) * x + c(1) * y);
    }
  *feasible = best > -kInf;
  return best;
}

}  // namespace

TEST_CASE("standard-form simplex solves a hand-checked program") {
  // max 3x + 2y s.t. x + y <= 4, x + 3y <= 6, x,y >= 0; optimum (4,0) = 12.
  MatrixXd A(2, 4);
  A << 1, 1, 1, 0, 1, 3, 0, 1;
  VectorXd b(2);
  b << 4, 6;
  VectorXd c(4);
  c << -3, -2, 0, 0;
  const LpSolution sol = simplex_standard(A, b, c);
  REQUIRE(sol.status == LpStatus::optimal);
  REQUIRE(sol.value == Catch::Approx(-12.0).margin(1e-9));
  REQUIRE(sol.x(0) == Catch::Approx(4.0).margin(1e-9));
  REQUIRE(sol.x(1) == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("standard-form simplex flags infeasible and unbounded programs") {
  SECTION("infeasible") {
    // x1 + x2 = 1 and x1 + x2 = 3 cannot both hold.
    MatrixXd A(2, 2);
    A << 1, 1, 1, 1;
    VectorXd b(2);
    b << 1, 3;
    VectorXd c = VectorXd::Zero(2);
    REQUIRE(simplex_standard(A, b, c).status == LpStatus::infeasible);
  }
  SECTION("unbounded") {
    // min -x1 with x1 - x2 = 0: both can grow without bound.
    MatrixXd A(1, 2);
    A << 1, -1;
    VectorXd b = VectorXd::Zero(1);
    VectorXd c(2);
    c << -1, 0;
    REQUIRE(simplex_standard(A, b, c).status == LpStatus::unbounded);
  }
}

TEST_CASE("standard-form simplex tolerates redundant rows") {
  // Duplicate constraint rows leave a zero-level artificial basic.
  MatrixXd A(3, 3);
  A << 1, 1, 1, 1, 1, 1, 1, 2, 0;
  VectorXd b(3);
  b << 1, 1, 1.5;
  VectorXd c(3);
  c << -1, -1, 0;
  const LpSolution sol = simplex_standard(A, b, c);
  REQUIRE(sol.status == LpStatus::optimal);
  REQUIRE(sol.value == Catch::Approx(-1.0).margin(1e-9));
}

TEST_CASE("bounded-form wrapper handles boxes, equalities, and free variables") {
  SECTION("box plus equality") {
    // max x + 2y s.t. x + y = 1, 0 <= x,y <= 0.75; optimum (0.25, 0.75).
    BoundedLp p;
    p.c = VectorXd(2);
    p.c << 1, 2;
    p.Aeq = MatrixXd(1, 2);
    p.Aeq << 1, 1;
    p.beq = VectorXd::Constant(1, 1.0);
    p.Aub = MatrixXd(0, 2);
    p.bub = VectorXd(0);
    p.lo = VectorXd::Zero(2);
    p.hi = VectorXd::Constant(2, 0.75);
    const LpSolution sol = lp_maximize(p);
    REQUIRE(sol.status == LpStatus::optimal);
    REQUIRE(sol.value == Catch::Approx(1.75).margin(1e-9));
    REQUIRE(sol.x(0) == Catch::Approx(0.25).margin(1e-9));
    REQUIRE(sol.x(1) == Catch::Approx(0.75).margin(1e-9));
  }
  SECTION("free variable pushed against an inequality") {
    // max x s.t. x <= 5 with x unbounded below.
    BoundedLp p;
    p.c = VectorXd::Constant(1, 1.0);
    p.Aeq = MatrixXd(0, 1);
    p.beq = VectorXd(0);
    p.Aub = MatrixXd(1, 1);
    p.Aub << 1;
    p.bub = VectorXd::Constant(1, 5.0);
    p.lo = VectorXd::Constant(1, -kInf);
    p.hi = VectorXd::Constant(1, kInf);
    const LpSolution sol = lp_maximize(p);
    REQUIRE(sol.status == LpStatus::optimal);
    REQUIRE(sol.x(0) == Catch::Approx(5.0).margin(1e-9));
  }
  SECTION("upper-bounded-only variable") {
    // max -x with x <= 2 and no lower bound: optimum unbounded? no, -x grows
    // as x falls, so the program is unbounded.
    BoundedLp p;
    p.c = VectorXd::Constant(1, -1.0);
    p.Aeq = MatrixXd(0, 1);
    p.beq = VectorXd(0);
    p.Aub = MatrixXd(0, 1);
    p.bub = VectorXd(0);
    p.lo = VectorXd::Constant(1, -kInf);
    p.hi = VectorXd::Constant(1, 2.0);
    REQUIRE(lp_maximize(p).status == LpStatus::unbounded);
  }
  SECTION("crossed bounds are infeasible") {
    BoundedLp p;
    p.c = VectorXd::Constant(1, 1.0);
    p.Aeq = MatrixXd(0, 1);
    p.beq = VectorXd(0);
    p.Aub = MatrixXd(0, 1);
    p.bub = VectorXd(0);
    p.lo = VectorXd::Constant(1, 1.0);
    p.hi = VectorXd::Constant(1, 0.0);
    REQUIRE(lp_maximize(p).status == LpStatus::infeasible);
  }
  SECTION("conflicting inequalities are infeasible") {
    // x <= 1 and -x <= -3.
    BoundedLp p;
    p.c = VectorXd::Constant(1, 1.0);
    p.Aeq = MatrixXd(0, 1);
    p.beq = VectorXd(0);
    p.Aub = MatrixXd(2, 1);
    p.Aub << 1, -1;
    p.bub = VectorXd(2);
    p.bub << 1, -3;
    p.lo = VectorXd::Constant(1, -kInf);
    p.hi = VectorXd::Constant(1, kInf);
    REQUIRE(lp_maximize(p).status == LpStatus::infeasible);
  }
}

TEST_CASE("random 2-d programs agree with the vertex-enumeration oracle") {
  Rng rng(20);
  int solved = 0;
  for (int trial = 0; trial < 60; ++trial) {
    Eigen::Vector2d c(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
    const int extra = rng.uniform_int(4);
    std::vector<Line> lines = {{1, 0, 1.0}, {-1, 0, 1.0}, {0, 1, 1.0}, {0, -1, 1.0}};
    BoundedLp p;
    p.c = c;
    p.Aeq = MatrixXd(0, 2);
    p.beq = VectorXd(0);
    p.Aub = MatrixXd(extra, 2);
    p.bub = VectorXd(extra);
    for (int r = 0; r < extra; ++r) {
      const Line l{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 1.0)};
      lines.push_back(l);
      p.Aub(r, 0) = l.a0;
      p.Aub(r, 1) = l.a1;
      p.bub(r) = l.b;
    }
    p.lo = VectorXd::Constant(2, -1.0);
    p.hi = VectorXd::Constant(2, 1.0);

    bool feasible = false;
    const double ref = oracle_max_2d(c, lines, &feasible);
    const LpSolution sol = lp_maximize(p);
    if (!feasible) {
      REQUIRE(sol.status == LpStatus::infeasible);
      continue;
    }
    REQUIRE(sol.status == LpStatus::optimal);
    REQUIRE(sol.value == Catch::Approx(ref).margin(1e-7));
    // Returned point satisfies every constraint.
    for (const Line& l : lines) REQUIRE(l.a0 * sol.x(0) + l.a1 * sol.x(1) <= l.b + 1e-8);
    ++solved;
  }
  REQUIRE(solved >= 40);  // most random instances are feasible
}
