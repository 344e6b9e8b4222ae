#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "conformal/sparse.hpp"

using namespace conformal;

namespace {

// 1D Dirichlet Poisson on [0,1] with n cells: A = (1/h) tridiag(-1, 2, -1)
// on the n-1 interior nodes, b_i = h. The P1 solution interpolates
// x(1-x)/2 at the nodes, so the midpoint value 1/8 is exact.
Csr poisson_interior(int n) {
  double h = 1.0 / n;
  CooBuilder b;
  b.rows = b.cols = n - 1;
  for (int i = 0; i < n - 1; ++i) {
    b.add(i, i, 2.0 / h);
    if (i > 0) b.add(i, i - 1, -1.0 / h);
    if (i + 1 < n - 1) b.add(i, i + 1, -1.0 / h);
  }
  return csr_from_coo(b);
}

}  // namespace

TEST_CASE("coo assembly sums duplicates and sorts columns") {
  CooBuilder b;
  b.rows = b.cols = 3;
  b.add(1, 2, 5.0);
  b.add(0, 0, 1.0);
  b.add(1, 0, 4.0);
  b.add(0, 0, 2.0);
  b.add(2, 1, -1.0);
  Csr a = csr_from_coo(b);
  CHECK(a.nnz() == 4);
  CHECK(a.at(0, 0) == 3.0);
  CHECK(a.at(1, 0) == 4.0);
  CHECK(a.at(1, 2) == 5.0);
  CHECK(a.get(2, 2) == 0.0);
  CHECK(a.col[a.ptr[1]] == 0);  // sorted within the row
  CHECK(a.col[a.ptr[1] + 1] == 2);
  CHECK_THROWS_AS(a.at(2, 2), Error);
}

TEST_CASE("matvec agrees with dense accumulation and is jobs-invariant") {
  Rng rng = make_rng(11);
  const int n = 17;
  CooBuilder b;
  b.rows = b.cols = n;
  std::vector<std::vector<double>> dense(n, std::vector<double>(n, 0.0));
  for (int t = 0; t < 120; ++t) {
    int i = int(rng() % n), j = int(rng() % n);
    double v = double(int(rng() % 13)) - 6.0;  // small integers: exact sums
    b.add(i, j, v);
    dense[i][j] += v;
  }
  Csr a = csr_from_coo(b);
  Vec x(n);
  for (int i = 0; i < n; ++i) x[i] = double(i % 5) - 2.0;
  Vec y1 = a.apply(x, 1);
  Vec y4 = a.apply(x, 4);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += dense[i][j] * x[j];
    CHECK(y1[i] == s);
    CHECK(y4[i] == y1[i]);
  }
}

TEST_CASE("csr_add merges patterns") {
  CooBuilder ba, bb;
  ba.rows = ba.cols = bb.rows = bb.cols = 3;
  ba.add(0, 0, 1.0);
  ba.add(0, 2, 2.0);
  ba.add(2, 2, 3.0);
  bb.add(0, 1, 10.0);
  bb.add(0, 2, 1.0);
  bb.add(1, 1, 5.0);
  Csr s = csr_add(csr_from_coo(ba), 2.0, csr_from_coo(bb), -1.0);
  CHECK(s.at(0, 0) == 2.0);
  CHECK(s.at(0, 1) == -10.0);
  CHECK(s.at(0, 2) == 3.0);
  CHECK(s.at(1, 1) == -5.0);
  CHECK(s.at(2, 2) == 6.0);
  CHECK(s.nnz() == 5);
}

TEST_CASE("csr_add_diag inserts missing diagonal entries") {
  CooBuilder b;
  b.rows = b.cols = 3;
  b.add(0, 1, 1.0);
  b.add(1, 1, 2.0);
  b.add(2, 0, 4.0);
  Csr a = csr_add_diag(csr_from_coo(b), Vec{10.0, 20.0, 30.0});
  CHECK(a.at(0, 0) == 10.0);
  CHECK(a.at(0, 1) == 1.0);
  CHECK(a.at(1, 1) == 22.0);
  CHECK(a.at(2, 0) == 4.0);
  CHECK(a.at(2, 2) == 30.0);
  for (int i = 0; i < 3; ++i) {
    for (int k = a.ptr[i] + 1; k < a.ptr[i + 1]; ++k) CHECK(a.col[k] > a.col[k - 1]);
  }
}

TEST_CASE("csr_restrict extracts the principal submatrix") {
  CooBuilder b;
  b.rows = b.cols = 4;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) b.add(i, j, 10.0 * i + j);
  std::vector<std::uint8_t> keep = {1, 0, 1, 1};
  std::vector<int> idx;
  Csr r = csr_restrict(csr_from_coo(b), keep, &idx);
  CHECK(r.rows == 3);
  CHECK(idx[0] == 0);
  CHECK(idx[1] == -1);
  CHECK(idx[2] == 1);
  CHECK(idx[3] == 2);
  CHECK(r.at(0, 0) == 0.0);
  CHECK(r.at(1, 2) == 23.0);
  CHECK(r.at(2, 1) == 32.0);
}

TEST_CASE("transpose copies values to the transposed pattern") {
  CooBuilder b;
  b.rows = 2;
  b.cols = 3;
  b.add(0, 2, 7.0);
  b.add(1, 0, -1.0);
  Csr t = csr_transpose_pattern_copy(csr_from_coo(b));
  CHECK(t.rows == 3);
  CHECK(t.cols == 2);
  CHECK(t.at(2, 0) == 7.0);
  CHECK(t.at(0, 1) == -1.0);
}

TEST_CASE("coo text round trip is exact") {
  CooBuilder b;
  b.rows = b.cols = 3;
  b.add(0, 0, 1.0 / 3.0);
  b.add(1, 2, std::sqrt(2.0));
  b.add(2, 2, -1.0e-17);
  Csr a = csr_from_coo(b);
  std::string path = "sparse_roundtrip.tmp";
  write_coo_text(a, path);
  Csr c = read_coo_text(path);
  std::remove(path.c_str());
  REQUIRE(c.nnz() == a.nnz());
  CHECK(c.at(0, 0) == a.at(0, 0));
  CHECK(c.at(1, 2) == a.at(1, 2));
  CHECK(c.at(2, 2) == a.at(2, 2));
}

TEST_CASE("direct solve reproduces the exact discrete deflection") {
  const int n = 10;
  Csr a = poisson_interior(n);
  Vec b(n - 1, 1.0 / n);
  DirectSolver ds;
  ds.factor(a);
  Vec u = ds.solve(b);
  CHECK(ds.negative_pivots() == 0);
  CHECK(ds.min_abs_pivot() > 0.1);
  // node x = 0.5 is interior index 4; u = x(1-x)/2 there
  CHECK(std::fabs(u[4] - 0.125) < 1e-13);
  CHECK(std::fabs(u[0] - 0.045) < 1e-13);
}

TEST_CASE("inertia detects indefiniteness") {
  CooBuilder b;
  b.rows = b.cols = 2;
  b.add(0, 0, 1.0);
  b.add(1, 1, -1.0);
  DirectSolver ds;
  ds.factor(csr_from_coo(b));
  CHECK(ds.negative_pivots() == 1);

  CooBuilder bp;
  bp.rows = bp.cols = 2;
  bp.add(0, 0, 4.0);
  bp.add(0, 1, 1.0);
  bp.add(1, 0, 1.0);
  bp.add(1, 1, 3.0);
  DirectSolver dsp;
  dsp.factor(csr_from_coo(bp));
  CHECK(dsp.negative_pivots() == 0);
}

TEST_CASE("solve_spd refuses indefinite and singular input") {
  CooBuilder b;
  b.rows = b.cols = 2;
  b.add(0, 0, 1.0);
  b.add(1, 1, -2.0);
  Csr a = csr_from_coo(b);
  CHECK_THROWS_WITH_AS(auto r = solve_spd(a, Vec{1.0, 1.0}, 1e-10, 1),
                       doctest::Contains("indefinite"), Error);

  CooBuilder bs;  // singular: the factorization breaks down
  bs.rows = bs.cols = 2;
  bs.add(0, 0, 1.0);
  bs.add(0, 1, 1.0);
  bs.add(1, 0, 1.0);
  bs.add(1, 1, 1.0);
  CHECK_THROWS_WITH_AS(auto r = solve_spd(csr_from_coo(bs), Vec{1.0, 1.0}, 1e-10, 1),
                       doctest::Contains("singular"), Error);

  Csr p = poisson_interior(8);
  SpdSolveResult res = solve_spd(p, Vec(7, 0.125), 1e-10, 1);
  CHECK(res.report.method == "ldlt");
  CHECK(res.report.relative_residual < 1e-12);
  CHECK(std::fabs(res.x[3] - 0.125) < 1e-13);
}

TEST_CASE("cg matches the direct solution and is jobs-invariant") {
  const int n = 64;
  Csr a = poisson_interior(n);
  Vec b(n - 1, 1.0 / n);
  DirectSolver ds;
  ds.factor(a);
  Vec ref = ds.solve(b);

  Vec x1, x4;
  CgOpts o1;
  o1.jobs = 1;
  LinearSolveReport r1 = cg_jacobi(a, b, x1, o1);
  CgOpts o4;
  o4.jobs = 4;
  LinearSolveReport r4 = cg_jacobi(a, b, x4, o4);
  CHECK(r1.converged);
  CHECK(r1.relative_residual <= 1e-10);
  CHECK(r1.iterations == r4.iterations);
  for (int i = 0; i < n - 1; ++i) {
    CHECK(x1[i] == x4[i]);  // serial reductions: bitwise equal
    CHECK(std::fabs(x1[i] - ref[i]) < 1e-10);
  }

  Vec x0;
  LinearSolveReport r0 = cg_jacobi(a, Vec(n - 1, 0.0), x0, o1);
  CHECK(r0.iterations == 0);
  CHECK(norm_inf(x0) == 0.0);
}

TEST_CASE("cg rejects matrices without positive curvature") {
  CooBuilder b;
  b.rows = b.cols = 2;
  b.add(0, 0, 1.0);
  b.add(0, 1, 3.0);
  b.add(1, 0, 3.0);
  b.add(1, 1, 1.0);  // eigenvalues 4, -2
  Vec x;
  CgOpts o;
  CHECK_THROWS_AS(cg_jacobi(csr_from_coo(b), Vec{1.0, 0.0}, x, o), Error);
}

TEST_CASE("smallest ritz value of the 1D chain") {
  const int n = 50;
  CooBuilder b;
  b.rows = b.cols = n;
  for (int i = 0; i < n; ++i) {
    b.add(i, i, 2.0);
    if (i > 0) b.add(i, i - 1, -1.0);
    if (i + 1 < n) b.add(i, i + 1, -1.0);
  }
  double lam = smallest_ritz_estimate(csr_from_coo(b));
  double expect = 2.0 - 2.0 * std::cos(M_PI / (n + 1));
  CHECK(std::fabs(lam - expect) / expect < 1e-8);
}
