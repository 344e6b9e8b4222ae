#pragma once

#include <memory>
#include <string>

#include "conformal/core.hpp"

namespace conformal {

// Compressed sparse row, symmetric matrices stored in full.
struct Csr {
  int rows = 0;
  int cols = 0;
  std::vector<int> ptr;  // rows+1
  std::vector<int> col;
  std::vector<double> val;

  int nnz() const { return ptr.empty() ? 0 : ptr[rows]; }

  // y = A x. Row-parallel; each row is a serial dot, so the result does not
  // depend on the thread count.
  void matvec(const Vec& x, Vec& y, int jobs = 1) const;
  Vec apply(const Vec& x, int jobs = 1) const;

  double& at(int r, int c);          // entry must exist in the pattern
  double get(int r, int c) const;    // 0 if absent
  Vec diagonal() const;
  Vec row_sums() const;
  double max_abs() const;
};

struct CooBuilder {
  int rows = 0, cols = 0;
  std::vector<int> r, c;
  std::vector<double> v;
  void add(int i, int j, double x) {
    r.push_back(i);
    c.push_back(j);
    v.push_back(x);
  }
};

// Duplicates are summed in (row, col, insertion order), which keeps the
// result independent of how the builder was filled across runs.
Csr csr_from_coo(const CooBuilder& b);

// alpha*A + beta*B on the merged pattern.
Csr csr_add(const Csr& a, double alpha, const Csr& b, double beta);

// A + diag(d)
Csr csr_add_diag(const Csr& a, const Vec& d);

Csr csr_transpose_pattern_copy(const Csr& a);  // exact transpose

// Keep rows/cols with keep[i] != 0; newindex returns the compressed index map.
Csr csr_restrict(const Csr& a, const std::vector<std::uint8_t>& keep, std::vector<int>* newindex = nullptr);

void write_coo_text(const Csr& a, const std::string& path);
Csr read_coo_text(const std::string& path);

// serial reductions: bit-identical regardless of --jobs
double dot(const Vec& a, const Vec& b);
double norm2(const Vec& a);
double norm_inf(const Vec& a);
void axpy(double alpha, const Vec& x, Vec& y, int jobs = 1);  // y += alpha x
void scal(double alpha, Vec& y, int jobs = 1);

struct LinearSolveReport {
  std::string method;  // "ldlt" or "cg"
  int iterations = 0;
  double relative_residual = 0.0;
  bool converged = true;
};

struct CgOpts {
  double tol = 1e-10;  // relative to ||b||
  int max_iterations = 20000;
  int jobs = 1;
};

// Jacobi-preconditioned CG. Matvec is row-parallel, all dot products serial:
// the iterate sequence is bit-identical for any jobs value.
LinearSolveReport cg_jacobi(const Csr& a, const Vec& b, Vec& x, const CgOpts& opts);

// LDL^T factorization (no pivoting) with symmetric diagonal equilibration.
// Equilibration keeps the factorization sane when metric volume weights span
// many orders of magnitude across the mesh.
class DirectSolver {
 public:
  DirectSolver();
  ~DirectSolver();
  DirectSolver(DirectSolver&&) noexcept;
  DirectSolver& operator=(DirectSolver&&) noexcept;

  void factor(const Csr& a);  // throws numeric on breakdown
  Vec solve(const Vec& b) const;
  int negative_pivots() const;
  double min_abs_pivot() const;  // pivots of the equilibrated matrix
  bool factored() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Direct below this many unknowns, CG above.
constexpr int kDirectSolveLimit = 200000;

struct SpdSolveResult {
  Vec x;
  LinearSolveReport report;
};

// Dispatching solver for SPD systems; verifies definiteness on the direct
// path (inertia) and reports the smallest Ritz value when it is violated.
SpdSolveResult solve_spd(const Csr& a, const Vec& b, double tol, int jobs);

// A few inverse-iteration steps to estimate the smallest eigenvalue of a
// symmetric matrix (used only for error reporting and guards).
double smallest_ritz_estimate(const Csr& a, int iterations = 30, std::uint64_t seed = kDefaultSeed);

}  // namespace conformal
