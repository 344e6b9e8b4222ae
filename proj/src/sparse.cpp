#include "conformal/sparse.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace conformal {

void Csr::matvec(const Vec& x, Vec& y, int jobs) const {
  if (int(x.size()) != cols) fail_usage("matvec: size mismatch");
  y.assign(rows, 0.0);
  const int* p = ptr.data();
  const int* c = col.data();
  const double* v = val.data();
  const double* xd = x.data();
  double* yd = y.data();
  parallel_for(rows, jobs, [&](std::int64_t i) {
    double s = 0.0;
    for (int k = p[i]; k < p[i + 1]; ++k) s += v[k] * xd[c[k]];
    yd[i] = s;
  });
}

Vec Csr::apply(const Vec& x, int jobs) const {
  Vec y;
  matvec(x, y, jobs);
  return y;
}

double& Csr::at(int r, int c) {
  for (int k = ptr[r]; k < ptr[r + 1]; ++k)
    if (col[k] == c) return val[k];
  fail_usage("Csr::at: entry not in pattern");
}

double Csr::get(int r, int c) const {
  for (int k = ptr[r]; k < ptr[r + 1]; ++k)
    if (col[k] == c) return val[k];
  return 0.0;
}

Vec Csr::diagonal() const {
  Vec d(rows, 0.0);
  for (int i = 0; i < rows; ++i) d[i] = get(i, i);
  return d;
}

Vec Csr::row_sums() const {
  Vec s(rows, 0.0);
  for (int i = 0; i < rows; ++i)
    for (int k = ptr[i]; k < ptr[i + 1]; ++k) s[i] += val[k];
  return s;
}

double Csr::max_abs() const {
  double m = 0.0;
  for (double x : val) m = std::max(m, std::fabs(x));
  return m;
}

Csr csr_from_coo(const CooBuilder& b) {
  const std::size_t n = b.v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (b.r[x] != b.r[y]) return b.r[x] < b.r[y];
    return b.c[x] < b.c[y];
  });
  Csr a;
  a.rows = b.rows;
  a.cols = b.cols;
  a.ptr.assign(b.rows + 1, 0);
  int prow = -1, pcol = -1;
  for (std::size_t t = 0; t < n; ++t) {
    std::size_t k = order[t];
    if (b.r[k] == prow && b.c[k] == pcol) {
      a.val.back() += b.v[k];
    } else {
      prow = b.r[k];
      pcol = b.c[k];
      a.col.push_back(pcol);
      a.val.push_back(b.v[k]);
      a.ptr[prow + 1] += 1;
    }
  }
  for (int i = 0; i < b.rows; ++i) a.ptr[i + 1] += a.ptr[i];
  return a;
}

Csr csr_add(const Csr& a, double alpha, const Csr& b, double beta) {
  if (a.rows != b.rows || a.cols != b.cols) fail_usage("csr_add: shape mismatch");
  Csr r;
  r.rows = a.rows;
  r.cols = a.cols;
  r.ptr.assign(a.rows + 1, 0);
  for (int i = 0; i < a.rows; ++i) {
    int ka = a.ptr[i], kb = b.ptr[i];
    while (ka < a.ptr[i + 1] || kb < b.ptr[i + 1]) {
      int ca = ka < a.ptr[i + 1] ? a.col[ka] : a.cols;
      int cb = kb < b.ptr[i + 1] ? b.col[kb] : b.cols;
      if (ca < cb) {
        r.col.push_back(ca);
        r.val.push_back(alpha * a.val[ka++]);
      } else if (cb < ca) {
        r.col.push_back(cb);
        r.val.push_back(beta * b.val[kb++]);
      } else {
        r.col.push_back(ca);
        r.val.push_back(alpha * a.val[ka++] + beta * b.val[kb++]);
      }
      r.ptr[i + 1] += 1;
    }
  }
  for (int i = 0; i < a.rows; ++i) r.ptr[i + 1] += r.ptr[i];
  return r;
}

Csr csr_add_diag(const Csr& a, const Vec& d) {
  if (int(d.size()) != a.rows) fail_usage("csr_add_diag: size mismatch");
  Csr b;
  b.rows = a.rows;
  b.cols = a.cols;
  b.ptr.assign(a.rows + 1, 0);
  for (int i = 0; i < a.rows; ++i) {
    bool placed = false;
    for (int k = a.ptr[i]; k < a.ptr[i + 1]; ++k) {
      if (!placed && a.col[k] > i) {
        b.col.push_back(i);
        b.val.push_back(d[i]);
        b.ptr[i + 1] += 1;
        placed = true;
      }
      double v = a.val[k];
      if (a.col[k] == i) {
        v += d[i];
        placed = true;
      }
      b.col.push_back(a.col[k]);
      b.val.push_back(v);
      b.ptr[i + 1] += 1;
    }
    if (!placed) {
      b.col.push_back(i);
      b.val.push_back(d[i]);
      b.ptr[i + 1] += 1;
    }
  }
  for (int i = 0; i < a.rows; ++i) b.ptr[i + 1] += b.ptr[i];
  return b;
}

Csr csr_transpose_pattern_copy(const Csr& a) {
  CooBuilder b;
  b.rows = a.cols;
  b.cols = a.rows;
  for (int i = 0; i < a.rows; ++i)
    for (int k = a.ptr[i]; k < a.ptr[i + 1]; ++k) b.add(a.col[k], i, a.val[k]);
  return csr_from_coo(b);
}

Csr csr_restrict(const Csr& a, const std::vector<std::uint8_t>& keep, std::vector<int>* newindex) {
  if (int(keep.size()) != a.rows || a.rows != a.cols) fail_usage("csr_restrict: square matrices only");
  std::vector<int> idx(a.rows, -1);
  int m = 0;
  for (int i = 0; i < a.rows; ++i)
    if (keep[i]) idx[i] = m++;
  Csr r;
  r.rows = r.cols = m;
  r.ptr.assign(m + 1, 0);
  for (int i = 0; i < a.rows; ++i) {
    if (idx[i] < 0) continue;
    for (int k = a.ptr[i]; k < a.ptr[i + 1]; ++k) {
      if (idx[a.col[k]] < 0) continue;
      r.col.push_back(idx[a.col[k]]);
      r.val.push_back(a.val[k]);
      r.ptr[idx[i] + 1] += 1;
    }
  }
  for (int i = 0; i < m; ++i) r.ptr[i + 1] += r.ptr[i];
  if (newindex) *newindex = idx;
  return r;
}

void write_coo_text(const Csr& a, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail_usage("cannot open for writing: " + path);
  out << "# rows cols nnz\n" << a.rows << " " << a.cols << " " << a.nnz() << "\n";
  char buf[64];
  for (int i = 0; i < a.rows; ++i)
    for (int k = a.ptr[i]; k < a.ptr[i + 1]; ++k) {
      std::snprintf(buf, sizeof buf, "%d %d %.17g\n", i, a.col[k], a.val[k]);
      out << buf;
    }
}

Csr read_coo_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_usage("cannot open: " + path);
  std::string line;
  CooBuilder b;
  long nnz = -1;
  while (std::getline(in, line)) {
    auto h = line.find('#');
    if (h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    if (b.rows == 0 && nnz < 0) {
      long r, c, z;
      if (ls >> r >> c >> z) {
        b.rows = int(r);
        b.cols = int(c);
        nnz = z;
      }
      continue;
    }
    int i, j;
    double v;
    if (ls >> i >> j >> v) b.add(i, j, v);
  }
  if (long(b.v.size()) != nnz) fail_usage("coo file: entry count mismatch in " + path);
  return csr_from_coo(b);
}

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

double norm_inf(const Vec& a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::fabs(x));
  return m;
}

void axpy(double alpha, const Vec& x, Vec& y, int jobs) {
  double* yd = y.data();
  const double* xd = x.data();
  parallel_for(std::int64_t(y.size()), jobs, [&](std::int64_t i) { yd[i] += alpha * xd[i]; });
}

void scal(double alpha, Vec& y, int jobs) {
  double* yd = y.data();
  parallel_for(std::int64_t(y.size()), jobs, [&](std::int64_t i) { yd[i] *= alpha; });
}

LinearSolveReport cg_jacobi(const Csr& a, const Vec& b, Vec& x, const CgOpts& opts) {
  const int n = a.rows;
  if (x.empty()) x.assign(n, 0.0);
  Vec d = a.diagonal();
  for (int i = 0; i < n; ++i) {
    if (d[i] <= 0.0) fail_numeric("cg: nonpositive diagonal at row " + std::to_string(i));
    d[i] = 1.0 / d[i];
  }
  Vec r(n), z(n), p(n), q(n);
  a.matvec(x, q, opts.jobs);
  for (int i = 0; i < n; ++i) r[i] = b[i] - q[i];
  double bnorm = norm2(b);
  if (bnorm == 0.0) {
    x.assign(n, 0.0);
    return {"cg", 0, 0.0, true};
  }
  for (int i = 0; i < n; ++i) z[i] = d[i] * r[i];
  p = z;
  double rz = dot(r, z);
  LinearSolveReport rep;
  rep.method = "cg";
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    double rn = norm2(r);
    rep.relative_residual = rn / bnorm;
    if (rep.relative_residual <= opts.tol) break;
    a.matvec(p, q, opts.jobs);
    double pq = dot(p, q);
    if (pq <= 0.0) fail_numeric("cg: curvature lost (matrix not positive definite)");
    double alpha = rz / pq;
    axpy(alpha, p, x, opts.jobs);
    axpy(-alpha, q, r, opts.jobs);
    for (int i = 0; i < n; ++i) z[i] = d[i] * r[i];
    double rz2 = dot(r, z);
    double beta = rz2 / rz;
    rz = rz2;
    for (int i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  rep.iterations = it;
  rep.converged = rep.relative_residual <= opts.tol;
  if (!rep.converged) fail_numeric("cg: no convergence in " + std::to_string(opts.max_iterations) + " iterations");
  return rep;
}

struct DirectSolver::Impl {
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
  Vec scale;  // symmetric equilibration d_i = 1/sqrt(|a_ii|)
  int n = 0;
  bool ok = false;
};

DirectSolver::DirectSolver() : impl_(new Impl) {}
DirectSolver::~DirectSolver() = default;
DirectSolver::DirectSolver(DirectSolver&&) noexcept = default;
DirectSolver& DirectSolver::operator=(DirectSolver&&) noexcept = default;

void DirectSolver::factor(const Csr& a) {
  if (a.rows != a.cols) fail_usage("DirectSolver: square matrices only");
  Impl& im = *impl_;
  im.n = a.rows;
  im.scale.assign(a.rows, 1.0);
  for (int i = 0; i < a.rows; ++i) {
    double dii = std::fabs(a.get(i, i));
    im.scale[i] = dii > 0.0 ? 1.0 / std::sqrt(dii) : 1.0;
  }
  Eigen::SparseMatrix<double> m(a.rows, a.cols);
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(a.nnz());
  for (int i = 0; i < a.rows; ++i)
    for (int k = a.ptr[i]; k < a.ptr[i + 1]; ++k)
      trips.emplace_back(i, a.col[k], im.scale[i] * a.val[k] * im.scale[a.col[k]]);
  m.setFromTriplets(trips.begin(), trips.end());
  im.ldlt.compute(m);
  if (im.ldlt.info() != Eigen::Success)
    fail_numeric("ldlt: factorization broke down, matrix is singular or severely ill conditioned");
  im.ok = true;
}

Vec DirectSolver::solve(const Vec& b) const {
  const Impl& im = *impl_;
  if (!im.ok) fail_usage("DirectSolver: not factored");
  Eigen::VectorXd rhs(im.n);
  for (int i = 0; i < im.n; ++i) rhs[i] = im.scale[i] * b[i];
  Eigen::VectorXd y = im.ldlt.solve(rhs);
  Vec x(im.n);
  for (int i = 0; i < im.n; ++i) x[i] = im.scale[i] * y[i];
  return x;
}

int DirectSolver::negative_pivots() const {
  const Impl& im = *impl_;
  if (!im.ok) fail_usage("DirectSolver: not factored");
  auto d = im.ldlt.vectorD();
  int neg = 0;
  for (int i = 0; i < d.size(); ++i)
    if (d[i] < 0.0) ++neg;
  return neg;
}

double DirectSolver::min_abs_pivot() const {
  const Impl& im = *impl_;
  if (!im.ok) fail_usage("DirectSolver: not factored");
  auto d = im.ldlt.vectorD();
  double m = std::numeric_limits<double>::infinity();
  for (int i = 0; i < d.size(); ++i) m = std::min(m, std::fabs(double(d[i])));
  return d.size() ? m : 0.0;
}

bool DirectSolver::factored() const { return impl_->ok; }

SpdSolveResult solve_spd(const Csr& a, const Vec& b, double tol, int jobs) {
  SpdSolveResult out;
  if (a.rows >= kDirectSolveLimit) {
    out.x.assign(a.rows, 0.0);
    CgOpts co;
    co.tol = tol;
    co.jobs = jobs;
    out.report = cg_jacobi(a, b, out.x, co);
    return out;
  }
  DirectSolver ds;
  ds.factor(a);
  if (ds.min_abs_pivot() < 1e-14) fail_numeric("solve: system is numerically singular");
  if (ds.negative_pivots() > 0)
    fail_numeric("solve: system is indefinite; smallest Ritz value approx " +
                 std::to_string(smallest_ritz_estimate(a)));
  out.x = ds.solve(b);
  Vec r = a.apply(out.x, jobs);
  double bn = norm2(b);
  for (int i = 0; i < a.rows; ++i) r[i] -= b[i];
  out.report.method = "ldlt";
  out.report.iterations = 1;
  out.report.relative_residual = bn > 0 ? norm2(r) / bn : norm2(r);
  out.report.converged = true;
  return out;
}

double smallest_ritz_estimate(const Csr& a, int iterations, std::uint64_t seed) {
  // Inverse iteration on (A - s I) with s below the Gershgorin lower bound.
  double low = std::numeric_limits<double>::infinity();
  for (int i = 0; i < a.rows; ++i) {
    double off = 0.0, diag = 0.0;
    for (int k = a.ptr[i]; k < a.ptr[i + 1]; ++k) {
      if (a.col[k] == i)
        diag = a.val[k];
      else
        off += std::fabs(a.val[k]);
    }
    low = std::min(low, diag - off);
  }
  double shift = low - 0.01 * (1.0 + std::fabs(low));
  Csr shifted = csr_add_diag(a, Vec(a.rows, -shift));
  DirectSolver ds;
  ds.factor(shifted);
  Rng rng = make_rng(seed);
  Vec x(a.rows);
  for (auto& v : x) v = unit_symmetric(rng);
  double lam = 0.0;
  for (int it = 0; it < iterations; ++it) {
    Vec y = ds.solve(x);
    double n = norm2(y);
    if (n == 0.0) break;
    scal(1.0 / n, y);
    Vec ay = a.apply(y);
    lam = dot(y, ay);
    x = y;
  }
  return lam;
}

}  // namespace conformal
