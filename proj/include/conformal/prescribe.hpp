#pragma once

#include <utility>

#include "conformal/assembly.hpp"
#include "conformal/mesh.hpp"
#include "conformal/metric.hpp"

namespace conformal {

// Constant sub/supersolution pair bracketing the conformal factor. The four
// defining inequalities compare nodal curvature representations against the
// targets, with relative slack `margin` pulling u_minus below and pushing
// u_plus above the tight constants.
struct SandwichBounds {
  double u_minus = 0;  // in (0,1)
  double u_plus = 0;   // > 1
  double margin = 0;
};

// geodesic: the retained boundary is totally geodesic and the target boundary
// data vanishes. pinched: mean curvature and target both have positive lower
// bounds on the retained boundary.
enum class BoundaryCase { geodesic, pinched };

SandwichBounds compute_bounds(const Mesh& mesh, const Geometry& geo, const Vec& f_cell,
                              const Vec& h_facet, BoundaryCase bc, int n, double margin = 0.01);

struct IterationRow {
  int m = 0;
  double increment = 0;  // sup |u_m - u_{m-1}|
  double min_u = 0;
  double max_u = 0;
  double min_step = 0;   // signed nodewise extremes of u_m - u_{m-1}
  double max_step = 0;
};

struct IterationTrace {
  std::vector<IterationRow> rows;
  double lambda = 0;
  double lambda_b = 0;
  double residual = 0;   // sup |T(u) - u| at the returned field, T the iteration map
  bool monotone = true;
  bool sandwich_ok = true;
  int retries = 0;       // shift doublings forced by a sandwich escape
};

enum class StartSide { lower, upper };

// One truncated domain. Solves the shifted fixed-point iteration
//   a (-Lap) u' + (R+L) u' = f u^p + L u,   kappa-weighted Robin data on outer
//   facets, u' = 1 on cut facets,
// with the minimal shift making the right side nondecreasing on the bracket.
// Lower starts rise, upper starts fall; both land within 10*tol of the
// discrete fixed point.
Vec monotone_solve(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& f_cell,
                   const Vec& h_facet, const SandwichBounds& bounds, StartSide side, int n, double tol,
                   IterationTrace* trace = nullptr, int maxit = 10000, int jobs = 1);

struct ExhaustionSolution {
  std::vector<Vec> u;                      // per domain, on that domain's dofs
  std::vector<IterationTrace> traces;
  std::vector<SandwichBounds> bounds;      // per domain
  std::vector<int> x_dofs;                 // ambient dofs of the comparison window
  std::vector<Vec> u_on_x;                 // per domain, restricted to x_dofs
  Vec diff_sup;                            // sup over the window of |u_{k+1} - u_k|
  bool diffs_tail_decreasing = true;       // strictly decreasing from the second difference on
  Vec limit_on_x;                          // last field on the window
  double limit_min = 0, limit_max = 0;
};

// Solves every domain of the exhaustion (lower start) and compares consecutive
// solutions on the fixed cell window x_cells, which must lie inside the first
// domain. Stalled differences are reported, not thrown.
ExhaustionSolution exhaustion_solve(const Mesh& ambient, const Geometry& geo, const Exhaustion& exh,
                                    const Vec& f_cell, const Vec& h_facet,
                                    const std::vector<int>& x_cells, BoundaryCase bc, int n, double tol,
                                    double margin = 0.01, int jobs = 1);

struct UniformityReport {
  Vec max_on_x;       // max over the window, per domain
  Vec running_max;
  bool growth_alarm = false;  // running max exceeded twice the first value
};

UniformityReport bound_check(const ExhaustionSolution& sol);

struct PrescriptionResidual {
  Vec r_abs;                          // per dof |R_new - target|, zero where excluded
  std::vector<std::uint8_t> r_used;   // interior dofs at least two hops from any cut dof
  double r_max = 0;
  Vec h_abs;                          // per outer facet |H_new - target|, zero where excluded
  std::vector<std::uint8_t> h_used;   // outer facets clear of corners and the cut
  double h_max = 0;
  double min_u = 0;
  int pinch_violations = 0;  // outer facets where h u^{p_conf/2} exceeds H of the base metric
};

// Realized-curvature comparison against the prescription targets. The
// consistent Laplacian is the default: the lumped one reproduces the
// iteration's own algebra and its residual is vacuously small.
PrescriptionResidual verify_prescription(const Mesh& mesh, const Geometry& geo, const Forms& forms,
                                         const Vec& u, const Vec& f_cell, const Vec& h_facet, int n,
                                         LaplaceKind kind = LaplaceKind::consistent, int jobs = 1);

struct PathRatioReport {
  Vec ratios;            // per sampled pair, deformed over base shortest-path length
  double min_ratio = 0;
  double threshold = 0;  // c2^{p_conf/2}
};

// Graph shortest paths over mesh edges under the base metric and under
// u^{p_conf} g. Requires the certified lower bound c2 <= min u.
PathRatioReport completeness_check(const Mesh& mesh, const Geometry& geo, const Vec& u, double c2,
                                   int n, const std::vector<std::pair<int, int>>& pairs);

}  // namespace conformal
