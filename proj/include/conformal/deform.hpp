#pragma once

#include <map>
#include <string>

#include "conformal/assembly.hpp"
#include "conformal/eigensolve.hpp"
#include "conformal/metric.hpp"

namespace conformal {

enum class WeightKind : std::uint8_t { boundary, volume };

// Shell-constant weight over an exhaustion: value eig(level i)/2^(i+1) on the
// shell first exposed at level i. Carrier entities are boundary facets for the
// boundary kind and cells for the volume kind.
struct WeightSpec {
  WeightKind kind = WeightKind::boundary;
  std::vector<double> level_eigen;
  std::vector<double> coefficient;
  std::vector<int> shell;  // carrier entity -> first level holding it, -1 off the carrier
  Vec field;               // per boundary facet / per cell; zero off the carrier
  double min_on_carrier = 0;
  double spot_margin = 0;  // worst energy minus weighted norm over the random sample
};

struct WeightOpts {
  int jobs = 1;
  std::uint64_t seed = kDefaultSeed;
  int samples = 10;
  EigenOpts eigen;
};

// Requires eig(level 0) > 0 and nonnegative cell f / facet h outside level 0.
// The last level must cover the whole mesh.
WeightSpec build_weight(const Mesh& mesh, const Geometry& geo, const Exhaustion& exh, const Vec& f_cell,
                        const Vec& h_facet, WeightKind kind, const WeightOpts& opts = {});

// Area-weighted dof average of an outer-facet field; dofs without an incident
// outer facet stay zero.
Vec dof_average_facets(const Mesh& mesh, const Geometry& geo, const Vec& facet_field,
                       std::vector<std::uint8_t>* on_outer = nullptr);

struct LinearField {
  Vec u;
  double min_u = 0;
  double max_u = 0;
  double flux_residual = 0;  // max over outer dofs of |recovered flux + h u - q|
  LinearSolveReport report;
};

// (K + M_f + B_h) u = L_q, q per outer facet; the minimizer must be positive.
LinearField solve_linear_robin(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& f_cell,
                               const Vec& h_facet, const Vec& q_facet, int jobs = 1);
// (K + M_f + B_h) u = L_p, p per cell.
LinearField solve_linear_interior(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& f_cell,
                                  const Vec& h_facet, const Vec& p_cell, int jobs = 1);

// Plain conjugate-gradient descent on J(v) = v'Av/2 - v'b, terminating on the
// relative residual. Kept free of the factorization path so the two can
// cross-check each other.
Vec minimize_quadratic(const Csr& a, const Vec& b, double tol, int max_iterations);

enum class FlattenKind : std::uint8_t { boundary, interior };

struct FlatteningParams {
  double alpha = 0;
  double c = 1;
  double v_inf = 0;
  std::vector<int> nodes;   // dofs of the negative-coefficient set N
  double lower_apriori = 0; // 1 - exp(-c alpha), or 1 - exp(-c min u) when alpha = 0
  int c_halvings = 0;
  // Worst nodal certificate margins of the returned w.
  double margin_interior = 0;  // lumped -lap w + f w over dofs with f >= 0
  double margin_boundary = 0;  // recovered flux + h w over outer dofs (boundary kind)
  double defect_interior = 0;  // worst lumped value where f < 0; 0 when that set is empty
  double max_flux_abs = 0;     // interior kind: largest |recovered flux of w| on the outer boundary
};

struct FlattenResult {
  Vec w;
  FlatteningParams params;
};

// w = 1 - exp(-c (u + alpha)) with alpha a dyadic fraction of min u and c
// selected by bisection so the strict inequalities survive on N: h < 0 outer
// dofs for the boundary kind, f < 0 dofs for the interior kind.
FlattenResult flatten(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& u, const Vec& f_cell,
                      const Vec& h_facet, FlattenKind kind, int jobs = 1);

enum class VariationRoute : std::uint8_t { volume, boundary };

struct VariationOpts {
  int jobs = 1;
  bool with_fd = true;
  double t_probe = 1e-3;
  EigenOpts eigen;
};

struct VariationResult {
  double value = 0;
  double interior_term = 0;  // -c_n Int <h,Ric> phi^2 dv
  double boundary_term = 0;  // -d_n Bnd <h,A> phi^2 dsig, tangential contraction
  double base_eigen = 0;
  double gap = 0;
  double fd = 0;  // (eig(+t) - eig(-t)) / (2t) when requested
  double eig_plus = 0;
  double eig_minus = 0;
  double t_probe = 0;
};

// Derivative of the lowest pencil eigenvalue in the metric direction pert,
// with the eigenfunction normalized in the route's right-hand form. sub picks
// a subdomain of the engine's mesh; geometry is always perturbed on the
// ambient grid and restricted afterwards.
VariationResult first_variation(PerturbEngine& engine, const Perturbation& pert, const Submesh* sub, int n,
                                VariationRoute route, const VariationOpts& opts = {});

struct EigenTraceEntry {
  double t = 0;
  double mu = 0;
  double sigma = 0;
  bool has_sigma = false;
};

struct EpsTraceEntry {
  double eps = 0;
  double interior_term = 0;
  double boundary_term = 0;
};

struct DeformationReport {
  std::string pipeline;
  bool skipped = false;
  double t = 0;
  std::vector<EigenTraceEntry> trace;
  std::vector<EpsTraceEntry> eps_trace;
  double eps = 0;
  WeightSpec weight;
  LinearField linear;
  FlattenResult flat;
  double c2 = 0, c1 = 0;  // certified conformal-factor bounds, c2 < w < c1
  double equiv_low = 0, equiv_high = 0;
  double min_R_new = 0;  // lumped realization, all dofs
  double min_R_new_consistent = 0;
  double min_R_new_inner = 0;  // lumped, away from outer facets whose rows carry the Robin flux
  double tol_R = 0;            // admissible interior defect on the boundary route
  double min_H_new = 0;  // over outer facets
  double max_flux_abs = 0;
  std::map<std::string, bool> verdicts;
};

struct PipelineInput {
  const Model* model = nullptr;
  const Mesh* mesh = nullptr;
  const Exhaustion* exh = nullptr;  // level 0 seeds the eigenvalue, last level covers the mesh
  Vec chi;                          // vertex cutoff for the interior metric perturbation
  int n = 3;
};

struct PipelineOpts {
  int jobs = 1;
  std::uint64_t seed = kDefaultSeed;
  double t0 = 0.1;
  int t_budget = 20;
  double eps0 = 0.4;
  int eps_budget = 10;
  double quad_tol = 0.25;  // acceptance for recovered-flux checks that vanish in the limit
  EigenOpts eigen;
};

// The report argument doubles as the trace sink: it is filled as stages
// complete, so a thrown stage leaves the prefix behind.
DeformationReport& deform_positive_scalar(const PipelineInput& in, const PipelineOpts& opts, DeformationReport& out);
DeformationReport& deform_mean_convex(const PipelineInput& in, const PipelineOpts& opts, DeformationReport& out);

struct CollarSpec {
  int axis = 0;
  int side = 1;
  std::function<double(const double*)> chi;
  std::function<double(double)> zeta;
};

// Boundary-concentrated route: shrink the collar width until the variation of
// the boundary pencil turns positive, then run the mean-convex stages with
// that perturbation.
DeformationReport& increase_mean_pipeline(const PipelineInput& in, const CollarSpec& collar, const PipelineOpts& opts,
                                          DeformationReport& out);

}  // namespace conformal
