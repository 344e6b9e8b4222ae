#pragma once

#include <memory>

#include "conformal/metric.hpp"
#include "conformal/sparse.hpp"

namespace conformal {

// P1 forms on a mesh under a vertex-sampled metric. One-point quadrature with
// the vertex-averaged metric per cell, exact on products of basis gradients.
// Assembly is two phase: element matrices in parallel, then per-row
// accumulation over incident cells in ascending cell order, so values are
// bitwise independent of the job count.

// Per-cell averages of a vertex field; facet variant averages over the
// facet's own vertices.
Vec cell_average(const Mesh& mesh, const Vec& per_vertex);
Vec facet_average(const Mesh& mesh, const Vec& per_vertex);

// Volume-weighted mean of a per-cell field over the cells incident to each
// dof. This is the nodal representation the weighted forms induce.
Vec dof_average_cells(const Mesh& mesh, const Geometry& geo, const Vec& cell_field);

// Riemannian cell volume (vertex-averaged metric) and boundary facet area
// under the induced metric. Point facets of interval meshes have area 1.
Vec cell_volumes(const Mesh& mesh, const Geometry& geo);
Vec facet_areas(const Mesh& mesh, const Geometry& geo);

// Stiffness of the Dirichlet energy. Element diagonals are the negated
// off-diagonal row sums, keeping the constant in the element kernel exactly.
Csr assemble_stiffness(const Mesh& mesh, const Geometry& geo, int jobs);

// Mass with an optional per-cell weight (vertex-averaged data belongs to the
// caller). Pattern equals the stiffness pattern.
Csr assemble_mass(const Mesh& mesh, const Geometry& geo, const Vec* cell_weight, int jobs);

// Boundary mass over facets of the given role with an optional per-facet
// weight. Facets of other roles contribute nothing. Serial.
Csr assemble_boundary_mass(const Mesh& mesh, const Geometry& geo, const Vec* facet_weight,
                           BoundaryRole role);

// Loads: cell_load pairs a per-cell density against the basis, facet_load a
// per-facet density over facets of the role.
Vec cell_load(const Mesh& mesh, const Geometry& geo, const Vec& p_cell, int jobs);
Vec facet_load(const Mesh& mesh, const Geometry& geo, const Vec& q_facet, BoundaryRole role);

// Geometric forms bundle reused across eigen solves and iterations.
struct Forms {
  int nn = 0;
  int dim = 0;
  Csr K;
  Csr M1;
  Csr B1;                           // outer facets, unit weight
  Vec mlump;                        // row sums of M1, positive
  Vec blump;                        // row sums of B1, zero off the outer boundary
  std::vector<uint8_t> outer_dof;   // touched by an outer facet
};
Forms build_forms(const Mesh& mesh, const Geometry& geo, int jobs);

// Stiffness applied element-wise with the constant mode removed per row:
// sum_b K_ab (u_b - u_a). Exactly zero on constant inputs, which the matrix
// product cannot promise.
Vec apply_stiffness_exact(const Mesh& mesh, const Geometry& geo, const Vec& u, int jobs);

// Nodal -Delta u. The lumped realization divides the exact stiffness apply by
// the lumped mass; the consistent one solves M1 z = K u.
enum class LaplaceKind { lumped, consistent };
Vec neg_laplacian(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& u,
                  LaplaceKind kind, int jobs);

// Outward conormal derivative of u recovered from cell gradients: per facet
// the gradient of the adjacent cell dotted with the unit outward conormal,
// nodally the area-weighted mean over incident outer facets.
struct BoundaryFlux {
  Vec facet;                       // per boundary facet; zero on non-outer facets
  Vec nodal;                       // per dof, zero off the outer boundary
  std::vector<uint8_t> on_outer;   // per dof
};
BoundaryFlux boundary_flux(const Mesh& mesh, const Geometry& geo, const Vec& u);

// Curvatures of u^{4/(n-2)} g from nodal data: R_new per dof, H_new per outer
// facet and area-averaged per outer dof. u must be positive.
struct ConformalCurvature {
  Vec R_new;        // per dof
  Vec H_facet;      // per boundary facet, zero on non-outer
  Vec H_nodal;      // per dof, zero off the outer boundary
  Vec flux_facet;   // the conormal derivative that entered H_facet
};
ConformalCurvature curvatures_after_conformal(const Mesh& mesh, const Geometry& geo, const Forms& forms,
                                              const Vec& u, int n, LaplaceKind kind, int jobs);

// A z = b with z pinned on masked dofs; the matrix is reduced once and the
// factorization (or CG operator) reused across solves.
class ConstrainedSolver {
 public:
  ConstrainedSolver(const Csr& a, std::vector<uint8_t> fixed, int jobs);
  // rhs is full length; fixed entries of the result come from fixed_values.
  Vec solve(const Vec& rhs, const Vec& fixed_values) const;
  int free_count() const { return nfree_; }
  const LinearSolveReport& last_report() const { return report_; }

 private:
  Csr a_ff_;
  std::vector<uint8_t> fixed_;
  std::vector<int> free_index_;   // dof -> position among free dofs, -1 when fixed
  std::vector<int> free_list_;
  std::vector<std::size_t> cptr;  // free row -> coupling entries into fixed dofs
  std::vector<int> ccol;
  Vec cval;
  int nfree_ = 0;
  int jobs_ = 1;
  std::unique_ptr<DirectSolver> direct_;
  mutable LinearSolveReport report_;
};

}  // namespace conformal
