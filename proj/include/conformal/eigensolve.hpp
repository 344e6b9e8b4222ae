#pragma once

#include "conformal/assembly.hpp"

namespace conformal {

// Smallest eigenpair of the pencil A phi = value B phi, with A the quadratic
// form K + M_f + B_w and B either the boundary mass (Steklov-type, reduced by
// a Schur complement onto the outer dofs) or the volume mass (inverse
// subspace iteration with a certified shift).

// A = K + mass(f_cell) + boundary mass(w_facet) on outer facets; null means
// that piece is absent.
Csr eigen_lhs(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec* f_cell,
              const Vec* w_facet, int jobs);

struct EigenOpts {
  int jobs = 1;
  double residual_tol = 1e-8;   // scaled residual of the returned pair
  double ritz_tol = 1e-13;      // relative Ritz stagnation
  int max_iterations = 500;     // subspace sweeps per shift
  std::uint64_t seed = kDefaultSeed;
};

struct EigenResult {
  double value = 0;
  Vec phi;          // full length, B-normalized, largest-magnitude entry positive
  double gap = 0;   // distance to the second Ritz value
  double residual = 0;
  double min_phi = 0;
  bool indeterminate_sign = false;  // |value| too small to trust its sign
  std::string method;               // "schur" or "subspace"
};

// Pencil against the outer boundary mass. Interior dofs are eliminated by a
// Schur complement; an indefinite interior block means the form is unbounded
// below over functions vanishing on the boundary and is a hypothesis error.
// Dofs with dirichlet[i] != 0 are pinned to zero first.
EigenResult smallest_boundary_pencil(const Csr& a, const Forms& forms,
                                     const std::vector<std::uint8_t>* dirichlet, const EigenOpts& opts);

// Pencil against the volume mass, block-2 inverse subspace iteration. The
// initial shift sits below a generalized Gershgorin bound, so positive
// definiteness of A - shift B certifies it lies under the spectrum; shift
// updates toward the Ritz values are only adopted under the same certificate.
EigenResult smallest_volume_pencil(const Csr& a, const Forms& forms, const EigenOpts& opts);

// (v'Av)/(v'Bv); a vector with no mass in B is a hypothesis error.
double rayleigh_quotient(const Csr& a, const Csr& b, const Vec& v);

}  // namespace conformal
