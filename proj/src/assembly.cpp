#include "conformal/assembly.hpp"

#include <algorithm>
#include <cmath>

namespace conformal {

namespace {

double det_gen(const double* m, int d) {
  if (d == 1) return m[0];
  if (d == 2) return m[0] * m[3] - m[1] * m[2];
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

void inv_gen(const double* m, int d, double* out) {
  double det = det_gen(m, d);
  if (det == 0.0) fail_numeric("degenerate cell chart");
  double inv = 1.0 / det;
  if (d == 1) {
    out[0] = inv;
    return;
  }
  if (d == 2) {
    out[0] = m[3] * inv;
    out[1] = -m[1] * inv;
    out[2] = -m[2] * inv;
    out[3] = m[0] * inv;
    return;
  }
  out[0] = (m[4] * m[8] - m[5] * m[7]) * inv;
  out[1] = (m[2] * m[7] - m[1] * m[8]) * inv;
  out[2] = (m[1] * m[5] - m[2] * m[4]) * inv;
  out[3] = (m[5] * m[6] - m[3] * m[8]) * inv;
  out[4] = (m[0] * m[8] - m[2] * m[6]) * inv;
  out[5] = (m[2] * m[3] - m[0] * m[5]) * inv;
  out[6] = (m[3] * m[7] - m[4] * m[6]) * inv;
  out[7] = (m[1] * m[6] - m[0] * m[7]) * inv;
  out[8] = (m[0] * m[4] - m[1] * m[3]) * inv;
}

// grad[k-1][*] is the chart gradient of the barycentric coordinate of local
// vertex k (k >= 1); the gradient of vertex 0 is minus their sum and is never
// stored, so constants drop out of difference forms exactly.
struct CellGeom {
  double grad[3][3];
  double vol = 0;      // chart volume
  double gbar[9];      // vertex-averaged metric
  double ginv[9];
  double s = 0;        // sqrt(det gbar)
};

void cell_geom(const Mesh& mesh, const Geometry& geo, int c, CellGeom& cg) {
  const int d = mesh.dim;
  const int* cv = mesh.cell_verts(c);
  const double* x0 = mesh.vert_coord(cv[0]);
  double e[9] = {0};
  for (int k = 1; k <= d; ++k) {
    const double* xk = mesh.vert_coord(cv[k]);
    for (int i = 0; i < d; ++i) e[(k - 1) * d + i] = xk[i] - x0[i];
  }
  double einv[9] = {0};
  inv_gen(e, d, einv);
  // E holds edge vectors as rows, so grad lambda_k is column k-1 of E^{-1}
  for (int k = 0; k < d; ++k)
    for (int i = 0; i < d; ++i) cg.grad[k][i] = einv[i * d + k];
  double det = det_gen(e, d);
  double fact = 1.0;
  for (int k = 2; k <= d; ++k) fact *= k;
  cg.vol = std::abs(det) / fact;
  const int dd = d * d;
  for (int i = 0; i < dd; ++i) cg.gbar[i] = 0;
  for (int a = 0; a <= d; ++a) {
    const double* gv = geo.gv(cv[a]);
    for (int i = 0; i < dd; ++i) cg.gbar[i] += gv[i];
  }
  for (int i = 0; i < dd; ++i) cg.gbar[i] /= (d + 1);
  sym_inv(cg.gbar, d, cg.ginv);
  double dg = sym_det(cg.gbar, d);
  if (dg <= 0) fail_numeric("cell metric not positive");
  cg.s = std::sqrt(dg);
}

// Element stiffness with exact zero row sums: interior block first, borders
// by negated sums.
void stiffness_elem(const Mesh& mesh, const Geometry& geo, int c, double* ke) {
  const int d = mesh.dim;
  const int m = d + 1;
  CellGeom cg;
  cell_geom(mesh, geo, c, cg);
  const double w = cg.s * cg.vol;
  for (int a = 1; a <= d; ++a)
    for (int b = a; b <= d; ++b) {
      double t = 0;
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) t += cg.grad[a - 1][i] * cg.ginv[i * d + j] * cg.grad[b - 1][j];
      ke[a * m + b] = w * t;
      ke[b * m + a] = w * t;
    }
  double total = 0;
  for (int a = 1; a <= d; ++a) {
    double rs = 0;
    for (int b = 1; b <= d; ++b) rs += ke[a * m + b];
    ke[a * m + 0] = -rs;
    ke[0 * m + a] = -rs;
    total += rs;
  }
  ke[0] = total;
}

void mass_elem(const Mesh& mesh, const Geometry& geo, int c, double weight, double* me) {
  const int d = mesh.dim;
  const int m = d + 1;
  CellGeom cg;
  cell_geom(mesh, geo, c, cg);
  const double base = weight * cg.s * cg.vol / double((d + 1) * (d + 2));
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b) me[a * m + b] = base * (a == b ? 2.0 : 1.0);
}

// Pattern from the cell graph, then per-row accumulation of cached element
// matrices in ascending incident-cell order.
Csr assemble_from_elements(const Mesh& mesh, const std::vector<double>& ke, int jobs) {
  const int d = mesh.dim;
  const int m = d + 1;
  const int nn = mesh.nn;
  std::vector<std::vector<int>> rowcols(nn);
  parallel_for(nn, jobs, [&](int i) {
    auto& rc = rowcols[i];
    for (int k = mesh.inc_ptr[i]; k < mesh.inc_ptr[i + 1]; ++k) {
      const int* cv = mesh.cell_verts(mesh.inc[k].first);
      for (int b = 0; b < m; ++b) rc.push_back(mesh.node(cv[b]));
    }
    std::sort(rc.begin(), rc.end());
    rc.erase(std::unique(rc.begin(), rc.end()), rc.end());
  });
  Csr a;
  a.rows = a.cols = nn;
  a.ptr.assign(nn + 1, 0);
  for (int i = 0; i < nn; ++i) a.ptr[i + 1] = a.ptr[i] + int(rowcols[i].size());
  a.col.resize(a.ptr[nn]);
  a.val.assign(a.ptr[nn], 0.0);
  parallel_for(nn, jobs, [&](int i) {
    std::copy(rowcols[i].begin(), rowcols[i].end(), a.col.begin() + a.ptr[i]);
    const int* cb = a.col.data() + a.ptr[i];
    const int len = a.ptr[i + 1] - a.ptr[i];
    double* vb = a.val.data() + a.ptr[i];
    for (int k = mesh.inc_ptr[i]; k < mesh.inc_ptr[i + 1]; ++k) {
      const int c = mesh.inc[k].first;
      const int lv = mesh.inc[k].second;
      const int* cv = mesh.cell_verts(c);
      const double* row = &ke[std::size_t(c) * m * m + std::size_t(lv) * m];
      for (int b = 0; b < m; ++b) {
        int j = mesh.node(cv[b]);
        int pos = int(std::lower_bound(cb, cb + len, j) - cb);
        vb[pos] += row[b];
      }
    }
  });
  return a;
}

double facet_area_one(const Mesh& mesh, const Geometry& geo, const Facet& f) {
  const int d = mesh.dim;
  if (d == 1) return 1.0;
  int w[3];
  mesh.facet_verts(f, w);
  const int dd = d * d;
  double gf[9] = {0};
  for (int a = 0; a < d; ++a) {
    const double* gv = geo.gv(w[a]);
    for (int i = 0; i < dd; ++i) gf[i] += gv[i];
  }
  for (int i = 0; i < dd; ++i) gf[i] /= d;
  const double* x0 = mesh.vert_coord(w[0]);
  double edge[2][3];
  for (int k = 1; k < d; ++k) {
    const double* xk = mesh.vert_coord(w[k]);
    for (int i = 0; i < d; ++i) edge[k - 1][i] = xk[i] - x0[i];
  }
  double gram[4];
  for (int k = 0; k < d - 1; ++k)
    for (int l = 0; l < d - 1; ++l) {
      double t = 0;
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) t += edge[k][i] * gf[i * d + j] * edge[l][j];
      gram[k * (d - 1) + l] = t;
    }
  double det = (d == 2) ? gram[0] : gram[0] * gram[3] - gram[1] * gram[2];
  if (det <= 0) fail_numeric("degenerate boundary facet");
  double fact = (d == 3) ? 2.0 : 1.0;
  return std::sqrt(det) / fact;
}

}  // namespace

Vec cell_average(const Mesh& mesh, const Vec& per_vertex) {
  const int m = mesh.dim + 1;
  Vec out(mesh.nc, 0.0);
  for (int c = 0; c < mesh.nc; ++c) {
    const int* cv = mesh.cell_verts(c);
    double t = 0;
    for (int a = 0; a < m; ++a) t += per_vertex[cv[a]];
    out[c] = t / m;
  }
  return out;
}

Vec dof_average_cells(const Mesh& mesh, const Geometry& geo, const Vec& cell_field) {
  if (int(cell_field.size()) != mesh.nc) fail_usage("cell field size mismatch");
  Vec vols = cell_volumes(mesh, geo);
  Vec num(mesh.nn, 0.0), den(mesh.nn, 0.0);
  for (int c = 0; c < mesh.nc; ++c) {
    const int* cv = mesh.cell_verts(c);
    for (int lv = 0; lv <= mesh.dim; ++lv) {
      int i = mesh.node(cv[lv]);
      num[i] += vols[c] * cell_field[c];
      den[i] += vols[c];
    }
  }
  Vec out(mesh.nn, 0.0);
  for (int i = 0; i < mesh.nn; ++i)
    if (den[i] > 0) out[i] = num[i] / den[i];
  return out;
}

Vec facet_average(const Mesh& mesh, const Vec& per_vertex) {
  Vec out(mesh.boundary.size(), 0.0);
  int w[3];
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f) {
    int cnt = mesh.facet_verts(mesh.boundary[f], w);
    double t = 0;
    for (int a = 0; a < cnt; ++a) t += per_vertex[w[a]];
    out[f] = t / cnt;
  }
  return out;
}

Vec cell_volumes(const Mesh& mesh, const Geometry& geo) {
  Vec out(mesh.nc, 0.0);
  for (int c = 0; c < mesh.nc; ++c) {
    CellGeom cg;
    cell_geom(mesh, geo, c, cg);
    out[c] = cg.s * cg.vol;
  }
  return out;
}

Vec facet_areas(const Mesh& mesh, const Geometry& geo) {
  Vec out(mesh.boundary.size(), 0.0);
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f) out[f] = facet_area_one(mesh, geo, mesh.boundary[f]);
  return out;
}

Csr assemble_stiffness(const Mesh& mesh, const Geometry& geo, int jobs) {
  const int m = mesh.dim + 1;
  std::vector<double> ke(std::size_t(mesh.nc) * m * m);
  parallel_for(mesh.nc, jobs, [&](int c) { stiffness_elem(mesh, geo, c, &ke[std::size_t(c) * m * m]); });
  return assemble_from_elements(mesh, ke, jobs);
}

Csr assemble_mass(const Mesh& mesh, const Geometry& geo, const Vec* cell_weight, int jobs) {
  const int m = mesh.dim + 1;
  if (cell_weight && int(cell_weight->size()) != mesh.nc) fail_usage("cell weight length mismatch");
  std::vector<double> me(std::size_t(mesh.nc) * m * m);
  parallel_for(mesh.nc, jobs, [&](int c) {
    double w = cell_weight ? (*cell_weight)[c] : 1.0;
    mass_elem(mesh, geo, c, w, &me[std::size_t(c) * m * m]);
  });
  return assemble_from_elements(mesh, me, jobs);
}

Csr assemble_boundary_mass(const Mesh& mesh, const Geometry& geo, const Vec* facet_weight,
                           BoundaryRole role) {
  if (facet_weight && facet_weight->size() != mesh.boundary.size())
    fail_usage("facet weight length mismatch");
  CooBuilder b;
  b.rows = b.cols = mesh.nn;
  int w[3];
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f) {
    const Facet& fc = mesh.boundary[f];
    if (fc.role != role) continue;
    double wt = facet_weight ? (*facet_weight)[f] : 1.0;
    if (wt == 0.0) continue;
    int cnt = mesh.facet_verts(fc, w);
    double area = facet_area_one(mesh, geo, fc);
    double base = wt * area / double(cnt * (cnt + 1));
    for (int a = 0; a < cnt; ++a)
      for (int bb = 0; bb < cnt; ++bb)
        b.add(mesh.node(w[a]), mesh.node(w[bb]), base * (a == bb ? 2.0 : 1.0));
  }
  return csr_from_coo(b);
}

Vec cell_load(const Mesh& mesh, const Geometry& geo, const Vec& p_cell, int jobs) {
  if (int(p_cell.size()) != mesh.nc) fail_usage("cell load length mismatch");
  const int m = mesh.dim + 1;
  Vec le(mesh.nc);
  parallel_for(mesh.nc, jobs, [&](int c) {
    CellGeom cg;
    cell_geom(mesh, geo, c, cg);
    le[c] = p_cell[c] * cg.s * cg.vol / m;
  });
  Vec out(mesh.nn, 0.0);
  parallel_for(mesh.nn, jobs, [&](int i) {
    double t = 0;
    for (int k = mesh.inc_ptr[i]; k < mesh.inc_ptr[i + 1]; ++k) t += le[mesh.inc[k].first];
    out[i] = t;
  });
  return out;
}

Vec facet_load(const Mesh& mesh, const Geometry& geo, const Vec& q_facet, BoundaryRole role) {
  if (q_facet.size() != mesh.boundary.size()) fail_usage("facet load length mismatch");
  Vec out(mesh.nn, 0.0);
  int w[3];
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f) {
    const Facet& fc = mesh.boundary[f];
    if (fc.role != role) continue;
    if (q_facet[f] == 0.0) continue;
    int cnt = mesh.facet_verts(fc, w);
    double r = q_facet[f] * facet_area_one(mesh, geo, fc) / cnt;
    for (int a = 0; a < cnt; ++a) out[mesh.node(w[a])] += r;
  }
  return out;
}

Forms build_forms(const Mesh& mesh, const Geometry& geo, int jobs) {
  Forms fo;
  fo.nn = mesh.nn;
  fo.dim = mesh.dim;
  fo.K = assemble_stiffness(mesh, geo, jobs);
  fo.M1 = assemble_mass(mesh, geo, nullptr, jobs);
  fo.B1 = assemble_boundary_mass(mesh, geo, nullptr, BoundaryRole::outer);
  fo.mlump = fo.M1.row_sums();
  fo.blump = fo.B1.rows ? fo.B1.row_sums() : Vec(mesh.nn, 0.0);
  fo.outer_dof.assign(mesh.nn, 0);
  int w[3];
  for (const Facet& f : mesh.boundary) {
    if (f.role != BoundaryRole::outer) continue;
    int cnt = mesh.facet_verts(f, w);
    for (int a = 0; a < cnt; ++a) fo.outer_dof[mesh.node(w[a])] = 1;
  }
  return fo;
}

Vec apply_stiffness_exact(const Mesh& mesh, const Geometry& geo, const Vec& u, int jobs) {
  if (int(u.size()) != mesh.nn) fail_usage("stiffness apply length mismatch");
  const int m = mesh.dim + 1;
  std::vector<double> ke(std::size_t(mesh.nc) * m * m);
  parallel_for(mesh.nc, jobs, [&](int c) { stiffness_elem(mesh, geo, c, &ke[std::size_t(c) * m * m]); });
  Vec out(mesh.nn, 0.0);
  parallel_for(mesh.nn, jobs, [&](int i) {
    double acc = 0;
    const double ui = u[i];
    for (int k = mesh.inc_ptr[i]; k < mesh.inc_ptr[i + 1]; ++k) {
      const int c = mesh.inc[k].first;
      const int lv = mesh.inc[k].second;
      const int* cv = mesh.cell_verts(c);
      const double* row = &ke[std::size_t(c) * m * m + std::size_t(lv) * m];
      for (int b = 0; b < m; ++b) acc += row[b] * (u[mesh.node(cv[b])] - ui);
    }
    out[i] = acc;
  });
  return out;
}

Vec neg_laplacian(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& u,
                  LaplaceKind kind, int jobs) {
  Vec ku = apply_stiffness_exact(mesh, geo, u, jobs);
  if (kind == LaplaceKind::lumped) {
    for (int i = 0; i < mesh.nn; ++i) ku[i] /= forms.mlump[i];
    return ku;
  }
  SpdSolveResult r = solve_spd(forms.M1, ku, 1e-12, jobs);
  return r.x;
}

BoundaryFlux boundary_flux(const Mesh& mesh, const Geometry& geo, const Vec& u) {
  if (int(u.size()) != mesh.nn) fail_usage("flux input length mismatch");
  const int d = mesh.dim;
  BoundaryFlux bf;
  bf.facet.assign(mesh.boundary.size(), 0.0);
  bf.nodal.assign(mesh.nn, 0.0);
  bf.on_outer.assign(mesh.nn, 0);
  Vec wsum(mesh.nn, 0.0);
  int w[3];
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f) {
    const Facet& fc = mesh.boundary[f];
    if (fc.role != BoundaryRole::outer) continue;
    CellGeom cg;
    cell_geom(mesh, geo, fc.cell, cg);
    const int* cv = mesh.cell_verts(fc.cell);
    const double u0 = u[mesh.node(cv[0])];
    double grad[3] = {0, 0, 0};
    for (int k = 1; k <= d; ++k) {
      double du = u[mesh.node(cv[k])] - u0;
      for (int i = 0; i < d; ++i) grad[i] += du * cg.grad[k - 1][i];
    }
    // omega = -grad(lambda_opp): chart covector of the outward direction
    double omega[3] = {0, 0, 0};
    if (fc.opp == 0) {
      for (int k = 1; k <= d; ++k)
        for (int i = 0; i < d; ++i) omega[i] += cg.grad[k - 1][i];
    } else {
      for (int i = 0; i < d; ++i) omega[i] = -cg.grad[fc.opp - 1][i];
    }
    double num = 0, nrm = 0;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        num += omega[i] * cg.ginv[i * d + j] * grad[j];
        nrm += omega[i] * cg.ginv[i * d + j] * omega[j];
      }
    double flux = num / std::sqrt(nrm);
    bf.facet[f] = flux;
    double area = facet_area_one(mesh, geo, fc);
    int cnt = mesh.facet_verts(fc, w);
    for (int a = 0; a < cnt; ++a) {
      int nd = mesh.node(w[a]);
      bf.on_outer[nd] = 1;
      bf.nodal[nd] += area * flux;
      wsum[nd] += area;
    }
  }
  for (int i = 0; i < mesh.nn; ++i)
    if (bf.on_outer[i]) bf.nodal[i] /= wsum[i];
  return bf;
}

ConformalCurvature curvatures_after_conformal(const Mesh& mesh, const Geometry& geo, const Forms& forms,
                                              const Vec& u, int n, LaplaceKind kind, int jobs) {
  ConformalConstants cc = conformal_constants(n);
  for (int i = 0; i < mesh.nn; ++i)
    if (!(u[i] > 0)) fail_hypothesis("conformal factor must be positive");
  Vec lap = neg_laplacian(mesh, geo, forms, u, kind, jobs);
  // The reaction uses the dof average of per-cell R, the representation the
  // weighted forms induce. Vertex-sampled R differs from it at second order,
  // and u^{-p} magnifies that gap beyond meaning when u is small.
  Vec rbar = dof_average_cells(mesh, geo, cell_average(mesh, geo.R));
  ConformalCurvature out;
  out.R_new.assign(mesh.nn, 0.0);
  for (int i = 0; i < mesh.nn; ++i)
    out.R_new[i] = std::pow(u[i], -cc.p_int) * (cc.a * lap[i] + rbar[i] * u[i]);
  BoundaryFlux bf = boundary_flux(mesh, geo, u);
  out.flux_facet = bf.facet;
  out.H_facet.assign(mesh.boundary.size(), 0.0);
  out.H_nodal.assign(mesh.nn, 0.0);
  Vec wsum(mesh.nn, 0.0);
  const double bcoef = 2.0 / (n - 2);
  int w[3];
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f) {
    const Facet& fc = mesh.boundary[f];
    if (fc.role != BoundaryRole::outer) continue;
    int cnt = mesh.facet_verts(fc, w);
    double uf = 0;
    for (int a = 0; a < cnt; ++a) uf += u[mesh.node(w[a])];
    uf /= cnt;
    out.H_facet[f] = std::pow(uf, -cc.p_bdy) * (bcoef * bf.facet[f] + geo.Hfacet[f] * uf);
    double area = facet_area_one(mesh, geo, fc);
    for (int a = 0; a < cnt; ++a) {
      int nd = mesh.node(w[a]);
      out.H_nodal[nd] += area * out.H_facet[f];
      wsum[nd] += area;
    }
  }
  for (int i = 0; i < mesh.nn; ++i)
    if (wsum[i] > 0) out.H_nodal[i] /= wsum[i];
  return out;
}

ConstrainedSolver::ConstrainedSolver(const Csr& a, std::vector<uint8_t> fixed, int jobs)
    : fixed_(std::move(fixed)), jobs_(jobs) {
  if (int(fixed_.size()) != a.rows) fail_usage("constraint mask length mismatch");
  std::vector<uint8_t> keep(fixed_.size());
  for (std::size_t i = 0; i < fixed_.size(); ++i) keep[i] = fixed_[i] ? 0 : 1;
  a_ff_ = csr_restrict(a, keep, &free_index_);
  nfree_ = a_ff_.rows;
  free_list_.clear();
  for (int i = 0; i < a.rows; ++i)
    if (!fixed_[i]) free_list_.push_back(i);
  cptr.assign(nfree_ + 1, 0);
  for (int fi = 0; fi < nfree_; ++fi) {
    int i = free_list_[fi];
    for (int k = a.ptr[i]; k < a.ptr[i + 1]; ++k)
      if (fixed_[a.col[k]]) ++cptr[fi + 1];
  }
  for (int fi = 0; fi < nfree_; ++fi) cptr[fi + 1] += cptr[fi];
  ccol.resize(cptr[nfree_]);
  cval.resize(cptr[nfree_]);
  std::vector<std::size_t> at(cptr.begin(), cptr.end() - 1);
  for (int fi = 0; fi < nfree_; ++fi) {
    int i = free_list_[fi];
    for (int k = a.ptr[i]; k < a.ptr[i + 1]; ++k)
      if (fixed_[a.col[k]]) {
        ccol[at[fi]] = a.col[k];
        cval[at[fi]] = a.val[k];
        ++at[fi];
      }
  }
  if (nfree_ > 0 && nfree_ <= kDirectSolveLimit) {
    direct_ = std::make_unique<DirectSolver>();
    direct_->factor(a_ff_);
    if (direct_->negative_pivots() > 0) fail_numeric("constrained matrix not positive definite");
  }
}

Vec ConstrainedSolver::solve(const Vec& rhs, const Vec& fixed_values) const {
  const int n = int(fixed_.size());
  if (int(rhs.size()) != n || int(fixed_values.size()) != n) fail_usage("constrained solve length mismatch");
  Vec out(n, 0.0);
  for (int i = 0; i < n; ++i)
    if (fixed_[i]) out[i] = fixed_values[i];
  if (nfree_ == 0) return out;
  Vec r(nfree_);
  for (int fi = 0; fi < nfree_; ++fi) {
    double t = rhs[free_list_[fi]];
    for (std::size_t k = cptr[fi]; k < cptr[fi + 1]; ++k) t -= cval[k] * fixed_values[ccol[k]];
    r[fi] = t;
  }
  Vec x;
  if (direct_) {
    x = direct_->solve(r);
    report_.method = "ldlt";
    report_.iterations = 0;
    report_.relative_residual = 0.0;
    report_.converged = true;
  } else {
    x.assign(nfree_, 0.0);
    CgOpts opts;
    opts.jobs = jobs_;
    report_ = cg_jacobi(a_ff_, r, x, opts);
  }
  for (int fi = 0; fi < nfree_; ++fi) out[free_list_[fi]] = x[fi];
  return out;
}

}  // namespace conformal
