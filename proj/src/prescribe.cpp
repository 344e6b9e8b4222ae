#include "conformal/prescribe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <queue>

#include "conformal/deform.hpp"
#include "conformal/sparse.hpp"

namespace conformal {

namespace {

double maxabs(const Vec& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

struct NodalTargets {
  Vec rbar;  // dof average of cell-averaged scalar curvature
  Vec fbar;  // dof average of the cell target
  Vec hbar;  // area-weighted dof average of the facet target, zero off outer
  Vec capH;  // same averaging applied to the metric's facet mean curvature
};

NodalTargets nodal_targets(const Mesh& mesh, const Geometry& geo, const Vec& f_cell, const Vec& h_facet) {
  if (int(f_cell.size()) != mesh.nc) fail_usage("cell target size mismatch");
  if (h_facet.size() != mesh.boundary.size()) fail_usage("facet target size mismatch");
  NodalTargets t;
  t.rbar = dof_average_cells(mesh, geo, cell_average(mesh, geo.R));
  t.fbar = dof_average_cells(mesh, geo, f_cell);
  t.hbar = dof_average_facets(mesh, geo, h_facet);
  t.capH = dof_average_facets(mesh, geo, geo.Hfacet);
  return t;
}

struct Shifts {
  double lambda = 0;
  double lambda_b = 0;
};

// Minimal shift making u -> f u^p + lambda u nondecreasing on the bracket.
// No safety factor: sharpness is what lets an exact fixed point converge in a
// couple of steps. The clamp keeps the shifted reaction diagonal nonnegative.
Shifts pick_shifts(const NodalTargets& t, const ConformalConstants& cc, double u_plus) {
  Shifts s;
  s.lambda = cc.p_int * maxabs(t.fbar) * std::pow(u_plus, cc.p_int - 1);
  double min_r = 0;
  for (double r : t.rbar) min_r = std::min(min_r, r);
  s.lambda = std::max(s.lambda, -min_r);
  s.lambda_b = cc.p_bdy * maxabs(t.hbar) * std::pow(u_plus, cc.p_bdy - 1);
  double min_h = 0;
  for (double x : t.capH) min_h = std::min(min_h, x);
  s.lambda_b = std::max(s.lambda_b, -min_h);
  return s;
}

Csr iteration_matrix(const Forms& forms, const NodalTargets& t, const ConformalConstants& cc,
                     const Shifts& s) {
  Csr a = forms.K;
  for (double& v : a.val) v *= cc.a;
  Vec d(forms.nn, 0.0);
  for (int i = 0; i < forms.nn; ++i)
    d[i] = forms.mlump[i] * (t.rbar[i] + s.lambda) + cc.kappa * forms.blump[i] * (t.capH[i] + s.lambda_b);
  return csr_add_diag(a, d);
}

void iteration_rhs(const Forms& forms, const NodalTargets& t, const ConformalConstants& cc,
                   const Shifts& s, const Vec& u, Vec& rhs) {
  rhs.assign(forms.nn, 0.0);
  for (int i = 0; i < forms.nn; ++i) {
    double ui = u[i];
    rhs[i] = forms.mlump[i] * (t.fbar[i] * std::pow(ui, cc.p_int) + s.lambda * ui) +
             cc.kappa * forms.blump[i] * (t.hbar[i] * std::pow(ui, cc.p_bdy) + s.lambda_b * ui);
  }
}

}  // namespace

SandwichBounds compute_bounds(const Mesh& mesh, const Geometry& geo, const Vec& f_cell,
                              const Vec& h_facet, BoundaryCase bc, int n, double margin) {
  ConformalConstants cc = conformal_constants(n);
  if (!(margin > 0) || margin >= 1) fail_usage("margin must lie in (0,1)");
  NodalTargets t = nodal_targets(mesh, geo, f_cell, h_facet);

  double sup_R = -std::numeric_limits<double>::infinity(), inf_R = std::numeric_limits<double>::infinity();
  for (double r : t.rbar) {
    sup_R = std::max(sup_R, r);
    inf_R = std::min(inf_R, r);
  }
  double sup_f = -std::numeric_limits<double>::infinity(), inf_f = std::numeric_limits<double>::infinity();
  for (double f : t.fbar) {
    sup_f = std::max(sup_f, f);
    inf_f = std::min(inf_f, f);
  }
  if (!(sup_R < 0)) fail_hypothesis("scalar curvature must be strictly negative for the bracket");
  if (!(sup_f < 0)) fail_hypothesis("target scalar curvature must be strictly negative");

  double sup_H = -std::numeric_limits<double>::infinity(), inf_H = std::numeric_limits<double>::infinity();
  double sup_h = -std::numeric_limits<double>::infinity(), inf_h = std::numeric_limits<double>::infinity();
  int outer = 0;
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f) {
    if (mesh.boundary[f].role != BoundaryRole::outer) continue;
    ++outer;
    sup_H = std::max(sup_H, geo.Hfacet[f]);
    inf_H = std::min(inf_H, geo.Hfacet[f]);
    sup_h = std::max(sup_h, h_facet[f]);
    inf_h = std::min(inf_h, h_facet[f]);
  }
  double hscale = 1 + maxabs(geo.Hfacet) + maxabs(h_facet);
  double um = std::pow(sup_R / inf_f, 1.0 / cc.p_conf);
  double up = std::pow(inf_R / sup_f, 1.0 / cc.p_conf);
  if (bc == BoundaryCase::geodesic) {
    if (outer > 0 && std::max(std::abs(sup_H), std::abs(inf_H)) > 1e-12 * hscale)
      fail_hypothesis("mean curvature must vanish on the retained boundary for the geodesic case");
    if (outer > 0 && std::max(std::abs(sup_h), std::abs(inf_h)) > 1e-12 * hscale)
      fail_hypothesis("boundary target must vanish for the geodesic case");
  } else {
    if (outer == 0) fail_hypothesis("the pinched case needs a retained boundary");
    if (!(inf_H > 0)) fail_hypothesis("mean curvature must be positively pinched on the retained boundary");
    if (!(inf_h > 0)) fail_hypothesis("boundary target must be positively pinched");
    um = std::min(um, std::pow(inf_H / sup_h, 2.0 / cc.p_conf));
    up = std::max(up, std::pow(sup_H / inf_h, 2.0 / cc.p_conf));
  }

  SandwichBounds b;
  b.margin = margin;
  b.u_minus = std::min(um, 1.0) * (1 - margin);
  b.u_plus = std::max(up, 1.0) * (1 + margin);
  bool ok = b.u_minus > 0 && b.u_minus < 1 && b.u_plus > 1 && std::isfinite(b.u_plus);
  ok = ok && std::pow(b.u_minus, cc.p_conf) * inf_f >= sup_R;
  ok = ok && std::pow(b.u_plus, cc.p_conf) * sup_f <= inf_R;
  if (bc == BoundaryCase::pinched && outer > 0) {
    ok = ok && std::pow(b.u_minus, cc.p_conf / 2) * sup_h <= inf_H;
    ok = ok && std::pow(b.u_plus, cc.p_conf / 2) * inf_h >= sup_H;
  }
  if (!ok) fail_numeric("bracket inequalities cannot be satisfied with the requested margin");
  return b;
}

Vec monotone_solve(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& f_cell,
                   const Vec& h_facet, const SandwichBounds& bounds, StartSide side, int n, double tol,
                   IterationTrace* trace, int maxit, int jobs) {
  ConformalConstants cc = conformal_constants(n);
  if (forms.nn != mesh.nn) fail_usage("forms do not belong to the mesh");
  if (!(tol > 0)) fail_usage("increment tolerance must be positive");
  if (!(bounds.u_minus > 0) || !(bounds.u_minus < 1) || !(bounds.u_plus > 1))
    fail_usage("bracket constants must straddle the cut value 1");
  NodalTargets t = nodal_targets(mesh, geo, f_cell, h_facet);

  std::vector<std::uint8_t> fixed = dofs_on_role(mesh, BoundaryRole::cut);
  Vec ones(mesh.nn, 1.0);
  IterationTrace local;
  IterationTrace& tr = trace ? *trace : local;
  tr = IterationTrace{};

  Shifts s = pick_shifts(t, cc, bounds.u_plus);
  for (int attempt = 0;; ++attempt) {
    Csr a = iteration_matrix(forms, t, cc, s);
    ConstrainedSolver solver(a, fixed, jobs);
    tr.lambda = s.lambda;
    tr.lambda_b = s.lambda_b;
    tr.rows.clear();
    tr.monotone = true;
    tr.sandwich_ok = true;

    Vec u(mesh.nn, side == StartSide::lower ? bounds.u_minus : bounds.u_plus);
    Vec rhs, unew;
    bool escaped = false, converged = false;
    for (int m = 1; m <= maxit; ++m) {
      iteration_rhs(forms, t, cc, s, u, rhs);
      unew = solver.solve(rhs, ones);
      IterationRow row;
      row.m = m;
      row.min_u = *std::min_element(unew.begin(), unew.end());
      row.max_u = *std::max_element(unew.begin(), unew.end());
      row.min_step = std::numeric_limits<double>::infinity();
      row.max_step = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < mesh.nn; ++i) {
        double d = unew[i] - u[i];
        row.min_step = std::min(row.min_step, d);
        row.max_step = std::max(row.max_step, d);
      }
      row.increment = std::max(std::abs(row.min_step), std::abs(row.max_step));
      tr.rows.push_back(row);
      if ((side == StartSide::lower && row.min_step < -1e-12) ||
          (side == StartSide::upper && row.max_step > 1e-12)) {
        tr.monotone = false;
        fail_numeric("iteration step lost monotonicity");
      }
      if (row.min_u < bounds.u_minus - 1e-12 || row.max_u > bounds.u_plus + 1e-12) {
        tr.sandwich_ok = false;
        escaped = true;
        break;
      }
      u.swap(unew);
      if (row.increment <= tol) {
        converged = true;
        break;
      }
    }
    if (escaped) {
      if (attempt > 0) fail_numeric("iterates escaped the bracket after a doubled shift retry");
      s.lambda *= 2;
      s.lambda_b *= 2;
      tr.retries = 1;
      continue;
    }
    if (!converged) fail_numeric("monotone iteration exhausted its budget before the increment tolerance");
    iteration_rhs(forms, t, cc, s, u, rhs);
    unew = solver.solve(rhs, ones);
    double res = 0;
    for (int i = 0; i < mesh.nn; ++i) res = std::max(res, std::abs(unew[i] - u[i]));
    tr.residual = res;
    if (res > 10 * tol) fail_numeric("stationary residual exceeds its tolerance after convergence");
    return u;
  }
}

ExhaustionSolution exhaustion_solve(const Mesh& ambient, const Geometry& geo, const Exhaustion& exh,
                                    const Vec& f_cell, const Vec& h_facet,
                                    const std::vector<int>& x_cells, BoundaryCase bc, int n, double tol,
                                    double margin, int jobs) {
  if (exh.ambient != &ambient) fail_usage("exhaustion does not belong to the ambient mesh");
  if (exh.levels() == 0) fail_usage("exhaustion has no domains");
  if (int(f_cell.size()) != ambient.nc) fail_usage("cell target size mismatch");
  if (h_facet.size() != ambient.boundary.size()) fail_usage("facet target size mismatch");
  if (x_cells.empty()) fail_usage("comparison window is empty");
  for (int c : x_cells)
    if (!std::binary_search(exh.cells[0].begin(), exh.cells[0].end(), c))
      fail_usage("the comparison window must lie inside the first domain");

  ExhaustionSolution sol;
  for (int c : x_cells) {
    const int* cv = ambient.cell_verts(c);
    for (int a = 0; a <= ambient.dim; ++a) sol.x_dofs.push_back(ambient.node(cv[a]));
  }
  std::sort(sol.x_dofs.begin(), sol.x_dofs.end());
  sol.x_dofs.erase(std::unique(sol.x_dofs.begin(), sol.x_dofs.end()), sol.x_dofs.end());

  for (int k = 0; k < exh.levels(); ++k) {
    const Submesh& sub = exh.level[k];
    Geometry gsub = restrict_geometry(geo, sub);
    Vec fsub(sub.mesh.nc, 0.0);
    for (int c = 0; c < sub.mesh.nc; ++c) fsub[c] = f_cell[sub.parent_cell[c]];
    Vec hsub(sub.mesh.boundary.size(), 0.0);
    for (std::size_t f = 0; f < sub.mesh.boundary.size(); ++f)
      if (sub.facet_parent[f] >= 0) hsub[f] = h_facet[sub.facet_parent[f]];

    sol.bounds.push_back(compute_bounds(sub.mesh, gsub, fsub, hsub, bc, n, margin));
    Forms forms = build_forms(sub.mesh, gsub, jobs);
    IterationTrace trk;
    Vec uk = monotone_solve(sub.mesh, gsub, forms, fsub, hsub, sol.bounds.back(), StartSide::lower, n,
                            tol, &trk, 10000, jobs);
    sol.traces.push_back(std::move(trk));

    std::vector<int> amb2sub(ambient.nn, -1);
    for (int i = 0; i < sub.mesh.nn; ++i) amb2sub[sub.parent_node[i]] = i;
    Vec ux(sol.x_dofs.size(), 0.0);
    for (std::size_t j = 0; j < sol.x_dofs.size(); ++j) {
      int si = amb2sub[sol.x_dofs[j]];
      if (si < 0) fail_usage("the comparison window leaves a domain of the exhaustion");
      ux[j] = uk[si];
    }
    sol.u_on_x.push_back(std::move(ux));
    sol.u.push_back(std::move(uk));
  }

  for (int k = 0; k + 1 < exh.levels(); ++k) {
    double d = 0;
    for (std::size_t j = 0; j < sol.x_dofs.size(); ++j)
      d = std::max(d, std::abs(sol.u_on_x[k + 1][j] - sol.u_on_x[k][j]));
    sol.diff_sup.push_back(d);
  }
  for (std::size_t k = 1; k + 1 < sol.diff_sup.size(); ++k)
    if (!(sol.diff_sup[k + 1] < sol.diff_sup[k])) sol.diffs_tail_decreasing = false;

  sol.limit_on_x = sol.u_on_x.back();
  sol.limit_min = *std::min_element(sol.limit_on_x.begin(), sol.limit_on_x.end());
  sol.limit_max = *std::max_element(sol.limit_on_x.begin(), sol.limit_on_x.end());
  return sol;
}

UniformityReport bound_check(const ExhaustionSolution& sol) {
  if (sol.u_on_x.empty()) fail_usage("no domain solutions to check");
  UniformityReport rep;
  double run = -std::numeric_limits<double>::infinity();
  for (const Vec& ux : sol.u_on_x) {
    double mx = *std::max_element(ux.begin(), ux.end());
    rep.max_on_x.push_back(mx);
    run = std::max(run, mx);
    rep.running_max.push_back(run);
  }
  rep.growth_alarm = rep.running_max.back() > 2 * rep.max_on_x.front();
  return rep;
}

PrescriptionResidual verify_prescription(const Mesh& mesh, const Geometry& geo, const Forms& forms,
                                         const Vec& u, const Vec& f_cell, const Vec& h_facet, int n,
                                         LaplaceKind kind, int jobs) {
  ConformalConstants cc = conformal_constants(n);
  if (int(f_cell.size()) != mesh.nc) fail_usage("cell target size mismatch");
  if (h_facet.size() != mesh.boundary.size()) fail_usage("facet target size mismatch");
  ConformalCurvature cur = curvatures_after_conformal(mesh, geo, forms, u, n, kind, jobs);
  Vec fbar = dof_average_cells(mesh, geo, f_cell);

  PrescriptionResidual out;
  out.min_u = *std::min_element(u.begin(), u.end());

  std::vector<std::uint8_t> on_bdy(mesh.nn, 0);
  std::vector<std::uint8_t> on_cut = dofs_on_role(mesh, BoundaryRole::cut);
  std::vector<std::uint16_t> outer_groups(mesh.nn, 0);
  int fv[3];
  for (const Facet& f : mesh.boundary) {
    int cnt = mesh.facet_verts(f, fv);
    for (int a = 0; a < cnt; ++a) {
      int i = mesh.node(fv[a]);
      on_bdy[i] = 1;
      if (f.role == BoundaryRole::outer && f.axis >= 0)
        outer_groups[i] |= std::uint16_t(1u << (2 * f.axis + f.side));
    }
  }
  std::vector<int> seeds;
  for (int i = 0; i < mesh.nn; ++i)
    if (on_cut[i]) seeds.push_back(i);
  std::vector<int> dist = bfs_hops(mesh, seeds);

  out.r_abs.assign(mesh.nn, 0.0);
  out.r_used.assign(mesh.nn, 0);
  for (int i = 0; i < mesh.nn; ++i) {
    bool inc = !on_bdy[i] && (dist[i] < 0 || dist[i] >= 2);
    if (!inc) continue;
    out.r_used[i] = 1;
    out.r_abs[i] = std::abs(cur.R_new[i] - fbar[i]);
    out.r_max = std::max(out.r_max, out.r_abs[i]);
  }

  out.h_abs.assign(mesh.boundary.size(), 0.0);
  out.h_used.assign(mesh.boundary.size(), 0);
  double hscale = 1 + maxabs(geo.Hfacet) + maxabs(h_facet);
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f) {
    const Facet& fc = mesh.boundary[f];
    if (fc.role != BoundaryRole::outer) continue;
    int cnt = mesh.facet_verts(fc, fv);
    double uf = 0;
    bool clean = fc.axis >= 0;
    std::uint16_t own = clean ? std::uint16_t(1u << (2 * fc.axis + fc.side)) : 0;
    for (int a = 0; a < cnt; ++a) {
      int i = mesh.node(fv[a]);
      uf += u[i];
      if (on_cut[i] || (outer_groups[i] & ~own)) clean = false;
    }
    uf /= cnt;
    if (h_facet[f] * std::pow(uf, cc.p_conf / 2) > geo.Hfacet[f] + 1e-12 * hscale) ++out.pinch_violations;
    if (!clean) continue;
    out.h_used[f] = 1;
    out.h_abs[f] = std::abs(cur.H_facet[f] - h_facet[f]);
    out.h_max = std::max(out.h_max, out.h_abs[f]);
  }
  return out;
}

PathRatioReport completeness_check(const Mesh& mesh, const Geometry& geo, const Vec& u, double c2,
                                   int n, const std::vector<std::pair<int, int>>& pairs) {
  ConformalConstants cc = conformal_constants(n);
  if (pairs.empty()) fail_usage("no sample pairs");
  if (!(c2 > 0)) fail_usage("the certified lower bound must be positive");
  for (double x : u)
    if (x < c2) fail_hypothesis("the factor drops below its certified lower bound");

  // Edge graph with lengths under g and under the deformed metric; the edge
  // factor is the factor's midpoint value to the half conformal power.
  std::map<std::pair<int, int>, std::pair<double, double>> edges;
  const int m = mesh.dim + 1;
  for (int c = 0; c < mesh.nc; ++c) {
    const int* cv = mesh.cell_verts(c);
    for (int a = 0; a < m; ++a)
      for (int b = a + 1; b < m; ++b) {
        int va = cv[a], vb = cv[b];
        int i = mesh.node(va), j = mesh.node(vb);
        std::pair<int, int> key{std::min(i, j), std::max(i, j)};
        if (edges.count(key)) continue;
        const double* xa = mesh.vert_coord(va);
        const double* xb = mesh.vert_coord(vb);
        const double* ga = geo.gv(va);
        const double* gb = geo.gv(vb);
        double q = 0;
        for (int r = 0; r < mesh.dim; ++r)
          for (int s = 0; s < mesh.dim; ++s)
            q += (xb[r] - xa[r]) * 0.5 * (ga[r * mesh.dim + s] + gb[r * mesh.dim + s]) * (xb[s] - xa[s]);
        double len = std::sqrt(std::max(q, 0.0));
        double fac = std::pow(0.5 * (u[i] + u[j]), cc.p_conf / 2);
        edges[key] = {len, len * fac};
      }
  }
  std::vector<std::vector<std::pair<int, std::pair<double, double>>>> adj(mesh.nn);
  for (const auto& e : edges) {
    adj[e.first.first].push_back({e.first.second, e.second});
    adj[e.first.second].push_back({e.first.first, e.second});
  }
  auto dijkstra = [&](int src, bool deformed) {
    Vec dist(mesh.nn, std::numeric_limits<double>::infinity());
    std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>, std::greater<>> pq;
    dist[src] = 0;
    pq.push({0.0, src});
    while (!pq.empty()) {
      auto [d, i] = pq.top();
      pq.pop();
      if (d > dist[i]) continue;
      for (const auto& [j, len] : adj[i]) {
        double w = deformed ? len.second : len.first;
        if (d + w < dist[j]) {
          dist[j] = d + w;
          pq.push({dist[j], j});
        }
      }
    }
    return dist;
  };

  PathRatioReport rep;
  rep.threshold = std::pow(c2, cc.p_conf / 2);
  rep.min_ratio = std::numeric_limits<double>::infinity();
  for (const auto& [sraw, traw] : pairs) {
    if (sraw < 0 || sraw >= mesh.nn || traw < 0 || traw >= mesh.nn || sraw == traw)
      fail_usage("sample pair is out of range or degenerate");
    Vec dg = dijkstra(sraw, false);
    Vec dh = dijkstra(sraw, true);
    if (!std::isfinite(dg[traw]) || dg[traw] <= 0) fail_numeric("sample pair is disconnected in the edge graph");
    double ratio = dh[traw] / dg[traw];
    rep.ratios.push_back(ratio);
    rep.min_ratio = std::min(rep.min_ratio, ratio);
  }
  return rep;
}

}  // namespace conformal
