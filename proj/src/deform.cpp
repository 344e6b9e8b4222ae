#include "conformal/deform.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace conformal {

namespace {

double maxabs(const Vec& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double quad_form(const Csr& a, const Vec& v, int jobs) {
  Vec av = a.apply(v, jobs);
  return dot(v, av);
}

}  // namespace

Vec dof_average_facets(const Mesh& mesh, const Geometry& geo, const Vec& facet_field,
                       std::vector<std::uint8_t>* on_outer) {
  if (facet_field.size() != mesh.boundary.size()) fail_usage("facet field size mismatch");
  Vec areas = facet_areas(mesh, geo);
  Vec num(mesh.nn, 0.0), den(mesh.nn, 0.0);
  int fv[3];
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f) {
    if (mesh.boundary[f].role != BoundaryRole::outer) continue;
    int k = mesh.facet_verts(mesh.boundary[f], fv);
    for (int j = 0; j < k; ++j) {
      int i = mesh.node(fv[j]);
      num[i] += areas[f] * facet_field[f];
      den[i] += areas[f];
    }
  }
  if (on_outer) {
    on_outer->assign(mesh.nn, 0);
    for (int i = 0; i < mesh.nn; ++i) (*on_outer)[i] = den[i] > 0 ? 1 : 0;
  }
  Vec out(mesh.nn, 0.0);
  for (int i = 0; i < mesh.nn; ++i)
    if (den[i] > 0) out[i] = num[i] / den[i];
  return out;
}

WeightSpec build_weight(const Mesh& mesh, const Geometry& geo, const Exhaustion& exh, const Vec& f_cell,
                        const Vec& h_facet, WeightKind kind, const WeightOpts& opts) {
  if (exh.ambient != &mesh) fail_usage("exhaustion does not belong to this mesh");
  if (exh.levels() == 0) fail_usage("empty exhaustion");
  if (int(f_cell.size()) != mesh.nc) fail_usage("cell weight size mismatch");
  if (h_facet.size() != mesh.boundary.size()) fail_usage("facet weight size mismatch");
  if (int(exh.cells.back().size()) != mesh.nc) fail_hypothesis("exhaustion must cover the mesh at its last level");

  std::vector<std::uint8_t> seed_cell(mesh.nc, 0);
  for (int c : exh.cells[0]) seed_cell[c] = 1;
  std::vector<std::uint8_t> seed_facet(mesh.boundary.size(), 0);
  for (int f : exh.outer_facets(0)) seed_facet[f] = 1;

  double floor_f = -1e-10 * (1 + maxabs(f_cell));
  for (int c = 0; c < mesh.nc; ++c)
    if (!seed_cell[c] && f_cell[c] < floor_f) {
      std::ostringstream os;
      os << "negative interior weight outside the seed domain (cell " << c << ")";
      fail_hypothesis(os.str());
    }
  double floor_h = -1e-10 * (1 + maxabs(h_facet));
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f)
    if (mesh.boundary[f].role == BoundaryRole::outer && !seed_facet[f] && h_facet[f] < floor_h) {
      std::ostringstream os;
      os << "negative boundary weight outside the seed domain (facet " << f << ")";
      fail_hypothesis(os.str());
    }

  WeightSpec spec;
  spec.kind = kind;
  EigenOpts eo = opts.eigen;
  eo.jobs = opts.jobs;
  for (int j = 0; j < exh.levels(); ++j) {
    const Submesh& sub = exh.level[j];
    Geometry sgeo = restrict_geometry(geo, sub);
    Forms sf = build_forms(sub.mesh, sgeo, opts.jobs);
    Vec fs(sub.mesh.nc);
    for (int c = 0; c < sub.mesh.nc; ++c) fs[c] = f_cell[sub.parent_cell[c]];
    Vec hs(sub.mesh.boundary.size(), 0.0);
    for (std::size_t f = 0; f < hs.size(); ++f)
      if (sub.facet_parent[f] >= 0) hs[f] = h_facet[sub.facet_parent[f]];
    Csr a = eigen_lhs(sub.mesh, sgeo, sf, &fs, &hs, opts.jobs);
    EigenResult r = kind == WeightKind::boundary ? smallest_boundary_pencil(a, sf, nullptr, eo)
                                                 : smallest_volume_pencil(a, sf, eo);
    spec.level_eigen.push_back(r.value);
  }
  if (spec.level_eigen[0] <= 0) fail_hypothesis("seed eigenvalue not positive");
  for (int j = 0; j < exh.levels(); ++j) {
    if (spec.level_eigen[j] <= 0) {
      std::ostringstream os;
      os << "level " << j << " eigenvalue not positive";
      fail_hypothesis(os.str());
    }
    spec.coefficient.push_back(std::ldexp(spec.level_eigen[j], -(j + 1)));
  }

  if (kind == WeightKind::boundary) {
    spec.shell.assign(mesh.boundary.size(), -1);
    spec.field.assign(mesh.boundary.size(), 0.0);
    for (int j = 0; j < exh.levels(); ++j)
      for (int f : exh.boundary_shell(j)) {
        spec.shell[f] = j;
        spec.field[f] = spec.coefficient[j];
      }
    for (std::size_t f = 0; f < mesh.boundary.size(); ++f)
      if (mesh.boundary[f].role == BoundaryRole::outer && spec.shell[f] < 0)
        fail_numeric("weight carrier misses an outer facet");
  } else {
    spec.shell.assign(mesh.nc, -1);
    spec.field.assign(mesh.nc, 0.0);
    for (int j = 0; j < exh.levels(); ++j)
      for (int c : exh.cell_shell(j)) {
        spec.shell[c] = j;
        spec.field[c] = spec.coefficient[j];
      }
  }
  spec.min_on_carrier = 0;
  bool first = true;
  for (std::size_t e = 0; e < spec.shell.size(); ++e)
    if (spec.shell[e] >= 0) {
      spec.min_on_carrier = first ? spec.field[e] : std::min(spec.min_on_carrier, spec.field[e]);
      first = false;
    }

  Forms forms = build_forms(mesh, geo, opts.jobs);
  Csr a = eigen_lhs(mesh, geo, forms, &f_cell, &h_facet, opts.jobs);
  Csr wmat = kind == WeightKind::boundary ? assemble_boundary_mass(mesh, geo, &spec.field, BoundaryRole::outer)
                                          : assemble_mass(mesh, geo, &spec.field, opts.jobs);
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  bool have_margin = false;
  for (int s = 0; s < opts.samples; ++s) {
    Vec v(mesh.nn);
    for (double& x : v) x = uni(rng);
    double energy = quad_form(a, v, opts.jobs);
    double weighted = quad_form(wmat, v, opts.jobs);
    double margin = energy - weighted;
    if (!have_margin || margin < spec.spot_margin) spec.spot_margin = margin;
    have_margin = true;
    if (margin < -1e-8 * (1 + std::abs(energy))) fail_numeric("weight inequality violated by a sampled test function");
  }
  return spec;
}

namespace {

LinearField solve_linear_common(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& f_cell,
                                const Vec& h_facet, const Vec& load, const Vec* q_facet, int jobs) {
  Csr a = eigen_lhs(mesh, geo, forms, &f_cell, &h_facet, jobs);
  SpdSolveResult sol = solve_spd(a, load, 1e-12, jobs);
  LinearField lf;
  lf.u = std::move(sol.x);
  lf.report = sol.report;
  lf.min_u = lf.u.empty() ? 0 : *std::min_element(lf.u.begin(), lf.u.end());
  lf.max_u = lf.u.empty() ? 0 : *std::max_element(lf.u.begin(), lf.u.end());

  BoundaryFlux bf = boundary_flux(mesh, geo, lf.u);
  std::vector<std::uint8_t> on_outer;
  Vec hn = dof_average_facets(mesh, geo, h_facet, &on_outer);
  Vec qn(mesh.nn, 0.0);
  if (q_facet) qn = dof_average_facets(mesh, geo, *q_facet, nullptr);
  for (int i = 0; i < mesh.nn; ++i)
    if (on_outer[i]) lf.flux_residual = std::max(lf.flux_residual, std::abs(bf.nodal[i] + hn[i] * lf.u[i] - qn[i]));
  if (lf.min_u <= 0) fail_hypothesis("nonpositive minimizer: the weighted form is not coercive enough");
  return lf;
}

}  // namespace

LinearField solve_linear_robin(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& f_cell,
                               const Vec& h_facet, const Vec& q_facet, int jobs) {
  if (q_facet.size() != mesh.boundary.size()) fail_usage("boundary load size mismatch");
  Vec load = facet_load(mesh, geo, q_facet, BoundaryRole::outer);
  return solve_linear_common(mesh, geo, forms, f_cell, h_facet, load, &q_facet, jobs);
}

LinearField solve_linear_interior(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& f_cell,
                                  const Vec& h_facet, const Vec& p_cell, int jobs) {
  if (int(p_cell.size()) != mesh.nc) fail_usage("volume load size mismatch");
  Vec load = cell_load(mesh, geo, p_cell, jobs);
  return solve_linear_common(mesh, geo, forms, f_cell, h_facet, load, nullptr, jobs);
}

Vec minimize_quadratic(const Csr& a, const Vec& b, double tol, int max_iterations) {
  Vec x(b.size(), 0.0);
  Vec r = b;
  Vec p = r;
  double rr = dot(r, r);
  double bn = std::sqrt(rr);
  if (bn == 0) return x;
  for (int it = 0; it < max_iterations; ++it) {
    Vec ap = a.apply(p);
    double pap = dot(p, ap);
    if (pap <= 0) fail_numeric("descent direction lost positivity");
    double alpha = rr / pap;
    axpy(alpha, p, x);
    axpy(-alpha, ap, r);
    double rr2 = dot(r, r);
    if (std::sqrt(rr2) <= tol * bn) break;
    double beta = rr2 / rr;
    rr = rr2;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
  }
  return x;
}

FlattenResult flatten(const Mesh& mesh, const Geometry& geo, const Forms& forms, const Vec& u, const Vec& f_cell,
                      const Vec& h_facet, FlattenKind kind, int jobs) {
  if (int(u.size()) != forms.nn) fail_usage("field size mismatch");
  double min_u = *std::min_element(u.begin(), u.end());
  if (min_u <= 0) fail_hypothesis("flatten needs a strictly positive field");

  std::vector<std::uint8_t> on_outer;
  Vec hn = dof_average_facets(mesh, geo, h_facet, &on_outer);
  Vec fn = dof_average_cells(mesh, geo, f_cell);
  BoundaryFlux bf = boundary_flux(mesh, geo, u);
  Vec lap = apply_stiffness_exact(mesh, geo, u, jobs);

  // Dofs touching any boundary facet. The nodal interior certificate is
  // checked away from them, where the stiffness row carries no flux part.
  std::vector<std::uint8_t> on_bdy(forms.nn, 0);
  {
    int fv[3];
    for (const Facet& fc : mesh.boundary) {
      int k = mesh.facet_verts(fc, fv);
      for (int j = 0; j < k; ++j) on_bdy[mesh.node(fv[j])] = 1;
    }
  }

  FlattenResult res;
  FlatteningParams& par = res.params;

  // Base value and coefficient of the inequality that must survive on N.
  Vec base(forms.nn, 0.0), coef(forms.nn, 0.0);
  if (kind == FlattenKind::boundary) {
    for (int i = 0; i < forms.nn; ++i)
      if (on_outer[i]) {
        base[i] = bf.nodal[i];
        coef[i] = hn[i];
        if (hn[i] < 0) par.nodes.push_back(i);
      }
  } else {
    for (int i = 0; i < forms.nn; ++i) {
      base[i] = lap[i] / forms.mlump[i];
      coef[i] = fn[i];
      if (fn[i] < 0) par.nodes.push_back(i);
    }
  }

  auto margin_at = [&](double alpha, double c) {
    // c = 0 probes the shifted inequality itself; c > 0 also subtracts the
    // curvature of the exponential over (0, v_inf].
    double worst = 0;
    int worst_node = -1;
    for (int i : par.nodes) {
      double m = base[i] + coef[i] * (u[i] + alpha);
      if (c > 0) m -= 0.5 * c * par.v_inf * par.v_inf * std::exp(c * par.v_inf) * std::abs(coef[i]);
      if (worst_node < 0 || m < worst) {
        worst = m;
        worst_node = i;
      }
    }
    return std::make_pair(worst_node < 0 ? 1.0 : worst, worst_node);
  };

  par.alpha = 0;
  if (!par.nodes.empty()) {
    for (int k = 0; k <= 60; ++k) {
      double al = std::ldexp(min_u, -k);
      if (margin_at(al, 0).first > 0) {
        par.alpha = al;
        break;
      }
    }
    if (par.alpha == 0 && margin_at(0, 0).first <= 0) {
      std::ostringstream os;
      os << "flattening inequality fails before the exponential step at dof " << margin_at(0, 0).second;
      fail_numeric(os.str());
    }
  }

  Vec v = u;
  for (double& x : v) x += par.alpha;
  if (par.nodes.empty()) {
    par.v_inf = *std::max_element(v.begin(), v.end());
  } else {
    par.v_inf = 0;
    for (int i : par.nodes) par.v_inf = std::max(par.v_inf, v[i]);
  }

  if (par.nodes.empty() || margin_at(par.alpha, 1.0).first > 0) {
    par.c = 1.0;
  } else {
    double lo = 0, hi = 1;
    for (int step = 0; step < 60; ++step) {
      double mid = 0.5 * (lo + hi);
      if (margin_at(par.alpha, mid).first > 0)
        lo = mid;
      else
        hi = mid;
    }
    par.c = lo;
    if (par.c == 0) {
      std::ostringstream os;
      os << "flattening estimate failed at dof " << margin_at(par.alpha, hi).second;
      fail_numeric(os.str());
    }
  }

  // The estimate certifies the continuum inequality; the returned field must
  // also pass the nodal checks, so c keeps halving until they hold.
  for (par.c_halvings = 0; par.c_halvings <= 40; ++par.c_halvings) {
    res.w.assign(forms.nn, 0.0);
    for (int i = 0; i < forms.nn; ++i) res.w[i] = -std::expm1(-par.c * v[i]);
    Vec lapw = apply_stiffness_exact(mesh, geo, res.w, jobs);
    BoundaryFlux bw = boundary_flux(mesh, geo, res.w);

    double mi = 0, di = 0, mb = 0, mf = 0, scale_li = 0;
    bool have_mi = false, have_di = false, have_mb = false;
    int bad = -1;
    for (int i = 0; i < forms.nn; ++i) {
      double li = lapw[i] / forms.mlump[i] + fn[i] * res.w[i];
      if (!on_bdy[i] && fn[i] >= 0) {
        if (!have_mi || li < mi) {
          mi = li;
          if (li < 0) bad = i;
        }
        have_mi = true;
        scale_li = std::max(scale_li, std::abs(lapw[i] / forms.mlump[i]) + std::abs(fn[i] * res.w[i]));
      }
      if (fn[i] < 0) {
        if (!have_di || li < di) {
          di = li;
          if (li <= 0) bad = i;
        }
        have_di = true;
      }
      if (on_outer[i]) {
        double cb = bw.nodal[i] + hn[i] * res.w[i];
        if (!have_mb || cb < mb) {
          mb = cb;
          if (cb <= 0) bad = i;
        }
        have_mb = true;
        mf = std::max(mf, std::abs(bw.nodal[i]));
      }
    }
    par.margin_interior = have_mi ? mi : 0;
    par.defect_interior = have_di ? di : 0;
    par.margin_boundary = have_mb ? mb : 0;
    par.max_flux_abs = mf;

    double tol_i = 1e-9 * (1 + scale_li);
    bool ok;
    if (kind == FlattenKind::boundary)
      ok = (!have_mb || par.margin_boundary > 0) && par.margin_interior >= -tol_i;
    else
      ok = par.margin_interior >= -tol_i && (!have_di || par.defect_interior > 0);
    if (ok) break;
    if (par.c_halvings == 40) {
      std::ostringstream os;
      os << "flattening certificates failed at dof " << bad;
      fail_numeric(os.str());
    }
    par.c *= 0.5;
  }
  par.lower_apriori = -std::expm1(-par.c * (par.alpha > 0 ? par.alpha : min_u));
  return res;
}

namespace {

// <p, q>_g over the tangent plane of a box side: restrict both tensors to the
// side's axes and contract with the induced inverse metric.
double tangential_pair(const double* g, const double* p, const double* q, int dim, int axis) {
  int t = dim - 1;
  if (t == 0) return 0;
  int ax[3];
  int m = 0;
  for (int a = 0; a < dim; ++a)
    if (a != axis) ax[m++] = a;
  double gh[9], ph[9];
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j) {
      gh[i * t + j] = g[ax[i] * dim + ax[j]];
      ph[i * t + j] = p[ax[i] * dim + ax[j]];
    }
  double gi[9];
  sym_inv(gh, t, gi);
  double s = 0;
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j)
      for (int k = 0; k < t; ++k)
        for (int l = 0; l < t; ++l) s += gi[i * t + k] * gi[j * t + l] * ph[i * t + j] * q[k * t + l];
  return s;
}

double full_pair(const double* g, const double* p, const double* q, int dim) {
  double gi[9];
  sym_inv(g, dim, gi);
  double s = 0;
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j)
      for (int k = 0; k < dim; ++k)
        for (int l = 0; l < dim; ++l) s += gi[i * dim + k] * gi[j * dim + l] * p[i * dim + j] * q[k * dim + l];
  return s;
}

struct PencilEval {
  EigenResult r;
  Forms forms;
};

PencilEval solve_route_pencil(const Mesh& mesh, const Geometry& geo, int n, VariationRoute route,
                              const EigenOpts& eo, int jobs) {
  ConformalConstants cc = conformal_constants(n);
  PencilEval pe;
  pe.forms = build_forms(mesh, geo, jobs);
  Vec f = cell_average(mesh, geo.R);
  scal(cc.c, f);
  Vec h = geo.Hfacet;
  scal(cc.dhalf, h);
  Csr a = eigen_lhs(mesh, geo, pe.forms, &f, &h, jobs);
  pe.r = route == VariationRoute::volume ? smallest_volume_pencil(a, pe.forms, eo)
                                         : smallest_boundary_pencil(a, pe.forms, nullptr, eo);
  return pe;
}

}  // namespace

VariationResult first_variation(PerturbEngine& engine, const Perturbation& pert, const Submesh* sub, int n,
                                VariationRoute route, const VariationOpts& opts) {
  const Mesh& amb = engine.mesh();
  if (pert.dim != amb.dim || int(pert.h.size()) != amb.nv * amb.dim * amb.dim)
    fail_usage("perturbation does not match the mesh");
  const Mesh& mesh = sub ? sub->mesh : amb;
  Geometry rgeo;
  if (sub) rgeo = restrict_geometry(engine.base(), *sub);
  const Geometry& geo = sub ? rgeo : engine.base();
  if (!geo.has_ric()) fail_hypothesis("model provides no ricci tensor");

  EigenOpts eo = opts.eigen;
  eo.jobs = opts.jobs;
  PencilEval pe = solve_route_pencil(mesh, geo, n, route, eo, opts.jobs);
  if (pe.r.gap < 1e-6) fail_numeric("eigenvalue crossing at the base point");

  VariationResult out;
  out.base_eigen = pe.r.value;
  out.gap = pe.r.gap;

  Vec phi = pe.r.phi;
  const Csr& bform = route == VariationRoute::volume ? pe.forms.M1 : pe.forms.B1;
  double s = quad_form(bform, phi, opts.jobs);
  if (s <= 0) fail_numeric("eigenfunction carries no mass in the normalizing form");
  scal(1.0 / std::sqrt(s), phi);

  ConformalConstants cc = conformal_constants(n);
  int dim = mesh.dim;
  Vec vols = cell_volumes(mesh, geo);
  Vec areas = facet_areas(mesh, geo);
  auto hvert = [&](int v) { return pert.hv(sub ? sub->parent_vert[v] : v); };

  double interior = 0;
  for (int c = 0; c < mesh.nc; ++c) {
    const int* cv = mesh.cell_verts(c);
    double mean = 0;
    for (int lv = 0; lv <= dim; ++lv) {
      int v = cv[lv];
      double p = phi[mesh.node(v)];
      mean += full_pair(geo.gv(v), hvert(v), geo.ricv(v), dim) * p * p;
    }
    mean /= dim + 1;
    interior += vols[c] * mean;
  }
  out.interior_term = -cc.c * interior;

  double boundary = 0;
  int fv[3];
  for (std::size_t f = 0; f < mesh.boundary.size(); ++f) {
    const Facet& bfc = mesh.boundary[f];
    if (bfc.role != BoundaryRole::outer) continue;
    if (bfc.axis < 0) fail_numeric("outer facet without a side axis");
    int k = mesh.facet_verts(bfc, fv);
    double mean = 0;
    for (int j = 0; j < k; ++j) {
      int v = fv[j];
      double p = phi[mesh.node(v)];
      mean += tangential_pair(geo.gv(v), hvert(v), geo.af(int(f)), dim, bfc.axis) * p * p;
    }
    mean /= k;
    boundary += areas[f] * mean;
  }
  out.boundary_term = -cc.dhalf * boundary;
  out.value = out.interior_term + out.boundary_term;

  if (opts.with_fd) {
    out.t_probe = opts.t_probe;
    double eig[2];
    for (int sgn = 0; sgn < 2; ++sgn) {
      double t = sgn == 0 ? opts.t_probe : -opts.t_probe;
      Geometry ag = engine.at(pert, t);
      Geometry sg;
      if (sub) sg = restrict_geometry(ag, *sub);
      const Geometry& pg = sub ? sg : ag;
      eig[sgn] = solve_route_pencil(mesh, pg, n, route, eo, opts.jobs).r.value;
    }
    out.eig_plus = eig[0];
    out.eig_minus = eig[1];
    out.fd = (eig[0] - eig[1]) / (2 * opts.t_probe);
  }
  return out;
}

namespace {

struct RouteCfg {
  bool boundary_route = false;
  bool need_mu = true;
  bool need_sigma = false;
  bool sign_pre = true;
  bool allow_skip = true;
};

struct SeedEval {
  bool ok = false;
  bool valid = false;
  double mu = 0;
  double sigma = 0;
};

// Seed-domain eigenvalues of the geometry restricted to level 0. The volume
// pencil runs first: it certifies positivity of the whole form, without which
// the boundary pencil may be unbounded below.
SeedEval eval_seed(const Geometry& ambient_geo, const Submesh& om0, const ConformalConstants& cc, const RouteCfg& rc,
                   const PipelineOpts& opts) {
  SeedEval e;
  try {
    Geometry sg = restrict_geometry(ambient_geo, om0);
    Forms sf = build_forms(om0.mesh, sg, opts.jobs);
    Vec f = cell_average(om0.mesh, sg.R);
    scal(cc.c, f);
    Vec h = sg.Hfacet;
    scal(cc.dhalf, h);
    Csr a = eigen_lhs(om0.mesh, sg, sf, &f, &h, opts.jobs);
    EigenOpts eo = opts.eigen;
    eo.jobs = opts.jobs;
    bool ok = true;
    if (rc.need_mu) {
      EigenResult r = smallest_volume_pencil(a, sf, eo);
      e.mu = r.value;
      ok = ok && r.value > 0;
    }
    if (rc.need_sigma && ok) {
      EigenResult r = smallest_boundary_pencil(a, sf, nullptr, eo);
      e.sigma = r.value;
      ok = ok && r.value > 0;
    }
    e.ok = ok;
    e.valid = true;
  } catch (const Error& err) {
    // A perturbed geometry can lose definiteness either as a solver breakdown
    // or as an unbounded-below pencil; both just disqualify this t.
    if (err.kind == ErrKind::usage) throw;
  }
  return e;
}

double line_search(PerturbEngine& engine, const Perturbation& pert, const Submesh& om0, const ConformalConstants& cc,
                   const RouteCfg& rc, const PipelineOpts& opts, DeformationReport& out) {
  std::vector<SeedEval> cache(opts.t_budget + 2);
  std::vector<char> have(opts.t_budget + 2, 0);
  auto get = [&](int k) -> const SeedEval& {
    if (!have[k]) {
      double t = std::ldexp(opts.t0, -k);
      cache[k] = eval_seed(engine.at(pert, t), om0, cc, rc, opts);
      have[k] = 1;
      if (cache[k].valid) out.trace.push_back({t, cache[k].mu, cache[k].sigma, rc.need_sigma});
    }
    return cache[k];
  };
  for (int k = 0; k + 1 <= opts.t_budget; ++k)
    if (get(k).ok && get(k + 1).ok) return std::ldexp(opts.t0, -k);
  fail_numeric("line search exhausted without a positive seed eigenvalue");
}

void pipeline_core(const PipelineInput& in, const PipelineOpts& opts, const RouteCfg& rc, PerturbEngine& engine,
                   const Perturbation* forced, DeformationReport& out) {
  const Mesh& mesh = *in.mesh;
  const Exhaustion& exh = *in.exh;
  if (exh.ambient != &mesh) fail_usage("exhaustion does not belong to the pipeline mesh");
  ConformalConstants cc = conformal_constants(in.n);
  const Geometry& geo0 = engine.base();

  double scale_R = maxabs(geo0.R);
  double scale_H = maxabs(geo0.Hfacet);
  if (rc.sign_pre) {
    for (int v = 0; v < mesh.nv; ++v)
      if (geo0.R[v] < -1e-12 * (1 + scale_R)) fail_hypothesis("scalar curvature must be nonnegative on this route");
    for (std::size_t f = 0; f < mesh.boundary.size(); ++f)
      if (mesh.boundary[f].role == BoundaryRole::outer && geo0.Hfacet[f] < -1e-12 * (1 + scale_H))
        fail_hypothesis("mean curvature must be nonnegative on this route");
  }

  const Submesh& om0 = exh.level[0];
  bool skip = false;
  if (rc.allow_skip) {
    double pos_R = 0, pos_H = 0;
    for (int v : om0.parent_vert) pos_R = std::max(pos_R, geo0.R[v]);
    for (std::size_t f = 0; f < om0.mesh.boundary.size(); ++f)
      if (om0.mesh.boundary[f].role == BoundaryRole::outer && om0.facet_parent[f] >= 0)
        pos_H = std::max(pos_H, geo0.Hfacet[om0.facet_parent[f]]);
    skip = pos_R > 1e-10 * (1 + scale_R) || pos_H > 1e-10 * (1 + scale_H);
  }

  Geometry geo_store;
  const Geometry* geo_t = &geo0;
  if (skip) {
    out.skipped = true;
    out.t = 0;
    SeedEval e = eval_seed(geo0, om0, cc, rc, opts);
    if (e.valid) out.trace.push_back({0.0, e.mu, e.sigma, rc.need_sigma});
  } else {
    Perturbation pert;
    if (forced)
      pert = *forced;
    else
      pert = ricci_perturbation(mesh, geo0, in.chi);
    if (maxabs(pert.h) == 0) fail_hypothesis("metric direction vanishes on the cutoff support");
    out.t = line_search(engine, pert, om0, cc, rc, opts, out);
    geo_store = engine.at(pert, out.t);
    geo_t = &geo_store;
  }

  Forms forms = build_forms(mesh, *geo_t, opts.jobs);
  Vec f = cell_average(mesh, geo_t->R);
  scal(cc.c, f);
  Vec h = geo_t->Hfacet;
  scal(cc.dhalf, h);

  WeightOpts wo;
  wo.jobs = opts.jobs;
  wo.seed = opts.seed;
  wo.eigen = opts.eigen;
  out.weight = build_weight(mesh, *geo_t, exh, f, h, rc.boundary_route ? WeightKind::boundary : WeightKind::volume, wo);

  out.linear = rc.boundary_route ? solve_linear_robin(mesh, *geo_t, forms, f, h, out.weight.field, opts.jobs)
                                 : solve_linear_interior(mesh, *geo_t, forms, f, h, out.weight.field, opts.jobs);

  out.flat = flatten(mesh, *geo_t, forms, out.linear.u, f, h,
                     rc.boundary_route ? FlattenKind::boundary : FlattenKind::interior, opts.jobs);
  const Vec& w = out.flat.w;
  double wmin = *std::min_element(w.begin(), w.end());
  double wmax = *std::max_element(w.begin(), w.end());
  out.c2 = (1 - 1e-9) * wmin;
  out.c1 = (1 + 1e-9) * wmax;
  out.equiv_low = std::pow(out.c2, cc.p_conf);
  out.equiv_high = std::pow(out.c1, cc.p_conf);

  ConformalCurvature cl = curvatures_after_conformal(mesh, *geo_t, forms, w, in.n, LaplaceKind::lumped, opts.jobs);
  ConformalCurvature cns = curvatures_after_conformal(mesh, *geo_t, forms, w, in.n, LaplaceKind::consistent, opts.jobs);
  out.min_R_new = *std::min_element(cl.R_new.begin(), cl.R_new.end());
  out.min_R_new_consistent = *std::min_element(cns.R_new.begin(), cns.R_new.end());
  {
    // At an outer dof the stiffness row carries the Robin data, so the lumped
    // interior operator double counts flux certified through H_new. The
    // interior conclusion is read off the remaining dofs.
    std::vector<std::uint8_t> on_outer(forms.nn, 0);
    int fv[3];
    for (const Facet& bf : mesh.boundary)
      if (bf.role == BoundaryRole::outer) {
        int k = mesh.facet_verts(bf, fv);
        for (int l = 0; l < k; ++l) on_outer[mesh.node(fv[l])] = 1;
      }
    out.min_R_new_inner = out.min_R_new;
    bool seen = false;
    for (int i = 0; i < forms.nn; ++i)
      if (!on_outer[i] && (!seen || cl.R_new[i] < out.min_R_new_inner)) {
        out.min_R_new_inner = cl.R_new[i];
        seen = true;
      }
  }
  bool first_f = true;
  for (std::size_t bf = 0; bf < mesh.boundary.size(); ++bf) {
    if (mesh.boundary[bf].role != BoundaryRole::outer) continue;
    if (first_f || cl.H_facet[bf] < out.min_H_new) out.min_H_new = cl.H_facet[bf];
    first_f = false;
    out.max_flux_abs = std::max(out.max_flux_abs, std::abs(cl.flux_facet[bf]));
  }

  Vec fn = dof_average_cells(mesh, *geo_t, f);
  double neg_f = 0;
  for (double x : fn) neg_f = std::max(neg_f, x < 0 ? -x : 0.0);
  if (rc.boundary_route) {
    double z = out.flat.params.c * out.flat.params.v_inf;
    out.tol_R = 1e-10 * (1 + maxabs(cl.R_new));
    if (neg_f > 0)
      out.tol_R += 1.25 * cc.a * neg_f *
                   (out.flat.params.c * out.flat.params.alpha + 0.5 * z * z * std::exp(z)) *
                   std::pow(wmin, -cc.p_int);
    out.verdicts["boundary_mean_positive"] = out.min_H_new > 0 && out.flat.params.margin_boundary > 0;
    out.verdicts["scalar_above_defect"] = out.min_R_new_inner >= -out.tol_R;
  } else {
    out.verdicts["scalar_positive"] = out.min_R_new > 0;
    out.verdicts["boundary_mean_above"] = out.min_H_new >= -opts.quad_tol;
    double outer_H = 0, any_H = 0;
    for (std::size_t bf = 0; bf < mesh.boundary.size(); ++bf) {
      any_H = std::max(any_H, std::abs(geo_t->Hfacet[bf]));
      if (mesh.boundary[bf].role == BoundaryRole::outer)
        outer_H = std::max(outer_H, std::abs(geo_t->Hfacet[bf]));
    }
    // Minimal sides report their mean curvature only up to rounding in the
    // model callbacks, so "vanishes" is read at that scale.
    if (outer_H <= 1e-12 * (1.0 + any_H))
      out.verdicts["flux_vanishes"] = out.max_flux_abs <= opts.quad_tol;
  }
  out.verdicts["factor_bounded"] = out.c2 > 0 && wmin > out.c2 && wmax < out.c1 && out.c1 < 1;
}

void check_input(const PipelineInput& in) {
  if (!in.model || !in.mesh || !in.exh) fail_usage("pipeline input incomplete");
  if (in.exh->levels() == 0) fail_usage("pipeline needs a nonempty exhaustion");
}

}  // namespace

DeformationReport& deform_positive_scalar(const PipelineInput& in, const PipelineOpts& opts, DeformationReport& out) {
  out.pipeline = "positive_scalar";
  check_input(in);
  if (int(in.chi.size()) != in.mesh->nv) fail_usage("cutoff must be a vertex field");
  PerturbEngine engine(*in.model, *in.mesh);
  RouteCfg rc;
  rc.boundary_route = false;
  rc.need_mu = true;
  rc.need_sigma = false;
  pipeline_core(in, opts, rc, engine, nullptr, out);
  return out;
}

DeformationReport& deform_mean_convex(const PipelineInput& in, const PipelineOpts& opts, DeformationReport& out) {
  out.pipeline = "mean_convex";
  check_input(in);
  if (int(in.chi.size()) != in.mesh->nv) fail_usage("cutoff must be a vertex field");
  PerturbEngine engine(*in.model, *in.mesh);
  RouteCfg rc;
  rc.boundary_route = true;
  rc.need_mu = true;
  rc.need_sigma = true;
  pipeline_core(in, opts, rc, engine, nullptr, out);
  return out;
}

DeformationReport& increase_mean_pipeline(const PipelineInput& in, const CollarSpec& collar, const PipelineOpts& opts,
                                          DeformationReport& out) {
  out.pipeline = "increase_mean";
  check_input(in);
  if (!collar.chi || !collar.zeta) fail_usage("collar needs a cutoff and a profile");
  PerturbEngine engine(*in.model, *in.mesh);

  Perturbation accepted;
  bool found = false;
  for (int j = 0; j <= opts.eps_budget && !found; ++j) {
    double eps = std::ldexp(opts.eps0, -j);
    Perturbation p = collar_perturbation(*in.mesh, *in.model, collar.axis, collar.side, eps, collar.chi, collar.zeta);
    for (double& x : p.h) x = -x;
    if (j == 0 && maxabs(p.h) == 0) fail_hypothesis("second fundamental form vanishes on the collar support");
    VariationOpts vo;
    vo.jobs = opts.jobs;
    vo.with_fd = false;
    vo.eigen = opts.eigen;
    VariationResult var = first_variation(engine, p, &in.exh->level[0], in.n, VariationRoute::boundary, vo);
    out.eps_trace.push_back({eps, var.interior_term, var.boundary_term});
    if (var.value > 0) {
      out.eps = eps;
      accepted = std::move(p);
      found = true;
    }
  }
  if (!found) fail_numeric("collar schedule exhausted without a positive variation");

  RouteCfg rc;
  rc.boundary_route = true;
  rc.need_mu = false;
  rc.need_sigma = true;
  rc.sign_pre = false;
  rc.allow_skip = false;
  pipeline_core(in, opts, rc, engine, &accepted, out);
  return out;
}

}  // namespace conformal
