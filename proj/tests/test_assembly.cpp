#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "conformal/assembly.hpp"

using namespace conformal;

namespace {

BoxSpec boxnd(std::vector<int> res, Vec lo, Vec hi, std::vector<std::uint8_t> per = {}) {
  BoxSpec s;
  s.dim = int(res.size());
  s.res = std::move(res);
  s.lo = std::move(lo);
  s.hi = std::move(hi);
  s.periodic = per.empty() ? std::vector<std::uint8_t>(s.dim, 0) : std::move(per);
  return s;
}

Mesh tagged_mesh(const BoxSpec& spec, const std::vector<std::pair<int, int>>& outer) {
  Mesh m = build_box_mesh(spec);
  tag_boundary(m, box_side_rules(spec, outer));
  validate_mesh(m);
  return m;
}

std::vector<std::pair<int, int>> all_sides(const BoxSpec& spec) {
  std::vector<std::pair<int, int>> out;
  for (int a = 0; a < spec.dim; ++a)
    if (!spec.periodic[a]) {
      out.push_back({a, 0});
      out.push_back({a, 1});
    }
  return out;
}

Vec nodal_from(const Mesh& m, const std::function<double(const double*)>& f) {
  Vec u(m.nn);
  for (int i = 0; i < m.nn; ++i) u[i] = f(m.vert_coord(m.node_rep[i]));
  return u;
}

}  // namespace

TEST_CASE("interval stiffness and mass entries") {
  BoxSpec s = boxnd({2}, {0.0}, {1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(flat_slab(1), m);
  Csr k = assemble_stiffness(m, geo, 1);
  CHECK(k.get(0, 0) == 2.0);
  CHECK(k.get(0, 1) == -2.0);
  CHECK(k.get(1, 1) == 4.0);
  CHECK(k.get(1, 2) == -2.0);
  CHECK(k.get(2, 2) == 2.0);
  CHECK(k.get(0, 2) == 0.0);

  Csr mm = assemble_mass(m, geo, nullptr, 1);
  const double base = 0.5 / 6.0;
  CHECK(mm.get(0, 0) == 2 * base);
  CHECK(mm.get(0, 1) == base);
  CHECK(mm.get(1, 1) == 4 * base);
  Vec lump = mm.row_sums();
  CHECK(lump[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(lump[1] == doctest::Approx(0.5).epsilon(1e-14));

  Vec areas = facet_areas(m, geo);
  REQUIRE(areas.size() == 2);
  CHECK(areas[0] == 1.0);
  CHECK(areas[1] == 1.0);
}

TEST_CASE("stiffness is bitwise symmetric and kills constants") {
  BoxSpec s = boxnd({3, 3, 4}, {0.0, 0.0, 0.0}, {1.0, 1.0, 1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(hyperbolic_halfspace_geodesic(3), m);
  Csr k = assemble_stiffness(m, geo, 1);

  Csr kt = csr_transpose_pattern_copy(k);
  REQUIRE(kt.col == k.col);
  CHECK(kt.val == k.val);

  Vec rs = k.row_sums();
  for (double v : rs) CHECK(std::abs(v) <= 1e-12 * k.max_abs());

  Vec c(m.nn, 2.7);
  Vec ku = apply_stiffness_exact(m, geo, c, 1);
  for (double v : ku) CHECK(v == 0.0);
}

TEST_CASE("dirichlet energy of linear functions on the flat square") {
  BoxSpec s = boxnd({4, 4}, {0.0, 0.0}, {1.0, 1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(flat_slab(2), m);
  Csr k = assemble_stiffness(m, geo, 1);
  Vec u = nodal_from(m, [](const double* x) { return 3 * x[0] + 2 * x[1]; });
  Vec ku = k.apply(u);
  CHECK(dot(u, ku) == doctest::Approx(13.0).epsilon(1e-12));

  Csr mm = assemble_mass(m, geo, nullptr, 1);
  Vec one(m.nn, 1.0);
  CHECK(dot(one, mm.apply(one)) == doctest::Approx(1.0).epsilon(1e-12));

  Forms fo = build_forms(m, geo, 1);
  double per = 0;
  for (double v : fo.blump) per += v;
  CHECK(per == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("facet areas: flat cube and hyperbolic caps") {
  BoxSpec s = boxnd({2, 2, 2}, {0.0, 0.0, 0.0}, {1.0, 1.0, 1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry flat = evaluate_model(flat_slab(3), m);
  Vec a = facet_areas(m, flat);
  REQUIRE(a.size() == 48);
  double tot = 0;
  for (double v : a) {
    CHECK(v == 0.125);
    tot += v;
  }
  CHECK(tot == 6.0);

  double T = 1.0;
  BoxSpec sh = boxnd({2, 2, 2}, {0.0, 0.0, 0.0}, {1.0, 1.0, T});
  Mesh mh = tagged_mesh(sh, all_sides(sh));
  Geometry hyp = evaluate_model(hyperbolic_halfspace_geodesic(3), mh);
  Vec ah = facet_areas(mh, hyp);
  for (std::size_t f = 0; f < mh.boundary.size(); ++f) {
    const Facet& fc = mh.boundary[f];
    if (fc.axis == 2 && fc.side == 1) CHECK(ah[f] == doctest::Approx(0.125 * std::exp(2 * T)).epsilon(1e-13));
    if (fc.axis == 2 && fc.side == 0) CHECK(ah[f] == doctest::Approx(0.125).epsilon(1e-13));
  }
}

TEST_CASE("riemannian volume of the hyperbolic slab converges") {
  auto total = [](int ntau) {
    BoxSpec s = boxnd({4, ntau}, {0.0, 0.0}, {1.0, 1.0});
    Mesh m = tagged_mesh(s, all_sides(s));
    Geometry geo = evaluate_model(hyperbolic_halfspace_geodesic(2), m);
    Vec vols = cell_volumes(m, geo);
    double t = 0;
    for (double v : vols) t += v;
    return t;
  };
  double exact = std::exp(1.0) - 1.0;
  double e32 = std::abs(total(32) - exact) / exact;
  double e64 = std::abs(total(64) - exact) / exact;
  CHECK(e32 <= 2e-3);
  CHECK(e64 < e32);
}

TEST_CASE("boundary mass with a single active facet") {
  BoxSpec s = boxnd({2, 2}, {0.0, 0.0}, {1.0, 1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(flat_slab(2), m);
  Vec w(m.boundary.size(), 0.0);
  std::size_t pick = 0;
  for (std::size_t f = 0; f < m.boundary.size(); ++f)
    if (m.boundary[f].axis == 0 && m.boundary[f].side == 0) pick = f;
  w[pick] = 3.0;
  Csr b = assemble_boundary_mass(m, geo, &w, BoundaryRole::outer);
  Vec rs = b.row_sums();
  double tot = 0;
  int touched = 0;
  for (double v : rs) {
    tot += v;
    if (v != 0) ++touched;
  }
  CHECK(touched == 2);
  CHECK(tot == doctest::Approx(3.0 * 0.5).epsilon(1e-14));
}

TEST_CASE("loads integrate densities") {
  BoxSpec s = boxnd({3, 3}, {0.0, 0.0}, {1.0, 1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(flat_slab(2), m);
  Vec p(m.nc, 1.0);
  Vec lp = cell_load(m, geo, p, 1);
  double t = 0;
  for (double v : lp) t += v;
  CHECK(t == doctest::Approx(1.0).epsilon(1e-13));

  Vec q(m.boundary.size(), 1.0);
  Vec lq = facet_load(m, geo, q, BoundaryRole::outer);
  t = 0;
  for (double v : lq) t += v;
  CHECK(t == doctest::Approx(4.0).epsilon(1e-13));
}

TEST_CASE("lumped laplacian reproduces the second derivative inside") {
  BoxSpec s = boxnd({64}, {0.0}, {1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(flat_slab(1), m);
  Forms fo = build_forms(m, geo, 1);
  Vec u = nodal_from(m, [](const double* x) { return x[0] * x[0]; });
  Vec lap = neg_laplacian(m, geo, fo, u, LaplaceKind::lumped, 1);
  for (int i = 1; i + 1 < m.nn; ++i) CHECK(lap[i] == doctest::Approx(-2.0).epsilon(1e-9));

  Vec z = neg_laplacian(m, geo, fo, u, LaplaceKind::consistent, 1);
  Vec ku = apply_stiffness_exact(m, geo, u, 1);
  Vec mz = fo.M1.apply(z);
  double r = 0, nb = 0;
  for (int i = 0; i < m.nn; ++i) {
    r += sq(mz[i] - ku[i]);
    nb += sq(ku[i]);
  }
  CHECK(std::sqrt(r) <= 1e-10 * std::sqrt(nb));
  CHECK(z[m.nn / 2] == doctest::Approx(-2.0).epsilon(1e-6));
}

TEST_CASE("conformal curvature round trip and power of two scaling") {
  BoxSpec s = boxnd({2, 2, 3}, {0.0, 0.0, 0.0}, {1.0, 1.0, 1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(hyperbolic_halfspace_geodesic(3), m);
  Forms fo = build_forms(m, geo, 1);

  Vec one(m.nn, 1.0);
  ConformalCurvature cc1 = curvatures_after_conformal(m, geo, fo, one, 3, LaplaceKind::lumped, 1);
  // Constant R survives the cell averaging in the reaction up to rounding.
  for (int i = 0; i < m.nn; ++i)
    CHECK(cc1.R_new[i] == doctest::Approx(geo.R[m.node_rep[i]]).epsilon(1e-14));
  for (std::size_t f = 0; f < m.boundary.size(); ++f)
    if (m.boundary[f].role == BoundaryRole::outer) CHECK(cc1.H_facet[f] == geo.Hfacet[f]);
  for (double v : cc1.flux_facet) CHECK(v == 0.0);

  Vec two(m.nn, 2.0);
  ConformalCurvature cc2 = curvatures_after_conformal(m, geo, fo, two, 3, LaplaceKind::lumped, 1);
  for (int i = 0; i < m.nn; ++i)
    CHECK(cc2.R_new[i] == doctest::Approx(geo.R[m.node_rep[i]] / 16.0).epsilon(1e-14));
  for (std::size_t f = 0; f < m.boundary.size(); ++f)
    if (m.boundary[f].role == BoundaryRole::outer) CHECK(cc2.H_facet[f] == geo.Hfacet[f] / 4.0);

  Vec half(m.nn, 0.5);
  ConformalCurvature cch = curvatures_after_conformal(m, geo, fo, half, 3, LaplaceKind::lumped, 1);
  for (int i = 0; i < m.nn; ++i) CHECK(cch.R_new[i] == doctest::Approx(-96.0).epsilon(1e-14));

  Vec bad(m.nn, 1.0);
  bad[0] = 0.0;
  CHECK_THROWS_WITH_AS(curvatures_after_conformal(m, geo, fo, bad, 3, LaplaceKind::lumped, 1),
                       doctest::Contains("positive"), Error);
}

TEST_CASE("flux recovery reproduces linear slopes") {
  BoxSpec s = boxnd({3, 3, 4}, {0.0, 0.0, 0.0}, {1.0, 1.0, 1.0});
  Mesh m = tagged_mesh(s, {{2, 0}, {2, 1}});
  Geometry geo = evaluate_model(hyperbolic_halfspace_geodesic(3), m);
  Vec u = nodal_from(m, [](const double* x) { return x[2]; });
  BoundaryFlux bf = boundary_flux(m, geo, u);
  for (std::size_t f = 0; f < m.boundary.size(); ++f) {
    const Facet& fc = m.boundary[f];
    if (fc.role != BoundaryRole::outer) {
      CHECK(bf.facet[f] == 0.0);
      continue;
    }
    double want = fc.side == 1 ? 1.0 : -1.0;
    CHECK(bf.facet[f] == doctest::Approx(want).epsilon(1e-12));
  }

  BoxSpec s2 = boxnd({3, 3}, {0.0, 0.0}, {1.0, 1.0});
  Mesh m2 = tagged_mesh(s2, all_sides(s2));
  Geometry flat = evaluate_model(flat_slab(2), m2);
  Vec v = nodal_from(m2, [](const double* x) { return x[0] + 2 * x[1]; });
  BoundaryFlux bf2 = boundary_flux(m2, flat, v);
  for (std::size_t f = 0; f < m2.boundary.size(); ++f) {
    const Facet& fc = m2.boundary[f];
    double want = (fc.axis == 0 ? 1.0 : 2.0) * (fc.side == 1 ? 1.0 : -1.0);
    CHECK(bf2.facet[f] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("submesh assembly is bitwise on interior rows") {
  BoxSpec s = boxnd({6, 6}, {0.0, 0.0}, {1.0, 1.0});
  Mesh amb = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(hyperbolic_halfspace_geodesic(2), amb);

  std::vector<int> keep;
  for (int c = 0; c < amb.nc; ++c) {
    double xc[2];
    amb.cell_centroid(c, xc);
    if (xc[0] < 0.5) keep.push_back(c);
  }
  Submesh sub = extract_cells(amb, keep);
  Geometry sgeo = restrict_geometry(geo, sub);

  Csr ka = assemble_stiffness(amb, geo, 1);
  Csr ks = assemble_stiffness(sub.mesh, sgeo, 1);

  std::vector<std::uint8_t> inside(amb.nc, 0);
  for (int c : keep) inside[c] = 1;
  int checked = 0;
  for (int i = 0; i < sub.mesh.nn; ++i) {
    int ai = sub.parent_node[i];
    bool interior = true;
    for (int k = amb.inc_ptr[ai]; k < amb.inc_ptr[ai + 1]; ++k)
      if (!inside[amb.inc[k].first]) interior = false;
    if (!interior) continue;
    ++checked;
    int la = ka.ptr[ai + 1] - ka.ptr[ai];
    int ls = ks.ptr[i + 1] - ks.ptr[i];
    REQUIRE(la == ls);
    for (int k = 0; k < la; ++k) {
      CHECK(sub.parent_node[ks.col[ks.ptr[i] + k]] == ka.col[ka.ptr[ai] + k]);
      CHECK(ks.val[ks.ptr[i] + k] == ka.val[ka.ptr[ai] + k]);
    }
  }
  CHECK(checked > 10);
}

TEST_CASE("assembly is independent of the job count") {
  BoxSpec s = boxnd({3, 3, 3}, {0.0, 0.0, 0.0}, {1.0, 1.0, 1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(hyperbolic_halfspace_geodesic(3), m);
  Vec f(m.nc);
  for (int c = 0; c < m.nc; ++c) f[c] = std::sin(0.1 * c);

  Csr k1 = assemble_stiffness(m, geo, 1);
  Csr k4 = assemble_stiffness(m, geo, 4);
  CHECK(k1.val == k4.val);
  CHECK(k1.col == k4.col);

  Csr m1 = assemble_mass(m, geo, &f, 1);
  Csr m4 = assemble_mass(m, geo, &f, 4);
  CHECK(m1.val == m4.val);

  Vec u(m.nn);
  for (int i = 0; i < m.nn; ++i) u[i] = std::cos(0.3 * i);
  CHECK(apply_stiffness_exact(m, geo, u, 1) == apply_stiffness_exact(m, geo, u, 4));
  CHECK(cell_load(m, geo, f, 1) == cell_load(m, geo, f, 4));
}

TEST_CASE("constrained solver pins values and solves the rest") {
  BoxSpec s = boxnd({8}, {0.0}, {1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(flat_slab(1), m);
  Csr k = assemble_stiffness(m, geo, 1);
  std::vector<std::uint8_t> fixed(m.nn, 0);
  fixed[0] = fixed[m.nn - 1] = 1;
  ConstrainedSolver cs(k, fixed, 1);
  CHECK(cs.free_count() == m.nn - 2);

  Vec p(m.nc, 1.0);
  Vec rhs = cell_load(m, geo, p, 1);
  Vec zero(m.nn, 0.0);
  Vec u = cs.solve(rhs, zero);
  for (int i = 0; i < m.nn; ++i) {
    double x = m.vert_coord(m.node_rep[i])[0];
    CHECK(u[i] == doctest::Approx(x * (1 - x) / 2).epsilon(1e-12));
  }
  CHECK(u[m.nn / 2] == doctest::Approx(0.125).epsilon(1e-12));

  Vec vals(m.nn, 0.0);
  vals[0] = 2.0;
  vals[m.nn - 1] = 5.0;
  Vec h = cs.solve(Vec(m.nn, 0.0), vals);
  for (int i = 0; i < m.nn; ++i) {
    double x = m.vert_coord(m.node_rep[i])[0];
    CHECK(h[i] == doctest::Approx(2 + 3 * x).epsilon(1e-12));
  }
}

TEST_CASE("weighted mass integrates its weight") {
  BoxSpec s = boxnd({4, 4}, {0.0, 0.0}, {1.0, 1.0});
  Mesh m = tagged_mesh(s, all_sides(s));
  Geometry geo = evaluate_model(hyperbolic_halfspace_geodesic(2), m);

  Vec fvert(m.nv);
  for (int v = 0; v < m.nv; ++v) fvert[v] = 1.0 + m.vert_coord(v)[0];
  Vec f = cell_average(m, fvert);
  Vec g(m.nc);
  for (int c = 0; c < m.nc; ++c) g[c] = 0.5 + 0.01 * c;

  Csr mf = assemble_mass(m, geo, &f, 1);
  Vec one(m.nn, 1.0);
  double got = dot(one, mf.apply(one));
  Vec vols = cell_volumes(m, geo);
  double want = 0;
  for (int c = 0; c < m.nc; ++c) want += f[c] * vols[c];
  CHECK(got == doctest::Approx(want).epsilon(1e-13));

  Vec fg(m.nc);
  for (int c = 0; c < m.nc; ++c) fg[c] = f[c] + g[c];
  Csr mg = assemble_mass(m, geo, &g, 1);
  Csr mfg = assemble_mass(m, geo, &fg, 1);
  Csr sum = csr_add(mf, 1.0, mg, 1.0);
  for (int i = 0; i < mfg.nnz(); ++i) CHECK(mfg.val[i] == doctest::Approx(sum.val[i]).epsilon(1e-13));

  Vec cavg = cell_average(m, Vec(m.nv, 3.25));
  for (double v : cavg) CHECK(v == 3.25);
}

