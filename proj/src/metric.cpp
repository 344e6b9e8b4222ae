#include "conformal/metric.hpp"

#include <cmath>
#include <cstring>

namespace conformal {

double sym_det(const double* g, int d) {
  if (d == 1) return g[0];
  if (d == 2) return g[0] * g[3] - g[1] * g[2];
  return g[0] * (g[4] * g[8] - g[5] * g[7]) - g[1] * (g[3] * g[8] - g[5] * g[6]) +
         g[2] * (g[3] * g[7] - g[4] * g[6]);
}

void sym_inv(const double* g, int d, double* out) {
  double det = sym_det(g, d);
  if (!(det > 0.0)) fail_numeric("metric inverse: determinant not positive");
  if (d == 1) {
    out[0] = 1.0 / g[0];
    return;
  }
  if (d == 2) {
    out[0] = g[3] / det;
    out[1] = -g[1] / det;
    out[2] = -g[2] / det;
    out[3] = g[0] / det;
    return;
  }
  out[0] = (g[4] * g[8] - g[5] * g[7]) / det;
  out[1] = (g[2] * g[7] - g[1] * g[8]) / det;
  out[2] = (g[1] * g[5] - g[2] * g[4]) / det;
  out[3] = (g[5] * g[6] - g[3] * g[8]) / det;
  out[4] = (g[0] * g[8] - g[2] * g[6]) / det;
  out[5] = (g[2] * g[3] - g[0] * g[5]) / det;
  out[6] = (g[3] * g[7] - g[4] * g[6]) / det;
  out[7] = (g[1] * g[6] - g[0] * g[7]) / det;
  out[8] = (g[0] * g[4] - g[1] * g[3]) / det;
}

bool sym_spd(const double* g, int d) {
  if (!(g[0] > 0.0)) return false;
  if (d == 1) return true;
  if (!(g[0] * g[d + 1] - g[1] * g[d] > 0.0)) return false;
  if (d == 2) return true;
  return sym_det(g, 3) > 0.0;
}

void mat_id(int d, double* g) {
  for (int i = 0; i < d * d; ++i) g[i] = 0.0;
  for (int i = 0; i < d; ++i) g[i * d + i] = 1.0;
}

ConformalConstants conformal_constants(int n) {
  if (n < 3 || n > 10) fail_usage("conformal constants are defined for 3 <= n <= 10");
  ConformalConstants k;
  k.n = n;
  k.a = 4.0 * (n - 1) / (n - 2);
  k.c = double(n - 2) / (4.0 * (n - 1));
  k.dhalf = (n - 2) / 2.0;
  k.p_int = double(n + 2) / (n - 2);
  k.p_bdy = double(n) / (n - 2);
  k.p_conf = 4.0 / (n - 2);
  k.kappa = 2.0 * (n - 1);
  return k;
}

Model flat_slab(int dim) {
  if (dim < 1 || dim > 3) fail_usage("flat_slab: dimension must be 1..3");
  Model m;
  m.name = "flat_slab";
  m.dim = dim;
  m.metric = [dim](const double*, double* g) { mat_id(dim, g); };
  m.scalar = [](const double*) { return 0.0; };
  m.ricci = [dim](const double*, double* r) {
    for (int i = 0; i < dim * dim; ++i) r[i] = 0.0;
  };
  m.mean = [](const double*, int, int) { return 0.0; };
  m.second_ff = [dim](const double*, int, int, double* a) {
    for (int i = 0; i < (dim - 1) * (dim - 1); ++i) a[i] = 0.0;
  };
  return m;
}

Model euclidean_ball_chart(int dim, double r0, double rho) {
  if (dim != 2 && dim != 3) fail_usage("ball chart: dimension must be 2 or 3");
  if (!(r0 > 0.0) || !(rho > r0)) fail_usage("ball chart: need 0 < inner radius < outer radius");
  Model m;
  m.name = "euclidean_ball_chart";
  m.dim = dim;
  m.metric = [dim](const double* x, double* g) {
    mat_id(dim, g);
    double r = x[0];
    g[1 * dim + 1] = r * r;
    if (dim == 3) {
      double st = std::sin(x[1]);
      g[2 * dim + 2] = r * r * st * st;
    }
  };
  m.scalar = [](const double*) { return 0.0; };
  m.ricci = [dim](const double*, double* r) {
    for (int i = 0; i < dim * dim; ++i) r[i] = 0.0;
  };
  m.mean = [dim](const double* x, int axis, int side) {
    double sgn = side ? 1.0 : -1.0;
    double r = x[0];
    if (axis == 0) return sgn / r;
    if (axis == 1 && dim == 3) return sgn * std::cos(x[1]) / (2.0 * r * std::sin(x[1]));
    return 0.0;  // radial rays / azimuthal half planes are geodesic
  };
  m.second_ff = [dim](const double* x, int axis, int side, double* a) {
    int t = (dim - 1) * (dim - 1);
    for (int i = 0; i < t; ++i) a[i] = 0.0;
    double sgn = side ? 1.0 : -1.0;
    double r = x[0];
    if (axis == 0) {
      a[0] = sgn * r;  // tangent axes (theta[, phi])
      if (dim == 3) {
        double st = std::sin(x[1]);
        a[3] = sgn * r * st * st;
      }
    } else if (axis == 1 && dim == 3) {
      // tangent axes (r, phi)
      a[3] = sgn * r * std::sin(x[1]) * std::cos(x[1]);
    }
  };
  m.check_box = [dim](const BoxSpec& b) {
    if (!(b.lo[0] > 0.0)) fail_usage("ball chart: radial coordinate must stay positive");
    if (dim == 3 && (!(b.lo[1] > 0.0) || !(b.hi[1] < M_PI)))
      fail_usage("ball chart: polar angle must stay inside (0, pi)");
  };
  return m;
}

namespace {

Model hyperbolic_chart(int dim, const char* name) {
  if (dim < 2 || dim > 3) fail_usage("hyperbolic chart: dimension must be 2 or 3");
  Model m;
  m.name = name;
  m.dim = dim;
  int dlast = dim - 1;
  m.metric = [dim, dlast](const double* x, double* g) {
    for (int i = 0; i < dim * dim; ++i) g[i] = 0.0;
    double e2 = std::exp(2.0 * x[dlast]);
    for (int i = 0; i < dlast; ++i) g[i * dim + i] = e2;
    g[dlast * dim + dlast] = 1.0;
  };
  m.scalar = [dim](const double*) { return double(-dim * (dim - 1)); };
  m.ricci = [dim, dlast](const double* x, double* r) {
    for (int i = 0; i < dim * dim; ++i) r[i] = 0.0;
    double e2 = std::exp(2.0 * x[dlast]);
    for (int i = 0; i < dlast; ++i) r[i * dim + i] = -(dim - 1) * e2;
    r[dlast * dim + dlast] = double(-(dim - 1));
  };
  m.mean = [dlast](const double*, int axis, int side) {
    if (axis != dlast) return 0.0;  // vertical walls are totally geodesic
    return side ? 1.0 : -1.0;
  };
  m.second_ff = [dim, dlast](const double* x, int axis, int side, double* a) {
    int t = (dim - 1) * (dim - 1);
    for (int i = 0; i < t; ++i) a[i] = 0.0;
    if (axis != dlast) return;
    double sgn = side ? 1.0 : -1.0;
    double e2 = std::exp(2.0 * x[dlast]);
    for (int i = 0; i < dim - 1; ++i) a[i * (dim - 1) + i] = sgn * e2;  // A = sgn * induced metric
  };
  m.check_box = [dlast](const BoxSpec& b) {
    if (b.periodic[dlast]) fail_usage("hyperbolic chart: the depth axis cannot be periodic");
  };
  return m;
}

struct Profile {
  std::function<double(double)> f, df, ddf;
};

Profile make_profile_exp(double alpha) {
  return {[alpha](double s) { return std::exp(alpha * s); },
          [alpha](double s) { return alpha * std::exp(alpha * s); },
          [alpha](double s) { return alpha * alpha * std::exp(alpha * s); }};
}

Profile make_profile_const() {
  return {[](double) { return 1.0; }, [](double) { return 0.0; }, [](double) { return 0.0; }};
}

Profile make_profile_cos(double alpha) {
  return {[alpha](double s) { return std::cos(alpha * s); },
          [alpha](double s) { return -alpha * std::sin(alpha * s); },
          [alpha](double s) { return -alpha * alpha * std::cos(alpha * s); }};
}

// decaying oscillation solving b'' + alpha b' + alpha^2 b = 0 with b(0) = 1,
// b'(0) = -alpha; paired with a = exp(alpha s) this makes the product metric
// scalar flat by construction
Profile make_profile_cosexp(double alpha) {
  double k = std::sqrt(3.0) * alpha / 2.0;
  double c0 = std::cos(M_PI / 6.0);
  auto b = [alpha, k, c0](double s) { return std::exp(-alpha * s / 2.0) * std::cos(M_PI / 6.0 + k * s) / c0; };
  auto db = [alpha, k, c0](double s) {
    return std::exp(-alpha * s / 2.0) *
           (-(alpha / 2.0) * std::cos(M_PI / 6.0 + k * s) - k * std::sin(M_PI / 6.0 + k * s)) / c0;
  };
  auto ddb = [alpha, b, db](double s) { return -alpha * db(s) - alpha * alpha * b(s); };
  return {b, db, ddb};
}

}  // namespace

Model hyperbolic_halfspace_geodesic(int dim) { return hyperbolic_chart(dim, "hyperbolic_halfspace"); }
Model hyperbolic_horoball_collar(int dim) { return hyperbolic_chart(dim, "hyperbolic_horoball"); }

Model product_warped(const std::string& profile, double alpha) {
  Profile pa, pb;
  if (profile == "exp") {
    pa = pb = make_profile_exp(alpha);
  } else if (profile == "const") {
    pa = pb = make_profile_const();
  } else if (profile == "cos") {
    pa = pb = make_profile_cos(alpha);
  } else if (profile == "cosexp") {
    pa = make_profile_exp(alpha);
    pb = make_profile_cosexp(alpha);
  } else {
    fail_usage("warped product: unknown profile '" + profile + "'");
  }
  Model m;
  m.name = "product_warped_" + profile;
  m.dim = 3;
  m.metric = [pa, pb](const double* x, double* g) {
    for (int i = 0; i < 9; ++i) g[i] = 0.0;
    double a = pa.f(x[2]), b = pb.f(x[2]);
    g[0] = a * a;
    g[4] = b * b;
    g[8] = 1.0;
  };
  m.scalar = [pa, pb](const double* x) {
    double s = x[2];
    double a = pa.f(s), da = pa.df(s), dda = pa.ddf(s);
    double b = pb.f(s), db = pb.df(s), ddb = pb.ddf(s);
    return -2.0 * (dda / a + ddb / b + da * db / (a * b));
  };
  m.ricci = [pa, pb](const double* x, double* r) {
    for (int i = 0; i < 9; ++i) r[i] = 0.0;
    double s = x[2];
    double a = pa.f(s), da = pa.df(s), dda = pa.ddf(s);
    double b = pb.f(s), db = pb.df(s), ddb = pb.ddf(s);
    r[0] = -a * a * (dda / a + da * db / (a * b));
    r[4] = -b * b * (ddb / b + da * db / (a * b));
    r[8] = -(dda / a + ddb / b);
  };
  m.mean = [pa, pb](const double* x, int axis, int side) {
    if (axis != 2) return 0.0;  // x and y walls are totally geodesic
    double sgn = side ? 1.0 : -1.0;
    double s = x[2];
    return sgn * (pa.df(s) / pa.f(s) + pb.df(s) / pb.f(s)) / 2.0;
  };
  m.second_ff = [pa, pb](const double* x, int axis, int side, double* a) {
    for (int i = 0; i < 4; ++i) a[i] = 0.0;
    if (axis != 2) return;
    double sgn = side ? 1.0 : -1.0;
    double s = x[2];
    a[0] = sgn * pa.f(s) * pa.df(s);
    a[3] = sgn * pb.f(s) * pb.df(s);
  };
  m.check_box = [pa, pb](const BoxSpec& b) {
    if (b.periodic[2]) fail_usage("warped product: the profile axis cannot be periodic");
    for (int i = 0; i <= 2000; ++i) {
      double s = b.lo[2] + (b.hi[2] - b.lo[2]) * i / 2000.0;
      if (!(pa.f(s) > 0.0) || !(pb.f(s) > 0.0))
        fail_usage("warped product: a profile is not positive on the chart");
    }
  };
  return m;
}

Geometry evaluate_model(const Model& model, const Mesh& mesh) {
  if (!model.metric || !model.scalar) fail_usage("model lacks metric or scalar callbacks");
  if (model.dim != mesh.dim) fail_usage("model and mesh dimension differ");
  if (model.check_box && mesh.structured) model.check_box(mesh.box);
  const int d = mesh.dim, dd = d * d, tt = (d - 1) * (d - 1);
  Geometry geo;
  geo.dim = d;
  geo.g.resize(std::size_t(mesh.nv) * dd);
  geo.R.resize(mesh.nv);
  if (model.ricci) geo.ric.resize(std::size_t(mesh.nv) * dd);
  for (int v = 0; v < mesh.nv; ++v) {
    const double* x = mesh.vert_coord(v);
    model.metric(x, &geo.g[std::size_t(v) * dd]);
    if (!sym_spd(&geo.g[std::size_t(v) * dd], d))
      fail_numeric("model metric is not positive definite at vertex " + std::to_string(v));
    geo.R[v] = model.scalar(x);
    if (model.ricci) model.ricci(x, &geo.ric[std::size_t(v) * dd]);
  }
  // ghost copies take the master's sampled values so dof data is single valued
  for (int v = 0; v < mesh.nv; ++v) {
    int mv = mesh.master[v];
    if (mv == v) continue;
    std::memcpy(&geo.g[std::size_t(v) * dd], &geo.g[std::size_t(mv) * dd], sizeof(double) * dd);
    geo.R[v] = geo.R[mv];
    if (model.ricci)
      std::memcpy(&geo.ric[std::size_t(v) * dd], &geo.ric[std::size_t(mv) * dd], sizeof(double) * dd);
  }
  geo.Hfacet.assign(mesh.boundary.size(), 0.0);
  geo.Afacet.assign(mesh.boundary.size() * std::size_t(tt), 0.0);
  int fv[3];
  for (std::size_t i = 0; i < mesh.boundary.size(); ++i) {
    const Facet& f = mesh.boundary[i];
    if (f.axis < 0) continue;
    int nfv = mesh.facet_verts(f, fv);
    if (model.mean) {
      double s = 0.0;
      for (int l = 0; l < nfv; ++l) s += model.mean(mesh.vert_coord(fv[l]), f.axis, f.side);
      geo.Hfacet[i] = s / nfv;
    }
    if (model.second_ff && tt > 0) {
      double acc[4] = {0, 0, 0, 0};
      double one[4];
      for (int l = 0; l < nfv; ++l) {
        model.second_ff(mesh.vert_coord(fv[l]), f.axis, f.side, one);
        for (int k = 0; k < tt; ++k) acc[k] += one[k];
      }
      for (int k = 0; k < tt; ++k) geo.Afacet[i * tt + k] = acc[k] / nfv;
    }
  }
  return geo;
}

Geometry restrict_geometry(const Geometry& geo, const Submesh& sub) {
  const Mesh& s = sub.mesh;
  const int d = geo.dim, dd = d * d, tt = (d - 1) * (d - 1);
  if (s.dim != d) fail_usage("restrict_geometry: dimension mismatch");
  Geometry out;
  out.dim = d;
  out.g.resize(std::size_t(s.nv) * dd);
  out.R.resize(s.nv);
  if (geo.has_ric()) out.ric.resize(std::size_t(s.nv) * dd);
  for (int v = 0; v < s.nv; ++v) {
    int av = sub.parent_vert[v];
    std::memcpy(&out.g[std::size_t(v) * dd], geo.gv(av), sizeof(double) * dd);
    out.R[v] = geo.R[av];
    if (geo.has_ric()) std::memcpy(&out.ric[std::size_t(v) * dd], geo.ricv(av), sizeof(double) * dd);
  }
  out.Hfacet.assign(s.boundary.size(), 0.0);
  out.Afacet.assign(s.boundary.size() * std::size_t(tt), 0.0);
  for (std::size_t i = 0; i < s.boundary.size(); ++i) {
    int pf = sub.facet_parent[i];
    if (pf < 0) continue;
    out.Hfacet[i] = geo.Hfacet[pf];
    for (int k = 0; k < tt; ++k) out.Afacet[i * tt + k] = geo.Afacet[std::size_t(pf) * tt + k];
  }
  return out;
}

Perturbation ricci_perturbation(const Mesh& mesh, const Geometry& geo, const Vec& chi) {
  if (int(chi.size()) != mesh.nv) fail_usage("ricci_perturbation: cutoff must be a per-vertex field");
  if (!geo.has_ric()) fail_usage("ricci_perturbation: geometry carries no Ricci data");
  const int d = mesh.dim, dd = d * d;
  for (int v = 0; v < mesh.nv; ++v) {
    if (chi[v] < 0.0) fail_hypothesis("ricci_perturbation: cutoff is negative at vertex " + std::to_string(v));
    if (chi[v] != chi[mesh.master[v]])
      fail_usage("ricci_perturbation: cutoff differs across a periodic identification");
  }
  std::vector<std::uint8_t> on_boundary(mesh.nv, 0);
  int fv[3];
  for (const Facet& f : mesh.boundary) {
    int nfv = mesh.facet_verts(f, fv);
    for (int l = 0; l < nfv; ++l) on_boundary[fv[l]] = 1;
  }
  for (int v = 0; v < mesh.nv; ++v)
    if (on_boundary[v] && chi[v] != 0.0)
      fail_hypothesis("ricci_perturbation: cutoff must vanish on the boundary");
  Perturbation p;
  p.dim = d;
  p.h.assign(std::size_t(mesh.nv) * dd, 0.0);
  double amp = 0.0;
  for (int v = 0; v < mesh.nv; ++v) {
    if (chi[v] == 0.0) continue;
    const double* rc = geo.ricv(v);
    for (int k = 0; k < dd; ++k) {
      p.h[std::size_t(v) * dd + k] = -chi[v] * rc[k];
      amp = std::max(amp, std::fabs(p.h[std::size_t(v) * dd + k]));
    }
  }
  if (amp == 0.0) fail_hypothesis("ricci_perturbation: cutoff times Ricci vanishes identically");
  return p;
}

Perturbation collar_perturbation(const Mesh& mesh, const Model& model, int axis, int side, double eps,
                                 const std::function<double(const double*)>& chi,
                                 const std::function<double(double)>& zeta) {
  if (!mesh.structured) fail_usage("collar_perturbation: needs the structured chart");
  const int d = mesh.dim, dd = d * d;
  if (axis < 0 || axis >= d || mesh.box.periodic[axis]) fail_usage("collar_perturbation: invalid collar axis");
  if (!model.second_ff) fail_usage("collar_perturbation: model has no second fundamental form");
  if (std::fabs(zeta(0.0) - 1.0) > 1e-12) fail_usage("collar profile must equal 1 at 0");
  if (std::fabs((zeta(1e-4) - zeta(0.0)) / 1e-4) > 1e-2) fail_usage("collar profile must be flat at 0");
  if (std::fabs(zeta(1.0)) > 1e-12 || std::fabs(zeta(1.25)) > 1e-12)
    fail_usage("collar profile must vanish beyond 1");
  double extent = mesh.box.hi[axis] - mesh.box.lo[axis];
  if (!(eps > 0.0)) fail_usage("collar_perturbation: eps must be positive");
  if (eps > extent) fail_hypothesis("collar_perturbation: collar deeper than the chart");
  double xside = side ? mesh.box.hi[axis] : mesh.box.lo[axis];
  int ts[3], nt = 0;
  for (int a = 0; a < d; ++a)
    if (a != axis) ts[nt++] = a;
  Perturbation p;
  p.dim = d;
  p.h.assign(std::size_t(mesh.nv) * dd, 0.0);
  double amax = 0.0, gslab[9], aten[4];
  for (int v = 0; v < mesh.nv; ++v) {
    if (mesh.master[v] != v) continue;
    const double* x = mesh.vert_coord(v);
    double dist = std::fabs(x[axis] - xside);
    double w = (dist < eps) ? chi(x) * zeta(dist / eps) : 0.0;
    if (w == 0.0) continue;
    model.metric(x, gslab);
    if (std::fabs(gslab[axis * d + axis] - 1.0) > 1e-12)
      fail_usage("collar_perturbation: collar axis is not unit speed in this chart");
    double xp[3];
    for (int a = 0; a < d; ++a) xp[a] = x[a];
    xp[axis] = xside;
    model.second_ff(xp, axis, side, aten);
    for (int i = 0; i < nt; ++i)
      for (int j = 0; j < nt; ++j) {
        double val = w * aten[i * nt + j];
        p.h[std::size_t(v) * dd + ts[i] * d + ts[j]] = val;
        amax = std::max(amax, std::fabs(aten[i * nt + j]));
      }
  }
  for (int v = 0; v < mesh.nv; ++v)
    if (mesh.master[v] != v)
      std::memcpy(&p.h[std::size_t(v) * dd], &p.h[std::size_t(mesh.master[v]) * dd], sizeof(double) * dd);
  if (amax == 0.0) fail_hypothesis("collar_perturbation: the side is totally geodesic on the support");
  return p;
}

namespace {

struct GridSampler {
  const BoxSpec* box;
  const double* gv;
  int dd;

  const double* at(const int* idx) const {
    int w[3] = {0, 0, 0};
    for (int a = 0; a < box->dim; ++a) {
      int i = idx[a];
      if (box->periodic[a]) i = ((i % box->res[a]) + box->res[a]) % box->res[a];
      w[a] = i;
    }
    return gv + std::size_t(vertex_of_grid_coords(*box, w)) * dd;
  }
};

// d/dx_a of a grid function given by eval(idx, out): central inside, one-sided
// second order at non-periodic edges
template <class EvalFn>
void grid_deriv(const BoxSpec& box, const int* idx, int a, int ncomp, EvalFn&& eval, double* out,
                double* scratch) {
  double h = box.h(a);
  int p[3] = {idx[0], 0, 0};
  for (int t = 0; t < box.dim; ++t) p[t] = idx[t];
  double* f1 = scratch;
  double* f2 = scratch + ncomp;
  if (box.periodic[a] || (idx[a] > 0 && idx[a] < box.res[a])) {
    p[a] = idx[a] + 1;
    eval(p, f1);
    p[a] = idx[a] - 1;
    eval(p, f2);
    for (int k = 0; k < ncomp; ++k) out[k] = (f1[k] - f2[k]) / (2.0 * h);
  } else {
    double sgn = (idx[a] == 0) ? 1.0 : -1.0;
    int step = (idx[a] == 0) ? 1 : -1;
    double* f0 = scratch + 2 * ncomp;
    p[a] = idx[a];
    eval(p, f0);
    p[a] = idx[a] + step;
    eval(p, f1);
    p[a] = idx[a] + 2 * step;
    eval(p, f2);
    for (int k = 0; k < ncomp; ++k) out[k] = sgn * (-3.0 * f0[k] + 4.0 * f1[k] - f2[k]) / (2.0 * h);
  }
}

void gamma_at(const GridSampler& s, const int* idx, double* G) {
  const BoxSpec& box = *s.box;
  const int d = box.dim, dd = d * d;
  const double* g = s.at(idx);
  double ginv[9];
  sym_inv(g, d, ginv);
  double dg[3][9], scratch[27];
  auto eval = [&](const int* p, double* out) { std::memcpy(out, s.at(p), sizeof(double) * dd); };
  for (int a = 0; a < d; ++a) grid_deriv(box, idx, a, dd, eval, dg[a], scratch);
  for (int k = 0; k < d; ++k)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        double sum = 0.0;
        for (int l = 0; l < d; ++l)
          sum += ginv[k * d + l] * (dg[i][l * d + j] + dg[j][l * d + i] - dg[l][i * d + j]);
        G[(k * d + i) * d + j] = 0.5 * sum;
      }
}

void ric_at(const GridSampler& s, const int* idx, double* ric) {
  const BoxSpec& box = *s.box;
  const int d = box.dim, ddd = d * d * d;
  double G[27];
  gamma_at(s, idx, G);
  double dG[3][27], scratch[81];
  auto evalG = [&](const int* p, double* out) { gamma_at(s, p, out); };
  for (int c = 0; c < d; ++c) grid_deriv(box, idx, c, ddd, evalG, dG[c], scratch);
  auto Gk = [&](const double* T, int k, int i, int j) { return T[(k * d + i) * d + j]; };
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b) {
      double v = 0.0;
      for (int c = 0; c < d; ++c) v += Gk(dG[c], c, a, b) - Gk(dG[a], c, c, b);
      for (int c = 0; c < d; ++c)
        for (int e = 0; e < d; ++e) v += Gk(G, c, c, e) * Gk(G, e, a, b) - Gk(G, c, a, e) * Gk(G, e, c, b);
      ric[a * d + b] = v;
    }
  // curvature of a metric is symmetric; FD noise is averaged out
  for (int a = 0; a < d; ++a)
    for (int b = a + 1; b < d; ++b) {
      double m = 0.5 * (ric[a * d + b] + ric[b * d + a]);
      ric[a * d + b] = ric[b * d + a] = m;
    }
}

}  // namespace

FdInterior fd_interior(const BoxSpec& box, const std::vector<double>& gvert) {
  const int d = box.dim, dd = d * d;
  for (int a = 0; a < d; ++a)
    if (!box.periodic[a] && box.res[a] < 2)
      fail_usage("finite differences need at least 2 cells per non-periodic axis");
  int nv = 1;
  for (int a = 0; a < d; ++a) nv *= box.vdim(a);
  if (int(gvert.size()) != nv * dd) fail_usage("fd_interior: metric field has the wrong size");
  GridSampler s{&box, gvert.data(), dd};
  FdInterior out;
  out.R.assign(nv, 0.0);
  out.ric.assign(std::size_t(nv) * dd, 0.0);
  int idx[3];
  for (int v = 0; v < nv; ++v) {
    grid_coords_of_vertex(box, v, idx);
    bool ghost = false;
    for (int a = 0; a < d; ++a) ghost = ghost || (box.periodic[a] && idx[a] == box.res[a]);
    if (ghost) continue;
    double* rc = &out.ric[std::size_t(v) * dd];
    ric_at(s, idx, rc);
    double ginv[9];
    sym_inv(s.at(idx), d, ginv);
    double r = 0.0;
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b) r += ginv[a * d + b] * rc[a * d + b];
    out.R[v] = r;
  }
  // ghosts mirror their master
  for (int v = 0; v < nv; ++v) {
    grid_coords_of_vertex(box, v, idx);
    int w[3];
    bool ghost = false;
    for (int a = 0; a < d; ++a) {
      w[a] = idx[a];
      if (box.periodic[a] && idx[a] == box.res[a]) {
        w[a] = 0;
        ghost = true;
      }
    }
    if (!ghost) continue;
    int mv = vertex_of_grid_coords(box, w);
    out.R[v] = out.R[mv];
    std::memcpy(&out.ric[std::size_t(v) * dd], &out.ric[std::size_t(mv) * dd], sizeof(double) * dd);
  }
  return out;
}

void fd_side_vertex(const BoxSpec& box, const std::vector<double>& gvert, int axis, int side, const int* idx,
                    double* a_out, double* h_out) {
  const int d = box.dim, dd = d * d;
  GridSampler s{&box, gvert.data(), dd};
  if (d == 1) {
    *h_out = 0.0;
    return;
  }
  double sgn = side ? 1.0 : -1.0;
  auto eta_at = [&](const int* p, double* eta) {
    double ginv[9];
    sym_inv(s.at(p), d, ginv);
    double nrm = std::sqrt(ginv[axis * d + axis]);
    for (int k = 0; k < d; ++k) eta[k] = sgn * ginv[k * d + axis] / nrm;
  };
  int ts[3], nt = 0;
  for (int a = 0; a < d; ++a)
    if (a != axis) ts[nt++] = a;
  double G[27];
  gamma_at(s, idx, G);
  double eta[3];
  eta_at(idx, eta);
  double deta[2][3], scratch[9];
  for (int i = 0; i < nt; ++i) grid_deriv(box, idx, ts[i], d, eta_at, deta[i], scratch);
  const double* g = s.at(idx);
  double A[4];
  for (int i = 0; i < nt; ++i)
    for (int j = 0; j < nt; ++j) {
      double v = 0.0;
      for (int k = 0; k < d; ++k) {
        double dk = deta[i][k];
        for (int l = 0; l < d; ++l) dk += G[(k * d + ts[i]) * d + l] * eta[l];
        v += g[ts[j] * d + k] * dk;
      }
      A[i * nt + j] = v;
    }
  for (int i = 0; i < nt; ++i)
    for (int j = i + 1; j < nt; ++j) {
      double m = 0.5 * (A[i * nt + j] + A[j * nt + i]);
      A[i * nt + j] = A[j * nt + i] = m;
    }
  double ghat[4] = {0}, ghatinv[4] = {0};
  for (int i = 0; i < nt; ++i)
    for (int j = 0; j < nt; ++j) ghat[i * nt + j] = g[ts[i] * d + ts[j]];
  sym_inv(ghat, nt, ghatinv);
  double H = 0.0;
  for (int i = 0; i < nt; ++i)
    for (int j = 0; j < nt; ++j) H += ghatinv[i * nt + j] * A[i * nt + j];
  *h_out = H / nt;
  for (int k = 0; k < nt * nt; ++k) a_out[k] = A[k];
}

PerturbEngine::PerturbEngine(const Model& model, const Mesh& mesh) : mesh_(&mesh) {
  if (!mesh.structured) fail_usage("metric perturbation needs the structured chart");
  base_ = evaluate_model(model, mesh);
  if (!base_.has_ric()) fail_usage("metric perturbation needs a model with Ricci data");
}

void PerturbEngine::fd_all(const std::vector<double>& gvert, FdInterior& fi, Vec& hf,
                           std::vector<double>& af) const {
  const Mesh& m = *mesh_;
  const int d = m.dim, tt = (d - 1) * (d - 1);
  fi = fd_interior(m.box, gvert);
  hf.assign(m.boundary.size(), 0.0);
  af.assign(m.boundary.size() * std::size_t(tt), 0.0);
  int fv[3], idx[3];
  for (std::size_t i = 0; i < m.boundary.size(); ++i) {
    const Facet& f = m.boundary[i];
    if (f.axis < 0) continue;
    int nfv = m.facet_verts(f, fv);
    double hacc = 0.0, aacc[4] = {0, 0, 0, 0}, aone[4], hone;
    for (int l = 0; l < nfv; ++l) {
      grid_coords_of_vertex(m.box, fv[l], idx);
      fd_side_vertex(m.box, gvert, f.axis, f.side, idx, aone, &hone);
      hacc += hone;
      for (int k = 0; k < tt; ++k) aacc[k] += aone[k];
    }
    hf[i] = hacc / nfv;
    for (int k = 0; k < tt; ++k) af[i * tt + k] = aacc[k] / nfv;
  }
}

void PerturbEngine::ensure_fd() {
  if (fd_ready_) return;
  fd_all(base_.g, fd_base_, fd_base_H_, fd_base_A_);
  fd_ready_ = true;
}

Geometry PerturbEngine::at(const Perturbation& p, double t) {
  const Mesh& m = *mesh_;
  const int d = m.dim, dd = d * d, tt = (d - 1) * (d - 1);
  if (p.dim != d || int(p.h.size()) != m.nv * dd) fail_usage("perturbation does not match the mesh");
  if (t == 0.0) return base_;
  Geometry out = base_;
  for (std::size_t k = 0; k < out.g.size(); ++k) out.g[k] += t * p.h[k];
  for (int v = 0; v < m.nv; ++v) {
    int mv = m.master[v];
    if (mv != v) std::memcpy(&out.g[std::size_t(v) * dd], &out.g[std::size_t(mv) * dd], sizeof(double) * dd);
    if (!sym_spd(out.gv(v), d))
      fail_numeric("perturbed metric loses positivity at vertex " + std::to_string(v));
  }
  ensure_fd();
  FdInterior fi;
  Vec hf;
  std::vector<double> af;
  fd_all(out.g, fi, hf, af);
  for (int v = 0; v < m.nv; ++v) {
    out.R[v] += fi.R[v] - fd_base_.R[v];
    for (int k = 0; k < dd; ++k)
      out.ric[std::size_t(v) * dd + k] += fi.ric[std::size_t(v) * dd + k] - fd_base_.ric[std::size_t(v) * dd + k];
  }
  for (std::size_t i = 0; i < m.boundary.size(); ++i) {
    out.Hfacet[i] += hf[i] - fd_base_H_[i];
    for (int k = 0; k < tt; ++k) out.Afacet[i * tt + k] += af[i * tt + k] - fd_base_A_[i * tt + k];
  }
  return out;
}

}  // namespace conformal
