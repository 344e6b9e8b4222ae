#pragma once

#include <functional>

#include "conformal/mesh.hpp"

namespace conformal {

// Dense symmetric helpers for d <= 3, full row-major storage.
double sym_det(const double* g, int d);
void sym_inv(const double* g, int d, double* out);  // throws numeric when det <= 0
bool sym_spd(const double* g, int d);               // leading principal minors positive
void mat_id(int d, double* g);

// Constants of the conformal change u^{4/(n-2)} g for 3 <= n <= 10.
struct ConformalConstants {
  int n = 0;
  double a = 0;       // 4(n-1)/(n-2), gradient weight of the conformal Laplacian
  double c = 0;       // (n-2)/(4(n-1)); a*c = 1
  double dhalf = 0;   // (n-2)/2, boundary weight
  double p_int = 0;   // (n+2)/(n-2)
  double p_bdy = 0;   // n/(n-2)
  double p_conf = 0;  // 4/(n-2); p_int = p_conf+1, p_bdy = p_conf/2+1
  double kappa = 0;   // 2(n-1) = a*dhalf, boundary scale of the quadratic form
};
ConformalConstants conformal_constants(int n);

// A chart model: metric and curvature callbacks in box coordinates. The
// boundary callbacks are indexed by box side; tangent axes of a side are the
// remaining chart axes in ascending order.
struct Model {
  std::string name;
  int dim = 0;
  std::function<void(const double* x, double* g)> metric;
  std::function<double(const double* x)> scalar;
  std::function<void(const double* x, double* ric)> ricci;
  std::function<double(const double* x, int axis, int side)> mean;
  std::function<void(const double* x, int axis, int side, double* a)> second_ff;
  std::function<void(const BoxSpec&)> check_box;  // chart validity
};

Model flat_slab(int dim);
Model euclidean_ball_chart(int dim, double r0, double rho);
// Upper-half-space coordinates with the depth coordinate last; vertical walls
// are totally geodesic, the horizontal caps have |H| = 1. The two variants
// differ only in which cap faces one treats as the working boundary.
Model hyperbolic_halfspace_geodesic(int dim);
Model hyperbolic_horoball_collar(int dim);
// g = a(s)^2 dx^2 + b(s)^2 dy^2 + ds^2 with s the last axis. Profiles:
//   "const"  a = b = 1
//   "exp"    a = b = exp(alpha s)
//   "cos"    a = b = cos(alpha s)
//   "cosexp" a = exp(alpha s), b the decaying oscillation that makes R = 0
Model product_warped(const std::string& profile, double alpha);

// Pointwise data of a model sampled on a mesh. Cell data is vertex-averaged
// at assembly time; boundary facet data is the mean over facet vertices.
struct Geometry {
  int dim = 0;
  std::vector<double> g;    // per vertex, dim*dim
  Vec R;                    // per vertex
  std::vector<double> ric;  // per vertex, dim*dim; empty when the model has none
  Vec Hfacet;               // per boundary facet
  std::vector<double> Afacet;  // per boundary facet, (dim-1)^2 in tangent axes

  bool has_ric() const { return !ric.empty(); }
  const double* gv(int v) const { return &g[std::size_t(v) * dim * dim]; }
  const double* ricv(int v) const { return &ric[std::size_t(v) * dim * dim]; }
  const double* af(int f) const { return &Afacet[std::size_t(f) * (dim - 1) * (dim - 1)]; }
};

Geometry evaluate_model(const Model& model, const Mesh& mesh);

// Restriction of ambient geometry to an extracted submesh: vertex fields pull
// back along parent_vert, facet fields along facet_parent; fresh cut faces get
// zero boundary data (they never carry Robin weights).
Geometry restrict_geometry(const Geometry& geo, const Submesh& sub);

// Symmetric 2-tensor field, one value per vertex.
struct Perturbation {
  int dim = 0;
  std::vector<double> h;  // nv * dim*dim
  const double* hv(int v) const { return &h[std::size_t(v) * dim * dim]; }
};

// h = -chi * Ric with a nonnegative interior cutoff chi given per vertex.
Perturbation ricci_perturbation(const Mesh& mesh, const Geometry& geo, const Vec& chi);

// h = chi(x) * zeta(dist/eps) * A~, where A~ extends the side's second
// fundamental form at constant depth along the side's chart axis. The profile
// zeta must satisfy zeta(0) = 1, zeta'(0) = 0 and vanish beyond 1.
Perturbation collar_perturbation(const Mesh& mesh, const Model& model, int axis, int side, double eps,
                                 const std::function<double(const double*)>& chi,
                                 const std::function<double(double)>& zeta);

// Finite-difference curvature of a vertex-sampled metric on the structured
// grid: central differences inside, second-order one-sided at chart edges,
// periodic wrap where the box is periodic.
struct FdInterior {
  Vec R;                    // per vertex
  std::vector<double> ric;  // per vertex
};
FdInterior fd_interior(const BoxSpec& box, const std::vector<double>& gvert);
// H and A of the box side at one vertex lying on that side.
void fd_side_vertex(const BoxSpec& box, const std::vector<double>& gvert, int axis, int side, const int* idx,
                    double* a_out, double* h_out);

// Geometry of g + t h with curvature corrected by finite differences against
// the cached baseline: catalog value + [FD(g+th) - FD(g)]. At t = 0 the
// correction cancels bitwise; away from the stencil halo of supp h it is
// exactly zero.
class PerturbEngine {
 public:
  PerturbEngine(const Model& model, const Mesh& mesh);
  const Mesh& mesh() const { return *mesh_; }
  const Geometry& base() const { return base_; }
  Geometry at(const Perturbation& p, double t);

 private:
  const Mesh* mesh_;
  Geometry base_;
  bool fd_ready_ = false;
  FdInterior fd_base_;
  Vec fd_base_H_;
  std::vector<double> fd_base_A_;
  void ensure_fd();
  void fd_all(const std::vector<double>& gvert, FdInterior& fi, Vec& hf, std::vector<double>& af) const;
};

}  // namespace conformal
