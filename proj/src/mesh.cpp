#include "conformal/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace conformal {

namespace {

using FaceKey = std::array<int, 3>;

struct FaceKeyHash {
  std::size_t operator()(const FaceKey& a) const {
    std::size_t h = 1469598103934665603ull;
    for (int x : a) {
      h ^= std::size_t(x) + 0x9e3779b97f4a7c15ull;
      h *= 1099511628211ull;
    }
    return h;
  }
};

FaceKey face_key(const Mesh& m, int cell, int opp) {
  FaceKey k = {-1, -1, -1};
  const int* cv = m.cell_verts(cell);
  int t = 0;
  for (int l = 0; l <= m.dim; ++l)
    if (l != opp) k[t++] = m.node_of[cv[l]];
  std::sort(k.begin(), k.begin() + m.dim);
  return k;
}

struct FaceUse {
  int cell0 = -1, opp0 = -1;
  int cell1 = -1, opp1 = -1;
  int count = 0;
};

using FaceMap = std::unordered_map<FaceKey, FaceUse, FaceKeyHash>;

FaceMap build_face_map(const Mesh& m) {
  FaceMap fm;
  fm.reserve(std::size_t(m.nc) * (m.dim + 1));
  for (int c = 0; c < m.nc; ++c)
    for (int l = 0; l <= m.dim; ++l) {
      FaceUse& u = fm[face_key(m, c, l)];
      if (u.count == 0) {
        u.cell0 = c;
        u.opp0 = l;
      } else if (u.count == 1) {
        u.cell1 = c;
        u.opp1 = l;
      }
      u.count += 1;
    }
  return fm;
}

double det_small(const double* e, int d) {
  if (d == 1) return e[0];
  if (d == 2) return e[0] * e[3] - e[1] * e[2];
  return e[0] * (e[4] * e[8] - e[5] * e[7]) - e[1] * (e[3] * e[8] - e[5] * e[6]) +
         e[2] * (e[3] * e[7] - e[4] * e[6]);
}

double cell_chart_det(const Mesh& m, int c) {
  double e[9] = {0};
  const int* cv = m.cell_verts(c);
  const double* x0 = m.vert_coord(cv[0]);
  for (int k = 1; k <= m.dim; ++k) {
    const double* xk = m.vert_coord(cv[k]);
    for (int a = 0; a < m.dim; ++a) e[a * m.dim + (k - 1)] = xk[a] - x0[a];
  }
  return det_small(e, m.dim);
}

}  // namespace

const char* role_name(BoundaryRole r) {
  switch (r) {
    case BoundaryRole::outer: return "outer";
    case BoundaryRole::cut: return "cut";
    default: return "unset";
  }
}

BoundaryRole role_from_name(const std::string& s) {
  if (s == "outer") return BoundaryRole::outer;
  if (s == "cut") return BoundaryRole::cut;
  fail_usage("unknown boundary role '" + s + "'");
}

int Mesh::facet_verts(const Facet& f, int out[3]) const {
  const int* cv = cell_verts(f.cell);
  int t = 0;
  for (int l = 0; l <= dim; ++l)
    if (l != f.opp) out[t++] = cv[l];
  return dim;
}

void Mesh::cell_centroid(int c, double* xc) const {
  for (int a = 0; a < dim; ++a) xc[a] = 0.0;
  const int* cv = cell_verts(c);
  for (int l = 0; l <= dim; ++l) {
    const double* x = vert_coord(cv[l]);
    for (int a = 0; a < dim; ++a) xc[a] += x[a];
  }
  for (int a = 0; a < dim; ++a) xc[a] /= (dim + 1);
}

void Mesh::facet_centroid(const Facet& f, double* xc) const {
  int fv[3];
  facet_verts(f, fv);
  for (int a = 0; a < dim; ++a) xc[a] = 0.0;
  for (int l = 0; l < dim; ++l) {
    const double* x = vert_coord(fv[l]);
    for (int a = 0; a < dim; ++a) xc[a] += x[a];
  }
  for (int a = 0; a < dim; ++a) xc[a] /= dim;
}

void Mesh::finalize() {
  nv = int(coords.size()) / std::max(dim, 1);
  nc = int(cells.size()) / (dim + 1);
  if (int(master.size()) != nv) {
    master.resize(nv);
    for (int v = 0; v < nv; ++v) master[v] = v;
  }
  node_of.assign(nv, -1);
  node_rep.clear();
  nn = 0;
  for (int v = 0; v < nv; ++v) {
    if (master[v] == v) {
      node_of[v] = nn++;
      node_rep.push_back(v);
    }
  }
  for (int v = 0; v < nv; ++v) {
    if (master[v] != v) {
      if (master[master[v]] != master[v]) fail_usage("periodic identification is not idempotent");
      node_of[v] = node_of[master[v]];
    }
  }
  // incidence, cells ascending
  inc_ptr.assign(nn + 1, 0);
  for (int c = 0; c < nc; ++c)
    for (int l = 0; l <= dim; ++l) inc_ptr[node_of[cells[std::size_t(c) * (dim + 1) + l]] + 1] += 1;
  for (int i = 0; i < nn; ++i) inc_ptr[i + 1] += inc_ptr[i];
  inc.assign(inc_ptr[nn], {0, 0});
  std::vector<int> cursor(inc_ptr.begin(), inc_ptr.end() - 1);
  for (int c = 0; c < nc; ++c)
    for (int l = 0; l <= dim; ++l) {
      int nd = node_of[cells[std::size_t(c) * (dim + 1) + l]];
      inc[cursor[nd]++] = {c, l};
    }
}

void grid_coords_of_vertex(const BoxSpec& box, int v, int* idx) {
  for (int a = 0; a < box.dim; ++a) {
    idx[a] = v % box.vdim(a);
    v /= box.vdim(a);
  }
}

int vertex_of_grid_coords(const BoxSpec& box, const int* idx) {
  int v = 0, stride = 1;
  for (int a = 0; a < box.dim; ++a) {
    v += idx[a] * stride;
    stride *= box.vdim(a);
  }
  return v;
}

Mesh build_box_mesh(const BoxSpec& spec) {
  if (spec.dim < 1 || spec.dim > 3) fail_usage("box mesh: chart dimension must be 1, 2 or 3");
  if (int(spec.res.size()) != spec.dim || int(spec.lo.size()) != spec.dim || int(spec.hi.size()) != spec.dim ||
      int(spec.periodic.size()) != spec.dim)
    fail_usage("box mesh: res/lo/hi/periodic must all have length dim");
  for (int a = 0; a < spec.dim; ++a) {
    if (spec.res[a] < 1) fail_usage("box mesh: res must be positive on every axis");
    if (!(spec.hi[a] > spec.lo[a])) fail_usage("box mesh: hi must exceed lo on every axis");
    if (spec.periodic[a] && spec.res[a] < 3) fail_usage("box mesh: periodic axes need res >= 3");
  }
  const int d = spec.dim;
  Mesh m;
  m.dim = d;
  m.structured = true;
  m.box = spec;

  int nv = 1;
  for (int a = 0; a < d; ++a) nv *= spec.vdim(a);
  m.coords.resize(std::size_t(nv) * d);
  m.master.resize(nv);
  int idx[3];
  for (int v = 0; v < nv; ++v) {
    grid_coords_of_vertex(spec, v, idx);
    for (int a = 0; a < d; ++a) m.coords[std::size_t(v) * d + a] = spec.lo[a] + idx[a] * spec.h(a);
    int widx[3];
    for (int a = 0; a < d; ++a) widx[a] = (spec.periodic[a] && idx[a] == spec.res[a]) ? 0 : idx[a];
    m.master[v] = vertex_of_grid_coords(spec, widx);
  }

  // Kuhn split: one simplex per permutation, walking the cube edge by edge.
  std::vector<std::array<int, 3>> perms;
  {
    std::array<int, 3> p = {0, 1, 2};
    std::vector<int> w(p.begin(), p.begin() + d);
    do {
      std::array<int, 3> q = {0, 0, 0};
      for (int i = 0; i < d; ++i) q[i] = w[i];
      perms.push_back(q);
    } while (std::next_permutation(w.begin(), w.end()));
  }
  int ncube = 1;
  for (int a = 0; a < d; ++a) ncube *= spec.res[a];
  m.cells.reserve(std::size_t(ncube) * perms.size() * (d + 1));
  int cube[3];
  for (int q = 0; q < ncube; ++q) {
    int t = q;
    for (int a = 0; a < d; ++a) {
      cube[a] = t % spec.res[a];
      t /= spec.res[a];
    }
    for (const auto& p : perms) {
      int cur[3];
      for (int a = 0; a < d; ++a) cur[a] = cube[a];
      m.cells.push_back(vertex_of_grid_coords(spec, cur));
      for (int k = 0; k < d; ++k) {
        cur[p[k]] += 1;
        m.cells.push_back(vertex_of_grid_coords(spec, cur));
      }
    }
  }
  m.finalize();

  // Boundary facets: faces whose vertices all sit on one non-periodic box side.
  for (int c = 0; c < m.nc; ++c) {
    const int* cv = m.cell_verts(c);
    int vidx[4][3];
    for (int l = 0; l <= d; ++l) grid_coords_of_vertex(spec, cv[l], vidx[l]);
    for (int opp = 0; opp <= d; ++opp) {
      for (int a = 0; a < d; ++a) {
        if (spec.periodic[a]) continue;
        bool all_lo = true, all_hi = true;
        for (int l = 0; l <= d; ++l) {
          if (l == opp) continue;
          if (vidx[l][a] != 0) all_lo = false;
          if (vidx[l][a] != spec.res[a]) all_hi = false;
        }
        if (all_lo || all_hi) {
          Facet f;
          f.cell = c;
          f.opp = opp;
          f.axis = a;
          f.side = all_hi ? 1 : 0;
          m.boundary.push_back(f);
        }
      }
    }
  }
  return m;
}

TagRule rule_on_side(int axis, int side, BoundaryRole role) {
  TagRule r;
  r.match = [axis, side](const Mesh&, const Facet& f) { return f.axis == axis && f.side == side; };
  r.role = role;
  return r;
}

std::vector<TagRule> box_side_rules(const BoxSpec& spec, const std::vector<std::pair<int, int>>& outer) {
  for (auto [a, s] : outer) {
    if (a < 0 || a >= spec.dim || s < 0 || s > 1) fail_usage("box_side_rules: side out of range");
    if (spec.periodic[a]) fail_usage("box_side_rules: axis " + std::to_string(a) + " is periodic, it has no side");
  }
  std::vector<TagRule> rules;
  for (int a = 0; a < spec.dim; ++a) {
    if (spec.periodic[a]) continue;
    for (int s = 0; s < 2; ++s) {
      bool is_outer = false;
      for (auto [oa, os] : outer) is_outer = is_outer || (oa == a && os == s);
      rules.push_back(rule_on_side(a, s, is_outer ? BoundaryRole::outer : BoundaryRole::cut));
    }
  }
  return rules;
}

void tag_boundary(Mesh& mesh, const std::vector<TagRule>& rules) {
  for (std::size_t i = 0; i < mesh.boundary.size(); ++i) {
    Facet& f = mesh.boundary[i];
    BoundaryRole role = BoundaryRole::unset;
    for (const auto& r : rules) {
      if (!r.match(mesh, f)) continue;
      if (r.role == BoundaryRole::unset) fail_usage("tag rule carries no role");
      if (role != BoundaryRole::unset && role != r.role)
        fail_usage("boundary facet " + std::to_string(i) + " matched by rules with different roles");
      role = r.role;
    }
    if (role == BoundaryRole::unset)
      fail_usage("boundary facet " + std::to_string(i) + " (cell " + std::to_string(f.cell) +
                 ") matched by no tag rule");
    f.role = role;
  }
}

void validate_mesh(const Mesh& m, bool require_tags) {
  if (m.dim < 1 || m.dim > 3) fail_usage("validate: dimension out of range");
  for (double x : m.coords)
    if (!std::isfinite(x)) fail_usage("validate: non-finite vertex coordinate");
  for (int v = 0; v < m.nv; ++v) {
    if (m.master[v] < 0 || m.master[v] >= m.nv) fail_usage("validate: master out of range");
    if (m.master[m.master[v]] != m.master[v]) fail_usage("validate: master not idempotent");
    if (m.node_of[v] != m.node_of[m.master[v]]) fail_usage("validate: node numbering inconsistent");
  }
  for (int c = 0; c < m.nc; ++c) {
    if (std::fabs(cell_chart_det(m, c)) <= 0.0)
      fail_usage("validate: degenerate cell " + std::to_string(c));
  }
  FaceMap fm = build_face_map(m);
  for (const auto& [k, u] : fm)
    if (u.count > 2) fail_usage("validate: face shared by more than two cells");
  std::unordered_map<FaceKey, int, FaceKeyHash> listed;
  for (std::size_t i = 0; i < m.boundary.size(); ++i) {
    const Facet& f = m.boundary[i];
    if (f.cell < 0 || f.cell >= m.nc || f.opp < 0 || f.opp > m.dim)
      fail_usage("validate: boundary facet reference out of range");
    FaceKey k = face_key(m, f.cell, f.opp);
    auto it = fm.find(k);
    if (it == fm.end() || it->second.count != 1)
      fail_usage("validate: boundary facet " + std::to_string(i) + " is not a one-sided face");
    if (listed.count(k)) fail_usage("validate: boundary facet listed twice");
    listed[k] = int(i);
    if (require_tags && f.role == BoundaryRole::unset)
      fail_usage("validate: boundary facet " + std::to_string(i) + " is untagged");
  }
  for (const auto& [k, u] : fm) {
    if (u.count == 1 && !listed.count(k))
      fail_usage("validate: one-sided face of cell " + std::to_string(u.cell0) +
                 " missing from the boundary list");
  }
}

Submesh extract_cells(const Mesh& m, const std::vector<int>& cell_ids) {
  if (cell_ids.empty()) fail_usage("extract_cells: empty cell set");
  for (std::size_t i = 0; i < cell_ids.size(); ++i) {
    if (cell_ids[i] < 0 || cell_ids[i] >= m.nc) fail_usage("extract_cells: cell id out of range");
    if (i > 0 && cell_ids[i] <= cell_ids[i - 1]) fail_usage("extract_cells: cell ids must be strictly ascending");
  }
  Submesh sub;
  Mesh& s = sub.mesh;
  s.dim = m.dim;
  const int d = m.dim;

  std::vector<std::uint8_t> keep(m.nc, 0);
  for (int c : cell_ids) keep[c] = 1;
  std::vector<std::uint8_t> vused(m.nv, 0);
  for (int c : cell_ids) {
    const int* cv = m.cell_verts(c);
    for (int l = 0; l <= d; ++l) vused[cv[l]] = 1;
  }
  std::vector<int> vmap(m.nv, -1);
  for (int v = 0; v < m.nv; ++v) {
    if (!vused[v]) continue;
    vmap[v] = int(sub.parent_vert.size());
    sub.parent_vert.push_back(v);
    for (int a = 0; a < d; ++a) s.coords.push_back(m.coords[std::size_t(v) * d + a]);
  }
  // periodic classes keyed by the ambient dof; representative = first kept vertex
  std::unordered_map<int, int> rep_of_class;
  s.master.resize(sub.parent_vert.size());
  for (std::size_t nvv = 0; nvv < sub.parent_vert.size(); ++nvv) {
    int cls = m.node_of[sub.parent_vert[nvv]];
    auto it = rep_of_class.find(cls);
    if (it == rep_of_class.end()) {
      rep_of_class.emplace(cls, int(nvv));
      s.master[nvv] = int(nvv);
    } else {
      s.master[nvv] = it->second;
    }
  }
  sub.parent_cell = cell_ids;
  for (int c : cell_ids) {
    const int* cv = m.cell_verts(c);
    for (int l = 0; l <= d; ++l) s.cells.push_back(vmap[cv[l]]);
  }
  s.finalize();
  sub.parent_node.resize(s.nn);
  for (int nd = 0; nd < s.nn; ++nd) sub.parent_node[nd] = m.node_of[sub.parent_vert[s.node_rep[nd]]];

  FaceMap fm = build_face_map(m);
  std::unordered_map<FaceKey, int, FaceKeyHash> ambient_bdry;
  for (std::size_t i = 0; i < m.boundary.size(); ++i)
    ambient_bdry[face_key(m, m.boundary[i].cell, m.boundary[i].opp)] = int(i);

  for (std::size_t ci = 0; ci < cell_ids.size(); ++ci) {
    int c = cell_ids[ci];
    for (int opp = 0; opp <= d; ++opp) {
      FaceKey k = face_key(m, c, opp);
      const FaceUse& u = fm.at(k);
      int nbr = (u.cell0 == c && u.opp0 == opp) ? u.cell1 : u.cell0;
      if (nbr >= 0 && keep[nbr]) continue;
      Facet f;
      f.cell = int(ci);
      f.opp = opp;
      auto bi = ambient_bdry.find(k);
      if (bi != ambient_bdry.end()) {
        const Facet& pf = m.boundary[bi->second];
        f.axis = pf.axis;
        f.side = pf.side;
        f.role = pf.role;
        sub.facet_parent.push_back(bi->second);
      } else {
        f.role = BoundaryRole::cut;
        sub.facet_parent.push_back(-1);
      }
      s.boundary.push_back(f);
    }
  }
  return sub;
}

CellPred centroid_below(int axis, double value) {
  return [axis, value](const Mesh& m, int c) {
    double xc[3];
    m.cell_centroid(c, xc);
    return xc[axis] < value;
  };
}

std::vector<int> Exhaustion::outer_facets(int j) const {
  std::vector<int> out;
  const Submesh& sm = level[j];
  for (std::size_t i = 0; i < sm.mesh.boundary.size(); ++i)
    if (sm.mesh.boundary[i].role == BoundaryRole::outer) {
      if (sm.facet_parent[i] < 0) fail_numeric("exhaustion: outer facet without an ambient parent");
      out.push_back(sm.facet_parent[i]);
    }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> Exhaustion::boundary_shell(int i) const {
  std::vector<int> cur = outer_facets(i);
  if (i == 0) return cur;
  std::vector<int> prev = outer_facets(i - 1);
  std::vector<int> out;
  std::set_difference(cur.begin(), cur.end(), prev.begin(), prev.end(), std::back_inserter(out));
  return out;
}

std::vector<int> Exhaustion::cell_shell(int i) const {
  if (i == 0) return cells[0];
  std::vector<int> out;
  std::set_difference(cells[i].begin(), cells[i].end(), cells[i - 1].begin(), cells[i - 1].end(),
                      std::back_inserter(out));
  return out;
}

Exhaustion build_exhaustion(const Mesh& ambient, const std::vector<CellPred>& levels) {
  if (levels.empty()) fail_usage("exhaustion: no levels");
  for (const Facet& f : ambient.boundary)
    if (f.role == BoundaryRole::unset) fail_usage("exhaustion: ambient mesh boundary must be tagged first");
  Exhaustion ex;
  ex.ambient = &ambient;
  for (std::size_t j = 0; j < levels.size(); ++j) {
    std::vector<int> cs;
    for (int c = 0; c < ambient.nc; ++c)
      if (levels[j](ambient, c)) cs.push_back(c);
    if (cs.empty()) fail_hypothesis("exhaustion: level " + std::to_string(j) + " selects no cells");
    ex.cells.push_back(std::move(cs));
  }
  for (std::size_t j = 0; j + 1 < ex.cells.size(); ++j) {
    const auto& a = ex.cells[j];
    const auto& b = ex.cells[j + 1];
    if (!std::includes(b.begin(), b.end(), a.begin(), a.end()))
      fail_hypothesis("exhaustion: level " + std::to_string(j) + " is not contained in level " +
                      std::to_string(j + 1));
    if (a.size() == b.size())
      fail_hypothesis("exhaustion: level " + std::to_string(j) + " equals level " + std::to_string(j + 1) +
                      "; nesting must be strict");
    // interior containment: the whole ambient cell star of every vertex of
    // level j must be kept in level j+1
    std::vector<std::uint8_t> in_next(ambient.nc, 0);
    for (int c : b) in_next[c] = 1;
    for (int c : a) {
      const int* cv = ambient.cell_verts(c);
      for (int l = 0; l <= ambient.dim; ++l) {
        int nd = ambient.node_of[cv[l]];
        for (int k = ambient.inc_ptr[nd]; k < ambient.inc_ptr[nd + 1]; ++k) {
          if (!in_next[ambient.inc[k].first])
            fail_hypothesis("exhaustion: vertex " + std::to_string(cv[l]) + " of level " + std::to_string(j) +
                            " touches a cell outside level " + std::to_string(j + 1));
        }
      }
    }
  }
  for (std::size_t j = 0; j < ex.cells.size(); ++j) {
    ex.level.push_back(extract_cells(ambient, ex.cells[j]));
    bool has_outer = false;
    for (const Facet& f : ex.level[j].mesh.boundary) has_outer = has_outer || (f.role == BoundaryRole::outer);
    if (!has_outer)
      fail_hypothesis("exhaustion: level " + std::to_string(j) + " has no outer boundary facet");
  }
  return ex;
}

std::vector<std::uint8_t> select_nodes(const Mesh& mesh, const std::function<bool(const double*)>& pred) {
  std::vector<std::uint8_t> out(mesh.nn, 0);
  for (int nd = 0; nd < mesh.nn; ++nd)
    out[nd] = pred(mesh.vert_coord(mesh.node_rep[nd])) ? 1 : 0;
  return out;
}

std::vector<std::uint8_t> dofs_on_role(const Mesh& mesh, BoundaryRole role) {
  std::vector<std::uint8_t> out(mesh.nn, 0);
  int w[3];
  for (const Facet& f : mesh.boundary) {
    if (f.role != role) continue;
    int cnt = mesh.facet_verts(f, w);
    for (int a = 0; a < cnt; ++a) out[mesh.node(w[a])] = 1;
  }
  return out;
}

std::vector<std::pair<int, int>> build_edges(const Mesh& mesh) {
  std::vector<std::pair<int, int>> edges;
  edges.reserve(std::size_t(mesh.nc) * 6);
  for (int c = 0; c < mesh.nc; ++c) {
    const int* cv = mesh.cell_verts(c);
    for (int a = 0; a <= mesh.dim; ++a)
      for (int b = a + 1; b <= mesh.dim; ++b) {
        int na = mesh.node_of[cv[a]], nb = mesh.node_of[cv[b]];
        if (na == nb) continue;
        edges.emplace_back(std::min(na, nb), std::max(na, nb));
      }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

std::vector<int> bfs_hops(const Mesh& mesh, const std::vector<int>& seeds) {
  auto edges = build_edges(mesh);
  std::vector<int> deg(mesh.nn + 1, 0);
  for (auto& e : edges) {
    deg[e.first + 1]++;
    deg[e.second + 1]++;
  }
  for (int i = 0; i < mesh.nn; ++i) deg[i + 1] += deg[i];
  std::vector<int> adj(deg.back());
  std::vector<int> cur(deg.begin(), deg.end() - 1);
  for (auto& e : edges) {
    adj[cur[e.first]++] = e.second;
    adj[cur[e.second]++] = e.first;
  }
  std::vector<int> hops(mesh.nn, -1);
  std::deque<int> q;
  for (int s : seeds) {
    if (s < 0 || s >= mesh.nn) fail_usage("bfs: seed out of range");
    if (hops[s] == 0) continue;
    hops[s] = 0;
    q.push_back(s);
  }
  while (!q.empty()) {
    int u = q.front();
    q.pop_front();
    for (int k = deg[u]; k < deg[u + 1]; ++k) {
      int w = adj[k];
      if (hops[w] < 0) {
        hops[w] = hops[u] + 1;
        q.push_back(w);
      }
    }
  }
  return hops;
}

void write_mesh(const Mesh& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail_usage("cannot open for writing: " + path);
  char buf[128];
  out << "# simplicial mesh, dim " << m.dim << "\n";
  out << "VERTICES\n";
  for (int v = 0; v < m.nv; ++v) {
    out << v;
    for (int a = 0; a < m.dim; ++a) {
      std::snprintf(buf, sizeof buf, " %.17g", m.coords[std::size_t(v) * m.dim + a]);
      out << buf;
    }
    out << "\n";
  }
  out << "CELLS\n";
  for (int c = 0; c < m.nc; ++c) {
    const int* cv = m.cell_verts(c);
    for (int l = 0; l <= m.dim; ++l) out << (l ? " " : "") << cv[l];
    out << "\n";
  }
  out << "BOUNDARY\n";
  for (const Facet& f : m.boundary) {
    int fv[3];
    m.facet_verts(f, fv);
    for (int l = 0; l < m.dim; ++l) out << fv[l] << " ";
    out << role_name(f.role) << "\n";
  }
  out << "PERIODIC\n";
  for (int v = 0; v < m.nv; ++v)
    if (m.master[v] != v) out << v << " " << m.master[v] << "\n";
}

Mesh read_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_usage("cannot open: " + path);
  enum Sec { none, verts, cells, bdry, periodic } sec = none;
  std::vector<std::pair<int, Vec>> vlines;
  std::vector<std::vector<int>> clines;
  std::vector<std::pair<std::vector<int>, std::string>> blines;
  std::vector<std::pair<int, int>> plines;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto h = line.find('#');
    if (h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    std::string tok;
    if (!(ls >> tok)) continue;
    if (tok == "VERTICES") { sec = verts; continue; }
    if (tok == "CELLS") { sec = cells; continue; }
    if (tok == "BOUNDARY") { sec = bdry; continue; }
    if (tok == "PERIODIC") { sec = periodic; continue; }
    std::string where = path + ":" + std::to_string(lineno);
    if (sec == verts) {
      int id = std::stoi(tok);
      Vec xs;
      double x;
      while (ls >> x) xs.push_back(x);
      if (xs.empty()) fail_usage(where + ": vertex line without coordinates");
      vlines.emplace_back(id, xs);
    } else if (sec == cells) {
      std::vector<int> ids;
      ids.push_back(std::stoi(tok));
      int v;
      while (ls >> v) ids.push_back(v);
      clines.push_back(ids);
    } else if (sec == bdry) {
      std::vector<int> ids;
      ids.push_back(std::stoi(tok));
      std::string role;
      std::string t2;
      while (ls >> t2) {
        bool numeric = !t2.empty() && (std::isdigit(t2[0]) || t2[0] == '-');
        if (numeric)
          ids.push_back(std::stoi(t2));
        else
          role = t2;
      }
      if (role.empty()) fail_usage(where + ": boundary facet line without a role tag");
      blines.emplace_back(ids, role);
    } else if (sec == periodic) {
      int g = std::stoi(tok), mm;
      if (!(ls >> mm)) fail_usage(where + ": periodic line needs two vertex ids");
      plines.emplace_back(g, mm);
    } else {
      fail_usage(where + ": content before any section header");
    }
  }
  if (vlines.empty() || clines.empty()) fail_usage(path + ": missing VERTICES or CELLS section");
  int dim = int(vlines[0].second.size());
  Mesh m;
  m.dim = dim;
  m.coords.assign(std::size_t(vlines.size()) * dim, 0.0);
  std::vector<std::uint8_t> seen(vlines.size(), 0);
  for (auto& [id, xs] : vlines) {
    if (id < 0 || id >= int(vlines.size()) || int(xs.size()) != dim || seen[id])
      fail_usage(path + ": vertex ids must be 0..nv-1, each once, with dim coordinates");
    seen[id] = 1;
    for (int a = 0; a < dim; ++a) m.coords[std::size_t(id) * dim + a] = xs[a];
  }
  for (auto& ids : clines) {
    if (int(ids.size()) != dim + 1) fail_usage(path + ": cell with wrong vertex count");
    for (int v : ids) {
      if (v < 0 || v >= int(vlines.size())) fail_usage(path + ": cell vertex out of range");
      m.cells.push_back(v);
    }
  }
  m.master.resize(vlines.size());
  for (std::size_t v = 0; v < vlines.size(); ++v) m.master[v] = int(v);
  for (auto [g, mm] : plines) {
    if (g < 0 || g >= int(vlines.size()) || mm < 0 || mm >= int(vlines.size()))
      fail_usage(path + ": periodic pair out of range");
    m.master[g] = mm;
  }
  for (auto [g, mm] : plines)
    if (m.master[mm] != mm) fail_usage(path + ": periodic target is itself identified");
  m.finalize();
  FaceMap fm = build_face_map(m);
  for (auto& [ids, role] : blines) {
    if (int(ids.size()) != dim) fail_usage(path + ": boundary facet with wrong vertex count");
    FaceKey k = {-1, -1, -1};
    for (int l = 0; l < dim; ++l) k[l] = m.node_of[ids[l]];
    std::sort(k.begin(), k.begin() + dim);
    auto it = fm.find(k);
    if (it == fm.end() || it->second.count != 1)
      fail_usage(path + ": boundary facet does not match a one-sided face");
    Facet f;
    f.cell = it->second.cell0;
    f.opp = it->second.opp0;
    f.role = role_from_name(role);
    m.boundary.push_back(f);
  }
  return m;
}

}  // namespace conformal
