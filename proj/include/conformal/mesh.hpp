#pragma once

#include <array>
#include <functional>
#include <string>

#include "conformal/core.hpp"

namespace conformal {

// Two boundary roles: "outer" carries the Robin/Steklov data of the problem,
// "cut" is the truncation interface introduced when a noncompact chart is
// clipped to a finite box or a domain is extracted from a larger mesh.
enum class BoundaryRole : std::uint8_t { unset = 0, outer = 1, cut = 2 };

const char* role_name(BoundaryRole r);
BoundaryRole role_from_name(const std::string& s);

struct BoxSpec {
  int dim = 0;
  std::vector<int> res;               // cells per axis
  Vec lo, hi;
  std::vector<std::uint8_t> periodic;  // per axis

  int vdim(int a) const { return res[a] + 1; }  // vertex count incl. ghost layer
  double h(int a) const { return (hi[a] - lo[a]) / res[a]; }
};

struct Facet {
  int cell = -1;
  int opp = -1;   // local index of the vertex opposite the facet
  int axis = -1;  // box side for structured meshes, -1 for cut faces of submeshes
  int side = -1;  // 0 = lo, 1 = hi
  BoundaryRole role = BoundaryRole::unset;
};

struct Mesh {
  int dim = 0;
  int nv = 0;  // vertices, ghost copies included
  int nc = 0;
  int nn = 0;  // degrees of freedom (periodic classes collapsed)
  std::vector<double> coords;  // nv * dim
  std::vector<int> cells;      // nc * (dim+1)
  std::vector<int> master;     // vertex -> representative vertex
  std::vector<int> node_of;    // vertex -> dof
  std::vector<int> node_rep;   // dof -> representative vertex
  std::vector<Facet> boundary;

  bool structured = false;
  BoxSpec box;

  // dof -> incident (cell, local vertex), ascending in cell; fixed accumulation
  // order is what makes assembly independent of the thread count.
  std::vector<int> inc_ptr;
  std::vector<std::pair<int, int>> inc;

  const int* cell_verts(int c) const { return &cells[std::size_t(c) * (dim + 1)]; }
  const double* vert_coord(int v) const { return &coords[std::size_t(v) * dim]; }
  int node(int v) const { return node_of[v]; }
  int facet_verts(const Facet& f, int out[3]) const;  // returns count (= dim)
  void cell_centroid(int c, double* xc) const;
  void facet_centroid(const Facet& f, double* xc) const;

  void finalize();  // rebuild dof numbering and incidence
};

Mesh build_box_mesh(const BoxSpec& spec);

// Grid index helpers for structured meshes (vertex ids are lexicographic,
// axis 0 fastest).
void grid_coords_of_vertex(const BoxSpec& box, int v, int* idx);
int vertex_of_grid_coords(const BoxSpec& box, const int* idx);

struct TagRule {
  std::function<bool(const Mesh&, const Facet&)> match;
  BoundaryRole role = BoundaryRole::unset;
};

TagRule rule_on_side(int axis, int side, BoundaryRole role);
// One rule per non-periodic box side; sides listed in `outer` get the outer
// role, every other side becomes a cut face.
std::vector<TagRule> box_side_rules(const BoxSpec& spec, const std::vector<std::pair<int, int>>& outer);

// Every boundary facet must be matched, and by a single role; a facet matched
// by rules that disagree, or by none, is an error.
void tag_boundary(Mesh& mesh, const std::vector<TagRule>& rules);

// Structural checks: nondegenerate cells, interior faces shared by exactly two
// cells, boundary faces by one and listed exactly once, consistent periodic
// identification. Throws on violation.
void validate_mesh(const Mesh& mesh, bool require_tags = true);

struct Submesh {
  Mesh mesh;
  std::vector<int> parent_cell;   // submesh cell -> ambient cell
  std::vector<int> parent_vert;   // submesh vertex -> ambient vertex
  std::vector<int> parent_node;   // submesh dof -> ambient dof
  std::vector<int> facet_parent;  // submesh boundary facet -> ambient boundary facet or -1
};

// Cells must be ascending ambient ids. Inherited boundary facets keep their
// tag; freshly exposed faces become cut faces.
Submesh extract_cells(const Mesh& ambient, const std::vector<int>& cell_ids);

using CellPred = std::function<bool(const Mesh&, int cell)>;

CellPred centroid_below(int axis, double value);

struct Exhaustion {
  const Mesh* ambient = nullptr;
  std::vector<std::vector<int>> cells;  // ascending ambient cell ids per level
  std::vector<Submesh> level;

  int levels() const { return int(level.size()); }
  // Ambient boundary-facet ids forming the outer boundary of level j.
  std::vector<int> outer_facets(int j) const;
  // Fresh outer shell at level i: outer facets of level i minus level i-1.
  std::vector<int> boundary_shell(int i) const;
  // Fresh cell shell at level i: cells of level i minus level i-1.
  std::vector<int> cell_shell(int i) const;
};

// Levels are cell predicates over the tagged ambient mesh. Verified here:
// cells strictly nested level to level, every vertex of a level interior to
// the next level's cell set (its whole ambient cell star is kept), and every
// level keeps at least one outer facet.
Exhaustion build_exhaustion(const Mesh& ambient, const std::vector<CellPred>& levels);

std::vector<std::uint8_t> select_nodes(const Mesh& mesh, const std::function<bool(const double*)>& pred);

// Mask of dofs touched by a boundary facet of the given role.
std::vector<std::uint8_t> dofs_on_role(const Mesh& mesh, BoundaryRole role);

// Unique dof edges of the cell graph, (min,max) ordered, sorted.
std::vector<std::pair<int, int>> build_edges(const Mesh& mesh);

// Graph hops from the seed set along cell edges; -1 if unreachable.
std::vector<int> bfs_hops(const Mesh& mesh, const std::vector<int>& seeds);

void write_mesh(const Mesh& mesh, const std::string& path);
Mesh read_mesh(const std::string& path);

}  // namespace conformal
