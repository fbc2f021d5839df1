// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// Triangle meshes: marching cubes extraction, binary PLY with optional
// per-vertex labels, semantic separation, and hole reporting.

#ifndef INHAND_MESH_HPP
#define INHAND_MESH_HPP

#include <array>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "inhand/geometry.hpp"

namespace inhand {

// Vertex labels used by the semantic separation.
inline constexpr std::uint8_t kLabelBackground = 0;
inline constexpr std::uint8_t kLabelHand = 1;
inline constexpr std::uint8_t kLabelObject = 2;

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<std::uint8_t> labels;  // empty or one per vertex

  bool empty() const { return faces.empty(); }
  bool has_labels() const { return labels.size() == vertices.size(); }

  double face_area(int f) const {
    const auto& t = faces[f];
    return 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
  }

  double surface_area() const {
    double a = 0.0;
    for (int f = 0; f < static_cast<int>(faces.size()); ++f) a += face_area(f);
    return a;
  }

  void bounding_box(Vec3* lo, Vec3* hi) const {
    *lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    *hi = -*lo;
    for (const auto& v : vertices) {
      *lo = lo->cwiseMin(v);
      *hi = hi->cwiseMax(v);
    }
  }

  double bbox_diagonal() const {
    if (vertices.empty()) return 0.0;
    Vec3 lo, hi;
    bounding_box(&lo, &hi);
    return (hi - lo).norm();
  }

  void apply_transform(const RigidTransform& t, double scale = 1.0) {
    for (auto& v : vertices) v = scale * t.apply(v);
  }

  /// Area centroid and RMS surface radius, both exact surface integrals.
  Vec3 area_centroid() const {
    Vec3 c = Vec3::Zero();
    double total = 0.0;
    for (std::size_t f = 0; f < faces.size(); ++f) {
      double a = face_area(static_cast<int>(f));
      const auto& t = faces[f];
      c += a / 3.0 * (vertices[t[0]] + vertices[t[1]] + vertices[t[2]]);
      total += a;
    }
    return total > 0 ? Vec3(c / total) : Vec3::Zero();
  }

  double rms_surface_radius() const {
    Vec3 c = area_centroid();
    double num = 0.0, total = 0.0;
    for (std::size_t f = 0; f < faces.size(); ++f) {
      double area = face_area(static_cast<int>(f));
      Vec3 a = vertices[faces[f][0]] - c;
      Vec3 b = vertices[faces[f][1]] - c;
      Vec3 d = vertices[faces[f][2]] - c;
      // Exact second moment of a triangle about the origin.
      num += area / 6.0 *
             (a.squaredNorm() + b.squaredNorm() + d.squaredNorm() + a.dot(b) + b.dot(d) +
              a.dot(d));
      total += area;
    }
    return total > 0 ? std::sqrt(num / total) : 0.0;
  }

  /// Scale-only unit-size normalization (no recentering). Rotation-invariant:
  /// uses the RMS surface radius, calibrated so a sphere gets exactly the
  /// unit-bounding-box-diagonal scale (diag = 2*sqrt(3)*r).
  double normalization_scale() const {
    double r = rms_surface_radius();
    return r > 0 ? 1.0 / (2.0 * std::sqrt(3.0) * r) : 1.0;
  }

  void remove_degenerate_faces(double area_tol = 1e-12) {
    std::vector<std::array<int, 3>> kept;
    kept.reserve(faces.size());
    for (int f = 0; f < static_cast<int>(faces.size()); ++f) {
      const auto& t = faces[f];
      if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) continue;
      if (face_area(f) <= area_tol) continue;
      kept.push_back(t);
    }
    faces.swap(kept);
  }

  bool is_valid() const {
    int n = static_cast<int>(vertices.size());
    for (const auto& t : faces)
      for (int k = 0; k < 3; ++k)
        if (t[k] < 0 || t[k] >= n) return false;
    if (!labels.empty() && !has_labels()) return false;
    for (int f = 0; f < static_cast<int>(faces.size()); ++f)
      if (face_area(f) <= 1e-12) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Marching cubes
// ---------------------------------------------------------------------------

namespace mc_detail {

struct CaseTable {
  // Per configuration: iso-contour loops as cyclic lists of cube-edge ids.
  std::array<std::vector<std::vector<int>>, 256> loops;
};

inline constexpr int kEdgeVerts[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0},
                                          {4, 5}, {5, 6}, {6, 7}, {7, 4},
                                          {0, 4}, {1, 5}, {2, 6}, {3, 7}};

/// Case table built by tracing iso-contour loops over the cube surface.
/// Faces are walked counterclockwise as seen from outside; on each face every
/// exit crossing (inside -> outside) is paired with the next entry crossing,
/// which resolves ambiguous faces identically for the two cubes sharing them,
/// so the extracted surface is watertight.
inline const CaseTable& case_table() {
  static const CaseTable table = [] {
    CaseTable t;
    // Faces as vertex cycles, counterclockwise viewed from outside the cube.
    const int faces[6][4] = {{0, 3, 2, 1}, {4, 5, 6, 7}, {0, 1, 5, 4},
                             {3, 7, 6, 2}, {0, 4, 7, 3}, {1, 2, 6, 5}};
    auto edge_id = [](int a, int b) {
      for (int e = 0; e < 12; ++e) {
        if ((kEdgeVerts[e][0] == a && kEdgeVerts[e][1] == b) ||
            (kEdgeVerts[e][0] == b && kEdgeVerts[e][1] == a))
          return e;
      }
      return -1;
    };

    for (int ci = 0; ci < 256; ++ci) {
      auto inside = [&](int v) { return (ci >> v) & 1; };
      // next[e]: edge reached from e across the face where e is an exit.
      std::array<int, 12> next;
      next.fill(-1);
      for (const auto& face : faces) {
        // Collect crossings in cyclic order: +e for exits, -e-1 for entries.
        std::vector<int> crossings;
        for (int k = 0; k < 4; ++k) {
          int p = face[k], q = face[(k + 1) % 4];
          if (inside(p) == inside(q)) continue;
          int e = edge_id(p, q);
          crossings.push_back(inside(p) ? e : -e - 1);
        }
        for (std::size_t k = 0; k < crossings.size(); ++k) {
          if (crossings[k] < 0) continue;  // entry: handled from its exit
          int exit_edge = crossings[k];
          int partner = crossings[(k + 1) % crossings.size()];
          // Exits and entries alternate around the cycle.
          next[exit_edge] = -partner - 1;
        }
      }
      std::array<bool, 12> used;
      used.fill(false);
      for (int e0 = 0; e0 < 12; ++e0) {
        if (next[e0] < 0 || used[e0]) continue;
        std::vector<int> loop;
        int e = e0;
        do {
          loop.push_back(e);
          used[e] = true;
          e = next[e];
        } while (e != e0);
        t.loops[ci].push_back(std::move(loop));
      }
    }
    return t;
  }();
  return table;
}

/// Fans a contour loop into triangles, preferring the pivot that maximizes
/// the smallest triangle area so collinear slivers are avoided.
inline void triangulate_loop(const std::vector<int>& vertex_ids,
                             const std::vector<Vec3>& positions,
                             std::vector<std::array<int, 3>>* out) {
  const int n = static_cast<int>(vertex_ids.size());
  if (n < 3) return;
  auto fan_min_area = [&](int pivot) {
    double min_area = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n - 2; ++i) {
      int a = vertex_ids[pivot];
      int b = vertex_ids[(pivot + 1 + i) % n];
      int c = vertex_ids[(pivot + 2 + i) % n];
      double area =
          0.5 * (positions[b] - positions[a]).cross(positions[c] - positions[a]).norm();
      min_area = std::min(min_area, area);
    }
    return min_area;
  };
  int best_pivot = 0;
  if (n > 3) {
    double best = -1.0;
    for (int p = 0; p < n; ++p) {
      double m = fan_min_area(p);
      if (m > best) {
        best = m;
        best_pivot = p;
      }
    }
  }
  for (int i = 0; i < n - 2; ++i) {
    out->push_back({vertex_ids[best_pivot], vertex_ids[(best_pivot + 1 + i) % n],
                    vertex_ids[(best_pivot + 2 + i) % n]});
  }
}

}  // namespace mc_detail

/// Scalar grid for isosurface extraction: (nx+1) x (ny+1) x (nz+1) samples
/// over an axis-aligned box, x fastest.
struct ScalarGrid {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Ones();
  int nx = 0, ny = 0, nz = 0;  // cell counts
  std::vector<double> values;  // (nx+1)*(ny+1)*(nz+1)

  double& at(int i, int j, int k) {
    return values[i + static_cast<std::size_t>(nx + 1) * (j + static_cast<std::size_t>(ny + 1) * k)];
  }
  double at(int i, int j, int k) const {
    return values[i + static_cast<std::size_t>(nx + 1) * (j + static_cast<std::size_t>(ny + 1) * k)];
  }
  Vec3 position(double i, double j, double k) const {
    return lo + Vec3((hi.x() - lo.x()) * i / nx, (hi.y() - lo.y()) * j / ny,
                     (hi.z() - lo.z()) * k / nz);
  }
  Vec3 cell_size() const {
    return Vec3((hi.x() - lo.x()) / nx, (hi.y() - lo.y()) / ny, (hi.z() - lo.z()) / nz);
  }
};

/// Zero level set of the grid (negative = inside). Shared vertices are
/// deduplicated per grid edge, so the mesh is watertight wherever the field
/// itself is consistent.
inline TriMesh marching_cubes(const ScalarGrid& grid) {
  const auto& table = mc_detail::case_table();
  TriMesh mesh;
  std::unordered_map<std::uint64_t, int> edge_vertex;
  edge_vertex.reserve(1 << 16);

  // Corner values sitting numerically on the level set would spawn sliver
  // triangles; nudge them to the outside by a scale-relative epsilon.
  double vmax = 0.0;
  for (double v : grid.values) vmax = std::max(vmax, std::abs(v));
  if (vmax == 0.0) return mesh;
  const double snap = 1e-5 * vmax;

  auto corner_index = [&](int i, int j, int k) {
    return static_cast<std::uint64_t>(i) +
           static_cast<std::uint64_t>(grid.nx + 1) *
               (static_cast<std::uint64_t>(j) +
                static_cast<std::uint64_t>(grid.ny + 1) * static_cast<std::uint64_t>(k));
  };

  const int corner_offsets[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                    {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};

  for (int k = 0; k < grid.nz; ++k) {
    for (int j = 0; j < grid.ny; ++j) {
      for (int i = 0; i < grid.nx; ++i) {
        double s[8];
        int ci = 0;
        for (int c = 0; c < 8; ++c) {
          s[c] = grid.at(i + corner_offsets[c][0], j + corner_offsets[c][1],
                         k + corner_offsets[c][2]);
          if (std::abs(s[c]) < snap) s[c] = snap;
          if (s[c] < 0.0) ci |= 1 << c;
        }
        if (ci == 0 || ci == 255) continue;
        for (const auto& loop : table.loops[ci]) {
          std::vector<int> ids(loop.size());
          for (std::size_t n = 0; n < loop.size(); ++n) {
            int e = loop[loop.size() - 1 - n];  // reverse: outward orientation
            int a = mc_detail::kEdgeVerts[e][0], b = mc_detail::kEdgeVerts[e][1];
            int ai = i + corner_offsets[a][0], aj = j + corner_offsets[a][1],
                ak = k + corner_offsets[a][2];
            int bi = i + corner_offsets[b][0], bj = j + corner_offsets[b][1],
                bk = k + corner_offsets[b][2];
            std::uint64_t ka = corner_index(ai, aj, ak), kb = corner_index(bi, bj, bk);
            std::uint64_t key = ka < kb ? (ka << 32 | kb) : (kb << 32 | ka);
            auto it = edge_vertex.find(key);
            if (it == edge_vertex.end()) {
              double sa = s[a], sb = s[b];
              double tt = sa / (sa - sb);
              Vec3 pa = grid.position(ai, aj, ak), pb = grid.position(bi, bj, bk);
              mesh.vertices.push_back(pa + tt * (pb - pa));
              it = edge_vertex.emplace(key, static_cast<int>(mesh.vertices.size()) - 1).first;
            }
            ids[n] = it->second;
          }
          mc_detail::triangulate_loop(ids, mesh.vertices, &mesh.faces);
        }
      }
    }
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// Separation and hole reporting
// ---------------------------------------------------------------------------

struct SeparationResult {
  TriMesh hand;
  TriMesh object;
  int dropped_faces = 0;
  int total_faces = 0;
  double dropped_fraction() const {
    return total_faces ? static_cast<double>(dropped_faces) / total_faces : 0.0;
  }
};

namespace mesh_detail {

inline TriMesh submesh(const TriMesh& mesh, const std::vector<int>& face_ids) {
  TriMesh out;
  std::unordered_map<int, int> remap;
  for (int f : face_ids) {
    std::array<int, 3> tri{};
    for (int n = 0; n < 3; ++n) {
      int v = mesh.faces[f][n];
      auto it = remap.find(v);
      if (it == remap.end()) {
        remap.emplace(v, static_cast<int>(out.vertices.size()));
        out.vertices.push_back(mesh.vertices[v]);
        if (mesh.has_labels()) out.labels.push_back(mesh.labels[v]);
        tri[n] = static_cast<int>(out.vertices.size()) - 1;
      } else {
        tri[n] = it->second;
      }
    }
    out.faces.push_back(tri);
  }
  return out;
}

}  // namespace mesh_detail

/// Splits a labeled mesh into hand and object parts. A face follows the
/// majority label of its vertices; faces without a hand/object majority are
/// dropped and counted for the hole report.
inline SeparationResult separate(const TriMesh& mesh) {
  if (!mesh.has_labels()) throw std::invalid_argument("separate() needs per-vertex labels");
  SeparationResult res;
  res.total_faces = static_cast<int>(mesh.faces.size());
  std::vector<int> hand_faces, object_faces;
  for (int f = 0; f < res.total_faces; ++f) {
    int counts[3] = {0, 0, 0};
    for (int n = 0; n < 3; ++n) {
      std::uint8_t l = mesh.labels[mesh.faces[f][n]];
      ++counts[l <= 2 ? l : 0];
    }
    if (counts[kLabelHand] >= 2)
      hand_faces.push_back(f);
    else if (counts[kLabelObject] >= 2)
      object_faces.push_back(f);
    else
      ++res.dropped_faces;
  }
  res.hand = mesh_detail::submesh(mesh, hand_faces);
  res.object = mesh_detail::submesh(mesh, object_faces);
  return res;
}

/// Boundary loops of a mesh; stands in for hole filling, which is out of
/// scope (meshes are shipped with their occlusion holes).
struct HoleReport {
  int boundary_edges = 0;
  int loops = 0;
  double total_boundary_length = 0.0;
  std::vector<double> loop_areas;  // Newell-plane area per loop
};

inline HoleReport hole_report(const TriMesh& mesh) {
  HoleReport rep;
  std::map<std::pair<int, int>, int> edge_count;
  for (const auto& f : mesh.faces) {
    for (int n = 0; n < 3; ++n) {
      int a = f[n], b = f[(n + 1) % 3];
      edge_count[{std::min(a, b), std::max(a, b)}]++;
    }
  }
  std::unordered_map<int, std::vector<int>> adjacency;
  for (const auto& [e, c] : edge_count) {
    if (c != 1) continue;
    ++rep.boundary_edges;
    rep.total_boundary_length += (mesh.vertices[e.first] - mesh.vertices[e.second]).norm();
    adjacency[e.first].push_back(e.second);
    adjacency[e.second].push_back(e.first);
  }
  std::unordered_map<int, bool> visited;
  for (const auto& [v, nb] : adjacency) {
    if (visited[v]) continue;
    // Trace the loop through degree-2 chains.
    std::vector<int> loop;
    int prev = -1, cur = v;
    while (cur != -1 && !visited[cur]) {
      visited[cur] = true;
      loop.push_back(cur);
      const auto& nbs = adjacency[cur];
      int nxt = -1;
      for (int cand : nbs)
        if (cand != prev && !visited[cand]) {
          nxt = cand;
          break;
        }
      prev = cur;
      cur = nxt;
    }
    if (loop.size() >= 3) {
      ++rep.loops;
      Vec3 normal = Vec3::Zero();
      for (std::size_t i = 0; i < loop.size(); ++i) {
        const Vec3& p = mesh.vertices[loop[i]];
        const Vec3& q = mesh.vertices[loop[(i + 1) % loop.size()]];
        normal += p.cross(q);
      }
      rep.loop_areas.push_back(0.5 * normal.norm());
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// PLY I/O (binary little-endian, optional uchar vertex label)
// ---------------------------------------------------------------------------

struct PlyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void save_ply(const TriMesh& mesh, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  bool labeled = mesh.has_labels();
  out << "ply\nformat binary_little_endian 1.0\n";
  out << "element vertex " << mesh.vertices.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  if (labeled) out << "property uchar label\n";
  out << "element face " << mesh.faces.size() << "\n";
  out << "property list uchar int vertex_indices\n";
  out << "end_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    float xyz[3] = {static_cast<float>(mesh.vertices[i].x()),
                    static_cast<float>(mesh.vertices[i].y()),
                    static_cast<float>(mesh.vertices[i].z())};
    out.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    if (labeled) {
      unsigned char l = mesh.labels[i];
      out.write(reinterpret_cast<const char*>(&l), 1);
    }
  }
  for (const auto& f : mesh.faces) {
    unsigned char n = 3;
    std::int32_t idx[3] = {f[0], f[1], f[2]};
    out.write(reinterpret_cast<const char*>(&n), 1);
    out.write(reinterpret_cast<const char*>(idx), sizeof(idx));
  }
}

inline TriMesh load_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PlyError("cannot open mesh: " + path);

  auto fail = [&](const std::string& what) {
    throw PlyError(path + ": " + what + " (offset " +
                   std::to_string(static_cast<long long>(in.tellg())) + ")");
  };

  std::string line;
  if (!std::getline(in, line) || line != "ply") fail("not a PLY file");
  std::size_t n_vertices = 0, n_faces = 0;
  bool labeled = false;
  bool binary_le = false;
  std::vector<std::string> vertex_props;
  std::string element;
  while (std::getline(in, line)) {
    if (line == "end_header") break;
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "format") {
      std::string fmt;
      ss >> fmt;
      binary_le = (fmt == "binary_little_endian");
      if (!binary_le) fail("unsupported PLY format '" + fmt + "'");
    } else if (tok == "element") {
      std::size_t count = 0;
      ss >> element >> count;
      if (element == "vertex") n_vertices = count;
      else if (element == "face") n_faces = count;
    } else if (tok == "property" && element == "vertex") {
      std::string type, name;
      ss >> type;
      if (type == "list") fail("unexpected list property on vertices");
      ss >> name;
      vertex_props.push_back(type + ":" + name);
    }
    if (!in) fail("truncated header");
  }
  if (!in) fail("missing end_header");
  if (vertex_props.size() < 3 || vertex_props[0] != "float:x" || vertex_props[1] != "float:y" ||
      vertex_props[2] != "float:z")
    fail("vertex layout must start with float x/y/z");
  if (vertex_props.size() == 4 && vertex_props[3] == "uchar:label")
    labeled = true;
  else if (vertex_props.size() > 3)
    fail("unsupported vertex properties");

  TriMesh mesh;
  mesh.vertices.resize(n_vertices);
  if (labeled) mesh.labels.resize(n_vertices);
  for (std::size_t i = 0; i < n_vertices; ++i) {
    float xyz[3];
    in.read(reinterpret_cast<char*>(xyz), sizeof(xyz));
    if (!in) fail("truncated vertex data");
    mesh.vertices[i] = Vec3(xyz[0], xyz[1], xyz[2]);
    if (labeled) {
      unsigned char l;
      in.read(reinterpret_cast<char*>(&l), 1);
      if (!in) fail("truncated vertex label");
      mesh.labels[i] = l;
    }
  }
  mesh.faces.resize(n_faces);
  for (std::size_t f = 0; f < n_faces; ++f) {
    unsigned char n = 0;
    in.read(reinterpret_cast<char*>(&n), 1);
    if (!in) fail("truncated face data");
    if (n != 3) fail("only triangle faces are supported");
    std::int32_t idx[3];
    in.read(reinterpret_cast<char*>(idx), sizeof(idx));
    if (!in) fail("truncated face indices");
    for (int k = 0; k < 3; ++k) {
      if (idx[k] < 0 || static_cast<std::size_t>(idx[k]) >= n_vertices)
        fail("face index out of range");
      mesh.faces[f][k] = idx[k];
    }
  }
  return mesh;
}

}  // namespace inhand

#endif  // INHAND_MESH_HPP
