#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ngm/geometry.hpp"
#include "ngm/image_io.hpp"
#include "ngm/mc_tables.hpp"
#include "ngm/parallel.hpp"
#include "ngm/rng.hpp"

namespace ngm {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<Vec3f> colors;  // per-vertex RGB in [0,1]; sized like vertices
  std::vector<std::array<int, 3>> triangles;

  bool empty() const { return triangles.empty(); }

  double area() const {
    double a = 0.0;
    for (const auto& t : triangles) {
      Vec3 e1 = vertices[t[1]] - vertices[t[0]];
      Vec3 e2 = vertices[t[2]] - vertices[t[0]];
      a += 0.5 * e1.cross(e2).norm();
    }
    return a;
  }
};

// ---- PLY (binary little-endian; float xyz + uchar rgb, int32 face indices) --

inline void save_ply(const TriangleMesh& mesh, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write ply: " + path);
  out << "ply\nformat binary_little_endian 1.0\n";
  out << "element vertex " << mesh.vertices.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << mesh.triangles.size() << "\n";
  out << "property list uchar int vertex_indices\n";
  out << "end_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& v = mesh.vertices[i];
    io::put_f32(out, static_cast<float>(v.x()));
    io::put_f32(out, static_cast<float>(v.y()));
    io::put_f32(out, static_cast<float>(v.z()));
    Vec3f c = i < mesh.colors.size() ? mesh.colors[i] : Vec3f(0, 0, 0);
    for (int ch = 0; ch < 3; ++ch) {
      float x = std::min(1.0f, std::max(0.0f, c[ch]));
      out.put(static_cast<char>(std::lround(x * 255.0f)));
    }
  }
  for (const auto& t : mesh.triangles) {
    out.put(static_cast<char>(3));
    io::put_i32(out, t[0]);
    io::put_i32(out, t[1]);
    io::put_i32(out, t[2]);
  }
}

inline TriangleMesh load_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read ply: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "ply")
    throw std::runtime_error("not a ply file: " + path);
  std::size_t n_vertices = 0, n_faces = 0;
  bool binary_le = false;
  while (std::getline(in, line)) {
    if (line.rfind("format ", 0) == 0)
      binary_le = line.find("binary_little_endian") != std::string::npos;
    else if (line.rfind("element vertex ", 0) == 0)
      n_vertices = std::stoul(line.substr(15));
    else if (line.rfind("element face ", 0) == 0)
      n_faces = std::stoul(line.substr(13));
    else if (line == "end_header")
      break;
  }
  if (!binary_le)
    throw std::runtime_error("only binary little-endian ply supported: " + path);
  TriangleMesh mesh;
  mesh.vertices.resize(n_vertices);
  mesh.colors.resize(n_vertices);
  for (std::size_t i = 0; i < n_vertices; ++i) {
    float x = io::get_f32(in), y = io::get_f32(in), z = io::get_f32(in);
    mesh.vertices[i] = Vec3(x, y, z);
    unsigned char rgb[3];
    in.read(reinterpret_cast<char*>(rgb), 3);
    mesh.colors[i] = Vec3f(rgb[0] / 255.0f, rgb[1] / 255.0f, rgb[2] / 255.0f);
  }
  mesh.triangles.resize(n_faces);
  for (std::size_t i = 0; i < n_faces; ++i) {
    int count = in.get();
    if (count != 3) throw std::runtime_error("non-triangle face in " + path);
    for (int j = 0; j < 3; ++j) mesh.triangles[i][j] = io::get_i32(in);
  }
  if (!in) throw std::runtime_error("truncated ply: " + path);
  return mesh;
}

// ---- marching cubes ----------------------------------------------------------

struct McGrid {
  Vec3 origin;
  double voxel = 0.02;
  int nx = 0, ny = 0, nz = 0;  // cell counts; the lattice has one more sample

  Vec3 lattice_point(int ix, int iy, int iz) const {
    return origin + Vec3(ix * voxel, iy * voxel, iz * voxel);
  }
};

inline McGrid make_grid(const Vec3& lo, const Vec3& hi, double voxel) {
  McGrid g;
  g.origin = lo;
  g.voxel = voxel;
  g.nx = std::max(1, static_cast<int>(std::ceil((hi.x() - lo.x()) / voxel)));
  g.ny = std::max(1, static_cast<int>(std::ceil((hi.y() - lo.y()) / voxel)));
  g.nz = std::max(1, static_cast<int>(std::ceil((hi.z() - lo.z()) / voxel)));
  return g;
}

namespace detail {

struct VertexKey {
  std::uint64_t x, y, z;
  bool operator==(const VertexKey&) const = default;
};

struct VertexKeyHash {
  std::size_t operator()(const VertexKey& k) const {
    return static_cast<std::size_t>(mix64(k.x, k.y, k.z));
  }
};

inline VertexKey vertex_key(const Vec3& v) {
  VertexKey k;
  std::memcpy(&k.x, &v.x(), 8);
  std::memcpy(&k.y, &v.y(), 8);
  std::memcpy(&k.z, &v.z(), 8);
  return k;
}

}  // namespace detail

// Extracts the zero level set of `sample` over the grid. Corner values are
// evaluated layer by layer (rows in parallel); vertices shared between cells
// come out bit-identical and are welded. Triangles are wound so their normals
// point toward increasing sample values (outward for an SDF).
inline TriangleMesh marching_cubes(const McGrid& grid,
                                   const std::function<double(const Vec3&)>& sample,
                                   int workers) {
  TriangleMesh mesh;
  const int sx = grid.nx + 1, sy = grid.ny + 1;
  std::vector<double> layer0(static_cast<std::size_t>(sx) * sy);
  std::vector<double> layer1(static_cast<std::size_t>(sx) * sy);

  auto fill_layer = [&](int iz, std::vector<double>& layer) {
    parallel_for(sy, workers, [&](std::size_t iy) {
      for (int ix = 0; ix < sx; ++ix)
        layer[iy * sx + ix] =
            sample(grid.lattice_point(ix, static_cast<int>(iy), iz));
    });
  };

  std::unordered_map<detail::VertexKey, int, detail::VertexKeyHash> weld;
  auto add_vertex = [&](const Vec3& v) -> int {
    auto [it, inserted] =
        weld.try_emplace(detail::vertex_key(v), static_cast<int>(mesh.vertices.size()));
    if (inserted) mesh.vertices.push_back(v);
    return it->second;
  };

  fill_layer(0, layer0);
  for (int iz = 0; iz < grid.nz; ++iz) {
    fill_layer(iz + 1, layer1);
    for (int iy = 0; iy < grid.ny; ++iy) {
      for (int ix = 0; ix < grid.nx; ++ix) {
        double vals[8];
        for (int c = 0; c < 8; ++c) {
          const int* off = mc::kCornerOffsets[c];
          const std::vector<double>& layer = off[2] ? layer1 : layer0;
          vals[c] = layer[static_cast<std::size_t>(iy + off[1]) * sx + ix + off[0]];
        }
        int cube_index = 0;
        for (int c = 0; c < 8; ++c)
          if (vals[c] < 0.0) cube_index |= (1 << c);
        int edge_mask = mc::kEdgeTable[cube_index];
        if (edge_mask == 0) continue;
        int edge_vertex[12];
        for (int e = 0; e < 12; ++e) {
          if (!(edge_mask & (1 << e))) continue;
          int c0 = mc::kEdgeCorners[e][0];
          int c1 = mc::kEdgeCorners[e][1];
          double v0 = vals[c0], v1 = vals[c1];
          double denom = v0 - v1;
          double t = denom != 0.0 ? v0 / denom : 0.5;
          const int* o0 = mc::kCornerOffsets[c0];
          const int* o1 = mc::kCornerOffsets[c1];
          Vec3 p0 = grid.lattice_point(ix + o0[0], iy + o0[1], iz + o0[2]);
          Vec3 p1 = grid.lattice_point(ix + o1[0], iy + o1[1], iz + o1[2]);
          edge_vertex[e] = add_vertex(p0 + t * (p1 - p0));
        }
        const std::int8_t* tri = mc::kTriTable[cube_index];
        for (int i = 0; tri[i] != -1; i += 3) {
          std::array<int, 3> t = {edge_vertex[tri[i]], edge_vertex[tri[i + 1]],
                                  edge_vertex[tri[i + 2]]};
          if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) continue;
          mesh.triangles.push_back(t);
        }
      }
    }
    std::swap(layer0, layer1);
  }
  mesh.colors.assign(mesh.vertices.size(), Vec3f(0, 0, 0));
  return mesh;
}

}  // namespace ngm
