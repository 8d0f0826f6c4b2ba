#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "ngm/geometry.hpp"
#include "ngm/mesh.hpp"
#include "ngm/rng.hpp"

namespace ngm {

struct EvalConfig {
  double threshold = 0.05;      // Delta, meters
  int n_samples = 200000;       // surface samples per mesh
  double bbox_margin = 0.02;    // meters outside the scene bbox tolerated
  double behind_margin = 0.03;  // meters behind a rendered depth map tolerated
};

// A posed depth map used for visibility culling.
struct DepthView {
  Pose pose;  // camera-to-world
  CameraIntrinsics intrinsics;
  const RgbdFrame* depth = nullptr;
};

// Removes vertices falling more than bbox_margin outside the scene bounding
// box, and vertices that no view sees in front of (or at most behind_margin
// behind) its depth map. Triangles lose all incident vertices. Both the
// ground-truth and the estimated mesh go through this same operation.
inline TriangleMesh cull_mesh(const TriangleMesh& mesh, const Vec3& bbox_lo,
                              const Vec3& bbox_hi,
                              const std::vector<DepthView>& views,
                              const EvalConfig& cfg) {
  std::vector<char> keep(mesh.vertices.size(), 0);
  std::vector<Pose> world_to_cam(views.size());
  for (std::size_t i = 0; i < views.size(); ++i)
    world_to_cam[i] = inverse(views[i].pose);

  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& v = mesh.vertices[i];
    bool in_box = true;
    for (int a = 0; a < 3; ++a)
      in_box = in_box && v[a] >= bbox_lo[a] - cfg.bbox_margin &&
               v[a] <= bbox_hi[a] + cfg.bbox_margin;
    if (!in_box) continue;
    if (views.empty()) {
      keep[i] = 1;
      continue;
    }
    for (std::size_t vi = 0; vi < views.size(); ++vi) {
      const DepthView& view = views[vi];
      Vec3 x_cam = transform_point(world_to_cam[vi], v);
      auto proj = project(view.intrinsics, x_cam);
      if (!proj) continue;
      int u = static_cast<int>(std::lround(proj->u));
      int p = static_cast<int>(std::lround(proj->v));
      if (!pixel_in_bounds(view.intrinsics, u, p)) continue;
      float obs = view.depth->depth_at(u, p);
      // no measurement means nothing in the way out to infinity
      if (!(obs > 0.0f) || proj->z <= obs + cfg.behind_margin) {
        keep[i] = 1;
        break;
      }
    }
  }

  TriangleMesh out;
  std::vector<int> remap(mesh.vertices.size(), -1);
  for (const auto& t : mesh.triangles) {
    if (!keep[t[0]] || !keep[t[1]] || !keep[t[2]]) continue;
    std::array<int, 3> nt;
    for (int j = 0; j < 3; ++j) {
      if (remap[t[j]] < 0) {
        remap[t[j]] = static_cast<int>(out.vertices.size());
        out.vertices.push_back(mesh.vertices[t[j]]);
        out.colors.push_back(t[j] < static_cast<int>(mesh.colors.size())
                                 ? mesh.colors[t[j]]
                                 : Vec3f(0, 0, 0));
      }
      nt[j] = remap[t[j]];
    }
    out.triangles.push_back(nt);
  }
  return out;
}

// N points uniformly distributed over the surface: area-weighted triangle
// selection plus uniform barycentric coordinates.
inline std::vector<Vec3> sample_surface(const TriangleMesh& mesh, int n,
                                        Rng& rng) {
  if (mesh.triangles.empty())
    throw std::runtime_error("sample_surface: empty mesh");
  std::vector<double> cdf(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    const auto& t = mesh.triangles[i];
    Vec3 e1 = mesh.vertices[t[1]] - mesh.vertices[t[0]];
    Vec3 e2 = mesh.vertices[t[2]] - mesh.vertices[t[0]];
    total += 0.5 * e1.cross(e2).norm();
    cdf[i] = total;
  }
  if (!(total > 0.0))
    throw std::runtime_error("sample_surface: zero-area mesh");
  std::vector<Vec3> pts;
  pts.reserve(n);
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform() * total;
    std::size_t ti =
        std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
    if (ti >= mesh.triangles.size()) ti = mesh.triangles.size() - 1;
    const auto& t = mesh.triangles[ti];
    double r1 = std::sqrt(rng.uniform());
    double r2 = rng.uniform();
    double a = 1.0 - r1, b = r1 * (1.0 - r2), c = r1 * r2;
    pts.push_back(a * mesh.vertices[t[0]] + b * mesh.vertices[t[1]] +
                  c * mesh.vertices[t[2]]);
  }
  return pts;
}

namespace detail {

// Uniform grid over a point set answering exact nearest-neighbor distances
// by ring expansion; results match brute force bit for bit because rings are
// explored until no unexplored cell can beat the current best.
class PointGrid {
 public:
  PointGrid(const std::vector<Vec3>& pts, double cell) : pts_(pts), cell_(cell) {
    for (std::size_t i = 0; i < pts.size(); ++i)
      cells_[key_of(pts[i])].push_back(static_cast<int>(i));
    lo_ = hi_ = key_of(pts.front());
    for (const Vec3& p : pts) {
      CellKey k = key_of(p);
      lo_.x = std::min(lo_.x, k.x);
      lo_.y = std::min(lo_.y, k.y);
      lo_.z = std::min(lo_.z, k.z);
      hi_.x = std::max(hi_.x, k.x);
      hi_.y = std::max(hi_.y, k.y);
      hi_.z = std::max(hi_.z, k.z);
    }
  }

  double min_distance(const Vec3& q) const {
    CellKey base = key_of(q);
    double best2 = std::numeric_limits<double>::infinity();
    for (int ring = 0;; ++ring) {
      if (ring > 0) {
        double lo_margin = explored_margin(q, base, ring - 1);
        if (best2 <= lo_margin * lo_margin) break;
        if (base.x - (ring - 1) <= lo_.x && base.x + (ring - 1) >= hi_.x &&
            base.y - (ring - 1) <= lo_.y && base.y + (ring - 1) >= hi_.y &&
            base.z - (ring - 1) <= lo_.z && base.z + (ring - 1) >= hi_.z)
          break;
      }
      visit_ring(base, ring, [&](const CellKey& k) {
        auto it = cells_.find(k);
        if (it == cells_.end()) return;
        for (int idx : it->second)
          best2 = std::min(best2, (pts_[idx] - q).squaredNorm());
      });
    }
    return std::sqrt(best2);
  }

 private:
  struct CellKey {
    std::int64_t x, y, z;
    bool operator==(const CellKey&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const CellKey& k) const {
      return static_cast<std::size_t>(
          mix64(static_cast<std::uint64_t>(k.x), static_cast<std::uint64_t>(k.y),
                static_cast<std::uint64_t>(k.z)));
    }
  };

  CellKey key_of(const Vec3& p) const {
    return CellKey{static_cast<std::int64_t>(std::floor(p.x() / cell_)),
                   static_cast<std::int64_t>(std::floor(p.y() / cell_)),
                   static_cast<std::int64_t>(std::floor(p.z() / cell_))};
  }

  double explored_margin(const Vec3& q, const CellKey& base, int ring) const {
    double m = q.x() - (base.x - ring) * cell_;
    m = std::min(m, (base.x + ring + 1) * cell_ - q.x());
    m = std::min(m, q.y() - (base.y - ring) * cell_);
    m = std::min(m, (base.y + ring + 1) * cell_ - q.y());
    m = std::min(m, q.z() - (base.z - ring) * cell_);
    m = std::min(m, (base.z + ring + 1) * cell_ - q.z());
    return std::max(0.0, m);
  }

  template <typename Fn>
  static void visit_ring(const CellKey& base, int ring, Fn&& fn) {
    if (ring == 0) {
      fn(base);
      return;
    }
    for (std::int64_t dz = -ring; dz <= ring; ++dz)
      for (std::int64_t dy = -ring; dy <= ring; ++dy)
        for (std::int64_t dx = -ring; dx <= ring; ++dx) {
          if (std::max({std::llabs(dx), std::llabs(dy), std::llabs(dz)}) != ring)
            continue;
          fn(CellKey{base.x + dx, base.y + dy, base.z + dz});
        }
  }

  const std::vector<Vec3>& pts_;
  double cell_;
  std::unordered_map<CellKey, std::vector<int>, KeyHash> cells_;
  CellKey lo_{0, 0, 0}, hi_{0, 0, 0};
};

}  // namespace detail

struct MeshMetrics {
  double accuracy = 0.0;          // mean distance, estimated -> ground truth
  double completion = 0.0;        // mean distance, ground truth -> estimated
  double accuracy_ratio = 0.0;    // fraction of estimated points under Delta
  double completion_ratio = 0.0;  // fraction of ground-truth points under Delta
  double f1 = 0.0;                // harmonic mean of the two ratios
};

inline MeshMetrics mesh_metrics(const std::vector<Vec3>& gt_points,
                                const std::vector<Vec3>& est_points,
                                double threshold) {
  if (gt_points.empty() || est_points.empty())
    throw std::runtime_error("mesh_metrics: empty point set");
  detail::PointGrid gt_grid(gt_points, threshold);
  detail::PointGrid est_grid(est_points, threshold);
  MeshMetrics m;
  for (const Vec3& y : est_points) {
    double d = gt_grid.min_distance(y);
    m.accuracy += d;
    if (d < threshold) m.accuracy_ratio += 1.0;
  }
  m.accuracy /= static_cast<double>(est_points.size());
  m.accuracy_ratio /= static_cast<double>(est_points.size());
  for (const Vec3& x : gt_points) {
    double d = est_grid.min_distance(x);
    m.completion += d;
    if (d < threshold) m.completion_ratio += 1.0;
  }
  m.completion /= static_cast<double>(gt_points.size());
  m.completion_ratio /= static_cast<double>(gt_points.size());
  m.f1 = (m.accuracy_ratio > 0.0 && m.completion_ratio > 0.0)
             ? 2.0 / (1.0 / m.accuracy_ratio + 1.0 / m.completion_ratio)
             : 0.0;
  return m;
}

}  // namespace ngm
