#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "ngm/field.hpp"
#include "ngm/mesh.hpp"
#include "ngm/scene.hpp"
#include "ngm/trainer.hpp"

namespace ngm {

struct QueryConfig {
  int k = 2;                   // nearest fields blended per query
  double sharpness = 10.0;     // xi
  double l_far = 8.0;          // meters, view-synthesis far plane
  double mesh_voxel = 0.02;    // meters
  double empty_margin = 0.5;   // meters beyond the radius before forcing s=1
  bool exclude_beyond_radius = false;  // ablation: drop fields with d_i > r
};

inline constexpr int kMaxBlendK = 16;

struct BlendScratch {
  FieldBatchCache<float> cache;
};

// Softmax-of-negative-distance average over the k nearest fields. Queries
// with no field within radius + empty_margin (or an empty map) are empty
// space: s = 1, black. With k = 1 this degenerates to the nearest field's
// output exactly.
inline void blend_query(const FieldSet& fs, const Vec3& x,
                        const QueryConfig& qc, BlendScratch& scratch,
                        Vec3f& color, float& sdf) {
  color = Vec3f(0, 0, 0);
  sdf = 1.0f;
  KnnResult knn = fs.nearest_fields(x, std::min(qc.k, kMaxBlendK));
  if (knn.items.empty()) return;
  if (knn.items[0].second > fs.radius() + qc.empty_margin) return;
  if (qc.exclude_beyond_radius) {
    auto& items = knn.items;
    items.erase(std::remove_if(items.begin(), items.end(),
                               [&](const auto& it) {
                                 return it.second > fs.radius();
                               }),
                items.end());
    if (items.empty()) return;
  }

  const int n = static_cast<int>(knn.items.size());
  double d_min = knn.items[0].second;
  double weight_sum = 0.0;
  double weights[kMaxBlendK];
  for (int i = 0; i < n; ++i) {
    weights[i] = std::exp(-qc.sharpness * (knn.items[i].second - d_min));
    weight_sum += weights[i];
  }
  Vec3f c_acc(0, 0, 0);
  float s_acc = 0.0f;
  for (int i = 0; i < n; ++i) {
    const NeuralField& f = fs.field(knn.items[i].first);
    Vec3 local = transform_point(inverse(f.world_pose), x);
    field_forward_batch(f.params, &local, 1, scratch.cache);
    float u = static_cast<float>(weights[i] / weight_sum);
    c_acc += u * Vec3f(scratch.cache.color[0], scratch.cache.color[1],
                       scratch.cache.color[2]);
    s_acc += u * scratch.cache.sdf[0];
  }
  color = c_acc;
  sdf = s_acc;
}

// Bare blend weights, for tests and diagnostics.
inline std::vector<double> blend_weights(const std::vector<double>& distances,
                                         double sharpness) {
  std::vector<double> u(distances.size());
  double d_min = std::numeric_limits<double>::infinity();
  for (double d : distances) d_min = std::min(d_min, d);
  double sum = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] = std::exp(-sharpness * (distances[i] - d_min));
    sum += u[i];
  }
  for (double& v : u) v /= sum;
  return u;
}

// Default mesh bounds: the union of field spheres padded by r/2.
inline std::optional<std::pair<Vec3, Vec3>> field_bounds(const FieldSet& fs) {
  if (fs.empty()) return std::nullopt;
  Vec3 lo = fs.fields().front().center();
  Vec3 hi = lo;
  for (const NeuralField& f : fs.fields()) {
    lo = lo.cwiseMin(f.center());
    hi = hi.cwiseMax(f.center());
  }
  double pad = fs.radius() * 1.5;
  return std::make_pair(lo - Vec3(pad, pad, pad), hi + Vec3(pad, pad, pad));
}

// Marching cubes over the blended signed distance at isolevel 0; vertex
// colors are sampled at the vertex positions afterwards.
inline TriangleMesh extract_mesh(const FieldSet& fs, const QueryConfig& qc,
                                 std::optional<std::pair<Vec3, Vec3>> bounds,
                                 int workers) {
  if (!bounds) bounds = field_bounds(fs);
  if (!bounds) return TriangleMesh{};
  McGrid grid = make_grid(bounds->first, bounds->second, qc.mesh_voxel);
  auto sample = [&fs, &qc](const Vec3& x) -> double {
    thread_local BlendScratch scratch;
    Vec3f c;
    float s;
    blend_query(fs, x, qc, scratch, c, s);
    return static_cast<double>(s);
  };
  TriangleMesh mesh = marching_cubes(grid, sample, workers);
  parallel_for(mesh.vertices.size(), workers, [&](std::size_t i) {
    thread_local BlendScratch scratch;
    Vec3f c;
    float s;
    blend_query(fs, mesh.vertices[i], qc, scratch, c, s);
    mesh.colors[i] = c;
  });
  return mesh;
}

// Volume-renders a novel view. Sample density along [0, l_far] matches the
// depth-guided training density: N = l_far * N_dp / (2 tau) samples per ray.
// Depth output is camera-z, consistent with the stored depth rasters.
inline RgbdFrame render_view(const FieldSet& fs, const Pose& pose,
                             const CameraIntrinsics& intr,
                             const QueryConfig& qc, int depth_guided_points,
                             double truncation, double eta, int workers) {
  RgbdFrame img;
  img.resize(intr.width, intr.height);
  const int n_samples = std::max(
      1, static_cast<int>(std::lround(qc.l_far * depth_guided_points /
                                      (2.0 * truncation))));
  const double dl = qc.l_far / n_samples;
  parallel_for(intr.height, workers, [&](std::size_t row) {
    thread_local BlendScratch scratch;
    int v = static_cast<int>(row);
    for (int u = 0; u < intr.width; ++u) {
      Vec3 ray_cam = pixel_ray(intr, u, v);
      double ray_scale = ray_cam.norm();
      Vec3 dir = (pose.q * ray_cam) / ray_scale;
      double transmittance = 1.0;
      double acc_c[3] = {0, 0, 0};
      double acc_d = 0.0;
      for (int i = 0; i < n_samples && transmittance > 1e-4; ++i) {
        double l = (i + 0.5) * dl;
        Vec3f c;
        float s;
        blend_query(fs, pose.t + l * dir, qc, scratch, c, s);
        double occ = sdf_to_occupancy(static_cast<double>(s), eta);
        double w = occ * transmittance;
        if (w > 0.0) {
          acc_c[0] += w * c.x();
          acc_c[1] += w * c.y();
          acc_c[2] += w * c.z();
          acc_d += w * l;
        }
        transmittance *= (1.0 - occ);
      }
      img.set_color(u, v, Vec3f(static_cast<float>(acc_c[0]),
                                static_cast<float>(acc_c[1]),
                                static_cast<float>(acc_c[2])));
      img.set_depth(u, v, static_cast<float>(acc_d / ray_scale));
    }
  });
  return img;
}

}  // namespace ngm
