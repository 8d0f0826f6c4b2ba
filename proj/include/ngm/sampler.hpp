#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <unordered_set>
#include <vector>

#include "ngm/geometry.hpp"
#include "ngm/image_io.hpp"
#include "ngm/pose_graph.hpp"
#include "ngm/rng.hpp"
#include "ngm/scene.hpp"

namespace ngm {

struct SamplerConfig {
  int fields_per_iteration = 32;   // N_f
  int rays_per_field = 512;        // N_r
  int uniform_points = 8;          // N_up
  int depth_guided_points = 16;    // N_dp
  int probe_count = 64;            // boundary probes per field
  double truncation = 0.1;         // tau, meters
  double near_clip = 1e-3;         // meters
  int retry_rounds = 4;

  int points_per_ray() const { return uniform_points + depth_guided_points; }
};

struct RaySample {
  Vec3 origin;
  Vec3 dir;  // unit
  double l_min = 0.0, l_max = 0.0;
  Vec3f target_color{0.0f, 0.0f, 0.0f};
  double l_obs = 0.0;  // along-ray distance of the observed surface
  bool depth_valid = false;
  int kf_id = -1;
};

// Fixed-shape supervision batch for one field: exactly rays_per_field rays.
struct RaySegmentBatch {
  int field_id = -1;
  std::vector<RaySample> rays;
};

// Deterministic near-uniform unit directions (Fibonacci spiral).
inline std::vector<Vec3> fibonacci_sphere(int n) {
  std::vector<Vec3> dirs;
  dirs.reserve(n);
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n; ++i) {
    double z = 1.0 - (2.0 * i + 1.0) / n;
    double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
    double phi = golden * i;
    dirs.emplace_back(rho * std::cos(phi), rho * std::sin(phi), z);
  }
  return dirs;
}

struct ProbeBox {
  double u_min = 0.0, v_min = 0.0, u_max = -1.0, v_max = -1.0;
  bool empty() const { return u_max < u_min || v_max < v_min; }
};

struct ObservingView {
  int kf_id = -1;
  ProbeBox box;  // bounding box of projected probes, clipped to the image
};

namespace detail {

// Visibility of one field from one view. A probe passes when it projects
// inside the image in front of the camera and its depth is smaller than the
// measured depth at that pixel; pixels without a measurement count as pass,
// otherwise unobserved regions would never receive supervision.
inline std::optional<ObservingView> probe_visibility(
    const Vec3& center, double radius, const std::vector<Vec3>& probe_dirs,
    const Pose& cam_pose, const CameraIntrinsics& intr, const RgbdFrame& depth) {
  Pose world_to_cam = inverse(cam_pose);
  ProbeBox box;
  bool visible = false;
  for (const Vec3& d : probe_dirs) {
    Vec3 q = center + radius * d;
    Vec3 x_cam = transform_point(world_to_cam, q);
    auto proj = project(intr, x_cam);
    if (!proj) continue;
    if (box.empty()) {
      box.u_min = box.u_max = proj->u;
      box.v_min = box.v_max = proj->v;
    } else {
      box.u_min = std::min(box.u_min, proj->u);
      box.u_max = std::max(box.u_max, proj->u);
      box.v_min = std::min(box.v_min, proj->v);
      box.v_max = std::max(box.v_max, proj->v);
    }
    if (visible) continue;
    int ui = static_cast<int>(std::lround(proj->u));
    int vi = static_cast<int>(std::lround(proj->v));
    if (!pixel_in_bounds(intr, ui, vi)) continue;
    float obs = depth.depth_at(ui, vi);
    if (!(obs > 0.0f) || proj->z < obs) visible = true;
  }
  if (!visible) return std::nullopt;
  // clip to the image; sampling only makes sense over real pixels
  box.u_min = std::max(box.u_min, 0.0);
  box.v_min = std::max(box.v_min, 0.0);
  box.u_max = std::min(box.u_max, static_cast<double>(intr.width - 1));
  box.v_max = std::min(box.v_max, static_cast<double>(intr.height - 1));
  if (box.empty()) return std::nullopt;
  ObservingView view;
  view.box = box;
  return view;
}

}  // namespace detail

// Keyframes observing a field, recomputed from the latest snapshot every
// iteration; no keyframe-to-field assignment is ever stored.
inline std::vector<ObservingView> observing_keyframes(
    const NeuralField& field, double radius, const PoseGraphSnapshot& snap,
    const FrameStore& frames, const CameraIntrinsics& intr,
    const std::vector<Vec3>& probe_dirs) {
  std::vector<ObservingView> views;
  for (const Keyframe& kf : snap.keyframes) {
    if (!frames.contains(kf.frame_index)) continue;
    auto v = detail::probe_visibility(field.center(), radius, probe_dirs,
                                      kf.pose, intr, frames.at(kf.frame_index));
    if (v) {
      v->kf_id = kf.id;
      views.push_back(*v);
    }
  }
  return views;
}

// Fields visible from the current viewpoint.
inline std::unordered_set<int> observed_fields(const FieldSet& fs,
                                               const Pose& current_pose,
                                               const CameraIntrinsics& intr,
                                               const RgbdFrame& current_depth,
                                               const std::vector<Vec3>& probe_dirs) {
  std::unordered_set<int> out;
  for (const NeuralField& f : fs.fields()) {
    if (detail::probe_visibility(f.center(), fs.radius(), probe_dirs,
                                 current_pose, intr, current_depth))
      out.insert(f.id);
  }
  return out;
}

// Stage 1: N_f draws, half biased to the currently observed fields, the rest
// uniform over all fields; duplicates discarded. Result size is <= N_f.
inline std::vector<int> sample_fields(const FieldSet& fs,
                                      const std::unordered_set<int>& observed,
                                      int n_fields, Rng& rng) {
  std::vector<int> picks;
  if (fs.empty() || n_fields <= 0) return picks;
  std::vector<int> observed_list(observed.begin(), observed.end());
  std::sort(observed_list.begin(), observed_list.end());
  const int total = static_cast<int>(fs.size());
  int n_obs_draws = (n_fields + 1) / 2;
  auto draw_observed = [&]() -> int {
    if (observed_list.empty())
      return static_cast<int>(rng.bounded(static_cast<std::uint32_t>(total)));
    return observed_list[rng.bounded(
        static_cast<std::uint32_t>(observed_list.size()))];
  };
  for (int i = 0; i < n_fields; ++i) {
    int id = i < n_obs_draws
                 ? draw_observed()
                 : static_cast<int>(rng.bounded(static_cast<std::uint32_t>(total)));
    if (std::find(picks.begin(), picks.end(), id) == picks.end())
      picks.push_back(id);
  }
  return picks;
}

// Stage 2: N_r ray segments for one field, drawn through the observing
// keyframes' probe bounding boxes. Rays whose closest approach misses the
// sphere are redrawn a bounded number of times; the batch is then padded from
// successful rays so its shape is always exactly N_r. Returns nullopt when no
// ray hits (stale geometry; the field is skipped this iteration).
inline std::optional<RaySegmentBatch> sample_rays(
    const NeuralField& field, double radius,
    const std::vector<ObservingView>& views, const PoseGraphSnapshot& snap,
    const FrameStore& frames, const CameraIntrinsics& intr,
    const SamplerConfig& cfg, Rng& rng) {
  if (views.empty()) return std::nullopt;
  RaySegmentBatch batch;
  batch.field_id = field.id;
  batch.rays.reserve(cfg.rays_per_field);

  // split N_r evenly; remainder goes to randomly chosen observing keyframes
  std::vector<int> quota(views.size(),
                         cfg.rays_per_field / static_cast<int>(views.size()));
  for (int i = 0; i < cfg.rays_per_field % static_cast<int>(views.size()); ++i)
    quota[rng.bounded(static_cast<std::uint32_t>(views.size()))] += 1;

  const Vec3& center = field.center();
  for (std::size_t vi = 0; vi < views.size(); ++vi) {
    const ObservingView& view = views[vi];
    const Keyframe* kf = snap.find(view.kf_id);
    if (!kf) continue;
    const RgbdFrame& frame = frames.at(kf->frame_index);
    int u_lo = static_cast<int>(std::ceil(view.box.u_min));
    int u_hi = static_cast<int>(std::floor(view.box.u_max));
    int v_lo = static_cast<int>(std::ceil(view.box.v_min));
    int v_hi = static_cast<int>(std::floor(view.box.v_max));
    if (u_hi < u_lo || v_hi < v_lo) continue;  // box clipped to nothing
    int want = quota[vi];
    for (int round = 0; round <= cfg.retry_rounds && want > 0; ++round) {
      int attempts = want;
      want = 0;
      for (int a = 0; a < attempts; ++a) {
        int u = u_lo + static_cast<int>(rng.bounded(
                    static_cast<std::uint32_t>(u_hi - u_lo + 1)));
        int v = v_lo + static_cast<int>(rng.bounded(
                    static_cast<std::uint32_t>(v_hi - v_lo + 1)));
        Vec3 ray_cam = pixel_ray(intr, u, v);
        double ray_scale = ray_cam.norm();
        RaySample ray;
        ray.origin = kf->pose.t;
        ray.dir = (kf->pose.q * ray_cam) / ray_scale;
        double l_c = (center - ray.origin).dot(ray.dir);
        double miss2 =
            (ray.origin + l_c * ray.dir - center).squaredNorm();
        if (miss2 > radius * radius || l_c + radius <= cfg.near_clip) {
          ++want;  // redraw in the next round
          continue;
        }
        ray.l_min = std::max(l_c - radius, cfg.near_clip);
        ray.l_max = l_c + radius;
        ray.target_color = frame.color_at(u, v);
        float d = frame.depth_at(u, v);
        if (d > 0.0f && std::isfinite(d)) {
          ray.depth_valid = true;
          ray.l_obs = static_cast<double>(d) * ray_scale;
        }
        ray.kf_id = view.kf_id;
        batch.rays.push_back(ray);
      }
    }
  }
  if (batch.rays.empty()) return std::nullopt;
  // pad to the fixed batch shape by cycling successful rays
  std::size_t produced = batch.rays.size();
  while (batch.rays.size() < static_cast<std::size_t>(cfg.rays_per_field))
    batch.rays.push_back(batch.rays[batch.rays.size() % produced]);
  if (batch.rays.size() > static_cast<std::size_t>(cfg.rays_per_field))
    batch.rays.resize(cfg.rays_per_field);
  return batch;
}

// Stage 3: N_up stratified-uniform distances across the segment plus N_dp
// depth-guided ones in [l_obs - tau, l_obs + tau]; the guided interval falls
// back to the segment when there is no usable measurement. Sorted ascending.
inline void sample_points(double l_min, double l_max, double l_obs,
                          bool depth_valid, double tau, int n_uniform,
                          int n_depth_guided, Rng& rng,
                          std::vector<double>& out) {
  out.clear();
  auto stratified = [&](double lo, double hi, int n) {
    for (int i = 0; i < n; ++i)
      out.push_back(lo + (hi - lo) * ((i + rng.uniform()) / n));
  };
  stratified(l_min, l_max, n_uniform);
  if (depth_valid && l_obs >= l_min && l_obs <= l_max)
    stratified(l_obs - tau, l_obs + tau, n_depth_guided);
  else
    stratified(l_min, l_max, n_depth_guided);
  std::sort(out.begin(), out.end());
}

}  // namespace ngm
