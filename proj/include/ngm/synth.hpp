#pragma once

#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ngm/geometry.hpp"
#include "ngm/image_io.hpp"
#include "ngm/mesh.hpp"
#include "ngm/parallel.hpp"
#include "ngm/pose_graph.hpp"
#include "ngm/rng.hpp"

namespace ngm {

// ---- analytic SDF scenes ------------------------------------------------------

struct ScenePrimitive {
  enum class Kind { kRoomShell, kSphere, kBox };
  Kind kind = Kind::kBox;
  Vec3 center{0, 0, 0};
  Vec3 half{0, 0, 0};   // box / room shell half extents
  double radius = 0.0;  // sphere
  Vec3f albedo{0.8f, 0.8f, 0.8f};

  double sdf(const Vec3& p) const {
    switch (kind) {
      case Kind::kSphere:
        return (p - center).norm() - radius;
      case Kind::kBox:
        return box_sdf(p);
      case Kind::kRoomShell:
      default:
        // hollow room: free space inside the box, solid outside
        return -box_sdf(p);
    }
  }

 private:
  double box_sdf(const Vec3& p) const {
    Vec3 q = (p - center).cwiseAbs() - half;
    Vec3 q_pos = q.cwiseMax(0.0);
    double outside = q_pos.norm();
    double inside = std::min(q.maxCoeff(), 0.0);
    return outside + inside;
  }
};

// Signed distance is the min over primitives (union of solids); color is the
// albedo of the primitive attaining the min.
struct AnalyticScene {
  std::string name;
  std::vector<ScenePrimitive> primitives;
  Vec3 bounds_lo{0, 0, 0}, bounds_hi{0, 0, 0};  // covers all surfaces

  double sdf(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& prim : primitives) best = std::min(best, prim.sdf(p));
    return best;
  }

  Vec3f albedo_at(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    Vec3f color{0, 0, 0};
    for (const auto& prim : primitives) {
      double d = prim.sdf(p);
      if (d < best) {
        best = d;
        color = prim.albedo;
      }
    }
    return color;
  }
};

inline AnalyticScene make_scene(const std::string& name) {
  AnalyticScene scene;
  scene.name = name;
  auto room = [](const Vec3& c, const Vec3& half, const Vec3f& col) {
    ScenePrimitive p;
    p.kind = ScenePrimitive::Kind::kRoomShell;
    p.center = c;
    p.half = half;
    p.albedo = col;
    return p;
  };
  auto sphere = [](const Vec3& c, double r, const Vec3f& col) {
    ScenePrimitive p;
    p.kind = ScenePrimitive::Kind::kSphere;
    p.center = c;
    p.radius = r;
    p.albedo = col;
    return p;
  };
  auto box = [](const Vec3& c, const Vec3& half, const Vec3f& col) {
    ScenePrimitive p;
    p.kind = ScenePrimitive::Kind::kBox;
    p.center = c;
    p.half = half;
    p.albedo = col;
    return p;
  };

  if (name == "room1") {
    // 4 x 3 x 2.5 m box room with two spheres and a box
    scene.primitives.push_back(room(Vec3(0, 0, 1.25), Vec3(2.0, 1.5, 1.25),
                                    Vec3f(0.75f, 0.72f, 0.66f)));
    scene.primitives.push_back(
        sphere(Vec3(1.0, 0.6, 0.5), 0.5, Vec3f(0.8f, 0.25f, 0.2f)));
    scene.primitives.push_back(
        sphere(Vec3(-1.2, -0.7, 0.35), 0.35, Vec3f(0.2f, 0.35f, 0.8f)));
    scene.primitives.push_back(box(Vec3(0.2, -1.0, 0.4), Vec3(0.4, 0.3, 0.4),
                                   Vec3f(0.25f, 0.7f, 0.3f)));
    scene.bounds_lo = Vec3(-2.0, -1.5, 0.0);
    scene.bounds_hi = Vec3(2.0, 1.5, 2.5);
  } else if (name == "corridor-loop") {
    // rectangular ring corridor, ~12 m center-line loop, width 1.5 m
    scene.primitives.push_back(room(Vec3(0, 0, 1.25), Vec3(2.5, 2.0, 1.25),
                                    Vec3f(0.72f, 0.70f, 0.65f)));
    scene.primitives.push_back(box(Vec3(0, 0, 1.25), Vec3(1.0, 0.5, 1.25),
                                   Vec3f(0.55f, 0.45f, 0.35f)));
    scene.bounds_lo = Vec3(-2.5, -2.0, 0.0);
    scene.bounds_hi = Vec3(2.5, 2.0, 2.5);
  } else if (name == "two-room") {
    // two rooms joined by a doorway (0.7 m wide, 1.9 m tall)
    scene.primitives.push_back(room(Vec3(0, 0, 1.25), Vec3(2.2, 1.5, 1.25),
                                    Vec3f(0.75f, 0.72f, 0.66f)));
    Vec3f wall_col(0.65f, 0.6f, 0.55f);
    scene.primitives.push_back(
        box(Vec3(0, -0.925, 1.25), Vec3(0.05, 0.575, 1.25), wall_col));
    scene.primitives.push_back(
        box(Vec3(0, 0.925, 1.25), Vec3(0.05, 0.575, 1.25), wall_col));
    scene.primitives.push_back(
        box(Vec3(0, 0, 2.2), Vec3(0.05, 0.35, 0.3), wall_col));
    scene.primitives.push_back(
        sphere(Vec3(-1.3, 0.7, 0.4), 0.4, Vec3f(0.8f, 0.55f, 0.15f)));
    scene.primitives.push_back(
        sphere(Vec3(1.4, -0.6, 0.45), 0.45, Vec3f(0.3f, 0.25f, 0.75f)));
    scene.bounds_lo = Vec3(-2.2, -1.5, 0.0);
    scene.bounds_hi = Vec3(2.2, 1.5, 2.5);
  } else if (name == "sphere") {
    // free-floating sphere, fixture for the single-field tests
    scene.primitives.push_back(
        sphere(Vec3(0, 0, 0), 0.5, Vec3f(0.7f, 0.4f, 0.2f)));
    scene.bounds_lo = Vec3(-0.6, -0.6, -0.6);
    scene.bounds_hi = Vec3(0.6, 0.6, 0.6);
  } else {
    throw std::runtime_error("unknown scene: " + name);
  }
  return scene;
}

// Camera rotation with forward direction f and world up +z; x right, y down.
inline Pose look_along(const Vec3& position, const Vec3& forward) {
  Vec3 f = forward.normalized();
  Vec3 up(0, 0, 1);
  if (std::abs(f.dot(up)) > 0.99) up = Vec3(0, 1, 0);
  Vec3 x = (-up).cross(f).normalized();
  Vec3 y = f.cross(x);
  Eigen::Matrix3d rot;
  rot.col(0) = x;
  rot.col(1) = y;
  rot.col(2) = f;
  return make_pose(Quat(rot), position);
}

// Ground-truth camera pose at trajectory fraction s in [0,1).
inline Pose trajectory_pose(const AnalyticScene& scene, double s) {
  if (scene.name == "room1") {
    double th = 2.0 * 2.0 * M_PI * s;  // two laps
    Vec3 pos(0.9 * std::cos(th), 0.55 * std::sin(th), 1.3 + 0.1 * std::sin(3.0 * th));
    double pitch = 0.5 * std::sin(2.0 * th + 0.7);
    Vec3 fwd(std::cos(th), std::sin(th), std::tan(pitch));
    return look_along(pos, fwd);
  }
  if (scene.name == "corridor-loop") {
    // 1.15 laps around the center-line rectangle (1.75 x 1.25 half extents)
    double lap = std::fmod(1.15 * s, 1.0);
    const double hx = 1.75, hy = 1.25;
    const double per = 4.0 * (hx + hy);
    double d = lap * per;
    Vec3 pos;
    Vec3 tangent;
    if (d < 2 * hx) {
      pos = Vec3(-hx + d, -hy, 0);
      tangent = Vec3(1, 0, 0);
    } else if (d < 2 * hx + 2 * hy) {
      pos = Vec3(hx, -hy + (d - 2 * hx), 0);
      tangent = Vec3(0, 1, 0);
    } else if (d < 4 * hx + 2 * hy) {
      pos = Vec3(hx - (d - 2 * hx - 2 * hy), hy, 0);
      tangent = Vec3(-1, 0, 0);
    } else {
      pos = Vec3(-hx, hy - (d - 4 * hx - 2 * hy), 0);
      tangent = Vec3(0, -1, 0);
    }
    pos.z() = 1.3;
    double yaw = 0.7 * std::sin(10.0 * M_PI * lap);
    double pitch = 0.3 * std::sin(6.0 * M_PI * lap + 1.0);
    Vec3 side(-tangent.y(), tangent.x(), 0.0);
    Vec3 fwd = std::cos(yaw) * tangent + std::sin(yaw) * side;
    fwd.z() = std::tan(pitch);
    return look_along(pos, fwd);
  }
  if (scene.name == "two-room") {
    // back and forth through the doorway, panning
    double u = s < 0.5 ? s * 2.0 : 2.0 - s * 2.0;
    Vec3 pos(-1.6 + 3.2 * u, 0.0, 1.3);
    double yaw = 2.2 * std::sin(2.0 * M_PI * 3.0 * s);
    double dir = s < 0.5 ? 1.0 : -1.0;
    Vec3 fwd(dir * std::cos(yaw), std::sin(yaw), 0.25 * std::sin(7.0 * s));
    return look_along(pos, fwd);
  }
  if (scene.name == "sphere") {
    double th = 2.0 * M_PI * s;
    double z = 0.45 * std::sin(2.0 * th);
    Vec3 pos(1.5 * std::cos(th), 1.5 * std::sin(th), z);
    return look_along(pos, -pos);
  }
  throw std::runtime_error("no trajectory for scene: " + scene.name);
}

inline CameraIntrinsics make_intrinsics(int width, int height, double hfov_deg) {
  CameraIntrinsics intr;
  intr.width = width;
  intr.height = height;
  intr.fx = (width / 2.0) / std::tan(hfov_deg * M_PI / 360.0);
  intr.fy = intr.fx;
  intr.cx = (width - 1) / 2.0;
  intr.cy = (height - 1) / 2.0;
  return intr;
}

// Sphere-traces the analytic scene into an RGB-D frame. Depth is camera-z;
// rays that never hit produce the reserved invalid value 0.
inline RgbdFrame render_gt_frame(const AnalyticScene& scene, const Pose& pose,
                                 const CameraIntrinsics& intr, int workers = 1) {
  RgbdFrame img;
  img.resize(intr.width, intr.height);
  constexpr double kTol = 1e-5;
  constexpr int kMaxSteps = 256;
  constexpr double kMaxRange = 50.0;
  parallel_for(intr.height, workers, [&](std::size_t row) {
    int v = static_cast<int>(row);
    for (int u = 0; u < intr.width; ++u) {
      Vec3 ray_cam = pixel_ray(intr, u, v);
      double ray_scale = ray_cam.norm();
      Vec3 dir = (pose.q * ray_cam) / ray_scale;
      double t = 0.0;
      bool hit = false;
      for (int step = 0; step < kMaxSteps; ++step) {
        Vec3 p = pose.t + t * dir;
        double d = scene.sdf(p);
        if (d < kTol) {
          hit = true;
          break;
        }
        t += d;
        if (t > kMaxRange) break;
      }
      if (!hit) continue;
      Vec3 p = pose.t + t * dir;
      img.set_depth(u, v, static_cast<float>(t / ray_scale));
      img.set_color(u, v, scene.albedo_at(p));
    }
  });
  return img;
}

inline TriangleMesh extract_gt_mesh(const AnalyticScene& scene, double voxel,
                                    int workers) {
  Vec3 pad(0.05, 0.05, 0.05);
  McGrid grid =
      make_grid(scene.bounds_lo - pad, scene.bounds_hi + pad, voxel);
  TriangleMesh mesh = marching_cubes(
      grid, [&](const Vec3& p) { return scene.sdf(p); }, workers);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i)
    mesh.colors[i] = scene.albedo_at(mesh.vertices[i]);
  return mesh;
}

// ---- drifted pose-graph generation --------------------------------------------

struct DriftModel {
  double rot_std = 0.0;    // radians per frame step
  double trans_std = 0.0;  // meters per frame step
  double closure_at = 0.9; // trajectory fraction of the loop-closure event
};

struct SynthConfig {
  std::string scene = "room1";
  int n_frames = 300;
  int keyframe_stride = 5;
  int width = 320, height = 240;
  double hfov_deg = 90.0;
  DriftModel drift;
  double depth_noise_std = 0.0;  // meters, off by default
  std::uint64_t seed = 1;
  double gt_mesh_voxel = 0.01;
  int eval_view_count = 8;
  int workers = 1;
};

struct SynthResult {
  std::filesystem::path sequence_dir;
  std::filesystem::path recording_path;     // drifted + closure events
  std::filesystem::path gt_recording_path;  // ground truth poses
  std::filesystem::path gt_mesh_path;
  std::filesystem::path eval_views_dir;
  int closure_frame = -1;  // frame time of the UpdatePoses event, -1 if none
};

inline Pose drift_step(Rng& rng, double rot_std, double trans_std) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  double angle = rng.normal() * rot_std;
  if (axis.norm() < 1e-12) axis = Vec3(1, 0, 0);
  Quat dq(Eigen::AngleAxisd(angle, axis.normalized()));
  Vec3 dt(rng.normal() * trans_std, rng.normal() * trans_std,
          rng.normal() * trans_std);
  return make_pose(dq, dt);
}

inline SynthResult generate_sequence(const SynthConfig& cfg,
                                     const std::filesystem::path& out_dir) {
  AnalyticScene scene = make_scene(cfg.scene);
  CameraIntrinsics intr = make_intrinsics(cfg.width, cfg.height, cfg.hfov_deg);
  std::filesystem::create_directories(out_dir);

  SynthResult result;
  result.sequence_dir = out_dir;
  result.recording_path = out_dir / "posegraph.txt";
  result.gt_recording_path = out_dir / "posegraph_gt.txt";
  result.gt_mesh_path = out_dir / "gt_mesh.ply";
  result.eval_views_dir = out_dir / "eval_views";

  const bool drifting = cfg.drift.rot_std > 0.0 || cfg.drift.trans_std > 0.0;
  int closure_frame = -1;
  if (drifting && cfg.drift.closure_at > 0.0 && cfg.drift.closure_at <= 1.0) {
    closure_frame = static_cast<int>(
        std::lround(cfg.drift.closure_at * (cfg.n_frames - 1)));
    if (closure_frame % cfg.keyframe_stride == 0) closure_frame += 1;
    closure_frame = std::min(closure_frame, cfg.n_frames - 1);
  }
  result.closure_frame = closure_frame;

  SequenceWriter writer(out_dir, intr);
  Rng drift_rng = make_stream(cfg.seed, RngStream::kSynth, 1);
  Rng noise_rng = make_stream(cfg.seed, RngStream::kSynth, 2);

  PoseGraphRecording rec, gt_rec;
  std::vector<Pose> gt_poses(cfg.n_frames);
  Pose drift = Pose::identity();
  int kf_id = 0;
  for (int frame = 0; frame < cfg.n_frames; ++frame) {
    double s = cfg.n_frames > 1
                   ? static_cast<double>(frame) / (cfg.n_frames - 1)
                   : 0.0;
    Pose gt = trajectory_pose(scene, s);
    if (scene.sdf(gt.t) <= 0.0)
      throw std::runtime_error("synth: trajectory left free space");
    gt_poses[frame] = gt;
    if (frame > 0)
      drift = compose(drift, drift_step(drift_rng, cfg.drift.rot_std,
                                        cfg.drift.trans_std));

    RgbdFrame img = render_gt_frame(scene, gt, intr, cfg.workers);
    if (cfg.depth_noise_std > 0.0) {
      for (float& d : img.depth)
        if (d > 0.0f)
          d = std::max(0.0f, d + static_cast<float>(noise_rng.normal() *
                                                    cfg.depth_noise_std));
    }
    writer.write_frame(frame, img);

    if (frame % cfg.keyframe_stride == 0) {
      Pose estimated = drifting ? compose(gt, drift) : gt;
      rec.events.emplace_back(AddKeyframeEvent{
          static_cast<double>(frame), kf_id, frame, estimated});
      gt_rec.events.emplace_back(
          AddKeyframeEvent{static_cast<double>(frame), kf_id, frame, gt});
      ++kf_id;
    }

    if (frame == closure_frame) {
      // loop closure: snap every keyframe to its ground-truth pose (the
      // correction grows along the graph exactly as the drift accumulated)
      UpdatePosesEvent upd;
      upd.time = static_cast<double>(frame);
      for (const auto& e : gt_rec.events) {
        const auto& add = std::get<AddKeyframeEvent>(e);
        upd.poses.emplace_back(add.kf_id, add.pose);
      }
      rec.events.emplace_back(std::move(upd));
      drift = Pose::identity();
    }
  }
  save_recording(rec, result.recording_path.string());
  save_recording(gt_rec, result.gt_recording_path.string());

  TriangleMesh gt_mesh = extract_gt_mesh(scene, cfg.gt_mesh_voxel, cfg.workers);
  save_ply(gt_mesh, result.gt_mesh_path.string());

  // held-out virtual views for completion culling
  std::filesystem::create_directories(result.eval_views_dir / "depth");
  save_intrinsics(intr, (result.eval_views_dir / "intrinsics.txt").string());
  std::ofstream poses_out(result.eval_views_dir / "poses.txt");
  for (int i = 0; i < cfg.eval_view_count; ++i) {
    double s = (i + 0.5) / cfg.eval_view_count;
    Pose p = trajectory_pose(scene, s);
    Vec3 lifted = p.t + Vec3(0, 0, 0.25);
    if (scene.sdf(lifted) > 0.2)
      p = make_pose(p.q, lifted);
    RgbdFrame img = render_gt_frame(scene, p, intr, cfg.workers);
    save_depth(img, (result.eval_views_dir / "depth" / frame_name(i, ".raw"))
                        .string());
    poses_out << i << " " << detail::fmt_pose(p) << "\n";
  }
  return result;
}

}  // namespace ngm
