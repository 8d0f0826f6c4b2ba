#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

namespace ngm {

using Vec3 = Eigen::Vector3d;
using Vec3f = Eigen::Vector3f;
using Quat = Eigen::Quaterniond;

// Rigid transform in SE(3). Quaternion is kept normalized with w >= 0 so
// serialized poses have one canonical representation.
struct Pose {
  Quat q{1.0, 0.0, 0.0, 0.0};
  Vec3 t{0.0, 0.0, 0.0};

  static Pose identity() { return Pose{}; }

  void canonicalize() {
    q.normalize();
    if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  }
};

inline Pose make_pose(const Quat& q, const Vec3& t) {
  Pose p{q, t};
  p.canonicalize();
  return p;
}

inline Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.q = a.q * b.q;
  out.t = a.q * b.t + a.t;
  out.canonicalize();
  return out;
}

inline Pose inverse(const Pose& p) {
  Pose out;
  out.q = p.q.conjugate();
  out.t = -(out.q * p.t);
  out.canonicalize();
  return out;
}

inline Vec3 transform_point(const Pose& p, const Vec3& x) {
  return p.q * x + p.t;
}

// Pinhole camera. Convention: +z forward, x right, y down, image origin
// top-left, pixel centers on integer coordinates.
struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  bool valid() const {
    return fx > 0.0 && fy > 0.0 && width > 0 && height > 0 && cx >= 0.0 &&
           cx < width && cy >= 0.0 && cy < height;
  }
};

struct PixelProjection {
  double u, v;  // continuous pixel coordinates
  double z;     // camera-frame depth, > 0
};

// Projects a camera-frame point. Returns nullopt for points at or behind the
// camera plane; bounds are the caller's problem (bounding boxes need the
// unclipped coordinates).
inline std::optional<PixelProjection> project(const CameraIntrinsics& intr,
                                              const Vec3& x_cam) {
  if (!(x_cam.z() > 0.0)) return std::nullopt;
  PixelProjection p;
  p.z = x_cam.z();
  p.u = intr.fx * x_cam.x() / x_cam.z() + intr.cx;
  p.v = intr.fy * x_cam.y() / x_cam.z() + intr.cy;
  return p;
}

inline bool pixel_in_bounds(const CameraIntrinsics& intr, int u, int v) {
  return u >= 0 && u < intr.width && v >= 0 && v < intr.height;
}

// Unit-less camera ray direction through pixel (u, v): ((u-cx)/fx, (v-cy)/fy, 1).
inline Vec3 pixel_ray(const CameraIntrinsics& intr, double u, double v) {
  return Vec3((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
}

// One RGB-D frame. Color components in [0,1], depth in meters with 0.0
// reserved for "no measurement".
struct RgbdFrame {
  int width = 0, height = 0;
  std::vector<float> color;  // H*W*3, row-major, RGB
  std::vector<float> depth;  // H*W, row-major

  void resize(int w, int h) {
    width = w;
    height = h;
    color.assign(static_cast<std::size_t>(w) * h * 3, 0.0f);
    depth.assign(static_cast<std::size_t>(w) * h, 0.0f);
  }

  float depth_at(int u, int v) const {
    return depth[static_cast<std::size_t>(v) * width + u];
  }
  void set_depth(int u, int v, float d) {
    depth[static_cast<std::size_t>(v) * width + u] = d;
  }
  Vec3f color_at(int u, int v) const {
    std::size_t i = (static_cast<std::size_t>(v) * width + u) * 3;
    return Vec3f(color[i], color[i + 1], color[i + 2]);
  }
  void set_color(int u, int v, const Vec3f& c) {
    std::size_t i = (static_cast<std::size_t>(v) * width + u) * 3;
    color[i] = c.x();
    color[i + 1] = c.y();
    color[i + 2] = c.z();
  }
};

// Keyframe node of the pose graph; pose is camera-to-world. The pixel data
// lives in a FrameStore keyed by frame_index.
struct Keyframe {
  int id = -1;
  int frame_index = -1;
  Pose pose;
};

// Lifts every valid-depth pixel to a world point.
inline std::vector<Vec3> backproject(const RgbdFrame& frame,
                                     const CameraIntrinsics& intr,
                                     const Pose& pose) {
  std::vector<Vec3> out;
  out.reserve(frame.depth.size() / 4);
  for (int v = 0; v < frame.height; ++v) {
    for (int u = 0; u < frame.width; ++u) {
      float d = frame.depth_at(u, v);
      if (!(d > 0.0f) || !std::isfinite(d)) continue;
      Vec3 x_cam = pixel_ray(intr, u, v) * static_cast<double>(d);
      out.push_back(transform_point(pose, x_cam));
    }
  }
  return out;
}

}  // namespace ngm
