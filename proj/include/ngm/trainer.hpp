#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "ngm/field.hpp"
#include "ngm/parallel.hpp"
#include "ngm/sampler.hpp"
#include "ngm/scene.hpp"

namespace ngm {

struct RenderConfig {
  double truncation = 0.1;    // tau, meters
  double eta = 20.0;          // occupancy sharpness
  double lambda_color = 1.0;
  double lambda_depth = 1.0;
  double lambda_fs = 40.0;
  double lambda_tsdf = 50.0;
  double huber_delta = 0.05;  // meters
  int iters_per_frame = 5;    // N_it
  double grad_clip = 10.0;    // L2 norm per field per step
};

// o = 4 sigma(eta s) sigma(-eta s); equals 1 exactly at s = 0 and is
// symmetric in s. s is in truncation-normalized units.
template <typename S>
inline S sdf_to_occupancy(S s, S eta) {
  S a = sigmoid(eta * s);
  S b = sigmoid(-eta * s);
  return static_cast<S>(4) * a * b;
}

template <typename S>
inline S sdf_to_occupancy_dds(S s, S eta) {
  S a = sigmoid(eta * s);
  S b = sigmoid(-eta * s);
  return eta * (static_cast<S>(4) * a * b) * (b - a);
}

// Front-to-back compositing with weights w_i = o_i * prod_{j<i} (1 - o_j).
// Samples must be ordered by ascending distance.
template <typename S>
inline void composite(const S* l, const S* color, const S* occ, int n,
                      S out_color[3], S& out_depth, S* weights) {
  S transmittance = static_cast<S>(1);
  out_color[0] = out_color[1] = out_color[2] = static_cast<S>(0);
  out_depth = static_cast<S>(0);
  for (int i = 0; i < n; ++i) {
    S w = occ[i] * transmittance;
    weights[i] = w;
    out_color[0] += w * color[3 * i + 0];
    out_color[1] += w * color[3 * i + 1];
    out_color[2] += w * color[3 * i + 2];
    out_depth += w * l[i];
    transmittance *= (static_cast<S>(1) - occ[i]);
  }
}

// Exact reverse pass of composite. Avoids dividing by (1 - o_i), which is
// zero whenever a sample sits on the surface, by forming the excluded
// products directly; quadratic in n, which stays small during training.
template <typename S>
inline void composite_backward(const S* l, const S* color, const S* occ,
                               const S* weights, int n, const S dcolor[3],
                               S ddepth, S* out_dcolor, S* out_docc) {
  std::vector<S> g(n);  // dL/dw_i
  for (int i = 0; i < n; ++i) {
    g[i] = dcolor[0] * color[3 * i + 0] + dcolor[1] * color[3 * i + 1] +
           dcolor[2] * color[3 * i + 2] + ddepth * l[i];
    out_dcolor[3 * i + 0] = weights[i] * dcolor[0];
    out_dcolor[3 * i + 1] = weights[i] * dcolor[1];
    out_dcolor[3 * i + 2] = weights[i] * dcolor[2];
  }
  S transmittance = static_cast<S>(1);
  for (int i = 0; i < n; ++i) {
    S acc = g[i];
    S suffix = static_cast<S>(1);  // prod_{i<m<j} (1 - o_m)
    for (int j = i + 1; j < n; ++j) {
      acc -= occ[j] * suffix * g[j];
      suffix *= (static_cast<S>(1) - occ[j]);
    }
    out_docc[i] = transmittance * acc;
    transmittance *= (static_cast<S>(1) - occ[i]);
  }
}

template <typename S>
inline S huber(S e, S delta) {
  S a = std::abs(e);
  return a <= delta ? static_cast<S>(0.5) * e * e
                    : delta * (a - static_cast<S>(0.5) * delta);
}

template <typename S>
inline S huber_de(S e, S delta) {
  if (e > delta) return delta;
  if (e < -delta) return -delta;
  return e;
}

// Fixed-shape supervision data for one field: n_rays rays with n_pts sample
// points each, already expressed in the field's local frame.
struct FieldSupervision {
  int n_rays = 0;
  int n_pts = 0;
  std::vector<Vec3> local_points;   // n_rays * n_pts
  std::vector<double> distances;    // n_rays * n_pts, along-ray, ascending per ray
  std::vector<float> target_color;  // n_rays * 3
  std::vector<double> l_obs;        // n_rays
  std::vector<char> depth_valid;    // n_rays

  int point_count() const { return n_rays * n_pts; }
};

// Stage 3 of the sampling procedure for a whole batch, plus the world-to-local
// transform.
inline void build_supervision(const Pose& field_pose,
                              const RaySegmentBatch& batch,
                              const SamplerConfig& cfg, Rng& rng,
                              FieldSupervision& sup) {
  const int n_pts = cfg.points_per_ray();
  sup.n_rays = static_cast<int>(batch.rays.size());
  sup.n_pts = n_pts;
  sup.local_points.resize(static_cast<std::size_t>(sup.n_rays) * n_pts);
  sup.distances.resize(static_cast<std::size_t>(sup.n_rays) * n_pts);
  sup.target_color.resize(static_cast<std::size_t>(sup.n_rays) * 3);
  sup.l_obs.resize(sup.n_rays);
  sup.depth_valid.resize(sup.n_rays);
  Pose world_to_local = inverse(field_pose);
  std::vector<double> ls;
  for (int r = 0; r < sup.n_rays; ++r) {
    const RaySample& ray = batch.rays[r];
    sample_points(ray.l_min, ray.l_max, ray.l_obs, ray.depth_valid,
                  cfg.truncation, cfg.uniform_points, cfg.depth_guided_points,
                  rng, ls);
    for (int i = 0; i < n_pts; ++i) {
      std::size_t idx = static_cast<std::size_t>(r) * n_pts + i;
      sup.distances[idx] = ls[i];
      sup.local_points[idx] =
          transform_point(world_to_local, ray.origin + ls[i] * ray.dir);
    }
    sup.target_color[3 * r + 0] = ray.target_color.x();
    sup.target_color[3 * r + 1] = ray.target_color.y();
    sup.target_color[3 * r + 2] = ray.target_color.z();
    sup.l_obs[r] = ray.l_obs;
    sup.depth_valid[r] = ray.depth_valid ? 1 : 0;
  }
}

template <typename S>
struct LossBreakdown {
  S color{}, depth{}, tsdf{}, fs{};

  S total(const RenderConfig& cfg) const {
    return static_cast<S>(cfg.lambda_color) * color +
           static_cast<S>(cfg.lambda_depth) * depth +
           static_cast<S>(cfg.lambda_tsdf) * tsdf +
           static_cast<S>(cfg.lambda_fs) * fs;
  }
};

namespace detail {

// Shared forward/backward walk over one supervision batch. When Grads is
// non-null, upstream gradients are accumulated into it through the
// compositing chain (color/depth) and directly into s (tsdf/free-space).
template <typename S>
inline LossBreakdown<S> field_losses_impl(const FieldParams<S>& params,
                                          const FieldSupervision& sup,
                                          const RenderConfig& cfg,
                                          FieldBatchCache<S>& cache,
                                          FieldGrads<S>* grads) {
  const int n_pts = sup.n_pts;
  const int n_total = sup.point_count();
  const S tau = static_cast<S>(cfg.truncation);
  const S eta = static_cast<S>(cfg.eta);
  const S delta = static_cast<S>(cfg.huber_delta);

  field_forward_batch(params, sup.local_points.data(), n_total, cache);

  // partition counts first so the per-point means are well-defined
  int n_depth_rays = 0, n_tsdf = 0, n_fs = 0;
  for (int r = 0; r < sup.n_rays; ++r) {
    if (!sup.depth_valid[r]) continue;
    ++n_depth_rays;
    for (int i = 0; i < n_pts; ++i) {
      double diff = sup.l_obs[r] - sup.distances[static_cast<std::size_t>(r) * n_pts + i];
      if (std::abs(diff) <= cfg.truncation)
        ++n_tsdf;
      else if (diff > cfg.truncation)
        ++n_fs;
    }
  }

  LossBreakdown<S> losses;
  std::vector<S> l_ray(n_pts), occ(n_pts), w(n_pts);
  std::vector<S> dcol_pts, docc_pts, dcolor_all, dsdf_all;
  if (grads) {
    dcol_pts.resize(static_cast<std::size_t>(n_pts) * 3);
    docc_pts.resize(n_pts);
    dcolor_all.assign(static_cast<std::size_t>(n_total) * 3, static_cast<S>(0));
    dsdf_all.assign(n_total, static_cast<S>(0));
  }

  for (int r = 0; r < sup.n_rays; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * n_pts;
    const S* c_pts = cache.color.data() + base * 3;
    for (int i = 0; i < n_pts; ++i) {
      l_ray[i] = static_cast<S>(sup.distances[base + i]);
      occ[i] = sdf_to_occupancy(cache.sdf[base + i], eta);
    }
    S rendered[3];
    S depth_hat;
    composite(l_ray.data(), c_pts, occ.data(), n_pts, rendered, depth_hat,
              w.data());

    S dcol_hat[3] = {static_cast<S>(0), static_cast<S>(0), static_cast<S>(0)};
    S ddepth_hat = static_cast<S>(0);

    for (int ch = 0; ch < 3; ++ch) {
      S e = rendered[ch] - static_cast<S>(sup.target_color[3 * r + ch]);
      losses.color += std::abs(e) / static_cast<S>(sup.n_rays);
      if (grads)
        dcol_hat[ch] = static_cast<S>(cfg.lambda_color) *
                       (e > S(0) ? S(1) : (e < S(0) ? S(-1) : S(0))) /
                       static_cast<S>(sup.n_rays);
    }

    if (sup.depth_valid[r]) {
      S e = depth_hat - static_cast<S>(sup.l_obs[r]);
      losses.depth += huber(e, delta) / static_cast<S>(n_depth_rays);
      if (grads)
        ddepth_hat = static_cast<S>(cfg.lambda_depth) * huber_de(e, delta) /
                     static_cast<S>(n_depth_rays);

      for (int i = 0; i < n_pts; ++i) {
        double diff = sup.l_obs[r] - sup.distances[base + i];
        S pred = cache.sdf[base + i];
        if (std::abs(diff) <= cfg.truncation) {
          S target = static_cast<S>(diff) / tau;
          target = std::clamp(target, static_cast<S>(-1), static_cast<S>(1));
          S e_s = pred - target;
          losses.tsdf += e_s * e_s / static_cast<S>(n_tsdf);
          if (grads)
            dsdf_all[base + i] += static_cast<S>(cfg.lambda_tsdf) *
                                  static_cast<S>(2) * e_s /
                                  static_cast<S>(n_tsdf);
        } else if (diff > cfg.truncation) {
          S e_s = pred - static_cast<S>(1);
          losses.fs += e_s * e_s / static_cast<S>(n_fs);
          if (grads)
            dsdf_all[base + i] += static_cast<S>(cfg.lambda_fs) *
                                  static_cast<S>(2) * e_s /
                                  static_cast<S>(n_fs);
        }
        // points more than tau behind the surface get no geometric loss
      }
    }

    if (grads) {
      composite_backward(l_ray.data(), c_pts, occ.data(), w.data(), n_pts,
                         dcol_hat, ddepth_hat, dcol_pts.data(),
                         docc_pts.data());
      for (int i = 0; i < n_pts; ++i) {
        for (int ch = 0; ch < 3; ++ch)
          dcolor_all[(base + i) * 3 + ch] += dcol_pts[3 * i + ch];
        dsdf_all[base + i] +=
            docc_pts[i] * sdf_to_occupancy_dds(cache.sdf[base + i], eta);
      }
    }
  }

  if (grads)
    field_backward_batch(params, sup.local_points.data(), cache,
                         dcolor_all.data(), dsdf_all.data(), *grads);
  return losses;
}

}  // namespace detail

template <typename S>
inline LossBreakdown<S> field_loss_forward(const FieldParams<S>& params,
                                           const FieldSupervision& sup,
                                           const RenderConfig& cfg,
                                           FieldBatchCache<S>& cache) {
  return detail::field_losses_impl<S>(params, sup, cfg, cache, nullptr);
}

template <typename S>
inline LossBreakdown<S> field_loss_backward(const FieldParams<S>& params,
                                            const FieldSupervision& sup,
                                            const RenderConfig& cfg,
                                            FieldBatchCache<S>& cache,
                                            FieldGrads<S>& grads) {
  return detail::field_losses_impl<S>(params, sup, cfg, cache, &grads);
}

// ---- per-frame training loop -------------------------------------------------

struct TrainWorkspace {
  FieldBatchCache<float> cache;
  FieldGrads<float> grads;
  FieldSupervision sup;
  bool grads_allocated = false;
};

struct IterationLog {
  LossBreakdown<double> mean_losses;  // averaged over trained fields
  int fields_trained = 0;
};

struct FrameTrainResult {
  std::vector<IterationLog> iterations;
  std::vector<int> diverged_fields;

  double final_total(const RenderConfig& cfg) const {
    if (iterations.empty()) return 0.0;
    return iterations.back().mean_losses.total(cfg);
  }
};

// One optimization step for one field on an already-sampled batch. Returns
// false when the loss went non-finite; the field is flagged and untouched.
inline bool train_field_step(NeuralField& field, const FieldSupervision& sup,
                             const RenderConfig& cfg, TrainWorkspace& ws,
                             LossBreakdown<double>& out_losses) {
  if (!ws.grads_allocated) {
    ws.grads.match(field.params);
    ws.grads_allocated = true;
  }
  ws.grads.zero();
  LossBreakdown<float> losses =
      field_loss_backward(field.params, sup, cfg, ws.cache, ws.grads);
  out_losses = {static_cast<double>(losses.color),
                static_cast<double>(losses.depth),
                static_cast<double>(losses.tsdf),
                static_cast<double>(losses.fs)};
  float total = losses.total(cfg);
  if (!std::isfinite(total)) {
    field.diverged = true;
    return false;
  }
  double norm = std::sqrt(ws.grads.squared_norm());
  if (norm > cfg.grad_clip)
    ws.grads.scale(static_cast<float>(cfg.grad_clip / norm));
  adam_step(field.params, ws.grads, field.adam);
  return true;
}

// Runs N_it optimization iterations on the field set for one frame. Fields
// are trained independently; only their parameters change (poses belong to
// the pose graph). The observed-field set and each field's observing
// keyframes are recomputed every iteration from the given snapshot.
inline FrameTrainResult train_frame(
    FieldSet& fs, const PoseGraphSnapshot& snap, const FrameStore& frames,
    const CameraIntrinsics& intr, const Pose& current_pose,
    const RgbdFrame& current_depth, const SamplerConfig& scfg,
    const RenderConfig& rcfg, std::uint64_t seed, std::int64_t frame_index,
    WorkerPool& pool) {
  FrameTrainResult result;
  if (fs.empty()) return result;

  std::vector<Vec3> probe_dirs = fibonacci_sphere(scfg.probe_count);

  struct FieldOutcome {
    bool trained = false;
    bool diverged = false;
    LossBreakdown<double> losses;
    std::vector<int> supervisors;
  };

  for (int it = 0; it < rcfg.iters_per_frame; ++it) {
    std::int64_t global_iter =
        frame_index * static_cast<std::int64_t>(rcfg.iters_per_frame) + it;
    std::unordered_set<int> observed =
        observed_fields(fs, current_pose, intr, current_depth, probe_dirs);
    Rng pick_rng = make_stream(seed, RngStream::kFieldPick,
                               static_cast<std::uint64_t>(global_iter));
    std::vector<int> ids =
        sample_fields(fs, observed, scfg.fields_per_iteration, pick_rng);

    std::vector<FieldOutcome> outcomes(ids.size());
    pool.run(ids.size(), [&](std::size_t task, int worker) {
      NeuralField& field = fs.field(ids[task]);
      if (field.diverged) return;
      TrainWorkspace& ws = pool.workspace<TrainWorkspace>(worker);
      Rng rng = make_stream(seed, RngStream::kRaySampling,
                            static_cast<std::uint64_t>(field.id),
                            static_cast<std::uint64_t>(global_iter));
      auto views = observing_keyframes(field, fs.radius(), snap, frames, intr,
                                       probe_dirs);
      auto batch =
          sample_rays(field, fs.radius(), views, snap, frames, intr, scfg, rng);
      if (!batch) return;  // stale geometry, skip this iteration
      build_supervision(field.world_pose, *batch, scfg, rng, ws.sup);
      FieldOutcome& oc = outcomes[task];
      oc.trained = train_field_step(field, ws.sup, rcfg, ws, oc.losses);
      oc.diverged = field.diverged;
      for (const RaySample& ray : batch->rays)
        if (ray.depth_valid) oc.supervisors.push_back(ray.kf_id);
    });

    IterationLog log;
    for (std::size_t task = 0; task < ids.size(); ++task) {
      const FieldOutcome& oc = outcomes[task];
      if (oc.diverged &&
          std::find(result.diverged_fields.begin(), result.diverged_fields.end(),
                    ids[task]) == result.diverged_fields.end())
        result.diverged_fields.push_back(ids[task]);
      if (!oc.trained) continue;
      log.fields_trained += 1;
      log.mean_losses.color += oc.losses.color;
      log.mean_losses.depth += oc.losses.depth;
      log.mean_losses.tsdf += oc.losses.tsdf;
      log.mean_losses.fs += oc.losses.fs;
      for (int kf : oc.supervisors) fs.note_supervision(ids[task], kf);
    }
    if (log.fields_trained > 0) {
      log.mean_losses.color /= log.fields_trained;
      log.mean_losses.depth /= log.fields_trained;
      log.mean_losses.tsdf /= log.fields_trained;
      log.mean_losses.fs /= log.fields_trained;
    }
    result.iterations.push_back(log);
  }
  return result;
}

}  // namespace ngm
