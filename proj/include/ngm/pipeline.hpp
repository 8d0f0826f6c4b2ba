#pragma once

#include <chrono>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>

#include "ngm/image_io.hpp"
#include "ngm/pose_graph.hpp"
#include "ngm/query.hpp"
#include "ngm/scene.hpp"
#include "ngm/synth.hpp"
#include "ngm/trainer.hpp"

namespace ngm {

// Every tunable of the engine in one place. Defaults are the reference
// parameter set; N_f defaults to 32 (the value used for the reported
// experiments) and is exposed as a flag like everything else.
struct RunConfig {
  // fields and encoding
  double field_radius = 1.0;            // r
  std::uint32_t table_size = 1u << 12;  // T
  int levels = 16;                      // N_levels
  int features_per_level = 16;          // N_fpl
  double coarsest_resolution = 0.1;     // r_coarse, meters
  double finest_resolution = 0.0001;    // r_fine, meters
  int hidden_width = 32;
  double learning_rate = 1e-3;          // gamma
  double weight_decay = 1e-5;           // lambda

  // sampling
  int fields_per_iteration = 32;  // N_f
  int rays_per_field = 512;       // N_r
  int uniform_points = 8;         // N_up
  int depth_guided_points = 16;   // N_dp
  int probe_count = 64;           // field boundary probes

  // rendering and loss
  double truncation = 0.1;  // tau, meters
  double eta = 20.0;
  double lambda_color = 1.0;
  double lambda_depth = 1.0;
  double lambda_fs = 40.0;
  double lambda_tsdf = 50.0;
  double huber_delta = 0.05;  // meters
  int iters_per_frame = 5;    // N_it
  double grad_clip = 10.0;

  // queries
  int knn = 2;              // k
  double sharpness = 10.0;  // xi
  double l_far = 8.0;       // meters
  double mesh_voxel = 0.02; // meters

  // run control
  std::uint64_t seed = 0;
  int workers = 0;  // 0 = hardware concurrency
  int checkpoint_every = 0;  // frames between periodic checkpoints, 0 = off

  int effective_workers() const {
    return workers > 0 ? workers : default_worker_count();
  }

  FieldSetConfig fieldset_config() const {
    FieldSetConfig c;
    c.radius = field_radius;
    c.encoding.table_size = table_size;
    c.encoding.levels = levels;
    c.encoding.features_per_level = features_per_level;
    c.encoding.coarsest_resolution = coarsest_resolution;
    c.encoding.finest_resolution = finest_resolution;
    c.hidden_width = hidden_width;
    c.learning_rate = learning_rate;
    c.weight_decay = weight_decay;
    c.seed = seed;
    return c;
  }

  SamplerConfig sampler_config() const {
    SamplerConfig c;
    c.fields_per_iteration = fields_per_iteration;
    c.rays_per_field = rays_per_field;
    c.uniform_points = uniform_points;
    c.depth_guided_points = depth_guided_points;
    c.probe_count = probe_count;
    c.truncation = truncation;
    return c;
  }

  RenderConfig render_config() const {
    RenderConfig c;
    c.truncation = truncation;
    c.eta = eta;
    c.lambda_color = lambda_color;
    c.lambda_depth = lambda_depth;
    c.lambda_fs = lambda_fs;
    c.lambda_tsdf = lambda_tsdf;
    c.huber_delta = huber_delta;
    c.iters_per_frame = iters_per_frame;
    c.grad_clip = grad_clip;
    return c;
  }

  QueryConfig query_config() const {
    QueryConfig c;
    c.k = knn;
    c.sharpness = sharpness;
    c.l_far = l_far;
    c.mesh_voxel = mesh_voxel;
    return c;
  }
};

struct MapFrameLog {
  int frame = 0;
  double wall_ms = 0.0;
  int field_count = 0;
  int new_fields = 0;
  bool pose_update = false;
  int moved_fields = 0;
  int fields_trained = 0;
  LossBreakdown<double> losses;
  double loss_total = 0.0;
  std::vector<int> diverged;
};

// Per-frame mapping loop: replay -> instantiate -> deform -> reanchor ->
// train. Owns the map; the caller owns sequence and recording.
class MappingSession {
 public:
  MappingSession(const SequenceReader& seq, const PoseGraphRecording& rec,
                 const RunConfig& cfg)
      : seq_(&seq),
        rec_(&rec),
        cfg_(cfg),
        fs_(cfg.fieldset_config()),
        replayer_(rec),
        pool_(cfg.effective_workers()) {}

  int next_frame() const { return next_frame_; }
  bool done() const { return next_frame_ >= seq_->frame_count; }
  const FieldSet& fields() const { return fs_; }
  FieldSet& fields() { return fs_; }
  const PoseGraphSnapshot& snapshot() const { return snap_; }
  const CameraIntrinsics& intrinsics() const { return seq_->intrinsics; }
  WorkerPool& pool() { return pool_; }
  const RunConfig& config() const { return cfg_; }

  // Called between frames (e.g. right after the deformation of a loop
  // closure, before any training) by measurement harnesses.
  std::function<void(int frame, const MappingSession&)> after_events_hook;

  MapFrameLog process_next_frame() {
    const int frame = next_frame_;
    auto t0 = std::chrono::steady_clock::now();
    MapFrameLog log;
    log.frame = frame;

    while (auto step = replayer_.step_until(static_cast<double>(frame))) {
      if (const auto* add = std::get_if<AddKeyframeEvent>(step->event)) {
        if (!frames_.contains(add->frame_index))
          frames_.pin(add->frame_index, seq_->load_frame(add->frame_index));
        Keyframe kf{add->kf_id, add->frame_index, add->pose};
        log.new_fields += static_cast<int>(
            fs_.instantiate_fields(kf, frames_.at(add->frame_index),
                                   seq_->intrinsics)
                .size());
        latest_kf_id_ = std::max(latest_kf_id_, add->kf_id);
      } else {
        PoseGraphSnapshot snap = replayer_.current_snapshot();
        log.moved_fields += count_children(step->changed);
        fs_.apply_pose_update(step->old_poses, snap, step->changed);
        log.pose_update = true;
      }
    }
    snap_ = replayer_.current_snapshot();
    fs_.reanchor(snap_);

    if (after_events_hook) after_events_hook(frame, *this);

    if (latest_kf_id_ >= 0 && !fs_.empty()) {
      const Keyframe* current = snap_.find(latest_kf_id_);
      FrameTrainResult train = train_frame(
          fs_, snap_, frames_, seq_->intrinsics, current->pose,
          frames_.at(current->frame_index), cfg_.sampler_config(),
          cfg_.render_config(), cfg_.seed, frame, pool_);
      log.diverged = train.diverged_fields;
      if (!train.iterations.empty()) {
        const IterationLog& last = train.iterations.back();
        log.fields_trained = last.fields_trained;
        log.losses = last.mean_losses;
        log.loss_total = last.mean_losses.total(cfg_.render_config());
      }
    }
    log.field_count = static_cast<int>(fs_.size());
    log.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    next_frame_ = frame + 1;
    return log;
  }

  bool all_fields_dead() const {
    if (fs_.empty()) return false;
    for (const NeuralField& f : fs_.fields())
      if (!f.diverged) return false;
    return true;
  }

  void save_checkpoint(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    save_map_checkpoint(fs_, static_cast<std::uint32_t>(next_frame_), out);
  }

  // Restores the map and frame cursor, then fast-forwards the replay state.
  void resume_from(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
    next_frame_ = static_cast<int>(load_map_checkpoint(fs_, in));
    replayer_ = Replayer(*rec_);
    replayer_.advance_to(static_cast<double>(next_frame_ - 1));
    snap_ = replayer_.current_snapshot();
    for (const Keyframe& kf : snap_.keyframes) {
      if (!frames_.contains(kf.frame_index))
        frames_.pin(kf.frame_index, seq_->load_frame(kf.frame_index));
      latest_kf_id_ = std::max(latest_kf_id_, kf.id);
    }
  }

 private:
  int count_children(const std::vector<int>& changed) const {
    int n = 0;
    for (const NeuralField& f : fs_.fields())
      if (std::find(changed.begin(), changed.end(), f.parent_kf) !=
          changed.end())
        ++n;
    return n;
  }

  const SequenceReader* seq_;
  const PoseGraphRecording* rec_;
  RunConfig cfg_;
  FieldSet fs_;
  Replayer replayer_;
  FrameStore frames_;
  PoseGraphSnapshot snap_;
  WorkerPool pool_;
  int next_frame_ = 0;
  int latest_kf_id_ = -1;
};

inline void write_log_line(std::ostream& out, const MapFrameLog& log) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "{\"frame\":%d,\"wall_ms\":%.3f,\"fields\":%d,"
                "\"new_fields\":%d,\"pose_update\":%s,\"moved_fields\":%d,"
                "\"trained\":%d,\"loss_total\":%.6g,\"loss_color\":%.6g,"
                "\"loss_depth\":%.6g,\"loss_tsdf\":%.6g,\"loss_fs\":%.6g,"
                "\"diverged\":[",
                log.frame, log.wall_ms, log.field_count, log.new_fields,
                log.pose_update ? "true" : "false", log.moved_fields,
                log.fields_trained, log.loss_total, log.losses.color,
                log.losses.depth, log.losses.tsdf, log.losses.fs);
  out << buf;
  for (std::size_t i = 0; i < log.diverged.size(); ++i)
    out << (i ? "," : "") << log.diverged[i];
  out << "]}\n";
}

struct MapRunResult {
  std::vector<MapFrameLog> logs;
  int exit_code = 0;  // 3 when every field diverged
};

inline MapRunResult run_mapping(MappingSession& session, std::ostream* log_out,
                                const std::string& checkpoint_dir = "") {
  MapRunResult result;
  while (!session.done()) {
    MapFrameLog log = session.process_next_frame();
    if (log_out) write_log_line(*log_out, log);
    result.logs.push_back(std::move(log));
    if (session.all_fields_dead()) {
      result.exit_code = 3;
      break;
    }
    const RunConfig& cfg = session.config();
    if (!checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
        session.next_frame() % cfg.checkpoint_every == 0 && !session.done()) {
      session.save_checkpoint(checkpoint_dir + "/" +
                              frame_name(session.next_frame(), ".ngmm"));
    }
  }
  return result;
}

// Throughput probe: trains fields on an in-memory synthetic sphere scene and
// reports optimization rates. No meshing.
struct BenchResult {
  double iterations_per_sec = 0.0;
  double field_steps_per_sec = 0.0;
  int iterations = 0;
};

inline BenchResult run_bench(const RunConfig& cfg, double budget_seconds) {
  AnalyticScene scene = make_scene("sphere");
  CameraIntrinsics intr = make_intrinsics(160, 120, 90.0);
  FieldSet fs(cfg.fieldset_config());
  FrameStore frames;
  PoseGraphSnapshot snap;
  const int n_views = 8;
  PoseGraphRecording rec;
  for (int i = 0; i < n_views; ++i) {
    Pose pose = trajectory_pose(scene, static_cast<double>(i) / n_views);
    frames.pin(i, render_gt_frame(scene, pose, intr, cfg.effective_workers()));
    snap.keyframes.push_back(Keyframe{i, i, pose});
    Keyframe kf = snap.keyframes.back();
    fs.instantiate_fields(kf, frames.at(i), intr);
  }
  WorkerPool pool(cfg.effective_workers());
  RenderConfig rcfg = cfg.render_config();
  rcfg.iters_per_frame = 1;
  BenchResult out;
  const Keyframe& current = snap.keyframes.back();
  auto t0 = std::chrono::steady_clock::now();
  double elapsed = 0.0;
  std::int64_t fake_frame = 0;
  int field_steps = 0;
  while (elapsed < budget_seconds) {
    FrameTrainResult r = train_frame(
        fs, snap, frames, intr, current.pose, frames.at(current.frame_index),
        cfg.sampler_config(), rcfg, cfg.seed, fake_frame++, pool);
    for (const IterationLog& it : r.iterations) field_steps += it.fields_trained;
    out.iterations += rcfg.iters_per_frame;
    elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                            t0)
                  .count();
  }
  out.iterations_per_sec = out.iterations / elapsed;
  out.field_steps_per_sec = field_steps / elapsed;
  return out;
}

}  // namespace ngm
