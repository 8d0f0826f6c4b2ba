#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ngm/geometry.hpp"

namespace ngm {

struct AddKeyframeEvent {
  double time = 0.0;
  int kf_id = -1;
  int frame_index = -1;
  Pose pose;
};

struct UpdatePosesEvent {
  double time = 0.0;
  std::vector<std::pair<int, Pose>> poses;  // (kf_id, new pose)
};

using PoseGraphEvent = std::variant<AddKeyframeEvent, UpdatePosesEvent>;

inline double event_time(const PoseGraphEvent& e) {
  return std::visit([](const auto& ev) { return ev.time; }, e);
}

// Time-ordered keyframe-add and pose-update events, the prerecorded output
// of the sparse SLAM frontend. Validated once at load; replay assumes a
// well-formed recording.
struct PoseGraphRecording {
  std::vector<PoseGraphEvent> events;

  void validate() const {
    double last_time = -1.0;
    int last_kf_id = -1;
    std::vector<int> known;
    for (const auto& e : events) {
      double t = event_time(e);
      if (t < last_time)
        throw std::runtime_error("pose graph recording: times decrease");
      last_time = t;
      if (const auto* add = std::get_if<AddKeyframeEvent>(&e)) {
        if (add->kf_id <= last_kf_id)
          throw std::runtime_error(
              "pose graph recording: keyframe ids not strictly increasing");
        last_kf_id = add->kf_id;
        known.push_back(add->kf_id);
      } else {
        const auto& upd = std::get<UpdatePosesEvent>(e);
        for (const auto& [kf_id, pose] : upd.poses) {
          (void)pose;
          if (std::find(known.begin(), known.end(), kf_id) == known.end())
            throw std::runtime_error(
                "pose graph recording: UPD references unknown keyframe");
        }
      }
    }
  }
};

struct PoseGraphSnapshot {
  std::vector<Keyframe> keyframes;  // ascending id
  std::vector<int> changed;         // ids added or re-posed since last snapshot

  const Keyframe* find(int kf_id) const {
    for (const auto& kf : keyframes)
      if (kf.id == kf_id) return &kf;
    return nullptr;
  }
};

// Incremental replay cursor. advance_to(t) applies all events with
// event.time <= t that were not applied yet and reports which keyframes
// moved (or appeared) since the previous snapshot. Given the same recording
// and the same query sequence the snapshots are identical.
class Replayer {
 public:
  explicit Replayer(const PoseGraphRecording& rec) : rec_(&rec) {}

  PoseGraphSnapshot advance_to(double t) {
    std::map<int, Pose> old_poses;
    std::vector<int> changed;
    std::vector<const PoseGraphEvent*> applied;
    while (cursor_ < rec_->events.size() &&
           event_time(rec_->events[cursor_]) <= t) {
      const PoseGraphEvent& e = rec_->events[cursor_];
      applied.push_back(&e);
      if (const auto* add = std::get_if<AddKeyframeEvent>(&e)) {
        Keyframe kf;
        kf.id = add->kf_id;
        kf.frame_index = add->frame_index;
        kf.pose = add->pose;
        keyframes_.push_back(kf);
        changed.push_back(kf.id);
      } else {
        for (const auto& [kf_id, pose] : std::get<UpdatePosesEvent>(e).poses) {
          Keyframe* kf = find_mut(kf_id);
          if (!kf) throw std::runtime_error("replay: UPD for unknown keyframe");
          if (!old_poses.count(kf_id)) old_poses.emplace(kf_id, kf->pose);
          kf->pose = pose;
          changed.push_back(kf_id);
        }
      }
      ++cursor_;
    }
    std::sort(changed.begin(), changed.end());
    changed.erase(std::unique(changed.begin(), changed.end()), changed.end());
    last_events_ = std::move(applied);
    PoseGraphSnapshot snap;
    snap.keyframes = keyframes_;
    snap.changed = std::move(changed);
    return snap;
  }

  // Events consumed by the most recent advance_to, in order.
  const std::vector<const PoseGraphEvent*>& last_events() const {
    return last_events_;
  }

  // Granular form used by the mapping loop: applies at most one event with
  // event.time <= t. For UpdatePoses events, old_poses holds the poses the
  // re-posed keyframes had just before this event.
  struct Step {
    const PoseGraphEvent* event = nullptr;
    std::map<int, Pose> old_poses;
    std::vector<int> changed;
  };

  std::optional<Step> step_until(double t) {
    if (cursor_ >= rec_->events.size() ||
        event_time(rec_->events[cursor_]) > t)
      return std::nullopt;
    Step step;
    const PoseGraphEvent& e = rec_->events[cursor_];
    step.event = &e;
    if (const auto* add = std::get_if<AddKeyframeEvent>(&e)) {
      keyframes_.push_back(Keyframe{add->kf_id, add->frame_index, add->pose});
      step.changed.push_back(add->kf_id);
    } else {
      for (const auto& [kf_id, pose] : std::get<UpdatePosesEvent>(e).poses) {
        Keyframe* kf = find_mut(kf_id);
        if (!kf) throw std::runtime_error("replay: UPD for unknown keyframe");
        step.old_poses.emplace(kf_id, kf->pose);
        kf->pose = pose;
        step.changed.push_back(kf_id);
      }
    }
    ++cursor_;
    return step;
  }

  const std::vector<Keyframe>& keyframes() const { return keyframes_; }

  PoseGraphSnapshot current_snapshot() const {
    PoseGraphSnapshot snap;
    snap.keyframes = keyframes_;
    return snap;
  }

 private:
  Keyframe* find_mut(int kf_id) {
    for (auto& kf : keyframes_)
      if (kf.id == kf_id) return &kf;
    return nullptr;
  }

  const PoseGraphRecording* rec_;
  std::size_t cursor_ = 0;
  std::vector<Keyframe> keyframes_;
  std::vector<const PoseGraphEvent*> last_events_;
};

// Pure form: state of the graph after all events with time <= t, with every
// keyframe reported as changed relative to an empty previous snapshot.
inline PoseGraphSnapshot replay_at(const PoseGraphRecording& rec, double t) {
  Replayer r(rec);
  return r.advance_to(t);
}

// ---- text format ----------------------------------------------------------
//
//   KF <time> <kf_id> <frame_index> <tx> <ty> <tz> <qx> <qy> <qz> <qw>
//   UPD <time> <n>
//   <kf_id> <tx> <ty> <tz> <qx> <qy> <qz> <qw>      (n lines)

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_pose(const Pose& p) {
  std::string s;
  s += fmt_double(p.t.x()) + " " + fmt_double(p.t.y()) + " " +
       fmt_double(p.t.z());
  s += " " + fmt_double(p.q.x()) + " " + fmt_double(p.q.y()) + " " +
       fmt_double(p.q.z()) + " " + fmt_double(p.q.w());
  return s;
}

inline Pose parse_pose_fields(std::istringstream& ss, const std::string& ctx) {
  double tx, ty, tz, qx, qy, qz, qw;
  if (!(ss >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
    throw std::runtime_error("recording parse error in " + ctx);
  return make_pose(Quat(qw, qx, qy, qz), Vec3(tx, ty, tz));
}

}  // namespace detail

inline void save_recording(const PoseGraphRecording& rec,
                           const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write recording: " + path);
  for (const auto& e : rec.events) {
    if (const auto* add = std::get_if<AddKeyframeEvent>(&e)) {
      out << "KF " << detail::fmt_double(add->time) << " " << add->kf_id << " "
          << add->frame_index << " " << detail::fmt_pose(add->pose) << "\n";
    } else {
      const auto& upd = std::get<UpdatePosesEvent>(e);
      out << "UPD " << detail::fmt_double(upd.time) << " " << upd.poses.size()
          << "\n";
      for (const auto& [kf_id, pose] : upd.poses)
        out << kf_id << " " << detail::fmt_pose(pose) << "\n";
    }
  }
}

inline PoseGraphRecording load_recording(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read recording: " + path);
  PoseGraphRecording rec;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    std::string ctx = path + ":" + std::to_string(lineno);
    if (tag == "KF") {
      AddKeyframeEvent add;
      if (!(ss >> add.time >> add.kf_id >> add.frame_index))
        throw std::runtime_error("recording parse error in " + ctx);
      add.pose = detail::parse_pose_fields(ss, ctx);
      rec.events.emplace_back(add);
    } else if (tag == "UPD") {
      UpdatePosesEvent upd;
      std::size_t n = 0;
      if (!(ss >> upd.time >> n))
        throw std::runtime_error("recording parse error in " + ctx);
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(in, line))
          throw std::runtime_error("recording truncated in " + ctx);
        ++lineno;
        std::istringstream ps(line);
        int kf_id;
        if (!(ps >> kf_id))
          throw std::runtime_error("recording parse error in " + ctx);
        upd.poses.emplace_back(kf_id, detail::parse_pose_fields(ps, ctx));
      }
      rec.events.emplace_back(std::move(upd));
    } else {
      throw std::runtime_error("recording: unknown tag '" + tag + "' in " + ctx);
    }
  }
  rec.validate();
  return rec;
}

}  // namespace ngm
