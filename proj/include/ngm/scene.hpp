#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "ngm/field.hpp"
#include "ngm/geometry.hpp"
#include "ngm/pose_graph.hpp"
#include "ngm/rng.hpp"

namespace ngm {

struct NeuralField {
  int id = -1;
  int parent_kf = -1;
  Pose world_pose;
  FieldParams<float> params;
  AdamState<float> adam;
  std::vector<int> supervising_kfs;  // sorted, unique; see note_supervision
  bool diverged = false;

  const Vec3& center() const { return world_pose.t; }
};

struct FieldSetConfig {
  double radius = 1.0;
  EncodingConfig encoding;
  int hidden_width = 32;
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;
};

struct CellKey {
  std::int64_t x, y, z;
  bool operator==(const CellKey&) const = default;
};

struct CellKeyHash {
  std::size_t operator()(const CellKey& k) const {
    return static_cast<std::size_t>(
        mix64(static_cast<std::uint64_t>(k.x),
              static_cast<std::uint64_t>(k.y),
              static_cast<std::uint64_t>(k.z)));
  }
};

struct KnnResult {
  std::vector<std::pair<int, double>> items;  // (field id, center distance)
  bool complete = true;  // false when fewer than k fields exist
};

// The scene map: an append-only set of posed neural fields plus a uniform
// grid over field centers (cell side g = 2r/sqrt(3)) used for instantiation
// and nearest-neighbor queries. Single-writer; queries take const snapshots.
class FieldSet {
 public:
  explicit FieldSet(const FieldSetConfig& cfg)
      : cfg_(cfg), cell_(2.0 * cfg.radius / std::sqrt(3.0)) {}

  double radius() const { return cfg_.radius; }
  double cell_size() const { return cell_; }
  std::uint64_t seed() const { return cfg_.seed; }
  const FieldSetConfig& config() const { return cfg_; }

  std::size_t size() const { return fields_.size(); }
  bool empty() const { return fields_.empty(); }
  NeuralField& field(int id) { return fields_.at(id); }
  const NeuralField& field(int id) const { return fields_.at(id); }
  const std::vector<NeuralField>& fields() const { return fields_; }

  // { x : ||x - center_i|| > r for all i }
  std::vector<Vec3> uncovered_points(std::span<const Vec3> points) const {
    std::vector<Vec3> out;
    for (const Vec3& x : points)
      if (!covered(x)) out.push_back(x);
    return out;
  }

  bool covered(const Vec3& x) const {
    if (fields_.empty()) return false;
    const double r2 = cfg_.radius * cfg_.radius;
    bool hit = false;
    visit_rings(x, [&](int ring, double margin) {
      (void)ring;
      return !hit && margin <= cfg_.radius;
    },
    [&](int id) {
      if ((fields_[id].center() - x).squaredNorm() <= r2) hit = true;
    });
    return hit;
  }

  // Grid-based instantiation for a newly added keyframe: backprojects the
  // frame, finds uncovered points, snaps them to cells of a grid shifted by a
  // per-keyframe random offset in [0,g)^3, and creates a field in the center
  // of every such cell that holds no existing field center. Returns new ids.
  std::vector<int> instantiate_fields(const Keyframe& kf, const RgbdFrame& frame,
                                      const CameraIntrinsics& intr) {
    std::vector<Vec3> pts = backproject(frame, intr, kf.pose);
    Rng rng = make_stream(cfg_.seed, RngStream::kGridShift,
                          static_cast<std::uint64_t>(kf.id));
    Vec3 shift(rng.uniform(0.0, cell_), rng.uniform(0.0, cell_),
               rng.uniform(0.0, cell_));
    return instantiate_at_cells(uncovered_points(pts), shift, kf.id);
  }

  // Split out so tests can drive the cell arithmetic with a fixed shift.
  std::vector<int> instantiate_at_cells(std::span<const Vec3> uncovered,
                                        const Vec3& shift, int parent_kf) {
    std::vector<CellKey> todo;
    for (const Vec3& x : uncovered) {
      CellKey key{cell_index((x.x() - shift.x()) / cell_),
                  cell_index((x.y() - shift.y()) / cell_),
                  cell_index((x.z() - shift.z()) / cell_)};
      if (std::find(todo.begin(), todo.end(), key) != todo.end()) continue;
      if (cell_has_field_center(key, shift)) continue;
      todo.push_back(key);
    }
    std::vector<int> created;
    created.reserve(todo.size());
    for (const CellKey& key : todo) {
      Vec3 center = shift + Vec3((key.x + 0.5) * cell_, (key.y + 0.5) * cell_,
                                 (key.z + 0.5) * cell_);
      created.push_back(create_field(center, parent_kf));
    }
    return created;
  }

  // Re-parents every field to the closest keyframe (by center distance) among
  // the keyframes that have supervised it with valid depth; ties go to the
  // lower keyframe id. Fields without candidates keep their parent.
  void reanchor(const PoseGraphSnapshot& snap) {
    for (NeuralField& f : fields_) {
      int best = -1;
      double best_d2 = 0.0;
      for (int kf_id : f.supervising_kfs) {
        const Keyframe* kf = snap.find(kf_id);
        if (!kf) continue;
        double d2 = (kf->pose.t - f.center()).squaredNorm();
        if (best < 0 || d2 < best_d2) {
          best = kf_id;
          best_d2 = d2;
        }
      }
      if (best >= 0) f.parent_kf = best;
    }
  }

  // Rigid attachment: every field whose parent moved follows it,
  // world_pose <- T_new[k] * inverse(T_old[k]) * world_pose.
  void apply_pose_update(const std::map<int, Pose>& old_poses,
                         const PoseGraphSnapshot& snap,
                         std::span<const int> changed_kfs) {
    std::unordered_map<int, Pose> delta;
    for (int kf_id : changed_kfs) {
      auto old_it = old_poses.find(kf_id);
      const Keyframe* kf = snap.find(kf_id);
      if (old_it == old_poses.end() || !kf)
        throw std::runtime_error("pose update: keyframe missing from snapshot");
      delta.emplace(kf_id, compose(kf->pose, inverse(old_it->second)));
    }
    for (NeuralField& f : fields_) {
      auto it = delta.find(f.parent_kf);
      if (it == delta.end()) continue;
      CellKey before = center_cell(f.center());
      f.world_pose = compose(it->second, f.world_pose);
      CellKey after = center_cell(f.center());
      if (!(before == after)) move_in_grid(f.id, before, after);
    }
  }

  // Exact k nearest field centers, ascending (distance, id).
  KnnResult nearest_fields(const Vec3& x, int k) const {
    KnnResult res;
    if (k <= 0 || fields_.empty()) {
      res.complete = false;
      return res;
    }
    auto& items = res.items;
    visit_rings(x, [&](int ring, double margin) {
      (void)ring;
      if (static_cast<int>(items.size()) < k) return true;
      return items[k - 1].second > margin;
    },
    [&](int id) {
      double d = (fields_[id].center() - x).norm();
      items.emplace_back(id, d);
      std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second < b.second : a.first < b.first;
      });
      if (static_cast<int>(items.size()) > k) items.resize(k);
    });
    res.complete = static_cast<int>(items.size()) == k;
    return res;
  }

  // Checkpoint path: re-creates a field with explicit pose and parameters.
  // Ids must arrive in creation order.
  void restore_field(int id, int parent_kf, const Pose& pose,
                     FieldParams<float> params) {
    if (id != static_cast<int>(fields_.size()))
      throw std::runtime_error("restore_field: id sequence mismatch");
    NeuralField f;
    f.id = id;
    f.parent_kf = parent_kf;
    f.world_pose = pose;
    f.params = std::move(params);
    f.adam.learning_rate = cfg_.learning_rate;
    f.adam.weight_decay = cfg_.weight_decay;
    f.adam.match(f.params);
    grid_[center_cell(f.center())].push_back(f.id);
    grid_bbox_insert(center_cell(f.center()));
    fields_.push_back(std::move(f));
  }

  // Records that `kf_id` supervised `field_id` with at least one valid-depth
  // ray; feeds the reanchoring candidate set.
  void note_supervision(int field_id, int kf_id) {
    auto& v = fields_.at(field_id).supervising_kfs;
    auto it = std::lower_bound(v.begin(), v.end(), kf_id);
    if (it == v.end() || *it != kf_id) v.insert(it, kf_id);
  }

  // Test hook: verifies the grid exactly mirrors field centers.
  bool grid_consistent() const {
    std::size_t indexed = 0;
    for (const auto& [key, ids] : grid_) {
      for (int id : ids) {
        if (!(center_cell(fields_[id].center()) == key)) return false;
        ++indexed;
      }
    }
    return indexed == fields_.size();
  }

  CellKey center_cell(const Vec3& c) const {
    return CellKey{cell_index(c.x() / cell_), cell_index(c.y() / cell_),
                   cell_index(c.z() / cell_)};
  }

 private:
  static std::int64_t cell_index(double v) {
    return static_cast<std::int64_t>(std::floor(v));
  }

  bool cell_has_field_center(const CellKey& shifted_cell,
                             const Vec3& shift) const {
    // The shifted cell spans an AABB overlapping at most 8 canonical cells.
    Vec3 lo = shift + Vec3(shifted_cell.x * cell_, shifted_cell.y * cell_,
                           shifted_cell.z * cell_);
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          CellKey canon{cell_index(lo.x() / cell_) + dx,
                        cell_index(lo.y() / cell_) + dy,
                        cell_index(lo.z() / cell_) + dz};
          auto it = grid_.find(canon);
          if (it == grid_.end()) continue;
          for (int id : it->second) {
            const Vec3& c = fields_[id].center();
            if (cell_index((c.x() - shift.x()) / cell_) == shifted_cell.x &&
                cell_index((c.y() - shift.y()) / cell_) == shifted_cell.y &&
                cell_index((c.z() - shift.z()) / cell_) == shifted_cell.z)
              return true;
          }
        }
    return false;
  }

  int create_field(const Vec3& center, int parent_kf) {
    NeuralField f;
    f.id = static_cast<int>(fields_.size());
    f.parent_kf = parent_kf;
    f.world_pose = make_pose(Quat::Identity(), center);
    f.params.encoding = cfg_.encoding;
    f.params.hidden_width = cfg_.hidden_width;
    Rng rng = make_stream(cfg_.seed, RngStream::kFieldInit,
                          static_cast<std::uint64_t>(f.id));
    init_field_params(f.params, rng);
    f.adam.learning_rate = cfg_.learning_rate;
    f.adam.weight_decay = cfg_.weight_decay;
    f.adam.match(f.params);
    grid_[center_cell(center)].push_back(f.id);
    grid_bbox_insert(center_cell(center));
    fields_.push_back(std::move(f));
    return fields_.back().id;
  }

  void move_in_grid(int id, const CellKey& from, const CellKey& to) {
    auto& v = grid_[from];
    v.erase(std::remove(v.begin(), v.end(), id), v.end());
    if (v.empty()) grid_.erase(from);
    grid_[to].push_back(id);
    grid_bbox_insert(to);
  }

  void grid_bbox_insert(const CellKey& k) {
    if (grid_.size() == 1 && bbox_lo_.x > bbox_hi_.x) {
      bbox_lo_ = bbox_hi_ = k;
      return;
    }
    bbox_lo_.x = std::min(bbox_lo_.x, k.x);
    bbox_lo_.y = std::min(bbox_lo_.y, k.y);
    bbox_lo_.z = std::min(bbox_lo_.z, k.z);
    bbox_hi_.x = std::max(bbox_hi_.x, k.x);
    bbox_hi_.y = std::max(bbox_hi_.y, k.y);
    bbox_hi_.z = std::max(bbox_hi_.z, k.z);
  }

  // Expanding ring walk around x's cell. `want_more(ring, margin)` is asked
  // before ring `ring` is scanned, where `margin` is the exact distance from
  // x to the boundary of the already-explored block: any unscanned field is
  // at least `margin` away, which makes early termination lossless.
  template <typename WantMore, typename Visit>
  void visit_rings(const Vec3& x, WantMore&& want_more, Visit&& visit) const {
    if (grid_.empty()) return;
    CellKey base = center_cell(x);
    for (int ring = 0;; ++ring) {
      if (ring > 0) {
        double margin = explored_margin(x, base, ring - 1);
        if (!want_more(ring, margin)) return;
        // Once the explored block covers the whole grid bbox, nothing is left.
        if (base.x - (ring - 1) <= bbox_lo_.x && base.x + (ring - 1) >= bbox_hi_.x &&
            base.y - (ring - 1) <= bbox_lo_.y && base.y + (ring - 1) >= bbox_hi_.y &&
            base.z - (ring - 1) <= bbox_lo_.z && base.z + (ring - 1) >= bbox_hi_.z)
          return;
      }
      for_ring_cells(base, ring, [&](const CellKey& key) {
        auto it = grid_.find(key);
        if (it == grid_.end()) return;
        for (int id : it->second) visit(id);
      });
    }
  }

  double explored_margin(const Vec3& x, const CellKey& base, int ring) const {
    double lo_x = (base.x - ring) * cell_, hi_x = (base.x + ring + 1) * cell_;
    double lo_y = (base.y - ring) * cell_, hi_y = (base.y + ring + 1) * cell_;
    double lo_z = (base.z - ring) * cell_, hi_z = (base.z + ring + 1) * cell_;
    double m = x.x() - lo_x;
    m = std::min(m, hi_x - x.x());
    m = std::min(m, x.y() - lo_y);
    m = std::min(m, hi_y - x.y());
    m = std::min(m, x.z() - lo_z);
    m = std::min(m, hi_z - x.z());
    return m;
  }

  template <typename Fn>
  static void for_ring_cells(const CellKey& base, int ring, Fn&& fn) {
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

  FieldSetConfig cfg_;
  double cell_;
  std::vector<NeuralField> fields_;
  std::unordered_map<CellKey, std::vector<int>, CellKeyHash> grid_;
  CellKey bbox_lo_{1, 0, 0}, bbox_hi_{0, 0, 0};  // empty until first insert
};

// ---- map checkpoint ("NGMM") -------------------------------------------------
//
// Header, then per field: id, parent_kf, pose (7 f64), field blob; then the
// grid-shift seed. A trailing training-state section (Adam moments, step
// counters, supervision records, frame cursor) makes runs resumable.

inline constexpr std::uint32_t kMapCheckpointVersion = 1;

inline void save_map_checkpoint(const FieldSet& fs, std::uint32_t next_frame,
                                std::ostream& out) {
  out.write("NGMM", 4);
  io::put_u32(out, kMapCheckpointVersion);
  io::put_f64(out, fs.radius());
  io::put_u32(out, static_cast<std::uint32_t>(fs.size()));
  for (const NeuralField& f : fs.fields()) {
    io::put_i32(out, f.id);
    io::put_i32(out, f.parent_kf);
    io::put_f64(out, f.world_pose.t.x());
    io::put_f64(out, f.world_pose.t.y());
    io::put_f64(out, f.world_pose.t.z());
    io::put_f64(out, f.world_pose.q.x());
    io::put_f64(out, f.world_pose.q.y());
    io::put_f64(out, f.world_pose.q.z());
    io::put_f64(out, f.world_pose.q.w());
    save_field_blob(f.params, out);
  }
  std::uint64_t seed = fs.seed();
  io::put_u32(out, static_cast<std::uint32_t>(seed & 0xffffffffull));
  io::put_u32(out, static_cast<std::uint32_t>(seed >> 32));

  // training-state extension
  io::put_u32(out, 1u);
  io::put_u32(out, next_frame);
  for (const NeuralField& f : fs.fields()) {
    io::put_u32(out, static_cast<std::uint32_t>(f.adam.step));
    for (float v : f.adam.m) io::put_f32(out, v);
    for (float v : f.adam.v) io::put_f32(out, v);
    io::put_u32(out, static_cast<std::uint32_t>(f.supervising_kfs.size()));
    for (int kf : f.supervising_kfs) io::put_i32(out, kf);
    io::put_u32(out, f.diverged ? 1u : 0u);
  }
}

// Returns the frame cursor stored in the training-state extension.
inline std::uint32_t load_map_checkpoint(FieldSet& fs, std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "NGMM", 4) != 0)
    throw std::runtime_error("not a map checkpoint");
  if (io::get_u32(in) != kMapCheckpointVersion)
    throw std::runtime_error("unsupported map checkpoint version");
  double radius = io::get_f64(in);
  if (std::abs(radius - fs.radius()) > 1e-12)
    throw std::runtime_error("map checkpoint radius mismatch");
  std::uint32_t count = io::get_u32(in);
  struct Loaded {
    int id, parent;
    Pose pose;
    FieldParams<float> params;
  };
  std::vector<Loaded> loaded(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Loaded& l = loaded[i];
    l.id = io::get_i32(in);
    l.parent = io::get_i32(in);
    double tx = io::get_f64(in), ty = io::get_f64(in), tz = io::get_f64(in);
    double qx = io::get_f64(in), qy = io::get_f64(in), qz = io::get_f64(in);
    double qw = io::get_f64(in);
    l.pose = make_pose(Quat(qw, qx, qy, qz), Vec3(tx, ty, tz));
    load_field_blob(l.params, in);
  }
  std::uint64_t seed_lo = io::get_u32(in);
  std::uint64_t seed_hi = io::get_u32(in);
  std::uint64_t seed = seed_lo | (seed_hi << 32);
  if (seed != fs.seed())
    throw std::runtime_error("map checkpoint seed mismatch");

  for (Loaded& l : loaded)
    fs.restore_field(l.id, l.parent, l.pose, std::move(l.params));
  std::uint32_t flags = 0;
  std::uint32_t next_frame = 0;
  flags = io::get_u32(in);
  if (flags & 1u) {
    next_frame = io::get_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
      NeuralField& f = fs.field(static_cast<int>(i));
      f.adam.step = io::get_u32(in);
      for (float& v : f.adam.m) v = io::get_f32(in);
      for (float& v : f.adam.v) v = io::get_f32(in);
      std::uint32_t nsup = io::get_u32(in);
      f.supervising_kfs.resize(nsup);
      for (std::uint32_t j = 0; j < nsup; ++j)
        f.supervising_kfs[j] = io::get_i32(in);
      f.diverged = io::get_u32(in) != 0;
    }
  }
  return next_frame;
}

}  // namespace ngm
