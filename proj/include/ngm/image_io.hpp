#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "ngm/geometry.hpp"

namespace ngm {

namespace io {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("unexpected end of binary stream");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline float get_f32(std::istream& in) {
  std::uint32_t bits = get_u32(in);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u32(out, static_cast<std::uint32_t>(bits & 0xffffffffull));
  put_u32(out, static_cast<std::uint32_t>(bits >> 32));
}

inline double get_f64(std::istream& in) {
  std::uint64_t lo = get_u32(in);
  std::uint64_t hi = get_u32(in);
  std::uint64_t bits = lo | (hi << 32);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline void put_i32(std::ostream& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}

inline std::int32_t get_i32(std::istream& in) {
  return static_cast<std::int32_t>(get_u32(in));
}

}  // namespace io

// ---- PPM (binary P6, maxval 255) -------------------------------------------

inline void save_ppm(const RgbdFrame& frame, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write ppm: " + path);
  out << "P6\n" << frame.width << " " << frame.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(frame.width) * 3);
  for (int v = 0; v < frame.height; ++v) {
    for (int u = 0; u < frame.width; ++u) {
      for (int c = 0; c < 3; ++c) {
        float x = frame.color[(static_cast<std::size_t>(v) * frame.width + u) * 3 + c];
        x = x < 0.0f ? 0.0f : (x > 1.0f ? 1.0f : x);
        row[static_cast<std::size_t>(u) * 3 + c] =
            static_cast<unsigned char>(std::lround(x * 255.0f));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

// Loads color into `frame` (depth untouched unless dimensions change).
inline void load_ppm(RgbdFrame& frame, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read ppm: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error("not a P6 ppm: " + path);
  int w, h, maxval;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("unsupported ppm header: " + path);
  in.get();  // single whitespace after maxval
  if (frame.width != w || frame.height != h) frame.resize(w, h);
  std::vector<unsigned char> data(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(data.data()), data.size());
  if (!in) throw std::runtime_error("truncated ppm: " + path);
  for (std::size_t i = 0; i < data.size(); ++i)
    frame.color[i] = data[i] / 255.0f;
}

// ---- depth raster ("NGMD": u32 width, u32 height, row-major LE f32 meters) --

inline void save_depth(const RgbdFrame& frame, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write depth: " + path);
  out.write("NGMD", 4);
  io::put_u32(out, static_cast<std::uint32_t>(frame.width));
  io::put_u32(out, static_cast<std::uint32_t>(frame.height));
  for (float d : frame.depth) io::put_f32(out, d);
}

inline void load_depth(RgbdFrame& frame, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read depth: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "NGMD", 4) != 0)
    throw std::runtime_error("not an NGMD depth raster: " + path);
  int w = static_cast<int>(io::get_u32(in));
  int h = static_cast<int>(io::get_u32(in));
  if (w <= 0 || h <= 0) throw std::runtime_error("bad depth header: " + path);
  if (frame.width != w || frame.height != h) frame.resize(w, h);
  for (float& d : frame.depth) d = io::get_f32(in);
}

// ---- intrinsics ("fx fy cx cy width height") --------------------------------

inline void save_intrinsics(const CameraIntrinsics& intr,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write intrinsics: " + path);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g %d %d\n", intr.fx,
                intr.fy, intr.cx, intr.cy, intr.width, intr.height);
  out << buf;
}

inline CameraIntrinsics load_intrinsics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read intrinsics: " + path);
  CameraIntrinsics intr;
  if (!(in >> intr.fx >> intr.fy >> intr.cx >> intr.cy >> intr.width >>
        intr.height))
    throw std::runtime_error("malformed intrinsics: " + path);
  if (!intr.valid()) throw std::runtime_error("invalid intrinsics: " + path);
  return intr;
}

// ---- sequence directory ------------------------------------------------------
//
//   DIR/intrinsics.txt
//   DIR/color/%06d.ppm
//   DIR/depth/%06d.raw

inline std::string frame_name(int index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d%s", index, ext);
  return buf;
}

struct SequenceWriter {
  std::filesystem::path dir;

  explicit SequenceWriter(const std::filesystem::path& d,
                          const CameraIntrinsics& intr)
      : dir(d) {
    std::filesystem::create_directories(dir / "color");
    std::filesystem::create_directories(dir / "depth");
    save_intrinsics(intr, (dir / "intrinsics.txt").string());
  }

  void write_frame(int index, const RgbdFrame& frame) const {
    save_ppm(frame, (dir / "color" / frame_name(index, ".ppm")).string());
    save_depth(frame, (dir / "depth" / frame_name(index, ".raw")).string());
  }
};

struct SequenceReader {
  std::filesystem::path dir;
  CameraIntrinsics intrinsics;
  int frame_count = 0;

  explicit SequenceReader(const std::filesystem::path& d) : dir(d) {
    intrinsics = load_intrinsics((dir / "intrinsics.txt").string());
    while (std::filesystem::exists(dir / "depth" / frame_name(frame_count, ".raw")))
      ++frame_count;
    if (frame_count == 0)
      throw std::runtime_error("empty sequence directory: " + dir.string());
  }

  RgbdFrame load_frame(int index) const {
    if (index < 0 || index >= frame_count)
      throw std::runtime_error("frame index out of range");
    RgbdFrame frame;
    load_ppm(frame, (dir / "color" / frame_name(index, ".ppm")).string());
    load_depth(frame, (dir / "depth" / frame_name(index, ".raw")).string());
    return frame;
  }
};

// Pinned pixel data for keyframes, keyed by frame index. The mapping loop
// inserts a frame when its keyframe appears; lookups hand out stable
// references that stay valid across later insertions.
class FrameStore {
 public:
  void pin(int frame_index, RgbdFrame frame) {
    frames_.emplace(frame_index, std::move(frame));
  }

  bool contains(int frame_index) const { return frames_.count(frame_index) > 0; }

  const RgbdFrame& at(int frame_index) const {
    auto it = frames_.find(frame_index);
    if (it == frames_.end())
      throw std::runtime_error("frame not pinned: " +
                               std::to_string(frame_index));
    return it->second;
  }

 private:
  std::unordered_map<int, RgbdFrame> frames_;
};

}  // namespace ngm
