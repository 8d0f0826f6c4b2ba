#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ngm/geometry.hpp"

namespace ngm {

// Multi-resolution hash encoding. Level resolutions are geometrically spaced
// from coarsest_resolution down to finest_resolution; every level owns a
// table of table_size entries with features_per_level learnable scalars each.
struct EncodingConfig {
  std::uint32_t table_size = 1u << 12;
  int levels = 16;
  int features_per_level = 16;
  double coarsest_resolution = 0.1;
  double finest_resolution = 0.0001;

  int feature_dim() const { return levels * features_per_level; }

  double level_resolution(int level) const {
    if (levels == 1) return coarsest_resolution;
    double ratio = finest_resolution / coarsest_resolution;
    return coarsest_resolution *
           std::pow(ratio, static_cast<double>(level) / (levels - 1));
  }

  void validate() const {
    if (table_size == 0 || (table_size & (table_size - 1)) != 0)
      throw std::runtime_error("encoding: table_size must be a power of two");
    if (levels <= 0 || features_per_level <= 0)
      throw std::runtime_error("encoding: levels/features must be positive");
    if (!(finest_resolution < coarsest_resolution))
      throw std::runtime_error("encoding: finest resolution must be below coarsest");
  }

  bool operator==(const EncodingConfig&) const = default;
};

// Spatial hash of a lattice vertex. Fixed published primes (Teschner et al.
// for the coordinates, Knuth's multiplicative constant for the level) keep
// checkpoints portable across platforms.
inline std::uint32_t lattice_hash(std::int64_t ix, std::int64_t iy,
                                  std::int64_t iz, int level,
                                  std::uint32_t table_mask) {
  std::uint32_t h = static_cast<std::uint32_t>(ix) * 73856093u ^
                    static_cast<std::uint32_t>(iy) * 19349663u ^
                    static_cast<std::uint32_t>(iz) * 83492791u ^
                    static_cast<std::uint32_t>(level) * 2654435761u;
  return h & table_mask;
}

// Cell coordinates + trilinear corner weights of one point at one level.
// Weights are produced in the scalar type of the table entries so the float
// training path and the double oracle path share this code exactly.
template <typename S>
struct LatticeCoords {
  std::int64_t ix, iy, iz;
  S wx, wy, wz;  // fractional position inside the cell, in [0,1)
};

template <typename S>
inline LatticeCoords<S> lattice_coords(const EncodingConfig& cfg, int level,
                                       const Vec3& x_local) {
  double inv = 1.0 / cfg.level_resolution(level);
  double fx = x_local.x() * inv;
  double fy = x_local.y() * inv;
  double fz = x_local.z() * inv;
  LatticeCoords<S> c;
  c.ix = static_cast<std::int64_t>(std::floor(fx));
  c.iy = static_cast<std::int64_t>(std::floor(fy));
  c.iz = static_cast<std::int64_t>(std::floor(fz));
  c.wx = static_cast<S>(fx - static_cast<double>(c.ix));
  c.wy = static_cast<S>(fy - static_cast<double>(c.iy));
  c.wz = static_cast<S>(fz - static_cast<double>(c.iz));
  return c;
}

// Visits the 8 cell corners with their interpolation weights:
// fn(table_entry_index, weight).
template <typename S, typename Fn>
inline void for_each_corner(const LatticeCoords<S>& c, int level,
                            std::uint32_t table_mask, Fn&& fn) {
  const S one = static_cast<S>(1);
  for (int dz = 0; dz < 2; ++dz) {
    S wz = dz ? c.wz : one - c.wz;
    for (int dy = 0; dy < 2; ++dy) {
      S wyz = (dy ? c.wy : one - c.wy) * wz;
      for (int dx = 0; dx < 2; ++dx) {
        S w = (dx ? c.wx : one - c.wx) * wyz;
        std::uint32_t h =
            lattice_hash(c.ix + dx, c.iy + dy, c.iz + dz, level, table_mask);
        fn(h, w);
      }
    }
  }
}

// out must hold feature_dim() scalars. tables layout: [level][entry][feature].
template <typename S>
inline void encode(const EncodingConfig& cfg, const std::vector<S>& tables,
                   const Vec3& x_local, S* out) {
  const int fpl = cfg.features_per_level;
  const std::uint32_t mask = cfg.table_size - 1;
  const std::size_t level_stride =
      static_cast<std::size_t>(cfg.table_size) * fpl;
  for (int level = 0; level < cfg.levels; ++level) {
    S* dst = out + static_cast<std::size_t>(level) * fpl;
    for (int f = 0; f < fpl; ++f) dst[f] = static_cast<S>(0);
    auto coords = lattice_coords<S>(cfg, level, x_local);
    const S* level_table = tables.data() + level * level_stride;
    for_each_corner(coords, level, mask, [&](std::uint32_t h, S w) {
      const S* entry = level_table + static_cast<std::size_t>(h) * fpl;
      for (int f = 0; f < fpl; ++f) dst[f] += w * entry[f];
    });
  }
}

// Accumulates d(loss)/d(tables) given d(loss)/d(features) for one point.
template <typename S>
inline void encode_backward(const EncodingConfig& cfg, const Vec3& x_local,
                            const S* dfeat, std::vector<S>& table_grads) {
  const int fpl = cfg.features_per_level;
  const std::uint32_t mask = cfg.table_size - 1;
  const std::size_t level_stride =
      static_cast<std::size_t>(cfg.table_size) * fpl;
  for (int level = 0; level < cfg.levels; ++level) {
    const S* src = dfeat + static_cast<std::size_t>(level) * fpl;
    auto coords = lattice_coords<S>(cfg, level, x_local);
    S* level_grads = table_grads.data() + level * level_stride;
    for_each_corner(coords, level, mask, [&](std::uint32_t h, S w) {
      S* entry = level_grads + static_cast<std::size_t>(h) * fpl;
      for (int f = 0; f < fpl; ++f) entry[f] += w * src[f];
    });
  }
}

}  // namespace ngm
