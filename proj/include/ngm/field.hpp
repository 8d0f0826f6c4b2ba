#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "ngm/encoding.hpp"
#include "ngm/geometry.hpp"
#include "ngm/image_io.hpp"
#include "ngm/rng.hpp"

namespace ngm {

// One neural field: hash encoding -> linear(hidden) -> ReLU -> linear(4).
// Outputs are squashed to color in [0,1]^3 (sigmoid) and a
// truncation-normalized signed distance in [-1,1] (tanh).
//
// Parameter order, also the serialization order: tables, w1, b1, w2, b2.
template <typename S>
struct FieldParams {
  EncodingConfig encoding;
  int hidden_width = 32;

  std::vector<S> tables;  // [level][entry][feature]
  std::vector<S> w1;      // hidden_width x feature_dim, row-major
  std::vector<S> b1;      // hidden_width
  std::vector<S> w2;      // 4 x hidden_width, row-major
  std::vector<S> b2;      // 4

  void allocate() {
    encoding.validate();
    tables.assign(static_cast<std::size_t>(encoding.levels) *
                      encoding.table_size * encoding.features_per_level,
                  static_cast<S>(0));
    w1.assign(static_cast<std::size_t>(hidden_width) * encoding.feature_dim(),
              static_cast<S>(0));
    b1.assign(hidden_width, static_cast<S>(0));
    w2.assign(static_cast<std::size_t>(4) * hidden_width, static_cast<S>(0));
    b2.assign(4, static_cast<S>(0));
  }

  std::size_t param_count() const {
    return tables.size() + w1.size() + b1.size() + w2.size() + b2.size();
  }

  template <typename Fn>
  void for_each_array(Fn&& fn) {
    fn(tables);
    fn(w1);
    fn(b1);
    fn(w2);
    fn(b2);
  }
  template <typename Fn>
  void for_each_array(Fn&& fn) const {
    fn(tables);
    fn(w1);
    fn(b1);
    fn(w2);
    fn(b2);
  }

  S get_flat(std::size_t i) const {
    S out{};
    flat_ref(const_cast<FieldParams&>(*this), i, [&](S& v) { out = v; });
    return out;
  }
  void set_flat(std::size_t i, S value) {
    flat_ref(*this, i, [&](S& v) { v = value; });
  }

 private:
  template <typename Fn>
  static void flat_ref(FieldParams& p, std::size_t i, Fn&& fn) {
    for (auto* arr : {&p.tables, &p.w1, &p.b1, &p.w2, &p.b2}) {
      if (i < arr->size()) {
        fn((*arr)[i]);
        return;
      }
      i -= arr->size();
    }
    throw std::out_of_range("flat parameter index");
  }
};

template <typename S>
struct FieldGrads {
  std::vector<S> tables, w1, b1, w2, b2;

  template <typename P>
  void match(const FieldParams<P>& p) {
    tables.assign(p.tables.size(), static_cast<S>(0));
    w1.assign(p.w1.size(), static_cast<S>(0));
    b1.assign(p.b1.size(), static_cast<S>(0));
    w2.assign(p.w2.size(), static_cast<S>(0));
    b2.assign(p.b2.size(), static_cast<S>(0));
  }

  void zero() {
    std::fill(tables.begin(), tables.end(), static_cast<S>(0));
    std::fill(w1.begin(), w1.end(), static_cast<S>(0));
    std::fill(b1.begin(), b1.end(), static_cast<S>(0));
    std::fill(w2.begin(), w2.end(), static_cast<S>(0));
    std::fill(b2.begin(), b2.end(), static_cast<S>(0));
  }

  S get_flat(std::size_t i) const {
    for (auto* arr : {&tables, &w1, &b1, &w2, &b2}) {
      if (i < arr->size()) return (*arr)[i];
      i -= arr->size();
    }
    throw std::out_of_range("flat gradient index");
  }

  double squared_norm() const {
    double n = 0.0;
    for (auto* arr : {&tables, &w1, &b1, &w2, &b2})
      for (S v : *arr) n += static_cast<double>(v) * static_cast<double>(v);
    return n;
  }

  void scale(S factor) {
    for (auto* arr : {&tables, &w1, &b1, &w2, &b2})
      for (S& v : *arr) v *= factor;
  }
};

// Hash tables start near zero, head layers Kaiming-uniform, biases zero.
template <typename S>
inline void init_field_params(FieldParams<S>& p, Rng& rng) {
  p.allocate();
  for (S& v : p.tables) v = static_cast<S>(rng.uniform(-1e-4, 1e-4));
  double bound1 = std::sqrt(6.0 / p.encoding.feature_dim());
  for (S& v : p.w1) v = static_cast<S>(rng.uniform(-bound1, bound1));
  double bound2 = std::sqrt(6.0 / p.hidden_width);
  for (S& v : p.w2) v = static_cast<S>(rng.uniform(-bound2, bound2));
}

template <typename S>
inline S sigmoid(S x) {
  return static_cast<S>(1) / (static_cast<S>(1) + std::exp(-x));
}

// Intermediate activations of a batch forward pass, kept for the backward
// pass. Reused across iterations to avoid reallocation.
template <typename S>
struct FieldBatchCache {
  int n = 0;
  std::vector<S> feat;    // n x feature_dim
  std::vector<S> hidden;  // n x hidden_width, post-ReLU
  std::vector<S> color;   // n x 3, post-sigmoid
  std::vector<S> sdf;     // n, post-tanh

  void resize(int count, const FieldParams<S>& p) {
    n = count;
    feat.resize(static_cast<std::size_t>(n) * p.encoding.feature_dim());
    hidden.resize(static_cast<std::size_t>(n) * p.hidden_width);
    color.resize(static_cast<std::size_t>(n) * 3);
    sdf.resize(n);
  }
};

template <typename S>
inline void field_forward_batch(const FieldParams<S>& p, const Vec3* pts,
                                int n, FieldBatchCache<S>& cache) {
  cache.resize(n, p);
  const int in_dim = p.encoding.feature_dim();
  const int hw = p.hidden_width;
  for (int i = 0; i < n; ++i) {
    S* feat = cache.feat.data() + static_cast<std::size_t>(i) * in_dim;
    encode(p.encoding, p.tables, pts[i], feat);
    S* hid = cache.hidden.data() + static_cast<std::size_t>(i) * hw;
    for (int j = 0; j < hw; ++j) {
      const S* row = p.w1.data() + static_cast<std::size_t>(j) * in_dim;
      S acc = p.b1[j];
      for (int k = 0; k < in_dim; ++k) acc += row[k] * feat[k];
      hid[j] = acc > static_cast<S>(0) ? acc : static_cast<S>(0);
    }
    S out[4];
    for (int o = 0; o < 4; ++o) {
      const S* row = p.w2.data() + static_cast<std::size_t>(o) * hw;
      S acc = p.b2[o];
      for (int j = 0; j < hw; ++j) acc += row[j] * hid[j];
      out[o] = acc;
    }
    for (int c = 0; c < 3; ++c)
      cache.color[static_cast<std::size_t>(i) * 3 + c] = sigmoid(out[c]);
    cache.sdf[i] = std::tanh(out[3]);
  }
}

template <typename S>
inline void field_forward(const FieldParams<S>& p, const Vec3& x_local,
                          Vec3f& color, float& sdf) {
  FieldBatchCache<S> cache;
  field_forward_batch(p, &x_local, 1, cache);
  color = Vec3f(static_cast<float>(cache.color[0]),
                static_cast<float>(cache.color[1]),
                static_cast<float>(cache.color[2]));
  sdf = static_cast<float>(cache.sdf[0]);
}

// Reverse-mode gradients for the batch, accumulated into `grads`.
// `dcolor` (n x 3) and `dsdf` (n) are gradients w.r.t. the squashed outputs.
template <typename S>
inline void field_backward_batch(const FieldParams<S>& p, const Vec3* pts,
                                 const FieldBatchCache<S>& cache,
                                 const S* dcolor, const S* dsdf,
                                 FieldGrads<S>& grads) {
  const int in_dim = p.encoding.feature_dim();
  const int hw = p.hidden_width;
  std::vector<S> dout(4), dhid(hw), dfeat(in_dim);
  for (int i = 0; i < cache.n; ++i) {
    const S* feat = cache.feat.data() + static_cast<std::size_t>(i) * in_dim;
    const S* hid = cache.hidden.data() + static_cast<std::size_t>(i) * hw;

    // through the output squashing
    for (int c = 0; c < 3; ++c) {
      S y = cache.color[static_cast<std::size_t>(i) * 3 + c];
      dout[c] = dcolor[static_cast<std::size_t>(i) * 3 + c] * y *
                (static_cast<S>(1) - y);
    }
    {
      S y = cache.sdf[i];
      dout[3] = dsdf[i] * (static_cast<S>(1) - y * y);
    }

    // output layer
    std::fill(dhid.begin(), dhid.end(), static_cast<S>(0));
    for (int o = 0; o < 4; ++o) {
      S g = dout[o];
      if (g == static_cast<S>(0)) continue;
      S* wrow = grads.w2.data() + static_cast<std::size_t>(o) * hw;
      const S* row = p.w2.data() + static_cast<std::size_t>(o) * hw;
      for (int j = 0; j < hw; ++j) {
        wrow[j] += g * hid[j];
        dhid[j] += g * row[j];
      }
      grads.b2[o] += g;
    }

    // hidden layer (ReLU mask from the post-activation value)
    std::fill(dfeat.begin(), dfeat.end(), static_cast<S>(0));
    for (int j = 0; j < hw; ++j) {
      if (!(hid[j] > static_cast<S>(0))) continue;
      S g = dhid[j];
      if (g == static_cast<S>(0)) continue;
      S* wrow = grads.w1.data() + static_cast<std::size_t>(j) * in_dim;
      const S* row = p.w1.data() + static_cast<std::size_t>(j) * in_dim;
      for (int k = 0; k < in_dim; ++k) {
        wrow[k] += g * feat[k];
        dfeat[k] += g * row[k];
      }
      grads.b1[j] += g;
    }

    encode_backward(p.encoding, pts[i], dfeat.data(), grads.tables);
  }
}

// ---- Adam with decoupled weight decay ---------------------------------------

template <typename S>
struct AdamState {
  std::vector<S> m, v;  // first/second moments over the flat parameter vector
  std::int64_t step = 0;
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  template <typename P>
  void match(const FieldParams<P>& p) {
    m.assign(p.param_count(), static_cast<S>(0));
    v.assign(p.param_count(), static_cast<S>(0));
    step = 0;
  }
};

template <typename S>
inline void adam_step(FieldParams<S>& params, const FieldGrads<S>& grads,
                      AdamState<S>& state) {
  state.step += 1;
  const S b1 = static_cast<S>(state.beta1);
  const S b2 = static_cast<S>(state.beta2);
  const S lr = static_cast<S>(state.learning_rate);
  const S wd = static_cast<S>(state.weight_decay);
  const S eps = static_cast<S>(state.eps);
  const S corr1 =
      static_cast<S>(1.0 / (1.0 - std::pow(state.beta1, double(state.step))));
  const S corr2 =
      static_cast<S>(1.0 / (1.0 - std::pow(state.beta2, double(state.step))));

  std::size_t offset = 0;
  const std::vector<S>* grad_arrays[] = {&grads.tables, &grads.w1, &grads.b1,
                                         &grads.w2, &grads.b2};
  int gi = 0;
  params.for_each_array([&](std::vector<S>& arr) {
    const std::vector<S>& g = *grad_arrays[gi++];
    S* mp = state.m.data() + offset;
    S* vp = state.v.data() + offset;
    const S one = static_cast<S>(1);
    for (std::size_t i = 0; i < arr.size(); ++i) {
      S gr = g[i];
      mp[i] = b1 * mp[i] + (one - b1) * gr;
      vp[i] = b2 * vp[i] + (one - b2) * gr * gr;
      S mhat = mp[i] * corr1;
      S vhat = vp[i] * corr2;
      arr[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * arr[i]);
    }
    offset += arr.size();
  });
}

// ---- checkpoint blob ("NGMF") -----------------------------------------------

inline constexpr std::uint32_t kFieldBlobVersion = 1;

template <typename S>
inline void save_field_blob(const FieldParams<S>& p, std::ostream& out) {
  out.write("NGMF", 4);
  io::put_u32(out, kFieldBlobVersion);
  io::put_u32(out, p.encoding.table_size);
  io::put_u32(out, static_cast<std::uint32_t>(p.encoding.levels));
  io::put_u32(out, static_cast<std::uint32_t>(p.encoding.features_per_level));
  io::put_f64(out, p.encoding.coarsest_resolution);
  io::put_f64(out, p.encoding.finest_resolution);
  io::put_u32(out, static_cast<std::uint32_t>(p.hidden_width));
  p.for_each_array([&](const std::vector<S>& arr) {
    for (S v : arr) io::put_f32(out, static_cast<float>(v));
  });
}

template <typename S>
inline void load_field_blob(FieldParams<S>& p, std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "NGMF", 4) != 0)
    throw std::runtime_error("not a field checkpoint blob");
  std::uint32_t version = io::get_u32(in);
  if (version != kFieldBlobVersion)
    throw std::runtime_error("unsupported field blob version");
  p.encoding.table_size = io::get_u32(in);
  p.encoding.levels = static_cast<int>(io::get_u32(in));
  p.encoding.features_per_level = static_cast<int>(io::get_u32(in));
  p.encoding.coarsest_resolution = io::get_f64(in);
  p.encoding.finest_resolution = io::get_f64(in);
  p.hidden_width = static_cast<int>(io::get_u32(in));
  p.allocate();
  p.for_each_array([&](std::vector<S>& arr) {
    for (S& v : arr) v = static_cast<S>(io::get_f32(in));
  });
}

}  // namespace ngm
