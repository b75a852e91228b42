#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "acg/model.hpp"

namespace acg {

// Weight file layout: magic "ACGW", u32 version, config block, then every
// tensor as little-endian f32 in declaration order (per layer: wq wk wv wo
// w_gate w_up w_down attn_norm ffn_norm; then token_embedding, final_norm,
// output_head). f32 is canonical on disk regardless of the in-memory scalar.

inline constexpr char kWeightsMagic[4] = {'A', 'C', 'G', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("weights: truncated file");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
  const std::uint32_t bits = read_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

template <typename T>
void write_tensor(std::ostream& os, const std::vector<T>& data) {
  for (const T v : data) write_f32(os, float(v));
}

template <typename T>
void read_tensor(std::istream& is, std::vector<T>& data) {
  for (T& v : data) v = T(read_f32(is));
}

}  // namespace detail

template <typename T>
void save_weights(const ModelWeights<T>& w, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("weights: cannot open for writing: " + path);
  os.write(kWeightsMagic, 4);
  detail::write_u32(os, kWeightsVersion);
  detail::write_u32(os, std::uint32_t(w.config.n_layers));
  detail::write_u32(os, std::uint32_t(w.config.n_heads));
  detail::write_u32(os, std::uint32_t(w.config.d_model));
  detail::write_u32(os, std::uint32_t(w.config.d_head));
  detail::write_u32(os, std::uint32_t(w.config.d_ffn));
  detail::write_u32(os, std::uint32_t(w.config.vocab_size));
  os.put(w.config.rope_enabled ? 1 : 0);
  detail::write_f32(os, float(w.config.rope_theta));
  for (const LayerWeights<T>& lw : w.layers) {
    detail::write_tensor(os, lw.wq.data);
    detail::write_tensor(os, lw.wk.data);
    detail::write_tensor(os, lw.wv.data);
    detail::write_tensor(os, lw.wo.data);
    detail::write_tensor(os, lw.w_gate.data);
    detail::write_tensor(os, lw.w_up.data);
    detail::write_tensor(os, lw.w_down.data);
    detail::write_tensor(os, lw.attn_norm);
    detail::write_tensor(os, lw.ffn_norm);
  }
  detail::write_tensor(os, w.token_embedding.data);
  detail::write_tensor(os, w.final_norm);
  detail::write_tensor(os, w.output_head.data);
  if (!os) throw std::runtime_error("weights: write failed: " + path);
}

template <typename T>
ModelWeights<T> load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("weights: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kWeightsMagic, 4) != 0)
    throw std::runtime_error("weights: bad magic");
  const std::uint32_t version = detail::read_u32(is);
  if (version != kWeightsVersion)
    throw std::runtime_error("weights: unsupported version " + std::to_string(version));

  ModelConfig c;
  c.n_layers = detail::read_u32(is);
  c.n_heads = detail::read_u32(is);
  c.d_model = detail::read_u32(is);
  c.d_head = detail::read_u32(is);
  c.d_ffn = detail::read_u32(is);
  c.vocab_size = detail::read_u32(is);
  const int rope = is.get();
  if (rope == std::char_traits<char>::eof()) throw std::runtime_error("weights: truncated file");
  c.rope_enabled = rope != 0;
  c.rope_theta = double(detail::read_f32(is));
  c.validate();

  ModelWeights<T> w;
  w.config = c;
  const std::size_t d = c.d_model;
  w.layers.resize(c.n_layers);
  for (LayerWeights<T>& lw : w.layers) {
    lw.wq = Matrix<T>(d, d);
    lw.wk = Matrix<T>(d, d);
    lw.wv = Matrix<T>(d, d);
    lw.wo = Matrix<T>(d, d);
    lw.w_gate = Matrix<T>(d, c.d_ffn);
    lw.w_up = Matrix<T>(d, c.d_ffn);
    lw.w_down = Matrix<T>(c.d_ffn, d);
    lw.attn_norm.resize(d);
    lw.ffn_norm.resize(d);
    detail::read_tensor(is, lw.wq.data);
    detail::read_tensor(is, lw.wk.data);
    detail::read_tensor(is, lw.wv.data);
    detail::read_tensor(is, lw.wo.data);
    detail::read_tensor(is, lw.w_gate.data);
    detail::read_tensor(is, lw.w_up.data);
    detail::read_tensor(is, lw.w_down.data);
    detail::read_tensor(is, lw.attn_norm);
    detail::read_tensor(is, lw.ffn_norm);
  }
  w.token_embedding = Matrix<T>(c.vocab_size, d);
  w.final_norm.resize(d);
  w.output_head = Matrix<T>(d, c.vocab_size);
  detail::read_tensor(is, w.token_embedding.data);
  detail::read_tensor(is, w.final_norm);
  detail::read_tensor(is, w.output_head.data);
  if (!is) throw std::runtime_error("weights: truncated file");

  ensure_finite(w.token_embedding, "weights");
  ensure_finite(w.output_head, "weights");
  for (const LayerWeights<T>& lw : w.layers) {
    ensure_finite(lw.wq, "weights");
    ensure_finite(lw.wk, "weights");
    ensure_finite(lw.wv, "weights");
    ensure_finite(lw.wo, "weights");
    ensure_finite(lw.w_gate, "weights");
    ensure_finite(lw.w_up, "weights");
    ensure_finite(lw.w_down, "weights");
  }
  return w;
}

}  // namespace acg
