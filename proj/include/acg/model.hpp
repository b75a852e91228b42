#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "acg/numerics.hpp"
#include "acg/rng.hpp"

namespace acg {

inline constexpr double kRmsNormEps = 1e-5;

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_head = 16;
  std::size_t d_ffn = 176;
  std::size_t vocab_size = 256;
  bool rope_enabled = true;
  double rope_theta = 10000.0;

  void validate() const {
    if (n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
    if (vocab_size < 2) throw std::invalid_argument("config: vocab_size must be >= 2");
    if (n_heads == 0 || d_head == 0) throw std::invalid_argument("config: zero head shape");
    if (d_model != n_heads * d_head)
      throw std::invalid_argument("config: d_model must equal n_heads * d_head");
    if (d_ffn == 0) throw std::invalid_argument("config: d_ffn must be >= 1");
    if (rope_theta <= 0.0) throw std::invalid_argument("config: rope_theta must be > 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Named configs: "desk" (the default 8-layer test model), "desk-norope",
// "single-layer", "single-layer-norope".
ModelConfig config_preset(const std::string& name);
bool is_config_preset(const std::string& name);

template <typename T>
struct LayerWeights {
  Matrix<T> wq, wk, wv, wo;        // d_model x d_model
  Matrix<T> w_gate, w_up;          // d_model x d_ffn
  Matrix<T> w_down;                // d_ffn x d_model
  std::vector<T> attn_norm, ffn_norm;
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  std::vector<LayerWeights<T>> layers;
  Matrix<T> token_embedding;       // vocab x d_model
  std::vector<T> final_norm;
  Matrix<T> output_head;           // d_model x vocab
};

namespace detail {
template <typename T>
void fill_gaussian(GaussianRng& g, double stddev, std::vector<T>& out) {
  // Values are drawn in double and rounded through float so f32 and f64
  // instantiations share bit-identical underlying weights.
  for (T& v : out) v = T(float(g.next() * stddev));
}
}  // namespace detail

template <typename T>
ModelWeights<T> init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelWeights<T> w;
  w.config = config;
  GaussianRng g(seed);
  const double proj_std = 0.02 / std::sqrt(double(config.n_layers));
  const std::size_t d = config.d_model;

  w.layers.resize(config.n_layers);
  for (LayerWeights<T>& lw : w.layers) {
    lw.wq = Matrix<T>(d, d);
    lw.wk = Matrix<T>(d, d);
    lw.wv = Matrix<T>(d, d);
    lw.wo = Matrix<T>(d, d);
    lw.w_gate = Matrix<T>(d, config.d_ffn);
    lw.w_up = Matrix<T>(d, config.d_ffn);
    lw.w_down = Matrix<T>(config.d_ffn, d);
    detail::fill_gaussian(g, proj_std, lw.wq.data);
    detail::fill_gaussian(g, proj_std, lw.wk.data);
    detail::fill_gaussian(g, proj_std, lw.wv.data);
    detail::fill_gaussian(g, proj_std, lw.wo.data);
    detail::fill_gaussian(g, proj_std, lw.w_gate.data);
    detail::fill_gaussian(g, proj_std, lw.w_up.data);
    detail::fill_gaussian(g, proj_std, lw.w_down.data);
    lw.attn_norm.assign(d, T(1));
    lw.ffn_norm.assign(d, T(1));
  }
  w.token_embedding = Matrix<T>(config.vocab_size, d);
  detail::fill_gaussian(g, 0.02, w.token_embedding.data);
  w.final_norm.assign(d, T(1));
  w.output_head = Matrix<T>(d, config.vocab_size);
  detail::fill_gaussian(g, 0.02, w.output_head.data);
  return w;
}

// Segment boundaries of one decode-time sequence, in the fixed order
// [system | visual | query | response].
struct ContextLayout {
  std::size_t n_system = 0;
  std::size_t n_visual = 0;
  std::size_t n_query = 0;
  std::size_t n_response = 0;

  std::size_t n() const { return n_system + n_visual + n_query + n_response; }
  bool is_visual(std::size_t j) const { return j >= n_system && j < n_system + n_visual; }
  // The guided query: the last position of the live sequence.
  std::size_t guided_index() const { return n() - 1; }
};

template <typename T>
struct MultimodalInput {
  std::vector<int> system_ids;
  Matrix<T> visual_embeddings;  // n_visual x d_model, already in embedding space
  std::vector<int> query_ids;
};

template <typename T>
void embed_ids(const std::vector<int>& ids, const ModelWeights<T>& w, Matrix<T>& out) {
  for (const int id : ids) {
    if (id < 0 || std::size_t(id) >= w.config.vocab_size)
      throw std::invalid_argument("embed: token id out of range");
    out.append_row(w.token_embedding.row(std::size_t(id)));
  }
}

template <typename T>
std::vector<T> embed_id(int id, const ModelWeights<T>& w) {
  if (id < 0 || std::size_t(id) >= w.config.vocab_size)
    throw std::invalid_argument("embed: token id out of range");
  const auto r = w.token_embedding.row(std::size_t(id));
  return {r.begin(), r.end()};
}

// Builds the full multimodal context: embedded system tokens, the visual
// rows verbatim, embedded query tokens, then embedded generated tokens.
template <typename T>
std::pair<Matrix<T>, ContextLayout> assemble_context(const MultimodalInput<T>& input,
                                                     const std::vector<int>& generated,
                                                     const ModelWeights<T>& w) {
  const std::size_t d = w.config.d_model;
  if (input.visual_embeddings.rows > 0 && input.visual_embeddings.cols != d)
    throw std::invalid_argument("assemble_context: visual embedding width != d_model");
  ensure_finite(input.visual_embeddings, "visual embeddings");

  Matrix<T> seq(0, d);
  embed_ids(input.system_ids, w, seq);
  for (std::size_t i = 0; i < input.visual_embeddings.rows; ++i)
    seq.append_row(input.visual_embeddings.row(i));
  embed_ids(input.query_ids, w, seq);
  embed_ids(generated, w, seq);

  ContextLayout layout;
  layout.n_system = input.system_ids.size();
  layout.n_visual = input.visual_embeddings.rows;
  layout.n_query = input.query_ids.size();
  layout.n_response = generated.size();
  if (layout.n() == 0) throw std::invalid_argument("assemble_context: empty context");
  return {std::move(seq), layout};
}

}  // namespace acg
