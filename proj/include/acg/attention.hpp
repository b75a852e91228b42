#pragma once

#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "acg/model.hpp"
#include "acg/numerics.hpp"

namespace acg {

// Attention-space contrastive guidance settings. gamma scales the
// correction, epsilon guards the normalization of the text-only direction,
// target_layers (1-based) selects where guidance runs.
struct GuidanceConfig {
  double gamma = 0.0;
  double epsilon = 1e-6;
  std::set<int> target_layers;
  bool orthogonalize = true;
  bool per_head = true;

  bool targets(int layer_1based) const { return target_layers.contains(layer_1based); }

  // Config-level validation (CLI and presets). The block itself accepts any
  // finite gamma so algebraic oracles can probe negative values.
  void validate(std::size_t n_layers) const {
    if (!(gamma >= 0.0)) throw std::invalid_argument("guidance: gamma must be >= 0");
    if (!(epsilon > 0.0)) throw std::invalid_argument("guidance: epsilon must be > 0");
    for (const int l : target_layers)
      if (l < 1 || std::size_t(l) > n_layers)
        throw std::invalid_argument("guidance: target layer out of range");
  }
};

// Per-head record of the guided query row at one layer.
template <typename T>
struct HeadTrace {
  std::vector<T> a_cond;      // attention row over all visible keys
  std::vector<T> a_uncond;    // same row with visual keys masked out
  std::vector<T> o_cond;
  std::vector<T> o_uncond;
  std::vector<T> delta;       // o_cond - o_uncond
  std::vector<T> u;           // guarded text-only direction
  std::vector<T> delta_perp;  // delta with its u-component removed (empty if no ortho)
  std::vector<T> o_final;
  T visual_mass = T(0);       // sum of a_cond over visual keys
};

template <typename T>
struct AttentionTrace {
  int layer = 0;  // 1-based
  std::size_t n_visual = 0;
  std::vector<HeadTrace<T>> heads;
  // Correction record on the concatenated head outputs (per_head = false).
  std::optional<HeadTrace<T>> concat;
};

// ---------------------------------------------------------------------------
// Row-level attention ops.

template <typename T>
std::vector<T> attention_scores(std::span<const T> q, const StridedRows<T>& keys,
                                std::size_t d_k) {
  if (q.size() != d_k || keys.width < d_k)
    throw std::invalid_argument("attention_scores: dimension mismatch");
  const T inv_sqrt = T(1) / std::sqrt(T(d_k));
  std::vector<T> s(keys.count);
  for (std::size_t j = 0; j < keys.count; ++j) {
    const T* k = keys.row(j);
    T acc = T(0);
    for (std::size_t i = 0; i < d_k; ++i) acc += q[i] * k[i];
    s[j] = acc * inv_sqrt;
  }
  counters::add_macs(std::uint64_t(keys.count) * d_k);
  return s;
}

template <typename T>
std::vector<T> attention_scores(std::span<const T> q, const Matrix<T>& keys, std::size_t d_k) {
  if (keys.cols != d_k) throw std::invalid_argument("attention_scores: dimension mismatch");
  return attention_scores(q, strided_rows(keys), d_k);
}

template <typename T>
struct AttentionRow {
  std::vector<T> weights;  // probability row
  std::vector<T> output;   // weights . values
};

namespace detail {
template <typename T>
std::vector<T> weighted_value_sum(std::span<const T> a, const StridedRows<T>& values,
                                  std::size_t d_v) {
  std::vector<T> o(d_v, T(0));
  for (std::size_t j = 0; j < a.size(); ++j) {
    const T aj = a[j];
    const T* v = values.row(j);
    for (std::size_t i = 0; i < d_v; ++i) o[i] += aj * v[i];
  }
  counters::add_macs(std::uint64_t(a.size()) * d_v);
  return o;
}
}  // namespace detail

template <typename T>
AttentionRow<T> conditional_output(std::span<const T> scores, const StridedRows<T>& values,
                                   std::size_t d_v) {
  if (scores.size() != values.count)
    throw std::invalid_argument("conditional_output: length mismatch");
  AttentionRow<T> r;
  r.weights = softmax_row(scores);
  r.output = detail::weighted_value_sum<T>(r.weights, values, d_v);
  return r;
}

template <typename T>
AttentionRow<T> conditional_output(std::span<const T> scores, const Matrix<T>& values) {
  return conditional_output(scores, strided_rows(values), values.cols);
}

// Additive visual-key mask for the first n_keys positions of a layout.
template <typename T>
RowMask<T> visual_row_mask(const ContextLayout& layout, std::size_t n_keys) {
  RowMask<T> m = RowMask<T>::none(n_keys);
  for (std::size_t j = 0; j < n_keys; ++j)
    if (layout.is_visual(j)) m.mask_at(j);
  return m;
}

// Text-only surrogate: same scores, visual keys masked, so the attention
// mass that would hit visual tokens is redistributed over text keys.
template <typename T>
AttentionRow<T> masked_unconditional_output(std::span<const T> scores,
                                            const StridedRows<T>& values,
                                            const ContextLayout& layout, std::size_t d_v) {
  if (scores.size() != values.count)
    throw std::invalid_argument("masked_unconditional_output: length mismatch");
  const RowMask<T> mask = visual_row_mask<T>(layout, scores.size());
  AttentionRow<T> r;
  r.weights = masked_softmax_row(scores, &mask);
  r.output = detail::weighted_value_sum<T>(r.weights, values, d_v);
  return r;
}

template <typename T>
AttentionRow<T> masked_unconditional_output(std::span<const T> scores, const Matrix<T>& values,
                                            const ContextLayout& layout) {
  return masked_unconditional_output(scores, strided_rows(values), layout, values.cols);
}

// ---------------------------------------------------------------------------
// Contrastive correction.

template <typename T>
struct Correction {
  std::vector<T> delta;
  std::vector<T> u;
  std::vector<T> delta_perp;  // empty when orthogonalize = false
  std::vector<T> o_final;

  std::span<const T> delta_used() const {
    return delta_perp.empty() ? std::span<const T>(delta) : std::span<const T>(delta_perp);
  }
};

// o_final = o_cond + gamma * delta_used. With orthogonalization the
// component of delta along u = o_uncond / (||o_uncond|| + eps) is removed;
// the removal projects exactly along u's direction (divide by ||u||^2) so
// the result is orthogonal to u to rounding error, not merely to O(eps).
// u = 0 leaves delta untouched. gamma = 0 returns o_cond bitwise.
template <typename T>
Correction<T> contrastive_correction(std::span<const T> o_cond, std::span<const T> o_uncond,
                                     const GuidanceConfig& cfg) {
  if (o_cond.size() != o_uncond.size())
    throw std::invalid_argument("contrastive_correction: length mismatch");
  if (!(cfg.epsilon > 0.0)) throw std::invalid_argument("contrastive_correction: epsilon must be > 0");
  const std::size_t d = o_cond.size();

  Correction<T> c;
  c.delta.resize(d);
  for (std::size_t i = 0; i < d; ++i) c.delta[i] = o_cond[i] - o_uncond[i];

  const T denom = norm2(o_uncond) + T(cfg.epsilon);
  c.u.resize(d);
  for (std::size_t i = 0; i < d; ++i) c.u[i] = o_uncond[i] / denom;

  if (cfg.orthogonalize) {
    const T uu = dot<T>(c.u, c.u);
    c.delta_perp = c.delta;
    if (uu > T(0)) {
      const T coef = dot<T>(c.delta, c.u) / uu;
      for (std::size_t i = 0; i < d; ++i) c.delta_perp[i] -= coef * c.u[i];
    }
  }

  const std::span<const T> used = c.delta_used();
  c.o_final.assign(o_cond.begin(), o_cond.end());
  if (cfg.gamma != 0.0) {
    const T g = T(cfg.gamma);
    for (std::size_t i = 0; i < d; ++i) c.o_final[i] += g * used[i];
  }
  return c;
}

// ---------------------------------------------------------------------------
// One transformer block with guidance.

// Appended K/V rows for one layer; positions are the rope positions the keys
// were rotated with.
template <typename T>
struct LayerKv {
  Matrix<T> k, v;  // n x d_model
  std::vector<long> positions;

  std::size_t size() const { return positions.size(); }
};

namespace detail {

template <typename T>
struct GuidedHead {
  AttentionRow<T> cond;
  AttentionRow<T> uncond;
  T visual_mass = T(0);
};

template <typename T>
void fill_head_trace(HeadTrace<T>& t, const GuidedHead<T>& h, const Correction<T>& c) {
  t.a_cond = h.cond.weights;
  t.a_uncond = h.uncond.weights;
  t.o_cond = h.cond.output;
  t.o_uncond = h.uncond.output;
  t.visual_mass = h.visual_mass;
  t.delta = c.delta;
  t.u = c.u;
  t.delta_perp = c.delta_perp;
  t.o_final = c.o_final;
}

}  // namespace detail

// Runs one pre-norm attention + FFN block over `h_in` (the rows being added
// to the sequence), appending their K/V to `kv`. Rows other than the guided
// query are computed exactly as a vanilla block. For the guided query (the
// last position of the layout, when `layer` is targeted) each head's output
// is replaced by the contrastively corrected one before the output
// projection. Causality: row at global index g sees keys 0..g.
template <typename T>
Matrix<T> guided_attention_block(const Matrix<T>& h_in, const LayerWeights<T>& w,
                                 const ModelConfig& cfg, const ContextLayout& layout,
                                 const GuidanceConfig& guidance, int layer, LayerKv<T>& kv,
                                 std::span<const long> positions,
                                 AttentionTrace<T>* trace) {
  const std::size_t m = h_in.rows;
  const std::size_t d = cfg.d_model;
  const std::size_t n_heads = cfg.n_heads;
  const std::size_t d_head = cfg.d_head;
  if (m == 0 || h_in.cols != d) throw std::invalid_argument("block: bad input shape");
  if (positions.size() != m) throw std::invalid_argument("block: positions mismatch");

  const std::size_t prior = kv.size();
  const std::size_t guided_global = layout.guided_index();
  const bool layer_targeted = guidance.targets(layer);

  const Matrix<T> x = rms_norm_rows(h_in, std::span<const T>(w.attn_norm), T(kRmsNormEps));
  Matrix<T> q = matmul(x, w.wq);
  Matrix<T> k_new = matmul(x, w.wk);
  const Matrix<T> v_new = matmul(x, w.wv);

  if (cfg.rope_enabled) {
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        rope_apply(q.row_ptr(r) + h * d_head, d_head, positions[r], cfg.rope_theta);
        rope_apply(k_new.row_ptr(r) + h * d_head, d_head, positions[r], cfg.rope_theta);
      }
    }
  }

  if (kv.k.rows == 0) {
    kv.k = Matrix<T>(0, d);
    kv.v = Matrix<T>(0, d);
  }
  for (std::size_t r = 0; r < m; ++r) {
    kv.k.append_row(k_new.row(r));
    kv.v.append_row(v_new.row(r));
    kv.positions.push_back(positions[r]);
  }

  Matrix<T> attn_out(m, d);
  const bool has_guided_row =
      layer_targeted && guided_global >= prior && guided_global < prior + m;
  std::vector<detail::GuidedHead<T>> guided(n_heads);

  const std::ptrdiff_t total = std::ptrdiff_t(m * n_heads);
#pragma omp parallel for schedule(static) if (total >= 8)
  for (std::ptrdiff_t idx = 0; idx < total; ++idx) {
    const std::size_t r = std::size_t(idx) / n_heads;
    const std::size_t h = std::size_t(idx) % n_heads;
    const std::size_t g = prior + r;
    const std::span<const T> q_h{q.row_ptr(r) + h * d_head, d_head};
    const StridedRows<T> keys{kv.k.data.data() + h * d_head, d, g + 1, d_head};
    const StridedRows<T> vals{kv.v.data.data() + h * d_head, d, g + 1, d_head};
    const std::vector<T> scores = attention_scores(q_h, keys, d_head);

    const bool guide_row = layer_targeted && g == guided_global;
    auto cond = conditional_output<T>(scores, vals, d_head);
    if (!guide_row) {
      std::copy(cond.output.begin(), cond.output.end(), attn_out.row_ptr(r) + h * d_head);
    } else {
      detail::GuidedHead<T>& gh = guided[h];
      gh.uncond = masked_unconditional_output<T>(scores, vals, layout, d_head);
      gh.visual_mass = T(0);
      for (std::size_t j = 0; j <= g; ++j)
        if (layout.is_visual(j)) gh.visual_mass += cond.weights[j];
      gh.cond = std::move(cond);
    }
  }

  if (has_guided_row) {
    const std::size_t r = guided_global - prior;
    if (trace) {
      trace->layer = layer;
      trace->n_visual = layout.n_visual;
      trace->heads.resize(n_heads);
    }
    if (guidance.per_head) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const detail::GuidedHead<T>& gh = guided[h];
        const Correction<T> c =
            contrastive_correction<T>(gh.cond.output, gh.uncond.output, guidance);
        std::copy(c.o_final.begin(), c.o_final.end(), attn_out.row_ptr(r) + h * d_head);
        if (trace) detail::fill_head_trace(trace->heads[h], gh, c);
      }
    } else {
      std::vector<T> o_cond_cat, o_uncond_cat;
      o_cond_cat.reserve(d);
      o_uncond_cat.reserve(d);
      for (std::size_t h = 0; h < n_heads; ++h) {
        o_cond_cat.insert(o_cond_cat.end(), guided[h].cond.output.begin(),
                          guided[h].cond.output.end());
        o_uncond_cat.insert(o_uncond_cat.end(), guided[h].uncond.output.begin(),
                            guided[h].uncond.output.end());
      }
      const Correction<T> c = contrastive_correction<T>(o_cond_cat, o_uncond_cat, guidance);
      std::copy(c.o_final.begin(), c.o_final.end(), attn_out.row_ptr(r));
      if (trace) {
        for (std::size_t h = 0; h < n_heads; ++h) {
          HeadTrace<T>& t = trace->heads[h];
          const detail::GuidedHead<T>& gh = guided[h];
          t.a_cond = gh.cond.weights;
          t.a_uncond = gh.uncond.weights;
          t.o_cond = gh.cond.output;
          t.o_uncond = gh.uncond.output;
          t.visual_mass = gh.visual_mass;
          t.o_final.assign(c.o_final.begin() + std::ptrdiff_t(h * d_head),
                           c.o_final.begin() + std::ptrdiff_t((h + 1) * d_head));
        }
        // Attention rows stay per head; the concat record only carries the
        // d_model-wide correction.
        HeadTrace<T> cat;
        cat.o_cond = o_cond_cat;
        cat.o_uncond = o_uncond_cat;
        cat.delta = c.delta;
        cat.u = c.u;
        cat.delta_perp = c.delta_perp;
        cat.o_final = c.o_final;
        T vm = T(0);
        for (std::size_t h = 0; h < n_heads; ++h) vm += guided[h].visual_mass;
        cat.visual_mass = vm / T(n_heads);
        trace->concat = std::move(cat);
      }
    }
  }

  const Matrix<T> z = matmul(attn_out, w.wo);
  Matrix<T> h_attn(m, d);
  for (std::size_t i = 0; i < m * d; ++i) h_attn.data[i] = h_in.data[i] + z.data[i];

  const Matrix<T> x2 = rms_norm_rows(h_attn, std::span<const T>(w.ffn_norm), T(kRmsNormEps));
  Matrix<T> gate = matmul(x2, w.w_gate);
  const Matrix<T> up = matmul(x2, w.w_up);
  for (std::size_t i = 0; i < gate.data.size(); ++i)
    gate.data[i] = silu(gate.data[i]) * up.data[i];
  const Matrix<T> down = matmul(gate, w.w_down);

  Matrix<T> h_out(m, d);
  for (std::size_t i = 0; i < m * d; ++i) h_out.data[i] = h_attn.data[i] + down.data[i];
  return h_out;
}

}  // namespace acg
