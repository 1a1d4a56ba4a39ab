#pragma once

// Turning learned gates into a physically smaller model. Retained units keep
// their deterministic gate value as a fold scale, which is multiplied into the
// weights that consume the unit's output, so the compact model computes the
// same function as the masked one.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "maskforge/accounting.hpp"
#include "maskforge/binary_masks.hpp"
#include "maskforge/conformer.hpp"
#include "maskforge/hard_concrete.hpp"

namespace maskforge {

struct binarize_options {
  bool round_to_one = false;  // record fold scale 1 for every retained unit
  // Drop the lowest-gate retained units until the exact retained fraction is
  // at most 1 - trim_target.
  bool trim = false;
  double trim_target = 0.0;
  budget_mode mode = budget_mode::parameters;
  std::size_t seq_len = 64;
};

namespace detail {

/// Retained fraction of a binary set under the given budget mode.
inline double exact_fraction(const binary_mask_set& b, const conformer_config& cfg, budget_mode mode, std::size_t seq_len) {
  if (mode == budget_mode::parameters)
    return static_cast<double>(exact_size(b, cfg).total) / static_cast<double>(dense_size(cfg).total);
  return exact_flops(b, cfg, seq_len) / dense_flops(cfg, seq_len);
}

template <class T>
std::vector<double> gate_values(const basic_tensor<T>& z, std::size_t n) {
  if (!z.defined()) return std::vector<double>(n, 1.0);
  return std::vector<double>(z.values().begin(), z.values().end());
}

inline void trim_to_budget(binary_mask_set& b, const conformer_config& cfg, const binarize_options& opt) {
  if (!(opt.trim_target >= 0.0 && opt.trim_target < 1.0)) throw config_error("trim: target sparsity must be in [0, 1)");
  // (gate, family rank, layer, unit, slot)
  std::vector<std::tuple<double, int, std::size_t, std::size_t, double*>> units;
  auto add = [&](std::vector<double>& v, int family, std::size_t layer) {
    for (std::size_t j = 0; j < v.size(); ++j)
      if (v[j] > 0.0) units.emplace_back(v[j], family, layer, j, &v[j]);
  };
  add(b.hidden_global, 0, 0);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    add(b.hidden_local[i], 1, i);
    add(b.head[i], 2, i);
    add(b.ffn1[i], 3, i);
    add(b.ffn2[i], 4, i);
  }
  for (std::size_t i = 0; i < cfg.num_layers; ++i)
    if (b.conv[i] > 0.0) units.emplace_back(b.conv[i], 5, i, 0, &b.conv[i]);
  std::stable_sort(units.begin(), units.end(), [](const auto& x, const auto& y) {
    return std::tie(std::get<0>(x), std::get<1>(x), std::get<2>(x), std::get<3>(x)) <
           std::tie(std::get<0>(y), std::get<1>(y), std::get<2>(y), std::get<3>(y));
  });
  const double limit = 1.0 - opt.trim_target;
  for (const auto& u : units) {
    if (exact_fraction(b, cfg, opt.mode, opt.seq_len) <= limit) return;
    const bool last_global = std::get<1>(u) == 0 && count_retained(b.hidden_global) == 1;
    if (last_global) continue;  // a model needs at least one residual dim
    *std::get<4>(u) = 0.0;
  }
  if (exact_fraction(b, cfg, opt.mode, opt.seq_len) > limit) throw config_error("trim: budget cannot be met");
}

}  // namespace detail

/// Hard decisions from the deterministic gates: retained iff the gate is > 0,
/// with the gate value kept as fold scale.
template <class T>
binary_mask_set binarize_and_fold(const hard_concrete_mask_set<T>& masks, const binarize_options& opt = {}) {
  no_grad_guard guard;
  const auto& cfg = masks.config;
  const auto z = masks.deterministic();
  auto fold = [&](std::vector<double> v) {
    for (auto& x : v) x = x > 0.0 ? (opt.round_to_one ? 1.0 : std::min(1.0, x)) : 0.0;
    return v;
  };
  binary_mask_set b;
  b.hidden_global = fold(detail::gate_values(z.hidden_global, cfg.hidden));
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    b.hidden_local.push_back(fold(detail::gate_values(z.hidden_local[i], cfg.hidden)));
    b.head.push_back(fold(detail::gate_values(z.head[i], cfg.num_heads)));
    b.ffn1.push_back(fold(detail::gate_values(z.ffn1[i], cfg.ffn_dim)));
    b.ffn2.push_back(fold(detail::gate_values(z.ffn2[i], cfg.ffn_dim)));
    b.conv.push_back(fold(detail::gate_values(z.conv[i], 1))[0]);
  }
  if (opt.trim) detail::trim_to_budget(b, cfg, opt);
  return b;
}

namespace detail {

/// a[rows, cols] of a 2-D tensor, row r scaled by row_scale[r] and column c by
/// col_scale[c] (empty scale vectors mean 1).
template <class T>
basic_tensor<T> take(const basic_tensor<T>& a, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols,
                     const std::vector<double>& row_scale = {}, const std::vector<double>& col_scale = {}) {
  const std::size_t n = a.dim(1);
  std::vector<T> v(rows.size() * cols.size());
  const auto& av = a.values();
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c) {
      double x = av[rows[r] * n + cols[c]];
      if (!row_scale.empty()) x *= row_scale[r];
      if (!col_scale.empty()) x *= col_scale[c];
      v[r * cols.size() + c] = static_cast<T>(x);
    }
  return basic_tensor<T>({rows.size(), cols.size()}, std::move(v));
}

template <class T>
basic_tensor<T> take(const basic_tensor<T>& a, const std::vector<std::size_t>& idx, const std::vector<double>& scale = {}) {
  std::vector<T> v(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    double x = a.values()[idx[k]];
    if (!scale.empty()) x *= scale[k];
    v[k] = static_cast<T>(x);
  }
  return basic_tensor<T>({idx.size()}, std::move(v));
}

inline std::vector<double> times(std::vector<double> v, double c) {
  for (auto& x : v) x *= c;
  return v;
}

}  // namespace detail

/// Compact model equivalent to `model` under the gates of `bin`. `bin` uses the
/// nominal layout of model.config and addresses units by original id, so an
/// already extracted model can be extracted again.
template <class T>
conformer_model<T> extract(const conformer_model<T>& model, const binary_mask_set& bin) {
  const auto& cfg = model.config;
  bin.validate(cfg);
  if (model.layers.size() != cfg.num_layers) throw std::invalid_argument("extract: model layer count does not match its config");
  using idx = std::vector<std::size_t>;
  const std::size_t w = model.width(), dh = cfg.head_dim();
  constexpr std::size_t gone = std::numeric_limits<std::size_t>::max();

  idx keep;
  std::vector<double> zg;
  idx new_pos(w, gone);
  for (std::size_t p = 0; p < w; ++p) {
    const double g = bin.hidden_global[model.hidden_index[p]];
    if (g > 0.0) {
      new_pos[p] = keep.size();
      keep.push_back(p);
      zg.push_back(g);
    }
  }
  if (keep.empty()) throw std::invalid_argument("extract: no global hidden dims retained");

  conformer_model<T> out;
  out.config = cfg;
  for (auto p : keep) out.hidden_index.push_back(model.hidden_index[p]);
  const idx all_inputs = detail::iota_index(model.w_embed.dim(0));
  out.w_embed = detail::take(model.w_embed, all_inputs, keep, {}, zg);
  out.b_embed = detail::take(model.b_embed, keep, zg);
  out.position_scale = detail::take(model.position_scale, keep, zg);

  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const auto& src = model.layers[i];
    conformer_layer<T> dst;
    idx K;  // surviving local positions
    std::vector<double> g;
    for (std::size_t k = 0; k < src.index.size(); ++k) {
      const std::size_t p = src.index[k];
      const std::size_t id = model.hidden_index[p];
      const double gate = bin.hidden_local[i][id] * bin.hidden_global[id];
      if (gate > 0.0 && new_pos[p] != gone) {
        K.push_back(k);
        g.push_back(gate);
        dst.index.push_back(new_pos[p]);
      }
    }
    auto norm = [&](const basic_tensor<T>& gamma, const basic_tensor<T>& beta, basic_tensor<T>& og, basic_tensor<T>& ob) {
      og = detail::take(gamma, K, g);
      ob = detail::take(beta, K, g);
    };
    auto ffn = [&](const ffn_block<T>& f, const idx& ids, const std::vector<double>& gates, idx& out_ids) {
      ffn_block<T> o;
      idx C;
      std::vector<double> zc;
      for (std::size_t c = 0; c < ids.size(); ++c)
        if (gates[ids[c]] > 0.0) {
          C.push_back(c);
          zc.push_back(gates[ids[c]]);
          out_ids.push_back(ids[c]);
        }
      norm(f.norm_gamma, f.norm_beta, o.norm_gamma, o.norm_beta);
      o.w_in = detail::take(f.w_in, K, C);
      o.b_in = detail::take(f.b_in, C);
      o.w_out = detail::take(f.w_out, C, K, zc, g);
      o.b_out = detail::take(f.b_out, K, g);
      return o;
    };
    dst.ffn1 = ffn(src.ffn1, src.ffn1_ids, bin.ffn1[i], dst.ffn1_ids);
    dst.ffn2 = ffn(src.ffn2, src.ffn2_ids, bin.ffn2[i], dst.ffn2_ids);

    // attention: a head owns a dh-wide slab of Q/K/V columns and W_O rows
    const auto& a = src.attn;
    idx slab;
    std::vector<double> zh;
    for (std::size_t h = 0; h < src.head_ids.size(); ++h) {
      const double z = bin.head[i][src.head_ids[h]];
      if (z <= 0.0) continue;
      dst.head_ids.push_back(src.head_ids[h]);
      for (std::size_t j = 0; j < dh; ++j) {
        slab.push_back(h * dh + j);
        zh.push_back(z);
      }
    }
    auto& b = dst.attn;
    norm(a.norm_gamma, a.norm_beta, b.norm_gamma, b.norm_beta);
    b.w_q = detail::take(a.w_q, K, slab);
    b.b_q = detail::take(a.b_q, slab);
    b.w_k = detail::take(a.w_k, K, slab);
    b.b_k = detail::take(a.b_k, slab);
    b.w_v = detail::take(a.w_v, K, slab);
    b.b_v = detail::take(a.b_v, slab);
    b.w_o = detail::take(a.w_o, slab, K, zh, g);

    // conv: channels are the layer's hidden dims; GLU pairs c with c + E
    if (src.conv && bin.conv[i] > 0.0) {
      const auto& c = *src.conv;
      const std::size_t E = src.index.size();
      conv_block<T> o;
      idx pairs = K;
      for (auto k : K) pairs.push_back(k + E);
      const idx taps = detail::iota_index(c.w_dw.dim(1));
      norm(c.norm_gamma, c.norm_beta, o.norm_gamma, o.norm_beta);
      o.w_pw1 = detail::take(c.w_pw1, K, pairs);
      o.b_pw1 = detail::take(c.b_pw1, pairs);
      o.w_dw = detail::take(c.w_dw, K, taps, g);
      o.b_dw = detail::take(c.b_dw, K, g);
      o.inner_gamma = detail::take(c.inner_gamma, K);
      o.inner_beta = detail::take(c.inner_beta, K);
      const auto gc = detail::times(g, bin.conv[i]);
      o.w_pw2 = detail::take(c.w_pw2, K, K, g, gc);
      o.b_pw2 = detail::take(c.b_pw2, K, gc);
      dst.conv = std::move(o);
    }
    out.layers.push_back(std::move(dst));
  }
  out.final_gamma = detail::take(model.final_gamma, keep);
  out.final_beta = detail::take(model.final_beta, keep);
  const idx classes = detail::iota_index(model.w_cls.dim(1));
  out.w_cls = detail::take(model.w_cls, keep, classes, zg);
  out.b_cls = model.b_cls.clone();
  return out;
}

struct forward_benchmark {
  double median_ms = 0.0, min_ms = 0.0, max_ms = 0.0, variance_ms2 = 0.0;
  std::vector<double> samples_ms;
  double flops = 0.0;  // encoder multiply-accumulate count x2 for the batch
};

/// Encoder FLOPs of a compact model, counted from its shapes.
template <class T>
double model_flops(const conformer_model<T>& model, std::size_t seq_len) {
  const auto& cfg = model.config;
  double total = 0.0;
  for (const auto& l : model.layers) {
    const double E = static_cast<double>(l.index.size());
    const double T_ = static_cast<double>(seq_len), dh = static_cast<double>(cfg.head_dim());
    const double H = static_cast<double>(l.head_ids.size());
    const double f1 = static_cast<double>(l.ffn1.channels()), f2 = static_cast<double>(l.ffn2.channels());
    total += 4.0 * T_ * E * (f1 + f2);                      // two FFNs
    total += 8.0 * T_ * E * dh * H + 4.0 * T_ * T_ * dh * H;  // projections, scores and context
    if (l.conv) total += 6.0 * T_ * E * E + 2.0 * T_ * E * static_cast<double>(cfg.conv_kernel);
  }
  return total;
}

/// Median wall-clock time of `repeats` forwards on `x` after one warmup.
template <class T>
forward_benchmark benchmark_forward(const conformer_model<T>& model, const basic_tensor<T>& x, std::size_t repeats) {
  if (repeats < 3) throw std::invalid_argument("benchmark_forward: repeats must be >= 3");
  no_grad_guard guard;
  (void)forward(model, x);
  forward_benchmark r;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)forward(model, x);
    r.samples_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  auto sorted = r.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.median_ms = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  r.min_ms = sorted.front();
  r.max_ms = sorted.back();
  const double mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(n);
  for (double s : sorted) r.variance_ms2 += (s - mean) * (s - mean);
  r.variance_ms2 /= static_cast<double>(n - 1);
  r.flops = static_cast<double>(x.dim(0)) * model_flops(model, x.dim(1));
  return r;
}

}  // namespace maskforge
