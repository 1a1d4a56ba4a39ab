#pragma once

// Retained-size and FLOPs accounting for the encoder layers.
//
// Per layer i, with d_i the hidden dims retained by both the local and global
// masks, h_i retained heads, f_i retained FFN channels and c_i the conv gate:
//
//   FFN   f_i (2 d_i + 1) + 3 d_i                  (w_in, w_out, b_in; b_out + pre-norm)
//   Attn  4 d_head h_i d_i + 3 d_head h_i + 2 d_i  (Q/K/V/O slabs, Q/K/V biases, pre-norm)
//   Conv  c_i (3 d_i^2 + (k + 8) d_i)
//
// The differentiable variant substitutes gate probabilities for the counts
// (products of expectations), so it coincides with the integer count whenever
// the gates are binary.

#include <array>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "maskforge/binary_masks.hpp"
#include "maskforge/config.hpp"
#include "maskforge/conformer.hpp"
#include "maskforge/ops.hpp"

namespace maskforge {

enum module_slot : std::size_t { slot_ffn1 = 0, slot_attn = 1, slot_conv = 2, slot_ffn2 = 3 };
inline constexpr std::array<const char*, 4> module_names{"ffn1", "attn", "conv", "ffn2"};

struct size_breakdown {
  std::vector<std::array<double, 4>> modules;  // per layer, per module_slot
  std::vector<double> hidden;                  // per layer retained hidden dims (expected or exact)
  double total = 0.0;
};

struct exact_breakdown {
  std::vector<std::array<std::uint64_t, 4>> modules;
  std::vector<std::uint64_t> hidden;
  std::uint64_t total = 0;
};

struct sparsity_budget {
  double target_sparsity = 0.0;
  budget_mode mode = budget_mode::parameters;
  double full_size = 1.0;

  void validate() const {
    if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) throw config_error("budget: target sparsity must be in [0, 1)");
    if (!(full_size > 0.0)) throw config_error("budget: full size must be positive");
  }
  double target_size() const { return (1.0 - target_sparsity) * full_size; }
};

namespace detail {

template <class T>
basic_tensor<T> total_or(const basic_tensor<T>& t, std::size_t n) {
  return t.defined() ? sum(t) : basic_tensor<T>::scalar(static_cast<T>(n));
}

template <class T>
basic_tensor<T> retained_hidden(const mask_values<T>& m, std::size_t layer, std::size_t d) {
  const auto& local = m.hidden_local[layer];
  const auto& global = m.hidden_global;
  if (local.defined() && global.defined()) return sum(mul(local, global));
  if (local.defined()) return sum(local);
  if (global.defined()) return sum(global);
  return basic_tensor<T>::scalar(static_cast<T>(d));
}

template <class T>
basic_tensor<T> conv_gate(const mask_values<T>& m, std::size_t layer) {
  return m.conv[layer].defined() ? m.conv[layer] : basic_tensor<T>::scalar(T(1));
}

template <class T>
void check_layout(const mask_values<T>& m, const conformer_config& cfg) {
  const std::size_t L = cfg.num_layers;
  if (m.hidden_local.size() != L || m.head.size() != L || m.ffn1.size() != L || m.ffn2.size() != L || m.conv.size() != L)
    throw shape_error("accounting: mask layer count does not match config");
  auto len = [](const basic_tensor<T>& t, std::size_t n, const char* what) {
    if (t.defined() && t.numel() != n) throw shape_error(std::string("accounting: ") + what + " length mismatch");
  };
  len(m.hidden_global, cfg.hidden, "hidden_global");
  for (std::size_t i = 0; i < L; ++i) {
    len(m.hidden_local[i], cfg.hidden, "hidden_local");
    len(m.head[i], cfg.num_heads, "head");
    len(m.ffn1[i], cfg.ffn_dim, "ffn1");
    len(m.ffn2[i], cfg.ffn_dim, "ffn2");
    len(m.conv[i], 1, "conv");
  }
}

}  // namespace detail

template <class T>
struct size_result {
  basic_tensor<T> total;
  size_breakdown breakdown;
};

/// Differentiable retained parameter count from gate probabilities
/// (hard_concrete_mask_set::expected()), or exact when the gates are {0, 1}.
template <class T>
size_result<T> expected_size(const mask_values<T>& probs, const conformer_config& cfg) {
  cfg.validate();
  detail::check_layout(probs, cfg);
  const double dh = static_cast<double>(cfg.head_dim());
  const double k = static_cast<double>(cfg.conv_kernel);
  size_result<T> out;
  basic_tensor<T> total;
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const auto eg = detail::retained_hidden(probs, i, cfg.hidden);
    const auto heads = detail::total_or(probs.head[i], cfg.num_heads);
    auto ffn = [&](const basic_tensor<T>& gates) {
      return add(mul(detail::total_or(gates, cfg.ffn_dim), shift(scale(eg, 2.0), 1.0)), scale(eg, 3.0));
    };
    std::array<basic_tensor<T>, 4> terms;
    terms[slot_ffn1] = ffn(probs.ffn1[i]);
    terms[slot_attn] = add(add(scale(mul(eg, heads), 4.0 * dh), scale(heads, 3.0 * dh)), scale(eg, 2.0));
    terms[slot_conv] = mul(detail::conv_gate(probs, i), add(scale(mul(eg, eg), 3.0), scale(eg, k + 8.0)));
    terms[slot_ffn2] = ffn(probs.ffn2[i]);
    std::array<double, 4> row{};
    for (std::size_t m = 0; m < 4; ++m) {
      row[m] = static_cast<double>(terms[m].item());
      total = total.defined() ? add(total, terms[m]) : terms[m];
    }
    out.breakdown.modules.push_back(row);
    out.breakdown.hidden.push_back(static_cast<double>(eg.item()));
  }
  out.total = total;
  out.breakdown.total = static_cast<double>(total.item());
  return out;
}

/// Expected multiply-add FLOPs (2 per MAC) of the encoder layers for one
/// sequence of length `seq_len`: matmuls, attention scores/context and the
/// depthwise convolution.
template <class T>
basic_tensor<T> expected_flops(const mask_values<T>& probs, const conformer_config& cfg, std::size_t seq_len) {
  cfg.validate();
  detail::check_layout(probs, cfg);
  const double Tn = static_cast<double>(seq_len);
  const double dh = static_cast<double>(cfg.head_dim());
  const double k = static_cast<double>(cfg.conv_kernel);
  basic_tensor<T> total = basic_tensor<T>::scalar(T(0));
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const auto eg = detail::retained_hidden(probs, i, cfg.hidden);
    const auto heads = detail::total_or(probs.head[i], cfg.num_heads);
    auto ffn = [&](const basic_tensor<T>& gates) { return scale(mul(eg, detail::total_or(gates, cfg.ffn_dim)), 4.0 * Tn); };
    auto attn = add(scale(mul(eg, heads), 8.0 * Tn * dh), scale(heads, 4.0 * Tn * Tn * dh));
    auto conv = mul(detail::conv_gate(probs, i), add(scale(mul(eg, eg), 6.0 * Tn), scale(eg, 2.0 * k * Tn)));
    total = add(total, add(add(ffn(probs.ffn1[i]), attn), add(conv, ffn(probs.ffn2[i]))));
  }
  return total;
}

namespace detail {

struct layer_counts {
  std::uint64_t d = 0, heads = 0, f1 = 0, f2 = 0, conv = 0;
};

inline std::array<std::uint64_t, 4> module_sizes(const layer_counts& c, const conformer_config& cfg) {
  const std::uint64_t dh = cfg.head_dim(), k = cfg.conv_kernel;
  std::array<std::uint64_t, 4> s{};
  s[slot_ffn1] = c.f1 * (2 * c.d + 1) + 3 * c.d;
  s[slot_attn] = 4 * dh * c.heads * c.d + 3 * dh * c.heads + 2 * c.d;
  s[slot_conv] = c.conv * (3 * c.d * c.d + (k + 8) * c.d);
  s[slot_ffn2] = c.f2 * (2 * c.d + 1) + 3 * c.d;
  return s;
}

inline exact_breakdown tally(const std::vector<layer_counts>& layers, const conformer_config& cfg) {
  exact_breakdown out;
  for (const auto& c : layers) {
    const auto s = module_sizes(c, cfg);
    out.modules.push_back(s);
    out.hidden.push_back(c.d);
    for (auto v : s) out.total += v;
  }
  return out;
}

}  // namespace detail

/// Integer retained count for hard decisions.
inline exact_breakdown exact_size(const binary_mask_set& masks, const conformer_config& cfg) {
  cfg.validate();
  masks.validate(cfg);
  std::vector<detail::layer_counts> layers(cfg.num_layers);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    auto& c = layers[i];
    for (std::size_t j = 0; j < cfg.hidden; ++j) c.d += (masks.hidden_local[i][j] > 0.0 && masks.hidden_global[j] > 0.0) ? 1 : 0;
    c.heads = count_retained(masks.head[i]);
    c.f1 = count_retained(masks.ffn1[i]);
    c.f2 = count_retained(masks.ffn2[i]);
    c.conv = masks.conv[i] > 0.0 ? 1 : 0;
  }
  return detail::tally(layers, cfg);
}

/// Integer count for {0, 1} gate values; any other value is rejected.
template <class T>
exact_breakdown exact_size(const mask_values<T>& gates, const conformer_config& cfg) {
  detail::check_layout(gates, cfg);
  auto to_vec = [](const basic_tensor<T>& t, std::size_t n) {
    if (!t.defined()) return std::vector<double>(n, 1.0);
    std::vector<double> v;
    for (T x : t.values()) {
      if (x != T(0) && x != T(1)) throw std::invalid_argument("exact_size: non-binary mask value");
      v.push_back(static_cast<double>(x));
    }
    return v;
  };
  binary_mask_set b;
  b.hidden_global = to_vec(gates.hidden_global, cfg.hidden);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    b.hidden_local.push_back(to_vec(gates.hidden_local[i], cfg.hidden));
    b.head.push_back(to_vec(gates.head[i], cfg.num_heads));
    b.ffn1.push_back(to_vec(gates.ffn1[i], cfg.ffn_dim));
    b.ffn2.push_back(to_vec(gates.ffn2[i], cfg.ffn_dim));
    b.conv.push_back(to_vec(gates.conv[i], 1)[0]);
  }
  return exact_size(b, cfg);
}

inline exact_breakdown dense_size(const conformer_config& cfg) { return exact_size(binary_mask_set::ones(cfg), cfg); }

/// FLOPs for hard decisions, as a double (exact integer-valued up to 2^53).
inline double exact_flops(const binary_mask_set& masks, const conformer_config& cfg, std::size_t seq_len) {
  no_grad_guard guard;
  return expected_flops(masks.hardened().to_mask_values<double>(), cfg, seq_len).item();
}

inline double dense_flops(const conformer_config& cfg, std::size_t seq_len) {
  return exact_flops(binary_mask_set::ones(cfg), cfg, seq_len);
}

struct distribution_row {
  std::size_t layer = 0;
  std::string module;
  std::uint64_t dense = 0;
  std::uint64_t retained = 0;
  double ratio = 0.0;
};

/// Remaining-ratio table per (layer, module) plus per-layer hidden dims.
inline std::vector<distribution_row> report_distribution(const binary_mask_set& masks, const conformer_config& cfg) {
  const auto kept = exact_size(masks, cfg);
  const auto full = dense_size(cfg);
  std::vector<distribution_row> rows;
  auto ratio = [](std::uint64_t r, std::uint64_t d) { return d == 0 ? 1.0 : static_cast<double>(r) / static_cast<double>(d); };
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    for (std::size_t m = 0; m < 4; ++m)
      rows.push_back({i, module_names[m], full.modules[i][m], kept.modules[i][m], ratio(kept.modules[i][m], full.modules[i][m])});
    rows.push_back({i, "hidden_local", full.hidden[i], kept.hidden[i], ratio(kept.hidden[i], full.hidden[i])});
  }
  return rows;
}

inline void write_distribution_csv(std::ostream& os, const std::vector<distribution_row>& rows) {
  os << "layer,module,dense_params,retained_params,ratio\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f", r.ratio);
    os << r.layer << ',' << r.module << ',' << r.dense << ',' << r.retained << ',' << buf << '\n';
  }
}

}  // namespace maskforge
