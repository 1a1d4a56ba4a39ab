#pragma once

// One-shot structured magnitude pruning over the same units the gates cover.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "maskforge/accounting.hpp"
#include "maskforge/binary_masks.hpp"
#include "maskforge/conformer.hpp"

namespace maskforge {

enum class unit_family { ffn1 = 0, attn_head = 1, conv = 2, ffn2 = 3, hidden_local = 4, hidden_global = 5 };

struct unit_score {
  unit_family family;
  std::size_t layer = 0;  // hidden_global units report num_layers
  std::size_t index = 0;
  double sum_sq = 0.0;
  std::size_t count = 0;

  double raw() const { return std::sqrt(sum_sq); }
  /// sqrt(sum of squares / count): the RMS weight of the unit.
  double normalized() const { return count ? std::sqrt(sum_sq / static_cast<double>(count)) : 0.0; }
  double score(bool normalize) const { return normalize ? normalized() : raw(); }
};

namespace detail {

template <class T>
double col_sq(const basic_tensor<T>& w, std::size_t c) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) s += static_cast<double>(w.values()[r * cols + c]) * w.values()[r * cols + c];
  return s;
}

template <class T>
double row_sq(const basic_tensor<T>& w, std::size_t r) {
  const std::size_t cols = w.dim(1);
  double s = 0.0;
  for (std::size_t c = 0; c < cols; ++c) s += static_cast<double>(w.values()[r * cols + c]) * w.values()[r * cols + c];
  return s;
}

template <class T>
double all_sq(const basic_tensor<T>& w) {
  double s = 0.0;
  for (T v : w.values()) s += static_cast<double>(v) * v;
  return s;
}

}  // namespace detail

/// Weight norms of every prunable unit of a dense-layout model. A unit owns:
/// FFN channel, its W_in column and W_out row; head, its Q/K/V column slabs
/// and W_O row slab; conv module, all of its weight matrices; local hidden
/// dim, the rows and columns it touches inside the layer; global hidden dim,
/// its embedding column, classifier row and every layer's touching weights.
template <class T>
std::vector<unit_score> group_importance(const conformer_model<T>& model) {
  if (!model.is_dense_layout()) throw std::invalid_argument("group_importance: model must have the dense layout");
  const auto& cfg = model.config;
  const std::size_t d = cfg.hidden, dh = cfg.head_dim(), L = cfg.num_layers;
  std::vector<unit_score> out;
  std::vector<unit_score> global(d);
  for (std::size_t j = 0; j < d; ++j) {
    global[j] = {unit_family::hidden_global, L, j, detail::col_sq(model.w_embed, j) + detail::row_sq(model.w_cls, j),
                 model.w_embed.dim(0) + model.w_cls.dim(1)};
  }
  for (std::size_t i = 0; i < L; ++i) {
    const auto& l = model.layers[i];
    auto ffn = [&](const ffn_block<T>& f, unit_family fam) {
      for (std::size_t c = 0; c < cfg.ffn_dim; ++c)
        out.push_back({fam, i, c, detail::col_sq(f.w_in, c) + detail::row_sq(f.w_out, c), 2 * d});
    };
    ffn(l.ffn1, unit_family::ffn1);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      double s = 0.0;
      for (std::size_t j = h * dh; j < (h + 1) * dh; ++j)
        s += detail::col_sq(l.attn.w_q, j) + detail::col_sq(l.attn.w_k, j) + detail::col_sq(l.attn.w_v, j) + detail::row_sq(l.attn.w_o, j);
      out.push_back({unit_family::attn_head, i, h, s, 4 * dh * d});
    }
    const auto& c = *l.conv;
    out.push_back({unit_family::conv, i, 0, detail::all_sq(c.w_pw1) + detail::all_sq(c.w_dw) + detail::all_sq(c.w_pw2),
                   c.w_pw1.numel() + c.w_dw.numel() + c.w_pw2.numel()});
    ffn(l.ffn2, unit_family::ffn2);
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (const auto* f : {&l.ffn1, &l.ffn2}) s += detail::row_sq(f->w_in, j) + detail::col_sq(f->w_out, j);
      s += detail::row_sq(l.attn.w_q, j) + detail::row_sq(l.attn.w_k, j) + detail::row_sq(l.attn.w_v, j) + detail::col_sq(l.attn.w_o, j);
      s += detail::row_sq(c.w_pw1, j) + detail::col_sq(c.w_pw1, j) + detail::col_sq(c.w_pw1, j + d) + detail::row_sq(c.w_dw, j) +
           detail::row_sq(c.w_pw2, j) + detail::col_sq(c.w_pw2, j);
      const std::size_t n = 2 * 2 * cfg.ffn_dim + 4 * d + 3 * 2 * d + cfg.conv_kernel + 2 * d;
      out.push_back({unit_family::hidden_local, i, j, s, n});
      global[j].sum_sq += s;
      global[j].count += n;
    }
  }
  out.insert(out.end(), global.begin(), global.end());
  return out;
}

struct omp_options {
  bool normalize = true;  // rank by RMS weight instead of the raw L2 norm
  std::size_t seq_len = 64;
};

/// Greedy removal of the lowest-scoring units until the exact retained size
/// (or FLOPs) is within the budget. Ties go by (layer, module order, unit).
template <class T>
binary_mask_set omp_prune(const conformer_model<T>& model, const sparsity_budget& budget, const omp_options& opt = {}) {
  budget.validate();
  const auto& cfg = model.config;
  auto scores = group_importance(model);
  std::stable_sort(scores.begin(), scores.end(), [&](const unit_score& a, const unit_score& b) {
    return std::make_tuple(a.score(opt.normalize), a.layer, static_cast<int>(a.family), a.index) <
           std::make_tuple(b.score(opt.normalize), b.layer, static_cast<int>(b.family), b.index);
  });
  auto b = binary_mask_set::ones(cfg);
  const double dense = budget.mode == budget_mode::parameters ? static_cast<double>(dense_size(cfg).total) : dense_flops(cfg, opt.seq_len);
  const double limit = budget.target_size() / budget.full_size * dense;
  auto size = [&] {
    return budget.mode == budget_mode::parameters ? static_cast<double>(exact_size(b, cfg).total) : exact_flops(b, cfg, opt.seq_len);
  };
  if (size() <= limit) return b;
  for (const auto& u : scores) {
    switch (u.family) {
      case unit_family::ffn1: b.ffn1[u.layer][u.index] = 0.0; break;
      case unit_family::ffn2: b.ffn2[u.layer][u.index] = 0.0; break;
      case unit_family::attn_head: b.head[u.layer][u.index] = 0.0; break;
      case unit_family::conv: b.conv[u.layer] = 0.0; break;
      case unit_family::hidden_local: b.hidden_local[u.layer][u.index] = 0.0; break;
      case unit_family::hidden_global:
        if (count_retained(b.hidden_global) == 1) continue;  // keep a residual stream
        b.hidden_global[u.index] = 0.0;
        break;
    }
    if (size() <= limit) return b;
  }
  throw config_error("omp_prune: budget cannot be met");
}

}  // namespace maskforge
