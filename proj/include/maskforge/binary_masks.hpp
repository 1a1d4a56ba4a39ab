#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskforge/conformer.hpp"

namespace maskforge {

/// Hard retain/prune decisions for a dense layout. Each entry is 0 (removed)
/// or the fold scale in (0, 1] of a retained unit.
struct binary_mask_set {
  std::vector<double> hidden_global;  // [d]
  std::vector<std::vector<double>> hidden_local, head, ffn1, ffn2;
  std::vector<double> conv;  // [L]

  static binary_mask_set ones(const conformer_config& cfg) {
    binary_mask_set m;
    m.hidden_global.assign(cfg.hidden, 1.0);
    m.hidden_local.assign(cfg.num_layers, std::vector<double>(cfg.hidden, 1.0));
    m.head.assign(cfg.num_layers, std::vector<double>(cfg.num_heads, 1.0));
    m.ffn1.assign(cfg.num_layers, std::vector<double>(cfg.ffn_dim, 1.0));
    m.ffn2 = m.ffn1;
    m.conv.assign(cfg.num_layers, 1.0);
    return m;
  }

  /// Throws unless the layout matches `cfg` and every entry is 0 or in (0, 1].
  void validate(const conformer_config& cfg) const {
    auto check = [](const std::vector<double>& v, std::size_t n, const char* what) {
      if (v.size() != n) throw std::invalid_argument(std::string("binary masks: ") + what + " has wrong length");
      for (double x : v)
        if (!(x == 0.0 || (x > 0.0 && x <= 1.0))) throw std::invalid_argument(std::string("binary masks: ") + what + " entry outside {0} U (0, 1]");
    };
    const std::size_t L = cfg.num_layers;
    if (hidden_local.size() != L || head.size() != L || ffn1.size() != L || ffn2.size() != L)
      throw std::invalid_argument("binary masks: layer count mismatch");
    check(hidden_global, cfg.hidden, "hidden_global");
    check(conv, L, "conv");
    for (std::size_t i = 0; i < L; ++i) {
      check(hidden_local[i], cfg.hidden, "hidden_local");
      check(head[i], cfg.num_heads, "head");
      check(ffn1[i], cfg.ffn_dim, "ffn1");
      check(ffn2[i], cfg.ffn_dim, "ffn2");
    }
  }

  /// Same decisions with every fold scale set to 1.
  binary_mask_set hardened() const {
    binary_mask_set out = *this;
    auto fix = [](std::vector<double>& v) {
      for (auto& x : v) x = x > 0.0 ? 1.0 : 0.0;
    };
    fix(out.hidden_global);
    fix(out.conv);
    for (auto* fam : {&out.hidden_local, &out.head, &out.ffn1, &out.ffn2})
      for (auto& v : *fam) fix(v);
    return out;
  }

  /// Forward gates carrying the fold scales (0 for removed units).
  template <class T>
  mask_values<T> to_mask_values() const {
    auto vec = [](const std::vector<double>& v) { return basic_tensor<T>({v.size()}, std::vector<T>(v.begin(), v.end())); };
    const std::size_t L = conv.size();
    auto out = mask_values<T>::empty(L);
    out.hidden_global = vec(hidden_global);
    for (std::size_t i = 0; i < L; ++i) {
      out.hidden_local[i] = vec(hidden_local[i]);
      out.head[i] = vec(head[i]);
      out.ffn1[i] = vec(ffn1[i]);
      out.ffn2[i] = vec(ffn2[i]);
      out.conv[i] = basic_tensor<T>::scalar(static_cast<T>(conv[i]));
    }
    return out;
  }

  bool operator==(const binary_mask_set&) const = default;
};

inline std::size_t count_retained(const std::vector<double>& v) {
  std::size_t n = 0;
  for (double x : v) n += x > 0.0 ? 1 : 0;
  return n;
}

}  // namespace maskforge
