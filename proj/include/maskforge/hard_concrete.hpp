#pragma once

// Hard concrete gates over the four structured pruning families.
//
//   t = sigmoid(log(u / (1 - u)) + alpha),  z = min(1, max(0, t (r - l) + l))
//
// with l = -0.1, r = 1.1 and unit temperature. P(z != 0) has the closed form
// sigmoid(alpha - log(-l / r)).

#include <cmath>
#include <cstdint>
#include <vector>

#include "maskforge/conformer.hpp"
#include "maskforge/ops.hpp"
#include "maskforge/random.hpp"

namespace maskforge {

inline constexpr double stretch_lo = -0.1;
inline constexpr double stretch_hi = 1.1;
inline constexpr double noise_eps = 1e-6;

/// Retained iff alpha exceeds this (deterministic gate > 0).
inline double retention_threshold() { return std::log(-stretch_lo / stretch_hi); }

template <class T>
basic_tensor<T> sample_mask(const basic_tensor<T>& alpha, const basic_tensor<T>& u) {
  if (alpha.shape() != u.shape()) throw_shape("sample_mask", alpha.shape(), u.shape());
  std::vector<T> logit(u.numel());
  for (std::size_t i = 0; i < logit.size(); ++i) {
    const double v = std::clamp(static_cast<double>(u.values()[i]), noise_eps, 1.0 - noise_eps);
    logit[i] = static_cast<T>(std::log(v / (1.0 - v)));
  }
  auto t = sigmoid(add(alpha, basic_tensor<T>(alpha.shape(), std::move(logit))));
  return clamp(shift(scale(t, stretch_hi - stretch_lo), stretch_lo), 0.0, 1.0);
}

/// Noise-free gate, i.e. sample_mask at u = 0.5.
template <class T>
basic_tensor<T> deterministic_mask(const basic_tensor<T>& alpha) {
  return clamp(shift(scale(sigmoid(alpha), stretch_hi - stretch_lo), stretch_lo), 0.0, 1.0);
}

/// P(z != 0) elementwise.
template <class T>
basic_tensor<T> expected_l0(const basic_tensor<T>& alpha) {
  return sigmoid(shift(alpha, -std::log(-stretch_lo / stretch_hi)));
}

enum class mask_mode { stochastic, deterministic, binary };

struct mask_families {
  bool head = true;
  bool ffn = true;
  bool conv = true;
  bool hidden = true;

  static mask_families from(const ablation_flags& a) {
    mask_families f;
    if (a.head_only_pruning) f.ffn = f.conv = f.hidden = false;
    if (a.disable_hidden_masks) f.hidden = false;
    return f;
  }
};

/// Learnable gate logits for a dense layout. Disabled families hold no
/// parameters and evaluate to constant ones.
template <class T>
struct hard_concrete_mask_set {
  conformer_config config;
  mask_families families;
  basic_tensor<T> hidden_global;  // [d]
  std::vector<basic_tensor<T>> hidden_local, head, ffn1, ffn2;
  basic_tensor<T> conv;  // [L]

  std::vector<basic_tensor<T>> parameters() const {
    std::vector<basic_tensor<T>> out;
    if (families.hidden) {
      out.push_back(hidden_global);
      out.insert(out.end(), hidden_local.begin(), hidden_local.end());
    }
    if (families.head) out.insert(out.end(), head.begin(), head.end());
    if (families.ffn) {
      out.insert(out.end(), ffn1.begin(), ffn1.end());
      out.insert(out.end(), ffn2.begin(), ffn2.end());
    }
    if (families.conv) out.push_back(conv);
    return out;
  }

  /// Applies `fn(alpha)` to every enabled family and reshapes into forward gates.
  template <class Fn>
  mask_values<T> map(Fn&& fn) const {
    const std::size_t L = config.num_layers;
    auto out = mask_values<T>::empty(L);
    if (families.hidden) out.hidden_global = fn(hidden_global);
    basic_tensor<T> conv_gates;
    if (families.conv) conv_gates = fn(conv);
    for (std::size_t i = 0; i < L; ++i) {
      if (families.hidden) out.hidden_local[i] = fn(hidden_local[i]);
      if (families.head) out.head[i] = fn(head[i]);
      if (families.ffn) {
        out.ffn1[i] = fn(ffn1[i]);
        out.ffn2[i] = fn(ffn2[i]);
      }
      if (families.conv) out.conv[i] = slice(conv_gates, 0, i, i + 1);
    }
    return out;
  }

  mask_values<T> deterministic() const {
    return map([](const basic_tensor<T>& a) { return deterministic_mask(a); });
  }

  /// Gate probabilities P(z != 0); the input to expected size / FLOPs accounting.
  mask_values<T> expected() const {
    return map([](const basic_tensor<T>& a) { return expected_l0(a); });
  }

  /// {0, 1} gates: 1 iff the deterministic gate is positive.
  mask_values<T> binary() const {
    no_grad_guard guard;
    return map([](const basic_tensor<T>& a) {
      auto z = deterministic_mask(a);
      std::vector<T> v(z.numel());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = z.values()[i] > T(0) ? T(1) : T(0);
      return basic_tensor<T>(a.shape(), std::move(v));
    });
  }

  /// Uniform noise with the same layout as the gate logits.
  std::vector<basic_tensor<T>> draw_noise(rng& g) const {
    std::vector<basic_tensor<T>> out;
    for (const auto& a : parameters()) {
      std::vector<T> v(a.numel());
      for (auto& x : v) x = static_cast<T>(uniform01(g));
      out.emplace_back(a.shape(), std::move(v));
    }
    return out;
  }

  /// Stochastic gates from recorded noise (one tensor per entry of parameters()).
  mask_values<T> sample(const std::vector<basic_tensor<T>>& noise) const {
    const auto params = parameters();
    if (noise.size() != params.size()) throw shape_error("sample: noise does not match mask layout");
    // map() visits families in a different order than parameters(); look up by identity.
    return map([&](const basic_tensor<T>& a) {
      for (std::size_t j = 0; j < params.size(); ++j)
        if (params[j].impl() == a.impl()) return sample_mask(a, noise[j]);
      throw shape_error("sample: unknown gate tensor");
    });
  }

  mask_values<T> sample(rng& g) const { return sample(draw_noise(g)); }

  mask_values<T> evaluate(mask_mode mode, rng* g = nullptr) const {
    switch (mode) {
      case mask_mode::stochastic:
        if (!g) throw std::invalid_argument("stochastic masks need a random stream");
        return sample(*g);
      case mask_mode::deterministic:
        return deterministic();
      case mask_mode::binary:
        return binary();
    }
    return deterministic();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }
};

/// Every logit ~ Normal(mean, std) from the seeded mask-init stream.
template <class T = float>
hard_concrete_mask_set<T> init_alpha(const conformer_config& cfg, double mean, double std_dev, std::uint64_t seed,
                                     mask_families families = {}) {
  cfg.validate();
  if (!(std_dev >= 0.0)) throw std::invalid_argument("init_alpha: std must be >= 0");
  auto g = make_rng(seed, stream::mask_init);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](std::size_t n) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(mean + std_dev * normal(g));
    return basic_tensor<T>({n}, std::move(v), true);
  };
  hard_concrete_mask_set<T> m;
  m.config = cfg;
  m.families = families;
  const std::size_t L = cfg.num_layers;
  m.hidden_global = draw(cfg.hidden);
  for (std::size_t i = 0; i < L; ++i) {
    m.hidden_local.push_back(draw(cfg.hidden));
    m.head.push_back(draw(cfg.num_heads));
    m.ffn1.push_back(draw(cfg.ffn_dim));
    m.ffn2.push_back(draw(cfg.ffn_dim));
  }
  m.conv = draw(L);
  return m;
}

}  // namespace maskforge
