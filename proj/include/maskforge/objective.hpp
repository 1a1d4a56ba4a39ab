#pragma once

// Training objective pieces: Lagrangian sparsity penalty on retained
// fractions, layerwise distillation through a learned transform, and the
// linear sparsity warmup.

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskforge/accounting.hpp"
#include "maskforge/ops.hpp"

namespace maskforge {

template <class T>
struct lagrangian_state {
  basic_tensor<T> lambda1 = basic_tensor<T>::scalar(T(0), true);
  basic_tensor<T> lambda2 = basic_tensor<T>::scalar(T(0), true);

  std::vector<basic_tensor<T>> parameters() const { return {lambda1, lambda2}; }
};

/// lambda1 * v + lambda2 * v^2 with v = current - target (retained fractions).
template <class T>
basic_tensor<T> lagrangian_penalty(const basic_tensor<T>& current, double target, const lagrangian_state<T>& lag) {
  auto v = shift(current, -target);
  return add(mul(lag.lambda1, v), mul(lag.lambda2, mul(v, v)));
}

/// Retained fraction of the budgeted quantity (parameters or FLOPs over
/// `seq_len` frames) for gate probabilities `probs`.
template <class T>
basic_tensor<T> retained_fraction(const mask_values<T>& probs, const conformer_config& cfg, budget_mode mode, std::size_t seq_len) {
  if (mode == budget_mode::parameters)
    return scale(expected_size(probs, cfg).total, 1.0 / static_cast<double>(dense_size(cfg).total));
  return scale(expected_flops(probs, cfg, seq_len), 1.0 / dense_flops(cfg, seq_len));
}

template <class T>
struct kd_state {
  std::vector<basic_tensor<T>> transforms;  // one shared [d, d] matrix, or one per layer

  static kd_state identity(std::size_t width, std::size_t layers = 1) {
    if (layers == 0) throw std::invalid_argument("kd_state: need at least one transform");
    kd_state s;
    for (std::size_t l = 0; l < layers; ++l) {
      auto w = basic_tensor<T>::zeros({width, width}, true);
      for (std::size_t i = 0; i < width; ++i) w.data()[i * width + i] = T(1);
      s.transforms.push_back(std::move(w));
    }
    return s;
  }

  const basic_tensor<T>& transform(std::size_t layer) const { return transforms.size() == 1 ? transforms[0] : transforms.at(layer); }
  std::vector<basic_tensor<T>> parameters() const { return transforms; }
};

/// Mean over layers of MSE(student, teacher @ W). Teacher states are detached.
template <class T>
basic_tensor<T> kd_loss(const std::vector<basic_tensor<T>>& student, const std::vector<basic_tensor<T>>& teacher, const kd_state<T>& kd) {
  if (student.size() != teacher.size() || student.empty())
    throw shape_error("kd_loss: " + std::to_string(student.size()) + " student vs " + std::to_string(teacher.size()) + " teacher layers");
  if (kd.transforms.size() != 1 && kd.transforms.size() != student.size()) throw shape_error("kd_loss: transform count does not match layers");
  basic_tensor<T> total;
  for (std::size_t i = 0; i < student.size(); ++i) {
    if (student[i].shape() != teacher[i].shape()) throw_shape("kd_loss", student[i].shape(), teacher[i].shape());
    auto term = mse(student[i], matmul(teacher[i].detach(), kd.transform(i)));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(student.size()));
}

template <class T>
basic_tensor<T> total_loss(const basic_tensor<T>& task, const basic_tensor<T>& reg, const basic_tensor<T>& kd, double reg_weight = 1.0) {
  auto out = add(task, scale(reg, reg_weight));
  return kd.defined() ? add(out, kd) : out;
}

/// Linear ramp from 0 to `s_final` over `warmup_steps`, then constant.
inline double sparsity_schedule(long long step, long long warmup_steps, double s_final) {
  if (step < 0) throw std::invalid_argument("sparsity_schedule: negative step");
  if (warmup_steps < 1) throw std::invalid_argument("sparsity_schedule: warmup_steps must be >= 1");
  if (!(s_final >= 0.0 && s_final < 1.0)) throw std::invalid_argument("sparsity_schedule: s_final must be in [0, 1)");
  return std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps)) * s_final;
}

}  // namespace maskforge
