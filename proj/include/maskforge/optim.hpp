#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "maskforge/tensor.hpp"

namespace maskforge {

struct adamw_options {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool ascent = false;  // maximize: steps along +grad
};

/// AdamW with decoupled weight decay and bias correction. Decay applies only
/// to parameters flagged in `decay`. Missing gradients count as zero.
template <class T>
class adamw {
 public:
  adamw(std::vector<basic_tensor<T>> params, adamw_options opts, std::vector<bool> decay = {})
      : params_(std::move(params)), opts_(opts), decay_(std::move(decay)) {
    if (decay_.empty()) decay_.assign(params_.size(), opts_.weight_decay != 0.0);
    if (decay_.size() != params_.size()) throw std::invalid_argument("adamw: decay flags do not match parameters");
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  /// Throws numeric_error, leaving every parameter untouched, if any gradient
  /// is non-finite.
  void step() {
    for (std::size_t k = 0; k < params_.size(); ++k)
      if (params_[k].has_grad())
        for (T g : params_[k].grad())
          if (!std::isfinite(static_cast<double>(g))) throw numeric_error("adamw: non-finite gradient in parameter " + std::to_string(k) + ", step rejected");
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const double sign = opts_.ascent ? -1.0 : 1.0;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto w = p.data();
      const bool has = p.has_grad();
      const double shrink = decay_[k] ? 1.0 - opts_.lr * opts_.weight_decay : 1.0;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = has ? sign * static_cast<double>(p.grad()[i]) : 0.0;
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g;
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g * g;
        const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) * shrink - opts_.lr * update);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return t_; }
  const adamw_options& options() const { return opts_; }
  const std::vector<basic_tensor<T>>& parameters() const { return params_; }
  const std::vector<double>& first_moment(std::size_t k) const { return m_.at(k); }
  const std::vector<double>& second_moment(std::size_t k) const { return v_.at(k); }

 private:
  std::vector<basic_tensor<T>> params_;
  adamw_options opts_;
  std::vector<bool> decay_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace maskforge
