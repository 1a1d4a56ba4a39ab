#pragma once

// Dense teacher training, the joint prune-train loop and evaluation.
//
// prune_train runs three AdamW optimizers: A over the model weights and the
// distillation transform, B over the gate logits, C over the Lagrange
// multipliers (gradient ascent).

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "maskforge/conformer.hpp"
#include "maskforge/hard_concrete.hpp"
#include "maskforge/objective.hpp"
#include "maskforge/optim.hpp"
#include "maskforge/synthetic_task.hpp"

namespace maskforge {

struct metrics_row {
  std::size_t step = 0;
  double task_loss = 0, kd_loss = 0, reg_loss = 0;
  double expected_sparsity = 0, target_sparsity = 0;
  double lambda1 = 0, lambda2 = 0;
};

inline void write_metrics_csv(std::ostream& os, const std::vector<metrics_row>& rows) {
  os << "step,task_loss,kd_loss,reg_loss,expected_sparsity,target_sparsity,lambda1,lambda2\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.task_loss, r.kd_loss, r.reg_loss, r.expected_sparsity,
                  r.target_sparsity, r.lambda1, r.lambda2);
    os << buf;
  }
}

struct evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Fraction of frames where argmax(logits) equals the label.
template <class T>
double frame_accuracy(const basic_tensor<T>& logits, std::span<const int> labels) {
  const std::size_t K = logits.dim(-1), rows = logits.numel() / K;
  if (rows != labels.size()) throw shape_error("frame_accuracy: " + std::to_string(rows) + " frames vs " + std::to_string(labels.size()) + " labels");
  if (rows == 0) throw std::invalid_argument("frame_accuracy: empty dataset");
  std::size_t hits = 0;
  const auto& v = logits.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (v[r * K + k] > v[r * K + best]) best = k;
    hits += static_cast<int>(best) == labels[r] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(rows);
}

/// Accuracy and mean cross-entropy, evaluated in chunks of `chunk` sequences.
template <class T>
evaluation evaluate(const conformer_model<T>& model, const mask_values<T>* masks, const labeled_batch<T>& data, std::size_t chunk = 32) {
  if (data.labels.empty() || !data.features.defined() || data.features.numel() == 0) throw std::invalid_argument("evaluate: empty dataset");
  no_grad_guard guard;
  const std::size_t B = data.features.dim(0), L = data.features.dim(1);
  double hits = 0.0, loss = 0.0;
  for (std::size_t b = 0; b < B; b += chunk) {
    const std::size_t e = std::min(B, b + chunk);
    auto x = slice(data.features, 0, b, e);
    std::span<const int> y(data.labels.data() + b * L, (e - b) * L);
    auto logits = forward(model, x, masks).logits;
    const double frames = static_cast<double>(y.size());
    hits += frame_accuracy(logits, y) * frames;
    loss += static_cast<double>(cross_entropy_with_logits(logits, y).item()) * frames;
  }
  const double n = static_cast<double>(data.labels.size());
  return {hits / n, loss / n};
}

namespace detail {

template <class T>
std::vector<bool> weight_decay_flags(const conformer_model<T>& model) {
  std::vector<bool> flags;
  model.for_each_tensor([&](const std::string&, const basic_tensor<T>&, param_kind k) {
    if (k != param_kind::buffer) flags.push_back(k == param_kind::weight);
  });
  return flags;
}

inline void require_finite(double loss, std::size_t step, const char* phase) {
  if (!std::isfinite(loss)) throw numeric_error(std::string(phase) + ": loss became non-finite at step " + std::to_string(step));
}

}  // namespace detail

using step_callback = std::function<void(const metrics_row&)>;

/// Supervised training of `model` in place with cross-entropy on the task
/// stream; training batches are indexed from `first_step`. Returns per-step loss.
template <class T>
std::vector<double> train_supervised(conformer_model<T>& model, const task_spec& task, std::size_t steps, std::size_t batch, double lr,
                                     double weight_decay, std::uint64_t first_step = 0) {
  model.set_requires_grad(true);
  adamw<T> opt(model.parameters(), {.lr = lr, .weight_decay = weight_decay}, detail::weight_decay_flags(model));
  std::vector<double> losses;
  losses.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    auto data = training_batch<T>(task, batch, first_step + s);
    auto loss = cross_entropy_with_logits(forward(model, data.features).logits, std::span<const int>(data.labels));
    const double value = static_cast<double>(loss.item());
    detail::require_finite(value, s, "train");
    opt.zero_grad();
    backward(loss);
    opt.step();
    losses.push_back(value);
  }
  opt.zero_grad();
  return losses;
}

template <class T = float>
struct dense_result {
  conformer_model<T> model;
  std::vector<double> losses;
};

/// Pretrains the dense teacher from init_model(cfg, tc.seed).
template <class T = float>
dense_result<T> train_dense(const conformer_config& cfg, const task_spec& task, const trainer_config& tc) {
  tc.validate();
  dense_result<T> out{init_model<T>(cfg, tc.seed), {}};
  out.losses = train_supervised(out.model, task, tc.dense_steps, tc.batch_size, tc.lr_dense, tc.weight_decay);
  out.model.set_requires_grad(false);
  return out;
}

template <class T = float>
struct prune_result {
  conformer_model<T> model;
  hard_concrete_mask_set<T> masks;
  lagrangian_state<T> lagrangian;
  kd_state<T> kd;
  std::vector<metrics_row> log;
};

/// Step-by-step driver for joint mask learning and fine-tuning of a copy of
/// a dense teacher. Each of the three optimizers (model + KD transforms, gate
/// logits, multipliers) can be frozen independently.
template <class T = float>
class pruning_session {
 public:
  pruning_session(const conformer_model<T>& teacher, const task_spec& task, const trainer_config& tc)
      : teacher_(teacher), task_(task), tc_(tc) {
    tc.validate();
    if (!teacher.is_dense_layout()) throw std::invalid_argument("prune_train: teacher must have the dense layout");
    const auto& cfg = teacher.config;
    if (task.feature_dim != cfg.input_dim || task.num_classes != cfg.num_classes)
      throw config_error("prune_train: task and model disagree on feature_dim / num_classes");
    state_.model = teacher.clone();
    state_.model.set_requires_grad(true);
    state_.masks = init_alpha<T>(cfg, tc.mask_init_mean, tc.mask_init_std, tc.seed, mask_families::from(tc.ablation));
    state_.kd = kd_state<T>::identity(cfg.hidden, tc.ablation.per_layer_kd_transform ? cfg.num_layers : 1);

    auto model_params = state_.model.parameters();
    auto decay = detail::weight_decay_flags(state_.model);
    for (const auto& w : state_.kd.parameters()) {
      model_params.push_back(w);
      decay.push_back(false);
    }
    opt_model_.emplace(model_params, adamw_options{.lr = tc.lr_model, .weight_decay = tc.weight_decay}, decay);
    opt_masks_.emplace(state_.masks.parameters(), adamw_options{.lr = tc.lr_masks});
    opt_lag_.emplace(state_.lagrangian.parameters(), adamw_options{.lr = tc.lr_lagrangian, .ascent = true});
    noise_ = make_rng(tc.seed, stream::mask_noise);
    state_.log.reserve(tc.total_steps);
  }

  pruning_session(const pruning_session&) = delete;
  pruning_session& operator=(const pruning_session&) = delete;

  struct freeze_flags {
    bool model = false;
    bool masks = false;
    bool lagrangian = false;
  };
  void freeze(freeze_flags f) { frozen_ = f; }

  std::size_t steps_done() const { return step_; }
  bool finished() const { return step_ >= tc_.total_steps; }
  const prune_result<T>& state() const { return state_; }

  metrics_row step() {
    const auto& cfg = teacher_.config;
    const std::size_t s = step_;
    auto data = training_batch<T>(task_, tc_.batch_size, s);
    const double target = sparsity_schedule(static_cast<long long>(s), static_cast<long long>(tc_.warmup_steps), tc_.target_sparsity);

    auto gates = state_.masks.sample(noise_);
    auto student = forward(state_.model, data.features, &gates);
    auto task_loss = cross_entropy_with_logits(student.logits, std::span<const int>(data.labels));

    auto fraction = retained_fraction(state_.masks.expected(), cfg, tc_.mode, task_.seq_len);
    auto reg = lagrangian_penalty(fraction, 1.0 - target, state_.lagrangian);

    basic_tensor<T> kd;
    if (tc_.ablation.enable_kd) {
      std::vector<basic_tensor<T>> teacher_hiddens;
      {
        no_grad_guard guard;
        teacher_hiddens = layer_hidden_states(teacher_, data.features);
      }
      kd = kd_loss(student.layer_hiddens, teacher_hiddens, state_.kd);
    }
    auto loss = total_loss(task_loss, reg, kd, tc_.reg_weight);

    metrics_row row;
    row.step = s;
    row.task_loss = static_cast<double>(task_loss.item());
    row.kd_loss = kd.defined() ? static_cast<double>(kd.item()) : 0.0;
    row.reg_loss = static_cast<double>(reg.item());
    row.expected_sparsity = 1.0 - static_cast<double>(fraction.item());
    row.target_sparsity = target;
    row.lambda1 = static_cast<double>(state_.lagrangian.lambda1.item());
    row.lambda2 = static_cast<double>(state_.lagrangian.lambda2.item());
    detail::require_finite(static_cast<double>(loss.item()), s, "prune");

    opt_model_->zero_grad();
    opt_masks_->zero_grad();
    opt_lag_->zero_grad();
    backward(loss);
    if (!frozen_.model) opt_model_->step();
    if (!frozen_.masks) opt_masks_->step();
    if (!frozen_.lagrangian) opt_lag_->step();

    state_.log.push_back(row);
    ++step_;
    return row;
  }

  /// Runs the remaining steps and hands over the result.
  prune_result<T> finish(const step_callback& on_step = {}) {
    while (!finished()) {
      auto row = step();
      if (on_step) on_step(row);
    }
    opt_model_->zero_grad();
    opt_masks_->zero_grad();
    opt_lag_->zero_grad();
    return std::move(state_);
  }

 private:
  const conformer_model<T>& teacher_;
  task_spec task_;
  trainer_config tc_;
  prune_result<T> state_;
  std::optional<adamw<T>> opt_model_, opt_masks_, opt_lag_;
  rng noise_ = make_rng(0, stream::mask_noise);
  freeze_flags frozen_;
  std::size_t step_ = 0;
};

/// Joint mask learning and fine-tuning of a copy of `teacher` for
/// tc.total_steps steps, targeting tc.target_sparsity of the budgeted quantity.
template <class T = float>
prune_result<T> prune_train(const conformer_model<T>& teacher, const task_spec& task, const trainer_config& tc, const step_callback& on_step = {}) {
  pruning_session<T> session(teacher, task, tc);
  return session.finish(on_step);
}

/// Expected sparsity of the budgeted quantity for the current gate logits.
template <class T>
double expected_sparsity(const hard_concrete_mask_set<T>& masks, budget_mode mode, std::size_t seq_len) {
  no_grad_guard guard;
  return 1.0 - static_cast<double>(retained_fraction(masks.expected(), masks.config, mode, seq_len).item());
}

}  // namespace maskforge
