#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace maskforge {

class config_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct conformer_config {
  std::size_t num_layers = 4;
  std::size_t hidden = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t conv_kernel = 3;
  std::size_t input_dim = 16;
  std::size_t num_classes = 8;

  std::size_t head_dim() const { return hidden / num_heads; }

  void validate() const {
    if (num_layers < 1 || hidden < 1 || num_heads < 1 || ffn_dim < 1 || conv_kernel < 1 || input_dim < 1 || num_classes < 1)
      throw config_error("conformer config: every extent must be >= 1");
    if (hidden % num_heads != 0)
      throw config_error("conformer config: hidden " + std::to_string(hidden) + " not divisible by num_heads " + std::to_string(num_heads));
    if (conv_kernel % 2 == 0) throw config_error("conformer config: conv_kernel must be odd");
  }

  bool operator==(const conformer_config&) const = default;
};

struct task_spec {
  std::size_t num_classes = 8;
  std::size_t seq_len = 64;
  std::size_t feature_dim = 16;
  double noise_std = 0.5;
  double neighbor_mix = 0.3;
  double stay_probability = 0.8;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw config_error("task: num_classes must be >= 2");
    if (seq_len < 1 || feature_dim < 1) throw config_error("task: seq_len and feature_dim must be >= 1");
    if (!(noise_std >= 0.0)) throw config_error("task: noise_std must be >= 0");
    if (!(neighbor_mix >= 0.0 && neighbor_mix < 1.0)) throw config_error("task: neighbor_mix must be in [0, 1)");
    if (!(stay_probability >= 0.0 && stay_probability <= 1.0)) throw config_error("task: stay_probability must be in [0, 1]");
  }
};

enum class budget_mode { parameters, flops };

inline std::string to_string(budget_mode m) { return m == budget_mode::parameters ? "params" : "flops"; }

inline budget_mode parse_budget_mode(const std::string& s) {
  if (s == "params" || s == "parameters") return budget_mode::parameters;
  if (s == "flops") return budget_mode::flops;
  throw config_error("budget mode must be 'params' or 'flops', got '" + s + "'");
}

struct ablation_flags {
  bool enable_kd = true;
  bool head_only_pruning = false;
  bool disable_hidden_masks = false;
  bool per_layer_kd_transform = false;
};

struct trainer_config {
  std::size_t total_steps = 5000;
  std::size_t warmup_steps = 500;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;

  double target_sparsity = 0.5;
  budget_mode mode = budget_mode::parameters;

  double lr_model = 3e-4;
  double lr_masks = 1e-2;
  double lr_lagrangian = 1e-2;  // applied as gradient ascent
  double weight_decay = 0.01;
  double reg_weight = 1.0;

  // dense teacher pretraining
  std::size_t dense_steps = 2000;
  double lr_dense = 1e-3;

  // fixed-mask fine-tuning of an extracted model
  std::size_t finetune_steps = 1000;
  double lr_finetune = 3e-4;

  double mask_init_mean = 2.0;
  double mask_init_std = 0.1;

  ablation_flags ablation;

  void validate() const {
    if (warmup_steps < 1) throw config_error("trainer: warmup_steps must be >= 1");
    if (warmup_steps > total_steps && total_steps > 0) throw config_error("trainer: warmup_steps must not exceed total_steps");
    if (batch_size < 1) throw config_error("trainer: batch_size must be >= 1");
    if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) throw config_error("trainer: target_sparsity must be in [0, 1)");
    if (!(mask_init_std >= 0.0)) throw config_error("trainer: mask_init_std must be >= 0");
  }
};

}  // namespace maskforge
