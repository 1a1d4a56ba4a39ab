#pragma once

// JSON run configuration. Every section and key is optional; missing keys
// keep their defaults, unknown keys are rejected.

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "maskforge/config.hpp"

namespace maskforge {

struct run_config {
  conformer_config model;
  task_spec task;
  trainer_config trainer;
  std::size_t eval_size = 256;    // holdout sequences used by evaluate
  std::size_t bench_repeats = 20;  // timed forward passes in bench
};

namespace detail {

using json = nlohmann::ordered_json;

class json_section {
 public:
  json_section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw config_error(where_ + ": expected an object");
  }

  template <class V>
  void read(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!it->is_boolean()) throw config_error("expected a boolean");
        out = it->template get<bool>();
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!it->is_number()) throw config_error("expected a number");
        out = it->template get<V>();
      } else {
        if (!it->is_number_unsigned() && !(it->is_number_integer() && it->template get<long long>() >= 0))
          throw config_error("expected a non-negative integer");
        out = it->template get<V>();
      }
    } catch (const config_error& e) {
      throw config_error(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw config_error(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline run_config run_config_from_json(const nlohmann::ordered_json& j) {
  run_config rc;
  detail::json_section top(j, "config");
  top.read("eval_size", rc.eval_size);
  top.read("bench_repeats", rc.bench_repeats);
  if (const auto* m = top.child("model")) {
    detail::json_section s(*m, "model");
    auto& c = rc.model;
    s.read("num_layers", c.num_layers);
    s.read("hidden", c.hidden);
    s.read("num_heads", c.num_heads);
    s.read("ffn_dim", c.ffn_dim);
    s.read("conv_kernel", c.conv_kernel);
    s.read("input_dim", c.input_dim);
    s.read("num_classes", c.num_classes);
    s.finish();
  }
  if (const auto* t = top.child("task")) {
    detail::json_section s(*t, "task");
    auto& c = rc.task;
    s.read("num_classes", c.num_classes);
    s.read("seq_len", c.seq_len);
    s.read("feature_dim", c.feature_dim);
    s.read("noise_std", c.noise_std);
    s.read("neighbor_mix", c.neighbor_mix);
    s.read("stay_probability", c.stay_probability);
    s.read("seed", c.seed);
    s.finish();
  }
  if (const auto* t = top.child("trainer")) {
    detail::json_section s(*t, "trainer");
    auto& c = rc.trainer;
    s.read("total_steps", c.total_steps);
    s.read("warmup_steps", c.warmup_steps);
    s.read("batch_size", c.batch_size);
    s.read("seed", c.seed);
    s.read("target_sparsity", c.target_sparsity);
    if (const auto* mode = s.child("budget_mode")) {
      if (!mode->is_string()) throw config_error("trainer.budget_mode: expected \"params\" or \"flops\"");
      c.mode = parse_budget_mode(mode->get<std::string>());
    }
    s.read("lr_model", c.lr_model);
    s.read("lr_masks", c.lr_masks);
    s.read("lr_lagrangian", c.lr_lagrangian);
    s.read("weight_decay", c.weight_decay);
    s.read("reg_weight", c.reg_weight);
    s.read("dense_steps", c.dense_steps);
    s.read("lr_dense", c.lr_dense);
    s.read("finetune_steps", c.finetune_steps);
    s.read("lr_finetune", c.lr_finetune);
    s.read("mask_init_mean", c.mask_init_mean);
    s.read("mask_init_std", c.mask_init_std);
    if (const auto* a = s.child("ablation")) {
      detail::json_section ab(*a, "trainer.ablation");
      ab.read("enable_kd", c.ablation.enable_kd);
      ab.read("head_only_pruning", c.ablation.head_only_pruning);
      ab.read("disable_hidden_masks", c.ablation.disable_hidden_masks);
      ab.read("per_layer_kd_transform", c.ablation.per_layer_kd_transform);
      ab.finish();
    }
    s.finish();
  }
  top.finish();
  return rc;
}

/// Fully resolved configuration, every key present.
inline nlohmann::ordered_json to_json(const run_config& rc) {
  const auto& m = rc.model;
  const auto& t = rc.task;
  const auto& c = rc.trainer;
  nlohmann::ordered_json j;
  j["model"] = {{"num_layers", m.num_layers}, {"hidden", m.hidden},           {"num_heads", m.num_heads},    {"ffn_dim", m.ffn_dim},
                {"conv_kernel", m.conv_kernel}, {"input_dim", m.input_dim}, {"num_classes", m.num_classes}};
  j["task"] = {{"num_classes", t.num_classes}, {"seq_len", t.seq_len},           {"feature_dim", t.feature_dim},
               {"noise_std", t.noise_std},     {"neighbor_mix", t.neighbor_mix}, {"stay_probability", t.stay_probability},
               {"seed", t.seed}};
  j["trainer"] = {{"total_steps", c.total_steps},
                  {"warmup_steps", c.warmup_steps},
                  {"batch_size", c.batch_size},
                  {"seed", c.seed},
                  {"target_sparsity", c.target_sparsity},
                  {"budget_mode", to_string(c.mode)},
                  {"lr_model", c.lr_model},
                  {"lr_masks", c.lr_masks},
                  {"lr_lagrangian", c.lr_lagrangian},
                  {"weight_decay", c.weight_decay},
                  {"reg_weight", c.reg_weight},
                  {"dense_steps", c.dense_steps},
                  {"lr_dense", c.lr_dense},
                  {"finetune_steps", c.finetune_steps},
                  {"lr_finetune", c.lr_finetune},
                  {"mask_init_mean", c.mask_init_mean},
                  {"mask_init_std", c.mask_init_std},
                  {"ablation",
                   {{"enable_kd", c.ablation.enable_kd},
                    {"head_only_pruning", c.ablation.head_only_pruning},
                    {"disable_hidden_masks", c.ablation.disable_hidden_masks},
                    {"per_layer_kd_transform", c.ablation.per_layer_kd_transform}}}};
  j["eval_size"] = rc.eval_size;
  j["bench_repeats"] = rc.bench_repeats;
  return j;
}

/// Checks cross-section consistency on top of each section's own rules.
inline void validate(const run_config& rc) {
  rc.model.validate();
  rc.task.validate();
  rc.trainer.validate();
  if (rc.task.num_classes != rc.model.num_classes) throw config_error("config: task.num_classes must equal model.num_classes");
  if (rc.task.feature_dim != rc.model.input_dim) throw config_error("config: task.feature_dim must equal model.input_dim");
  if (rc.eval_size < 1) throw config_error("config: eval_size must be >= 1");
}

inline run_config parse_run_config(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error(std::string("config: invalid JSON: ") + e.what());
  }
  try {
    return run_config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("config: ") + e.what());
  }
}

inline run_config load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw config_error("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace maskforge
