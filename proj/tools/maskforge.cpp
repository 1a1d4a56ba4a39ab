// maskforge command-line driver.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "maskforge/checkpoint.hpp"
#include "maskforge/config_io.hpp"
#include "maskforge/extraction.hpp"
#include "maskforge/omp.hpp"
#include "maskforge/parallel.hpp"
#include "maskforge/trainer.hpp"

namespace fs = std::filesystem;
using namespace maskforge;
using json = nlohmann::ordered_json;

namespace {

struct common_options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

struct prune_options {
  std::optional<double> target;
  std::optional<std::string> mode;
  bool no_kd = false, head_only = false, no_hidden = false;
  std::string teacher;
};

run_config resolve(const common_options& c) {
  run_config rc = c.config_path.empty() ? run_config{} : load_run_config(c.config_path);
  if (c.seed) rc.trainer.seed = *c.seed;
  return rc;
}

void apply(const prune_options& p, run_config& rc) {
  if (p.target) rc.trainer.target_sparsity = *p.target;
  if (p.mode) rc.trainer.mode = parse_budget_mode(*p.mode);
  if (p.no_kd) rc.trainer.ablation.enable_kd = false;
  if (p.head_only) rc.trainer.ablation.head_only_pruning = true;
  if (p.no_hidden) rc.trainer.ablation.disable_hidden_masks = true;
}

fs::path prepare_out(const common_options& c, const run_config& rc) {
  fs::path out(c.out);
  fs::create_directories(out);
  std::ofstream(out / "config.json") << to_json(rc).dump(2) << "\n";
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

template <class Fn>
void write_text(const fs::path& path, Fn&& fn) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  fn(f);
}

/// Gate logits or hard decisions, whichever the file holds.
struct loaded_masks {
  std::optional<hard_concrete_mask_set<float>> logits;
  binary_mask_set binary;
  conformer_config config;
};

loaded_masks load_masks(const std::string& path, const binarize_options& opt = {}) {
  const auto entries = load_checkpoint(path);
  checkpoint_view v(entries);
  loaded_masks m;
  if (v.has("mask.hidden_global")) {
    m.logits = masks_from_entries<float>(entries);
    m.config = m.logits->config;
    m.binary = binarize_and_fold(*m.logits, opt);
  } else {
    m.binary = binary_masks_from_entries(entries, &m.config);
  }
  return m;
}

conformer_model<float> teacher_for(const std::string& path, const run_config& rc, const fs::path& out) {
  if (!path.empty()) {
    auto t = load_model<float>(path);
    if (!t.is_dense_layout()) throw config_error("teacher must be a dense model");
    if (!(t.config == rc.model)) throw config_error("teacher architecture does not match the configured model");
    return t;
  }
  std::fprintf(stderr, "no --teacher given; pretraining a dense model for %zu steps\n", rc.trainer.dense_steps);
  auto t = train_dense<float>(rc.model, rc.task, rc.trainer).model;
  save_model((out / "teacher.ckpt").string(), t);
  return t;
}

json sizes_json(const binary_mask_set& b, const run_config& rc) {
  const auto dense = dense_size(rc.model).total;
  const auto kept = exact_size(b, rc.model).total;
  const double flops = exact_flops(b, rc.model, rc.task.seq_len), dense_f = dense_flops(rc.model, rc.task.seq_len);
  return {{"dense_params", dense},
          {"retained_params", kept},
          {"param_sparsity", 1.0 - static_cast<double>(kept) / static_cast<double>(dense)},
          {"dense_flops", dense_f},
          {"retained_flops", flops},
          {"flops_sparsity", 1.0 - flops / dense_f}};
}

json eval_json(const evaluation& e) { return {{"accuracy", e.accuracy}, {"loss", e.loss}}; }

void progress(const metrics_row& r, std::size_t total) {
  if ((r.step + 1) % 500 == 0 || r.step + 1 == total)
    std::fprintf(stderr, "step %zu/%zu task %.4f kd %.4f expected sparsity %.4f (target %.4f)\n", r.step + 1, total, r.task_loss, r.kd_loss,
                 r.expected_sparsity, r.target_sparsity);
}

int cmd_train_dense(const common_options& c) {
  auto rc = resolve(c);
  validate(rc);
  const auto out = prepare_out(c, rc);
  const auto t0 = std::chrono::steady_clock::now();
  auto r = train_dense<float>(rc.model, rc.task, rc.trainer);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_model((out / "teacher.ckpt").string(), r.model);
  write_text(out / "dense_losses.csv", [&](std::ostream& os) {
    os << "step,loss\n";
    for (std::size_t s = 0; s < r.losses.size(); ++s) os << s << ',' << r.losses[s] << '\n';
  });
  const auto e = evaluate<float>(r.model, nullptr, holdout_set<float>(rc.task, rc.eval_size));
  write_json(out / "summary.json", {{"steps", rc.trainer.dense_steps}, {"seconds", secs}, {"holdout", eval_json(e)}});
  std::printf("holdout accuracy %.4f loss %.4f\n", e.accuracy, e.loss);
  return 0;
}

int cmd_prune(const common_options& c, const prune_options& p) {
  auto rc = resolve(c);
  apply(p, rc);
  validate(rc);
  const auto out = prepare_out(c, rc);
  const auto teacher = teacher_for(p.teacher, rc, out);
  const auto t0 = std::chrono::steady_clock::now();
  auto r = prune_train(teacher, rc.task, rc.trainer, [&](const metrics_row& row) { progress(row, rc.trainer.total_steps); });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  save_model((out / "student.ckpt").string(), r.model);
  save_checkpoint((out / "masks.ckpt").string(), mask_entries(r.masks));
  write_text(out / "metrics.csv", [&](std::ostream& os) { write_metrics_csv(os, r.log); });
  const auto bin = binarize_and_fold(r.masks, {.mode = rc.trainer.mode, .seq_len = rc.task.seq_len});
  write_text(out / "distribution.csv", [&](std::ostream& os) { write_distribution_csv(os, report_distribution(bin, rc.model)); });

  const auto gates = r.masks.deterministic();
  const auto e = evaluate<float>(r.model, &gates, holdout_set<float>(rc.task, rc.eval_size));
  json summary{{"steps", rc.trainer.total_steps},
               {"seconds", secs},
               {"target_sparsity", rc.trainer.target_sparsity},
               {"budget_mode", to_string(rc.trainer.mode)},
               {"expected_sparsity", expected_sparsity(r.masks, rc.trainer.mode, rc.task.seq_len)},
               {"exact", sizes_json(bin, rc)},
               {"holdout", eval_json(e)}};
  write_json(out / "summary.json", summary);
  std::printf("expected sparsity %.4f, holdout accuracy %.4f\n", summary["expected_sparsity"].get<double>(), e.accuracy);
  return 0;
}

struct extract_options {
  std::string model, masks;
  bool round_to_one = false;
  std::optional<double> trim;
};

int cmd_extract(const common_options& c, const extract_options& x) {
  auto rc = resolve(c);
  validate(rc);
  const auto out = prepare_out(c, rc);
  binarize_options opt{.round_to_one = x.round_to_one, .mode = rc.trainer.mode, .seq_len = rc.task.seq_len};
  if (x.trim) {
    opt.trim = true;
    opt.trim_target = *x.trim;
  }
  const auto masks = load_masks(x.masks, opt);
  const auto model = load_model<float>(x.model);
  if (!(masks.config == model.config)) throw config_error("masks and model were built for different architectures");
  rc.model = model.config;
  auto small = extract(model, masks.binary);
  save_model((out / "extracted.ckpt").string(), small);
  save_checkpoint((out / "binary_masks.ckpt").string(), binary_mask_entries(masks.binary, model.config));
  write_text(out / "distribution.csv", [&](std::ostream& os) { write_distribution_csv(os, report_distribution(masks.binary, model.config)); });
  auto summary = sizes_json(masks.binary, rc);
  summary["extracted_encoder_params"] = encoder_parameter_count(small);
  summary["extracted_flops"] = model_flops(small, rc.task.seq_len);
  write_json(out / "summary.json", summary);
  std::printf("extracted %zu of %llu encoder parameters\n", encoder_parameter_count(small),
              static_cast<unsigned long long>(summary["dense_params"].get<std::uint64_t>()));
  return 0;
}

int cmd_evaluate(const common_options& c, const std::string& model_path, const std::string& masks_path) {
  auto rc = resolve(c);
  validate(rc);
  const auto out = prepare_out(c, rc);
  const auto model = load_model<float>(model_path);
  if (model.config.input_dim != rc.task.feature_dim || model.config.num_classes != rc.task.num_classes)
    throw config_error("model does not match the configured task");
  const auto data = holdout_set<float>(rc.task, rc.eval_size);
  evaluation e;
  if (masks_path.empty()) {
    e = evaluate<float>(model, nullptr, data);
  } else {
    if (!model.is_dense_layout()) throw config_error("masks apply only to a dense-layout model");
    const auto m = load_masks(masks_path);
    if (!(m.config == model.config)) throw config_error("masks and model were built for different architectures");
    const auto gates = m.logits ? m.logits->deterministic() : m.binary.to_mask_values<float>();
    e = evaluate<float>(model, &gates, data);
  }
  write_json(out / "eval.json", eval_json(e));
  std::printf("holdout accuracy %.4f loss %.4f\n", e.accuracy, e.loss);
  return 0;
}

int cmd_omp(const common_options& c, const prune_options& p, bool raw_norm, std::optional<std::size_t> finetune) {
  auto rc = resolve(c);
  apply(p, rc);
  if (finetune) rc.trainer.finetune_steps = *finetune;
  validate(rc);
  const auto out = prepare_out(c, rc);
  const auto teacher = teacher_for(p.teacher, rc, out);
  const auto bin = omp_prune(teacher, sparsity_budget{rc.trainer.target_sparsity, rc.trainer.mode},
                             {.normalize = !raw_norm, .seq_len = rc.task.seq_len});
  auto small = extract(teacher, bin);
  const auto before = evaluate<float>(small, nullptr, holdout_set<float>(rc.task, rc.eval_size));
  if (rc.trainer.finetune_steps > 0) {
    train_supervised(small, rc.task, rc.trainer.finetune_steps, rc.trainer.batch_size, rc.trainer.lr_finetune, rc.trainer.weight_decay);
    small.set_requires_grad(false);
  }
  const auto after = evaluate<float>(small, nullptr, holdout_set<float>(rc.task, rc.eval_size));
  save_checkpoint((out / "binary_masks.ckpt").string(), binary_mask_entries(bin, rc.model));
  save_model((out / "omp_model.ckpt").string(), small);
  write_text(out / "distribution.csv", [&](std::ostream& os) { write_distribution_csv(os, report_distribution(bin, rc.model)); });
  write_json(out / "summary.json", {{"exact", sizes_json(bin, rc)},
                                    {"finetune_steps", rc.trainer.finetune_steps},
                                    {"holdout_before_finetune", eval_json(before)},
                                    {"holdout", eval_json(after)}});
  std::printf("omp holdout accuracy %.4f (before fine-tune %.4f)\n", after.accuracy, before.accuracy);
  return 0;
}

int cmd_report(const common_options& c, const std::string& masks_path) {
  auto rc = resolve(c);
  validate(rc);
  const auto out = prepare_out(c, rc);
  const auto m = load_masks(masks_path, {.mode = rc.trainer.mode, .seq_len = rc.task.seq_len});
  const auto rows = report_distribution(m.binary, m.config);
  write_text(out / "distribution.csv", [&](std::ostream& os) { write_distribution_csv(os, rows); });
  write_distribution_csv(std::cout, rows);
  return 0;
}

int cmd_bench(const common_options& c, const std::string& model_path, std::optional<std::size_t> repeats, std::size_t batch) {
  auto rc = resolve(c);
  if (repeats) rc.bench_repeats = *repeats;
  validate(rc);
  const auto out = prepare_out(c, rc);
  const auto model = load_model<float>(model_path);
  if (model.config.input_dim != rc.task.feature_dim) throw config_error("model does not match the configured task");
  const auto x = training_batch<float>(rc.task, batch, 0).features;
  const auto b = benchmark_forward(model, x, rc.bench_repeats);
  write_json(out / "bench.json", {{"repeats", rc.bench_repeats},
                                  {"batch", batch},
                                  {"seq_len", rc.task.seq_len},
                                  {"median_ms", b.median_ms},
                                  {"min_ms", b.min_ms},
                                  {"max_ms", b.max_ms},
                                  {"variance_ms2", b.variance_ms2},
                                  {"flops", b.flops},
                                  {"threads", kernel_threads()}});
  std::printf("median %.3f ms (min %.3f, max %.3f) over %zu runs, %.0f FLOPs\n", b.median_ms, b.min_ms, b.max_ms, rc.bench_repeats, b.flops);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Structured pruning of a toy Conformer with hard-concrete gates and layerwise distillation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  common_options common;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", common.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    s->add_option("--seed", common.seed, "Trainer seed (overrides the config)");
    s->add_option("--out", common.out, "Output directory")->capture_default_str();
  };
  prune_options prune;
  auto add_prune = [&](CLI::App* s) {
    s->add_option("--target-sparsity", prune.target, "Target sparsity in [0, 1)");
    s->add_option("--budget-mode", prune.mode, "params or flops");
    s->add_option("--teacher", prune.teacher, "Dense teacher checkpoint (trained on the fly when absent)");
  };

  auto* train_dense_cmd = app.add_subcommand("train-dense", "Pretrain the dense teacher");
  add_common(train_dense_cmd);

  auto* prune_cmd = app.add_subcommand("prune", "Learn gates and fine-tune against the teacher");
  add_common(prune_cmd);
  add_prune(prune_cmd);
  prune_cmd->add_flag("--no-kd", prune.no_kd, "Disable layerwise distillation");
  prune_cmd->add_flag("--head-only", prune.head_only, "Gate attention heads only");
  prune_cmd->add_flag("--no-hidden-masks", prune.no_hidden, "Disable global and local hidden-dim gates");

  extract_options ext;
  auto* extract_cmd = app.add_subcommand("extract", "Slice a masked model into a compact one");
  add_common(extract_cmd);
  extract_cmd->add_option("--model", ext.model, "Dense-layout model checkpoint")->required();
  extract_cmd->add_option("--masks", ext.masks, "Gate-logit or binary mask checkpoint")->required();
  extract_cmd->add_flag("--round-to-one", ext.round_to_one, "Drop fractional fold scales");
  extract_cmd->add_option("--trim", ext.trim, "Remove lowest-gate units until this exact sparsity is met");

  std::string model_path, masks_path;
  auto* eval_cmd = app.add_subcommand("evaluate", "Holdout frame accuracy and loss");
  add_common(eval_cmd);
  eval_cmd->add_option("--model", model_path, "Model checkpoint")->required();
  eval_cmd->add_option("--masks", masks_path, "Optional mask checkpoint for a dense-layout model");

  bool raw_norm = false;
  std::optional<std::size_t> finetune;
  auto* omp_cmd = app.add_subcommand("omp", "One-shot magnitude pruning baseline");
  add_common(omp_cmd);
  add_prune(omp_cmd);
  omp_cmd->add_flag("--raw-norm", raw_norm, "Rank by raw L2 norm instead of RMS");
  omp_cmd->add_option("--finetune-steps", finetune, "Fine-tune steps after pruning (default from config)");

  auto* report_cmd = app.add_subcommand("report", "Per-layer, per-module remaining ratios");
  add_common(report_cmd);
  report_cmd->add_option("--masks", masks_path, "Gate-logit or binary mask checkpoint")->required();

  std::optional<std::size_t> repeats;
  std::size_t batch = 8;
  auto* bench_cmd = app.add_subcommand("bench", "Forward-pass latency and FLOPs");
  add_common(bench_cmd);
  bench_cmd->add_option("--model", model_path, "Model checkpoint")->required();
  bench_cmd->add_option("--repeats", repeats, "Timed runs (>= 3)");
  bench_cmd->add_option("--batch", batch, "Sequences per forward pass")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (*train_dense_cmd) return cmd_train_dense(common);
    if (*prune_cmd) return cmd_prune(common, prune);
    if (*extract_cmd) return cmd_extract(common, ext);
    if (*eval_cmd) return cmd_evaluate(common, model_path, masks_path);
    if (*omp_cmd) return cmd_omp(common, prune, raw_norm, finetune);
    if (*report_cmd) return cmd_report(common, masks_path);
    if (*bench_cmd) return cmd_bench(common, model_path, repeats, batch);
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
