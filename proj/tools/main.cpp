#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bevref/config.hpp"
#include "bevref/engine.hpp"
#include "bevref/gradcheck.hpp"
#include "bevref/model.hpp"
#include "bevref/scene.hpp"
#include "bevref/supervision.hpp"
#include "bevref/tensor.hpp"

// Exit codes: 0 success, 1 usage (bad flags, unknown --set key, bad preset),
// 2 IO/parse (files missing or malformed, config file errors carry
// file:line), 3 numeric failure (divergence, gradient check failure,
// internal invariant breaks).

namespace {

using namespace bevref;

struct usage_failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigArgs {
  std::string config_path;
  std::string preset_name;
  std::vector<std::string> sets;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config_path, "flat key=value config file");
  cmd->add_option("--preset", a.preset_name,
                  "base preset before file/overrides: desk (default) or paper");
  cmd->add_option("--set", a.sets, "override as key=value, repeatable, wins over the file");
}

cfg::RunConfig apply_overrides(cfg::RunConfig c, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw usage_failure("--set expects key=value, got '" + kv + "'");
    try {
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    } catch (const cfg::config_error& e) {
      throw usage_failure(e.what());
    }
  }
  return c;
}

cfg::RunConfig resolve_config(const ConfigArgs& a) {
  cfg::RunConfig c;
  if (!a.preset_name.empty()) {
    try {
      c = cfg::preset(a.preset_name);
    } catch (const cfg::config_error& e) {
      throw usage_failure(e.what());
    }
  }
  if (!a.config_path.empty()) c = cfg::load_config_file(a.config_path, c);
  return apply_overrides(c, a.sets);
}

int run_gen(std::uint64_t seed, int count, const std::string& difficulty,
            const std::string& out) {
  if (count <= 0) throw usage_failure("count must be positive");
  const scene::Difficulty d =
      difficulty == "easy" ? scene::Difficulty::easy : scene::Difficulty::ambiguous;
  const auto scenarios = scene::generate(seed, count, d);
  scene::save_dataset(scenarios, out);

  int obj_min = 1 << 30, obj_max = 0, dis_min = 1 << 30, dis_max = 0;
  long obj_sum = 0, dis_sum = 0;
  for (const auto& s : scenarios) {
    const int n_obj = static_cast<int>(s.objects.size());
    int n_dis = 0;
    for (const auto& o : s.objects)
      if (o.role == scene::Role::ambiguous) ++n_dis;
    obj_min = std::min(obj_min, n_obj);
    obj_max = std::max(obj_max, n_obj);
    obj_sum += n_obj;
    dis_min = std::min(dis_min, n_dis);
    dis_max = std::max(dis_max, n_dis);
    dis_sum += n_dis;
  }
  const double n = static_cast<double>(scenarios.size());
  std::printf("wrote %zu scenarios to %s\n", scenarios.size(), out.c_str());
  std::printf("difficulty: %s\n", difficulty.c_str());
  std::printf("objects per scenario: min %d mean %.2f max %d\n", obj_min, obj_sum / n, obj_max);
  std::printf("distractors per scenario: min %d mean %.2f max %d\n", dis_min, dis_sum / n,
              dis_max);
  return 0;
}

int run_train(const ConfigArgs& ca, const std::string& data, const std::string& out_checkpoint,
              const std::string& curve_path) {
  const cfg::RunConfig c = resolve_config(ca);
  const auto dataset = scene::load_dataset(data);
  const train::TrainResult result = train::train(dataset, c, &std::cerr);
  model::save_checkpoint(out_checkpoint, result.params, c);
  if (!curve_path.empty()) {
    std::ofstream curve(curve_path);
    if (!curve) throw scene::parse_error("cannot open '" + curve_path + "' for writing");
    curve << train::curve_to_json(result.curve);
  }
  if (!result.curve.empty())
    std::printf("final step %d total loss %.4f\n", result.curve.back().step,
                result.curve.back().total);
  std::printf("checkpoint written to %s\n", out_checkpoint.c_str());
  return 0;
}

int run_eval(const std::vector<std::string>& sets, const std::string& data,
             const std::string& checkpoint, bool json) {
  auto [params, config] = model::load_checkpoint(checkpoint);
  config = apply_overrides(config, sets);
  const auto dataset = scene::load_dataset(data);
  const train::EvalReport report = train::evaluate(dataset, params, config);
  std::cout << (json ? train::report_json(report) : train::report_table(report));
  return 0;
}

int run_label(const std::vector<std::string>& sets, const std::string& data,
              const std::string& checkpoint, std::optional<double> tau) {
  auto [params, config] = model::load_checkpoint(checkpoint);
  config = apply_overrides(config, sets);
  if (tau) config.tau = *tau;
  if (config.tau < 0.0) throw usage_failure("tau must be nonnegative");
  const auto dataset = scene::load_dataset(data);
  const grid::GridSpec g = config.make_grid();
  const scene::Vocabulary vocab = scene::Vocabulary::standard();
  char buf[64];
  for (const auto& s : dataset) {
    const model::ForwardInput in = model::build_input(s, g, vocab, config);
    const model::ForwardOutput out = model::forward(in, params, config, true);
    const auto qpos = sup::query_positions(out.proposal.cells, g);
    const sup::Assignment a = sup::assign(qpos, in.boxes, in.target_index, config.tau);
    std::string line = "{\"id\":\"" + s.id + "\",\"queries\":[";
    for (std::size_t q = 0; q < a.per_query.size(); ++q) {
      const auto& m = a.per_query[q];
      if (q) line += ",";
      line += "{\"query\":" + std::to_string(q) +
              ",\"cell\":" + std::to_string(out.proposal.cells[q]);
      if (m.object < 0) {
        line += ",\"object\":-1,\"role\":\"unmatched\"}";
      } else {
        std::snprintf(buf, sizeof(buf), "%.6f", m.distance);
        line += ",\"object\":" + std::to_string(m.object) + ",\"distance\":" + buf +
                ",\"role\":\"" + (m.is_target ? "target" : "referential") + "\"}";
      }
    }
    line += "],\"referential_objects\":[";
    for (std::size_t i = 0; i < a.referential.size(); ++i) {
      if (i) line += ",";
      line += std::to_string(a.referential[i]);
    }
    line += "]}";
    std::cout << line << "\n";
  }
  return 0;
}

int run_ablate(const ConfigArgs& ca, const std::string& train_data, const std::string& test_data,
               int n_seeds, bool json) {
  if (n_seeds <= 0) throw usage_failure("seeds must be positive");
  const cfg::RunConfig base = resolve_config(ca);
  const auto train_set = scene::load_dataset(train_data);
  const auto test_set = scene::load_dataset(test_data);
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < n_seeds; ++i) seeds.push_back(base.seed + static_cast<std::uint64_t>(i));
  const train::AblationResult result =
      train::ablation_run(train_set, test_set, base, seeds, &std::cerr);
  std::cout << (json ? train::ablation_json(result) : train::ablation_table(result));
  return 0;
}

int run_gradcheck(std::uint64_t seed) {
  auto rows = diag::op_gradient_checks(seed);
  rows.push_back(diag::loss_gradient_check(seed));
  std::cout << diag::check_table(rows);
  if (!diag::all_pass(rows)) {
    std::cerr << "error: gradient check failed\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BEV LiDAR visual grounding: data generation, training, evaluation"};
  app.require_subcommand(1);

  std::uint64_t gen_seed = 1;
  int gen_count = 128;
  std::string gen_difficulty = "ambiguous";
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "generate a synthetic scenario dataset");
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--count", gen_count, "number of scenarios")->capture_default_str();
  gen->add_option("--difficulty", gen_difficulty, "easy or ambiguous")
      ->check(CLI::IsMember({"easy", "ambiguous"}))
      ->capture_default_str();
  gen->add_option("--out", gen_out, "output dataset path")->required();

  ConfigArgs train_cfg;
  std::string train_data, train_out, train_curve;
  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  add_config_flags(train_cmd, train_cfg);
  train_cmd->add_option("--data", train_data, "training dataset")->required();
  train_cmd->add_option("--out-checkpoint", train_out, "checkpoint output path")->required();
  train_cmd->add_option("--curve", train_curve, "write per-step loss rows to this path");

  std::vector<std::string> eval_sets;
  std::string eval_data, eval_ckpt;
  bool eval_json = false;
  auto* eval_cmd = app.add_subcommand("eval", "report Acc@IoU on a dataset");
  eval_cmd->add_option("--data", eval_data, "evaluation dataset")->required();
  eval_cmd->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
  eval_cmd->add_option("--set", eval_sets, "override checkpoint config, key=value");
  eval_cmd->add_flag("--json", eval_json, "line-delimited JSON instead of the table");

  std::vector<std::string> label_sets;
  std::string label_data, label_ckpt;
  double label_tau = 0.0;
  auto* label_cmd = app.add_subcommand("label", "emit query-to-object assignments per scenario");
  label_cmd->add_option("--data", label_data, "dataset to label")->required();
  label_cmd->add_option("--checkpoint", label_ckpt, "trained checkpoint")->required();
  auto* tau_opt =
      label_cmd->add_option("--tau", label_tau, "match radius in meters, default from checkpoint");
  label_cmd->add_option("--set", label_sets, "override checkpoint config, key=value");

  ConfigArgs ablate_cfg;
  std::string ablate_train, ablate_test;
  int ablate_seeds = 3;
  bool ablate_json = false;
  auto* ablate_cmd =
      app.add_subcommand("ablate", "train the four switch combinations and compare accuracy");
  add_config_flags(ablate_cmd, ablate_cfg);
  ablate_cmd->add_option("--train-data", ablate_train, "training dataset")->required();
  ablate_cmd->add_option("--test-data", ablate_test, "held-out dataset")->required();
  ablate_cmd->add_option("--seeds", ablate_seeds, "number of seeds per combination")
      ->capture_default_str();
  ablate_cmd->add_flag("--json", ablate_json, "line-delimited JSON instead of the table");

  std::uint64_t gc_seed = 1;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference audit of all gradients");
  gc_cmd->add_option("--seed", gc_seed, "randomized-input seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return run_gen(gen_seed, gen_count, gen_difficulty, gen_out);
    if (train_cmd->parsed()) return run_train(train_cfg, train_data, train_out, train_curve);
    if (eval_cmd->parsed()) return run_eval(eval_sets, eval_data, eval_ckpt, eval_json);
    if (label_cmd->parsed())
      return run_label(label_sets, label_data, label_ckpt,
                       tau_opt->count() ? std::optional<double>(label_tau) : std::nullopt);
    if (ablate_cmd->parsed())
      return run_ablate(ablate_cfg, ablate_train, ablate_test, ablate_seeds, ablate_json);
    if (gc_cmd->parsed()) return run_gradcheck(gc_seed);
  } catch (const usage_failure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const train::train_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const sup::assignment_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const shape_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
