#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "bevref/featurize.hpp"

namespace bevref::cfg {

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat run configuration. Precedence: built-in desk defaults < config file
// < command-line key=value overrides. Field names double as config keys.
struct RunConfig {
  std::uint64_t seed = 1;

  double x_min = -32.0, x_max = 32.0;
  double y_min = -32.0, y_max = 32.0;
  double z_min = -5.8, z_max = 2.2;
  double voxel_x = 1.0, voxel_y = 1.0, voxel_z = 8.0;

  int embed_dim = 32;    // d, divisible by 4 (2D sinusoidal PE) and by heads
  int num_tokens = 64;   // V, visual tokens kept by selection
  int num_queries = 16;  // K
  double tau = 2.0;      // query-object match threshold, meters

  double lambda_heatmap = 1.0;
  double lambda_query = 0.5;
  double lambda_cls = 0.5;
  double lambda_reg = 1.25;

  int encoder_layers = 1;
  int decoder_layers = 3;
  int heads = 4;
  int max_text_tokens = 12;

  int epochs = 40;
  int batch_size = 16;
  double lr_max = 4e-4;
  double weight_decay = 0.01;
  double momentum_lo = 0.85;
  double momentum_hi = 0.95;

  // Ablation switches. token_selection off turns every BEV cell into a visual
  // token and drops the heatmap loss; context_supervision off restricts box
  // regression to target-matched queries.
  bool token_selection = true;
  bool context_supervision = true;

  static RunConfig desk();   // the defaults above
  static RunConfig paper();  // full-scale values from the source experiments

  grid::GridSpec make_grid() const;
  void validate() const;  // throws config_error

  // key=value application; unknown key or bad value throws config_error.
  void set(const std::string& key, const std::string& value);

  std::string to_json() const;                       // single-line echo for checkpoints
  static RunConfig from_json(const std::string& j);  // throws config_error
};

RunConfig load_config_file(const std::string& path, RunConfig base = RunConfig::desk());
RunConfig preset(const std::string& name);  // "desk" or "paper"

}  // namespace bevref::cfg
