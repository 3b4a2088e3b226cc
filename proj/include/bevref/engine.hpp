#pragma once

#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevref/config.hpp"
#include "bevref/model.hpp"
#include "bevref/scene.hpp"

// Training loop (Adam with decoupled weight decay, one-cycle learning rate,
// anti-cycled momentum) and Acc@IoU evaluation, plus the four-way ablation
// driver over the token-selection and context-supervision switches.

namespace bevref::train {

struct train_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Linear 0 -> lr_max over the first 30% of steps, then cosine decay to
// lr_max/1000.
double one_cycle_lr(int step, int total_steps, double lr_max);
// Momentum runs against the lr cycle: hi -> lo over warmup, back to hi.
double one_cycle_beta1(int step, int total_steps, double lo, double hi);

struct Adam {
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<std::vector<double>> m, v;
  double beta1_prod = 1.0;
  double beta2_prod = 1.0;

  void init(const model::ModelParams& params);
  // grads[i] pairs with params.entries[i]; beta1 may change per step, bias
  // correction tracks the running product. Weight decay is decoupled.
  void step(model::ModelParams& params, const std::vector<std::vector<double>>& grads, double lr,
            double beta1, double weight_decay);
};

struct CurveRow {
  int step = 0;
  double lr = 0.0;
  double hm = 0.0, qp = 0.0, cls = 0.0, reg = 0.0, total = 0.0;
};

struct TrainResult {
  model::ModelParams params;
  std::vector<CurveRow> curve;
};

// Deterministic given config.seed: epoch shuffles, batch order and gradient
// accumulation order are all fixed. Non-finite loss aborts with the step
// index. log (optional) receives one line per epoch.
TrainResult train(const std::vector<scene::Scenario>& dataset, const cfg::RunConfig& config,
                  std::ostream* log = nullptr);

std::string curve_to_json(const std::vector<CurveRow>& curve);

struct EvalReport {
  int count = 0;
  // geometry 0 = BEV, 1 = 3D; threshold 0 = 0.25, 1 = 0.5
  int correct[2][2] = {{0, 0}, {0, 0}};
  struct CategoryRow {
    scene::Category category;
    int count = 0;
    int correct[2][2] = {{0, 0}, {0, 0}};
  };
  std::vector<CategoryRow> categories;  // non-empty categories only

  double accuracy(int geometry, int threshold) const;
};

EvalReport evaluate(const std::vector<scene::Scenario>& dataset, const model::ModelParams& params,
                    const cfg::RunConfig& config);

std::string report_table(const EvalReport& r);
std::string report_json(const EvalReport& r);

struct AblationRow {
  std::string name;
  bool selection = true;
  bool context = true;
  double acc25 = 0.0;  // mean 3D Acc@0.25 over seeds, percent
  double acc50 = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // full, no-selection, no-context-supervision, neither
  std::vector<std::uint64_t> seeds;
};

AblationResult ablation_run(const std::vector<scene::Scenario>& train_set,
                            const std::vector<scene::Scenario>& test_set,
                            const cfg::RunConfig& base, const std::vector<std::uint64_t>& seeds,
                            std::ostream* log = nullptr);

std::string ablation_table(const AblationResult& r);
std::string ablation_json(const AblationResult& r);

}  // namespace bevref::train
