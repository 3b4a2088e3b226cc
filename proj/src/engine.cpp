#include "bevref/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "bevref/kernels.hpp"
#include "bevref/rng.hpp"
#include "bevref/supervision.hpp"

namespace bevref::train {

namespace {

constexpr double kWarmupFraction = 0.3;
constexpr double kLrFloorDivisor = 1000.0;

int warmup_steps(int total_steps) {
  return std::max(1, static_cast<int>(std::llround(kWarmupFraction * total_steps)));
}

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double one_cycle_lr(int step, int total_steps, double lr_max) {
  const int warmup = warmup_steps(total_steps);
  if (step < warmup) return lr_max * static_cast<double>(step) / warmup;
  const double progress =
      static_cast<double>(step - warmup) / std::max(1, total_steps - warmup);
  const double floor = lr_max / kLrFloorDivisor;
  return floor + (lr_max - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double one_cycle_beta1(int step, int total_steps, double lo, double hi) {
  const int warmup = warmup_steps(total_steps);
  if (step < warmup) return hi + (lo - hi) * static_cast<double>(step) / warmup;
  const double progress =
      static_cast<double>(step - warmup) / std::max(1, total_steps - warmup);
  return hi + (lo - hi) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void Adam::init(const model::ModelParams& params) {
  m.assign(params.entries.size(), {});
  v.assign(params.entries.size(), {});
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    m[i].assign(params.entries[i].second.size(), 0.0);
    v[i].assign(params.entries[i].second.size(), 0.0);
  }
  beta1_prod = 1.0;
  beta2_prod = 1.0;
}

void Adam::step(model::ModelParams& params, const std::vector<std::vector<double>>& grads,
                double lr, double beta1, double weight_decay) {
  beta1_prod *= beta1;
  beta2_prod *= beta2;
  const double m_corr = 1.0 / (1.0 - beta1_prod);
  const double v_corr = 1.0 / (1.0 - beta2_prod);
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    auto pd = params.entries[i].second.mutable_data();
    const auto& g = grads[i];
    auto& mi = m[i];
    auto& vi = v[i];
    for (std::size_t j = 0; j < pd.size(); ++j) {
      mi[j] = beta1 * mi[j] + (1.0 - beta1) * g[j];
      vi[j] = beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j];
      const double update = (mi[j] * m_corr) / (std::sqrt(vi[j] * v_corr) + eps);
      pd[j] -= lr * update + lr * weight_decay * pd[j];
    }
  }
}

TrainResult train(const std::vector<scene::Scenario>& dataset, const cfg::RunConfig& config,
                  std::ostream* log) {
  config.validate();
  if (dataset.empty()) throw train_error("training dataset is empty");
  const grid::GridSpec g = config.make_grid();
  const scene::Vocabulary vocab = scene::Vocabulary::standard();

  std::vector<model::ForwardInput> inputs;
  inputs.reserve(dataset.size());
  for (const auto& s : dataset) inputs.push_back(model::build_input(s, g, vocab, config));

  TrainResult result{model::ModelParams::init(config), {}};
  model::ModelParams& params = result.params;
  Adam adam;
  adam.init(params);

  const int n = static_cast<int>(dataset.size());
  const int steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const int total_steps = config.epochs * steps_per_epoch;
  result.curve.reserve(static_cast<std::size_t>(total_steps));

  std::vector<std::vector<double>> grad_acc(params.entries.size());
  for (std::size_t i = 0; i < params.entries.size(); ++i)
    grad_acc[i].assign(params.entries[i].second.size(), 0.0);

  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(config.seed ^ (0xE7037ED1A0B428DBull + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);

    double epoch_loss = 0.0;
    for (int b = 0; b < steps_per_epoch; ++b, ++step) {
      const int lo = b * config.batch_size;
      const int hi = std::min(n, lo + config.batch_size);
      const int count = hi - lo;
      for (auto& ga : grad_acc) std::fill(ga.begin(), ga.end(), 0.0);
      CurveRow row;
      row.step = step;
      for (int s = lo; s < hi; ++s) {
        const model::ForwardInput& in = inputs[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
        sup::LossBreakdown lb;
        try {
          const model::ForwardOutput out = model::forward(in, params, config, true);
          lb = sup::scenario_loss(out, in, config);
          backward(lb.total);
        } catch (const numeric_error& e) {
          throw train_error("training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        for (std::size_t i = 0; i < params.entries.size(); ++i) {
          const auto grad = params.entries[i].second.grad();
          if (!grad.empty())
            kernels::add(grad_acc[i].data(), grad.data(), grad_acc[i].data(), grad.size());
          params.entries[i].second.clear_grad();
        }
        row.hm += lb.hm_v;
        row.qp += lb.qp_v;
        row.cls += lb.cls_v;
        row.reg += lb.reg_v;
        row.total += lb.total_v;
      }
      const double inv = 1.0 / count;
      for (auto& ga : grad_acc) kernels::scale(ga.data(), inv, ga.data(), ga.size());
      row.hm *= inv;
      row.qp *= inv;
      row.cls *= inv;
      row.reg *= inv;
      row.total *= inv;
      row.lr = one_cycle_lr(step, total_steps, config.lr_max);
      const double beta1 =
          one_cycle_beta1(step, total_steps, config.momentum_lo, config.momentum_hi);
      adam.step(params, grad_acc, row.lr, beta1, config.weight_decay);
      if (!std::isfinite(row.total))
        throw train_error("training diverged at step " + std::to_string(step));
      epoch_loss += row.total;
      result.curve.push_back(row);
    }
    if (log)
      *log << "epoch " << epoch + 1 << "/" << config.epochs
           << " mean_loss=" << fmt2(epoch_loss / steps_per_epoch) << "\n";
  }
  return result;
}

std::string curve_to_json(const std::vector<CurveRow>& curve) {
  std::string out;
  for (const auto& r : curve) {
    out += "{\"step\":" + std::to_string(r.step) + ",\"lr\":" + fmt_g(r.lr) +
           ",\"heatmap\":" + fmt_g(r.hm) + ",\"query\":" + fmt_g(r.qp) +
           ",\"cls\":" + fmt_g(r.cls) + ",\"reg\":" + fmt_g(r.reg) +
           ",\"total\":" + fmt_g(r.total) + "}\n";
  }
  return out;
}

double EvalReport::accuracy(int geometry, int threshold) const {
  if (count == 0) return 0.0;
  return 100.0 * correct[geometry][threshold] / count;
}

EvalReport evaluate(const std::vector<scene::Scenario>& dataset, const model::ModelParams& params,
                    const cfg::RunConfig& config) {
  config.validate();
  const scene::Vocabulary vocab = scene::Vocabulary::standard();
  EvalReport r;
  int cat_count[scene::kCategoryCount] = {};
  int cat_correct[scene::kCategoryCount][2][2] = {};
  const double thresholds[2] = {0.25, 0.5};
  for (const auto& s : dataset) {
    const int ti = s.target_index();
    if (ti < 0) continue;
    const geo::Box3D pred = model::infer(s, params, vocab, config);
    const geo::Box3D& gt = s.objects[static_cast<std::size_t>(ti)].box;
    const double iou[2] = {geo::iou_bev(pred, gt), geo::iou_3d(pred, gt)};
    const int cat = static_cast<int>(s.objects[static_cast<std::size_t>(ti)].category);
    ++r.count;
    ++cat_count[cat];
    for (int gix = 0; gix < 2; ++gix)
      for (int t = 0; t < 2; ++t)
        if (iou[gix] >= thresholds[t]) {
          ++r.correct[gix][t];
          ++cat_correct[cat][gix][t];
        }
  }
  for (int c = 0; c < scene::kCategoryCount; ++c) {
    if (cat_count[c] == 0) continue;
    EvalReport::CategoryRow row;
    row.category = static_cast<scene::Category>(c);
    row.count = cat_count[c];
    for (int gix = 0; gix < 2; ++gix)
      for (int t = 0; t < 2; ++t) row.correct[gix][t] = cat_correct[c][gix][t];
    r.categories.push_back(row);
  }
  return r;
}

namespace {

std::string accuracy_cells(const EvalReport& r, const int correct[2][2], int count) {
  (void)r;
  std::string out;
  char buf[16];
  for (int gix = 0; gix < 2; ++gix)
    for (int t = 0; t < 2; ++t) {
      const double acc = count == 0 ? 0.0 : 100.0 * correct[gix][t] / count;
      std::snprintf(buf, sizeof(buf), "  %8.2f", acc);
      out += buf;
    }
  return out;
}

}  // namespace

std::string report_table(const EvalReport& r) {
  std::string out = "scope         n  bev@0.25   bev@0.5   3d@0.25    3d@0.5\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-10s %4d", "overall", r.count);
  out += buf;
  out += accuracy_cells(r, r.correct, r.count) + "\n";
  for (const auto& row : r.categories) {
    std::snprintf(buf, sizeof(buf), "%-10s %4d", scene::to_string(row.category), row.count);
    out += buf;
    out += accuracy_cells(r, row.correct, row.count) + "\n";
  }
  return out;
}

namespace {

std::string report_json_row(const char* scope, const char* category, int count,
                            const int correct[2][2]) {
  auto acc = [&](int gix, int t) {
    return fmt2(count == 0 ? 0.0 : 100.0 * correct[gix][t] / count);
  };
  std::string out = std::string("{\"scope\":\"") + scope + "\"";
  if (category) out += std::string(",\"category\":\"") + category + "\"";
  out += ",\"scenarios\":" + std::to_string(count);
  out += ",\"acc_bev_0.25\":" + acc(0, 0) + ",\"acc_bev_0.5\":" + acc(0, 1);
  out += ",\"acc_3d_0.25\":" + acc(1, 0) + ",\"acc_3d_0.5\":" + acc(1, 1);
  out += "}\n";
  return out;
}

}  // namespace

std::string report_json(const EvalReport& r) {
  std::string out = report_json_row("overall", nullptr, r.count, r.correct);
  for (const auto& row : r.categories)
    out += report_json_row("category", scene::to_string(row.category), row.count, row.correct);
  return out;
}

AblationResult ablation_run(const std::vector<scene::Scenario>& train_set,
                            const std::vector<scene::Scenario>& test_set,
                            const cfg::RunConfig& base, const std::vector<std::uint64_t>& seeds,
                            std::ostream* log) {
  if (seeds.empty()) throw train_error("ablation requires at least one seed");
  const struct {
    const char* name;
    bool selection, context;
  } combos[4] = {{"full", true, true},
                 {"no-selection", false, true},
                 {"no-context-supervision", true, false},
                 {"neither", false, false}};
  AblationResult result;
  result.seeds = seeds;
  for (const auto& combo : combos) {
    AblationRow row;
    row.name = combo.name;
    row.selection = combo.selection;
    row.context = combo.context;
    for (const std::uint64_t seed : seeds) {
      cfg::RunConfig c = base;
      c.token_selection = combo.selection;
      c.context_supervision = combo.context;
      c.seed = seed;
      if (log) *log << "ablation " << combo.name << " seed " << seed << ": training\n";
      const TrainResult tr = train(train_set, c, nullptr);
      const EvalReport er = evaluate(test_set, tr.params, c);
      row.acc25 += er.accuracy(1, 0);
      row.acc50 += er.accuracy(1, 1);
      if (log)
        *log << "ablation " << combo.name << " seed " << seed << ": acc@0.25 "
             << fmt2(er.accuracy(1, 0)) << " acc@0.5 " << fmt2(er.accuracy(1, 1)) << "\n";
    }
    row.acc25 /= static_cast<double>(seeds.size());
    row.acc50 /= static_cast<double>(seeds.size());
    result.rows.push_back(row);
  }
  return result;
}

std::string ablation_table(const AblationResult& r) {
  std::string out = "variant                  acc@0.25  acc@0.5   (3D IoU, mean over " +
                    std::to_string(r.seeds.size()) + " seeds)\n";
  char buf[80];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof(buf), "%-24s %8s  %8s\n", row.name.c_str(), fmt2(row.acc25).c_str(),
                  fmt2(row.acc50).c_str());
    out += buf;
  }
  return out;
}

std::string ablation_json(const AblationResult& r) {
  std::string out;
  for (const auto& row : r.rows) {
    out += "{\"variant\":\"" + row.name + "\",\"token_selection\":" +
           (row.selection ? "true" : "false") + ",\"context_supervision\":" +
           (row.context ? "true" : "false") + ",\"acc_3d_0.25\":" + fmt2(row.acc25) +
           ",\"acc_3d_0.5\":" + fmt2(row.acc50) + "}\n";
  }
  return out;
}

}  // namespace bevref::train
