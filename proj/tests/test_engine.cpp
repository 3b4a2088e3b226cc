#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "bevref/engine.hpp"
#include "bevref/geometry.hpp"
#include "bevref/model.hpp"
#include "bevref/scene.hpp"

using namespace bevref;
using namespace bevref::train;

namespace {

cfg::RunConfig micro_config() {
  cfg::RunConfig c;
  c.voxel_x = 4;
  c.voxel_y = 4;  // 16x16 grid over the default +-32 m range
  c.embed_dim = 8;
  c.num_tokens = 8;
  c.num_queries = 4;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.heads = 2;
  c.tau = 4.0;
  c.epochs = 2;
  c.batch_size = 2;
  return c;
}

}  // namespace

TEST_CASE("one-cycle learning rate endpoints and shape") {
  const int total = 200;
  const double lr_max = 4e-4;
  CHECK(one_cycle_lr(0, total, lr_max) == 0.0);
  // warmup is 30% of steps; the boundary step carries exactly lr_max
  CHECK(one_cycle_lr(60, total, lr_max) == lr_max);
  CHECK(one_cycle_lr(total, total, lr_max) ==
        doctest::Approx(lr_max / 1000.0).epsilon(1e-12));

  for (int s = 1; s <= 60; ++s)
    CHECK(one_cycle_lr(s, total, lr_max) >= one_cycle_lr(s - 1, total, lr_max));
  for (int s = 61; s < total; ++s) {
    CHECK(one_cycle_lr(s, total, lr_max) <= one_cycle_lr(s - 1, total, lr_max));
    CHECK(one_cycle_lr(s, total, lr_max) >= lr_max / 1000.0);
  }
}

TEST_CASE("momentum anti-cycles against the learning rate") {
  const int total = 100;
  const double lo = 0.85, hi = 0.95;
  CHECK(one_cycle_beta1(0, total, lo, hi) == hi);
  CHECK(one_cycle_beta1(30, total, lo, hi) == doctest::Approx(lo).epsilon(1e-12));
  CHECK(one_cycle_beta1(total, total, lo, hi) == doctest::Approx(hi).epsilon(1e-12));
  for (int s = 0; s <= total; ++s) {
    const double b = one_cycle_beta1(s, total, lo, hi);
    CHECK(b >= lo - 1e-12);
    CHECK(b <= hi + 1e-12);
  }
}

TEST_CASE("adam zero-gradient step moves parameters only through weight decay") {
  cfg::RunConfig c = micro_config();
  model::ModelParams params = model::ModelParams::init(c);
  std::vector<double> before;
  for (const auto& [name, t] : params.entries)
    before.insert(before.end(), t.data().begin(), t.data().end());

  Adam adam;
  adam.init(params);
  std::vector<std::vector<double>> zero_grads(params.entries.size());
  for (std::size_t i = 0; i < params.entries.size(); ++i)
    zero_grads[i].assign(params.entries[i].second.size(), 0.0);

  // with weight decay 0: bitwise unchanged
  adam.step(params, zero_grads, 1e-3, 0.9, 0.0);
  std::size_t off = 0;
  for (const auto& [name, t] : params.entries) {
    for (double v : t.data()) CHECK(v == before[off++]);
  }

  // with weight decay: every parameter shrinks by exactly lr*wd*p
  adam.init(params);
  adam.step(params, zero_grads, 0.1, 0.9, 0.01);
  off = 0;
  for (const auto& [name, t] : params.entries)
    for (double v : t.data()) {
      const double want = before[off] - 0.1 * 0.01 * before[off];
      CHECK(v == doctest::Approx(want).epsilon(1e-15));
      ++off;
    }
}

TEST_CASE("adam first step matches the scalar hand computation") {
  cfg::RunConfig c = micro_config();
  model::ModelParams params = model::ModelParams::init(c);
  const double p0 = params.entries[0].second.at(0);

  Adam adam;
  adam.init(params);
  std::vector<std::vector<double>> grads(params.entries.size());
  for (std::size_t i = 0; i < params.entries.size(); ++i)
    grads[i].assign(params.entries[i].second.size(), 0.0);
  grads[0][0] = 1.0;

  adam.step(params, grads, 0.1, 0.9, 0.0);
  // m-hat = 1, v-hat = 1 after bias correction, so the update is 1/(1+eps)
  const double want = p0 - 0.1 / (1.0 + 1e-8);
  CHECK(params.entries[0].second.at(0) == doctest::Approx(want).epsilon(1e-15));
  // second moment state carries over to the next call
  adam.step(params, grads, 0.1, 0.9, 0.0);
  CHECK(adam.beta1_prod == doctest::Approx(0.81).epsilon(1e-15));
}

TEST_CASE("training is deterministic and records one curve row per step") {
  const auto data = scene::generate(301, 4, scene::Difficulty::easy);
  const cfg::RunConfig c = micro_config();

  const TrainResult a = bevref::train::train(data, c);
  const TrainResult b = bevref::train::train(data, c);
  REQUIRE(a.curve.size() == b.curve.size());
  CHECK(static_cast<int>(a.curve.size()) == c.epochs * 2);  // 4 scenarios / batch 2
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    CHECK(a.curve[i].step == static_cast<int>(i));
    CHECK(a.curve[i].total == b.curve[i].total);
    CHECK(a.curve[i].lr == b.curve[i].lr);
  }
  REQUIRE(a.params.count() == b.params.count());
  for (std::size_t i = 0; i < a.params.count(); ++i) {
    const auto& ta = a.params.entries[i].second;
    const auto& tb = b.params.entries[i].second;
    CHECK(std::memcmp(ta.data().data(), tb.data().data(), ta.size() * sizeof(double)) == 0);
  }

  // a different seed trains differently
  cfg::RunConfig c2 = c;
  c2.seed = 77;
  const TrainResult d = bevref::train::train(data, c2);
  CHECK(d.curve.back().total != a.curve.back().total);

  CHECK_THROWS_AS(bevref::train::train({}, c), train_error);
}

TEST_CASE("log stream receives one line per epoch") {
  const auto data = scene::generate(301, 4, scene::Difficulty::easy);
  std::ostringstream log;
  bevref::train::train(data, micro_config(), &log);
  const std::string s = log.str();
  int lines = 0;
  for (char ch : s) lines += ch == '\n';
  CHECK(lines == micro_config().epochs);
  CHECK(s.find("epoch 1/2") != std::string::npos);
}

TEST_CASE("single-scenario overfit drops the loss by an order of magnitude") {
  // full-size model: the micro grid lacks the capacity for this drop
  const auto data = scene::generate(5, 1, scene::Difficulty::easy);
  cfg::RunConfig c;
  c.batch_size = 1;
  c.epochs = 200;  // 200 steps on one scenario
  const TrainResult r = bevref::train::train(data, c);
  REQUIRE(r.curve.size() == 200);
  CHECK(r.curve.back().total <= r.curve[1].total / 10.0);

  // under a 20-step smoothing window the curve decreases monotonically
  // (small slack absorbs sub-1e-3 wiggles near the floor)
  std::vector<double> smoothed;
  for (std::size_t i = 19; i < r.curve.size(); ++i) {
    double acc = 0.0;
    for (std::size_t j = i - 19; j <= i; ++j) acc += r.curve[j].total;
    smoothed.push_back(acc / 20.0);
  }
  for (std::size_t i = 1; i < smoothed.size(); ++i)
    CHECK(smoothed[i] <= smoothed[i - 1] + 0.01);
  CHECK(smoothed.back() < smoothed.front() / 5.0);
}

TEST_CASE("longer single-scenario overfit localizes the box") {
  const auto data = scene::generate(5, 1, scene::Difficulty::easy);
  cfg::RunConfig c;
  c.batch_size = 1;
  c.epochs = 500;
  const TrainResult r = bevref::train::train(data, c);
  const geo::Box3D pred =
      model::infer(data[0], r.params, scene::Vocabulary::standard(), c);
  const geo::Box3D& gt = data[0].objects[static_cast<std::size_t>(data[0].target_index())].box;
  CHECK(geo::iou_3d(pred, gt) > 0.5);
}

TEST_CASE("evaluation agrees with per-scenario recomputation") {
  const auto data = scene::generate(303, 6, scene::Difficulty::easy);
  const cfg::RunConfig c = micro_config();
  const model::ModelParams params = model::ModelParams::init(c);
  const scene::Vocabulary vocab = scene::Vocabulary::standard();

  const EvalReport rep = evaluate(data, params, c);
  CHECK(rep.count == 6);

  int want[2][2] = {{0, 0}, {0, 0}};
  int cat_counts[scene::kCategoryCount] = {};
  for (const auto& s : data) {
    const geo::Box3D pred = model::infer(s, params, vocab, c);
    const geo::Box3D& gt = s.objects[static_cast<std::size_t>(s.target_index())].box;
    const double ious[2] = {geo::iou_bev(pred, gt), geo::iou_3d(pred, gt)};
    const double thr[2] = {0.25, 0.5};
    for (int gix = 0; gix < 2; ++gix)
      for (int t = 0; t < 2; ++t) want[gix][t] += ious[gix] >= thr[t];
    ++cat_counts[static_cast<int>(s.objects[static_cast<std::size_t>(s.target_index())].category)];
  }
  for (int gix = 0; gix < 2; ++gix)
    for (int t = 0; t < 2; ++t) CHECK(rep.correct[gix][t] == want[gix][t]);

  // category rows: only populated categories, counts matching
  int total_by_cat = 0;
  for (const auto& row : rep.categories) {
    CHECK(row.count > 0);
    CHECK(row.count == cat_counts[static_cast<int>(row.category)]);
    total_by_cat += row.count;
  }
  CHECK(total_by_cat == rep.count);

  // threshold monotonicity on the accuracy surface
  CHECK(rep.accuracy(0, 1) <= rep.accuracy(0, 0));
  CHECK(rep.accuracy(1, 1) <= rep.accuracy(1, 0));
}

TEST_CASE("report fixture: ious 0.6, 0.4, 0.26") {
  EvalReport r;
  r.count = 3;
  // all three clear 0.25; only the 0.6 clears 0.5 (same in both geometries)
  r.correct[0][0] = 3;
  r.correct[0][1] = 1;
  r.correct[1][0] = 3;
  r.correct[1][1] = 1;
  EvalReport::CategoryRow row;
  row.category = scene::Category::car;
  row.count = 3;
  std::memcpy(row.correct, r.correct, sizeof row.correct);
  r.categories.push_back(row);

  CHECK(r.accuracy(1, 0) == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(r.accuracy(1, 1) == doctest::Approx(100.0 / 3.0).epsilon(1e-12));

  const std::string table = report_table(r);
  CHECK(table.find("overall") != std::string::npos);
  CHECK(table.find("33.33") != std::string::npos);
  CHECK(table.find("100.00") != std::string::npos);
  CHECK(table.find("car") != std::string::npos);
  CHECK(table.find("pedestrian") == std::string::npos);  // empty rows omitted

  const std::string json = report_json(r);
  CHECK(json.find("\"acc_3d_0.5\":33.33") != std::string::npos);
  CHECK(json.find("\"acc_3d_0.25\":100.00") != std::string::npos);
  CHECK(json.find("\"scope\":\"overall\"") != std::string::npos);
}

TEST_CASE("five-scenario report matches the hand computation") {
  // cars with 3d ious {0.6, 0.4, 0.26}, pedestrians {0.9, 0.1}; bev ious equal
  EvalReport r;
  r.count = 5;
  r.correct[0][0] = 4;  // @0.25: all but the 0.1
  r.correct[0][1] = 2;  // @0.5: 0.6 and 0.9
  r.correct[1][0] = 4;
  r.correct[1][1] = 2;
  EvalReport::CategoryRow cars;
  cars.category = scene::Category::car;
  cars.count = 3;
  cars.correct[0][0] = cars.correct[1][0] = 3;
  cars.correct[0][1] = cars.correct[1][1] = 1;
  EvalReport::CategoryRow peds;
  peds.category = scene::Category::pedestrian;
  peds.count = 2;
  peds.correct[0][0] = peds.correct[1][0] = 1;
  peds.correct[0][1] = peds.correct[1][1] = 1;
  r.categories = {cars, peds};

  CHECK(r.accuracy(1, 0) == doctest::Approx(80.0).epsilon(1e-12));
  CHECK(r.accuracy(1, 1) == doctest::Approx(40.0).epsilon(1e-12));

  const std::string table = report_table(r);
  // overall 80/40, cars 100/33.33, pedestrians 50/50, in a fixed column order
  CHECK(table.find("overall       5     80.00     40.00     80.00     40.00") !=
        std::string::npos);
  CHECK(table.find("car           3    100.00     33.33    100.00     33.33") !=
        std::string::npos);
  CHECK(table.find("pedestrian    2     50.00     50.00     50.00     50.00") !=
        std::string::npos);
}

TEST_CASE("curve serialization carries every component") {
  std::vector<CurveRow> curve(2);
  curve[0] = {0, 1e-4, 4.5, 1.0, 1.1, 0.8, 7.0};
  curve[1] = {1, 2e-4, 4.0, 0.9, 1.0, 0.7, 6.3};
  const std::string j = curve_to_json(curve);
  CHECK(j.find("\"step\":0") != std::string::npos);
  CHECK(j.find("\"heatmap\":") != std::string::npos);
  CHECK(j.find("\"query\":") != std::string::npos);
  CHECK(j.find("\"cls\":") != std::string::npos);
  CHECK(j.find("\"reg\":") != std::string::npos);
  CHECK(j.find("\"total\":") != std::string::npos);
  int lines = 0;
  for (char ch : j) lines += ch == '\n';
  CHECK(lines == 2);
}

TEST_CASE("ablation runs all four switch combinations") {
  const auto data = scene::generate(304, 2, scene::Difficulty::ambiguous);
  cfg::RunConfig c = micro_config();
  c.epochs = 1;
  const AblationResult r = ablation_run(data, data, c, {c.seed});
  REQUIRE(r.rows.size() == 4);
  CHECK(r.rows[0].name == "full");
  CHECK(r.rows[0].selection);
  CHECK(r.rows[0].context);
  CHECK(r.rows[1].name == "no-selection");
  CHECK(!r.rows[1].selection);
  CHECK(r.rows[1].context);
  CHECK(r.rows[2].name == "no-context-supervision");
  CHECK(r.rows[2].selection);
  CHECK(!r.rows[2].context);
  CHECK(r.rows[3].name == "neither");
  CHECK(!r.rows[3].selection);
  CHECK(!r.rows[3].context);
  for (const auto& row : r.rows) {
    CHECK(row.acc25 >= 0.0);
    CHECK(row.acc25 <= 100.0);
    CHECK(row.acc50 <= row.acc25 + 1e-12);
  }
  const std::string table = ablation_table(r);
  for (const char* name : {"full", "no-selection", "no-context-supervision", "neither"})
    CHECK(table.find(name) != std::string::npos);
  CHECK_THROWS_AS(ablation_run(data, data, c, {}), train_error);
}
