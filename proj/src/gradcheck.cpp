#include "bevref/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <utility>

#include "bevref/config.hpp"
#include "bevref/featurize.hpp"
#include "bevref/geometry.hpp"
#include "bevref/model.hpp"
#include "bevref/rng.hpp"
#include "bevref/scene.hpp"
#include "bevref/supervision.hpp"
#include "bevref/tensor.hpp"

namespace bevref::diag {

namespace {

constexpr double kStep = 1e-5;

std::vector<double> rand_values(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

Tensor rand_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return Tensor::from_data(std::move(shape), rand_values(rng, n, lo, hi));
}

// Magnitudes in [margin, 1], either sign; keeps relu/abs kinks and clamp
// edges farther away than any finite-difference step.
Tensor rand_away_from_zero(Rng& rng, std::vector<int> shape, double margin) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  std::vector<double> v(n);
  for (auto& x : v) {
    x = rng.uniform(margin, 1.0);
    if (rng.next_double() < 0.5) x = -x;
  }
  return Tensor::from_data(std::move(shape), std::move(v));
}

CheckRow make_row(std::string name, double err, double tol) {
  CheckRow r;
  r.name = std::move(name);
  r.max_rel_err = err;
  r.tol = tol;
  r.pass = err < tol;
  return r;
}

}  // namespace

std::vector<CheckRow> op_gradient_checks(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CheckRow> rows;

  auto check = [&rows](std::string name, const std::function<Tensor(const Tensor&)>& f, Tensor x,
                       double tol, double step = kStep) {
    rows.push_back(make_row(std::move(name), grad_check(f, std::move(x), step), tol));
  };

  {
    Tensor b = rand_tensor(rng, {4, 3});
    check("matmul.lhs", [&](const Tensor& x) { return sum(matmul(x, b)); },
          rand_tensor(rng, {3, 4}), 1e-6);
    Tensor a = rand_tensor(rng, {3, 4});
    check("matmul.rhs", [&](const Tensor& x) { return sum(matmul(a, x)); },
          rand_tensor(rng, {4, 2}), 1e-6);
  }
  {
    Tensor c = rand_tensor(rng, {2, 5});
    Tensor w = rand_tensor(rng, {2, 5});
    check("add", [&](const Tensor& x) { return sum(mul(add(x, c), w)); },
          rand_tensor(rng, {2, 5}), 1e-6);
    check("sub", [&](const Tensor& x) { return sum(mul(sub(x, c), w)); },
          rand_tensor(rng, {2, 5}), 1e-6);
    check("mul", [&](const Tensor& x) { return sum(mul(mul(x, c), w)); },
          rand_tensor(rng, {2, 5}), 1e-6);
    check("scale", [&](const Tensor& x) { return sum(mul(scale(x, -1.7), w)); },
          rand_tensor(rng, {2, 5}), 1e-6);
    check("add_scalar", [&](const Tensor& x) { return sum(mul(add_scalar(x, 0.4), w)); },
          rand_tensor(rng, {2, 5}), 1e-6);
  }
  {
    Tensor x0 = rand_tensor(rng, {3, 4});
    Tensor w = rand_tensor(rng, {3, 4});
    check("add_bias", [&](const Tensor& b) { return sum(mul(add_bias(x0, b), w)); },
          rand_tensor(rng, {4}), 1e-6);
  }
  {
    Tensor w = rand_tensor(rng, {3, 4});
    check("relu", [&](const Tensor& x) { return sum(mul(relu(x), w)); },
          rand_away_from_zero(rng, {3, 4}, 0.05), 1e-6);
    check("abs", [&](const Tensor& x) { return sum(mul(abs(x), w)); },
          rand_away_from_zero(rng, {3, 4}, 0.05), 1e-6);
    check("sigmoid", [&](const Tensor& x) { return sum(mul(sigmoid(x), w)); },
          rand_tensor(rng, {3, 4}, -2.0, 2.0), 1e-5);
    check("exp", [&](const Tensor& x) { return sum(mul(exp(x), w)); },
          rand_tensor(rng, {3, 4}), 1e-5);
    check("log", [&](const Tensor& x) { return sum(mul(log(x), w)); },
          rand_tensor(rng, {3, 4}, 0.5, 2.0), 1e-5);
  }
  {
    // Clamp edges at +-0.7; inputs keep a 0.05 moat around them.
    Tensor w = rand_tensor(rng, {3, 4});
    std::vector<double> v(12);
    for (auto& x : v) {
      do {
        x = rng.uniform(-1.0, 1.0);
      } while (std::fabs(std::fabs(x) - 0.7) < 0.05);
    }
    check("clamp", [&](const Tensor& x) { return sum(mul(clamp(x, -0.7, 0.7), w)); },
          Tensor::from_data({3, 4}, std::move(v)), 1e-6);
  }
  {
    Tensor w = rand_tensor(rng, {4, 3});
    check("transpose", [&](const Tensor& x) { return sum(mul(transpose(x), w)); },
          rand_tensor(rng, {3, 4}), 1e-6);
    Tensor w2 = rand_tensor(rng, {3, 4});
    check("reshape", [&](const Tensor& x) { return sum(mul(reshape(x, {3, 4}), w2)); },
          rand_tensor(rng, {2, 6}), 1e-6);
  }
  {
    Tensor other = rand_tensor(rng, {2, 3});
    Tensor w = rand_tensor(rng, {5, 3});
    check("concat_rows",
          [&](const Tensor& x) { return sum(mul(concat_rows({x, other}), w)); },
          rand_tensor(rng, {3, 3}), 1e-6);
    Tensor otherc = rand_tensor(rng, {3, 2});
    Tensor wc = rand_tensor(rng, {3, 5});
    check("concat_cols",
          [&](const Tensor& x) { return sum(mul(concat_cols({x, otherc}), wc)); },
          rand_tensor(rng, {3, 3}), 1e-6);
  }
  {
    Tensor w = rand_tensor(rng, {3, 4});
    check("slice_rows", [&](const Tensor& x) { return sum(mul(slice_rows(x, 1, 4), w)); },
          rand_tensor(rng, {5, 4}), 1e-6);
    Tensor wc = rand_tensor(rng, {5, 2});
    check("slice_cols", [&](const Tensor& x) { return sum(mul(slice_cols(x, 1, 3), wc)); },
          rand_tensor(rng, {5, 4}), 1e-6);
    // Duplicate indices: the backward rule must accumulate, not overwrite.
    Tensor wg = rand_tensor(rng, {4, 4});
    check("gather_rows",
          [&](const Tensor& x) { return sum(mul(gather_rows(x, {0, 2, 2, 1}), wg)); },
          rand_tensor(rng, {5, 4}), 1e-6);
  }
  {
    scene::TokenBatch batch;
    batch.ids = {3, 1, 4, 4, 0, 0};
    batch.valid = {1, 1, 1, 1, 0, 0};
    Tensor w = rand_tensor(rng, {6, 4});
    check("embedding_lookup",
          [&](const Tensor& table) { return sum(mul(grid::embed_text(batch, table), w)); },
          rand_tensor(rng, {5, 4}), 1e-6);
  }
  // Linear in x, so only float cancellation remains; the larger step keeps
  // it under the pinned 1e-10.
  check("sum", [](const Tensor& x) { return sum(x); }, rand_tensor(rng, {3, 4}), 1e-10, 1e-3);
  check("mean", [](const Tensor& x) { return mean(x); }, rand_tensor(rng, {3, 4}), 1e-10, 1e-3);
  {
    Tensor w = rand_tensor(rng, {2, 4});
    check("softmax", [&](const Tensor& x) { return sum(mul(softmax(x, 1), w)); },
          rand_tensor(rng, {2, 4}, -2.0, 2.0), 1e-5);
    std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0};
    Tensor wm = rand_tensor(rng, {3, 5});
    check("softmax_masked",
          [&](const Tensor& x) { return sum(mul(softmax_masked(x, mask), wm)); },
          rand_tensor(rng, {3, 5}, -2.0, 2.0), 1e-5);
  }
  {
    Tensor gain = rand_tensor(rng, {6}, 0.5, 1.5);
    Tensor bias = rand_tensor(rng, {6});
    Tensor w = rand_tensor(rng, {3, 6});
    Tensor x0 = rand_tensor(rng, {3, 6});
    check("layer_norm.x",
          [&](const Tensor& x) { return sum(mul(layer_norm(x, gain, bias, 1e-5), w)); }, x0,
          1e-5);
    check("layer_norm.gain",
          [&](const Tensor& g) { return sum(mul(layer_norm(x0, g, bias, 1e-5), w)); }, gain,
          1e-6);
    check("layer_norm.bias",
          [&](const Tensor& b) { return sum(mul(layer_norm(x0, gain, b, 1e-5), w)); }, bias,
          1e-6);
  }
  {
    const int h = 3, w = 4, cin = 2, cout = 3;
    Tensor cw = rand_tensor(rng, {9 * cin, cout});
    Tensor cb = rand_tensor(rng, {cout});
    Tensor wm = rand_tensor(rng, {h * w, cout});
    Tensor x0 = rand_tensor(rng, {h * w, cin});
    check("conv3x3.x",
          [&](const Tensor& x) { return sum(mul(conv3x3(x, h, w, cw, cb), wm)); }, x0, 1e-6);
    check("conv3x3.w",
          [&](const Tensor& k) { return sum(mul(conv3x3(x0, h, w, k, cb), wm)); }, cw, 1e-6);
    check("conv3x3.b",
          [&](const Tensor& b) { return sum(mul(conv3x3(x0, h, w, cw, b), wm)); }, cb, 1e-6);
  }
  {
    Tensor q0 = rand_tensor(rng, {4, 6});
    Tensor k0 = rand_tensor(rng, {5, 6});
    Tensor v0 = rand_tensor(rng, {5, 6});
    Tensor w = rand_tensor(rng, {4, 6});
    check("attention.q",
          [&](const Tensor& q) { return sum(mul(scaled_dot_attention(q, k0, v0), w)); }, q0,
          1e-5);
    check("attention.k",
          [&](const Tensor& k) { return sum(mul(scaled_dot_attention(q0, k, v0), w)); }, k0,
          1e-5);
    check("attention.v",
          [&](const Tensor& v) { return sum(mul(scaled_dot_attention(q0, k0, v), w)); }, v0,
          1e-5);
    std::vector<std::uint8_t> mask = {1, 1, 0, 1, 0};
    check("attention.masked",
          [&](const Tensor& q) { return sum(mul(scaled_dot_attention(q, k0, v0, &mask), w)); },
          q0, 1e-5);
  }
  return rows;
}

namespace {

// Coordinate-wise central differences cannot resolve gradient elements below
// the rounding quantum ulp(loss) / (2 step): the composed loss sits near 7,
// putting the quantum around 1e-10, while some true gradient elements are
// smaller still. Directional probes keep the measured difference at the
// scale of a whole gradient instead. Per parameter block the probe runs
// along the analytic gradient (so a wrong magnitude, a dropped path or a
// double accumulation shows up directly); random directions spanning every
// block cover cross-block wiring.
double directional_check(const std::function<Tensor()>& f, std::span<Tensor> params, Rng& rng,
                         int global_directions) {
  backward(f());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.grad().empty())
      analytic.emplace_back(p.size(), 0.0);
    else
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    p.clear_grad();
  }

  // Central differences cannot resolve derivatives below a few rounding
  // quanta of the loss over 2 step. Both sides sitting under that resolution
  // counts as agreement (the attention key biases are the live case: softmax
  // shift invariance makes their true gradient exactly zero). An analytic
  // zero against a resolvable numeric value still fails loudly.
  const double f0 = f().value();
  std::vector<std::vector<double>> dir(params.size());
  auto probe = [&](std::span<const std::size_t> blocks, double step) {
    double expected = 0.0;
    for (std::size_t b : blocks)
      for (std::size_t j = 0; j < dir[b].size(); ++j) expected += dir[b][j] * analytic[b][j];
    auto shift = [&](double scale) {
      for (std::size_t b : blocks) {
        auto pd = params[b].mutable_data();
        for (std::size_t j = 0; j < pd.size(); ++j) pd[j] += scale * dir[b][j];
      }
    };
    shift(step);
    const double fp = f().value();
    shift(-2.0 * step);
    const double fm = f().value();
    shift(step);
    const double numeric = (fp - fm) / (2.0 * step);
    const double resolution =
        4.0 * std::fabs(f0) * std::numeric_limits<double>::epsilon() / (2.0 * step);
    if (std::fabs(expected) < resolution && std::fabs(numeric) < resolution) return 0.0;
    return std::fabs(expected - numeric) /
           std::max(1e-8, std::fabs(expected) + std::fabs(numeric));
  };

  double worst = 0.0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    double peak = 0.0;
    for (double g : analytic[b]) peak = std::max(peak, std::fabs(g));
    dir[b].assign(params[b].size(), 0.0);
    if (peak > 0.0)
      for (std::size_t j = 0; j < dir[b].size(); ++j) dir[b][j] = analytic[b][j] / peak;
    else
      for (auto& u : dir[b]) u = rng.uniform(-1.0, 1.0);
    const std::size_t one[] = {b};
    worst = std::max(worst, probe(one, 1e-5));
  }
  std::vector<std::size_t> all(params.size());
  for (std::size_t b = 0; b < params.size(); ++b) all[b] = b;
  for (int i = 0; i < global_directions; ++i) {
    for (auto& db : dir)
      for (auto& u : db) u = rng.uniform(-1.0, 1.0);
    worst = std::max(worst, probe(all, 1e-6));
  }
  return worst;
}

}  // namespace

CheckRow loss_gradient_check(std::uint64_t seed) {
  cfg::RunConfig c;
  c.seed = seed;
  c.x_min = -8.0;
  c.x_max = 8.0;
  c.y_min = -8.0;
  c.y_max = 8.0;
  c.z_min = -5.8;
  c.z_max = 2.2;
  c.voxel_x = 2.0;
  c.voxel_y = 2.0;
  c.voxel_z = 8.0;
  c.embed_dim = 8;
  c.num_tokens = 8;
  c.num_queries = 4;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.heads = 2;
  c.tau = 4.0;
  c.validate();
  const grid::GridSpec g = c.make_grid();
  const scene::Vocabulary vocab = scene::Vocabulary::standard();

  scene::Scenario s;
  s.id = "gradcheck";
  s.relation = scene::Relation::left_of;
  scene::ObjectSpec target;
  target.box = geo::make_box(2.0, 3.0, -1.0, 4.2, 1.9, 1.6, 0.4);
  target.category = scene::Category::car;
  target.attribute = scene::Attribute::gray;
  target.role = scene::Role::target;
  scene::ObjectSpec ctx;
  ctx.box = geo::make_box(-3.0, -2.0, -0.6, 6.0, 2.4, 2.4, -0.7);
  ctx.category = scene::Category::truck;
  ctx.attribute = scene::Attribute::gray;
  ctx.role = scene::Role::contextual;
  s.objects = {target, ctx};
  s.description = "find the gray car that is left of the gray truck";

  Rng rng(seed ^ 0x5BF0363546E34E21ull);
  for (const auto& obj : s.objects) {
    const auto& b = obj.box;
    for (int i = 0; i < 24; ++i) {
      scene::Point p;
      const double u = rng.uniform(-0.45, 0.45) * b.l;
      const double v = rng.uniform(-0.45, 0.45) * b.w;
      p.x = b.cx + u * std::cos(b.yaw) - v * std::sin(b.yaw);
      p.y = b.cy + u * std::sin(b.yaw) + v * std::cos(b.yaw);
      p.z = rng.uniform(b.cz - 0.5 * b.h, b.cz + 0.5 * b.h);
      p.intensity = rng.uniform(0.1, 0.9);
      s.points.push_back(p);
    }
  }
  for (int i = 0; i < 40; ++i) {
    scene::Point p;
    p.x = rng.uniform(-7.9, 7.9);
    p.y = rng.uniform(-7.9, 7.9);
    p.z = -1.8 + rng.uniform(-0.05, 0.05);
    p.intensity = rng.uniform(0.05, 0.3);
    s.points.push_back(p);
  }

  model::ModelParams params = model::ModelParams::init(c);
  const model::ForwardInput in = model::build_input(s, g, vocab, c);
  std::vector<Tensor> leaves;
  leaves.reserve(params.entries.size());
  for (auto& e : params.entries) leaves.push_back(e.second);

  auto f = [&]() { return sup::scenario_loss(model::forward(in, params, c, true), in, c).total; };
  Rng dir_rng(seed ^ 0xC2B2AE3D27D4EB4Full);
  const double err = directional_check(f, leaves, dir_rng, 8);
  return make_row("full_loss.2obj", err, 1e-4);
}

std::string check_table(const std::vector<CheckRow>& rows) {
  std::string out = "check                    max_rel_err   tol       status\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-24s %-13.3e %-9.0e %s\n", r.name.c_str(), r.max_rel_err,
                  r.tol, r.pass ? "pass" : "FAIL");
    out += buf;
  }
  return out;
}

bool all_pass(const std::vector<CheckRow>& rows) {
  for (const auto& r : rows)
    if (!r.pass) return false;
  return true;
}

}  // namespace bevref::diag
