#include "bevref/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "bevref/rng.hpp"

namespace bevref::model {

namespace {

constexpr double kLnEps = 1e-5;

struct Builder {
  ModelParams& p;
  Rng rng;

  void random(const std::string& name, std::vector<int> shape, int fan_in) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> data(n);
    for (auto& v : data) v = rng.uniform(-bound, bound);
    p.entries.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data), true));
  }

  void constant(const std::string& name, std::vector<int> shape, double value) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    p.entries.emplace_back(name,
                           Tensor::from_data(std::move(shape), std::vector<double>(n, value), true));
  }

  void linear(const std::string& prefix, int in, int out) {
    random(prefix + ".w", {in, out}, in);
    random(prefix + ".b", {out}, in);
  }

  void attention(const std::string& prefix, int d) {
    for (const char* part : {".q", ".k", ".v", ".o"}) linear(prefix + part, d, d);
  }

  void norm(const std::string& prefix, int d) {
    constant(prefix + ".g", {d}, 1.0);
    constant(prefix + ".b", {d}, 0.0);
  }

  void ffn(const std::string& prefix, int d) {
    linear(prefix + ".f1", d, 2 * d);
    linear(prefix + ".f2", 2 * d, d);
  }
};

}  // namespace

ModelParams ModelParams::init(const cfg::RunConfig& config) {
  config.validate();
  const int d = config.embed_dim;
  const int c = scene::kCategoryCount;
  const int vocab = scene::Vocabulary::standard().size();

  ModelParams p;
  Builder b{p, Rng(config.seed ^ 0x9E3779B97F4A7C15ull)};

  b.linear("pillar.lin", grid::kRawStatChannels, d);
  b.linear("pillar.conv1", 9 * d, d);
  b.linear("pillar.conv2", 9 * d, d);
  b.linear("hm.conv", 9 * d, d);
  b.linear("hm.out", d, c);
  b.random("text.embed", {vocab, d}, d);
  b.random("text.pos", {config.max_text_tokens, d}, d);
  for (int i = 0; i < config.encoder_layers; ++i) {
    const std::string e = "enc" + std::to_string(i);
    b.attention(e + ".vis_self", d);
    b.norm(e + ".vis_ln1", d);
    b.attention(e + ".txt_self", d);
    b.norm(e + ".txt_ln1", d);
    b.attention(e + ".vis_cross", d);
    b.norm(e + ".vis_ln2", d);
    b.attention(e + ".txt_cross", d);
    b.norm(e + ".txt_ln2", d);
    b.ffn(e + ".vis_ffn", d);
    b.norm(e + ".vis_ln3", d);
    b.ffn(e + ".txt_ffn", d);
    b.norm(e + ".txt_ln3", d);
  }
  b.linear("prop.f1", d, d);
  b.linear("prop.f2", d, 1);
  b.linear("qproj", d, d);
  for (int j = 0; j < config.decoder_layers; ++j) {
    const std::string q = "dec" + std::to_string(j);
    b.attention(q + ".self", d);
    b.norm(q + ".ln1", d);
    b.attention(q + ".cross_text", d);
    b.norm(q + ".ln2", d);
    b.attention(q + ".cross_vis", d);
    b.norm(q + ".ln3", d);
    b.ffn(q + ".ffn", d);
    b.norm(q + ".ln4", d);
  }
  b.linear("id.f1", d, d);
  b.linear("id.f2", d, 1);
  b.linear("reg.f1", d, d);
  b.linear("reg.f2", d, 8);

  // Focal prior: the three sigmoid heads start near p = 0.01 so the
  // negative-dominated focal sums start small instead of swamping the early
  // gradient signal.
  const double prior_logit = -std::log((1.0 - 0.01) / 0.01);
  for (const char* name : {"hm.out.b", "prop.f2.b", "id.f2.b"})
    for (auto& v : p.get(name).mutable_data()) v = prior_logit;
  return p;
}

Tensor& ModelParams::get(const std::string& name) {
  for (auto& [n, t] : entries)
    if (n == name) return t;
  throw model_error("unknown parameter '" + name + "'");
}

const Tensor& ModelParams::get(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return t;
  throw model_error("unknown parameter '" + name + "'");
}

std::vector<double> pos_embed_2d(const std::vector<std::pair<int, int>>& cells, int d) {
  const int quarter = d / 4;
  std::vector<double> out(cells.size() * static_cast<std::size_t>(d));
  for (std::size_t r = 0; r < cells.size(); ++r) {
    double* row = out.data() + r * static_cast<std::size_t>(d);
    for (int k = 0; k < quarter; ++k) {
      const double omega = std::pow(10000.0, -static_cast<double>(k) / quarter);
      row[2 * k] = std::sin(cells[r].first * omega);
      row[2 * k + 1] = std::cos(cells[r].first * omega);
      row[d / 2 + 2 * k] = std::sin(cells[r].second * omega);
      row[d / 2 + 2 * k + 1] = std::cos(cells[r].second * omega);
    }
  }
  return out;
}

namespace {

Tensor linear(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  return add_bias(matmul(x, p.get(prefix + ".w")), p.get(prefix + ".b"));
}

Tensor mha(const ModelParams& p, const std::string& prefix, const Tensor& x_q, const Tensor& x_kv,
           int heads, const std::vector<std::uint8_t>* key_valid) {
  const Tensor q = linear(x_q, p, prefix + ".q");
  const Tensor k = linear(x_kv, p, prefix + ".k");
  const Tensor v = linear(x_kv, p, prefix + ".v");
  const int dh = q.dim(1) / heads;
  std::vector<Tensor> parts;
  parts.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    parts.push_back(scaled_dot_attention(slice_cols(q, h * dh, (h + 1) * dh),
                                         slice_cols(k, h * dh, (h + 1) * dh),
                                         slice_cols(v, h * dh, (h + 1) * dh), key_valid));
  }
  return linear(concat_cols(parts), p, prefix + ".o");
}

Tensor sublayer(const Tensor& x, const Tensor& sub, const ModelParams& p,
                const std::string& ln_prefix) {
  return layer_norm(add(x, sub), p.get(ln_prefix + ".g"), p.get(ln_prefix + ".b"), kLnEps);
}

Tensor ffn(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  return linear(relu(linear(x, p, prefix + ".f1")), p, prefix + ".f2");
}

Tensor cell_pos_embed(const std::vector<int>& flat_cells, const grid::GridSpec& g, int d) {
  std::vector<std::pair<int, int>> cells;
  cells.reserve(flat_cells.size());
  for (int f : flat_cells) cells.emplace_back(f / g.w, f % g.w);
  return Tensor::from_data({static_cast<int>(flat_cells.size()), d}, pos_embed_2d(cells, d));
}

// score rank: higher score first, ties to the smaller flat cell index
std::vector<int> rank_cells(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&scores](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    return a < b;
  });
  return order;
}

}  // namespace

TokenSelection select_tokens(const Tensor& bev, const grid::GridSpec& g, const ModelParams& p,
                             int v, const std::vector<int>* train_centers) {
  const int cells_total = g.h * g.w;
  if (v > cells_total)
    throw cfg::config_error("num_tokens " + std::to_string(v) + " exceeds grid cells " +
                            std::to_string(cells_total));
  TokenSelection sel;
  const Tensor hidden = relu(conv3x3(bev, g.h, g.w, p.get("hm.conv.w"), p.get("hm.conv.b")));
  sel.heatmap_pred = sigmoid(linear(hidden, p, "hm.out"));

  const int c = sel.heatmap_pred.dim(1);
  std::vector<double> scores(static_cast<std::size_t>(cells_total));
  const auto hm = sel.heatmap_pred.data();
  for (int cell = 0; cell < cells_total; ++cell) {
    double best = hm[static_cast<std::size_t>(cell) * c];
    for (int ch = 1; ch < c; ++ch)
      best = std::max(best, hm[static_cast<std::size_t>(cell) * c + ch]);
    scores[static_cast<std::size_t>(cell)] = best;
  }

  std::vector<std::uint8_t> taken(static_cast<std::size_t>(cells_total), 0);
  if (train_centers) {
    for (int cell : *train_centers) {
      if (static_cast<int>(sel.cells.size()) >= v) break;
      if (cell < 0 || cell >= cells_total || taken[static_cast<std::size_t>(cell)]) continue;
      taken[static_cast<std::size_t>(cell)] = 1;
      sel.cells.push_back(cell);
      sel.scores.push_back(scores[static_cast<std::size_t>(cell)]);
      sel.injected.push_back(1);
    }
  }
  for (int cell : rank_cells(scores)) {
    if (static_cast<int>(sel.cells.size()) >= v) break;
    if (taken[static_cast<std::size_t>(cell)]) continue;
    sel.cells.push_back(cell);
    sel.scores.push_back(scores[static_cast<std::size_t>(cell)]);
    sel.injected.push_back(0);
  }
  sel.features = gather_rows(bev, sel.cells);
  return sel;
}

TokenSelection all_tokens(const Tensor& bev, const grid::GridSpec& g) {
  TokenSelection sel;
  sel.features = bev;
  sel.cells.resize(static_cast<std::size_t>(g.h) * g.w);
  std::iota(sel.cells.begin(), sel.cells.end(), 0);
  sel.scores.assign(sel.cells.size(), 0.0);
  sel.injected.assign(sel.cells.size(), 0);
  return sel;
}

std::pair<Tensor, Tensor> encode(const Tensor& visual, const std::vector<int>& token_cells,
                                 const Tensor& text, const std::vector<std::uint8_t>& text_valid,
                                 const grid::GridSpec& g, const ModelParams& p,
                                 const cfg::RunConfig& config) {
  const Tensor vis_pe = cell_pos_embed(token_cells, g, config.embed_dim);
  Tensor vis = visual;
  Tensor txt = text;
  for (int i = 0; i < config.encoder_layers; ++i) {
    const std::string e = "enc" + std::to_string(i);
    const Tensor v0 = add(vis, vis_pe);
    const Tensor t0 = add(txt, p.get("text.pos"));
    // Both cross directions read the same post-self-attention snapshots.
    const Tensor vs = sublayer(v0, mha(p, e + ".vis_self", v0, v0, config.heads, nullptr), p, e + ".vis_ln1");
    const Tensor ts = sublayer(t0, mha(p, e + ".txt_self", t0, t0, config.heads, &text_valid), p, e + ".txt_ln1");
    const Tensor vc = sublayer(vs, mha(p, e + ".vis_cross", vs, ts, config.heads, &text_valid), p, e + ".vis_ln2");
    const Tensor tc = sublayer(ts, mha(p, e + ".txt_cross", ts, vs, config.heads, nullptr), p, e + ".txt_ln2");
    vis = sublayer(vc, ffn(vc, p, e + ".vis_ffn"), p, e + ".vis_ln3");
    txt = sublayer(tc, ffn(tc, p, e + ".txt_ffn"), p, e + ".txt_ln3");
  }
  return {vis, txt};
}

QueryProposal propose_queries(const Tensor& fused_visual, const std::vector<int>& token_cells,
                              const ModelParams& p, int k, std::optional<int> target_cell) {
  const int v = fused_visual.dim(0);
  if (k > v)
    throw cfg::config_error("num_queries " + std::to_string(k) + " exceeds token count " +
                            std::to_string(v));
  QueryProposal out;
  out.confidences = sigmoid(linear(relu(linear(fused_visual, p, "prop.f1")), p, "prop.f2"));

  const auto conf = out.confidences.data();
  std::vector<int> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (conf[static_cast<std::size_t>(a)] != conf[static_cast<std::size_t>(b)])
      return conf[static_cast<std::size_t>(a)] > conf[static_cast<std::size_t>(b)];
    return token_cells[static_cast<std::size_t>(a)] < token_cells[static_cast<std::size_t>(b)];
  });
  std::vector<int> chosen(order.begin(), order.begin() + k);

  if (target_cell) {
    int target_token = -1;
    for (int t = 0; t < v; ++t)
      if (token_cells[static_cast<std::size_t>(t)] == *target_cell) {
        target_token = t;
        break;
      }
    if (target_token < 0)
      throw model_error("target cell " + std::to_string(*target_cell) +
                        " missing from token selection (injection broken)");
    auto it = std::find(chosen.begin(), chosen.end(), target_token);
    if (it == chosen.end()) {
      chosen.back() = target_token;
      it = chosen.end() - 1;
    }
    out.target_slot = static_cast<int>(it - chosen.begin());
  }

  for (int t : chosen) out.cells.push_back(token_cells[static_cast<std::size_t>(t)]);
  out.features = add_bias(matmul(gather_rows(fused_visual, chosen), p.get("qproj.w")),
                          p.get("qproj.b"));
  return out;
}

Tensor decode(const Tensor& queries, const std::vector<int>& query_cells,
              const Tensor& fused_text, const std::vector<std::uint8_t>& text_valid,
              const Tensor& fused_visual, const grid::GridSpec& g, const ModelParams& p,
              const cfg::RunConfig& config) {
  if (config.decoder_layers == 0) return queries;
  const Tensor q_pe = cell_pos_embed(query_cells, g, config.embed_dim);
  Tensor q = queries;
  for (int j = 0; j < config.decoder_layers; ++j) {
    const std::string d = "dec" + std::to_string(j);
    const Tensor q0 = add(q, q_pe);
    const Tensor qs = sublayer(q0, mha(p, d + ".self", q0, q0, config.heads, nullptr), p, d + ".ln1");
    const Tensor qt = sublayer(qs, mha(p, d + ".cross_text", qs, fused_text, config.heads, &text_valid), p, d + ".ln2");
    const Tensor qv = sublayer(qt, mha(p, d + ".cross_vis", qt, fused_visual, config.heads, nullptr), p, d + ".ln3");
    q = sublayer(qv, ffn(qv, p, d + ".ffn"), p, d + ".ln4");
  }
  return q;
}

HeadOutput heads(const Tensor& refined, const ModelParams& p) {
  HeadOutput out;
  out.probs = sigmoid(linear(relu(linear(refined, p, "id.f1")), p, "id.f2"));
  out.reg = linear(relu(linear(refined, p, "reg.f1")), p, "reg.f2");
  return out;
}

std::array<double, 8> encode_box(const geo::Box3D& b, int cell, const grid::GridSpec& g) {
  const double ccx = g.cell_center_x(cell / g.w);
  const double ccy = g.cell_center_y(cell % g.w);
  return {b.cx - ccx, b.cy - ccy,         b.cz,          std::log(b.l),
          std::log(b.w), std::log(b.h), std::sin(b.yaw), std::cos(b.yaw)};
}

geo::Box3D decode_box(const double* r, int cell, const grid::GridSpec& g) {
  const double ccx = g.cell_center_x(cell / g.w);
  const double ccy = g.cell_center_y(cell % g.w);
  return geo::make_box(ccx + r[0], ccy + r[1], r[2], std::exp(r[3]), std::exp(r[4]),
                       std::exp(r[5]), std::atan2(r[6], r[7]));
}

ForwardInput build_input(const scene::Scenario& s, const grid::GridSpec& g,
                         const scene::Vocabulary& vocab, const cfg::RunConfig& config) {
  ForwardInput in;
  const std::size_t cells = static_cast<std::size_t>(g.h) * g.w;
  in.raw_stats = Tensor::from_data({static_cast<int>(cells), grid::kRawStatChannels},
                                   grid::pillar_stats(s, g));
  in.tokens = scene::tokenize(s.description, vocab, config.max_text_tokens);
  in.heatmap_gt = grid::gt_heatmap(s, g);
  for (const auto& o : s.objects) {
    in.boxes.push_back(o.box);
    in.object_cells.push_back(g.flat(g.cell_x(o.box.cx), g.cell_y(o.box.cy)));
  }
  in.target_index = s.target_index();
  if (in.target_index >= 0)
    in.target_cell = in.object_cells[static_cast<std::size_t>(in.target_index)];
  return in;
}

ForwardOutput forward(const ForwardInput& in, const ModelParams& p, const cfg::RunConfig& config,
                      bool training) {
  const grid::GridSpec g = config.make_grid();
  const Tensor bev =
      grid::encode_pillars(in.raw_stats, g, p.get("pillar.lin.w"), p.get("pillar.lin.b"),
                           p.get("pillar.conv1.w"), p.get("pillar.conv1.b"),
                           p.get("pillar.conv2.w"), p.get("pillar.conv2.b"));
  ForwardOutput out;
  if (config.token_selection) {
    out.selection = select_tokens(bev, g, p, config.num_tokens,
                                  training ? &in.object_cells : nullptr);
  } else {
    out.selection = all_tokens(bev, g);
  }
  const Tensor text = grid::embed_text(in.tokens, p.get("text.embed"));
  auto [vis_fused, txt_fused] =
      encode(out.selection.features, out.selection.cells, text, in.tokens.valid, g, p, config);
  out.proposal = propose_queries(vis_fused, out.selection.cells, p, config.num_queries,
                                 training ? std::optional<int>(in.target_cell) : std::nullopt);
  out.refined = decode(out.proposal.features, out.proposal.cells, txt_fused, in.tokens.valid,
                       vis_fused, g, p, config);
  out.head = heads(out.refined, p);
  return out;
}

geo::Box3D infer(const scene::Scenario& s, const ModelParams& p, const scene::Vocabulary& vocab,
                 const cfg::RunConfig& config) {
  const grid::GridSpec g = config.make_grid();
  const ForwardInput in = build_input(s, g, vocab, config);
  const ForwardOutput out = forward(in, p, config, false);
  const auto probs = out.head.probs.data();
  int best = 0;
  for (int k = 1; k < out.head.probs.dim(0); ++k)
    if (probs[static_cast<std::size_t>(k)] > probs[static_cast<std::size_t>(best)]) best = k;
  return decode_box(out.head.reg.data().data() + static_cast<std::size_t>(best) * 8,
                    out.proposal.cells[static_cast<std::size_t>(best)], g);
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr const char* kCheckpointFormat = "bevref-checkpoint";
constexpr int kCheckpointVersion = 1;

void append_double(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& p, const cfg::RunConfig& config) {
  std::ofstream out(path);
  if (!out) throw model_error("cannot open '" + path + "' for writing");
  out << "{\"format\":\"" << kCheckpointFormat << "\",\"version\":" << kCheckpointVersion << "}\n";
  out << config.to_json() << '\n';
  for (const auto& [name, t] : p.entries) {
    std::string line = "{\"name\":\"" + name + "\",\"shape\":[";
    for (int i = 0; i < t.ndim(); ++i) {
      if (i) line += ',';
      line += std::to_string(t.dim(i));
    }
    line += "],\"data\":[";
    const auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (i) line += ',';
      append_double(line, d[i]);
    }
    line += "]}";
    out << line << '\n';
  }
  if (!out) throw model_error("write failed for '" + path + "'");
}

std::pair<ModelParams, cfg::RunConfig> load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw model_error("cannot open checkpoint '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw model_error(path + ": missing header line");
  try {
    const nlohmann::json h = nlohmann::json::parse(line);
    if (h.at("format").get<std::string>() != kCheckpointFormat ||
        h.at("version").get<int>() != kCheckpointVersion)
      throw model_error(path + ": not a supported checkpoint file");
  } catch (const nlohmann::json::exception& e) {
    throw model_error(path + " line 1: " + e.what());
  }
  if (!std::getline(in, line)) throw model_error(path + ": missing config line");
  cfg::RunConfig config = cfg::RunConfig::from_json(line);
  ModelParams p = ModelParams::init(config);
  std::size_t idx = 0;
  int line_number = 2;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    if (idx >= p.entries.size())
      throw model_error(path + ": more tensors than the config defines");
    auto& [name, tensor] = p.entries[idx];
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      if (j.at("name").get<std::string>() != name)
        throw model_error(path + " line " + std::to_string(line_number) + ": expected tensor '" +
                          name + "', found '" + j.at("name").get<std::string>() + "'");
      const auto shape = j.at("shape").get<std::vector<int>>();
      if (shape != tensor.shape())
        throw model_error(path + " line " + std::to_string(line_number) + ": shape mismatch for '" +
                          name + "'");
      const auto data = j.at("data").get<std::vector<double>>();
      if (data.size() != tensor.size())
        throw model_error(path + " line " + std::to_string(line_number) + ": data length mismatch");
      std::copy(data.begin(), data.end(), tensor.mutable_data().begin());
    } catch (const nlohmann::json::exception& e) {
      throw model_error(path + " line " + std::to_string(line_number) + ": " + e.what());
    }
    ++idx;
  }
  if (idx != p.entries.size())
    throw model_error(path + ": checkpoint ends early (" + std::to_string(idx) + " of " +
                      std::to_string(p.entries.size()) + " tensors)");
  return {std::move(p), config};
}

}  // namespace bevref::model
