#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bevref/config.hpp"
#include "bevref/featurize.hpp"
#include "bevref/geometry.hpp"
#include "bevref/scene.hpp"
#include "bevref/tensor.hpp"

// The grounding network: pillar-encoded BEV features, heatmap-scored token
// selection, a cross-modal encoder fusing visual tokens with text, query
// proposal, a decoder refining queries against both fused streams, and
// probability / box heads.

namespace bevref::model {

struct model_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Named parameter store. Registration order is fixed by construction and
// doubles as the optimizer's parameter order and the checkpoint layout.
struct ModelParams {
  std::vector<std::pair<std::string, Tensor>> entries;

  static ModelParams init(const cfg::RunConfig& config);

  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  std::size_t count() const { return entries.size(); }
};

// 2D sinusoidal embedding of BEV cell coordinates; d must be divisible by 4.
// Row i encodes cells[i] = (ix, iy); first half of the channels encode ix,
// second half iy.
std::vector<double> pos_embed_2d(const std::vector<std::pair<int, int>>& cells, int d);

struct TokenSelection {
  Tensor features;                    // [v, d] rows of the BEV feature map
  std::vector<int> cells;             // flat BEV cell per token
  std::vector<double> scores;         // heatmap score per token
  std::vector<std::uint8_t> injected; // 1 where placed by training injection
  Tensor heatmap_pred;                // [h*w, c]; undefined when selection is off
};

// Heatmap head (3x3 conv + relu + 1x1 conv + sigmoid), then top-V cells by
// per-cell max channel score, ties to the smaller flat index. train_centers
// (training mode) are deduplicated and forced in ahead of ranked cells.
TokenSelection select_tokens(const Tensor& bev, const grid::GridSpec& g, const ModelParams& p,
                             int v, const std::vector<int>* train_centers);

// Selection disabled: every cell is a token, heatmap head not run.
TokenSelection all_tokens(const Tensor& bev, const grid::GridSpec& g);

// Cross-modal encoder. Returns the fused visual stream [v, d] and fused text
// stream [l, d]. text_valid masks padded text positions out of every
// attention where text serves as keys.
std::pair<Tensor, Tensor> encode(const Tensor& visual, const std::vector<int>& token_cells,
                                 const Tensor& text, const std::vector<std::uint8_t>& text_valid,
                                 const grid::GridSpec& g, const ModelParams& p,
                                 const cfg::RunConfig& config);

struct QueryProposal {
  Tensor features;         // [K, d] projected query features
  std::vector<int> cells;  // flat BEV cell per query
  Tensor confidences;      // [v, 1]
  int target_slot = -1;    // query index of the injected target token, or -1
};

// Confidence = sigmoid(2-layer MLP); top-K tokens by confidence with ties to
// the smaller flat cell index. target_cell (training mode) force-includes
// that token, evicting the lowest-ranked pick if necessary.
QueryProposal propose_queries(const Tensor& fused_visual, const std::vector<int>& token_cells,
                              const ModelParams& p, int k, std::optional<int> target_cell);

// Decoder stack; returns refined query features [K, d]. Zero layers returns
// the input unchanged.
Tensor decode(const Tensor& queries, const std::vector<int>& query_cells,
              const Tensor& fused_text, const std::vector<std::uint8_t>& text_valid,
              const Tensor& fused_visual, const grid::GridSpec& g, const ModelParams& p,
              const cfg::RunConfig& config);

struct HeadOutput {
  Tensor probs;  // [K, 1] target probability per query
  Tensor reg;    // [K, 8] box parameters
};

HeadOutput heads(const Tensor& refined, const ModelParams& p);

// Box parameterization relative to a query cell: (dx, dy, cz, log l, log w,
// log h, sin yaw, cos yaw).
std::array<double, 8> encode_box(const geo::Box3D& b, int cell, const grid::GridSpec& g);
geo::Box3D decode_box(const double* reg8, int cell, const grid::GridSpec& g);

// Everything derived from a scenario that the forward pass needs; cacheable
// across epochs. Ground-truth members are read only on training paths.
struct ForwardInput {
  Tensor raw_stats;                 // [h*w, 7] constant
  scene::TokenBatch tokens;
  std::vector<double> heatmap_gt;   // [h*w * c]
  std::vector<geo::Box3D> boxes;    // all objects, scenario order
  std::vector<int> object_cells;    // flat center cell per object
  int target_index = -1;
  int target_cell = -1;
};

ForwardInput build_input(const scene::Scenario& s, const grid::GridSpec& g,
                         const scene::Vocabulary& vocab, const cfg::RunConfig& config);

struct ForwardOutput {
  TokenSelection selection;
  QueryProposal proposal;
  Tensor refined;  // [K, d]
  HeadOutput head;
};

// training=true activates center injection (when selection is on) and target
// query injection; inference reads no ground-truth annotation.
ForwardOutput forward(const ForwardInput& in, const ModelParams& p, const cfg::RunConfig& config,
                      bool training);

// Full inference: argmax-probability query's decoded box (ties to the
// smaller query index).
geo::Box3D infer(const scene::Scenario& s, const ModelParams& p, const scene::Vocabulary& vocab,
                 const cfg::RunConfig& config);

// Checkpoint: header line, config echo line, then one named tensor per line.
void save_checkpoint(const std::string& path, const ModelParams& p, const cfg::RunConfig& config);
std::pair<ModelParams, cfg::RunConfig> load_checkpoint(const std::string& path);

}  // namespace bevref::model
