#pragma once

#include <limits>
#include <stdexcept>
#include <vector>

#include "bevref/config.hpp"
#include "bevref/geometry.hpp"
#include "bevref/model.hpp"
#include "bevref/tensor.hpp"

// Pseudo-label assignment (nearest object within tau per query) and the four
// training losses. Referential supervision means the regression loss covers
// every matched query, not just target-matched ones; that joint coverage is
// the context_supervision switch.

namespace bevref::sup {

struct assignment_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct QueryMatch {
  int object = -1;  // -1 when unmatched
  double distance = std::numeric_limits<double>::infinity();
  bool is_target = false;
};

struct Assignment {
  std::vector<QueryMatch> per_query;
  std::vector<int> referential;  // unique matched non-target objects, ascending
};

// Per query: nearest box by BEV center distance (ties to the smaller object
// index), matched iff distance < tau strictly.
Assignment assign(const std::vector<geo::Vec2>& query_pos, const std::vector<geo::Box3D>& boxes,
                  int target_index, double tau);

// Gaussian-penalty focal loss over a post-sigmoid heatmap; normalized by the
// number of gt peaks (cells at exactly 1), at least 1.
Tensor loss_heatmap(const Tensor& pred, const std::vector<double>& gt);

// Binary focal loss (gamma 2, balance 0.25) with the single positive at the
// token whose cell is target_cell; absence of that token means the training
// injection broke upstream.
Tensor loss_query_proposal(const Tensor& confidences, const std::vector<int>& token_cells,
                           int target_cell);

// Binary focal loss over query target probabilities; positives are the
// target-matched queries, normalizer max(1, positives).
Tensor loss_cls(const Tensor& probs, const Assignment& a);

// Mean L1 over the 8 regression coordinates of every supervised query.
// include_referential=false restricts supervision to target-matched queries.
Tensor loss_reg(const Tensor& reg, const Assignment& a, const std::vector<geo::Box3D>& boxes,
                const std::vector<int>& query_cells, const grid::GridSpec& g,
                bool include_referential);

struct LossBreakdown {
  Tensor hm, qp, cls, reg;
  Tensor total;
  double hm_v = 0.0, qp_v = 0.0, cls_v = 0.0, reg_v = 0.0, total_v = 0.0;
};

// total = l1*hm + l2*qp + l3*cls + l4*reg, evaluated in exactly that
// association order. Non-finite parts raise numeric_error naming the part.
LossBreakdown total_loss(const Tensor& hm, const Tensor& qp, const Tensor& cls, const Tensor& reg,
                         double l1, double l2, double l3, double l4);

// Assembles assignment + all four losses for one training forward pass.
LossBreakdown scenario_loss(const model::ForwardOutput& out, const model::ForwardInput& in,
                            const cfg::RunConfig& config);

std::vector<geo::Vec2> query_positions(const std::vector<int>& query_cells,
                                       const grid::GridSpec& g);

}  // namespace bevref::sup
