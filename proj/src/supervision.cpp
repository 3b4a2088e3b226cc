#include "bevref/supervision.hpp"

#include <algorithm>
#include <cmath>

namespace bevref::sup {

namespace {

constexpr double kProbEps = 1e-12;  // keeps log() off exact 0/1 after sigmoid saturation
constexpr double kFocalAlpha = 0.25;

// -log p and -log(1-p) factors with saturation clamp.
Tensor log_p(const Tensor& p) { return log(clamp(p, kProbEps, 1.0 - kProbEps)); }

Tensor one_minus(const Tensor& p) { return add_scalar(scale(p, -1.0), 1.0); }

}  // namespace

Assignment assign(const std::vector<geo::Vec2>& query_pos, const std::vector<geo::Box3D>& boxes,
                  int target_index, double tau) {
  if (boxes.empty()) throw assignment_error("assign: empty box list");
  if (!(tau >= 0.0)) throw assignment_error("assign: tau must be non-negative");
  Assignment out;
  out.per_query.resize(query_pos.size());
  for (std::size_t q = 0; q < query_pos.size(); ++q) {
    int best = 0;
    double best_d = std::hypot(query_pos[q].x - boxes[0].cx, query_pos[q].y - boxes[0].cy);
    for (std::size_t b = 1; b < boxes.size(); ++b) {
      const double d = std::hypot(query_pos[q].x - boxes[b].cx, query_pos[q].y - boxes[b].cy);
      if (d < best_d) {  // strict: ties keep the smaller object index
        best_d = d;
        best = static_cast<int>(b);
      }
    }
    if (best_d < tau) {
      out.per_query[q].object = best;
      out.per_query[q].distance = best_d;
      out.per_query[q].is_target = best == target_index;
      if (best != target_index &&
          std::find(out.referential.begin(), out.referential.end(), best) == out.referential.end())
        out.referential.push_back(best);
    }
  }
  std::sort(out.referential.begin(), out.referential.end());
  return out;
}

Tensor loss_heatmap(const Tensor& pred, const std::vector<double>& gt) {
  if (pred.size() != gt.size())
    throw shape_error("loss_heatmap: prediction and ground truth sizes differ");
  std::vector<double> peak_mask(gt.size()), neg_weight(gt.size());
  int peaks = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == 1.0) {
      peak_mask[i] = 1.0;
      neg_weight[i] = 0.0;
      ++peaks;
    } else {
      peak_mask[i] = 0.0;
      const double om = 1.0 - gt[i];
      neg_weight[i] = om * om * om * om;  // (1-gt)^4 penalty reduction
    }
  }
  const Tensor mask_t = Tensor::from_data(pred.shape(), std::move(peak_mask));
  const Tensor negw_t = Tensor::from_data(pred.shape(), std::move(neg_weight));
  const Tensor om_p = one_minus(pred);
  // peaks: -(1-p)^2 log p ; elsewhere: -(1-gt)^4 p^2 log(1-p)
  const Tensor pos = mul(mask_t, mul(mul(om_p, om_p), log_p(pred)));
  const Tensor neg = mul(negw_t, mul(mul(pred, pred), log_p(om_p)));
  return scale(sum(add(pos, neg)), -1.0 / std::max(1, peaks));
}

namespace {

// Binary focal terms for an explicit positive mask over a column vector.
Tensor binary_focal(const Tensor& p, const std::vector<double>& positive, int normalizer) {
  const Tensor mask_pos = Tensor::from_data(p.shape(), positive);
  const Tensor mask_neg = one_minus(mask_pos);
  const Tensor om_p = one_minus(p);
  const Tensor pos = scale(mul(mask_pos, mul(mul(om_p, om_p), log_p(p))), kFocalAlpha);
  const Tensor neg = scale(mul(mask_neg, mul(mul(p, p), log_p(om_p))), 1.0 - kFocalAlpha);
  return scale(sum(add(pos, neg)), -1.0 / normalizer);
}

}  // namespace

Tensor loss_query_proposal(const Tensor& confidences, const std::vector<int>& token_cells,
                           int target_cell) {
  if (static_cast<std::size_t>(confidences.dim(0)) != token_cells.size())
    throw shape_error("loss_query_proposal: confidence rows and token cells differ");
  std::vector<double> positive(token_cells.size(), 0.0);
  int hit = -1;
  for (std::size_t i = 0; i < token_cells.size(); ++i)
    if (token_cells[i] == target_cell) {
      positive[i] = 1.0;
      hit = static_cast<int>(i);
      break;
    }
  if (hit < 0)
    throw assignment_error("target cell " + std::to_string(target_cell) +
                           " absent from token selection (injection broken)");
  return binary_focal(confidences, positive, 1);
}

Tensor loss_cls(const Tensor& probs, const Assignment& a) {
  if (static_cast<std::size_t>(probs.dim(0)) != a.per_query.size())
    throw shape_error("loss_cls: probability rows and assignment size differ");
  std::vector<double> positive(a.per_query.size(), 0.0);
  int npos = 0;
  for (std::size_t q = 0; q < a.per_query.size(); ++q)
    if (a.per_query[q].is_target) {
      positive[q] = 1.0;
      ++npos;
    }
  return binary_focal(probs, positive, std::max(1, npos));
}

Tensor loss_reg(const Tensor& reg, const Assignment& a, const std::vector<geo::Box3D>& boxes,
                const std::vector<int>& query_cells, const grid::GridSpec& g,
                bool include_referential) {
  std::vector<int> rows;
  std::vector<double> targets;
  for (std::size_t q = 0; q < a.per_query.size(); ++q) {
    const QueryMatch& m = a.per_query[q];
    if (m.object < 0) continue;
    if (!m.is_target && !include_referential) continue;
    rows.push_back(static_cast<int>(q));
    const auto t = model::encode_box(boxes[static_cast<std::size_t>(m.object)], query_cells[q], g);
    targets.insert(targets.end(), t.begin(), t.end());
  }
  if (rows.empty()) return Tensor::scalar(0.0);
  const Tensor target_t = Tensor::from_data({static_cast<int>(rows.size()), 8}, std::move(targets));
  return mean(abs(sub(gather_rows(reg, rows), target_t)));
}

LossBreakdown total_loss(const Tensor& hm, const Tensor& qp, const Tensor& cls, const Tensor& reg,
                         double l1, double l2, double l3, double l4) {
  LossBreakdown out;
  out.hm = hm;
  out.qp = qp;
  out.cls = cls;
  out.reg = reg;
  out.hm_v = hm.value();
  out.qp_v = qp.value();
  out.cls_v = cls.value();
  out.reg_v = reg.value();
  const char* names[] = {"heatmap", "query-proposal", "classification", "regression"};
  const double vals[] = {out.hm_v, out.qp_v, out.cls_v, out.reg_v};
  for (int i = 0; i < 4; ++i)
    if (!std::isfinite(vals[i]))
      throw numeric_error(std::string(names[i]) + " loss is non-finite");
  out.total = add(add(add(scale(hm, l1), scale(qp, l2)), scale(cls, l3)), scale(reg, l4));
  out.total_v = out.total.value();
  if (!std::isfinite(out.total_v)) throw numeric_error("total loss is non-finite");
  return out;
}

std::vector<geo::Vec2> query_positions(const std::vector<int>& query_cells,
                                       const grid::GridSpec& g) {
  std::vector<geo::Vec2> out;
  out.reserve(query_cells.size());
  for (int cell : query_cells)
    out.push_back({g.cell_center_x(cell / g.w), g.cell_center_y(cell % g.w)});
  return out;
}

LossBreakdown scenario_loss(const model::ForwardOutput& out, const model::ForwardInput& in,
                            const cfg::RunConfig& config) {
  const grid::GridSpec g = config.make_grid();
  const Tensor hm = config.token_selection ? loss_heatmap(out.selection.heatmap_pred, in.heatmap_gt)
                                           : Tensor::scalar(0.0);
  const Tensor qp =
      loss_query_proposal(out.proposal.confidences, out.selection.cells, in.target_cell);
  const Assignment a = assign(query_positions(out.proposal.cells, g), in.boxes, in.target_index,
                              config.tau);
  const Tensor cls = loss_cls(out.head.probs, a);
  const Tensor reg = loss_reg(out.head.reg, a, in.boxes, out.proposal.cells, g,
                              config.context_supervision);
  return total_loss(hm, qp, cls, reg, config.lambda_heatmap, config.lambda_query,
                    config.lambda_cls, config.lambda_reg);
}

}  // namespace bevref::sup
