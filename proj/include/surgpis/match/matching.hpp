#pragma once

#include <string>
#include <vector>

#include "surgpis/core/rng.hpp"
#include "surgpis/core/tape.hpp"
#include "surgpis/labels/labels.hpp"
#include "surgpis/net/net.hpp"

namespace surgpis {

struct LossWeights {
  double alpha_class = 5.0;
  double alpha_mask = 5.0;
  double lambda_focal = 1.0;
  double lambda_dice = 1.0;
  double no_object_weight = 0.1;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double eps_smooth = 1.0;  // dice smoothing
  double eps_prob = 1e-8;   // probability clamp before log
  bool use_part_cost = true;  // false = instrument-only matching (w/o PBM)
};

// Ground-truth-row x query cost matrix with per-component breakdown. Row 0 is
// the tissue background entry; its part component is identically zero.
struct CostMatrix {
  int rows = 0, cols = 0;
  Eigen::MatrixXd total, ic, im, pm;
};

struct Assignment {
  std::vector<int> tau;  // ground-truth row -> query column, injective
  double cost = 0.0;
};

// --- differentiable losses (plain-value twins below) ---
Var dice_loss(Tape& tape, Var pred, const Tensor& gt, double eps_smooth = 1.0);
Var focal_loss(Tape& tape, Var pred, const Tensor& gt, double gamma = 2.0, double alpha = 0.25,
               double eps_prob = 1e-8);
Var mask_loss(Tape& tape, Var pred, const Tensor& gt, const LossWeights& w);
// cross entropy on one probability row; the no-object target is down-weighted
Var class_loss(Tape& tape, Var probs_row, int target, int no_object_index,
               const LossWeights& w);

double dice_loss_value(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& gt,
                       double eps_smooth = 1.0);
double focal_loss_value(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& gt, double gamma = 2.0,
                        double alpha = 0.25, double eps_prob = 1e-8);
double mask_loss_value(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& gt,
                       const LossWeights& w);

// flattened [npix] target vectors for one record
Eigen::ArrayXd mask_to_array(const BinMask& m);

CostMatrix pairwise_costs(const PredictionSet& preds, const PisRecord& gt, const LossWeights& w);

// Minimum-cost injective row->column assignment; requires rows <= cols. Ties
// are broken toward the lexicographically smallest assignment vector.
Assignment hungarian(const Eigen::MatrixXd& cost);

Assignment match(const PredictionSet& preds, const PisRecord& gt, const LossWeights& w);

struct SupLoss {
  Var total = nullptr;
  Var l_ic = nullptr, l_im = nullptr, l_pm = nullptr;
};

// Supervised loss over one image given a fixed assignment. `preds` must carry
// live graph nodes from the same tape.
SupLoss supervised_loss(Tape& tape, const Model::GraphOut& preds, const PisRecord& gt,
                        const Assignment& tau, const LossWeights& w);

// Point subset for mask-loss evaluation. strategy: "all" | "uniform" |
// "importance" (concentrates samples where pred is near 0.5).
std::vector<int> sample_points(const Eigen::ArrayXd& pred, int count, const std::string& strategy,
                               Rng& rng);

}  // namespace surgpis
