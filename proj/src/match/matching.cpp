#include "surgpis/match/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace surgpis {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Var row_of(Tape& tape, Var m, int r) { return tape.gather_rows(m, {r}); }

Tensor mask_tensor(const BinMask& m) {
  Tensor t({1, static_cast<int>(m.v.size())});
  for (size_t i = 0; i < m.v.size(); ++i) t[static_cast<long>(i)] = m.v[i];
  return t;
}

void check_same_shape(const Tensor& pred, const Tensor& gt, const char* what) {
  if (pred.shape != gt.shape) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

// minimum total cost over injective row assignments; rows <= cols
double assignment_cost(const Eigen::MatrixXd& a, std::vector<int>* tau_out = nullptr) {
  const int n = static_cast<int>(a.rows()), m = static_cast<int>(a.cols());
  if (n == 0) {
    if (tau_out) tau_out->clear();
    return 0.0;
  }
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j)
        if (!used[j]) {
          double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> tau(n, -1);
  double cost = 0.0;
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) {
      tau[p[j] - 1] = j - 1;
      cost += a(p[j] - 1, j - 1);
    }
  if (tau_out) *tau_out = std::move(tau);
  return cost;
}

}  // namespace

Var dice_loss(Tape& tape, Var pred, const Tensor& gt, double eps_smooth) {
  check_same_shape(pred->value, gt, "dice_loss");
  Var inter = tape.sum_all(tape.mul(pred, tape.constant(gt)));
  Var denom = tape.add_scalar(tape.sum_all(pred), gt.data.sum() + eps_smooth);
  return tape.add_scalar(tape.scale(tape.div(inter, denom), -2.0), 1.0);
}

Var focal_loss(Tape& tape, Var pred, const Tensor& gt, double gamma, double alpha,
               double eps_prob) {
  check_same_shape(pred->value, gt, "focal_loss");
  Tensor gt_c(gt.shape, 1.0 - gt.data);
  // p_t = g*p + (1-g)*(1-p)
  Var one_minus_p = tape.add_scalar(tape.scale(pred, -1.0), 1.0);
  Var pt = tape.add(tape.mul(pred, tape.constant(gt)),
                    tape.mul(one_minus_p, tape.constant(gt_c)));
  Var focus = tape.powc(tape.add_scalar(tape.scale(pt, -1.0), 1.0), gamma);
  Var terms = tape.mul(focus, tape.log_clamped(pt, eps_prob));
  return tape.scale(tape.mean_all(terms), -alpha);
}

Var mask_loss(Tape& tape, Var pred, const Tensor& gt, const LossWeights& w) {
  Var f = focal_loss(tape, pred, gt, w.focal_gamma, w.focal_alpha, w.eps_prob);
  Var d = dice_loss(tape, pred, gt, w.eps_smooth);
  return tape.add(tape.scale(f, w.lambda_focal), tape.scale(d, w.lambda_dice));
}

Var class_loss(Tape& tape, Var probs_row, int target, int no_object_index, const LossWeights& w) {
  long ncls = probs_row->value.numel();
  if (target < 0 || target >= ncls) throw std::invalid_argument("class_loss: target out of range");
  double weight = (target == no_object_index) ? w.no_object_weight : 1.0;
  return tape.scale(tape.pick(tape.log_clamped(probs_row, w.eps_prob), target), -weight);
}

double dice_loss_value(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& gt, double eps_smooth) {
  if (pred.size() != gt.size()) throw std::invalid_argument("dice_loss: shape mismatch");
  return 1.0 - 2.0 * (pred * gt).sum() / (pred.sum() + gt.sum() + eps_smooth);
}

double focal_loss_value(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& gt, double gamma,
                        double alpha, double eps_prob) {
  if (pred.size() != gt.size()) throw std::invalid_argument("focal_loss: shape mismatch");
  Eigen::ArrayXd pt = gt * pred + (1.0 - gt) * (1.0 - pred);
  return -alpha * ((1.0 - pt).pow(gamma) * pt.max(eps_prob).log()).mean();
}

double mask_loss_value(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& gt,
                       const LossWeights& w) {
  return w.lambda_focal * focal_loss_value(pred, gt, w.focal_gamma, w.focal_alpha, w.eps_prob) +
         w.lambda_dice * dice_loss_value(pred, gt, w.eps_smooth);
}

Eigen::ArrayXd mask_to_array(const BinMask& m) {
  Eigen::ArrayXd a(m.v.size());
  for (size_t i = 0; i < m.v.size(); ++i) a[static_cast<long>(i)] = m.v[i];
  return a;
}

CostMatrix pairwise_costs(const PredictionSet& preds, const PisRecord& gt, const LossWeights& w) {
  ValidationReport report = validate_pis(gt);
  if (!report.empty())
    throw std::invalid_argument("pairwise_costs: invalid ground truth: " + report.to_string());
  const int nx = 1 + static_cast<int>(gt.instances.size());
  const int nq = preds.nq;
  if (nx > nq) throw std::invalid_argument("pairwise_costs: more ground-truth rows than queries");
  const long npix = static_cast<long>(gt.h) * gt.w;
  if (preds.inst_masks.shape[1] != npix)
    throw std::invalid_argument("pairwise_costs: resolution mismatch");
  const int cpart = gt.catalog.num_parts();
  const int no_object = preds.class_probs.shape[1] - 1;
  (void)no_object;

  CostMatrix cm;
  cm.rows = nx;
  cm.cols = nq;
  cm.ic = Eigen::MatrixXd::Zero(nx, nq);
  cm.im = Eigen::MatrixXd::Zero(nx, nq);
  cm.pm = Eigen::MatrixXd::Zero(nx, nq);

  for (int i = 0; i < nx; ++i) {
    int target = (i == 0) ? 0 : gt.instances[i - 1].class_index;
    Eigen::ArrayXd y =
        (i == 0) ? mask_to_array(gt.background) : mask_to_array(gt.instances[i - 1].mask);
    for (int j = 0; j < nq; ++j) {
      cm.ic(i, j) = -std::log(std::max(preds.class_probs.at(j, target), w.eps_prob));
      Eigen::ArrayXd pred_mask = preds.inst_masks.data.segment(static_cast<long>(j) * npix, npix);
      cm.im(i, j) = mask_loss_value(pred_mask, y, w);
      if (i > 0 && w.use_part_cost) {
        double acc = 0.0;
        for (int k = 0; k < cpart; ++k) {
          Eigen::ArrayXd pk = preds.part_masks[k].data.segment(static_cast<long>(j) * npix, npix);
          acc += mask_loss_value(pk, mask_to_array(gt.instances[i - 1].parts[k]), w);
        }
        cm.pm(i, j) = acc / cpart;
      }
    }
  }
  cm.total = w.alpha_class * cm.ic + w.alpha_mask * cm.im + w.alpha_mask * cm.pm;
  return cm;
}

Assignment hungarian(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows()), m = static_cast<int>(cost.cols());
  if (n > m) throw std::invalid_argument("hungarian: more rows than columns");
  if (!cost.allFinite()) throw std::invalid_argument("hungarian: non-finite cost");
  double best = assignment_cost(cost);
  const double tol = 1e-9 * (1.0 + std::abs(best));

  // fix rows in order to the smallest column that preserves optimality
  Assignment out;
  out.tau.assign(n, -1);
  out.cost = best;
  std::vector<char> used(m, 0);
  double fixed = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      if (used[j]) continue;
      std::vector<int> free_cols;
      for (int jj = 0; jj < m; ++jj)
        if (!used[jj] && jj != j) free_cols.push_back(jj);
      Eigen::MatrixXd sub(n - i - 1, free_cols.size());
      for (int r = i + 1; r < n; ++r)
        for (size_t c = 0; c < free_cols.size(); ++c) sub(r - i - 1, c) = cost(r, free_cols[c]);
      if (fixed + cost(i, j) + assignment_cost(sub) <= best + tol) {
        out.tau[i] = j;
        used[j] = 1;
        fixed += cost(i, j);
        break;
      }
    }
    if (out.tau[i] < 0) throw std::logic_error("hungarian: tie-break failed");
  }
  return out;
}

Assignment match(const PredictionSet& preds, const PisRecord& gt, const LossWeights& w) {
  return hungarian(pairwise_costs(preds, gt, w).total);
}

SupLoss supervised_loss(Tape& tape, const Model::GraphOut& preds, const PisRecord& gt,
                        const Assignment& tau, const LossWeights& w) {
  const int nx = 1 + static_cast<int>(gt.instances.size());
  const int nq = preds.class_probs->value.shape[0];
  const long npix = static_cast<long>(gt.h) * gt.w;
  if (static_cast<int>(tau.tau.size()) != nx)
    throw std::invalid_argument("supervised_loss: assignment size mismatch");
  std::vector<char> matched(nq, 0);
  for (int j : tau.tau) {
    if (j < 0 || j >= nq || matched[j])
      throw std::invalid_argument("supervised_loss: assignment not injective into queries");
    matched[j] = 1;
  }
  if (preds.inst_masks->value.shape[1] != npix)
    throw std::invalid_argument("supervised_loss: resolution mismatch");
  const int cpart = gt.catalog.num_parts();
  const int no_object = preds.class_probs->value.shape[1] - 1;

  Var l_ic = tape.constant_scalar(0.0);
  Var l_im = tape.constant_scalar(0.0);
  Var l_pm = tape.constant_scalar(0.0);

  for (int i = 0; i < nx; ++i) {
    int j = tau.tau[i];
    int target = (i == 0) ? 0 : gt.instances[i - 1].class_index;
    l_ic = tape.add(l_ic, class_loss(tape, row_of(tape, preds.class_probs, j), target, no_object, w));
    const BinMask& y = (i == 0) ? gt.background : gt.instances[i - 1].mask;
    l_im = tape.add(l_im, mask_loss(tape, row_of(tape, preds.inst_masks, j), mask_tensor(y), w));
    if (i > 0) {
      for (int k = 0; k < cpart; ++k)
        l_pm = tape.add(l_pm, mask_loss(tape, row_of(tape, preds.part_masks[k], j),
                                        mask_tensor(gt.instances[i - 1].parts[k]), w));
    }
  }
  for (int j = 0; j < nq; ++j)
    if (!matched[j])
      l_ic = tape.add(l_ic, class_loss(tape, row_of(tape, preds.class_probs, j), no_object,
                                       no_object, w));

  SupLoss out;
  out.l_ic = tape.scale(l_ic, 1.0 / nx);
  out.l_im = tape.scale(l_im, 1.0 / nx);
  out.l_pm = tape.scale(l_pm, 1.0 / (static_cast<double>(nx) * cpart));
  out.total = tape.add(tape.scale(out.l_ic, w.alpha_class),
                       tape.scale(tape.add(out.l_im, out.l_pm), w.alpha_mask));
  return out;
}

std::vector<int> sample_points(const Eigen::ArrayXd& pred, int count, const std::string& strategy,
                               Rng& rng) {
  const int n = static_cast<int>(pred.size());
  std::vector<int> idx;
  if (strategy == "all") {
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }
  if (count <= 0) throw std::invalid_argument("sample_points: count must be positive");
  if (count > n) throw std::invalid_argument("sample_points: count exceeds pixel count");
  if (strategy == "uniform") {
    std::vector<int> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < count; ++i) std::swap(pool[i], pool[rng.randint(i, n - 1)]);
    pool.resize(count);
    return pool;
  }
  if (strategy == "importance") {
    // oversample, then keep the points closest to the decision boundary
    int pool_size = std::min(3 * count, n);
    std::vector<int> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < pool_size; ++i) std::swap(pool[i], pool[rng.randint(i, n - 1)]);
    pool.resize(pool_size);
    std::sort(pool.begin(), pool.end(), [&](int a, int b) {
      double ua = std::abs(pred[a] - 0.5), ub = std::abs(pred[b] - 0.5);
      return ua != ub ? ua < ub : a < b;
    });
    pool.resize(count);
    return pool;
  }
  throw std::invalid_argument("sample_points: unknown strategy " + strategy);
}

}  // namespace surgpis
