#include "surgpis/weaksup/weaksup.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace surgpis {

namespace {

Var row_of(Tape& tape, Var m, int r) { return tape.gather_rows(m, {r}); }

Tensor mask_tensor(const BinMask& m) {
  Tensor t({1, static_cast<int>(m.v.size())});
  for (size_t i = 0; i < m.v.size(); ++i) t[static_cast<long>(i)] = m.v[i];
  return t;
}

long flip_index(long p, int h, int w, const GeomTransform& g) {
  int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
  if (g.hflip) x = w - 1 - x;
  if (g.vflip) y = h - 1 - y;
  return static_cast<long>(y) * w + x;
}

// instrument-level (ic + im) cost over explicit rows; row 0 is background
Eigen::MatrixXd instrument_costs(const PredictionSet& preds, const std::vector<int>& classes,
                                 const std::vector<const BinMask*>& masks, const LossWeights& w) {
  const int nx = static_cast<int>(classes.size());
  const long npix = static_cast<long>(preds.h) * preds.w;
  Eigen::MatrixXd c(nx, preds.nq);
  for (int i = 0; i < nx; ++i) {
    Eigen::ArrayXd y = mask_to_array(*masks[i]);
    for (int j = 0; j < preds.nq; ++j) {
      double ic = -std::log(std::max(preds.class_probs.at(j, classes[i]), w.eps_prob));
      Eigen::ArrayXd pj = preds.inst_masks.data.segment(static_cast<long>(j) * npix, npix);
      c(i, j) = w.alpha_class * ic + w.alpha_mask * mask_loss_value(pj, y, w);
    }
  }
  return c;
}

// binarize a query's part masks inside `support`, resolving overlaps by argmax
std::vector<BinMask> harden_parts(const PredictionSet& preds, int query, const BinMask& support) {
  const long npix = static_cast<long>(preds.h) * preds.w;
  const int cpart = static_cast<int>(preds.part_masks.size());
  std::vector<BinMask> parts(cpart, BinMask(preds.h, preds.w));
  for (long p = 0; p < npix; ++p) {
    if (!support.v[p]) continue;
    int best = -1;
    double best_v = 0.5;
    for (int k = 0; k < cpart; ++k) {
      double v = preds.part_masks[k].data[static_cast<long>(query) * npix + p];
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    if (best >= 0) parts[best].v[p] = 1;
  }
  return parts;
}

BinMask harden_mask(const Tensor& masks, int query, long npix, int h, int w) {
  BinMask m(h, w);
  for (long p = 0; p < npix; ++p)
    m.v[p] = masks.data[static_cast<long>(query) * npix + p] > 0.5 ? 1 : 0;
  return m;
}

}  // namespace

void ema_update(TeacherState& teacher, const ParamStore& student) {
  if (!teacher.params.shape_compatible(student))
    throw std::invalid_argument("ema_update: teacher/student parameter mismatch");
  const double a = teacher.alpha;
  auto& te = teacher.params.entries();
  const auto& se = student.entries();
  for (size_t i = 0; i < te.size(); ++i)
    te[i].second.data = a * te[i].second.data + (1.0 - a) * se[i].second.data;
  teacher.t += 1;
}

ImageF apply_geom(const ImageF& image, const GeomTransform& g) {
  ImageF out(image.h, image.w);
  const long npix = static_cast<long>(image.h) * image.w;
  for (int c = 0; c < 3; ++c)
    for (long p = 0; p < npix; ++p)
      out.data[c * npix + flip_index(p, image.h, image.w, g)] = image.data[c * npix + p];
  return out;
}

BinMask apply_geom(const BinMask& mask, const GeomTransform& g) {
  BinMask out(mask.h, mask.w);
  for (long p = 0; p < static_cast<long>(mask.v.size()); ++p)
    out.v[flip_index(p, mask.h, mask.w, g)] = mask.v[p];
  return out;
}

PssMap apply_geom(const PssMap& map, const GeomTransform& g) {
  PssMap out(map.h, map.w);
  out.image_id = map.image_id;
  out.catalog = map.catalog;
  for (long p = 0; p < static_cast<long>(map.labels.size()); ++p)
    out.labels[flip_index(p, map.h, map.w, g)] = map.labels[p];
  return out;
}

IisRecord apply_geom(const IisRecord& rec, const GeomTransform& g) {
  IisRecord out = rec;
  out.background = apply_geom(rec.background, g);
  for (size_t i = 0; i < rec.instances.size(); ++i)
    out.instances[i].mask = apply_geom(rec.instances[i].mask, g);
  return out;
}

PisRecord apply_geom(const PisRecord& rec, const GeomTransform& g) {
  PisRecord out = rec;
  out.background = apply_geom(rec.background, g);
  for (size_t i = 0; i < rec.instances.size(); ++i) {
    out.instances[i].mask = apply_geom(rec.instances[i].mask, g);
    for (size_t k = 0; k < rec.instances[i].parts.size(); ++k)
      out.instances[i].parts[k] = apply_geom(rec.instances[i].parts[k], g);
  }
  return out;
}

std::pair<ImageF, GeomTransform> weak_augment(const ImageF& image, uint64_t seed) {
  Rng rng = Rng::derive(seed, 0xAE01ULL);
  GeomTransform g;
  g.hflip = rng.bernoulli(0.5);
  g.vflip = rng.bernoulli(0.5);
  return {apply_geom(image, g), g};
}

ImageF strong_augment(const ImageF& image, uint64_t seed, const StrongAugConfig& cfg) {
  Rng rng = Rng::derive(seed, 0xAE02ULL);
  ImageF out = image;
  const long npix = static_cast<long>(image.h) * image.w;

  double brightness = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
  double contrast = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (long p = 0; p < npix; ++p) mean += out.data[c * npix + p];
    mean /= npix;
    for (long p = 0; p < npix; ++p) {
      double v = out.data[c * npix + p] * brightness;
      out.data[c * npix + p] = (v - mean) * contrast + mean;
    }
  }

  if (rng.bernoulli(cfg.p_grayscale)) {
    for (long p = 0; p < npix; ++p) {
      double y = 0.299 * out.data[p] + 0.587 * out.data[npix + p] + 0.114 * out.data[2 * npix + p];
      out.data[p] = out.data[npix + p] = out.data[2 * npix + p] = y;
    }
  }

  if (rng.bernoulli(cfg.p_blur)) {
    double sigma = rng.uniform(0.3, 1.0);
    double k0 = 1.0, k1 = std::exp(-0.5 / (sigma * sigma));
    double norm = k0 + 2.0 * k1;
    ImageF tmp = out;
    auto clampi = [](int v, int lo, int hi) { return std::min(std::max(v, lo), hi); };
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x)
          tmp.at(c, y, x) = (k1 * out.at(c, y, clampi(x - 1, 0, image.w - 1)) +
                             k0 * out.at(c, y, x) +
                             k1 * out.at(c, y, clampi(x + 1, 0, image.w - 1))) / norm;
      for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x)
          out.at(c, y, x) = (k1 * tmp.at(c, clampi(y - 1, 0, image.h - 1), x) +
                             k0 * tmp.at(c, y, x) +
                             k1 * tmp.at(c, clampi(y + 1, 0, image.h - 1), x)) / norm;
    }
  }

  if (rng.bernoulli(cfg.p_erase)) {
    int eh = std::max(1, static_cast<int>(rng.uniform(0.05, cfg.max_erase_frac) * image.h));
    int ew = std::max(1, static_cast<int>(rng.uniform(0.05, cfg.max_erase_frac) * image.w));
    int y0 = rng.randint(0, image.h - eh);
    int x0 = rng.randint(0, image.w - ew);
    for (int c = 0; c < 3; ++c)
      for (int y = y0; y < y0 + eh; ++y)
        for (int x = x0; x < x0 + ew; ++x) out.at(c, y, x) = 0.0;
  }

  for (auto& v : out.data) v = std::min(std::max(v, 0.0), 1.0);
  return out;
}

double dice_coefficient(const BinMask& a, const BinMask& b) {
  long sa = a.area(), sb = b.area();
  if (sa + sb == 0) return 1.0;
  return 2.0 * intersection_area(a, b) / static_cast<double>(sa + sb);
}

PseudoLabelSet filter_pseudo(const PredictionSet& teacher, const IisRecord& gt,
                             const WeakConfig& wc) {
  const long npix = static_cast<long>(gt.h) * gt.w;
  const int nx = 1 + static_cast<int>(gt.instances.size());
  if (nx > teacher.nq)
    throw std::invalid_argument("filter_pseudo: more ground-truth rows than queries");

  PseudoLabelSet out;
  out.kind = Granularity::IIS;
  out.h = gt.h;
  out.w = gt.w;
  out.catalog = gt.catalog;

  LossWeights w;
  std::vector<int> classes{0};
  std::vector<const BinMask*> masks{&gt.background};
  for (const auto& inst : gt.instances) {
    classes.push_back(inst.class_index);
    masks.push_back(&inst.mask);
  }
  Assignment tau = hungarian(instrument_costs(teacher, classes, masks, w));

  for (int i = 1; i < nx; ++i) {
    int j = tau.tau[i];
    PseudoInstance pi;
    pi.query = j;
    pi.class_index = gt.instances[i - 1].class_index;
    pi.mask = gt.instances[i - 1].mask;
    BinMask teach = harden_mask(teacher.inst_masks, j, npix, gt.h, gt.w);
    pi.dice = dice_coefficient(teach, gt.instances[i - 1].mask);
    pi.kept = !wc.filter_enabled || pi.dice > wc.thresh_dice;
    pi.parts = harden_parts(teacher, j, pi.mask);
    out.instances.push_back(std::move(pi));
  }
  return out;
}

PseudoLabelSet filter_pseudo(const PredictionSet& teacher, const PssMap& gt,
                             const WeakConfig& wc) {
  const long npix = static_cast<long>(gt.h) * gt.w;
  const int cpart = gt.catalog.num_parts();

  PseudoLabelSet out;
  out.kind = Granularity::PSS;
  out.h = gt.h;
  out.w = gt.w;
  out.catalog = gt.catalog;

  AggregatedSemanticMap agg = aggregate_pss(teacher);
  for (int k = 1; k <= cpart; ++k) {
    BinMask pred_k(gt.h, gt.w), gt_k(gt.h, gt.w);
    for (long p = 0; p < npix; ++p) {
      int arg = 0;
      double best = agg.s_hat.data[p];
      for (int l = 1; l <= cpart; ++l) {
        double v = agg.s_hat.data[static_cast<long>(l) * npix + p];
        if (v > best) {
          best = v;
          arg = l;
        }
      }
      pred_k.v[p] = arg == k ? 1 : 0;
      gt_k.v[p] = gt.labels[p] == k ? 1 : 0;
    }
    double d = dice_coefficient(pred_k, gt_k);
    out.part_dice.push_back(d);
    out.part_kept.push_back(!wc.filter_enabled || d > wc.thresh_dice ? 1 : 0);
  }

  const int ncls = teacher.class_probs.shape[1];
  for (int j = 0; j < teacher.nq; ++j) {
    int arg = 0;
    double best = teacher.class_probs.at(j, 0);
    for (int a = 1; a < ncls; ++a)
      if (teacher.class_probs.at(j, a) > best) {
        best = teacher.class_probs.at(j, a);
        arg = a;
      }
    if (arg == 0 || arg == ncls - 1) continue;  // background or no-object query
    PseudoInstance pi;
    pi.query = j;
    pi.class_index = arg;
    pi.mask = harden_mask(teacher.inst_masks, j, npix, gt.h, gt.w);
    if (pi.mask.empty_mask()) continue;
    pi.parts = harden_parts(teacher, j, pi.mask);
    pi.dice = 1.0;
    pi.kept = true;
    out.instances.push_back(std::move(pi));
  }
  return out;
}

AggregatedSemanticMap aggregate_pss(const PredictionSet& preds) {
  const long npix = static_cast<long>(preds.h) * preds.w;
  const int cpart = static_cast<int>(preds.part_masks.size());
  const int ncls = preds.class_probs.shape[1];
  const int no_object = ncls - 1;

  AggregatedSemanticMap out;
  out.h = preds.h;
  out.w = preds.w;
  out.rho = Tensor({cpart + 1, static_cast<int>(npix)});
  out.s_hat = Tensor({cpart + 1, static_cast<int>(npix)});

  for (int j = 0; j < preds.nq; ++j) {
    int arg = 0;
    double best = preds.class_probs.at(j, 0);
    for (int a = 1; a < no_object; ++a)  // "no object" excluded from the argmax
      if (preds.class_probs.at(j, a) > best) {
        best = preds.class_probs.at(j, a);
        arg = a;
      }
    out.gamma.push_back(arg);
  }

  for (int j = 0; j < preds.nq; ++j) {
    double w0 = preds.class_probs.at(j, 0);
    out.rho.data.segment(0, npix) +=
        w0 * preds.inst_masks.data.segment(static_cast<long>(j) * npix, npix);
    if (out.gamma[j] > 0) {
      double wf = preds.class_probs.at(j, out.gamma[j]);
      for (int k = 0; k < cpart; ++k)
        out.rho.data.segment(static_cast<long>(k + 1) * npix, npix) +=
            wf * preds.part_masks[k].data.segment(static_cast<long>(j) * npix, npix);
    }
  }

  for (long p = 0; p < npix; ++p) {
    double denom = 0.0;
    for (int k = 0; k <= cpart; ++k) denom += out.rho.data[static_cast<long>(k) * npix + p];
    if (denom <= 0.0) {
      out.s_hat.data[p] = 1.0;  // all-zero pixel defaults to background
    } else {
      for (int k = 0; k <= cpart; ++k)
        out.s_hat.data[static_cast<long>(k) * npix + p] =
            out.rho.data[static_cast<long>(k) * npix + p] / denom;
    }
  }
  return out;
}

Var aggregate_pss_graph(Tape& tape, const Model::GraphOut& preds) {
  const int nq = preds.class_probs->value.shape[0];
  const int ncls = preds.class_probs->value.shape[1];
  const int no_object = ncls - 1;
  const int cpart = static_cast<int>(preds.part_masks.size());
  const long npix = preds.inst_masks->value.shape[1];

  // argmax selection fixed at forward values
  std::vector<int> gamma(nq, 0);
  for (int j = 0; j < nq; ++j) {
    double best = preds.class_probs->value.at(j, 0);
    for (int a = 1; a < no_object; ++a)
      if (preds.class_probs->value.at(j, a) > best) {
        best = preds.class_probs->value.at(j, a);
        gamma[j] = a;
      }
  }

  std::vector<Var> w0_rows, wf_rows;
  for (int j = 0; j < nq; ++j) {
    w0_rows.push_back(tape.reshape(tape.pick(preds.class_probs, static_cast<long>(j) * ncls), {1, 1}));
    if (gamma[j] > 0)
      wf_rows.push_back(tape.reshape(
          tape.pick(preds.class_probs, static_cast<long>(j) * ncls + gamma[j]), {1, 1}));
    else
      wf_rows.push_back(tape.constant(Tensor::zeros({1, 1})));
  }
  Var w0 = tape.concat_rows(w0_rows);  // [nq, 1]
  Var wf = tape.concat_rows(wf_rows);

  std::vector<Var> rho_rows;
  rho_rows.push_back(tape.matmul(w0, preds.inst_masks, /*trans_a=*/true));
  for (int k = 0; k < cpart; ++k)
    rho_rows.push_back(tape.matmul(wf, preds.part_masks[k], /*trans_a=*/true));
  Var rho = tape.concat_rows(rho_rows);       // [cpart+1, npix]
  Var rho_t = tape.transpose2d(rho);          // [npix, cpart+1]
  Var denom = tape.matmul(rho_t, tape.constant(Tensor::full({cpart + 1, 1}, 1.0)));

  // pixels with zero mass become pure background with zero gradient
  Tensor zero_col({static_cast<int>(npix), 1});
  for (long p = 0; p < npix; ++p) zero_col[p] = denom->value.data[p] <= 1e-300 ? 1.0 : 0.0;
  Tensor zero_fix({static_cast<int>(npix), cpart + 1});
  for (long p = 0; p < npix; ++p) zero_fix[p * (cpart + 1)] = zero_col[p];

  Var denom_safe = tape.add(denom, tape.constant(zero_col));
  Var denom_rep = tape.matmul(denom_safe, tape.constant(Tensor::full({1, cpart + 1}, 1.0)));
  Var s_hat_t = tape.div(tape.add(rho_t, tape.constant(zero_fix)), denom_rep);
  return tape.transpose2d(s_hat_t);  // [cpart+1, npix]
}

namespace {

// student-vs-pseudo-label supervised loss; dropped pseudo entries and their
// queries contribute nothing
Var consistency_loss(Tape& tape, const Model::GraphOut& student, const PseudoLabelSet& pseudo,
                     const LossWeights& w) {
  const int nq = student.class_probs->value.shape[0];
  const int no_object = student.class_probs->value.shape[1] - 1;
  const int cpart = pseudo.catalog.num_parts();
  const long npix = static_cast<long>(pseudo.h) * pseudo.w;
  if (student.inst_masks->value.shape[1] != npix)
    throw std::invalid_argument("consistency_loss: resolution mismatch");

  BinMask all_union(pseudo.h, pseudo.w);
  for (const auto& pi : pseudo.instances) all_union = mask_or(all_union, pi.mask);
  BinMask background = mask_not(all_union);

  std::vector<const PseudoInstance*> kept;
  for (const auto& pi : pseudo.instances)
    if (pi.kept) kept.push_back(&pi);

  // an empty retained set contributes exactly nothing
  bool any_part_kept = false;
  for (char k : pseudo.part_kept) any_part_kept = any_part_kept || k;
  if (kept.empty() || (pseudo.kind == Granularity::PSS && !any_part_kept))
    return tape.constant_scalar(0.0);
  const int nx = 1 + static_cast<int>(kept.size());
  if (nx > nq) throw std::invalid_argument("consistency_loss: too many pseudo instances");

  // match student queries against the kept pseudo rows
  PredictionSet sp;
  sp.nq = nq;
  sp.h = pseudo.h;
  sp.w = pseudo.w;
  sp.class_probs = student.class_probs->value;
  sp.inst_masks = student.inst_masks->value;
  for (Var m : student.part_masks) sp.part_masks.push_back(m->value);

  std::vector<int> classes{0};
  std::vector<const BinMask*> masks{&background};
  for (const auto* pi : kept) {
    classes.push_back(pi->class_index);
    masks.push_back(&pi->mask);
  }
  Eigen::MatrixXd cost = instrument_costs(sp, classes, masks, w);
  if (w.use_part_cost) {
    for (int i = 1; i < nx; ++i)
      for (int j = 0; j < nq; ++j) {
        double acc = 0.0;
        int used = 0;
        for (int k = 0; k < cpart; ++k) {
          if (pseudo.kind == Granularity::PSS && !pseudo.part_kept[k]) continue;
          Eigen::ArrayXd pk = sp.part_masks[k].data.segment(static_cast<long>(j) * npix, npix);
          acc += mask_loss_value(pk, mask_to_array(kept[i - 1]->parts[k]), w);
          used += 1;
        }
        if (used > 0) cost(i, j) += w.alpha_mask * acc / used;
      }
  }
  Assignment tau = hungarian(cost);

  std::vector<char> matched(nq, 0), excluded(nq, 0);
  for (int j : tau.tau) matched[j] = 1;
  for (const auto& pi : pseudo.instances)
    if (!pi.kept && pi.query >= 0 && pi.query < nq) excluded[pi.query] = 1;

  Var l_ic = tape.constant_scalar(0.0);
  Var l_im = tape.constant_scalar(0.0);
  Var l_pm = tape.constant_scalar(0.0);
  for (int i = 0; i < nx; ++i) {
    int j = tau.tau[i];
    int target = (i == 0) ? 0 : kept[i - 1]->class_index;
    l_ic = tape.add(l_ic,
                    class_loss(tape, row_of(tape, student.class_probs, j), target, no_object, w));
    const BinMask& y = (i == 0) ? background : kept[i - 1]->mask;
    l_im = tape.add(l_im, mask_loss(tape, row_of(tape, student.inst_masks, j), mask_tensor(y), w));
    if (i > 0) {
      for (int k = 0; k < cpart; ++k) {
        if (pseudo.kind == Granularity::PSS && !pseudo.part_kept[k]) continue;
        l_pm = tape.add(l_pm, mask_loss(tape, row_of(tape, student.part_masks[k], j),
                                        mask_tensor(kept[i - 1]->parts[k]), w));
      }
    }
  }
  for (int j = 0; j < nq; ++j)
    if (!matched[j] && !excluded[j])
      l_ic = tape.add(l_ic, class_loss(tape, row_of(tape, student.class_probs, j), no_object,
                                       no_object, w));

  Var total = tape.add(tape.scale(l_ic, w.alpha_class / nx),
                       tape.scale(tape.add(tape.scale(l_im, 1.0 / nx),
                                           tape.scale(l_pm, 1.0 / (static_cast<double>(nx) * cpart))),
                                  w.alpha_mask));
  return total;
}

}  // namespace

WeakLoss weak_loss(Tape& tape, const Model::GraphOut& student, const PseudoLabelSet& pseudo,
                   const IisRecord& gt, const LossWeights& w, const WeakConfig& wc) {
  if (pseudo.kind != Granularity::IIS)
    throw std::invalid_argument("weak_loss: pseudo labels are not IIS-kind");
  const int nq = student.class_probs->value.shape[0];
  const int no_object = student.class_probs->value.shape[1] - 1;
  const long npix = static_cast<long>(gt.h) * gt.w;
  const int nx = 1 + static_cast<int>(gt.instances.size());
  if (nx > nq) throw std::invalid_argument("weak_loss: more ground-truth rows than queries");

  WeakLoss out;
  out.consistency = consistency_loss(tape, student, pseudo, w);

  // instrument-only matching against the IIS ground truth
  PredictionSet sp;
  sp.nq = nq;
  sp.h = gt.h;
  sp.w = gt.w;
  sp.class_probs = student.class_probs->value;
  sp.inst_masks = student.inst_masks->value;
  std::vector<int> classes{0};
  std::vector<const BinMask*> masks{&gt.background};
  for (const auto& inst : gt.instances) {
    classes.push_back(inst.class_index);
    masks.push_back(&inst.mask);
  }
  (void)npix;
  Assignment tau = hungarian(instrument_costs(sp, classes, masks, w));

  std::vector<char> matched(nq, 0);
  for (int j : tau.tau) matched[j] = 1;
  Var l_ic = tape.constant_scalar(0.0);
  Var l_im = tape.constant_scalar(0.0);
  for (int i = 0; i < nx; ++i) {
    int j = tau.tau[i];
    int target = classes[i];
    l_ic = tape.add(l_ic,
                    class_loss(tape, row_of(tape, student.class_probs, j), target, no_object, w));
    l_im = tape.add(l_im,
                    mask_loss(tape, row_of(tape, student.inst_masks, j), mask_tensor(*masks[i]), w));
  }
  for (int j = 0; j < nq; ++j)
    if (!matched[j])
      l_ic = tape.add(l_ic, class_loss(tape, row_of(tape, student.class_probs, j), no_object,
                                       no_object, w));
  out.specific = tape.scale(tape.add(l_ic, l_im), 1.0 / nx);

  out.total = tape.scale(tape.add(out.consistency, out.specific), wc.weight_iis);
  return out;
}

WeakLoss weak_loss(Tape& tape, const Model::GraphOut& student, const PseudoLabelSet& pseudo,
                   const PssMap& gt, const LossWeights& w, const WeakConfig& wc) {
  if (pseudo.kind != Granularity::PSS)
    throw std::invalid_argument("weak_loss: pseudo labels are not PSS-kind");
  const long npix = static_cast<long>(gt.h) * gt.w;
  if (student.inst_masks->value.shape[1] != npix)
    throw std::invalid_argument("weak_loss: resolution mismatch");
  const int cpart = gt.catalog.num_parts();

  WeakLoss out;
  out.consistency = consistency_loss(tape, student, pseudo, w);

  Var s_hat = aggregate_pss_graph(tape, student);  // [cpart+1, npix]
  Var acc = tape.constant_scalar(0.0);
  for (int k = 1; k <= cpart; ++k) {
    Tensor gt_k({1, static_cast<int>(npix)});
    for (long p = 0; p < npix; ++p) gt_k[p] = gt.labels[p] == k ? 1.0 : 0.0;
    acc = tape.add(acc, mask_loss(tape, row_of(tape, s_hat, k), gt_k, w));
  }
  out.specific = tape.scale(acc, 1.0 / cpart);

  out.total = tape.scale(tape.add(out.consistency, out.specific), wc.weight_pss);
  return out;
}

}  // namespace surgpis
