#include "surgpis/metrics/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace surgpis {

namespace {

const BinMask& part_or_empty(const std::vector<BinMask>& parts, int k, const BinMask& empty) {
  return k < static_cast<int>(parts.size()) ? parts[k] : empty;
}

PqResult pq_like(const std::vector<HardPrediction>& preds, const std::vector<PisRecord>& gts,
                 bool use_part_score) {
  if (preds.size() != gts.size())
    throw std::invalid_argument("metrics: prediction/ground-truth count mismatch");
  if (gts.empty()) throw std::invalid_argument("metrics: empty dataset");
  const ClassCatalog& catalog = gts[0].catalog;
  const int nc = catalog.num_instruments();

  PqResult r;
  r.stats.assign(nc, {});
  r.present.assign(nc, 0);

  for (size_t img = 0; img < gts.size(); ++img) {
    const auto& pred = preds[img];
    const auto& gt = gts[img];
    for (int c = 1; c <= nc; ++c) {
      std::vector<int> pi, gi;
      for (size_t i = 0; i < pred.instances.size(); ++i)
        if (pred.instances[i].class_index == c) pi.push_back(static_cast<int>(i));
      for (size_t i = 0; i < gt.instances.size(); ++i)
        if (gt.instances[i].class_index == c) gi.push_back(static_cast<int>(i));
      if (!pi.empty() || !gi.empty()) r.present[c - 1] = 1;

      std::vector<char> pred_used(pi.size(), 0);
      long tp = 0;
      for (int g : gi) {
        bool matched = false;
        for (size_t p = 0; p < pi.size(); ++p) {
          if (pred_used[p]) continue;
          double v = iou(pred.instances[pi[p]].mask, gt.instances[g].mask);
          if (v > 0.5) {  // IoU > 0.5 makes the match unique
            pred_used[p] = 1;
            matched = true;
            tp += 1;
            r.stats[c - 1].sum_score +=
                use_part_score ? part_iou_pair(pred.instances[pi[p]], gt.instances[g]) : v;
            break;
          }
        }
        if (!matched) r.stats[c - 1].fn += 1;
      }
      r.stats[c - 1].tp += tp;
      for (char u : pred_used)
        if (!u) r.stats[c - 1].fp += 1;
    }
  }

  r.per_class.assign(nc, 0.0);
  double sum = 0.0;
  int n_present = 0;
  for (int c = 0; c < nc; ++c) {
    const auto& s = r.stats[c];
    double denom = s.tp + 0.5 * s.fp + 0.5 * s.fn;
    if (denom > 0) r.per_class[c] = s.sum_score / denom;
    if (r.present[c]) {
      sum += r.per_class[c];
      n_present += 1;
    }
  }
  r.mean = n_present > 0 ? sum / n_present : 0.0;
  return r;
}

}  // namespace

double iou(const BinMask& a, const BinMask& b) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("iou: shape mismatch");
  long u = union_area(a, b);
  if (u == 0) return 1.0;
  return static_cast<double>(intersection_area(a, b)) / u;
}

double part_iou_pair(const HardInstance& pred, const PisInstance& gt) {
  const int cpart = static_cast<int>(std::max(pred.parts.size(), gt.parts.size()));
  BinMask empty(gt.mask.h, gt.mask.w);
  double sum = 0.0;
  int present = 0;
  for (int k = 0; k < cpart; ++k) {
    const BinMask& pk = part_or_empty(pred.parts, k, empty);
    const BinMask& gk = part_or_empty(gt.parts, k, empty);
    if (pk.empty_mask() && gk.empty_mask()) continue;
    sum += iou(pk, gk);
    present += 1;
  }
  if (present == 0) return iou(pred.mask, gt.mask);  // no parts anywhere
  return sum / present;
}

PqResult part_pq(const std::vector<HardPrediction>& preds, const std::vector<PisRecord>& gts) {
  return pq_like(preds, gts, true);
}

PqResult pq(const std::vector<HardPrediction>& preds, const std::vector<PisRecord>& gts) {
  return pq_like(preds, gts, false);
}

PartIouResult part_iou_semantic(const std::vector<PssMap>& preds,
                                const std::vector<PssMap>& gts) {
  if (preds.size() != gts.size())
    throw std::invalid_argument("part_iou_semantic: count mismatch");
  if (gts.empty()) throw std::invalid_argument("part_iou_semantic: empty dataset");
  const int cpart = gts[0].catalog.num_parts();
  std::vector<long> inter(cpart, 0), uni(cpart, 0);
  for (size_t img = 0; img < gts.size(); ++img) {
    if (preds[img].h != gts[img].h || preds[img].w != gts[img].w)
      throw std::invalid_argument("part_iou_semantic: shape mismatch");
    for (size_t p = 0; p < gts[img].labels.size(); ++p) {
      int gp = gts[img].labels[p], pp = preds[img].labels[p];
      for (int k = 1; k <= cpart; ++k) {
        bool a = pp == k, b = gp == k;
        inter[k - 1] += a && b;
        uni[k - 1] += a || b;
      }
    }
  }
  PartIouResult r;
  r.per_class.assign(cpart, 0.0);
  r.present.assign(cpart, 0);
  double sum = 0.0;
  int n = 0;
  for (int k = 0; k < cpart; ++k) {
    if (uni[k] > 0) {
      r.present[k] = 1;
      r.per_class[k] = static_cast<double>(inter[k]) / uni[k];
      sum += r.per_class[k];
      n += 1;
    }
  }
  r.mean = n > 0 ? sum / n : 1.0;
  return r;
}

IssResult iss_metrics(const std::vector<HardPrediction>& preds,
                      const std::vector<PisRecord>& gts) {
  if (preds.size() != gts.size()) throw std::invalid_argument("iss_metrics: count mismatch");
  if (gts.empty()) throw std::invalid_argument("iss_metrics: empty dataset");
  const ClassCatalog& catalog = gts[0].catalog;
  const int nc = catalog.num_instruments();

  std::vector<long> inter(nc, 0), uni(nc, 0);
  double ch_sum = 0.0, isi_sum = 0.0;
  long ch_frames = 0, isi_frames = 0;

  for (size_t img = 0; img < gts.size(); ++img) {
    const auto& gt = gts[img];
    std::vector<BinMask> pm(nc, BinMask(gt.h, gt.w)), gm(nc, BinMask(gt.h, gt.w));
    for (const auto& inst : preds[img].instances)
      pm[inst.class_index - 1] = mask_or(pm[inst.class_index - 1], inst.mask);
    for (const auto& inst : gt.instances)
      gm[inst.class_index - 1] = mask_or(gm[inst.class_index - 1], inst.mask);

    double ch = 0.0, isi = 0.0;
    int n_ch = 0, n_isi = 0;
    for (int c = 0; c < nc; ++c) {
      long i = intersection_area(pm[c], gm[c]);
      long u = union_area(pm[c], gm[c]);
      inter[c] += i;
      uni[c] += u;
      double v = u > 0 ? static_cast<double>(i) / u : 1.0;
      if (!gm[c].empty_mask()) {
        ch += v;
        n_ch += 1;
      }
      if (!gm[c].empty_mask() || !pm[c].empty_mask()) {
        isi += v;
        n_isi += 1;
      }
    }
    if (n_ch > 0) {
      ch_sum += ch / n_ch;
      ch_frames += 1;
    }
    if (n_isi > 0) {
      isi_sum += isi / n_isi;
      isi_frames += 1;
    }
  }

  IssResult r;
  r.per_class.assign(nc, 0.0);
  r.present.assign(nc, 0);
  double mc_sum = 0.0;
  int n_mc = 0;
  for (int c = 0; c < nc; ++c) {
    if (uni[c] > 0) {
      r.present[c] = 1;
      r.per_class[c] = static_cast<double>(inter[c]) / uni[c];
      mc_sum += r.per_class[c];
      n_mc += 1;
    }
  }
  r.excluded = nc - n_mc;
  r.mc_iou = n_mc > 0 ? mc_sum / n_mc : 0.0;
  r.ch_iou = ch_frames > 0 ? ch_sum / ch_frames : 0.0;
  r.isi_iou = isi_frames > 0 ? isi_sum / isi_frames : 0.0;
  return r;
}

HardPrediction compose_baseline(const PssMap& pss_pred, const HardPrediction& iis_pred) {
  if (pss_pred.h != iis_pred.h || pss_pred.w != iis_pred.w)
    throw std::invalid_argument("compose_baseline: shape mismatch");
  const int cpart = pss_pred.catalog.num_parts();
  HardPrediction out = iis_pred;
  for (auto& inst : out.instances) {
    inst.parts.assign(cpart, BinMask(out.h, out.w));
    for (size_t p = 0; p < pss_pred.labels.size(); ++p) {
      int k = pss_pred.labels[p];
      if (k >= 1 && k <= cpart && inst.mask.v[p]) inst.parts[k - 1].v[p] = 1;
    }
  }
  return out;
}

HardPrediction harden(const PredictionSet& preds, const ClassCatalog& catalog,
                      double conf_threshold) {
  const int nc = catalog.num_instruments();
  const int cpart = catalog.num_parts();
  const long npix = static_cast<long>(preds.h) * preds.w;

  struct Cand {
    int query;
    int cls;
    double conf;
  };
  std::vector<Cand> cands;
  const int ncls = preds.class_probs.shape[1];
  for (int j = 0; j < preds.nq; ++j) {
    int arg = 0;
    double best = preds.class_probs.at(j, 0);
    for (int a = 1; a < ncls; ++a)
      if (preds.class_probs.at(j, a) > best) {
        best = preds.class_probs.at(j, a);
        arg = a;
      }
    if (arg >= 1 && arg <= nc && best >= conf_threshold) cands.push_back({j, arg, best});
  }

  // pixels go to the most confident claiming query
  std::vector<int> order(cands.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return cands[a].conf > cands[b].conf; });
  std::vector<char> claimed(npix, 0);
  std::vector<BinMask> final_masks(cands.size(), BinMask(preds.h, preds.w));
  for (int idx : order) {
    const Cand& c = cands[idx];
    for (long p = 0; p < npix; ++p)
      if (!claimed[p] && preds.inst_masks.data[static_cast<long>(c.query) * npix + p] > 0.5) {
        claimed[p] = 1;
        final_masks[idx].v[p] = 1;
      }
  }

  HardPrediction out;
  out.h = preds.h;
  out.w = preds.w;
  out.catalog = catalog;
  for (size_t idx = 0; idx < cands.size(); ++idx) {
    if (final_masks[idx].empty_mask()) continue;
    HardInstance inst;
    inst.class_index = cands[idx].cls;
    inst.confidence = cands[idx].conf;
    inst.mask = final_masks[idx];
    inst.parts.assign(cpart, BinMask(preds.h, preds.w));
    // every mask pixel goes to its argmax part so the parts tile the mask
    for (long p = 0; p < npix; ++p) {
      if (!inst.mask.v[p]) continue;
      int bestk = 0;
      double bestv = preds.part_masks.empty()
                         ? 0.0
                         : preds.part_masks[0].data[static_cast<long>(cands[idx].query) * npix + p];
      for (int k = 1; k < cpart; ++k) {
        double v = preds.part_masks[k].data[static_cast<long>(cands[idx].query) * npix + p];
        if (v > bestv) {
          bestv = v;
          bestk = k;
        }
      }
      if (cpart > 0) inst.parts[bestk].v[p] = 1;
    }
    out.instances.push_back(std::move(inst));
  }
  return out;
}

HardPrediction hard_from_record(const PisRecord& rec) {
  HardPrediction out;
  out.h = rec.h;
  out.w = rec.w;
  out.catalog = rec.catalog;
  for (const auto& inst : rec.instances) {
    HardInstance hi;
    hi.class_index = inst.class_index;
    hi.confidence = 1.0;
    hi.mask = inst.mask;
    hi.parts = inst.parts;
    out.instances.push_back(std::move(hi));
  }
  return out;
}

HardPrediction hard_from_record(const IisRecord& rec) {
  HardPrediction out;
  out.h = rec.h;
  out.w = rec.w;
  out.catalog = rec.catalog;
  for (const auto& inst : rec.instances) {
    HardInstance hi;
    hi.class_index = inst.class_index;
    hi.confidence = 1.0;
    hi.mask = inst.mask;
    hi.parts.assign(rec.catalog.num_parts(), BinMask(rec.h, rec.w));
    out.instances.push_back(std::move(hi));
  }
  return out;
}

PssMap pss_from_hard(const HardPrediction& pred) {
  PssMap out(pred.h, pred.w);
  out.catalog = pred.catalog;
  for (const auto& inst : pred.instances)
    for (size_t k = 0; k < inst.parts.size(); ++k)
      for (size_t p = 0; p < inst.parts[k].v.size(); ++p)
        if (inst.parts[k].v[p]) out.labels[p] = static_cast<uint16_t>(k + 1);
  return out;
}

MetricReport evaluate_dataset(const std::vector<HardPrediction>& preds,
                              const std::vector<PisRecord>& gts) {
  MetricReport r;
  r.catalog = gts.empty() ? ClassCatalog::default_catalog() : gts[0].catalog;
  r.part_pq = surgpis::part_pq(preds, gts);
  r.pq = surgpis::pq(preds, gts);
  std::vector<PssMap> pred_pss, gt_pss;
  for (const auto& p : preds) pred_pss.push_back(pss_from_hard(p));
  for (const auto& g : gts) gt_pss.push_back(pis_to_pss(g));
  r.part_iou = part_iou_semantic(pred_pss, gt_pss);
  r.iss = iss_metrics(preds, gts);
  return r;
}

std::string report_to_json(const MetricReport& r) {
  using nlohmann::json;
  auto pq_json = [&](const PqResult& q) {
    json per = json::array();
    for (size_t c = 0; c < q.per_class.size(); ++c)
      per.push_back(json{{"class", r.catalog.instrument_classes[c]},
                         {"tp", q.stats[c].tp},
                         {"fp", q.stats[c].fp},
                         {"fn", q.stats[c].fn},
                         {"present", static_cast<bool>(q.present[c])},
                         {"value", q.per_class[c]}});
    return json{{"mean", q.mean}, {"per_class", per}};
  };
  json part_per = json::array();
  for (size_t k = 0; k < r.part_iou.per_class.size(); ++k)
    part_per.push_back(json{{"class", r.catalog.part_classes[k]},
                            {"present", static_cast<bool>(r.part_iou.present[k])},
                            {"value", r.part_iou.per_class[k]}});
  json iss_per = json::array();
  for (size_t c = 0; c < r.iss.per_class.size(); ++c)
    iss_per.push_back(json{{"class", r.catalog.instrument_classes[c]},
                           {"present", static_cast<bool>(r.iss.present[c])},
                           {"value", r.iss.per_class[c]}});
  json j{{"part_pq", pq_json(r.part_pq)},
         {"pq", pq_json(r.pq)},
         {"part_iou", {{"mean", r.part_iou.mean}, {"per_class", part_per}}},
         {"iss",
          {{"ch_iou", r.iss.ch_iou},
           {"isi_iou", r.iss.isi_iou},
           {"mc_iou", r.iss.mc_iou},
           {"excluded_classes", r.iss.excluded},
           {"per_class", iss_per}}}};
  return j.dump(2);
}

std::string report_to_csv(const MetricReport& r) {
  std::ostringstream out;
  out << "metric,class,value\n";
  out << "part_pq,mean," << r.part_pq.mean << "\n";
  out << "pq,mean," << r.pq.mean << "\n";
  out << "part_iou,mean," << r.part_iou.mean << "\n";
  out << "ch_iou,all," << r.iss.ch_iou << "\n";
  out << "isi_iou,all," << r.iss.isi_iou << "\n";
  out << "mc_iou,all," << r.iss.mc_iou << "\n";
  for (size_t c = 0; c < r.part_pq.per_class.size(); ++c) {
    const std::string& name = r.catalog.instrument_classes[c];
    out << "part_pq," << name << "," << r.part_pq.per_class[c] << "\n";
    out << "pq," << name << "," << r.pq.per_class[c] << "\n";
    out << "class_iou," << name << "," << r.iss.per_class[c] << "\n";
  }
  for (size_t k = 0; k < r.part_iou.per_class.size(); ++k)
    out << "part_iou," << r.catalog.part_classes[k] << "," << r.part_iou.per_class[k] << "\n";
  return out.str();
}

void report_plot(const MetricReport& r, const std::string& png_path) {
  const std::vector<std::pair<std::string, double>> bars{
      {"PartPQ", r.part_pq.mean}, {"PQ", r.pq.mean},       {"PartIoU", r.part_iou.mean},
      {"ChIoU", r.iss.ch_iou},    {"ISIIoU", r.iss.isi_iou}, {"mcIoU", r.iss.mc_iou}};
  const int w = 640, h = 360, base = h - 40, top = 30;
  cv::Mat canvas(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  int bw = w / static_cast<int>(bars.size());
  for (size_t i = 0; i < bars.size(); ++i) {
    double v = std::clamp(bars[i].second, 0.0, 1.0);
    int x0 = static_cast<int>(i) * bw + 12;
    int x1 = (static_cast<int>(i) + 1) * bw - 12;
    int y0 = base - static_cast<int>(v * (base - top));
    cv::rectangle(canvas, {x0, y0}, {x1, base}, cv::Scalar(180, 120, 40), cv::FILLED);
    cv::putText(canvas, bars[i].first, {x0, base + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                cv::Scalar(0, 0, 0), 1);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.3f", bars[i].second);
    cv::putText(canvas, buf, {x0, y0 - 6}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
  }
  cv::line(canvas, {0, base}, {w, base}, cv::Scalar(0, 0, 0), 1);
  if (!cv::imwrite(png_path, canvas))
    throw std::runtime_error("cannot write plot to " + png_path);
}

}  // namespace surgpis
