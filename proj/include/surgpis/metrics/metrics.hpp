#pragma once

#include <string>
#include <vector>

#include "surgpis/labels/labels.hpp"
#include "surgpis/net/net.hpp"

namespace surgpis {

struct HardInstance {
  int class_index = 0;  // 1..C^instr
  double confidence = 0.0;
  BinMask mask;
  std::vector<BinMask> parts;  // size C^part, clipped to mask, pairwise disjoint
};

struct HardPrediction {
  int h = 0, w = 0;
  ClassCatalog catalog;
  std::vector<HardInstance> instances;
};

// |a n b| / |a u b|; 1 when both empty, 0 when exactly one is
double iou(const BinMask& a, const BinMask& b);

// mean IoU over part classes present on either side; instrument-level IoU
// when no parts are present at all
double part_iou_pair(const HardInstance& pred, const PisInstance& gt);

struct ClassPqStat {
  long tp = 0, fp = 0, fn = 0;
  double sum_score = 0.0;  // IOU_p (part_pq) or instrument IoU (pq) over TPs
};

struct PqResult {
  std::vector<ClassPqStat> stats;    // per instrument class, index class-1
  std::vector<double> per_class;     // 0 for absent classes (excluded from mean)
  std::vector<char> present;         // class appears in preds or gts anywhere
  double mean = 0.0;                 // over present classes
};

PqResult part_pq(const std::vector<HardPrediction>& preds, const std::vector<PisRecord>& gts);
PqResult pq(const std::vector<HardPrediction>& preds, const std::vector<PisRecord>& gts);

struct PartIouResult {
  std::vector<double> per_class;  // accumulated intersection / union, per part class
  std::vector<char> present;      // accumulated union > 0
  double mean = 0.0;
};

PartIouResult part_iou_semantic(const std::vector<PssMap>& preds, const std::vector<PssMap>& gts);

struct IssResult {
  double ch_iou = 0.0;   // frame mean over gt-present classes
  double isi_iou = 0.0;  // frame mean over gt-or-pred-present classes
  double mc_iou = 0.0;   // dataset-accumulated, absent classes excluded
  std::vector<double> per_class;
  std::vector<char> present;
  int excluded = 0;
};

IssResult iss_metrics(const std::vector<HardPrediction>& preds,
                      const std::vector<PisRecord>& gts);

// BPSS (+) BIIS: part k of each instance = instance mask AND (pss argmax == k)
HardPrediction compose_baseline(const PssMap& pss_pred, const HardPrediction& iis_pred);

HardPrediction harden(const PredictionSet& preds, const ClassCatalog& catalog,
                      double conf_threshold = 0.5);

// lossless gt views for self-evaluation and baselines
HardPrediction hard_from_record(const PisRecord& rec);
HardPrediction hard_from_record(const IisRecord& rec);  // parts left empty
PssMap pss_from_hard(const HardPrediction& pred);

struct MetricReport {
  ClassCatalog catalog;
  PqResult part_pq;
  PqResult pq;
  PartIouResult part_iou;
  IssResult iss;
};

MetricReport evaluate_dataset(const std::vector<HardPrediction>& preds,
                              const std::vector<PisRecord>& gts);

std::string report_to_json(const MetricReport& r);
std::string report_to_csv(const MetricReport& r);
void report_plot(const MetricReport& r, const std::string& png_path);

}  // namespace surgpis
