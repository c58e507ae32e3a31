#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>

#include "doctest.h"
#include "json.hpp"
#include "surgpis/core/rng.hpp"
#include "surgpis/metrics/metrics.hpp"
#include "test_helpers.hpp"

using namespace surgpis;
using namespace testhelpers;
using doctest::Approx;

namespace {

BinMask cols_mask(int h, int w, int x0, int x1) { return rect_mask(h, w, 0, x0, h, x1); }

BinMask shift_x(const BinMask& m, int dx) {
  BinMask out(m.h, m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x)) {
        int nx = x + dx;
        if (nx >= 0 && nx < m.w) out.at(y, nx) = 1;
      }
  return out;
}

HardInstance hard_inst(int cls, BinMask mask, std::vector<BinMask> parts = {}) {
  HardInstance inst;
  inst.class_index = cls;
  inst.confidence = 1.0;
  inst.mask = std::move(mask);
  inst.parts = std::move(parts);
  return inst;
}

PisInstance gt_inst(int id, int cls, BinMask mask, std::vector<BinMask> parts) {
  PisInstance inst;
  inst.id = id;
  inst.class_index = cls;
  inst.mask = std::move(mask);
  inst.parts = std::move(parts);
  return inst;
}

}  // namespace

TEST_CASE("iou basics") {
  BinMask a(2, 2), b(2, 2);
  a.at(0, 0) = a.at(0, 1) = 1;
  b.at(0, 1) = b.at(1, 1) = 1;
  CHECK(iou(a, b) == Approx(1.0 / 3.0));
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(BinMask(2, 2), BinMask(2, 2)) == 1.0);
  CHECK(iou(a, BinMask(2, 2)) == 0.0);
  CHECK_THROWS_AS(iou(a, BinMask(3, 2)), std::invalid_argument);
}

TEST_CASE("part_iou_pair averages present parts") {
  const int h = 2, w = 8;
  std::vector<BinMask> gparts{cols_mask(h, w, 0, 4), cols_mask(h, w, 4, 8), BinMask(h, w)};
  PisInstance gt = gt_inst(1, 1, cols_mask(h, w, 0, 8), gparts);
  // part 0 IoU 0.5, part 1 IoU 1.0, part 2 absent both sides
  std::vector<BinMask> pparts{cols_mask(h, w, 0, 2), cols_mask(h, w, 4, 8), BinMask(h, w)};
  HardInstance pred = hard_inst(1, cols_mask(h, w, 0, 8), pparts);
  CHECK(part_iou_pair(pred, gt) == Approx(0.75));
}

TEST_CASE("part_iou_pair falls back to instrument iou without parts") {
  const int h = 2, w = 8;
  PisInstance gt = gt_inst(1, 1, cols_mask(h, w, 0, 4), {});
  HardInstance pred = hard_inst(1, cols_mask(h, w, 0, 2));
  CHECK(part_iou_pair(pred, gt) == Approx(0.5));
}

TEST_CASE("part pq single match golden value") {
  const int h = 1, w = 32;
  PisRecord gt;
  gt.h = h;
  gt.w = w;
  gt.catalog = ClassCatalog::default_catalog();
  // instrument IoU 15/25 = 0.6; only part 0 present, IoU 11/20 = 0.55
  gt.instances.push_back(
      gt_inst(1, 2, cols_mask(h, w, 0, 20),
              {cols_mask(h, w, 0, 20), BinMask(h, w), BinMask(h, w)}));
  HardPrediction pred;
  pred.h = h;
  pred.w = w;
  pred.catalog = gt.catalog;
  pred.instances.push_back(hard_inst(
      2, cols_mask(h, w, 5, 25), {cols_mask(h, w, 0, 11), BinMask(h, w), BinMask(h, w)}));

  PqResult ppq = part_pq({pred}, {gt});
  PqResult qq = pq({pred}, {gt});
  CHECK(ppq.stats[1].tp == 1);
  CHECK(ppq.stats[1].fp == 0);
  CHECK(ppq.stats[1].fn == 0);
  CHECK(ppq.mean == Approx(0.55));
  CHECK(qq.mean == Approx(0.6));
  CHECK(ppq.present == std::vector<char>{0, 1, 0, 0});
}

TEST_CASE("pq penalizes false positives") {
  const int h = 1, w = 32;
  PisRecord gt;
  gt.h = h;
  gt.w = w;
  gt.catalog = ClassCatalog::default_catalog();
  gt.instances.push_back(gt_inst(1, 1, cols_mask(h, w, 0, 10),
                                 {cols_mask(h, w, 0, 10), BinMask(h, w), BinMask(h, w)}));
  HardPrediction pred;
  pred.h = h;
  pred.w = w;
  pred.catalog = gt.catalog;
  pred.instances.push_back(hard_inst(1, cols_mask(h, w, 0, 8)));   // IoU 0.8, TP
  pred.instances.push_back(hard_inst(1, cols_mask(h, w, 20, 25)));  // FP
  PqResult qq = pq({pred}, {gt});
  CHECK(qq.stats[0].tp == 1);
  CHECK(qq.stats[0].fp == 1);
  CHECK(qq.mean == Approx(0.8 / 1.5));
}

TEST_CASE("pq with only missed instances is zero") {
  PisRecord gt = simple_record();
  HardPrediction pred;
  pred.h = gt.h;
  pred.w = gt.w;
  pred.catalog = gt.catalog;
  PqResult qq = pq({pred}, {gt});
  CHECK(qq.mean == 0.0);
  CHECK(qq.stats[0].fn == 1);
  CHECK(qq.stats[2].fn == 1);
}

TEST_CASE("part_iou_semantic accumulates over the dataset") {
  PssMap gt(4, 4), pred(4, 4);
  gt.catalog = pred.catalog = ClassCatalog::default_catalog();
  gt.labels = {1, 1, 1, 0, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  pred.labels = {0, 1, 1, 1, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  PartIouResult r = part_iou_semantic({pred}, {gt});
  CHECK(r.per_class[0] == Approx(0.5));   // inter 2, union 4
  CHECK(r.per_class[1] == Approx(1.0));
  CHECK(r.present == std::vector<char>{1, 1, 0});
  CHECK(r.mean == Approx(0.75));
}

TEST_CASE("iss metrics distinguish gt-present and predicted classes") {
  const int h = 1, w = 16;
  PisRecord gt;
  gt.h = h;
  gt.w = w;
  gt.catalog = ClassCatalog::default_catalog();
  gt.instances.push_back(gt_inst(1, 1, cols_mask(h, w, 0, 10),
                                 {cols_mask(h, w, 0, 10), BinMask(h, w), BinMask(h, w)}));
  HardPrediction pred;
  pred.h = h;
  pred.w = w;
  pred.catalog = gt.catalog;
  pred.instances.push_back(hard_inst(1, cols_mask(h, w, 0, 5)));    // IoU 0.5
  pred.instances.push_back(hard_inst(2, cols_mask(h, w, 12, 14)));  // hallucinated class
  IssResult r = iss_metrics({pred}, {gt});
  CHECK(r.ch_iou == Approx(0.5));
  CHECK(r.isi_iou == Approx(0.25));
  CHECK(r.mc_iou == Approx(0.25));
  CHECK(r.excluded == 2);
}

TEST_CASE("compose_baseline splits instances along the semantic map") {
  const int h = 8, w = 8;
  PssMap pss(h, w);
  pss.catalog = ClassCatalog::default_catalog();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) pss.at(y, x) = x < 4 ? 1 : 2;
  HardPrediction iis;
  iis.h = h;
  iis.w = w;
  iis.catalog = pss.catalog;
  iis.instances.push_back(hard_inst(1, rect_mask(h, w, 2, 2, 6, 6)));
  HardPrediction out = compose_baseline(pss, iis);
  REQUIRE(out.instances.size() == 1);
  CHECK(out.instances[0].parts[0] == rect_mask(h, w, 2, 2, 6, 4));
  CHECK(out.instances[0].parts[1] == rect_mask(h, w, 2, 4, 6, 6));
  CHECK(out.instances[0].parts[2].empty_mask());
  CHECK_THROWS_AS(compose_baseline(PssMap(4, 4), iis), std::invalid_argument);
}

TEST_CASE("self evaluation scores exactly one") {
  std::vector<PisRecord> gts{simple_record(), simple_record(16, 16)};
  std::vector<HardPrediction> preds;
  for (const auto& g : gts) preds.push_back(hard_from_record(g));
  MetricReport r = evaluate_dataset(preds, gts);
  CHECK(r.part_pq.mean == 1.0);
  CHECK(r.pq.mean == 1.0);
  CHECK(r.part_iou.mean == 1.0);
  CHECK(r.iss.ch_iou == 1.0);
  CHECK(r.iss.isi_iou == 1.0);
  CHECK(r.iss.mc_iou == 1.0);
}

TEST_CASE("part pq degrades monotonically under mask shifts") {
  const int h = 16, w = 16;
  PisRecord gt;
  gt.h = h;
  gt.w = w;
  gt.catalog = ClassCatalog::default_catalog();
  gt.instances.push_back(striped_instance(1, 2, h, w, 2, 2, 14, 14, 3));
  double prev = 2.0;
  for (int dx = 0; dx <= 3; ++dx) {
    HardPrediction pred = hard_from_record(gt);
    pred.instances[0].mask = shift_x(pred.instances[0].mask, dx);
    for (auto& p : pred.instances[0].parts) p = shift_x(p, dx);
    double v = part_pq({pred}, {gt}).mean;
    CHECK(v <= prev + 1e-12);
    if (dx == 0) CHECK(v == 1.0);
    if (dx == 3) CHECK(v < 1.0);
    prev = v;
  }
}

TEST_CASE("part pq equals pq when the only part is the full mask") {
  Rng rng(404);
  for (int trial = 0; trial < 30; ++trial) {
    const int h = 16, w = 16;
    std::vector<PisRecord> gts;
    std::vector<HardPrediction> preds;
    for (int img = 0; img < 3; ++img) {
      PisRecord gt;
      gt.h = h;
      gt.w = w;
      gt.catalog = ClassCatalog::default_catalog();
      // one instance per quadrant keeps everything disjoint
      for (int q = 0; q < rng.randint(1, 4); ++q) {
        int oy = (q / 2) * 8, ox = (q % 2) * 8;
        BinMask m = rect_mask(h, w, oy + rng.randint(0, 2),
                              ox + rng.randint(0, 2), oy + 6, ox + 6);
        gt.instances.push_back(gt_inst(q + 1, rng.randint(1, 4), m,
                                       {m, BinMask(h, w), BinMask(h, w)}));
      }
      HardPrediction pred;
      pred.h = h;
      pred.w = w;
      pred.catalog = gt.catalog;
      for (const auto& inst : gt.instances) {
        if (rng.bernoulli(0.15)) continue;  // missed detection
        BinMask m = shift_x(inst.mask, rng.randint(0, 3) - 1);
        pred.instances.push_back(hard_inst(inst.class_index, m, {m, BinMask(h, w), BinMask(h, w)}));
      }
      if (rng.bernoulli(0.3))
        pred.instances.push_back(hard_inst(rng.randint(1, 4),
                                           rect_mask(h, w, 7, 7, 9, 9),
                                           {rect_mask(h, w, 7, 7, 9, 9), BinMask(h, w),
                                            BinMask(h, w)}));
      gts.push_back(std::move(gt));
      preds.push_back(std::move(pred));
    }
    PqResult a = part_pq(preds, gts);
    PqResult b = pq(preds, gts);
    CHECK(a.mean == Approx(b.mean).epsilon(1e-12));
    for (size_t c = 0; c < a.per_class.size(); ++c)
      CHECK(a.per_class[c] == Approx(b.per_class[c]).epsilon(1e-12));
  }
}

TEST_CASE("metrics are invariant to prediction instance order") {
  PisRecord gt = simple_record(16, 16);
  HardPrediction pred = hard_from_record(gt);
  pred.instances[0].mask = shift_x(pred.instances[0].mask, 1);
  HardPrediction rev = pred;
  std::reverse(rev.instances.begin(), rev.instances.end());
  CHECK(part_pq({pred}, {gt}).mean == part_pq({rev}, {gt}).mean);
  CHECK(pq({pred}, {gt}).mean == pq({rev}, {gt}).mean);
  CHECK(iss_metrics({pred}, {gt}).mc_iou == iss_metrics({rev}, {gt}).mc_iou);
}

TEST_CASE("harden reproduces idealized predictions") {
  PisRecord rec = simple_record();
  PredictionSet soft = idealized_predictions(rec, 8);
  HardPrediction hard = harden(soft, rec.catalog);
  HardPrediction want = hard_from_record(rec);
  REQUIRE(hard.instances.size() == want.instances.size());
  for (size_t i = 0; i < hard.instances.size(); ++i) {
    CHECK(hard.instances[i].class_index == want.instances[i].class_index);
    CHECK(hard.instances[i].mask == want.instances[i].mask);
    CHECK(hard.instances[i].parts == want.instances[i].parts);
  }
}

TEST_CASE("harden resolves overlaps by confidence and enforces invariants") {
  const ClassCatalog catalog = ClassCatalog::default_catalog();
  const int h = 8, w = 8, nq = 3;
  const long npix = h * w;
  PredictionSet soft;
  soft.nq = nq;
  soft.h = h;
  soft.w = w;
  soft.class_probs = Tensor({nq, catalog.num_inp() + 1});
  soft.inst_masks = Tensor({nq, static_cast<int>(npix)});
  for (int k = 0; k < catalog.num_parts(); ++k)
    soft.part_masks.push_back(Tensor({nq, static_cast<int>(npix)}));

  soft.class_probs.at(0, 1) = 0.7;
  soft.class_probs.at(0, 2) = 0.3;
  soft.class_probs.at(1, 2) = 0.9;
  soft.class_probs.at(1, 1) = 0.1;
  soft.class_probs.at(2, 3) = 0.4;  // below the confidence threshold
  soft.class_probs.at(2, 0) = 0.6;
  BinMask m0 = rect_mask(h, w, 0, 0, 4, 6);
  BinMask m1 = rect_mask(h, w, 0, 4, 4, 8);  // overlaps m0 on columns 4..5
  for (long p = 0; p < npix; ++p) {
    soft.inst_masks.data[0 * npix + p] = m0.v[p] ? 0.8 : 0.1;
    soft.inst_masks.data[1 * npix + p] = m1.v[p] ? 0.8 : 0.1;
    soft.inst_masks.data[2 * npix + p] = 0.9;
    soft.part_masks[0].data[0 * npix + p] = 0.6;
    soft.part_masks[1].data[0 * npix + p] = 0.7;  // wins the per-pixel part argmax
    soft.part_masks[0].data[1 * npix + p] = 0.9;
  }

  HardPrediction hard = harden(soft, catalog);
  REQUIRE(hard.instances.size() == 2);
  // query 1 is more confident, so it keeps the contested columns
  CHECK(hard.instances[0].class_index == 1);
  CHECK(hard.instances[0].mask == rect_mask(h, w, 0, 0, 4, 4));
  CHECK(hard.instances[1].class_index == 2);
  CHECK(hard.instances[1].mask == m1);
  CHECK(intersection_area(hard.instances[0].mask, hard.instances[1].mask) == 0);
  for (const auto& inst : hard.instances) {
    BinMask part_union(h, w);
    for (size_t a = 0; a < inst.parts.size(); ++a) {
      for (size_t b = a + 1; b < inst.parts.size(); ++b)
        CHECK(intersection_area(inst.parts[a], inst.parts[b]) == 0);
      CHECK(intersection_area(inst.parts[a], mask_not(inst.mask)) == 0);
      part_union = mask_or(part_union, inst.parts[a]);
    }
    CHECK(part_union == inst.mask);
    CHECK(!inst.mask.empty_mask());
  }
  CHECK(hard.instances[0].parts[1] == hard.instances[0].mask);
  CHECK(hard.instances[0].parts[0].empty_mask());
  CHECK(hard.instances[1].parts[0] == hard.instances[1].mask);
}

TEST_CASE("reports serialize and plot") {
  std::vector<PisRecord> gts{simple_record()};
  std::vector<HardPrediction> preds{hard_from_record(gts[0])};
  MetricReport r = evaluate_dataset(preds, gts);

  auto j = nlohmann::json::parse(report_to_json(r));
  CHECK(j["part_pq"]["mean"].get<double>() == 1.0);
  CHECK(j["iss"]["mc_iou"].get<double>() == 1.0);
  CHECK(j["pq"]["per_class"].size() == 4);

  std::string csv = report_to_csv(r);
  CHECK(csv.rfind("metric,class,value\n", 0) == 0);
  CHECK(csv.find("part_pq,mean,1\n") != std::string::npos);

  TempDir dir("metrics_plot");
  std::string png = dir.path() + "/report.png";
  report_plot(r, png);
  CHECK(std::filesystem::file_size(png) > 0);
}

TEST_CASE("dataset size mismatches throw") {
  std::vector<PisRecord> gts{simple_record()};
  CHECK_THROWS_AS(pq({}, gts), std::invalid_argument);
  CHECK_THROWS_AS(part_pq({}, gts), std::invalid_argument);
  CHECK_THROWS_AS(iss_metrics({}, gts), std::invalid_argument);
  CHECK_THROWS_AS(part_iou_semantic({}, {PssMap(2, 2)}), std::invalid_argument);
}
