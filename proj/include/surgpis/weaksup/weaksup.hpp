#pragma once

#include <utility>
#include <vector>

#include "surgpis/core/rng.hpp"
#include "surgpis/labels/labels.hpp"
#include "surgpis/match/matching.hpp"
#include "surgpis/net/net.hpp"

namespace surgpis {

struct WeakConfig {
  double ema_alpha = 0.99;
  double thresh_dice = 0.75;
  double weight_pss = 3.0;
  double weight_iis = 2.0;
  bool filter_enabled = true;  // false = keep everything (w/o PLF)
};

// --- student/teacher EMA ---
struct TeacherState {
  ParamStore params;
  double alpha = 0.99;
  long t = 0;
};

// theta_t <- alpha * theta_{t-1} + (1 - alpha) * theta_student
void ema_update(TeacherState& teacher, const ParamStore& student);

// --- augmentation ---
struct GeomTransform {
  bool hflip = false, vflip = false;
};

ImageF apply_geom(const ImageF& image, const GeomTransform& g);
BinMask apply_geom(const BinMask& mask, const GeomTransform& g);
PssMap apply_geom(const PssMap& map, const GeomTransform& g);
IisRecord apply_geom(const IisRecord& rec, const GeomTransform& g);
PisRecord apply_geom(const PisRecord& rec, const GeomTransform& g);

struct StrongAugConfig {
  double jitter = 0.2;      // brightness/contrast factor half-range
  double p_grayscale = 0.2;
  double p_blur = 0.5;
  double p_erase = 0.5;
  double max_erase_frac = 0.3;  // per dimension
};

// random flip; the transform is returned so labels can be aligned
std::pair<ImageF, GeomTransform> weak_augment(const ImageF& image, uint64_t seed);
// photometric jitter / grayscale / blur / patch erasing on an image that
// already carries the teacher's geometric transform
ImageF strong_augment(const ImageF& image, uint64_t seed, const StrongAugConfig& cfg = {});

// --- pseudo labels ---
struct PseudoInstance {
  int query = -1;       // teacher query the instance came from
  int class_index = 0;  // 1..C^instr
  BinMask mask;
  std::vector<BinMask> parts;  // binarized at 0.5, overlap resolved by argmax
  double dice = 0.0;           // filter score
  bool kept = false;
};

struct PseudoLabelSet {
  Granularity kind = Granularity::IIS;
  int h = 0, w = 0;
  ClassCatalog catalog;
  std::vector<PseudoInstance> instances;
  std::vector<char> part_kept;    // PSS kind: per part class k-1, k = 1..C^part
  std::vector<double> part_dice;  // PSS kind
};

PseudoLabelSet filter_pseudo(const PredictionSet& teacher, const IisRecord& gt,
                             const WeakConfig& wc);
PseudoLabelSet filter_pseudo(const PredictionSet& teacher, const PssMap& gt,
                             const WeakConfig& wc);

// --- part semantic aggregation ---
struct AggregatedSemanticMap {
  int h = 0, w = 0;
  Tensor rho;    // [C^part + 1, h*w]
  Tensor s_hat;  // [C^part + 1, h*w], each pixel column sums to 1
  std::vector<int> gamma;  // per query: argmax instrument-or-background class
};

AggregatedSemanticMap aggregate_pss(const PredictionSet& preds);
// differentiable s_hat; the argmax class selection is held fixed at the
// forward values
Var aggregate_pss_graph(Tape& tape, const Model::GraphOut& preds);

// --- weak losses ---
struct WeakLoss {
  Var total = nullptr;        // kind weight applied
  Var consistency = nullptr;  // student vs retained pseudo labels
  Var specific = nullptr;     // granularity-specific term
};

WeakLoss weak_loss(Tape& tape, const Model::GraphOut& student, const PseudoLabelSet& pseudo,
                   const IisRecord& gt, const LossWeights& w, const WeakConfig& wc);
WeakLoss weak_loss(Tape& tape, const Model::GraphOut& student, const PseudoLabelSet& pseudo,
                   const PssMap& gt, const LossWeights& w, const WeakConfig& wc);

// Dice coefficient between binary masks; 1.0 when both are empty.
double dice_coefficient(const BinMask& a, const BinMask& b);

}  // namespace surgpis
