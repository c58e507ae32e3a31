#pragma once

#include <string>
#include <vector>

#include "surgpis/match/matching.hpp"
#include "surgpis/metrics/metrics.hpp"
#include "surgpis/net/checkpoint.hpp"
#include "surgpis/net/net.hpp"
#include "surgpis/synthgen/synthgen.hpp"
#include "surgpis/weaksup/weaksup.hpp"

namespace surgpis {

// Resolved training/evaluation configuration. Every field maps to a flat
// `section.key = value` line in the config file; CLI overrides use the same
// keys.
struct RunConfig {
  NetConfig net;
  LossWeights loss;
  WeakConfig weak;
  StrongAugConfig strong;

  int stage1_iters = 2000;  // schedule length of stage 1
  int stage2_iters = 1000;  // schedule length of stage 2
  int batch_size = 8;
  double lr0 = 1e-4;
  double lr_power = 0.9;
  double weight_decay = 0.05;
  double scale_min = 0.1, scale_max = 2.0;  // large scale jittering range
  int crop = 64;
  bool lsj = true;
  bool strong_aug = true;  // false = both streams weakly augmented (same aug)
  int max_iters = 0;       // stop the run at this global step; 0 = stage end
  int log_every = 1;
  uint64_t seed = 0;
  std::string train_manifest, eval_manifest;

  void check() const;  // throws on invalid combinations
};

RunConfig parse_run_config(const std::string& path);
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& kv);  // "key=value"
std::string serialize_run_config(const RunConfig& cfg);

// lr0 * (1 - t/total)^power, clamped at 0 past the schedule end
double poly_lr(double lr0, long t, long total, double power);

// Scale jitter + fixed-size crop/pad; instances cropped away are dropped.
// Pure function of the seed.
struct AugmentedScene {
  ImageF image;
  PisRecord record;
};
AugmentedScene lsj_augment(const ImageF& image, const PisRecord& record, int crop,
                           double scale_min, double scale_max, uint64_t seed);

struct IterLog {
  long iter = 0;
  int stage = 1;
  std::string granularity;  // batch granularity
  double lr = 0.0;
  double total = 0.0;
  double l_ic = 0.0, l_im = 0.0, l_pm = 0.0;       // supervised components
  double l_wks = 0.0, consistency = 0.0, specific = 0.0;  // weak components
  long retained = 0, dropped = 0;  // pseudo instances / part classes

  std::string to_json() const;  // one deterministic JSONL line
};

struct TrainResult {
  Checkpoint ckpt;
  std::vector<IterLog> log;
};

// Stage 1: fully supervised on PIS records; throws if the manifest contains
// non-PIS records. Passing `init` continues from a checkpoint (the global
// optimizer step drives data order and the schedule, so stopping early via
// max_iters and resuming reproduces the single-run trajectory).
TrainResult train_stage1(const RunConfig& cfg, const DatasetManifest& train,
                         const Checkpoint* init = nullptr, const std::string& out_dir = "",
                         const std::string& log_path = "");

// Stage 2: student/teacher weak supervision on a mixed-granularity manifest.
// Batches rotate round-robin over the granularities present; PIS batches use
// the supervised path and never consult the teacher.
TrainResult train_stage2(const RunConfig& cfg, const DatasetManifest& train,
                         const Checkpoint& init, const std::string& out_dir = "",
                         const std::string& log_path = "");

void save_run_checkpoint(const Checkpoint& ckpt, const RunConfig& cfg, const std::string& dir);

struct EvalResult {
  bool has_pis = false, has_iis = false, has_pss = false;
  MetricReport pis;        // full metric suite on PIS ground truth
  PqResult iis_pq;         // instrument-level PQ on IIS ground truth
  PartIouResult pss_iou;   // PartIoU against PSS ground truth
  std::vector<std::string> notes;  // metrics omitted and why
};

EvalResult evaluate(const Model& model, const ParamStore& params, const DatasetManifest& manifest,
                    double conf_threshold = 0.5);
std::string eval_to_json(const EvalResult& r);
std::string eval_to_csv(const EvalResult& r);
void eval_plot_from_json(const std::string& json_text, const std::string& png_path);

// Hardened prediction as a storable record (parts tile each instance mask).
PisRecord record_from_hard(const HardPrediction& hard, const std::string& image_id);

// Writes one record directory per input image under out_dir; returns the
// directories in input order.
std::vector<std::string> infer(const Model& model, const ParamStore& params,
                               const std::vector<std::string>& image_paths,
                               const std::string& out_dir, double conf_threshold = 0.5);

}  // namespace surgpis
