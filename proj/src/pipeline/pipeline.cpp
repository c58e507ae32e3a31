#include "surgpis/pipeline/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"
#include "surgpis/labels/io.hpp"

namespace surgpis {

namespace {

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: boolean expected, got '" + v + "'");
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

void apply_key(RunConfig& c, const std::string& key, const std::string& value) {
  auto i = [&] { return std::stoi(value); };
  auto d = [&] { return std::stod(value); };
  auto b = [&] { return parse_bool(value); };
  if (key == "net.embed_dim") c.net.embed_dim = i();
  else if (key == "net.num_queries") c.net.num_queries = i();
  else if (key == "net.decoder_layers") c.net.decoder_layers = i();
  else if (key == "net.attn_heads") c.net.attn_heads = i();
  else if (key == "net.stem_channels") c.net.stem_channels = i();
  else if (key == "net.part_query_mode") c.net.part_query_mode = value;
  else if (key == "loss.alpha_class") c.loss.alpha_class = d();
  else if (key == "loss.alpha_mask") c.loss.alpha_mask = d();
  else if (key == "loss.lambda_focal") c.loss.lambda_focal = d();
  else if (key == "loss.lambda_dice") c.loss.lambda_dice = d();
  else if (key == "loss.no_object_weight") c.loss.no_object_weight = d();
  else if (key == "loss.focal_gamma") c.loss.focal_gamma = d();
  else if (key == "loss.focal_alpha") c.loss.focal_alpha = d();
  else if (key == "loss.eps_smooth") c.loss.eps_smooth = d();
  else if (key == "loss.use_part_cost") c.loss.use_part_cost = b();
  else if (key == "weak.ema_alpha") c.weak.ema_alpha = d();
  else if (key == "weak.thresh_dice") c.weak.thresh_dice = d();
  else if (key == "weak.weight_pss") c.weak.weight_pss = d();
  else if (key == "weak.weight_iis") c.weak.weight_iis = d();
  else if (key == "weak.filter_enabled") c.weak.filter_enabled = b();
  else if (key == "strong.jitter") c.strong.jitter = d();
  else if (key == "strong.p_grayscale") c.strong.p_grayscale = d();
  else if (key == "strong.p_blur") c.strong.p_blur = d();
  else if (key == "strong.p_erase") c.strong.p_erase = d();
  else if (key == "strong.max_erase_frac") c.strong.max_erase_frac = d();
  else if (key == "train.stage1_iters") c.stage1_iters = i();
  else if (key == "train.stage2_iters") c.stage2_iters = i();
  else if (key == "train.batch_size") c.batch_size = i();
  else if (key == "train.lr0") c.lr0 = d();
  else if (key == "train.lr_power") c.lr_power = d();
  else if (key == "train.weight_decay") c.weight_decay = d();
  else if (key == "train.scale_min") c.scale_min = d();
  else if (key == "train.scale_max") c.scale_max = d();
  else if (key == "train.crop") c.crop = i();
  else if (key == "train.lsj") c.lsj = b();
  else if (key == "train.strong_aug") c.strong_aug = b();
  else if (key == "train.max_iters") c.max_iters = i();
  else if (key == "train.log_every") c.log_every = i();
  else if (key == "seed") c.seed = std::stoull(value);
  else if (key == "data.train_manifest") c.train_manifest = value;
  else if (key == "data.eval_manifest") c.eval_manifest = value;
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

std::string fmt_double(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

// --- parameter layout / gradient accumulation ---
struct ParamLayout {
  std::unordered_map<std::string, std::pair<long, long>> segs;  // name -> offset,size
  long total = 0;
};

ParamLayout layout_of(const ParamStore& ps) {
  ParamLayout lay;
  for (const auto& [name, t] : ps.entries()) {
    lay.segs.emplace(name, std::make_pair(lay.total, t.data.size()));
    lay.total += t.data.size();
  }
  return lay;
}

void add_leaf_grads(const std::vector<std::pair<std::string, Var>>& leaves,
                    const ParamLayout& lay, Eigen::ArrayXd& grad) {
  for (const auto& [name, var] : leaves) {
    if (var->grad.data.size() == 0) continue;
    auto it = lay.segs.find(name);
    if (it == lay.segs.end()) throw std::logic_error("unknown parameter leaf " + name);
    grad.segment(it->second.first, it->second.second) += var->grad.data;
  }
}

PredictionSet values_of(const Model::GraphOut& g, int nq) {
  PredictionSet ps;
  ps.nq = nq;
  ps.h = g.h;
  ps.w = g.w;
  ps.class_probs = g.class_probs->value;
  ps.inst_masks = g.inst_masks->value;
  for (Var m : g.part_masks) ps.part_masks.push_back(m->value);
  return ps;
}

// --- deterministic data streams ---
std::vector<int> epoch_order(int n, uint64_t seed, long epoch) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, static_cast<uint64_t>(epoch));
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.randint(0, i)]);
  return order;
}

// record index for stream position p, reshuffling each epoch
int stream_index(int n, uint64_t seed, long pos) {
  if (n == 1) return 0;
  return epoch_order(n, seed, pos / n)[pos % n];
}

// --- resampling ---
ImageF resize_bilinear(const ImageF& img, int sh, int sw) {
  ImageF out(sh, sw);
  for (int y = 0; y < sh; ++y) {
    double fy = (y + 0.5) * img.h / sh - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int ya = std::clamp(y0, 0, img.h - 1), yb = std::clamp(y0 + 1, 0, img.h - 1);
    for (int x = 0; x < sw; ++x) {
      double fx = (x + 0.5) * img.w / sw - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int xa = std::clamp(x0, 0, img.w - 1), xb = std::clamp(x0 + 1, 0, img.w - 1);
      for (int ch = 0; ch < 3; ++ch)
        out.at(ch, y, x) = (1 - wy) * ((1 - wx) * img.at(ch, ya, xa) + wx * img.at(ch, ya, xb)) +
                           wy * ((1 - wx) * img.at(ch, yb, xa) + wx * img.at(ch, yb, xb));
    }
  }
  return out;
}

BinMask resize_nearest(const BinMask& m, int sh, int sw) {
  BinMask out(sh, sw);
  for (int y = 0; y < sh; ++y) {
    int sy = std::min(m.h - 1, static_cast<int>((y + 0.5) * m.h / sh));
    for (int x = 0; x < sw; ++x) {
      int sx = std::min(m.w - 1, static_cast<int>((x + 0.5) * m.w / sw));
      out.at(y, x) = m.at(sy, sx);
    }
  }
  return out;
}

template <typename T, typename Fetch>
void paste(T& dst, int crop, int sh, int sw, int oy, int ox, int py, int px, Fetch fetch) {
  for (int y = 0; y < crop; ++y) {
    int sy = y - py + oy;
    if (sy < 0 || sy >= sh) continue;
    for (int x = 0; x < crop; ++x) {
      int sx = x - px + ox;
      if (sx < 0 || sx >= sw) continue;
      fetch(dst, y, x, sy, sx);
    }
  }
}

// --- optimizer ---
void adamw_step(Eigen::ArrayXd& theta, OptimState& o, const Eigen::ArrayXd& grad, double lr,
                double wd) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  o.step += 1;
  o.m = b1 * o.m + (1 - b1) * grad;
  o.v = b2 * o.v + (1 - b2) * grad.square();
  double c1 = 1 - std::pow(b1, static_cast<double>(o.step));
  double c2 = 1 - std::pow(b2, static_cast<double>(o.step));
  theta -= lr * ((o.m / c1) / ((o.v / c2).sqrt() + eps)) + lr * wd * theta;
}

// --- cached training data ---
struct TrainData {
  std::vector<std::pair<ImageF, PisRecord>> pis;
  std::vector<std::pair<ImageF, IisRecord>> iis;
  std::vector<std::pair<ImageF, PssMap>> pss;
};

TrainData load_train_data(const DatasetManifest& m) {
  TrainData d;
  for (const auto& e : m.records) {
    std::string dir = m.record_dir(e);
    ImageF img = load_image_png(dir + "/image.png");
    switch (e.granularity) {
      case Granularity::PIS: d.pis.emplace_back(std::move(img), load_pis(dir)); break;
      case Granularity::IIS: d.iis.emplace_back(std::move(img), load_iis(dir)); break;
      case Granularity::PSS: d.pss.emplace_back(std::move(img), load_pss(dir)); break;
    }
  }
  return d;
}

constexpr uint64_t kLsjStream = 0x15A10000ULL;
constexpr uint64_t kWeakStream = 0xAE100000ULL;
constexpr uint64_t kStrongStream = 0xAE200000ULL;

struct BatchOut {
  double total = 0, ic = 0, im = 0, pm = 0;
  double wks = 0, consistency = 0, specific = 0;
  long retained = 0, dropped = 0;
};

}  // namespace

void RunConfig::check() const {
  net.check();
  if (stage1_iters <= 0 || stage2_iters <= 0)
    throw std::invalid_argument("config: iteration counts must be positive");
  if (batch_size <= 0) throw std::invalid_argument("config: batch size must be positive");
  if (lr0 <= 0) throw std::invalid_argument("config: lr0 must be positive");
  if (scale_min <= 0 || scale_max < scale_min)
    throw std::invalid_argument("config: invalid scale range");
  if (crop < 16 || crop % 8 != 0)
    throw std::invalid_argument("config: crop must be >= 16 and divisible by 8");
  if (log_every <= 0) throw std::invalid_argument("config: log_every must be positive");
}

RunConfig parse_run_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " has no '='");
    apply_key(cfg, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return cfg;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& kv) {
  for (const std::string& s : kv) {
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override '" + s + "' is not key=value");
    apply_key(cfg, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
}

std::string serialize_run_config(const RunConfig& c) {
  std::ostringstream o;
  o << "net.embed_dim = " << c.net.embed_dim << "\n";
  o << "net.num_queries = " << c.net.num_queries << "\n";
  o << "net.decoder_layers = " << c.net.decoder_layers << "\n";
  o << "net.attn_heads = " << c.net.attn_heads << "\n";
  o << "net.stem_channels = " << c.net.stem_channels << "\n";
  o << "net.part_query_mode = " << c.net.part_query_mode << "\n";
  o << "loss.alpha_class = " << fmt_double(c.loss.alpha_class) << "\n";
  o << "loss.alpha_mask = " << fmt_double(c.loss.alpha_mask) << "\n";
  o << "loss.lambda_focal = " << fmt_double(c.loss.lambda_focal) << "\n";
  o << "loss.lambda_dice = " << fmt_double(c.loss.lambda_dice) << "\n";
  o << "loss.no_object_weight = " << fmt_double(c.loss.no_object_weight) << "\n";
  o << "loss.focal_gamma = " << fmt_double(c.loss.focal_gamma) << "\n";
  o << "loss.focal_alpha = " << fmt_double(c.loss.focal_alpha) << "\n";
  o << "loss.eps_smooth = " << fmt_double(c.loss.eps_smooth) << "\n";
  o << "loss.use_part_cost = " << (c.loss.use_part_cost ? "true" : "false") << "\n";
  o << "weak.ema_alpha = " << fmt_double(c.weak.ema_alpha) << "\n";
  o << "weak.thresh_dice = " << fmt_double(c.weak.thresh_dice) << "\n";
  o << "weak.weight_pss = " << fmt_double(c.weak.weight_pss) << "\n";
  o << "weak.weight_iis = " << fmt_double(c.weak.weight_iis) << "\n";
  o << "weak.filter_enabled = " << (c.weak.filter_enabled ? "true" : "false") << "\n";
  o << "strong.jitter = " << fmt_double(c.strong.jitter) << "\n";
  o << "strong.p_grayscale = " << fmt_double(c.strong.p_grayscale) << "\n";
  o << "strong.p_blur = " << fmt_double(c.strong.p_blur) << "\n";
  o << "strong.p_erase = " << fmt_double(c.strong.p_erase) << "\n";
  o << "strong.max_erase_frac = " << fmt_double(c.strong.max_erase_frac) << "\n";
  o << "train.stage1_iters = " << c.stage1_iters << "\n";
  o << "train.stage2_iters = " << c.stage2_iters << "\n";
  o << "train.batch_size = " << c.batch_size << "\n";
  o << "train.lr0 = " << fmt_double(c.lr0) << "\n";
  o << "train.lr_power = " << fmt_double(c.lr_power) << "\n";
  o << "train.weight_decay = " << fmt_double(c.weight_decay) << "\n";
  o << "train.scale_min = " << fmt_double(c.scale_min) << "\n";
  o << "train.scale_max = " << fmt_double(c.scale_max) << "\n";
  o << "train.crop = " << c.crop << "\n";
  o << "train.lsj = " << (c.lsj ? "true" : "false") << "\n";
  o << "train.strong_aug = " << (c.strong_aug ? "true" : "false") << "\n";
  o << "train.max_iters = " << c.max_iters << "\n";
  o << "train.log_every = " << c.log_every << "\n";
  o << "seed = " << c.seed << "\n";
  o << "data.train_manifest = " << c.train_manifest << "\n";
  o << "data.eval_manifest = " << c.eval_manifest << "\n";
  return o.str();
}

double poly_lr(double lr0, long t, long total, double power) {
  if (t >= total) return 0.0;
  return lr0 * std::pow(1.0 - static_cast<double>(t) / total, power);
}

AugmentedScene lsj_augment(const ImageF& image, const PisRecord& record, int crop,
                           double scale_min, double scale_max, uint64_t seed) {
  Rng rng = Rng::derive(seed, kLsjStream);
  double s = rng.uniform(scale_min, scale_max);
  int sh = std::max(1, static_cast<int>(std::lround(record.h * s)));
  int sw = std::max(1, static_cast<int>(std::lround(record.w * s)));
  int oy = sh > crop ? rng.randint(0, sh - crop) : 0;
  int ox = sw > crop ? rng.randint(0, sw - crop) : 0;
  int py = sh < crop ? rng.randint(0, crop - sh) : 0;
  int px = sw < crop ? rng.randint(0, crop - sw) : 0;

  AugmentedScene out;
  out.image = ImageF(crop, crop);
  ImageF scaled = resize_bilinear(image, sh, sw);
  paste(out.image, crop, sh, sw, oy, ox, py, px, [&](ImageF& d, int y, int x, int sy, int sx) {
    for (int ch = 0; ch < 3; ++ch) d.at(ch, y, x) = scaled.at(ch, sy, sx);
  });

  out.record.image_id = record.image_id;
  out.record.h = out.record.w = crop;
  out.record.catalog = record.catalog;
  auto crop_mask = [&](const BinMask& m) {
    BinMask scaled_m = resize_nearest(m, sh, sw);
    BinMask d(crop, crop);
    paste(d, crop, sh, sw, oy, ox, py, px,
          [&](BinMask& dd, int y, int x, int sy, int sx) { dd.at(y, x) = scaled_m.at(sy, sx); });
    return d;
  };
  for (const auto& inst : record.instances) {
    PisInstance ni;
    ni.id = inst.id;
    ni.class_index = inst.class_index;
    ni.mask = crop_mask(inst.mask);
    if (ni.mask.empty_mask()) continue;
    for (const auto& p : inst.parts) ni.parts.push_back(crop_mask(p));
    out.record.instances.push_back(std::move(ni));
  }
  out.record.refresh_background();
  return out;
}

std::string IterLog::to_json() const {
  nlohmann::json j{{"iter", iter},
                   {"stage", stage},
                   {"granularity", granularity},
                   {"lr", lr},
                   {"total", total},
                   {"l_ic", l_ic},
                   {"l_im", l_im},
                   {"l_pm", l_pm},
                   {"l_wks", l_wks},
                   {"consistency", consistency},
                   {"specific", specific},
                   {"retained", retained},
                   {"dropped", dropped}};
  return j.dump();
}

void save_run_checkpoint(const Checkpoint& ckpt, const RunConfig& cfg, const std::string& dir) {
  save_checkpoint(ckpt, dir);
  std::ofstream out(dir + "/run_config.txt");
  out << serialize_run_config(cfg);
}

namespace {

BatchOut sup_batch(const Model& model, const ParamStore& params, const RunConfig& cfg,
                   const TrainData& data, long t, const ParamLayout& lay, Eigen::ArrayXd& grad) {
  BatchOut out;
  const int B = cfg.batch_size;
  const int n = static_cast<int>(data.pis.size());
  for (int b = 0; b < B; ++b) {
    long pos = t * B + b;
    const auto& [img, rec] = data.pis[stream_index(n, cfg.seed ^ 0x9157ULL, pos)];
    uint64_t aug_seed = Rng::derive(cfg.seed, kLsjStream + pos).randint(0, 1 << 30);
    ImageF xi = img;
    PisRecord gt = rec;
    if (cfg.lsj) {
      AugmentedScene a = lsj_augment(img, rec, cfg.crop, cfg.scale_min, cfg.scale_max, aug_seed);
      xi = std::move(a.image);
      gt = std::move(a.record);
    }
    Tape tape;
    auto g = model.forward_graph(tape, xi, params, true);
    Assignment tau = match(values_of(g, cfg.net.num_queries), gt, cfg.loss);
    SupLoss sl = supervised_loss(tape, g, gt, tau, cfg.loss);
    tape.backward(sl.total);
    add_leaf_grads(g.param_leaves, lay, grad);
    out.total += sl.total->value.data[0];
    out.ic += sl.l_ic->value.data[0];
    out.im += sl.l_im->value.data[0];
    out.pm += sl.l_pm->value.data[0];
  }
  out.total /= B;
  out.ic /= B;
  out.im /= B;
  out.pm /= B;
  return out;
}

template <typename GtT>
void weak_record(const Model& model, const ParamStore& params, const TeacherState& teacher,
                 const RunConfig& cfg, const ImageF& img, const GtT& gt, long pos,
                 const ParamLayout& lay, Eigen::ArrayXd& grad, BatchOut& out) {
  uint64_t wseed = Rng::derive(cfg.seed, kWeakStream + pos).randint(0, 1 << 30);
  uint64_t sseed = Rng::derive(cfg.seed, kStrongStream + pos).randint(0, 1 << 30);
  auto [weak_img, geom] = weak_augment(img, wseed);
  GtT gt_aligned = apply_geom(gt, geom);
  PredictionSet teacher_preds = model.forward(weak_img, teacher.params);
  PseudoLabelSet pseudo = filter_pseudo(teacher_preds, gt_aligned, cfg.weak);

  ImageF student_img = cfg.strong_aug ? strong_augment(weak_img, sseed, cfg.strong) : weak_img;
  Tape tape;
  auto g = model.forward_graph(tape, student_img, params, true);
  WeakLoss wl = weak_loss(tape, g, pseudo, gt_aligned, cfg.loss, cfg.weak);
  if (wl.total->requires_grad) {
    tape.backward(wl.total);
    add_leaf_grads(g.param_leaves, lay, grad);
  }
  out.total += wl.total->value.data[0];
  out.wks += wl.total->value.data[0];
  out.consistency += wl.consistency->value.data[0];
  out.specific += wl.specific->value.data[0];
  if (pseudo.kind == Granularity::PSS) {
    for (char k : pseudo.part_kept) (k ? out.retained : out.dropped) += 1;
  } else {
    for (const auto& pi : pseudo.instances) (pi.kept ? out.retained : out.dropped) += 1;
  }
}

TrainResult run_training(const RunConfig& cfg, const DatasetManifest& train,
                         const Checkpoint* init, int stage, const std::string& out_dir,
                         const std::string& log_path) {
  cfg.check();
  Model model(cfg.net);
  TrainData data = load_train_data(train);

  if (stage == 1) {
    if (!data.iis.empty() || !data.pss.empty())
      throw std::invalid_argument("stage 1 manifest contains non-PIS records");
    if (data.pis.empty()) throw std::invalid_argument("stage 1 manifest is empty");
  } else {
    if (data.pis.empty() && data.iis.empty() && data.pss.empty())
      throw std::invalid_argument("stage 2 manifest is empty");
    if (data.iis.empty() && data.pss.empty())
      std::cerr << "warning: stage 2 manifest has no weak records; "
                   "training degenerates to stage 1\n";
  }

  Checkpoint ckpt;
  ckpt.config = cfg.net;
  if (init) {
    if (!init->params.shape_compatible(model.init_params(cfg.seed)))
      throw std::invalid_argument("init checkpoint incompatible with net config");
    ckpt.params = init->params;
    ckpt.optim = init->optim;
  } else {
    ckpt.params = model.init_params(cfg.seed);
  }
  ParamLayout lay = layout_of(ckpt.params);
  if (!ckpt.optim) {
    OptimState o;
    o.m = Eigen::ArrayXd::Zero(lay.total);
    o.v = Eigen::ArrayXd::Zero(lay.total);
    ckpt.optim = o;
  }

  TeacherState teacher;
  if (stage == 2) {
    teacher.params = ckpt.params;
    teacher.alpha = cfg.weak.ema_alpha;
  }

  // granularities present, rotated round-robin at batch level
  std::vector<Granularity> cycle;
  if (!data.pis.empty()) cycle.push_back(Granularity::PIS);
  if (stage == 2) {
    if (!data.iis.empty()) cycle.push_back(Granularity::IIS);
    if (!data.pss.empty()) cycle.push_back(Granularity::PSS);
  }

  long start = ckpt.optim->step;
  long end;
  if (stage == 1) {
    end = cfg.max_iters > 0 ? cfg.max_iters : cfg.stage1_iters;
  } else {
    end = start + cfg.stage2_iters;
    if (cfg.max_iters > 0) end = std::min<long>(end, cfg.max_iters);
  }
  const long total_schedule = static_cast<long>(cfg.stage1_iters) + cfg.stage2_iters;

  std::ofstream log_out;
  if (!log_path.empty()) {
    log_out.open(log_path, std::ios::app);
    if (!log_out) throw std::runtime_error("cannot open log file " + log_path);
  }

  Eigen::ArrayXd theta = pack_params(ckpt.params);
  TrainResult result;
  for (long t = start; t < end; ++t) {
    double lr = poly_lr(cfg.lr0, t, total_schedule, cfg.lr_power);
    Eigen::ArrayXd grad = Eigen::ArrayXd::Zero(lay.total);
    Granularity g = cycle[t % cycle.size()];

    BatchOut bo;
    if (g == Granularity::PIS) {
      bo = sup_batch(model, ckpt.params, cfg, data, t, lay, grad);
    } else {
      const int B = cfg.batch_size;
      for (int b = 0; b < B; ++b) {
        long pos = t * B + b;
        if (g == Granularity::IIS) {
          const auto& [img, rec] =
              data.iis[stream_index(static_cast<int>(data.iis.size()), cfg.seed ^ 0x9158ULL, pos)];
          weak_record(model, ckpt.params, teacher, cfg, img, rec, pos, lay, grad, bo);
        } else {
          const auto& [img, rec] =
              data.pss[stream_index(static_cast<int>(data.pss.size()), cfg.seed ^ 0x9159ULL, pos)];
          weak_record(model, ckpt.params, teacher, cfg, img, rec, pos, lay, grad, bo);
        }
      }
      bo.total /= B;
      bo.wks /= B;
      bo.consistency /= B;
      bo.specific /= B;
    }
    grad /= cfg.batch_size;
    adamw_step(theta, *ckpt.optim, grad, lr, cfg.weight_decay);
    unpack_params(ckpt.params, theta);
    if (stage == 2) ema_update(teacher, ckpt.params);

    if ((t - start) % cfg.log_every == 0 || t + 1 == end) {
      IterLog il;
      il.iter = t;
      il.stage = stage;
      il.granularity = granularity_name(g);
      il.lr = lr;
      il.total = bo.total;
      il.l_ic = bo.ic;
      il.l_im = bo.im;
      il.l_pm = bo.pm;
      il.l_wks = bo.wks;
      il.consistency = bo.consistency;
      il.specific = bo.specific;
      il.retained = bo.retained;
      il.dropped = bo.dropped;
      result.log.push_back(il);
      if (log_out) log_out << il.to_json() << "\n";
    }
  }

  result.ckpt = std::move(ckpt);
  if (!out_dir.empty()) save_run_checkpoint(result.ckpt, cfg, out_dir);
  return result;
}

}  // namespace

TrainResult train_stage1(const RunConfig& cfg, const DatasetManifest& train,
                         const Checkpoint* init, const std::string& out_dir,
                         const std::string& log_path) {
  return run_training(cfg, train, init, 1, out_dir, log_path);
}

TrainResult train_stage2(const RunConfig& cfg, const DatasetManifest& train,
                         const Checkpoint& init, const std::string& out_dir,
                         const std::string& log_path) {
  return run_training(cfg, train, &init, 2, out_dir, log_path);
}

EvalResult evaluate(const Model& model, const ParamStore& params, const DatasetManifest& manifest,
                    double conf_threshold) {
  EvalResult r;
  std::vector<HardPrediction> pis_preds, iis_preds;
  std::vector<PisRecord> pis_gts, iis_gts;
  std::vector<PssMap> pss_preds, pss_gts;

  for (const auto& e : manifest.records) {
    std::string dir = manifest.record_dir(e);
    ImageF img = load_image_png(dir + "/image.png");
    HardPrediction hard =
        harden(model.forward(img, params), model.config().catalog, conf_threshold);
    switch (e.granularity) {
      case Granularity::PIS:
        pis_preds.push_back(std::move(hard));
        pis_gts.push_back(load_pis(dir));
        break;
      case Granularity::IIS: {
        IisRecord gt = load_iis(dir);
        PisRecord view;  // instrument-level ground truth only
        view.image_id = gt.image_id;
        view.h = gt.h;
        view.w = gt.w;
        view.catalog = gt.catalog;
        view.background = gt.background;
        for (const auto& inst : gt.instances) {
          PisInstance pi;
          pi.id = inst.id;
          pi.class_index = inst.class_index;
          pi.mask = inst.mask;
          view.instances.push_back(std::move(pi));
        }
        iis_preds.push_back(std::move(hard));
        iis_gts.push_back(std::move(view));
        break;
      }
      case Granularity::PSS:
        pss_preds.push_back(pss_from_hard(hard));
        pss_gts.push_back(load_pss(dir));
        break;
    }
  }

  if (!pis_gts.empty()) {
    r.has_pis = true;
    r.pis = evaluate_dataset(pis_preds, pis_gts);
  }
  if (!iis_gts.empty()) {
    r.has_iis = true;
    r.iis_pq = pq(iis_preds, iis_gts);
  }
  if (!pss_gts.empty()) {
    r.has_pss = true;
    r.pss_iou = part_iou_semantic(pss_preds, pss_gts);
  }
  if (!r.has_pis) {
    r.notes.push_back("part_pq omitted: requires PIS ground truth");
    if (!r.has_iis) r.notes.push_back("pq omitted: requires PIS or IIS ground truth");
    if (!r.has_pss) r.notes.push_back("part_iou omitted: requires PIS or PSS ground truth");
  }
  return r;
}

std::string eval_to_json(const EvalResult& r) {
  nlohmann::json j;
  j["notes"] = r.notes;
  if (r.has_pis) j["pis"] = nlohmann::json::parse(report_to_json(r.pis));
  if (r.has_iis) {
    nlohmann::json per = nlohmann::json::array();
    for (size_t c = 0; c < r.iis_pq.per_class.size(); ++c)
      per.push_back({{"value", r.iis_pq.per_class[c]},
                     {"present", static_cast<bool>(r.iis_pq.present[c])}});
    j["iis"] = {{"pq", {{"mean", r.iis_pq.mean}, {"per_class", per}}}};
  }
  if (r.has_pss) {
    nlohmann::json per = nlohmann::json::array();
    for (size_t k = 0; k < r.pss_iou.per_class.size(); ++k)
      per.push_back({{"value", r.pss_iou.per_class[k]},
                     {"present", static_cast<bool>(r.pss_iou.present[k])}});
    j["pss"] = {{"part_iou", {{"mean", r.pss_iou.mean}, {"per_class", per}}}};
  }
  return j.dump(2);
}

std::string eval_to_csv(const EvalResult& r) {
  std::ostringstream out;
  if (r.has_pis) {
    out << report_to_csv(r.pis);
  } else {
    out << "metric,class,value\n";
  }
  if (r.has_iis) out << "iis_pq,mean," << r.iis_pq.mean << "\n";
  if (r.has_pss) out << "pss_part_iou,mean," << r.pss_iou.mean << "\n";
  return out.str();
}

void eval_plot_from_json(const std::string& json_text, const std::string& png_path) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  MetricReport r;
  if (j.contains("pis")) {
    r.part_pq.mean = j["pis"]["part_pq"]["mean"].get<double>();
    r.pq.mean = j["pis"]["pq"]["mean"].get<double>();
    r.part_iou.mean = j["pis"]["part_iou"]["mean"].get<double>();
    r.iss.ch_iou = j["pis"]["iss"]["ch_iou"].get<double>();
    r.iss.isi_iou = j["pis"]["iss"]["isi_iou"].get<double>();
    r.iss.mc_iou = j["pis"]["iss"]["mc_iou"].get<double>();
  }
  if (j.contains("iis")) r.pq.mean = j["iis"]["pq"]["mean"].get<double>();
  if (j.contains("pss")) r.part_iou.mean = j["pss"]["part_iou"]["mean"].get<double>();
  report_plot(r, png_path);
}

PisRecord record_from_hard(const HardPrediction& hard, const std::string& image_id) {
  PisRecord rec;
  rec.image_id = image_id;
  rec.h = hard.h;
  rec.w = hard.w;
  rec.catalog = hard.catalog;
  int next_id = 1;
  for (const auto& inst : hard.instances) {
    PisInstance pi;
    pi.id = next_id++;
    pi.class_index = inst.class_index;
    pi.mask = inst.mask;
    pi.parts = inst.parts;
    rec.instances.push_back(std::move(pi));
  }
  rec.refresh_background();
  return rec;
}

std::vector<std::string> infer(const Model& model, const ParamStore& params,
                               const std::vector<std::string>& image_paths,
                               const std::string& out_dir, double conf_threshold) {
  std::vector<std::string> dirs;
  for (const std::string& path : image_paths) {
    ImageF img = load_image_png(path);
    HardPrediction hard =
        harden(model.forward(img, params), model.config().catalog, conf_threshold);
    std::filesystem::path fp(path);
    std::string id = fp.stem().string();
    // record directories all store "image.png"; fall back to the directory name
    if (id == "image" && fp.has_parent_path()) id = fp.parent_path().filename().string();
    PisRecord rec = record_from_hard(hard, id);
    std::string dir = out_dir + "/" + id;
    store_record(rec, img, dir);
    dirs.push_back(dir);
  }
  return dirs;
}

}  // namespace surgpis
