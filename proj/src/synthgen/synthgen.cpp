#include "surgpis/synthgen/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "surgpis/core/rng.hpp"
#include "surgpis/labels/io.hpp"

using nlohmann::json;

namespace surgpis {

void SceneSpec::check() const {
  if (h < 16 || w < 16) throw std::invalid_argument("scene spec: H, W must be >= 16");
  if (min_instruments < 0 || max_instruments < min_instruments)
    throw std::invalid_argument("scene spec: bad instrument count range");
  if (catalog.num_parts() < 3)
    throw std::invalid_argument("scene spec: catalog needs shaft/wrist/clasper part slots");
  // minimal visible footprint of one instrument is roughly 130 px
  if (max_instruments > 0 && 130L * max_instruments > 9L * h * w / 10)
    throw std::invalid_argument("scene spec: instruments cannot fit the image");
}

namespace {

struct InstrumentShape {
  double cx, cy;     // centre
  double ux, uy;     // axis direction (unit)
  double len;        // total length along the axis
  double half_w;     // shaft half width
  int class_index;   // 1-based

  // part id at a pixel: 0 none, 1 shaft, 2 wrist, 3 clasper
  int part_at(double px, double py) const {
    double dx = px - (cx - ux * len / 2.0);
    double dy = py - (cy - uy * len / 2.0);
    double t = dx * ux + dy * uy;         // along axis, 0..len
    double s = -dx * uy + dy * ux;        // across axis
    if (t < 0.0 || t > len) return 0;
    if (t < 0.55 * len) {
      return std::abs(s) <= half_w ? 1 : 0;
    }
    if (t < 0.75 * len) {
      return std::abs(s) <= half_w * 1.45 ? 2 : 0;
    }
    // clasper: two diverging prongs
    double f = (t - 0.75 * len) / (0.25 * len);  // 0..1 towards the tip
    double offset = f * half_w * 1.6;
    double prong_hw = half_w * 0.45;
    if (std::abs(s - offset) <= prong_hw || std::abs(s + offset) <= prong_hw) return 3;
    return 0;
  }
};

// colour families per class, shared part structure
constexpr double kBaseColors[][3] = {
    {0.75, 0.35, 0.30},  // reddish
    {0.30, 0.65, 0.35},  // green
    {0.30, 0.40, 0.80},  // blue
    {0.75, 0.70, 0.30},  // yellow
    {0.65, 0.35, 0.70},  // violet
    {0.30, 0.70, 0.70},  // teal
};
constexpr int kNumBaseColors = 6;
constexpr double kPartBrightness[] = {0.65, 0.95, 1.25};  // shaft, wrist, clasper

}  // namespace

Scene generate_scene(const SceneSpec& spec, int index) {
  spec.check();
  Rng rng = Rng::derive(spec.seed, static_cast<uint64_t>(index));

  const int h = spec.h, w = spec.w;
  const int cinstr = spec.catalog.num_instruments();
  const int cpart = spec.catalog.num_parts();

  int count = rng.randint(spec.min_instruments, spec.max_instruments);
  std::vector<InstrumentShape> shapes;
  for (int i = 0; i < count; ++i) {
    InstrumentShape sh;
    sh.cx = rng.uniform(0.2 * w, 0.8 * w);
    sh.cy = rng.uniform(0.2 * h, 0.8 * h);
    double angle = rng.uniform(0.0, 2.0 * M_PI);
    sh.ux = std::cos(angle);
    sh.uy = std::sin(angle);
    double max_len = 0.7 * std::min(h, w);
    sh.len = rng.uniform(0.55 * max_len, max_len);
    sh.half_w = rng.uniform(2.4, 4.2);
    sh.class_index = 1 + static_cast<int>(rng.next_u64() % static_cast<uint64_t>(cinstr));
    shapes.push_back(sh);
  }

  // per-pixel ownership: later instrument wins
  std::vector<int> owner(static_cast<size_t>(h) * w, -1);
  std::vector<int> part_id(static_cast<size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t p = static_cast<size_t>(y) * w + x;
      for (int i = 0; i < count; ++i) {
        int part = shapes[i].part_at(x + 0.5, y + 0.5);
        if (part > 0) {
          owner[p] = i;
          part_id[p] = part;
        }
      }
    }

  // image: textured noise background + class-coloured instruments
  ImageF img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t p = static_cast<size_t>(y) * w + x;
      double base[3];
      if (owner[p] < 0) {
        double g = 0.35 + 0.10 * std::sin(0.21 * x) * std::cos(0.17 * y);
        base[0] = base[1] = base[2] = g;
      } else {
        const double* c = kBaseColors[(shapes[owner[p]].class_index - 1) % kNumBaseColors];
        double bright = kPartBrightness[part_id[p] - 1];
        for (int ch = 0; ch < 3; ++ch) base[ch] = c[ch] * bright;
      }
      for (int ch = 0; ch < 3; ++ch) {
        double noise = rng.uniform(-spec.background_noise, spec.background_noise);
        img.at(ch, y, x) = std::clamp(base[ch] + noise, 0.0, 1.0);
      }
    }

  PisRecord rec;
  rec.image_id = "img_" + std::to_string(index);
  rec.h = h;
  rec.w = w;
  rec.catalog = spec.catalog;
  std::vector<long> visible(count, 0);
  for (size_t p = 0; p < owner.size(); ++p)
    if (owner[p] >= 0) ++visible[owner[p]];
  int next_id = 1;
  for (int i = 0; i < count; ++i) {
    if (visible[i] < 12) continue;  // fully or nearly fully occluded
    PisInstance inst;
    inst.id = next_id++;
    inst.class_index = shapes[i].class_index;
    inst.mask = BinMask(h, w);
    inst.parts.assign(cpart, BinMask(h, w));
    for (size_t p = 0; p < owner.size(); ++p)
      if (owner[p] == i) {
        inst.mask.v[p] = 1;
        inst.parts[part_id[p] - 1].v[p] = 1;
      }
    rec.instances.push_back(std::move(inst));
  }
  rec.refresh_background();
  return {std::move(img), std::move(rec)};
}

std::vector<ManifestEntry> DatasetManifest::by_granularity(Granularity g) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : records)
    if (e.granularity == g) out.push_back(e);
  return out;
}

DatasetManifest generate_dataset(const SceneSpec& spec, int n,
                                 const std::map<Granularity, double>& granularity_mix,
                                 const std::string& out_dir, const std::string& split_name) {
  double total = 0;
  for (const auto& [g, f] : granularity_mix) total += f;
  if (std::abs(total - 1.0) > 1e-9)
    throw std::invalid_argument("granularity mix fractions must sum to 1");

  // largest-remainder apportionment of n records across granularities
  std::vector<std::pair<Granularity, double>> mix(granularity_mix.begin(), granularity_mix.end());
  std::vector<int> counts(mix.size(), 0);
  std::vector<std::pair<double, size_t>> remainders;
  int assigned = 0;
  for (size_t i = 0; i < mix.size(); ++i) {
    double exact = mix[i].second * n;
    counts[i] = static_cast<int>(std::floor(exact));
    assigned += counts[i];
    remainders.push_back({exact - counts[i], i});
  }
  std::sort(remainders.begin(), remainders.end(),
            [](auto& a, auto& b) { return a.first > b.first; });
  for (int k = 0; k < n - assigned; ++k) ++counts[remainders[k].second];

  std::vector<Granularity> assignment;
  for (size_t i = 0; i < mix.size(); ++i)
    assignment.insert(assignment.end(), counts[i], mix[i].first);
  // deterministic shuffle so granularities are not positional
  Rng shuffle_rng = Rng::derive(spec.seed, 0x51ULL);
  for (size_t i = assignment.size(); i > 1; --i)
    std::swap(assignment[i - 1], assignment[shuffle_rng.next_u64() % i]);

  DatasetManifest manifest;
  manifest.split = split_name;
  manifest.seed = spec.seed;
  manifest.root = out_dir;
  for (int i = 0; i < n; ++i) {
    Scene scene = generate_scene(spec, i);
    std::string rel = scene.record.image_id;
    std::string dir = out_dir + "/" + rel;
    switch (assignment[i]) {
      case Granularity::PIS:
        store_record(scene.record, scene.image, dir);
        break;
      case Granularity::IIS:
        store_record(pis_to_iis(scene.record), scene.image, dir);
        break;
      case Granularity::PSS:
        store_record(pis_to_pss(scene.record), scene.image, dir);
        break;
    }
    manifest.records.push_back({scene.record.image_id, assignment[i], rel});
  }
  store_manifest(manifest, out_dir + "/manifest.json");
  return manifest;
}

void store_manifest(const DatasetManifest& m, const std::string& path) {
  json recs = json::array();
  for (const auto& e : m.records)
    recs.push_back({{"image_id", e.image_id},
                    {"granularity", granularity_name(e.granularity)},
                    {"path", e.path}});
  json j{{"split", m.split}, {"seed", m.seed}, {"records", recs}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path);
  out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path);
  json j;
  in >> j;
  DatasetManifest m;
  m.split = j.at("split").get<std::string>();
  m.seed = j.at("seed").get<uint64_t>();
  auto slash = path.find_last_of('/');
  m.root = slash == std::string::npos ? "." : path.substr(0, slash);
  for (const auto& e : j.at("records")) {
    ManifestEntry entry;
    entry.image_id = e.at("image_id").get<std::string>();
    entry.granularity = granularity_from_name(e.at("granularity").get<std::string>());
    entry.path = e.at("path").get<std::string>();
    m.records.push_back(std::move(entry));
  }
  return m;
}

}  // namespace surgpis
