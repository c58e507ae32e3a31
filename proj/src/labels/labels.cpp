#include "surgpis/labels/labels.hpp"

#include <numeric>
#include <sstream>
#include <stdexcept>

namespace surgpis {

ClassCatalog ClassCatalog::default_catalog() {
  ClassCatalog c;
  c.instrument_classes = {"forceps", "driver", "scissors", "probe"};
  c.part_classes = {"shaft", "wrist", "clasper"};
  return c;
}

long BinMask::area() const {
  return std::accumulate(v.begin(), v.end(), 0L, [](long s, uint8_t b) { return s + (b != 0); });
}

long intersection_area(const BinMask& a, const BinMask& b) {
  long n = 0;
  for (size_t i = 0; i < a.v.size(); ++i) n += (a.v[i] && b.v[i]);
  return n;
}

long union_area(const BinMask& a, const BinMask& b) {
  long n = 0;
  for (size_t i = 0; i < a.v.size(); ++i) n += (a.v[i] || b.v[i]);
  return n;
}

BinMask mask_and(const BinMask& a, const BinMask& b) {
  BinMask r(a.h, a.w);
  for (size_t i = 0; i < a.v.size(); ++i) r.v[i] = a.v[i] && b.v[i];
  return r;
}

BinMask mask_or(const BinMask& a, const BinMask& b) {
  BinMask r(a.h, a.w);
  for (size_t i = 0; i < a.v.size(); ++i) r.v[i] = a.v[i] || b.v[i];
  return r;
}

BinMask mask_not(const BinMask& a) {
  BinMask r(a.h, a.w);
  for (size_t i = 0; i < a.v.size(); ++i) r.v[i] = !a.v[i];
  return r;
}

void PisRecord::refresh_background() {
  background = BinMask(h, w);
  for (size_t i = 0; i < background.v.size(); ++i) {
    bool fg = false;
    for (const auto& inst : instances) fg = fg || inst.mask.v[i];
    background.v[i] = !fg;
  }
}

std::string ValidationReport::to_string() const {
  if (violations.empty()) return "valid";
  std::ostringstream os;
  for (const auto& v : violations)
    os << v.kind << ": " << v.detail << " (" << v.pixel_count << " px)\n";
  return os.str();
}

ValidationReport validate_pis(const PisRecord& record) {
  ValidationReport report;
  auto flag = [&](std::string kind, std::string detail, long px) {
    report.violations.push_back({std::move(kind), std::move(detail), px});
  };

  const int cpart = record.catalog.num_parts();
  for (size_t a = 0; a < record.instances.size(); ++a) {
    const auto& inst = record.instances[a];
    std::string tag = "instance id " + std::to_string(inst.id);
    if (inst.class_index < 1 || inst.class_index > record.catalog.num_instruments())
      flag("class out of range", tag, 0);
    if (static_cast<int>(inst.parts.size()) != cpart)
      flag("part list size mismatch", tag, 0);

    // part pairwise disjointness
    for (size_t k = 0; k + 1 < inst.parts.size(); ++k)
      for (size_t k2 = k + 1; k2 < inst.parts.size(); ++k2) {
        long px = intersection_area(inst.parts[k], inst.parts[k2]);
        if (px > 0)
          flag("part overlap",
               tag + " parts " + std::to_string(k + 1) + "/" + std::to_string(k2 + 1), px);
      }

    // y_i must equal the union of its parts
    BinMask part_union(record.h, record.w);
    for (const auto& p : inst.parts) part_union = mask_or(part_union, p);
    long mismatch = 0;
    for (size_t i = 0; i < part_union.v.size(); ++i)
      mismatch += (part_union.v[i] != inst.mask.v[i]);
    if (mismatch > 0) flag("instance/part union mismatch", tag, mismatch);

    // instance pairwise disjointness
    for (size_t b = a + 1; b < record.instances.size(); ++b) {
      long px = intersection_area(inst.mask, record.instances[b].mask);
      if (px > 0)
        flag("instance overlap",
             tag + " vs id " + std::to_string(record.instances[b].id), px);
    }

    long bg_px = intersection_area(inst.mask, record.background);
    if (bg_px > 0) flag("background/instance overlap", tag, bg_px);
  }

  // background + instances must cover the image
  BinMask cover = record.background;
  for (const auto& inst : record.instances) cover = mask_or(cover, inst.mask);
  long holes = static_cast<long>(cover.v.size()) - cover.area();
  if (holes > 0) flag("coverage gap", "pixels in no mask", holes);

  return report;
}

IisRecord pis_to_iis(const PisRecord& record) {
  if (!validate_pis(record).empty())
    throw std::invalid_argument("pis_to_iis: invalid record " + record.image_id);
  IisRecord out;
  out.image_id = record.image_id;
  out.h = record.h;
  out.w = record.w;
  out.catalog = record.catalog;
  out.background = record.background;
  for (const auto& inst : record.instances)
    out.instances.push_back({inst.id, inst.class_index, inst.mask});
  return out;
}

PssMap pis_to_pss(const PisRecord& record) {
  if (!validate_pis(record).empty())
    throw std::invalid_argument("pis_to_pss: invalid record " + record.image_id);
  PssMap out(record.h, record.w);
  out.image_id = record.image_id;
  out.catalog = record.catalog;
  for (const auto& inst : record.instances)
    for (size_t k = 0; k < inst.parts.size(); ++k)
      for (size_t p = 0; p < inst.parts[k].v.size(); ++p)
        if (inst.parts[k].v[p]) out.labels[p] = static_cast<uint16_t>(k + 1);
  return out;
}

const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::PIS: return "PIS";
    case Granularity::IIS: return "IIS";
    case Granularity::PSS: return "PSS";
  }
  return "?";
}

Granularity granularity_from_name(const std::string& name) {
  if (name == "PIS") return Granularity::PIS;
  if (name == "IIS") return Granularity::IIS;
  if (name == "PSS") return Granularity::PSS;
  throw std::invalid_argument("unknown granularity: " + name);
}

}  // namespace surgpis
