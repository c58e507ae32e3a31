#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace surgpis {

// Ordered class names. Instrument class indices are 1-based in records
// (0 = tissue background); part class indices likewise (0 = background).
struct ClassCatalog {
  std::vector<std::string> instrument_classes;
  std::vector<std::string> part_classes;

  int num_instruments() const { return static_cast<int>(instrument_classes.size()); }
  int num_parts() const { return static_cast<int>(part_classes.size()); }
  int num_inp() const { return num_instruments() + 1; }

  bool operator==(const ClassCatalog&) const = default;

  static ClassCatalog default_catalog();
};

struct BinMask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;  // 0/1

  BinMask() = default;
  BinMask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  long area() const;
  bool empty_mask() const { return area() == 0; }
  bool operator==(const BinMask&) const = default;
};

long intersection_area(const BinMask& a, const BinMask& b);
long union_area(const BinMask& a, const BinMask& b);
BinMask mask_and(const BinMask& a, const BinMask& b);
BinMask mask_or(const BinMask& a, const BinMask& b);
BinMask mask_not(const BinMask& a);

// Planar RGB image, channels-first, values in [0, 1].
struct ImageF {
  int h = 0, w = 0;
  std::vector<double> data;  // [3, h, w]

  ImageF() = default;
  ImageF(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(3) * h_ * w_, 0.0) {}
  double& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * h + y) * w + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * h + y) * w + x];
  }
  bool operator==(const ImageF&) const = default;
};

struct PisInstance {
  int id = 0;           // id used in the on-disk instance map
  int class_index = 0;  // 1..C^instr
  BinMask mask;
  std::vector<BinMask> parts;  // size C^part, some possibly empty
  bool operator==(const PisInstance&) const = default;
};

struct PisRecord {
  std::string image_id;
  int h = 0, w = 0;
  ClassCatalog catalog;
  BinMask background;  // y_0, class index 0
  std::vector<PisInstance> instances;
  bool operator==(const PisRecord&) const = default;

  // recompute y_0 as the complement of the instance union
  void refresh_background();
};

struct IisInstance {
  int id = 0;
  int class_index = 0;
  BinMask mask;
  bool operator==(const IisInstance&) const = default;
};

struct IisRecord {
  std::string image_id;
  int h = 0, w = 0;
  ClassCatalog catalog;
  BinMask background;
  std::vector<IisInstance> instances;
  bool operator==(const IisRecord&) const = default;
};

struct PssMap {
  std::string image_id;
  int h = 0, w = 0;
  ClassCatalog catalog;
  std::vector<uint16_t> labels;  // per-pixel part class, 0 = background

  PssMap() = default;
  PssMap(int h_, int w_) : h(h_), w(w_), labels(static_cast<size_t>(h_) * w_, 0) {}
  uint16_t& at(int y, int x) { return labels[static_cast<size_t>(y) * w + x]; }
  uint16_t at(int y, int x) const { return labels[static_cast<size_t>(y) * w + x]; }
  bool operator==(const PssMap&) const = default;
};

struct Violation {
  std::string kind;
  std::string detail;
  long pixel_count = 0;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool empty() const { return violations.empty(); }
  std::string to_string() const;
};

// Structural invariant checks; never throws.
ValidationReport validate_pis(const PisRecord& record);

// Granularity conversions. Both reject records that fail validate_pis.
IisRecord pis_to_iis(const PisRecord& record);
PssMap pis_to_pss(const PisRecord& record);

enum class Granularity { PIS, IIS, PSS };
const char* granularity_name(Granularity g);
Granularity granularity_from_name(const std::string& name);

}  // namespace surgpis
