#include "surgpis/labels/io.hpp"

#include <filesystem>
#include <fstream>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace surgpis {

namespace {

cv::Mat1w to_map16(const std::vector<uint16_t>& v, int h, int w) {
  cv::Mat1w m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m(y, x) = v[static_cast<size_t>(y) * w + x];
  return m;
}

cv::Mat1w read_map16(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw std::runtime_error("cannot read " + path);
  if (m.type() != CV_16UC1) throw std::runtime_error("expected 16-bit single channel: " + path);
  return m;
}

json catalog_to_json(const ClassCatalog& c) {
  return json{{"instrument_classes", c.instrument_classes}, {"part_classes", c.part_classes}};
}

ClassCatalog catalog_from_json(const json& j) {
  ClassCatalog c;
  c.instrument_classes = j.at("instrument_classes").get<std::vector<std::string>>();
  c.part_classes = j.at("part_classes").get<std::vector<std::string>>();
  return c;
}

json load_meta(const std::string& dir) {
  std::ifstream in(dir + "/meta.json");
  if (!in) throw std::runtime_error("missing meta.json in " + dir);
  json j;
  in >> j;
  return j;
}

void write_meta(const json& j, const std::string& dir) {
  std::ofstream out(dir + "/meta.json");
  out << j.dump(2) << "\n";
}

int class_index_of(const ClassCatalog& catalog, const std::string& name, const std::string& dir) {
  for (size_t i = 0; i < catalog.instrument_classes.size(); ++i)
    if (catalog.instrument_classes[i] == name) return static_cast<int>(i + 1);
  throw std::runtime_error("class name '" + name + "' absent from catalog (" + dir + ")");
}

struct MetaInstances {
  std::vector<std::pair<int, int>> id_class;  // (id, class index), in meta order
};

MetaInstances parse_instances(const json& meta, const ClassCatalog& catalog,
                              const std::string& dir) {
  MetaInstances out;
  for (const auto& e : meta.at("instances")) {
    int id = e.at("id").get<int>();
    out.id_class.emplace_back(id, class_index_of(catalog, e.at("class").get<std::string>(), dir));
  }
  return out;
}

void store_common(const ImageF& image, const std::string& dir) {
  fs::create_directories(dir);
  store_image_png(image, dir + "/image.png");
}

}  // namespace

Granularity detect_granularity(const std::string& dir) {
  bool has_instance = fs::exists(dir + "/instance_map.png");
  bool has_part = fs::exists(dir + "/part_map.png");
  if (has_instance && has_part) return Granularity::PIS;
  if (has_instance) return Granularity::IIS;
  if (has_part) return Granularity::PSS;
  throw std::runtime_error("no label maps found in " + dir);
}

void store_record(const PisRecord& record, const ImageF& image, const std::string& dir) {
  store_common(image, dir);
  std::vector<uint16_t> inst_map(static_cast<size_t>(record.h) * record.w, 0);
  std::vector<uint16_t> part_map(static_cast<size_t>(record.h) * record.w, 0);
  json insts = json::array();
  for (const auto& inst : record.instances) {
    for (size_t p = 0; p < inst.mask.v.size(); ++p)
      if (inst.mask.v[p]) inst_map[p] = static_cast<uint16_t>(inst.id);
    for (size_t k = 0; k < inst.parts.size(); ++k)
      for (size_t p = 0; p < inst.parts[k].v.size(); ++p)
        if (inst.parts[k].v[p]) part_map[p] = static_cast<uint16_t>(k + 1);
    insts.push_back({{"id", inst.id},
                     {"class", record.catalog.instrument_classes[inst.class_index - 1]}});
  }
  cv::imwrite(dir + "/instance_map.png", to_map16(inst_map, record.h, record.w));
  cv::imwrite(dir + "/part_map.png", to_map16(part_map, record.h, record.w));
  write_meta(json{{"image_id", record.image_id},
                  {"height", record.h},
                  {"width", record.w},
                  {"catalog", catalog_to_json(record.catalog)},
                  {"instances", insts}},
             dir);
}

void store_record(const IisRecord& record, const ImageF& image, const std::string& dir) {
  store_common(image, dir);
  std::vector<uint16_t> inst_map(static_cast<size_t>(record.h) * record.w, 0);
  json insts = json::array();
  for (const auto& inst : record.instances) {
    for (size_t p = 0; p < inst.mask.v.size(); ++p)
      if (inst.mask.v[p]) inst_map[p] = static_cast<uint16_t>(inst.id);
    insts.push_back({{"id", inst.id},
                     {"class", record.catalog.instrument_classes[inst.class_index - 1]}});
  }
  cv::imwrite(dir + "/instance_map.png", to_map16(inst_map, record.h, record.w));
  write_meta(json{{"image_id", record.image_id},
                  {"height", record.h},
                  {"width", record.w},
                  {"catalog", catalog_to_json(record.catalog)},
                  {"instances", insts}},
             dir);
}

void store_record(const PssMap& record, const ImageF& image, const std::string& dir) {
  store_common(image, dir);
  cv::imwrite(dir + "/part_map.png", to_map16(record.labels, record.h, record.w));
  write_meta(json{{"image_id", record.image_id},
                  {"height", record.h},
                  {"width", record.w},
                  {"catalog", catalog_to_json(record.catalog)},
                  {"instances", json::array()}},
             dir);
}

PisRecord load_pis(const std::string& dir) {
  json meta = load_meta(dir);
  PisRecord rec;
  rec.image_id = meta.at("image_id").get<std::string>();
  rec.catalog = catalog_from_json(meta.at("catalog"));
  cv::Mat1w inst_map = read_map16(dir + "/instance_map.png");
  cv::Mat1w part_map = read_map16(dir + "/part_map.png");
  rec.h = inst_map.rows;
  rec.w = inst_map.cols;
  if (part_map.rows != rec.h || part_map.cols != rec.w)
    throw std::runtime_error("instance/part map size mismatch in " + dir);

  MetaInstances mi = parse_instances(meta, rec.catalog, dir);
  const int cpart = rec.catalog.num_parts();
  for (auto [id, cls] : mi.id_class) {
    PisInstance inst;
    inst.id = id;
    inst.class_index = cls;
    inst.mask = BinMask(rec.h, rec.w);
    inst.parts.assign(cpart, BinMask(rec.h, rec.w));
    rec.instances.push_back(std::move(inst));
  }
  auto find_instance = [&](int id) -> PisInstance& {
    for (auto& inst : rec.instances)
      if (inst.id == id) return inst;
    throw std::runtime_error("undeclared instance id " + std::to_string(id) + " in " + dir);
  };
  for (int y = 0; y < rec.h; ++y)
    for (int x = 0; x < rec.w; ++x) {
      int id = inst_map(y, x);
      int part = part_map(y, x);
      if (part > cpart)
        throw std::runtime_error("part value " + std::to_string(part) + " out of range in " + dir);
      if (id == 0) continue;
      PisInstance& inst = find_instance(id);
      inst.mask.at(y, x) = 1;
      if (part > 0) inst.parts[part - 1].at(y, x) = 1;
    }
  rec.refresh_background();
  return rec;
}

IisRecord load_iis(const std::string& dir) {
  json meta = load_meta(dir);
  IisRecord rec;
  rec.image_id = meta.at("image_id").get<std::string>();
  rec.catalog = catalog_from_json(meta.at("catalog"));
  cv::Mat1w inst_map = read_map16(dir + "/instance_map.png");
  rec.h = inst_map.rows;
  rec.w = inst_map.cols;
  MetaInstances mi = parse_instances(meta, rec.catalog, dir);
  for (auto [id, cls] : mi.id_class) rec.instances.push_back({id, cls, BinMask(rec.h, rec.w)});
  auto find_instance = [&](int id) -> IisInstance& {
    for (auto& inst : rec.instances)
      if (inst.id == id) return inst;
    throw std::runtime_error("undeclared instance id " + std::to_string(id) + " in " + dir);
  };
  for (int y = 0; y < rec.h; ++y)
    for (int x = 0; x < rec.w; ++x)
      if (int id = inst_map(y, x); id != 0) find_instance(id).mask.at(y, x) = 1;
  rec.background = BinMask(rec.h, rec.w);
  for (size_t p = 0; p < rec.background.v.size(); ++p) {
    bool fg = false;
    for (const auto& inst : rec.instances) fg = fg || inst.mask.v[p];
    rec.background.v[p] = !fg;
  }
  return rec;
}

PssMap load_pss(const std::string& dir) {
  json meta = load_meta(dir);
  cv::Mat1w part_map = read_map16(dir + "/part_map.png");
  PssMap rec(part_map.rows, part_map.cols);
  rec.image_id = meta.at("image_id").get<std::string>();
  rec.catalog = catalog_from_json(meta.at("catalog"));
  const int cpart = rec.catalog.num_parts();
  for (int y = 0; y < rec.h; ++y)
    for (int x = 0; x < rec.w; ++x) {
      int part = part_map(y, x);
      if (part > cpart)
        throw std::runtime_error("part value " + std::to_string(part) + " out of range in " + dir);
      rec.at(y, x) = static_cast<uint16_t>(part);
    }
  return rec;
}

AnyRecord load_record(const std::string& dir) {
  switch (detect_granularity(dir)) {
    case Granularity::PIS: return load_pis(dir);
    case Granularity::IIS: return load_iis(dir);
    case Granularity::PSS: return load_pss(dir);
  }
  throw std::logic_error("unreachable");
}

ImageF load_image_png(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) throw std::runtime_error("cannot read image " + path);
  ImageF img(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      cv::Vec3b bgr = m.at<cv::Vec3b>(y, x);
      img.at(0, y, x) = bgr[2] / 255.0;
      img.at(1, y, x) = bgr[1] / 255.0;
      img.at(2, y, x) = bgr[0] / 255.0;
    }
  return img;
}

void store_image_png(const ImageF& image, const std::string& path) {
  cv::Mat3b m(image.h, image.w);
  auto q = [](double v) {
    return static_cast<uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  };
  for (int y = 0; y < image.h; ++y)
    for (int x = 0; x < image.w; ++x)
      m(y, x) = cv::Vec3b(q(image.at(2, y, x)), q(image.at(1, y, x)), q(image.at(0, y, x)));
  if (!cv::imwrite(path, m)) throw std::runtime_error("cannot write image " + path);
}

}  // namespace surgpis
