#pragma once

#include <string>
#include <variant>

#include "surgpis/labels/labels.hpp"

namespace surgpis {

// On-disk layout: one directory per image.
//   image.png         8-bit RGB
//   instance_map.png  16-bit single channel, pixel value = instance id, 0 = background
//   part_map.png      16-bit single channel, pixel value = global part class, 0 = background
//   meta.json         instance id/class declarations + catalog
// PIS = all files present; IIS = no part_map; PSS = no instance_map.

using AnyRecord = std::variant<PisRecord, IisRecord, PssMap>;

Granularity detect_granularity(const std::string& dir);

void store_record(const PisRecord& record, const ImageF& image, const std::string& dir);
void store_record(const IisRecord& record, const ImageF& image, const std::string& dir);
void store_record(const PssMap& record, const ImageF& image, const std::string& dir);

AnyRecord load_record(const std::string& dir);
PisRecord load_pis(const std::string& dir);
IisRecord load_iis(const std::string& dir);
PssMap load_pss(const std::string& dir);

ImageF load_image_png(const std::string& path);
void store_image_png(const ImageF& image, const std::string& path);

}  // namespace surgpis
