#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "surgpis/labels/labels.hpp"

namespace surgpis {

// Generator of instrument-like scenes: an elongated shaft, a wider wrist
// segment and a two-prong clasper, rotated and translated at random. Classes
// share the part structure and differ by colour family. Pure function of
// (spec, index).
struct SceneSpec {
  int h = 64, w = 64;
  int min_instruments = 0;
  int max_instruments = 3;
  ClassCatalog catalog = ClassCatalog::default_catalog();
  double background_noise = 0.08;
  uint64_t seed = 0;

  void check() const;  // throws on invalid spec
};

struct Scene {
  ImageF image;
  PisRecord record;
};

Scene generate_scene(const SceneSpec& spec, int index);

struct ManifestEntry {
  std::string image_id;
  Granularity granularity = Granularity::PIS;
  std::string path;  // record directory, relative to the manifest file
};

struct DatasetManifest {
  std::string split;
  uint64_t seed = 0;
  std::vector<ManifestEntry> records;

  // directory the manifest was loaded from / will be stored in
  std::string root;

  std::string record_dir(const ManifestEntry& e) const { return root + "/" + e.path; }
  std::vector<ManifestEntry> by_granularity(Granularity g) const;
};

DatasetManifest generate_dataset(const SceneSpec& spec, int n,
                                 const std::map<Granularity, double>& granularity_mix,
                                 const std::string& out_dir, const std::string& split_name);

void store_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

}  // namespace surgpis
