#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <fstream>

#include "doctest.h"
#include "surgpis/core/rng.hpp"
#include "surgpis/labels/io.hpp"
#include "surgpis/labels/labels.hpp"
#include "test_helpers.hpp"

using namespace surgpis;
using namespace testhelpers;

TEST_CASE("valid record yields empty report") {
  PisRecord rec = simple_record();
  CHECK(validate_pis(rec).empty());
}

TEST_CASE("part overlap of one pixel is flagged") {
  PisRecord rec = simple_record();
  // copy one shaft pixel into the wrist mask
  rec.instances[0].parts[1].at(1, 1) = 1;  // already in parts[0]
  ValidationReport r = validate_pis(rec);
  REQUIRE(!r.empty());
  bool found = false;
  for (const auto& v : r.violations)
    if (v.kind == "part overlap" && v.pixel_count == 1) found = true;
  CHECK(found);
}

TEST_CASE("instance/part union mismatch of one pixel is flagged") {
  PisRecord rec = simple_record();
  // remove a pixel from every part but keep it in the instance mask
  for (auto& p : rec.instances[0].parts) p.at(2, 2) = 0;
  // brute-force oracle: recompute the union pixelwise
  BinMask u(rec.h, rec.w);
  for (const auto& p : rec.instances[0].parts) u = mask_or(u, p);
  long expected_mismatch = 0;
  for (size_t i = 0; i < u.v.size(); ++i)
    expected_mismatch += (u.v[i] != rec.instances[0].mask.v[i]);
  REQUIRE(expected_mismatch == 1);

  ValidationReport r = validate_pis(rec);
  bool found = false;
  for (const auto& v : r.violations)
    if (v.kind == "instance/part union mismatch" && v.pixel_count == expected_mismatch)
      found = true;
  CHECK(found);
}

TEST_CASE("single-pixel corruptions are always detected") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    PisRecord rec = simple_record();
    auto& inst = rec.instances[rng.next_u64() % rec.instances.size()];
    int y = rng.randint(0, rec.h - 1), x = rng.randint(0, rec.w - 1);
    int mode = rng.randint(0, 2);
    if (mode == 0) {
      inst.mask.at(y, x) ^= 1;
    } else if (mode == 1) {
      inst.parts[rng.next_u64() % inst.parts.size()].at(y, x) ^= 1;
    } else {
      rec.background.at(y, x) ^= 1;
    }
    CHECK(!validate_pis(rec).empty());
  }
}

TEST_CASE("pis_to_iis projects instances and drops parts") {
  PisRecord empty;
  empty.image_id = "e";
  empty.h = empty.w = 4;
  empty.catalog = ClassCatalog::default_catalog();
  empty.refresh_background();
  CHECK(pis_to_iis(empty).instances.empty());

  PisRecord rec = simple_record();
  IisRecord iis = pis_to_iis(rec);
  REQUIRE(iis.instances.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(iis.instances[i].mask == rec.instances[i].mask);
    CHECK(iis.instances[i].class_index == rec.instances[i].class_index);
  }
}

TEST_CASE("pis_to_pss matches per-pixel hand computation") {
  PisRecord rec;
  rec.image_id = "t4";
  rec.h = rec.w = 4;
  rec.catalog = ClassCatalog::default_catalog();
  PisInstance inst;
  inst.id = 1;
  inst.class_index = 2;
  inst.mask = BinMask(4, 4);
  inst.parts.assign(3, BinMask(4, 4));
  inst.parts[0].at(0, 0) = inst.parts[0].at(0, 1) = 1;
  inst.parts[1].at(0, 2) = 1;
  inst.mask.at(0, 0) = inst.mask.at(0, 1) = inst.mask.at(0, 2) = 1;
  rec.instances.push_back(inst);
  rec.refresh_background();

  PssMap pss = pis_to_pss(rec);
  CHECK(pss.at(0, 0) == 1);
  CHECK(pss.at(0, 1) == 1);
  CHECK(pss.at(0, 2) == 2);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      if (!(y == 0 && x <= 2)) CHECK(pss.at(y, x) == 0);
}

TEST_CASE("shaft masks of two instances share the shaft class") {
  PisRecord rec = simple_record();
  PssMap pss = pis_to_pss(rec);
  // both instances' parts[0] pixels must be class 1
  for (const auto& inst : rec.instances)
    for (int y = 0; y < rec.h; ++y)
      for (int x = 0; x < rec.w; ++x)
        if (inst.parts[0].at(y, x)) CHECK(pss.at(y, x) == 1);
}

TEST_CASE("foreground pixel count is conserved by pis_to_pss") {
  PisRecord rec = simple_record();
  PssMap pss = pis_to_pss(rec);
  long fg = 0;
  for (auto l : pss.labels) fg += (l != 0);
  long total = 0;
  for (const auto& inst : rec.instances) total += inst.mask.area();
  CHECK(fg == total);
}

TEST_CASE("store/load round trip is the identity") {
  TempDir tmp("labels_rt");
  PisRecord rec = simple_record();
  ImageF img(rec.h, rec.w);
  for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = (i % 7) / 7.0;
  store_record(rec, img, tmp.path() + "/r0");
  CHECK(detect_granularity(tmp.path() + "/r0") == Granularity::PIS);
  PisRecord back = load_pis(tmp.path() + "/r0");
  CHECK(back == rec);

  // serialization does not perturb conversion
  CHECK(pis_to_iis(back) == pis_to_iis(rec));
  CHECK(pis_to_pss(back) == pis_to_pss(rec));
}

TEST_CASE("granularity detection from files present") {
  TempDir tmp("labels_gran");
  PisRecord rec = simple_record();
  ImageF img(rec.h, rec.w);
  store_record(pis_to_pss(rec), img, tmp.path() + "/pss");
  CHECK(detect_granularity(tmp.path() + "/pss") == Granularity::PSS);
  CHECK(std::holds_alternative<PssMap>(load_record(tmp.path() + "/pss")));
  store_record(pis_to_iis(rec), img, tmp.path() + "/iis");
  CHECK(detect_granularity(tmp.path() + "/iis") == Granularity::IIS);
  CHECK(std::holds_alternative<IisRecord>(load_record(tmp.path() + "/iis")));
}

TEST_CASE("undeclared instance id is a load error") {
  TempDir tmp("labels_badid");
  PisRecord rec = simple_record();
  ImageF img(rec.h, rec.w);
  store_record(rec, img, tmp.path() + "/r0");
  // drop one instance from meta.json while its id remains in the map
  {
    std::ifstream in(tmp.path() + "/r0/meta.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto pos = text.find("{\"class\":\"probe\",\"id\":2}");
    if (pos == std::string::npos) {
      // formatting-independent fallback: rewrite meta with one instance
      std::ofstream out(tmp.path() + "/r0/meta.json");
      out << R"({"image_id":"test","height":8,"width":8,
                 "catalog":{"instrument_classes":["forceps","driver","scissors","probe"],
                            "part_classes":["shaft","wrist","clasper"]},
                 "instances":[{"id":1,"class":"forceps"}]})";
    }
  }
  CHECK_THROWS_WITH_AS(load_pis(tmp.path() + "/r0"), doctest::Contains("undeclared instance id"),
                       std::runtime_error);
}

TEST_CASE("class name absent from catalog is a load error") {
  TempDir tmp("labels_badclass");
  PisRecord rec = simple_record();
  ImageF img(rec.h, rec.w);
  store_record(rec, img, tmp.path() + "/r0");
  {
    std::ofstream out(tmp.path() + "/r0/meta.json");
    out << R"({"image_id":"test","height":8,"width":8,
               "catalog":{"instrument_classes":["forceps","driver","scissors","probe"],
                          "part_classes":["shaft","wrist","clasper"]},
               "instances":[{"id":1,"class":"laser"},{"id":2,"class":"scissors"}]})";
  }
  CHECK_THROWS_WITH_AS(load_pis(tmp.path() + "/r0"), doctest::Contains("absent from catalog"),
                       std::runtime_error);
}
