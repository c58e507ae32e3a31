#include "surgpis/net/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace surgpis {

namespace {

constexpr int kFormatVersion = 1;

json config_to_json(const NetConfig& c) {
  return json{{"embed_dim", c.embed_dim},
              {"num_queries", c.num_queries},
              {"decoder_layers", c.decoder_layers},
              {"attn_heads", c.attn_heads},
              {"stem_channels", c.stem_channels},
              {"part_query_mode", c.part_query_mode},
              {"catalog",
               {{"instrument_classes", c.catalog.instrument_classes},
                {"part_classes", c.catalog.part_classes}}}};
}

NetConfig config_from_json(const json& j) {
  NetConfig c;
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_queries = j.at("num_queries").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.attn_heads = j.at("attn_heads").get<int>();
  c.stem_channels = j.at("stem_channels").get<int>();
  c.part_query_mode = j.at("part_query_mode").get<std::string>();
  c.catalog.instrument_classes =
      j.at("catalog").at("instrument_classes").get<std::vector<std::string>>();
  c.catalog.part_classes = j.at("catalog").at("part_classes").get<std::vector<std::string>>();
  c.check();
  return c;
}

void write_doubles(const std::string& path, const double* data, long n) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  if (!out) throw std::runtime_error("short write to " + path);
}

void read_doubles(const std::string& path, double* data, long n) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot read " + path);
  if (in.tellg() != static_cast<std::streamoff>(n * sizeof(double)))
    throw std::runtime_error("size mismatch in " + path);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error("short read from " + path);
}

}  // namespace

Eigen::ArrayXd pack_params(const ParamStore& ps) {
  Eigen::ArrayXd flat(ps.total_size());
  long off = 0;
  for (const auto& [name, t] : ps.entries()) {
    flat.segment(off, t.numel()) = t.data;
    off += t.numel();
  }
  return flat;
}

void unpack_params(ParamStore& ps, const Eigen::ArrayXd& flat) {
  if (flat.size() != ps.total_size())
    throw std::invalid_argument("parameter vector size mismatch");
  long off = 0;
  for (auto& [name, t] : ps.entries()) {
    t.data = flat.segment(off, t.numel());
    off += t.numel();
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& dir) {
  fs::create_directories(dir);
  json table = json::array();
  for (const auto& [name, t] : ckpt.params.entries())
    table.push_back(json{{"name", name}, {"shape", t.shape}});
  json manifest{{"format_version", kFormatVersion},
                {"dtype", "float64-le"},
                {"config", config_to_json(ckpt.config)},
                {"params", table},
                {"has_optim", ckpt.optim.has_value()}};
  if (ckpt.optim) manifest["optim_step"] = ckpt.optim->step;
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw std::runtime_error("cannot write " + dir + "/manifest.json");
  out << manifest.dump(2) << "\n";

  Eigen::ArrayXd flat = pack_params(ckpt.params);
  write_doubles(dir + "/params.bin", flat.data(), flat.size());
  if (ckpt.optim) {
    const auto& o = *ckpt.optim;
    if (o.m.size() != flat.size() || o.v.size() != flat.size())
      throw std::invalid_argument("optimizer state size mismatch");
    Eigen::ArrayXd mv(2 * flat.size());
    mv << o.m, o.v;
    write_doubles(dir + "/optim.bin", mv.data(), mv.size());
  }
}

Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw std::runtime_error("missing manifest.json in " + dir);
  json manifest;
  in >> manifest;
  if (manifest.at("format_version").get<int>() != kFormatVersion)
    throw std::runtime_error("unsupported checkpoint format version in " + dir);

  Checkpoint ckpt;
  ckpt.config = config_from_json(manifest.at("config"));
  for (const auto& e : manifest.at("params"))
    ckpt.params.add(e.at("name").get<std::string>(), e.at("shape").get<std::vector<int>>());

  Eigen::ArrayXd flat(ckpt.params.total_size());
  read_doubles(dir + "/params.bin", flat.data(), flat.size());
  unpack_params(ckpt.params, flat);

  if (manifest.at("has_optim").get<bool>()) {
    OptimState o;
    o.step = manifest.at("optim_step").get<long>();
    Eigen::ArrayXd mv(2 * flat.size());
    read_doubles(dir + "/optim.bin", mv.data(), mv.size());
    o.m = mv.head(flat.size());
    o.v = mv.tail(flat.size());
    ckpt.optim = std::move(o);
  }
  return ckpt;
}

}  // namespace surgpis
